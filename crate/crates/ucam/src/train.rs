//! Training, evaluation, and analysis drivers on top of the step function.
//!
//! Run directory layout:
//!
//! ```text
//! <run>/
//!   config.json      resolved run configuration
//!   checkpoint.json  parameter manifest
//!   checkpoint.bin   little-endian f64 blob
//!   losses.csv       one row per step: step,mode,l_y,l_p,l_ve,l_udl,l_u,c_total
//!   metrics.json     final validation metrics + uncertainty statistics
//!   explain/         written by the explain command
//!   analyze/         written by the analyze command
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{self, VqaRecord};
use crate::gca::{self, Optimizers, TrainExample};
use crate::losses::{self, McConfig, Mode};
use crate::metrics::{self, AnalysisRecord, AttentionMapNormalized};
use crate::model::{self, DropoutSpec, Parameters};
use crate::numerics::RngStream;
use crate::optim::{Adam, Sgd};
use crate::{Error, Result};

/// Converts records into model-ready training examples.
pub fn prepare_examples(records: &[VqaRecord]) -> Result<Vec<TrainExample>> {
    records
        .iter()
        .map(|r| {
            Ok(TrainExample {
                record_id: r.record_id,
                symbols: r.symbols()?,
                tokens: r.token_ids()?,
                target: r.target()?,
            })
        })
        .collect()
}

/// Attention/answer metrics over one split.
#[derive(Debug, Clone, Serialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    /// Mean rank correlation between model attention and ground-truth
    /// attention, over records where it is defined (non-constant maps).
    pub rank_correlation: Option<f64>,
    pub emd: f64,
    pub evaluated: usize,
    /// Records whose uniform ground-truth map makes rank correlation
    /// undefined; excluded from the mean above.
    pub rc_skipped: usize,
}

/// Evaluates accuracy, rank correlation, and earth mover distance of the
/// deterministic model against a split.
pub fn eval_split(
    params: &Parameters,
    cfg: &RunConfig,
    records: &[VqaRecord],
) -> Result<EvalMetrics> {
    let model_cfg = cfg.model_config();
    let mut acc_sum = 0.0;
    let mut rc_sum = 0.0;
    let mut rc_n = 0usize;
    let mut rc_skipped = 0usize;
    let mut emd_sum = 0.0;
    for record in records {
        let pass = model::forward(
            &record.symbols()?,
            &record.token_ids()?,
            params,
            &model_cfg,
            &DropoutSpec::off(),
        )?;
        let predicted = data::ANSWER_SPACE[gca::argmax(&pass.logits)];
        acc_sum += metrics::vqa_accuracy(predicted, &record.annotations)?;
        let alpha = AttentionMapNormalized::new(pass.alpha.clone())?;
        let gt = record.gt_attention_map()?;
        match metrics::rank_correlation(&alpha, &gt) {
            Ok(rc) => {
                rc_sum += rc;
                rc_n += 1;
            }
            Err(Error::UndefinedCorrelation) => rc_skipped += 1,
            Err(e) => return Err(e),
        }
        emd_sum += metrics::emd_2d(&alpha, &gt)?;
    }
    let n = records.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(EvalMetrics {
        accuracy: acc_sum / n as f64,
        rank_correlation: (rc_n > 0).then(|| rc_sum / rc_n as f64),
        emd: emd_sum / n as f64,
        evaluated: n,
        rc_skipped,
    })
}

/// Per-record uncertainty analysis row.
#[derive(Debug, Clone, Serialize)]
pub struct AnalysisRow {
    pub record_id: u64,
    pub sigma2_p: f64,
    pub entropy: f64,
    pub mean_aleatoric: f64,
    pub correct: bool,
    pub error: f64,
    pub top2_gap: f64,
    pub accuracy: f64,
    pub ambiguous: bool,
}

/// Monte Carlo uncertainty analysis over a split: `T` stochastic passes
/// per record, predictive-uncertainty decomposition, and the
/// classification-error measure `-log p(gt)` under the averaged
/// distribution.
pub fn analyze_records(
    params: &Parameters,
    cfg: &RunConfig,
    records: &[VqaRecord],
    mc_samples: usize,
    master: RngStream,
) -> Result<Vec<AnalysisRow>> {
    let model_cfg = cfg.model_config();
    let stream_root = master.child_tag("analyze");
    let mut rows = Vec::with_capacity(records.len());
    for record in records {
        let pass = model::forward(
            &record.symbols()?,
            &record.token_ids()?,
            params,
            &model_cfg,
            &DropoutSpec::off(),
        )?;
        let target = record.target()?;
        let predicted = gca::argmax(&pass.logits);
        let mc = McConfig {
            samples: mc_samples,
            stream: stream_root.child(record.record_id),
            perturb_scale: cfg.perturb_scale,
        };
        let pred = losses::mc_predictive_from_attended(
            &pass.attended,
            params,
            cfg.dropout_rate,
            &mc,
        )?;
        let sigma2_a = crate::numerics::softplus_vec(&pass.log_var);
        let estimate = losses::predictive_uncertainty(&pred.probs, &pred.v_per_sample, sigma2_a);
        // Misclassification probability under the MC-averaged distribution,
        // kept strictly below 1 so the log error measure stays finite.
        let p_mis = (1.0 - pred.probs.values()[target]).min(1.0 - 1e-12);
        rows.push(AnalysisRow {
            record_id: record.record_id,
            sigma2_p: estimate.sigma2_p,
            entropy: estimate.entropy,
            mean_aleatoric: estimate.mean_aleatoric,
            correct: predicted == target,
            error: metrics::classification_error(p_mis)?,
            top2_gap: metrics::top2_gap(&pass.logits)?,
            accuracy: metrics::vqa_accuracy(
                data::ANSWER_SPACE[predicted],
                &record.annotations,
            )?,
            ambiguous: record.ambiguous,
        });
    }
    Ok(rows)
}

/// Summary statistics of `sigma2_p` over an analyzed split.
#[derive(Debug, Clone, Serialize)]
pub struct SigmaStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub mean_correct: Option<f64>,
    pub mean_incorrect: Option<f64>,
}

pub fn sigma_stats(rows: &[AnalysisRow]) -> Option<SigmaStats> {
    if rows.is_empty() {
        return None;
    }
    let mean_where = |pred: &dyn Fn(&AnalysisRow) -> bool| {
        let vals: Vec<f64> = rows.iter().filter(|r| pred(r)).map(|r| r.sigma2_p).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    Some(SigmaStats {
        mean: rows.iter().map(|r| r.sigma2_p).sum::<f64>() / rows.len() as f64,
        min: rows.iter().map(|r| r.sigma2_p).fold(f64::INFINITY, f64::min),
        max: rows.iter().map(|r| r.sigma2_p).fold(f64::NEG_INFINITY, f64::max),
        mean_correct: mean_where(&|r| r.correct),
        mean_incorrect: mean_where(&|r| !r.correct),
    })
}

/// Final metrics written by `train`.
#[derive(Debug, Clone, Serialize)]
pub struct TrainMetrics {
    pub mode: Mode,
    pub seed: u64,
    pub epochs: usize,
    pub steps: usize,
    pub val: EvalMetrics,
    pub sigma2_p: Option<SigmaStats>,
    /// Mean top-2 softmax gap over correctly answered validation records.
    pub top2_gap_correct: Option<f64>,
}

fn mean_top2_gap_correct(rows: &[AnalysisRow]) -> Option<f64> {
    let vals: Vec<f64> = rows.iter().filter(|r| r.correct).map(|r| r.top2_gap).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

const LOSS_CSV_HEADER: &str = "step,mode,l_y,l_p,l_ve,l_udl,l_u,c_total";

/// Trains per the run configuration and writes the run directory.
/// Deterministic per seed: the parameter trajectory, checkpoint bytes, and
/// metrics depend only on the configuration and dataset.
pub fn run_training(data_dir: &Path, run_dir: &Path, cfg: &RunConfig) -> Result<TrainMetrics> {
    cfg.validate()?;
    let manifest = data::load_manifest(data_dir)?;
    if manifest.grid != [cfg.grid_u, cfg.grid_v] {
        return Err(Error::Config(format!(
            "dataset grid {:?} does not match configured {:?}",
            manifest.grid,
            [cfg.grid_u, cfg.grid_v]
        )));
    }
    let train_records = data::read_all(data_dir, "train")?;
    let val_records = data::read_all(data_dir, "val")?;
    let examples = prepare_examples(&train_records)?;
    if examples.is_empty() {
        return Err(Error::EmptyBatch);
    }

    let model_cfg = cfg.model_config();
    let hyper = cfg.hyper();
    let master = RngStream::new(cfg.seed, 0);
    let mut params = Parameters::init(&model_cfg, master.child_tag("init"));
    let mut opts = Optimizers {
        classification: Adam::new(cfg.adam_config()),
        uncertainty: Sgd::new(cfg.lr_uncertainty),
    };

    fs::create_dir_all(run_dir)?;
    write_json(&run_dir.join("config.json"), cfg)?;
    let mut csv = std::io::BufWriter::new(fs::File::create(run_dir.join("losses.csv"))?);
    writeln!(csv, "{LOSS_CSV_HEADER}")?;

    let shuffle_root = master.child_tag("shuffle");
    let step_root = master.child_tag("train");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        shuffle(&mut order, shuffle_root.child(epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainExample> =
                chunk.iter().map(|&i| examples[i].clone()).collect();
            let (next, bundle) = gca::gca_training_step(
                &batch,
                &params,
                &model_cfg,
                &hyper,
                &mut opts,
                step_root.child(step as u64),
            )?;
            params = next;
            writeln!(
                csv,
                "{},{},{},{},{},{},{},{}",
                step,
                bundle.mode,
                bundle.l_y,
                bundle.l_p,
                bundle.l_ve,
                bundle.l_udl,
                bundle.l_u,
                bundle.c_total
            )?;
            step += 1;
        }
    }
    csv.flush()?;

    model::save_checkpoint(run_dir, &params, &model_cfg, cfg.mode.name(), cfg.seed)?;
    let val = eval_split(&params, cfg, &val_records)?;
    let rows = analyze_records(&params, cfg, &val_records, cfg.mc_analysis_samples, master)?;
    let metrics = TrainMetrics {
        mode: cfg.mode,
        seed: cfg.seed,
        epochs: cfg.epochs,
        steps: step,
        val,
        sigma2_p: sigma_stats(&rows),
        top2_gap_correct: mean_top2_gap_correct(&rows),
    };
    write_json(&run_dir.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

/// Fisher–Yates shuffle driven by a derived stream.
fn shuffle(order: &mut [usize], stream: RngStream) {
    use rand::Rng;
    let mut rng = stream.rng();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// One ablation measurement.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub mode: Mode,
    pub seed: u64,
    pub accuracy: f64,
    pub rank_correlation: Option<f64>,
    pub emd: f64,
    pub run_dir: PathBuf,
}

/// Trains every `(mode, seed)` cell into its own run directory and
/// evaluates each on the test split.
pub fn run_ablation(
    data_dir: &Path,
    out_dir: &Path,
    base: &RunConfig,
    modes: &[Mode],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let test_records = data::read_all(data_dir, "test")?;
    let mut rows = Vec::new();
    for &mode in modes {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.mode = mode;
            cfg.seed = seed;
            let run_dir = out_dir.join(format!("{}-s{}", mode.name(), seed));
            run_training(data_dir, &run_dir, &cfg)?;
            let (params, _) = model::load_checkpoint(&run_dir)?;
            let eval = eval_split(&params, &cfg, &test_records)?;
            rows.push(AblationRow {
                mode,
                seed,
                accuracy: eval.accuracy,
                rank_correlation: eval.rank_correlation,
                emd: eval.emd,
                run_dir,
            });
        }
    }
    Ok(rows)
}

/// Loads a run directory's resolved config (written by `train`).
pub fn load_run_config(run_dir: &Path) -> Result<RunConfig> {
    let path = run_dir.join("config.json");
    if !path.exists() {
        return Err(Error::Config(format!("missing run config at {}", path.display())));
    }
    let cfg: RunConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
    Ok(cfg)
}

/// Chance-level accuracy oracle: the expected consensus accuracy of a
/// uniformly random prediction over the answer space.
pub fn chance_accuracy(records: &[VqaRecord]) -> Result<f64> {
    let mut total = 0.0;
    for record in records {
        for answer in data::ANSWER_SPACE {
            total += metrics::vqa_accuracy(answer, &record.annotations)?;
        }
    }
    Ok(total / (records.len() * data::ANSWER_SPACE.len()) as f64)
}

/// Distribution of predicted classes over a split (diagnostic for the
/// chance-level check on untrained parameters).
pub fn prediction_histogram(
    params: &Parameters,
    cfg: &RunConfig,
    records: &[VqaRecord],
) -> Result<Array1<f64>> {
    let model_cfg = cfg.model_config();
    let mut hist = Array1::zeros(data::ANSWER_SPACE.len());
    for record in records {
        let pass = model::forward(
            &record.symbols()?,
            &record.token_ids()?,
            params,
            &model_cfg,
            &DropoutSpec::off(),
        )?;
        hist[gca::argmax(&pass.logits)] += 1.0;
    }
    Ok(hist / records.len() as f64)
}
