//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Configuration
//! precedence for `train`/`ablate`: built-in defaults < `--config` file <
//! `UCAM_SEED` environment variable < command-line flags.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use crate::config::RunConfig;
use crate::data::{self, GenParams};
use crate::gca::{self, ExampleStreams};
use crate::losses::Mode;
use crate::metrics;
use crate::model;
use crate::numerics::RngStream;
use crate::train::{self, AnalysisRow};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "ucam",
    version,
    about = "Uncertainty-calibrated attention models on a synthetic mini-VQA task"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (train/val/test JSONL plus manifest).
    GenData(GenDataArgs),
    /// Train one model; writes checkpoint, loss log, and metrics.
    Train(TrainArgs),
    /// Evaluate a trained run against a dataset split.
    Eval(EvalArgs),
    /// Export certainty heatmaps (PNG + JSON) for selected records.
    Explain(ExplainArgs),
    /// Uncertainty vs. error analysis over a split.
    Analyze(AnalyzeArgs),
    /// Train the full mode grid across seeds and emit a comparison CSV.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory for the dataset.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5000)]
    pub train: usize,
    #[arg(long, default_value_t = 1000)]
    pub val: usize,
    #[arg(long, default_value_t = 1000)]
    pub test: usize,
    /// Probability that an annotator answers a clean record correctly.
    #[arg(long, default_value_t = 0.8)]
    pub annotator_accuracy: f64,
    /// Fraction of records with genuinely split annotations.
    #[arg(long, default_value_t = 0.1)]
    pub ambiguous_fraction: f64,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args, Clone)]
pub struct ConfigOverrides {
    /// Flat JSON config file (defaults for anything not set).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Ablation mode (see `Mode::ALL`), e.g. baseline, aul+ve, p-gca.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub eta_loss: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub mc_samples: Option<usize>,
}

impl ConfigOverrides {
    /// defaults < file < env < flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::resolve(self.config.as_deref())?;
        if let Some(mode) = &self.mode {
            cfg.mode = Mode::parse(mode)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            cfg.epochs = epochs;
        }
        if let Some(batch) = self.batch {
            cfg.batch_size = batch;
        }
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        if let Some(eta) = self.eta_loss {
            cfg.eta_loss = eta;
        }
        if let Some(lambda) = self.lambda {
            cfg.lambda = lambda;
        }
        if let Some(gamma) = self.gamma {
            cfg.gamma = gamma;
        }
        if let Some(dropout) = self.dropout {
            cfg.dropout_rate = dropout;
        }
        if let Some(mc) = self.mc_samples {
            cfg.mc_train_samples = mc;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (from gen-data).
    #[arg(long)]
    pub data: PathBuf,
    /// Run output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory containing the checkpoint.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Record ids to explain.
    #[arg(long, value_delimiter = ',', required = true)]
    pub records: Vec<u64>,
    /// Integer upscale factor for the PNG heatmaps.
    #[arg(long, default_value_t = 32)]
    pub scale: u32,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Monte Carlo samples per record (defaults to the run's analysis T).
    #[arg(long)]
    pub mc_samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory; one run subdirectory per (mode, seed).
    #[arg(long)]
    pub out: PathBuf,
    /// Modes to sweep (defaults to the full grid).
    #[arg(long, value_delimiter = ',')]
    pub modes: Option<Vec<String>>,
    /// Seeds to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

/// Runs a parsed command, returning the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Explain(args) => cmd_explain(&args),
        Command::Analyze(args) => cmd_analyze(&args),
        Command::Ablate(args) => cmd_ablate(&args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::UnknownMode { .. } | Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    if args.out.exists() && args.out.read_dir()?.next().is_some() && !args.force {
        return Err(Error::Usage(format!(
            "output directory {} is not empty; pass --force to overwrite",
            args.out.display()
        )));
    }
    let params = GenParams {
        seed: args.seed,
        train: args.train,
        val: args.val,
        test: args.test,
        annotator_accuracy: args.annotator_accuracy,
        ambiguous_fraction: args.ambiguous_fraction,
        ..GenParams::default()
    };
    let manifest = data::generate_dataset(&args.out, &params)?;
    println!(
        "wrote dataset to {} (seed {}, grid {}x{})",
        args.out.display(),
        manifest.seed,
        manifest.grid[0],
        manifest.grid[1]
    );
    for (split, info) in &manifest.splits {
        println!("  {split}: {} records ({})", info.count, info.path);
    }
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.overrides.resolve()?;
    let metrics = train::run_training(&args.data, &args.out, &cfg)?;
    println!(
        "trained mode {} seed {} for {} steps",
        metrics.mode, metrics.seed, metrics.steps
    );
    println!(
        "val accuracy {:.4}, rank correlation {}, emd {:.4}",
        metrics.val.accuracy,
        metrics
            .val
            .rank_correlation
            .map_or("n/a".to_string(), |v| format!("{v:.4}")),
        metrics.val.emd
    );
    println!("run directory: {}", args.out.display());
    Ok(())
}

fn load_run(run: &Path) -> Result<(crate::model::Parameters, RunConfig)> {
    let cfg = train::load_run_config(run)?;
    let (params, manifest) = model::load_checkpoint(run)?;
    if manifest.model != cfg.model_config() {
        return Err(Error::InvalidCheckpoint(
            "checkpoint model shape disagrees with the run config".into(),
        ));
    }
    Ok((params, cfg))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (params, cfg) = load_run(&args.run)?;
    let records = data::read_all(&args.data, &args.split)?;
    let eval = train::eval_split(&params, &cfg, &records)?;
    train::write_json(&args.run.join(format!("eval_{}.json", args.split)), &eval)?;
    println!(
        "split {}: accuracy {:.4}, rank correlation {}, emd {:.4} ({} records, {} rc-skipped)",
        args.split,
        eval.accuracy,
        eval.rank_correlation
            .map_or("n/a".to_string(), |v| format!("{v:.4}")),
        eval.emd,
        eval.evaluated,
        eval.rc_skipped
    );
    Ok(())
}

fn write_heatmap_png(path: &Path, map: &Array2<f64>, scale: u32) -> Result<()> {
    let (u, v) = map.dim();
    let scale = scale.max(1);
    let mut img = image::GrayImage::new(v as u32 * scale, u as u32 * scale);
    for ((r, c), &val) in map.indexed_iter() {
        let px = image::Luma([(val.clamp(0.0, 1.0) * 255.0).round() as u8]);
        for dy in 0..scale {
            for dx in 0..scale {
                img.put_pixel(c as u32 * scale + dx, r as u32 * scale + dy, px);
            }
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))
}

fn grid_json(map: &Array2<f64>) -> Vec<Vec<f64>> {
    map.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn cmd_explain(args: &ExplainArgs) -> Result<()> {
    let (params, cfg) = load_run(&args.run)?;
    let records = data::read_all(&args.data, &args.split)?;
    let out_dir = args.run.join("explain");
    fs::create_dir_all(&out_dir)?;
    let hyper = cfg.hyper();
    let model_cfg = cfg.model_config();
    let master = RngStream::new(cfg.seed, 0).child_tag("explain");
    for &id in &args.records {
        let record = records
            .iter()
            .find(|r| r.record_id == id)
            .ok_or_else(|| Error::Usage(format!("record {id} not in split {}", args.split)))?;
        let streams = ExampleStreams {
            noise: master.child(id).child(0),
            mc_dropout: master.child(id).child(1),
        };
        let explanation = gca::explain_example(
            &record.symbols()?,
            &record.token_ids()?,
            None,
            &params,
            &model_cfg,
            &hyper,
            &streams,
        )?;
        let stem = format!("record_{id:06}_{}", cfg.mode);
        write_heatmap_png(
            &out_dir.join(format!("{stem}.png")),
            &explanation.heatmap.map,
            args.scale,
        )?;
        #[derive(serde::Serialize)]
        struct ExplainJson<'a> {
            record_id: u64,
            mode: &'a str,
            predicted: &'a str,
            gt_answer: &'a str,
            heatmap: Vec<Vec<f64>>,
            mask: Vec<Vec<f64>>,
            alpha: Vec<Vec<f64>>,
        }
        train::write_json(
            &out_dir.join(format!("{stem}.json")),
            &ExplainJson {
                record_id: id,
                mode: cfg.mode.name(),
                predicted: data::ANSWER_SPACE[explanation.predicted],
                gt_answer: &record.gt_answer,
                heatmap: grid_json(&explanation.heatmap.map),
                mask: grid_json(&explanation.mask_spatial),
                alpha: grid_json(&explanation.alpha),
            },
        )?;
        println!("wrote {}", out_dir.join(format!("{stem}.png")).display());
    }
    Ok(())
}

fn write_analysis_csv(path: &Path, rows: &[AnalysisRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(
        f,
        "record_id,sigma2_p,entropy,mean_aleatoric,correct,error,top2_gap,accuracy,ambiguous"
    )?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            r.record_id,
            r.sigma2_p,
            r.entropy,
            r.mean_aleatoric,
            r.correct,
            r.error,
            r.top2_gap,
            r.accuracy,
            r.ambiguous
        )?;
    }
    Ok(())
}

fn write_histogram_csv(path: &Path, values: &[f64], bins: usize) -> Result<()> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "bin_lo,bin_hi,count")?;
    for (k, c) in counts.iter().enumerate() {
        writeln!(f, "{},{},{}", lo + k as f64 * width, lo + (k + 1) as f64 * width, c)?;
    }
    Ok(())
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    let (params, cfg) = load_run(&args.run)?;
    let records = data::read_all(&args.data, &args.split)?;
    let samples = args.mc_samples.unwrap_or(cfg.mc_analysis_samples);
    let rows = train::analyze_records(
        &params,
        &cfg,
        &records,
        samples,
        RngStream::new(cfg.seed, 0),
    )?;
    let analysis: Vec<metrics::AnalysisRecord> = rows
        .iter()
        .map(|r| metrics::AnalysisRecord {
            record_id: r.record_id,
            sigma2_p: r.sigma2_p,
            correct: r.correct,
            error: r.error,
        })
        .collect();
    let report = metrics::uncertainty_error_analysis(&analysis)?;

    let out_dir = args.run.join("analyze");
    fs::create_dir_all(&out_dir)?;
    write_analysis_csv(&out_dir.join("records.csv"), &rows)?;
    #[derive(serde::Serialize)]
    struct Summary<'a> {
        mode: &'a str,
        split: &'a str,
        mc_samples: usize,
        #[serde(flatten)]
        report: &'a metrics::UncertaintyErrorReport,
        sigma2_p: Option<train::SigmaStats>,
        top2_gap_correct: Option<f64>,
    }
    let top2: Vec<f64> = rows.iter().filter(|r| r.correct).map(|r| r.top2_gap).collect();
    train::write_json(
        &out_dir.join("summary.json"),
        &Summary {
            mode: cfg.mode.name(),
            split: &args.split,
            mc_samples: samples,
            report: &report,
            sigma2_p: train::sigma_stats(&rows),
            top2_gap_correct: (!top2.is_empty())
                .then(|| top2.iter().sum::<f64>() / top2.len() as f64),
        },
    )?;
    // Scatter + marginal histograms for plotting.
    let mut f = std::io::BufWriter::new(fs::File::create(
        out_dir.join("scatter_uncertainty_vs_error.csv"),
    )?);
    writeln!(f, "error,sigma2_p")?;
    for (e, s) in &report.scatter {
        writeln!(f, "{e},{s}")?;
    }
    drop(f);
    let sigma: Vec<f64> = rows.iter().map(|r| r.sigma2_p).collect();
    let errs: Vec<f64> = rows.iter().map(|r| r.error).collect();
    write_histogram_csv(&out_dir.join("hist_uncertainty.csv"), &sigma, 20)?;
    write_histogram_csv(&out_dir.join("hist_error.csv"), &errs, 20)?;

    println!(
        "analyzed {} records (T={samples}): auroc {}, pearson {}",
        rows.len(),
        report.auroc.map_or("n/a".into(), |v| format!("{v:.4}")),
        report.pearson.map_or("undefined".into(), |v| format!("{v:.4}")),
    );
    println!("reports under {}", out_dir.display());
    Ok(())
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let base = args.overrides.resolve()?;
    let modes: Vec<Mode> = match &args.modes {
        Some(names) => names.iter().map(|n| Mode::parse(n)).collect::<Result<_>>()?,
        None => Mode::ALL.to_vec(),
    };
    if args.seeds.is_empty() {
        return Err(Error::Usage("at least one seed is required".into()));
    }
    fs::create_dir_all(&args.out)?;
    let rows = train::run_ablation(&args.data, &args.out, &base, &modes, &args.seeds)?;
    let csv_path = args.out.join("ablation.csv");
    let mut f = std::io::BufWriter::new(fs::File::create(&csv_path)?);
    writeln!(f, "mode,seed,accuracy,rank_correlation,emd")?;
    for row in &rows {
        writeln!(
            f,
            "{},{},{},{},{}",
            row.mode,
            row.seed,
            row.accuracy,
            row.rank_correlation.map_or("".into(), |v| v.to_string()),
            row.emd
        )?;
    }
    drop(f);
    println!("ablation table: {}", csv_path.display());
    for row in &rows {
        println!(
            "  {:>8} seed {}: accuracy {:.4}, rc {}, emd {:.4}",
            row.mode.name(),
            row.seed,
            row.accuracy,
            row.rank_correlation
                .map_or("n/a".to_string(), |v| format!("{v:.4}")),
            row.emd
        );
    }
    Ok(())
}
