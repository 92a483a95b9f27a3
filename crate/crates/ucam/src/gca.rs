//! Gradient-certainty attention: build a certainty mask from the product of
//! uncertainty and classification gradients at the attended feature map,
//! rectify and normalize it, and add it back residually to the
//! classification gradient before the backward pass continues upstream.
//!
//! The training step lives here too: it evaluates the per-example loss
//! bundle, computes the two tap gradients, injects the mask (in the GCA
//! modes), and applies the two optimizers — Adam for the classification
//! partitions, SGD for the variance head.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::losses::{
    self, LossBundle, LossComponents, McConfig, Mode, PerturbScale, UdlVariant,
};
use crate::model::{
    self, BackwardSeed, DropoutSpec, ModelConfig, Parameters, RecordedPass,
};
use crate::numerics::{entropy, sigmoid, softmax_raw, softplus_vec, RngStream};
use crate::optim::{is_uncertainty_partition, Adam, Sgd};
use crate::{Error, Result};

/// How the rectified gradient product is normalized into a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskNormalization {
    /// Softmax over all `(u, v, d)` entries jointly (default; total).
    #[default]
    Softmax,
    /// Divide by the sum of entries; all-zeros when the sum is degenerate.
    Sum,
}

/// Certainty-mask hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GcaConfig {
    /// Scale on the reversed gradient product (>= 0).
    pub lambda: f64,
    /// Multiplier for negative product entries (<= 0, "large negative").
    pub gamma: f64,
    pub normalization: MaskNormalization,
    /// Degenerate-sum guard for `Sum` normalization (> 0).
    pub eps_norm: f64,
}

impl Default for GcaConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            gamma: -10.0,
            normalization: MaskNormalization::Softmax,
            eps_norm: 1e-12,
        }
    }
}

impl GcaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::InvalidHyper(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.gamma > 0.0 {
            return Err(Error::InvalidHyper(format!("gamma must be <= 0, got {}", self.gamma)));
        }
        if !(self.eps_norm > 0.0) {
            return Err(Error::InvalidHyper(format!(
                "eps_norm must be > 0, got {}",
                self.eps_norm
            )));
        }
        Ok(())
    }
}

fn check_same_shape(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Reversed gradient product `-lambda * grad_u ⊙ grad_y`, elementwise over
/// the full `(u, v, d)` field.
pub fn certainty_product(
    grad_u: &Array3<f64>,
    grad_y: &Array3<f64>,
    lambda: f64,
) -> Result<Array3<f64>> {
    check_same_shape(grad_u, grad_y)?;
    Ok((grad_u * grad_y).mapv(|v| -lambda * v))
}

/// Rectification `relu(x) + gamma * relu(-x)`: positive entries pass
/// through, negative ones are re-signed by `gamma`.
pub fn certainty_activation(grad: &Array3<f64>, gamma: f64) -> Result<Array3<f64>> {
    if gamma > 0.0 {
        return Err(Error::InvalidHyper(format!("gamma must be <= 0, got {gamma}")));
    }
    Ok(grad.mapv(|v| if v > 0.0 { v } else { gamma * -v }))
}

/// The normalized certainty mask, aligned with the tap field.
#[derive(Debug, Clone, PartialEq)]
pub struct CertaintyMask {
    values: Array3<f64>,
}

impl CertaintyMask {
    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    /// Spatial marginal `Σ_d mask[u, v, d]`.
    pub fn spatial(&self) -> Array2<f64> {
        self.values.sum_axis(ndarray::Axis(2))
    }
}

/// Normalizes the rectified field into a mask. Softmax mode is total and
/// yields a nonnegative mask summing to 1; sum mode divides by the entry
/// sum and returns all-zeros when `|sum| < eps_norm`.
pub fn normalize_mask(grad: &Array3<f64>, cfg: &GcaConfig) -> CertaintyMask {
    let values = match cfg.normalization {
        MaskNormalization::Softmax => {
            let flat: Vec<f64> = grad.iter().copied().collect();
            let sm = softmax_raw(&flat);
            Array3::from_shape_vec(grad.dim(), sm.to_vec()).unwrap()
        }
        MaskNormalization::Sum => {
            let total = grad.sum();
            if total.abs() < cfg.eps_norm {
                Array3::zeros(grad.dim())
            } else {
                grad.mapv(|v| v / total)
            }
        }
    };
    CertaintyMask { values }
}

/// Residual connection at the tap: `grad_y + mask`. The result replaces
/// `∂L_y/∂F` and the backward pass continues from it upstream.
pub fn inject_residual_gradient(
    grad_y: &Array3<f64>,
    mask: &CertaintyMask,
) -> Result<Array3<f64>> {
    check_same_shape(grad_y, &mask.values)?;
    Ok(grad_y + &mask.values)
}

/// A spatial explanation heatmap, max-normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CertaintyHeatmap {
    pub map: Array2<f64>,
}

/// Channel-weighted activation heatmap: each channel of the attended map is
/// weighted by the spatial mean of the final (injected) gradient field, the
/// weighted sum is rectified per cell, then max-normalized.
pub fn certainty_map(
    feature_map: &Array3<f64>,
    final_grad: &Array3<f64>,
) -> Result<CertaintyHeatmap> {
    check_same_shape(feature_map, final_grad)?;
    let (u, v, d) = feature_map.dim();
    let cells = (u * v) as f64;
    let mut weights = Array1::zeros(d);
    for k in 0..d {
        weights[k] = final_grad.slice(ndarray::s![.., .., k]).sum() / cells;
    }
    let mut map = Array2::zeros((u, v));
    for r in 0..u {
        for c in 0..v {
            let mut acc = 0.0;
            for k in 0..d {
                acc += weights[k] * feature_map[[r, c, k]];
            }
            map[[r, c]] = acc.max(0.0);
        }
    }
    let peak = map.iter().copied().fold(0.0f64, f64::max);
    if peak > 0.0 {
        map.mapv_inplace(|x| x / peak);
    }
    Ok(CertaintyHeatmap { map })
}

/// Monte Carlo settings carried by the trainer; absent for configurations
/// that never evaluate a distorted loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct McSettings {
    pub samples: usize,
    pub perturb_scale: PerturbScale,
}

/// Everything the training step needs beyond the model shape.
#[derive(Debug, Clone)]
pub struct TrainHyper {
    pub mode: Mode,
    pub eta_loss: f64,
    pub sigma0: f64,
    pub udl_alpha: f64,
    pub udl_variant: UdlVariant,
    pub dropout_rate: f64,
    pub mc: Option<McSettings>,
    pub gca: GcaConfig,
}

/// One training example in model-ready form.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub record_id: u64,
    pub symbols: Array2<usize>,
    pub tokens: Vec<usize>,
    pub target: usize,
}

/// Noise streams for one example at one step.
#[derive(Debug, Clone, Copy)]
pub struct ExampleStreams {
    /// Logit-distortion noise; sample `t` draws from `noise.child(t)`.
    pub noise: RngStream,
    /// Dropout masks of the Monte Carlo weight samples.
    pub mc_dropout: RngStream,
}

/// Losses and head seeds computed for one example.
#[derive(Debug)]
pub struct ExampleEval {
    pub pass: RecordedPass,
    pub bundle: LossBundle,
    /// Combined per-example cost seed `d(l_y + eta l_u)/d(logits, log_var)`.
    pub seed: BackwardSeed,
    /// Cross-entropy seed alone (`∂l_y/∂logits`).
    pub g_y_logits: Array1<f64>,
    /// Uncertainty-loss seeds alone (`∂l_u/∂(logits, log_var)`, no eta).
    pub du_logits: Array1<f64>,
    pub du_log_var: Array1<f64>,
    /// Detached predictive entropy added to the distortion variance
    /// (0 for the aleatoric family).
    pub entropy_term: f64,
}

/// Evaluates the loss bundle and backward seeds for one example under the
/// given mode.
///
/// The uncertainty loss is assembled from: the distorted NLL with variance
/// `sigma2_a` (aleatoric family) or `sigma2_a + H` (predictive family,
/// with the Monte Carlo entropy `H` treated as a constant of the step),
/// the variance equalizer on the same variance vector, and the distorted
/// gap penalty. Gradients flow through the clean logits and through
/// `sigma2_a`'s softplus; the entropy term is not differentiated through.
pub fn evaluate_example(
    ex: &TrainExample,
    params: &Parameters,
    cfg: &ModelConfig,
    hyper: &TrainHyper,
    dropout: &DropoutSpec,
    streams: &ExampleStreams,
) -> Result<ExampleEval> {
    let pass = model::forward(&ex.symbols, &ex.tokens, params, cfg, dropout)?;
    let l_y = losses::cross_entropy(&pass.logits, ex.target)?;
    let g_y_logits = losses::cross_entropy_grad(&pass.logits, ex.target)?;
    let c = pass.logits.len();
    let mode = hyper.mode;

    if mode == Mode::Baseline {
        let bundle = losses::total_uncertainty_loss(
            &LossComponents { l_y, ..Default::default() },
            mode,
            hyper.eta_loss,
        )?;
        return Ok(ExampleEval {
            seed: BackwardSeed {
                d_logits: g_y_logits.clone(),
                d_log_var: Array1::zeros(c),
            },
            bundle,
            g_y_logits,
            du_logits: Array1::zeros(c),
            du_log_var: Array1::zeros(c),
            entropy_term: 0.0,
            pass,
        });
    }

    let mc = if mode.needs_distortion() || mode.uses_predictive() {
        Some(
            hyper
                .mc
                .ok_or_else(|| Error::MissingMcConfig(mode.name().to_string()))?,
        )
    } else {
        hyper.mc
    };

    let sigma2_a = softplus_vec(&pass.log_var);
    // d(sigma2_a)/d(log_var), the chain factor for every variance gradient.
    let dsig_ds = pass.log_var.mapv(sigmoid);

    let (sigma2_w, entropy_term) = if mode.uses_predictive() {
        let settings = mc.expect("predictive modes require MC settings");
        let mc_cfg = McConfig {
            samples: settings.samples,
            stream: streams.mc_dropout,
            perturb_scale: settings.perturb_scale,
        };
        let pred = losses::mc_predictive_from_attended(
            &pass.attended,
            params,
            hyper.dropout_rate,
            &mc_cfg,
        )?;
        let h = entropy(&pred.probs);
        (sigma2_a.mapv(|v| v + h), h)
    } else {
        (sigma2_a, 0.0)
    };

    let mut components = LossComponents { l_y, ..Default::default() };
    let mut du_logits = Array1::zeros(c);
    let mut du_log_var = Array1::zeros(c);

    let distorted = if mode.needs_distortion() {
        let settings = mc.expect("distortion requires MC settings");
        let mc_cfg = McConfig {
            samples: settings.samples,
            stream: streams.noise,
            perturb_scale: settings.perturb_scale,
        };
        let dl = losses::aleatoric_loss_with_grad(&pass.logits, &sigma2_w, ex.target, &mc_cfg)?;
        components.l_p = Some(dl.value);
        Some(dl)
    } else {
        None
    };

    if let Some(dl) = &distorted {
        if mode.has_lp() {
            du_logits += &dl.d_logits;
            du_log_var += &(&dl.d_sigma2 * &dsig_ds);
        }
    }
    if mode.has_ve() {
        components.l_ve = Some(losses::variance_equalizer(&sigma2_w, hyper.sigma0));
        let g_ve = losses::variance_equalizer_grad(&sigma2_w, hyper.sigma0);
        du_log_var += &(&g_ve * &dsig_ds);
    }
    if mode.has_udl() {
        let dl = distorted.as_ref().expect("UDL is defined through the distorted loss");
        components.l_udl = Some(losses::udl_value(
            hyper.udl_variant,
            dl.value,
            l_y,
            hyper.udl_alpha,
        ));
        let k = losses::udl_slope(hyper.udl_variant, dl.value, l_y, hyper.udl_alpha);
        du_logits += &(&dl.d_logits - &g_y_logits).mapv(|v| k * v);
        du_log_var += &(&dl.d_sigma2 * &dsig_ds).mapv(|v| k * v);
    }

    let bundle = losses::total_uncertainty_loss(&components, mode, hyper.eta_loss)?;
    let seed = BackwardSeed {
        d_logits: &g_y_logits + &du_logits.mapv(|v| hyper.eta_loss * v),
        d_log_var: du_log_var.mapv(|v| hyper.eta_loss * v),
    };
    Ok(ExampleEval {
        pass,
        bundle,
        seed,
        g_y_logits,
        du_logits,
        du_log_var,
        entropy_term,
    })
}

/// Builds the injected certainty mask for one evaluated example.
pub fn build_mask(
    eval: &ExampleEval,
    params: &Parameters,
    gca: &GcaConfig,
) -> Result<CertaintyMask> {
    let c = eval.g_y_logits.len();
    let grad_y = model::backward_to_tap(
        &eval.pass,
        params,
        &BackwardSeed {
            d_logits: eval.g_y_logits.clone(),
            d_log_var: Array1::zeros(c),
        },
    );
    let grad_u = model::backward_to_tap(
        &eval.pass,
        params,
        &BackwardSeed {
            d_logits: eval.du_logits.clone(),
            d_log_var: eval.du_log_var.clone(),
        },
    );
    let product = certainty_product(&grad_u, &grad_y, gca.lambda)?;
    let activated = certainty_activation(&product, gca.gamma)?;
    Ok(normalize_mask(&activated, gca))
}

/// Pooled optimizer state: Adam over the classification partitions, SGD
/// over the variance head.
#[derive(Debug, Clone)]
pub struct Optimizers {
    pub classification: Adam,
    pub uncertainty: Sgd,
}

fn aggregate_bundles(bundles: &[LossBundle], mode: Mode, eta_loss: f64) -> Result<LossBundle> {
    let n = bundles.len() as f64;
    let mean = |f: fn(&LossBundle) -> f64| bundles.iter().map(f).sum::<f64>() / n;
    Ok(LossBundle {
        mode,
        l_y: mean(|b| b.l_y),
        l_p: mean(|b| b.l_p),
        l_ve: mean(|b| b.l_ve),
        l_udl: mean(|b| b.l_udl),
        l_u: mean(|b| b.l_u),
        c_total: losses::total_cost(bundles, eta_loss)?,
    })
}

/// One training step over a batch.
///
/// Per example: evaluate losses, compute the classification and
/// uncertainty tap gradients, build and inject the certainty mask (GCA
/// modes only), and run the full backward with the combined cost seed.
/// Per-example gradients are reduced in batch order and averaged, then the
/// classification optimizer updates everything upstream of and including
/// the logit head while the uncertainty optimizer updates the variance
/// head. Returns the updated parameters and the mean loss bundle.
pub fn gca_training_step(
    batch: &[TrainExample],
    params: &Parameters,
    cfg: &ModelConfig,
    hyper: &TrainHyper,
    opts: &mut Optimizers,
    step_stream: RngStream,
) -> Result<(Parameters, LossBundle)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    hyper.gca.validate()?;
    let dropout_root = step_stream.child_tag("dropout");
    let noise_root = step_stream.child_tag("noise");
    let mc_root = step_stream.child_tag("mc");

    let mut grad_sum = Parameters::zeros(cfg);
    let mut bundles = Vec::with_capacity(batch.len());
    for ex in batch {
        let dropout = DropoutSpec::new(hyper.dropout_rate, dropout_root.child(ex.record_id));
        let streams = ExampleStreams {
            noise: noise_root.child(ex.record_id),
            mc_dropout: mc_root.child(ex.record_id),
        };
        let eval = evaluate_example(ex, params, cfg, hyper, &dropout, &streams)?;
        let injection = if hyper.mode.has_gca() {
            Some(build_mask(&eval, params, &hyper.gca)?)
        } else {
            None
        };
        let bw = model::backward(
            &eval.pass,
            params,
            cfg,
            &eval.seed,
            injection.as_ref().map(CertaintyMask::values),
        )?;
        grad_sum.add_assign(&bw.grads);
        bundles.push(eval.bundle);
    }
    grad_sum.scale((batch.len() as f64).recip());

    let mut next = params.clone();
    opts.classification
        .step(&mut next, &grad_sum, |name| !is_uncertainty_partition(name));
    if hyper.mode != Mode::Baseline {
        opts.uncertainty
            .step(&mut next, &grad_sum, is_uncertainty_partition);
    }
    Ok((next, aggregate_bundles(&bundles, hyper.mode, hyper.eta_loss)?))
}

/// Plain cross-entropy trainer: the reference that `mode = baseline` must
/// match step for step, bit for bit.
pub fn sce_training_step(
    batch: &[TrainExample],
    params: &Parameters,
    cfg: &ModelConfig,
    dropout_rate: f64,
    adam: &mut Adam,
    step_stream: RngStream,
) -> Result<(Parameters, LossBundle)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let dropout_root = step_stream.child_tag("dropout");
    let mut grad_sum = Parameters::zeros(cfg);
    let mut bundles = Vec::with_capacity(batch.len());
    for ex in batch {
        let dropout = DropoutSpec::new(dropout_rate, dropout_root.child(ex.record_id));
        let pass = model::forward(&ex.symbols, &ex.tokens, params, cfg, &dropout)?;
        let l_y = losses::cross_entropy(&pass.logits, ex.target)?;
        let seed = BackwardSeed {
            d_logits: losses::cross_entropy_grad(&pass.logits, ex.target)?,
            d_log_var: Array1::zeros(pass.logits.len()),
        };
        let bw = model::backward(&pass, params, cfg, &seed, None)?;
        grad_sum.add_assign(&bw.grads);
        bundles.push(losses::total_uncertainty_loss(
            &LossComponents { l_y, ..Default::default() },
            Mode::Baseline,
            0.0,
        )?);
    }
    grad_sum.scale((batch.len() as f64).recip());
    let mut next = params.clone();
    adam.step(&mut next, &grad_sum, |name| !is_uncertainty_partition(name));
    Ok((next, aggregate_bundles(&bundles, Mode::Baseline, 0.0)?))
}

/// Deterministic explanation of one input: runs a dropout-free pass,
/// assembles the mode's losses against `target` (the predicted class when
/// `None`), injects the certainty mask in the GCA modes, and reduces the
/// final gradient field to a spatial heatmap.
#[derive(Debug, Clone)]
pub struct Explanation {
    pub predicted: usize,
    pub target: usize,
    pub heatmap: CertaintyHeatmap,
    /// Spatial marginal of the injected mask (zeros outside the GCA modes).
    pub mask_spatial: Array2<f64>,
    pub alpha: Array2<f64>,
}

pub fn explain_example(
    symbols: &Array2<usize>,
    tokens: &[usize],
    target: Option<usize>,
    params: &Parameters,
    cfg: &ModelConfig,
    hyper: &TrainHyper,
    streams: &ExampleStreams,
) -> Result<Explanation> {
    let probe = model::forward(symbols, tokens, params, cfg, &DropoutSpec::off())?;
    let predicted = argmax(&probe.logits);
    let target = target.unwrap_or(predicted);
    let ex = TrainExample {
        record_id: 0,
        symbols: symbols.clone(),
        tokens: tokens.to_vec(),
        target,
    };
    let eval = evaluate_example(&ex, params, cfg, hyper, &DropoutSpec::off(), streams)?;
    let c = eval.g_y_logits.len();
    let grad_y = model::backward_to_tap(
        &eval.pass,
        params,
        &BackwardSeed {
            d_logits: eval.g_y_logits.clone(),
            d_log_var: Array1::zeros(c),
        },
    );
    let (final_grad, mask_spatial) = if hyper.mode.has_gca() {
        let mask = build_mask(&eval, params, &hyper.gca)?;
        (inject_residual_gradient(&grad_y, &mask)?, mask.spatial())
    } else {
        let dims = (cfg.grid_u, cfg.grid_v);
        (grad_y.clone(), Array2::zeros(dims))
    };
    Ok(Explanation {
        predicted,
        target,
        heatmap: certainty_map(&eval.pass.feature_map, &final_grad)?,
        mask_spatial,
        alpha: eval.pass.alpha.clone(),
    })
}

pub(crate) fn argmax(x: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}
