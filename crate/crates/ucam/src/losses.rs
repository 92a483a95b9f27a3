//! Loss functions: cross-entropy, distorted-logit uncertainty losses,
//! variance equalizer, the distorted-gap penalty, and the joint cost.
//!
//! The distorted losses perturb logits with seeded Gaussian noise scaled by
//! a per-class variance and average the true-class log-softmax over `T`
//! Monte Carlo samples (reduced in ascending sample order, so results are
//! bit-reproducible). Each loss comes with its analytic gradient with
//! respect to clean logits and variances; the model's backward pass
//! consumes those as head seeds.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::model::{self, DropoutSpec, ModelConfig, Parameters};
use crate::numerics::{entropy, log_sum_exp, softmax_raw, softplus, ProbabilityVector, RngStream};
use crate::{Error, Result};

/// How the Gaussian perturbation is scaled.
///
/// `Stddev` (default) perturbs by `sqrt(sigma2)`, the dimensionally
/// consistent reparameterization. `Variance` scales the noise by `sigma2`
/// itself, the literal form of the distortion equation; it is kept as a
/// config option rather than silently resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PerturbScale {
    #[default]
    Stddev,
    Variance,
}

/// Monte Carlo sampling configuration for the distorted losses.
#[derive(Debug, Clone, Copy)]
pub struct McConfig {
    /// Number of samples `T` (>= 1).
    pub samples: usize,
    /// Noise stream; sample `t` draws from `stream.child(t)`.
    pub stream: RngStream,
    pub perturb_scale: PerturbScale,
}

impl McConfig {
    pub fn new(samples: usize, stream: RngStream) -> Self {
        Self { samples, stream, perturb_scale: PerturbScale::Stddev }
    }
}

/// Ablation mode: which loss components are enabled on top of standard
/// cross-entropy, and whether the certainty mask is injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Baseline,
    Ve,
    Udl,
    Aul,
    Pul,
    UdlVe,
    AulVe,
    PulVe,
    AulUdl,
    PulUdl,
    AGca,
    PGca,
}

impl Mode {
    pub const ALL: [Mode; 12] = [
        Mode::Baseline,
        Mode::Ve,
        Mode::Udl,
        Mode::Aul,
        Mode::Pul,
        Mode::UdlVe,
        Mode::AulVe,
        Mode::PulVe,
        Mode::AulUdl,
        Mode::PulUdl,
        Mode::AGca,
        Mode::PGca,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Ve => "ve",
            Mode::Udl => "udl",
            Mode::Aul => "aul",
            Mode::Pul => "pul",
            Mode::UdlVe => "udl+ve",
            Mode::AulVe => "aul+ve",
            Mode::PulVe => "pul+ve",
            Mode::AulUdl => "aul+udl",
            Mode::PulUdl => "pul+udl",
            Mode::AGca => "a-gca",
            Mode::PGca => "p-gca",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        let lowered = s.to_ascii_lowercase();
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == lowered)
            .ok_or_else(|| Error::UnknownMode {
                got: s.to_string(),
                valid: Mode::ALL.map(|m| m.name()).join(", "),
            })
    }

    /// The distorted loss `L_p` contributes to `L_u`.
    pub fn has_lp(self) -> bool {
        matches!(
            self,
            Mode::Aul
                | Mode::Pul
                | Mode::AulVe
                | Mode::PulVe
                | Mode::AulUdl
                | Mode::PulUdl
                | Mode::AGca
                | Mode::PGca
        )
    }

    /// The variance equalizer contributes to `L_u`.
    pub fn has_ve(self) -> bool {
        matches!(
            self,
            Mode::Ve | Mode::UdlVe | Mode::AulVe | Mode::PulVe | Mode::AGca | Mode::PGca
        )
    }

    /// The distorted-gap penalty contributes to `L_u`.
    pub fn has_udl(self) -> bool {
        matches!(
            self,
            Mode::Udl | Mode::UdlVe | Mode::AulUdl | Mode::PulUdl | Mode::AGca | Mode::PGca
        )
    }

    /// The certainty mask is injected at the tap during training.
    pub fn has_gca(self) -> bool {
        matches!(self, Mode::AGca | Mode::PGca)
    }

    /// The distortion variance is predictive (`sigma2_a + H`) rather than
    /// purely aleatoric.
    pub fn uses_predictive(self) -> bool {
        matches!(self, Mode::Pul | Mode::PulVe | Mode::PulUdl | Mode::PGca)
    }

    /// Whether any distorted loss must be evaluated (either `L_p` itself or
    /// the gap penalty that is defined through it).
    pub fn needs_distortion(self) -> bool {
        self.has_lp() || self.has_udl()
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Mode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Mode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Mode::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Standard cross-entropy of a logit vector against an integer target:
/// `-(y[target] - logsumexp(y))`.
pub fn cross_entropy(logits: &Array1<f64>, target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::TargetOutOfRange { target, classes: logits.len() });
    }
    let lse = log_sum_exp(logits.as_slice().unwrap())?;
    Ok(lse - logits[target])
}

/// Gradient of [`cross_entropy`] with respect to the logits:
/// `softmax(y) - onehot(target)`.
pub fn cross_entropy_grad(logits: &Array1<f64>, target: usize) -> Result<Array1<f64>> {
    if target >= logits.len() {
        return Err(Error::TargetOutOfRange { target, classes: logits.len() });
    }
    let mut g = softmax_raw(logits.as_slice().unwrap());
    g[target] -= 1.0;
    Ok(g)
}

fn noise_scale(sigma2: &Array1<f64>, mode: PerturbScale) -> Result<Array1<f64>> {
    if let Some(&bad) = sigma2.iter().find(|v| **v < 0.0 || !v.is_finite()) {
        return Err(Error::NegativeVariance(bad));
    }
    Ok(match mode {
        PerturbScale::Stddev => sigma2.mapv(f64::sqrt),
        PerturbScale::Variance => sigma2.clone(),
    })
}

/// Sample-`t` distorted logits: `y + eps_t ⊙ scale` with
/// `eps_t ~ N(0, I)` drawn from `mc.stream.child(t)`.
pub fn distort_logits(
    logits: &Array1<f64>,
    sigma2: &Array1<f64>,
    mc: &McConfig,
    t: usize,
) -> Result<Array1<f64>> {
    if sigma2.len() != logits.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![logits.len()],
            got: vec![sigma2.len()],
        });
    }
    let scale = noise_scale(sigma2, mc.perturb_scale)?;
    let eps = mc.stream.child(t as u64).standard_normal_vec(logits.len());
    Ok(logits + &(eps * scale))
}

/// Distorted negative log-likelihood and its gradients.
#[derive(Debug, Clone)]
pub struct DistortedLoss {
    pub value: f64,
    pub d_logits: Array1<f64>,
    pub d_sigma2: Array1<f64>,
}

/// Shared core of the aleatoric/predictive losses:
/// `-log (1/T) Σ_t exp(y_t[target] - logsumexp(y_t))`
/// evaluated through a log-sum-exp over samples.
fn distorted_nll(
    logits: &Array1<f64>,
    sigma2: &Array1<f64>,
    target: usize,
    mc: &McConfig,
    paper_literal_sign: bool,
) -> Result<f64> {
    let z = distorted_logprobs(logits, sigma2, target, mc)?;
    let t = mc.samples as f64;
    let value = t.ln() - log_sum_exp(&z)?;
    Ok(if paper_literal_sign { -value } else { value })
}

/// True-class log-softmax per Monte Carlo sample.
fn distorted_logprobs(
    logits: &Array1<f64>,
    sigma2: &Array1<f64>,
    target: usize,
    mc: &McConfig,
) -> Result<Vec<f64>> {
    if target >= logits.len() {
        return Err(Error::TargetOutOfRange { target, classes: logits.len() });
    }
    if mc.samples < 1 {
        return Err(Error::InvalidSampleCount);
    }
    if sigma2.len() != logits.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![logits.len()],
            got: vec![sigma2.len()],
        });
    }
    let scale = noise_scale(sigma2, mc.perturb_scale)?;
    let mut z = Vec::with_capacity(mc.samples);
    for t in 0..mc.samples {
        let eps = mc.stream.child(t as u64).standard_normal_vec(logits.len());
        let y_t = logits + &(eps * &scale);
        z.push(y_t[target] - log_sum_exp(y_t.as_slice().unwrap())?);
    }
    Ok(z)
}

/// Aleatoric uncertainty loss: the distorted NLL with a per-class variance
/// vector. Reduces to plain cross-entropy when every variance is zero.
pub fn aleatoric_loss(
    logits: &Array1<f64>,
    sigma2: &Array1<f64>,
    target: usize,
    mc: &McConfig,
) -> Result<f64> {
    distorted_nll(logits, sigma2, target, mc, false)
}

/// Test-only literal form without the leading minus (the raw log of the
/// averaged likelihood, which *decreases* with worse fit).
#[doc(hidden)]
pub fn aleatoric_loss_paper_sign(
    logits: &Array1<f64>,
    sigma2: &Array1<f64>,
    target: usize,
    mc: &McConfig,
) -> Result<f64> {
    distorted_nll(logits, sigma2, target, mc, true)
}

/// [`aleatoric_loss`] together with analytic gradients with respect to the
/// clean logits and the variance vector.
pub fn aleatoric_loss_with_grad(
    logits: &Array1<f64>,
    sigma2: &Array1<f64>,
    target: usize,
    mc: &McConfig,
) -> Result<DistortedLoss> {
    let c = logits.len();
    let z = distorted_logprobs(logits, sigma2, target, mc)?;
    let t_count = mc.samples as f64;
    let value = t_count.ln() - log_sum_exp(&z)?;
    // Sample weights: softmax of z over t.
    let w = softmax_raw(&z);

    let scale = noise_scale(sigma2, mc.perturb_scale)?;
    let mut d_logits = Array1::zeros(c);
    let mut d_scale = Array1::zeros(c);
    for t in 0..mc.samples {
        let eps = mc.stream.child(t as u64).standard_normal_vec(c);
        let y_t = logits + &(&eps * &scale);
        let mut p_t = softmax_raw(y_t.as_slice().unwrap());
        p_t[target] -= 1.0;
        for k in 0..c {
            d_logits[k] += w[t] * p_t[k];
            d_scale[k] += w[t] * p_t[k] * eps[k];
        }
    }
    let d_sigma2 = match mc.perturb_scale {
        PerturbScale::Stddev => Array1::from_iter(
            d_scale
                .iter()
                .zip(scale.iter())
                .map(|(&g, &s)| if s > 0.0 { g / (2.0 * s) } else { 0.0 }),
        ),
        PerturbScale::Variance => d_scale,
    };
    Ok(DistortedLoss { value, d_logits, d_sigma2 })
}

/// Predictive uncertainty loss: the distorted NLL with the scalar
/// predictive uncertainty broadcast to every class.
pub fn predictive_loss(
    logits: &Array1<f64>,
    sigma2_p: f64,
    target: usize,
    mc: &McConfig,
) -> Result<f64> {
    if sigma2_p < 0.0 {
        return Err(Error::NegativeVariance(sigma2_p));
    }
    let sigma2 = Array1::from_elem(logits.len(), sigma2_p);
    aleatoric_loss(logits, &sigma2, target, mc)
}

/// Monte Carlo predictive distribution over `T` stochastic classifier
/// passes (fresh dropout masks per sample, drawn from `stream.child(t)`).
///
/// Returns the averaged softmax and the per-sample aleatoric variances
/// `v_t`, each reduced to a scalar as the mean over classes of
/// `softplus(log_var_t)`.
#[derive(Debug, Clone)]
pub struct McPrediction {
    pub probs: ProbabilityVector,
    pub v_per_sample: Vec<f64>,
}

/// Runs the full pipeline once (the attention trunk is deterministic) and
/// resamples the classifier with fresh dropout masks per MC sample.
pub fn mc_predictive_distribution(
    symbols: &ndarray::Array2<usize>,
    tokens: &[usize],
    params: &Parameters,
    cfg: &ModelConfig,
    dropout_rate: f64,
    mc: &McConfig,
) -> Result<McPrediction> {
    let pass = model::forward(symbols, tokens, params, cfg, &DropoutSpec::off())?;
    mc_predictive_from_attended(&pass.attended, params, dropout_rate, mc)
}

/// Same as [`mc_predictive_distribution`] but reusing an already-computed
/// attended feature vector.
pub fn mc_predictive_from_attended(
    attended: &Array1<f64>,
    params: &Parameters,
    dropout_rate: f64,
    mc: &McConfig,
) -> Result<McPrediction> {
    if mc.samples < 1 {
        return Err(Error::InvalidSampleCount);
    }
    let c = params.logit_b.len();
    let mut mean_p = Array1::zeros(c);
    let mut v_per_sample = Vec::with_capacity(mc.samples);
    for t in 0..mc.samples {
        let spec = DropoutSpec::new(dropout_rate, mc.stream.child(t as u64));
        let (logits_t, log_var_t) = model::sample_heads(attended, params, &spec);
        mean_p += &softmax_raw(logits_t.as_slice().unwrap());
        v_per_sample.push(log_var_t.mapv(softplus).mean().unwrap());
    }
    mean_p /= mc.samples as f64;
    Ok(McPrediction { probs: ProbabilityVector::new(mean_p)?, v_per_sample })
}

/// Predictive uncertainty decomposition: entropy of the MC-averaged
/// distribution plus the mean per-sample aleatoric variance.
#[derive(Debug, Clone)]
pub struct UncertaintyEstimate {
    /// Per-class aleatoric variance of the deterministic pass.
    pub sigma2_a: Array1<f64>,
    /// Entropy `H` of the MC-averaged predictive distribution.
    pub entropy: f64,
    /// `(1/T) Σ_t v_t`.
    pub mean_aleatoric: f64,
    /// `H + mean_aleatoric`.
    pub sigma2_p: f64,
}

pub fn predictive_uncertainty(
    probs: &ProbabilityVector,
    v_per_sample: &[f64],
    sigma2_a: Array1<f64>,
) -> UncertaintyEstimate {
    let h = entropy(probs);
    let mean_aleatoric = if v_per_sample.is_empty() {
        0.0
    } else {
        v_per_sample.iter().sum::<f64>() / v_per_sample.len() as f64
    };
    UncertaintyEstimate { sigma2_a, entropy: h, mean_aleatoric, sigma2_p: h + mean_aleatoric }
}

/// Variance equalizer: `Σ_c relu(exp(sigma2_c) - exp(sigma0^2))`, the
/// hinged form. Zero on `{sigma2_c <= sigma0^2}`, strictly increasing off
/// that set.
pub fn variance_equalizer(sigma2: &Array1<f64>, sigma0: f64) -> f64 {
    let floor = (sigma0 * sigma0).exp();
    sigma2.iter().map(|&v| (v.exp() - floor).max(0.0)).sum()
}

/// Gradient of [`variance_equalizer`] with respect to each variance.
pub fn variance_equalizer_grad(sigma2: &Array1<f64>, sigma0: f64) -> Array1<f64> {
    let floor = (sigma0 * sigma0).exp();
    sigma2.mapv(|v| {
        let e = v.exp();
        if e > floor {
            e
        } else {
            0.0
        }
    })
}

/// Which reading of the distorted-gap penalty to use. `Piecewise` is the
/// primary equation form; `Algorithm` is the squared-exponential variant
/// kept for ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum UdlVariant {
    #[default]
    Piecewise,
    Algorithm,
}

/// Distorted-gap penalty on `delta = l_p - l_y`:
/// `alpha (exp(delta) - 1)` when `delta < 0`, `delta` otherwise.
/// Continuous at 0 and bounded below by `-alpha`.
pub fn uncertainty_distorted_loss(l_p: f64, l_y: f64, alpha: f64) -> f64 {
    let delta = l_p - l_y;
    if delta < 0.0 {
        alpha * (delta.exp() - 1.0)
    } else {
        delta
    }
}

pub fn udl_value(variant: UdlVariant, l_p: f64, l_y: f64, alpha: f64) -> f64 {
    match variant {
        UdlVariant::Piecewise => uncertainty_distorted_loss(l_p, l_y, alpha),
        // exp(l_y - l_p)^2 = exp(2 (l_y - l_p))
        UdlVariant::Algorithm => (2.0 * (l_y - l_p)).exp(),
    }
}

/// Derivative of the gap penalty with respect to `delta = l_p - l_y`.
pub fn udl_slope(variant: UdlVariant, l_p: f64, l_y: f64, alpha: f64) -> f64 {
    let delta = l_p - l_y;
    match variant {
        UdlVariant::Piecewise => {
            if delta < 0.0 {
                alpha * delta.exp()
            } else {
                1.0
            }
        }
        UdlVariant::Algorithm => -2.0 * (-2.0 * delta).exp(),
    }
}

/// All scalar losses of one step (or one example), with disabled
/// components stored as exact zeros so that
/// `l_u == l_p + l_ve + l_udl` holds unconditionally.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossBundle {
    pub mode: Mode,
    pub l_y: f64,
    pub l_p: f64,
    pub l_ve: f64,
    pub l_udl: f64,
    pub l_u: f64,
    pub c_total: f64,
}

/// Raw component values computed for the active mode. `None` marks a
/// component that was not evaluated.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossComponents {
    pub l_y: f64,
    pub l_p: Option<f64>,
    pub l_ve: Option<f64>,
    pub l_udl: Option<f64>,
}

/// Assembles the per-example bundle for `mode`, summing only the enabled
/// components; disabled ones contribute exactly zero.
pub fn total_uncertainty_loss(
    components: &LossComponents,
    mode: Mode,
    eta_loss: f64,
) -> Result<LossBundle> {
    let require = |value: Option<f64>, what: &str| {
        value.ok_or_else(|| {
            Error::Config(format!("mode {mode} needs {what} but it was not computed"))
        })
    };
    let l_p = if mode.has_lp() { require(components.l_p, "L_p")? } else { 0.0 };
    let l_ve = if mode.has_ve() { require(components.l_ve, "L_VE")? } else { 0.0 };
    let l_udl = if mode.has_udl() { require(components.l_udl, "L_UDL")? } else { 0.0 };
    let l_u = l_p + l_ve + l_udl;
    Ok(LossBundle {
        mode,
        l_y: components.l_y,
        l_p,
        l_ve,
        l_udl,
        l_u,
        c_total: components.l_y + eta_loss * l_u,
    })
}

/// Batch cost `C = (1/n) Σ_j (l_y_j + eta l_u_j)`.
pub fn total_cost(bundles: &[LossBundle], eta_loss: f64) -> Result<f64> {
    if bundles.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = bundles.len() as f64;
    Ok(bundles.iter().map(|b| b.l_y + eta_loss * b.l_u).sum::<f64>() / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn mc(samples: usize, seed: u64) -> McConfig {
        McConfig::new(samples, RngStream::new(seed, 0))
    }

    #[test]
    fn cross_entropy_reference_points() {
        let uniform = Array1::zeros(16);
        assert_relative_eq!(cross_entropy(&uniform, 3).unwrap(), 16f64.ln(), epsilon = 1e-12);
        let mut spiked = Array1::zeros(16);
        spiked[5] = 50.0;
        assert!(cross_entropy(&spiked, 5).unwrap() < 1e-20);
        // identity with -log softmax[target]
        let logits = Array1::from_vec(vec![0.1, -2.0, 1.4, 0.7]);
        let p = softmax_raw(logits.as_slice().unwrap());
        for t in 0..4 {
            assert_relative_eq!(
                cross_entropy(&logits, t).unwrap(),
                -p[t].ln(),
                epsilon = 1e-12
            );
        }
        assert!(cross_entropy(&logits, 4).is_err());
    }

    #[test]
    fn distort_logits_with_zero_variance_is_identity() {
        let logits = Array1::from_vec(vec![0.5, -1.0, 2.0]);
        let sigma2 = Array1::zeros(3);
        let conf = mc(8, 1);
        for t in 0..8 {
            assert_eq!(distort_logits(&logits, &sigma2, &conf, t).unwrap(), logits);
        }
    }

    #[test]
    fn distort_logits_is_reproducible_and_validates() {
        let logits = Array1::from_vec(vec![0.5, -1.0, 2.0]);
        let sigma2 = Array1::from_vec(vec![1.0, 0.5, 2.0]);
        let conf = mc(4, 2);
        assert_eq!(
            distort_logits(&logits, &sigma2, &conf, 1).unwrap(),
            distort_logits(&logits, &sigma2, &conf, 1).unwrap()
        );
        assert_ne!(
            distort_logits(&logits, &sigma2, &conf, 1).unwrap(),
            distort_logits(&logits, &sigma2, &conf, 2).unwrap()
        );
        let bad = Array1::from_vec(vec![1.0, -0.1, 2.0]);
        assert!(matches!(
            distort_logits(&logits, &bad, &conf, 0),
            Err(Error::NegativeVariance(_))
        ));
    }

    #[test]
    fn stddev_mode_distortion_has_unit_variance() {
        let logits = Array1::zeros(1);
        let sigma2 = Array1::from_elem(1, 1.0);
        let conf = mc(100_000, 3);
        let draws: Vec<f64> = (0..conf.samples)
            .map(|t| distort_logits(&logits, &sigma2, &conf, t).unwrap()[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var =
            draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / draws.len() as f64;
        assert!((0.98..=1.02).contains(&var), "sample variance {var}");
    }

    #[test]
    fn aleatoric_loss_reduces_to_cross_entropy_at_zero_variance() {
        let logits = Array1::from_vec(vec![0.3, -0.7, 1.9, 0.0, -2.2]);
        let sigma2 = Array1::zeros(5);
        let ce = cross_entropy(&logits, 2).unwrap();
        for t in [1usize, 10, 100] {
            let aul = aleatoric_loss(&logits, &sigma2, 2, &mc(t, 4)).unwrap();
            assert!((aul - ce).abs() < 1e-12, "T={t}: {aul} vs {ce}");
        }
    }

    #[test]
    fn single_class_aleatoric_loss_is_exactly_zero() {
        let logits = Array1::from_vec(vec![1.7]);
        let sigma2 = Array1::from_vec(vec![0.8]);
        assert_eq!(aleatoric_loss(&logits, &sigma2, 0, &mc(16, 5)).unwrap(), 0.0);
    }

    #[test]
    fn paper_sign_flag_negates_the_loss() {
        let logits = Array1::from_vec(vec![0.3, -0.7, 1.9]);
        let sigma2 = Array1::from_elem(3, 0.5);
        let conf = mc(32, 6);
        let a = aleatoric_loss(&logits, &sigma2, 1, &conf).unwrap();
        let b = aleatoric_loss_paper_sign(&logits, &sigma2, 1, &conf).unwrap();
        assert_eq!(a, -b);
    }

    #[test]
    fn t32_estimate_is_within_three_standard_errors_of_large_t_oracle() {
        let mut rng_seed = 100u64;
        for case in 0..20 {
            rng_seed += 1;
            let stream = RngStream::new(rng_seed, 7);
            let logits = stream.child(0).standard_normal_vec(8) * 2.0;
            let sigma2 = stream.child(1).standard_normal_vec(8).mapv(|v| v.abs());
            let target = case % 8;
            let oracle =
                aleatoric_loss(&logits, &sigma2, target, &mc(100_000, 999)).unwrap();
            // Standard error of the T=32 estimator from 64 replicates.
            let reps: Vec<f64> = (0..64)
                .map(|r| {
                    aleatoric_loss(&logits, &sigma2, target, &mc(32, 10_000 + r)).unwrap()
                })
                .collect();
            let mean = reps.iter().sum::<f64>() / reps.len() as f64;
            let se = (reps.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (reps.len() - 1) as f64)
                .sqrt();
            let estimate = aleatoric_loss(&logits, &sigma2, target, &mc(32, case)).unwrap();
            assert!(
                (estimate - oracle).abs() <= 3.0 * se,
                "case {case}: estimate {estimate}, oracle {oracle}, se {se}"
            );
        }
    }

    #[test]
    fn aleatoric_gradients_match_finite_differences() {
        let logits = Array1::from_vec(vec![0.4, -1.1, 0.9, 0.2]);
        let sigma2 = Array1::from_vec(vec![0.5, 1.2, 0.3, 0.8]);
        let conf = mc(16, 8);
        let target = 2;
        let g = aleatoric_loss_with_grad(&logits, &sigma2, target, &conf).unwrap();
        assert_relative_eq!(
            g.value,
            aleatoric_loss(&logits, &sigma2, target, &conf).unwrap(),
            epsilon = 1e-12
        );
        let h = 1e-6;
        for k in 0..4 {
            let mut lp = logits.clone();
            lp[k] += h;
            let mut lm = logits.clone();
            lm[k] -= h;
            let fd = (aleatoric_loss(&lp, &sigma2, target, &conf).unwrap()
                - aleatoric_loss(&lm, &sigma2, target, &conf).unwrap())
                / (2.0 * h);
            assert_relative_eq!(g.d_logits[k], fd, epsilon = 1e-6);

            let mut sp = sigma2.clone();
            sp[k] += h;
            let mut sm = sigma2.clone();
            sm[k] -= h;
            let fd = (aleatoric_loss(&logits, &sp, target, &conf).unwrap()
                - aleatoric_loss(&logits, &sm, target, &conf).unwrap())
                / (2.0 * h);
            assert_relative_eq!(g.d_sigma2[k], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn predictive_loss_is_broadcast_aleatoric_loss() {
        let logits = Array1::from_vec(vec![0.4, -1.1, 0.9]);
        let conf = mc(32, 9);
        let pul = predictive_loss(&logits, 0.7, 1, &conf).unwrap();
        let broadcast = Array1::from_elem(3, 0.7);
        assert_eq!(pul, aleatoric_loss(&logits, &broadcast, 1, &conf).unwrap());
        // zero predictive variance -> cross entropy
        let ce = cross_entropy(&logits, 1).unwrap();
        assert!((predictive_loss(&logits, 0.0, 1, &conf).unwrap() - ce).abs() < 1e-12);
        assert!(predictive_loss(&logits, -0.1, 1, &conf).is_err());
    }

    #[test]
    fn variance_equalizer_reference_points() {
        let at_floor = Array1::from_elem(4, 0.25);
        assert_eq!(variance_equalizer(&at_floor, 0.5), 0.0);
        let one = Array1::from_vec(vec![1.0]);
        assert_relative_eq!(
            variance_equalizer(&one, 0.0),
            std::f64::consts::E - 1.0,
            epsilon = 1e-7
        );
        // monotone nondecreasing per coordinate
        let lo = Array1::from_vec(vec![0.1, 0.2]);
        let hi = Array1::from_vec(vec![0.3, 0.2]);
        assert!(variance_equalizer(&hi, 0.0) >= variance_equalizer(&lo, 0.0));
        // gradient is exp on the active set, zero elsewhere
        let g = variance_equalizer_grad(&Array1::from_vec(vec![1.0, 0.1]), 0.5);
        assert_relative_eq!(g[0], 1f64.exp(), epsilon = 1e-12);
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn udl_reference_points() {
        assert_eq!(uncertainty_distorted_loss(1.0, 1.0, 1.0), 0.0);
        assert_relative_eq!(uncertainty_distorted_loss(2.0, 1.0, 1.0), 1.0, epsilon = 1e-12);
        assert_relative_eq!(
            uncertainty_distorted_loss(0.0, 1.0, 1.0),
            (-1f64).exp() - 1.0,
            epsilon = 1e-7
        );
        // slope matches the active branch
        assert_relative_eq!(udl_slope(UdlVariant::Piecewise, 2.0, 1.0, 1.0), 1.0);
        assert_relative_eq!(
            udl_slope(UdlVariant::Piecewise, 0.0, 1.0, 0.5),
            0.5 * (-1f64).exp(),
            epsilon = 1e-12
        );
        // algorithm variant: exp(2 (l_y - l_p))
        assert_relative_eq!(
            udl_value(UdlVariant::Algorithm, 0.5, 1.0, 1.0),
            1f64.exp(),
            epsilon = 1e-12
        );
    }

    proptest! {
        #[test]
        fn udl_is_continuous_and_bounded_below(
            delta in -20.0f64..20.0,
            alpha in 0.1f64..5.0,
        ) {
            let l_y = 1.0;
            let v = uncertainty_distorted_loss(l_y + delta, l_y, alpha);
            prop_assert!(v >= -alpha);
            // continuity at 0: both branches vanish
            let eps = 1e-9;
            let below = uncertainty_distorted_loss(l_y - eps, l_y, alpha);
            let above = uncertainty_distorted_loss(l_y + eps, l_y, alpha);
            prop_assert!(below.abs() < 1e-8 * alpha.max(1.0));
            prop_assert!(above.abs() < 1e-8);
        }

        #[test]
        fn variance_equalizer_zero_on_floor_set(
            vals in proptest::collection::vec(0.0f64..0.2, 1..6),
            sigma0 in 0.5f64..1.0,
        ) {
            // all sigma2 <= sigma0^2 (0.2 < 0.25) -> exactly zero
            let sigma2 = Array1::from_vec(vals);
            prop_assert_eq!(variance_equalizer(&sigma2, sigma0), 0.0);
        }
    }

    #[test]
    fn mode_parsing_round_trips_and_rejects_unknown() {
        for m in Mode::ALL {
            assert_eq!(Mode::parse(m.name()).unwrap(), m);
            assert_eq!(Mode::parse(&m.name().to_uppercase()).unwrap(), m);
        }
        match Mode::parse("frobnicate") {
            Err(Error::UnknownMode { valid, .. }) => assert!(valid.contains("p-gca")),
            other => panic!("expected UnknownMode, got {other:?}"),
        }
    }

    /// Exhaustive enabled-component table; one row per ablation mode.
    #[test]
    fn mode_component_table_is_exact() {
        use Mode::*;
        // (mode, l_p, ve, udl, gca, predictive)
        let table = [
            (Baseline, false, false, false, false, false),
            (Ve, false, true, false, false, false),
            (Udl, false, false, true, false, false),
            (Aul, true, false, false, false, false),
            (Pul, true, false, false, false, true),
            (UdlVe, false, true, true, false, false),
            (AulVe, true, true, false, false, false),
            (PulVe, true, true, false, false, true),
            (AulUdl, true, false, true, false, false),
            (PulUdl, true, false, true, false, true),
            (AGca, true, true, true, true, false),
            (PGca, true, true, true, true, true),
        ];
        assert_eq!(table.len(), Mode::ALL.len());
        for (mode, lp, ve, udl, gca, pred) in table {
            assert_eq!(mode.has_lp(), lp, "{mode} l_p");
            assert_eq!(mode.has_ve(), ve, "{mode} ve");
            assert_eq!(mode.has_udl(), udl, "{mode} udl");
            assert_eq!(mode.has_gca(), gca, "{mode} gca");
            assert_eq!(mode.uses_predictive(), pred, "{mode} predictive");
        }
    }

    #[test]
    fn bundle_assembly_sums_only_enabled_components() {
        let comps = LossComponents {
            l_y: 2.0,
            l_p: Some(0.5),
            l_ve: Some(0.25),
            l_udl: Some(0.125),
        };
        let b = total_uncertainty_loss(&comps, Mode::Baseline, 0.5).unwrap();
        assert_eq!(b.l_u, 0.0);
        assert_eq!(b.c_total, 2.0);
        let b = total_uncertainty_loss(&comps, Mode::AulVe, 0.5).unwrap();
        assert_eq!(b.l_u, 0.75);
        assert_eq!(b.l_udl, 0.0);
        let b = total_uncertainty_loss(&comps, Mode::PGca, 0.5).unwrap();
        assert_eq!(b.l_u, 0.875);
        // missing required component is an error
        let missing = LossComponents { l_y: 2.0, ..Default::default() };
        assert!(total_uncertainty_loss(&missing, Mode::Aul, 0.5).is_err());
    }

    #[test]
    fn total_cost_reference_points() {
        let mk = |l_y: f64, l_u: f64| LossBundle {
            mode: Mode::Aul,
            l_y,
            l_p: l_u,
            l_ve: 0.0,
            l_udl: 0.0,
            l_u,
            c_total: 0.0,
        };
        let bundles = [mk(1.0, 0.5), mk(3.0, 1.5)];
        assert_relative_eq!(total_cost(&bundles, 0.0).unwrap(), 2.0, epsilon = 1e-12);
        assert_relative_eq!(total_cost(&bundles, 1.0).unwrap(), 3.0, epsilon = 1e-12);
        // linear in eta
        let c0 = total_cost(&bundles, 0.0).unwrap();
        let c1 = total_cost(&bundles, 1.0).unwrap();
        let c2 = total_cost(&bundles, 2.0).unwrap();
        assert_relative_eq!(c2 - c1, c1 - c0, epsilon = 1e-12);
        // single bundle
        assert_relative_eq!(
            total_cost(&bundles[..1], 0.5).unwrap(),
            1.0 + 0.5 * 0.5,
            epsilon = 1e-12
        );
        assert!(matches!(total_cost(&[], 0.5), Err(Error::EmptyBatch)));
    }

    #[test]
    fn estimator_standard_error_scales_as_inverse_sqrt_t() {
        let logits = Array1::from_vec(vec![0.5, -0.3, 1.1, -0.8]);
        let sigma2 = Array1::from_elem(4, 1.5);
        let ts = [8usize, 32, 128, 512];
        let mut points = Vec::new();
        for (i, &t) in ts.iter().enumerate() {
            let reps: Vec<f64> = (0..96)
                .map(|r| {
                    aleatoric_loss(&logits, &sigma2, 0, &mc(t, 5000 + (i * 100 + r) as u64))
                        .unwrap()
                })
                .collect();
            let mean = reps.iter().sum::<f64>() / reps.len() as f64;
            let sd = (reps.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (reps.len() - 1) as f64)
                .sqrt();
            points.push(((t as f64).ln(), sd.ln()));
        }
        let n = points.len() as f64;
        let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
        let my = points.iter().map(|p| p.1).sum::<f64>() / n;
        let slope = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum::<f64>();
        assert!(
            (slope + 0.5).abs() <= 0.1,
            "log-log standard error slope {slope}, expected -0.5 ± 0.1"
        );
    }
}
