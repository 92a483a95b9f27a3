//! Numerically stable primitives and seeded randomness.
//!
//! Everything downstream (losses, attention softmax, entropy, Monte Carlo
//! sampling) is built on the handful of functions in this module, so each one
//! is written in its overflow-safe form and kept total on finite input.
//! All computation is in `f64`.

use ndarray::{Array1, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

/// Overflow-safe softplus, `log(1 + exp(x))`, computed as
/// `max(x, 0) + log1p(exp(-|x|))`. Strictly positive for finite input.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Derivative of [`softplus`]: the logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise [`softplus`] over a vector.
pub fn softplus_vec(x: &Array1<f64>) -> Array1<f64> {
    x.mapv(softplus)
}

/// Shift-stabilized `log Σ exp(x)`. Exact when `x` has a single element.
pub fn log_sum_exp(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = x.iter().map(|&v| (v - m).exp()).sum();
    Ok(m + sum.ln())
}

/// A vector of class probabilities: nonnegative entries summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector {
    values: Array1<f64>,
}

impl ProbabilityVector {
    /// Validates that entries lie in `[0, 1]` and sum to 1 within `1e-9`.
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyReduction);
        }
        if let Some(&bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidProbability(format!(
                "entry {bad} outside [0, 1]"
            )));
        }
        let sum: f64 = values.sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidProbability(format!("sum {sum} != 1")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Built from an exponent-shifted softmax, so invariants hold by
    /// construction; skips revalidation.
    pub(crate) fn from_softmax_unchecked(values: Array1<f64>) -> Self {
        Self { values }
    }
}

/// Shift-stabilized softmax: `exp(x - max) / Σ exp(x - max)`.
pub fn softmax(x: &[f64]) -> Result<ProbabilityVector> {
    if x.is_empty() {
        return Err(Error::EmptyReduction);
    }
    Ok(ProbabilityVector::from_softmax_unchecked(softmax_raw(x)))
}

/// Softmax returning a plain array; used on hot paths where the caller
/// immediately consumes the probabilities.
pub(crate) fn softmax_raw(x: &[f64]) -> Array1<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Array1<f64> = x.iter().map(|&v| (v - m).exp()).collect();
    let sum = e.sum();
    e.mapv_inplace(|v| v / sum);
    e
}

/// Shannon entropy `-Σ p log p` with `0 · log 0 := 0`, clamped to the
/// mathematically guaranteed range `[0, ln C]` to absorb rounding at the
/// uniform vector.
pub fn entropy(p: &ProbabilityVector) -> f64 {
    let h: f64 = p
        .values()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum();
    h.clamp(0.0, (p.len() as f64).ln())
}

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(SPLITMIX_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A value-type handle on a deterministic random stream.
///
/// Streams are derived counter-style: a child key is a hash of the parent
/// key and the child id, so `(master_seed, stream_id)` always denotes the
/// same sequence and distinct ids give statistically independent streams.
/// Parallel consumers hold distinct ids and reduce in fixed order, which
/// keeps every sampled quantity bit-reproducible for a fixed master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    key: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        Self {
            key: splitmix64(splitmix64(master_seed) ^ splitmix64(stream_id)),
        }
    }

    /// Derives an independent child stream.
    pub fn child(&self, id: u64) -> Self {
        Self {
            key: splitmix64(self.key ^ splitmix64(id)),
        }
    }

    /// Derives a child stream from a purpose label ("dropout", "shuffle", ...).
    pub fn child_tag(&self, tag: &str) -> Self {
        let mut h = 0xcbf2_9ce4_8422_2325u64; // FNV-1a
        for b in tag.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        self.child(h)
    }

    /// Instantiates the generator at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.key)
    }

    /// `n` i.i.d. standard normal draws; identical for identical streams.
    pub fn standard_normal_vec(&self, n: usize) -> Array1<f64> {
        let mut rng = self.rng();
        Array1::from_iter((0..n).map(|_| StandardNormal.sample(&mut rng)))
    }

    /// Standard normal draws filling a `(u, v, d)` array in row-major order.
    pub fn standard_normal_3d(&self, shape: (usize, usize, usize)) -> Array3<f64> {
        let n = shape.0 * shape.1 * shape.2;
        let mut rng = self.rng();
        let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Array3::from_shape_vec(shape, data).expect("length matches shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn softplus_reference_points() {
        assert_relative_eq!(softplus(0.0), 2f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(softplus(50.0), 50.0, epsilon = 1e-12);
        // deep negative tail: softplus(x) ~ exp(x)
        let oracle = (-50f64).exp();
        let got = softplus(-50.0);
        assert!((got - oracle).abs() / oracle < 0.1, "got {got}, oracle {oracle}");
        assert!(got > 0.0);
    }

    #[test]
    fn log_sum_exp_reference_points() {
        assert_relative_eq!(log_sum_exp(&[0.0, 0.0]).unwrap(), 2f64.ln(), epsilon = 1e-12);
        // no overflow for large inputs
        assert_relative_eq!(
            log_sum_exp(&[1000.0, 1000.0]).unwrap(),
            1000.0 + 2f64.ln(),
            epsilon = 1e-12
        );
        // exact identity on a single element
        assert_eq!(log_sum_exp(&[3.25]).unwrap(), 3.25);
        assert!(matches!(log_sum_exp(&[]), Err(Error::EmptyReduction)));
    }

    #[test]
    fn softmax_reference_points() {
        let p = softmax(&[0.0, 0.0, 0.0, 0.0]).unwrap();
        for &v in p.values() {
            assert_relative_eq!(v, 0.25, epsilon = 1e-12);
        }
        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        assert_relative_eq!(p.values()[0], 1.0 / 6.0, epsilon = 1e-12);
        assert_relative_eq!(p.values()[1], 2.0 / 6.0, epsilon = 1e-12);
        assert_relative_eq!(p.values()[2], 3.0 / 6.0, epsilon = 1e-12);
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn entropy_reference_points() {
        let uniform = ProbabilityVector::new(Array1::from_elem(4, 0.25)).unwrap();
        assert_relative_eq!(entropy(&uniform), 4f64.ln(), epsilon = 1e-12);
        let one_hot = ProbabilityVector::new(Array1::from_vec(vec![0.0, 1.0, 0.0])).unwrap();
        assert_eq!(entropy(&one_hot), 0.0);
        let half = ProbabilityVector::new(Array1::from_vec(vec![0.5, 0.5])).unwrap();
        assert_relative_eq!(entropy(&half), 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn entropy_maximal_only_at_uniform() {
        let c = 5;
        let uniform = ProbabilityVector::new(Array1::from_elem(c, 1.0 / c as f64)).unwrap();
        let h_max = entropy(&uniform);
        for i in 0..c {
            let mut v = Array1::from_elem(c, 1.0 / c as f64);
            let eps = 0.01;
            v[i] += eps;
            v[(i + 1) % c] -= eps;
            let p = ProbabilityVector::new(v).unwrap();
            assert!(entropy(&p) < h_max);
        }
    }

    #[test]
    fn probability_vector_rejects_bad_input() {
        assert!(ProbabilityVector::new(Array1::from_vec(vec![0.5, 0.6])).is_err());
        assert!(ProbabilityVector::new(Array1::from_vec(vec![-0.1, 1.1])).is_err());
        assert!(ProbabilityVector::new(Array1::from_vec(vec![])).is_err());
    }

    #[test]
    fn identical_streams_are_bitwise_identical() {
        let a = RngStream::new(7, 3).standard_normal_vec(64);
        let b = RngStream::new(7, 3).standard_normal_vec(64);
        assert_eq!(a, b);
        let c = RngStream::new(7, 4).standard_normal_vec(64);
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_moments_match_clt_bounds() {
        let x = RngStream::new(42, 0).standard_normal_vec(1_000_000);
        let mean = x.mean().unwrap();
        let var = x.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
        assert!(mean.abs() < 0.004, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn distinct_streams_are_uncorrelated() {
        let n = 100_000;
        let a = RngStream::new(11, 0).standard_normal_vec(n);
        let b = RngStream::new(11, 1).standard_normal_vec(n);
        let ma = a.mean().unwrap();
        let mb = b.mean().unwrap();
        let cov: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(&x, &y)| (x - ma) * (y - mb))
            .sum::<f64>()
            / n as f64;
        let sa = a.mapv(|v| (v - ma) * (v - ma)).mean().unwrap().sqrt();
        let sb = b.mapv(|v| (v - mb) * (v - mb)).mean().unwrap().sqrt();
        assert!((cov / (sa * sb)).abs() < 0.02);
    }

    #[test]
    fn child_streams_differ_from_parent() {
        let s = RngStream::new(1, 2);
        assert_ne!(s.child(0), s);
        assert_ne!(s.child(0), s.child(1));
        assert_eq!(s.child_tag("dropout"), s.child_tag("dropout"));
        assert_ne!(s.child_tag("dropout"), s.child_tag("shuffle"));
    }

    proptest! {
        #[test]
        fn softplus_monotone_and_bounded(a in -80.0f64..80.0, b in -80.0f64..80.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(softplus(lo) <= softplus(hi));
            prop_assert!(softplus(a) >= a);
            prop_assert!(softplus(a) > 0.0);
        }

        #[test]
        fn log_sum_exp_dominates_max(xs in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
            let lse = log_sum_exp(&xs).unwrap();
            let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lse >= max - 1e-12);
            if xs.len() == 1 {
                prop_assert_eq!(lse, max);
            } else {
                prop_assert!(lse > max);
            }
        }

        #[test]
        fn softmax_is_shift_invariant(
            xs in proptest::collection::vec(-30.0f64..30.0, 2..10),
            c in -100.0f64..100.0,
        ) {
            let p = softmax(&xs).unwrap();
            let shifted: Vec<f64> = xs.iter().map(|&v| v + c).collect();
            let q = softmax(&shifted).unwrap();
            let sum: f64 = p.values().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            for (a, b) in p.values().iter().zip(q.values().iter()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
