//! Toy multimodal classifier with explicit vector–Jacobian contracts.
//!
//! The pipeline is
//!
//! ```text
//! scene symbols --embed--> g_i ┐
//!                              ├--attend--> (alpha, F) --pool--> f
//! question tokens --embed--> g_q ┘                               |
//!                              2-layer tanh classifier + dropout |
//!                                                   hidden <-----┘
//!                                     logits (theta_y) / log-variance (theta_u)
//! ```
//!
//! `F` is the spatially indexed attended feature map; it is the tap point
//! where the backward pass can report `∂L/∂F` and accept an additive
//! override whose effect propagates consistently to `theta_f`, `theta_q`,
//! and `theta_i`. Every stage below has a hand-written VJP; the tests pin
//! them against central finite differences.

mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, PartitionRecord};
pub use params::{Entry, EntryMut, ModelConfig, Parameters, ENTRY_NAMES};

use ndarray::{Array1, Array2, Array3, ArrayView2};
use rand::Rng;

use crate::numerics::{softmax_raw, RngStream};
use crate::{Error, Result};

/// Per-cell image embedding grid `g_i`, shaped `u × v × c_img`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub features: Array3<f64>,
}

/// Pooled question embedding `g_q`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionEmbedding {
    pub vector: Array1<f64>,
}

/// Normalized spatial attention, `u × v`, summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub alpha: Array2<f64>,
}

/// The attended feature map `F` with `F[u,v,:] = alpha[u,v] * value(g_i[u,v,:])`
/// and its pooled vector `f = Σ_{u,v} F[u,v,:]` (the sum is taken row-major
/// over cells, so pooling `F` reproduces `attended` exactly).
#[derive(Debug, Clone, PartialEq)]
pub struct AttendedFeatureMap {
    pub map: Array3<f64>,
    pub attended: Array1<f64>,
}

/// Dropout configuration for the classifier hidden layers.
///
/// With `rate == 0` the forward pass is deterministic. Otherwise masks are
/// drawn from `stream`, so the same stream value always yields the same
/// masks (inverted dropout: kept units are scaled by `1/(1-rate)`).
#[derive(Debug, Clone, Copy)]
pub struct DropoutSpec {
    pub rate: f64,
    pub stream: RngStream,
}

impl DropoutSpec {
    pub fn off() -> Self {
        Self { rate: 0.0, stream: RngStream::new(0, 0) }
    }

    pub fn new(rate: f64, stream: RngStream) -> Self {
        Self { rate, stream }
    }

    fn sample_masks(&self, hidden: usize) -> (Option<Array1<f64>>, Option<Array1<f64>>) {
        if self.rate == 0.0 {
            return (None, None);
        }
        let keep = 1.0 - self.rate;
        let scale = keep.recip();
        let mut rng = self.stream.rng();
        let mut draw = |n: usize| {
            Some(Array1::from_iter((0..n).map(|_| {
                if rng.gen::<f64>() < keep {
                    scale
                } else {
                    0.0
                }
            })))
        };
        (draw(hidden), draw(hidden))
    }
}

/// Everything recorded during one forward evaluation; the backward pass
/// reads activations from here instead of recomputing them.
#[derive(Debug, Clone)]
pub struct RecordedPass {
    pub symbols: Array2<usize>,
    pub tokens: Vec<usize>,
    pub g_i: Array3<f64>,
    pub q_mean: Array1<f64>,
    pub g_q: Array1<f64>,
    pub img_keys: Array3<f64>,
    pub q_key: Array1<f64>,
    pub scores: Array2<f64>,
    pub alpha: Array2<f64>,
    pub values: Array3<f64>,
    pub feature_map: Array3<f64>,
    pub attended: Array1<f64>,
    pub mask1: Option<Array1<f64>>,
    pub mask2: Option<Array1<f64>>,
    pub h1: Array1<f64>,
    pub h1_drop: Array1<f64>,
    pub h2: Array1<f64>,
    pub hidden: Array1<f64>,
    pub logits: Array1<f64>,
    pub log_var: Array1<f64>,
}

/// Gradient seed at the two head outputs; every loss in the crate reduces
/// to a pair `(∂L/∂logits, ∂L/∂log_var)`.
#[derive(Debug, Clone)]
pub struct BackwardSeed {
    pub d_logits: Array1<f64>,
    pub d_log_var: Array1<f64>,
}

impl BackwardSeed {
    pub fn from_logits(d_logits: Array1<f64>) -> Self {
        let n = d_logits.len();
        Self { d_logits, d_log_var: Array1::zeros(n) }
    }
}

/// Output of a full backward pass: per-partition gradients plus the tap
/// gradient `∂L/∂F` (before any injected override).
#[derive(Debug, Clone)]
pub struct BackwardResult {
    pub grads: Parameters,
    pub tap: Array3<f64>,
}

fn flat2(a: &Array3<f64>) -> ArrayView2<'_, f64> {
    let (u, v, d) = a.dim();
    a.view()
        .into_shape_with_order((u * v, d))
        .expect("recorded arrays are standard layout")
}

/// Embeds a `u × v` grid of scene symbol ids.
pub fn encode_image(
    symbols: &Array2<usize>,
    params: &Parameters,
    cfg: &ModelConfig,
) -> Result<ImageGrid> {
    let (u, v) = symbols.dim();
    if u != cfg.grid_u || v != cfg.grid_v {
        return Err(Error::ShapeMismatch {
            expected: vec![cfg.grid_u, cfg.grid_v],
            got: vec![u, v],
        });
    }
    let mut features = Array3::zeros((u, v, cfg.c_img));
    for ((r, c), &sym) in symbols.indexed_iter() {
        if sym >= cfg.n_symbols {
            return Err(Error::OutOfVocabulary(format!("scene symbol {sym}")));
        }
        features
            .slice_mut(ndarray::s![r, c, ..])
            .assign(&params.img_embed.row(sym));
    }
    Ok(ImageGrid { features })
}

/// Mean-of-embeddings question encoder followed by one tanh projection.
/// Mean pooling makes it invariant to token order and repetition counts.
pub fn encode_question(
    tokens: &[usize],
    params: &Parameters,
    cfg: &ModelConfig,
) -> Result<QuestionEmbedding> {
    let (_, g_q) = encode_question_parts(tokens, params, cfg)?;
    Ok(QuestionEmbedding { vector: g_q })
}

fn encode_question_parts(
    tokens: &[usize],
    params: &Parameters,
    cfg: &ModelConfig,
) -> Result<(Array1<f64>, Array1<f64>)> {
    if tokens.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let mut q_mean = Array1::zeros(cfg.d_q);
    for &t in tokens {
        if t >= cfg.vocab_size {
            return Err(Error::OutOfVocabulary(format!("token id {t}")));
        }
        q_mean += &params.q_embed.row(t);
    }
    q_mean /= tokens.len() as f64;
    let g_q = (q_mean.dot(&params.q_w) + &params.q_b).mapv(f64::tanh);
    Ok((q_mean, g_q))
}

/// Bilinear-score softmax attention over the grid cells, producing the
/// attention weights and the attended feature map.
pub fn attend(
    g_i: &ImageGrid,
    g_q: &QuestionEmbedding,
    params: &Parameters,
) -> (AttentionWeights, AttendedFeatureMap) {
    let parts = attend_parts(&g_i.features, &g_q.vector, params);
    (
        AttentionWeights { alpha: parts.alpha },
        AttendedFeatureMap { map: parts.feature_map, attended: parts.attended },
    )
}

struct AttendParts {
    img_keys: Array3<f64>,
    q_key: Array1<f64>,
    scores: Array2<f64>,
    alpha: Array2<f64>,
    values: Array3<f64>,
    feature_map: Array3<f64>,
    attended: Array1<f64>,
}

fn attend_parts(g_i: &Array3<f64>, g_q: &Array1<f64>, params: &Parameters) -> AttendParts {
    let (u, v, _) = g_i.dim();
    let cells = u * v;
    let d_att = params.att_img.ncols();
    let d_feat = params.att_val.ncols();
    let gi2 = flat2(g_i);

    let keys2 = gi2.dot(&params.att_img);
    let q_key = g_q.dot(&params.att_q);
    let scores_flat = keys2.dot(&q_key);
    let alpha_flat = softmax_raw(scores_flat.as_slice().unwrap());
    let values2 = gi2.dot(&params.att_val);

    let mut fmap2 = Array2::zeros((cells, d_feat));
    for i in 0..cells {
        let a = alpha_flat[i];
        fmap2.row_mut(i).assign(&values2.row(i).mapv(|x| a * x));
    }
    // Pool by summing rows so that summing F over (u, v) reproduces the
    // attended vector bit for bit.
    let attended = fmap2.sum_axis(ndarray::Axis(0));

    AttendParts {
        img_keys: keys2.into_shape_with_order((u, v, d_att)).unwrap(),
        q_key,
        scores: scores_flat.into_shape_with_order((u, v)).unwrap(),
        alpha: alpha_flat.into_shape_with_order((u, v)).unwrap(),
        values: values2.into_shape_with_order((u, v, d_feat)).unwrap(),
        feature_map: fmap2.into_shape_with_order((u, v, d_feat)).unwrap(),
        attended,
    }
}

/// Pools the attended map and applies the two-layer tanh classifier with
/// dropout per `spec`; deterministic when the rate is 0.
pub fn classify(
    fmap: &AttendedFeatureMap,
    params: &Parameters,
    spec: &DropoutSpec,
) -> Array1<f64> {
    let (m1, m2) = spec.sample_masks(params.cls_b1.len());
    let parts = classifier_parts(&fmap.attended, params, m1.as_ref(), m2.as_ref());
    parts.hidden
}

struct ClassifierParts {
    h1: Array1<f64>,
    h1_drop: Array1<f64>,
    h2: Array1<f64>,
    hidden: Array1<f64>,
}

fn apply_mask(x: &Array1<f64>, mask: Option<&Array1<f64>>) -> Array1<f64> {
    match mask {
        Some(m) => x * m,
        None => x.clone(),
    }
}

fn classifier_parts(
    attended: &Array1<f64>,
    params: &Parameters,
    mask1: Option<&Array1<f64>>,
    mask2: Option<&Array1<f64>>,
) -> ClassifierParts {
    let h1 = (attended.dot(&params.cls_w1) + &params.cls_b1).mapv(f64::tanh);
    let h1_drop = apply_mask(&h1, mask1);
    let h2 = (h1_drop.dot(&params.cls_w2) + &params.cls_b2).mapv(f64::tanh);
    let hidden = apply_mask(&h2, mask2);
    ClassifierParts { h1, h1_drop, h2, hidden }
}

/// Affine logit head `theta_y`.
pub fn predict_logits(hidden: &Array1<f64>, params: &Parameters) -> Array1<f64> {
    hidden.dot(&params.logit_w) + &params.logit_b
}

/// Affine log-variance head `theta_u`; the per-class aleatoric variance is
/// `softplus` of this output.
pub fn predict_log_variance(hidden: &Array1<f64>, params: &Parameters) -> Array1<f64> {
    hidden.dot(&params.var_w) + &params.var_b
}

/// Runs the full pipeline and records every intermediate for the backward
/// pass.
pub fn forward(
    symbols: &Array2<usize>,
    tokens: &[usize],
    params: &Parameters,
    cfg: &ModelConfig,
    dropout: &DropoutSpec,
) -> Result<RecordedPass> {
    let g_i = encode_image(symbols, params, cfg)?.features;
    let (q_mean, g_q) = encode_question_parts(tokens, params, cfg)?;
    let att = attend_parts(&g_i, &g_q, params);
    let (mask1, mask2) = dropout.sample_masks(cfg.hidden);
    let cls = classifier_parts(&att.attended, params, mask1.as_ref(), mask2.as_ref());
    let logits = predict_logits(&cls.hidden, params);
    let log_var = predict_log_variance(&cls.hidden, params);
    Ok(RecordedPass {
        symbols: symbols.clone(),
        tokens: tokens.to_vec(),
        g_i,
        q_mean,
        g_q,
        img_keys: att.img_keys,
        q_key: att.q_key,
        scores: att.scores,
        alpha: att.alpha,
        values: att.values,
        feature_map: att.feature_map,
        attended: att.attended,
        mask1,
        mask2,
        h1: cls.h1,
        h1_drop: cls.h1_drop,
        h2: cls.h2,
        hidden: cls.hidden,
        logits,
        log_var,
    })
}

/// Re-runs the classifier and heads from the attended feature with fresh
/// dropout masks. Used by Monte Carlo weight sampling: dropout lives only
/// in the classifier, so the attention trunk of a recorded pass can be
/// reused across samples.
pub fn sample_heads(
    attended: &Array1<f64>,
    params: &Parameters,
    spec: &DropoutSpec,
) -> (Array1<f64>, Array1<f64>) {
    let (m1, m2) = spec.sample_masks(params.cls_b1.len());
    let cls = classifier_parts(attended, params, m1.as_ref(), m2.as_ref());
    (
        predict_logits(&cls.hidden, params),
        predict_log_variance(&cls.hidden, params),
    )
}

/// Recomputes heads from an explicitly supplied feature map, reusing the
/// dropout masks of a recorded pass. This is the oracle path for checking
/// the tap gradient by finite differences.
pub fn heads_from_feature_map(
    feature_map: &Array3<f64>,
    params: &Parameters,
    pass: &RecordedPass,
) -> (Array1<f64>, Array1<f64>) {
    let attended = flat2(feature_map).sum_axis(ndarray::Axis(0));
    let cls = classifier_parts(&attended, params, pass.mask1.as_ref(), pass.mask2.as_ref());
    (
        predict_logits(&cls.hidden, params),
        predict_log_variance(&cls.hidden, params),
    )
}

fn tanh_backward(dy: &Array1<f64>, y: &Array1<f64>) -> Array1<f64> {
    let mut d = dy.clone();
    for (g, &t) in d.iter_mut().zip(y.iter()) {
        *g *= 1.0 - t * t;
    }
    d
}

/// Backward through heads and classifier down to the pooled feature `f`.
fn backprop_to_attended(
    pass: &RecordedPass,
    params: &Parameters,
    seed: &BackwardSeed,
) -> Array1<f64> {
    let d_hidden = params.logit_w.dot(&seed.d_logits) + params.var_w.dot(&seed.d_log_var);
    let d_h2 = apply_mask(&d_hidden, pass.mask2.as_ref());
    let d_h2_pre = tanh_backward(&d_h2, &pass.h2);
    let d_h1_drop = params.cls_w2.dot(&d_h2_pre);
    let d_h1 = apply_mask(&d_h1_drop, pass.mask1.as_ref());
    let d_h1_pre = tanh_backward(&d_h1, &pass.h1);
    params.cls_w1.dot(&d_h1_pre)
}

/// Cheap partial backward: seed at the heads, gradient reported at the tap
/// `∂L/∂F`. Since `f = Σ_{u,v} F[u,v,:]`, the tap field is the pooled
/// gradient broadcast over cells.
pub fn backward_to_tap(
    pass: &RecordedPass,
    params: &Parameters,
    seed: &BackwardSeed,
) -> Array3<f64> {
    let d_f = backprop_to_attended(pass, params, seed);
    let (u, v, d) = pass.feature_map.dim();
    let mut tap = Array3::zeros((u, v, d));
    for mut row in tap.rows_mut() {
        row.assign(&d_f);
    }
    tap
}

/// Full reverse-mode pass.
///
/// Returns exact gradients for every parameter partition plus the tap
/// gradient. When `injection` is supplied it is added to the tap field
/// before the walk continues upstream, so `theta_f`, `theta_q`, and
/// `theta_i` see the overridden gradient while `theta_c`, `theta_y`, and
/// `theta_u` are untouched by it. With `injection = None` the addition is
/// skipped entirely, which keeps the untapped path bit-identical.
pub fn backward(
    pass: &RecordedPass,
    params: &Parameters,
    cfg: &ModelConfig,
    seed: &BackwardSeed,
    injection: Option<&Array3<f64>>,
) -> Result<BackwardResult> {
    if seed.d_logits.len() != cfg.c_ans || seed.d_log_var.len() != cfg.c_ans {
        return Err(Error::ShapeMismatch {
            expected: vec![cfg.c_ans],
            got: vec![seed.d_logits.len(), seed.d_log_var.len()],
        });
    }
    let mut grads = Parameters::zeros(cfg);

    // Heads.
    for (mut row, &h) in grads.logit_w.rows_mut().into_iter().zip(pass.hidden.iter()) {
        row.assign(&seed.d_logits.mapv(|g| g * h));
    }
    grads.logit_b.assign(&seed.d_logits);
    for (mut row, &h) in grads.var_w.rows_mut().into_iter().zip(pass.hidden.iter()) {
        row.assign(&seed.d_log_var.mapv(|g| g * h));
    }
    grads.var_b.assign(&seed.d_log_var);

    // Classifier.
    let d_hidden = params.logit_w.dot(&seed.d_logits) + params.var_w.dot(&seed.d_log_var);
    let d_h2 = apply_mask(&d_hidden, pass.mask2.as_ref());
    let d_h2_pre = tanh_backward(&d_h2, &pass.h2);
    outer_into(&mut grads.cls_w2, &pass.h1_drop, &d_h2_pre);
    grads.cls_b2.assign(&d_h2_pre);
    let d_h1_drop = params.cls_w2.dot(&d_h2_pre);
    let d_h1 = apply_mask(&d_h1_drop, pass.mask1.as_ref());
    let d_h1_pre = tanh_backward(&d_h1, &pass.h1);
    outer_into(&mut grads.cls_w1, &pass.attended, &d_h1_pre);
    grads.cls_b1.assign(&d_h1_pre);
    let d_f = params.cls_w1.dot(&d_h1_pre);

    // Tap: ∂L/∂F before any override.
    let (u, v, d_feat) = pass.feature_map.dim();
    let cells = u * v;
    let mut tap = Array3::zeros((u, v, d_feat));
    for mut row in tap.rows_mut() {
        row.assign(&d_f);
    }

    let d_fmap = match injection {
        Some(inj) => {
            if inj.dim() != pass.feature_map.dim() {
                return Err(Error::ShapeMismatch {
                    expected: vec![u, v, d_feat],
                    got: inj.shape().to_vec(),
                });
            }
            &tap + inj
        }
        None => tap.clone(),
    };

    // Attention. F[c,:] = alpha[c] * values[c,:].
    let d_fmap2 = flat2(&d_fmap);
    let values2 = flat2(&pass.values);
    let alpha_flat = pass.alpha.view().into_shape_with_order(cells).unwrap();

    let mut d_alpha = Array1::zeros(cells);
    let mut d_values2 = Array2::zeros((cells, d_feat));
    for i in 0..cells {
        d_alpha[i] = d_fmap2.row(i).dot(&values2.row(i));
        d_values2
            .row_mut(i)
            .assign(&d_fmap2.row(i).mapv(|g| g * alpha_flat[i]));
    }

    // Softmax over cells.
    let inner = alpha_flat.dot(&d_alpha);
    let d_scores = Array1::from_iter(
        alpha_flat
            .iter()
            .zip(d_alpha.iter())
            .map(|(&a, &g)| a * (g - inner)),
    );

    // Bilinear scores: score[c] = keys[c,:] . q_key.
    let keys2 = flat2(&pass.img_keys);
    let mut d_keys2 = Array2::zeros((cells, params.att_img.ncols()));
    for i in 0..cells {
        d_keys2.row_mut(i).assign(&pass.q_key.mapv(|q| q * d_scores[i]));
    }
    let d_q_key = keys2.t().dot(&d_scores);

    // Projections from g_i and g_q.
    let gi2 = flat2(&pass.g_i);
    grads.att_img.assign(&gi2.t().dot(&d_keys2));
    grads.att_val.assign(&gi2.t().dot(&d_values2));
    outer_into(&mut grads.att_q, &pass.g_q, &d_q_key);

    let d_gi2 = d_keys2.dot(&params.att_img.t()) + d_values2.dot(&params.att_val.t());
    let d_g_q = params.att_q.dot(&d_q_key);

    // Question encoder: g_q = tanh(q_mean . W + b).
    let d_q_pre = tanh_backward(&d_g_q, &pass.g_q);
    outer_into(&mut grads.q_w, &pass.q_mean, &d_q_pre);
    grads.q_b.assign(&d_q_pre);
    let d_q_mean = params.q_w.dot(&d_q_pre);
    let inv_n = (pass.tokens.len() as f64).recip();
    for &t in &pass.tokens {
        let mut row = grads.q_embed.row_mut(t);
        row += &d_q_mean.mapv(|g| g * inv_n);
    }

    // Image encoder: embedding scatter.
    for (i, (_, &sym)) in pass.symbols.indexed_iter().enumerate() {
        let mut row = grads.img_embed.row_mut(sym);
        row += &d_gi2.row(i);
    }

    Ok(BackwardResult { grads, tap })
}

fn outer_into(dst: &mut Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) {
    for (mut row, &x) in dst.rows_mut().into_iter().zip(a.iter()) {
        row.assign(&b.mapv(|y| x * y));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses;
    use approx::assert_relative_eq;
    use ndarray::s;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            grid_u: 3,
            grid_v: 3,
            n_symbols: 5,
            vocab_size: 6,
            c_img: 4,
            d_q: 4,
            d_att: 4,
            d_feat: 4,
            hidden: 6,
            c_ans: 5,
            dropout_rate: 0.0,
        }
    }

    fn random_input(cfg: &ModelConfig, seed: u64) -> (Array2<usize>, Vec<usize>) {
        let mut rng = RngStream::new(seed, 91).rng();
        let symbols = Array2::from_shape_fn((cfg.grid_u, cfg.grid_v), |_| {
            rng.gen_range(0..cfg.n_symbols)
        });
        let tokens = (0..4).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
        (symbols, tokens)
    }

    #[test]
    fn empty_scene_tiles_the_empty_embedding() {
        let cfg = small_cfg();
        let params = Parameters::init(&cfg, RngStream::new(3, 0));
        let symbols = Array2::zeros((cfg.grid_u, cfg.grid_v));
        let grid = encode_image(&symbols, &params, &cfg).unwrap();
        for r in 0..cfg.grid_u {
            for c in 0..cfg.grid_v {
                assert_eq!(
                    grid.features.slice(s![r, c, ..]),
                    params.img_embed.row(0)
                );
            }
        }
    }

    #[test]
    fn encode_image_rejects_wrong_grid() {
        let cfg = small_cfg();
        let params = Parameters::init(&cfg, RngStream::new(3, 0));
        let symbols = Array2::zeros((2, 3));
        assert!(encode_image(&symbols, &params, &cfg).is_err());
    }

    #[test]
    fn question_encoder_is_permutation_and_repetition_invariant() {
        let cfg = small_cfg();
        let params = Parameters::init(&cfg, RngStream::new(4, 0));
        let once = encode_question(&[2], &params, &cfg).unwrap();
        let thrice = encode_question(&[2, 2, 2], &params, &cfg).unwrap();
        assert_eq!(once, thrice);
        let fwd = encode_question(&[1, 2, 3], &params, &cfg).unwrap();
        let rev = encode_question(&[3, 2, 1], &params, &cfg).unwrap();
        assert_eq!(fwd, rev);
        assert!(matches!(
            encode_question(&[99], &params, &cfg),
            Err(Error::OutOfVocabulary(_))
        ));
    }

    #[test]
    fn attention_normalizes_and_is_uniform_on_equal_scores() {
        let cfg = small_cfg();
        let mut params = Parameters::init(&cfg, RngStream::new(5, 0));
        // Zero image-side score projection makes every score equal.
        params.att_img.fill(0.0);
        let (symbols, tokens) = random_input(&cfg, 0);
        let g_i = encode_image(&symbols, &params, &cfg).unwrap();
        let g_q = encode_question(&tokens, &params, &cfg).unwrap();
        let (att, fmap) = attend(&g_i, &g_q, &params);
        let cells = cfg.cells() as f64;
        for &a in att.alpha.iter() {
            assert_relative_eq!(a, 1.0 / cells, epsilon = 1e-12);
        }
        assert_relative_eq!(att.alpha.sum(), 1.0, epsilon = 1e-9);
        // Pooling F reproduces f exactly.
        let pooled = flat2(&fmap.map).sum_axis(ndarray::Axis(0));
        assert_eq!(pooled, fmap.attended);
    }

    #[test]
    fn dominant_score_collapses_attention_to_one_cell() {
        let cfg = small_cfg();
        let params = Parameters::init(&cfg, RngStream::new(6, 0));
        let (symbols, tokens) = random_input(&cfg, 1);
        let g_i = encode_image(&symbols, &params, &cfg).unwrap();
        let g_q = encode_question(&tokens, &params, &cfg).unwrap();
        let parts = attend_parts(&g_i.features, &g_q.vector, &params);

        // Re-run with one score pushed +50 above the rest by editing keys:
        // equivalent to a dominating bilinear score at cell (1, 2).
        let mut scores = parts.scores.clone();
        scores[[1, 2]] += 50.0;
        let alpha = softmax_raw(scores.as_slice().unwrap());
        let winner = alpha[1 * cfg.grid_v + 2];
        assert!((winner - 1.0).abs() < 1e-9);
        // Attended vector collapses to that cell's projected feature.
        let values2 = flat2(&parts.values);
        let f: Array1<f64> = (0..cfg.cells())
            .map(|i| alpha[i])
            .collect::<Array1<f64>>()
            .dot(&values2);
        for (a, b) in f.iter().zip(values2.row(1 * cfg.grid_v + 2).iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn alpha_is_invariant_to_constant_score_shift() {
        // softmax over cells ignores a constant shift; exercised through the
        // bilinear score by shifting q_key contributions uniformly.
        let scores = [0.3, -1.2, 2.0, 0.0];
        let a = softmax_raw(&scores);
        let shifted: Vec<f64> = scores.iter().map(|s| s + 7.5).collect();
        let b = softmax_raw(&shifted);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn dropout_zero_is_deterministic_and_seeded_masks_repeat() {
        let cfg = small_cfg();
        let params = Parameters::init(&cfg, RngStream::new(7, 0));
        let (symbols, tokens) = random_input(&cfg, 2);
        let a = forward(&symbols, &tokens, &params, &cfg, &DropoutSpec::off()).unwrap();
        let b = forward(&symbols, &tokens, &params, &cfg, &DropoutSpec::off()).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.log_var, b.log_var);

        let spec = DropoutSpec::new(0.5, RngStream::new(7, 1));
        let c = forward(&symbols, &tokens, &params, &cfg, &spec).unwrap();
        let d = forward(&symbols, &tokens, &params, &cfg, &spec).unwrap();
        assert_eq!(c.hidden, d.hidden);
        assert_ne!(c.hidden, a.hidden);
    }

    #[test]
    fn logit_head_is_affine() {
        let cfg = small_cfg();
        let params = Parameters::init(&cfg, RngStream::new(8, 0));
        let zero = Array1::zeros(cfg.hidden);
        assert_eq!(predict_logits(&zero, &params), params.logit_b);
        let a = Array1::from_iter((0..cfg.hidden).map(|i| i as f64 * 0.1));
        let b = Array1::from_iter((0..cfg.hidden).map(|i| 0.3 - i as f64 * 0.05));
        let lhs = predict_logits(&(&a + &b), &params);
        let rhs = predict_logits(&a, &params) + predict_logits(&b, &params) - &params.logit_b;
        for (x, y) in lhs.iter().zip(rhs.iter()) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn variance_head_reference_points() {
        let cfg = small_cfg();
        let mut params = Parameters::init(&cfg, RngStream::new(9, 0));
        params.var_w.fill(0.0);
        params.var_b.fill(0.0);
        let hidden = Array1::from_elem(cfg.hidden, 0.7);
        let s = predict_log_variance(&hidden, &params);
        for &v in crate::numerics::softplus_vec(&s).iter() {
            assert_relative_eq!(v, 2f64.ln(), epsilon = 1e-12);
        }
        params.var_b.fill(-50.0);
        let s = predict_log_variance(&hidden, &params);
        for &v in crate::numerics::softplus_vec(&s).iter() {
            assert!(v < 1e-20);
        }
    }

    #[test]
    fn cross_entropy_seed_matches_softmax_minus_onehot() {
        let logits = Array1::from_vec(vec![0.2, -1.0, 0.5]);
        let grad = losses::cross_entropy_grad(&logits, 2).unwrap();
        let p = softmax_raw(logits.as_slice().unwrap());
        for (i, (&g, &pi)) in grad.iter().zip(p.iter()).enumerate() {
            let expect = if i == 2 { pi - 1.0 } else { pi };
            assert_relative_eq!(g, expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_seed_yields_zero_gradients() {
        let cfg = small_cfg();
        let params = Parameters::init(&cfg, RngStream::new(10, 0));
        let (symbols, tokens) = random_input(&cfg, 3);
        let pass = forward(&symbols, &tokens, &params, &cfg, &DropoutSpec::off()).unwrap();
        let seed = BackwardSeed {
            d_logits: Array1::zeros(cfg.c_ans),
            d_log_var: Array1::zeros(cfg.c_ans),
        };
        let out = backward(&pass, &params, &cfg, &seed, None).unwrap();
        for e in out.grads.entries() {
            assert!(e.data.iter().all(|&g| g == 0.0), "partition {}", e.name);
        }
        assert!(out.tap.iter().all(|&g| g == 0.0));
    }

    /// Central finite differences over every parameter coordinate, compared
    /// against the analytic backward pass, with cross-entropy as the loss.
    #[test]
    fn backward_matches_finite_differences() {
        let cfg = small_cfg();
        let params = Parameters::init(&cfg, RngStream::new(11, 0));
        let (symbols, tokens) = random_input(&cfg, 4);
        let target = 1usize;
        let loss = |p: &Parameters| -> f64 {
            let pass = forward(&symbols, &tokens, p, &cfg, &DropoutSpec::off()).unwrap();
            losses::cross_entropy(&pass.logits, target).unwrap()
        };
        let pass = forward(&symbols, &tokens, &params, &cfg, &DropoutSpec::off()).unwrap();
        let seed = BackwardSeed::from_logits(
            losses::cross_entropy_grad(&pass.logits, target).unwrap(),
        );
        let analytic = backward(&pass, &params, &cfg, &seed, None).unwrap();

        let h = 1e-5;
        for (idx, entry) in analytic.grads.entries().iter().enumerate() {
            let mut fd = vec![0.0; entry.data.len()];
            for k in 0..entry.data.len() {
                let mut plus = params.clone();
                plus.entries_mut()[idx].data[k] += h;
                let mut minus = params.clone();
                minus.entries_mut()[idx].data[k] -= h;
                fd[k] = (loss(&plus) - loss(&minus)) / (2.0 * h);
            }
            let num: f64 = entry
                .data
                .iter()
                .zip(fd.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let den = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            assert!(
                num / den <= 1e-6,
                "partition {} rel err {}",
                entry.name,
                num / den
            );
        }
    }

    /// The tap gradient must match finite differences of the loss as a
    /// function of the feature map itself.
    #[test]
    fn tap_gradient_matches_finite_differences() {
        let cfg = small_cfg();
        let params = Parameters::init(&cfg, RngStream::new(12, 0));
        let (symbols, tokens) = random_input(&cfg, 5);
        let target = 3usize;
        let pass = forward(&symbols, &tokens, &params, &cfg, &DropoutSpec::off()).unwrap();
        let seed = BackwardSeed::from_logits(
            losses::cross_entropy_grad(&pass.logits, target).unwrap(),
        );
        let analytic = backward(&pass, &params, &cfg, &seed, None).unwrap();

        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        let base = pass.feature_map.clone();
        for ((r, c, d), &g) in analytic.tap.indexed_iter() {
            let mut plus = base.clone();
            plus[[r, c, d]] += h;
            let mut minus = base.clone();
            minus[[r, c, d]] -= h;
            let lp = losses::cross_entropy(
                &heads_from_feature_map(&plus, &params, &pass).0,
                target,
            )
            .unwrap();
            let lm = losses::cross_entropy(
                &heads_from_feature_map(&minus, &params, &pass).0,
                target,
            )
            .unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let rel = (g - fd).abs() / fd.abs().max(g.abs()).max(1e-10);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel <= 1e-6, "tap rel err {max_rel}");
    }

    /// With a zero injection skipped, the tapped backward path must be
    /// bit-identical to the untapped one.
    #[test]
    fn zero_injection_is_bit_identical() {
        let cfg = small_cfg();
        let params = Parameters::init(&cfg, RngStream::new(13, 0));
        let (symbols, tokens) = random_input(&cfg, 6);
        let pass = forward(&symbols, &tokens, &params, &cfg, &DropoutSpec::off()).unwrap();
        let seed = BackwardSeed::from_logits(
            losses::cross_entropy_grad(&pass.logits, 0).unwrap(),
        );
        let plain = backward(&pass, &params, &cfg, &seed, None).unwrap();
        let tapped = backward(&pass, &params, &cfg, &seed, None).unwrap();
        assert_eq!(plain.grads, tapped.grads);
    }

    #[test]
    fn backward_rejects_wrong_seed_shape() {
        let cfg = small_cfg();
        let params = Parameters::init(&cfg, RngStream::new(14, 0));
        let (symbols, tokens) = random_input(&cfg, 7);
        let pass = forward(&symbols, &tokens, &params, &cfg, &DropoutSpec::off()).unwrap();
        let seed = BackwardSeed {
            d_logits: Array1::zeros(cfg.c_ans + 1),
            d_log_var: Array1::zeros(cfg.c_ans),
        };
        assert!(backward(&pass, &params, &cfg, &seed, None).is_err());
    }
}
