//! Evaluation metrics: consensus accuracy, tie-safe rank correlation,
//! exact 2-D earth mover distance, and uncertainty/error analysis.

use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::numerics::softmax_raw;
use crate::{Error, Result};

/// A spatial attention map with nonnegative entries summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMapNormalized {
    map: Array2<f64>,
}

impl AttentionMapNormalized {
    /// Validates nonnegativity and normalization within `1e-9`.
    pub fn new(map: Array2<f64>) -> Result<Self> {
        if map.is_empty() {
            return Err(Error::EmptyReduction);
        }
        if map.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::UnnormalizedMap(f64::NAN));
        }
        let sum = map.sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::UnnormalizedMap(sum));
        }
        Ok(Self { map })
    }

    /// Rescales a nonnegative map with positive total mass to sum to 1.
    pub fn from_unnormalized(map: Array2<f64>) -> Result<Self> {
        let sum = map.sum();
        if !(sum > 0.0) || map.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::UnnormalizedMap(sum));
        }
        Ok(Self { map: map / sum })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.map
    }

    pub fn dims(&self) -> (usize, usize) {
        self.map.dim()
    }
}

/// Canonical answer-string normalization: lowercase, punctuation removed,
/// articles dropped, number words mapped to digits.
pub fn normalize_answer(s: &str) -> String {
    const NUMBER_WORDS: [(&str, &str); 11] = [
        ("zero", "0"),
        ("one", "1"),
        ("two", "2"),
        ("three", "3"),
        ("four", "4"),
        ("five", "5"),
        ("six", "6"),
        ("seven", "7"),
        ("eight", "8"),
        ("nine", "9"),
        ("ten", "10"),
    ];
    let cleaned: String = s
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    cleaned
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .map(|w| {
            NUMBER_WORDS
                .iter()
                .find(|(word, _)| *word == w)
                .map(|(_, digit)| *digit)
                .unwrap_or(w)
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Consensus accuracy `min(matches / 3, 1)` against exactly ten annotator
/// answers. Inputs are expected pre-normalized (see [`normalize_answer`]).
pub fn vqa_accuracy(predicted: &str, annotations: &[String]) -> Result<f64> {
    if annotations.len() != 10 {
        return Err(Error::AnnotationCount(annotations.len()));
    }
    let matches = annotations.iter().filter(|a| a.as_str() == predicted).count();
    Ok((matches as f64 / 3.0).min(1.0))
}

/// Fractional (average) ranks, 1-based; ties share the mean of the ranks
/// they occupy, so the rank sum is always `n (n + 1) / 2`.
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share the average 1-based rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson_raw(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y.iter()) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    pearson_raw(x, y)
}

/// Spearman correlation between two attention maps, computed as the
/// Pearson correlation of fractional ranks so that ties are handled
/// correctly. Equals `1 - 6 Σ D² / (N³ - N)` exactly when no ties exist.
pub fn rank_correlation(
    a: &AttentionMapNormalized,
    b: &AttentionMapNormalized,
) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            expected: vec![a.dims().0, a.dims().1],
            got: vec![b.dims().0, b.dims().1],
        });
    }
    let ra = fractional_ranks(a.values().as_slice().unwrap());
    let rb = fractional_ranks(b.values().as_slice().unwrap());
    pearson_raw(&ra, &rb).ok_or(Error::UndefinedCorrelation)
}

/// Area-downsamples a map to `target × target` cells, preserving mass.
fn area_downsample(map: &Array2<f64>, target: (usize, usize)) -> Array2<f64> {
    let (u, v) = map.dim();
    let (tu, tv) = target;
    let su = tu as f64 / u as f64;
    let sv = tv as f64 / v as f64;
    let mut out = Array2::zeros((tu, tv));
    for ((r, c), &mass) in map.indexed_iter() {
        // Source cell extent in target coordinates.
        let r0 = r as f64 * su;
        let r1 = (r + 1) as f64 * su;
        let c0 = c as f64 * sv;
        let c1 = (c + 1) as f64 * sv;
        let area = (r1 - r0) * (c1 - c0);
        let mut tr = r0.floor() as usize;
        while (tr as f64) < r1 && tr < tu {
            let mut tc = c0.floor() as usize;
            let overlap_r = (r1.min((tr + 1) as f64) - r0.max(tr as f64)).max(0.0);
            while (tc as f64) < c1 && tc < tv {
                let overlap_c = (c1.min((tc + 1) as f64) - c0.max(tc as f64)).max(0.0);
                out[[tr, tc]] += mass * overlap_r * overlap_c / area;
                tc += 1;
            }
            tr += 1;
        }
    }
    out
}

const DOWNSAMPLE_LIMIT: usize = 16;
const DOWNSAMPLE_TARGET: usize = 14;
const FLOW_EPS: f64 = 1e-15;

/// Exact 2-D earth mover distance between two normalized maps of equal
/// dimensions, with Euclidean ground metric on cell-center coordinates,
/// solved as a transportation min-cost flow. Symmetric by construction
/// (arguments are canonically ordered before solving); grids larger than
/// 16×16 are area-downsampled to 14×14 first.
pub fn emd_2d(a: &AttentionMapNormalized, b: &AttentionMapNormalized) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            expected: vec![a.dims().0, a.dims().1],
            got: vec![b.dims().0, b.dims().1],
        });
    }
    let (mut ma, mut mb) = (a.values().clone(), b.values().clone());
    let (u, v) = ma.dim();
    if u > DOWNSAMPLE_LIMIT || v > DOWNSAMPLE_LIMIT {
        ma = area_downsample(&ma, (DOWNSAMPLE_TARGET, DOWNSAMPLE_TARGET));
        mb = area_downsample(&mb, (DOWNSAMPLE_TARGET, DOWNSAMPLE_TARGET));
    }
    // Canonical argument order makes emd(a, b) bitwise equal to emd(b, a).
    let swap = ma
        .iter()
        .zip(mb.iter())
        .find_map(|(x, y)| x.partial_cmp(y).filter(|o| o.is_ne()))
        == Some(std::cmp::Ordering::Greater);
    if swap {
        std::mem::swap(&mut ma, &mut mb);
    }
    transport_cost(&ma, &mb)
}

struct FlowEdge {
    to: usize,
    cap: f64,
    cost: f64,
}

struct FlowNet {
    adj: Vec<Vec<usize>>,
    edges: Vec<FlowEdge>,
}

impl FlowNet {
    fn new(nodes: usize) -> Self {
        Self { adj: vec![Vec::new(); nodes], edges: Vec::new() }
    }

    fn add_edge(&mut self, from: usize, to: usize, cap: f64, cost: f64) {
        self.adj[from].push(self.edges.len());
        self.edges.push(FlowEdge { to, cap, cost });
        self.adj[to].push(self.edges.len());
        self.edges.push(FlowEdge { to: from, cap: 0.0, cost: -cost });
    }

    /// Successive shortest augmenting paths with Dijkstra over reduced costs
    /// (all original costs are nonnegative). Returns total transport cost.
    fn min_cost_flow(&mut self, s: usize, t: usize) -> f64 {
        let n = self.adj.len();
        let mut potential = vec![0.0f64; n];
        let mut total = 0.0;
        loop {
            let mut dist = vec![f64::INFINITY; n];
            let mut prev_edge = vec![usize::MAX; n];
            let mut done = vec![false; n];
            dist[s] = 0.0;
            loop {
                let mut best = usize::MAX;
                let mut best_d = f64::INFINITY;
                for i in 0..n {
                    if !done[i] && dist[i] < best_d {
                        best = i;
                        best_d = dist[i];
                    }
                }
                if best == usize::MAX {
                    break;
                }
                done[best] = true;
                for &ei in &self.adj[best] {
                    let e = &self.edges[ei];
                    if e.cap <= FLOW_EPS {
                        continue;
                    }
                    let nd = dist[best] + e.cost + potential[best] - potential[e.to];
                    if nd < dist[e.to] - 1e-18 {
                        dist[e.to] = nd;
                        prev_edge[e.to] = ei;
                    }
                }
            }
            if !dist[t].is_finite() {
                break;
            }
            for i in 0..n {
                if dist[i].is_finite() {
                    potential[i] += dist[i];
                }
            }
            // bottleneck along the path
            let mut bottleneck = f64::INFINITY;
            let mut node = t;
            while node != s {
                let ei = prev_edge[node];
                bottleneck = bottleneck.min(self.edges[ei].cap);
                node = self.edges[ei ^ 1].to;
            }
            let mut node = t;
            while node != s {
                let ei = prev_edge[node];
                self.edges[ei].cap -= bottleneck;
                self.edges[ei ^ 1].cap += bottleneck;
                total += bottleneck * self.edges[ei].cost;
                node = self.edges[ei ^ 1].to;
            }
        }
        total
    }
}

fn transport_cost(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    let sources: Vec<((usize, usize), f64)> =
        a.indexed_iter().filter(|(_, &m)| m > 0.0).map(|(p, &m)| (p, m)).collect();
    let sinks: Vec<((usize, usize), f64)> =
        b.indexed_iter().filter(|(_, &m)| m > 0.0).map(|(p, &m)| (p, m)).collect();
    let ns = sources.len();
    let nt = sinks.len();
    let nodes = ns + nt + 2;
    let (s, t) = (nodes - 2, nodes - 1);
    let mut net = FlowNet::new(nodes);
    for (i, &(_, mass)) in sources.iter().enumerate() {
        net.add_edge(s, i, mass, 0.0);
    }
    for (j, &(_, mass)) in sinks.iter().enumerate() {
        net.add_edge(ns + j, t, mass, 0.0);
    }
    for (i, &((r1, c1), _)) in sources.iter().enumerate() {
        for (j, &((r2, c2), _)) in sinks.iter().enumerate() {
            let dr = r1 as f64 - r2 as f64;
            let dc = c1 as f64 - c2 as f64;
            net.add_edge(i, ns + j, f64::INFINITY, (dr * dr + dc * dc).sqrt());
        }
    }
    Ok(net.min_cost_flow(s, t))
}

/// `log(1 / (1 - p))` for a misclassification probability `p < 1`.
pub fn classification_error(p: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidMisclassification(p));
    }
    Ok((1.0 - p).recip().ln())
}

/// Difference between the largest and second-largest softmax probabilities.
pub fn top2_gap(logits: &Array1<f64>) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::TooFewClasses(logits.len()));
    }
    let p = softmax_raw(logits.as_slice().unwrap());
    let (mut top1, mut top2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in p.iter() {
        if v > top1 {
            top2 = top1;
            top1 = v;
        } else if v > top2 {
            top2 = v;
        }
    }
    Ok(top1 - top2)
}

/// Rank-based AUROC of `scores` as a detector of `positive` labels
/// (Mann–Whitney with tie correction). `None` when either class is empty.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 || scores.len() != positive.len() {
        return None;
    }
    let ranks = fractional_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(positive.iter())
        .filter(|(_, &p)| p)
        .map(|(&r, _)| r)
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// One record's contribution to the uncertainty/error analysis.
#[derive(Debug, Clone, Serialize)]
pub struct AnalysisRecord {
    pub record_id: u64,
    pub sigma2_p: f64,
    pub correct: bool,
    /// `log(1 / (1 - p_mis))`, the classification-error measure.
    pub error: f64,
}

/// Aggregate report relating predictive uncertainty to misclassification.
#[derive(Debug, Clone, Serialize)]
pub struct UncertaintyErrorReport {
    /// Pearson correlation between uncertainty and classification error;
    /// `None` (serialized as null) when the uncertainty is constant.
    pub pearson: Option<f64>,
    /// AUROC of uncertainty as a misclassification detector.
    pub auroc: Option<f64>,
    pub mean_sigma2_correct: Option<f64>,
    pub mean_sigma2_incorrect: Option<f64>,
    pub n_correct: usize,
    pub n_incorrect: usize,
    /// `(error, sigma2_p)` pairs for scatter plotting.
    #[serde(skip)]
    pub scatter: Vec<(f64, f64)>,
}

pub fn uncertainty_error_analysis(records: &[AnalysisRecord]) -> Result<UncertaintyErrorReport> {
    if records.len() < 2 {
        return Err(Error::TooFewRecords(records.len()));
    }
    let sigma: Vec<f64> = records.iter().map(|r| r.sigma2_p).collect();
    let err: Vec<f64> = records.iter().map(|r| r.error).collect();
    let labels: Vec<bool> = records.iter().map(|r| !r.correct).collect();
    let mean_of = |want_correct: bool| {
        let vals: Vec<f64> = records
            .iter()
            .filter(|r| r.correct == want_correct)
            .map(|r| r.sigma2_p)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    Ok(UncertaintyErrorReport {
        pearson: pearson(&sigma, &err),
        auroc: auroc(&sigma, &labels),
        mean_sigma2_correct: mean_of(true),
        mean_sigma2_incorrect: mean_of(false),
        n_correct: records.iter().filter(|r| r.correct).count(),
        n_incorrect: records.iter().filter(|r| !r.correct).count(),
        scatter: err.into_iter().zip(sigma).collect(),
    })
}
