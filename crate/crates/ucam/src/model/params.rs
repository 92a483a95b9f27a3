//! Model sizes and the named parameter partitions.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::numerics::RngStream;
use crate::{Error, Result};

/// Static shape of the toy multimodal classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Attention grid height.
    pub grid_u: usize,
    /// Attention grid width.
    pub grid_v: usize,
    /// Scene symbol vocabulary (shape × color combinations plus "empty").
    pub n_symbols: usize,
    /// Question token vocabulary size.
    pub vocab_size: usize,
    /// Image embedding channels per grid cell.
    pub c_img: usize,
    /// Question embedding dimension.
    pub d_q: usize,
    /// Bilinear attention score dimension.
    pub d_att: usize,
    /// Attended feature channels (the tap point's channel count).
    pub d_feat: usize,
    /// Classifier hidden width.
    pub hidden: usize,
    /// Answer classes.
    pub c_ans: usize,
    /// Dropout rate on the two classifier hidden layers.
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid_u: 7,
            grid_v: 7,
            n_symbols: 13,
            vocab_size: 14,
            c_img: 32,
            d_q: 32,
            d_att: 32,
            d_feat: 32,
            hidden: 64,
            c_ans: 16,
            dropout_rate: 0.3,
        }
    }
}

impl ModelConfig {
    pub fn cells(&self) -> usize {
        self.grid_u * self.grid_v
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.grid_u,
            self.grid_v,
            self.n_symbols,
            self.vocab_size,
            self.c_img,
            self.d_q,
            self.d_att,
            self.d_feat,
            self.hidden,
            self.c_ans,
        ];
        if positive.iter().any(|&n| n == 0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// All learnable weights, grouped into the six partitions that the
/// optimizers and the checkpoint format address by name.
///
/// The same structure doubles as the gradient container returned by the
/// backward pass: a gradient bundle has one array per parameter array,
/// with identical shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    /// theta_i: scene symbol embedding table, `n_symbols × c_img`.
    pub img_embed: Array2<f64>,
    /// theta_q: question token embedding table, `vocab_size × d_q`.
    pub q_embed: Array2<f64>,
    /// theta_q: projection applied to the mean token embedding, `d_q × d_q`.
    pub q_w: Array2<f64>,
    /// theta_q: projection bias.
    pub q_b: Array1<f64>,
    /// theta_f: image-side score projection, `c_img × d_att`.
    pub att_img: Array2<f64>,
    /// theta_f: question-side score projection, `d_q × d_att`.
    pub att_q: Array2<f64>,
    /// theta_f: value projection feeding the attended map, `c_img × d_feat`.
    pub att_val: Array2<f64>,
    /// theta_c: first classifier layer, `d_feat × hidden`.
    pub cls_w1: Array2<f64>,
    pub cls_b1: Array1<f64>,
    /// theta_c: second classifier layer, `hidden × hidden`.
    pub cls_w2: Array2<f64>,
    pub cls_b2: Array1<f64>,
    /// theta_y: logit head, `hidden × c_ans`.
    pub logit_w: Array2<f64>,
    pub logit_b: Array1<f64>,
    /// theta_u: log-variance head, `hidden × c_ans`.
    pub var_w: Array2<f64>,
    pub var_b: Array1<f64>,
}

/// Stable entry names, in checkpoint order. The prefix up to the first `.`
/// is the partition name.
pub const ENTRY_NAMES: [&str; 15] = [
    "theta_i.embed",
    "theta_q.embed",
    "theta_q.w",
    "theta_q.b",
    "theta_f.w_img",
    "theta_f.w_q",
    "theta_f.w_val",
    "theta_c.w1",
    "theta_c.b1",
    "theta_c.w2",
    "theta_c.b2",
    "theta_y.w",
    "theta_y.b",
    "theta_u.w",
    "theta_u.b",
];

/// Immutable view of one named parameter array.
pub struct Entry<'a> {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// Mutable view of one named parameter array.
pub struct EntryMut<'a> {
    pub name: &'static str,
    pub data: &'a mut [f64],
}

macro_rules! for_each_entry {
    ($self:ident, $mk:expr) => {
        vec![
            $mk("theta_i.embed", &$self.img_embed),
            $mk("theta_q.embed", &$self.q_embed),
            $mk("theta_q.w", &$self.q_w),
            $mk("theta_q.b", &$self.q_b),
            $mk("theta_f.w_img", &$self.att_img),
            $mk("theta_f.w_q", &$self.att_q),
            $mk("theta_f.w_val", &$self.att_val),
            $mk("theta_c.w1", &$self.cls_w1),
            $mk("theta_c.b1", &$self.cls_b1),
            $mk("theta_c.w2", &$self.cls_w2),
            $mk("theta_c.b2", &$self.cls_b2),
            $mk("theta_y.w", &$self.logit_w),
            $mk("theta_y.b", &$self.logit_b),
            $mk("theta_u.w", &$self.var_w),
            $mk("theta_u.b", &$self.var_b),
        ]
    };
}

impl Parameters {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            img_embed: Array2::zeros((cfg.n_symbols, cfg.c_img)),
            q_embed: Array2::zeros((cfg.vocab_size, cfg.d_q)),
            q_w: Array2::zeros((cfg.d_q, cfg.d_q)),
            q_b: Array1::zeros(cfg.d_q),
            att_img: Array2::zeros((cfg.c_img, cfg.d_att)),
            att_q: Array2::zeros((cfg.d_q, cfg.d_att)),
            att_val: Array2::zeros((cfg.c_img, cfg.d_feat)),
            cls_w1: Array2::zeros((cfg.d_feat, cfg.hidden)),
            cls_b1: Array1::zeros(cfg.hidden),
            cls_w2: Array2::zeros((cfg.hidden, cfg.hidden)),
            cls_b2: Array1::zeros(cfg.hidden),
            logit_w: Array2::zeros((cfg.hidden, cfg.c_ans)),
            logit_b: Array1::zeros(cfg.c_ans),
            var_w: Array2::zeros((cfg.hidden, cfg.c_ans)),
            var_b: Array1::zeros(cfg.c_ans),
        }
    }

    /// Seeded initialization: embeddings are unit normal, projection weights
    /// are normal with std `1/sqrt(fan_in)`, biases start at zero.
    pub fn init(cfg: &ModelConfig, stream: RngStream) -> Self {
        let mut p = Self::zeros(cfg);
        let scaled = |rows: usize| (rows as f64).sqrt().recip();
        let specs: [(&mut Array2<f64>, f64); 9] = [
            (&mut p.img_embed, 1.0),
            (&mut p.q_embed, 1.0),
            (&mut p.q_w, scaled(cfg.d_q)),
            (&mut p.att_img, scaled(cfg.c_img)),
            (&mut p.att_q, scaled(cfg.d_q)),
            (&mut p.att_val, scaled(cfg.c_img)),
            (&mut p.cls_w1, scaled(cfg.d_feat)),
            (&mut p.cls_w2, scaled(cfg.hidden)),
            (&mut p.logit_w, scaled(cfg.hidden)),
        ];
        for (i, (arr, std)) in specs.into_iter().enumerate() {
            let draws = stream.child(i as u64).standard_normal_vec(arr.len());
            for (dst, &z) in arr.iter_mut().zip(draws.iter()) {
                *dst = z * std;
            }
        }
        // The variance head starts at zero so initial per-class log variance
        // is 0 (softplus -> ln 2) regardless of the input.
        p
    }

    pub fn entries(&self) -> Vec<Entry<'_>> {
        for_each_entry!(self, |name, arr: &dyn AnyArray| Entry {
            name,
            shape: arr.shape_vec(),
            data: arr.flat(),
        })
    }

    pub fn entries_mut(&mut self) -> Vec<EntryMut<'_>> {
        vec![
            EntryMut { name: "theta_i.embed", data: self.img_embed.as_slice_mut().unwrap() },
            EntryMut { name: "theta_q.embed", data: self.q_embed.as_slice_mut().unwrap() },
            EntryMut { name: "theta_q.w", data: self.q_w.as_slice_mut().unwrap() },
            EntryMut { name: "theta_q.b", data: self.q_b.as_slice_mut().unwrap() },
            EntryMut { name: "theta_f.w_img", data: self.att_img.as_slice_mut().unwrap() },
            EntryMut { name: "theta_f.w_q", data: self.att_q.as_slice_mut().unwrap() },
            EntryMut { name: "theta_f.w_val", data: self.att_val.as_slice_mut().unwrap() },
            EntryMut { name: "theta_c.w1", data: self.cls_w1.as_slice_mut().unwrap() },
            EntryMut { name: "theta_c.b1", data: self.cls_b1.as_slice_mut().unwrap() },
            EntryMut { name: "theta_c.w2", data: self.cls_w2.as_slice_mut().unwrap() },
            EntryMut { name: "theta_c.b2", data: self.cls_b2.as_slice_mut().unwrap() },
            EntryMut { name: "theta_y.w", data: self.logit_w.as_slice_mut().unwrap() },
            EntryMut { name: "theta_y.b", data: self.logit_b.as_slice_mut().unwrap() },
            EntryMut { name: "theta_u.w", data: self.var_w.as_slice_mut().unwrap() },
            EntryMut { name: "theta_u.b", data: self.var_b.as_slice_mut().unwrap() },
        ]
    }

    /// Looks up one named entry; unknown names are an error.
    pub fn entry(&self, name: &str) -> Result<Entry<'_>> {
        self.entries()
            .into_iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::UnknownNode(name.to_string()))
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.entries().iter().map(|e| e.data.len()).sum()
    }

    /// Elementwise `self += other`, used to accumulate per-example gradients.
    pub fn add_assign(&mut self, other: &Self) {
        for (dst, src) in self.entries_mut().into_iter().zip(other.entries()) {
            debug_assert_eq!(dst.name, src.name);
            for (d, s) in dst.data.iter_mut().zip(src.data.iter()) {
                *d += s;
            }
        }
    }

    /// Elementwise scaling, used for batch averaging.
    pub fn scale(&mut self, c: f64) {
        for e in self.entries_mut() {
            for v in e.data {
                *v *= c;
            }
        }
    }
}

trait AnyArray {
    fn shape_vec(&self) -> Vec<usize>;
    fn flat(&self) -> &[f64];
}

impl AnyArray for Array1<f64> {
    fn shape_vec(&self) -> Vec<usize> {
        self.shape().to_vec()
    }
    fn flat(&self) -> &[f64] {
        self.as_slice().unwrap()
    }
}

impl AnyArray for Array2<f64> {
    fn shape_vec(&self) -> Vec<usize> {
        self.shape().to_vec()
    }
    fn flat(&self) -> &[f64] {
        self.as_slice().unwrap()
    }
}
