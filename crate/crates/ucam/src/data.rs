//! Synthetic mini-VQA dataset: symbolic scene grids, templated questions,
//! ten noisy annotator answers per record, and generator-derived
//! ground-truth attention maps.
//!
//! Records are stored as JSONL with a sidecar manifest carrying SHA-256
//! checksums per split. Generation is fully deterministic per seed, so the
//! same seed always produces byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::metrics::AttentionMapNormalized;
use crate::numerics::RngStream;
use crate::{Error, Result};

pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const SHAPES_PLURAL: [&str; 3] = ["circles", "squares", "triangles"];
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];

/// Question token vocabulary, fixed across datasets.
pub const QUESTION_VOCAB: [&str; 14] = [
    "what", "color", "is", "the", "how", "many", "there", "a", "circle", "square", "triangle",
    "circles", "squares", "triangles",
];

/// Closed answer space: 4 colors, counts 0..=9, yes/no.
pub const ANSWER_SPACE: [&str; 16] = [
    "red", "green", "blue", "yellow", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "yes",
    "no",
];

/// Scene symbol vocabulary size: empty plus shape × color combinations.
pub const N_SYMBOLS: usize = 1 + SHAPES.len() * COLORS.len();

pub fn answer_index(answer: &str) -> Option<usize> {
    ANSWER_SPACE.iter().position(|a| *a == answer)
}

pub fn token_id(token: &str) -> Option<usize> {
    QUESTION_VOCAB.iter().position(|t| *t == token)
}

/// Maps question tokens to ids; unknown tokens are an error.
pub fn token_ids(tokens: &[String]) -> Result<Vec<usize>> {
    tokens
        .iter()
        .map(|t| token_id(t).ok_or_else(|| Error::OutOfVocabulary(t.clone())))
        .collect()
}

/// Cell encoding used in JSONL: `"none"` or `"<color>_<shape>"`.
pub fn cell_symbol_id(cell: &str) -> Result<usize> {
    if cell == "none" {
        return Ok(0);
    }
    let (color, shape) = cell
        .split_once('_')
        .ok_or_else(|| Error::CorruptDataset(format!("bad cell {cell:?}")))?;
    let ci = COLORS
        .iter()
        .position(|c| *c == color)
        .ok_or_else(|| Error::CorruptDataset(format!("bad color {color:?}")))?;
    let si = SHAPES
        .iter()
        .position(|s| *s == shape)
        .ok_or_else(|| Error::CorruptDataset(format!("bad shape {shape:?}")))?;
    Ok(1 + si * COLORS.len() + ci)
}

fn cell_string(shape: usize, color: usize) -> String {
    format!("{}_{}", COLORS[color], SHAPES[shape])
}

/// One synthetic example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaRecord {
    pub record_id: u64,
    /// `grid_u` rows of `grid_v` cell strings.
    pub scene: Vec<Vec<String>>,
    pub question: Vec<String>,
    /// Exactly ten annotator answers.
    pub annotations: Vec<String>,
    pub gt_answer: String,
    /// Normalized ground-truth attention, same grid as the scene.
    pub gt_attention: Vec<Vec<f64>>,
    /// Genuinely split annotations (irreducible answer noise).
    pub ambiguous: bool,
}

impl VqaRecord {
    /// Scene as symbol ids for the model.
    pub fn symbols(&self) -> Result<Array2<usize>> {
        let u = self.scene.len();
        let v = self.scene.first().map_or(0, Vec::len);
        let mut out = Array2::zeros((u, v));
        for (r, row) in self.scene.iter().enumerate() {
            if row.len() != v {
                return Err(Error::CorruptDataset("ragged scene".into()));
            }
            for (c, cell) in row.iter().enumerate() {
                out[[r, c]] = cell_symbol_id(cell)?;
            }
        }
        Ok(out)
    }

    pub fn token_ids(&self) -> Result<Vec<usize>> {
        token_ids(&self.question)
    }

    pub fn gt_attention_map(&self) -> Result<AttentionMapNormalized> {
        let u = self.gt_attention.len();
        let v = self.gt_attention.first().map_or(0, Vec::len);
        let flat: Vec<f64> = self.gt_attention.iter().flatten().copied().collect();
        AttentionMapNormalized::new(
            Array2::from_shape_vec((u, v), flat)
                .map_err(|e| Error::CorruptDataset(e.to_string()))?,
        )
    }

    pub fn target(&self) -> Result<usize> {
        answer_index(&self.gt_answer)
            .ok_or_else(|| Error::CorruptDataset(format!("answer {:?}", self.gt_answer)))
    }
}

/// Generation parameters, written into the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenParams {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub grid_u: usize,
    pub grid_v: usize,
    /// Probability that an annotator answers correctly on a clean record.
    pub annotator_accuracy: f64,
    /// Fraction of records with genuinely split annotations.
    pub ambiguous_fraction: f64,
    /// Per-cell probability of a distractor object.
    pub distractor_density: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            seed: 0,
            train: 5000,
            val: 1000,
            test: 1000,
            grid_u: 7,
            grid_v: 7,
            annotator_accuracy: 0.8,
            ambiguous_fraction: 0.1,
            distractor_density: 0.3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitInfo {
    pub path: String,
    pub count: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub grid: [usize; 2],
    pub vocabulary: Vec<String>,
    pub answer_space: Vec<String>,
    pub generation: GenParams,
    pub splits: BTreeMap<String, SplitInfo>,
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// All answers consistent with `(scene, question)` under the task rules:
/// a singleton for unambiguous records, the set of matching colors for a
/// color question over several same-shape objects. This is the oracle the
/// generator's answers must agree with.
pub fn rule_answers(scene: &[Vec<String>], question: &[String]) -> Result<Vec<String>> {
    let q: Vec<&str> = question.iter().map(String::as_str).collect();
    let objects: Vec<(usize, usize)> = scene
        .iter()
        .flatten()
        .filter(|c| c.as_str() != "none")
        .map(|c| {
            let id = cell_symbol_id(c)?;
            Ok(((id - 1) / COLORS.len(), (id - 1) % COLORS.len()))
        })
        .collect::<Result<_>>()?;
    match q.as_slice() {
        ["what", "color", "is", "the", shape] => {
            let si = SHAPES
                .iter()
                .position(|s| s == shape)
                .ok_or_else(|| Error::OutOfVocabulary(shape.to_string()))?;
            let mut colors: Vec<String> = objects
                .iter()
                .filter(|(s, _)| *s == si)
                .map(|&(_, c)| COLORS[c].to_string())
                .collect();
            colors.sort();
            colors.dedup();
            Ok(colors)
        }
        ["how", "many", plural] => {
            let si = SHAPES_PLURAL
                .iter()
                .position(|s| s == plural)
                .ok_or_else(|| Error::OutOfVocabulary(plural.to_string()))?;
            let count = objects.iter().filter(|(s, _)| *s == si).count();
            Ok(vec![count.to_string()])
        }
        ["is", "there", "a", shape] => {
            let si = SHAPES
                .iter()
                .position(|s| s == shape)
                .ok_or_else(|| Error::OutOfVocabulary(shape.to_string()))?;
            let present = objects.iter().any(|(s, _)| *s == si);
            Ok(vec![if present { "yes" } else { "no" }.to_string()])
        }
        _ => Err(Error::CorruptDataset(format!("unrecognized question {q:?}"))),
    }
}

fn attention_over(cells: &[(usize, usize)], u: usize, v: usize) -> Vec<Vec<f64>> {
    let mut map = vec![vec![0.0; v]; u];
    if cells.is_empty() {
        let w = 1.0 / (u * v) as f64;
        for row in &mut map {
            row.fill(w);
        }
    } else {
        let w = 1.0 / cells.len() as f64;
        for &(r, c) in cells {
            map[r][c] = w;
        }
    }
    map
}

fn generate_record(record_id: u64, params: &GenParams, stream: RngStream) -> VqaRecord {
    let mut rng = stream.rng();
    let (u, v) = (params.grid_u, params.grid_v);
    let mut scene = vec![vec!["none".to_string(); v]; u];
    let mut all_cells: Vec<(usize, usize)> =
        (0..u).flat_map(|r| (0..v).map(move |c| (r, c))).collect();
    all_cells.shuffle(&mut rng);

    let ambiguous = rng.gen::<f64>() < params.ambiguous_fraction;
    let shape = rng.gen_range(0..SHAPES.len());
    let question: Vec<String>;
    let gt_answer: String;
    let focus: Vec<(usize, usize)>;
    let annotations: Vec<String>;

    let color_q = |s: usize| {
        ["what", "color", "is", "the", SHAPES[s]].map(String::from).to_vec()
    };

    if ambiguous {
        // Two same-shape objects in different colors: annotators split.
        let c1 = rng.gen_range(0..COLORS.len());
        let c2 = (c1 + 1 + rng.gen_range(0..COLORS.len() - 1)) % COLORS.len();
        let p1 = all_cells[0];
        let p2 = all_cells[1];
        scene[p1.0][p1.1] = cell_string(shape, c1);
        scene[p2.0][p2.1] = cell_string(shape, c2);
        question = color_q(shape);
        focus = vec![p1, p2];
        gt_answer = COLORS[if rng.gen::<bool>() { c1 } else { c2 }].to_string();
        annotations = (0..10)
            .map(|_| {
                if rng.gen::<f64>() < 0.9 {
                    COLORS[if rng.gen::<bool>() { c1 } else { c2 }].to_string()
                } else {
                    let others: Vec<usize> =
                        (0..COLORS.len()).filter(|&c| c != c1 && c != c2).collect();
                    COLORS[others[rng.gen_range(0..others.len())]].to_string()
                }
            })
            .collect();
    } else {
        let distractors: Vec<String>;
        match rng.gen_range(0..3) {
            0 => {
                // "what color is the <shape>": exactly one such object.
                let color = rng.gen_range(0..COLORS.len());
                let p = all_cells[0];
                scene[p.0][p.1] = cell_string(shape, color);
                question = color_q(shape);
                gt_answer = COLORS[color].to_string();
                focus = vec![p];
                distractors = COLORS
                    .iter()
                    .enumerate()
                    .filter(|&(c, _)| c != color)
                    .map(|(_, name)| name.to_string())
                    .collect();
            }
            1 => {
                // "how many <shape>s": k in 0..=4 placed objects.
                let k = rng.gen_range(0..=4usize);
                let placed: Vec<(usize, usize)> = all_cells[..k].to_vec();
                for &(r, c) in &placed {
                    scene[r][c] = cell_string(shape, rng.gen_range(0..COLORS.len()));
                }
                question = ["how", "many", SHAPES_PLURAL[shape]].map(String::from).to_vec();
                gt_answer = k.to_string();
                focus = placed;
                let mut near = Vec::new();
                if k > 0 {
                    near.push((k - 1).to_string());
                }
                near.push((k + 1).to_string());
                distractors = near;
            }
            _ => {
                // "is there a <shape>".
                let present = rng.gen::<bool>();
                let placed: Vec<(usize, usize)> = if present {
                    let m = rng.gen_range(1..=3usize);
                    all_cells[..m].to_vec()
                } else {
                    Vec::new()
                };
                for &(r, c) in &placed {
                    scene[r][c] = cell_string(shape, rng.gen_range(0..COLORS.len()));
                }
                question = ["is", "there", "a", SHAPES[shape]].map(String::from).to_vec();
                gt_answer = if present { "yes" } else { "no" }.to_string();
                focus = placed;
                distractors = vec![if present { "no" } else { "yes" }.to_string()];
            }
        }
        annotations = (0..10)
            .map(|_| {
                if rng.gen::<f64>() < params.annotator_accuracy || distractors.is_empty() {
                    gt_answer.clone()
                } else {
                    distractors[rng.gen_range(0..distractors.len())].clone()
                }
            })
            .collect();
    }

    // Distractor objects never share the queried shape, so the rule oracle
    // stays exact on unambiguous records.
    for r in 0..u {
        for c in 0..v {
            if scene[r][c] == "none" && rng.gen::<f64>() < params.distractor_density {
                let other_shapes: Vec<usize> =
                    (0..SHAPES.len()).filter(|&s| s != shape).collect();
                let s = other_shapes[rng.gen_range(0..other_shapes.len())];
                scene[r][c] = cell_string(s, rng.gen_range(0..COLORS.len()));
            }
        }
    }

    let gt_attention = attention_over(&focus, u, v);
    VqaRecord {
        record_id,
        scene,
        question,
        annotations,
        gt_answer,
        gt_attention,
        ambiguous,
    }
}

/// Generates the three splits under `dir` and writes `manifest.json`.
pub fn generate_dataset(dir: &Path, params: &GenParams) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let master = RngStream::new(params.seed, 0).child_tag("dataset");
    let mut splits = BTreeMap::new();
    let mut next_id = 0u64;
    for (split, count) in SPLITS.iter().zip([params.train, params.val, params.test]) {
        let path = format!("{split}.jsonl");
        let file = fs::File::create(dir.join(&path))?;
        let mut writer = std::io::BufWriter::new(file);
        let mut hasher = Sha256::new();
        for _ in 0..count {
            let record = generate_record(next_id, params, master.child(next_id));
            let mut line = serde_json::to_string(&record)?;
            line.push('\n');
            hasher.update(line.as_bytes());
            writer.write_all(line.as_bytes())?;
            next_id += 1;
        }
        writer.flush()?;
        splits.insert(
            split.to_string(),
            SplitInfo { path, count, sha256: format!("{:x}", hasher.finalize()) },
        );
    }
    let manifest = DatasetManifest {
        schema_version: 1,
        seed: params.seed,
        grid: [params.grid_u, params.grid_v],
        vocabulary: QUESTION_VOCAB.map(String::from).to_vec(),
        answer_space: ANSWER_SPACE.map(String::from).to_vec(),
        generation: params.clone(),
        splits,
    };
    let mut f = fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::CorruptDataset(format!("missing manifest at {}", path.display())));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Streaming reader over one split's records, in file order.
pub struct RecordReader {
    lines: std::io::Lines<BufReader<fs::File>>,
    remaining: usize,
}

impl Iterator for RecordReader {
    type Item = Result<VqaRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        match self.lines.next() {
            None => Some(Err(Error::CorruptDataset("fewer records than manifest".into()))),
            Some(Err(e)) => Some(Err(e.into())),
            Some(Ok(line)) => Some(serde_json::from_str(&line).map_err(Error::from)),
        }
    }
}

/// Opens a split after verifying its checksum (streamed; constant memory).
pub fn load_split(dir: &Path, split: &str) -> Result<RecordReader> {
    let manifest = load_manifest(dir)?;
    let info = manifest
        .splits
        .get(split)
        .ok_or_else(|| Error::CorruptDataset(format!("unknown split {split:?}")))?;
    let path: PathBuf = dir.join(&info.path);
    let mut hasher = Sha256::new();
    let mut file = fs::File::open(&path)
        .map_err(|e| Error::CorruptDataset(format!("{}: {e}", path.display())))?;
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let digest = format!("{:x}", hasher.finalize());
    if digest != info.sha256 {
        return Err(Error::CorruptDataset(format!(
            "checksum mismatch for {split}: {digest} != {}",
            info.sha256
        )));
    }
    Ok(RecordReader {
        lines: BufReader::new(fs::File::open(&path)?).lines(),
        remaining: info.count,
    })
}

/// Loads one split fully into memory.
pub fn read_all(dir: &Path, split: &str) -> Result<Vec<VqaRecord>> {
    load_split(dir, split)?.collect()
}
