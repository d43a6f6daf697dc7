//! Dataset schema, JSONL loading with per-line validation, deterministic
//! stratified splitting, and classification metrics.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::normalize_hashtag;
use crate::error::{Error, Result};

/// One social-media sample. `ocr_text` is externally extracted; `image`
/// is a path relative to the dataset file (or null); `label` is absent on
/// prediction streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Post {
    pub id: String,
    pub caption: String,
    pub ocr_text: String,
    pub hashtags: Vec<String>,
    pub image: Option<String>,
    pub label: Option<u8>,
    /// Optional posting date used by prediction-stream daily aggregation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitTag {
    Train,
    Val,
    Test,
    Unsplit,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub posts: Vec<Post>,
    pub split: SplitTag,
}

impl Dataset {
    pub fn new(posts: Vec<Post>) -> Self {
        Dataset { posts, split: SplitTag::Unsplit }
    }

    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }

    /// Distinct labels present (ignoring unlabeled posts).
    pub fn classes(&self) -> Vec<u8> {
        let mut seen: Vec<u8> = self.posts.iter().filter_map(|p| p.label).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }
}

/// Load a JSONL dataset. Every malformed line is collected into a
/// diagnostic; any diagnostics fail the load unless `skip_bad` is set, in
/// which case offending lines are dropped with a warning on stderr.
pub fn load_jsonl(path: impl AsRef<Path>, skip_bad: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mut posts = Vec::new();
    let mut errors = Vec::new();
    let mut seen_ids = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        match validate_line(line, base, &mut seen_ids) {
            Ok(post) => posts.push(post),
            Err(msg) => errors.push(format!("line {lineno}: {msg}")),
        }
    }
    if !errors.is_empty() {
        if skip_bad {
            for e in &errors {
                eprintln!("warning: {}: {e} (skipped)", path.display());
            }
        } else {
            return Err(Error::Data(format!(
                "{}: {} invalid line(s):\n  {}",
                path.display(),
                errors.len(),
                errors.join("\n  ")
            )));
        }
    }
    if posts.is_empty() {
        eprintln!("warning: {} contains no posts", path.display());
    }
    Ok(Dataset::new(posts))
}

fn validate_line(line: &str, base: &Path, seen_ids: &mut HashSet<String>) -> std::result::Result<Post, String> {
    let post: Post = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if post.id.is_empty() {
        return Err("empty id".into());
    }
    if !seen_ids.insert(post.id.clone()) {
        return Err(format!("duplicate id {:?}", post.id));
    }
    if let Some(l) = post.label {
        if l > 1 {
            return Err(format!("label {l} is not 0/1"));
        }
    }
    for tag in &post.hashtags {
        normalize_hashtag(tag).map_err(|e| e.to_string())?;
    }
    if let Some(img) = &post.image {
        let full = base.join(img);
        if !full.is_file() {
            return Err(format!("unreadable image file {:?}", full.display()));
        }
    }
    Ok(post)
}

/// Load an image file as an `[H x W x 3]` tensor with values in `[0, 1]`.
/// MMT1 tensors are taken verbatim; binary PPM (P6) pixels are divided by
/// the declared maximum value.
pub fn load_image(path: impl AsRef<Path>) -> Result<crate::tensor::Tensor<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if bytes.starts_with(b"MMT1") {
        return crate::tensor::io::read_mmt1(path);
    }
    if bytes.starts_with(b"P6") {
        return parse_ppm(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())));
    }
    Err(Error::Data(format!("{}: unrecognized image format (expected MMT1 or P6 PPM)", path.display())))
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<crate::tensor::Tensor<f32>, String> {
    let mut pos = 2; // past "P6"
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !(bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        let field: usize = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("bad header field")?;
        fields.push(field);
    }
    pos += 1; // single whitespace after maxval
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    let need = w * h * 3;
    let pixels = bytes.get(pos..pos + need).ok_or("truncated pixel data")?;
    let data: Vec<f32> = pixels.iter().map(|&b| b as f32 / maxval as f32).collect();
    crate::tensor::Tensor::new(vec![h, w, 3], data).map_err(|e| e.to_string())
}

pub fn save_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for post in &dataset.posts {
        let _ = writeln!(out, "{}", serde_json::to_string(post)?);
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Deterministic stratified split. Posts are shuffled within each label
/// stratum, interleaved proportionally, then cut contiguously at
/// `floor(n * r_i / sum(r))` with the remainder going to train.
pub fn split(dataset: &Dataset, ratios: (u32, u32, u32), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (rt, rv, rs) = ratios;
    if rt == 0 || rv == 0 || rs == 0 {
        return Err(Error::Param(format!("split ratios must be positive, got {ratios:?}")));
    }
    let n = dataset.len();
    if n < 10 {
        eprintln!("warning: splitting only {n} samples; split sizes will be degenerate");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // shuffle within each stratum (unlabeled posts form their own)
    let mut strata: Vec<(Option<u8>, Vec<usize>)> = Vec::new();
    for key in [Some(0u8), Some(1u8), None] {
        let idx: Vec<usize> = (0..n).filter(|&i| dataset.posts[i].label == key).collect();
        if !idx.is_empty() {
            strata.push((key, idx));
        }
    }
    for (_, idx) in strata.iter_mut() {
        idx.shuffle(&mut rng);
    }

    // proportional interleave so any contiguous cut stays label-balanced
    let mut order = Vec::with_capacity(n);
    let mut errors: Vec<f64> = strata.iter().map(|_| 0.0).collect();
    let mut cursors: Vec<usize> = strata.iter().map(|_| 0).collect();
    for _ in 0..n {
        let mut best = None;
        for (s, (_, idx)) in strata.iter().enumerate() {
            if cursors[s] >= idx.len() {
                continue;
            }
            errors[s] += idx.len() as f64 / n as f64;
            if best.is_none_or(|(_, e)| errors[s] > e) {
                best = Some((s, errors[s]));
            }
        }
        let (s, _) = best.expect("cursor accounting");
        errors[s] -= 1.0;
        order.push(strata[s].1[cursors[s]]);
        cursors[s] += 1;
    }

    let total = (rt + rv + rs) as usize;
    let n_val = n * rv as usize / total;
    let n_test = n * rs as usize / total;
    let n_train = n - n_val - n_test;

    let take = |range: std::ops::Range<usize>, tag: SplitTag| Dataset {
        posts: order[range].iter().map(|&i| dataset.posts[i].clone()).collect(),
        split: tag,
    };
    Ok((
        take(0..n_train, SplitTag::Train),
        take(n_train..n_train + n_val, SplitTag::Val),
        take(n_train + n_val..n, SplitTag::Test),
    ))
}

/// Accuracy, precision, recall, and F1 on the positive (antivaccine)
/// class, plus the confusion counts behind them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Metrics {
    pub fn from_confusion(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let total = tp + fp + fn_ + tn;
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Metrics { accuracy: ratio(tp + tn, total), precision, recall, f1, tp, fp, fn_, tn }
    }

    /// Aligned plain-text rendering.
    pub fn table(&self) -> String {
        format!(
            "accuracy   {:.4}\nprecision  {:.4}\nrecall     {:.4}\nf1         {:.4}\nconfusion  TP={} FP={} FN={} TN={}\n",
            self.accuracy, self.precision, self.recall, self.f1, self.tp, self.fp, self.fn_, self.tn
        )
    }
}

pub fn compute_metrics(predictions: &[u8], labels: &[u8]) -> Result<Metrics> {
    if predictions.is_empty() {
        return Err(Error::Data("cannot compute metrics on an empty set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p, y) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            (0, 0) => tn += 1,
            _ => return Err(Error::Data(format!("non-binary prediction/label pair ({p}, {y})"))),
        }
    }
    Ok(Metrics::from_confusion(tp, fp, fn_, tn))
}
