//! Four-score ensembling: collect (s_F, s_V, s_C, s_H) quadruples from the
//! three-branch model and the three unimodal models, train an RBF SVM over
//! them, and provide the mean/max/vote rule combiners for comparison.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Modalities, Modality, ThreeBranchModel};
use crate::svm::SCORE_DIM;
use crate::tensor::Scalar;
use crate::train::PreparedPost;

/// The four model probabilities for one sample: fused, visual-only,
/// text-only, hashtag-only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreQuadruple {
    pub s_f: f64,
    pub s_v: f64,
    pub s_c: f64,
    pub s_h: f64,
}

impl ScoreQuadruple {
    pub fn new(s_f: f64, s_v: f64, s_c: f64, s_h: f64) -> Self {
        ScoreQuadruple { s_f, s_v, s_c, s_h }
    }

    pub fn as_array(&self) -> [f64; SCORE_DIM] {
        [self.s_f, self.s_v, self.s_c, self.s_h]
    }
}

/// The four trained models feeding the ensemble.
pub struct FourModels<F: Scalar> {
    pub fused: ThreeBranchModel<F>,
    pub visual: ThreeBranchModel<F>,
    pub textual: ThreeBranchModel<F>,
    pub hashtag: ThreeBranchModel<F>,
}

impl<F: Scalar> FourModels<F> {
    /// The ensemble only makes sense when the four members are the intended
    /// modality variants trained over the same vocabulary.
    fn validate(&self) -> Result<()> {
        let expect = [
            (&self.fused, Modalities::all(), "fused"),
            (&self.visual, Modalities::only(Modality::Visual), "visual"),
            (&self.textual, Modalities::only(Modality::Caption), "textual"),
            (&self.hashtag, Modalities::only(Modality::Hashtag), "hashtag"),
        ];
        let hash = self.fused.table.vocab.content_hash();
        for (model, want, name) in expect {
            if model.config.modalities != want {
                return Err(Error::Config(format!(
                    "{name} ensemble member has modalities {:?}, expected {:?}",
                    model.config.modalities, want
                )));
            }
            if model.table.vocab.content_hash() != hash {
                return Err(Error::Config(format!(
                    "{name} ensemble member was trained on a different vocabulary"
                )));
            }
        }
        Ok(())
    }
}

/// One quadruple per post, order-preserving; labels pass through untouched.
pub fn collect_scores<F: Scalar>(
    models: &FourModels<F>,
    posts: &[PreparedPost<F>],
) -> Result<Vec<(String, ScoreQuadruple, Option<u8>)>> {
    models.validate()?;
    let mut out = Vec::with_capacity(posts.len());
    for post in posts {
        let (s_f, _) = models.fused.forward_full(&post.input)?;
        let (s_v, _) = models.visual.forward_full(&post.input)?;
        let (s_c, _) = models.textual.forward_full(&post.input)?;
        let (s_h, _) = models.hashtag.forward_full(&post.input)?;
        out.push((
            post.id.clone(),
            ScoreQuadruple::new(s_f, s_v, s_c, s_h),
            post.label.map(|l| l as u8),
        ));
    }
    Ok(out)
}

/// Mean rule: average of the four scores, thresholded strictly above 0.5.
pub fn ensemble_mean(q: &ScoreQuadruple) -> u8 {
    let mean = (q.s_f + q.s_v + q.s_c + q.s_h) / 4.0;
    (mean > 0.5) as u8
}

/// Max rule: the score with the largest absolute deviation from 0.5 decides
/// (ties resolve to the earliest of F, V, C, H).
pub fn ensemble_max(q: &ScoreQuadruple) -> u8 {
    let scores = q.as_array();
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if (s - 0.5).abs() > (scores[best] - 0.5).abs() {
            best = i;
        }
    }
    (scores[best] > 0.5) as u8
}

/// Majority vote with the mean-deviation tie-break: on a 2-2 split, each
/// side's scores are averaged and the side whose mean deviates most from
/// 0.5 wins. An exactly equal deviation resolves toward antivaccine unless
/// `tie_to_negative` is set.
pub fn ensemble_vote(q: &ScoreQuadruple, tie_to_negative: bool) -> u8 {
    let scores = q.as_array();
    let votes: Vec<bool> = scores.iter().map(|&s| s > 0.5).collect();
    let ones = votes.iter().filter(|&&v| v).count();
    match ones {
        3 | 4 => 1,
        0 | 1 => 0,
        _ => {
            let side = |want: bool| {
                let vals: Vec<f64> = scores
                    .iter()
                    .zip(&votes)
                    .filter(|(_, &v)| v == want)
                    .map(|(&s, _)| s)
                    .collect();
                vals.iter().sum::<f64>() / vals.len() as f64
            };
            let dev_pos = (side(true) - 0.5).abs();
            let dev_neg = (side(false) - 0.5).abs();
            if dev_pos > dev_neg {
                1
            } else if dev_neg > dev_pos {
                0
            } else if tie_to_negative {
                0
            } else {
                1
            }
        }
    }
}

/// Persisted score table: `id,s_F,s_V,s_C,s_H,label` with an empty label
/// column for unlabeled rows.
pub fn scores_to_csv(rows: &[(String, ScoreQuadruple, Option<u8>)]) -> String {
    let mut out = String::from("id,s_F,s_V,s_C,s_H,label\n");
    for (id, q, label) in rows {
        let label = label.map(|l| l.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{id},{},{},{},{},{label}", q.s_f, q.s_v, q.s_c, q.s_h);
    }
    out
}

pub fn scores_from_csv(path: impl AsRef<Path>) -> Result<Vec<(String, ScoreQuadruple, Option<u8>)>> {
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.as_ref().display())))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 && line.starts_with("id,") {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Data(format!("scores line {}: expected 6 fields", lineno + 1)));
        }
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| Error::Data(format!("scores line {}: bad number {s:?}", lineno + 1)))
        };
        let q = ScoreQuadruple::new(num(fields[1])?, num(fields[2])?, num(fields[3])?, num(fields[4])?);
        for s in q.as_array() {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Data(format!(
                    "scores line {}: score {s} outside [0, 1]",
                    lineno + 1
                )));
            }
        }
        let label = match fields[5].trim() {
            "" => None,
            "0" => Some(0),
            "1" => Some(1),
            other => {
                return Err(Error::Data(format!("scores line {}: bad label {other:?}", lineno + 1)))
            }
        };
        rows.push((fields[0].to_string(), q, label));
    }
    Ok(rows)
}
