//! Semantic- and task-level (SeTa) attention.
//!
//! Each item gets a semantic relevance score from a learned context vector
//! (tanh MLP then dot product) plus a task score from its similarity to a
//! frozen anchor vector; the sum goes through a masked softmax and the
//! weighted item sum is the attended output. One instance is used per site:
//! hashtags, text timesteps, and modality fusion.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{glorot_uniform, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct SeTaParams<F: Scalar> {
    /// MLP1: `[d_in x a]` weight and `[a]` bias feeding the context score.
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    /// Learnable context vector `[a]`.
    pub ctx: Tensor<F>,
    /// MLP2: `[d_in x d_anchor]` weight and `[d_anchor]` bias feeding the
    /// anchor similarity.
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
    /// Frozen anchor; absent means task scores are identically zero and the
    /// layer degrades to semantic-only attention.
    pub anchor: Option<Tensor<F>>,
}

impl<F: Scalar> SeTaParams<F> {
    pub fn init<R: Rng>(
        d_in: usize,
        a: usize,
        d_anchor: usize,
        anchor: Option<Tensor<F>>,
        rng: &mut R,
    ) -> Self {
        SeTaParams {
            w1: glorot_uniform(&[d_in, a], d_in, a, rng),
            b1: Tensor::zeros(&[a]),
            ctx: glorot_uniform(&[a], a, 1, rng),
            w2: glorot_uniform(&[d_in, d_anchor], d_in, d_anchor, rng),
            b2: Tensor::zeros(&[d_anchor]),
            anchor,
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> SeTaVars {
        SeTaVars {
            w1: tape.param(&self.w1),
            b1: tape.param(&self.b1),
            ctx: tape.param(&self.ctx),
            w2: tape.param(&self.w2),
            b2: tape.param(&self.b2),
            anchor: self.anchor.as_ref().map(|a| tape.input(a.clone())),
        }
    }

    /// Trainable tensors in a fixed order matching [`SeTaVars::ordered`].
    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<F>)> {
        vec![
            (format!("{prefix}.w1"), &mut self.w1),
            (format!("{prefix}.b1"), &mut self.b1),
            (format!("{prefix}.ctx"), &mut self.ctx),
            (format!("{prefix}.w2"), &mut self.w2),
            (format!("{prefix}.b2"), &mut self.b2),
        ]
    }
}

/// Tape handles for one bound SeTa layer.
#[derive(Debug, Clone, Copy)]
pub struct SeTaVars {
    pub w1: Var,
    pub b1: Var,
    pub ctx: Var,
    pub w2: Var,
    pub b2: Var,
    pub anchor: Option<Var>,
}

impl SeTaVars {
    pub fn ordered(&self, prefix: &str) -> Vec<(String, Var)> {
        vec![
            (format!("{prefix}.w1"), self.w1),
            (format!("{prefix}.b1"), self.b1),
            (format!("{prefix}.ctx"), self.ctx),
            (format!("{prefix}.w2"), self.w2),
            (format!("{prefix}.b2"), self.b2),
        ]
    }
}

/// Per-element attention record exported for inspection and dumps.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SeTaScores {
    pub semantic: Vec<f64>,
    pub task: Vec<f64>,
    pub combined: Vec<f64>,
    pub weights: Vec<f64>,
    pub mask: Vec<bool>,
}

impl SeTaScores {
    pub fn empty() -> Self {
        SeTaScores {
            semantic: Vec::new(),
            task: Vec::new(),
            combined: Vec::new(),
            weights: Vec::new(),
            mask: Vec::new(),
        }
    }

    pub fn uniform(mask: &[bool]) -> Self {
        let valid = mask.iter().filter(|&&m| m).count().max(1);
        let w = 1.0 / valid as f64;
        SeTaScores {
            semantic: vec![0.0; mask.len()],
            task: vec![0.0; mask.len()],
            combined: vec![0.0; mask.len()],
            weights: mask.iter().map(|&m| if m { w } else { 0.0 }).collect(),
            mask: mask.to_vec(),
        }
    }
}

/// `p_i = tanh(W1 h_i + b1) . ctx` for each row of `items [n x d_in]`.
pub fn semantic_scores<F: Scalar>(tape: &mut Tape<F>, items: Var, vars: &SeTaVars) -> Result<Var> {
    let n = tape.value(items).shape()[0];
    let pre = tape.matmul(items, vars.w1)?;
    let pre = tape.add_row_bias(pre, vars.b1)?;
    let u = tape.tanh(pre);
    let a = tape.value(vars.ctx).len();
    let ctx_col = tape.reshape(vars.ctx, &[a, 1])?;
    let scores = tape.matmul(u, ctx_col)?;
    tape.reshape(scores, &[n])
}

/// `p_i = tanh(W2 h_i + b2) . anchor`; all zeros when no anchor is attached.
pub fn task_scores<F: Scalar>(tape: &mut Tape<F>, items: Var, vars: &SeTaVars) -> Result<Var> {
    let n = tape.value(items).shape()[0];
    let Some(anchor) = vars.anchor else {
        return Ok(tape.input(Tensor::zeros(&[n])));
    };
    let da = tape.value(anchor).len();
    if tape.value(vars.w2).shape()[1] != da {
        return Err(Error::shape(
            "task_scores",
            format!("anchor [{da}] vs MLP2 {:?}", tape.value(vars.w2).shape()),
        ));
    }
    let pre = tape.matmul(items, vars.w2)?;
    let pre = tape.add_row_bias(pre, vars.b2)?;
    let v = tape.tanh(pre);
    let anchor_col = tape.reshape(anchor, &[da, 1])?;
    let scores = tape.matmul(v, anchor_col)?;
    tape.reshape(scores, &[n])
}

/// Combined scores through a masked softmax. Returns the weight variable and
/// a plain-data snapshot of every intermediate.
pub fn seta_weights<F: Scalar>(
    tape: &mut Tape<F>,
    items: Var,
    mask: &[bool],
    vars: &SeTaVars,
) -> Result<(Var, SeTaScores)> {
    let sem = semantic_scores(tape, items, vars)?;
    let task = task_scores(tape, items, vars)?;
    let combined = tape.add(sem, task)?;
    let weights = tape.masked_softmax(combined, mask)?;
    let snap = |v: Var| tape.value(v).data().iter().map(|x| x.as_f64()).collect();
    let scores = SeTaScores {
        semantic: snap(sem),
        task: snap(task),
        combined: snap(combined),
        weights: snap(weights),
        mask: mask.to_vec(),
    };
    Ok((weights, scores))
}

/// Weighted sum of item rows: `[n] x [n x d] -> [d]`.
pub fn attend<F: Scalar>(tape: &mut Tape<F>, items: Var, weights: Var) -> Result<Var> {
    let (si, sw) = (tape.value(items).shape().to_vec(), tape.value(weights).shape().to_vec());
    if si.len() != 2 || sw.len() != 1 || si[0] != sw[0] {
        return Err(Error::shape("attend", format!("items {si:?} vs weights {sw:?}")));
    }
    let wrow = tape.reshape(weights, &[1, sw[0]])?;
    let out = tape.matmul(wrow, items)?;
    tape.reshape(out, &[si[1]])
}

/// Uniform fallback weights over the valid positions (the no-attention
/// ablation path).
pub fn uniform_weights<F: Scalar>(tape: &mut Tape<F>, mask: &[bool]) -> Result<(Var, SeTaScores)> {
    let valid = mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Err(Error::AllMasked);
    }
    let w = F::from_f64(1.0 / valid as f64);
    let data: Vec<F> = mask.iter().map(|&m| if m { w } else { F::zero() }).collect();
    let weights = tape.input(Tensor::from_vec(data));
    Ok((weights, SeTaScores::uniform(mask)))
}
