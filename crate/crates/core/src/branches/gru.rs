//! Gated recurrent units and the bidirectional encoder.
//!
//! Standard Cho-style cell:
//!   z = sigmoid(Wz x + Uz h + bz)
//!   r = sigmoid(Wr x + Ur h + br)
//!   h~ = tanh(Wh x + Uh (r . h) + bh)
//!   h' = (1 - z) . h + z . h~

use rand::Rng;

use crate::error::Result;
use crate::tensor::{glorot_uniform, Scalar, Tape, Tensor, Var};

/// Parameters for one direction. Input weights are `[d x g]`, recurrent
/// weights `[g x g]`, biases `[g]`.
#[derive(Debug, Clone)]
pub struct GruDirection<F: Scalar> {
    pub wz: Tensor<F>,
    pub uz: Tensor<F>,
    pub bz: Tensor<F>,
    pub wr: Tensor<F>,
    pub ur: Tensor<F>,
    pub br: Tensor<F>,
    pub wh: Tensor<F>,
    pub uh: Tensor<F>,
    pub bh: Tensor<F>,
}

impl<F: Scalar> GruDirection<F> {
    pub fn init<R: Rng>(d: usize, g: usize, rng: &mut R) -> Self {
        GruDirection {
            wz: glorot_uniform(&[d, g], d, g, rng),
            uz: glorot_uniform(&[g, g], g, g, rng),
            bz: Tensor::zeros(&[g]),
            wr: glorot_uniform(&[d, g], d, g, rng),
            ur: glorot_uniform(&[g, g], g, g, rng),
            br: Tensor::zeros(&[g]),
            wh: glorot_uniform(&[d, g], d, g, rng),
            uh: glorot_uniform(&[g, g], g, g, rng),
            bh: Tensor::zeros(&[g]),
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.bz.len()
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> GruDirectionVars {
        GruDirectionVars {
            wz: tape.param(&self.wz),
            uz: tape.param(&self.uz),
            bz: tape.param(&self.bz),
            wr: tape.param(&self.wr),
            ur: tape.param(&self.ur),
            br: tape.param(&self.br),
            wh: tape.param(&self.wh),
            uh: tape.param(&self.uh),
            bh: tape.param(&self.bh),
        }
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<F>)> {
        vec![
            (format!("{prefix}.wz"), &mut self.wz),
            (format!("{prefix}.uz"), &mut self.uz),
            (format!("{prefix}.bz"), &mut self.bz),
            (format!("{prefix}.wr"), &mut self.wr),
            (format!("{prefix}.ur"), &mut self.ur),
            (format!("{prefix}.br"), &mut self.br),
            (format!("{prefix}.wh"), &mut self.wh),
            (format!("{prefix}.uh"), &mut self.uh),
            (format!("{prefix}.bh"), &mut self.bh),
        ]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GruDirectionVars {
    pub wz: Var,
    pub uz: Var,
    pub bz: Var,
    pub wr: Var,
    pub ur: Var,
    pub br: Var,
    pub wh: Var,
    pub uh: Var,
    pub bh: Var,
}

impl GruDirectionVars {
    pub fn ordered(&self, prefix: &str) -> Vec<(String, Var)> {
        vec![
            (format!("{prefix}.wz"), self.wz),
            (format!("{prefix}.uz"), self.uz),
            (format!("{prefix}.bz"), self.bz),
            (format!("{prefix}.wr"), self.wr),
            (format!("{prefix}.ur"), self.ur),
            (format!("{prefix}.br"), self.br),
            (format!("{prefix}.wh"), self.wh),
            (format!("{prefix}.uh"), self.uh),
            (format!("{prefix}.bh"), self.bh),
        ]
    }
}

/// Forward and backward directions with independent parameters.
#[derive(Debug, Clone)]
pub struct GruParams<F: Scalar> {
    pub fwd: GruDirection<F>,
    pub bwd: GruDirection<F>,
}

impl<F: Scalar> GruParams<F> {
    pub fn init<R: Rng>(d: usize, g: usize, rng: &mut R) -> Self {
        GruParams { fwd: GruDirection::init(d, g, rng), bwd: GruDirection::init(d, g, rng) }
    }

    pub fn hidden_width(&self) -> usize {
        self.fwd.hidden_width()
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> GruVars {
        GruVars { fwd: self.fwd.bind(tape), bwd: self.bwd.bind(tape) }
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = self.fwd.params_mut(&format!("{prefix}.fwd"));
        out.extend(self.bwd.params_mut(&format!("{prefix}.bwd")));
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub fwd: GruDirectionVars,
    pub bwd: GruDirectionVars,
}

impl GruVars {
    pub fn ordered(&self, prefix: &str) -> Vec<(String, Var)> {
        let mut out = self.fwd.ordered(&format!("{prefix}.fwd"));
        out.extend(self.bwd.ordered(&format!("{prefix}.bwd")));
        out
    }
}

/// One step: `x [1 x d]`, `h_prev [1 x g]` -> `h [1 x g]`.
pub fn gru_cell<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    h_prev: Var,
    p: &GruDirectionVars,
) -> Result<Var> {
    let zx = tape.matmul(x, p.wz)?;
    let zh = tape.matmul(h_prev, p.uz)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add_row_bias(z, p.bz)?;
    let z = tape.sigmoid(z);

    let rx = tape.matmul(x, p.wr)?;
    let rh = tape.matmul(h_prev, p.ur)?;
    let r = tape.add(rx, rh)?;
    let r = tape.add_row_bias(r, p.br)?;
    let r = tape.sigmoid(r);

    let hx = tape.matmul(x, p.wh)?;
    let gated = tape.mul(r, h_prev)?;
    let hh = tape.matmul(gated, p.uh)?;
    let cand = tape.add(hx, hh)?;
    let cand = tape.add_row_bias(cand, p.bh)?;
    let cand = tape.tanh(cand);

    let keep = tape.one_minus(z);
    let kept = tape.mul(keep, h_prev)?;
    let new = tape.mul(z, cand)?;
    tape.add(kept, new)
}

/// Bidirectional encoding of `seq [T x d]`. Masked positions neither update
/// the recurrent state nor produce output (their rows are zero). Each valid
/// position's row is `[backward state; forward state]`, width `2g`.
pub fn bigru_encode<F: Scalar>(
    tape: &mut Tape<F>,
    seq: Var,
    mask: &[bool],
    p: &GruVars,
) -> Result<Var> {
    let s = tape.value(seq).shape().to_vec();
    if s.len() != 2 || s[0] != mask.len() {
        return Err(crate::error::Error::shape(
            "bigru_encode",
            format!("sequence {:?} vs mask length {}", s, mask.len()),
        ));
    }
    let t_len = s[0];
    let g = tape.value(p.fwd.bz).len();
    let zero_row = tape.input(Tensor::zeros(&[g]));

    let step = |tape: &mut Tape<F>, state: Var, t: usize, dir: &GruDirectionVars| -> Result<Var> {
        let x = tape.row(seq, t)?;
        let x = tape.reshape(x, &[1, tape.value(x).len()])?;
        gru_cell(tape, x, state, dir)
    };

    let mut fwd_states = vec![zero_row; t_len];
    let h0 = tape.input(Tensor::zeros(&[1, g]));
    let mut h = h0;
    for t in 0..t_len {
        if mask[t] {
            h = step(tape, h, t, &p.fwd)?;
            fwd_states[t] = tape.reshape(h, &[g])?;
        }
    }

    let mut bwd_states = vec![zero_row; t_len];
    let mut h = h0;
    for t in (0..t_len).rev() {
        if mask[t] {
            h = step(tape, h, t, &p.bwd)?;
            bwd_states[t] = tape.reshape(h, &[g])?;
        }
    }

    let mut rows = Vec::with_capacity(t_len);
    for t in 0..t_len {
        rows.push(tape.concat(&[bwd_states[t], fwd_states[t]])?);
    }
    tape.stack_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_direction(d: usize, g: usize) -> GruDirection<f64> {
        GruDirection {
            wz: Tensor::zeros(&[d, g]),
            uz: Tensor::zeros(&[g, g]),
            bz: Tensor::zeros(&[g]),
            wr: Tensor::zeros(&[d, g]),
            ur: Tensor::zeros(&[g, g]),
            br: Tensor::zeros(&[g]),
            wh: Tensor::zeros(&[d, g]),
            uh: Tensor::zeros(&[g, g]),
            bh: Tensor::zeros(&[g]),
        }
    }

    #[test]
    fn zero_parameters_keep_zero_state() {
        let p = zero_direction(3, 2);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let x = tape.input(Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let h0 = tape.input(Tensor::zeros(&[1, 2]));
        let h = gru_cell(&mut tape, x, h0, &vars).unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_update_gate_jumps_to_candidate() {
        // bz = 50 drives z to ~1, so h' ~ h~
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = GruDirection::<f64>::init(3, 2, &mut rng);
        p.bz = Tensor::from_vec(vec![50.0, 50.0]);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let x = tape.input(Tensor::new(vec![1, 3], vec![0.3, -0.7, 1.1]).unwrap());
        let h_prev = tape.input(Tensor::new(vec![1, 2], vec![0.9, -0.9]).unwrap());
        let h = gru_cell(&mut tape, x, h_prev, &vars).unwrap();

        // candidate recomputed by hand
        let hp = [0.9, -0.9];
        let xv = [0.3, -0.7, 1.1];
        let cand = {
            let mut r = [0.0; 2];
            for j in 0..2 {
                let mut pre = p.br.data()[j];
                for i in 0..3 {
                    pre += xv[i] * p.wr.data()[i * 2 + j];
                }
                for i in 0..2 {
                    pre += hp[i] * p.ur.data()[i * 2 + j];
                }
                r[j] = 1.0 / (1.0 + (-pre).exp());
            }
            let mut c = [0.0; 2];
            for j in 0..2 {
                let mut pre = p.bh.data()[j];
                for i in 0..3 {
                    pre += xv[i] * p.wh.data()[i * 2 + j];
                }
                for i in 0..2 {
                    pre += r[i] * hp[i] * p.uh.data()[i * 2 + j];
                }
                c[j] = pre.tanh();
            }
            c
        };
        for j in 0..2 {
            assert!(
                (tape.value(h).data()[j] - cand[j]).abs() < 1e-9,
                "h'[{j}] = {} should approach candidate {}",
                tape.value(h).data()[j],
                cand[j]
            );
        }
    }

    #[test]
    fn scalar_cell_matches_hand_recurrence() {
        // width-1 cell, every weight distinct, checked against a step-by-step oracle
        let p = GruDirection::<f64> {
            wz: Tensor::new(vec![1, 1], vec![0.4]).unwrap(),
            uz: Tensor::new(vec![1, 1], vec![-0.3]).unwrap(),
            bz: Tensor::from_vec(vec![0.1]),
            wr: Tensor::new(vec![1, 1], vec![0.7]).unwrap(),
            ur: Tensor::new(vec![1, 1], vec![0.2]).unwrap(),
            br: Tensor::from_vec(vec![-0.2]),
            wh: Tensor::new(vec![1, 1], vec![1.1]).unwrap(),
            uh: Tensor::new(vec![1, 1], vec![-0.6]).unwrap(),
            bh: Tensor::from_vec(vec![0.05]),
        };
        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        let xs = [0.5, -1.2, 0.3];
        let mut h_oracle = 0.0f64;
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let mut h = tape.input(Tensor::zeros(&[1, 1]));
        for &xv in &xs {
            let x = tape.input(Tensor::new(vec![1, 1], vec![xv]).unwrap());
            h = gru_cell(&mut tape, x, h, &vars).unwrap();

            let z = sigmoid(0.4 * xv - 0.3 * h_oracle + 0.1);
            let r = sigmoid(0.7 * xv + 0.2 * h_oracle - 0.2);
            let cand = (1.1 * xv - 0.6 * (r * h_oracle) + 0.05).tanh();
            h_oracle = (1.0 - z) * h_oracle + z * cand;
        }
        assert!(
            (tape.value(h).data()[0] - h_oracle).abs() < 1e-10,
            "{} vs {}",
            tape.value(h).data()[0],
            h_oracle
        );
    }

    #[test]
    fn length_one_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = GruParams::<f64>::init(3, 2, &mut rng);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let x = Tensor::new(vec![1, 3], vec![0.2, -0.5, 0.8]).unwrap();
        let seq = tape.input(x.clone());
        let out = bigru_encode(&mut tape, seq, &[true], &vars).unwrap();
        assert_eq!(tape.value(out).shape(), &[1, 4]);

        // both halves equal single-step cells from zero state
        let xv = tape.input(x);
        let h0 = tape.input(Tensor::zeros(&[1, 2]));
        let hf = gru_cell(&mut tape, xv, h0, &vars.fwd).unwrap();
        let hb = gru_cell(&mut tape, xv, h0, &vars.bwd).unwrap();
        let row = tape.value(out).data();
        assert!((row[0] - tape.value(hb).data()[0]).abs() < 1e-12);
        assert!((row[1] - tape.value(hb).data()[1]).abs() < 1e-12);
        assert!((row[2] - tape.value(hf).data()[0]).abs() < 1e-12);
        assert!((row[3] - tape.value(hf).data()[1]).abs() < 1e-12);
    }

    #[test]
    fn palindrome_with_tied_directions_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dir = GruDirection::<f64>::init(2, 3, &mut rng);
        let p = GruParams { fwd: dir.clone(), bwd: dir };
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        // palindromic sequence: x0 = x2
        let seq = tape.input(
            Tensor::new(vec![3, 2], vec![0.4, -0.1, 0.9, 0.7, 0.4, -0.1]).unwrap(),
        );
        let out = bigru_encode(&mut tape, seq, &[true; 3], &vars).unwrap();
        let d = tape.value(out).data();
        // forward state at t equals backward state at T-1-t
        for t in 0..3 {
            for j in 0..3 {
                let fwd_t = d[t * 6 + 3 + j];
                let bwd_mirror = d[(2 - t) * 6 + j];
                assert!(
                    (fwd_t - bwd_mirror).abs() < 1e-12,
                    "t={t} j={j}: {fwd_t} vs {bwd_mirror}"
                );
            }
        }
    }

    #[test]
    fn t3_matches_unrolled_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = GruParams::<f64>::init(2, 2, &mut rng);
        let xs: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();

        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        let unroll = |dir: &GruDirection<f64>, order: &[usize]| -> Vec<[f64; 2]> {
            let mut states = vec![[0.0f64; 2]; 3];
            let mut h = [0.0f64; 2];
            for &t in order {
                let x = [xs[t * 2], xs[t * 2 + 1]];
                let mut z = [0.0; 2];
                let mut r = [0.0; 2];
                for j in 0..2 {
                    let mut zp = dir.bz.data()[j];
                    let mut rp = dir.br.data()[j];
                    for i in 0..2 {
                        zp += x[i] * dir.wz.data()[i * 2 + j] + h[i] * dir.uz.data()[i * 2 + j];
                        rp += x[i] * dir.wr.data()[i * 2 + j] + h[i] * dir.ur.data()[i * 2 + j];
                    }
                    z[j] = sigmoid(zp);
                    r[j] = sigmoid(rp);
                }
                let mut cand = [0.0; 2];
                for j in 0..2 {
                    let mut cp = dir.bh.data()[j];
                    for i in 0..2 {
                        cp += x[i] * dir.wh.data()[i * 2 + j]
                            + r[i] * h[i] * dir.uh.data()[i * 2 + j];
                    }
                    cand[j] = cp.tanh();
                }
                for j in 0..2 {
                    h[j] = (1.0 - z[j]) * h[j] + z[j] * cand[j];
                }
                states[t] = h;
            }
            states
        };
        let fwd = unroll(&p.fwd, &[0, 1, 2]);
        let bwd = unroll(&p.bwd, &[2, 1, 0]);

        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let seq = tape.input(Tensor::new(vec![3, 2], xs).unwrap());
        let out = bigru_encode(&mut tape, seq, &[true; 3], &vars).unwrap();
        let d = tape.value(out).data();
        for t in 0..3 {
            for j in 0..2 {
                assert!((d[t * 4 + j] - bwd[t][j]).abs() < 1e-8, "bwd t={t}");
                assert!((d[t * 4 + 2 + j] - fwd[t][j]).abs() < 1e-8, "fwd t={t}");
            }
        }
    }

    #[test]
    fn all_masked_yields_zero_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = GruParams::<f64>::init(2, 2, &mut rng);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let seq = tape.input(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let out = bigru_encode(&mut tape, seq, &[false, false], &vars).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cell_gradients_pass_the_check_harness() {
        use crate::tensor::{grad_check, GradCheckConfig};
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut p = GruDirection::<f64>::init(3, 2, &mut rng);
        let x = Tensor::new(vec![1, 3], vec![0.4, -0.9, 0.2]).unwrap();
        let h_prev = Tensor::new(vec![1, 2], vec![0.3, -0.5]).unwrap();
        let cfg = GradCheckConfig::default();
        let report = grad_check(
            &mut p,
            &cfg,
            |p| p.params_mut("cell"),
            |p| {
                let mut tape = Tape::new();
                let vars = p.bind(&mut tape);
                let xv = tape.input(x.clone());
                let hv = tape.input(h_prev.clone());
                let h = gru_cell(&mut tape, xv, hv, &vars)?;
                let sq = tape.mul(h, h)?;
                let loss = tape.sum(sq);
                tape.backward(loss)?;
                Ok(vars.ordered("cell").into_iter().map(|(n, v)| (n, tape.grad_or_zeros(v))).collect())
            },
            |p| {
                let mut tape = Tape::new();
                let vars = p.bind(&mut tape);
                let xv = tape.input(x.clone());
                let hv = tape.input(h_prev.clone());
                let h = gru_cell(&mut tape, xv, hv, &vars)?;
                let sq = tape.mul(h, h)?;
                let loss = tape.sum(sq);
                Ok(tape.value(loss).item())
            },
        )
        .unwrap();
        assert!(report.passed(1e-4), "{}", report.summary());
    }

    #[test]
    fn trailing_pad_does_not_change_valid_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = GruParams::<f64>::init(2, 3, &mut rng);
        let xs: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();

        let run = |rows: usize, mask: &[bool]| {
            let mut data = xs.clone();
            data.resize(rows * 2, 0.0);
            let mut tape = Tape::new();
            let vars = p.bind(&mut tape);
            let seq = tape.input(Tensor::new(vec![rows, 2], data).unwrap());
            let out = bigru_encode(&mut tape, seq, mask, &vars).unwrap();
            tape.value(out).data().to_vec()
        };
        let short = run(2, &[true, true]);
        let padded = run(5, &[true, true, false, false, false]);
        for i in 0..short.len() {
            assert!((short[i] - padded[i]).abs() < 1e-12);
        }
        assert!(padded[short.len()..].iter().all(|&v| v == 0.0));
    }
}
