//! Finite-difference verification of analytic gradients.
//!
//! Runs in 64-bit only: central differences with a 1e-5 step lose too much
//! precision in f32 to certify anything.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates sampled per parameter group (all coordinates when the
    /// group is smaller).
    pub max_coords: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-5, max_coords: 200, tolerance: 1e-4, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    /// (flat coordinate, analytic, numeric) behind `max_rel_err`.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    /// Coordinates where either gradient came out non-finite.
    pub non_finite: Vec<String>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.non_finite.is_empty() && self.max_rel_err() < tolerance
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            s.push_str(&format!(
                "{:<40} coords {:>4}  max rel err {:.3e}\n",
                g.name, g.coords_checked, g.max_rel_err
            ));
        }
        for nf in &self.non_finite {
            s.push_str(&format!("NON-FINITE: {nf}\n"));
        }
        s
    }
}

/// Compare analytic gradients against central finite differences on sampled
/// coordinates of every parameter group.
///
/// * `params_of` exposes the model's trainable tensors by name (the groups).
/// * `grads_of` runs one tape forward/backward and returns gradients in the
///   same order.
/// * `loss_of` runs a plain forward pass and returns the scalar loss; it must
///   be deterministic (stochastic layers frozen).
pub fn grad_check<M>(
    model: &mut M,
    cfg: &GradCheckConfig,
    mut params_of: impl for<'a> FnMut(&'a mut M) -> Vec<(String, &'a mut Tensor<f64>)>,
    mut grads_of: impl FnMut(&mut M) -> Result<Vec<(String, Tensor<f64>)>>,
    mut loss_of: impl FnMut(&mut M) -> Result<f64>,
) -> Result<GradCheckReport> {
    let analytic = grads_of(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();

    let group_count = params_of(model).len();
    for gi in 0..group_count {
        let (name, numel, sampled) = {
            let mut params = params_of(model);
            let (name, tensor) = &mut params[gi];
            let numel = tensor.len();
            let mut coords: Vec<usize> = (0..numel).collect();
            coords.shuffle(&mut rng);
            coords.truncate(cfg.max_coords);
            (name.clone(), numel, coords)
        };
        let a_grad = analytic
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| crate::error::Error::Param(format!("no analytic gradient for group {name}")))?
            .1
            .clone();
        if a_grad.len() != numel {
            return Err(crate::error::Error::shape(
                "grad_check",
                format!("group {name}: {numel} params vs {} gradient entries", a_grad.len()),
            ));
        }

        let mut group = GroupReport { name: name.clone(), coords_checked: 0, max_rel_err: 0.0, worst: None };
        for &c in &sampled {
            let orig = {
                let params = params_of(model);
                params[gi].1.data()[c]
            };
            let mut eval_at = |v: f64, model: &mut M| -> Result<f64> {
                {
                    let mut params = params_of(model);
                    params[gi].1.data_mut()[c] = v;
                }
                loss_of(model)
            };
            let lp = eval_at(orig + cfg.step, model)?;
            let lm = eval_at(orig - cfg.step, model)?;
            {
                let mut params = params_of(model);
                params[gi].1.data_mut()[c] = orig;
            }
            let numeric = (lp - lm) / (2.0 * cfg.step);
            let a = a_grad.data()[c];
            if !numeric.is_finite() || !a.is_finite() {
                report.non_finite.push(format!("{name}[{c}]: analytic {a}, numeric {numeric}"));
                continue;
            }
            // Absolute floor keeps finite-difference noise on near-zero
            // gradients from registering as relative error.
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-4);
            group.coords_checked += 1;
            if rel > group.max_rel_err {
                group.max_rel_err = rel;
                group.worst = Some((c, a, numeric));
            }
        }
        report.groups.push(group);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    struct LinearModel {
        w: Tensor<f64>,
        x: Tensor<f64>,
    }

    impl LinearModel {
        fn loss(&self) -> f64 {
            // sum(W x)
            let (m, k) = (self.w.shape()[0], self.w.shape()[1]);
            let mut total = 0.0;
            for i in 0..m {
                for j in 0..k {
                    total += self.w.data()[i * k + j] * self.x.data()[j];
                }
            }
            total
        }
    }

    #[test]
    fn linear_model_is_exact() {
        let mut model = LinearModel {
            w: Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.2, 0.3]).unwrap(),
            x: Tensor::from_vec(vec![1.0, 2.0, -0.5]),
        };
        let cfg = GradCheckConfig::default();
        let report = grad_check(
            &mut model,
            &cfg,
            |m| vec![("w".to_string(), &mut m.w)],
            |m| {
                let mut tape = Tape::<f64>::new();
                let w = tape.param(&m.w);
                let x = tape.input(m.x.clone().reshaped(vec![3, 1]).unwrap());
                let y = tape.matmul(w, x).unwrap();
                let loss = tape.sum(y);
                tape.backward(loss)?;
                Ok(vec![("w".to_string(), tape.grad_or_zeros(w))])
            },
            |m| Ok(m.loss()),
        )
        .unwrap();
        assert!(report.passed(1e-9), "linear model should be exact:\n{}", report.summary());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut model = LinearModel {
            w: Tensor::new(vec![1, 2], vec![0.5, -1.0]).unwrap(),
            x: Tensor::from_vec(vec![1.0, 2.0]),
        };
        let cfg = GradCheckConfig::default();
        let report = grad_check(
            &mut model,
            &cfg,
            |m| vec![("w".to_string(), &mut m.w)],
            |_| Ok(vec![("w".to_string(), Tensor::from_vec(vec![100.0, 100.0]))]),
            |m| Ok(m.loss()),
        )
        .unwrap();
        assert!(!report.passed(1e-4));
    }
}
