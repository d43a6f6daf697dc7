//! Soft-margin SVM with an RBF kernel over four-dimensional score vectors,
//! solved by sequential minimal optimization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCORE_DIM: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvmConfig {
    pub c: f64,
    /// RBF width; `None` selects `1 / (4 * var(features))`.
    pub gamma: Option<f64>,
    /// KKT violation tolerance.
    pub tol: f64,
    /// Hard cap on passes over the training set.
    pub max_passes: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig { c: 1.0, gamma: None, tol: 1e-3, max_passes: 200, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvmModel {
    pub support_vectors: Vec<[f64; SCORE_DIM]>,
    /// Dual coefficients `alpha_i * y_i` aligned with `support_vectors`.
    pub alpha_y: Vec<f64>,
    pub bias: f64,
    pub gamma: f64,
    pub c: f64,
}

fn rbf(gamma: f64, a: &[f64; SCORE_DIM], b: &[f64; SCORE_DIM]) -> f64 {
    let mut d2 = 0.0;
    for i in 0..SCORE_DIM {
        let d = a[i] - b[i];
        d2 += d * d;
    }
    (-gamma * d2).exp()
}

/// The `1 / (n_features * var)` width heuristic over all feature entries.
pub fn gamma_scale(features: &[[f64; SCORE_DIM]]) -> f64 {
    let n = (features.len() * SCORE_DIM) as f64;
    let mean: f64 = features.iter().flatten().sum::<f64>() / n;
    let var: f64 = features.iter().flatten().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= 1e-12 {
        1.0
    } else {
        1.0 / (SCORE_DIM as f64 * var)
    }
}

/// Train by SMO. Labels are `{0, 1}` and mapped to `{-1, +1}` internally.
/// Non-convergence within the pass budget logs a warning with the KKT
/// violation count but still returns the model.
pub fn svm_train(features: &[[f64; SCORE_DIM]], labels: &[u8], cfg: &SvmConfig) -> Result<SvmModel> {
    if features.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} features vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    if cfg.c <= 0.0 {
        return Err(Error::Param(format!("C must be positive, got {}", cfg.c)));
    }
    let n = features.len();
    if n < 2 || !labels.contains(&0) || !labels.contains(&1) {
        return Err(Error::Data("SVM training needs both classes".into()));
    }
    let gamma = match cfg.gamma {
        Some(g) if g > 0.0 => g,
        Some(g) => return Err(Error::Param(format!("gamma must be positive, got {g}"))),
        None => gamma_scale(features),
    };
    let y: Vec<f64> = labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();

    // precomputed kernel matrix; score sets are small
    let mut k = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i..n {
            let v = rbf(gamma, &features[i], &features[j]);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }

    let mut alpha = vec![0.0f64; n];
    let mut b = 0.0f64;
    let decision = |alpha: &[f64], b: f64, i: usize| -> f64 {
        let mut f = b;
        for j in 0..n {
            if alpha[j] != 0.0 {
                f += alpha[j] * y[j] * k[j * n + i];
            }
        }
        f
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut quiet_passes = 0;
    let mut converged = false;
    for _pass in 0..cfg.max_passes {
        let mut changed = 0;
        for i in 0..n {
            let ei = decision(&alpha, b, i) - y[i];
            let violates = (y[i] * ei < -cfg.tol && alpha[i] < cfg.c)
                || (y[i] * ei > cfg.tol && alpha[i] > 0.0);
            if !violates {
                continue;
            }
            let j = {
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                j
            };
            let ej = decision(&alpha, b, j) - y[j];
            let (ai_old, aj_old) = (alpha[i], alpha[j]);
            let (lo, hi) = if y[i] != y[j] {
                ((aj_old - ai_old).max(0.0), (cfg.c + aj_old - ai_old).min(cfg.c))
            } else {
                ((ai_old + aj_old - cfg.c).max(0.0), (ai_old + aj_old).min(cfg.c))
            };
            if lo >= hi {
                continue;
            }
            let eta = 2.0 * k[i * n + j] - k[i * n + i] - k[j * n + j];
            if eta >= 0.0 {
                continue;
            }
            let mut aj = aj_old - y[j] * (ei - ej) / eta;
            aj = aj.clamp(lo, hi);
            if (aj - aj_old).abs() < 1e-7 {
                continue;
            }
            let ai = ai_old + y[i] * y[j] * (aj_old - aj);
            alpha[i] = ai;
            alpha[j] = aj;

            let b1 = b - ei - y[i] * (ai - ai_old) * k[i * n + i] - y[j] * (aj - aj_old) * k[i * n + j];
            let b2 = b - ej - y[i] * (ai - ai_old) * k[i * n + j] - y[j] * (aj - aj_old) * k[j * n + j];
            b = if ai > 0.0 && ai < cfg.c {
                b1
            } else if aj > 0.0 && aj < cfg.c {
                b2
            } else {
                (b1 + b2) / 2.0
            };
            changed += 1;
        }
        if changed == 0 {
            quiet_passes += 1;
            if quiet_passes >= 2 {
                converged = true;
                break;
            }
        } else {
            quiet_passes = 0;
        }
    }
    if !converged {
        let violations = (0..n)
            .filter(|&i| {
                let ei = decision(&alpha, b, i) - y[i];
                (y[i] * ei < -cfg.tol && alpha[i] < cfg.c) || (y[i] * ei > cfg.tol && alpha[i] > 0.0)
            })
            .count();
        if violations > 0 {
            eprintln!(
                "warning: SMO stopped after {} passes with {violations} KKT violation(s)",
                cfg.max_passes
            );
        }
    }

    let mut support_vectors = Vec::new();
    let mut alpha_y = Vec::new();
    for i in 0..n {
        if alpha[i] > 1e-12 {
            support_vectors.push(features[i]);
            alpha_y.push(alpha[i] * y[i]);
        }
    }
    Ok(SvmModel { support_vectors, alpha_y, bias: b, gamma, c: cfg.c })
}

/// `f(x) = sum_i alpha_i y_i K(x_i, x) + b`; class 1 iff `f(x) > 0`.
pub fn svm_predict(model: &SvmModel, x: &[f64; SCORE_DIM]) -> (u8, f64) {
    let mut f = model.bias;
    for (sv, ay) in model.support_vectors.iter().zip(&model.alpha_y) {
        f += ay * rbf(model.gamma, sv, x);
    }
    ((f > 0.0) as u8, f)
}

impl SvmModel {
    pub fn save_json(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dual_objective(
        alphas: &[f64],
        y: &[f64],
        features: &[[f64; SCORE_DIM]],
        gamma: f64,
    ) -> f64 {
        let n = alphas.len();
        let mut obj: f64 = alphas.iter().sum();
        for i in 0..n {
            for j in 0..n {
                obj -= 0.5
                    * alphas[i]
                    * alphas[j]
                    * y[i]
                    * y[j]
                    * rbf(gamma, &features[i], &features[j]);
            }
        }
        obj
    }

    fn kkt_invariants(model: &SvmModel, c: f64) {
        let sum: f64 = model.alpha_y.iter().sum();
        assert!(sum.abs() < 1e-6, "sum(alpha*y) = {sum}");
        for &ay in &model.alpha_y {
            assert!(ay.abs() <= c + 1e-9, "alpha {} outside [0, C]", ay.abs());
        }
    }

    #[test]
    fn separable_pair_classifies_with_margin() {
        let features = [[1.0, 0.0, 0.0, 0.0], [-1.0, 0.0, 0.0, 0.0]];
        let labels = [1, 0];
        let cfg = SvmConfig { c: 100.0, gamma: Some(0.5), ..Default::default() };
        let model = svm_train(&features, &labels, &cfg).unwrap();
        let (c1, f1) = svm_predict(&model, &features[0]);
        let (c0, f0) = svm_predict(&model, &features[1]);
        assert_eq!((c1, c0), (1, 0));
        assert!(f1 > 0.1 && f0 < -0.1, "margins {f1} / {f0}");

        // symmetric model: decision value ~0 at the midpoint
        let (_, fm) = svm_predict(&model, &[0.0; 4]);
        assert!(fm.abs() < 1e-6, "midpoint decision {fm}");
        kkt_invariants(&model, cfg.c);
    }

    #[test]
    fn xor_layout_matches_brute_force_dual_oracle() {
        // XOR in the first two of the four dimensions
        let features = [
            [1.0, 1.0, 0.0, 0.0],
            [-1.0, -1.0, 0.0, 0.0],
            [1.0, -1.0, 0.0, 0.0],
            [-1.0, 1.0, 0.0, 0.0],
        ];
        let labels = [1, 1, 0, 0];
        let (c, gamma) = (10.0, 1.0);
        let cfg = SvmConfig { c, gamma: Some(gamma), tol: 1e-5, max_passes: 1000, ..Default::default() };
        let model = svm_train(&features, &labels, &cfg).unwrap();

        for (f, &l) in features.iter().zip(&labels) {
            assert_eq!(svm_predict(&model, f).0, l, "training point misclassified");
        }
        kkt_invariants(&model, c);

        // brute-force grid over the dual: alpha4 is pinned by the equality
        // constraint, the rest sweep [0, C]
        let y = [1.0, 1.0, -1.0, -1.0];
        let steps = 40;
        let mut best = f64::NEG_INFINITY;
        for i1 in 0..=steps {
            for i2 in 0..=steps {
                for i3 in 0..=steps {
                    let a1 = c * i1 as f64 / steps as f64;
                    let a2 = c * i2 as f64 / steps as f64;
                    let a3 = c * i3 as f64 / steps as f64;
                    let a4 = a1 + a2 - a3;
                    if !(0.0..=c).contains(&a4) {
                        continue;
                    }
                    let obj = dual_objective(&[a1, a2, a3, a4], &y, &features, gamma);
                    if obj > best {
                        best = obj;
                    }
                }
            }
        }
        // recover full alphas from the trained model for the objective
        let mut alphas = vec![0.0; 4];
        let mut ys = vec![0.0; 4];
        for (sv, ay) in model.support_vectors.iter().zip(&model.alpha_y) {
            let idx = features.iter().position(|f| f == sv).unwrap();
            alphas[idx] = ay.abs();
            ys[idx] = ay.signum();
        }
        let smo_obj = dual_objective(&alphas, &ys, &features, gamma);
        assert!(
            smo_obj >= best - 0.05,
            "SMO dual objective {smo_obj} below grid oracle {best}"
        );
    }

    #[test]
    fn duplicating_points_keeps_the_decision_function() {
        let features = [
            [0.9, 0.2, 0.3, 0.4],
            [0.8, 0.3, 0.2, 0.6],
            [0.2, 0.7, 0.5, 0.3],
            [0.1, 0.6, 0.6, 0.5],
        ];
        let labels = [1, 1, 0, 0];
        let cfg = SvmConfig { c: 5.0, gamma: Some(2.0), tol: 1e-6, max_passes: 2000, ..Default::default() };
        let single = svm_train(&features, &labels, &cfg).unwrap();

        let mut doubled = features.to_vec();
        doubled.extend_from_slice(&features);
        let mut dlabels = labels.to_vec();
        dlabels.extend_from_slice(&labels);
        let twice = svm_train(&doubled, &dlabels, &cfg).unwrap();

        for probe in [
            [0.5, 0.5, 0.5, 0.5],
            [0.9, 0.1, 0.4, 0.4],
            [0.0, 1.0, 0.5, 0.2],
            [0.3, 0.3, 0.3, 0.9],
        ] {
            let (_, f1) = svm_predict(&single, &probe);
            let (_, f2) = svm_predict(&twice, &probe);
            assert!((f1 - f2).abs() < 1e-4, "probe {probe:?}: {f1} vs {f2}");
        }
    }

    #[test]
    fn predict_matches_kernel_sum_oracle() {
        let model = SvmModel {
            support_vectors: vec![
                [0.1, 0.9, 0.4, 0.3],
                [0.7, 0.2, 0.8, 0.5],
                [0.5, 0.5, 0.1, 0.9],
            ],
            alpha_y: vec![0.8, -1.2, 0.4],
            bias: -0.05,
            gamma: 1.7,
            c: 1.0,
        };
        let x = [0.3, 0.6, 0.2, 0.7];
        let mut expect = -0.05;
        for (sv, ay) in model.support_vectors.iter().zip(&model.alpha_y) {
            let d2: f64 = sv.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum();
            expect += ay * (-1.7 * d2).exp();
        }
        let (_, f) = svm_predict(&model, &x);
        assert!((f - expect).abs() < 1e-10);
    }

    #[test]
    fn separable_by_first_score_trains_to_full_accuracy() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let pos = i % 2 == 0;
            let sf = if pos { rng.random_range(0.7..0.95) } else { rng.random_range(0.05..0.3) };
            features.push([
                sf,
                rng.random_range(0.3..0.7),
                rng.random_range(0.3..0.7),
                rng.random_range(0.3..0.7),
            ]);
            labels.push(pos as u8);
        }
        let model = svm_train(&features, &labels, &SvmConfig::default()).unwrap();
        let correct = features
            .iter()
            .zip(&labels)
            .filter(|(f, &l)| svm_predict(&model, f).0 == l)
            .count();
        assert_eq!(correct, features.len());
    }

    #[test]
    fn single_class_or_bad_params_are_errors() {
        let f = [[0.1, 0.2, 0.3, 0.4], [0.5, 0.6, 0.7, 0.8]];
        assert!(svm_train(&f, &[1, 1], &SvmConfig::default()).is_err());
        let cfg = SvmConfig { c: -1.0, ..Default::default() };
        assert!(svm_train(&f, &[1, 0], &cfg).is_err());
        let cfg = SvmConfig { gamma: Some(0.0), ..Default::default() };
        assert!(svm_train(&f, &[1, 0], &cfg).is_err());
    }

    #[test]
    fn model_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("svm.json");
        let model = SvmModel {
            support_vectors: vec![[0.1, 0.2, 0.3, 0.4]],
            alpha_y: vec![0.5],
            bias: 0.25,
            gamma: 1.5,
            c: 2.0,
        };
        model.save_json(&path).unwrap();
        let back = SvmModel::load_json(&path).unwrap();
        assert_eq!(back.support_vectors, model.support_vectors);
        assert_eq!(back.bias, model.bias);
    }
}
