//! Mini-batch training with RMSprop, best-checkpoint selection by
//! validation accuracy, and threshold-0.5 evaluation.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{compute_metrics, load_image, Dataset, Metrics, Post};
use crate::embeddings::tokenize;
use crate::error::{Error, Result};
use crate::model::{bce, AttentionTrace, SampleInput, ThreeBranchModel};
use crate::tensor::{Mode, RmsProp, Scalar, Tape, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub rms_decay: f64,
    pub rms_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 1e-4, batch_size: 32, epochs: 30, seed: 0, rms_decay: 0.9, rms_eps: 1e-8 }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.lr) || self.lr == 0.0 {
            return Err(Error::Param(format!("learning rate {} outside (0, 1)", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(Error::Param(format!(
                "batch size {} too small for batchnorm (need >= 2)",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Param("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6}",
                e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc
            );
        }
        out
    }
}

/// A post with tokenized text and its image loaded into memory.
#[derive(Debug, Clone)]
pub struct PreparedPost<F: Scalar> {
    pub id: String,
    pub input: SampleInput<F>,
    pub label: Option<f64>,
    pub date: Option<String>,
}

fn prepare_post<F: Scalar>(post: &Post, root: &Path) -> Result<PreparedPost<F>> {
    let image = match &post.image {
        None => None,
        Some(rel) => {
            let img = load_image(root.join(rel))?;
            Some(Tensor::from_f32_tensor(&img))
        }
    };
    Ok(PreparedPost {
        id: post.id.clone(),
        input: SampleInput {
            caption_tokens: tokenize(&post.caption),
            ocr_tokens: tokenize(&post.ocr_text),
            hashtags: post.hashtags.clone(),
            image,
        },
        label: post.label.map(|l| l as f64),
        date: post.date.clone(),
    })
}

/// Tokenize and load every post of a dataset; `root` anchors relative
/// image paths (usually the JSONL's directory).
pub fn prepare<F: Scalar>(dataset: &Dataset, root: &Path) -> Result<Vec<PreparedPost<F>>> {
    dataset.posts.iter().map(|p| prepare_post(p, root)).collect()
}

/// Prepare synthetic output without touching the filesystem.
pub fn prepare_synthetic<F: Scalar>(synth: &crate::synth::SynthOutput) -> Vec<PreparedPost<F>> {
    synth
        .dataset
        .posts
        .iter()
        .zip(&synth.images)
        .map(|(post, image)| PreparedPost {
            id: post.id.clone(),
            input: SampleInput {
                caption_tokens: tokenize(&post.caption),
                ocr_tokens: tokenize(&post.ocr_text),
                hashtags: post.hashtags.clone(),
                image: Some(Tensor::from_f32_tensor(image)),
            },
            label: post.label.map(|l| l as f64),
            date: post.date.clone(),
        })
        .collect()
}

fn require_labels<F: Scalar>(posts: &[PreparedPost<F>]) -> Result<Vec<f64>> {
    posts
        .iter()
        .map(|p| {
            p.label.ok_or_else(|| Error::Data(format!("post {} has no label", p.id)))
        })
        .collect()
}

/// Mean infer-mode loss and accuracy over a labeled set.
fn eval_loss_acc<F: Scalar>(model: &ThreeBranchModel<F>, posts: &[PreparedPost<F>]) -> Result<(f64, f64)> {
    let labels = require_labels(posts)?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (post, &y) in posts.iter().zip(&labels) {
        let (p, _) = model.forward_full(&post.input)?;
        loss += bce(p, y);
        if ThreeBranchModel::<F>::decide(p) as f64 == y {
            correct += 1;
        }
    }
    let n = posts.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Train in place. Shuffled seeded mini-batches, RMSprop updates, running
/// batchnorm statistics, per-epoch train/val stats; the parameters with the
/// best validation accuracy (ties broken by lower validation loss) are
/// restored into `model` before returning.
pub fn train<F: Scalar>(
    model: &mut ThreeBranchModel<F>,
    train_posts: &[PreparedPost<F>],
    val_posts: &[PreparedPost<F>],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train_posts.is_empty() || val_posts.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    let labels = require_labels(train_posts)?;
    require_labels(val_posts)?;
    if !labels.contains(&0.0) || !labels.contains(&1.0) {
        return Err(Error::Config("training set must contain both classes".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = RmsProp::<F>::new(cfg.lr, cfg.rms_decay, cfg.rms_eps);
    let momentum = F::from_f64(model.config.bn_momentum);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, f64, usize, ThreeBranchModel<F>)> = None;

    let mut order: Vec<usize> = (0..train_posts.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;
        let mut seen = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue; // batchnorm needs at least two rows
            }
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let mut rows = Vec::with_capacity(batch.len());
            let mut batch_labels = Vec::with_capacity(batch.len());
            for &i in batch {
                let (feat, _) = model.comprehensive_feature(&mut tape, &vars, &train_posts[i].input)?;
                rows.push(feat);
                batch_labels.push(labels[i]);
            }
            let stacked = tape.stack_rows(&rows)?;
            let (probs, bn_stats) =
                model.classify_batch(&mut tape, &vars.classifier, stacked, Mode::Train, &mut rng)?;
            let loss = tape.bce_batch(probs, &batch_labels, 1e-7)?;
            let loss_val = tape.value(loss).item().as_f64();
            if !loss_val.is_finite() {
                return Err(Error::NonFinite(format!("batch loss at epoch {epoch}")));
            }
            for (p, &y) in tape.value(probs).data().iter().zip(&batch_labels) {
                if (p.as_f64() > 0.5) as u8 as f64 == y {
                    epoch_correct += 1;
                }
            }
            epoch_loss += loss_val * batch.len() as f64;
            seen += batch.len();

            tape.backward(loss)?;
            let mut grads: Vec<(String, Tensor<F>)> = vars
                .ordered()
                .into_iter()
                .map(|(name, var)| (name, tape.grad_or_zeros(var)))
                .collect();
            model.constrain_grads(&mut grads);

            // running statistics advance with the batch moments
            for (layer, (mean, var)) in model.classifier.layers.iter_mut().zip(&bn_stats) {
                for ((rm, &m), (rv, &v)) in layer
                    .running_mean
                    .data_mut()
                    .iter_mut()
                    .zip(mean.data())
                    .zip(layer.running_var.data_mut().iter_mut().zip(var.data()))
                {
                    *rm = momentum * *rm + (F::one() - momentum) * m;
                    *rv = momentum * *rv + (F::one() - momentum) * v;
                }
            }

            let mut params = model.params_mut();
            opt.step(&mut params, &grads)?;
        }

        let (val_loss, val_acc) = eval_loss_acc(model, val_posts)?;
        let stats = EpochStats {
            epoch,
            train_loss: if seen == 0 { 0.0 } else { epoch_loss / seen as f64 },
            train_acc: if seen == 0 { 0.0 } else { epoch_correct as f64 / seen as f64 },
            val_loss,
            val_acc,
        };
        let better = match &best {
            None => true,
            Some((acc, loss, _, _)) => {
                val_acc > *acc || (val_acc == *acc && val_loss < *loss)
            }
        };
        if better {
            best = Some((val_acc, val_loss, epoch, model.clone()));
        }
        history.epochs.push(stats);
    }

    let (_, _, best_epoch, best_model) = best.expect("at least one epoch ran");
    *model = best_model;
    history.best_epoch = best_epoch;
    Ok(history)
}

/// One prediction row of `predict`.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub id: String,
    pub probability: f64,
    pub decision: u8,
    pub date: Option<String>,
    pub trace: AttentionTrace,
}

pub fn predict<F: Scalar>(model: &ThreeBranchModel<F>, posts: &[PreparedPost<F>]) -> Result<Vec<Prediction>> {
    posts
        .iter()
        .map(|post| {
            let (p, trace) = model.forward_full(&post.input)?;
            Ok(Prediction {
                id: post.id.clone(),
                probability: p,
                decision: ThreeBranchModel::<F>::decide(p),
                date: post.date.clone(),
                trace,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub mean_loss: f64,
}

/// Infer-mode evaluation at the 0.5 decision threshold.
pub fn evaluate<F: Scalar>(model: &ThreeBranchModel<F>, posts: &[PreparedPost<F>]) -> Result<EvalReport> {
    if posts.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let labels = require_labels(posts)?;
    let mut preds = Vec::with_capacity(posts.len());
    let mut loss = 0.0;
    for (post, &y) in posts.iter().zip(&labels) {
        let (p, _) = model.forward_full(&post.input)?;
        loss += bce(p, y);
        preds.push(ThreeBranchModel::<F>::decide(p));
    }
    let label_bits: Vec<u8> = labels.iter().map(|&y| y as u8).collect();
    Ok(EvalReport {
        metrics: compute_metrics(&preds, &label_bits)?,
        mean_loss: loss / posts.len() as f64,
    })
}

/// Build a vocabulary from the caption/OCR tokens of a dataset, most
/// frequent first, with the OCR separator reserved up front.
pub fn vocab_from_posts(posts: &[Post], cap: usize) -> crate::embeddings::Vocab {
    use std::collections::HashMap;
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut first_seen: HashMap<String, usize> = HashMap::new();
    let mut order = 0usize;
    for post in posts {
        for tok in tokenize(&post.caption).into_iter().chain(tokenize(&post.ocr_text)) {
            *counts.entry(tok.clone()).or_default() += 1;
            first_seen.entry(tok).or_insert_with(|| {
                order += 1;
                order
            });
        }
    }
    let mut toks: Vec<(String, usize)> = counts.into_iter().collect();
    // frequency desc, then first-appearance for determinism
    toks.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| first_seen[&a.0].cmp(&first_seen[&b.0])));
    let reserved = std::iter::once(crate::embeddings::OCR_TOKEN.to_string());
    crate::embeddings::Vocab::from_tokens(
        reserved.chain(toks.into_iter().map(|(t, _)| t)).take(cap.saturating_sub(2).max(1)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ImageConfig, Modalities, ModelConfig};
    use crate::synth::{gen_synthetic, SynthSpec};

    fn tiny_config(seed: u64) -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            hashtag_hidden: 8,
            gru_hidden: 6,
            proj_dim: 8,
            classifier_widths: vec![8, 4],
            image: ImageConfig {
                input_h: 32,
                input_w: 32,
                stage_widths: vec![4, 4, 4],
                map_channels: 4,
                reduction: 2,
                features_from_file: false,
            },
            vocab_cap: 256,
            buckets: 128,
            dropout: 0.1,
            seed,
            ..ModelConfig::default()
        }
    }

    fn tiny_run(seed: u64, lr: f64, epochs: usize) -> (ThreeBranchModel<f32>, TrainHistory) {
        let synth = gen_synthetic(24, 7, SynthSpec::Uni { noise: 0.0 }).unwrap();
        let posts = prepare_synthetic::<f32>(&synth);
        let vocab = vocab_from_posts(&synth.dataset.posts, 256);
        let mut model = ThreeBranchModel::init(tiny_config(seed), vocab).unwrap();
        let cfg = TrainConfig { lr, batch_size: 8, epochs, seed, ..TrainConfig::default() };
        let history = train(&mut model, &posts[..16], &posts[16..], &cfg).unwrap();
        (model, history)
    }

    #[test]
    fn zero_learning_rate_is_rejected() {
        let cfg = TrainConfig { lr: 0.0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { batch_size: 1, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_class_training_set_is_config_error() {
        let synth = gen_synthetic(16, 1, SynthSpec::Uni { noise: 0.0 }).unwrap();
        let posts = prepare_synthetic::<f32>(&synth);
        let ones: Vec<PreparedPost<f32>> =
            posts.iter().filter(|p| p.label == Some(1.0)).cloned().collect();
        let vocab = vocab_from_posts(&synth.dataset.posts, 256);
        let mut model = ThreeBranchModel::init(tiny_config(0), vocab).unwrap();
        let err = train(&mut model, &ones, &posts, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let (m1, h1) = tiny_run(3, 1e-3, 2);
        let (m2, h2) = tiny_run(3, 1e-3, 2);
        assert_eq!(h1, h2);
        let mut m1 = m1;
        let mut m2 = m2;
        for ((n1, t1), (n2, t2)) in m1.persistent_mut().into_iter().zip(m2.persistent_mut()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data(), "tensor {n1} differs between runs");
        }
        assert_eq!(h1.to_csv(), h2.to_csv());
    }

    #[test]
    fn loss_decreases_on_easy_data() {
        let (_, history) = tiny_run(5, 3e-3, 6);
        let first = history.epochs.first().unwrap().train_loss;
        let last = history.epochs.last().unwrap().train_loss;
        assert!(last < first, "train loss {first} -> {last} did not decrease");
    }

    #[test]
    fn history_csv_has_contracted_header() {
        let (_, history) = tiny_run(9, 1e-3, 1);
        assert!(history.to_csv().starts_with("epoch,train_loss,train_acc,val_loss,val_acc\n"));
        assert_eq!(history.epochs.len(), 1);
        assert_eq!(history.best_epoch, 1);
    }

    #[test]
    fn evaluate_empty_set_is_error() {
        let synth = gen_synthetic(8, 2, SynthSpec::Uni { noise: 0.0 }).unwrap();
        let vocab = vocab_from_posts(&synth.dataset.posts, 256);
        let model = ThreeBranchModel::<f32>::init(tiny_config(0), vocab).unwrap();
        assert!(evaluate(&model, &[]).is_err());
    }

    #[test]
    fn caption_only_models_train_too() {
        let synth = gen_synthetic(16, 3, SynthSpec::Uni { noise: 0.0 }).unwrap();
        let posts = prepare_synthetic::<f32>(&synth);
        let vocab = vocab_from_posts(&synth.dataset.posts, 256);
        let mut cfg = tiny_config(1);
        cfg.modalities = Modalities::parse("caption").unwrap();
        let mut model = ThreeBranchModel::init(cfg, vocab).unwrap();
        let tc = TrainConfig { lr: 1e-3, batch_size: 8, epochs: 2, seed: 1, ..TrainConfig::default() };
        let history = train(&mut model, &posts[..12], &posts[12..], &tc).unwrap();
        assert_eq!(history.epochs.len(), 2);
    }

    #[test]
    fn vocab_from_posts_reserves_separator() {
        let synth = gen_synthetic(8, 4, SynthSpec::Uni { noise: 0.2 }).unwrap();
        let vocab = vocab_from_posts(&synth.dataset.posts, 64);
        assert_eq!(vocab.get(crate::embeddings::OCR_TOKEN), Some(2));
    }
}
