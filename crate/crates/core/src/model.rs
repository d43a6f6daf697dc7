//! The fused classifier: branch features projected to a shared space,
//! SeTa-weighted fusion, comprehensive concatenation, and a three-dense-layer
//! head with batchnorm, dropout, and a sigmoid output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::branches::{
    hashtag_branch, image_branch, text_branch, GruParams, HashtagBranchParams, HashtagBranchVars,
    ImageBranchParams, ImageBranchVars, ScseTrace, TextBranchParams, TextBranchVars,
};
use crate::embeddings::{build_anchor, AnchorVector, EmbeddingTable, EmbeddingVars, Vocab};
use crate::error::{Error, Result};
use crate::seta::{attend, seta_weights, uniform_weights, SeTaParams, SeTaScores, SeTaVars};
use crate::tensor::{glorot_uniform, Mode, Scalar, Tape, Tensor, Var};

/// Identity of one input branch, in the fixed order used everywhere:
/// hashtags, caption text, visual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Hashtag,
    Caption,
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Hashtag, Modality::Caption, Modality::Visual];

    pub fn key(&self) -> &'static str {
        match self {
            Modality::Hashtag => "tag",
            Modality::Caption => "caption",
            Modality::Visual => "image",
        }
    }
}

/// Which branches the model is built with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Modalities {
    pub tags: bool,
    pub caption: bool,
    pub image: bool,
}

impl Default for Modalities {
    fn default() -> Self {
        Modalities { tags: true, caption: true, image: true }
    }
}

impl Modalities {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn only(m: Modality) -> Self {
        let mut s = Modalities { tags: false, caption: false, image: false };
        s.set(m, true);
        s
    }

    pub fn set(&mut self, m: Modality, on: bool) {
        match m {
            Modality::Hashtag => self.tags = on,
            Modality::Caption => self.caption = on,
            Modality::Visual => self.image = on,
        }
    }

    pub fn has(&self, m: Modality) -> bool {
        match m {
            Modality::Hashtag => self.tags,
            Modality::Caption => self.caption,
            Modality::Visual => self.image,
        }
    }

    pub fn present(&self) -> Vec<Modality> {
        Modality::ALL.iter().copied().filter(|m| self.has(*m)).collect()
    }

    /// Parse a comma-separated list like `image,caption,tag`.
    pub fn parse(list: &str) -> Result<Self> {
        let mut s = Modalities { tags: false, caption: false, image: false };
        for part in list.split(',') {
            match part.trim() {
                "tag" | "tags" | "hashtag" => s.tags = true,
                "caption" | "text" => s.caption = true,
                "image" | "visual" => s.image = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown modality {other:?} (expected tag, caption, image)"
                    )))
                }
            }
        }
        if s.present().is_empty() {
            return Err(Error::Config("modality list is empty".into()));
        }
        Ok(s)
    }
}

/// Ablation switches mirroring the model variants under study.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Drop the fused feature from the comprehensive concatenation.
    pub no_fusion: bool,
    /// Fuse raw branch features (zero-padded to a common width) instead of
    /// projected ones.
    pub no_projection: bool,
    /// Replace every attention-weighted sum with an unweighted mean and
    /// bypass the scSE gates.
    pub no_attention: bool,
    /// Drop OCR tokens (and the separator) from the text stream.
    pub no_ocr: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageConfig {
    pub input_h: usize,
    pub input_w: usize,
    /// Output channels per conv/pool stage; empty means feature maps are
    /// supplied directly instead of raw images.
    pub stage_widths: Vec<usize>,
    /// Channels of the final feature map.
    pub map_channels: usize,
    /// scSE reduction ratio; must divide `map_channels`.
    pub reduction: usize,
    /// Interpret image files as precomputed feature maps.
    pub features_from_file: bool,
}

impl ImageConfig {
    pub fn desk() -> Self {
        ImageConfig {
            input_h: 32,
            input_w: 32,
            stage_widths: vec![8, 8, 8],
            map_channels: 8,
            reduction: 4,
            features_from_file: false,
        }
    }

    pub fn full() -> Self {
        ImageConfig {
            input_h: 224,
            input_w: 224,
            stage_widths: vec![64, 128, 256, 512, 512],
            map_channels: 512,
            reduction: 16,
            features_from_file: false,
        }
    }

    /// Shape of the feature map entering scSE: each stage halves the
    /// spatial extents.
    pub fn feature_map_shape(&self) -> (usize, usize, usize) {
        let stages = self.stage_widths.len() as u32;
        (self.input_h >> stages, self.input_w >> stages, self.map_channels)
    }

    pub fn expected_input_shape(&self) -> Vec<usize> {
        if self.features_from_file {
            let (h, w, c) = self.feature_map_shape();
            vec![h, w, c]
        } else {
            vec![self.input_h, self.input_w, 3]
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    /// Hashtag hidden width d'; also the anchor dimension.
    pub hashtag_hidden: usize,
    /// GRU hidden width per direction.
    pub gru_hidden: usize,
    /// Shared projection width p.
    pub proj_dim: usize,
    pub classifier_widths: Vec<usize>,
    pub image: ImageConfig,
    pub max_hashtags: usize,
    pub max_text: usize,
    pub vocab_cap: usize,
    pub buckets: usize,
    pub ngram_min: usize,
    pub ngram_max: usize,
    /// Curated antivaccine hashtags averaged into the task-attention anchor.
    pub anchor_tags: Vec<String>,
    pub modalities: Modalities,
    pub ablation: Ablation,
    pub train_embeddings: bool,
    /// Width of the SeTa score MLPs; defaults to each site's input width.
    pub seta_hidden: Option<usize>,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub seed: u64,
}

pub fn default_anchor_tags() -> Vec<String> {
    [
        "vaccinetruth",
        "vaccineinjury",
        "vaccinecauseautism",
        "vaccineawareness",
        "fascism",
        "whistleblower",
        "bigpharma",
        "informedconsent",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 16,
            hashtag_hidden: 16,
            gru_hidden: 16,
            proj_dim: 32,
            classifier_widths: vec![32, 16, 8],
            image: ImageConfig::desk(),
            max_hashtags: 30,
            max_text: 680,
            vocab_cap: 4096,
            buckets: 2048,
            ngram_min: 3,
            ngram_max: 6,
            anchor_tags: default_anchor_tags(),
            modalities: Modalities::all(),
            ablation: Ablation::default(),
            train_embeddings: false,
            seta_hidden: None,
            dropout: 0.5,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Full-size configuration: 224x224 inputs through a five-stage
    /// backbone into 7x7x512 feature maps, with the wide classifier head.
    pub fn full_scale() -> Self {
        ModelConfig {
            embed_dim: 300,
            hashtag_hidden: 128,
            gru_hidden: 128,
            proj_dim: 256,
            classifier_widths: vec![256, 128, 64],
            image: ImageConfig::full(),
            ..ModelConfig::default()
        }
    }

    pub fn branch_width(&self, m: Modality) -> usize {
        match m {
            Modality::Hashtag => self.hashtag_hidden,
            Modality::Caption => 2 * self.gru_hidden,
            Modality::Visual => self.image.map_channels,
        }
    }

    /// Width of the fused feature: the shared projection width, or the
    /// widest present branch when projection is ablated.
    pub fn fusion_dim(&self) -> usize {
        if self.ablation.no_projection {
            self.modalities.present().iter().map(|&m| self.branch_width(m)).max().unwrap_or(0)
        } else {
            self.proj_dim
        }
    }

    /// Input width of the classifier: concatenated branch features plus the
    /// fused feature unless ablated.
    pub fn comprehensive_width(&self) -> usize {
        let branches: usize =
            self.modalities.present().iter().map(|&m| self.branch_width(m)).sum();
        branches + if self.ablation.no_fusion { 0 } else { self.fusion_dim() }
    }

    fn validate(&self) -> Result<()> {
        if self.modalities.present().is_empty() {
            return Err(Error::Config("model needs at least one modality".into()));
        }
        if self.ablation.no_fusion && self.ablation.no_projection {
            // projection feeds only the fused feature; dropping fusion makes
            // the no-projection flag meaningless
            return Err(Error::Config("no_fusion together with no_projection is redundant".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Param(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.anchor_tags.is_empty() {
            return Err(Error::Config("anchor hashtag list is empty".into()));
        }
        if self.classifier_widths.is_empty() {
            return Err(Error::Config("classifier needs at least one dense layer".into()));
        }
        Ok(())
    }
}

/// One dense layer of the classifier with its batchnorm statistics.
#[derive(Debug, Clone)]
pub struct DenseBnLayer<F: Scalar> {
    pub w: Tensor<F>,
    pub b: Tensor<F>,
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub running_mean: Tensor<F>,
    pub running_var: Tensor<F>,
}

impl<F: Scalar> DenseBnLayer<F> {
    fn init<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        DenseBnLayer {
            w: glorot_uniform(&[d_in, d_out], d_in, d_out, rng),
            b: Tensor::zeros(&[d_out]),
            gamma: Tensor::filled(&[d_out], F::one()),
            beta: Tensor::zeros(&[d_out]),
            running_mean: Tensor::zeros(&[d_out]),
            running_var: Tensor::filled(&[d_out], F::one()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierParams<F: Scalar> {
    pub layers: Vec<DenseBnLayer<F>>,
    pub out_w: Tensor<F>,
    pub out_b: Tensor<F>,
}

impl<F: Scalar> ClassifierParams<F> {
    fn init<R: Rng>(input: usize, widths: &[usize], rng: &mut R) -> Self {
        let mut layers = Vec::new();
        let mut d = input;
        for &w in widths {
            layers.push(DenseBnLayer::init(d, w, rng));
            d = w;
        }
        ClassifierParams {
            layers,
            out_w: glorot_uniform(&[d, 1], d, 1, rng),
            out_b: Tensor::zeros(&[1]),
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> ClassifierVars {
        ClassifierVars {
            layers: self
                .layers
                .iter()
                .map(|l| DenseBnVars {
                    w: tape.param(&l.w),
                    b: tape.param(&l.b),
                    gamma: tape.param(&l.gamma),
                    beta: tape.param(&l.beta),
                })
                .collect(),
            out_w: tape.param(&self.out_w),
            out_b: tape.param(&self.out_b),
        }
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.dense{i}.w"), &mut l.w));
            out.push((format!("{prefix}.dense{i}.b"), &mut l.b));
            out.push((format!("{prefix}.dense{i}.gamma"), &mut l.gamma));
            out.push((format!("{prefix}.dense{i}.beta"), &mut l.beta));
        }
        out.push((format!("{prefix}.out.w"), &mut self.out_w));
        out.push((format!("{prefix}.out.b"), &mut self.out_b));
        out
    }

    /// Parameters plus batchnorm running statistics, for persistence.
    pub fn persistent_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.dense{i}.w"), &mut l.w));
            out.push((format!("{prefix}.dense{i}.b"), &mut l.b));
            out.push((format!("{prefix}.dense{i}.gamma"), &mut l.gamma));
            out.push((format!("{prefix}.dense{i}.beta"), &mut l.beta));
            out.push((format!("{prefix}.dense{i}.running_mean"), &mut l.running_mean));
            out.push((format!("{prefix}.dense{i}.running_var"), &mut l.running_var));
        }
        out.push((format!("{prefix}.out.w"), &mut self.out_w));
        out.push((format!("{prefix}.out.b"), &mut self.out_b));
        out
    }
}

#[derive(Debug, Clone)]
pub struct DenseBnVars {
    pub w: Var,
    pub b: Var,
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Debug, Clone)]
pub struct ClassifierVars {
    pub layers: Vec<DenseBnVars>,
    pub out_w: Var,
    pub out_b: Var,
}

impl ClassifierVars {
    pub fn ordered(&self, prefix: &str) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.dense{i}.w"), l.w));
            out.push((format!("{prefix}.dense{i}.b"), l.b));
            out.push((format!("{prefix}.dense{i}.gamma"), l.gamma));
            out.push((format!("{prefix}.dense{i}.beta"), l.beta));
        }
        out.push((format!("{prefix}.out.w"), self.out_w));
        out.push((format!("{prefix}.out.b"), self.out_b));
        out
    }
}

/// Attention snapshots from one forward pass, for dumps and inspection.
#[derive(Debug, Clone, Serialize)]
pub struct AttentionTrace {
    pub hashtag: Option<SeTaScores>,
    pub text: Option<SeTaScores>,
    pub fusion: Option<SeTaScores>,
    pub scse: Option<ScseTrace>,
}

/// One sample's raw inputs, already tokenized.
#[derive(Debug, Clone, Default)]
pub struct SampleInput<F: Scalar> {
    pub caption_tokens: Vec<String>,
    pub ocr_tokens: Vec<String>,
    pub hashtags: Vec<String>,
    pub image: Option<Tensor<F>>,
}

/// The full three-branch network (or any modality subset of it).
#[derive(Debug, Clone)]
pub struct ThreeBranchModel<F: Scalar> {
    pub config: ModelConfig,
    pub table: EmbeddingTable<F>,
    pub anchor: AnchorVector<F>,
    pub hashtag: Option<HashtagBranchParams<F>>,
    pub text: Option<TextBranchParams<F>>,
    pub image: Option<ImageBranchParams<F>>,
    /// Per-modality projection (weight `[branch_w x p]`, bias `[p]`) in
    /// Hashtag, Caption, Visual order; empty under the no-projection
    /// ablation.
    pub projection: Vec<(Modality, Tensor<F>, Tensor<F>)>,
    pub fusion: SeTaParams<F>,
    pub classifier: ClassifierParams<F>,
}

pub struct ModelVars {
    pub embed: Option<EmbeddingVars>,
    pub hashtag: Option<HashtagBranchVars>,
    pub text: Option<TextBranchVars>,
    pub image: Option<ImageBranchVars>,
    pub projection: Vec<(Modality, Var, Var)>,
    pub fusion: SeTaVars,
    pub classifier: ClassifierVars,
}

impl<F: Scalar> ThreeBranchModel<F> {
    /// Build a fresh model. All randomness flows from `config.seed`.
    pub fn init(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let table = EmbeddingTable::init(
            vocab,
            config.embed_dim,
            config.buckets,
            (config.ngram_min, config.ngram_max),
            config.train_embeddings,
            &mut rng,
        );

        // The anchor is built through the hashtag dense layer and frozen;
        // the layer itself is only kept when the hashtag branch exists.
        let (dense_w, dense_b) =
            HashtagBranchParams::init_dense(config.embed_dim, config.hashtag_hidden, &mut rng);
        let anchor = build_anchor(&config.anchor_tags, &table, &dense_w, &dense_b)?;
        let d_anchor = config.hashtag_hidden;

        let hashtag = config.modalities.tags.then(|| {
            let d_in = config.hashtag_hidden;
            let a = config.seta_hidden.unwrap_or(d_in);
            HashtagBranchParams {
                dense_w,
                dense_b,
                seta: SeTaParams::init(d_in, a, d_anchor, Some(anchor.value().clone()), &mut rng),
            }
        });

        let text = config.modalities.caption.then(|| {
            let d_in = 2 * config.gru_hidden;
            let a = config.seta_hidden.unwrap_or(d_in);
            TextBranchParams {
                gru: GruParams::init(config.embed_dim, config.gru_hidden, &mut rng),
                seta: SeTaParams::init(d_in, a, d_anchor, Some(anchor.value().clone()), &mut rng),
            }
        });

        let image = if config.modalities.image {
            Some(ImageBranchParams::init(
                3,
                &config.image.stage_widths,
                config.image.map_channels,
                config.image.reduction,
                &mut rng,
            )?)
        } else {
            None
        };

        let mut projection = Vec::new();
        if !config.ablation.no_projection {
            for m in config.modalities.present() {
                let w_in = config.branch_width(m);
                projection.push((
                    m,
                    glorot_uniform(&[w_in, config.proj_dim], w_in, config.proj_dim, &mut rng),
                    Tensor::zeros(&[config.proj_dim]),
                ));
            }
        }

        let fusion_dim = config.fusion_dim();
        let a = config.seta_hidden.unwrap_or(fusion_dim);
        // No hashtag anchor is meaningful in the projected fusion space.
        let fusion = SeTaParams::init(fusion_dim, a, d_anchor, None, &mut rng);

        let classifier =
            ClassifierParams::init(config.comprehensive_width(), &config.classifier_widths, &mut rng);

        Ok(ThreeBranchModel { config, table, anchor, hashtag, text, image, projection, fusion, classifier })
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> ModelVars {
        ModelVars {
            embed: self.table.bind(tape),
            hashtag: self.hashtag.as_ref().map(|p| p.bind(tape)),
            text: self.text.as_ref().map(|p| p.bind(tape)),
            image: self.image.as_ref().map(|p| p.bind(tape)),
            projection: self
                .projection
                .iter()
                .map(|(m, w, b)| (*m, tape.param(w), tape.param(b)))
                .collect(),
            fusion: self.fusion.bind(tape),
            classifier: self.classifier.bind(tape),
        }
    }

    /// Trainable tensors in the order matching [`ModelVars::ordered`].
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = Vec::new();
        if self.table.trainable {
            out.extend(self.table.params_mut("embed"));
        }
        if let Some(h) = &mut self.hashtag {
            out.extend(h.params_mut("hashtag"));
        }
        if let Some(t) = &mut self.text {
            out.extend(t.params_mut("text"));
        }
        if let Some(i) = &mut self.image {
            out.extend(i.params_mut("image"));
        }
        for (m, w, b) in &mut self.projection {
            out.push((format!("proj.{}.w", m.key()), w));
            out.push((format!("proj.{}.b", m.key()), b));
        }
        out.extend(self.fusion.params_mut("fusion"));
        out.extend(self.classifier.params_mut("classifier"));
        out
    }

    /// Every tensor a checkpoint must persist: embeddings (trainable or
    /// not), all parameters, and batchnorm running statistics.
    pub fn persistent_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = Vec::new();
        out.extend(self.table.params_mut("embed"));
        if let Some(h) = &mut self.hashtag {
            out.extend(h.params_mut("hashtag"));
        }
        if let Some(t) = &mut self.text {
            out.extend(t.params_mut("text"));
        }
        if let Some(i) = &mut self.image {
            out.extend(i.params_mut("image"));
        }
        for (m, w, b) in &mut self.projection {
            out.push((format!("proj.{}.w", m.key()), w));
            out.push((format!("proj.{}.b", m.key()), b));
        }
        out.extend(self.fusion.params_mut("fusion"));
        out.extend(self.classifier.persistent_mut("classifier"));
        out
    }

    /// Hook for parameter constraints after backward: the PAD row of a
    /// trainable embedding table never receives updates.
    pub fn constrain_grads(&self, grads: &mut [(String, Tensor<F>)]) {
        if !self.table.trainable {
            return;
        }
        let d = self.table.dim();
        if let Some((_, g)) = grads.iter_mut().find(|(n, _)| n == "embed.vectors") {
            for v in &mut g.data_mut()[..d] {
                *v = F::zero();
            }
        }
    }

    /// Branch features, projection, fusion, and concatenation for one
    /// sample: the comprehensive feature vector entering the classifier.
    pub fn comprehensive_feature(
        &self,
        tape: &mut Tape<F>,
        vars: &ModelVars,
        input: &SampleInput<F>,
    ) -> Result<(Var, AttentionTrace)> {
        let cfg = &self.config;
        let skip_att = cfg.ablation.no_attention;
        let mut trace =
            AttentionTrace { hashtag: None, text: None, fusion: None, scse: None };
        let mut features: Vec<(Modality, Var)> = Vec::new();

        if let Some(hvars) = &vars.hashtag {
            let (feat, scores) = hashtag_branch(
                tape,
                &input.hashtags,
                &self.table,
                vars.embed.as_ref(),
                hvars,
                cfg.max_hashtags,
                skip_att,
            )?;
            trace.hashtag = Some(scores);
            features.push((Modality::Hashtag, feat));
        }

        if let Some(tvars) = &vars.text {
            let ocr = if cfg.ablation.no_ocr { None } else { Some(input.ocr_tokens.as_slice()) };
            let (feat, scores) = text_branch(
                tape,
                &input.caption_tokens,
                ocr,
                &self.table,
                vars.embed.as_ref(),
                tvars,
                cfg.max_text,
                skip_att,
            )?;
            trace.text = Some(scores);
            features.push((Modality::Caption, feat));
        }

        if let Some(ivars) = &vars.image {
            let feat = match &input.image {
                None => tape.input(Tensor::zeros(&[cfg.image.map_channels])),
                Some(img) => {
                    let expect = cfg.image.expected_input_shape();
                    if img.shape() != expect.as_slice() {
                        return Err(Error::shape(
                            "image_branch",
                            format!("image {:?}, expected {:?}", img.shape(), expect),
                        ));
                    }
                    let iv = tape.input(img.clone());
                    let (feat, scse) = image_branch(tape, iv, ivars, skip_att)?;
                    trace.scse = scse;
                    feat
                }
            };
            features.push((Modality::Visual, feat));
        }

        let fused = if cfg.ablation.no_fusion {
            None
        } else {
            let fusion_dim = cfg.fusion_dim();
            let mut items = Vec::with_capacity(features.len());
            for &(m, feat) in &features {
                if cfg.ablation.no_projection {
                    // zero-pad raw features to the common width
                    let w = cfg.branch_width(m);
                    if w < fusion_dim {
                        let pad = tape.input(Tensor::zeros(&[fusion_dim - w]));
                        items.push(tape.concat(&[feat, pad])?);
                    } else {
                        items.push(feat);
                    }
                } else {
                    let (_, pw, pb) = vars
                        .projection
                        .iter()
                        .find(|(pm, _, _)| *pm == m)
                        .ok_or_else(|| Error::Config(format!("no projection for {:?}", m)))?;
                    items.push(project_on_tape(tape, feat, *pw, *pb)?);
                }
            }
            let stacked = tape.stack_rows(&items)?;
            let mask = vec![true; items.len()];
            let (weights, scores) = if skip_att {
                uniform_weights(tape, &mask)?
            } else {
                seta_weights(tape, stacked, &mask, &vars.fusion)?
            };
            trace.fusion = Some(scores);
            Some(attend(tape, stacked, weights)?)
        };

        let mut parts: Vec<Var> = features.iter().map(|&(_, f)| f).collect();
        if let Some(f) = fused {
            parts.push(f);
        }
        let comprehensive = tape.concat(&parts)?;
        Ok((comprehensive, trace))
    }

    /// Classifier head over a `[B x D]` batch of comprehensive features.
    /// Returns per-sample probabilities `[B]` and, in train mode, the batch
    /// statistics of every batchnorm layer for running-stat updates.
    pub fn classify_batch<R: Rng>(
        &self,
        tape: &mut Tape<F>,
        vars: &ClassifierVars,
        batch: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Var, Vec<(Tensor<F>, Tensor<F>)>)> {
        let cfg = &self.config;
        let mut x = batch;
        let mut bn_stats = Vec::new();
        for (lv, lp) in vars.layers.iter().zip(&self.classifier.layers) {
            let dense = tape.matmul(x, lv.w)?;
            let dense = tape.add_row_bias(dense, lv.b)?;
            let normed = match mode {
                Mode::Train => {
                    let (n, mean, var) =
                        tape.batchnorm_train(dense, lv.gamma, lv.beta, cfg.bn_eps)?;
                    bn_stats.push((mean, var));
                    n
                }
                Mode::Infer => tape.batchnorm_infer(
                    dense,
                    lv.gamma,
                    lv.beta,
                    &lp.running_mean,
                    &lp.running_var,
                    cfg.bn_eps,
                )?,
            };
            let act = tape.relu(normed);
            x = tape.dropout(act, cfg.dropout, mode, rng)?;
        }
        let out = tape.matmul(x, vars.out_w)?;
        let out = tape.add_row_bias(out, vars.out_b)?;
        let b = tape.value(out).shape()[0];
        let flat = tape.reshape(out, &[b])?;
        Ok((tape.sigmoid(flat), bn_stats))
    }

    /// Inference on a single post: probability plus attention dumps.
    pub fn forward_full(&self, input: &SampleInput<F>) -> Result<(f64, AttentionTrace)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let (feature, trace) = self.comprehensive_feature(&mut tape, &vars, input)?;
        let d = tape.value(feature).len();
        let row = tape.reshape(feature, &[1, d])?;
        // infer mode draws nothing from the rng
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (probs, _) = self.classify_batch(&mut tape, &vars.classifier, row, Mode::Infer, &mut rng)?;
        let p = tape.value(probs).data()[0].as_f64();
        if !p.is_finite() {
            return Err(Error::NonFinite("prediction probability".into()));
        }
        Ok((p, trace))
    }

    /// Decision rule: strictly greater than 0.5 is antivaccine.
    pub fn decide(probability: f64) -> u8 {
        (probability > 0.5) as u8
    }
}

impl ModelVars {
    /// Trainable vars ordered to match [`ThreeBranchModel::params_mut`].
    pub fn ordered(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        if let Some(e) = &self.embed {
            out.extend(e.ordered("embed"));
        }
        if let Some(h) = &self.hashtag {
            out.extend(h.ordered("hashtag"));
        }
        if let Some(t) = &self.text {
            out.extend(t.ordered("text"));
        }
        if let Some(i) = &self.image {
            out.extend(i.ordered("image"));
        }
        for (m, w, b) in &self.projection {
            out.push((format!("proj.{}.w", m.key()), *w));
            out.push((format!("proj.{}.b", m.key()), *b));
        }
        out.extend(self.fusion.ordered("fusion"));
        out.extend(self.classifier.ordered("classifier"));
        out
    }
}

/// Projection module: `ReLU(W_m . F + b_m)` mapping a branch feature into
/// the shared space.
pub fn project_on_tape<F: Scalar>(tape: &mut Tape<F>, feat: Var, w: Var, b: Var) -> Result<Var> {
    let d = tape.value(feat).len();
    let p = tape.value(b).len();
    let row = tape.reshape(feat, &[1, d])?;
    let pre = tape.matmul(row, w)?;
    let pre = tape.add_row_bias(pre, b)?;
    let act = tape.relu(pre);
    tape.reshape(act, &[p])
}

/// Scalar binary cross-entropy with probability clamping.
pub fn bce(p: f64, y: f64) -> f64 {
    let eps = 1e-7;
    let pc = p.clamp(eps, 1.0 - eps);
    -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
}
