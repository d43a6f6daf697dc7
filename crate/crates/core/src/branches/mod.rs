//! The three single-modality encoders: hashtag branch (dense+tanh plus
//! SeTa attention), text branch (biGRU over caption+OCR tokens plus SeTa),
//! and image branch (conv backbone, scSE, GAP).

pub mod gru;
pub mod image;

pub use gru::{bigru_encode, gru_cell, GruDirection, GruParams, GruVars};
pub use image::{
    apply_scse, backbone, image_branch, scse_gates, ConvStage, ImageBranchParams,
    ImageBranchVars, ScseParams, ScseTrace, ScseVars,
};

use rand::Rng;

use crate::embeddings::{normalize_hashtag, EmbeddingTable, EmbeddingVars, OCR_TOKEN};
use crate::error::Result;
use crate::seta::{attend, seta_weights, uniform_weights, SeTaParams, SeTaScores, SeTaVars};
use crate::tensor::{glorot_uniform, Scalar, Tape, Tensor, Var};

/// Dense+tanh hidden layer over hashtag embeddings plus an anchor-equipped
/// SeTa layer.
#[derive(Debug, Clone)]
pub struct HashtagBranchParams<F: Scalar> {
    /// `[d x d_hidden]`
    pub dense_w: Tensor<F>,
    /// `[d_hidden]`
    pub dense_b: Tensor<F>,
    pub seta: SeTaParams<F>,
}

impl<F: Scalar> HashtagBranchParams<F> {
    /// The dense layer alone; the SeTa parameters are attached after the
    /// anchor has been built through this layer.
    pub fn init_dense<R: Rng>(embed_dim: usize, hidden: usize, rng: &mut R) -> (Tensor<F>, Tensor<F>) {
        (glorot_uniform(&[embed_dim, hidden], embed_dim, hidden, rng), Tensor::zeros(&[hidden]))
    }

    pub fn hidden_width(&self) -> usize {
        self.dense_b.len()
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> HashtagBranchVars {
        HashtagBranchVars {
            dense_w: tape.param(&self.dense_w),
            dense_b: tape.param(&self.dense_b),
            seta: self.seta.bind(tape),
        }
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = vec![
            (format!("{prefix}.dense_w"), &mut self.dense_w),
            (format!("{prefix}.dense_b"), &mut self.dense_b),
        ];
        out.extend(self.seta.params_mut(&format!("{prefix}.seta")));
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HashtagBranchVars {
    pub dense_w: Var,
    pub dense_b: Var,
    pub seta: SeTaVars,
}

impl HashtagBranchVars {
    pub fn ordered(&self, prefix: &str) -> Vec<(String, Var)> {
        let mut out = vec![
            (format!("{prefix}.dense_w"), self.dense_w),
            (format!("{prefix}.dense_b"), self.dense_b),
        ];
        out.extend(self.seta.ordered(&format!("{prefix}.seta")));
        out
    }
}

/// biGRU over the token stream plus a SeTa layer over timesteps.
#[derive(Debug, Clone)]
pub struct TextBranchParams<F: Scalar> {
    pub gru: GruParams<F>,
    pub seta: SeTaParams<F>,
}

impl<F: Scalar> TextBranchParams<F> {
    pub fn bind(&self, tape: &mut Tape<F>) -> TextBranchVars {
        TextBranchVars { gru: self.gru.bind(tape), seta: self.seta.bind(tape) }
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = self.gru.params_mut(&format!("{prefix}.gru"));
        out.extend(self.seta.params_mut(&format!("{prefix}.seta")));
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TextBranchVars {
    pub gru: GruVars,
    pub seta: SeTaVars,
}

impl TextBranchVars {
    pub fn ordered(&self, prefix: &str) -> Vec<(String, Var)> {
        let mut out = self.gru.ordered(&format!("{prefix}.gru"));
        out.extend(self.seta.ordered(&format!("{prefix}.seta")));
        out
    }
}

/// Encode a post's hashtags. Tags are normalized, truncated to
/// `max_hashtags`, embedded as whole words (subword fallback for glued
/// tags), pushed through dense+tanh, then SeTa-weighted and summed.
/// An empty list yields a zero feature and empty weights.
pub fn hashtag_branch<F: Scalar>(
    tape: &mut Tape<F>,
    hashtags: &[String],
    table: &EmbeddingTable<F>,
    evars: Option<&EmbeddingVars>,
    vars: &HashtagBranchVars,
    max_hashtags: usize,
    skip_attention: bool,
) -> Result<(Var, SeTaScores)> {
    let hidden = tape.value(vars.dense_b).len();
    let mut normalized = Vec::new();
    for tag in hashtags.iter().take(max_hashtags) {
        normalized.push(normalize_hashtag(tag)?);
    }
    if normalized.is_empty() {
        return Ok((tape.input(Tensor::zeros(&[hidden])), SeTaScores::empty()));
    }

    let embedded = table.embed_tokens_on_tape(tape, evars, &normalized)?;
    let pre = tape.matmul(embedded, vars.dense_w)?;
    let pre = tape.add_row_bias(pre, vars.dense_b)?;
    let items = tape.tanh(pre);

    let mask = vec![true; normalized.len()];
    let (weights, scores) = if skip_attention {
        uniform_weights(tape, &mask)?
    } else {
        seta_weights(tape, items, &mask, &vars.seta)?
    };
    let feature = attend(tape, items, weights)?;
    Ok((feature, scores))
}

/// Encode caption plus OCR text. `ocr_tokens: Some(..)` appends a reserved
/// separator token then the OCR stream (even when empty); `None` means the
/// model has no OCR component at all. The combined stream is truncated to
/// `max_text`. Both streams empty yields a zero feature.
pub fn text_branch<F: Scalar>(
    tape: &mut Tape<F>,
    caption_tokens: &[String],
    ocr_tokens: Option<&[String]>,
    table: &EmbeddingTable<F>,
    evars: Option<&EmbeddingVars>,
    vars: &TextBranchVars,
    max_text: usize,
    skip_attention: bool,
) -> Result<(Var, SeTaScores)> {
    let out_width = 2 * tape.value(vars.gru.fwd.bz).len();
    if caption_tokens.is_empty() && ocr_tokens.is_none_or(|o| o.is_empty()) {
        return Ok((tape.input(Tensor::zeros(&[out_width])), SeTaScores::empty()));
    }

    let mut stream: Vec<String> = caption_tokens.to_vec();
    if let Some(ocr) = ocr_tokens {
        stream.push(OCR_TOKEN.to_string());
        stream.extend_from_slice(ocr);
    }
    stream.truncate(max_text);

    let embedded = table.embed_tokens_on_tape(tape, evars, &stream)?;
    let mask = vec![true; stream.len()];
    let states = bigru_encode(tape, embedded, &mask, &vars.gru)?;
    let (weights, scores) = if skip_attention {
        uniform_weights(tape, &mask)?
    } else {
        seta_weights(tape, states, &mask, &vars.seta)?
    };
    let feature = attend(tape, states, weights)?;
    Ok((feature, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::Vocab;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toks(ts: &[&str]) -> Vec<String> {
        ts.iter().map(|s| s.to_string()).collect()
    }

    fn fixture() -> (EmbeddingTable<f64>, HashtagBranchParams<f64>, TextBranchParams<f64>) {
        let vocab = Vocab::from_tokens(toks(&["<ocr>", "vaccine", "truth", "a", "b"]));
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let table = EmbeddingTable::init(vocab, 6, 32, (3, 6), false, &mut rng);
        let (dense_w, dense_b) = HashtagBranchParams::init_dense(6, 5, &mut rng);
        let anchor = crate::embeddings::build_anchor(
            &toks(&["#vaccinetruth", "#bigpharma"]),
            &table,
            &dense_w,
            &dense_b,
        )
        .unwrap();
        let hashtag = HashtagBranchParams {
            dense_w,
            dense_b,
            seta: SeTaParams::init(5, 5, 5, Some(anchor.value().clone()), &mut rng),
        };
        let text = TextBranchParams {
            gru: GruParams::init(6, 4, &mut rng),
            seta: SeTaParams::init(8, 8, 5, Some(anchor.value().clone()), &mut rng),
        };
        (table, hashtag, text)
    }

    #[test]
    fn single_hashtag_feature_equals_its_hidden_representation() {
        let (table, params, _) = fixture();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let (feat, scores) =
            hashtag_branch(&mut tape, &toks(&["#VaccineTruth"]), &table, None, &vars, 30, false)
                .unwrap();
        assert_eq!(scores.weights, vec![1.0]);

        // hand path: embed -> dense -> tanh
        let emb = table.embed_word("vaccinetruth");
        for j in 0..5 {
            let mut pre = params.dense_b.data()[j];
            for i in 0..6 {
                pre += emb.data()[i] * params.dense_w.data()[i * 5 + j];
            }
            assert!((tape.value(feat).data()[j] - pre.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_hashtags_yield_zero_feature() {
        let (table, params, _) = fixture();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let (feat, scores) = hashtag_branch(&mut tape, &[], &table, None, &vars, 30, false).unwrap();
        assert!(tape.value(feat).data().iter().all(|&v| v == 0.0));
        assert!(scores.weights.is_empty());
    }

    #[test]
    fn hashtags_truncate_to_limit() {
        let (table, params, _) = fixture();
        let many: Vec<String> = (0..31).map(|i| format!("#tag{i}")).collect();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let (feat31, scores) =
            hashtag_branch(&mut tape, &many, &table, None, &vars, 30, false).unwrap();
        assert_eq!(scores.weights.len(), 30);
        let (feat30, _) =
            hashtag_branch(&mut tape, &many[..30], &table, None, &vars, 30, false).unwrap();
        assert_eq!(tape.value(feat31).data(), tape.value(feat30).data());
    }

    #[test]
    fn hashtag_feature_is_order_invariant() {
        let (table, params, _) = fixture();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let (a, _) = hashtag_branch(
            &mut tape,
            &toks(&["#vaccine", "#truth", "#neverseen"]),
            &table,
            None,
            &vars,
            30,
            false,
        )
        .unwrap();
        let (b, _) = hashtag_branch(
            &mut tape,
            &toks(&["#neverseen", "#vaccine", "#truth"]),
            &table,
            None,
            &vars,
            30,
            false,
        )
        .unwrap();
        for (x, y) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_ocr_equals_caption_plus_separator() {
        let (table, _, params) = fixture();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let cap = toks(&["vaccine", "truth", "a"]);
        let (with_empty_ocr, _) =
            text_branch(&mut tape, &cap, Some(&[]), &table, None, &vars, 680, false).unwrap();
        let mut manual = cap.clone();
        manual.push(OCR_TOKEN.to_string());
        let (explicit, _) =
            text_branch(&mut tape, &manual, None, &table, None, &vars, 680, false).unwrap();
        assert_eq!(tape.value(with_empty_ocr).data(), tape.value(explicit).data());
    }

    #[test]
    fn both_streams_empty_yield_zero() {
        let (table, _, params) = fixture();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let (feat, scores) =
            text_branch(&mut tape, &[], Some(&[]), &table, None, &vars, 680, false).unwrap();
        assert_eq!(tape.value(feat).shape(), &[8]);
        assert!(tape.value(feat).data().iter().all(|&v| v == 0.0));
        assert!(scores.weights.is_empty());
    }

    #[test]
    fn stream_truncates_to_max_text() {
        let (table, _, params) = fixture();
        let cap: Vec<String> = (0..679).map(|_| "a".to_string()).collect();
        let ocr: Vec<String> = (0..10).map(|_| "b".to_string()).collect();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        // 679 caption + separator + 10 ocr = 690, truncated to 680 = caption + separator
        let (truncated, scores) =
            text_branch(&mut tape, &cap, Some(&ocr), &table, None, &vars, 680, false).unwrap();
        assert_eq!(scores.weights.len(), 680);
        let (no_ocr_budget, _) =
            text_branch(&mut tape, &cap, Some(&[]), &table, None, &vars, 680, false).unwrap();
        assert_eq!(tape.value(truncated).data(), tape.value(no_ocr_budget).data());
    }

    #[test]
    fn trainable_embedding_path_matches_frozen_values() {
        let (mut table, _, params) = fixture();
        let cap = toks(&["vaccine", "neverseenword", "truth"]);
        let mut frozen_tape = Tape::new();
        let vars = params.bind(&mut frozen_tape);
        let (frozen, _) =
            text_branch(&mut frozen_tape, &cap, Some(&[]), &table, None, &vars, 680, false)
                .unwrap();
        let frozen_out = frozen_tape.value(frozen).data().to_vec();

        table.trainable = true;
        let mut tape = Tape::new();
        let evars = table.bind(&mut tape);
        let vars = params.bind(&mut tape);
        let (trainable, _) =
            text_branch(&mut tape, &cap, Some(&[]), &table, evars.as_ref(), &vars, 680, false)
                .unwrap();
        for (a, b) in frozen_out.iter().zip(tape.value(trainable).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
