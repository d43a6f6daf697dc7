//! Vocabulary, tokenization, and a subword-fallback embedding table.
//!
//! Words found in the vocabulary resolve to their own vector row. Anything
//! else (hashtags glued from several words, typos) is represented as the
//! mean of hashed character n-gram bucket vectors, so every non-empty
//! string gets a finite, deterministic embedding.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
/// Separator inserted between caption and OCR token streams.
pub const OCR_TOKEN: &str = "<ocr>";

pub const PAD_INDEX: usize = 0;
pub const UNK_INDEX: usize = 1;

/// Lowercase, split on whitespace, split punctuation into separate tokens.
/// Hashtags and user mentions are dropped from the caption stream (hashtags
/// travel separately on the post).
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for piece in text.split_whitespace() {
        if piece.starts_with('#') || piece.starts_with('@') {
            continue;
        }
        let mut word = String::new();
        for ch in piece.chars().flat_map(|c| c.to_lowercase()) {
            if ch.is_alphanumeric() {
                word.push(ch);
            } else {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

/// Strip the leading '#', lowercase, drop anything non-alphanumeric.
pub fn normalize_hashtag(tag: &str) -> Result<String> {
    let stripped = tag.strip_prefix('#').unwrap_or(tag);
    let normalized: String = stripped
        .chars()
        .flat_map(|c| c.to_lowercase())
        .filter(|c| c.is_alphanumeric())
        .collect();
    if normalized.is_empty() {
        return Err(Error::InvalidHashtag(tag.to_string()));
    }
    Ok(normalized)
}

/// FNV-1a over UTF-8 bytes; bucket index is the hash modulo bucket count.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Token index lookup: a vocabulary with PAD and UNK reserved at 0 and 1.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Build from plain tokens; indices start at 2 after PAD and UNK.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut words = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut index = HashMap::new();
        index.insert(PAD_TOKEN.to_string(), PAD_INDEX);
        index.insert(UNK_TOKEN.to_string(), UNK_INDEX);
        for t in tokens {
            if !index.contains_key(&t) {
                index.insert(t.clone(), words.len());
                words.push(t);
            }
        }
        Vocab { words, index }
    }

    /// One token per line; line number equals index - 2.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::from_tokens(text.lines().map(|l| l.to_string())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for w in &self.words[2..] {
            let _ = writeln!(out, "{w}");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Total entries including the two reserved rows.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    /// FNV-1a over the newline-joined non-reserved tokens; pins a checkpoint
    /// to the vocabulary it was trained with.
    pub fn content_hash(&self) -> u64 {
        let joined = self.words[2..].join("\n");
        fnv1a64(joined.as_bytes())
    }
}

/// How one token resolves against the table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenRef {
    Pad,
    Vocab(usize),
    /// Out-of-vocabulary: hashed n-gram bucket indices (multiset).
    Subword(Vec<usize>),
}

/// Embedding matrix with subword buckets for out-of-vocabulary lookups.
#[derive(Debug, Clone)]
pub struct EmbeddingTable<F: Scalar> {
    pub vocab: Vocab,
    /// `[V x d]`; row 0 (PAD) is all zeros and stays that way.
    pub vectors: Tensor<F>,
    /// `[B x d]`, addressed by hashed character n-grams.
    pub subword_buckets: Tensor<F>,
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub trainable: bool,
}

impl<F: Scalar> EmbeddingTable<F> {
    pub fn init<R: Rng>(
        vocab: Vocab,
        dim: usize,
        buckets: usize,
        ngram_range: (usize, usize),
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        // Buckets are drawn first so out-of-vocabulary vectors depend only on
        // (seed, buckets, dim), never on vocabulary contents.
        let mut bucket_vecs = Tensor::zeros(&[buckets, dim]);
        for v in bucket_vecs.data_mut().iter_mut() {
            *v = F::from_f64(rng.random_range(-scale..scale));
        }
        let mut vectors = Tensor::zeros(&[vocab.len(), dim]);
        for (i, v) in vectors.data_mut().iter_mut().enumerate() {
            let draw = F::from_f64(rng.random_range(-scale..scale));
            // PAD row stays zero.
            if i >= dim {
                *v = draw;
            }
        }
        EmbeddingTable {
            vocab,
            vectors,
            subword_buckets: bucket_vecs,
            ngram_min: ngram_range.0,
            ngram_max: ngram_range.1,
            trainable,
        }
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn bucket_count(&self) -> usize {
        self.subword_buckets.shape()[0]
    }

    /// Character n-grams of the boundary-marked word `<word>`, hashed to
    /// bucket indices. Order and multiplicity are preserved.
    pub fn ngram_buckets(&self, word: &str) -> Vec<usize> {
        let marked: Vec<char> = std::iter::once('<')
            .chain(word.chars())
            .chain(std::iter::once('>'))
            .collect();
        let b = self.bucket_count() as u64;
        let mut ids = Vec::new();
        for n in self.ngram_min..=self.ngram_max.min(marked.len()) {
            for start in 0..=marked.len() - n {
                let gram: String = marked[start..start + n].iter().collect();
                ids.push((fnv1a64(gram.as_bytes()) % b) as usize);
            }
        }
        ids
    }

    pub fn resolve(&self, word: &str) -> TokenRef {
        if word == PAD_TOKEN {
            return TokenRef::Pad;
        }
        match self.vocab.get(word) {
            Some(PAD_INDEX) => TokenRef::Pad,
            Some(idx) => TokenRef::Vocab(idx),
            None => {
                let ids = self.ngram_buckets(word);
                if ids.is_empty() {
                    TokenRef::Vocab(UNK_INDEX)
                } else {
                    TokenRef::Subword(ids)
                }
            }
        }
    }

    fn write_token(&self, tref: &TokenRef, out: &mut [F]) {
        let d = self.dim();
        match tref {
            TokenRef::Pad => out.iter_mut().for_each(|v| *v = F::zero()),
            TokenRef::Vocab(idx) => {
                out.copy_from_slice(&self.vectors.data()[idx * d..(idx + 1) * d]);
            }
            TokenRef::Subword(ids) => {
                out.iter_mut().for_each(|v| *v = F::zero());
                for &id in ids {
                    let row = &self.subword_buckets.data()[id * d..(id + 1) * d];
                    for (o, &r) in out.iter_mut().zip(row) {
                        *o += r;
                    }
                }
                let norm = F::from_f64(ids.len() as f64);
                out.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }

    /// Embedding of a single word: its vector row when in vocabulary,
    /// otherwise the mean of its n-gram bucket vectors.
    pub fn embed_word(&self, word: &str) -> Tensor<F> {
        let mut out = vec![F::zero(); self.dim()];
        self.write_token(&self.resolve(word), &mut out);
        Tensor::from_vec(out)
    }

    /// Truncate/pad a token list to `max_len` rows; the mask is true exactly
    /// on real tokens.
    pub fn embed_sequence(&self, tokens: &[String], max_len: usize) -> Result<(Tensor<F>, Vec<bool>)> {
        if max_len == 0 {
            return Err(Error::Param("embed_sequence requires max_len >= 1".into()));
        }
        let d = self.dim();
        let mut data = vec![F::zero(); max_len * d];
        let mut mask = vec![false; max_len];
        for (i, tok) in tokens.iter().take(max_len).enumerate() {
            self.write_token(&self.resolve(tok), &mut data[i * d..(i + 1) * d]);
            mask[i] = true;
        }
        Ok((Tensor::new(vec![max_len, d], data)?, mask))
    }

    /// Embed an exact token list with no padding: `[len x d]`.
    pub fn embed_tokens(&self, tokens: &[String]) -> Result<Tensor<F>> {
        let d = self.dim();
        let mut data = vec![F::zero(); tokens.len() * d];
        for (i, tok) in tokens.iter().enumerate() {
            self.write_token(&self.resolve(tok), &mut data[i * d..(i + 1) * d]);
        }
        Tensor::new(vec![tokens.len(), d], data)
    }

    /// Register the table on a tape when it is trainable; a frozen table
    /// embeds as constant data and needs no handles.
    pub fn bind(&self, tape: &mut Tape<F>) -> Option<EmbeddingVars> {
        self.trainable.then(|| EmbeddingVars {
            vectors: tape.param(&self.vectors),
            buckets: tape.param(&self.subword_buckets),
        })
    }

    /// Token embeddings as a `[len x d]` tape node. With a trainable binding
    /// the rows are gathered through the tape so gradients reach the table;
    /// frozen tables produce a constant leaf.
    pub fn embed_tokens_on_tape(
        &self,
        tape: &mut Tape<F>,
        vars: Option<&EmbeddingVars>,
        tokens: &[String],
    ) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Param("cannot embed an empty token list".into()));
        }
        let Some(vars) = vars else {
            let data = self.embed_tokens(tokens)?;
            return Ok(tape.input(data));
        };
        let d = self.dim();
        let mut rows = Vec::with_capacity(tokens.len());
        for tok in tokens {
            let row = match self.resolve(tok) {
                TokenRef::Pad => tape.input(Tensor::zeros(&[d])),
                TokenRef::Vocab(idx) => {
                    let r = tape.gather(vars.vectors, &[idx])?;
                    tape.reshape(r, &[d])?
                }
                TokenRef::Subword(ids) => {
                    let gathered = tape.gather(vars.buckets, &ids)?;
                    tape.mean_rows(gathered)?
                }
            };
            rows.push(row);
        }
        tape.stack_rows(&rows)
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<F>)> {
        vec![
            (format!("{prefix}.vectors"), &mut self.vectors),
            (format!("{prefix}.buckets"), &mut self.subword_buckets),
        ]
    }
}

/// Tape handles for a trainable embedding table.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingVars {
    pub vectors: Var,
    pub buckets: Var,
}

impl EmbeddingVars {
    pub fn ordered(&self, prefix: &str) -> Vec<(String, Var)> {
        vec![
            (format!("{prefix}.vectors"), self.vectors),
            (format!("{prefix}.buckets"), self.buckets),
        ]
    }
}

/// Frozen mean of the curated hashtags' hidden representations, the target
/// of task-level attention.
#[derive(Debug, Clone)]
pub struct AnchorVector<F: Scalar> {
    value: Tensor<F>,
    source_hashtags: Vec<String>,
}

impl<F: Scalar> AnchorVector<F> {
    pub fn value(&self) -> &Tensor<F> {
        &self.value
    }

    pub fn source_hashtags(&self) -> &[String] {
        &self.source_hashtags
    }

    pub fn from_parts(value: Tensor<F>, source_hashtags: Vec<String>) -> Self {
        AnchorVector { value, source_hashtags }
    }
}

/// Normalize and embed each curated hashtag, push it through the hashtag
/// branch's dense+tanh layer, and average. The snapshot is taken once at
/// model initialization and never recomputed.
pub fn build_anchor<F: Scalar>(
    hashtags: &[String],
    table: &EmbeddingTable<F>,
    dense_w: &Tensor<F>, // [d x d']
    dense_b: &Tensor<F>, // [d']
) -> Result<AnchorVector<F>> {
    if hashtags.is_empty() {
        return Err(Error::Config("anchor hashtag list is empty".into()));
    }
    let (d, dh) = (dense_w.shape()[0], dense_w.shape()[1]);
    if table.dim() != d || dense_b.shape() != [dh] {
        return Err(Error::shape(
            "build_anchor",
            format!("embed dim {}, dense {:?}, bias {:?}", table.dim(), dense_w.shape(), dense_b.shape()),
        ));
    }
    let mut normalized = Vec::with_capacity(hashtags.len());
    let mut acc = vec![F::zero(); dh];
    for tag in hashtags {
        let norm = normalize_hashtag(tag)?;
        let emb = table.embed_word(&norm);
        for j in 0..dh {
            let mut s = dense_b.data()[j];
            for i in 0..d {
                s += emb.data()[i] * dense_w.data()[i * dh + j];
            }
            acc[j] += s.tanh();
        }
        normalized.push(norm);
    }
    let count = F::from_f64(normalized.len() as f64);
    for v in acc.iter_mut() {
        *v /= count;
    }
    Ok(AnchorVector { value: Tensor::from_vec(acc), source_hashtags: normalized })
}
