//! Synthetic multimodal datasets for desk-scale experiments.
//!
//! Two constructions:
//!
//! * `uni` — every modality independently carries a weak copy of the label
//!   (keyword in the caption, cue hashtag, stripe orientation), each flipped
//!   with a configurable noise probability.
//! * `xor` — the label is the XOR of an image cue (vertical vs horizontal
//!   stripes) and a text cue (a sentinel token), while hashtags carry noisy
//!   copies of both cues with exactly one of the two flipped half the time.
//!   That coupling leaves the hashtag pair with zero information about the
//!   label on its own, while each cue keeps 0.75 reliability for
//!   cross-modal pairing. No single modality beats ~60% accuracy but the
//!   image+text combination decides the label exactly.

use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Dataset, Post};
use crate::error::{Error, Result};
use crate::tensor::{io::write_mmt1, Tensor};

/// 64-word caption vocabulary.
pub const WORDS: [&str; 64] = [
    "the", "a", "and", "to", "of", "in", "is", "it", "my", "we", "you", "for", "on", "this",
    "that", "with", "our", "kids", "child", "children", "health", "healthy", "doctor", "doctors",
    "nurse", "study", "studies", "science", "research", "truth", "facts", "read", "know", "learn",
    "think", "question", "choice", "freedom", "body", "immune", "system", "natural", "remedy",
    "safe", "safety", "danger", "dangerous", "risk", "harm", "injury", "dose", "shot", "shots",
    "schedule", "mandate", "mandatory", "exempt", "protect", "trust", "media", "news", "story",
    "share", "please",
];

/// 16 hashtags: eight single vocabulary words plus eight glued pairs that
/// exercise the subword out-of-vocabulary path.
pub const HASHTAGS: [&str; 16] = [
    "health",
    "truth",
    "freedom",
    "science",
    "kids",
    "natural",
    "safety",
    "research",
    "healthykids",
    "naturalremedy",
    "bodyfreedom",
    "trustscience",
    "protectkids",
    "questionmedia",
    "immunesystem",
    "dangerousdose",
];

/// Sentinel token whose presence is the xor text cue.
pub const XOR_TEXT_CUE: &str = "mandate";
/// Keyword carrying the uni caption cue.
pub const UNI_KEYWORD: &str = "danger";

/// Hashtags encoding the xor image cue (v = 1, v = 0).
pub const XOR_IMAGE_TAGS: (&str, &str) = ("bodyfreedom", "trustscience");
/// Hashtags encoding the xor text cue (t = 1, t = 0).
pub const XOR_TEXT_TAGS: (&str, &str) = ("protectkids", "questionmedia");
/// Hashtags encoding the uni label cue (label 1, label 0).
pub const UNI_TAGS: (&str, &str) = ("dangerousdose", "healthykids");

/// Probability that exactly one of the two hashtag cues is flipped. Each
/// cue ends up 0.75-reliable, yet the pair is jointly independent of the
/// label.
const XOR_TAG_FLIP_ONE: f64 = 0.5;
/// Probability the xor sentinel lands in the caption rather than OCR text.
const XOR_CUE_IN_CAPTION: f64 = 0.7;

pub const IMAGE_SIDE: usize = 32;
const STRIPE_PERIOD: usize = 8;
const STRIPE_HI: f32 = 0.8;
const STRIPE_LO: f32 = 0.2;
const PIXEL_NOISE_SIGMA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SynthSpec {
    Uni { noise: f64 },
    Xor,
}

impl SynthSpec {
    pub fn parse(name: &str, noise: Option<f64>) -> Result<Self> {
        match name {
            "uni" => {
                let noise = noise.unwrap_or(0.2);
                if !(0.0..0.5).contains(&noise) {
                    return Err(Error::Param(format!("uni noise {noise} outside [0, 0.5)")));
                }
                Ok(SynthSpec::Uni { noise })
            }
            "xor" => Ok(SynthSpec::Xor),
            other => Err(Error::Param(format!("unknown synthetic spec {other:?}"))),
        }
    }
}

/// Generated posts plus their images, aligned by index.
pub struct SynthOutput {
    pub dataset: Dataset,
    pub images: Vec<Tensor<f32>>,
}

/// 32x32x3 stripe pattern with Gaussian pixel noise, values clamped to
/// `[0, 1]`. Vertical stripes vary along x; horizontal ones along y.
fn stripe_image(vertical: bool, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let normal = Normal::new(0.0, PIXEL_NOISE_SIGMA).expect("valid sigma");
    let mut data = Vec::with_capacity(IMAGE_SIDE * IMAGE_SIDE * 3);
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let coord = if vertical { x } else { y };
            let base = if (coord / (STRIPE_PERIOD / 2)) % 2 == 0 { STRIPE_HI } else { STRIPE_LO };
            for _ in 0..3 {
                let v = base + normal.sample(rng) as f32;
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![IMAGE_SIDE, IMAGE_SIDE, 3], data).expect("stripe shape")
}

fn filler_words(rng: &mut ChaCha8Rng, count: usize, exclude: &[&str]) -> Vec<String> {
    let pool: Vec<&str> = WORDS.iter().copied().filter(|w| !exclude.contains(w)).collect();
    (0..count).map(|_| pool.choose(rng).unwrap().to_string()).collect()
}

fn flip(rng: &mut ChaCha8Rng, value: bool, p_flip: f64) -> bool {
    if rng.random_range(0.0..1.0) < p_flip {
        !value
    } else {
        value
    }
}

/// Deterministic in (n, seed, spec). `n` must be even and at least 8;
/// labels are exactly balanced.
pub fn gen_synthetic(n: usize, seed: u64, spec: SynthSpec) -> Result<SynthOutput> {
    if n % 2 != 0 {
        return Err(Error::Param(format!("synthetic size {n} must be even")));
    }
    if n < 8 {
        return Err(Error::Param(format!("synthetic size {n} must be at least 8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<u8> = std::iter::repeat_n(1u8, n / 2).chain(std::iter::repeat_n(0u8, n / 2)).collect();
    labels.shuffle(&mut rng);

    let single_tags = &HASHTAGS[..8];
    let mut posts = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        let id = format!("s{i:05}");
        let (caption_words, ocr_words, mut tags, vertical) = match spec {
            SynthSpec::Uni { noise } => {
                let keyword_on = flip(&mut rng, label == 1, noise);
                let tag_on = flip(&mut rng, label == 1, noise);
                let stripe_on = flip(&mut rng, label == 1, noise);

                let caption_len = rng.random_range(4..=9);
                let mut caption = filler_words(&mut rng, caption_len, &[UNI_KEYWORD]);
                if keyword_on {
                    let at = rng.random_range(0..=caption.len());
                    caption.insert(at, UNI_KEYWORD.to_string());
                }
                let ocr = if rng.random_range(0.0..1.0) < 0.5 {
                    Vec::new()
                } else {
                    let k = rng.random_range(1..=4);
                    filler_words(&mut rng, k, &[UNI_KEYWORD])
                };
                let cue_tag = if tag_on { UNI_TAGS.0 } else { UNI_TAGS.1 };
                (caption, ocr, vec![cue_tag.to_string()], stripe_on)
            }
            SynthSpec::Xor => {
                let v = rng.random_range(0.0..1.0) < 0.5;
                let t = v != (label == 1);

                let caption_len = rng.random_range(4..=9);
                let mut caption = filler_words(&mut rng, caption_len, &[XOR_TEXT_CUE]);
                let mut ocr = if rng.random_range(0.0..1.0) < 0.5 {
                    Vec::new()
                } else {
                    let k = rng.random_range(1..=4);
                    filler_words(&mut rng, k, &[XOR_TEXT_CUE])
                };
                if t {
                    if rng.random_range(0.0..1.0) < XOR_CUE_IN_CAPTION {
                        let at = rng.random_range(0..=caption.len());
                        caption.insert(at, XOR_TEXT_CUE.to_string());
                    } else {
                        let at = rng.random_range(0..=ocr.len());
                        ocr.insert(at, XOR_TEXT_CUE.to_string());
                    }
                }

                let (mut v_noisy, mut t_noisy) = (v, t);
                if rng.random_range(0.0..1.0) < XOR_TAG_FLIP_ONE {
                    if rng.random_range(0.0..1.0) < 0.5 {
                        v_noisy = !v_noisy;
                    } else {
                        t_noisy = !t_noisy;
                    }
                }
                let tags = vec![
                    (if v_noisy { XOR_IMAGE_TAGS.0 } else { XOR_IMAGE_TAGS.1 }).to_string(),
                    (if t_noisy { XOR_TEXT_TAGS.0 } else { XOR_TEXT_TAGS.1 }).to_string(),
                ];
                (caption, ocr, tags, v)
            }
        };
        tags.push(single_tags.choose(&mut rng).unwrap().to_string());
        let image = stripe_image(vertical, &mut rng);

        posts.push(Post {
            id: id.clone(),
            caption: caption_words.join(" "),
            ocr_text: ocr_words.join(" "),
            hashtags: tags.iter().map(|t| format!("#{t}")).collect(),
            image: Some(format!("images/{id}.mmt")),
            label: Some(label),
            date: None,
        });
        images.push(image);
    }
    Ok(SynthOutput { dataset: Dataset::new(posts), images })
}

/// Write `data.jsonl` plus `images/*.mmt` under `dir`; returns the JSONL
/// path.
pub fn write_synthetic(out: &SynthOutput, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("images"))?;
    for (post, image) in out.dataset.posts.iter().zip(&out.images) {
        let rel = post.image.as_ref().expect("synthetic posts carry images");
        write_mmt1(dir.join(rel), image)?;
    }
    let jsonl = dir.join("data.jsonl");
    crate::data::save_jsonl(&out.dataset, &jsonl)?;
    Ok(jsonl)
}
