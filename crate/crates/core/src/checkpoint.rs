//! Model checkpoints: a directory of MMT1 tensors plus a JSON manifest
//! carrying the configuration, vocabulary hash, and anchor hashtags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embeddings::{AnchorVector, Vocab};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ThreeBranchModel};
use crate::tensor::io::{read_mmt1, write_mmt1};
use crate::tensor::Scalar;

const FORMAT: &str = "avdet-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ModelConfig,
    vocab_hash: String,
    anchor_hashtags: Vec<String>,
    params: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_meta: Option<serde_json::Value>,
}

/// Write `manifest.json`, `vocab.txt`, `anchor.mmt`, and one
/// `params/<name>.mmt` per persistent tensor.
pub fn save_checkpoint<F: Scalar>(
    model: &ThreeBranchModel<F>,
    dir: impl AsRef<Path>,
    train_meta: Option<serde_json::Value>,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("params"))?;

    let mut snapshot = model.clone();
    let mut names = Vec::new();
    for (name, tensor) in snapshot.persistent_mut() {
        write_mmt1(dir.join("params").join(format!("{name}.mmt")), tensor)?;
        names.push(name);
    }
    write_mmt1(dir.join("anchor.mmt"), model.anchor.value())?;
    model.table.vocab.save(dir.join("vocab.txt"))?;

    let manifest = Manifest {
        format: FORMAT.to_string(),
        config: model.config.clone(),
        vocab_hash: format!("{:016x}", model.table.vocab.content_hash()),
        anchor_hashtags: model.anchor.source_hashtags().to_vec(),
        params: names,
        train_meta,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Rebuild a model from a checkpoint directory. The structure is recreated
/// from the stored config and vocabulary, then every tensor is overwritten
/// from disk, including the frozen anchor.
pub fn load_checkpoint<F: Scalar>(dir: impl AsRef<Path>) -> Result<ThreeBranchModel<F>> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::Data(format!(
            "unsupported checkpoint format {:?} (expected {FORMAT:?})",
            manifest.format
        )));
    }
    let vocab = Vocab::load(dir.join("vocab.txt"))?;
    let got_hash = format!("{:016x}", vocab.content_hash());
    if got_hash != manifest.vocab_hash {
        return Err(Error::Data(format!(
            "vocabulary hash mismatch: manifest {} vs file {}",
            manifest.vocab_hash, got_hash
        )));
    }

    let mut model = ThreeBranchModel::<F>::init(manifest.config, vocab)?;
    {
        let persistent = model.persistent_mut();
        let names: Vec<&String> = persistent.iter().map(|(n, _)| n).collect();
        if names.len() != manifest.params.len()
            || names.iter().zip(&manifest.params).any(|(a, b)| **a != *b)
        {
            return Err(Error::Data(
                "checkpoint parameter list does not match the stored configuration".into(),
            ));
        }
    }
    for (name, tensor) in model.persistent_mut() {
        let loaded: crate::tensor::Tensor<F> = read_mmt1(dir.join("params").join(format!("{name}.mmt")))?;
        if loaded.shape() != tensor.shape() {
            return Err(Error::Data(format!(
                "parameter {name}: stored shape {:?} vs expected {:?}",
                loaded.shape(),
                tensor.shape()
            )));
        }
        *tensor = loaded;
    }

    // the anchor is a frozen snapshot, not a derived quantity
    let anchor_value = read_mmt1(dir.join("anchor.mmt"))?;
    model.anchor = AnchorVector::from_parts(anchor_value, manifest.anchor_hashtags);
    if let Some(h) = &mut model.hashtag {
        h.seta.anchor = Some(model.anchor.value().clone());
    }
    if let Some(t) = &mut model.text {
        t.seta.anchor = Some(model.anchor.value().clone());
    }
    Ok(model)
}

/// Metadata stored alongside a trained checkpoint so evaluation can
/// reconstruct the exact data split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMeta {
    pub train: crate::train::TrainConfig,
    pub data_path: String,
    pub split_ratios: (u32, u32, u32),
    pub split_seed: u64,
}

pub fn read_train_meta(dir: impl AsRef<Path>) -> Result<Option<TrainMeta>> {
    let text = std::fs::read_to_string(dir.as_ref().join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    Ok(manifest.train_meta.and_then(|v| serde_json::from_value(v).ok()))
}
