//! On-disk checkpoint directory:
//!
//! ```text
//! <dir>/manifest.json      backend id, vocabulary hash, model config, caller metadata
//! <dir>/vocab.json         ordered token list
//! <dir>/params.bin         all tensors, little-endian f64, concatenated
//! <dir>/params.index.json  [{name, offset, shape, dtype}], offset in bytes
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ParameterStore, Tensor};
use super::toy::{ToyConfig, ToySeq2Seq, BACKEND_ID};
use super::vocab::Vocabulary;
use super::{ModelError, TextToTextModel};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub backend: String,
    pub vocab_hash: String,
    pub model_config: ToyConfig,
    pub param_digest: String,
    /// Free-form metadata supplied by the caller (evaluation settings etc.).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub name: String,
    pub offset: u64,
    pub shape: Vec<usize>,
    pub dtype: String,
}

fn ck(e: impl std::fmt::Display) -> ModelError {
    ModelError::Checkpoint(e.to_string())
}

pub fn save_checkpoint(
    model: &ToySeq2Seq,
    dir: impl AsRef<Path>,
    metadata: serde_json::Value,
) -> Result<CheckpointManifest, ModelError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let params = model.parameters();
    let mut blob = Vec::with_capacity(params.num_scalars() * 8);
    let mut index = Vec::with_capacity(params.len());
    for (_, name, t) in params.iter() {
        index.push(IndexEntry {
            name: name.to_string(),
            offset: blob.len() as u64,
            shape: t.shape.clone(),
            dtype: "f64".into(),
        });
        for v in t.data.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        backend: BACKEND_ID.to_string(),
        vocab_hash: model.vocab().hash(),
        model_config: *model.config(),
        param_digest: params.digest(),
        metadata,
    };
    fs::write(dir.join("params.bin"), blob)?;
    fs::write(dir.join("params.index.json"), serde_json::to_vec_pretty(&index).map_err(ck)?)?;
    fs::write(dir.join("vocab.json"), serde_json::to_vec(model.vocab()).map_err(ck)?)?;
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest).map_err(ck)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CheckpointManifest, ModelError> {
    let bytes = fs::read(dir.as_ref().join("manifest.json"))?;
    serde_json::from_slice(&bytes).map_err(ck)
}

/// Load a toy checkpoint. When `expected_vocab_hash` is given (the hash of
/// the corpus vocabulary the caller will feed), a mismatch is rejected.
pub fn load_checkpoint(
    dir: impl AsRef<Path>,
    expected_vocab_hash: Option<&str>,
) -> Result<(ToySeq2Seq, CheckpointManifest), ModelError> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    if manifest.backend != BACKEND_ID {
        return Err(ModelError::UnsupportedBackend(manifest.backend));
    }
    if manifest.format_version != FORMAT_VERSION {
        return Err(ck(format!("unsupported format version {}", manifest.format_version)));
    }
    if let Some(expected) = expected_vocab_hash {
        if expected != manifest.vocab_hash {
            return Err(ModelError::VocabularyMismatch {
                checkpoint: manifest.vocab_hash,
                corpus: expected.to_string(),
            });
        }
    }
    let vocab: Vocabulary = serde_json::from_slice(&fs::read(dir.join("vocab.json"))?).map_err(ck)?;
    if vocab.hash() != manifest.vocab_hash {
        return Err(ck("vocab.json does not match the manifest hash"));
    }
    let index: Vec<IndexEntry> =
        serde_json::from_slice(&fs::read(dir.join("params.index.json"))?).map_err(ck)?;
    let blob = fs::read(dir.join("params.bin"))?;
    let mut store = ParameterStore::new();
    for entry in index {
        if entry.dtype != "f64" {
            return Err(ck(format!("unsupported dtype {} for {}", entry.dtype, entry.name)));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * 8;
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| ck(format!("tensor {} out of bounds", entry.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.insert(entry.name, Tensor::new(entry.shape, data));
    }
    let model = ToySeq2Seq::from_parts(manifest.model_config, vocab, store)?;
    if model.parameters().digest() != manifest.param_digest {
        return Err(ck("parameter digest mismatch"));
    }
    Ok((model, manifest))
}
