//! Checkpoint files.
//!
//! Layout: an 8-byte little-endian header length, a UTF-8 JSON header, then
//! every tensor's data as little-endian `f32` in manifest order with no
//! padding. The header records the model config, the tensor manifest (names
//! and shapes), the vocabulary fingerprint, training metadata and, for
//! fine-tuned models, the task description.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ModelConfig, ParamSet, Tensor};
use crate::tokenizer::SubwordVocabulary;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "lrlm-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub steps: usize,
    pub seed: u64,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    /// `"encoder"` for pretrained checkpoints, `"task"` for fine-tuned models.
    pub kind: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub vocab_fingerprint: String,
    pub meta: TrainingMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<serde_json::Value>,
}

impl CheckpointHeader {
    pub fn new(
        kind: &str,
        config: ModelConfig,
        params: &ParamSet,
        vocab_fingerprint: String,
        meta: TrainingMeta,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: VERSION,
            kind: kind.into(),
            config,
            tensors: params
                .tensors()
                .iter()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
            vocab_fingerprint,
            meta,
            task: None,
        }
    }
}

/// Serialize a header and its tensors to bytes.
pub fn encode_checkpoint(header: &CheckpointHeader, params: &ParamSet) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(8 + json.len() + params.numel() * 4);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, ParamSet)> {
    let fmt = |m: &str| Error::CheckpointFormat(m.into());
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .ok_or_else(|| fmt("file shorter than its length prefix"))?
        .try_into()
        .expect("8 bytes");
    let header_len = usize::try_from(u64::from_le_bytes(len_bytes))
        .map_err(|_| fmt("header length overflows"))?;
    let header_end = 8usize
        .checked_add(header_len)
        .ok_or_else(|| fmt("header length overflows"))?;
    let header_bytes = bytes
        .get(8..header_end)
        .ok_or_else(|| fmt("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::CheckpointFormat(format!("header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT || header.version != VERSION {
        return Err(Error::CheckpointFormat(format!(
            "unsupported format {} version {}",
            header.format, header.version
        )));
    }
    let blob = &bytes[header_end..];
    let numel: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    if blob.len() != numel * 4 {
        return Err(Error::CheckpointFormat(format!(
            "tensor blob has {} bytes, manifest requires {}",
            blob.len(),
            numel * 4
        )));
    }
    let mut floats = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let tensors = header
        .tensors
        .iter()
        .map(|e| Tensor {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data: floats.by_ref().take(e.shape.iter().product()).collect(),
        })
        .collect();
    let params = ParamSet::new(tensors).map_err(|e| Error::CheckpointFormat(e.to_string()))?;
    Ok((header, params))
}

pub fn write_checkpoint_file(
    path: &Path,
    header: &CheckpointHeader,
    params: &ParamSet,
) -> Result<()> {
    let bytes = encode_checkpoint(header, params)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint_file(path: &Path) -> Result<(CheckpointHeader, ParamSet)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

pub(crate) fn check_fingerprint(expected: &str, vocab: &SubwordVocabulary) -> Result<()> {
    let actual = vocab.fingerprint();
    if actual != expected {
        return Err(Error::FingerprintMismatch {
            expected: expected.to_string(),
            actual,
        });
    }
    Ok(())
}

/// A pretrained encoder with its MLM head, bound to one vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderCheckpoint {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub vocab_fingerprint: String,
    pub meta: TrainingMeta,
}

impl EncoderCheckpoint {
    pub fn new(
        config: ModelConfig,
        params: ParamSet,
        vocab_fingerprint: String,
        meta: TrainingMeta,
    ) -> Result<Self> {
        config.validate()?;
        params.check_manifest(&config.mlm_manifest())?;
        Ok(Self {
            config,
            params,
            vocab_fingerprint,
            meta,
        })
    }

    fn header(&self) -> CheckpointHeader {
        CheckpointHeader::new(
            "encoder",
            self.config.clone(),
            &self.params,
            self.vocab_fingerprint.clone(),
            self.meta.clone(),
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode_checkpoint(&self.header(), &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, params) = decode_checkpoint(bytes)?;
        if h.kind != "encoder" {
            return Err(Error::CheckpointFormat(format!(
                "expected an encoder checkpoint, found {}",
                h.kind
            )));
        }
        Self::new(h.config, params, h.vocab_fingerprint, h.meta)
            .map_err(|e| Error::CheckpointFormat(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint_file(path, &self.header(), &self.params)
    }

    /// Load without checking the vocabulary binding.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Load and refuse unless `vocab` is the vocabulary the checkpoint was
    /// trained with.
    pub fn load_with_vocab(path: &Path, vocab: &SubwordVocabulary) -> Result<Self> {
        let ckpt = Self::load(path)?;
        ckpt.check_vocab(vocab)?;
        Ok(ckpt)
    }

    pub fn check_vocab(&self, vocab: &SubwordVocabulary) -> Result<()> {
        check_fingerprint(&self.vocab_fingerprint, vocab)?;
        if vocab.len() != self.config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} pieces, model expects {}",
                vocab.len(),
                self.config.vocab_size
            )));
        }
        Ok(())
    }
}
