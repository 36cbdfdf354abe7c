//! Fixed-length model inputs and masked-language-model corruption.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{child_rng, streams};
use crate::tokenizer::{is_special, CLS_ID, MASK_ID, NUM_SPECIALS, PAD_ID, SEP_ID};
use crate::{Error, Result};

/// Label value for positions that do not contribute to the loss.
pub const IGNORE: i32 = -100;

pub const DEFAULT_MAX_LEN: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub type_ids: Vec<u8>,
}

impl InputSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of attended positions (real content incl. `[CLS]`/`[SEP]`).
    pub fn attended(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// `[CLS] tokens.. [SEP] [PAD]..` padded or truncated to `max_len`.
    pub fn from_tokens(tokens: &[u32], max_len: usize) -> Result<Self> {
        if max_len < 3 {
            return Err(Error::Mlm(format!(
                "max_len must be at least 3, got {max_len}"
            )));
        }
        let keep = tokens.len().min(max_len - 2);
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS_ID);
        ids.extend_from_slice(&tokens[..keep]);
        ids.push(SEP_ID);
        let real = ids.len();
        ids.resize(max_len, PAD_ID);
        let mut attention_mask = vec![1u8; real];
        attention_mask.resize(max_len, 0);
        Ok(Self {
            ids,
            attention_mask,
            type_ids: vec![0; max_len],
        })
    }
}

pub fn build_sequences(sentences: &[Vec<u32>], max_len: usize) -> Result<Vec<InputSequence>> {
    if max_len < 3 {
        return Err(Error::Mlm(format!(
            "max_len must be at least 3, got {max_len}"
        )));
    }
    sentences
        .par_iter()
        .map(|s| InputSequence::from_tokens(s, max_len))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskingPolicy {
    pub select_prob: f64,
    pub mask_frac: f64,
    pub random_frac: f64,
    pub keep_frac: f64,
    pub seed: u64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        Self {
            select_prob: 0.15,
            mask_frac: 0.8,
            random_frac: 0.1,
            keep_frac: 0.1,
            seed: 42,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        let fracs = [
            self.select_prob,
            self.mask_frac,
            self.random_frac,
            self.keep_frac,
        ];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Mlm(
                "masking probabilities must lie in [0, 1]".into(),
            ));
        }
        let sum = self.mask_frac + self.random_frac + self.keep_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Mlm(format!(
                "mask/random/keep fractions sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

/// How a selected position was corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedBatch {
    pub inputs: Vec<InputSequence>,
    /// Original id at selected positions, [`IGNORE`] elsewhere.
    pub labels: Vec<Vec<i32>>,
}

impl MaskedBatch {
    /// A batch with no masking, for inference.
    pub fn unlabeled(inputs: Vec<InputSequence>) -> Self {
        let labels = inputs.iter().map(|s| vec![IGNORE; s.len()]).collect();
        Self { inputs, labels }
    }

    pub fn max_len(&self) -> usize {
        self.inputs.first().map_or(0, InputSequence::len)
    }

    pub fn num_labeled(&self) -> usize {
        self.labels
            .iter()
            .flatten()
            .filter(|&&l| l != IGNORE)
            .count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.inputs.len() {
            return Err(Error::Mlm("labels and inputs differ in batch size".into()));
        }
        let len = self.max_len();
        for (s, l) in self.inputs.iter().zip(&self.labels) {
            if s.ids.len() != len
                || s.attention_mask.len() != len
                || s.type_ids.len() != len
                || l.len() != len
            {
                return Err(Error::Mlm("sequences in a batch must share max_len".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let b: Self = serde_json::from_str(s)?;
        b.validate()?;
        Ok(b)
    }
}

/// Outcome of masking one sequence: corrupted copy, labels, and the
/// corruption applied at each selected position.
pub fn mask_sequence(
    seq: &InputSequence,
    policy: &MaskingPolicy,
    vocab_size: usize,
    index: u64,
) -> (InputSequence, Vec<i32>, Vec<(usize, Corruption)>) {
    let mut rng = child_rng(policy.seed, streams::MASKING, index);
    let mut out = seq.clone();
    let mut labels = vec![IGNORE; seq.len()];
    let mut applied = Vec::new();
    for p in 0..seq.len() {
        let id = seq.ids[p];
        if seq.attention_mask[p] == 0 || is_special(id) {
            continue;
        }
        if rng.random::<f64>() >= policy.select_prob {
            continue;
        }
        labels[p] = id as i32;
        let r: f64 = rng.random();
        let kind = if r < policy.mask_frac {
            out.ids[p] = MASK_ID;
            Corruption::Mask
        } else if r < policy.mask_frac + policy.random_frac {
            out.ids[p] = rng.random_range(NUM_SPECIALS..vocab_size as u32);
            Corruption::Random
        } else {
            Corruption::Keep
        };
        applied.push((p, kind));
    }
    (out, labels, applied)
}

/// Apply masking to every sequence. Sequence `i` draws from a stream derived
/// from `(policy.seed, i)`, so the result is independent of worker count.
pub fn apply_masking(
    seqs: &[InputSequence],
    policy: &MaskingPolicy,
    vocab_size: usize,
) -> Result<MaskedBatch> {
    apply_masking_traced(seqs, policy, vocab_size).map(|(b, _)| b)
}

/// Per sequence, the corrupted positions and what was done to each.
pub type CorruptionTrace = Vec<Vec<(usize, Corruption)>>;

pub fn apply_masking_traced(
    seqs: &[InputSequence],
    policy: &MaskingPolicy,
    vocab_size: usize,
) -> Result<(MaskedBatch, CorruptionTrace)> {
    policy.validate()?;
    if vocab_size <= NUM_SPECIALS as usize {
        return Err(Error::Mlm("vocabulary has no non-special tokens".into()));
    }
    let results: Vec<_> = seqs
        .par_iter()
        .enumerate()
        .map(|(i, s)| mask_sequence(s, policy, vocab_size, i as u64))
        .collect();
    let mut inputs = Vec::with_capacity(results.len());
    let mut labels = Vec::with_capacity(results.len());
    let mut trace = Vec::with_capacity(results.len());
    for (s, l, t) in results {
        inputs.push(s);
        labels.push(l);
        trace.push(t);
    }
    Ok((MaskedBatch { inputs, labels }, trace))
}
