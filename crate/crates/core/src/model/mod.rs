//! Compact bidirectional transformer encoder with a masked-language-model head.
//!
//! Embeddings (token + position + type) are summed and layer-normalized, then
//! passed through post-layer-norm blocks: multi-head self-attention with a
//! padding mask, residual, layer norm, GELU feed-forward, residual, layer
//! norm. The MLM head is a dense + GELU + layer-norm transform followed by a
//! projection tied to the token embedding table.
//!
//! Parameters are stored as `f32`; every forward and backward computation
//! widens them to `f64`.

mod adam;
mod checkpoint;
pub(crate) mod encoder;
pub(crate) mod ops;
mod params;
mod pretrain;

pub use adam::{adam_step, AdamConfig, AdamState};
pub(crate) use checkpoint::check_fingerprint;
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint_file, write_checkpoint_file,
    CheckpointHeader, EncoderCheckpoint, TensorEntry, TrainingMeta, CHECKPOINT_FORMAT,
};
pub(crate) use params::init_tensors;
pub use params::{init_model, Gradients, ModelConfig, ParamSet, Tensor, TensorFamily};
pub use pretrain::{
    learning_rate, pretrain, pretrain_from, smoothed, LogRecord, PretrainOutcome, PretrainSchedule,
    SMOOTHING_WINDOW,
};

use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;

use crate::mlm::{MaskedBatch, IGNORE};
use crate::rng::{child_rng, streams};
use crate::{Error, Result};
use encoder::{
    effective_len, encoder_backward, encoder_forward, mat_vec_mut, two_mut, Dropout, EncoderIndex,
    Weights,
};
use ops::{
    gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, log_softmax_row,
};

/// Whether dropout is active. Training mode carries the seed for the
/// dropout masks; sequence `i` uses a stream derived from `(seed, i)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct MlmOutput {
    /// `(batch, max_len, vocab_size)`.
    pub logits: Array3<f64>,
    /// Mean cross-entropy over labeled positions; `None` when nothing is labeled.
    pub loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LossAndGradients {
    pub loss: f64,
    pub num_labeled: usize,
    pub gradients: Gradients,
}

struct MlmIndex {
    t_w: usize,
    t_b: usize,
    ln_g: usize,
    ln_b: usize,
    bias: usize,
}

impl MlmIndex {
    fn resolve(params: &ParamSet) -> Result<Self> {
        Ok(Self {
            t_w: params.index_of("mlm.transform.weight")?,
            t_b: params.index_of("mlm.transform.bias")?,
            ln_g: params.index_of("mlm.norm.gamma")?,
            ln_b: params.index_of("mlm.norm.beta")?,
            bias: params.index_of("mlm.output_bias")?,
        })
    }
}

pub(crate) fn check_batch(cfg: &ModelConfig, batch: &MaskedBatch) -> Result<()> {
    batch.validate()?;
    if batch.max_len() > cfg.max_positions {
        return Err(Error::Shape(format!(
            "batch max_len {} exceeds max_positions {}",
            batch.max_len(),
            cfg.max_positions
        )));
    }
    for s in &batch.inputs {
        if let Some(&id) = s.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::Shape(format!(
                "token id {id} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        if let Some(&t) = s
            .type_ids
            .iter()
            .find(|&&t| t as usize >= cfg.type_vocab_size)
        {
            return Err(Error::Shape(format!(
                "type id {t} outside {} types",
                cfg.type_vocab_size
            )));
        }
        if s.attention_mask.iter().all(|&m| m == 0) && !s.is_empty() {
            return Err(Error::Shape("sequence with no attended positions".into()));
        }
    }
    Ok(())
}

pub(crate) fn check_params(
    cfg: &ModelConfig,
    params: &ParamSet,
    manifest: &[(String, Vec<usize>)],
) -> Result<()> {
    cfg.validate()?;
    params.check_manifest(manifest)
}

struct HeadCache {
    pre_act: Array2<f64>,
    ln: ops::LayerNormCache,
    z: Array2<f64>,
}

fn mlm_head_forward(
    w: &Weights,
    idx: &MlmIndex,
    word: usize,
    eps: f64,
    h: &Array2<f64>,
) -> (Array2<f64>, HeadCache) {
    let pre_act = linear(h, w.m(idx.t_w), w.v(idx.t_b));
    let act = pre_act.mapv(gelu);
    let (z, ln) = layer_norm(&act, w.v(idx.ln_g), w.v(idx.ln_b), eps);
    let mut logits = z.dot(&w.m(word).t());
    logits += &w.v(idx.bias);
    (logits, HeadCache { pre_act, ln, z })
}

fn mlm_head_backward(
    w: &Weights,
    idx: &MlmIndex,
    word: usize,
    h: &Array2<f64>,
    cache: &HeadCache,
    dlogits: &Array2<f64>,
    g: &mut Weights,
) -> Array2<f64> {
    {
        let mut dword = g.m_mut(word);
        dword.scaled_add(1.0, &dlogits.t().dot(&cache.z));
    }
    {
        let mut dbias = g.v_mut(idx.bias);
        dbias += &dlogits.sum_axis(Axis(0));
    }
    let dz = dlogits.dot(&w.m(word));
    let (dg, db) = two_mut(g, idx.ln_g, idx.ln_b);
    let dact = layer_norm_backward(&dz, w.v(idx.ln_g), &cache.ln, dg, db);
    let dpre = &dact * &cache.pre_act.mapv(gelu_grad);
    let (dw, db) = mat_vec_mut(g, idx.t_w, idx.t_b);
    linear_backward(h, w.m(idx.t_w), &dpre, dw, db)
}

pub(crate) fn valid_keys(mask: &[u8]) -> Vec<bool> {
    mask.iter().map(|&m| m == 1).collect()
}

/// Full-length forward pass: logits for every position and the mean
/// cross-entropy over labeled positions.
pub fn forward_mlm(
    cfg: &ModelConfig,
    params: &ParamSet,
    batch: &MaskedBatch,
    mode: Mode,
) -> Result<MlmOutput> {
    check_params(cfg, params, &cfg.mlm_manifest())?;
    check_batch(cfg, batch)?;
    let w = Weights::from_params(params);
    let eidx = EncoderIndex::resolve(params, cfg)?;
    let midx = MlmIndex::resolve(params)?;
    let per_seq: Vec<(Array2<f64>, f64, usize)> = batch
        .inputs
        .par_iter()
        .zip(&batch.labels)
        .enumerate()
        .map(|(i, (seq, labels))| {
            let mut rng = match mode {
                Mode::Train { seed } => Some(child_rng(seed, streams::DROPOUT, i as u64)),
                Mode::Eval => None,
            };
            let dropout = rng.as_mut().map(|rng| Dropout {
                p: cfg.dropout_prob,
                rng,
            });
            let (h, _) = encoder_forward(
                &w,
                &eidx,
                cfg,
                &seq.ids,
                &seq.type_ids,
                &valid_keys(&seq.attention_mask),
                dropout,
            );
            let (logits, _) = mlm_head_forward(&w, &midx, eidx.word, cfg.layer_norm_eps, &h);
            let mut loss = 0.0;
            let mut count = 0;
            for (p, &label) in labels.iter().enumerate() {
                if label != IGNORE {
                    loss -= log_softmax_row(logits.row(p))[label as usize];
                    count += 1;
                }
            }
            (logits, loss, count)
        })
        .collect();
    let (b, n, v) = (batch.inputs.len(), batch.max_len(), cfg.vocab_size);
    let mut logits = Array3::zeros((b, n, v));
    let mut total = 0.0;
    let mut count = 0;
    for (i, (l, loss, c)) in per_seq.into_iter().enumerate() {
        logits.index_axis_mut(Axis(0), i).assign(&l);
        total += loss;
        count += c;
    }
    let loss = (count > 0).then(|| total / count as f64);
    Ok(MlmOutput { logits, loss })
}

/// Exact gradients of the mean MLM loss. Returns `Ok(None)` when the batch
/// has no labeled positions (the loss is undefined and the batch is skipped).
pub fn compute_gradients(
    cfg: &ModelConfig,
    params: &ParamSet,
    batch: &MaskedBatch,
    mode: Mode,
) -> Result<Option<LossAndGradients>> {
    check_params(cfg, params, &cfg.mlm_manifest())?;
    check_batch(cfg, batch)?;
    let num_labeled = batch.num_labeled();
    if num_labeled == 0 {
        return Ok(None);
    }
    let w = Weights::from_params(params);
    let eidx = EncoderIndex::resolve(params, cfg)?;
    let midx = MlmIndex::resolve(params)?;
    let inv_n = 1.0 / num_labeled as f64;

    let per_seq: Vec<(f64, Weights)> = batch
        .inputs
        .par_iter()
        .zip(&batch.labels)
        .enumerate()
        .map(|(i, (seq, labels))| {
            let mut g = w.zeros_like();
            let positions: Vec<usize> = (0..seq.len()).filter(|&p| labels[p] != IGNORE).collect();
            if positions.is_empty() {
                return (0.0, g);
            }
            let n =
                effective_len(&seq.attention_mask).max(positions.iter().max().map_or(0, |m| m + 1));
            let mut rng = match mode {
                Mode::Train { seed } => Some(child_rng(seed, streams::DROPOUT, i as u64)),
                Mode::Eval => None,
            };
            let dropout = rng.as_mut().map(|rng| Dropout {
                p: cfg.dropout_prob,
                rng,
            });
            let (h, cache) = encoder_forward(
                &w,
                &eidx,
                cfg,
                &seq.ids[..n],
                &seq.type_ids[..n],
                &valid_keys(&seq.attention_mask[..n]),
                dropout,
            );
            let hsel = encoder::rows(&h, &positions);
            let (logits, hc) = mlm_head_forward(&w, &midx, eidx.word, cfg.layer_norm_eps, &hsel);
            let mut loss = 0.0;
            let mut dlogits = Array2::zeros(logits.raw_dim());
            for (r, &p) in positions.iter().enumerate() {
                let logp = log_softmax_row(logits.row(r));
                let y = labels[p] as usize;
                loss -= logp[y];
                let mut drow = dlogits.row_mut(r);
                drow.assign(&logp.mapv(|x| x.exp() * inv_n));
                drow[y] -= inv_n;
            }
            let dhsel = mlm_head_backward(&w, &midx, eidx.word, &hsel, &hc, &dlogits, &mut g);
            let mut dh = encoder::zeros_hidden(n, cfg.hidden_dim);
            for (r, &p) in positions.iter().enumerate() {
                let mut row = dh.row_mut(p);
                row += &dhsel.row(r);
            }
            encoder_backward(&w, &eidx, cfg, &cache, dh, &mut g);
            (loss, g)
        })
        .collect();

    let mut total = 0.0;
    let mut acc = w.zeros_like();
    for (loss, g) in &per_seq {
        total += loss;
        acc.add_assign(g);
    }
    let loss = total * inv_n;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            tensor: "loss".into(),
        });
    }
    let gradients = acc.into_gradients(params);
    gradients.check_finite()?;
    Ok(Some(LossAndGradients {
        loss,
        num_labeled,
        gradients,
    }))
}

/// Final hidden states of one sequence (eval mode, full length).
pub fn encode_hidden(
    cfg: &ModelConfig,
    params: &ParamSet,
    seq: &crate::mlm::InputSequence,
) -> Result<Array2<f64>> {
    let batch = MaskedBatch::unlabeled(vec![seq.clone()]);
    check_batch(cfg, &batch)?;
    let w = Weights::from_params(params);
    let eidx = EncoderIndex::resolve(params, cfg)?;
    let (h, _) = encoder_forward(
        &w,
        &eidx,
        cfg,
        &seq.ids,
        &seq.type_ids,
        &valid_keys(&seq.attention_mask),
        None,
    );
    Ok(h)
}

/// Attention probabilities per layer and head for one sequence (eval mode).
pub fn attention_probabilities(
    cfg: &ModelConfig,
    params: &ParamSet,
    seq: &crate::mlm::InputSequence,
) -> Result<Vec<Vec<Array2<f64>>>> {
    let batch = MaskedBatch::unlabeled(vec![seq.clone()]);
    check_batch(cfg, &batch)?;
    let w = Weights::from_params(params);
    let eidx = EncoderIndex::resolve(params, cfg)?;
    let (_, cache) = encoder_forward(
        &w,
        &eidx,
        cfg,
        &seq.ids,
        &seq.type_ids,
        &valid_keys(&seq.attention_mask),
        None,
    );
    Ok(cache.attention_probs())
}
