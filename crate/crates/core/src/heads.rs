//! Classification heads on a pretrained encoder.
//!
//! A [`TaskModel`] pools the final hidden state at the `[CLS]` position,
//! applies dropout and a linear layer to one logit per label. Binary and
//! multi-class tasks use a softmax with cross-entropy; multi-label tasks use
//! independent sigmoids with the mean per-label binary cross-entropy.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mlm::{build_sequences, InputSequence};
use crate::model::encoder::{
    effective_len, encoder_backward, encoder_forward, Dropout, EncoderCache, EncoderIndex, Weights,
};
use crate::model::ops::{dropout_mask, log_softmax_row, sigmoid};
use crate::model::{
    adam_step, check_fingerprint, decode_checkpoint, encode_checkpoint, init_tensors, valid_keys,
    AdamConfig, AdamState, CheckpointHeader, EncoderCheckpoint, ModelConfig, ParamSet, Tensor,
    TrainingMeta,
};
use crate::rng::{child_rng, derive_seed, streams, Rng};
use crate::tokenizer::SubwordVocabulary;
use crate::{Error, Result};

/// Stage-2 toxicity categories used as the default multi-label label set.
pub const TOXICITY_CATEGORIES: [&str; 6] = [
    "abuse",
    "obscene",
    "insult",
    "identity-hate",
    "severe-toxic",
    "threat",
];

pub const DEFAULT_THRESHOLD: f64 = 0.5;

const CLASSIFIER_WEIGHT: &str = "classifier.weight";
const CLASSIFIER_BIAS: &str = "classifier.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Binary,
    Multiclass,
    Multilabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub labels: Vec<String>,
    /// Per-label decision thresholds (multi-label only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub thresholds: Vec<f64>,
}

impl TaskSpec {
    pub fn binary(name: &str, negative_first: [&str; 2]) -> Self {
        Self {
            name: name.into(),
            kind: TaskKind::Binary,
            labels: negative_first.iter().map(|s| s.to_string()).collect(),
            thresholds: Vec::new(),
        }
    }

    pub fn multiclass<S: AsRef<str>>(name: &str, labels: &[S]) -> Self {
        Self {
            name: name.into(),
            kind: TaskKind::Multiclass,
            labels: labels.iter().map(|s| s.as_ref().to_string()).collect(),
            thresholds: Vec::new(),
        }
    }

    pub fn multilabel<S: AsRef<str>>(name: &str, labels: &[S]) -> Self {
        Self {
            name: name.into(),
            kind: TaskKind::Multilabel,
            labels: labels.iter().map(|s| s.as_ref().to_string()).collect(),
            thresholds: vec![DEFAULT_THRESHOLD; labels.len()],
        }
    }

    /// Multi-label toxicity categories with the default threshold.
    pub fn toxicity_categories() -> Self {
        Self::multilabel("toxicity-multilabel", &TOXICITY_CATEGORIES)
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() < 2 {
            return Err(Error::Task(format!(
                "task {} needs at least 2 labels",
                self.name
            )));
        }
        if self.kind == TaskKind::Binary && self.labels.len() != 2 {
            return Err(Error::Task(format!(
                "binary task {} must have exactly 2 labels",
                self.name
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.labels.iter().find(|l| !seen.insert(l.as_str())) {
            return Err(Error::Task(format!("duplicate label {dup}")));
        }
        match self.kind {
            TaskKind::Multilabel => {
                if self.thresholds.len() != self.labels.len() {
                    return Err(Error::Task(
                        "multi-label task needs one threshold per label".into(),
                    ));
                }
                if self.thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
                    return Err(Error::Task("thresholds must lie in (0, 1)".into()));
                }
            }
            _ if !self.thresholds.is_empty() => {
                return Err(Error::Task(
                    "thresholds apply to multi-label tasks only".into(),
                ));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Gold or predicted label(s) of one example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Label(String),
    Labels(Vec<String>),
}

/// One labeled text. In JSON a single-label example carries `"label"` and a
/// multi-label example carries `"labels"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawExample", into = "RawExample")]
pub struct LabeledExample {
    pub id: String,
    pub text: String,
    pub target: Target,
}

#[derive(Serialize, Deserialize)]
struct RawExample {
    id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
}

impl TryFrom<RawExample> for LabeledExample {
    type Error = String;

    fn try_from(raw: RawExample) -> std::result::Result<Self, String> {
        let target = match (raw.label, raw.labels) {
            (Some(l), None) => Target::Label(l),
            (None, Some(ls)) => Target::Labels(ls),
            (Some(_), Some(_)) => return Err("record has both \"label\" and \"labels\"".into()),
            (None, None) => return Err("record has neither \"label\" nor \"labels\"".into()),
        };
        Ok(Self {
            id: raw.id,
            text: raw.text,
            target,
        })
    }
}

impl From<LabeledExample> for RawExample {
    fn from(ex: LabeledExample) -> Self {
        let (label, labels) = match ex.target {
            Target::Label(l) => (Some(l), None),
            Target::Labels(ls) => (None, Some(ls)),
        };
        Self {
            id: ex.id,
            text: ex.text,
            label,
            labels,
        }
    }
}

impl LabeledExample {
    pub fn from_json(line: &str) -> std::result::Result<Self, String> {
        serde_json::from_str(line).map_err(|e| e.to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain strings serialize")
    }
}

pub fn read_labeled_jsonl(path: &Path) -> Result<Vec<LabeledExample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex = LabeledExample::from_json(&line).map_err(|message| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_labeled_jsonl(path: &Path, examples: &[LabeledExample]) -> Result<()> {
    let mut buf = String::new();
    for ex in examples {
        buf.push_str(&ex.to_json());
        buf.push('\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(buf.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Target in index form: a class index, or one flag per label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EncodedTarget {
    Class(usize),
    Flags(Vec<bool>),
}

impl EncodedTarget {
    pub fn resolve(spec: &TaskSpec, target: &Target) -> Result<Self> {
        let index = |l: &str| {
            spec.label_index(l)
                .ok_or_else(|| Error::Task(format!("label {l:?} is not in task {}", spec.name)))
        };
        match (spec.kind, target) {
            (TaskKind::Multilabel, Target::Labels(ls)) => {
                let mut flags = vec![false; spec.num_labels()];
                for l in ls {
                    flags[index(l)?] = true;
                }
                Ok(Self::Flags(flags))
            }
            (TaskKind::Multilabel, Target::Label(_)) => Err(Error::Task(
                "multi-label examples need a \"labels\" list".into(),
            )),
            (_, Target::Label(l)) => Ok(Self::Class(index(l)?)),
            (_, Target::Labels(_)) => Err(Error::Task(
                "single-label examples need a \"label\" field".into(),
            )),
        }
    }

    pub fn to_target(&self, spec: &TaskSpec) -> Target {
        match self {
            Self::Class(c) => Target::Label(spec.labels[*c].clone()),
            Self::Flags(f) => Target::Labels(
                f.iter()
                    .zip(&spec.labels)
                    .filter(|(&on, _)| on)
                    .map(|(_, l)| l.clone())
                    .collect(),
            ),
        }
    }
}

/// Texts encoded with one vocabulary; the fingerprint travels with them.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTexts {
    pub vocab_fingerprint: String,
    pub sequences: Vec<InputSequence>,
}

pub fn encode_texts<S: AsRef<str> + Sync>(
    vocab: &SubwordVocabulary,
    texts: &[S],
    max_len: usize,
) -> Result<EncodedTexts> {
    let ids: Vec<Vec<u32>> = texts.par_iter().map(|t| vocab.encode(t.as_ref())).collect();
    Ok(EncodedTexts {
        vocab_fingerprint: vocab.fingerprint(),
        sequences: build_sequences(&ids, max_len)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDataset {
    pub ids: Vec<String>,
    pub texts: EncodedTexts,
    pub targets: Vec<EncodedTarget>,
}

impl EncodedDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

pub fn encode_dataset(
    spec: &TaskSpec,
    vocab: &SubwordVocabulary,
    examples: &[LabeledExample],
    max_len: usize,
) -> Result<EncodedDataset> {
    spec.validate()?;
    let targets = examples
        .iter()
        .map(|e| {
            EncodedTarget::resolve(spec, &e.target)
                .map_err(|err| Error::Task(format!("example {}: {err}", e.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let texts: Vec<&str> = examples.iter().map(|e| e.text.as_str()).collect();
    Ok(EncodedDataset {
        ids: examples.iter().map(|e| e.id.clone()).collect(),
        texts: encode_texts(vocab, &texts, max_len)?,
        targets,
    })
}

/// Encoder body plus classification head, bound to a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    pub spec: TaskSpec,
    pub config: ModelConfig,
    pub params: ParamSet,
    pub vocab_fingerprint: String,
    pub meta: TrainingMeta,
}

fn task_manifest(cfg: &ModelConfig, k: usize) -> Vec<(String, Vec<usize>)> {
    let mut m = cfg.encoder_manifest();
    m.push((CLASSIFIER_WEIGHT.into(), vec![cfg.hidden_dim, k]));
    m.push((CLASSIFIER_BIAS.into(), vec![k]));
    m
}

/// Copy the encoder body of `ckpt` and add a freshly initialized head.
pub fn attach_head(ckpt: &EncoderCheckpoint, spec: &TaskSpec, seed: u64) -> Result<TaskModel> {
    spec.validate()?;
    let cfg = ckpt.config.clone();
    let mut rng = child_rng(seed, streams::HEAD_INIT, 0);
    let head = init_tensors(
        &task_manifest(&cfg, spec.num_labels())[cfg.encoder_manifest().len()..],
        &mut rng,
    );
    let mut tensors: Vec<Tensor> = cfg
        .encoder_manifest()
        .iter()
        .map(|(name, _)| {
            ckpt.params
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Shape(format!("missing tensor {name}")))
        })
        .collect::<Result<_>>()?;
    tensors.extend(head.tensors().iter().cloned());
    TaskModel::new(
        spec.clone(),
        cfg,
        ParamSet::new(tensors)?,
        ckpt.vocab_fingerprint.clone(),
        ckpt.meta.clone(),
    )
}

impl TaskModel {
    pub fn new(
        spec: TaskSpec,
        config: ModelConfig,
        params: ParamSet,
        vocab_fingerprint: String,
        meta: TrainingMeta,
    ) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        params.check_manifest(&task_manifest(&config, spec.num_labels()))?;
        Ok(Self {
            spec,
            config,
            params,
            vocab_fingerprint,
            meta,
        })
    }

    fn header(&self) -> Result<CheckpointHeader> {
        let mut h = CheckpointHeader::new(
            "task",
            self.config.clone(),
            &self.params,
            self.vocab_fingerprint.clone(),
            self.meta.clone(),
        );
        h.task = Some(serde_json::to_value(&self.spec)?);
        Ok(h)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode_checkpoint(&self.header()?, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, params) = decode_checkpoint(bytes)?;
        if h.kind != "task" {
            return Err(Error::CheckpointFormat(format!(
                "expected a task checkpoint, found {}",
                h.kind
            )));
        }
        let spec: TaskSpec = serde_json::from_value(h.task.ok_or_else(|| {
            Error::CheckpointFormat("task checkpoint without a task spec".into())
        })?)
        .map_err(|e| Error::CheckpointFormat(format!("task spec: {e}")))?;
        Self::new(spec, h.config, params, h.vocab_fingerprint, h.meta)
            .map_err(|e| Error::CheckpointFormat(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn load_with_vocab(path: &Path, vocab: &SubwordVocabulary) -> Result<Self> {
        let m = Self::load(path)?;
        check_fingerprint(&m.vocab_fingerprint, vocab)?;
        Ok(m)
    }

    fn check_texts(&self, texts: &EncodedTexts) -> Result<()> {
        if texts.vocab_fingerprint != self.vocab_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.vocab_fingerprint.clone(),
                actual: texts.vocab_fingerprint.clone(),
            });
        }
        crate::model::check_batch(
            &self.config,
            &crate::mlm::MaskedBatch::unlabeled(texts.sequences.clone()),
        )
    }
}

struct Net<'a> {
    cfg: &'a ModelConfig,
    w: Weights,
    eidx: EncoderIndex,
    head_w: usize,
    head_b: usize,
}

struct Pass {
    cache: EncoderCache,
    n: usize,
    pooled: Array1<f64>,
    mask: Option<Array1<f64>>,
    logits: Array1<f64>,
}

impl<'a> Net<'a> {
    fn new(cfg: &'a ModelConfig, params: &ParamSet) -> Result<Self> {
        Ok(Self {
            cfg,
            w: Weights::from_params(params),
            eidx: EncoderIndex::resolve(params, cfg)?,
            head_w: params.index_of(CLASSIFIER_WEIGHT)?,
            head_b: params.index_of(CLASSIFIER_BIAS)?,
        })
    }

    fn forward(&self, seq: &InputSequence, mut rng: Option<&mut Rng>) -> Pass {
        let n = effective_len(&seq.attention_mask);
        let dropout = rng.as_deref_mut().map(|rng| Dropout {
            p: self.cfg.dropout_prob,
            rng,
        });
        let (h, cache) = encoder_forward(
            &self.w,
            &self.eidx,
            self.cfg,
            &seq.ids[..n],
            &seq.type_ids[..n],
            &valid_keys(&seq.attention_mask[..n]),
            dropout,
        );
        let mut pooled = h.row(0).to_owned();
        let mask = match rng {
            Some(rng) if self.cfg.dropout_prob > 0.0 => Some(
                dropout_mask(1, pooled.len(), self.cfg.dropout_prob, rng)
                    .index_axis_move(Axis(0), 0),
            ),
            _ => None,
        };
        if let Some(m) = &mask {
            pooled *= m;
        }
        let logits = pooled.dot(&self.w.m(self.head_w)) + self.w.v(self.head_b);
        Pass {
            cache,
            n,
            pooled,
            mask,
            logits,
        }
    }

    fn backward(&self, pass: &Pass, dlogits: &Array1<f64>, g: &mut Weights) {
        {
            let outer = pass
                .pooled
                .view()
                .insert_axis(Axis(1))
                .dot(&dlogits.view().insert_axis(Axis(0)));
            let mut gw = g.m_mut(self.head_w);
            gw += &outer;
        }
        {
            let mut gb = g.v_mut(self.head_b);
            gb += dlogits;
        }
        let mut dpooled = self.w.m(self.head_w).dot(dlogits);
        if let Some(m) = &pass.mask {
            dpooled *= m;
        }
        let mut dh = Array2::zeros((pass.n, self.cfg.hidden_dim));
        dh.row_mut(0).assign(&dpooled);
        encoder_backward(&self.w, &self.eidx, self.cfg, &pass.cache, dh, g);
    }
}

fn probabilities_from_logits(kind: TaskKind, logits: &Array1<f64>) -> Array1<f64> {
    match kind {
        TaskKind::Multilabel => logits.mapv(sigmoid),
        _ => log_softmax_row(logits.view()).mapv(f64::exp),
    }
}

/// Loss of one example and its gradient w.r.t. the logits.
fn example_loss(
    kind: TaskKind,
    logits: &Array1<f64>,
    target: &EncodedTarget,
) -> (f64, Array1<f64>) {
    match (kind, target) {
        (TaskKind::Multilabel, EncodedTarget::Flags(flags)) => {
            let k = flags.len() as f64;
            let mut loss = 0.0;
            let mut grad = Array1::zeros(flags.len());
            for (j, (&z, &y)) in logits.iter().zip(flags).enumerate() {
                let y = if y { 1.0 } else { 0.0 };
                // Numerically stable BCE with logits: max(z,0) - z*y + ln(1 + e^-|z|).
                loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
                grad[j] = (sigmoid(z) - y) / k;
            }
            (loss / k, grad)
        }
        (_, EncodedTarget::Class(c)) => {
            let logp = log_softmax_row(logits.view());
            let mut grad = logp.mapv(f64::exp);
            grad[*c] -= 1.0;
            (-logp[*c], grad)
        }
        _ => unreachable!("targets are resolved against the task kind"),
    }
}

/// Class probabilities (softmax) or per-label probabilities (sigmoid),
/// shape `(examples, labels)`.
pub fn forward_classify(model: &TaskModel, texts: &EncodedTexts) -> Result<Array2<f64>> {
    model.check_texts(texts)?;
    let net = Net::new(&model.config, &model.params)?;
    let rows: Vec<Array1<f64>> = texts
        .sequences
        .par_iter()
        .map(|s| probabilities_from_logits(model.spec.kind, &net.forward(s, None).logits))
        .collect();
    let mut out = Array2::zeros((rows.len(), model.spec.num_labels()));
    for (mut r, p) in out.rows_mut().into_iter().zip(rows) {
        r.assign(&p);
    }
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            tensor: "classifier probabilities".into(),
        });
    }
    Ok(out)
}

/// Decision rule: argmax with ties to the earliest label, or every label at
/// or above its threshold.
pub fn decide(spec: &TaskSpec, probs: &[f64]) -> EncodedTarget {
    match spec.kind {
        TaskKind::Multilabel => EncodedTarget::Flags(
            probs
                .iter()
                .zip(&spec.thresholds)
                .map(|(p, t)| p >= t)
                .collect(),
        ),
        _ => {
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            EncodedTarget::Class(best)
        }
    }
}

pub fn predict(model: &TaskModel, texts: &EncodedTexts) -> Result<Vec<Target>> {
    let probs = forward_classify(model, texts)?;
    Ok(probs
        .rows()
        .into_iter()
        .map(|r| decide(&model.spec, r.as_slice().expect("standard layout")).to_target(&model.spec))
        .collect())
}

/// Accuracy used for model selection and the report: exact-match accuracy
/// for single-label tasks, mean per-label accuracy for multi-label tasks.
pub fn task_accuracy(spec: &TaskSpec, probs: &Array2<f64>, targets: &[EncodedTarget]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for (row, gold) in probs.rows().into_iter().zip(targets) {
        match (decide(spec, row.as_slice().expect("standard layout")), gold) {
            (EncodedTarget::Flags(p), EncodedTarget::Flags(g)) => {
                correct += p.iter().zip(g).filter(|(a, b)| a == b).count();
                total += g.len();
            }
            (p, g) => {
                correct += usize::from(&p == g);
                total += 1;
            }
        }
    }
    correct as f64 / total as f64
}

/// Mean loss over `data` in eval mode.
pub fn dataset_loss(model: &TaskModel, data: &EncodedDataset) -> Result<f64> {
    model.check_texts(&data.texts)?;
    let net = Net::new(&model.config, &model.params)?;
    let total: f64 = data
        .texts
        .sequences
        .par_iter()
        .zip(&data.targets)
        .map(|(s, t)| example_loss(model.spec.kind, &net.forward(s, None).logits, t).0)
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok(total / data.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineTuneConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dropout_prob: f64,
    pub weight_decay: f64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 8,
            epochs: 20,
            seed: 42,
            dropout_prob: 0.1,
            weight_decay: 0.0,
            patience: None,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("fine-tuning lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(
                "fine-tuning batch_size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::Config("dropout_prob must lie in [0, 1)".into()));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training-batch loss during the epoch (dropout active).
    pub train_loss: f64,
    /// Accuracy on the training set after the epoch, in eval mode.
    pub train_accuracy: f64,
    /// Validation accuracy after the epoch; `None` without a validation set.
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were returned.
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub stopped_early: bool,
}

/// Fine-tune every weight with Adam. Returns the weights of the epoch with
/// the best validation accuracy (earliest on ties), or the final weights
/// when `val` is empty. The input model is not modified.
pub fn finetune(
    model: &TaskModel,
    train: &EncodedDataset,
    val: &EncodedDataset,
    cfg: &FineTuneConfig,
) -> Result<(TaskModel, History)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Task("training set is empty".into()));
    }
    model.check_texts(&train.texts)?;
    model.check_texts(&val.texts)?;
    let mut history = History::default();
    if cfg.epochs == 0 {
        return Ok((model.clone(), history));
    }
    let mut current = model.clone();
    current.config.dropout_prob = cfg.dropout_prob;
    let mut adam = AdamState::new(
        &current.params,
        AdamConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
    );
    let kind = current.spec.kind;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, ParamSet)> = None;
    let mut since_best = 0;
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut child_rng(cfg.seed, streams::BATCHES, epoch as u64));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let net = Net::new(&current.config, &current.params)?;
            let dropout_seed = derive_seed(cfg.seed, streams::DROPOUT, step);
            let inv_b = 1.0 / chunk.len() as f64;
            let per_example: Vec<(f64, Weights)> = chunk
                .par_iter()
                .enumerate()
                .map(|(i, &ex)| {
                    let mut rng = child_rng(dropout_seed, streams::DROPOUT, i as u64);
                    let pass = net.forward(&train.texts.sequences[ex], Some(&mut rng));
                    let (loss, dlogits) = example_loss(kind, &pass.logits, &train.targets[ex]);
                    let mut g = net.w.zeros_like();
                    net.backward(&pass, &(dlogits * inv_b), &mut g);
                    (loss, g)
                })
                .collect();
            let mut g = net.w.zeros_like();
            let mut loss = 0.0;
            for (l, gi) in &per_example {
                loss += l;
                g.add_assign(gi);
            }
            loss *= inv_b;
            let grads = g.into_gradients(&current.params);
            if !loss.is_finite() {
                return Err(Error::Task(format!(
                    "fine-tuning diverged at epoch {epoch}, step {step}: loss {loss}"
                )));
            }
            if let Err(Error::NonFinite { tensor }) = grads.check_finite() {
                return Err(Error::Task(format!(
                    "fine-tuning diverged at epoch {epoch}, step {step}: non-finite gradient in {tensor}"
                )));
            }
            adam_step(&mut current.params, &grads, &mut adam)?;
            if let Err(Error::NonFinite { tensor }) = current.params.check_finite() {
                return Err(Error::Task(format!(
                    "fine-tuning diverged at epoch {epoch}, step {step}: non-finite weights in {tensor}"
                )));
            }
            loss_sum += loss;
            batches += 1;
        }
        let train_accuracy = task_accuracy(
            &current.spec,
            &forward_classify(&current, &train.texts)?,
            &train.targets,
        );
        let val_accuracy = if val.is_empty() {
            None
        } else {
            Some(task_accuracy(
                &current.spec,
                &forward_classify(&current, &val.texts)?,
                &val.targets,
            ))
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            train_accuracy,
            val_accuracy,
        });
        if let Some(acc) = val_accuracy {
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch, current.params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience.is_some_and(|p| since_best >= p) {
                    history.stopped_early = true;
                    break;
                }
            }
        }
    }
    let epochs_run = history.epochs.len();
    match best {
        Some((acc, epoch, params)) => {
            current.params = params;
            history.best_epoch = Some(epoch);
            history.best_val_accuracy = Some(acc);
        }
        None => history.best_epoch = Some(epochs_run),
    }
    current.config.dropout_prob = model.config.dropout_prob;
    current.meta = TrainingMeta {
        steps: model.meta.steps,
        seed: cfg.seed,
        initial_loss: history.epochs.first().map(|e| e.train_loss),
        final_loss: history.epochs.last().map(|e| e.train_loss),
    };
    Ok((current, history))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

fn stratum(spec: &TaskSpec, ex: &LabeledExample) -> String {
    match (&spec.kind, &ex.target) {
        (TaskKind::Multilabel, Target::Labels(ls)) => {
            if ls.is_empty() { "non-toxic" } else { "toxic" }.into()
        }
        (_, Target::Label(l)) => l.clone(),
        (_, Target::Labels(ls)) => ls.join(","),
    }
}

/// Deterministic train/validation/test split. With `stratify`, each class
/// (or, for multi-label tasks, the toxic/non-toxic flag) is split separately
/// with `round(n * ratio)` examples for train and validation; the rest go to
/// test. Each part keeps the input order.
pub fn split_dataset(
    examples: &[LabeledExample],
    spec: &TaskSpec,
    ratios: (f64, f64, f64),
    seed: u64,
    stratify: bool,
) -> Result<Split<LabeledExample>> {
    let (rt, rv, rs) = ratios;
    if [rt, rv, rs].iter().any(|r| !(0.0..=1.0).contains(r)) || (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(Error::Task(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        let key = if stratify {
            stratum(spec, ex)
        } else {
            String::new()
        };
        groups.entry(key).or_default().push(i);
    }
    let parts = [rt, rv, rs].iter().filter(|&&r| r > 0.0).count();
    let mut assignment = vec![0u8; examples.len()];
    for (g, (key, mut members)) in groups.into_iter().enumerate() {
        if stratify && members.len() < parts {
            return Err(Error::Task(format!(
                "class {key:?} has {} examples, fewer than the {parts} split parts",
                members.len()
            )));
        }
        members.shuffle(&mut child_rng(seed, streams::SPLIT, g as u64));
        let n = members.len();
        let n_train = ((n as f64 * rt).round() as usize).min(n);
        let n_val = ((n as f64 * rv).round() as usize).min(n - n_train);
        for (j, &m) in members.iter().enumerate() {
            assignment[m] = if j < n_train {
                0
            } else if j < n_train + n_val {
                1
            } else {
                2
            };
        }
    }
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (ex, part) in examples.iter().zip(assignment) {
        match part {
            0 => split.train.push(ex.clone()),
            1 => split.val.push(ex.clone()),
            _ => split.test.push(ex.clone()),
        }
    }
    Ok(split)
}

/// Ranges for random search: log-uniform learning rate, finite choices for
/// batch size and epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub lr: (f64, f64),
    pub batch_sizes: Vec<usize>,
    pub epochs: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            lr: (1e-4, 3e-3),
            batch_sizes: vec![8, 16],
            epochs: vec![5, 10],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub config: FineTuneConfig,
    pub val_accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best_trial: usize,
    pub best_config: FineTuneConfig,
    pub model: TaskModel,
    pub history: History,
    pub trials: Vec<TrialRecord>,
}

/// Sample `trials` configurations around `base` and fine-tune each. Trial `t`
/// draws its hyperparameters and training seed from `(seed, t)`, so trials
/// may run in parallel. The best validation accuracy wins; ties go to the
/// earliest trial.
pub fn random_search(
    model: &TaskModel,
    train: &EncodedDataset,
    val: &EncodedDataset,
    space: &SearchSpace,
    base: &FineTuneConfig,
    trials: usize,
    seed: u64,
) -> Result<SearchOutcome> {
    if trials == 0 {
        return Err(Error::Task("random search needs at least one trial".into()));
    }
    if val.is_empty() {
        return Err(Error::Task("random search needs a validation set".into()));
    }
    let (lo, hi) = space.lr;
    if !(lo > 0.0 && hi >= lo) || space.batch_sizes.is_empty() || space.epochs.is_empty() {
        return Err(Error::Task("search space is empty or invalid".into()));
    }
    let configs: Vec<FineTuneConfig> = (0..trials)
        .map(|t| {
            let mut rng = child_rng(seed, streams::SEARCH, t as u64);
            let lr = if hi > lo {
                rng.random_range(lo.ln()..=hi.ln()).exp()
            } else {
                lo
            };
            FineTuneConfig {
                lr,
                batch_size: *space.batch_sizes.choose(&mut rng).expect("non-empty"),
                epochs: *space.epochs.choose(&mut rng).expect("non-empty"),
                seed: derive_seed(seed, streams::SEARCH, t as u64),
                ..base.clone()
            }
        })
        .collect();
    let results: Vec<Result<(TaskModel, History)>> = configs
        .par_iter()
        .map(|c| finetune(model, train, val, c))
        .collect();
    let mut records = Vec::with_capacity(trials);
    let mut best: Option<(usize, f64)> = None;
    for (t, (c, r)) in configs.iter().zip(&results).enumerate() {
        let (val_accuracy, error) = match r {
            Ok((_, h)) => (h.best_val_accuracy, None),
            Err(e) => (None, Some(e.to_string())),
        };
        if let Some(acc) = val_accuracy {
            if best.is_none_or(|(_, b)| acc > b) {
                best = Some((t, acc));
            }
        }
        records.push(TrialRecord {
            trial: t,
            config: c.clone(),
            val_accuracy,
            error,
        });
    }
    let Some((best_trial, _)) = best else {
        let log = serde_json::to_string(&records)?;
        return Err(Error::Task(format!(
            "all {trials} search trials failed: {log}"
        )));
    };
    let (model, history) = results
        .into_iter()
        .nth(best_trial)
        .expect("trial exists")
        .expect("best trial succeeded");
    Ok(SearchOutcome {
        best_trial,
        best_config: configs[best_trial].clone(),
        model,
        history,
        trials: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decision_rules() {
        let fake = TaskSpec::binary("fakenews", ["fake", "real"]);
        assert_eq!(
            decide(&fake, &[0.9, 0.1]).to_target(&fake),
            Target::Label("fake".into())
        );
        assert_eq!(decide(&fake, &[0.5, 0.5]), EncodedTarget::Class(0));
        let ml = TaskSpec::multilabel("t", &["a", "b", "c"]);
        assert_eq!(
            decide(&ml, &[0.7, 0.4, 0.5]),
            EncodedTarget::Flags(vec![true, false, true])
        );
    }

    #[test]
    fn spec_validation() {
        assert!(TaskSpec::multiclass("x", &["a"]).validate().is_err());
        assert!(TaskSpec::multiclass("x", &["a", "a"]).validate().is_err());
        assert!(TaskSpec::multiclass("x", &["a", "b", "c"])
            .validate()
            .is_ok());
        let mut t = TaskSpec::toxicity_categories();
        t.validate().unwrap();
        t.thresholds[0] = 1.0;
        assert!(t.validate().is_err());
    }

    #[test]
    fn jsonl_records_round_trip() {
        let a = LabeledExample::from_json(r#"{"id":"1","text":"x","label":"fake"}"#).unwrap();
        assert_eq!(a.target, Target::Label("fake".into()));
        let b = LabeledExample::from_json(r#"{"id":"2","text":"y","labels":[]}"#).unwrap();
        assert_eq!(b.target, Target::Labels(vec![]));
        assert_eq!(LabeledExample::from_json(&b.to_json()).unwrap(), b);
        assert!(LabeledExample::from_json(r#"{"id":"3","text":"z"}"#).is_err());
    }

    #[test]
    fn multilabel_loss_is_mean_of_binary_cross_entropies() {
        let logits = Array1::from(vec![0.3, -1.2, 2.0]);
        let target = EncodedTarget::Flags(vec![true, false, false]);
        let (loss, grad) = example_loss(TaskKind::Multilabel, &logits, &target);
        let p: Vec<f64> = logits.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
        let hand = (-(p[0].ln()) - (1.0 - p[1]).ln() - (1.0 - p[2]).ln()) / 3.0;
        assert!((loss - hand).abs() < 1e-12);
        assert!((grad[0] - (p[0] - 1.0) / 3.0).abs() < 1e-12);
    }
}
