//! Dual-annotator labeling campaigns.
//!
//! Every item goes to both annotators. Stage 1 is a binary judgment
//! (fake/real or toxic/non-toxic); toxic comments additionally get a stage-2
//! set of toxicity categories. An item keeps a final label only when both
//! stage-1 judgments agree; the final categories of an agreed toxic item are
//! the intersection of the two annotators' sets.
//!
//! Submissions are appended to a JSONL log before they are applied, so
//! replaying the log over the item file rebuilds the campaign exactly.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::heads::{LabeledExample, Target, TOXICITY_CATEGORIES};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationTask {
    Fakenews,
    Toxicity,
}

impl AnnotationTask {
    /// Stage-1 labels, negative-class label last.
    pub fn stage1_labels(self) -> [&'static str; 2] {
        match self {
            Self::Fakenews => ["fake", "real"],
            Self::Toxicity => ["toxic", "non-toxic"],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Fakenews => "fakenews",
            Self::Toxicity => "toxicity",
        }
    }
}

impl fmt::Display for AnnotationTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AnnotationTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fakenews" => Ok(Self::Fakenews),
            "toxicity" => Ok(Self::Toxicity),
            other => Err(Error::Validation(format!(
                "unknown task {other:?} (expected fakenews or toxicity)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationItem {
    pub id: String,
    pub text: String,
    pub task: AnnotationTask,
    #[serde(default)]
    pub source: String,
}

/// One annotator's judgment on one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub item_id: String,
    pub annotator_id: String,
    pub stage1: String,
    /// Toxicity categories; only non-empty for toxic comments.
    #[serde(default)]
    pub stage2: Vec<String>,
    /// Seconds since the Unix epoch, filled in by the service when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

impl AnnotationRecord {
    /// Check the record against the item's task: a stage-1 label from the
    /// task's pair, and stage-2 categories only on toxic comments, drawn
    /// from the category set without repeats.
    pub fn validate(&self, task: AnnotationTask) -> Result<()> {
        let allowed = task.stage1_labels();
        if !allowed.contains(&self.stage1.as_str()) {
            return Err(Error::Validation(format!(
                "stage1 {:?} is not a {task} label (expected {} or {})",
                self.stage1, allowed[0], allowed[1]
            )));
        }
        if self.stage2.is_empty() {
            return Ok(());
        }
        if task != AnnotationTask::Toxicity || self.stage1 != "toxic" {
            return Err(Error::Validation(format!(
                "stage2 categories are only allowed on toxic comments, got stage1 {:?}",
                self.stage1
            )));
        }
        let mut seen = BTreeSet::new();
        for c in &self.stage2 {
            if !TOXICITY_CATEGORIES.contains(&c.as_str()) {
                return Err(Error::Validation(format!(
                    "unknown toxicity category {c:?}"
                )));
            }
            if !seen.insert(c) {
                return Err(Error::Validation(format!("category {c:?} listed twice")));
            }
        }
        Ok(())
    }
}

pub fn read_items(path: &Path) -> Result<Vec<AnnotationItem>> {
    read_jsonl(path)
}

pub fn read_records(path: &Path) -> Result<Vec<AnnotationRecord>> {
    read_jsonl(path)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorProgress {
    pub annotator: String,
    pub labeled: usize,
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub total_items: usize,
    /// Items labeled by both annotators.
    pub complete_items: usize,
    pub annotators: Vec<AnnotatorProgress>,
}

/// A two-annotator campaign over a fixed item list.
#[derive(Debug)]
pub struct Campaign {
    items: Vec<AnnotationItem>,
    index: HashMap<String, usize>,
    annotators: [String; 2],
    /// `labels[a][i]` is annotator `a`'s record for item `i`.
    labels: [Vec<Option<AnnotationRecord>>; 2],
    /// Lowest item ordinal each annotator might still need to label.
    cursor: [usize; 2],
    /// Records in submission order.
    history: Vec<AnnotationRecord>,
    log: Option<PathBuf>,
}

impl PartialEq for Campaign {
    fn eq(&self, other: &Self) -> bool {
        self.items == other.items
            && self.annotators == other.annotators
            && self.labels == other.labels
            && self.history == other.history
    }
}

impl Campaign {
    pub fn new<S: AsRef<str>>(items: Vec<AnnotationItem>, annotators: &[S]) -> Result<Self> {
        let annotators: [String; 2] = match annotators {
            [a, b] => [a.as_ref().to_string(), b.as_ref().to_string()],
            other => {
                return Err(Error::Annotation(format!(
                    "a campaign has exactly two annotators, got {}",
                    other.len()
                )))
            }
        };
        if annotators[0] == annotators[1] {
            return Err(Error::Annotation(format!(
                "annotator {:?} listed twice",
                annotators[0]
            )));
        }
        if annotators.iter().any(|a| a.trim().is_empty()) {
            return Err(Error::Annotation("annotator ids must be non-empty".into()));
        }
        if items.is_empty() {
            return Err(Error::Annotation(
                "a campaign needs at least one item".into(),
            ));
        }
        let mut index = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if item.text.trim().is_empty() {
                return Err(Error::Annotation(format!(
                    "item {:?} has empty text",
                    item.id
                )));
            }
            if index.insert(item.id.clone(), i).is_some() {
                return Err(Error::Annotation(format!(
                    "duplicate item id {:?}",
                    item.id
                )));
            }
        }
        let n = items.len();
        Ok(Self {
            items,
            index,
            annotators,
            labels: [vec![None; n], vec![None; n]],
            cursor: [0, 0],
            history: Vec::new(),
            log: None,
        })
    }

    /// Load items from JSONL and, when `log` is given, replay the existing
    /// log and append future submissions to it.
    pub fn load<S: AsRef<str>>(items: &Path, annotators: &[S], log: Option<&Path>) -> Result<Self> {
        let mut campaign = Self::new(read_items(items)?, annotators)?;
        if let Some(log) = log {
            campaign.attach_log(log)?;
        }
        Ok(campaign)
    }

    /// Replay `path` (if it exists) and keep appending to it.
    pub fn attach_log(&mut self, path: &Path) -> Result<()> {
        if path.exists() {
            for record in read_records(path)? {
                self.apply(record)
                    .map_err(|e| Error::Annotation(format!("replaying {}: {e}", path.display())))?;
            }
        } else if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.log = Some(path.to_path_buf());
        Ok(())
    }

    pub fn items(&self) -> &[AnnotationItem] {
        &self.items
    }

    pub fn annotators(&self) -> &[String; 2] {
        &self.annotators
    }

    pub fn item(&self, id: &str) -> Option<&AnnotationItem> {
        self.index.get(id).map(|&i| &self.items[i])
    }

    /// All accepted records in submission order.
    pub fn records(&self) -> &[AnnotationRecord] {
        &self.history
    }

    fn annotator_slot(&self, annotator: &str) -> Result<usize> {
        self.annotators
            .iter()
            .position(|a| a == annotator)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "annotator {annotator:?} is not part of this campaign"
                ))
            })
    }

    /// The lowest-ordinal item `annotator` has not labeled yet.
    pub fn next_item(&self, annotator: &str) -> Result<Option<&AnnotationItem>> {
        let a = self.annotator_slot(annotator)?;
        Ok((self.cursor[a]..self.items.len())
            .find(|&i| self.labels[a][i].is_none())
            .map(|i| &self.items[i]))
    }

    /// Validate and store a record, appending it to the log first.
    pub fn submit(&mut self, record: AnnotationRecord) -> Result<AnnotationRecord> {
        self.check(&record)?;
        if let Some(path) = &self.log {
            let mut line = serde_json::to_string(&record)?;
            line.push('\n');
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            f.write_all(line.as_bytes())
                .and_then(|_| f.sync_data())
                .map_err(|e| Error::io(path, e))?;
        }
        self.apply(record)
    }

    fn check(&self, record: &AnnotationRecord) -> Result<(usize, usize)> {
        let a = self.annotator_slot(&record.annotator_id)?;
        let i = *self
            .index
            .get(&record.item_id)
            .ok_or_else(|| Error::Validation(format!("unknown item {:?}", record.item_id)))?;
        record.validate(self.items[i].task)?;
        if self.labels[a][i].is_some() {
            return Err(Error::Conflict(format!(
                "{} already labeled item {}",
                record.annotator_id, record.item_id
            )));
        }
        Ok((a, i))
    }

    fn apply(&mut self, record: AnnotationRecord) -> Result<AnnotationRecord> {
        let (a, i) = self.check(&record)?;
        self.labels[a][i] = Some(record.clone());
        while self.cursor[a] < self.items.len() && self.labels[a][self.cursor[a]].is_some() {
            self.cursor[a] += 1;
        }
        self.history.push(record.clone());
        Ok(record)
    }

    pub fn progress(&self) -> Progress {
        let n = self.items.len();
        let labeled = |a: usize| self.labels[a].iter().filter(|r| r.is_some()).count();
        Progress {
            total_items: n,
            complete_items: (0..n)
                .filter(|&i| self.labels[0][i].is_some() && self.labels[1][i].is_some())
                .count(),
            annotators: (0..2)
                .map(|a| AnnotatorProgress {
                    annotator: self.annotators[a].clone(),
                    labeled: labeled(a),
                    remaining: n - labeled(a),
                })
                .collect(),
        }
    }

    pub fn resolve(&self) -> Resolution {
        resolve_agreement(&self.items, &self.history)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResolutionStatus {
    Retained,
    Discarded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedLabel {
    pub item_id: String,
    pub task: AnnotationTask,
    pub status: ResolutionStatus,
    /// Agreed stage-1 label; `None` when discarded.
    pub stage1: Option<String>,
    /// Agreed categories, in category-list order (toxic items only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage2: Option<Vec<String>>,
    /// The two annotators' stage-1 labels, for review screens.
    pub judgments: [String; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ResolutionSummary {
    pub retained: usize,
    pub discarded: usize,
    pub incomplete: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    /// Resolved items in item order.
    pub labels: Vec<ResolvedLabel>,
    /// Items without exactly two records from two different annotators.
    pub incomplete: Vec<String>,
    pub summary: ResolutionSummary,
}

/// Group records per item, keeping only items with exactly two records from
/// two different annotators. The pair is ordered by annotator id.
fn complete_pairs<'a>(
    items: &'a [AnnotationItem],
    records: &'a [AnnotationRecord],
) -> (
    Vec<(&'a AnnotationItem, [&'a AnnotationRecord; 2])>,
    Vec<String>,
) {
    let mut by_item: HashMap<&str, Vec<&AnnotationRecord>> = HashMap::new();
    for r in records {
        by_item.entry(r.item_id.as_str()).or_default().push(r);
    }
    let mut pairs = Vec::new();
    let mut incomplete = Vec::new();
    for item in items {
        match by_item.get(item.id.as_str()).map(Vec::as_slice) {
            Some(&[x, y]) if x.annotator_id != y.annotator_id => {
                pairs.push((
                    item,
                    if x.annotator_id < y.annotator_id {
                        [x, y]
                    } else {
                        [y, x]
                    },
                ));
            }
            _ => incomplete.push(item.id.clone()),
        }
    }
    (pairs, incomplete)
}

/// Apply the agreement rule to every item of `items`.
pub fn resolve_agreement(items: &[AnnotationItem], records: &[AnnotationRecord]) -> Resolution {
    let (pairs, incomplete) = complete_pairs(items, records);
    let mut summary = ResolutionSummary {
        incomplete: incomplete.len(),
        ..ResolutionSummary::default()
    };
    let labels = pairs
        .into_iter()
        .map(|(item, [x, y])| {
            let judgments = [x.stage1.clone(), y.stage1.clone()];
            if x.stage1 != y.stage1 {
                summary.discarded += 1;
                return ResolvedLabel {
                    item_id: item.id.clone(),
                    task: item.task,
                    status: ResolutionStatus::Discarded,
                    stage1: None,
                    stage2: None,
                    judgments,
                };
            }
            summary.retained += 1;
            let stage2 =
                (item.task == AnnotationTask::Toxicity && x.stage1 == "toxic").then(|| {
                    TOXICITY_CATEGORIES
                        .iter()
                        .filter(|c| {
                            x.stage2.iter().any(|s| s == *c) && y.stage2.iter().any(|s| s == *c)
                        })
                        .map(|c| c.to_string())
                        .collect()
                });
            ResolvedLabel {
                item_id: item.id.clone(),
                task: item.task,
                status: ResolutionStatus::Retained,
                stage1: Some(x.stage1.clone()),
                stage2,
                judgments,
            }
        })
        .collect();
    Resolution {
        labels,
        incomplete,
        summary,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub complete_items: usize,
    pub agreed: usize,
    pub raw_agreement_rate: f64,
    /// Chance agreement from the two annotators' marginal label frequencies.
    pub expected_agreement: f64,
    /// `None` when chance agreement is 1 and kappa is undefined.
    pub cohen_kappa: Option<f64>,
}

/// Cohen's kappa from (annotator A, annotator B) label pairs.
pub fn kappa_from_pairs<S: AsRef<str>>(pairs: &[(S, S)]) -> Result<AgreementStats> {
    if pairs.is_empty() {
        return Err(Error::Annotation(
            "agreement needs at least one double-labeled item".into(),
        ));
    }
    let n = pairs.len() as f64;
    let mut first: BTreeMap<&str, usize> = BTreeMap::new();
    let mut second: BTreeMap<&str, usize> = BTreeMap::new();
    let mut agreed = 0;
    for (a, b) in pairs {
        *first.entry(a.as_ref()).or_default() += 1;
        *second.entry(b.as_ref()).or_default() += 1;
        agreed += usize::from(a.as_ref() == b.as_ref());
    }
    let p_o = agreed as f64 / n;
    let p_e: f64 = first
        .iter()
        .map(|(label, &ca)| ca as f64 / n * second.get(label).copied().unwrap_or(0) as f64 / n)
        .sum();
    let undefined = first.len() == 1 && first.keys().eq(second.keys());
    Ok(AgreementStats {
        complete_items: pairs.len(),
        agreed,
        raw_agreement_rate: p_o,
        expected_agreement: p_e,
        cohen_kappa: (!undefined).then(|| (p_o - p_e) / (1.0 - p_e)),
    })
}

/// Stage-1 agreement over items labeled by both annotators.
pub fn agreement_stats(
    items: &[AnnotationItem],
    records: &[AnnotationRecord],
) -> Result<AgreementStats> {
    let (pairs, _) = complete_pairs(items, records);
    let labels: Vec<(&str, &str)> = pairs
        .iter()
        .map(|(_, [x, y])| (x.stage1.as_str(), y.stage1.as_str()))
        .collect();
    kappa_from_pairs(&labels)
}

/// Agreement for the whole campaign and for each task separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub summary: ResolutionSummary,
    pub overall: Option<AgreementStats>,
    pub per_task: BTreeMap<AnnotationTask, AgreementStats>,
}

pub fn agreement_report(items: &[AnnotationItem], records: &[AnnotationRecord]) -> AgreementReport {
    let mut per_task = BTreeMap::new();
    for task in [AnnotationTask::Fakenews, AnnotationTask::Toxicity] {
        let subset: Vec<AnnotationItem> =
            items.iter().filter(|i| i.task == task).cloned().collect();
        if let Ok(stats) = agreement_stats(&subset, records) {
            per_task.insert(task, stats);
        }
    }
    AgreementReport {
        summary: resolve_agreement(items, records).summary,
        overall: agreement_stats(items, records).ok(),
        per_task,
    }
}

/// Fine-tuning datasets built from retained items.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExportedDatasets {
    /// Stage-1 labels (fake/real or toxic/non-toxic).
    pub binary: Vec<LabeledExample>,
    /// Toxic comments with their category sets (toxicity only).
    pub multilabel: Option<Vec<LabeledExample>>,
}

/// Retained items of `task`, ordered by item id.
pub fn export_dataset(
    items: &[AnnotationItem],
    resolution: &Resolution,
    task: AnnotationTask,
) -> ExportedDatasets {
    let text: HashMap<&str, &str> = items
        .iter()
        .map(|i| (i.id.as_str(), i.text.as_str()))
        .collect();
    let mut retained: Vec<&ResolvedLabel> = resolution
        .labels
        .iter()
        .filter(|l| l.task == task && l.status == ResolutionStatus::Retained)
        .collect();
    retained.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    let example = |l: &ResolvedLabel, target: Target| LabeledExample {
        id: l.item_id.clone(),
        text: text
            .get(l.item_id.as_str())
            .copied()
            .unwrap_or_default()
            .to_string(),
        target,
    };
    let binary = retained
        .iter()
        .filter_map(|l| l.stage1.clone().map(|s| example(l, Target::Label(s))))
        .collect();
    let multilabel = (task == AnnotationTask::Toxicity).then(|| {
        retained
            .iter()
            .filter_map(|l| {
                l.stage2
                    .clone()
                    .map(|cats| example(l, Target::Labels(cats)))
            })
            .collect()
    });
    ExportedDatasets { binary, multilabel }
}
