//! Classification metrics and comparison reports.
//!
//! Precision, recall and F1 use the convention 0/0 = 0, so every metric is
//! defined (and deterministic) even for classes that never occur. F1 is
//! computed as `2TP / (2TP + FP + FN)`, the harmonic mean of precision and
//! recall written over integer counts.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::str::FromStr;

use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Serialize};

use crate::heads::{predict, EncodedDataset, Target, TaskKind, TaskModel};
use crate::{Error, Result};

/// Counts of (gold, predicted) label pairs: rows are gold, columns predicted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    /// (TP, FP, FN) of class `k` against all others.
    pub fn class_counts(&self, k: usize) -> (u64, u64, u64) {
        let tp = self.counts[k][k];
        let predicted: u64 = self.counts.iter().map(|row| row[k]).sum();
        let gold: u64 = self.counts[k].iter().sum();
        (tp, predicted - tp, gold - tp)
    }

    /// The same matrix with classes reordered: new class `i` is old `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            labels: perm.iter().map(|&p| self.labels[p].clone()).collect(),
            counts: perm
                .iter()
                .map(|&g| perm.iter().map(|&p| self.counts[g][p]).collect())
                .collect(),
        }
    }
}

fn label_positions<S: AsRef<str>>(labels: &[S]) -> Result<HashMap<&str, usize>> {
    let mut index = HashMap::with_capacity(labels.len());
    for (i, l) in labels.iter().enumerate() {
        if index.insert(l.as_ref(), i).is_some() {
            return Err(Error::Eval(format!(
                "label {:?} is listed twice",
                l.as_ref()
            )));
        }
    }
    Ok(index)
}

fn lookup(index: &HashMap<&str, usize>, label: &str) -> Result<usize> {
    index
        .get(label)
        .copied()
        .ok_or_else(|| Error::Eval(format!("label {label:?} is not in the label set")))
}

pub fn confusion_matrix<G, P, L>(gold: &[G], pred: &[P], labels: &[L]) -> Result<ConfusionMatrix>
where
    G: AsRef<str>,
    P: AsRef<str>,
    L: AsRef<str>,
{
    if gold.len() != pred.len() {
        return Err(Error::Eval(format!(
            "{} gold labels but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Eval("no examples to evaluate".into()));
    }
    let index = label_positions(labels)?;
    let k = labels.len();
    let mut counts = vec![vec![0u64; k]; k];
    for (g, p) in gold.iter().zip(pred) {
        counts[lookup(&index, g.as_ref())?][lookup(&index, p.as_ref())?] += 1;
    }
    Ok(ConfusionMatrix {
        labels: labels.iter().map(|l| l.as_ref().to_string()).collect(),
        counts,
    })
}

/// `num / den`, with 0/0 = 0.
pub fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of gold occurrences.
    pub support: u64,
    /// Per-label binary accuracy (multi-label reports only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

impl ClassMetrics {
    fn from_counts(label: &str, tp: u64, fp: u64, fn_: u64) -> Self {
        Self {
            label: label.to_string(),
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
            support: tp + fn_,
            accuracy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub examples: u64,
    /// Exact-match accuracy for single-label tasks; mean per-label accuracy
    /// for multi-label tasks.
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_label_accuracy: Option<f64>,
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    if n == 0 {
        0.0
    } else {
        values.sum::<f64>() / n as f64
    }
}

fn aggregate(
    examples: u64,
    accuracy: f64,
    per_class: Vec<ClassMetrics>,
    pooled: (u64, u64, u64),
) -> MetricsReport {
    let (tp, fp, fn_) = pooled;
    MetricsReport {
        examples,
        accuracy,
        macro_precision: mean(per_class.iter().map(|c| c.precision)),
        macro_recall: mean(per_class.iter().map(|c| c.recall)),
        macro_f1: mean(per_class.iter().map(|c| c.f1)),
        micro_precision: ratio(tp, tp + fp),
        micro_recall: ratio(tp, tp + fn_),
        micro_f1: ratio(2 * tp, 2 * tp + fp + fn_),
        per_class,
        subset_accuracy: None,
        mean_label_accuracy: None,
    }
}

pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> MetricsReport {
    let mut pooled = (0, 0, 0);
    let per_class = cm
        .labels
        .iter()
        .enumerate()
        .map(|(k, label)| {
            let (tp, fp, fn_) = cm.class_counts(k);
            pooled = (pooled.0 + tp, pooled.1 + fp, pooled.2 + fn_);
            ClassMetrics::from_counts(label, tp, fp, fn_)
        })
        .collect();
    aggregate(cm.total(), ratio(cm.trace(), cm.total()), per_class, pooled)
}

/// Metrics for label-set predictions: per-label binary confusion for each
/// label, pooled counts for the micro averages, plus subset accuracy (exact
/// set match) and mean per-label accuracy.
pub fn multilabel_metrics<G, P, L>(gold: &[G], pred: &[P], labels: &[L]) -> Result<MetricsReport>
where
    G: AsRef<[String]>,
    P: AsRef<[String]>,
    L: AsRef<str>,
{
    if gold.len() != pred.len() {
        return Err(Error::Eval(format!(
            "{} gold label sets but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Eval("no examples to evaluate".into()));
    }
    let index = label_positions(labels)?;
    let to_set = |set: &[String]| -> Result<BTreeSet<usize>> {
        set.iter().map(|l| lookup(&index, l)).collect()
    };
    let k = labels.len();
    let n = gold.len() as u64;
    // (tp, fp, fn) per label; tn follows from n.
    let mut counts = vec![(0u64, 0u64, 0u64); k];
    let mut exact = 0u64;
    for (g, p) in gold.iter().zip(pred) {
        let (g, p) = (to_set(g.as_ref())?, to_set(p.as_ref())?);
        exact += u64::from(g == p);
        for (j, c) in counts.iter_mut().enumerate() {
            match (g.contains(&j), p.contains(&j)) {
                (true, true) => c.0 += 1,
                (false, true) => c.1 += 1,
                (true, false) => c.2 += 1,
                (false, false) => {}
            }
        }
    }
    let mut pooled = (0, 0, 0);
    let mut correct = 0u64;
    let per_class: Vec<ClassMetrics> = labels
        .iter()
        .zip(&counts)
        .map(|(label, &(tp, fp, fn_))| {
            pooled = (pooled.0 + tp, pooled.1 + fp, pooled.2 + fn_);
            let right = n - fp - fn_;
            correct += right;
            ClassMetrics {
                accuracy: Some(ratio(right, n)),
                ..ClassMetrics::from_counts(label.as_ref(), tp, fp, fn_)
            }
        })
        .collect();
    let label_accuracy = ratio(correct, n * k as u64);
    let mut report = aggregate(n, label_accuracy, per_class, pooled);
    report.subset_accuracy = Some(ratio(exact, n));
    report.mean_label_accuracy = Some(label_accuracy);
    Ok(report)
}

/// Predict on `data` and score against its gold targets.
pub fn evaluate(model: &TaskModel, data: &EncodedDataset) -> Result<MetricsReport> {
    let predictions = predict(model, &data.texts)?;
    let spec = &model.spec;
    let gold: Vec<Target> = data.targets.iter().map(|t| t.to_target(spec)).collect();
    match spec.kind {
        TaskKind::Multilabel => {
            let sets = |ts: &[Target]| -> Vec<Vec<String>> {
                ts.iter()
                    .map(|t| match t {
                        Target::Labels(ls) => ls.clone(),
                        Target::Label(l) => vec![l.clone()],
                    })
                    .collect()
            };
            multilabel_metrics(&sets(&gold), &sets(&predictions), &spec.labels)
        }
        _ => {
            let single = |ts: &[Target]| -> Vec<String> {
                ts.iter()
                    .map(|t| match t {
                        Target::Label(l) => l.clone(),
                        Target::Labels(ls) => ls.join(","),
                    })
                    .collect()
            };
            Ok(metrics_from_confusion(&confusion_matrix(
                &single(&gold),
                &single(&predictions),
                &spec.labels,
            )?))
        }
    }
}

fn to_decimal(x: f64) -> Result<Decimal> {
    if !x.is_finite() {
        return Err(Error::Eval(format!("accuracy {x} is not finite")));
    }
    // `Display` gives the shortest decimal that round-trips, i.e. the value
    // as it was written.
    Decimal::from_str(&x.to_string())
        .map_err(|e| Error::Eval(format!("accuracy {x} out of range: {e}")))
}

/// Arithmetic mean rounded half-up (away from zero) to two decimals.
///
/// Inputs are read as the decimals they were written as and summed exactly,
/// so a mean of exactly `x.xx5` always rounds up.
pub fn average_accuracy(accuracies: &[f64]) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(Error::Eval("average of an empty list".into()));
    }
    let mut sum = Decimal::ZERO;
    for &a in accuracies {
        sum = sum
            .checked_add(to_decimal(a)?)
            .ok_or_else(|| Error::Eval("accuracy sum overflows".into()))?;
    }
    let avg = (sum / Decimal::from(accuracies.len()))
        .round_dp_with_strategy(2, RoundingStrategy::MidpointAwayFromZero);
    Ok(avg.to_string().parse().expect("decimal text parses as f64"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: String,
    pub accuracy: f64,
}

/// One model's scores as supplied to the report, e.g. from an evaluation
/// run or re-entered from a published table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<String>,
    pub scores: Vec<TaskScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub size: Option<String>,
    /// One accuracy per table task, in column order.
    pub accuracies: Vec<f64>,
    pub average: f64,
}

/// Models × tasks accuracy table with an average column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub tasks: Vec<String>,
    pub rows: Vec<TableRow>,
    /// Free-text footnotes printed under the table.
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markdown" | "md" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            other => Err(Error::Eval(format!("unknown report format {other:?}"))),
        }
    }
}

impl ComparisonTable {
    /// Columns follow the first entry's task order; every other entry must
    /// score exactly the same tasks.
    pub fn from_entries(entries: &[ReportEntry], notes: Vec<String>) -> Result<Self> {
        let first = entries
            .first()
            .ok_or_else(|| Error::Eval("report needs at least one model".into()))?;
        let tasks: Vec<String> = first.scores.iter().map(|s| s.task.clone()).collect();
        if tasks.is_empty() {
            return Err(Error::Eval(format!(
                "model {:?} has no task scores",
                first.model
            )));
        }
        let columns = label_positions(&tasks)?;
        let mut rows = Vec::with_capacity(entries.len());
        for entry in entries {
            let mut accuracies = vec![None; tasks.len()];
            for s in &entry.scores {
                let slot = columns.get(s.task.as_str()).ok_or_else(|| {
                    Error::Eval(format!(
                        "model {:?} scores task {:?} that other rows lack",
                        entry.model, s.task
                    ))
                })?;
                if accuracies[*slot].replace(s.accuracy).is_some() {
                    return Err(Error::Eval(format!(
                        "model {:?} scores task {:?} twice",
                        entry.model, s.task
                    )));
                }
            }
            let accuracies: Vec<f64> = accuracies
                .into_iter()
                .zip(&tasks)
                .map(|(a, t)| {
                    a.ok_or_else(|| {
                        Error::Eval(format!(
                            "model {:?} has no score for task {t:?}",
                            entry.model
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            rows.push(TableRow {
                model: entry.model.clone(),
                size: entry.size.clone(),
                average: average_accuracy(&accuracies)?,
                accuracies,
            });
        }
        Ok(Self { tasks, rows, notes })
    }

    fn has_sizes(&self) -> bool {
        self.rows.iter().any(|r| r.size.is_some())
    }

    /// Column maxima over the task columns followed by the average column.
    fn column_maxima(&self) -> Vec<f64> {
        (0..=self.tasks.len())
            .map(|c| {
                self.rows
                    .iter()
                    .map(|r| r.accuracies.get(c).copied().unwrap_or(r.average))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }

    /// Markdown table; every cell equal to its column maximum is bold, so
    /// tied models are all marked.
    pub fn to_markdown(&self) -> String {
        let sizes = self.has_sizes();
        let mut header = vec!["Model".to_string()];
        if sizes {
            header.push("Model Size".into());
        }
        header.extend(self.tasks.iter().cloned());
        header.push("Average".into());
        let mut out = String::new();
        let _ = writeln!(out, "| {} |", header.join(" | "));
        let _ = writeln!(out, "|{}", " --- |".repeat(header.len()));
        let maxima = self.column_maxima();
        for row in &self.rows {
            let mut cells = vec![row.model.clone()];
            if sizes {
                cells.push(row.size.clone().unwrap_or_default());
            }
            for (c, v) in row
                .accuracies
                .iter()
                .chain(std::iter::once(&row.average))
                .enumerate()
            {
                let text = format!("{v:.2}");
                cells.push(if *v == maxima[c] {
                    format!("**{text}**")
                } else {
                    text
                });
            }
            let _ = writeln!(out, "| {} |", cells.join(" | "));
        }
        for note in &self.notes {
            let _ = write!(out, "\n{note}\n");
        }
        out
    }

    /// CSV with values in shortest round-trip form; notes become `#` lines.
    pub fn to_csv(&self) -> Result<String> {
        let sizes = self.has_sizes();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["model".to_string()];
        if sizes {
            header.push("size".into());
        }
        header.extend(self.tasks.iter().cloned());
        header.push("average".into());
        let csv_err = |e: csv::Error| Error::Eval(format!("csv: {e}"));
        w.write_record(&header).map_err(csv_err)?;
        for row in &self.rows {
            let mut rec = vec![row.model.clone()];
            if sizes {
                rec.push(row.size.clone().unwrap_or_default());
            }
            rec.extend(row.accuracies.iter().map(|a| a.to_string()));
            rec.push(row.average.to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        let body = String::from_utf8(
            w.into_inner()
                .map_err(|e| Error::Eval(format!("csv: {e}")))?,
        )
        .expect("csv writer emits UTF-8");
        let mut out: String = self.notes.iter().map(|n| format!("# {n}\n")).collect();
        out.push_str(&body);
        Ok(out)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let notes = text
            .lines()
            .filter_map(|l| l.strip_prefix("# "))
            .map(str::to_string)
            .collect();
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let csv_err = |e: csv::Error| Error::Eval(format!("csv: {e}"));
        let header: Vec<String> = r
            .headers()
            .map_err(csv_err)?
            .iter()
            .map(str::to_string)
            .collect();
        let sizes = header.get(1).map(String::as_str) == Some("size");
        let first_task = if sizes { 2 } else { 1 };
        if header.first().map(String::as_str) != Some("model")
            || header.last().map(String::as_str) != Some("average")
            || header.len() < first_task + 2
        {
            return Err(Error::Eval(
                "report csv needs model, task and average columns".into(),
            ));
        }
        let tasks = header[first_task..header.len() - 1].to_vec();
        let number = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Eval(format!("not a number: {s:?}")))
        };
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let cells: Vec<&str> = rec.iter().collect();
            rows.push(TableRow {
                model: cells[0].to_string(),
                size: if sizes {
                    Some(cells[1].to_string())
                } else {
                    None
                },
                accuracies: cells[first_task..cells.len() - 1]
                    .iter()
                    .map(|s| number(s))
                    .collect::<Result<_>>()?,
                average: number(cells[cells.len() - 1])?,
            });
        }
        Ok(Self { tasks, rows, notes })
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Markdown => Ok(self.to_markdown()),
            ReportFormat::Csv => self.to_csv(),
        }
    }
}

pub fn render_report(
    entries: &[ReportEntry],
    notes: Vec<String>,
    format: ReportFormat,
) -> Result<String> {
    ComparisonTable::from_entries(entries, notes)?.render(format)
}
