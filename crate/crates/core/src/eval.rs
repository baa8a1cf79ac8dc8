//! Metrics, the eight-task registry, task files and benchmark tables.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HeadKind, LabelValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Average {
    /// F1 of the positive class (label 1).
    Binary,
    /// Unweighted mean over classes seen in gold or predictions.
    Macro,
    /// Mean over gold classes weighted by gold support.
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    F1(F1Average),
    Accuracy,
    Pearson,
    Jaccard,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::F1(F1Average::Binary) => "f1",
            Metric::F1(F1Average::Macro) => "macro-f1",
            Metric::F1(F1Average::Weighted) => "weighted-f1",
            Metric::Accuracy => "accuracy",
            Metric::Pearson => "pearson",
            Metric::Jaccard => "jaccard",
        }
    }
}

fn check_lengths(g: usize, p: usize) -> Result<()> {
    if g != p {
        return Err(Error::Metric(format!("{g} gold labels but {p} predictions")));
    }
    if g == 0 {
        return Err(Error::Metric("no examples to score".into()));
    }
    Ok(())
}

fn class_f1(gold: &[usize], pred: &[usize], c: usize) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&g, &p) in gold.iter().zip(pred) {
        match (g == c, p == c) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    2.0 * precision * recall / (precision + recall)
}

/// F1 score. A class with no true positives scores 0. Macro averaging runs
/// over classes present in gold or predictions; classes absent from both
/// are ignored.
pub fn f1_score(gold: &[usize], pred: &[usize], avg: F1Average) -> Result<f64> {
    check_lengths(gold.len(), pred.len())?;
    match avg {
        F1Average::Binary => Ok(class_f1(gold, pred, 1)),
        F1Average::Macro => {
            let classes: BTreeSet<usize> = gold.iter().chain(pred).copied().collect();
            let sum: f64 = classes.iter().map(|&c| class_f1(gold, pred, c)).sum();
            Ok(sum / classes.len() as f64)
        }
        F1Average::Weighted => {
            let mut support: BTreeMap<usize, usize> = BTreeMap::new();
            for &g in gold {
                *support.entry(g).or_default() += 1;
            }
            let sum: f64 = support
                .iter()
                .map(|(&c, &n)| n as f64 * class_f1(gold, pred, c))
                .sum();
            Ok(sum / gold.len() as f64)
        }
    }
}

pub fn accuracy<L: PartialEq>(gold: &[L], pred: &[L]) -> Result<f64> {
    check_lengths(gold.len(), pred.len())?;
    let hits = gold.iter().zip(pred).filter(|(g, p)| g == p).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Sample Pearson correlation; a constant side is an error.
pub fn pearson(gold: &[f64], pred: &[f64]) -> Result<f64> {
    check_lengths(gold.len(), pred.len())?;
    if gold.len() < 2 {
        return Err(Error::Metric("pearson needs at least 2 examples".into()));
    }
    let n = gold.len() as f64;
    let mg = gold.iter().sum::<f64>() / n;
    let mp = pred.iter().sum::<f64>() / n;
    let (mut sgp, mut sgg, mut spp) = (0.0, 0.0, 0.0);
    for (&g, &p) in gold.iter().zip(pred) {
        sgp += (g - mg) * (p - mp);
        sgg += (g - mg) * (g - mg);
        spp += (p - mp) * (p - mp);
    }
    if sgg == 0.0 || spp == 0.0 {
        let side = if sgg == 0.0 { "gold" } else { "predictions" };
        return Err(Error::Metric(format!("pearson undefined: {side} have zero variance")));
    }
    Ok((sgp / (sgg.sqrt() * spp.sqrt())).clamp(-1.0, 1.0))
}

/// Mean per-example |gold ∩ pred| / |gold ∪ pred|; two empty sets score 1.
pub fn jaccard(gold: &[Vec<usize>], pred: &[Vec<usize>], num_labels: usize) -> Result<f64> {
    check_lengths(gold.len(), pred.len())?;
    let mut total = 0.0;
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if let Some(l) = g.iter().chain(p).find(|&&l| l >= num_labels) {
            return Err(Error::Metric(format!("row {i}: label {l} outside 0..{num_labels}")));
        }
        let g: BTreeSet<usize> = g.iter().copied().collect();
        let p: BTreeSet<usize> = p.iter().copied().collect();
        let union = g.union(&p).count();
        total += if union == 0 {
            1.0
        } else {
            g.intersection(&p).count() as f64 / union as f64
        };
    }
    Ok(total / gold.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputArity {
    Single,
    Pair,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub head_kind: HeadKind,
    pub metric: Metric,
    pub input_arity: InputArity,
    /// Counted in the dialectal average.
    pub dialectal: bool,
}

impl TaskSpec {
    pub fn num_labels(&self) -> usize {
        self.head_kind.output_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match (self.metric, self.head_kind) {
            (Metric::Pearson, HeadKind::Regression) => true,
            (Metric::Jaccard, HeadKind::MultiLabel(_)) => true,
            (Metric::F1(_) | Metric::Accuracy, HeadKind::SingleClass(_) | HeadKind::PairClass(_)) => {
                true
            }
            _ => false,
        };
        let arity_ok = matches!(
            (self.head_kind, self.input_arity),
            (HeadKind::PairClass(_), InputArity::Pair)
                | (
                    HeadKind::SingleClass(_) | HeadKind::MultiLabel(_) | HeadKind::Regression,
                    InputArity::Single
                )
        );
        if !ok || !arity_ok {
            return Err(Error::Config(format!(
                "task {}: metric {} / arity {:?} incompatible with {:?}",
                self.name,
                self.metric.name(),
                self.input_arity,
                self.head_kind
            )));
        }
        Ok(())
    }

    /// Headline metric on the 0..1 scale (Pearson in -1..1).
    pub fn score(&self, gold: &[LabelValue], pred: &[LabelValue]) -> Result<f64> {
        check_lengths(gold.len(), pred.len())?;
        let classes = |v: &[LabelValue]| -> Result<Vec<usize>> {
            v.iter()
                .map(|l| match l {
                    LabelValue::Class(c) => Ok(*c),
                    other => Err(Error::Metric(format!("expected a class label, got {other:?}"))),
                })
                .collect()
        };
        match self.metric {
            Metric::F1(avg) => f1_score(&classes(gold)?, &classes(pred)?, avg),
            Metric::Accuracy => accuracy(&classes(gold)?, &classes(pred)?),
            Metric::Pearson => {
                let reals = |v: &[LabelValue]| -> Result<Vec<f64>> {
                    v.iter()
                        .map(|l| match l {
                            LabelValue::Value(x) => Ok(*x),
                            other => Err(Error::Metric(format!("expected a value, got {other:?}"))),
                        })
                        .collect()
                };
                pearson(&reals(gold)?, &reals(pred)?)
            }
            Metric::Jaccard => {
                let sets = |v: &[LabelValue]| -> Result<Vec<Vec<usize>>> {
                    v.iter()
                        .map(|l| match l {
                            LabelValue::Labels(s) => Ok(s.clone()),
                            other => Err(Error::Metric(format!("expected a label set, got {other:?}"))),
                        })
                        .collect()
                };
                jaccard(&sets(gold)?, &sets(pred)?, self.num_labels())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskRegistry {
    pub tasks: Vec<TaskSpec>,
}

impl TaskRegistry {
    /// FID, MDD, MQ2Q, SVREG, SEC, OOLD, OHSD, XNLI.
    pub fn alue() -> Self {
        let t = |name: &str, head_kind, metric, input_arity, dialectal| TaskSpec {
            name: name.to_string(),
            head_kind,
            metric,
            input_arity,
            dialectal,
        };
        use InputArity::*;
        Self {
            tasks: vec![
                t("FID", HeadKind::SingleClass(2), Metric::F1(F1Average::Binary), Single, true),
                t("MDD", HeadKind::SingleClass(25), Metric::F1(F1Average::Macro), Single, true),
                t("MQ2Q", HeadKind::PairClass(2), Metric::F1(F1Average::Binary), Pair, false),
                t("SVREG", HeadKind::Regression, Metric::Pearson, Single, true),
                t("SEC", HeadKind::MultiLabel(11), Metric::Jaccard, Single, true),
                t("OOLD", HeadKind::SingleClass(2), Metric::F1(F1Average::Binary), Single, true),
                t("OHSD", HeadKind::SingleClass(2), Metric::F1(F1Average::Binary), Single, true),
                t("XNLI", HeadKind::PairClass(3), Metric::Accuracy, Pair, false),
            ],
        }
    }

    pub fn get(&self, name: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.tasks.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for t in &self.tasks {
            t.validate()?;
            if !seen.insert(&t.name) {
                return Err(Error::Config(format!("duplicate task {}", t.name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Average {
    pub value: f64,
    pub tasks: Vec<String>,
    /// Tasks of the requested suite that were not available.
    pub missing: Vec<String>,
}

impl Average {
    pub fn is_subset(&self) -> bool {
        !self.missing.is_empty()
    }
}

/// Unweighted mean of the per-task scores of `suite`. With `allow_subset`
/// missing tasks are skipped and listed; otherwise they are an error.
pub fn average_metric(
    per_task: &BTreeMap<String, f64>,
    suite: &[&str],
    allow_subset: bool,
) -> Result<Average> {
    let mut tasks = Vec::new();
    let mut missing = Vec::new();
    let mut sum = 0.0;
    for &name in suite {
        match per_task.get(name) {
            Some(v) => {
                sum += v;
                tasks.push(name.to_string());
            }
            None => missing.push(name.to_string()),
        }
    }
    if !missing.is_empty() && !allow_subset {
        return Err(Error::Metric(format!("missing tasks: {}", missing.join(", "))));
    }
    if tasks.is_empty() {
        return Err(Error::Metric("no task scores to average".into()));
    }
    Ok(Average {
        value: sum / tasks.len() as f64,
        tasks,
        missing,
    })
}

/// How the columns of a task file map onto examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMapping {
    pub text_a: String,
    pub text_b: String,
    pub label: String,
    /// Label names in id order; when empty labels are integer ids.
    pub label_names: Vec<String>,
    /// For multi-label files with one 0/1 column per label, in id order.
    pub label_columns: Vec<String>,
    pub delimiter: char,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            text_a: "text_a".into(),
            text_b: "text_b".into(),
            label: "label".into(),
            label_names: Vec::new(),
            label_columns: Vec::new(),
            delimiter: '\t',
        }
    }
}

impl ColumnMapping {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskRow {
    pub text_a: String,
    pub text_b: String,
    pub label: LabelValue,
}

fn parse_label(
    raw: &str,
    spec: &TaskSpec,
    mapping: &ColumnMapping,
    where_: &str,
) -> Result<LabelValue> {
    let k = spec.num_labels();
    let class = |s: &str| -> Result<usize> {
        let s = s.trim();
        let id = if mapping.label_names.is_empty() {
            s.parse::<usize>()
                .map_err(|_| Error::Data(format!("{where_}: label `{s}` is not an integer")))?
        } else {
            mapping
                .label_names
                .iter()
                .position(|n| n == s)
                .ok_or_else(|| Error::Data(format!("{where_}: unknown label `{s}`")))?
        };
        if id >= k {
            return Err(Error::Data(format!("{where_}: label {id} outside 0..{k}")));
        }
        Ok(id)
    };
    match spec.head_kind {
        HeadKind::SingleClass(_) | HeadKind::PairClass(_) => Ok(LabelValue::Class(class(raw)?)),
        HeadKind::MultiLabel(_) => {
            let mut ids: Vec<usize> = raw
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(class)
                .collect::<Result<_>>()?;
            ids.sort_unstable();
            ids.dedup();
            Ok(LabelValue::Labels(ids))
        }
        HeadKind::Regression => {
            let v: f64 = raw
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("{where_}: `{raw}` is not a number")))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("{where_}: `{raw}` is not finite")));
            }
            Ok(LabelValue::Value(v))
        }
    }
}

/// Parse a header-bearing delimited task file.
///
/// Default columns are `text_a`, `text_b` (pair tasks) and `label`. Class
/// labels are integer ids, multi-label cells are comma-separated ids, and
/// regression labels are reals.
pub fn parse_task_file(text: &str, spec: &TaskSpec, mapping: &ColumnMapping) -> Result<Vec<TaskRow>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Data("task file is empty".into()))?;
    let cols: Vec<&str> = header.split(mapping.delimiter).map(str::trim).collect();
    let find = |name: &str| -> Result<usize> {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::Data(format!("missing column `{name}` in header")))
    };
    let a = find(&mapping.text_a)?;
    let b = match spec.input_arity {
        InputArity::Pair => Some(find(&mapping.text_b)?),
        InputArity::Single => None,
    };
    let label_cols: Vec<usize> = if mapping.label_columns.is_empty() {
        vec![find(&mapping.label)?]
    } else {
        if !matches!(spec.head_kind, HeadKind::MultiLabel(k) if k == mapping.label_columns.len()) {
            return Err(Error::Config(format!(
                "label_columns needs a multi-label task with {} labels",
                mapping.label_columns.len()
            )));
        }
        mapping.label_columns.iter().map(|c| find(c)).collect::<Result<_>>()?
    };

    let mut rows = Vec::new();
    for (i, line) in lines {
        let where_ = format!("line {}", i + 1);
        let cells: Vec<&str> = line.split(mapping.delimiter).collect();
        let cell = |j: usize| -> Result<&str> {
            cells
                .get(j)
                .copied()
                .ok_or_else(|| Error::Data(format!("{where_}: expected {} columns", cols.len())))
        };
        let label = if mapping.label_columns.is_empty() {
            parse_label(cell(label_cols[0])?, spec, mapping, &where_)?
        } else {
            let mut ids = Vec::new();
            for (id, &j) in label_cols.iter().enumerate() {
                match cell(j)?.trim() {
                    "1" | "true" => ids.push(id),
                    "0" | "false" | "" => {}
                    other => {
                        return Err(Error::Data(format!("{where_}: flag `{other}` is not 0/1")))
                    }
                }
            }
            LabelValue::Labels(ids)
        };
        rows.push(TaskRow {
            text_a: cell(a)?.to_string(),
            text_b: match b {
                Some(j) => cell(j)?.to_string(),
                None => String::new(),
            },
            label,
        });
    }
    Ok(rows)
}

pub fn load_task_file(path: &Path, spec: &TaskSpec, mapping: &ColumnMapping) -> Result<Vec<TaskRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_task_file(&text, spec, mapping).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Write rows in the default column layout.
pub fn format_task_file(rows: &[TaskRow], spec: &TaskSpec) -> String {
    let pair = spec.input_arity == InputArity::Pair;
    let mut out = String::from(if pair { "text_a\ttext_b\tlabel\n" } else { "text_a\tlabel\n" });
    for r in rows {
        let label = match &r.label {
            LabelValue::Class(c) => c.to_string(),
            LabelValue::Labels(s) => s.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","),
            LabelValue::Value(v) => format!("{v}"),
        };
        if pair {
            out.push_str(&format!("{}\t{}\t{label}\n", r.text_a, r.text_b));
        } else {
            out.push_str(&format!("{}\t{label}\n", r.text_a));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskResult {
    pub task: String,
    pub metric: Metric,
    pub dialectal: bool,
    /// Score on the 0..100 scale, or the failure message.
    pub outcome: std::result::Result<f64, String>,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkTable {
    pub rows: Vec<TaskResult>,
    pub average: Option<Average>,
    pub dialectal_average: Option<Average>,
}

impl BenchmarkTable {
    pub fn from_rows(rows: Vec<TaskResult>) -> Self {
        let scores: BTreeMap<String, f64> = rows
            .iter()
            .filter_map(|r| r.outcome.as_ref().ok().map(|v| (r.task.clone(), *v)))
            .collect();
        let all: Vec<&str> = rows.iter().map(|r| r.task.as_str()).collect();
        let dialectal: Vec<&str> = rows
            .iter()
            .filter(|r| r.dialectal)
            .map(|r| r.task.as_str())
            .collect();
        Self {
            average: average_metric(&scores, &all, true).ok(),
            dialectal_average: average_metric(&scores, &dialectal, true).ok(),
            rows,
        }
    }

    pub fn any_failed(&self) -> bool {
        self.rows.iter().any(|r| r.outcome.is_err())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<8} {:<12} {:>9} {:>5}  {}\n", "task", "metric", "score", "dial", "note");
        for r in &self.rows {
            let (score, note) = match &r.outcome {
                Ok(v) => (format!("{v:.2}"), String::new()),
                Err(e) => ("FAILED".to_string(), e.clone()),
            };
            s.push_str(&format!(
                "{:<8} {:<12} {:>9} {:>5}  {}\n",
                r.task,
                r.metric.name(),
                score,
                if r.dialectal { "yes" } else { "" },
                note
            ));
        }
        for (label, avg) in [("average", &self.average), ("dialectal", &self.dialectal_average)] {
            match avg {
                Some(a) => {
                    let note = if a.is_subset() {
                        format!("subset, missing {}", a.missing.join(" "))
                    } else {
                        String::new()
                    };
                    s.push_str(&format!("{:<8} {:<12} {:>9.2} {:>5}  {}\n", label, "", a.value, "", note));
                }
                None => s.push_str(&format!("{label:<8} {:<12} {:>9}\n", "", "n/a")),
            }
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,metric,dialectal,score,status\n");
        for r in &self.rows {
            let (score, status) = match &r.outcome {
                Ok(v) => (format!("{v:.6}"), "ok".to_string()),
                Err(e) => (String::new(), format!("failed: {}", e.replace([',', '\n'], " "))),
            };
            s.push_str(&format!("{},{},{},{score},{status}\n", r.task, r.metric.name(), r.dialectal));
        }
        for (label, avg) in [("average", &self.average), ("dialectal_average", &self.dialectal_average)] {
            if let Some(a) = avg {
                let status = if a.is_subset() { "subset" } else { "ok" };
                s.push_str(&format!("{label},,,{:.6},{status}\n", a.value));
            }
        }
        s
    }
}
