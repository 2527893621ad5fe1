//! Evaluation reports: metric lines, summary tables and prediction files.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::Task;
use crate::error::{Error, Result};
use crate::metrics::{LabelScore, Prf};
use crate::mner::{extract_spans, BIOLabelSequence, LabelSchema, SpanCounter};
use crate::mre::relation_metrics;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub split: String,
    pub examples: usize,
    pub overall: Prf,
    /// One row per label observed in gold or predictions.
    pub per_label: Vec<LabelScore>,
}

#[derive(Serialize)]
struct MetricLine<'a> {
    metric: String,
    split: &'a str,
    value: f64,
}

/// Span-level P/R/F1 of predicted against gold BIO sequences.
pub fn ner_report(
    preds: &[BIOLabelSequence],
    golds: &[BIOLabelSequence],
    schema: &LabelSchema,
    split: &str,
) -> Result<EvalReport> {
    if preds.len() != golds.len() {
        return Err(Error::input(format!(
            "{} predictions for {} sentences",
            preds.len(),
            golds.len()
        )));
    }
    let mut counter = SpanCounter::default();
    for (p, g) in preds.iter().zip(golds) {
        counter.add(&extract_spans(p, schema), &extract_spans(g, schema));
    }
    Ok(EvalReport {
        task: Task::Ner,
        split: split.to_string(),
        examples: golds.len(),
        overall: counter.overall(),
        per_label: counter.per_label(),
    })
}

/// Micro P/R/F1 of relation predictions.
pub fn re_report(
    preds: &[usize],
    golds: &[usize],
    labels: &[String],
    negative: Option<usize>,
    split: &str,
) -> Result<EvalReport> {
    let r = relation_metrics(preds, golds, labels, negative)?;
    Ok(EvalReport {
        task: Task::Re,
        split: split.to_string(),
        examples: golds.len(),
        overall: r.overall,
        per_label: r.per_label,
    })
}

impl EvalReport {
    pub fn metric_lines(&self) -> Result<String> {
        let mut lines = vec![
            ("precision".to_string(), self.overall.precision),
            ("recall".to_string(), self.overall.recall),
            ("f1".to_string(), self.overall.f1),
        ];
        for row in &self.per_label {
            lines.push((format!("{}/precision", row.label), row.scores.precision));
            lines.push((format!("{}/recall", row.label), row.scores.recall));
            lines.push((format!("{}/f1", row.label), row.scores.f1));
        }
        let mut out = String::new();
        for (metric, value) in lines {
            out.push_str(&serde_json::to_string(&MetricLine {
                metric,
                split: &self.split,
                value,
            })?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn summary_table(&self) -> String {
        let width = self
            .per_label
            .iter()
            .map(|r| r.label.len())
            .chain([7])
            .max()
            .unwrap_or(7);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:?} evaluation on `{}` ({} examples)",
            self.task, self.split, self.examples
        );
        let _ = writeln!(
            s,
            "{:<width$}  {:>6}  {:>6}  {:>6}  {:>9}  {:>5}  {:>5}",
            "label", "P", "R", "F1", "tp", "pred", "gold"
        );
        for r in &self.per_label {
            let _ = writeln!(
                s,
                "{:<width$}  {:>6.4}  {:>6.4}  {:>6.4}  {:>9}  {:>5}  {:>5}",
                r.label, r.scores.precision, r.scores.recall, r.scores.f1, r.true_positives, r.predicted, r.gold
            );
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:>6.4}  {:>6.4}  {:>6.4}",
            "overall", self.overall.precision, self.overall.recall, self.overall.f1
        );
        s
    }

    /// Writes `metrics_<split>.jsonl` and `summary_<split>.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m = dir.join(format!("metrics_{}.jsonl", self.split));
        std::fs::write(&m, self.metric_lines()?).map_err(|e| Error::io(&m, e))?;
        let t = dir.join(format!("summary_{}.txt", self.split));
        std::fs::write(&t, self.summary_table()).map_err(|e| Error::io(&t, e))
    }
}
