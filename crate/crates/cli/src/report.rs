use std::collections::BTreeMap;
use std::fmt::Write;

use serde::Serialize;

use ccps_core::metrics::MetricReport;

#[derive(Debug, Serialize)]
pub struct EvaluationReport {
    pub scorer: String,
    pub ece_bins: usize,
    pub aggregate: MetricReport,
    pub tasks: BTreeMap<String, MetricReport>,
}

impl EvaluationReport {
    fn rows(&self) -> impl Iterator<Item = (&str, &MetricReport)> {
        std::iter::once(("aggregate", &self.aggregate)).chain(self.tasks.iter().map(|(k, v)| (k.as_str(), v)))
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_owned(), |x| format!("{x:.4}"))
}

pub fn render_table(report: &EvaluationReport) -> String {
    let width = report.rows().map(|(name, _)| name.len()).max().unwrap_or(4).max(4);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>6}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}",
        "task", "n", "ECE", "Brier", "ACC", "AUCPR", "AUROC"
    );
    for (name, m) in report.rows() {
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}",
            name,
            m.n,
            cell(Some(m.ece)),
            cell(Some(m.brier)),
            cell(Some(m.acc)),
            cell(m.aucpr),
            cell(m.auroc)
        );
    }
    out
}

/// Bin table for reliability diagrams: one row per task and bin.
pub fn reliability_csv(report: &EvaluationReport) -> String {
    let mut out = String::from("task,bin,lower,upper,count,confidence,accuracy\n");
    for (name, m) in report.rows() {
        for (j, b) in m.bins.iter().enumerate() {
            let _ = writeln!(out, "{name},{j},{},{},{},{},{}", b.lower, b.upper, b.count, b.confidence, b.accuracy);
        }
    }
    out
}
