//! Text, CSV and JSON renderings of an evaluation report, with optional
//! deltas against a baseline run.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ErrorBreakdown, EvalError, EvalReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Text,
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "text" | "text-table" | "table" | "txt" => Ok(Self::Text),
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(EvalError::UnknownFormat(s.to_string())),
        }
    }
}

/// One long-format report cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub task: String,
    pub metric: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub delta: Option<f64>,
}

fn base_rows(report: &EvalReport, errors: &ErrorBreakdown) -> Vec<ReportRow> {
    let row = |dataset: &str, task: &str, metric: String, value: f64| ReportRow {
        dataset: dataset.to_string(),
        task: task.to_string(),
        metric,
        value,
        delta: None,
    };
    let mut rows = Vec::new();
    for (dataset, d) in &report.per_dataset {
        for (k, v) in &d.recall {
            rows.push(row(dataset, &d.task, format!("R@{k}"), *v));
        }
    }
    for (task, t) in &report.per_task {
        for (k, v) in &t.recall {
            rows.push(row("*", task, format!("R@{k}"), *v));
        }
        rows.push(row("*", task, "R@primary".into(), t.primary));
    }
    rows.push(row("average", "*", "R@primary".into(), report.average));
    rows.push(row("errors", "*", "wrong_modality".into(), errors.wrong_modality));
    rows.push(row("errors", "*", "wrong_domain".into(), errors.wrong_domain));
    rows.push(row("errors", "*", "other".into(), errors.other));
    rows
}

/// Report cells in stable order, with `value − baseline` deltas when a
/// baseline run is given.
pub fn report_rows(
    report: &EvalReport,
    errors: &ErrorBreakdown,
    baseline: Option<(&EvalReport, &ErrorBreakdown)>,
) -> Vec<ReportRow> {
    let mut rows = base_rows(report, errors);
    if let Some((b, be)) = baseline {
        let base: HashMap<(String, String, String), f64> =
            base_rows(b, be).into_iter().map(|r| ((r.dataset, r.task, r.metric), r.value)).collect();
        for r in &mut rows {
            r.delta = base.get(&(r.dataset.clone(), r.task.clone(), r.metric.clone())).map(|b| r.value - b);
        }
    }
    rows
}

fn metric_order(m: &str) -> (usize, String) {
    match m.strip_prefix("R@").and_then(|k| k.parse::<usize>().ok()) {
        Some(k) => (k, String::new()),
        None => (usize::MAX, m.to_string()),
    }
}

fn render_text(rows: &[ReportRow], with_delta: bool) -> String {
    let metrics: BTreeSet<(usize, String)> = rows.iter().map(|r| metric_order(&r.metric)).collect();
    let metric_names: Vec<String> = metrics
        .iter()
        .map(|(k, name)| if name.is_empty() { format!("R@{k}") } else { name.clone() })
        .collect();
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let key = (r.dataset.clone(), r.task.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let lookup: HashMap<(&str, &str, &str), &ReportRow> =
        rows.iter().map(|r| ((r.dataset.as_str(), r.task.as_str(), r.metric.as_str()), r)).collect();
    let mut header = vec!["dataset".to_string(), "task".to_string()];
    header.extend(metric_names.iter().cloned());
    if with_delta {
        header.extend(metric_names.iter().map(|m| format!("Δ{m}")));
    }
    let mut table = vec![header];
    for (dataset, task) in &keys {
        let mut line = vec![dataset.clone(), task.clone()];
        let cells: Vec<Option<&&ReportRow>> =
            metric_names.iter().map(|m| lookup.get(&(dataset.as_str(), task.as_str(), m.as_str()))).collect();
        line.extend(cells.iter().map(|c| c.map(|r| format!("{:.4}", r.value)).unwrap_or_default()));
        if with_delta {
            line.extend(
                cells.iter().map(|c| c.and_then(|r| r.delta).map(|d| format!("{d:+.4}")).unwrap_or_default()),
            );
        }
        table.push(line);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for line in &table {
        let cells: Vec<String> = line
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (cell, w))| if i < 2 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
    }
    out
}

fn render_csv(rows: &[ReportRow], with_delta: bool) -> String {
    let mut out = String::from(if with_delta { "dataset,task,metric,value,delta\n" } else { "dataset,task,metric,value\n" });
    for r in rows {
        write!(out, "{},{},{},{}", r.dataset, r.task, r.metric, r.value).unwrap();
        if with_delta {
            out.push(',');
            if let Some(d) = r.delta {
                write!(out, "{d}").unwrap();
            }
        }
        out.push('\n');
    }
    out
}

pub fn render_report(
    report: &EvalReport,
    errors: &ErrorBreakdown,
    baseline: Option<(&EvalReport, &ErrorBreakdown)>,
    format: ReportFormat,
) -> String {
    let rows = report_rows(report, errors, baseline);
    let with_delta = baseline.is_some();
    match format {
        ReportFormat::Text => render_text(&rows, with_delta),
        ReportFormat::Csv => render_csv(&rows, with_delta),
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(&rows).expect("rows serialize");
            s.push('\n');
            s
        }
    }
}

pub fn write_report(
    path: &Path,
    report: &EvalReport,
    errors: &ErrorBreakdown,
    baseline: Option<(&EvalReport, &ErrorBreakdown)>,
    format: ReportFormat,
) -> Result<(), EvalError> {
    std::fs::write(path, render_report(report, errors, baseline, format))?;
    Ok(())
}

/// Parses CSV written by [`render_report`].
pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>, EvalError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| EvalError::MalformedReport("empty".into()))?;
    let with_delta = match header {
        "dataset,task,metric,value" => false,
        "dataset,task,metric,value,delta" => true,
        other => return Err(EvalError::MalformedReport(format!("unexpected header {other:?}"))),
    };
    let num = |s: &str| s.parse::<f64>().map_err(|e| EvalError::MalformedReport(format!("{s:?}: {e}")));
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != if with_delta { 5 } else { 4 } {
                return Err(EvalError::MalformedReport(format!("bad row {line:?}")));
            }
            let delta = match f.get(4) {
                Some(d) if !d.is_empty() => Some(num(d)?),
                _ => None,
            };
            Ok(ReportRow {
                dataset: f[0].to_string(),
                task: f[1].to_string(),
                metric: f[2].to_string(),
                value: num(f[3])?,
                delta,
            })
        })
        .collect()
}
