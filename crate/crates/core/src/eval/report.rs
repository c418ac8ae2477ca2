//! Analyses over serialized runs and grid searches, and their CSV / JSON /
//! SVG renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::grid::{per_tag_best, AlphaTrial, GridSummary, Target, TagBest};
use super::metrics::MetricReport;
use super::stats::{ols, prediction_distribution_kl, spearman, Divergence, Regression};
use crate::corpus::TaskKind;
use crate::error::{Error, Result};
use crate::trainer::{metrics_from_dump, PredictionRow, RunRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationInput {
    /// 0/1 "predicted as this tag" indicators.
    #[default]
    Indicator,
    /// The head's probability for the tag.
    Probability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub head_a: String,
    pub head_b: String,
    pub tags_a: Vec<String>,
    pub tags_b: Vec<String>,
    /// `rho[i][j]` for (tags_a[i], tags_b[j]); `None` when a side is constant.
    pub rho: Vec<Vec<Option<f64>>>,
}

fn signal(rows: &[PredictionRow], head: &str, vocab: &[String], input: CorrelationInput) -> Result<Vec<Vec<f64>>> {
    let mut cols = vec![Vec::with_capacity(rows.len()); vocab.len()];
    for row in rows {
        let out = row
            .predictions
            .get(head)
            .ok_or_else(|| Error::validation(format!("sentence {} of `{}` lacks head `{head}`", row.sentence, row.doc_id)))?;
        for (j, tag) in vocab.iter().enumerate() {
            cols[j].push(match input {
                CorrelationInput::Indicator => f64::from(out.labels.contains(tag)),
                CorrelationInput::Probability => out.probs.get(j).copied().unwrap_or(0.0),
            });
        }
    }
    Ok(cols)
}

/// Spearman ρ between every tag of head A and every tag of head B over the
/// sentences of a prediction dump.
pub fn cross_head_correlation(
    rows: &[PredictionRow],
    head_a: (&str, &[String]),
    head_b: (&str, &[String]),
    input: CorrelationInput,
) -> Result<CorrelationTable> {
    let a = signal(rows, head_a.0, head_a.1, input)?;
    let b = signal(rows, head_b.0, head_b.1, input)?;
    Ok(CorrelationTable {
        head_a: head_a.0.to_string(),
        head_b: head_b.0.to_string(),
        tags_a: head_a.1.to_vec(),
        tags_b: head_b.1.to_vec(),
        rho: a.iter().map(|x| b.iter().map(|y| spearman(x, y)).collect()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRegression {
    pub target: Target,
    pub fit: Regression,
    /// Columns left out because they were constant or, under a fixed α sum,
    /// to serve as the reference category.
    pub dropped: Vec<String>,
}

/// Least squares of a trial metric on α. `tasks` fixes the column order.
pub fn regress_alpha_to_f1(trials: &[AlphaTrial], tasks: &[String], target: Target) -> Result<Regression> {
    let usable: Vec<&AlphaTrial> = trials.iter().filter(|t| t.score(target).is_some()).collect();
    let rows: Vec<Vec<f64>> = usable
        .iter()
        .map(|t| tasks.iter().map(|k| t.alpha.get(k).copied().unwrap_or(0.0)).collect())
        .collect();
    let y: Vec<f64> = usable.iter().map(|t| t.score(target).unwrap()).collect();
    ols(&rows, &y, tasks)
}

/// As [`regress_alpha_to_f1`], first dropping α columns that never vary and,
/// when the remaining α's always sum to the same constant, the reference
/// column (the primary task when present) so the design has full rank.
pub fn regress_with_reference(
    trials: &[AlphaTrial],
    tasks: &[String],
    primary: &str,
    target: Target,
) -> Result<AlphaRegression> {
    let value = |t: &AlphaTrial, k: &str| t.alpha.get(k).copied().unwrap_or(0.0);
    let usable: Vec<&AlphaTrial> = trials.iter().filter(|t| t.score(target).is_some()).collect();
    let mut dropped = Vec::new();
    let mut columns: Vec<String> = Vec::new();
    for k in tasks {
        let first = usable.first().map_or(0.0, |t| value(t, k));
        if usable.iter().all(|t| value(t, k) == first) {
            dropped.push(k.clone());
        } else {
            columns.push(k.clone());
        }
    }
    let sums: Vec<f64> = usable.iter().map(|t| columns.iter().map(|k| value(t, k)).sum()).collect();
    if columns.len() > 1 && sums.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-9) {
        let reference = columns.iter().position(|c| c == primary).unwrap_or(0);
        dropped.push(columns.remove(reference));
    }
    let fit = regress_alpha_to_f1(trials, &columns, target)?;
    Ok(AlphaRegression { target, fit, dropped })
}

pub fn metric_csv(report: &MetricReport) -> String {
    let mut s = String::from("label,precision,recall,f1,support\n");
    for (i, c) in report.per_class.iter().enumerate() {
        let name = report.labels.get(i).cloned().unwrap_or_else(|| i.to_string());
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6},{}", csv_field(&name), c.precision, c.recall, c.f1, c.support);
    }
    let _ = writeln!(s, "macro,,,{:.6},", report.macro_f1);
    let _ = writeln!(s, "micro,,,{:.6},", report.micro_f1);
    s
}

pub fn confusion_csv(report: &MetricReport) -> String {
    let names: Vec<String> = (0..report.confusion.len())
        .map(|i| csv_field(&report.labels.get(i).cloned().unwrap_or_else(|| i.to_string())))
        .collect();
    let mut s = format!("gold\\predicted,{}\n", names.join(","));
    for (name, row) in names.iter().zip(&report.confusion) {
        let cells: Vec<String> = row.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "{name},{}", cells.join(","));
    }
    s
}

pub fn correlation_csv(table: &CorrelationTable) -> String {
    let mut s = format!(
        "{}\\{},{}\n",
        csv_field(&table.head_a),
        csv_field(&table.head_b),
        table.tags_b.iter().map(|t| csv_field(t)).collect::<Vec<_>>().join(",")
    );
    for (tag, row) in table.tags_a.iter().zip(&table.rho) {
        let cells: Vec<String> = row.iter().map(|r| r.map_or(String::new(), |v| format!("{v:.6}"))).collect();
        let _ = writeln!(s, "{},{}", csv_field(tag), cells.join(","));
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Trials as rows: α per task, macro and micro F1.
pub fn trials_csv(trials: &[AlphaTrial], tasks: &[String]) -> String {
    let mut s = format!("{},macro_f1,micro_f1,status\n", tasks.iter().map(|t| csv_field(t)).collect::<Vec<_>>().join(","));
    for t in trials {
        let alphas: Vec<String> = tasks.iter().map(|k| format!("{:.4}", t.alpha.get(k).copied().unwrap_or(0.0))).collect();
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        let status = if t.failure.is_some() { "failed" } else { "ok" };
        let _ = writeln!(s, "{},{},{},{status}", alphas.join(","), f(t.macro_f1), f(t.micro_f1));
    }
    s
}

/// Heatmap of α weightings per trial, cell shade proportional to α, with
/// the trials' macro and micro F1 printed alongside.
pub fn trials_heatmap_svg(trials: &[AlphaTrial], tasks: &[String]) -> String {
    let cell = 28;
    let left = 150;
    let top = 90;
    let width = left + cell * tasks.len() + 170;
    let height = top + cell * trials.len() + 10;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"monospace\" font-size=\"11\">\n"
    );
    for (j, t) in tasks.iter().enumerate() {
        let x = left + j * cell + cell / 2;
        let _ = writeln!(
            s,
            "<text x=\"{x}\" y=\"{}\" transform=\"rotate(-60 {x} {})\">{}</text>",
            top - 6,
            top - 6,
            xml_escape(t)
        );
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">macro / micro</text>", left + cell * tasks.len() + 10, top - 6);
    for (i, trial) in trials.iter().enumerate() {
        let y = top + i * cell;
        let _ = writeln!(s, "<text x=\"4\" y=\"{}\">trial {i}</text>", y + cell / 2 + 4);
        for (j, k) in tasks.iter().enumerate() {
            let a = trial.alpha.get(k).copied().unwrap_or(0.0).clamp(0.0, 1.0);
            let shade = (255.0 - 155.0 * a).round() as u8;
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({shade},255,{shade})\" stroke=\"#999\"/>",
                left + j * cell
            );
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" font-size=\"9\">{a:.1}</text>",
                left + j * cell + 6,
                y + cell / 2 + 4
            );
        }
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\">{} / {}</text>",
            left + cell * tasks.len() + 10,
            y + cell / 2 + 4,
            f(trial.macro_f1),
            f(trial.micro_f1)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn write(dir: &Path, name: &str, contents: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAnalysis {
    pub primary: String,
    pub metrics: BTreeMap<String, MetricReport>,
    pub prediction_kl: Option<Divergence>,
    /// `None` for single-head runs.
    pub correlations: Option<Vec<CorrelationTable>>,
}

/// Every report for one run, recomputed from its prediction dump.
pub fn analyze_run(record: &RunRecord, input: CorrelationInput) -> Result<RunAnalysis> {
    let mut metrics = BTreeMap::new();
    for t in &record.config.tasks {
        if let Some(r) = metrics_from_dump(&record.predictions, t)? {
            metrics.insert(t.name.clone(), r);
        }
    }
    let primary = record.metrics.primary.clone();
    let spec = record.task(&primary)?;
    let prediction_kl = match (spec.kind, metrics.get(&primary)) {
        (TaskKind::Multiclass, Some(r)) => {
            let gold: Vec<f64> = r.confusion.iter().map(|row| row.iter().sum::<usize>() as f64).collect();
            let pred: Vec<f64> = (0..gold.len())
                .map(|j| r.confusion.iter().map(|row| row[j]).sum::<usize>() as f64)
                .collect();
            Some(prediction_distribution_kl(&pred, &gold)?)
        }
        _ => None,
    };
    let heads: Vec<&str> = record
        .predictions
        .first()
        .map(|r| r.predictions.keys().map(String::as_str).collect())
        .unwrap_or_default();
    let correlations = if heads.len() > 1 {
        let mut tables = Vec::new();
        for other in heads.iter().filter(|h| **h != primary) {
            let o = record.task(other)?;
            tables.push(cross_head_correlation(
                &record.predictions,
                (&primary, &spec.vocabulary),
                (other, &o.vocabulary),
                input,
            )?);
        }
        Some(tables)
    } else {
        None
    };
    Ok(RunAnalysis {
        primary,
        metrics,
        prediction_kl,
        correlations,
    })
}

/// Writes the run analysis as CSV tables plus one JSON summary.
pub fn write_run_reports(analysis: &RunAnalysis, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for (task, r) in &analysis.metrics {
        write(out, &format!("metrics_{task}.csv"), &metric_csv(r), &mut written)?;
        if !r.confusion.is_empty() {
            write(out, &format!("confusion_{task}.csv"), &confusion_csv(r), &mut written)?;
        }
    }
    match &analysis.correlations {
        Some(tables) => {
            for t in tables {
                write(out, &format!("correlation_{}_{}.csv", t.head_a, t.head_b), &correlation_csv(t), &mut written)?;
            }
        }
        None => write(out, "correlation.txt", "not applicable: single-head run\n", &mut written)?,
    }
    write(out, "analysis.json", &json(analysis)?, &mut written)?;
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAnalysis {
    pub primary: String,
    pub tasks: Vec<String>,
    pub summary: GridSummary,
    pub per_tag: Vec<TagBest>,
    pub regression: BTreeMap<String, std::result::Result<AlphaRegression, String>>,
}

pub fn analyze_grid(summary: &GridSummary, tasks: &[String], primary: &str) -> GridAnalysis {
    let mut regression = BTreeMap::new();
    for (name, target) in [("macro", Target::Macro), ("micro", Target::Micro)] {
        let fit = regress_with_reference(&summary.trials, tasks, primary, target).map_err(|e| e.to_string());
        regression.insert(name.to_string(), fit);
    }
    GridAnalysis {
        primary: primary.to_string(),
        tasks: tasks.to_vec(),
        summary: summary.clone(),
        per_tag: per_tag_best(&summary.trials),
        regression,
    }
}

pub fn write_grid_reports(analysis: &GridAnalysis, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    write(out, "trials.csv", &trials_csv(&analysis.summary.trials, &analysis.tasks), &mut written)?;
    write(out, "alpha_heatmap.svg", &trials_heatmap_svg(&analysis.summary.trials, &analysis.tasks), &mut written)?;
    let mut tags = format!("tag,f1,{}\n", analysis.tasks.join(","));
    for t in &analysis.per_tag {
        let alphas: Vec<String> = analysis
            .tasks
            .iter()
            .map(|k| format!("{:.4}", t.alpha.get(k).copied().unwrap_or(0.0)))
            .collect();
        let _ = writeln!(tags, "{},{:.6},{}", csv_field(&t.tag), t.f1, alphas.join(","));
    }
    write(out, "per_tag_best_alpha.csv", &tags, &mut written)?;
    write(out, "grid_analysis.json", &json(analysis)?, &mut written)?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trial(alpha: &[(&str, f64)], mac: f64) -> AlphaTrial {
        AlphaTrial {
            alpha: alpha.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            macro_f1: Some(mac),
            micro_f1: Some(mac),
            per_class_f1: BTreeMap::new(),
            failure: None,
        }
    }

    #[test]
    fn reference_column_is_dropped_on_the_simplex() {
        // F1 = 0.5 + 0.2·a − 0.1·b with p = 1 − a − b
        let pts = [(0.2, 0.3), (0.5, 0.1), (0.1, 0.1), (0.3, 0.6), (0.0, 0.4)];
        let trials: Vec<AlphaTrial> = pts
            .iter()
            .map(|&(a, b)| trial(&[("p", 1.0 - a - b), ("a", a), ("b", b)], 0.5 + 0.2 * a - 0.1 * b))
            .collect();
        let tasks = vec!["p".to_string(), "a".to_string(), "b".to_string()];
        assert!(matches!(regress_alpha_to_f1(&trials, &tasks, Target::Macro), Err(Error::RankDeficient(_))));
        let r = regress_with_reference(&trials, &tasks, "p", Target::Macro).unwrap();
        assert_eq!(r.dropped, ["p"]);
        assert!((r.fit.coefficient("a").unwrap() - 0.2).abs() < 1e-10);
        assert!((r.fit.coefficient("b").unwrap() + 0.1).abs() < 1e-10);
        assert!((r.fit.intercept - 0.5).abs() < 1e-10);
    }

    #[test]
    fn heatmap_is_well_formed() {
        let svg = trials_heatmap_svg(&[trial(&[("p", 0.7), ("a", 0.3)], 0.4)], &["p".into(), "a".into()]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect").count(), 2);
    }
}
