//! Metrics and reporting: exact rank-based AUC, result tables in the
//! bold-best / underline-second style, learning-curve figures, and a
//! latency benchmark.

pub mod svg;

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};

/// Scores with binary labels and reporting metadata.
#[derive(Debug, Clone, Default)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub method: String,
    pub llm_id: String,
    pub dataset_id: String,
    pub protocol: String,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Self {
        ScoredSet {
            scores,
            labels,
            ..Default::default()
        }
    }
}

/// Exact AUC from integer half-pair counts. The canonicalized division makes
/// complement symmetry hold exactly: auc(s, y) + auc(s, 1-y) == 1.0 in f64.
fn auc_from_counts(num2: u128, den2: u128) -> f64 {
    if 2 * num2 <= den2 {
        num2 as f64 / den2 as f64
    } else {
        1.0 - ((den2 - num2) as f64 / den2 as f64)
    }
}

/// Rank-based AUC: the fraction of (positive, negative) pairs where the
/// positive scores higher, ties counted half. Exact (integer pair counting
/// via sorted tie groups), not a curve approximation.
pub fn auc(set: &ScoredSet) -> Result<f64> {
    let n = set.scores.len();
    if n != set.labels.len() {
        return Err(Error::validation("scores and labels length mismatch"));
    }
    if set.scores.iter().any(|s| s.is_nan()) {
        return Err(Error::validation("scores must not contain NaN"));
    }
    let pos = set.labels.iter().filter(|&&y| y == 1).count();
    let neg = set.labels.iter().filter(|&&y| y == 0).count();
    if pos + neg != n {
        return Err(Error::validation("labels must be binary"));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::validation("AUC needs both classes present"));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        set.scores[a]
            .partial_cmp(&set.scores[b])
            .expect("no NaN scores")
    });

    // Walk ascending tie groups; each positive in a group beats every
    // strictly-lower negative (2 units) and ties the group's negatives (1).
    let mut num2: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        let mut group_pos: u128 = 0;
        let mut group_neg: u128 = 0;
        while j < n && set.scores[order[j]] == set.scores[order[i]] {
            match set.labels[order[j]] {
                1 => group_pos += 1,
                _ => group_neg += 1,
            }
            j += 1;
        }
        num2 += group_pos * (2 * neg_below + group_neg);
        neg_below += group_neg;
        i = j;
    }
    Ok(auc_from_counts(num2, 2 * (pos as u128) * (neg as u128)))
}

/// AUC displayed the way the tables print it: percent, two decimals.
pub fn auc_percent(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

// ---------------------------------------------------------------------------
// Result tables
// ---------------------------------------------------------------------------

/// One evaluated (method, llm, dataset) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub llm_id: String,
    pub dataset_id: String,
    pub protocol: String,
    pub test_auc: f64,
    /// Methods introduced here (the activation-tensor detectors); excluded
    /// from the "best prior baseline" the improvement row compares against.
    pub ours: bool,
}

pub struct ResultsTable {
    pub text: String,
    pub json: serde_json::Value,
}

/// Group records into a methods x (llm, dataset) table. The best score per
/// column is bolded, the second underlined, missing cells are an em dash.
/// When `improvement_method` is given, a final row reports that method's
/// gain over the best non-`ours` baseline per column.
pub fn results_table(
    records: &[RunRecord],
    improvement_method: Option<&str>,
) -> Result<ResultsTable> {
    if records.is_empty() {
        return Err(Error::validation("no records to tabulate"));
    }
    let mut columns: Vec<(String, String)> = records
        .iter()
        .map(|r| (r.llm_id.clone(), r.dataset_id.clone()))
        .collect();
    columns.sort();
    columns.dedup();

    // Methods: priors first, then ours, each alphabetical.
    let mut methods: Vec<(bool, String)> = records
        .iter()
        .map(|r| (r.ours, r.method.clone()))
        .collect();
    methods.sort();
    methods.dedup();

    // Multiple records for one (method, llm, dataset) cell are runs over
    // seeds: the cell shows their mean, and the 1-sigma std is carried in
    // the JSON (rendered as mean±std when more than one run is present).
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.method.clone(), r.llm_id.clone(), r.dataset_id.clone()))
            .or_default()
            .push(r.test_auc);
    }
    let mut cells: BTreeMap<(String, String, String), f64> = BTreeMap::new();
    let mut spreads: BTreeMap<(String, String, String), Option<f64>> = BTreeMap::new();
    for (key, values) in &groups {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        cells.insert(key.clone(), mean);
        let spread = if values.len() > 1 {
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / values.len() as f64;
            Some(var.sqrt())
        } else {
            None
        };
        spreads.insert(key.clone(), spread);
    }

    let method_rows: Vec<serde_json::Value> = methods
        .iter()
        .map(|(ours, m)| {
            let row: Vec<Option<f64>> = columns
                .iter()
                .map(|(l, d)| cells.get(&(m.clone(), l.clone(), d.clone())).copied())
                .collect();
            let row_std: Vec<Option<f64>> = columns
                .iter()
                .map(|(l, d)| {
                    spreads
                        .get(&(m.clone(), l.clone(), d.clone()))
                        .copied()
                        .flatten()
                })
                .collect();
            json!({ "method": m, "ours": ours, "cells": row, "std": row_std })
        })
        .collect();

    let improvement: Option<Vec<Option<f64>>> = improvement_method.map(|target| {
        columns
            .iter()
            .map(|(l, d)| {
                let target_auc = cells.get(&(target.to_string(), l.clone(), d.clone()))?;
                let best_prior = methods
                    .iter()
                    .filter(|(ours, _)| !ours)
                    .filter_map(|(_, m)| cells.get(&(m.clone(), l.clone(), d.clone())))
                    .cloned()
                    .fold(None, |acc: Option<f64>, v| {
                        Some(acc.map_or(v, |a| a.max(v)))
                    })?;
                Some(target_auc - best_prior)
            })
            .collect()
    });

    let json = json!({
        "columns": columns.iter().map(|(l, d)| json!({"llm": l, "dataset": d})).collect::<Vec<_>>(),
        "rows": method_rows,
        "improvement_method": improvement_method,
        "improvement": improvement,
    });
    let text = render_table_from_json(&json)?;
    Ok(ResultsTable { text, json })
}

/// Render the table text from its JSON form (the JSON is the source of
/// truth; re-rendering the JSON reproduces the text byte for byte).
pub fn render_table_from_json(value: &serde_json::Value) -> Result<String> {
    let columns = value["columns"]
        .as_array()
        .ok_or_else(|| Error::format("table json missing columns"))?;
    let rows = value["rows"]
        .as_array()
        .ok_or_else(|| Error::format("table json missing rows"))?;

    let headers: Vec<String> = columns
        .iter()
        .map(|c| format!("{}/{}", c["llm"].as_str().unwrap_or("?"), c["dataset"].as_str().unwrap_or("?")))
        .collect();

    // Per column: best and second-best for markup.
    let mut ranked: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
    for row in rows {
        if let Some(cells) = row["cells"].as_array() {
            for (j, c) in cells.iter().enumerate() {
                if let Some(v) = c.as_f64() {
                    ranked[j].push(v);
                }
            }
        }
    }
    let best: Vec<Option<f64>> = ranked
        .iter()
        .map(|v| v.iter().cloned().fold(None, |a: Option<f64>, x| Some(a.map_or(x, |m| m.max(x)))))
        .collect();
    let second: Vec<Option<f64>> = ranked
        .iter()
        .zip(&best)
        .map(|(v, b)| {
            let b = (*b)?;
            v.iter()
                .cloned()
                .filter(|&x| x < b)
                .fold(None, |a: Option<f64>, x| Some(a.map_or(x, |m| m.max(x))))
        })
        .collect();

    let fmt_cell = |v: Option<f64>, std: Option<f64>, j: usize| -> String {
        match v {
            None => "—".to_string(),
            Some(x) => {
                let mut s = auc_percent(x);
                if let Some(sd) = std {
                    s = format!("{s}±{:.2}", sd * 100.0);
                }
                if Some(x) == best[j] {
                    format!("**{s}**")
                } else if Some(x) == second[j] {
                    format!("_{s}_")
                } else {
                    s
                }
            }
        }
    };

    let mut lines: Vec<Vec<String>> = Vec::new();
    let mut head = vec!["method".to_string()];
    head.extend(headers.iter().cloned());
    lines.push(head);
    for row in rows {
        let mut line = vec![row["method"].as_str().unwrap_or("?").to_string()];
        if let Some(cells) = row["cells"].as_array() {
            let stds = row["std"].as_array();
            for (j, c) in cells.iter().enumerate() {
                let sd = stds.and_then(|arr| arr.get(j)).and_then(|v| v.as_f64());
                line.push(fmt_cell(c.as_f64(), sd, j));
            }
        }
        lines.push(line);
    }
    if let Some(impr) = value["improvement"].as_array() {
        let mut line = vec!["improvement".to_string()];
        for c in impr {
            line.push(match c.as_f64() {
                Some(v) => format!("{:+.2}", v * 100.0),
                None => "—".to_string(),
            });
        }
        lines.push(line);
    }

    let width: Vec<usize> = (0..lines[0].len())
        .map(|j| lines.iter().map(|l| l[j].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, line) in lines.iter().enumerate() {
        let padded: Vec<String> = line
            .iter()
            .enumerate()
            .map(|(j, cell)| {
                let pad = width[j] - cell.chars().count();
                if j == 0 {
                    format!("{cell}{}", " ".repeat(pad))
                } else {
                    format!("{}{cell}", " ".repeat(pad))
                }
            })
            .collect();
        out.push_str(&padded.join("  "));
        out.push('\n');
        if i == 0 {
            let total: usize = width.iter().sum::<usize>() + 2 * (width.len() - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Learning curves
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub method: String,
    /// Training-data fraction in percent (5, 10, 20, 50, 100).
    pub fraction_pct: u32,
    pub test_auc: f64,
}

pub struct LearningCurve {
    pub svg: String,
    pub json: serde_json::Value,
}

/// AUC vs training fraction, one line per method.
pub fn learning_curve(points: &[CurvePoint]) -> Result<LearningCurve> {
    let mut fractions: Vec<u32> = points.iter().map(|p| p.fraction_pct).collect();
    fractions.sort_unstable();
    fractions.dedup();
    if fractions.len() < 2 {
        return Err(Error::validation(
            "learning curve needs at least two distinct fractions",
        ));
    }
    let mut methods: Vec<String> = points.iter().map(|p| p.method.clone()).collect();
    methods.sort();
    methods.dedup();

    let series: Vec<svg::Series> = methods
        .iter()
        .map(|m| {
            let mut pts: Vec<(f64, f64)> = points
                .iter()
                .filter(|p| &p.method == m)
                .map(|p| (f64::from(p.fraction_pct), p.test_auc * 100.0))
                .collect();
            pts.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite fractions"));
            svg::Series {
                name: m.clone(),
                points: pts,
            }
        })
        .collect();

    let svg = svg::line_chart(
        "training fraction (%)",
        "test AUC (%)",
        &series,
    );
    let json = json!({
        "fractions_pct": fractions,
        "series": points,
    });
    Ok(LearningCurve { svg, json })
}

// ---------------------------------------------------------------------------
// Latency
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencyStats {
    pub repetitions: usize,
    pub batch_size: usize,
    pub median_us_per_instance: f64,
    pub p95_us_per_instance: f64,
    pub mean_us_per_instance: f64,
}

/// Wall-clock the supplied batched operation. Reports amortized per-instance
/// latency; two untimed warmup calls precede measurement.
pub fn latency_bench(
    batch_size: usize,
    repetitions: usize,
    mut op: impl FnMut() -> Result<()>,
) -> Result<LatencyStats> {
    if repetitions == 0 {
        return Err(Error::validation("latency bench needs repetitions >= 1"));
    }
    if batch_size == 0 {
        return Err(Error::validation("latency bench needs a non-empty batch"));
    }
    for _ in 0..2 {
        op()?;
    }
    let mut per_instance_us = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t0 = Instant::now();
        op()?;
        let us = t0.elapsed().as_secs_f64() * 1e6;
        per_instance_us.push(us / batch_size as f64);
    }
    per_instance_us.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    let pick = |q: f64| -> f64 {
        let idx = ((per_instance_us.len() as f64 - 1.0) * q).round() as usize;
        per_instance_us[idx]
    };
    Ok(LatencyStats {
        repetitions,
        batch_size,
        median_us_per_instance: pick(0.5),
        p95_us_per_instance: pick(0.95),
        mean_us_per_instance: per_instance_us.iter().sum::<f64>() / repetitions as f64,
    })
}
