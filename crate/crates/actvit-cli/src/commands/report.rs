//! `actvit report`: merge metrics from one or more run directories into the
//! comparison table (best bold, second underlined, improvement row), plus a
//! learning-curve figure when low-data points are present.

use std::path::{Path, PathBuf};

use actvit::error::{Error, Result};
use actvit::report::{learning_curve, results_table, CurvePoint, RunRecord};
use serde_json::json;

use super::Ctx;

fn metrics_path(input: &Path) -> PathBuf {
    if input.is_dir() {
        input.join("metrics.json")
    } else {
        input.to_path_buf()
    }
}

pub fn run(ctx: &Ctx, inputs: &[PathBuf]) -> Result<()> {
    ctx.write_snapshot()?;
    if inputs.is_empty() {
        return Err(Error::config("report needs at least one metrics input"));
    }
    let mut records: Vec<RunRecord> = Vec::new();
    let mut curve_points: Vec<CurvePoint> = Vec::new();
    let mut hashes = Vec::new();
    for input in inputs {
        let path = metrics_path(input);
        let bytes = std::fs::read(&path).map_err(|e| {
            Error::config(format!("cannot read metrics {}: {e}", path.display()))
        })?;
        hashes.push((path.display().to_string(), super::sha256_hex(&bytes)));
        let value: serde_json::Value = serde_json::from_slice(&bytes)?;
        if let Some(recs) = value.get("records") {
            records.extend(serde_json::from_value::<Vec<RunRecord>>(recs.clone())?);
        }
        if let Some(points) = value.get("curve_points") {
            curve_points.extend(serde_json::from_value::<Vec<CurvePoint>>(points.clone())?);
        }
    }
    ctx.write_input_hashes(&hashes)?;
    if records.is_empty() && curve_points.is_empty() {
        return Err(Error::validation("inputs contained no records"));
    }

    let mut outputs = serde_json::Map::new();
    if !records.is_empty() {
        let table = results_table(&records, Some("actvit"))?;
        std::fs::write(ctx.out.join("table.txt"), &table.text)?;
        std::fs::write(
            ctx.out.join("table.json"),
            serde_json::to_string_pretty(&table.json)?,
        )?;
        print!("{}", table.text);
        outputs.insert("table".into(), table.json);
    }
    if !curve_points.is_empty() {
        let curve = learning_curve(&curve_points)?;
        std::fs::write(ctx.out.join("learning_curve.svg"), &curve.svg)?;
        outputs.insert("curve".into(), curve.json);
    }
    ctx.write_metrics(&json!({
        "command": "report",
        "seed": ctx.config.seed,
        "outputs": outputs,
    }))?;
    Ok(())
}
