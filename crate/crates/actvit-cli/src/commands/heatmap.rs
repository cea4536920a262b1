//! `actvit heatmap`: per-(layer, token-offset) probe AUC matrix for one
//! dataset, written as JSON plus an SVG figure with the best cell boxed.

use actvit::baselines::{heatmap, probe_star, ProbeConfig, ProbeDataset, TokenOffsetSet};
use actvit::error::Result;
use serde_json::json;

use super::{dataset_dir, load_pair, Ctx};

pub fn run(ctx: &Ctx, llm: &str, dataset: &str) -> Result<()> {
    ctx.write_snapshot()?;
    let ds = load_pair(&ctx.config.data_dir, llm, dataset)?;
    ctx.write_input_hashes(&[(
        format!("{llm}/{dataset}"),
        super::dataset_hash(&dataset_dir(&ctx.config.data_dir, llm, dataset))?,
    )])?;

    let data = ProbeDataset::from_stored(&ds)?;
    let offsets = TokenOffsetSet::default();
    let probe_cfg = ProbeConfig::default();
    let hm = heatmap(&data, &offsets, &probe_cfg)?;
    let (best, fits) = probe_star(&data, &offsets, &probe_cfg)?;

    std::fs::write(ctx.out.join("heatmap.svg"), &hm.svg)?;
    ctx.write_metrics(&json!({
        "command": "heatmap",
        "seed": ctx.config.seed,
        "llm": llm,
        "dataset": dataset,
        "offsets": offsets.offsets(),
        "matrix": hm.matrix,
        "best_cell": {"layer": hm.best_cell.0, "offset_index": hm.best_cell.1},
        "probe_star": {
            "layer": best.layer,
            "offset": best.offset,
            "c": best.best_c,
            "val_auc": best.val_auc,
            "test_auc": best.test_auc,
            "fits": fits,
        },
    }))?;
    println!(
        "heatmap {llm}/{dataset}: {} x {} cells, best test AUC {:.4} at (layer {}, offset {})",
        hm.matrix.len(),
        offsets.len(),
        hm.matrix[hm.best_cell.0][hm.best_cell.1],
        hm.best_cell.0,
        offsets.offsets()[hm.best_cell.1],
    );
    Ok(())
}
