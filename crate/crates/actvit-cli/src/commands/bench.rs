//! `actvit bench`: amortized per-instance inference latency of the detector
//! in eval mode on a single core.

use std::path::Path;

use actvit::error::{Error, Result};
use actvit::model::{load_actvit, ActVitModel};
use actvit::report::latency_bench;
use actvit::store::{ingest, IngestOptions};
use actvit::synth::{generate_dataset, PlantedTask};
use actvit::tensor::PooledTensor;
use serde_json::json;

use super::Ctx;

pub fn run(ctx: &Ctx, model_path: Option<&Path>, batch: usize, repetitions: usize) -> Result<()> {
    ctx.write_snapshot()?;
    let (registry, models) = crate::config::zoo();
    let pool = ctx.config.pool.to_pool_config()?;
    let model = match model_path {
        Some(path) => load_actvit(path)?.0,
        None => ActVitModel::<f32>::new(
            ctx.config.model.to_model_config(pool)?,
            &registry,
            ctx.config.seed,
        )?,
    };

    // A synthetic batch from the middle-sized toy model.
    let toy = &models[1];
    if batch == 0 {
        return Err(Error::validation("bench needs a batch size >= 1"));
    }
    let task = PlantedTask::linear("bench", toy, 1, -1, (8, 12), ctx.config.seed);
    let (labeled, _) = generate_dataset(toy, &task, "bench", batch.max(8), ctx.config.seed)?;
    let opts = IngestOptions {
        pool_config: pool,
        dtype: actvit::store::Dtype::F32,
        store_raw: false,
        test_fraction: 0.0,
        val_fraction: 0.25,
        seed: ctx.config.seed,
    };
    let (stored, _) = ingest(&labeled, &registry, &opts)?;
    let pooled: Vec<&PooledTensor> = stored.samples[..batch].iter().map(|s| &s.pooled).collect();

    let stats = latency_bench(batch, repetitions, || model.forward_eval(&pooled).map(|_| ()))?;
    std::fs::write(
        ctx.out.join("bench.json"),
        serde_json::to_string_pretty(&stats)?,
    )?;
    ctx.write_metrics(&json!({
        "command": "bench",
        "seed": ctx.config.seed,
        "batch": batch,
        "repetitions": repetitions,
    }))?;
    println!(
        "bench: batch {batch} x {repetitions} reps, median {:.1} us/instance (p95 {:.1})",
        stats.median_us_per_instance, stats.p95_us_per_instance
    );
    Ok(())
}
