//! `actvit synth`: generate the toy-LLM x planted-task dataset matrix.
//! Idempotent: a rerun with unchanged inputs skips datasets whose recorded
//! checksums still match the files on disk.

use actvit::error::Result;
use actvit::rng::stream;
use actvit::store::{ingest, write_dataset, MANIFEST_FILE};
use actvit::synth::generate_dataset;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{task_for_model, zoo};

use super::{dataset_hash, sha256_hex, Ctx};

#[derive(Serialize, Deserialize, PartialEq)]
struct Fingerprint {
    inputs_sha256: String,
    dataset_sha256: String,
}

pub fn run(ctx: &Ctx) -> Result<()> {
    ctx.write_snapshot()?;
    let (registry, models) = zoo();
    let opts = ctx.config.ingest_options()?;
    let cfg = &ctx.config;
    std::fs::create_dir_all(&cfg.data_dir)?;

    let mut summary = Vec::new();
    let mut hashes = Vec::new();
    for model in &models {
        for task_settings in &cfg.synth.tasks {
            let llm_id = &model.cfg.llm_id;
            let ds_id = &task_settings.name;
            let dir = super::dataset_dir(&cfg.data_dir, llm_id, ds_id);

            // Everything the dataset bytes depend on.
            let inputs = json!({
                "seed": cfg.seed,
                "llm": llm_id,
                "task": task_settings,
                "samples": cfg.synth.samples_per_dataset,
                "test_fraction": cfg.synth.test_fraction,
                "val_fraction": cfg.synth.val_fraction,
                "dtype": cfg.synth.dtype,
                "store_raw": cfg.synth.store_raw,
                "pool": cfg.pool,
            });
            let inputs_sha256 = sha256_hex(serde_json::to_string(&inputs)?.as_bytes());
            let fp_path = dir.join("fingerprint.json");
            if dir.join(MANIFEST_FILE).exists() && fp_path.exists() {
                let recorded: Fingerprint = serde_json::from_slice(&std::fs::read(&fp_path)?)?;
                if recorded.inputs_sha256 == inputs_sha256
                    && recorded.dataset_sha256 == dataset_hash(&dir)?
                {
                    println!("{llm_id}/{ds_id}: skipped, checksum match");
                    hashes.push((format!("{llm_id}/{ds_id}"), recorded.dataset_sha256));
                    summary.push(json!({"llm": llm_id, "dataset": ds_id, "skipped": true}));
                    continue;
                }
            }

            let task_seed = stream(cfg.seed)
                .with_str("task")
                .with_str(llm_id)
                .with_str(ds_id)
                .raw();
            let task = task_for_model(task_settings, model, &opts.pool_config, task_seed)?;
            let data_seed = stream(cfg.seed)
                .with_str("data")
                .with_str(llm_id)
                .with_str(ds_id)
                .raw();
            let (labeled, _) = generate_dataset(
                model,
                &task,
                ds_id,
                cfg.synth.samples_per_dataset,
                data_seed,
            )?;
            let (stored, warnings) = ingest(&labeled, &registry, &opts)?;
            write_dataset(&dir, &stored)?;
            let dataset_sha256 = dataset_hash(&dir)?;
            std::fs::write(
                &fp_path,
                serde_json::to_string_pretty(&Fingerprint {
                    inputs_sha256,
                    dataset_sha256: dataset_sha256.clone(),
                })?,
            )?;
            println!(
                "{llm_id}/{ds_id}: wrote {} samples ({} pool warnings)",
                stored.manifest.sample_count,
                warnings.len()
            );
            hashes.push((format!("{llm_id}/{ds_id}"), dataset_sha256));
            summary.push(json!({
                "llm": llm_id,
                "dataset": ds_id,
                "skipped": false,
                "samples": stored.manifest.sample_count,
                "histogram": stored.manifest.label_histogram,
            }));
        }
    }

    ctx.write_input_hashes(&hashes)?;
    ctx.write_metrics(&json!({
        "command": "synth",
        "seed": cfg.seed,
        "datasets": summary,
    }))?;
    Ok(())
}
