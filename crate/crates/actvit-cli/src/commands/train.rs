//! `actvit train | eval | adapt | zeroshot`: protocol runs over the stored
//! dataset matrix, with model archives and metrics as outputs.

use std::path::Path;

use actvit::error::{Error, Result};
use actvit::model::{load_actvit, save_actvit, ActVitModel, Provenance};
use actvit::report::RunRecord;
use actvit::store::{Corpus, Split};
use actvit::trainer::{
    adapt_la, eval_auc, grid_search, ExperimentPlan, Protocol, TrainHistory,
};
use serde_json::json;

use super::{baseline_records, dataset_dir, detector_record, load_pair, scan_pairs, Ctx};

/// Load every included corpus pair (plus the target pair when a protocol
/// evaluates one) and record input hashes.
fn load_corpus(ctx: &Ctx, plan: &ExperimentPlan) -> Result<(Corpus, Vec<(String, String)>)> {
    let mut corpus = Corpus::new();
    let mut hashes = Vec::new();
    let mut wanted: Vec<(String, String)> = plan
        .corpus
        .included()
        .map(|e| (e.llm_id.clone(), e.dataset_id.clone()))
        .collect();
    if let Some(target) = &plan.target {
        if !target.1.is_empty() && !wanted.contains(target) {
            wanted.push(target.clone());
        }
        if plan.protocol == Protocol::LeaveLlmOut {
            // Adaptation runs over every dataset of the held-out llm.
            for (l, d) in scan_pairs(&ctx.config.data_dir)? {
                let pair = (l, d);
                if pair.0 == target.0 && !wanted.contains(&pair) {
                    wanted.push(pair);
                }
            }
        }
    }
    for (llm, ds) in &wanted {
        let stored = load_pair(&ctx.config.data_dir, llm, ds)?;
        hashes.push((
            format!("{llm}/{ds}"),
            super::dataset_hash(&dataset_dir(&ctx.config.data_dir, llm, ds))?,
        ));
        corpus.insert(stored)?;
    }
    ctx.write_input_hashes(&hashes)?;
    Ok((corpus, wanted))
}

fn history_json(history: &TrainHistory) -> serde_json::Value {
    json!({
        "best_epoch": history.best_epoch,
        "best_val_auc": history.best_val_auc,
        "epochs": history.epochs,
    })
}

pub fn run_train(ctx: &Ctx) -> Result<()> {
    ctx.write_snapshot()?;
    let cfg = &ctx.config;
    let pairs = scan_pairs(&cfg.data_dir)?;
    if pairs.is_empty() {
        return Err(Error::validation(format!(
            "no datasets under {}; run `actvit synth` first",
            cfg.data_dir.display()
        )));
    }
    let plan = cfg.plan.to_plan(&pairs, cfg.singleton_grid(), cfg.seed)?;
    let (corpus, _) = load_corpus(ctx, &plan)?;
    let (registry, _) = crate::config::zoo();
    let base_model_cfg = cfg.model.to_model_config(cfg.pool.to_pool_config()?)?;
    let optim = cfg.optim.to_optim_spec(cfg.seed)?;

    // Pretraining phase (grid search degenerates to one run for a
    // singleton grid).
    let outcome = grid_search(&base_model_cfg, &registry, &corpus, &plan.corpus, &plan.grid, &optim)?;
    let model = outcome.model;
    let provenance = plan.provenance(cfg.seed);
    let history = &outcome.runs[outcome.best_index].history;

    let mut records: Vec<RunRecord> = Vec::new();
    let mut extra = serde_json::Map::new();
    match plan.protocol {
        Protocol::SingleSource | Protocol::JointAll => {
            // The flattened-MLP ablation joins the in-domain comparison.
            let mlp_cfg = actvit::model::ActMlpConfig::for_registry(
                cfg.pool.to_pool_config()?,
                cfg.model.embed_dim,
                &registry,
            );
            let mut mlp = actvit::model::ActMlpModel::<f32>::new(mlp_cfg, cfg.seed)?;
            actvit::trainer::train(&mut mlp, &corpus, &plan.corpus, &optim)?;
            for entry in plan.corpus.included() {
                let ds = corpus.require(&entry.llm_id, &entry.dataset_id)?;
                records.push(detector_record(&model, ds, plan.protocol.name(), optim.batch_size)?);
                records.push(RunRecord {
                    method: "act-mlp".into(),
                    llm_id: entry.llm_id.clone(),
                    dataset_id: entry.dataset_id.clone(),
                    protocol: plan.protocol.name().into(),
                    test_auc: eval_auc(&mlp, &ds.split_samples(Split::Test), optim.batch_size)?,
                    ours: true,
                });
                records.extend(baseline_records(ds, plan.protocol.name())?);
            }
        }
        Protocol::LeaveDatasetOut => {
            let (llm, ds_id) = plan.target.as_ref().expect("validated");
            let ds = corpus.require(llm, ds_id)?;
            let auc = actvit::trainer::zero_shot_eval(&model, &provenance, ds, optim.batch_size)?;
            records.push(RunRecord {
                method: "actvit".into(),
                llm_id: llm.clone(),
                dataset_id: ds_id.clone(),
                protocol: plan.protocol.name().into(),
                test_auc: auc,
                ours: true,
            });
            records.extend(baseline_records(ds, plan.protocol.name())?);
            extra.insert("zero_shot_auc".into(), json!(auc));
        }
        Protocol::LeaveLlmOut => {
            let (llm, _) = plan.target.as_ref().expect("validated");
            let target_desc = registry.require(llm)?.clone();
            let mut adapted_records = Vec::new();
            for (l, d) in corpus
                .pairs()
                .filter(|(l, _)| l == llm)
                .cloned()
                .collect::<Vec<_>>()
            {
                let ds = corpus.require(&l, &d)?;
                let (adapted, hist) = adapt_la(&model, &target_desc, ds, 1.0, &optim)?;
                let auc = eval_auc(&adapted, &ds.split_samples(Split::Test), optim.batch_size)?;
                records.push(RunRecord {
                    method: "actvit".into(),
                    llm_id: l.clone(),
                    dataset_id: d.clone(),
                    protocol: plan.protocol.name().into(),
                    test_auc: auc,
                    ours: true,
                });
                records.extend(baseline_records(ds, plan.protocol.name())?);
                adapted_records.push(json!({
                    "llm": l, "dataset": d, "test_auc": auc,
                    "adapt_best_val_auc": hist.best_val_auc,
                }));
            }
            extra.insert("adaptations".into(), json!(adapted_records));
        }
        Protocol::LowDataAdapt => {
            let (llm, ds_id) = plan.target.as_ref().expect("validated");
            let target_desc = registry.require(llm)?.clone();
            let ds = corpus.require(llm, ds_id)?;
            let mut curve = Vec::new();
            let mut at_largest: Option<(u32, f64)> = None;
            for &pct in &plan.fractions {
                let (adapted, _) = adapt_la(&model, &target_desc, ds, f64::from(pct) / 100.0, &optim)?;
                let auc = eval_auc(&adapted, &ds.split_samples(Split::Test), optim.batch_size)?;
                curve.push(json!({"method": "actvit", "fraction_pct": pct, "test_auc": auc}));
                if at_largest.is_none_or(|(p, _)| pct > p) {
                    at_largest = Some((pct, auc));
                }
            }
            if let Some((_, auc)) = at_largest {
                records.push(RunRecord {
                    method: "actvit".into(),
                    llm_id: llm.clone(),
                    dataset_id: ds_id.clone(),
                    protocol: plan.protocol.name().into(),
                    test_auc: auc,
                    ours: true,
                });
            }
            // Baselines at full data for the overlay.
            for rec in baseline_records(ds, plan.protocol.name())? {
                for &pct in &plan.fractions {
                    curve.push(json!({
                        "method": rec.method, "fraction_pct": pct, "test_auc": rec.test_auc,
                    }));
                }
                records.push(rec);
            }
            extra.insert("curve_points".into(), json!(curve));
        }
    }

    save_actvit(&ctx.out.join("model.bin"), &model, Some(&provenance))?;
    std::fs::write(ctx.out.join("history.jsonl"), history.to_jsonl())?;

    let grid_runs: Vec<serde_json::Value> = outcome
        .runs
        .iter()
        .map(|r| json!({"point": r.point, "best_val_auc": r.history.best_val_auc}))
        .collect();
    let mut metrics = json!({
        "command": "train",
        "protocol": plan.protocol.name(),
        "seed": cfg.seed,
        "records": records,
        "history": history_json(history),
        "grid": {"best_index": outcome.best_index, "runs": grid_runs},
    });
    for (k, v) in extra {
        metrics[k] = v;
    }
    ctx.write_metrics(&metrics)?;
    println!(
        "{}: best val AUC {:.4} over {} grid point(s)",
        plan.protocol.name(),
        outcome.runs[outcome.best_index].history.best_val_auc,
        outcome.runs.len()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(ActVitModel<f32>, Provenance)> {
    let (model, provenance) = load_actvit(path)?;
    Ok((model, provenance.unwrap_or_default()))
}

pub fn run_eval(ctx: &Ctx, model_path: &Path, llm: &str, dataset: &str) -> Result<()> {
    ctx.write_snapshot()?;
    let (model, provenance) = load_model(model_path)?;
    // A model pretrained under a leave-*-out protocol exists to be judged on
    // held-out data; scoring it on a pair from its own training corpus would
    // masquerade as transfer.
    let leave_out = matches!(provenance.protocol.as_str(), "leave_dataset_out" | "leave_llm_out");
    if leave_out && provenance.trained_on(llm, dataset) {
        return Err(Error::protocol(format!(
            "({llm}, {dataset}) was in the {} training corpus; evaluate a held-out pair instead",
            provenance.protocol
        )));
    }
    let ds = load_pair(&ctx.config.data_dir, llm, dataset)?;
    ctx.write_input_hashes(&[
        ("model".into(), super::sha256_file(model_path)?),
        (
            format!("{llm}/{dataset}"),
            super::dataset_hash(&dataset_dir(&ctx.config.data_dir, llm, dataset))?,
        ),
    ])?;
    let batch = ctx.config.optim.batch_size;
    let mut records = vec![detector_record(&model, &ds, "eval", batch)?];
    records.extend(baseline_records(&ds, "eval")?);
    let auc = records[0].test_auc;
    ctx.write_metrics(&json!({
        "command": "eval",
        "seed": ctx.config.seed,
        "records": records,
    }))?;
    println!("eval {llm}/{dataset}: test AUC {auc:.4}");
    Ok(())
}

pub fn run_zeroshot(ctx: &Ctx, model_path: &Path, llm: &str, dataset: &str) -> Result<()> {
    ctx.write_snapshot()?;
    let (model, provenance) = load_model(model_path)?;
    let ds = load_pair(&ctx.config.data_dir, llm, dataset)?;
    ctx.write_input_hashes(&[
        ("model".into(), super::sha256_file(model_path)?),
        (
            format!("{llm}/{dataset}"),
            super::dataset_hash(&dataset_dir(&ctx.config.data_dir, llm, dataset))?,
        ),
    ])?;
    let auc = actvit::trainer::zero_shot_eval(&model, &provenance, &ds, ctx.config.optim.batch_size)?;
    ctx.write_metrics(&json!({
        "command": "zeroshot",
        "seed": ctx.config.seed,
        "records": [RunRecord {
            method: "actvit".into(),
            llm_id: llm.into(),
            dataset_id: dataset.into(),
            protocol: "zero_shot".into(),
            test_auc: auc,
            ours: true,
        }],
    }))?;
    println!("zero-shot {llm}/{dataset}: test AUC {auc:.4}");
    Ok(())
}

pub fn run_adapt(
    ctx: &Ctx,
    model_path: &Path,
    llm: &str,
    dataset: &str,
    fraction_pct: u32,
) -> Result<()> {
    ctx.write_snapshot()?;
    let (model, mut provenance) = load_model(model_path)?;
    let ds = load_pair(&ctx.config.data_dir, llm, dataset)?;
    ctx.write_input_hashes(&[
        ("model".into(), super::sha256_file(model_path)?),
        (
            format!("{llm}/{dataset}"),
            super::dataset_hash(&dataset_dir(&ctx.config.data_dir, llm, dataset))?,
        ),
    ])?;
    let (registry, _) = crate::config::zoo();
    let target = registry.require(llm)?.clone();
    let optim = ctx.config.optim.to_optim_spec(ctx.config.seed)?;
    let (adapted, history) = adapt_la(&model, &target, &ds, f64::from(fraction_pct) / 100.0, &optim)?;
    let auc = eval_auc(&adapted, &ds.split_samples(Split::Test), optim.batch_size)?;

    provenance.protocol = "la_adapt".into();
    provenance
        .trained_pairs
        .push((llm.to_string(), dataset.to_string()));
    save_actvit(&ctx.out.join("model.bin"), &adapted, Some(&provenance))?;
    std::fs::write(ctx.out.join("history.jsonl"), history.to_jsonl())?;
    ctx.write_metrics(&json!({
        "command": "adapt",
        "seed": ctx.config.seed,
        "fraction_pct": fraction_pct,
        "records": [RunRecord {
            method: "actvit".into(),
            llm_id: llm.into(),
            dataset_id: dataset.into(),
            protocol: "la_adapt".into(),
            test_auc: auc,
            ours: true,
        }],
        "history": history_json(&history),
    }))?;
    println!("adapted {llm}/{dataset} at {fraction_pct}%: test AUC {auc:.4}");
    Ok(())
}
