//! Command implementations. Every command writes a self-contained output
//! directory: the resolved config snapshot, the seed, content hashes of its
//! inputs, and its metrics. Metrics files contain no wall-clock data, so a
//! reference-mode rerun with the same seed reproduces them byte for byte.

pub mod bench;
pub mod heatmap;
pub mod report;
pub mod synth;
pub mod train;

use std::path::{Path, PathBuf};

use actvit::error::{Error, Result};
use actvit::report::RunRecord;
use actvit::store::{read_dataset, Split, StoredDataset, MANIFEST_FILE};
use actvit::trainer::eval_auc;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub struct Ctx {
    pub config: RunConfig,
    pub out: PathBuf,
}

impl Ctx {
    pub fn new(config: RunConfig, out: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&out)?;
        Ok(Ctx { config, out })
    }

    /// Resolved config snapshot plus seed; written before any work.
    pub fn write_snapshot(&self) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.config)?;
        std::fs::write(self.out.join("config.json"), json)?;
        Ok(())
    }

    pub fn write_input_hashes(&self, hashes: &[(String, String)]) -> Result<()> {
        let value: serde_json::Value = hashes
            .iter()
            .map(|(name, hash)| serde_json::json!({"input": name, "sha256": hash}))
            .collect();
        std::fs::write(
            self.out.join("inputs.json"),
            serde_json::to_string_pretty(&value)?,
        )?;
        Ok(())
    }

    /// Metrics must stay free of timestamps and host paths so reruns are
    /// byte-identical.
    pub fn write_metrics(&self, metrics: &serde_json::Value) -> Result<()> {
        std::fs::write(
            self.out.join("metrics.json"),
            serde_json::to_string_pretty(metrics)?,
        )?;
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Content hash of one dataset directory (manifest plus shards, in
/// manifest order).
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest_bytes = std::fs::read(&manifest_path)?;
    let manifest: actvit::store::DatasetManifest = serde_json::from_slice(&manifest_bytes)?;
    let mut hasher = Sha256::new();
    hasher.update(&manifest_bytes);
    for shard in &manifest.shards {
        hasher.update(std::fs::read(dir.join(shard))?);
    }
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn dataset_dir(data_dir: &Path, llm_id: &str, dataset_id: &str) -> PathBuf {
    data_dir.join(format!("{llm_id}__{dataset_id}"))
}

/// All (llm, dataset) pairs present under the data directory, sorted.
pub fn scan_pairs(data_dir: &Path) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    if !data_dir.exists() {
        return Ok(pairs);
    }
    for entry in std::fs::read_dir(data_dir)? {
        let entry = entry?;
        if !entry.path().join(MANIFEST_FILE).exists() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some((llm, ds)) = name.split_once("__") {
            pairs.push((llm.to_string(), ds.to_string()));
        }
    }
    pairs.sort();
    Ok(pairs)
}

pub fn load_pair(data_dir: &Path, llm_id: &str, dataset_id: &str) -> Result<StoredDataset> {
    let dir = dataset_dir(data_dir, llm_id, dataset_id);
    if !dir.join(MANIFEST_FILE).exists() {
        return Err(Error::validation(format!(
            "dataset ({llm_id}, {dataset_id}) not found at {}; run `actvit synth` first",
            dir.display()
        )));
    }
    read_dataset(&dir)
}

/// Comparison-method records for one dataset's test split: the six
/// logit/probability aggregators plus the best static probe when raw
/// tensors are stored.
pub fn baseline_records(ds: &StoredDataset, protocol: &str) -> Result<Vec<RunRecord>> {
    use actvit::baselines::{aggregator_scores, probe_star, AggregatorKind, ProbeConfig, ProbeDataset, TokenOffsetSet};
    use actvit::report::auc;

    let mut records = Vec::new();
    for kind in AggregatorKind::all() {
        let set = aggregator_scores(ds, Split::Test, kind)?;
        records.push(RunRecord {
            method: kind.name(),
            llm_id: ds.manifest.llm_id.clone(),
            dataset_id: ds.manifest.dataset_id.clone(),
            protocol: protocol.to_string(),
            test_auc: auc(&set)?,
            ours: false,
        });
    }
    if ds.manifest.stores_raw {
        let data = ProbeDataset::from_stored(ds)?;
        let (best, _) = probe_star(&data, &TokenOffsetSet::default(), &ProbeConfig::default())?;
        records.push(RunRecord {
            method: "probe-star".to_string(),
            llm_id: ds.manifest.llm_id.clone(),
            dataset_id: ds.manifest.dataset_id.clone(),
            protocol: protocol.to_string(),
            test_auc: best.test_auc,
            ours: false,
        });
    }
    Ok(records)
}

/// Test-split record for the detector under evaluation.
pub fn detector_record(
    model: &actvit::model::ActVitModel<f32>,
    ds: &StoredDataset,
    protocol: &str,
    batch_size: usize,
) -> Result<RunRecord> {
    let test = ds.split_samples(Split::Test);
    Ok(RunRecord {
        method: "actvit".to_string(),
        llm_id: ds.manifest.llm_id.clone(),
        dataset_id: ds.manifest.dataset_id.clone(),
        protocol: protocol.to_string(),
        test_auc: eval_auc(model, &test, batch_size)?,
        ours: true,
    })
}
