//! On-disk activation datasets: pooled-at-rest shards, manifests with
//! stratified splits, and multi-LLM corpus assembly.
//!
//! A dataset directory holds `manifest.json` plus one or more shard files in
//! the archive container format. Shards store pooled tensors by default
//! (pooling is applied at ingest); raw tensors are an opt-in extra. Storage
//! is 16-bit by default with 32-bit compute; ingest pre-quantizes so that a
//! written dataset reads back bit-exactly.

pub mod archive;
mod corpus;

pub use archive::{Archive, ArchiveWriter, Dtype, TensorRecord, MODEL_MAGIC, SHARD_MAGIC};
pub use corpus::{assemble_epoch, Batch, Corpus, CorpusEntry, CorpusSpec, PairKey};

use std::collections::BTreeMap;
use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::LlmRegistry;
use crate::rng::{shuffle, stream};
use crate::synth::LabeledDataset;
use crate::tensor::{pool, ActivationTensor, PoolConfig, PoolWarning, PooledTensor, Tensor3};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = "LOCK";
const SHARD_CAPACITY: usize = 2048;
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSpec {
    /// Split index lists must be disjoint and cover 0..n exactly.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (name, list) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for &i in list {
                if i >= n {
                    return Err(Error::validation(format!(
                        "{name} split references index {i} >= sample count {n}"
                    )));
                }
                if seen[i] {
                    return Err(Error::validation(format!(
                        "splits overlap at index {i} ({name})"
                    )));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::validation("splits do not cover all samples"));
        }
        Ok(())
    }

    pub fn get(&self, which: Split) -> &[usize] {
        match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelHistogram {
    pub neg: usize,
    pub pos: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub dataset_id: String,
    pub llm_id: String,
    pub sample_count: usize,
    pub splits: SplitSpec,
    pub label_histogram: LabelHistogram,
    /// Present iff shards hold pooled tensors (the default).
    pub pool_config: Option<PoolConfig>,
    pub stores_raw: bool,
    pub dtype: Dtype,
    /// How labels were produced; reserved for external extractors.
    pub label_method: Option<String>,
    pub shards: Vec<String>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported dataset format version {}",
                self.format_version
            )));
        }
        self.splits.validate(self.sample_count)?;
        if self.label_histogram.neg + self.label_histogram.pos != self.sample_count {
            return Err(Error::validation(
                "label histogram does not sum to sample count",
            ));
        }
        Ok(())
    }
}

/// One stored sample: the pooled tensor plus optional extras.
#[derive(Debug, Clone)]
pub struct PooledSample {
    pub pooled: PooledTensor,
    pub raw: Option<ActivationTensor>,
    pub chosen_logits: Vec<f32>,
    pub chosen_probas: Vec<f32>,
}

impl PooledSample {
    pub fn label(&self) -> u8 {
        self.pooled.label.expect("stored samples are labeled")
    }

    pub fn sample_id(&self) -> &str {
        &self.pooled.sample_id
    }
}

#[derive(Debug, Clone)]
pub struct StoredDataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<PooledSample>,
}

impl StoredDataset {
    pub fn split_samples(&self, which: Split) -> Vec<&PooledSample> {
        self.manifest
            .splits
            .get(which)
            .iter()
            .map(|&i| &self.samples[i])
            .collect()
    }

    pub fn split_labels(&self, which: Split) -> Vec<u8> {
        self.manifest
            .splits
            .get(which)
            .iter()
            .map(|&i| self.samples[i].label())
            .collect()
    }
}

/// Stratified (train, val) index split: per-class val counts are
/// round(val_fraction * class size), membership drawn by seeded shuffle,
/// both lists returned in ascending order.
pub fn stratified_split(
    n: usize,
    val_fraction: f64,
    seed: u64,
    labels: &[u8],
) -> Result<(Vec<usize>, Vec<usize>)> {
    if labels.len() != n {
        return Err(Error::validation("labels length != n"));
    }
    if !(0.0 < val_fraction && val_fraction < 1.0) {
        return Err(Error::validation("val_fraction must be in (0, 1)"));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &y) in labels.iter().enumerate() {
        if y > 1 {
            return Err(Error::validation(format!("label {y} is not binary")));
        }
        by_class[y as usize].push(i);
    }
    if by_class[0].is_empty() || by_class[1].is_empty() {
        return Err(Error::validation(
            "stratified split requires both classes present",
        ));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (class, indices) in by_class.iter_mut().enumerate() {
        let mut rng = stream(seed).with_str("split").with(class as u64).rng();
        shuffle(&mut rng, indices);
        let k = (val_fraction * indices.len() as f64).round() as usize;
        val.extend_from_slice(&indices[..k]);
        train.extend_from_slice(&indices[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub pool_config: PoolConfig,
    pub dtype: Dtype,
    pub store_raw: bool,
    /// Fraction of all samples carved out as the test split (may be 0).
    pub test_fraction: f64,
    /// Fraction of the remaining training samples used for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            pool_config: PoolConfig::default(),
            dtype: Dtype::F16,
            store_raw: false,
            test_fraction: 0.5,
            val_fraction: 0.2,
            seed: 42,
        }
    }
}

fn quantize(data: &mut Tensor3, dtype: Dtype) {
    if dtype == Dtype::F16 {
        let (l, n, d) = data.shape();
        for li in 0..l {
            for ni in 0..n {
                for di in 0..d {
                    let v = data.get(li, ni, di);
                    data.set(li, ni, di, f16::from_f32(v).to_f32());
                }
            }
        }
    }
}

/// Validate, pool, split, and assemble a generated dataset for storage.
/// Tensors are pre-quantized to the storage dtype so that writing and
/// re-reading is bit-exact.
pub fn ingest(
    labeled: &LabeledDataset,
    registry: &LlmRegistry,
    opts: &IngestOptions,
) -> Result<(StoredDataset, Vec<PoolWarning>)> {
    if labeled.samples.is_empty() {
        return Err(Error::validation("cannot ingest an empty dataset"));
    }
    let mut warnings = Vec::new();
    let mut samples = Vec::with_capacity(labeled.samples.len());
    let mut histogram = LabelHistogram::default();
    for s in &labeled.samples {
        if s.at.llm_id != labeled.llm_id {
            return Err(Error::validation(format!(
                "sample '{}' has llm '{}' but dataset is for '{}'",
                s.at.sample_id, s.at.llm_id, labeled.llm_id
            )));
        }
        s.at.validate(registry)?;
        let label = s
            .at
            .label
            .ok_or_else(|| Error::validation(format!("sample '{}' is unlabeled", s.at.sample_id)))?;
        match label {
            0 => histogram.neg += 1,
            _ => histogram.pos += 1,
        }
        let outcome = pool(&s.at, &opts.pool_config)?;
        let mut pooled = outcome.tensor;
        warnings.extend(outcome.warnings);
        // The pad sentinel is not f16-representable; stored pad pixels are
        // neutral zeros instead.
        pooled.sanitize_pad_pixels();
        quantize(&mut pooled.data, opts.dtype);
        let raw = if opts.store_raw {
            let mut raw = s.at.clone();
            quantize(&mut raw.data, opts.dtype);
            Some(raw)
        } else {
            None
        };
        samples.push(PooledSample {
            pooled,
            raw,
            chosen_logits: s.chosen_logits.clone(),
            chosen_probas: s.chosen_probas.clone(),
        });
    }

    let labels: Vec<u8> = samples.iter().map(|s| s.label()).collect();
    let n = samples.len();
    let splits = {
        let (rest, test) = if opts.test_fraction > 0.0 {
            let test_seed = stream(opts.seed).with_str("test").raw();
            stratified_split(n, opts.test_fraction, test_seed, &labels)?
        } else {
            ((0..n).collect(), Vec::new())
        };
        let rest_labels: Vec<u8> = rest.iter().map(|&i| labels[i]).collect();
        let (train_local, val_local) =
            stratified_split(rest.len(), opts.val_fraction, opts.seed, &rest_labels)?;
        let train: Vec<usize> = train_local.iter().map(|&i| rest[i]).collect();
        let val: Vec<usize> = val_local.iter().map(|&i| rest[i]).collect();
        SplitSpec { train, val, test }
    };

    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        dataset_id: labeled.dataset_id.clone(),
        llm_id: labeled.llm_id.clone(),
        sample_count: n,
        splits,
        label_histogram: histogram,
        pool_config: Some(opts.pool_config),
        stores_raw: opts.store_raw,
        dtype: opts.dtype,
        label_method: Some("synthetic-planted".to_string()),
        shards: Vec::new(),
    };
    let ds = StoredDataset { manifest, samples };
    ds.manifest.validate()?;
    Ok((ds, warnings))
}

#[derive(Serialize, Deserialize)]
struct ShardMeta {
    dataset_id: String,
    llm_id: String,
    shard_index: usize,
    /// (layers, tokens) of each sample before pooling, keyed by sample id.
    source_shapes: BTreeMap<String, (usize, usize)>,
}

/// Removes the dataset lock file on drop.
struct LockGuard {
    path: std::path::PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn acquire_lock(dir: &Path) -> Result<LockGuard> {
    let path = dir.join(LOCK_FILE);
    match std::fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(&path)
    {
        Ok(_) => Ok(LockGuard { path }),
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::validation(format!(
            "dataset directory {} is locked by another writer",
            dir.display()
        ))),
        Err(e) => Err(e.into()),
    }
}

/// Write shard files plus manifest. Single writer per directory, enforced by
/// a lock file.
pub fn write_dataset(dir: &Path, ds: &StoredDataset) -> Result<()> {
    ds.manifest.validate()?;
    if ds.samples.len() != ds.manifest.sample_count {
        return Err(Error::validation("sample count does not match manifest"));
    }
    for s in &ds.samples {
        if s.pooled.llm_id != ds.manifest.llm_id {
            return Err(Error::validation(format!(
                "sample '{}' has llm '{}' but dataset is for '{}'",
                s.pooled.sample_id, s.pooled.llm_id, ds.manifest.llm_id
            )));
        }
    }

    std::fs::create_dir_all(dir)?;
    let _lock = acquire_lock(dir)?;

    let mut manifest = ds.manifest.clone();
    manifest.shards.clear();
    for (shard_index, chunk) in ds.samples.chunks(SHARD_CAPACITY).enumerate() {
        let mut writer = ArchiveWriter::new();
        let mut source_shapes = BTreeMap::new();
        for s in chunk {
            let sid = s.sample_id();
            let (l, n, d) = s.pooled.data.shape();
            writer.push_tensor(
                &format!("{sid}/pooled"),
                ds.manifest.dtype,
                &[l, n, d],
                s.pooled.data.as_slice(),
                Some(sid),
                Some(s.label()),
            );
            source_shapes.insert(sid.to_string(), s.pooled.source_shape);
            if let Some(raw) = &s.raw {
                let (l, n, d) = raw.data.shape();
                writer.push_tensor(
                    &format!("{sid}/raw"),
                    ds.manifest.dtype,
                    &[l, n, d],
                    raw.data.as_slice(),
                    Some(sid),
                    Some(s.label()),
                );
            }
            if !s.chosen_logits.is_empty() {
                let k = s.chosen_logits.len();
                let mut scores = Vec::with_capacity(2 * k);
                scores.extend_from_slice(&s.chosen_logits);
                scores.extend_from_slice(&s.chosen_probas);
                writer.push_tensor(
                    &format!("{sid}/scores"),
                    Dtype::F32,
                    &[2, k],
                    &scores,
                    Some(sid),
                    Some(s.label()),
                );
            }
        }
        let name = format!("shards-{shard_index:05}.bin");
        let meta = ShardMeta {
            dataset_id: ds.manifest.dataset_id.clone(),
            llm_id: ds.manifest.llm_id.clone(),
            shard_index,
            source_shapes,
        };
        writer.write(&dir.join(&name), SHARD_MAGIC, &meta)?;
        manifest.shards.push(name);
    }

    let json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(())
}

/// Load a dataset directory back into memory. Sample order is the write
/// order (shard order, record order within each shard).
pub fn read_dataset(dir: &Path) -> Result<StoredDataset> {
    let manifest_bytes = std::fs::read(dir.join(MANIFEST_FILE)).map_err(|e| {
        Error::format(format!(
            "cannot read {} in {}: {e}",
            MANIFEST_FILE,
            dir.display()
        ))
    })?;
    let manifest: DatasetManifest = serde_json::from_slice(&manifest_bytes)?;
    manifest.validate()?;
    let pool_config = manifest.pool_config.ok_or_else(|| {
        Error::format("manifest has no pool_config; raw-only datasets cannot be loaded as pooled")
    })?;

    let mut samples = Vec::with_capacity(manifest.sample_count);
    for shard_name in &manifest.shards {
        let arch: Archive<ShardMeta> = Archive::read(&dir.join(shard_name), SHARD_MAGIC)?;
        if arch.meta.dataset_id != manifest.dataset_id {
            return Err(Error::format(format!(
                "shard {shard_name} belongs to dataset '{}'",
                arch.meta.dataset_id
            )));
        }
        for rec in arch.records.iter().filter(|r| r.name.ends_with("/pooled")) {
            let sid = rec
                .sample_id
                .clone()
                .ok_or_else(|| Error::format("pooled record without sample_id"))?;
            if rec.shape.len() != 3 {
                return Err(Error::format("pooled record is not a rank-3 tensor"));
            }
            let data = Tensor3::from_vec(
                rec.shape[0],
                rec.shape[1],
                rec.shape[2],
                arch.tensor_f32(rec),
            )?;
            let source_shape = *arch
                .meta
                .source_shapes
                .get(&sid)
                .ok_or_else(|| Error::format(format!("missing source shape for sample '{sid}'")))?;
            let raw = match arch.find(&format!("{sid}/raw")) {
                Some(r) => {
                    if r.shape.len() != 3 {
                        return Err(Error::format("raw record is not a rank-3 tensor"));
                    }
                    Some(ActivationTensor {
                        data: Tensor3::from_vec(
                            r.shape[0],
                            r.shape[1],
                            r.shape[2],
                            arch.tensor_f32(r),
                        )?,
                        llm_id: manifest.llm_id.clone(),
                        sample_id: sid.clone(),
                        label: r.label,
                    })
                }
                None => None,
            };
            let (chosen_logits, chosen_probas) = match arch.find(&format!("{sid}/scores")) {
                Some(r) => {
                    let flat = arch.tensor_f32(r);
                    let k = r.shape[1];
                    (flat[..k].to_vec(), flat[k..].to_vec())
                }
                None => (Vec::new(), Vec::new()),
            };
            samples.push(PooledSample {
                pooled: PooledTensor {
                    data,
                    source_shape,
                    config: pool_config,
                    llm_id: manifest.llm_id.clone(),
                    sample_id: sid,
                    label: rec.label,
                },
                raw,
                chosen_logits,
                chosen_probas,
            });
        }
    }
    if samples.len() != manifest.sample_count {
        return Err(Error::format(format!(
            "manifest declares {} samples but shards hold {}",
            manifest.sample_count,
            samples.len()
        )));
    }
    Ok(StoredDataset { manifest, samples })
}
