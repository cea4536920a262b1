//! Multi-LLM corpus composition and epoch batching.
//!
//! Joint training draws from several (llm, dataset) pairs. Batches are
//! homogeneous in llm_id (one adapter application per batch); every included
//! training sample appears exactly once per epoch; the batch order is
//! shuffled per epoch by seed, which interleaves pairs proportionally to
//! their size in expectation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{shuffle, stream};
use crate::store::{PooledSample, Split, StoredDataset};

pub type PairKey = (String, String);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub llm_id: String,
    pub dataset_id: String,
    #[serde(default = "default_include")]
    pub include: bool,
    /// Reserved as a per-pair loss weight; epoch composition is always
    /// one-pass-per-sample regardless.
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_include() -> bool {
    true
}

fn default_weight() -> f64 {
    1.0
}

impl CorpusEntry {
    pub fn included(llm_id: &str, dataset_id: &str) -> Self {
        CorpusEntry {
            llm_id: llm_id.to_string(),
            dataset_id: dataset_id.to_string(),
            include: true,
            weight: 1.0,
        }
    }

    pub fn key(&self) -> PairKey {
        (self.llm_id.clone(), self.dataset_id.clone())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub entries: Vec<CorpusEntry>,
}

impl CorpusSpec {
    pub fn of_pairs(pairs: &[(&str, &str)]) -> Self {
        CorpusSpec {
            entries: pairs
                .iter()
                .map(|(l, d)| CorpusEntry::included(l, d))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.entries.iter().any(|e| e.include) {
            return Err(Error::validation(
                "corpus must include at least one (llm, dataset) pair",
            ));
        }
        for e in &self.entries {
            if e.weight <= 0.0 || !e.weight.is_finite() {
                return Err(Error::validation(format!(
                    "corpus weight for ({}, {}) must be positive",
                    e.llm_id, e.dataset_id
                )));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.key()) {
                return Err(Error::validation(format!(
                    "duplicate corpus entry ({}, {})",
                    e.llm_id, e.dataset_id
                )));
            }
        }
        Ok(())
    }

    pub fn included(&self) -> impl Iterator<Item = &CorpusEntry> {
        self.entries.iter().filter(|e| e.include)
    }

    pub fn contains_included(&self, llm_id: &str, dataset_id: &str) -> bool {
        self.included()
            .any(|e| e.llm_id == llm_id && e.dataset_id == dataset_id)
    }

    /// A copy with one pair flipped to excluded; errors if absent.
    pub fn excluding(&self, llm_id: &str, dataset_id: &str) -> Result<CorpusSpec> {
        let mut out = self.clone();
        let mut found = false;
        for e in &mut out.entries {
            if e.llm_id == llm_id && e.dataset_id == dataset_id {
                e.include = false;
                found = true;
            }
        }
        if !found {
            return Err(Error::validation(format!(
                "pair ({llm_id}, {dataset_id}) not present in corpus"
            )));
        }
        Ok(out)
    }

    /// A copy with every pair of one llm flipped to excluded.
    pub fn excluding_llm(&self, llm_id: &str) -> Result<CorpusSpec> {
        let mut out = self.clone();
        let mut found = false;
        for e in &mut out.entries {
            if e.llm_id == llm_id {
                e.include = false;
                found = true;
            }
        }
        if !found {
            return Err(Error::validation(format!(
                "llm '{llm_id}' not present in corpus"
            )));
        }
        Ok(out)
    }
}

/// Loaded datasets keyed by (llm_id, dataset_id).
#[derive(Debug, Default)]
pub struct Corpus {
    datasets: BTreeMap<PairKey, StoredDataset>,
}

impl Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, ds: StoredDataset) -> Result<()> {
        let key = (ds.manifest.llm_id.clone(), ds.manifest.dataset_id.clone());
        if self.datasets.contains_key(&key) {
            return Err(Error::validation(format!(
                "corpus already holds dataset ({}, {})",
                key.0, key.1
            )));
        }
        self.datasets.insert(key, ds);
        Ok(())
    }

    pub fn get(&self, llm_id: &str, dataset_id: &str) -> Option<&StoredDataset> {
        self.datasets
            .get(&(llm_id.to_string(), dataset_id.to_string()))
    }

    pub fn require(&self, llm_id: &str, dataset_id: &str) -> Result<&StoredDataset> {
        self.get(llm_id, dataset_id).ok_or_else(|| {
            Error::validation(format!("dataset ({llm_id}, {dataset_id}) not loaded"))
        })
    }

    pub fn pairs(&self) -> impl Iterator<Item = &PairKey> {
        self.datasets.keys()
    }

    pub fn len(&self) -> usize {
        self.datasets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }
}

/// One homogeneous training batch.
pub struct Batch<'a> {
    pub llm_id: &'a str,
    pub dataset_id: &'a str,
    pub weight: f64,
    pub samples: Vec<&'a PooledSample>,
}

/// Assemble one epoch of batches over the included pairs of `spec`.
/// Deterministic in (seed, epoch); each included sample of the chosen split
/// appears exactly once.
pub fn assemble_epoch<'a>(
    corpus: &'a Corpus,
    spec: &CorpusSpec,
    split: Split,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Batch<'a>>> {
    spec.validate()?;
    if batch_size == 0 {
        return Err(Error::validation("batch size must be >= 1"));
    }
    let mut batches = Vec::new();
    for entry in spec.included() {
        let ds = corpus.require(&entry.llm_id, &entry.dataset_id)?;
        let mut indices: Vec<usize> = ds.manifest.splits.get(split).to_vec();
        let mut rng = stream(seed)
            .with_str("epoch-order")
            .with(epoch as u64)
            .with_str(&entry.llm_id)
            .with_str(&entry.dataset_id)
            .rng();
        shuffle(&mut rng, &mut indices);
        for chunk in indices.chunks(batch_size) {
            batches.push(Batch {
                llm_id: &ds.manifest.llm_id,
                dataset_id: &ds.manifest.dataset_id,
                weight: entry.weight,
                samples: chunk.iter().map(|&i| &ds.samples[i]).collect(),
            });
        }
    }
    let mut order_rng = stream(seed)
        .with_str("batch-order")
        .with(epoch as u64)
        .rng();
    shuffle(&mut order_rng, &mut batches);
    Ok(batches)
}
