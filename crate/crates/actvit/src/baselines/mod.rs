//! Comparison methods: per-(layer, token-offset) logistic probes with
//! best-cell selection, AUC heatmaps over all cells, and the training-free
//! logit/probability aggregation detectors.

pub mod logreg;

pub use logreg::{fit_logistic, LogisticModel, DEFAULT_MAX_ITER, DEFAULT_TOL};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::report::{auc, svg, ScoredSet};
use crate::store::{Split, SplitSpec, StoredDataset};
use crate::tensor::{resolve_token_offset, ActivationTensor};

/// The probed token offsets: first three and last three of each response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenOffsetSet {
    offsets: Vec<i32>,
}

impl Default for TokenOffsetSet {
    fn default() -> Self {
        TokenOffsetSet {
            offsets: vec![0, 1, 2, -3, -2, -1],
        }
    }
}

impl TokenOffsetSet {
    pub fn new(offsets: Vec<i32>) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::validation("offset set must be non-empty"));
        }
        Ok(TokenOffsetSet { offsets })
    }

    pub fn offsets(&self) -> &[i32] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Offsets resolved for a sequence of length `n`, deduplicated by
    /// resolved index with order preserved (short sequences collapse
    /// overlapping offsets).
    pub fn resolved(&self, n: usize) -> Vec<(i32, usize)> {
        let mut out: Vec<(i32, usize)> = Vec::new();
        for &off in &self.offsets {
            if let Some(idx) = resolve_token_offset(off, n) {
                if !out.iter().any(|&(_, seen)| seen == idx) {
                    out.push((off, idx));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    /// Inverse regularization strengths, tried in order; earlier entries win
    /// validation ties (the default grid is descending, so ties go to the
    /// larger C).
    pub c_grid: Vec<f64>,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            c_grid: vec![10000.0, 100.0, 1.0, 0.01, 0.0001],
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_grid.is_empty() {
            return Err(Error::validation("C grid must be non-empty"));
        }
        if self.c_grid.iter().any(|&c| c <= 0.0 || !c.is_finite()) {
            return Err(Error::validation("all C values must be positive"));
        }
        Ok(())
    }
}

/// Raw activation tensors with split assignments, the input every probe
/// operation expects.
pub struct ProbeDataset<'a> {
    pub ats: Vec<&'a ActivationTensor>,
    pub splits: SplitSpec,
    pub layers: usize,
}

impl<'a> ProbeDataset<'a> {
    pub fn new(ats: Vec<&'a ActivationTensor>, splits: SplitSpec) -> Result<Self> {
        if ats.is_empty() {
            return Err(Error::validation("probe dataset is empty"));
        }
        splits.validate(ats.len())?;
        let layers = ats[0].data.layers();
        for at in &ats {
            if at.data.layers() != layers {
                return Err(Error::validation("probe dataset mixes layer counts"));
            }
            if at.label.is_none() {
                return Err(Error::validation("probe dataset has unlabeled samples"));
            }
        }
        Ok(ProbeDataset { ats, splits, layers })
    }

    /// View over a stored dataset; requires raw tensors on disk.
    pub fn from_stored(ds: &'a StoredDataset) -> Result<Self> {
        let ats: Vec<&ActivationTensor> = ds
            .samples
            .iter()
            .map(|s| {
                s.raw.as_ref().ok_or_else(|| {
                    Error::validation(
                        "probing needs raw activation tensors; re-synthesize with store_raw",
                    )
                })
            })
            .collect::<Result<_>>()?;
        Self::new(ats, ds.manifest.splits.clone())
    }

    fn split_indices(&self, split: Split) -> &[usize] {
        self.splits.get(split)
    }

    /// Feature matrix (standard order) and labels at one (layer, offset).
    fn features_at(&self, layer: usize, offset: i32, split: Split) -> Result<(Vec<f64>, Vec<u8>)> {
        let indices = self.split_indices(split);
        let d = self.ats[0].data.features();
        let mut x = Vec::with_capacity(indices.len() * d);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            let at = self.ats[i];
            let n = at.data.tokens();
            let idx = resolve_token_offset(offset, n).ok_or_else(|| {
                Error::validation(format!(
                    "offset {offset} unresolvable for sample '{}' of length {n}",
                    at.sample_id
                ))
            })?;
            x.extend(at.data.pixel(layer, idx).iter().map(|&v| f64::from(v)));
            y.push(at.label.expect("validated labeled"));
        }
        Ok((x, y))
    }
}

/// A probe fitted at one (layer, offset) with its best C and split AUCs.
#[derive(Debug, Clone)]
pub struct FittedProbe {
    pub layer: usize,
    pub offset: i32,
    pub best_c: f64,
    pub model: LogisticModel,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub train_auc: f64,
    pub val_auc: f64,
    pub test_auc: f64,
    /// Elementary (single-C) fits performed.
    pub fits: usize,
}

impl FittedProbe {
    pub fn score(&self, features: &[f64]) -> f64 {
        let standardized: Vec<f64> = features
            .iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        self.model.decision(&standardized)
    }
}

fn standardize(x: &mut [f64], d: usize, mean: &[f64], std: &[f64]) {
    for row in x.chunks_mut(d) {
        for j in 0..d {
            row[j] = (row[j] - mean[j]) / std[j];
        }
    }
}

fn train_stats(x: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() / d;
    let mut mean = vec![0.0f64; d];
    for row in x.chunks(d) {
        for j in 0..d {
            mean[j] += row[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0f64; d];
    for row in x.chunks(d) {
        for j in 0..d {
            let c = row[j] - mean[j];
            var[j] += c * c;
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|v| (v / n as f64).sqrt().max(1e-8))
        .collect();
    (mean, std)
}

/// Fit one probe at (layer, offset): an L2 logistic regression on the
/// standardized activation vector, with C selected on validation AUC.
pub fn fit_probe(
    data: &ProbeDataset,
    layer: usize,
    offset: i32,
    cfg: &ProbeConfig,
) -> Result<FittedProbe> {
    cfg.validate()?;
    if layer >= data.layers {
        return Err(Error::validation(format!(
            "layer {layer} out of range for {} layers",
            data.layers
        )));
    }
    let d = data.ats[0].data.features();
    let (mut x_train, y_train) = data.features_at(layer, offset, Split::Train)?;
    let (mut x_val, y_val) = data.features_at(layer, offset, Split::Val)?;
    let (mut x_test, y_test) = data.features_at(layer, offset, Split::Test)?;

    let (mean, std) = train_stats(&x_train, d);
    standardize(&mut x_train, d, &mean, &std);
    standardize(&mut x_val, d, &mean, &std);
    standardize(&mut x_test, d, &mean, &std);

    let scores_of = |m: &LogisticModel, x: &[f64]| -> Vec<f64> {
        x.chunks(d).map(|row| m.decision(row)).collect()
    };

    let mut best: Option<(f64, f64, LogisticModel)> = None; // (val_auc, c, model)
    let mut fits = 0;
    for &c in &cfg.c_grid {
        let model = fit_logistic(&x_train, d, &y_train, c, cfg.max_iter, cfg.tol)?;
        fits += 1;
        let val_auc = auc(&ScoredSet::new(scores_of(&model, &x_val), y_val.clone()))?;
        let better = match &best {
            None => true,
            Some((best_val, _, _)) => val_auc > *best_val,
        };
        if better {
            best = Some((val_auc, c, model));
        }
    }
    let (val_auc, best_c, model) = best.expect("non-empty grid");
    let train_auc = auc(&ScoredSet::new(scores_of(&model, &x_train), y_train))?;
    let test_auc = auc(&ScoredSet::new(scores_of(&model, &x_test), y_test))?;
    Ok(FittedProbe {
        layer,
        offset,
        best_c,
        model,
        feature_mean: mean,
        feature_std: std,
        train_auc,
        val_auc,
        test_auc,
        fits,
    })
}

/// Result of the exhaustive (layer, offset, C) sweep.
pub struct ProbeSweep {
    /// One probe per cell, in (layer ascending, offset order) order.
    pub probes: Vec<FittedProbe>,
    pub offsets: TokenOffsetSet,
    /// Total elementary fits performed across the sweep.
    pub fits: usize,
}

impl ProbeSweep {
    /// The winning probe by validation AUC. Ties break to the lower layer,
    /// then the earlier offset in set order (C ties were already broken to
    /// the earlier grid entry inside fit_probe).
    pub fn best(&self) -> &FittedProbe {
        let mut best = &self.probes[0];
        for p in &self.probes[1..] {
            if p.val_auc > best.val_auc {
                best = p;
            }
        }
        best
    }

    /// Best cell by test AUC (what the heatmap boxes).
    pub fn best_test_cell(&self) -> (usize, usize) {
        let cols = self.offsets.len();
        let mut best = 0;
        for (i, p) in self.probes.iter().enumerate() {
            if p.test_auc > self.probes[best].test_auc {
                best = i;
            }
        }
        (best / cols, best % cols)
    }

    /// Test-AUC matrix of shape (layers, |offsets|).
    pub fn test_matrix(&self) -> Vec<Vec<f64>> {
        let cols = self.offsets.len();
        self.probes
            .chunks(cols)
            .map(|row| row.iter().map(|p| p.test_auc).collect())
            .collect()
    }
}

/// Fit every (layer, offset) cell; cells run in parallel, results keep
/// deterministic (layer, offset) order.
pub fn probe_sweep(
    data: &ProbeDataset,
    offsets: &TokenOffsetSet,
    cfg: &ProbeConfig,
) -> Result<ProbeSweep> {
    cfg.validate()?;
    let cells: Vec<(usize, i32)> = (0..data.layers)
        .flat_map(|l| offsets.offsets().iter().map(move |&o| (l, o)))
        .collect();
    let probes: Vec<FittedProbe> = cells
        .par_iter()
        .map(|&(layer, offset)| fit_probe(data, layer, offset, cfg))
        .collect::<Result<_>>()?;
    let fits = probes.iter().map(|p| p.fits).sum();
    Ok(ProbeSweep {
        probes,
        offsets: offsets.clone(),
        fits,
    })
}

/// The best static probe over layers x offsets x C, selected on validation.
pub fn probe_star(
    data: &ProbeDataset,
    offsets: &TokenOffsetSet,
    cfg: &ProbeConfig,
) -> Result<(FittedProbe, usize)> {
    let sweep = probe_sweep(data, offsets, cfg)?;
    let best = sweep.best().clone();
    Ok((best, sweep.fits))
}

/// Heatmap of per-cell test AUC plus a rendered figure with the best cell
/// boxed.
pub struct Heatmap {
    pub matrix: Vec<Vec<f64>>,
    pub best_cell: (usize, usize),
    pub offsets: TokenOffsetSet,
    pub svg: String,
}

pub fn heatmap(
    data: &ProbeDataset,
    offsets: &TokenOffsetSet,
    cfg: &ProbeConfig,
) -> Result<Heatmap> {
    let sweep = probe_sweep(data, offsets, cfg)?;
    let matrix = sweep.test_matrix();
    let best_cell = sweep.best_test_cell();
    let row_labels: Vec<String> = (0..data.layers).map(|l| format!("layer {l}")).collect();
    let col_labels: Vec<String> = offsets.offsets().iter().map(|o| o.to_string()).collect();
    let svg = svg::heatmap(&matrix, &row_labels, &col_labels, best_cell);
    Ok(Heatmap {
        matrix,
        best_cell,
        offsets: offsets.clone(),
        svg,
    })
}

// ---------------------------------------------------------------------------
// Aggregation detectors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreSource {
    Logits,
    Probas,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reducer {
    Mean,
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AggregatorKind {
    pub source: ScoreSource,
    pub reducer: Reducer,
}

impl AggregatorKind {
    pub fn all() -> Vec<AggregatorKind> {
        let mut out = Vec::new();
        for source in [ScoreSource::Logits, ScoreSource::Probas] {
            for reducer in [Reducer::Mean, Reducer::Min, Reducer::Max] {
                out.push(AggregatorKind { source, reducer });
            }
        }
        out
    }

    pub fn name(&self) -> String {
        let s = match self.source {
            ScoreSource::Logits => "logits",
            ScoreSource::Probas => "probas",
        };
        let r = match self.reducer {
            Reducer::Mean => "mean",
            Reducer::Min => "min",
            Reducer::Max => "max",
        };
        format!("{s}-{r}")
    }
}

/// Reduce per-token confidence scores to one detector score. Higher output
/// means "more likely correct"; orientation is left to the AUC (scores are
/// used as-is, so an inverted detector simply reports AUC < 0.5).
pub fn aggregate_score(per_token: &[f64], kind: AggregatorKind) -> Result<f64> {
    if per_token.is_empty() {
        return Err(Error::validation("cannot aggregate an empty score sequence"));
    }
    Ok(match kind.reducer {
        Reducer::Mean => per_token.iter().sum::<f64>() / per_token.len() as f64,
        Reducer::Min => per_token.iter().cloned().fold(f64::INFINITY, f64::min),
        Reducer::Max => per_token.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Detector scores for a stored dataset split from its per-token confidence
/// records.
pub fn aggregator_scores(
    ds: &StoredDataset,
    split: Split,
    kind: AggregatorKind,
) -> Result<ScoredSet> {
    let samples = ds.split_samples(split);
    let mut scores = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        let seq: Vec<f64> = match kind.source {
            ScoreSource::Logits => s.chosen_logits.iter().map(|&v| f64::from(v)).collect(),
            ScoreSource::Probas => s.chosen_probas.iter().map(|&v| f64::from(v)).collect(),
        };
        scores.push(aggregate_score(&seq, kind)?);
        labels.push(s.label());
    }
    let mut set = ScoredSet::new(scores, labels);
    set.method = kind.name();
    set.llm_id = ds.manifest.llm_id.clone();
    set.dataset_id = ds.manifest.dataset_id.clone();
    Ok(set)
}
