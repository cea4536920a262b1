//! Optimization and the experimental protocols: single-source and joint
//! training, leave-one-dataset-out zero-shot evaluation, adapter-only
//! transfer to new LLMs, and the low-data adaptation regime.
//!
//! Training minimizes binary cross-entropy with AdamW under a linear-warmup
//! cosine schedule, clips gradients at a global norm, checkpoints on best
//! validation AUC, and is bit-deterministic for a fixed seed.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::{LlmDescriptor, LlmRegistry};
use crate::model::{
    ActMlpModel, ActVitConfig, ActVitModel, MlpCache, ParamGroup, PatchConfig, Provenance,
};
use crate::nn::optim::{clip_grad_norm, zero_frozen_grads, zero_grads, AdamW, ParamSource};

pub use crate::nn::optim::{WarmupCosine, WARMUP_FRACTION};
use crate::nn::{bce_with_logit, bce_with_logit_grad};
use crate::report::{auc, ScoredSet};
use crate::rng::{shuffle, stream};
use crate::store::{assemble_epoch, Corpus, CorpusSpec, PooledSample, Split, StoredDataset};
use crate::tensor::PooledTensor;

pub const DEFAULT_CLIP_NORM: f64 = 1.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimSpec {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; None disables.
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
    /// Reweight classes by inverse frequency (off by default; synthetic
    /// data is balanced by construction).
    #[serde(default)]
    pub class_weight: bool,
}

fn default_clip() -> Option<f64> {
    Some(DEFAULT_CLIP_NORM)
}

impl Default for OptimSpec {
    fn default() -> Self {
        OptimSpec {
            lr: 1e-3,
            weight_decay: 1e-3,
            epochs: 15,
            batch_size: 64,
            seed: 0,
            clip_norm: Some(DEFAULT_CLIP_NORM),
            class_weight: false,
        }
    }
}

impl OptimSpec {
    /// Joint multi-source training default batch size.
    pub fn joint_default() -> Self {
        OptimSpec {
            batch_size: 128,
            epochs: 5,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        // lr == 0 is allowed as the degenerate "training changes nothing"
        // case the contract tests rely on.
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::validation("lr must be finite and >= 0"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::validation("weight_decay must be >= 0"));
        }
        if self.epochs == 0 {
            return Err(Error::validation("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    /// Learning rate at the last optimizer step of the epoch.
    pub lr_last: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
}

impl TrainHistory {
    /// One JSON object per line, one line per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("serializable record"));
            out.push('\n');
        }
        out
    }
}

/// A trainable detector: batched forward with dropout, gradient
/// accumulation from logit gradients, and cloning for checkpoints.
pub trait DetectorModel: ParamSource<f32> + Clone {
    type Cache;
    fn forward_train(
        &self,
        batch: &[&PooledTensor],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<f32>, Self::Cache)>;
    fn forward_eval(&self, batch: &[&PooledTensor]) -> Result<Vec<f32>>;
    fn backward(&mut self, cache: &Self::Cache, d_logits: &[f32]);
}

impl DetectorModel for ActVitModel<f32> {
    type Cache = crate::model::ForwardCache<f32>;
    fn forward_train(
        &self,
        batch: &[&PooledTensor],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<f32>, Self::Cache)> {
        self.forward(batch, Some(rng))
    }
    fn forward_eval(&self, batch: &[&PooledTensor]) -> Result<Vec<f32>> {
        ActVitModel::forward_eval(self, batch)
    }
    fn backward(&mut self, cache: &Self::Cache, d_logits: &[f32]) {
        ActVitModel::backward(self, cache, d_logits)
    }
}

impl DetectorModel for ActMlpModel<f32> {
    type Cache = MlpCache<f32>;
    fn forward_train(
        &self,
        batch: &[&PooledTensor],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<f32>, Self::Cache)> {
        self.forward(batch, Some(rng))
    }
    fn forward_eval(&self, batch: &[&PooledTensor]) -> Result<Vec<f32>> {
        ActMlpModel::forward_eval(self, batch)
    }
    fn backward(&mut self, cache: &Self::Cache, d_logits: &[f32]) {
        ActMlpModel::backward(self, cache, d_logits)
    }
}

/// One homogeneous training batch with per-sample loss weights.
struct WeightedBatch<'a> {
    samples: Vec<&'a PooledSample>,
    weight: f64,
    /// (pos_weight, neg_weight) when class weighting is on.
    class_weights: (f64, f64),
}

/// Evaluate AUC over one split of one dataset, batched.
pub fn eval_auc<M: DetectorModel>(
    model: &M,
    samples: &[&PooledSample],
    batch_size: usize,
) -> Result<f64> {
    let mut scores = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&PooledTensor> = chunk.iter().map(|s| &s.pooled).collect();
        let z = model.forward_eval(&refs)?;
        scores.extend(z.iter().map(|&v| f64::from(v)));
        labels.extend(chunk.iter().map(|s| s.label()));
    }
    auc(&ScoredSet::new(scores, labels))
}

/// Mean validation AUC across the pairs with a non-empty val split.
fn mean_val_auc<M: DetectorModel>(
    model: &M,
    val_sets: &[Vec<&PooledSample>],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for set in val_sets {
        if set.is_empty() {
            continue;
        }
        total += eval_auc(model, set, batch_size)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::validation("no validation samples available"));
    }
    Ok(total / count as f64)
}

/// The inner loop shared by joint training and adapter-only adaptation.
fn train_loop<'a, M: DetectorModel>(
    model: &mut M,
    optim: &OptimSpec,
    batches_per_epoch: usize,
    epoch_batches: &mut dyn FnMut(usize) -> Result<Vec<WeightedBatch<'a>>>,
    val_sets: &[Vec<&PooledSample>],
) -> Result<TrainHistory> {
    optim.validate()?;
    let total_steps = optim.epochs * batches_per_epoch;
    if total_steps == 0 {
        return Err(Error::validation("training corpus has no batches"));
    }
    let schedule = WarmupCosine::new(optim.lr, total_steps);
    let mut opt: AdamW<f32> = AdamW::new();
    let mut step = 0usize;
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, M)> = None;

    for epoch in 0..optim.epochs {
        let batches = epoch_batches(epoch)?;
        let mut loss_sum = 0.0f64;
        let mut loss_count = 0usize;
        let mut lr_last = 0.0f64;
        for batch in &batches {
            let refs: Vec<&PooledTensor> = batch.samples.iter().map(|s| &s.pooled).collect();
            let mut rng = stream(optim.seed).with_str("dropout").with(step as u64).rng();
            let (logits, cache) = model.forward_train(&refs, &mut rng)?;
            let inv_b = 1.0 / logits.len() as f64;
            let mut d = Vec::with_capacity(logits.len());
            let mut batch_loss = 0.0f64;
            for (z, s) in logits.iter().zip(&batch.samples) {
                let y = f64::from(s.label());
                let cw = if s.label() == 1 {
                    batch.class_weights.0
                } else {
                    batch.class_weights.1
                };
                let w = batch.weight * cw;
                batch_loss += w * f64::from(bce_with_logit(*z, y as f32));
                d.push((w * inv_b) as f32 * bce_with_logit_grad(*z, y as f32));
            }
            batch_loss *= inv_b;
            if !batch_loss.is_finite() {
                return Err(Error::numeric(format!(
                    "training loss diverged (epoch {epoch}, step {step})"
                )));
            }
            loss_sum += batch_loss * logits.len() as f64;
            loss_count += logits.len();

            zero_grads(model);
            model.backward(&cache, &d);
            zero_frozen_grads(model);
            if let Some(max_norm) = optim.clip_norm {
                clip_grad_norm(model, max_norm);
            }
            let lr = schedule.lr(step);
            lr_last = lr;
            opt.step(model, lr, optim.weight_decay);
            step += 1;
        }

        let val_auc = mean_val_auc(model, val_sets, optim.batch_size)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / loss_count.max(1) as f64,
            val_auc,
            lr_last,
        });
        let improved = best.as_ref().is_none_or(|(b, _)| val_auc > *b);
        if improved {
            best = Some((val_auc, model.clone()));
            history.best_epoch = epoch;
            history.best_val_auc = val_auc;
        }
    }

    // Restore the best-validation checkpoint.
    if let Some((_, checkpoint)) = best {
        *model = checkpoint;
    }
    Ok(history)
}

fn class_weights_for(ds: &StoredDataset, enabled: bool) -> (f64, f64) {
    if !enabled {
        return (1.0, 1.0);
    }
    let pos = ds.manifest.label_histogram.pos.max(1) as f64;
    let neg = ds.manifest.label_histogram.neg.max(1) as f64;
    let total = pos + neg;
    (total / (2.0 * pos), total / (2.0 * neg))
}

/// Train on every included (llm, dataset) pair of the corpus. Returns the
/// per-epoch history; the model is left at the best-validation checkpoint.
pub fn train<M: DetectorModel>(
    model: &mut M,
    corpus: &Corpus,
    spec: &CorpusSpec,
    optim: &OptimSpec,
) -> Result<TrainHistory> {
    spec.validate()?;
    let batches_per_epoch: usize = spec
        .included()
        .map(|e| {
            corpus.require(&e.llm_id, &e.dataset_id).map(|ds| {
                ds.manifest.splits.train.len().div_ceil(optim.batch_size)
            })
        })
        .sum::<Result<usize>>()?;
    let val_sets: Vec<Vec<&PooledSample>> = spec
        .included()
        .map(|e| {
            corpus
                .require(&e.llm_id, &e.dataset_id)
                .map(|ds| ds.split_samples(Split::Val))
        })
        .collect::<Result<_>>()?;

    let class_weight = optim.class_weight;
    let mut make_batches = |epoch: usize| -> Result<Vec<WeightedBatch>> {
        let batches = assemble_epoch(corpus, spec, Split::Train, optim.batch_size, optim.seed, epoch)?;
        batches
            .into_iter()
            .map(|b| {
                let ds = corpus.require(b.llm_id, b.dataset_id)?;
                Ok(WeightedBatch {
                    samples: b.samples,
                    weight: b.weight,
                    class_weights: class_weights_for(ds, class_weight),
                })
            })
            .collect()
    };
    train_loop(model, optim, batches_per_epoch, &mut make_batches, &val_sets)
}

// ---------------------------------------------------------------------------
// Hyperparameter grid
// ---------------------------------------------------------------------------

/// Named value lists; the search space is their cartesian product,
/// enumerated in field order (depth outermost, patch innermost).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub depth: Vec<usize>,
    pub lr: Vec<f64>,
    pub embed_dim: Vec<usize>,
    pub epochs: Vec<usize>,
    pub dropout: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub patch: Vec<(usize, usize)>,
}

impl GridSpec {
    /// A single point (no search).
    pub fn singleton(
        depth: usize,
        lr: f64,
        embed_dim: usize,
        epochs: usize,
        dropout: f64,
        weight_decay: f64,
        patch: (usize, usize),
    ) -> Self {
        GridSpec {
            depth: vec![depth],
            lr: vec![lr],
            embed_dim: vec![embed_dim],
            epochs: vec![epochs],
            dropout: vec![dropout],
            weight_decay: vec![weight_decay],
            patch: vec![patch],
        }
    }

    /// The stock search grid for models trained on one (llm, dataset) pair.
    pub fn single_source_reference() -> Self {
        GridSpec {
            depth: vec![1, 3],
            lr: vec![1e-3],
            embed_dim: vec![128, 1024],
            epochs: vec![15],
            dropout: vec![0.3],
            weight_decay: vec![1.0, 1e-3],
            patch: vec![(1, 1), (8, 1), (4, 2)],
        }
    }

    /// The stock search grid for joint multi-source training.
    pub fn joint_reference() -> Self {
        GridSpec {
            depth: vec![3],
            lr: vec![1e-3, 5e-4],
            embed_dim: vec![128],
            epochs: vec![5],
            dropout: vec![0.3],
            weight_decay: vec![10.0, 1e-3],
            patch: vec![(1, 1), (1, 2), (1, 4), (2, 1), (4, 1)],
        }
    }

    pub fn len(&self) -> usize {
        self.depth.len()
            * self.lr.len()
            * self.embed_dim.len()
            * self.epochs.len()
            * self.dropout.len()
            * self.weight_decay.len()
            * self.patch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::validation("hyperparameter grid is empty"));
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::with_capacity(self.len());
        for &depth in &self.depth {
            for &lr in &self.lr {
                for &embed_dim in &self.embed_dim {
                    for &epochs in &self.epochs {
                        for &dropout in &self.dropout {
                            for &weight_decay in &self.weight_decay {
                                for &patch in &self.patch {
                                    out.push(GridPoint {
                                        depth,
                                        lr,
                                        embed_dim,
                                        epochs,
                                        dropout,
                                        weight_decay,
                                        patch,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub depth: usize,
    pub lr: f64,
    pub embed_dim: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub weight_decay: f64,
    pub patch: (usize, usize),
}

impl GridPoint {
    pub fn apply_to(&self, base: &ActVitConfig) -> ActVitConfig {
        let mut cfg = base.clone();
        cfg.depth = self.depth;
        cfg.embed_dim = self.embed_dim;
        cfg.dropout = self.dropout;
        cfg.patch = PatchConfig {
            rows: self.patch.0,
            cols: self.patch.1,
        };
        cfg
    }

    pub fn apply_to_optim(&self, base: &OptimSpec) -> OptimSpec {
        let mut o = base.clone();
        o.lr = self.lr;
        o.epochs = self.epochs;
        o.weight_decay = self.weight_decay;
        o
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRun {
    pub point: GridPoint,
    pub history: TrainHistory,
}

pub struct GridSearchOutcome {
    pub best_index: usize,
    pub runs: Vec<GridRun>,
    pub model: ActVitModel<f32>,
}

/// Train every grid point and keep the model with the highest validation
/// AUC (ties go to the earlier point in enumeration order).
pub fn grid_search(
    base_config: &ActVitConfig,
    registry: &LlmRegistry,
    corpus: &Corpus,
    spec: &CorpusSpec,
    grid: &GridSpec,
    optim_base: &OptimSpec,
) -> Result<GridSearchOutcome> {
    grid.validate()?;
    let mut runs = Vec::new();
    let mut best: Option<(usize, f64, ActVitModel<f32>)> = None;
    for (i, point) in grid.points().into_iter().enumerate() {
        let cfg = point.apply_to(base_config);
        let optim = point.apply_to_optim(optim_base);
        let mut model = ActVitModel::<f32>::new(cfg, registry, optim.seed)?;
        let history = train(&mut model, corpus, spec, &optim)?;
        let val = history.best_val_auc;
        let better = best.as_ref().is_none_or(|(_, b, _)| val > *b);
        if better {
            best = Some((i, val, model));
        }
        runs.push(GridRun { point, history });
    }
    let (best_index, _, model) = best.expect("grid validated non-empty");
    Ok(GridSearchOutcome {
        best_index,
        runs,
        model,
    })
}

// ---------------------------------------------------------------------------
// Adapter-only transfer and zero-shot evaluation
// ---------------------------------------------------------------------------

/// Stratified nested subsample of the train split: the 5% set is a subset
/// of the 10% set and so on, because membership is a growing prefix of one
/// seeded per-class permutation.
pub fn nested_fraction_indices(
    ds: &StoredDataset,
    fraction: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(0.0 < fraction && fraction <= 1.0) {
        return Err(Error::validation("fraction must be in (0, 1]"));
    }
    let train = &ds.manifest.splits.train;
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for &i in train {
        by_class[ds.samples[i].label() as usize].push(i);
    }
    let mut out = Vec::new();
    for (class, indices) in by_class.iter_mut().enumerate() {
        let mut rng = stream(seed).with_str("fraction").with(class as u64).rng();
        shuffle(&mut rng, indices);
        let k = ((fraction * indices.len() as f64).round() as usize).min(indices.len());
        out.extend_from_slice(&indices[..k]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Fine-tune only the target LLM's adapter (from scratch) with everything
/// else frozen, on a stratified fraction of the target dataset's training
/// split. The backbone is asserted bit-identical before and after.
pub fn adapt_la(
    pretrained: &ActVitModel<f32>,
    target: &LlmDescriptor,
    dataset: &StoredDataset,
    fraction: f64,
    optim: &OptimSpec,
) -> Result<(ActVitModel<f32>, TrainHistory)> {
    if dataset.manifest.llm_id != target.llm_id {
        return Err(Error::validation(format!(
            "dataset '{}' belongs to llm '{}', not target '{}'",
            dataset.manifest.dataset_id, dataset.manifest.llm_id, target.llm_id
        )));
    }
    let mut model = pretrained.clone();
    model.ensure_adapter(target, optim.seed)?;
    model.reinit_adapter(&target.llm_id, optim.seed)?;
    model.unfreeze_all();
    let mut groups = vec![
        ParamGroup::Backbone,
        ParamGroup::Positional,
        ParamGroup::Head,
    ];
    for id in model.adapters.llm_ids() {
        if id != target.llm_id {
            groups.push(ParamGroup::Adapter(id.to_string()));
        }
    }
    model.freeze(&groups)?;

    let frozen_before = frozen_bytes(&mut model);

    let train_indices = nested_fraction_indices(dataset, fraction, optim.seed)?;
    if train_indices.is_empty() {
        return Err(Error::validation("fraction leaves no training samples"));
    }
    let batches_per_epoch = train_indices.len().div_ceil(optim.batch_size);
    let val_sets = vec![dataset.split_samples(Split::Val)];

    let mut make_batches = |epoch: usize| -> Result<Vec<WeightedBatch>> {
        let mut order = train_indices.clone();
        let mut rng = stream(optim.seed)
            .with_str("adapt-order")
            .with(epoch as u64)
            .rng();
        shuffle(&mut rng, &mut order);
        Ok(order
            .chunks(optim.batch_size)
            .map(|chunk| WeightedBatch {
                samples: chunk.iter().map(|&i| &dataset.samples[i]).collect(),
                weight: 1.0,
                class_weights: class_weights_for(dataset, optim.class_weight),
            })
            .collect())
    };
    let history = train_loop(
        &mut model,
        optim,
        batches_per_epoch,
        &mut make_batches,
        &val_sets,
    )?;

    let frozen_after = frozen_bytes(&mut model);
    if frozen_before != frozen_after {
        return Err(Error::numeric(
            "frozen parameters mutated during adapter-only adaptation",
        ));
    }
    Ok((model, history))
}

/// Bitwise snapshot of all frozen parameters.
fn frozen_bytes(model: &mut ActVitModel<f32>) -> Vec<u32> {
    let mut out = Vec::new();
    model.visit_params(&mut |_, p, trainable| {
        if !trainable {
            out.extend(p.value.data.iter().map(|v| v.to_bits()));
        }
    });
    out
}

/// Evaluate a pretrained model on a held-out dataset with no parameter
/// updates. Refuses to run if the (llm, dataset) pair was in the training
/// corpus, and requires the target LLM's adapter to be pretrained.
pub fn zero_shot_eval(
    model: &ActVitModel<f32>,
    provenance: &Provenance,
    dataset: &StoredDataset,
    batch_size: usize,
) -> Result<f64> {
    let llm = &dataset.manifest.llm_id;
    let ds_id = &dataset.manifest.dataset_id;
    if provenance.trained_on(llm, ds_id) {
        return Err(Error::protocol(format!(
            "({llm}, {ds_id}) was in the training corpus; zero-shot evaluation would leak"
        )));
    }
    if !model.adapters.contains(llm) {
        return Err(Error::validation(format!(
            "no pretrained adapter for llm '{llm}'; zero-shot needs the adapter trained on its other datasets"
        )));
    }
    if !provenance.trained_pairs.iter().any(|(l, _)| l == llm) {
        return Err(Error::protocol(format!(
            "llm '{llm}' contributed no training data; its adapter is untrained"
        )));
    }
    eval_auc(model, &dataset.split_samples(Split::Test), batch_size)
}

// ---------------------------------------------------------------------------
// Experiment plans
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    SingleSource,
    JointAll,
    LeaveDatasetOut,
    LeaveLlmOut,
    LowDataAdapt,
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::SingleSource => "single_source",
            Protocol::JointAll => "joint_all",
            Protocol::LeaveDatasetOut => "leave_dataset_out",
            Protocol::LeaveLlmOut => "leave_llm_out",
            Protocol::LowDataAdapt => "low_data_adapt",
        }
    }
}

pub const LOW_DATA_FRACTIONS: [u32; 5] = [5, 10, 20, 50, 100];

/// Declarative description of one protocol run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub protocol: Protocol,
    pub corpus: CorpusSpec,
    /// (llm_id, dataset_id) under leave-dataset-out / low-data; the llm
    /// under leave-llm-out is `target.0`.
    pub target: Option<(String, String)>,
    /// Low-data fractions in percent.
    #[serde(default)]
    pub fractions: Vec<u32>,
    pub grid: GridSpec,
    pub seed: u64,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.grid.validate()?;
        match self.protocol {
            Protocol::SingleSource | Protocol::JointAll => Ok(()),
            Protocol::LeaveDatasetOut | Protocol::LowDataAdapt => {
                let (llm, ds) = self.target.as_ref().ok_or_else(|| {
                    Error::config("leave-dataset-out plans need a target (llm, dataset)")
                })?;
                if self.corpus.contains_included(llm, ds) {
                    return Err(Error::protocol(format!(
                        "target ({llm}, {ds}) must be excluded from the training corpus"
                    )));
                }
                if self.protocol == Protocol::LowDataAdapt {
                    if self.fractions.is_empty() {
                        return Err(Error::config("low-data plans need fractions"));
                    }
                    for f in &self.fractions {
                        if !LOW_DATA_FRACTIONS.contains(f) {
                            return Err(Error::config(format!(
                                "fraction {f}% is not one of {LOW_DATA_FRACTIONS:?}"
                            )));
                        }
                    }
                }
                Ok(())
            }
            Protocol::LeaveLlmOut => {
                let (llm, _) = self.target.as_ref().ok_or_else(|| {
                    Error::config("leave-llm-out plans need a target llm")
                })?;
                if self.corpus.included().any(|e| &e.llm_id == llm) {
                    return Err(Error::protocol(format!(
                        "llm '{llm}' must be fully excluded from the training corpus"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn provenance(&self, optim_seed: u64) -> Provenance {
        Provenance {
            protocol: self.protocol.name().to_string(),
            trained_pairs: self
                .corpus
                .included()
                .map(|e| (e.llm_id.clone(), e.dataset_id.clone()))
                .collect(),
            seed: optim_seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::param_snapshot;
    use crate::store::{ingest, CorpusEntry, Dtype, IngestOptions};
    use crate::synth::{generate_dataset, toy_zoo, PlantedTask};
    use crate::tensor::PoolConfig;

    fn small_corpus(m: usize) -> (Corpus, CorpusSpec, LlmRegistry) {
        let (registry, models) = toy_zoo();
        let mut corpus = Corpus::new();
        let model = &models[0];
        let task = PlantedTask::linear("t", model, 2, -1, (8, 8), 77).with_margin(0.3);
        let (labeled, _) = generate_dataset(model, &task, "train-ds", m, 13).unwrap();
        let opts = IngestOptions {
            pool_config: PoolConfig::two_d(4, 8),
            dtype: Dtype::F32,
            store_raw: false,
            test_fraction: 0.3,
            val_fraction: 0.2,
            seed: 3,
        };
        let (stored, _) = ingest(&labeled, &registry, &opts).unwrap();
        corpus.insert(stored).unwrap();
        let spec = CorpusSpec {
            entries: vec![CorpusEntry::included("toy-s", "train-ds")],
        };
        (corpus, spec, registry)
    }

    fn tiny_vit(registry: &LlmRegistry, seed: u64) -> ActVitModel<f32> {
        let mut cfg = ActVitConfig::toy_default();
        cfg.embed_dim = 16;
        cfg.depth = 1;
        cfg.shared_dim = 8;
        ActVitModel::new(cfg, registry, seed).unwrap()
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let (corpus, spec, registry) = small_corpus(80);
        let mut model = tiny_vit(&registry, 5);
        let before = param_snapshot(&mut model);
        let optim = OptimSpec {
            lr: 0.0,
            epochs: 2,
            batch_size: 16,
            ..Default::default()
        };
        train(&mut model, &corpus, &spec, &optim).unwrap();
        let after = param_snapshot(&mut model);
        for ((n1, a), (_, b)) in before.iter().zip(&after) {
            assert!(
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
                "{n1} changed under lr=0"
            );
        }
    }

    #[test]
    fn separable_task_trains_to_low_loss() {
        let (corpus, spec, registry) = small_corpus(600);
        let mut model =
            ActVitModel::<f32>::new(ActVitConfig::toy_default(), &registry, 5).unwrap();
        let optim = OptimSpec {
            lr: 5e-3,
            epochs: 15,
            batch_size: 32,
            seed: 11,
            ..Default::default()
        };
        let history = train(&mut model, &corpus, &spec, &optim).unwrap();
        let final_loss = history.epochs.last().unwrap().train_loss;
        assert!(final_loss < 0.1, "final train loss {final_loss}");
        assert!(history.best_val_auc > 0.97, "val auc {}", history.best_val_auc);
        // Loss-decrease sanity on separable data.
        let first_loss = history.epochs[0].train_loss;
        assert!(
            final_loss <= first_loss + 1e-3,
            "loss rose from {first_loss} to {final_loss}"
        );
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let (corpus, spec, registry) = small_corpus(120);
        let optim = OptimSpec {
            epochs: 3,
            batch_size: 16,
            seed: 9,
            ..Default::default()
        };
        let run = || -> (TrainHistory, Vec<(String, Vec<f32>)>) {
            let mut model = tiny_vit(&registry, 5);
            let h = train(&mut model, &corpus, &spec, &optim).unwrap();
            (h, param_snapshot(&mut model))
        };
        let (h1, p1) = run();
        let (h2, p2) = run();
        assert_eq!(
            serde_json::to_string(&h1).unwrap(),
            serde_json::to_string(&h2).unwrap()
        );
        for ((_, a), (_, b)) in p1.iter().zip(&p2) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn grid_search_prefers_learning_rate_that_learns() {
        let (corpus, spec, registry) = small_corpus(160);
        let mut cfg = ActVitConfig::toy_default();
        cfg.embed_dim = 16;
        cfg.depth = 1;
        cfg.shared_dim = 8;
        let grid = GridSpec {
            depth: vec![1],
            lr: vec![0.0, 1e-3],
            embed_dim: vec![16],
            epochs: vec![6],
            dropout: vec![0.1],
            weight_decay: vec![1e-3],
            patch: vec![(1, 1)],
        };
        assert_eq!(grid.len(), 2);
        let optim = OptimSpec {
            batch_size: 32,
            seed: 4,
            ..Default::default()
        };
        let outcome = grid_search(&cfg, &registry, &corpus, &spec, &grid, &optim).unwrap();
        assert_eq!(outcome.runs.len(), 2);
        assert_eq!(outcome.runs[outcome.best_index].point.lr, 1e-3);
    }

    #[test]
    fn grid_enumeration_count_is_the_product_of_list_lengths() {
        let grid = GridSpec {
            depth: vec![1, 3],
            lr: vec![1e-3],
            embed_dim: vec![128, 1024],
            epochs: vec![15],
            dropout: vec![0.3],
            weight_decay: vec![1.0, 1e-3],
            patch: vec![(1, 1), (8, 1), (4, 2)],
        };
        assert_eq!(grid.len(), 2 * 2 * 2 * 3);
        assert_eq!(grid.points().len(), grid.len());
        let empty = GridSpec {
            depth: vec![],
            ..grid
        };
        assert!(empty.validate().is_err());
    }

    #[test]
    fn zero_shot_eval_is_deterministic_and_guards_untrained_adapters() {
        let (corpus, spec, registry) = small_corpus(120);
        let mut model = tiny_vit(&registry, 5);
        let optim = OptimSpec {
            epochs: 1,
            batch_size: 32,
            ..Default::default()
        };
        train(&mut model, &corpus, &spec, &optim).unwrap();
        // Pretend pretraining used a different toy-s dataset.
        let provenance = Provenance {
            protocol: "leave_dataset_out".into(),
            trained_pairs: vec![("toy-s".into(), "other-ds".into())],
            seed: 0,
        };
        let ds = corpus.get("toy-s", "train-ds").unwrap();
        let a = zero_shot_eval(&model, &provenance, ds, 32).unwrap();
        let b = zero_shot_eval(&model, &provenance, ds, 32).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());

        // An llm absent from the pretraining pairs has an untrained adapter.
        let no_toy_s = Provenance {
            protocol: "leave_llm_out".into(),
            trained_pairs: vec![("toy-m".into(), "other-ds".into())],
            seed: 0,
        };
        assert!(zero_shot_eval(&model, &no_toy_s, ds, 32).is_err());
    }

    #[test]
    fn act_mlp_trains_through_the_same_loop() {
        let (corpus, spec, registry) = small_corpus(120);
        let cfg = crate::model::ActMlpConfig::for_registry(
            crate::tensor::PoolConfig::two_d(4, 8),
            16,
            &registry,
        );
        let mut mlp = ActMlpModel::<f32>::new(cfg, 3).unwrap();
        let optim = OptimSpec {
            epochs: 3,
            batch_size: 16,
            seed: 5,
            ..Default::default()
        };
        let history = train(&mut mlp, &corpus, &spec, &optim).unwrap();
        assert_eq!(history.epochs.len(), 3);
        assert!(history.best_val_auc > 0.0);
    }

    #[test]
    fn nested_fractions_are_nested_and_stratified() {
        let (corpus, _, _) = small_corpus(300);
        let ds = corpus.get("toy-s", "train-ds").unwrap();
        let f05 = nested_fraction_indices(ds, 0.05, 3).unwrap();
        let f10 = nested_fraction_indices(ds, 0.10, 3).unwrap();
        let f50 = nested_fraction_indices(ds, 0.50, 3).unwrap();
        let as_set = |v: &[usize]| -> std::collections::BTreeSet<usize> {
            v.iter().cloned().collect()
        };
        assert!(as_set(&f05).is_subset(&as_set(&f10)));
        assert!(as_set(&f10).is_subset(&as_set(&f50)));
        // 5% of the train split, stratified.
        let train_len = ds.manifest.splits.train.len() as f64;
        assert!((f05.len() as f64 - 0.05 * train_len).abs() <= 1.0);
        let pos = f05.iter().filter(|&&i| ds.samples[i].label() == 1).count();
        assert!(pos > 0 && pos < f05.len());
    }

    #[test]
    fn adapt_la_keeps_backbone_bits() {
        let (corpus, spec, registry) = small_corpus(200);
        let mut model = tiny_vit(&registry, 5);
        let optim = OptimSpec {
            epochs: 2,
            batch_size: 16,
            seed: 3,
            ..Default::default()
        };
        train(&mut model, &corpus, &spec, &optim).unwrap();

        let backbone_before: Vec<u32> = {
            let mut out = Vec::new();
            model.visit_params(&mut |name, p, _| {
                if !name.starts_with("adapter:") {
                    out.extend(p.value.data.iter().map(|v| v.to_bits()));
                }
            });
            out
        };
        let target = registry.get("toy-s").unwrap().clone();
        let ds = corpus.get("toy-s", "train-ds").unwrap();
        let (adapted, history) = adapt_la(&model, &target, ds, 0.5, &optim).unwrap();
        assert!(!history.epochs.is_empty());
        let backbone_after: Vec<u32> = {
            let mut adapted = adapted;
            let mut out = Vec::new();
            adapted.visit_params(&mut |name, p, _| {
                if !name.starts_with("adapter:") {
                    out.extend(p.value.data.iter().map(|v| v.to_bits()));
                }
            });
            out
        };
        assert_eq!(backbone_before, backbone_after);
    }

    #[test]
    fn zero_shot_guards_leakage() {
        let (corpus, spec, registry) = small_corpus(120);
        let mut model = tiny_vit(&registry, 5);
        let optim = OptimSpec {
            epochs: 1,
            batch_size: 32,
            ..Default::default()
        };
        train(&mut model, &corpus, &spec, &optim).unwrap();
        let provenance = Provenance {
            protocol: "leave_dataset_out".into(),
            trained_pairs: vec![("toy-s".into(), "train-ds".into())],
            seed: 0,
        };
        let ds = corpus.get("toy-s", "train-ds").unwrap();
        let err = zero_shot_eval(&model, &provenance, ds, 32)
            .expect_err("leak must be refused");
        assert!(matches!(err, Error::Protocol(_)), "{err}");
    }

    #[test]
    fn plan_validation_enforces_exclusions() {
        let spec = CorpusSpec::of_pairs(&[("a", "d1"), ("a", "d2"), ("b", "d1")]);
        let grid = GridSpec::singleton(1, 1e-3, 16, 1, 0.0, 0.0, (1, 1));
        let mut plan = ExperimentPlan {
            protocol: Protocol::LeaveDatasetOut,
            corpus: spec.clone(),
            target: Some(("a".into(), "d1".into())),
            fractions: vec![],
            grid: grid.clone(),
            seed: 0,
        };
        let err = plan.validate().expect_err("leak must be refused");
        assert!(matches!(err, Error::Protocol(_)));
        plan.corpus = spec.excluding("a", "d1").unwrap();
        plan.validate().unwrap();

        let mut llm_plan = ExperimentPlan {
            protocol: Protocol::LeaveLlmOut,
            corpus: spec.clone(),
            target: Some(("a".into(), String::new())),
            fractions: vec![],
            grid: grid.clone(),
            seed: 0,
        };
        assert!(llm_plan.validate().is_err());
        llm_plan.corpus = spec.excluding_llm("a").unwrap();
        llm_plan.validate().unwrap();

        let mut low = ExperimentPlan {
            protocol: Protocol::LowDataAdapt,
            corpus: spec.excluding("a", "d1").unwrap(),
            target: Some(("a".into(), "d1".into())),
            fractions: vec![5, 10, 37],
            grid,
            seed: 0,
        };
        assert!(low.validate().is_err()); // 37% is not a known fraction
        low.fractions = vec![5, 10, 20, 50, 100];
        low.validate().unwrap();
    }
}
