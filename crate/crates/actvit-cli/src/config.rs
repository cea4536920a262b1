//! Run configuration: one JSON file drives synthesis, training, and
//! evaluation. Unknown keys are rejected; flags override file values.

use std::path::{Path, PathBuf};

use actvit::error::{Error, Result};
use actvit::llm::LlmRegistry;
use actvit::model::{ActVitConfig, PatchConfig, Readout};
use actvit::store::{CorpusEntry, CorpusSpec, Dtype, IngestOptions};
use actvit::synth::ToyTransformer;
use actvit::tensor::{PoolConfig, PoolMode};
use actvit::trainer::{ExperimentPlan, GridSpec, OptimSpec, Protocol};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data_dir: PathBuf,
    pub reference_mode: bool,
    pub synth: SynthSettings,
    pub pool: PoolSettings,
    pub model: ModelSettings,
    pub optim: OptimSettings,
    pub plan: PlanSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_dir: PathBuf::from("runs"),
            data_dir: PathBuf::from("data"),
            reference_mode: false,
            synth: SynthSettings::default(),
            pool: PoolSettings::default(),
            model: ModelSettings::default(),
            optim: OptimSettings::default(),
            plan: PlanSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSettings {
    pub samples_per_dataset: usize,
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub dtype: String,
    pub store_raw: bool,
    pub tasks: Vec<TaskSettings>,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            samples_per_dataset: 600,
            test_fraction: 0.3,
            val_fraction: 0.2,
            dtype: "f16".to_string(),
            store_raw: true,
            tasks: vec![
                TaskSettings {
                    name: "lin-late".into(),
                    rule: "linear".into(),
                    pooled_row: 2,
                    token_offset: -1,
                    len_min: 8,
                    len_max: 8,
                    margin: 0.3,
                    flip_p: 0.0,
                    noise_scale: 0.0,
                },
                TaskSettings {
                    name: "lin-early".into(),
                    rule: "linear".into(),
                    pooled_row: 1,
                    token_offset: 2,
                    len_min: 8,
                    len_max: 8,
                    margin: 0.3,
                    flip_p: 0.0,
                    noise_scale: 0.0,
                },
                TaskSettings {
                    name: "xor-late".into(),
                    rule: "xor".into(),
                    pooled_row: 2,
                    token_offset: -1,
                    len_min: 8,
                    len_max: 8,
                    margin: 0.25,
                    flip_p: 0.0,
                    noise_scale: 0.0,
                },
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSettings {
    pub name: String,
    /// "linear" or "xor".
    pub rule: String,
    /// Signal position expressed as a pooled-grid row, so the same task
    /// lands on the same pooled pixel for every LLM shape.
    pub pooled_row: usize,
    pub token_offset: i32,
    pub len_min: usize,
    pub len_max: usize,
    #[serde(default)]
    pub margin: f32,
    #[serde(default)]
    pub flip_p: f64,
    #[serde(default)]
    pub noise_scale: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolSettings {
    pub target_layers: usize,
    pub target_tokens: usize,
    pub mode: String,
}

impl Default for PoolSettings {
    fn default() -> Self {
        PoolSettings {
            target_layers: 4,
            target_tokens: 8,
            mode: "two_d".to_string(),
        }
    }
}

impl PoolSettings {
    pub fn to_pool_config(&self) -> Result<PoolConfig> {
        let mode = match self.mode.as_str() {
            "two_d" => PoolMode::TwoD,
            "layer_only" => PoolMode::LayerOnly,
            other => {
                return Err(Error::config(format!(
                    "unknown pool mode '{other}' (expected two_d or layer_only)"
                )))
            }
        };
        let cfg = PoolConfig {
            target_layers: self.target_layers,
            target_tokens: self.target_tokens,
            mode,
            ..PoolConfig::default()
        };
        cfg.validate().map_err(|e| Error::config(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub shared_dim: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: (usize, usize),
    pub dropout: f64,
    pub readout: String,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            shared_dim: 16,
            embed_dim: 32,
            depth: 2,
            heads: 4,
            patch: (1, 1),
            dropout: 0.3,
            readout: "mean".to_string(),
        }
    }
}

impl ModelSettings {
    pub fn to_model_config(&self, pool: PoolConfig) -> Result<ActVitConfig> {
        let readout = match self.readout.as_str() {
            "mean" => Readout::Mean,
            "cls" => Readout::Cls,
            other => {
                return Err(Error::config(format!(
                    "unknown readout '{other}' (expected mean or cls)"
                )))
            }
        };
        let cfg = ActVitConfig {
            pool,
            patch: PatchConfig {
                rows: self.patch.0,
                cols: self.patch.1,
            },
            shared_dim: self.shared_dim,
            embed_dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            dropout: self.dropout,
            readout,
        };
        cfg.validate().map_err(|e| Error::config(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSettings {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    pub class_weight: bool,
}

impl Default for OptimSettings {
    fn default() -> Self {
        OptimSettings {
            lr: 5e-3,
            weight_decay: 1e-3,
            epochs: 25,
            batch_size: 32,
            clip_norm: Some(1.0),
            class_weight: false,
        }
    }
}

impl OptimSettings {
    pub fn to_optim_spec(&self, seed: u64) -> Result<OptimSpec> {
        let spec = OptimSpec {
            lr: self.lr,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            clip_norm: self.clip_norm,
            class_weight: self.class_weight,
        };
        spec.validate().map_err(|e| Error::config(e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanSettings {
    pub protocol: String,
    /// Training pairs; None means every dataset found under data_dir.
    pub corpus: Option<Vec<(String, String)>>,
    pub target: Option<(String, String)>,
    pub fractions: Vec<u32>,
    pub grid: Option<GridSpec>,
}

impl Default for PlanSettings {
    fn default() -> Self {
        PlanSettings {
            protocol: "joint_all".to_string(),
            corpus: None,
            target: None,
            fractions: vec![5, 10, 20, 50, 100],
            grid: None,
        }
    }
}

impl PlanSettings {
    pub fn protocol(&self) -> Result<Protocol> {
        Ok(match self.protocol.as_str() {
            "single_source" => Protocol::SingleSource,
            "joint_all" => Protocol::JointAll,
            "leave_dataset_out" => Protocol::LeaveDatasetOut,
            "leave_llm_out" => Protocol::LeaveLlmOut,
            "low_data_adapt" => Protocol::LowDataAdapt,
            other => {
                return Err(Error::config(format!(
                    "unknown protocol '{other}'"
                )))
            }
        })
    }

    /// Build the experiment plan over the available dataset pairs. When the
    /// config does not pin a corpus, leave-*-out protocols auto-exclude the
    /// target; an explicit corpus is taken literally so that protocol
    /// violations surface as errors.
    pub fn to_plan(
        &self,
        available_pairs: &[(String, String)],
        grid_fallback: GridSpec,
        seed: u64,
    ) -> Result<ExperimentPlan> {
        let protocol = self.protocol()?;
        let spec = match &self.corpus {
            Some(pairs) => CorpusSpec {
                entries: pairs
                    .iter()
                    .map(|(l, d)| CorpusEntry::included(l, d))
                    .collect(),
            },
            None => {
                let mut spec = CorpusSpec {
                    entries: available_pairs
                        .iter()
                        .map(|(l, d)| CorpusEntry::included(l, d))
                        .collect(),
                };
                match (protocol, &self.target) {
                    (Protocol::LeaveDatasetOut | Protocol::LowDataAdapt, Some((l, d))) => {
                        spec = spec.excluding(l, d)?;
                    }
                    (Protocol::LeaveLlmOut, Some((l, _))) => {
                        spec = spec.excluding_llm(l)?;
                    }
                    (Protocol::SingleSource, Some((l, d))) => {
                        spec = CorpusSpec::of_pairs(&[(l.as_str(), d.as_str())]);
                    }
                    _ => {}
                }
                spec
            }
        };
        let plan = ExperimentPlan {
            protocol,
            corpus: spec,
            target: self.target.clone(),
            fractions: self.fractions.clone(),
            grid: self.grid.clone().unwrap_or(grid_fallback),
            seed,
        };
        plan.validate()?;
        Ok(plan)
    }
}

impl RunConfig {
    /// Load from a JSON file; unknown keys are a config error naming the key.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::config(format!("invalid config {}: {e}", path.display())))
    }

    pub fn dtype(&self) -> Result<Dtype> {
        match self.synth.dtype.as_str() {
            "f16" => Ok(Dtype::F16),
            "f32" => Ok(Dtype::F32),
            other => Err(Error::config(format!(
                "unknown dtype '{other}' (expected f16 or f32)"
            ))),
        }
    }

    pub fn ingest_options(&self) -> Result<IngestOptions> {
        Ok(IngestOptions {
            pool_config: self.pool.to_pool_config()?,
            dtype: self.dtype()?,
            store_raw: self.synth.store_raw,
            test_fraction: self.synth.test_fraction,
            val_fraction: self.synth.val_fraction,
            seed: self.seed,
        })
    }

    /// A one-point grid carrying the flat optim/model settings, used when
    /// the plan does not request a search.
    pub fn singleton_grid(&self) -> GridSpec {
        GridSpec::singleton(
            self.model.depth,
            self.optim.lr,
            self.model.embed_dim,
            self.optim.epochs,
            self.model.dropout,
            self.optim.weight_decay,
            self.model.patch,
        )
    }
}

/// The source layer that pooling maps onto `pooled_row` for a model with
/// `layers` layers at a target of `target_layers` pooled rows.
pub fn layer_for_pooled_row(pooled_row: usize, layers: usize, target_layers: usize) -> usize {
    let padded = layers.div_ceil(target_layers) * target_layers;
    let factor = padded / target_layers;
    (pooled_row * factor).min(layers - 1)
}

/// Instantiate a configured task for one toy model.
pub fn task_for_model(
    settings: &TaskSettings,
    model: &ToyTransformer,
    pool: &PoolConfig,
    seed: u64,
) -> Result<actvit::synth::PlantedTask> {
    use actvit::synth::PlantedTask;
    let layer = layer_for_pooled_row(
        settings.pooled_row,
        model.cfg.layers,
        pool.target_layers,
    );
    let len_range = (settings.len_min, settings.len_max);
    let mut task = match settings.rule.as_str() {
        "linear" => PlantedTask::linear(&settings.name, model, layer, settings.token_offset, len_range, seed),
        "xor" => PlantedTask::xor(&settings.name, model, layer, settings.token_offset, len_range, seed),
        other => {
            return Err(Error::config(format!(
                "unknown task rule '{other}' (expected linear or xor)"
            )))
        }
    };
    task.margin = settings.margin;
    task.flip_p = settings.flip_p;
    task.noise_scale = settings.noise_scale;
    Ok(task)
}

/// The toy model zoo plus its registry (regenerated deterministically).
pub fn zoo() -> (LlmRegistry, Vec<ToyTransformer>) {
    actvit::synth::toy_zoo()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.synth.tasks.len(), 3);
    }

    #[test]
    fn unknown_keys_rejected_with_name() {
        let err = serde_json::from_str::<RunConfig>("{\"seed\": 1, \"wheels\": 4}")
            .expect_err("unknown key must fail");
        assert!(err.to_string().contains("wheels"));
    }

    #[test]
    fn pooled_row_mapping() {
        // toy-s: 4 layers at 4 rows -> identity.
        assert_eq!(layer_for_pooled_row(2, 4, 4), 2);
        // toy-m: 6 layers pad to 8, factor 2 -> row 2 covers layers 4..6.
        assert_eq!(layer_for_pooled_row(2, 6, 4), 4);
        // toy-l: 8 layers, factor 2.
        assert_eq!(layer_for_pooled_row(2, 8, 4), 4);
        // Clamped to the last layer when the row maps past the top.
        assert_eq!(layer_for_pooled_row(3, 6, 4), 5);
    }
}
