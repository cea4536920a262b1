//! Model archives: the shared binary container with magic "ACTMODL1", a
//! JSON header carrying the architecture config, the LLM registry snapshot,
//! freeze state and training provenance, then every parameter tensor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::{LlmDescriptor, LlmRegistry};
use crate::nn::optim::ParamSource;
use crate::store::archive::{Archive, ArchiveWriter, Dtype, MODEL_MAGIC};

use super::{ActVitConfig, ActVitModel, ParamGroup};

/// Where a trained model's data came from; consulted by the zero-shot
/// protocol guards.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub protocol: String,
    pub trained_pairs: Vec<(String, String)>,
    pub seed: u64,
}

impl Provenance {
    pub fn trained_on(&self, llm_id: &str, dataset_id: &str) -> bool {
        self.trained_pairs
            .iter()
            .any(|(l, d)| l == llm_id && d == dataset_id)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    config: ActVitConfig,
    llms: Vec<LlmDescriptor>,
    frozen: Vec<String>,
    provenance: Option<Provenance>,
}

fn group_name(g: &ParamGroup) -> String {
    match g {
        ParamGroup::Backbone => "backbone".to_string(),
        ParamGroup::Positional => "positional".to_string(),
        ParamGroup::Head => "head".to_string(),
        ParamGroup::Adapter(id) => format!("adapters:{id}"),
    }
}

/// Serialize a model (f32 weights, bit-exact) plus optional provenance.
pub fn save_actvit(
    path: &Path,
    model: &ActVitModel<f32>,
    provenance: Option<&Provenance>,
) -> Result<()> {
    let mut writer = ArchiveWriter::new();
    let mut scratch = model.clone();
    scratch.visit_params(&mut |name, p, _| {
        writer.push_tensor(
            &name,
            Dtype::F32,
            &[p.value.rows, p.value.cols],
            &p.value.data,
            None,
            None,
        );
    });
    let meta = ModelMeta {
        kind: "actvit".to_string(),
        config: model.config.clone(),
        llms: model
            .adapters
            .llm_ids()
            .map(|id| model.adapters.descriptor(id).expect("registered").clone())
            .collect(),
        frozen: model.frozen_groups().iter().map(group_name).collect(),
        provenance: provenance.cloned(),
    };
    writer.write(path, MODEL_MAGIC, &meta)
}

/// Load a model archive; weights round-trip bit-exactly.
pub fn load_actvit(path: &Path) -> Result<(ActVitModel<f32>, Option<Provenance>)> {
    let arch: Archive<ModelMeta> = Archive::read(path, MODEL_MAGIC)?;
    if arch.meta.kind != "actvit" {
        return Err(Error::format(format!(
            "archive holds a '{}' model, expected 'actvit'",
            arch.meta.kind
        )));
    }
    let mut registry = LlmRegistry::new();
    for desc in &arch.meta.llms {
        registry.register(desc.clone())?;
    }
    let mut model = ActVitModel::<f32>::new(arch.meta.config.clone(), &registry, 0)?;
    let mut missing = Vec::new();
    model.visit_params(&mut |name, p, _| match arch.find(&name) {
        Some(rec) => {
            let want = vec![p.value.rows, p.value.cols];
            if rec.shape != want {
                missing.push(format!(
                    "'{name}': archive shape {:?} != model shape {want:?}",
                    rec.shape
                ));
                return;
            }
            p.value.data = arch.tensor_f32(rec);
        }
        None => missing.push(format!("'{name}': missing from archive")),
    });
    if !missing.is_empty() {
        return Err(Error::format(format!(
            "model archive incomplete: {}",
            missing.join("; ")
        )));
    }
    let groups: Result<Vec<ParamGroup>> =
        arch.meta.frozen.iter().map(|s| ParamGroup::parse(s)).collect();
    model.freeze(&groups?)?;
    Ok((model, arch.meta.provenance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::param_snapshot;
    use crate::store::{ingest, IngestOptions};
    use crate::synth::{generate_dataset, toy_zoo, PlantedTask};
    use crate::tensor::{PoolConfig, PooledTensor};

    fn trained_ish_model() -> ActVitModel<f32> {
        let (registry, _) = toy_zoo();
        ActVitModel::new(ActVitConfig::toy_default(), &registry, 77).unwrap()
    }

    fn a_batch() -> Vec<PooledTensor> {
        let (registry, models) = toy_zoo();
        let task = PlantedTask::linear("t", &models[0], 1, -1, (8, 12), 5);
        let (labeled, _) = generate_dataset(&models[0], &task, "io", 24, 3).unwrap();
        let opts = IngestOptions {
            pool_config: PoolConfig::two_d(4, 8),
            store_raw: false,
            test_fraction: 0.0,
            val_fraction: 0.25,
            seed: 1,
            dtype: crate::store::Dtype::F32,
        };
        let (stored, _) = ingest(&labeled, &registry, &opts).unwrap();
        stored.samples.into_iter().take(3).map(|s| s.pooled).collect()
    }

    #[test]
    fn save_load_forward_is_bitwise_identical() {
        let mut model = trained_ish_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let prov = Provenance {
            protocol: "joint_all".into(),
            trained_pairs: vec![("toy-s".into(), "d0".into())],
            seed: 7,
        };
        save_actvit(&path, &model, Some(&prov)).unwrap();
        let (mut loaded, got_prov) = load_actvit(&path).unwrap();
        assert_eq!(got_prov, Some(prov));

        for ((n1, v1), (n2, v2)) in param_snapshot(&mut model)
            .into_iter()
            .zip(param_snapshot(&mut loaded))
        {
            assert_eq!(n1, n2);
            assert!(v1.iter().zip(&v2).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        let pooled = a_batch();
        let refs: Vec<&PooledTensor> = pooled.iter().collect();
        let za = model.forward_eval(&refs).unwrap();
        let zb = loaded.forward_eval(&refs).unwrap();
        assert!(za.iter().zip(&zb).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn corrupted_magic_fails_to_load() {
        let model = trained_ish_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_actvit(&path, &model, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[3] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_actvit(&path).is_err());
    }

    #[test]
    fn loaded_model_rejects_unknown_llm_cleanly() {
        let model = trained_ish_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_actvit(&path, &model, None).unwrap();
        let (loaded, _) = load_actvit(&path).unwrap();

        let mut pooled = a_batch();
        pooled[0].llm_id = "unseen-llm".into();
        let err = loaded
            .forward_eval(&[&pooled[0]])
            .expect_err("must fail");
        assert!(err.to_string().contains("adapter"), "{err}");
    }

    #[test]
    fn freeze_state_round_trips() {
        let mut model = trained_ish_model();
        model
            .freeze(&[ParamGroup::Backbone, ParamGroup::Adapter("toy-s".into())])
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_actvit(&path, &model, None).unwrap();
        let (loaded, _) = load_actvit(&path).unwrap();
        assert_eq!(loaded.frozen_groups(), model.frozen_groups());
    }
}
