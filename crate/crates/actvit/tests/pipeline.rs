//! End-to-end library pipeline: generate, ingest, persist, reload, train a
//! few epochs, archive the model, and verify the reloaded model scores
//! identically.

use actvit::model::{load_actvit, save_actvit, ActVitConfig, ActVitModel, Provenance};
use actvit::store::{
    ingest, read_dataset, write_dataset, Corpus, CorpusSpec, Dtype, IngestOptions, Split,
};
use actvit::synth::{generate_dataset, toy_zoo, PlantedTask};
use actvit::tensor::{PoolConfig, PooledTensor};
use actvit::trainer::{eval_auc, train, OptimSpec};

#[test]
fn synth_store_train_archive_round_trip() {
    let (registry, models) = toy_zoo();
    let model0 = &models[0];
    let task = PlantedTask::linear("e2e", model0, 2, -1, (8, 10), 31).with_margin(0.3);
    let (labeled, _) = generate_dataset(model0, &task, "e2e-ds", 160, 9).unwrap();
    let opts = IngestOptions {
        pool_config: PoolConfig::two_d(4, 8),
        dtype: Dtype::F16,
        store_raw: false,
        test_fraction: 0.25,
        val_fraction: 0.2,
        seed: 4,
    };
    let (stored, _) = ingest(&labeled, &registry, &opts).unwrap();

    // Persist and reload; training must behave identically on the reloaded
    // dataset because ingest pre-quantized to the storage dtype.
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &stored).unwrap();
    let reloaded = read_dataset(dir.path()).unwrap();

    let mut corpus = Corpus::new();
    corpus.insert(reloaded).unwrap();
    let spec = CorpusSpec::of_pairs(&[("toy-s", "e2e-ds")]);

    let mut cfg = ActVitConfig::toy_default();
    cfg.embed_dim = 16;
    cfg.depth = 1;
    cfg.shared_dim = 8;
    let mut model = ActVitModel::<f32>::new(cfg, &registry, 2).unwrap();
    let optim = OptimSpec {
        epochs: 4,
        batch_size: 16,
        seed: 6,
        ..Default::default()
    };
    let history = train(&mut model, &corpus, &spec, &optim).unwrap();
    assert_eq!(history.epochs.len(), 4);

    let ds = corpus.get("toy-s", "e2e-ds").unwrap();
    let test = ds.split_samples(Split::Test);
    let auc_before = eval_auc(&model, &test, 32).unwrap();

    let model_path = dir.path().join("model.bin");
    let provenance = Provenance {
        protocol: "single_source".into(),
        trained_pairs: vec![("toy-s".into(), "e2e-ds".into())],
        seed: 6,
    };
    save_actvit(&model_path, &model, Some(&provenance)).unwrap();
    let (loaded, got_prov) = load_actvit(&model_path).unwrap();
    assert_eq!(got_prov.unwrap(), provenance);

    let auc_after = eval_auc(&loaded, &test, 32).unwrap();
    assert_eq!(auc_before.to_bits(), auc_after.to_bits());

    // Logits bitwise identical per sample.
    let refs: Vec<&PooledTensor> = test.iter().map(|s| &s.pooled).collect();
    let za = model.forward_eval(&refs).unwrap();
    let zb = loaded.forward_eval(&refs).unwrap();
    assert!(za.iter().zip(&zb).all(|(a, b)| a.to_bits() == b.to_bits()));
}
