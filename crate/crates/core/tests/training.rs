use sodkit::dataset::{generate_synthetic, split, DatasetManifest, SplitStrategy, SynthOptions};
use sodkit::trainer::{build_model, predict, train_two_step, Backbone, TrainedModel, TrainingConfig};
use sodkit::{Error, ScoringMethod};

fn small_config(seed: u64) -> TrainingConfig {
    TrainingConfig {
        max_epochs_per_stage: 3,
        early_stop_patience: 2,
        batch_size: 8,
        seed,
        ..TrainingConfig::for_backbone(Backbone::TinyTest)
    }
}

fn fixture(dir: &std::path::Path) -> DatasetManifest {
    let schema = ScoringMethod::Gelderman.schema();
    let m = generate_synthetic(schema, 6, 64, 2, dir, &SynthOptions::default()).unwrap();
    split(&m, ScoringMethod::Gelderman, 0.8, SplitStrategy::StratifiedImage, 2).unwrap()
}

#[test]
fn same_seed_same_model() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = fixture(tmp.path());
    let schema = ScoringMethod::Gelderman.schema();
    let a = train_two_step(build_model(&small_config(4), schema).unwrap(), &manifest).unwrap();
    let b = train_two_step(build_model(&small_config(4), schema).unwrap(), &manifest).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.history, b.history);
    let c = train_two_step(build_model(&small_config(5), schema).unwrap(), &manifest).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn history_and_fingerprints_are_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = fixture(tmp.path());
    let model = build_model(&small_config(1), ScoringMethod::Gelderman.schema()).unwrap();
    let pretrained = model.backbone_fingerprint();
    let model = train_two_step(model, &manifest).unwrap();
    assert_eq!(model.history.stages.len(), 2);
    assert!(model.history.epochs.iter().all(|e| e.stage == 1 || e.stage == 2));
    assert_eq!(model.fingerprints.pretrained_backbone, pretrained);
    assert_eq!(model.fingerprints.backbone_prestage2.as_deref(), Some(pretrained.as_str()));
    assert_eq!(model.fingerprints.backbone_final.as_deref(), Some(model.backbone_fingerprint().as_str()));
    let stage2 = model.history.stage(2).unwrap();
    assert!(stage2.learning_rate < model.history.stage(1).unwrap().learning_rate);
    assert!(stage2.best_val_loss <= stage2.initial_val_loss);
}

#[test]
fn saved_model_predicts_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = fixture(&tmp.path().join("data"));
    let model = train_two_step(
        build_model(&small_config(9), ScoringMethod::Gelderman.schema()).unwrap(),
        &manifest,
    )
    .unwrap();
    let dir = tmp.path().join("model");
    model.save(&dir).unwrap();
    let loaded = TrainedModel::load(&dir).unwrap();
    assert_eq!(loaded, model);
    let img = sodkit::dataset::load_record_image(&manifest, &manifest.records[0]).unwrap();
    assert_eq!(predict(&model, &img).unwrap(), predict(&loaded, &img).unwrap());
    let history = std::fs::read_to_string(dir.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,stage,train_loss,val_loss,train_acc,val_acc"));
}

#[test]
fn pretrained_backbones_need_weights() {
    for backbone in [Backbone::InceptionV3, Backbone::Xception] {
        let config = TrainingConfig::for_backbone(backbone);
        match build_model(&config, ScoringMethod::Megyesi.schema()) {
            Err(Error::Acquisition { hint, .. }) => assert!(hint.contains("tiny_test")),
            other => panic!("expected acquisition error, got {other:?}"),
        }
    }
}

#[test]
fn training_requires_a_split() {
    let tmp = tempfile::tempdir().unwrap();
    let m = generate_synthetic(ScoringMethod::Megyesi.schema(), 2, 16, 0, tmp.path(), &SynthOptions::default()).unwrap();
    let model = build_model(&small_config(0), ScoringMethod::Megyesi.schema()).unwrap();
    assert!(train_two_step(model, &m).is_err());
}
