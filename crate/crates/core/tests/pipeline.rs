use sysid_core::data::{generate_teacher_dataset, TeacherSpec};
use sysid_core::metrics::dataset_score;
use sysid_core::training::{train, Phase, TrainSchedule};
use sysid_core::{build_model, checkpoint, ModelConfig, NeuralDataset, ReadoutMode};

fn small_teacher() -> TeacherSpec {
    let mut spec = TeacherSpec::desk_scale();
    spec.stimuli = 120;
    spec.model.input_shape = (20, 20);
    spec.model.num_neurons = 3;
    spec
}

#[test]
fn teacher_data_trains_saves_and_reloads() {
    let (ds, _, _) = generate_teacher_dataset(&small_teacher(), 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(&dir.path().join("ds.sysid"), serde_json::Value::Null).unwrap();
    let ds = NeuralDataset::<f64>::load(&dir.path().join("ds.sysid"), false).unwrap();

    let cfg = ModelConfig {
        input_shape: (20, 20),
        num_neurons: 3,
        ..ModelConfig::recurrent(1, 4, 2, ReadoutMode::TwoAvg)
    };
    let mut model = build_model::<f64>(&cfg).unwrap();
    let before = dataset_score(&model, &ds).unwrap();
    let schedule = TrainSchedule {
        phases: vec![
            Phase { learning_rate: 3e-3, max_epochs: 4, patience: 2 },
            Phase { learning_rate: 1e-3, max_epochs: 2, patience: 1 },
        ],
        batch_size: 16,
        ..TrainSchedule::default()
    };
    let history = train(&mut model, &ds, &schedule).unwrap();
    assert_eq!(history.stop_epochs.len(), 2);
    assert!(history.best_val.iter().all(|v| v.is_finite()));

    let path = dir.path().join("model.ck");
    checkpoint::save(&model, &path, serde_json::json!({"note": "pipeline"})).unwrap();
    let reloaded = checkpoint::load::<f64>(&path).unwrap();
    let (x, _) = ds.batch(&ds.split.test);
    assert_eq!(model.predict(&x).unwrap(), reloaded.predict(&x).unwrap());
    assert_eq!(checkpoint::load_extra(&path).unwrap()["note"], "pipeline");

    let after = dataset_score(&model, &ds).unwrap();
    assert!(after.mean_cc_norm2 > before.mean_cc_norm2, "{} -> {}", before.mean_cc_norm2, after.mean_cc_norm2);
}
