use contrast_lab::datagen::{synthetic_dataset, AugmentConfig};
use contrast_lab::trainer::{evaluate, read_snapshot, train_run, write_snapshot, EncoderParams, Framework, TrainConfig};
use contrast_lab::types::{LossSpec, TemperatureConfig};
use contrast_lab::Error;

#[test]
fn random_encoder_is_near_chance_on_unstructured_data() {
    for seed in 0..5 {
        let data = synthetic_dataset(10, 200, 32, 1.0, seed).unwrap();
        let params = EncoderParams::init(32, None, 16, seed).unwrap();
        let m = evaluate(&params, &data, &AugmentConfig::default(), 200, 0).unwrap();
        assert!(m.knn_accuracy > 0.05 && m.knn_accuracy < 0.3, "seed {seed}: {}", m.knn_accuracy);
    }
}

fn small_config(loss: LossSpec) -> TrainConfig {
    TrainConfig {
        loss,
        batch_size: 8,
        epochs: 4,
        eval_k: 10,
        out_dim: 8,
        seed: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn adaptive_temperature_tracks_alignment() {
    let data = synthetic_dataset(4, 24, 12, 0.2, 2).unwrap();
    let aug = AugmentConfig {
        noise_sigma: 0.3,
        ..AugmentConfig::default()
    };
    let t = TemperatureConfig::new(0.2, 0.5, 0.0).unwrap();
    let record = train_run(&data, &aug, &small_config(LossSpec::macl(t, true, true))).unwrap();
    assert_eq!(record.epochs(), 4);
    assert!(record.clamp_count.iter().all(|&c| c == 0));
    for (a, tau) in record.a_batch.iter().zip(&record.tau_used) {
        assert!((tau - (1.0 + 0.5 * a) * 0.2).abs() < 1e-12);
    }
    for e in 1..record.epochs() {
        if record.a_batch[e] >= record.a_batch[e - 1] {
            assert!(record.tau_used[e] >= record.tau_used[e - 1]);
        }
    }
}

#[test]
fn fixed_temperature_variants_keep_tau() {
    let data = synthetic_dataset(3, 16, 8, 0.2, 1).unwrap();
    for loss in [LossSpec::infonce(0.3).unwrap(), LossSpec::dcl(0.3).unwrap()] {
        let record = train_run(&data, &AugmentConfig::default(), &small_config(loss)).unwrap();
        assert!(record.tau_used.iter().all(|&t| t == 0.3));
        assert!(record.loss.iter().all(|l| l.is_finite()));
    }
}

#[test]
fn queue_framework_trains_with_two_layers() {
    let data = synthetic_dataset(3, 16, 8, 0.2, 1).unwrap();
    let cfg = TrainConfig {
        framework: Framework::Queue,
        queue_size: 16,
        hidden_dim: Some(6),
        ..small_config(LossSpec::macl(TemperatureConfig::new(0.2, 0.5, 0.0).unwrap(), true, true))
    };
    let record = train_run(&data, &AugmentConfig::default(), &cfg).unwrap();
    assert_eq!(record.final_params.layers().len(), 2);
    assert!(record.knn_accuracy.iter().all(|k| (0.0..=1.0).contains(k)));

    let ntxent = TrainConfig {
        loss: LossSpec::ntxent(0.2).unwrap(),
        ..cfg
    };
    assert!(matches!(
        train_run(&data, &AugmentConfig::default(), &ntxent),
        Err(Error::InvalidConfig(_))
    ));
}

#[test]
fn snapshot_of_a_trained_encoder_roundtrips() {
    let data = synthetic_dataset(3, 16, 8, 0.2, 1).unwrap();
    let record = train_run(&data, &AugmentConfig::default(), &small_config(LossSpec::infonce(0.2).unwrap())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("params.bin");
    write_snapshot(&record.final_params, &path).unwrap();
    assert_eq!(read_snapshot(&path).unwrap(), record.final_params);
}

#[test]
fn batch_larger_than_dataset_is_rejected() {
    let data = synthetic_dataset(2, 3, 4, 0.1, 0).unwrap();
    let cfg = small_config(LossSpec::infonce(0.2).unwrap());
    assert!(matches!(
        train_run(&data, &AugmentConfig::default(), &cfg),
        Err(Error::InvalidConfig(_))
    ));
}
