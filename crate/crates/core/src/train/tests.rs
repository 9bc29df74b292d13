use super::*;
use crate::capsnet::EncoderConfig;
use crate::eval::{rotation_probe, EvalProtocol, EvalSelection, ProbeConfig};
use crate::model::ProjectorKind;
use crate::synthgen::generate_dataset;

fn small_model(projector: ProjectorKind) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_size: 16,
            widths: vec![4, 8],
            kernel_sizes: vec![3, 3],
            strides: vec![2, 2],
            ..EncoderConfig::default()
        },
        n_caps: 4,
        projector,
        split_hidden: 16,
        predictor_hidden: Some(8),
    }
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        model: small_model(ProjectorKind::Capsule),
        epochs: 2,
        batch_size: 16,
        eval_cadence: 1,
        ..TrainConfig::new(seed)
    }
}

/// 2 classes × 8 objects × 4 views = 64 records.
fn small_dataset() -> Dataset {
    generate_dataset(2, 8, 4, 16, 3).unwrap()
}

fn param(params: &ParamSet<f32>, prefix: &str) -> Vec<Tensor<f32>> {
    params
        .names()
        .iter()
        .zip(params.values())
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(_, v)| v.clone())
        .collect()
}

fn train_with(config: TrainConfig, ds: &Dataset) -> (ParamSet<f32>, ParamSet<f32>) {
    let mut t = Trainer::new(config, ds).unwrap();
    let before = t.params.clone();
    t.run_collect().unwrap();
    (before, t.params.clone())
}

#[test]
fn smoke_run_writes_a_loadable_checkpoint() {
    let ds = small_dataset();
    assert_eq!(ds.len(), 64);
    let (state, log) = pretrain(&small_config(1), &ds).unwrap();
    let t = Trainer::new(small_config(1), &ds).unwrap();
    assert_eq!(step_series(&log).len(), 2 * t.batches_per_epoch());
    assert!(step_series(&log).iter().all(|s| s.losses.is_finite()));

    let path = std::env::temp_dir().join(format!("capsie-smoke-{}.ckpt", std::process::id()));
    state.save(&path).unwrap();
    let loaded = CheckpointState::load(&path).unwrap();
    std::fs::remove_file(&path).ok();
    assert_eq!(loaded.params.checksum(), state.params.checksum());
    assert_eq!(loaded.position, state.position);
    assert_eq!(loaded.to_bytes().unwrap(), state.to_bytes().unwrap());
    let (model, params) = loaded.model().unwrap();
    assert_eq!(model.config, state.config.model);
    assert_eq!(params.checksum(), state.params.checksum());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let ds = small_dataset();
    let t = Trainer::new(small_config(1), &ds).unwrap();
    let bytes = t.checkpoint().unwrap().to_bytes().unwrap();
    assert!(matches!(
        CheckpointState::from_bytes(&bytes[..bytes.len() - 4]),
        Err(Error::Format(_))
    ));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(
        CheckpointState::from_bytes(&extra),
        Err(Error::Format(_))
    ));
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(matches!(
        CheckpointState::from_bytes(&magic),
        Err(Error::Format(_))
    ));
}

#[test]
fn resume_reproduces_the_next_loss_bit_identically() {
    let ds = small_dataset();
    let config = small_config(5);
    let mut full = Trainer::new(config.clone(), &ds).unwrap();
    let total = full.config.epochs * full.batches_per_epoch();
    let mut reference = Vec::new();
    for _ in 0..total {
        reference.extend(full.step().unwrap());
    }

    // stop mid-epoch and after an epoch boundary with an online eval
    for stop in [1, full.batches_per_epoch()] {
        let mut t = Trainer::new(config.clone(), &ds).unwrap();
        let mut log = Vec::new();
        for _ in 0..stop {
            log.extend(t.step().unwrap());
        }
        let bytes = t.checkpoint().unwrap().to_bytes().unwrap();
        drop(t);
        let mut resumed =
            Trainer::resume(&CheckpointState::from_bytes(&bytes).unwrap(), &ds).unwrap();
        log.extend(resumed.run_collect().unwrap());
        let a: Vec<String> = log.iter().map(LogRecord::to_json_line).collect();
        let b: Vec<String> = reference.iter().map(LogRecord::to_json_line).collect();
        assert_eq!(a, b, "resumed after {stop} steps");
    }
}

#[test]
fn resume_rejects_a_different_dataset() {
    let ds = small_dataset();
    let other = generate_dataset(2, 8, 4, 16, 4).unwrap();
    let state = Trainer::new(small_config(1), &ds)
        .unwrap()
        .checkpoint()
        .unwrap();
    assert!(matches!(
        Trainer::resume(&state, &other),
        Err(Error::Contract(_))
    ));
}

#[test]
fn identical_configs_give_identical_logs() {
    let ds = small_dataset();
    let a = pretrain(&small_config(9), &ds).unwrap().1;
    let b = pretrain(&small_config(9), &ds).unwrap().1;
    let c = pretrain(&small_config(10), &ds).unwrap().1;
    let lines = |l: &[LogRecord]| {
        l.iter()
            .map(LogRecord::to_json_line)
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(lines(&a), lines(&b));
    assert_ne!(lines(&a), lines(&c));
}

#[test]
fn predictor_is_untouched_without_equivariant_and_variance_terms() {
    let ds = small_dataset();
    let mut config = small_config(2);
    config.loss.lambda_equi = 0.0;
    config.loss.lambda_v = 0.0;
    let (before, after) = train_with(config.clone(), &ds);
    assert_eq!(param(&before, "predictor."), param(&after, "predictor."));
    assert_ne!(param(&before, "encoder."), param(&after, "encoder."));

    // the variance term on the prediction alone still moves it
    config.loss.lambda_v = 10.0;
    let (before, after) = train_with(config, &ds);
    assert_ne!(param(&before, "predictor."), param(&after, "predictor."));
}

#[test]
fn pose_only_parameters_need_the_pose_terms() {
    let ds = small_dataset();
    let mut config = small_config(2);
    config.loss.lambda_equi = 0.0;
    config.loss.lambda_v = 0.0;
    config.loss.lambda_c = 0.0;
    let (before, after) = train_with(config.clone(), &ds);
    for prefix in ["predictor.", "routing.w_pose"] {
        assert_eq!(param(&before, prefix), param(&after, prefix), "{prefix}");
    }
    assert_ne!(
        param(&before, "routing.w_route"),
        param(&after, "routing.w_route")
    );

    config.model.projector = ProjectorKind::SplitMlp;
    let (before, after) = train_with(config, &ds);
    assert_eq!(param(&before, "split.equi."), param(&after, "split.equi."));
    assert_ne!(param(&before, "split.inv."), param(&after, "split.inv."));
}

#[test]
fn online_probes_leave_the_backbone_alone() {
    let ds = small_dataset();
    let mut t = Trainer::new(small_config(4), &ds).unwrap();
    t.run_collect().unwrap();
    let checksum = t.params.checksum();
    let probes = t.online.as_ref().unwrap().classifier.params().checksum();
    t.online_eval().unwrap();
    t.online_eval().unwrap();
    assert_eq!(t.params.checksum(), checksum);
    assert_eq!(
        t.online.as_ref().unwrap().classifier.params().checksum(),
        probes
    );

    // the probes are detached: training with and without them is identical
    let mut off = small_config(4);
    off.eval_cadence = 0;
    let mut t2 = Trainer::new(off, &ds).unwrap();
    t2.run_collect().unwrap();
    assert!(t2.online.is_none());
    assert_eq!(t2.params.checksum(), checksum);
}

#[test]
fn eval_series_length_follows_the_cadence() {
    let ds = small_dataset();
    for (epochs, cadence) in [(5, 2), (4, 1), (3, 4), (3, 0)] {
        let config = TrainConfig {
            epochs,
            eval_cadence: cadence,
            ..small_config(1)
        };
        let log = pretrain(&config, &ds).unwrap().1;
        let expect = if cadence == 0 { 0 } else { epochs / cadence };
        let series = eval_series(&log);
        assert_eq!(series.len(), expect, "epochs {epochs} cadence {cadence}");
        for (i, r) in series.iter().enumerate() {
            assert_eq!(r.epoch, (i + 1) * cadence);
            assert!((0.0..=1.0).contains(&r.classification_top1));
        }
    }
}

#[test]
fn running_norm_standardises_a_stationary_stream() {
    let mut norm = RunningNorm::new(2);
    let x = Tensor::new([4, 2], vec![1.0, 10.0, 3.0, 10.0, 1.0, 14.0, 3.0, 14.0]).unwrap();
    for _ in 0..50 {
        norm.update(&x).unwrap();
    }
    assert!((norm.mean[0] - 2.0).abs() < 1e-5 && (norm.mean[1] - 12.0).abs() < 1e-5);
    assert!((norm.var[0] - 1.0).abs() < 1e-5 && (norm.var[1] - 4.0).abs() < 1e-5);
    let z = norm.apply(&x).unwrap();
    assert!((z.data()[0] + 1.0).abs() < 1e-4 && (z.data()[3] + 1.0).abs() < 1e-4);
    assert!(norm.apply(&Tensor::zeros([2, 3])).is_err());
}

#[test]
fn untrained_rotation_r2_matches_random_features() {
    let ds = generate_dataset(4, 6, 4, 16, 8).unwrap();
    let split = ds.object_split(0.2).unwrap();
    let t = Trainer::new(small_config(3), &ds).unwrap();
    let probe = ProbeConfig {
        epochs: 30,
        hidden: 64,
        ..ProbeConfig::rotation()
    };
    let emb = crate::eval::embed_dataset(&t.model, &t.params, &ds, 64).unwrap();
    let untrained = rotation_probe(&emb.pose, &ds, &split, &probe).unwrap();
    let noise = Tensor::<f32>::randn(emb.pose.shape().to_vec(), 1.0, &mut derive_rng(11, &[]));
    let random = rotation_probe(&noise, &ds, &split, &probe).unwrap();
    assert!(
        untrained < 0.3 && random < 0.3,
        "untrained {untrained} random {random}"
    );
    assert!(
        (untrained - random).abs() < 0.3,
        "untrained {untrained} random {random}"
    );
}

#[test]
fn non_finite_parameters_abort_with_a_diagnostic() {
    let ds = small_dataset();
    let mut t = Trainer::new(small_config(1), &ds).unwrap();
    let w = t.params.values_mut()[0].data_mut();
    w[0] = f32::NAN;
    match t.step() {
        Err(Error::Diverged {
            step,
            epoch,
            batch,
            views,
            ..
        }) => {
            assert_eq!((step, epoch, batch), (0, 0, 0));
            assert_eq!(views.len(), 2 * t.config.batch_size);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let ds = small_dataset();
    let mut c = small_config(1);
    c.batch_size = 1;
    assert!(matches!(Trainer::new(c, &ds), Err(Error::Config(_))));
    let mut c = small_config(1);
    c.epochs = 0;
    assert!(matches!(Trainer::new(c, &ds), Err(Error::Config(_))));
    let mut t = Trainer::new(small_config(1), &ds).unwrap();
    t.run_collect().unwrap();
    assert!(matches!(t.step(), Err(Error::Contract(_))));
}

#[test]
fn config_hash_ignores_the_dataset_path() {
    let mut a = small_config(1);
    let h = a.hash();
    a.dataset = Some("elsewhere.bin".into());
    assert_eq!(a.hash(), h);
    a.seed = 2;
    assert_ne!(a.hash(), h);
    let json = serde_json::to_string(&a).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), a);
}

#[test]
fn sweep_rows_share_the_dataset_and_scale_the_pose() {
    let ds = small_dataset();
    let base = TrainConfig {
        epochs: 1,
        ..small_config(1)
    };
    let protocol = EvalProtocol::default();
    let selection = EvalSelection {
        classify: true,
        ..EvalSelection::NONE
    };
    let mut seen = 0;
    let report = capsule_sweep(&base, &[8, 16, 32], &ds, &protocol, selection, |_| {
        seen += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, 3);
    assert_eq!(report.rows.len(), 3);
    let dims: Vec<usize> = report.rows.iter().map(|r| r.pose_dim).collect();
    assert_eq!(dims, [128, 256, 512]);
    let sum = ds.checksum().unwrap();
    assert!(report.rows.iter().all(|r| r.dataset_checksum == sum));
    assert!(report.rows.iter().all(|r| r.final_online_top1.is_some()));
    assert_eq!(report.reports().len(), 3);
}
