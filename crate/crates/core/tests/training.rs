use cmaev::data::{generate, Dataset, GenerateConfig, ShiftConfig};
use cmaev::model::{Checkpoint, CmaeModel, ModelConfig};
use cmaev::trainer::pretrain::{epoch_checkpoint_name, prepare_batch, FINAL_CHECKPOINT, METRICS_FILE};
use cmaev::trainer::{
    epoch_batches, evaluate_pretrain_loss, finetune, read_metrics, run_pretrain, Pretrainer, TrainConfig,
};

fn model_cfg() -> ModelConfig {
    ModelConfig {
        frames: 4,
        height: 16,
        width: 16,
        patch: 8,
        d_model: 24,
        depth: 1,
        heads: 2,
        d_proj: 16,
        decoder_width: 16,
        decoder_depth: 1,
        decoder_heads: 2,
        init_seed: 1,
        ..ModelConfig::default()
    }
}

fn data() -> Dataset {
    generate(&GenerateConfig {
        num_videos: 8,
        t_total: 24,
        height: 16,
        width: 16,
        seed: 11,
        ..GenerateConfig::default()
    })
    .unwrap()
}

fn pretrain_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        warmup_epochs: 1,
        total_epochs: 3,
        mask_ratio: 0.75,
        shift: ShiftConfig {
            frames: 4,
            ..ShiftConfig::default()
        },
        seed: 5,
        ..TrainConfig::pretrain()
    }
}

fn finetune_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        total_epochs: 2,
        warmup_epochs: 1,
        shift: pretrain_cfg().shift,
        ..TrainConfig::finetune()
    }
}

#[test]
fn masking_touches_only_the_online_view_and_jitter_only_the_target() {
    let ds = data();
    let cfg = pretrain_cfg();
    let model = CmaeModel::<f64>::new(model_cfg()).unwrap();
    let items = &epoch_batches(ds.len(), &cfg, 0)[0];
    let batch = prepare_batch::<f64>(&model.cfg, &ds, &cfg, 0, items).unwrap();
    let base = evaluate_pretrain_loss(&model, &batch, &cfg).unwrap();

    let mut target_moved = batch.clone();
    for t in &mut target_moved.target {
        t.data_mut().iter_mut().for_each(|v| *v = -*v + 0.5);
    }
    let moved = evaluate_pretrain_loss(&model, &target_moved, &cfg).unwrap();
    assert_eq!(moved.l_r, base.l_r);
    assert_ne!(moved.l_c, base.l_c);

    let mut masked_moved = batch.clone();
    let d = model.token_dim();
    for (t, plan) in masked_moved.online.iter_mut().zip(&batch.plans) {
        for &i in &plan.masked {
            t.data_mut()[i * d..(i + 1) * d].iter_mut().for_each(|v| *v += 3.0);
        }
    }
    let moved = evaluate_pretrain_loss(&model, &masked_moved, &cfg).unwrap();
    assert_eq!(moved.l_c, base.l_c);
    assert_ne!(moved.l_r, base.l_r);

    let mut unjittered = cfg.clone();
    unjittered.color_strength = 0.0;
    unjittered.shift.max_shift = 0;
    let plain = prepare_batch::<f64>(&model.cfg, &ds, &unjittered, 0, items).unwrap();
    for (o, t) in plain.online.iter().zip(&plain.target) {
        assert_eq!(o, t);
    }
}

#[test]
fn reconstruction_only_never_reads_the_target_view() {
    let ds = data();
    let cfg = TrainConfig {
        lambda_c: 0.0,
        ..pretrain_cfg()
    };
    let mut pre = Pretrainer::<f64>::new(cfg.clone(), model_cfg(), &ds).unwrap();
    let items = &epoch_batches(ds.len(), &cfg, 0)[0];
    let mut batch = prepare_batch::<f64>(&pre.model.cfg, &ds, &cfg, 0, items).unwrap();
    for t in &mut batch.target {
        t.data_mut().iter_mut().for_each(|v| *v = f64::NAN);
    }
    let losses = pre.step(&batch, 1e-3).unwrap();
    assert!(losses.l_c.is_none());
    assert_eq!(losses.l_r.map(|l| l == losses.total), Some(true));

    let contrastive = TrainConfig {
        lambda_r: 0.0,
        ..pretrain_cfg()
    };
    let model = CmaeModel::<f64>::new(model_cfg()).unwrap();
    let batch = prepare_batch::<f64>(&model.cfg, &ds, &contrastive, 0, items).unwrap();
    let losses = evaluate_pretrain_loss(&model, &batch, &contrastive).unwrap();
    assert!(losses.l_r.is_none());
    assert_eq!(losses.l_c, Some(losses.total));
}

#[test]
fn linear_probe_updates_only_the_classifier() {
    let ds = data();
    let model = CmaeModel::<f32>::new(model_cfg()).unwrap();
    let before = model.params.clone();
    let cfg = TrainConfig {
        linear_probe: true,
        ..finetune_cfg()
    };
    let (after, _) = finetune(&cfg, model, &ds, &mut |_| Ok(())).unwrap();
    let mut classifier_moved = false;
    for (id, name, t) in after.params.iter() {
        if name.starts_with("classifier.") {
            classifier_moved |= t != before.get(id);
        } else {
            assert_eq!(t, before.get(id), "{name} changed under a linear probe");
        }
    }
    assert!(classifier_moved);

    let (full, _) = finetune(&finetune_cfg(), CmaeModel::<f32>::new(model_cfg()).unwrap(), &ds, &mut |_| Ok(())).unwrap();
    let encoder_moved = full
        .params
        .iter()
        .any(|(id, name, t)| name.starts_with("online.") && t != before.get(id));
    assert!(encoder_moved);
}

#[test]
fn repeated_samples_controls_visits_per_epoch() {
    for r in [1, 2, 3] {
        let cfg = TrainConfig {
            repeated_samples: r,
            batch_size: 4,
            ..TrainConfig::finetune()
        };
        let mut seen = [0; 8];
        for batch in epoch_batches(8, &cfg, 1) {
            for (_, v) in batch {
                seen[v] += 1;
            }
        }
        assert_eq!(seen, [r; 8]);
    }
}

#[test]
fn finetune_records_accuracy_and_is_deterministic() {
    let ds = data();
    let run = || {
        let mut log = Vec::new();
        let (model, outcome) = finetune(&finetune_cfg(), CmaeModel::<f32>::new(model_cfg()).unwrap(), &ds, &mut |r| {
            log.push(r.clone());
            Ok(())
        })
        .unwrap();
        (model.params.iter().map(|(_, _, t)| t.clone()).collect::<Vec<_>>(), outcome, log)
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let (_, outcome, log) = a;
    assert_eq!(log.len(), 2 * 8 * 2 / 4);
    assert!(log.iter().all(|r| r.accuracy.is_some() && r.l_r.is_none() && r.ema_m.is_none()));
    assert!((0.0..=1.0).contains(&outcome.final_train_accuracy));
}

#[test]
fn resume_from_disk_matches_an_uninterrupted_run() {
    let ds = data();
    let cfg = TrainConfig {
        checkpoint_every: 1,
        ..pretrain_cfg()
    };
    let dir = tempfile::tempdir().unwrap();
    let straight = dir.path().join("straight");
    let resumed = dir.path().join("resumed");
    std::fs::create_dir_all(&straight).unwrap();
    std::fs::create_dir_all(&resumed).unwrap();

    let mut pre = Pretrainer::<f32>::new(cfg.clone(), model_cfg(), &ds).unwrap();
    run_pretrain(&mut pre, &straight).unwrap();

    let short = TrainConfig {
        total_epochs: 1,
        ..cfg.clone()
    };
    let mut pre = Pretrainer::<f32>::with_model(short, CmaeModel::new(model_cfg()).unwrap(), &ds).unwrap();
    run_pretrain(&mut pre, &resumed).unwrap();
    let ckpt = Checkpoint::load(&resumed.join(epoch_checkpoint_name(1))).unwrap();
    let mut pre = Pretrainer::<f32>::resume(cfg.clone(), &ckpt, &ds).unwrap();
    assert_eq!(pre.epoch, 1);
    run_pretrain(&mut pre, &resumed).unwrap();

    for name in [METRICS_FILE, FINAL_CHECKPOINT, &epoch_checkpoint_name(3)] {
        assert_eq!(
            std::fs::read(straight.join(name)).unwrap(),
            std::fs::read(resumed.join(name)).unwrap(),
            "{name} differs"
        );
    }
    let records = read_metrics(&straight.join(METRICS_FILE)).unwrap();
    assert_eq!(records.len(), 3 * 2);
    assert!(records.iter().all(|r| r.wall_time.is_none() && r.l_r.is_some() && r.l_c.is_some()));

    let wrong_seed = TrainConfig { seed: 6, ..cfg };
    assert!(Pretrainer::<f32>::resume(wrong_seed, &ckpt, &ds).is_err());
}
