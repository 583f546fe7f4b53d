use super::*;
use serde_json::Value;
use crate::synth::{gen_dataset, GenOptions};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        codec_patch: 2,
        d_model: 8,
        heads: 2,
        groups: 2,
        d_text: 8,
        time_dim: 8,
        lora_rank: None,
    }
}

fn base_config(seed: u64, steps: u64) -> TrainConfig {
    TrainConfig {
        stage: Stage::Base,
        steps,
        batch_size: 2,
        lora_rank: 2,
        seed,
        dataset_size: 12,
        log_every: 2,
        lr: 1e-3,
        model: tiny_model(),
        ..TrainConfig::default()
    }
}

fn data() -> Dataset {
    gen_dataset(12, 3, &GenOptions::default()).unwrap()
}

/// Trains a short base stage and stores it under `dir`.
fn base_checkpoint(dir: &Path) -> PathBuf {
    let path = dir.join("base.ck");
    let mut tr = Trainer::new(base_config(5, 2), &data()).unwrap();
    tr.run(|_, _| {}).unwrap();
    tr.checkpoint().unwrap().save(&path).unwrap();
    path
}

fn dressing_config(base: &Path, mode: AblationMode, steps: u64) -> TrainConfig {
    TrainConfig {
        stage: Stage::Dressing,
        mode,
        base_checkpoint: Some(base.to_path_buf()),
        seed: 11,
        ..base_config(11, steps)
    }
}

fn group_checksum(store: &ParamStore<f32>, g: ParamGroup) -> String {
    store.checksum(|e| e.group == g)
}

#[test]
fn config_defaults_and_validation() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr, 1e-4);
    assert_eq!(cfg.lora_rank, 8);
    assert_eq!(cfg.cfg_dropout, 0.1);
    assert!(TrainConfig::from_json(r#"{"stage": "base", "bogus": 1}"#).is_err());
    assert!(TrainConfig::from_json(r#"{"stage": "base", "model": {"lora_rank": 4}}"#).is_err());
    assert!(TrainConfig::from_json(r#"{"stage": "base"}"#).is_ok());
    assert!(TrainConfig::from_json(r#"{"stage": "dressing"}"#).is_err());
    for bad in [
        r#"{"stage": "base", "lr": 0}"#,
        r#"{"stage": "base", "steps": 0}"#,
        r#"{"stage": "base", "cfg_dropout": 1.0}"#,
        r#"{"stage": "base", "lora_rank": 0}"#,
    ] {
        assert!(matches!(TrainConfig::from_json(bad), Err(Error::Config(_))), "{bad}");
    }
    let cfg = TrainConfig::from_json(r#"{"stage": "base", "lora_rank": 4}"#).unwrap();
    assert_eq!(cfg.model_config().lora_rank, Some(4));
}

#[test]
fn mode_names_round_trip() {
    for m in AblationMode::ALL {
        assert_eq!(AblationMode::from_name(m.name()), Some(m));
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, format!("\"{}\"", m.name()));
    }
}

#[test]
fn base_stage_touches_only_base_weights() {
    let d = data();
    let mut tr = Trainer::new(base_config(1, 3), &d).unwrap();
    let lora = group_checksum(tr.store(), ParamGroup::Lora);
    let adapter = group_checksum(tr.store(), ParamGroup::Adapter);
    let base = group_checksum(tr.store(), ParamGroup::Base);
    tr.run(|_, _| {}).unwrap();
    assert_eq!(group_checksum(tr.store(), ParamGroup::Lora), lora);
    assert_eq!(group_checksum(tr.store(), ParamGroup::Adapter), adapter);
    assert_ne!(group_checksum(tr.store(), ParamGroup::Base), base);
    assert_eq!(tr.losses().len(), 3);
}

#[test]
fn training_is_deterministic() {
    let d = data();
    let run = || {
        let mut tr = Trainer::new(base_config(2, 4), &d).unwrap();
        tr.run(|_, _| {}).unwrap();
        (tr.losses().to_vec(), tr.checkpoint().unwrap().to_bytes().unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let base = base_checkpoint(dir.path());
    let d = data();
    let cfg = dressing_config(&base, AblationMode::Full, 6);
    let mut full = Trainer::new(cfg.clone(), &d).unwrap();
    full.run(|_, _| {}).unwrap();

    let mut first = Trainer::new(TrainConfig { steps: 3, ..cfg.clone() }, &d).unwrap();
    first.run(|_, _| {}).unwrap();
    let path = dir.path().join("mid.ck");
    first.checkpoint().unwrap().save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let mut second = Trainer::resume(cfg.clone(), &ck, &d).unwrap();
    assert_eq!(second.step(), 3);
    second.run(|_, _| {}).unwrap();

    let stitched: Vec<f64> = first.losses().iter().chain(second.losses()).copied().collect();
    assert_eq!(stitched, full.losses());
    assert_eq!(
        second.checkpoint().unwrap().to_bytes().unwrap(),
        full.checkpoint().unwrap().to_bytes().unwrap()
    );
}

#[test]
fn resume_rejects_changed_config() {
    let dir = tempfile::tempdir().unwrap();
    let base = base_checkpoint(dir.path());
    let d = data();
    let cfg = dressing_config(&base, AblationMode::Full, 2);
    let mut tr = Trainer::new(cfg.clone(), &d).unwrap();
    tr.run(|_, _| {}).unwrap();
    let ck = tr.checkpoint().unwrap();
    let changed = TrainConfig { lr: 5e-4, steps: 4, ..cfg.clone() };
    assert!(matches!(Trainer::resume(changed, &ck, &d), Err(Error::Config(_))));
    assert!(Trainer::resume(TrainConfig { steps: 4, ..cfg }, &ck, &d).is_ok());
}

#[test]
fn modes_isolate_their_parameter_groups() {
    let dir = tempfile::tempdir().unwrap();
    let base = base_checkpoint(dir.path());
    let d = data();
    for mode in AblationMode::ALL {
        let mut tr = Trainer::new(dressing_config(&base, mode, 3), &d).unwrap();
        let before: Vec<String> = [ParamGroup::Base, ParamGroup::Lora, ParamGroup::Adapter]
            .iter()
            .map(|&g| group_checksum(tr.store(), g))
            .collect();
        let batch = tr.sample_batch();
        let lg = tr.loss_and_grads(&batch).unwrap();
        for (id, _) in &lg.grads {
            assert!(mode.trains(tr.store().get(*id).group), "{mode:?} computed a gradient it must skip");
        }
        tr.apply(lg).unwrap();
        tr.run(|_, _| {}).unwrap();
        for (i, g) in [ParamGroup::Base, ParamGroup::Lora, ParamGroup::Adapter].into_iter().enumerate() {
            let after = group_checksum(tr.store(), g);
            if mode.trains(g) {
                assert_ne!(after, before[i], "{mode:?} left {g:?} untouched");
            } else {
                assert_eq!(after, before[i], "{mode:?} changed frozen {g:?}");
            }
        }
    }
}

#[test]
fn dressing_stage_starts_from_base_weights_with_copied_adapters() {
    let dir = tempfile::tempdir().unwrap();
    let base = base_checkpoint(dir.path());
    let ck = Checkpoint::load(&base).unwrap();
    let tr = Trainer::new(dressing_config(&base, AblationMode::Full, 1), &data()).unwrap();
    for (_, e) in tr.store().entries() {
        if e.group == ParamGroup::Base {
            assert_eq!(&ck.tensors[&format!("param/{}", e.name)], &e.value, "{}", e.name);
        }
    }
    for i in 0..tr.unet().num_sites() {
        let site = tr.unet().site(i);
        assert_eq!(tr.store().value(site.k.weight), tr.store().value(site.adapter_k));
        assert_eq!(tr.store().value(site.v.weight), tr.store().value(site.adapter_v));
    }
}

#[test]
fn tampering_with_frozen_weights_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let base = base_checkpoint(dir.path());
    let mut tr = Trainer::new(dressing_config(&base, AblationMode::OnlyLora, 2), &data()).unwrap();
    tr.verify_frozen().unwrap();
    let id = tr.store.ids().find(|&id| tr.store.get(id).group == ParamGroup::Adapter).unwrap();
    tr.store.value_mut(id).data_mut()[0] += 1.0;
    assert!(matches!(tr.verify_frozen(), Err(Error::Integrity(_))));
    assert!(matches!(tr.run(|_, _| {}), Err(Error::Integrity(_))));
}

#[test]
fn tiny_steps_never_increase_the_batch_loss() {
    let dir = tempfile::tempdir().unwrap();
    let base = base_checkpoint(dir.path());
    let d = data();
    let mut decreased = 0;
    let mut total_change = 0.0;
    for seed in 0..10 {
        let cfg = TrainConfig { lr: 1e-6, seed, ..dressing_config(&base, AblationMode::Full, 1) };
        let mut tr = Trainer::new(cfg, &d).unwrap();
        let batch = tr.sample_batch();
        let lg = tr.loss_and_grads(&batch).unwrap();
        let before = lg.loss;
        tr.apply(lg).unwrap();
        let after = tr.loss_and_grads(&batch).unwrap().loss;
        // the loss is accumulated in f32; allow a few ulps of evaluation noise
        assert!(after <= before * (1.0 + 8.0 * f32::EPSILON as f64), "seed {seed}: {before} -> {after}");
        decreased += usize::from(after < before);
        total_change += after - before;
    }
    assert!(decreased >= 8, "only {decreased} of 10 steps decreased the loss");
    assert!(total_change < 0.0);
}

#[test]
fn parameter_report_counts() {
    let cfg = TrainConfig::default();
    let (unet, store) = build_model(&cfg, 0).unwrap();
    let r = |m| report_params(&unet, &store, m).unwrap().trainable;
    let (ft, full, lora, adapter) = (
        r(AblationMode::Finetuning),
        r(AblationMode::Full),
        r(AblationMode::OnlyLora),
        r(AblationMode::OnlyAdapter),
    );
    assert_eq!(lora + adapter, full);
    assert!(ft > full && full > lora && lora > adapter);
    assert_eq!(adapter, 2 * 64 * 64 * 5);
    let rep = report_params(&unet, &store, AblationMode::Full).unwrap();
    assert_eq!(rep.adapter_formula, adapter);
    assert!(rep.to_table().contains(&format!("= {full}")));
    let json: Value = serde_json::from_str(&rep.to_json()).unwrap();
    assert_eq!(json["trainable"], full);
}

#[test]
fn loaded_model_matches_trainer_state() {
    let dir = tempfile::tempdir().unwrap();
    let base = base_checkpoint(dir.path());
    let lm = LoadedModel::load(&base).unwrap();
    let ck = Checkpoint::load(&base).unwrap();
    for (_, e) in lm.store.entries() {
        assert_eq!(&ck.tensors[&format!("param/{}", e.name)], &e.value);
    }
    assert_eq!(lm.step, 2);
    assert!(matches!(
        LoadedModel::load(&dir.path().join("missing.ck")),
        Err(Error::Usage(_))
    ));
}
