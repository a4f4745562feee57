use candle_core::{DType, Device, Tensor};
use guidecot::dataset::{synth_dataset, SceneLayout, SynthSceneSpec, SceneGroup, WindowConfig};
use guidecot::goal::*;
use guidecot::Error;

fn corridor_dataset(pedestrians: usize) -> guidecot::dataset::Dataset {
    let layout = SceneLayout {
        num_pedestrians: pedestrians,
        ..SceneLayout::corridor()
    };
    let spec = SynthSceneSpec {
        id: "corridor".into(),
        group: SceneGroup::Eth,
        layout,
        seed: 11,
    };
    synth_dataset(&[spec], &WindowConfig::default()).unwrap()
}

fn tiny_cfg() -> GoalModelConfig {
    let mut encoder = EncoderConfig::toy(32);
    encoder.toy_channels = vec![4, 8];
    encoder.feature_levels = vec![0, 1];
    GoalModelConfig {
        encoder,
        grid_size: 16,
        widths: vec![4, 8],
        inject_levels: vec![0, 1],
        ..GoalModelConfig::desk()
    }
}

fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn inputs(model: &GoalModel, ds: &guidecot::dataset::Dataset, n: usize) -> (Tensor, Tensor) {
    let scene = &ds.scenes[0];
    let inp: Vec<GoalInputs> = ds
        .windows
        .iter()
        .step_by(7)
        .take(n)
        .map(|w| model.build_inputs(scene, &w.past[0]).unwrap())
        .collect();
    let refs: Vec<_> = inp.iter().collect();
    model.input_tensors(&refs).unwrap()
}

#[test]
fn untrained_logits_have_grid_shape() {
    let ds = corridor_dataset(6);
    let model = GoalModel::new(GoalModelConfig::desk(), &Device::Cpu).unwrap();
    let w = &ds.windows[0];
    let maps = model.predict_logits(&ds.scenes[0], w, &[0]).unwrap();
    assert_eq!(maps[0].grid.dim(), (32, 32));
    assert!(maps[0].grid.iter().all(|v| v.is_finite()));
    assert!(matches!(
        model.predict_logits(&ds.scenes[0], w, &[99]),
        Err(Error::Input(_))
    ));
}

#[test]
fn fusion_is_live() {
    let ds = corridor_dataset(6);
    let model = GoalModel::new(GoalModelConfig::desk(), &Device::Cpu).unwrap();
    let (vis, sem) = inputs(&model, &ds, 1);
    let feats = model.visual_features(&vis).unwrap();
    let zeroed: Vec<_> = feats
        .iter()
        .map(|f| f.as_ref().map(|t| t.zeros_like().unwrap()))
        .collect();
    let a = values(&model.decode(&feats, &sem).unwrap());
    let b = values(&model.decode(&zeroed, &sem).unwrap());
    let d: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
    assert!(d > 0.0);
}

#[test]
fn batching_does_not_leak() {
    let ds = corridor_dataset(6);
    let model = GoalModel::new(GoalModelConfig::desk(), &Device::Cpu).unwrap();
    let (vis, sem) = inputs(&model, &ds, 2);
    let both = values(&model.forward(&vis, &sem).unwrap());
    let g = 32 * 32;
    for k in 0..2 {
        let one = values(
            &model
                .forward(&vis.narrow(0, k, 1).unwrap(), &sem.narrow(0, k, 1).unwrap())
                .unwrap(),
        );
        for (x, y) in one.iter().zip(&both[k * g..(k + 1) * g]) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}

#[test]
fn encoder_sees_the_prompt() {
    let ds = corridor_dataset(6);
    let cfg = GoalModelConfig::desk();
    let model = GoalModel::new(cfg.clone(), &Device::Cpu).unwrap();
    let scene = &ds.scenes[0];
    let w = &ds.windows[0];
    let with = model.build_inputs(scene, &w.past[0]).unwrap();
    let mut without = with.clone();
    without.visual.raster = scene.image.clone();
    let (va, _) = model.input_tensors(&[&with]).unwrap();
    let (vb, _) = model.input_tensors(&[&without]).unwrap();
    let fa = model.visual_features(&va).unwrap();
    let fb = model.visual_features(&vb).unwrap();
    let d: f64 = values(fa[0].as_ref().unwrap())
        .iter()
        .zip(&values(fb[0].as_ref().unwrap()))
        .map(|(x, y)| (x - y).abs())
        .sum();
    assert!(d > 0.0);
    // Frozen encoder: same image twice gives identical features.
    let fa2 = model.visual_features(&va).unwrap();
    assert_eq!(values(fa[2].as_ref().unwrap()), values(fa2[2].as_ref().unwrap()));
}

#[test]
fn sem_only_ignores_the_image() {
    let ds = corridor_dataset(6);
    let cfg = GoalModelConfig {
        mode: ConditionMode::SemOnly,
        ..GoalModelConfig::desk()
    };
    let model = GoalModel::new(cfg, &Device::Cpu).unwrap();
    let (vis, sem) = inputs(&model, &ds, 1);
    let a = values(&model.forward(&vis, &sem).unwrap());
    let b = values(&model.forward(&vis.zeros_like().unwrap(), &sem).unwrap());
    assert_eq!(a, b);
}

#[test]
fn incompatible_stage_is_an_architecture_error() {
    let mut cfg = GoalModelConfig::desk();
    cfg.encoder.frozen = false;
    cfg.encoder.input_size = 48; // stages at 24, 12, 6 against levels 32, 16, 8
    assert!(matches!(GoalModel::new(cfg.clone(), &Device::Cpu), Err(Error::Architecture(_))));
    cfg.encoder.frozen = true;
    assert!(GoalModel::new(cfg.clone(), &Device::Cpu).is_ok());
    cfg.inject_levels = vec![0, 1];
    assert!(matches!(GoalModel::new(cfg, &Device::Cpu), Err(Error::Architecture(_))));
}

/// Central differences on a handful of parameters of every U-Net tensor, in f64.
#[test]
fn bce_gradients_match_finite_differences() {
    let ds = corridor_dataset(6);
    let model = GoalModel::with_dtype(tiny_cfg(), DType::F64, &Device::Cpu).unwrap();
    let (vis, sem) = inputs(&model, &ds, 2);
    let target = Tensor::from_vec(
        (0..2 * 16 * 16).map(|i| ((i * 37 % 101) as f64) / 100.0).collect::<Vec<_>>(),
        (2, 16, 16),
        &Device::Cpu,
    )
    .unwrap();
    let loss = goal_loss(&model, &vis, &sem, &target).unwrap();
    let grads = loss.backward().unwrap();
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for var in model.trainable_vars() {
        let g = values(grads.get(var.as_tensor()).unwrap());
        let base = values(var.as_tensor());
        let n = base.len();
        for k in [0, n / 3, n / 2, n - 1] {
            let probe = |delta: f64| {
                let mut v = base.clone();
                v[k] += delta;
                var.set(&Tensor::from_vec(v, var.shape(), &Device::Cpu).unwrap()).unwrap();
                let l: f64 = goal_loss(&model, &vis, &sem, &target).unwrap().to_scalar().unwrap();
                l
            };
            let fd = (probe(eps) - probe(-eps)) / (2.0 * eps);
            var.set(&Tensor::from_vec(base.clone(), var.shape(), &Device::Cpu).unwrap()).unwrap();
            let rel = (fd - g[k]).abs() / (fd.abs() + g[k].abs()).max(1e-7);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn short_training_descends_and_keeps_encoder() {
    let ds = corridor_dataset(10);
    let windows: Vec<_> = ds.windows.iter().step_by(9).take(10).cloned().collect();
    let cfg = GoalTrainConfig {
        epochs: 5,
        batch_size: 4,
        learning_rate: 3e-3,
        max_samples: Some(30),
        ..GoalTrainConfig::desk()
    };
    let scenes = ds.scene_map();
    let a = train_goal_module(&scenes, &windows, tiny_cfg(), &cfg).unwrap();
    assert!(a.curve.final_loss < a.curve.initial_loss);
    assert_eq!(a.curve.epochs.len(), 5);
    assert_eq!(a.encoder_hash_before, a.encoder_hash_after);
    let b = train_goal_module(&scenes, &windows, tiny_cfg(), &cfg).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.model.hash().unwrap(), b.model.hash().unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("goal.safetensors");
    a.model.save(&path).unwrap();
    let back = GoalModel::load(&path, &Device::Cpu).unwrap();
    assert_eq!(back.hash().unwrap(), a.model.hash().unwrap());
    let la = a.model.predict_logits(&ds.scenes[0], &windows[0], &[0]).unwrap();
    let lb = back.predict_logits(&ds.scenes[0], &windows[0], &[0]).unwrap();
    assert_eq!(la, lb);
    a.curve.write_csv(&dir.path().join("curve.csv")).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn unfrozen_encoder_changes() {
    let ds = corridor_dataset(6);
    let windows: Vec<_> = ds.windows.iter().step_by(9).take(4).cloned().collect();
    let mut mcfg = tiny_cfg();
    mcfg.encoder.frozen = false;
    let cfg = GoalTrainConfig {
        epochs: 1,
        batch_size: 4,
        max_samples: Some(8),
        ..GoalTrainConfig::desk()
    };
    let out = train_goal_module(&ds.scene_map(), &windows, mcfg, &cfg).unwrap();
    assert_ne!(out.encoder_hash_before, out.encoder_hash_after);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("goal.safetensors");
    out.model.save(&path).unwrap();
    let back = GoalModel::load(&path, &Device::Cpu).unwrap();
    assert_eq!(back.hash().unwrap(), out.model.hash().unwrap());
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let mut ds = corridor_dataset(6);
    let scene = std::sync::Arc::get_mut(&mut ds.scenes[0]).unwrap();
    scene.image.fill(f32::NAN);
    let windows: Vec<_> = ds.windows.iter().take(2).cloned().collect();
    let cfg = GoalTrainConfig {
        epochs: 1,
        batch_size: 2,
        max_samples: Some(2),
        ..GoalTrainConfig::desk()
    };
    match train_goal_module(&ds.scene_map(), &windows, tiny_cfg(), &cfg) {
        Err(Error::NonFiniteLoss { step, batch, learning_rate }) => {
            assert_eq!(step, 0);
            assert_eq!(batch.len(), 2);
            assert!(learning_rate > 0.0);
        }
        other => panic!("expected a non-finite loss, got {:?}", other.err()),
    }
}
