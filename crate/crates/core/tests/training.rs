//! Optimizer, training loop and checkpoints.

mod common;

use tempfile::TempDir;
use viewagg::adcore::{Checkpoint, Tensor};
use viewagg::training::{
    lr_schedule, load_checkpoint, rendering_loss, run_comparison, train, Adam, Trainer, Variant,
};
use viewagg::{ParamStore, Tape};

/// Scalar Adam written out by hand.
fn adam_reference(grads: &[f64], lr: f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut m, mut v, mut x) = (0.0, 0.0, 0.0);
    let mut out = Vec::new();
    for (t, g) in grads.iter().enumerate() {
        let t = t as i32 + 1;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        out.push(x);
    }
    out
}

#[test]
fn adam_matches_hand_computation() {
    let grads = [1.0, -0.5, 0.25, 2.0, 0.0, -3.0];
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::scalar(0.0)).unwrap();
    let mut adam = Adam::new(&store);
    let expected = adam_reference(&grads, 0.1);
    for (g, want) in grads.iter().zip(expected) {
        store.get_mut(id).grad = Tensor::scalar(*g);
        adam.update(&mut store, |_| 0.1);
        assert!((store.get(id).value.item() - want).abs() < 1e-15);
    }
    // first step of size lr
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::scalar(1.0)).unwrap();
    let mut adam = Adam::new(&store);
    store.get_mut(id).grad = Tensor::scalar(1.0);
    adam.update(&mut store, |_| 0.1);
    assert!((store.get(id).value.item() - 0.9).abs() < 1e-8);
}

#[test]
fn adam_zero_gradient_only_decays_moments() {
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::scalar(2.0)).unwrap();
    let frozen = store.add_frozen("f", Tensor::scalar(5.0)).unwrap();
    let mut adam = Adam::new(&store);
    store.get_mut(id).grad = Tensor::scalar(1.0);
    store.get_mut(frozen).grad = Tensor::scalar(1.0);
    adam.update(&mut store, |_| 0.01);
    let (m1, v1) = (adam.moments(0).0[0], adam.moments(0).1[0]);
    let after_first = store.get(id).value.item();
    store.get_mut(id).grad = Tensor::scalar(0.0);
    adam.update(&mut store, |_| 0.0);
    assert_eq!(store.get(id).value.item(), after_first);
    assert!((adam.moments(0).0[0] - 0.9 * m1).abs() < 1e-18);
    assert!((adam.moments(0).1[0] - 0.999 * v1).abs() < 1e-18);
    assert_eq!(store.get(frozen).value.item(), 5.0);
}

#[test]
fn schedule_and_loss() {
    assert_eq!(lr_schedule(0.4, 0, 0.5, 10), 0.4);
    assert_eq!(lr_schedule(0.4, 10, 0.5, 10), 0.2);
    assert_eq!(lr_schedule(0.4, 25, 0.5, 10), 0.1);
    let tape = Tape::new();
    let r = tape.constant(Tensor::new(&[2, 3], vec![0.0, 0.5, 1.0, 0.2, 0.2, 0.2]).unwrap());
    let t = Tensor::new(&[2, 3], vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    assert!((rendering_loss(r, &t).unwrap().value().item() - (0.25 + 1.0 + 3.0 * 0.04)).abs() < 1e-15);
    assert!(rendering_loss(r, &Tensor::zeros(&[3, 3])).is_err());
}

fn values(store: &ParamStore) -> Vec<(String, Vec<f64>)> {
    store.iter().map(|p| (p.name.clone(), p.value.data().to_vec())).collect()
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let dir = TempDir::new().unwrap();
    let scene = common::micro_scene(dir.path());
    let config = viewagg::training::TrainConfig {
        lr: 0.0,
        lr_extractor: 0.0,
        ..common::micro_config(Variant::Proposed)
    };
    let mut trainer = Trainer::new(&scene, config).unwrap();
    let before = values(&trainer.store);
    trainer.step().unwrap();
    assert_eq!(values(&trainer.store), before);
}

#[test]
fn range_parameters_receive_gradient() {
    let dir = TempDir::new().unwrap();
    let scene = common::micro_scene(dir.path());
    for variant in [Variant::Proposed, Variant::Cosine, Variant::Rational] {
        let mut trainer = Trainer::new(&scene, common::micro_config(variant)).unwrap();
        let pixels: Vec<(usize, usize)> = (0..12).flat_map(|y| [(3, y), (6, y), (8, y)]).collect();
        trainer.step_on(0, &pixels).unwrap();
        for name in ["coarse.agg.alpha", "fine.agg.alpha"] {
            let p = trainer.store.by_name(name).unwrap_or_else(|| panic!("{name} missing"));
            assert!(p.grad.data().iter().all(|g| g.is_finite()));
            assert!(p.grad.data().iter().any(|&g| g != 0.0), "{variant}: {name} grad {:?}", p.grad.data());
        }
    }
}

#[test]
fn overfits_a_hundred_rays() {
    let dir = TempDir::new().unwrap();
    let scene = common::micro_scene(dir.path());
    let config = viewagg::training::TrainConfig {
        rays: 100,
        lr: 5e-3,
        lr_extractor: 5e-3,
        ..common::micro_config(Variant::Proposed)
    };
    let mut trainer = Trainer::new(&scene, config).unwrap();
    let pixels: Vec<(usize, usize)> = (0..100).map(|k| ((k * 7) % 12, (k * 5 + k / 12) % 12)).collect();
    let first = trainer.step_on(0, &pixels).unwrap();
    let mut last = first;
    for _ in 1..2000 {
        last = trainer.step_on(0, &pixels).unwrap();
        if last <= 0.1 * first {
            break;
        }
    }
    assert!(last <= 0.1 * first, "loss {first} -> {last} after {} steps", trainer.iteration);
}

#[test]
fn zero_iterations_save_the_initialization() {
    let dir = TempDir::new().unwrap();
    let scene = common::micro_scene(&dir.path().join("scene"));
    let config = viewagg::training::TrainConfig { iterations: 0, ..common::micro_config(Variant::Proposed) };
    let out = dir.path().join("run");
    train(&scene, &config, Some(&out)).unwrap();
    let fresh = Trainer::new(&scene, config.clone()).unwrap();
    let saved = Checkpoint::load(&out.join("checkpoint.txt")).unwrap();
    assert_eq!(saved.params, fresh.checkpoint().params);
    let (_, store, loaded) = load_checkpoint(&out.join("checkpoint.txt")).unwrap();
    assert_eq!(loaded, config);
    assert_eq!(values(&store), values(&fresh.store));
}

#[test]
fn training_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let scene = common::micro_scene(&dir.path().join("scene"));
    let config = common::micro_config(Variant::Proposed);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train(&scene, &config, Some(&a)).unwrap();
    train(&scene, &config, Some(&b)).unwrap();
    for file in ["checkpoint.txt", "checkpoint.bin", "log.csv", "config.txt"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file}");
    }
    let other = viewagg::training::TrainConfig { seed: 1, ..config };
    train(&scene, &other, Some(&dir.path().join("c"))).unwrap();
    assert_ne!(
        std::fs::read(a.join("checkpoint.bin")).unwrap(),
        std::fs::read(dir.path().join("c/checkpoint.bin")).unwrap()
    );
}

#[test]
fn fixed_ranges_stay_put_and_learnable_ones_move() {
    let dir = TempDir::new().unwrap();
    let scene = common::micro_scene(dir.path());
    let steps = 100;
    let fixed = Trainer::new(&scene, common::micro_config(Variant::FixedLambda)).unwrap();
    let lambdas = fixed.config.fixed_lambdas.clone();
    let mut fixed = fixed;
    for _ in 0..steps {
        fixed.step().unwrap();
    }
    let (c, f) = fixed.lambdas();
    assert_eq!(c, lambdas);
    assert_eq!(f, lambdas);

    for variant in [Variant::Proposed, Variant::Cosine, Variant::Rational] {
        let mut t = Trainer::new(&scene, common::micro_config(variant)).unwrap();
        let start = t.lambdas();
        for _ in 0..steps {
            t.step().unwrap();
        }
        let end = t.lambdas();
        assert!(start.0.iter().zip(&end.0).all(|(a, b)| a != b), "{variant}: {start:?} -> {end:?}");
        assert!(start.1.iter().zip(&end.1).all(|(a, b)| a != b), "{variant}: {start:?} -> {end:?}");
    }
}

#[test]
fn comparison_rows_cover_each_run() {
    let dir = TempDir::new().unwrap();
    let scene = common::micro_scene(dir.path());
    let base = viewagg::training::TrainConfig { iterations: 3, ..common::micro_config(Variant::Baseline) };
    let runs = vec![
        ("baseline".to_string(), base.clone()),
        ("proposed".to_string(), viewagg::training::TrainConfig { variant: Variant::Proposed, ..base.clone() }),
        ("mean".to_string(), viewagg::training::TrainConfig { variant: Variant::MeanOnly, ..base.clone() }),
    ];
    let rows = run_comparison(&scene, &runs).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].coarse_lambdas.is_empty());
    assert_eq!(rows[1].coarse_lambdas.len(), 3);
    assert!(rows.iter().all(|r| r.psnr.is_finite() && r.ssim.is_finite()));
    assert_eq!(run_comparison(&scene, &runs[..1]).unwrap()[0], rows[0]);
}
