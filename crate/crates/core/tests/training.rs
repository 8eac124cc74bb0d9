mod common;

use common::{random_tensor, rng};
use proptest::prelude::*;
use strtr::checkpoint::{load_checkpoint, save_checkpoint, BLOB_FILE, META_FILE};
use strtr::data::{synth_dataset, Dataset, Split};
use strtr::network::{build_model, ModelConfig};
use strtr::params::{Mode, Session};
use strtr::train::{
    cross_entropy, evaluate, history_csv, lr_schedule, random_rotation_augment, sgd_step, train, TrainConfig,
};
use strtr::{Error, Precision, Tensor};

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        ..TrainConfig::preset("desk").unwrap()
    }
}

fn tiny_data() -> Dataset {
    synth_dataset(4, 25, 5, 6, 0).unwrap()
}

#[test]
fn schedule_endpoints_and_boundary() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_schedule(0, &cfg), 4e-7);
    assert_eq!(lr_schedule(700, &cfg), 5e-4);
    assert_eq!(lr_schedule(701, &cfg), 5e-4 * 0.9996);
    // halfway through warmup
    assert!((lr_schedule(350, &cfg) - (4e-7 + 5e-4) / 2.0).abs() < 1e-18);
}

proptest! {
    #[test]
    fn schedule_decays_after_warmup(step in 0usize..50_000, warmup in 1usize..2000, gamma in 0.9f64..0.99999) {
        let cfg = TrainConfig { warmup_steps: warmup, decay_gamma: gamma, ..TrainConfig::default() };
        let (now, next) = (lr_schedule(step, &cfg), lr_schedule(step + 1, &cfg));
        if step >= cfg.warmup_steps {
            prop_assert!(next <= now);
        } else {
            prop_assert!(next >= now);
        }
        prop_assert!(now >= 0.0 && now <= cfg.lr_peak);
    }

    #[test]
    fn rotation_is_rigid(seed in any::<u64>(), max_angle in 0.0f64..3.2) {
        let mut r = rng(seed);
        let seq = random_tensor(&mut r, &[3, 4, 3], 2.0);
        let out = random_rotation_augment(&seq, max_angle, &mut r).unwrap();
        let point = |t: &Tensor, i: usize| [t.data()[3 * i], t.data()[3 * i + 1], t.data()[3 * i + 2]];
        let dist = |a: [f64; 3], b: [f64; 3]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        for i in 0..12 {
            prop_assert!((dist(point(&seq, i), [0.0; 3]) - dist(point(&out, i), [0.0; 3])).abs() < 1e-5);
            for j in 0..12 {
                prop_assert!((dist(point(&seq, i), point(&seq, j)) - dist(point(&out, i), point(&out, j))).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn rotation_edge_cases() {
    let mut r = rng(0);
    let seq = random_tensor(&mut r, &[2, 3, 3], 1.0);
    assert_eq!(random_rotation_augment(&seq, 0.0, &mut r).unwrap(), seq);
    assert!(random_rotation_augment(&Tensor::zeros(&[2, 3, 2]), 0.3, &mut r).is_err());
}

#[test]
fn momentum_accumulates_over_two_steps() {
    let (lr, g) = (0.1, 0.5);
    let mut p = vec![1.0];
    let mut v = vec![0.0];
    sgd_step(&mut p, &[g], &mut v, lr, 0.9, 0.0);
    sgd_step(&mut p, &[g], &mut v, lr, 0.9, 0.0);
    assert!((1.0 - p[0] - lr * g * 2.9).abs() < 1e-15);

    let mut q = vec![3.0, -1.0];
    sgd_step(&mut q, &[0.0, 0.0], &mut [0.0, 0.0], 0.1, 0.9, 0.0);
    assert_eq!(q, vec![3.0, -1.0]);
}

#[test]
fn cross_entropy_values_and_logit_gradient() {
    assert_eq!(cross_entropy(&Tensor::new(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap(), &[1]).unwrap(), 0.0);
    let uniform = Tensor::full(&[2, 4], 0.25);
    assert!((cross_entropy(&uniform, &[0, 3]).unwrap() - 4f64.ln()).abs() < 1e-12);

    let logits = random_tensor(&mut rng(3), &[3, 4], 2.0);
    let labels = [2, 0, 3];
    let store = strtr::params::ParamStore::new();
    let mut s = Session::new(&store, Mode::Train, Precision::F64);
    let z = s.tape.leaf(logits.clone(), true);
    let loss = s.tape.cross_entropy(z, &labels).unwrap();
    let grad = s.tape.backward(loss).unwrap().wrt(z);
    for (i, row) in logits.data().chunks(4).enumerate() {
        let norm: f64 = row.iter().map(|x| x.exp()).sum();
        for (k, x) in row.iter().enumerate() {
            let expected = (x.exp() / norm - f64::from(u8::from(k == labels[i]))) / 3.0;
            assert!((grad.data()[i * 4 + k] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn synthetic_classes_are_separable_by_centroids() {
    let data = tiny_data();
    let k = data.num_classes();
    let dim = data.samples[0].data.len();
    let train_set = data.in_split(&[Split::Train]);
    let mut centroids = vec![vec![0.0; dim]; k];
    let mut counts = vec![0.0; k];
    for s in &train_set {
        counts[s.label] += 1.0;
        centroids[s.label].iter_mut().zip(s.data.data()).for_each(|(c, x)| *c += x);
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|x| *x /= n);
    }
    let held_out = data.in_split(&[Split::Val, Split::Test]);
    let correct = held_out
        .iter()
        .filter(|s| {
            let d = |c: &Vec<f64>| c.iter().zip(s.data.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..k).min_by(|&a, &b| d(&centroids[a]).total_cmp(&d(&centroids[b]))).unwrap();
            best == s.label
        })
        .count();
    assert!(correct as f64 / held_out.len() as f64 > 1.0 / k as f64);
    assert_eq!((data.count(Split::Train), data.count(Split::Val), data.count(Split::Test)), (72, 16, 12));
}

#[test]
fn zero_epochs_leave_the_model_untouched() {
    let mut model = build_model(&ModelConfig::tiny(), 0).unwrap();
    let before = model.store.clone();
    let history = train(&mut model, &tiny_data(), &quick(0), |_| {}).unwrap();
    assert!(history.is_empty());
    assert_eq!(model.store.entries(), before.entries());
}

#[test]
fn loss_falls_and_runs_repeat_exactly() {
    let data = tiny_data();
    let run = || {
        let mut model = build_model(&ModelConfig::tiny(), 0).unwrap();
        let history = train(&mut model, &data, &quick(50), |_| {}).unwrap();
        (model, history)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert!(ha[49].train_loss < ha[0].train_loss, "{} vs {}", ha[49].train_loss, ha[0].train_loss);
    assert_eq!(ha, hb);
    assert_eq!(a.store.entries(), b.store.entries());

    let csv = history_csv(&ha);
    assert!(csv.starts_with("epoch,lr,train_loss,train_acc,val_acc\n"));
    assert_eq!(csv.lines().count(), 51);

    let m1 = evaluate(&a, &data, &[Split::Test]).unwrap();
    let m2 = evaluate(&a, &data, &[Split::Test]).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(m1.total(), data.count(Split::Test));
}

#[test]
fn drop_attention_training_is_seeded() {
    let data = tiny_data();
    let cfg = ModelConfig {
        drop_attention: 0.2,
        ..ModelConfig::tiny()
    };
    let run = |seed| {
        let mut model = build_model(&cfg, 0).unwrap();
        train(&mut model, &data, &TrainConfig { seed, ..quick(2) }, |_| {}).unwrap();
        model
    };
    assert_eq!(run(1).store.entries(), run(1).store.entries());
    assert_ne!(run(1).store.entries(), run(2).store.entries());
}

#[test]
fn non_finite_input_aborts_training() {
    let mut data = tiny_data();
    let i = data.samples.iter().position(|s| s.split == Split::Train).unwrap();
    data.samples[i].data.data_mut()[0] = f64::NAN;
    let mut model = build_model(&ModelConfig::tiny(), 0).unwrap();
    let err = train(&mut model, &data, &quick(1), |_| {}).unwrap_err();
    assert!(matches!(err, Error::Diverged { epoch: 1, .. }), "{err}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let data = tiny_data();
    let mut model = build_model(&ModelConfig::tiny(), 3).unwrap();
    train(&mut model, &data, &quick(2), |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&model, dir.path()).unwrap();
    let loaded = load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded.config, model.config);
    for (a, b) in loaded.store.entries().iter().zip(model.store.entries()) {
        assert_eq!(a.name, b.name);
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
    }
    let again = tempfile::tempdir().unwrap();
    save_checkpoint(&loaded, again.path()).unwrap();
    for f in [META_FILE, BLOB_FILE] {
        assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), std::fs::read(again.path().join(f)).unwrap());
    }
    let x = strtr::train::stack_batch(&model, &[&data.samples[0].data]).unwrap();
    assert_eq!(model.probabilities_channels_last(&x).unwrap(), loaded.probabilities_channels_last(&x).unwrap());
}

#[test]
fn broken_checkpoints_are_rejected() {
    let model = build_model(&ModelConfig::tiny(), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
    save_checkpoint(&model, dir.path()).unwrap();
    let blob = std::fs::read(dir.path().join(BLOB_FILE)).unwrap();
    std::fs::write(dir.path().join(BLOB_FILE), &blob[..blob.len() - 8]).unwrap();
    assert!(load_checkpoint(dir.path()).is_err());
}

#[test]
fn dataset_container_round_trip() {
    let data = synth_dataset(3, 5, 4, 7, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path()).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["V"], 4);
    assert_eq!(manifest["T"], 7);
    assert_eq!(manifest["C"], 3);
    assert_eq!(manifest["samples"].as_array().unwrap().len(), 15);
    let bytes = std::fs::read(dir.path().join(manifest["samples"][0]["file"].as_str().unwrap())).unwrap();
    assert_eq!(bytes.len(), 7 * 4 * 3 * 4);
    assert_eq!(Dataset::load(dir.path()).unwrap(), data);
}

#[test]
fn presets_carry_published_sizes() {
    for (name, batch, epochs) in [("ntu60", 32, 120), ("ntu120", 32, 120), ("uav", 128, 65)] {
        let cfg = TrainConfig::preset(name).unwrap();
        assert_eq!((cfg.batch_size, cfg.epochs), (batch, epochs), "{name}");
        cfg.validate().unwrap();
    }
    let bad = TrainConfig {
        lr_start: 1.0,
        lr_peak: 0.1,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
}
