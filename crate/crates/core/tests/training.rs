use hpsnet::checkpoint;
use hpsnet::data::{self, SynthConfig};
use hpsnet::network::{NetworkSpec, ParamGrads, ParameterStore, Variant};
use hpsnet::train::{self, TrainConfig, Velocity};
use hpsnet::{Tape, Tensor4};

fn small_set(count: usize, seed: u64) -> Vec<data::Sample> {
    data::gen_synthetic(count, &SynthConfig::new(4, 32), seed).unwrap()
}

#[test]
fn initial_loss_is_near_uniform() {
    let set = small_set(4, 3);
    for v in Variant::ALL {
        let spec = NetworkSpec::toy(v);
        let store = ParameterStore::init(&spec, 0).unwrap();
        let (loss, _) = train::batch_gradients(&spec, &store, &set).unwrap();
        assert!((loss - 4f64.ln()).abs() < 0.05, "{v}: {loss}");
    }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let spec = NetworkSpec::toy(Variant::Hps);
    let mut store = ParameterStore::init(&spec, 1).unwrap();
    let before = store.clone();
    let (_, grads) = train::batch_gradients(&spec, &store, &small_set(2, 0)).unwrap();
    train::sgd_step(&mut store, &grads, &mut Velocity::default(), 0.0, &TrainConfig::default()).unwrap();
    assert_eq!(store, before);
    train::sgd_step(&mut store, &ParamGrads::default(), &mut Velocity::default(), 0.1, &TrainConfig::default()).unwrap();
    assert_eq!(store, before);
}

#[test]
fn loss_is_invariant_under_joint_flips() {
    let spec = NetworkSpec::toy(Variant::Hps);
    let store = ParameterStore::init(&spec, 2).unwrap();
    let s = &small_set(1, 4)[0];
    let logits = train::infer(&spec, &store, &s.image).unwrap();
    let loss = |logits: &Tensor4, labels: &[u8]| {
        let mut tape = Tape::new();
        let x = tape.constant(logits.clone());
        let l = tape.cross_entropy(x, labels, 255).unwrap();
        tape.value(l).item()
    };
    let base = loss(&logits, &s.labels);
    let sh = logits.shape();
    for (fh, fv) in [(true, false), (false, true), (true, true)] {
        let flipped = s.flipped(fh, fv);
        let out = Tensor4::from_fn(sh, |n, c, y, x| {
            let yy = if fv { sh.h - 1 - y } else { y };
            let xx = if fh { sh.w - 1 - x } else { x };
            logits.at(n, c, yy, xx)
        });
        assert!((loss(&out, &flipped.labels) - base).abs() <= 1e-12);
        let back = flipped.flipped(fh, fv);
        assert_eq!((back.image, back.labels), (s.image.clone(), s.labels.clone()));
    }
}

#[test]
fn checkpoint_round_trip_gives_identical_forward() {
    let spec = NetworkSpec::toy(Variant::Hps);
    let set = small_set(4, 6);
    let cfg = TrainConfig { epochs: 1, batch_size: 2, ..TrainConfig::default() };
    let out = train::train(&set, None, &spec, &cfg).unwrap();
    let path = std::env::temp_dir().join(format!("hpsnet-ckpt-{}.bin", std::process::id()));
    checkpoint::save(&path, &out.store).unwrap();
    let back = checkpoint::load(&path, &spec).unwrap();
    for s in &set {
        let a = train::infer(&spec, &out.store, &s.image).unwrap();
        let b = train::infer(&spec, &back, &s.image).unwrap();
        assert_eq!(a.data(), b.data());
    }
    std::fs::remove_file(path).unwrap();
}

#[test]
fn identical_seeds_give_identical_logs() {
    let spec = NetworkSpec::toy(Variant::HpsIg);
    let set = small_set(6, 7);
    let cfg = TrainConfig { epochs: 2, batch_size: 3, seed: 5, ..TrainConfig::default() };
    let a = train::train(&set, Some(&set[..2]), &spec, &cfg).unwrap();
    let b = train::train(&set, Some(&set[..2]), &spec, &cfg).unwrap();
    assert_eq!(train::metrics_csv(&a.log), train::metrics_csv(&b.log));
    assert_eq!(a.store, b.store);
}

#[test]
fn every_variant_lowers_loss_over_five_epochs() {
    let set = small_set(10, 8);
    let cfg = TrainConfig { epochs: 5, batch_size: 5, base_lr: 0.03, ..TrainConfig::default() };
    for v in Variant::ALL {
        let out = train::train(&set, None, &NetworkSpec::toy(v), &cfg).unwrap();
        let (first, last) = (out.log[0].loss, out.log[4].loss);
        assert!(last < first, "{v}: {first} -> {last}");
    }
}

#[test]
fn empty_training_set_is_rejected() {
    let spec = NetworkSpec::toy(Variant::Baseline);
    assert!(train::train(&[], None, &spec, &TrainConfig::default()).is_err());
}
