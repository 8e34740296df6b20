//! Poly-schedule SGD training of a [`NetworkSpec`] on labelled samples.
//!
//! Each step fans the batch out one sample per tape. Per-sample parameter
//! gradients come back in sample order and are summed sequentially, so a
//! run is bit-reproducible for a given seed whatever the thread count.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::eval::ConfusionMatrix;
use crate::network::{self, Binder, ForwardOptions, NetworkSpec, ParamGrads, ParameterStore, SharedParams};
use crate::nn::IGNORE_LABEL;
use crate::tensor::Tensor4;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub flip_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.007,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            batch_size: 10,
            epochs: 15,
            seed: 0,
            flip_augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("base_lr", self.base_lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("poly_power", self.poly_power),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// `base_lr * (1 - iter / max_iter) ^ poly_power`.
pub fn poly_lr(iter: usize, max_iter: usize, cfg: &TrainConfig) -> Result<f64> {
    if max_iter == 0 || iter > max_iter {
        return Err(Error::Contract(format!("poly_lr needs 0 <= iter <= max_iter > 0, got {iter}/{max_iter}")));
    }
    Ok(cfg.base_lr * (1.0 - iter as f64 / max_iter as f64).powf(cfg.poly_power))
}

/// Momentum buffers by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Velocity {
    map: BTreeMap<String, (Tensor4, Tensor4)>,
}

/// `v = momentum * v + g + weight_decay * p; p -= lr * v`. Decay applies to
/// weights, not biases. Nothing is updated if any gradient is non-finite.
pub fn sgd_step(
    store: &mut ParameterStore,
    grads: &ParamGrads,
    velocity: &mut Velocity,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, (gw, gb)) in &grads.map {
        if !gw.is_finite() || !gb.is_finite() {
            return Err(Error::Training {
                layer: name.clone(),
                message: "non-finite gradient".into(),
            });
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
        if p.weight.shape() != gw.shape() || p.bias.shape() != gb.shape() {
            return Err(Error::shape("sgd_step", p.weight.shape(), gw.shape()));
        }
    }
    for (name, (gw, gb)) in &grads.map {
        let p = store.get_mut(name).expect("checked above");
        let (vw, vb) = velocity
            .map
            .entry(name.clone())
            .or_insert_with(|| (Tensor4::zeros(gw.shape()), Tensor4::zeros(gb.shape())));
        let update = |v: &mut Tensor4, g: &Tensor4, p: &mut Tensor4, decay: f64| {
            for ((v, &g), p) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
                *v = cfg.momentum * *v + g + decay * *p;
                *p -= lr * *v;
            }
        };
        update(vw, gw, &mut p.weight, cfg.weight_decay);
        update(vb, gb, &mut p.bias, 0.0);
    }
    Ok(())
}

/// One row of the metrics log, written once per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub iter: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    /// Evaluation mIoU after the epoch, when an evaluation set was given.
    pub miou: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,iter,lr,loss,miou";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let miou = r.miou.map(|m| format!("{m:.17e}")).unwrap_or_default();
        writeln!(s, "{},{},{:.17e},{:.17e},{}", r.epoch, r.iter, r.lr, r.loss, miou).unwrap();
    }
    s
}

pub struct TrainOutcome {
    pub store: ParameterStore,
    pub log: Vec<MetricRow>,
}

/// Loss and parameter gradients of one sample, with the loss normalized
/// by `denominator` valid pixels.
fn sample_step(
    spec: &NetworkSpec,
    store: &ParameterStore,
    shared: &SharedParams,
    sample: &Sample,
    denominator: f64,
) -> Result<(f64, ParamGrads)> {
    let mut tape = Tape::new();
    let mut binder = Binder::with_shared(store, shared, true);
    let image = tape.constant(sample.image.clone());
    let out = network::forward(&mut tape, &mut binder, image, spec, ForwardOptions::default())?;
    let loss = tape.cross_entropy_with_denominator(out.logits, &sample.labels, IGNORE_LABEL, Some(denominator))?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    Ok((value, binder.gradients(&grads)))
}

/// Summed loss and gradients of a batch, normalized by the batch's total
/// number of valid pixels.
pub fn batch_gradients(spec: &NetworkSpec, store: &ParameterStore, batch: &[Sample]) -> Result<(f64, ParamGrads)> {
    let valid: usize = batch
        .iter()
        .map(|s| s.labels.iter().filter(|&&l| l != IGNORE_LABEL).count())
        .sum();
    let shared = network::share_params(store);
    let parts: Vec<(f64, ParamGrads)> = batch
        .par_iter()
        .map(|s| sample_step(spec, store, &shared, s, valid.max(1) as f64))
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut total = ParamGrads::default();
    for (l, g) in parts {
        loss += l;
        total.accumulate(g);
    }
    Ok((loss, total))
}

/// Logits for a single `(1, 3, h, w)` image.
pub fn infer(spec: &NetworkSpec, store: &ParameterStore, image: &Tensor4) -> Result<Tensor4> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(store, false);
    let x = tape.constant(image.clone());
    let out = network::forward(&mut tape, &mut binder, x, spec, ForwardOptions::default())?;
    Ok(tape.value(out.logits).clone())
}

/// Masks of the last selection layer of every stage for a single image,
/// as `(stage, mask, alpha, beta)`.
pub fn stage_masks(spec: &NetworkSpec, store: &ParameterStore, image: &Tensor4) -> Result<Vec<(usize, Tensor4, f64, f64)>> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(store, false);
    let x = tape.constant(image.clone());
    let out = network::forward(&mut tape, &mut binder, x, spec, ForwardOptions::default())?;
    let mut v = Vec::new();
    for (stage, d) in spec.stage_final_layers().into_iter().enumerate() {
        if let Some(m) = out.masks.get(&d) {
            v.push((stage, tape.value(m.values).clone(), m.range.alpha, m.range.beta));
        }
    }
    Ok(v)
}

/// Confusion matrix of the network's predictions over `samples`.
pub fn evaluate(spec: &NetworkSpec, store: &ParameterStore, samples: &[Sample]) -> Result<ConfusionMatrix> {
    let parts: Vec<ConfusionMatrix> = samples
        .par_iter()
        .map(|s| {
            let logits = infer(spec, store, &s.image)?;
            let mut cm = ConfusionMatrix::new(spec.num_classes);
            cm.accumulate(&network::predict(&logits), &s.labels)?;
            Ok(cm)
        })
        .collect::<Result<_>>()?;
    let mut cm = ConfusionMatrix::new(spec.num_classes);
    for p in &parts {
        cm.merge(p)?;
    }
    Ok(cm)
}

/// Trains from a seeded initialization. `eval_set`, when given, is scored
/// after every epoch.
pub fn train(
    train_set: &[Sample],
    eval_set: Option<&[Sample]>,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let store = ParameterStore::init(spec, cfg.seed)?;
    train_from(store, train_set, eval_set, spec, cfg, |_| {})
}

/// Like [`train`] but starting from `store` and reporting each metric row
/// to `on_epoch` as it is produced.
pub fn train_from(
    mut store: ParameterStore,
    train_set: &[Sample],
    eval_set: Option<&[Sample]>,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&MetricRow),
) -> Result<TrainOutcome> {
    spec.validate()?;
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let batches = train_set.len().div_ceil(cfg.batch_size);
    let max_iter = cfg.epochs * batches;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = Velocity::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut iter = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    let s = &train_set[i];
                    if cfg.flip_augment {
                        let (h, v) = (rng.gen_bool(0.5), rng.gen_bool(0.5));
                        s.flipped(h, v)
                    } else {
                        s.clone()
                    }
                })
                .collect();
            let (loss, grads) = batch_gradients(spec, &store, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    layer: "loss".into(),
                    message: format!("non-finite loss at iteration {iter}"),
                });
            }
            lr = poly_lr(iter, max_iter, cfg)?;
            sgd_step(&mut store, &grads, &mut velocity, lr, cfg)?;
            epoch_loss += loss;
            iter += 1;
        }
        let miou = match eval_set {
            Some(set) if !set.is_empty() => Some(evaluate(spec, &store, set)?.miou().mean),
            _ => None,
        };
        let row = MetricRow {
            epoch,
            iter,
            lr,
            loss: epoch_loss / batches as f64,
            miou,
        };
        on_epoch(&row);
        log.push(row);
    }
    Ok(TrainOutcome { store, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ConvParams;

    fn one_param_store(w: f64) -> ParameterStore {
        let spec = NetworkSpec::toy(network::Variant::Baseline);
        let mut store = ParameterStore::init(&spec, 0).unwrap();
        store.insert(
            "p",
            ConvParams {
                weight: Tensor4::full((1, 1, 1, 1), w),
                bias: Tensor4::zeros((1, 1, 1, 1)),
                stride: 1,
                padding: 0,
            },
        );
        store
    }

    fn grad(g: f64) -> ParamGrads {
        let mut pg = ParamGrads::default();
        pg.map.insert("p".into(), (Tensor4::full((1, 1, 1, 1), g), Tensor4::zeros((1, 1, 1, 1))));
        pg
    }

    #[test]
    fn poly_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(poly_lr(0, 100, &cfg).unwrap(), 0.007);
        assert_eq!(poly_lr(100, 100, &cfg).unwrap(), 0.0);
        let mid = poly_lr(50, 100, &cfg).unwrap();
        assert!((mid - 0.007 * 0.5f64.powf(0.9)).abs() < 1e-18);
        // exp(0.9 ln 0.5) * 0.007, evaluated independently.
        assert!((mid - 0.003_751_207_118_877_026).abs() < 1e-15);
        assert!(matches!(poly_lr(101, 100, &cfg), Err(Error::Contract(_))));
        assert!(poly_lr(0, 0, &cfg).is_err());
    }

    #[test]
    fn vanilla_step() {
        let cfg = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut store = one_param_store(2.0);
        sgd_step(&mut store, &grad(0.5), &mut Velocity::default(), 1.0, &cfg).unwrap();
        assert_eq!(store.get("p").unwrap().weight.item(), 1.5);
    }

    #[test]
    fn momentum_two_steps() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let (lr, g) = (0.1, 0.5);
        let mut store = one_param_store(1.0);
        let mut v = Velocity::default();
        sgd_step(&mut store, &grad(g), &mut v, lr, &cfg).unwrap();
        sgd_step(&mut store, &grad(g), &mut v, lr, &cfg).unwrap();
        let expect = 1.0 - lr * (g + (0.9 * g + g));
        assert!((store.get("p").unwrap().weight.item() - expect).abs() < 1e-15);
    }

    #[test]
    fn nan_names_the_layer_and_updates_nothing() {
        let mut store = one_param_store(1.0);
        let before = store.clone();
        let mut g = grad(1.0);
        // A finite gradient sorting before the bad one must not be applied.
        let head = store.get("main.head").unwrap();
        g.map.insert("main.head".into(), (head.weight.map(|_| 1.0), head.bias.map(|_| 1.0)));
        g.map.get_mut("p").unwrap().0 = Tensor4::full((1, 1, 1, 1), f64::NAN);
        let e = sgd_step(&mut store, &g, &mut Velocity::default(), 0.1, &TrainConfig::default());
        assert!(matches!(e, Err(Error::Training { ref layer, .. }) if layer == "p"));
        assert_eq!(store, before);
    }

    #[test]
    fn csv_has_header() {
        let rows = [MetricRow {
            epoch: 0,
            iter: 2,
            lr: 0.5,
            loss: 1.0,
            miou: None,
        }];
        let csv = metrics_csv(&rows);
        assert!(csv.starts_with("epoch,iter,lr,loss,miou\n0,2,"));
        assert!(csv.ends_with(",\n"));
    }
}
