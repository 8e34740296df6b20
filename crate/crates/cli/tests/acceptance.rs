//! Acceptance suite: one line per criterion, `PASS` or `FAIL`, with the
//! measured quantities. Runs sequentially so the runtime limits measure
//! one criterion at a time. Exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use hpsnet::data::{self, SynthConfig};
use hpsnet::eval::{self, ConfusionMatrix};
use hpsnet::hp::{self, BoundConv, HpModule, DEFAULT_RANGE, STAGE_ENTRY_RANGE};
use hpsnet::manifold::{self, LabConfig, TinyInstance};
use hpsnet::network::{self, Binder, ForwardOptions, NetworkSpec, ParameterStore, Variant};
use hpsnet::train::{self, TrainConfig};
use hpsnet::{gradcheck, Tape, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRADCHECK_LIMIT: Duration = Duration::from_secs(60);
const TRAINING_LIMIT: Duration = Duration::from_secs(20 * 60);
const LAB_LIMIT: Duration = Duration::from_secs(10 * 60);
const IDENTITY_TOL: f64 = 1e-12;
const MIOU_TOL: f64 = 1e-12;
const OVERHEAD_LIMIT: f64 = 0.10;
const HIDDEN_SHARE_LIMIT: f64 = 0.20;
const ORDER_SLACK: f64 = 1e-9;
const HIDDEN_GAP_LIMIT: f64 = 0.05;
// Fitted slope at the optimum, relative to the curvature term over the ball.
const SLOPE_TO_CURVATURE: f64 = 0.1;
// Toy training schedule; see the README for why it is above the default.
const TOY_LR: f64 = 0.03;
const TOY_SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn random(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize), scale: f64) -> Tensor4 {
    Tensor4::from_fn(shape, |_, _, _, _| scale * rng.gen_range(-1.0..1.0))
}

const DIFFERENTIABLE_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "square",
    "relu",
    "clip",
    "sum",
    "mean",
    "softmax_channels",
    "concat_channels",
    "slice_channels",
    "conv2d",
    "resize_nearest",
    "avgpool_stride2",
    "mul_channel_broadcast",
    "spatial_mean",
    "cross_entropy",
];

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let reports = match gradcheck::run_suite(0) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("suite error: {e}")),
    };
    let elapsed = start.elapsed();
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let missing: Vec<&str> = DIFFERENTIABLE_OPS
        .iter()
        .copied()
        .filter(|op| !reports.iter().any(|r| r.name.starts_with(op)))
        .collect();
    let has_module = ["hp_module (", "hp_module cut", "composed"]
        .iter()
        .all(|p| reports.iter().any(|r| r.name.starts_with(p)));
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    outcome(
        failed.is_empty() && missing.is_empty() && has_module && elapsed < GRADCHECK_LIMIT,
        format!(
            "{} cases, worst rel err {worst:.2e}, failed {failed:?}, uncovered {missing:?}, {:.1}s",
            reports.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn main_param_grads(spec: &NetworkSpec, store: &ParameterStore, image: &Tensor4, labels: &[u8], frozen: Option<&BTreeMap<usize, Tensor4>>) -> (BTreeMap<String, (Tensor4, Tensor4)>, BTreeMap<usize, Tensor4>) {
    let mut tape = Tape::new();
    let mut binder = Binder::new(store, true);
    let x = tape.constant(image.clone());
    let opts = ForwardOptions { frozen_masks: frozen, ..Default::default() };
    let out = network::forward(&mut tape, &mut binder, x, spec, opts).unwrap();
    let loss = tape.cross_entropy(out.logits, labels, 255).unwrap();
    let grads = tape.backward(loss).unwrap();
    let masks = out.masks.iter().map(|(&d, m)| (d, tape.value(m.values).clone())).collect();
    let main = binder.gradients(&grads).map.into_iter().filter(|(k, _)| k.starts_with("main.")).collect();
    (main, masks)
}

fn detach_semantics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bitwise = 0;
    let mut separated = 0;
    let trials = 5;
    for t in 0..trials {
        let image = Tensor4::from_fn((1, 3, 32, 32), |_, _, _, _| rng.gen::<f64>());
        let labels: Vec<u8> = (0..32 * 32).map(|_| rng.gen_range(0..4)).collect();
        let spec = NetworkSpec::toy(Variant::Hps);
        let store = ParameterStore::init(&spec, 100 + t).unwrap();
        let (cut, masks) = main_param_grads(&spec, &store, &image, &labels, None);
        let (frozen, _) = main_param_grads(&spec, &store, &image, &labels, Some(&masks));
        let same = cut.len() == frozen.len()
            && cut.iter().all(|(k, (w, b))| frozen.get(k).is_some_and(|(fw, fb)| w.data() == fw.data() && b.data() == fb.data()));
        bitwise += same as usize;

        // Without the cut, dW/dF reaches the main branch.
        let ig = NetworkSpec::toy(Variant::HpsIg);
        let (uncut, masks) = main_param_grads(&ig, &store, &image, &labels, None);
        let (frozen, _) = main_param_grads(&ig, &store, &image, &labels, Some(&masks));
        let diff = uncut.iter().map(|(k, (w, _))| w.max_abs_diff(&frozen[k].0)).fold(0.0, f64::max);
        separated += (diff > 1e-10) as usize;
    }

    // Module level: the mask pathway alone gives the features zero gradient.
    let mut zero_path = 0;
    let module_trials = 200;
    for _ in 0..module_trials {
        let mut tape = Tape::new();
        let f = tape.param(random(&mut rng, (2, 3, 5, 5), 1.0));
        let h = tape.param(random(&mut rng, (2, 2, 5, 5), 1.0));
        let mut conv = |tape: &mut Tape, o, i| BoundConv {
            weight: tape.param(random(&mut rng, (o, i, 3, 3), 0.3)),
            bias: tape.param(random(&mut rng, (1, o, 1, 1), 0.3)),
            stride: 1,
            padding: 1,
        };
        let module = HpModule {
            reduce_conv: conv(&mut tape, 4, 3),
            mask_conv: conv(&mut tape, 2, 6),
            range: DEFAULT_RANGE,
            cut_gradients: true,
        };
        let m = hp::make_mask(&mut tape, f, Some(h), &module).unwrap();
        let loss = tape.sum(m.values);
        let g = tape.backward(loss).unwrap();
        zero_path += g.get(f).is_none_or(|t| t.max_abs() == 0.0) as usize;
    }
    outcome(
        bitwise == trials as usize && separated == trials as usize && zero_path == module_trials,
        format!(
            "cut == frozen bitwise {bitwise}/{trials}, uncut differs {separated}/{trials}, dW/dF zero {zero_path}/{module_trials}"
        ),
    )
}

fn mask_range() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let evaluations = 10_000;
    let mut bad = 0usize;
    let mut values = 0usize;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for i in 0..evaluations {
        let entry = i % 2 == 1;
        let (range, paths) = if entry { (STAGE_ENTRY_RANGE, 3) } else { (DEFAULT_RANGE, 2) };
        let (n, c, hh, ww) = (rng.gen_range(1..3), rng.gen_range(1..5), rng.gen_range(1..7), rng.gen_range(1..7));
        let scale = 10f64.powf(rng.gen_range(-1.0..1.5));
        let mut tape = Tape::new();
        let f = tape.constant(random(&mut rng, (n, c, hh, ww), 2.0));
        let h = tape.constant(random(&mut rng, (n, 2, hh, ww), 2.0));
        let module = HpModule {
            reduce_conv: BoundConv {
                weight: tape.param(random(&mut rng, (4, c, 3, 3), scale)),
                bias: tape.param(random(&mut rng, (1, 4, 1, 1), scale)),
                stride: 1,
                padding: 1,
            },
            mask_conv: BoundConv {
                weight: tape.param(random(&mut rng, (paths, 6, 3, 3), scale)),
                bias: tape.param(random(&mut rng, (1, paths, 1, 1), scale)),
                stride: 1,
                padding: 1,
            },
            range,
            cut_gradients: i % 4 < 2,
        };
        let m = hp::make_mask(&mut tape, f, Some(h), &module).unwrap();
        let k = entry as usize;
        for &v in tape.value(m.values).data() {
            values += 1;
            bad += !range.contains(v) as usize;
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    outcome(
        bad == 0,
        format!(
            "{evaluations} evaluations, {values} values, {bad} out of range; default seen [{:.3}, {:.3}], entry seen [{:.3}, {:.3}]",
            lo[0], hi[0], lo[1], hi[1]
        ),
    )
}

fn identity_reduction() -> Outcome {
    let spec = NetworkSpec::toy(Variant::Hps);
    let base = NetworkSpec::toy(Variant::Baseline);
    let store = ParameterStore::init(&spec, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let inputs = 100;
    for _ in 0..inputs {
        let image = Tensor4::from_fn((1, 3, 64, 64), |_, _, _, _| rng.gen::<f64>());
        let run = |spec: &NetworkSpec, unit_masks| {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&store, false);
            let x = tape.constant(image.clone());
            let opts = ForwardOptions { unit_masks, ..Default::default() };
            let out = network::forward(&mut tape, &mut binder, x, spec, opts).unwrap();
            tape.value(out.logits).clone()
        };
        worst = worst.max(run(&spec, true).max_abs_diff(&run(&base, false)));
    }
    outcome(worst <= IDENTITY_TOL, format!("{inputs} inputs, max |hps - baseline| = {worst:.3e}"))
}

fn set_count_miou(pred: &[u8], truth: &[u8], n: u8) -> f64 {
    let ious: Vec<f64> = (0..n)
        .filter_map(|c| {
            let (mut inter, mut union) = (0u64, 0u64);
            for (&p, &t) in pred.iter().zip(truth).filter(|(_, &t)| t != 255) {
                inter += (p == c && t == c) as u64;
                union += (p == c || t == c) as u64;
            }
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect();
    if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 }
}

fn miou_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pairs = 1000;
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let n = rng.gen_range(2..8u8);
        let len = rng.gen_range(1..300);
        let pred: Vec<u8> = (0..len).map(|_| rng.gen_range(0..n)).collect();
        let truth: Vec<u8> = (0..len).map(|_| if rng.gen_bool(0.1) { 255 } else { rng.gen_range(0..n) }).collect();
        let mut cm = ConfusionMatrix::new(n as usize);
        cm.accumulate(&pred, &truth).unwrap();
        worst = worst.max((cm.miou().mean - set_count_miou(&pred, &truth, n)).abs());
    }
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&[0, 0, 1, 1, 1, 1], &[0, 0, 0, 1, 1, 1]).unwrap();
    let worked = cm.miou().mean;
    let worked_ok = (worked - 17.0 / 24.0).abs() <= MIOU_TOL;
    outcome(
        worst <= MIOU_TOL && worked_ok,
        format!("{pairs} pairs, max deviation {worst:.1e}; Q=[[2,1],[0,3]] gives {worked:.12} (17/24 = {:.12})", 17.0 / 24.0),
    )
}

fn toy_training() -> Outcome {
    let start = Instant::now();
    let variants = [Variant::Hps, Variant::Baseline, Variant::HpsFh, Variant::HpsIg];
    let mut scores: BTreeMap<Variant, Vec<f64>> = BTreeMap::new();
    for seed in TOY_SEEDS {
        let mut all = data::gen_synthetic(250, &SynthConfig::new(4, 64), 1000 + seed).unwrap();
        let test = all.split_off(200);
        let cfg = TrainConfig { base_lr: TOY_LR, seed, ..TrainConfig::default() };
        for v in variants {
            let spec = NetworkSpec::toy(v);
            let out = train::train(&all, None, &spec, &cfg).unwrap();
            let miou = train::evaluate(&spec, &out.store, &test).unwrap().miou().mean;
            scores.entry(v).or_default().push(miou);
        }
    }
    let elapsed = start.elapsed();
    let mean = |v: Variant| scores[&v].iter().sum::<f64>() / scores[&v].len() as f64;
    let hps = &scores[&Variant::Hps];
    let others = [Variant::Baseline, Variant::HpsFh, Variant::HpsIg];
    let means_ok = others.iter().all(|&v| mean(Variant::Hps) >= mean(v));
    let seeds_ordered = (0..TOY_SEEDS.len()).filter(|&i| others.iter().all(|v| hps[i] >= scores[v][i])).count();
    let fmt = |v: Variant| format!("{} {:.4} {:?}", v.name(), mean(v), scores[&v].iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>());
    outcome(
        means_ok && seeds_ordered >= 2 && elapsed < TRAINING_LIMIT,
        format!(
            "mean mIoU {}; {}; {}; {}; full ordering in {seeds_ordered}/3 seeds; {:.0}s",
            fmt(Variant::Hps),
            fmt(Variant::Baseline),
            fmt(Variant::HpsFh),
            fmt(Variant::HpsIg),
            elapsed.as_secs_f64()
        ),
    )
}

fn flops() -> Outcome {
    let f = |v| eval::count_flops(&NetworkSpec::toy(v), 64, 64).unwrap();
    let (base, gated, hps) = (f(Variant::Baseline), f(Variant::Gated), f(Variant::Hps));
    let overhead = hps.overhead_ratio(&base);
    let share = (hps.total() - gated.total()) as f64 / (hps.total() - base.total()) as f64;
    outcome(
        overhead < OVERHEAD_LIMIT && share <= HIDDEN_SHARE_LIMIT,
        format!(
            "baseline {} FLOPs, hps {} FLOPs, overhead {:.2}%, hidden-variable share {:.1}% of overhead",
            base.total(),
            hps.total(),
            100.0 * overhead,
            100.0 * share
        ),
    )
}

fn manifold_lab() -> Outcome {
    let start = Instant::now();
    let cfg = LabConfig::default();
    let mut lines = Vec::new();
    let (mut ordered, mut close, mut convex_ok) = (0, 0, 0);
    let instances = TinyInstance::shipped();
    for inst in &instances {
        let r = manifold::run_instance(inst, &cfg).unwrap();
        let order = r.oracle <= r.hidden + ORDER_SLACK && r.hidden <= r.gated + ORDER_SLACK;
        let gap = r.hidden_gap();
        let residuals: Vec<f64> = r.fits.iter().map(|f| f.relative_residual).collect();
        let slopes: Vec<f64> = r.fits.iter().map(|f| f.projected_gradient_norm(&r.oracle_masks, inst.range)).collect();
        let last = r.fits.last().unwrap();
        let monotone = residuals.windows(2).all(|w| w[1] < w[0]);
        let slope_shrinks = slopes.windows(2).all(|w| w[1] <= w[0]);
        let slope_small = slopes.last().unwrap() <= &(SLOPE_TO_CURVATURE * last.radius * last.hessian_norm);
        let full_rank = r.fits.iter().all(|f| !f.rank_deficient);
        ordered += order as usize;
        close += (gap <= HIDDEN_GAP_LIMIT) as usize;
        convex_ok += (monotone && slope_shrinks && slope_small && full_rank) as usize;
        lines.push(format!(
            "#{} oracle {:.4e} hidden {:.4e} gated {:.4e} gap {:.2}% residuals {:?} slope {:.1e} (limit {:.1e}) min eig {:.3}",
            r.id,
            r.oracle,
            r.hidden,
            r.gated,
            100.0 * gap,
            residuals.iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>(),
            slopes.last().unwrap(),
            SLOPE_TO_CURVATURE * last.radius * last.hessian_norm,
            last.min_eigenvalue
        ));
    }
    let elapsed = start.elapsed();
    let n = instances.len();
    outcome(
        ordered == n && close >= 2 && convex_ok == n && elapsed < LAB_LIMIT,
        format!(
            "ordered {ordered}/{n}, hidden within 5% {close}/{n}, probe ok {convex_ok}/{n}, {:.0}s; {}",
            elapsed.as_secs_f64(),
            lines.join("; ")
        ),
    )
}

fn run_train(bin: &Path, dir: &Path, name: &str) -> Result<Vec<u8>, String> {
    let config = dir.join(format!("{name}.cfg"));
    let text = format!(
        "# determinism check\nseed = 7\noutput_dir = {name}\ntrain.epochs = 2\ntrain.batch_size = 4\n\
         data.train_count = 12\ndata.eval_count = 4\ndata.size = 32\n"
    );
    std::fs::write(&config, text).map_err(|e| e.to_string())?;
    let status = Command::new(bin)
        .arg("train")
        .arg(&config)
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(format!("exit {:?}: {}", status.status.code(), String::from_utf8_lossy(&status.stderr)));
    }
    std::fs::read(dir.join(name).join("metrics.csv")).map_err(|e| e.to_string())
}

fn determinism() -> Outcome {
    let bin = PathBuf::from(env!("CARGO_BIN_EXE_hps"));
    let dir = std::env::temp_dir().join(format!("hps-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let result = run_train(&bin, &dir, "first").and_then(|a| run_train(&bin, &dir, "second").map(|b| (a, b)));
    let _ = std::fs::remove_dir_all(&dir);
    match result {
        Ok((a, b)) => outcome(
            a == b && !a.is_empty(),
            format!("two `hps train` runs, metrics.csv {} bytes each, identical: {}", a.len(), a == b),
        ),
        Err(e) => outcome(false, e),
    }
}

fn main() {
    // `cargo test -- <filter>` passes arguments; run every criterion that
    // matches any of them, or all when none are given.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 gradient suite", gradient_suite),
        ("2 detach semantics", detach_semantics),
        ("3 mask range", mask_range),
        ("4 identity reduction", identity_reduction),
        ("5 miou oracle", miou_oracle),
        ("6 toy training ordering", toy_training),
        ("7 flops accounting", flops),
        ("8 manifold lab", manifold_lab),
        ("9 determinism", determinism),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let o = run();
        println!("criterion {name}: {} | {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        failed += !o.passed as usize;
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
