//! Loss-reachability experiments on micro networks.
//!
//! A [`TinyInstance`] is a three-layer network with two alternative paths
//! and one soft mask per sample:
//!
//! ```text
//! F = conv(x)            p0 = conv(F)    p1 = conv(F)
//! y = w * p0 + (2 - w) * p1              probs = softmax(conv(y))
//! loss = mean((probs - targets)^2)
//! ```
//!
//! The per-sample mask `w` comes from one of three families:
//!
//! * free: any value in `[alpha, beta]` per sample (the oracle),
//! * gated: pixel mean of a mask module fed by `F` alone,
//! * hidden: the same module fed by `F` and a map `H = conv(x)` from an
//!   independent branch.
//!
//! Free contains hidden, which contains gated (zero hidden weights), so
//! the best reachable losses must be ordered oracle <= hidden <= gated.
//! The targets come from a teacher whose masks depend on an input channel
//! that the paths do not need, which a gated mask can only see by
//! corrupting `F`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::hp::{self, BoundConv, HpModule, MaskRange};
use crate::tensor::{Shape4, Tensor4};

/// Largest grid an oracle search may visit.
pub const MAX_GRID_POINTS: usize = 200_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskFamily {
    Gated,
    Hidden,
}

#[derive(Clone, Debug)]
pub struct TinyInstance {
    pub id: usize,
    /// `(samples, 2, h, w)`: channel 0 varies per pixel, channel 1 is a
    /// per-sample context value plus a little noise.
    pub inputs: Tensor4,
    /// `(samples, 2, h, w)` soft class probabilities.
    pub targets: Tensor4,
    pub range: MaskRange,
    pub grid_resolution: usize,
    /// Teacher masks the targets were generated with.
    pub teacher_masks: Vec<f64>,
}

/// Network parameters by name; convolutions are `{name}.w` / `{name}.b`.
pub type TinyParams = BTreeMap<String, Tensor4>;

fn conv_shapes(family: Option<MaskFamily>) -> Vec<(&'static str, usize, usize)> {
    let mut v = vec![("f", 1, 2), ("p0", 1, 1), ("p1", 1, 1), ("head", 2, 1)];
    match family {
        Some(MaskFamily::Gated) => v.extend([("reduce", 1, 1), ("mask", 2, 1)]),
        Some(MaskFamily::Hidden) => v.extend([("reduce", 1, 1), ("hidden", 1, 2), ("mask", 2, 2)]),
        None => {}
    }
    v
}

/// Seeded parameters for the main layers plus the family's mask module.
pub fn init_params(family: Option<MaskFamily>, seed: u64) -> TinyParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = TinyParams::new();
    for (name, out, inp) in conv_shapes(family) {
        let std = (1.0 / inp as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite");
        p.insert(
            format!("{name}.w"),
            Tensor4::from_fn((out, inp, 1, 1), |_, _, _, _| normal.sample(&mut rng)),
        );
        p.insert(format!("{name}.b"), Tensor4::zeros((1, out, 1, 1)));
    }
    p
}

pub fn scalar_count(p: &TinyParams) -> usize {
    p.values().map(Tensor4::numel).sum()
}

/// Where the per-sample mask comes from in one forward pass.
enum Masks {
    /// `(samples, 1, 1, 1)` values of `w`.
    Free(Var),
    Family(MaskFamily),
}

struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    fn conv(&self, name: &str) -> BoundConv {
        BoundConv {
            weight: self.vars[&format!("{name}.w")],
            bias: self.vars[&format!("{name}.b")],
            stride: 1,
            padding: 0,
        }
    }
}

impl TinyInstance {
    pub fn samples(&self) -> usize {
        self.inputs.shape().n
    }

    /// One free mask value per sample.
    pub fn mask_dof(&self) -> usize {
        self.samples()
    }

    /// Builds an instance with `samples` samples of `size x size` pixels.
    pub fn generate(id: usize, samples: usize, size: usize, seed: u64) -> Result<Self> {
        if samples == 0 || samples > 8 || size == 0 || size > 4 {
            return Err(Error::Config(format!(
                "tiny instances need 1..=8 samples and 1..=4 pixels per side, got {samples} and {size}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let context: Vec<f64> = (0..samples).map(|i| -1.0 + 2.0 * (i as f64 + rng.gen_range(0.2..0.8)) / samples as f64).collect();
        let shape = Shape4::new(samples, 2, size, size);
        let inputs = Tensor4::from_fn(shape, |n, c, _, _| {
            if c == 0 {
                rng.gen_range(-1.0..1.0)
            } else {
                context[n] + 0.05 * rng.sample::<f64, _>(StandardNormal)
            }
        });

        // Teacher: paths read channel 0 only, masks read channel 1 only.
        let mut teacher = init_params(Some(MaskFamily::Hidden), seed ^ 0x7eac);
        teacher.insert("f.w".into(), Tensor4::new((1, 2, 1, 1), vec![1.5, 0.0])?);
        teacher.insert("p0.w".into(), Tensor4::full((1, 1, 1, 1), 2.0));
        teacher.insert("p1.w".into(), Tensor4::full((1, 1, 1, 1), -1.0));
        teacher.insert("p1.b".into(), Tensor4::full((1, 1, 1, 1), 0.5));
        teacher.insert("head.w".into(), Tensor4::new((2, 1, 1, 1), vec![1.0, -1.0])?);
        teacher.insert("reduce.w".into(), Tensor4::zeros((1, 1, 1, 1)));
        teacher.insert("hidden.w".into(), Tensor4::new((1, 2, 1, 1), vec![0.0, 1.0])?);
        teacher.insert("mask.w".into(), Tensor4::new((2, 2, 1, 1), vec![0.0, 0.25, 0.0, -0.25])?);
        teacher.insert("mask.b".into(), Tensor4::zeros((1, 2, 1, 1)));

        let range = hp::DEFAULT_RANGE;
        let probe = TinyInstance {
            id,
            inputs,
            targets: Tensor4::zeros(shape),
            range,
            grid_resolution: 5,
            teacher_masks: Vec::new(),
        };
        let (probs, masks) = probe.predict_family(&teacher, MaskFamily::Hidden)?;
        let noise = Normal::new(0.0, 0.03).expect("finite");
        let mut targets = probs.clone();
        for n in 0..samples {
            for i in 0..size * size {
                let t = (probs.plane(n, 0)[i] + noise.sample(&mut rng)).clamp(0.02, 0.98);
                targets.plane_mut(n, 0)[i] = t;
                targets.plane_mut(n, 1)[i] = 1.0 - t;
            }
        }
        Ok(TinyInstance {
            targets,
            teacher_masks: masks,
            ..probe
        })
    }

    /// The three instances the lab reports on.
    pub fn shipped() -> Vec<TinyInstance> {
        [(0, 4, 4, 11), (1, 4, 4, 23), (2, 3, 4, 37)]
            .into_iter()
            .map(|(id, n, s, seed)| Self::generate(id, n, s, seed).expect("valid shipped instance"))
            .collect()
    }

    fn bind(&self, tape: &mut Tape, params: &TinyParams, trainable: bool) -> Bound {
        Bound {
            vars: params
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
                .collect(),
        }
    }

    /// Returns `(loss, probs, per-sample w)`.
    fn forward(&self, tape: &mut Tape, b: &Bound, masks: Masks) -> Result<(Var, Var, Var)> {
        let s = self.inputs.shape();
        let x = tape.constant(self.inputs.clone());
        let f = b.conv("f").apply(tape, x)?;
        let p0 = b.conv("p0").apply(tape, f)?;
        let p1 = b.conv("p1").apply(tape, f)?;
        let mask = match masks {
            Masks::Free(w) => {
                let two = tape.constant(Tensor4::full(tape.shape(w), 2.0));
                let rest = tape.sub(two, w)?;
                let both = tape.concat_channels(w, rest)?;
                tape.resize_nearest(both, s.h, s.w)?
            }
            Masks::Family(family) => {
                let module = HpModule {
                    reduce_conv: b.conv("reduce"),
                    mask_conv: b.conv("mask"),
                    range: self.range,
                    cut_gradients: false,
                };
                let hidden = match family {
                    MaskFamily::Gated => None,
                    MaskFamily::Hidden => Some(b.conv("hidden").apply(tape, x)?),
                };
                let m = hp::make_mask(tape, f, hidden, &module)?;
                hp::share_over_pixels(tape, m).values
            }
        };
        let w = tape.slice_channels(mask, 0, 1)?;
        let y = hp::select_paths(
            tape,
            &[p0, p1],
            &hp::SoftMask {
                values: mask,
                range: self.range,
            },
        )?;
        let z = b.conv("head").apply(tape, y)?;
        let probs = tape.softmax_channels(z);
        let t = tape.constant(self.targets.clone());
        let diff = tape.sub(probs, t)?;
        let sq = tape.square(diff);
        let loss = tape.mean(sq);
        Ok((loss, probs, w))
    }

    fn predict_family(&self, params: &TinyParams, family: MaskFamily) -> Result<(Tensor4, Vec<f64>)> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, params, false);
        let (_, probs, w) = self.forward(&mut tape, &b, Masks::Family(family))?;
        let w = tape.value(w);
        let masks = (0..self.samples()).map(|n| w.plane(n, 0)[0]).collect();
        Ok((tape.value(probs).clone(), masks))
    }

    /// Loss with the mask fixed to `w` per sample (values are used as given,
    /// even outside the range).
    pub fn loss_at(&self, params: &TinyParams, w: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, params, false);
        let wv = tape.constant(self.free_mask(w)?);
        let (loss, _, _) = self.forward(&mut tape, &b, Masks::Free(wv))?;
        Ok(tape.value(loss).item())
    }

    pub fn family_loss(&self, params: &TinyParams, family: MaskFamily) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, params, false);
        let (loss, _, _) = self.forward(&mut tape, &b, Masks::Family(family))?;
        Ok(tape.value(loss).item())
    }

    fn free_mask(&self, w: &[f64]) -> Result<Tensor4> {
        if w.len() != self.samples() {
            return Err(Error::Contract(format!("{} mask values for {} samples", w.len(), self.samples())));
        }
        Tensor4::new((self.samples(), 1, 1, 1), w.to_vec())
    }
}

/// Optimizer settings shared by every search in the lab.
#[derive(Clone, Debug, PartialEq)]
pub struct LabConfig {
    pub restarts: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Parameter fit at each oracle grid point.
    pub grid_steps: usize,
    /// Seeded initializations tried per oracle fit.
    pub fit_inits: usize,
    /// Best grid points refined jointly over parameters and free masks.
    pub refine_top: usize,
    pub refine_steps: usize,
    /// Mask-only descent after refinement, parameters frozen.
    pub polish_steps: usize,
    pub radii: Vec<f64>,
    pub probe_points: usize,
    pub seed: u64,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            restarts: 20,
            steps: 2000,
            lr: 2.0,
            momentum: 0.9,
            grid_steps: 300,
            fit_inits: 4,
            refine_top: 4,
            refine_steps: 4000,
            polish_steps: 2000,
            radii: vec![0.25, 0.1, 0.05],
            probe_points: 200,
            seed: 0,
        }
    }
}

/// Momentum gradient descent on `params` (and on free masks `w` when
/// given, projected back into the range after every step). Returns the
/// final loss.
#[allow(clippy::too_many_arguments)]
fn descend(
    inst: &TinyInstance,
    params: &mut TinyParams,
    masks: Option<MaskFamily>,
    w: &mut [f64],
    train_params: bool,
    train_w: bool,
    steps: usize,
    cfg: &LabConfig,
) -> Result<f64> {
    let mut vel: BTreeMap<String, Tensor4> = params.iter().map(|(k, v)| (k.clone(), Tensor4::zeros(v.shape()))).collect();
    let mut vel_w = vec![0.0; w.len()];
    for _ in 0..steps {
        let mut tape = Tape::new();
        let b = inst.bind(&mut tape, params, train_params);
        let wv = match masks {
            None => Some(tape.leaf(inst.free_mask(w)?, train_w)),
            Some(_) => None,
        };
        let m = match (masks, wv) {
            (Some(f), _) => Masks::Family(f),
            (None, Some(v)) => Masks::Free(v),
            (None, None) => unreachable!(),
        };
        let (loss, _, _) = inst.forward(&mut tape, &b, m)?;
        let grads = tape.backward(loss)?;
        for (k, var) in b.vars.iter().filter(|_| train_params) {
            let g = grads.wrt(*var);
            let v = vel.get_mut(k).expect("same keys");
            let p = params.get_mut(k).expect("same keys");
            for ((v, &g), p) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
                *v = cfg.momentum * *v + g;
                *p -= cfg.lr * *v;
            }
        }
        if let (Some(var), true) = (wv, train_w) {
            let g = grads.wrt(var);
            for ((w, v), &g) in w.iter_mut().zip(vel_w.iter_mut()).zip(g.data()) {
                *v = cfg.momentum * *v + g;
                *w = (*w - cfg.lr * *v).clamp(inst.range.alpha, inst.range.beta);
            }
        }
    }
    match masks {
        None => inst.loss_at(params, w),
        Some(f) => inst.family_loss(params, f),
    }
}

/// Points of a `resolution`-per-axis grid over `[lo, hi]^k`, in odometer order.
pub fn grid_points(k: usize, resolution: usize, lo: f64, hi: f64) -> Result<Vec<Vec<f64>>> {
    if resolution < 2 {
        return Err(Error::Config(format!("grid resolution must be at least 2, got {resolution}")));
    }
    let total = (resolution as u128).checked_pow(k as u32).unwrap_or(u128::MAX);
    if total > MAX_GRID_POINTS as u128 {
        return Err(Error::Config(format!(
            "grid of {resolution}^{k} points exceeds the limit of {MAX_GRID_POINTS}"
        )));
    }
    let axis: Vec<f64> = (0..resolution).map(|i| lo + (hi - lo) * i as f64 / (resolution - 1) as f64).collect();
    let mut out = Vec::with_capacity(total as usize);
    let mut idx = vec![0usize; k];
    loop {
        out.push(idx.iter().map(|&i| axis[i]).collect());
        let mut d = 0;
        loop {
            if d == k {
                return Ok(out);
            }
            idx[d] += 1;
            if idx[d] < resolution {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

/// Minimum of `f` over a grid, ties to the earliest point.
pub fn grid_minimum(
    k: usize,
    resolution: usize,
    lo: f64,
    hi: f64,
    f: impl Fn(&[f64]) -> Result<f64> + Sync,
) -> Result<(f64, Vec<f64>)> {
    let pts = grid_points(k, resolution, lo, hi)?;
    let vals: Vec<f64> = pts.par_iter().map(|p| f(p)).collect::<Result<_>>()?;
    let (i, v) = vals
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    Ok((v, pts[i].clone()))
}

#[derive(Clone, Debug)]
pub struct OracleResult {
    pub loss: f64,
    pub masks: Vec<f64>,
    pub params: TinyParams,
    /// Best loss on the grid before refinement.
    pub grid_loss: f64,
}

/// Parameter fit with the masks held at `w`, from a fixed initialization.
/// Parameter fit with the masks held at `w`: the best of `fit_inits`
/// seeded initializations, ties to the lowest seed.
fn fit_at(inst: &TinyInstance, w: &[f64], steps: usize, cfg: &LabConfig) -> Result<(f64, TinyParams)> {
    let mut best: Option<(f64, TinyParams)> = None;
    for i in 0..cfg.fit_inits.max(1) {
        let mut params = init_params(None, cfg.seed.wrapping_add(1000 + i as u64));
        let mut w = w.to_vec();
        let loss = descend(inst, &mut params, None, &mut w, true, false, steps, cfg)?;
        let loss = if loss.is_finite() { loss } else { f64::INFINITY };
        if best.as_ref().is_none_or(|b| loss < b.0) {
            best = Some((loss, params));
        }
    }
    Ok(best.expect("at least one init"))
}

/// Best loss over free per-sample masks: a grid search with a parameter fit
/// at each point, then joint refinement of parameters and masks from the
/// best `refine_top` points.
pub fn oracle_best_loss(inst: &TinyInstance, cfg: &LabConfig) -> Result<OracleResult> {
    oracle_with_resolution(inst, inst.grid_resolution, cfg)
}

pub fn oracle_with_resolution(inst: &TinyInstance, resolution: usize, cfg: &LabConfig) -> Result<OracleResult> {
    if resolution < 5 {
        return Err(Error::Config(format!("oracle grid needs at least 5 points per axis, got {resolution}")));
    }
    let (lo, hi) = (inst.range.alpha, inst.range.beta);
    let pts = grid_points(inst.mask_dof(), resolution, lo, hi)?;
    let fits: Vec<f64> = pts
        .par_iter()
        .map(|p| fit_at(inst, p, cfg.grid_steps, cfg).map(|r| r.0))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| fits[a].total_cmp(&fits[b]).then(a.cmp(&b)));
    let grid_loss = fits[order[0]];

    let refined: Vec<(f64, Vec<f64>, TinyParams)> = order
        .iter()
        .take(cfg.refine_top.max(1))
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&&i| {
            let (start, start_params) = fit_at(inst, &pts[i], cfg.grid_steps, cfg)?;
            let mut params = start_params.clone();
            let mut w = pts[i].clone();
            descend(inst, &mut params, None, &mut w, true, true, cfg.refine_steps, cfg)?;
            let loss = descend(inst, &mut params, None, &mut w, false, true, cfg.polish_steps, cfg)?;
            if loss <= start {
                Ok((loss, w, params))
            } else {
                Ok((start, pts[i].clone(), start_params))
            }
        })
        .collect::<Result<_>>()?;
    let best = refined
        .into_iter()
        .fold(None::<(f64, Vec<f64>, TinyParams)>, |acc, r| match acc {
            Some(a) if a.0 <= r.0 => Some(a),
            _ => Some(r),
        })
        .expect("at least one refined point");
    Ok(OracleResult {
        loss: best.0,
        masks: best.1,
        params: best.2,
        grid_loss,
    })
}

/// Best final loss over seeded restarts of full-parameter descent with the
/// masks produced by `family`.
pub fn constrained_best_loss(inst: &TinyInstance, family: MaskFamily, cfg: &LabConfig) -> Result<f64> {
    let losses: Vec<f64> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut params = init_params(Some(family), cfg.seed.wrapping_add(1 + r as u64));
            let mut none = Vec::new();
            let loss = descend(inst, &mut params, Some(family), &mut none, true, false, cfg.steps, cfg)?;
            Ok(if loss.is_finite() { loss } else { f64::INFINITY })
        })
        .collect::<Result<_>>()?;
    Ok(losses.into_iter().fold(f64::INFINITY, f64::min))
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticFit {
    pub radius: f64,
    /// `||fit - loss|| / ||loss - loss(W*)||` over the sampled points.
    pub relative_residual: f64,
    pub gradient: Vec<f64>,
    pub gradient_norm: f64,
    /// Frobenius norm of the fitted Hessian.
    pub hessian_norm: f64,
    pub min_eigenvalue: f64,
    /// Design matrix rank fell short of the unknown count.
    pub rank_deficient: bool,
}

/// Fits `f(c + d) ~ f(c) + g.d + d'Hd / 2` on `points` samples drawn
/// uniformly from the ball of `radius` around `c`.
pub fn fit_quadratic(
    f: impl Fn(&[f64]) -> Result<f64> + Sync,
    center: &[f64],
    radius: f64,
    points: usize,
    seed: u64,
) -> Result<QuadraticFit> {
    let k = center.len();
    let f0 = f(center)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let deltas: Vec<Vec<f64>> = (0..points)
        .map(|_| {
            let dir: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let r = radius * rng.gen::<f64>().powf(1.0 / k as f64);
            dir.iter().map(|v| v / norm * r).collect()
        })
        .collect();
    let values: Vec<f64> = deltas
        .par_iter()
        .map(|d| {
            let p: Vec<f64> = center.iter().zip(d).map(|(c, d)| c + d).collect();
            f(&p).map(|v| v - f0)
        })
        .collect::<Result<_>>()?;

    // Unknowns: g (k), then the upper triangle of H (k(k+1)/2).
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (i..k).map(move |j| (i, j))).collect();
    let cols = k + pairs.len();
    let a = DMatrix::from_fn(points, cols, |r, c| {
        let d = &deltas[r];
        if c < k {
            d[c]
        } else {
            let (i, j) = pairs[c - k];
            if i == j {
                0.5 * d[i] * d[i]
            } else {
                d[i] * d[j]
            }
        }
    });
    let y = DVector::from_vec(values.clone());
    let svd = a.clone().svd(true, true);
    let tol = 1e-12 * svd.singular_values.max();
    let rank = svd.rank(tol);
    let x = svd.solve(&y, tol).map_err(|e| Error::Contract(format!("least squares failed: {e}")))?;
    let fitted = &a * &x;
    let residual = (&fitted - &y).norm() / y.norm().max(f64::MIN_POSITIVE);

    let mut h = DMatrix::zeros(k, k);
    for (n, &(i, j)) in pairs.iter().enumerate() {
        h[(i, j)] = x[k + n];
        h[(j, i)] = x[k + n];
    }
    let eig = SymmetricEigen::new(h.clone());
    Ok(QuadraticFit {
        radius,
        relative_residual: residual,
        gradient: x.rows(0, k).iter().copied().collect(),
        gradient_norm: x.rows(0, k).norm(),
        hessian_norm: h.norm(),
        min_eigenvalue: eig.eigenvalues.min(),
        rank_deficient: rank < cols,
    })
}

/// Quadratic fit of the loss in the masks around the oracle optimum, with
/// the network parameters held at the oracle's values.
pub fn convexity_probe(inst: &TinyInstance, oracle: &OracleResult, radius: f64, cfg: &LabConfig) -> Result<QuadraticFit> {
    if radius <= 0.0 || radius > inst.range.half_width() + 1e-12 {
        return Err(Error::Contract(format!(
            "probe radius {radius} outside (0, {}]",
            inst.range.half_width()
        )));
    }
    fit_quadratic(|w| inst.loss_at(&oracle.params, w), &oracle.masks, radius, cfg.probe_points, cfg.seed ^ 0x9b0b)
}

impl QuadraticFit {
    /// Norm of the gradient after dropping components that point out of
    /// `range` at coordinates sitting on a bound, where a nonzero slope is
    /// expected at a constrained minimum.
    pub fn projected_gradient_norm(&self, center: &[f64], range: MaskRange) -> f64 {
        const ON_BOUND: f64 = 1e-9;
        self.gradient
            .iter()
            .zip(center)
            .map(|(&g, &c)| {
                let at_lo = c - range.alpha <= ON_BOUND && g > 0.0;
                let at_hi = range.beta - c <= ON_BOUND && g < 0.0;
                if at_lo || at_hi {
                    0.0
                } else {
                    g * g
                }
            })
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct InstanceReport {
    pub id: usize,
    pub oracle: f64,
    pub gated: f64,
    pub hidden: f64,
    pub fits: Vec<QuadraticFit>,
    pub oracle_masks: Vec<f64>,
}

impl InstanceReport {
    pub fn hidden_gap(&self) -> f64 {
        (self.hidden - self.oracle) / self.oracle
    }
}

pub fn run_instance(inst: &TinyInstance, cfg: &LabConfig) -> Result<InstanceReport> {
    let oracle = oracle_best_loss(inst, cfg)?;
    let gated = constrained_best_loss(inst, MaskFamily::Gated, cfg)?;
    let hidden = constrained_best_loss(inst, MaskFamily::Hidden, cfg)?;
    let fits = cfg
        .radii
        .iter()
        .map(|&r| convexity_probe(inst, &oracle, r, cfg))
        .collect::<Result<_>>()?;
    Ok(InstanceReport {
        id: inst.id,
        oracle: oracle.loss,
        gated,
        hidden,
        fits,
        oracle_masks: oracle.masks,
    })
}

/// `instance,oracle,gated,hidden,residual_r{radius}...`
pub fn report_csv(reports: &[InstanceReport]) -> String {
    let mut s = String::from("instance,oracle,gated,hidden");
    if let Some(r) = reports.first() {
        for f in &r.fits {
            write!(s, ",residual_r{}", f.radius).unwrap();
        }
    }
    s.push('\n');
    for r in reports {
        write!(s, "{},{:.12e},{:.12e},{:.12e}", r.id, r.oracle, r.gated, r.hidden).unwrap();
        for f in &r.fits {
            write!(s, ",{:.6e}", f.relative_residual).unwrap();
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_enumerates_in_odometer_order() {
        let g = grid_points(2, 3, 0.0, 1.0).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(g[1], vec![0.5, 0.0]);
        assert_eq!(g[8], vec![1.0, 1.0]);
        assert!(grid_points(8, 10, 0.0, 1.0).is_err());
        assert!(grid_points(1, 1, 0.0, 1.0).is_err());
    }

    #[test]
    fn one_dimensional_grid_is_within_a_step() {
        let target = 0.913;
        let (v, p) = grid_minimum(1, 11, 0.75, 1.25, |w| Ok((w[0] - target).powi(2))).unwrap();
        assert!((p[0] - target).abs() <= 0.05);
        assert!(v <= 0.05f64.powi(2));
    }

    #[test]
    fn quadratic_surface_fits_exactly() {
        let f = |w: &[f64]| Ok(1.0 + 0.5 * (3.0 * w[0] * w[0] + 2.0 * w[0] * w[1] + w[1] * w[1]));
        let fit = fit_quadratic(f, &[0.0, 0.0], 0.25, 40, 1).unwrap();
        assert!(fit.relative_residual < 1e-10, "{fit:?}");
        assert!(fit.gradient_norm < 1e-10);
        assert!(fit.min_eigenvalue > 0.0);
        assert!(!fit.rank_deficient);
    }

    #[test]
    fn too_few_points_are_flagged() {
        let f = |w: &[f64]| Ok(w[0] * w[0] + w[1]);
        let fit = fit_quadratic(f, &[0.0, 0.0], 0.1, 3, 2).unwrap();
        assert!(fit.rank_deficient);
    }

    #[test]
    fn shipped_instances_respect_size_limits() {
        for inst in TinyInstance::shipped() {
            assert!(inst.mask_dof() <= 8);
            let s = inst.inputs.shape();
            assert!(s.n <= 8 && s.h <= 4 && s.w <= 4);
            for fam in [MaskFamily::Gated, MaskFamily::Hidden] {
                let n = scalar_count(&init_params(Some(fam), 0));
                assert!(n <= 64, "{n}");
            }
            assert!(inst.teacher_masks.iter().all(|&w| inst.range.contains(w)));
        }
    }
}
