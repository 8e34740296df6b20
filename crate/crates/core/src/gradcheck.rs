//! Central finite-difference checks of tape gradients.
//!
//! A case builds an output from some input tensors; the checked scalar is
//! `sum(output * R)` for a fixed random `R`, which exercises every output
//! coordinate with a different weight. For each checked input coordinate
//! the analytic gradient is compared against
//! `(L(x + eps) - L(x - eps)) / (2 eps)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Op, Tape, Var};
use crate::error::Result;
use crate::hp::{self, BoundConv, HpModule, MaskRange, SoftMask};
use crate::tensor::{Shape4, Tensor4};

pub const FD_EPS: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Coordinates whose analytic gradient is at or below this are skipped.
pub const GRAD_FLOOR: f64 = 1e-8;
/// Minimum distance of relu/clip inputs from their kinks; closer inputs
/// make the central difference straddle a corner.
pub const KINK_MARGIN: f64 = 1e-3;

type BuildFn = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync;

pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor4>,
    /// Which inputs are compared; unchecked inputs are still differentiable.
    pub checked: Vec<bool>,
    build: Box<BuildFn>,
}

impl GradCase {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor4>,
        build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        let checked = vec![true; inputs.len()];
        Self {
            name: name.into(),
            inputs,
            checked,
            build: Box::new(build),
        }
    }

    pub fn only(mut self, checked: &[bool]) -> Self {
        self.checked = checked.to_vec();
        self
    }

    fn output(&self, inputs: &[Tensor4]) -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = (self.build)(&mut tape, &vars)?;
        Ok((tape, vars, out))
    }

    /// Number of checked coordinates with an analytic gradient above
    /// [`GRAD_FLOOR`].
    pub fn checkable(&self) -> Result<usize> {
        let (tape, vars, loss, _) = weighted_loss(self, &self.inputs, None)?;
        let grads = tape.backward(loss)?;
        Ok(vars
            .iter()
            .zip(&self.checked)
            .filter(|(_, &c)| c)
            .map(|(&v, _)| grads.wrt(v).data().iter().filter(|g| g.abs() > GRAD_FLOOR).count())
            .sum())
    }

    /// Smallest distance of any relu or clip input from a kink.
    pub fn kink_distance(&self) -> Result<f64> {
        let (tape, _, _) = self.output(&self.inputs)?;
        let mut min = f64::INFINITY;
        for node in tape.nodes() {
            let input = || tape.nodes()[node.parent_ids[0]].value.data().to_vec();
            match node.op {
                Op::Relu => input().iter().for_each(|v| min = min.min(v.abs())),
                Op::Clip { lo, hi } => input().iter().for_each(|v| min = min.min((v - lo).abs()).min((v - hi).abs())),
                _ => {}
            }
        }
        Ok(min)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub kink_distance: f64,
    pub passed: bool,
}

fn weights(seed: u64, shape: Shape4) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    Tensor4::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

fn weighted_loss(case: &GradCase, inputs: &[Tensor4], r: Option<&Tensor4>) -> Result<(Tape, Vec<Var>, Var, Tensor4)> {
    let (mut tape, vars, out) = case.output(inputs)?;
    let r = match r {
        Some(r) => r.clone(),
        None => weights(case.name.len() as u64, tape.shape(out)),
    };
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out, rv)?;
    let loss = tape.sum(prod);
    Ok((tape, vars, loss, r))
}

pub fn run_case(case: &GradCase) -> Result<CaseReport> {
    let (tape, vars, loss, r) = weighted_loss(case, &case.inputs, None)?;
    let grads = tape.backward(loss)?;
    let eval = |inputs: &[Tensor4]| -> Result<f64> {
        let (t, _, l, _) = weighted_loss(case, inputs, Some(&r))?;
        Ok(t.value(l).item())
    };
    let mut max_err: f64 = 0.0;
    let mut checked = 0;
    let mut inputs = case.inputs.clone();
    for (k, &var) in vars.iter().enumerate() {
        if !case.checked[k] {
            continue;
        }
        let analytic = grads.wrt(var);
        for i in 0..inputs[k].numel() {
            let a = analytic.data()[i];
            if a.abs() <= GRAD_FLOOR {
                continue;
            }
            let x0 = inputs[k].data()[i];
            inputs[k].data_mut()[i] = x0 + FD_EPS;
            let up = eval(&inputs)?;
            inputs[k].data_mut()[i] = x0 - FD_EPS;
            let down = eval(&inputs)?;
            inputs[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * FD_EPS);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs());
            max_err = max_err.max(err);
            checked += 1;
        }
    }
    let kink_distance = case.kink_distance()?;
    Ok(CaseReport {
        name: case.name.clone(),
        max_rel_err: max_err,
        checked,
        kink_distance,
        passed: max_err < REL_TOL && checked > 0,
    })
}

fn random_shape(rng: &mut ChaCha8Rng, max: Shape4) -> Shape4 {
    Shape4::new(
        rng.gen_range(1..=max.n),
        rng.gen_range(1..=max.c),
        rng.gen_range(2..=max.h),
        rng.gen_range(2..=max.w),
    )
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape4, scale: f64) -> Tensor4 {
    Tensor4::from_fn(shape, |_, _, _, _| rng.gen_range(-scale..scale))
}

/// Uniform in `[-scale, scale]` but at least `margin` away from each point
/// in `avoid`.
fn random_away(rng: &mut ChaCha8Rng, shape: Shape4, scale: f64, avoid: &[f64], margin: f64) -> Tensor4 {
    Tensor4::from_fn(shape, |_, _, _, _| loop {
        let v = rng.gen_range(-scale..scale);
        if avoid.iter().all(|a| (v - a).abs() >= margin) {
            break v;
        }
    })
}

/// Largest shape the suite draws from.
pub const MAX_SHAPE: Shape4 = Shape4 { n: 2, c: 4, h: 8, w: 8 };

fn bound(vars: &[Var], w: usize, stride: usize, padding: usize) -> BoundConv {
    BoundConv {
        weight: vars[w],
        bias: vars[w + 1],
        stride,
        padding,
    }
}

/// Composed mask module over inputs `[f, h, reduce_w, reduce_b, mask_w, mask_b]`.
pub fn hp_module_case(rng: &mut ChaCha8Rng, cut: bool, name: &str) -> GradCase {
    let s = random_shape(rng, MAX_SHAPE);
    let (reduce, hidden) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let paths = rng.gen_range(2..=3);
    let range = if paths == 3 { hp::STAGE_ENTRY_RANGE } else { hp::DEFAULT_RANGE };
    let inputs = vec![
        random_tensor(rng, s, 1.0),
        random_tensor(rng, s.with_c(hidden), 1.0),
        random_tensor(rng, Shape4::new(reduce, s.c, 3, 3), 0.5),
        random_tensor(rng, Shape4::new(1, reduce, 1, 1), 0.1),
        random_tensor(rng, Shape4::new(paths, reduce + hidden, 3, 3), 0.5),
        random_tensor(rng, Shape4::new(1, paths, 1, 1), 0.1),
    ];
    let case = GradCase::new(format!("{name} {s}"), inputs, move |t, v| {
        let module = HpModule {
            reduce_conv: bound(v, 2, 1, 1),
            mask_conv: bound(v, 4, 1, 1),
            range,
            cut_gradients: cut,
        };
        Ok(hp::make_mask(t, v[0], Some(v[1]), &module)?.values)
    });
    // With the cut, the mask does not depend on f through the tape.
    if cut {
        case.only(&[false, true, true, true, true, true])
    } else {
        case
    }
}

/// The primitive and composed cases, with random shapes up to
/// [`MAX_SHAPE`]. Cases whose inputs land within [`KINK_MARGIN`] of a relu
/// or clip corner, or that have no coordinate to check, are redrawn.
pub fn standard_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let makers: Vec<(&str, fn(&mut ChaCha8Rng) -> GradCase)> = vec![
        ("add", |r| {
            let s = random_shape(r, MAX_SHAPE);
            GradCase::new("add", vec![random_tensor(r, s, 1.0), random_tensor(r, s, 1.0)], |t, v| t.add(v[0], v[1]))
        }),
        ("sub", |r| {
            let s = random_shape(r, MAX_SHAPE);
            GradCase::new("sub", vec![random_tensor(r, s, 1.0), random_tensor(r, s, 1.0)], |t, v| t.sub(v[0], v[1]))
        }),
        ("mul", |r| {
            let s = random_shape(r, MAX_SHAPE);
            GradCase::new("mul", vec![random_tensor(r, s, 1.0), random_tensor(r, s, 1.0)], |t, v| t.mul(v[0], v[1]))
        }),
        ("scale", |r| {
            let s = random_shape(r, MAX_SHAPE);
            let k = r.gen_range(-3.0..3.0);
            GradCase::new("scale", vec![random_tensor(r, s, 1.0)], move |t, v| Ok(t.scale(v[0], k)))
        }),
        ("square", |r| {
            let s = random_shape(r, MAX_SHAPE);
            GradCase::new("square", vec![random_tensor(r, s, 1.0)], |t, v| Ok(t.square(v[0])))
        }),
        ("relu", |r| {
            let s = random_shape(r, MAX_SHAPE);
            GradCase::new("relu", vec![random_away(r, s, 1.0, &[0.0], 0.01)], |t, v| Ok(t.relu(v[0])))
        }),
        ("clip", |r| {
            let s = random_shape(r, MAX_SHAPE);
            GradCase::new("clip", vec![random_away(r, s, 2.0, &[-0.5, 0.7], 0.01)], |t, v| t.clip(v[0], -0.5, 0.7))
        }),
        ("sum", |r| {
            let s = random_shape(r, MAX_SHAPE);
            GradCase::new("sum", vec![random_tensor(r, s, 1.0)], |t, v| Ok(t.sum(v[0])))
        }),
        ("mean", |r| {
            let s = random_shape(r, MAX_SHAPE);
            GradCase::new("mean", vec![random_tensor(r, s, 1.0)], |t, v| Ok(t.mean(v[0])))
        }),
        ("softmax_channels", |r| {
            let s = random_shape(r, MAX_SHAPE);
            let s = s.with_c(s.c.max(2));
            GradCase::new("softmax_channels", vec![random_tensor(r, s, 2.0)], |t, v| Ok(t.softmax_channels(v[0])))
        }),
        ("concat_channels", |r| {
            let s = random_shape(r, MAX_SHAPE);
            let c2 = r.gen_range(1..=4);
            GradCase::new(
                "concat_channels",
                vec![random_tensor(r, s, 1.0), random_tensor(r, s.with_c(c2), 1.0)],
                |t, v| t.concat_channels(v[0], v[1]),
            )
        }),
        ("slice_channels", |r| {
            let s = random_shape(r, MAX_SHAPE.with_c(4)).with_c(4);
            let start = r.gen_range(0..3);
            GradCase::new("slice_channels", vec![random_tensor(r, s, 1.0)], move |t, v| t.slice_channels(v[0], start, 2))
        }),
        ("conv2d", |r| {
            let s = random_shape(r, MAX_SHAPE);
            let out = r.gen_range(1..=4);
            let k = [1, 3][r.gen_range(0..2)];
            let stride = r.gen_range(1..=2);
            let pad = if k == 3 { r.gen_range(0..=1) } else { 0 };
            let s = Shape4::new(s.n, s.c, s.h.max(3), s.w.max(3));
            GradCase::new(
                format!("conv2d k{k} s{stride} p{pad}"),
                vec![
                    random_tensor(r, s, 1.0),
                    random_tensor(r, Shape4::new(out, s.c, k, k), 0.5),
                    random_tensor(r, Shape4::new(1, out, 1, 1), 0.5),
                ],
                move |t, v| t.conv2d(v[0], v[1], v[2], stride, pad),
            )
        }),
        ("resize_nearest", |r| {
            let s = random_shape(r, MAX_SHAPE);
            let (h, w) = (r.gen_range(1..=9), r.gen_range(1..=9));
            GradCase::new("resize_nearest", vec![random_tensor(r, s, 1.0)], move |t, v| t.resize_nearest(v[0], h, w))
        }),
        ("avgpool_stride2", |r| {
            let s = random_shape(r, MAX_SHAPE);
            GradCase::new("avgpool_stride2", vec![random_tensor(r, s, 1.0)], |t, v| t.avgpool_stride2(v[0]))
        }),
        ("mul_channel_broadcast", |r| {
            let s = random_shape(r, MAX_SHAPE);
            GradCase::new(
                "mul_channel_broadcast",
                vec![random_tensor(r, s, 1.0), random_tensor(r, s.with_c(1), 1.0)],
                |t, v| t.mul_channel_broadcast(v[0], v[1]),
            )
        }),
        ("spatial_mean", |r| {
            let s = random_shape(r, MAX_SHAPE);
            GradCase::new("spatial_mean", vec![random_tensor(r, s, 1.0)], |t, v| Ok(t.spatial_mean(v[0])))
        }),
        ("cross_entropy", |r| {
            let s = random_shape(r, MAX_SHAPE);
            let s = s.with_c(s.c.max(2));
            let labels: Vec<u8> = (0..s.n * s.plane())
                .map(|_| if r.gen_bool(0.15) { 255 } else { r.gen_range(0..s.c) as u8 })
                .collect();
            GradCase::new("cross_entropy", vec![random_tensor(r, s, 2.0)], move |t, v| {
                t.cross_entropy(v[0], &labels, 255)
            })
        }),
        ("normalize_mask", |r| {
            let s = random_shape(r, MAX_SHAPE);
            let s = s.with_c(s.c.clamp(2, 3));
            GradCase::new("normalize_mask", vec![random_tensor(r, s, 0.6)], |t, v| {
                hp::normalize_mask(t, v[0], hp::DEFAULT_RANGE)
            })
        }),
        ("select_paths", |r| {
            let s = random_shape(r, MAX_SHAPE);
            let k = r.gen_range(2..=3);
            let mut inputs: Vec<Tensor4> = (0..k).map(|_| random_tensor(r, s, 1.0)).collect();
            inputs.push(random_tensor(r, s.with_c(k), 1.0).map(|v| 1.0 + 0.25 * v));
            GradCase::new("select_paths", inputs, move |t, v| {
                let mask = SoftMask {
                    values: v[k],
                    range: MaskRange { alpha: 0.75, beta: 1.25 },
                };
                hp::select_paths(t, &v[..k], &mask)
            })
        }),
        ("hp_module", |r| hp_module_case(r, false, "hp_module")),
        ("hp_module cut", |r| hp_module_case(r, true, "hp_module cut")),
        ("composed", composed_case),
    ];
    for (_, make) in makers {
        let mut attempts = 0;
        loop {
            let case = make(&mut rng);
            attempts += 1;
            let usable = case.kink_distance()? >= KINK_MARGIN && case.checkable()? > 0;
            if usable || attempts >= 50 {
                out.push(case);
                break;
            }
        }
    }
    Ok(out)
}

/// A random chain of up to six shape-preserving primitives applied to a
/// mix of two inputs. Inputs are bounded away from zero, softmax is never
/// applied twice in a row and at most one square appears: otherwise the
/// chain can be so flat that its gradients fall below what a central
/// difference resolves in f64.
fn composed_case(r: &mut ChaCha8Rng) -> GradCase {
    let s = random_shape(r, MAX_SHAPE);
    let s = s.with_c(s.c.max(2));
    let depth = r.gen_range(2..=6);
    let mut ops: Vec<u8> = Vec::with_capacity(depth);
    while ops.len() < depth {
        let op = r.gen_range(0..6);
        let repeated_softmax = op == 1 && ops.last() == Some(&1);
        let second_square = op == 2 && ops.contains(&2);
        if !repeated_softmax && !second_square {
            ops.push(op);
        }
    }
    let name = format!("composed depth {depth} {ops:?}");
    let inputs = vec![random_away(r, s, 1.5, &[0.0], 0.5), random_away(r, s, 1.5, &[0.0], 0.5)];
    GradCase::new(name, inputs, move |t, v| {
        let mut x = t.mul(v[0], v[1])?;
        for &op in &ops {
            x = match op {
                0 => t.relu(x),
                1 => t.softmax_channels(x),
                2 => {
                    let y = t.square(x);
                    t.scale(y, 0.5)
                }
                3 => t.add(x, v[1])?,
                4 => {
                    let m = t.spatial_mean(x);
                    t.sub(x, m)?
                }
                _ => t.clip(x, -0.4, 0.4)?,
            };
        }
        Ok(x)
    })
}

pub fn run_suite(seed: u64) -> Result<Vec<CaseReport>> {
    standard_suite(seed)?.iter().map(run_case).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catches_a_wrong_gradient() {
        // A "square" whose backward is silently scaled: value x^2 built as
        // x * detach(x) has gradient x instead of 2x.
        let case = GradCase::new("broken", vec![Tensor4::full((1, 1, 2, 2), 0.7)], |t, v| {
            let d = t.detach(v[0]);
            t.mul(v[0], d)
        });
        let r = run_case(&case).unwrap();
        assert!(!r.passed);
        assert!((r.max_rel_err - 0.5).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn square_passes() {
        let case = GradCase::new("sq", vec![Tensor4::from_fn((1, 2, 2, 2), |_, c, h, w| c as f64 - 0.3 * (h + w) as f64 + 0.1)], |t, v| {
            Ok(t.square(v[0]))
        });
        let r = run_case(&case).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.checked, 8);
    }
}
