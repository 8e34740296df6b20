//! Soft-mask generation and pixel-wise path selection.
//!
//! A mask has one channel per alternative path. Channel `i` is broadcast
//! over the feature channels of path `i` and the weighted paths are summed.
//! Masks come from a small module fed by the layer's input features and,
//! optionally, a hidden feature map from an independent branch:
//!
//! ```text
//! W = clip(2 * softmax_c(mask_conv(concat(reduce_conv(F), H))), alpha, beta)
//! ```
//!
//! With `cut_gradients` set, `F` enters `reduce_conv` through a detach node,
//! so the layer's features receive gradient only through the multiplication
//! `F * W`, never through `dW/dF`. `H` always keeps its gradient.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::ConvParams;
use crate::tensor::Tensor4;

/// Default mask bounds.
pub const DEFAULT_RANGE: MaskRange = MaskRange { alpha: 0.75, beta: 1.25 };
/// Bounds at the first layer of a stage, which has an extra cross-stage path.
pub const STAGE_ENTRY_RANGE: MaskRange = MaskRange { alpha: 0.5, beta: 1.5 };

/// Closed interval `[alpha, beta]` a soft mask is clipped to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskRange {
    pub alpha: f64,
    pub beta: f64,
}

impl MaskRange {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha < beta) {
            return Err(Error::Contract(format!("mask range needs alpha < beta, got ({alpha}, {beta})")));
        }
        Ok(Self { alpha, beta })
    }

    /// Mean distance of a mask value from the centre of the range when
    /// spread uniformly over it, `(beta - alpha) / 2`.
    pub fn half_width(&self) -> f64 {
        (self.beta - self.alpha) / 2.0
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.alpha && v <= self.beta
    }
}

/// A mask tensor with its declared bounds.
#[derive(Clone, Copy, Debug)]
pub struct SoftMask {
    pub values: Var,
    pub range: MaskRange,
}

/// Parameter values of one mask-generating module.
#[derive(Clone, Debug)]
pub struct HpParams {
    pub reduce_conv: ConvParams,
    pub mask_conv: ConvParams,
    pub range: MaskRange,
    pub cut_gradients: bool,
}

/// A convolution whose weight and bias live on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundConv {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

impl BoundConv {
    pub fn bind(tape: &mut Tape, params: &ConvParams, trainable: bool) -> Self {
        Self {
            weight: tape.leaf(params.weight.clone(), trainable),
            bias: tape.leaf(params.bias.clone(), trainable),
            stride: params.stride,
            padding: params.padding,
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.conv2d(x, self.weight, self.bias, self.stride, self.padding)
    }
}

/// [`HpParams`] registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct HpModule {
    pub reduce_conv: BoundConv,
    pub mask_conv: BoundConv,
    pub range: MaskRange,
    pub cut_gradients: bool,
}

impl HpParams {
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> HpModule {
        HpModule {
            reduce_conv: BoundConv::bind(tape, &self.reduce_conv, trainable),
            mask_conv: BoundConv::bind(tape, &self.mask_conv, trainable),
            range: self.range,
            cut_gradients: self.cut_gradients,
        }
    }
}

/// `clip(2 * softmax_c(logits), alpha, beta)`.
pub fn normalize_mask(tape: &mut Tape, logits: Var, range: MaskRange) -> Result<Var> {
    MaskRange::new(range.alpha, range.beta)?;
    if tape.shape(logits).c < 2 {
        return Err(Error::Contract(format!(
            "normalize_mask needs at least 2 path channels, got {}",
            tape.shape(logits).c
        )));
    }
    let probs = tape.softmax_channels(logits);
    let doubled = tape.scale(probs, 2.0);
    tape.clip(doubled, range.alpha, range.beta)
}

/// Builds the soft mask for one layer from its input features `f` and the
/// hidden map `hidden`. `None` for `hidden` drops the concatenation and
/// feeds the reduced features alone to the mask convolution.
pub fn make_mask(tape: &mut Tape, f: Var, hidden: Option<Var>, module: &HpModule) -> Result<SoftMask> {
    let source = if module.cut_gradients { tape.detach(f) } else { f };
    let reduced = module.reduce_conv.apply(tape, source)?;
    let joined = match hidden {
        Some(h) => tape.concat_channels(reduced, h)?,
        None => reduced,
    };
    let logits = module.mask_conv.apply(tape, joined)?;
    let values = normalize_mask(tape, logits, module.range)?;
    Ok(SoftMask {
        values,
        range: module.range,
    })
}

/// `sum_i paths[i] * mask[:, i]`, each mask channel broadcast over the
/// channels of its path.
pub fn select_paths(tape: &mut Tape, paths: &[Var], mask: &SoftMask) -> Result<Var> {
    let ms = tape.shape(mask.values);
    if paths.is_empty() || ms.c != paths.len() {
        return Err(Error::Contract(format!(
            "select_paths: {} paths but mask has {} channels",
            paths.len(),
            ms.c
        )));
    }
    let mut acc: Option<Var> = None;
    for (i, &p) in paths.iter().enumerate() {
        let ps = tape.shape(p);
        if ps.with_c(1) != ms.with_c(1) {
            return Err(Error::shape("select_paths", ps, ms));
        }
        let slice = tape.slice_channels(mask.values, i, 1)?;
        let weighted = tape.mul_channel_broadcast(p, slice)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, weighted)?,
            None => weighted,
        });
    }
    Ok(acc.expect("at least one path"))
}

/// A mask of ones: selecting with it is a plain sum of the paths.
pub fn unit_mask(tape: &mut Tape, like: Var, paths: usize) -> SoftMask {
    let shape = tape.shape(like).with_c(paths);
    SoftMask {
        values: tape.constant(Tensor4::ones(shape)),
        range: MaskRange { alpha: 1.0, beta: 1.0 },
    }
}

/// Per-image, per-path mask: spatial mean of `mask` broadcast back over
/// the pixels.
pub fn share_over_pixels(tape: &mut Tape, mask: SoftMask) -> SoftMask {
    SoftMask {
        values: tape.spatial_mean(mask.values),
        range: mask.range,
    }
}
