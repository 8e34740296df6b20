//! Neural primitives recorded on a [`Tape`], each with its backward rule.

use std::sync::Arc;

use crate::autodiff::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// Label value excluded from the loss and from every metric.
pub const IGNORE_LABEL: u8 = 255;

/// Weights and geometry of a 2-D convolution.
///
/// `weight` is laid out `(out_ch, in_ch, kh, kw)`; `bias` is `(1, out_ch, 1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor4,
    pub bias: Tensor4,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape().h, self.weight.shape().w)
    }
}

/// Spatial size after a convolution: `floor((size + 2 pad - k) / stride) + 1`.
pub fn conv_out_dim(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl Tape {
    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        self.record(Op::Relu, &[x], v)
    }

    /// Elementwise clamp to `[lo, hi]`. The gradient is 1 strictly inside
    /// the interval and 0 elsewhere, including at the bounds.
    pub fn clip(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo < hi) {
            return Err(Error::Contract(format!("clip needs lo < hi, got [{lo}, {hi}]")));
        }
        let v = self.value(x).map(|a| a.clamp(lo, hi));
        Ok(self.record(Op::Clip { lo, hi }, &[x], v))
    }

    /// Per-pixel softmax across channels.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let v = kernels::softmax_channels(self.value(x));
        self.record(Op::SoftmaxChannels, &[x], v)
    }

    /// Stacks `b`'s channels after `a`'s.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return Err(Error::shape("concat_channels", sa, sb));
        }
        let mut out = Tensor4::zeros(sa.with_c(sa.c + sb.c));
        for n in 0..sa.n {
            for c in 0..sa.c {
                out.plane_mut(n, c).copy_from_slice(self.value(a).plane(n, c));
            }
            for c in 0..sb.c {
                out.plane_mut(n, sa.c + c).copy_from_slice(self.value(b).plane(n, c));
            }
        }
        Ok(self.record(Op::Concat, &[a, b], out))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice_channels(start, len)?;
        Ok(self.record(Op::SliceChannels { start }, &[x], v))
    }

    /// Cross-correlation with zero padding. `w` is `(out, in, kh, kw)` and
    /// `b` is `(1, out, 1, 1)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sw.c != sx.c {
            return Err(Error::shape("conv2d", sx, sw));
        }
        if sb != Shape4::new(1, sw.n, 1, 1) {
            return Err(Error::shape("conv2d bias", sw, sb));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        let out = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b), stride, padding)?;
        Ok(self.record(Op::Conv2d { stride, padding }, &[x, w, b], out))
    }

    /// Nearest-neighbour resampling: output `(i, j)` reads input
    /// `(floor(i h / h'), floor(j w / w'))`.
    pub fn resize_nearest(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        if h == 0 || w == 0 {
            return Err(Error::Contract(format!("resize_nearest target {h}x{w} is empty")));
        }
        if self.shape(x).h == h && self.shape(x).w == w {
            return Ok(x);
        }
        let v = kernels::resize_nearest(self.value(x), h, w);
        Ok(self.record(Op::ResizeNearest, &[x], v))
    }

    /// Mean over non-overlapping 2x2 blocks; a trailing odd row or column is dropped.
    pub fn avgpool_stride2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.h < 2 || s.w < 2 {
            return Err(Error::Contract(format!("avgpool_stride2 needs at least 2x2 input, got {s}")));
        }
        let v = kernels::avgpool2(self.value(x));
        Ok(self.record(Op::AvgPool2, &[x], v))
    }

    /// `x * m` where the single channel of `m` is broadcast over all of `x`'s channels.
    pub fn mul_channel_broadcast(&mut self, x: Var, m: Var) -> Result<Var> {
        let (sx, sm) = (self.shape(x), self.shape(m));
        if sm != sx.with_c(1) {
            return Err(Error::shape("mul_channel_broadcast", sx, sm));
        }
        let v = kernels::mul_channel_broadcast(self.value(x), self.value(m));
        Ok(self.record(Op::MulChannelBroadcast, &[x, m], v))
    }

    /// Replaces every channel plane by its mean, keeping the shape.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let v = kernels::spatial_mean(self.value(x));
        self.record(Op::SpatialMean, &[x], v)
    }

    /// Mean of `-log softmax(logits)[label]` over pixels whose label is not
    /// `ignore`. `labels` holds `n * h * w` class ids in `(n, h, w)` order.
    /// With every pixel ignored the loss is 0 and so is its gradient.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8], ignore: u8) -> Result<Var> {
        self.cross_entropy_with_denominator(logits, labels, ignore, None)
    }

    /// As [`Tape::cross_entropy`] but dividing the summed loss by `denominator`
    /// instead of this tensor's own valid-pixel count. Lets per-sample tapes
    /// add up to the loss of a whole batch.
    pub fn cross_entropy_with_denominator(
        &mut self,
        logits: Var,
        labels: &[u8],
        ignore: u8,
        denominator: Option<f64>,
    ) -> Result<Var> {
        let saved = kernels::cross_entropy_forward(self.value(logits), labels, ignore, denominator)?;
        let loss = Tensor4::scalar(saved.loss);
        Ok(self.record(Op::CrossEntropy(Arc::new(saved)), &[logits], loss))
    }
}

/// Numeric forward and backward routines behind the tape operations.
pub mod kernels {
    use super::*;

    pub fn softmax_channels(x: &Tensor4) -> Tensor4 {
        let s = x.shape();
        let p = s.plane();
        let mut out = Tensor4::zeros(s);
        let xd = x.data();
        let od = out.data_mut();
        for n in 0..s.n {
            let base = n * s.c * p;
            for px in 0..p {
                let mut m = f64::NEG_INFINITY;
                for c in 0..s.c {
                    m = m.max(xd[base + c * p + px]);
                }
                let mut z = 0.0;
                for c in 0..s.c {
                    let e = (xd[base + c * p + px] - m).exp();
                    od[base + c * p + px] = e;
                    z += e;
                }
                for c in 0..s.c {
                    od[base + c * p + px] /= z;
                }
            }
        }
        out
    }

    /// `dx_c = y_c (g_c - sum_k g_k y_k)` per pixel.
    pub fn softmax_channels_backward(g: &Tensor4, y: &Tensor4) -> Tensor4 {
        let s = y.shape();
        let p = s.plane();
        let mut dx = Tensor4::zeros(s);
        let (gd, yd) = (g.data(), y.data());
        let dd = dx.data_mut();
        for n in 0..s.n {
            let base = n * s.c * p;
            for px in 0..p {
                let mut dot = 0.0;
                for c in 0..s.c {
                    let i = base + c * p + px;
                    dot += gd[i] * yd[i];
                }
                for c in 0..s.c {
                    let i = base + c * p + px;
                    dd[i] = yd[i] * (gd[i] - dot);
                }
            }
        }
        dx
    }

    pub fn slice_channels_backward(g: &Tensor4, input: Shape4, start: usize) -> Tensor4 {
        let mut dx = Tensor4::zeros(input);
        for n in 0..input.n {
            for c in 0..g.shape().c {
                dx.plane_mut(n, start + c).copy_from_slice(g.plane(n, c));
            }
        }
        dx
    }

    /// Unfolds one sample into a `(in_ch * kh * kw, oh * ow)` matrix.
    fn im2col(
        x: &[f64],
        (c, h, w): (usize, usize, usize),
        (kh, kw): (usize, usize),
        (oh, ow): (usize, usize),
        stride: usize,
        pad: usize,
        cols: &mut [f64],
    ) {
        let p = oh * ow;
        for ci in 0..c {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = &mut cols[((ci * kh + ki) * kw + kj) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`]: scatters column gradients back onto the input.
    fn col2im(
        cols: &[f64],
        (c, h, w): (usize, usize, usize),
        (kh, kw): (usize, usize),
        (oh, ow): (usize, usize),
        stride: usize,
        pad: usize,
        dx: &mut [f64],
    ) {
        let p = oh * ow;
        for ci in 0..c {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = &cols[((ci * kh + ki) * kw + kj) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// `c = a * b` for row-major `a: m x k`, `b: k x n`, with transposition
    /// expressed through strides. `beta` scales the existing `c`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        (rsa, csa): (isize, isize),
        b: &[f64],
        (rsb, csb): (isize, isize),
        beta: f64,
        c: &mut [f64],
    ) {
        debug_assert!(c.len() >= m * n);
        // SAFETY: the strides describe views that stay inside `a`, `b` and `c`,
        // whose lengths are checked by the callers' shape arithmetic.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    pub fn conv2d_forward(x: &Tensor4, w: &Tensor4, b: &Tensor4, stride: usize, pad: usize) -> Result<Tensor4> {
        let sx = x.shape();
        let sw = w.shape();
        let (oh, ow) = match (conv_out_dim(sx.h, sw.h, stride, pad), conv_out_dim(sx.w, sw.w, stride, pad)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => return Err(Error::shape("conv2d", sx, sw)),
        };
        let out_shape = Shape4::new(sx.n, sw.n, oh, ow);
        let mut out = Tensor4::zeros(out_shape);
        let k = sw.c * sw.h * sw.w;
        let p = oh * ow;
        let mut cols = vec![0.0; k * p];
        let in_len = sx.c * sx.plane();
        let out_len = sw.n * p;
        for n in 0..sx.n {
            im2col(
                &x.data()[n * in_len..(n + 1) * in_len],
                (sx.c, sx.h, sx.w),
                (sw.h, sw.w),
                (oh, ow),
                stride,
                pad,
                &mut cols,
            );
            let dst = &mut out.data_mut()[n * out_len..(n + 1) * out_len];
            for (o, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(b.data()[o]);
            }
            gemm(sw.n, k, p, w.data(), (k as isize, 1), &cols, (p as isize, 1), 1.0, dst);
        }
        Ok(out)
    }

    /// Returns `(dx, dw, db)`; entries not flagged in `need` are `None`.
    pub fn conv2d_backward(
        g: &Tensor4,
        x: &Tensor4,
        w: &Tensor4,
        stride: usize,
        pad: usize,
        need: &[bool],
    ) -> (Option<Tensor4>, Option<Tensor4>, Option<Tensor4>) {
        let sx = x.shape();
        let sw = w.shape();
        let sg = g.shape();
        let (oh, ow) = (sg.h, sg.w);
        let k = sw.c * sw.h * sw.w;
        let p = oh * ow;
        let in_len = sx.c * sx.plane();
        let out_len = sw.n * p;

        let mut dx = need[0].then(|| Tensor4::zeros(sx));
        let mut dw = need[1].then(|| Tensor4::zeros(sw));
        let db = need[2].then(|| {
            let mut db = Tensor4::zeros(Shape4::new(1, sw.n, 1, 1));
            for n in 0..sg.n {
                for o in 0..sw.n {
                    db.data_mut()[o] += g.plane(n, o).iter().sum::<f64>();
                }
            }
            db
        });

        let mut cols = vec![0.0; k * p];
        for n in 0..sx.n {
            let gn = &g.data()[n * out_len..(n + 1) * out_len];
            if let Some(dw) = dw.as_mut() {
                im2col(
                    &x.data()[n * in_len..(n + 1) * in_len],
                    (sx.c, sx.h, sx.w),
                    (sw.h, sw.w),
                    (oh, ow),
                    stride,
                    pad,
                    &mut cols,
                );
                // dw (out x k) += g (out x p) * cols^T (p x k)
                gemm(sw.n, p, k, gn, (p as isize, 1), &cols, (1, p as isize), 1.0, dw.data_mut());
            }
            if let Some(dx) = dx.as_mut() {
                // dcols (k x p) = w^T (k x out) * g (out x p)
                gemm(k, sw.n, p, w.data(), (1, k as isize), gn, (p as isize, 1), 0.0, &mut cols);
                col2im(
                    &cols,
                    (sx.c, sx.h, sx.w),
                    (sw.h, sw.w),
                    (oh, ow),
                    stride,
                    pad,
                    &mut dx.data_mut()[n * in_len..(n + 1) * in_len],
                );
            }
        }
        (dx, dw, db)
    }

    fn nearest_index(i: usize, src: usize, dst: usize) -> usize {
        i * src / dst
    }

    pub fn resize_nearest(x: &Tensor4, h: usize, w: usize) -> Tensor4 {
        let s = x.shape();
        let mut out = Tensor4::zeros(s.with_hw(h, w));
        for n in 0..s.n {
            for c in 0..s.c {
                let src = x.plane(n, c);
                let dst = out.plane_mut(n, c);
                for i in 0..h {
                    let si = nearest_index(i, s.h, h);
                    for j in 0..w {
                        dst[i * w + j] = src[si * s.w + nearest_index(j, s.w, w)];
                    }
                }
            }
        }
        out
    }

    pub fn resize_nearest_backward(g: &Tensor4, input: Shape4) -> Tensor4 {
        let sg = g.shape();
        let mut dx = Tensor4::zeros(input);
        for n in 0..sg.n {
            for c in 0..sg.c {
                let src = g.plane(n, c);
                let dst = dx.plane_mut(n, c);
                for i in 0..sg.h {
                    let si = nearest_index(i, input.h, sg.h);
                    for j in 0..sg.w {
                        dst[si * input.w + nearest_index(j, input.w, sg.w)] += src[i * sg.w + j];
                    }
                }
            }
        }
        dx
    }

    pub fn avgpool2(x: &Tensor4) -> Tensor4 {
        let s = x.shape();
        let (oh, ow) = (s.h / 2, s.w / 2);
        let mut out = Tensor4::zeros(s.with_hw(oh, ow));
        for n in 0..s.n {
            for c in 0..s.c {
                let src = x.plane(n, c);
                let dst = out.plane_mut(n, c);
                for i in 0..oh {
                    for j in 0..ow {
                        let (r0, r1) = (2 * i * s.w, (2 * i + 1) * s.w);
                        dst[i * ow + j] =
                            0.25 * (src[r0 + 2 * j] + src[r0 + 2 * j + 1] + src[r1 + 2 * j] + src[r1 + 2 * j + 1]);
                    }
                }
            }
        }
        out
    }

    pub fn avgpool2_backward(g: &Tensor4, input: Shape4) -> Tensor4 {
        let sg = g.shape();
        let mut dx = Tensor4::zeros(input);
        for n in 0..sg.n {
            for c in 0..sg.c {
                let src = g.plane(n, c);
                let dst = dx.plane_mut(n, c);
                for i in 0..sg.h {
                    for j in 0..sg.w {
                        let v = 0.25 * src[i * sg.w + j];
                        let (r0, r1) = (2 * i * input.w, (2 * i + 1) * input.w);
                        dst[r0 + 2 * j] += v;
                        dst[r0 + 2 * j + 1] += v;
                        dst[r1 + 2 * j] += v;
                        dst[r1 + 2 * j + 1] += v;
                    }
                }
            }
        }
        dx
    }

    pub fn mul_channel_broadcast(x: &Tensor4, m: &Tensor4) -> Tensor4 {
        let s = x.shape();
        let mut out = Tensor4::zeros(s);
        for n in 0..s.n {
            let mp = m.plane(n, 0);
            for c in 0..s.c {
                for ((o, &a), &b) in out.plane_mut(n, c).iter_mut().zip(x.plane(n, c)).zip(mp) {
                    *o = a * b;
                }
            }
        }
        out
    }

    pub fn mul_channel_broadcast_backward(
        g: &Tensor4,
        x: &Tensor4,
        m: &Tensor4,
        need: &[bool],
    ) -> (Option<Tensor4>, Option<Tensor4>) {
        let dx = need[0].then(|| mul_channel_broadcast(g, m));
        let dm = need[1].then(|| {
            let s = x.shape();
            let mut dm = Tensor4::zeros(s.with_c(1));
            for n in 0..s.n {
                for c in 0..s.c {
                    let (gp, xp) = (g.plane(n, c), x.plane(n, c));
                    for ((d, &gi), &xi) in dm.plane_mut(n, 0).iter_mut().zip(gp).zip(xp) {
                        *d += gi * xi;
                    }
                }
            }
            dm
        });
        (dx, dm)
    }

    /// Each channel plane replaced by its mean. Self-adjoint, so it also
    /// serves as its own backward rule.
    pub fn spatial_mean(x: &Tensor4) -> Tensor4 {
        let s = x.shape();
        let mut out = Tensor4::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                let mean = x.plane(n, c).iter().sum::<f64>() / s.plane() as f64;
                out.plane_mut(n, c).fill(mean);
            }
        }
        out
    }

    #[derive(Debug)]
    pub struct CrossEntropySaved {
        pub loss: f64,
        pub probs: Tensor4,
        pub labels: Vec<u8>,
        pub ignore: u8,
        pub denominator: f64,
    }

    pub fn cross_entropy_forward(
        logits: &Tensor4,
        labels: &[u8],
        ignore: u8,
        denominator: Option<f64>,
    ) -> Result<CrossEntropySaved> {
        let s = logits.shape();
        let p = s.plane();
        if labels.len() != s.n * p {
            return Err(Error::Contract(format!(
                "cross_entropy: {} labels for logits of shape {s}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != ignore && l as usize >= s.c) {
            return Err(Error::Data(format!(
                "cross_entropy: label {bad} outside {} classes",
                s.c
            )));
        }
        let probs = softmax_channels(logits);
        let ld = logits.data();
        let mut total = 0.0;
        let mut valid = 0usize;
        for n in 0..s.n {
            let base = n * s.c * p;
            for px in 0..p {
                let label = labels[n * p + px];
                if label == ignore {
                    continue;
                }
                valid += 1;
                let mut m = f64::NEG_INFINITY;
                for c in 0..s.c {
                    m = m.max(ld[base + c * p + px]);
                }
                let z: f64 = (0..s.c).map(|c| (ld[base + c * p + px] - m).exp()).sum();
                total += m + z.ln() - ld[base + label as usize * p + px];
            }
        }
        let denominator = denominator.unwrap_or(valid as f64);
        let loss = if valid == 0 || denominator == 0.0 { 0.0 } else { total / denominator };
        Ok(CrossEntropySaved {
            loss,
            probs,
            labels: labels.to_vec(),
            ignore,
            denominator,
        })
    }

    pub fn cross_entropy_backward(g: f64, saved: &CrossEntropySaved) -> Tensor4 {
        let s = saved.probs.shape();
        let p = s.plane();
        let mut dx = Tensor4::zeros(s);
        if saved.denominator == 0.0 {
            return dx;
        }
        let scale = g / saved.denominator;
        let pd = saved.probs.data();
        let dd = dx.data_mut();
        for n in 0..s.n {
            let base = n * s.c * p;
            for px in 0..p {
                let label = saved.labels[n * p + px];
                if label == saved.ignore {
                    continue;
                }
                for c in 0..s.c {
                    let i = base + c * p + px;
                    let target = if c == label as usize { 1.0 } else { 0.0 };
                    dd[i] = scale * (pd[i] - target);
                }
            }
        }
        dx
    }
}
