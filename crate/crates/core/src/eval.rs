//! Confusion matrices, mean IoU, analytic FLOPs, and mask renders.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Branch, LayerInfo, NetworkSpec, Variant};
use crate::nn::IGNORE_LABEL;
use crate::tensor::Tensor4;

/// `q[i][j]` counts pixels of true class `i` predicted as class `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    q: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            n: num_classes,
            q: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.q[truth * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.q.iter().sum()
    }

    /// Counts every pixel whose label is not the ignore label.
    pub fn accumulate(&mut self, pred: &[u8], label: &[u8]) -> Result<()> {
        if pred.len() != label.len() {
            return Err(Error::Data(format!(
                "prediction has {} pixels but label has {}",
                pred.len(),
                label.len()
            )));
        }
        for (&p, &t) in pred.iter().zip(label) {
            if t == IGNORE_LABEL {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= self.n || t >= self.n {
                return Err(Error::Data(format!(
                    "class id {} out of range for {} classes",
                    p.max(t),
                    self.n
                )));
            }
            self.q[t * self.n + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::Contract(format!(
                "cannot merge {}-class and {}-class matrices",
                self.n, other.n
            )));
        }
        for (a, b) in self.q.iter_mut().zip(&other.q) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU (`None` where the class never occurs in truth or
    /// prediction) and the mean over the present classes.
    pub fn miou(&self) -> MiouReport {
        let n = self.n;
        let per_class: Vec<Option<f64>> = (0..n)
            .map(|i| {
                let row: u64 = (0..n).map(|j| self.get(i, j)).sum();
                let col: u64 = (0..n).map(|j| self.get(j, i)).sum();
                let inter = self.get(i, i);
                let union = row + col - inter;
                (union > 0).then(|| inter as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        MiouReport { per_class, mean }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl MiouReport {
    /// `class,name,iou` rows in class-id order; absent classes get an empty
    /// IoU field. A final row carries the mean.
    pub fn to_csv(&self, names: &[&str]) -> String {
        let mut s = String::from("class,name,iou\n");
        for (i, v) in self.per_class.iter().enumerate() {
            let name = names.get(i).copied().unwrap_or("");
            match v {
                Some(v) => writeln!(s, "{i},{name},{v:.6}").unwrap(),
                None => writeln!(s, "{i},{name},").unwrap(),
            }
        }
        writeln!(s, "mean,,{:.6}", self.mean).unwrap();
        s
    }
}

/// FLOPs per sample, split by component. The head is kept apart from the
/// main branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopReport {
    pub main: u64,
    pub mini: u64,
    pub hp_modules: u64,
    pub head: u64,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.main + self.mini + self.hp_modules + self.head
    }

    /// Extra cost over `baseline`, relative to the baseline total.
    pub fn overhead_ratio(&self, baseline: &FlopReport) -> f64 {
        (self.total() as f64 - baseline.total() as f64) / baseline.total() as f64
    }
}

/// `2 * out * in * kh * kw * oh * ow`.
pub fn conv_flops(out_ch: usize, in_ch: usize, k: usize, oh: usize, ow: usize) -> u64 {
    2 * (out_ch * in_ch * k * k * oh * ow) as u64
}

fn plane(c: usize, h: usize, w: usize) -> u64 {
    (c * h * w) as u64
}

/// Pooling and resampling cost of aligning a `(c, h, w)` map to `(th, tw)`.
fn align_flops(c: usize, mut h: usize, mut w: usize, th: usize, tw: usize) -> u64 {
    let mut f = 0;
    while h >= 2 * th && w >= 2 * tw {
        f += plane(c, h, w);
        h /= 2;
        w /= 2;
    }
    if (h, w) != (th, tw) {
        f += plane(c, th, tw);
    }
    f
}

/// Cost of one residual layer without mask application: convolutions,
/// projections, path sums and the output activation.
fn layer_flops(l: &LayerInfo) -> u64 {
    let (c, h, w) = (l.out_channels, l.h, l.w);
    let mut f = 0;
    if l.pooled {
        f += plane(l.in_channels, 2 * h, 2 * w);
    }
    f += conv_flops(c, l.in_channels, 3, h, w) + plane(c, h, w) + conv_flops(c, c, 3, h, w);
    if l.in_channels != c {
        f += conv_flops(c, l.in_channels, 1, h, w);
    }
    if l.entry {
        f += align_flops(l.extra_channels, l.extra_h, l.extra_w, h, w);
        if l.extra_channels != c {
            f += conv_flops(c, l.extra_channels, 1, h, w);
        }
    }
    f + (l.paths as u64 - 1) * plane(c, h, w) + plane(c, h, w)
}

/// Analytic per-sample FLOPs of `spec` on an `h x w` input.
pub fn count_flops(spec: &NetworkSpec, h: usize, w: usize) -> Result<FlopReport> {
    spec.validate()?;
    let mut r = FlopReport::default();
    let (sh, sw) = spec.stem_size(h, w)?;
    let stem = |c: usize| conv_flops(c, spec.in_channels, 3, sh, sw) + plane(c, sh, sw);

    let main_layers = spec.layers(Branch::Main, h, w)?;
    r.main = stem(spec.stages[0].channels) + main_layers.iter().map(layer_flops).sum::<u64>();

    let variant = spec.variant;
    if variant.needs_mini_branch() {
        let mini_layers = spec.layers(Branch::Mini, h, w)?;
        r.mini = stem(spec.mini_channels) + mini_layers.iter().map(layer_flops).sum::<u64>();
    }

    if variant.has_mask_module() {
        let m = spec.mini_channels;
        let hidden_in = if variant.mask_reads_hidden() { m } else { 0 };
        let mini_layers = spec.layers(Branch::Mini, h, w)?;
        for l in main_layers.iter().filter(|l| spec.hps_layers.contains(&l.index)) {
            let (p, lh, lw) = (l.paths, l.h, l.w);
            let mut f = conv_flops(spec.hp_channels, l.in_channels, 3, lh, lw)
                + conv_flops(p, spec.hp_channels + hidden_in, 3, lh, lw)
                // softmax, doubling, clipping
                + 3 * plane(p, lh, lw)
                // one product per path element
                + plane(p * l.out_channels, lh, lw);
            if variant.needs_mini_branch() {
                let src = spec.hidden_source(l.index).expect("validated");
                let hl = &mini_layers[src];
                f += align_flops(m, hl.h, hl.w, lh, lw);
            }
            if variant == Variant::HpsPs {
                f += plane(p, lh, lw);
            }
            r.hp_modules += f;
        }
    }

    let last = main_layers.last().expect("validated");
    r.head = conv_flops(spec.num_classes, last.out_channels, 3, last.h, last.w) + plane(spec.num_classes, h, w);
    Ok(r)
}

/// Linear map of a mask value from `[alpha, beta]` to `0..=255`.
pub fn mask_to_gray(v: f64, alpha: f64, beta: f64) -> u8 {
    let t = ((v - alpha) / (beta - alpha)).clamp(0.0, 1.0);
    (t * 255.0).round() as u8
}

/// Grayscale render of channel 0 of sample 0 of a mask, row-major.
pub fn render_mask(mask: &Tensor4, alpha: f64, beta: f64) -> (usize, usize, Vec<u8>) {
    let s = mask.shape();
    let pixels = mask.plane(0, 0).iter().map(|&v| mask_to_gray(v, alpha, beta)).collect();
    (s.w, s.h, pixels)
}

/// Writes one PGM per mask, named `stage{s}.pgm`.
pub fn render_masks(masks: &[(usize, Tensor4, f64, f64)], dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for (stage, mask, alpha, beta) in masks {
        let (w, h, px) = render_mask(mask, *alpha, *beta);
        let path = dir.join(format!("stage{stage}.pgm"));
        crate::data::write_pgm(&path, w, h, &px)?;
        out.push(path);
    }
    Ok(out)
}
