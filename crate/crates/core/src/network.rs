//! Residual main branch, light mini branch, and the path-selection variants.
//!
//! Layers are the residual blocks, numbered from 0 across all stages. The
//! first block of a stage is its *entry*: it may halve the resolution and it
//! has a third alternative path carrying an earlier stage-final map (the
//! image for the first stage). Every block produces
//!
//! ```text
//! out = relu(sum_i path_i * mask_i)    paths = [residual, skip, extra?]
//! ```
//!
//! where the masks are all ones for layers outside the selection set and for
//! the baseline variant.
//!
//! The mini branch has the same topology with `mini_channels` everywhere and
//! no masks. Its stage-final maps are the hidden variables: layer `d` reads
//! the hidden map of the smallest hidden layer index `>= d`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::hp::{self, BoundConv, HpModule, HpParams, MaskRange, SoftMask};
use crate::nn::{conv_out_dim, ConvParams};
use crate::tensor::{Shape4, Tensor4};

/// How a network forms its soft masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// All masks fixed to one: a plain residual network.
    Baseline,
    /// Masks computed from the layer features alone, gradients intact.
    Gated,
    /// Masks from features and hidden maps, with the feature gradient cut.
    Hps,
    /// `Hps` masks averaged over pixels: one factor per image and path.
    HpsPs,
    /// `Hps` with the hidden maps replaced by zeros.
    HpsFh,
    /// `Hps` without the gradient cut.
    HpsIg,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::Gated,
        Variant::Hps,
        Variant::HpsPs,
        Variant::HpsFh,
        Variant::HpsIg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Gated => "gated",
            Variant::Hps => "hps",
            Variant::HpsPs => "ps",
            Variant::HpsFh => "fh",
            Variant::HpsIg => "ig",
        }
    }

    /// Whether layers in the selection set generate masks at all.
    pub fn has_mask_module(self) -> bool {
        self != Variant::Baseline
    }

    /// Whether the mini branch has to run.
    pub fn needs_mini_branch(self) -> bool {
        matches!(self, Variant::Hps | Variant::HpsPs | Variant::HpsIg)
    }

    /// Whether the mask convolution takes hidden channels (possibly zeros).
    pub fn mask_reads_hidden(self) -> bool {
        matches!(self, Variant::Hps | Variant::HpsPs | Variant::HpsIg | Variant::HpsFh)
    }

    pub fn cuts_gradients(self) -> bool {
        matches!(self, Variant::Hps | Variant::HpsPs | Variant::HpsFh)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "baseline" => Variant::Baseline,
            "gated" => Variant::Gated,
            "hps" => Variant::Hps,
            "ps" | "hps_ps" => Variant::HpsPs,
            "fh" | "hps_fh" => Variant::HpsFh,
            "ig" | "hps_ig" => Variant::HpsIg,
            other => {
                return Err(Error::Config(format!(
                    "unknown variant {other:?} (expected hps|gated|ps|fh|ig|baseline)"
                )))
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub blocks: usize,
    pub channels: usize,
    /// Halve the resolution at the stage entry.
    pub downsample: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub stem_stride: usize,
    pub stages: Vec<StageSpec>,
    pub mini_channels: usize,
    /// Output width of the feature-reducing convolution in each mask module.
    pub hp_channels: usize,
    /// Layers that apply path selection.
    pub hps_layers: BTreeSet<usize>,
    /// Layers whose mini-branch output serves as a hidden map.
    pub hidden_layers: BTreeSet<usize>,
    /// Mask bounds, one entry per layer.
    pub mask_ranges: Vec<MaskRange>,
    pub num_classes: usize,
    pub variant: Variant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Main,
    Mini,
}

impl Branch {
    fn prefix(self) -> &'static str {
        match self {
            Branch::Main => "main",
            Branch::Mini => "mini",
        }
    }
}

/// Static geometry of one residual layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerInfo {
    pub index: usize,
    pub stage: usize,
    pub block: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub entry: bool,
    /// Input is average-pooled before the block.
    pub pooled: bool,
    pub paths: usize,
    /// Channels of the cross-stage map feeding the extra path (entries only).
    pub extra_channels: usize,
    /// Resolution the block runs at.
    pub h: usize,
    pub w: usize,
    /// Resolution of the cross-stage map before alignment (entries only).
    pub extra_h: usize,
    pub extra_w: usize,
}

impl NetworkSpec {
    /// The desk-scale configuration: 3 stages of 2 blocks with 16/32/64
    /// channels, stride-2 stem, 3-channel input, 4 classes.
    pub fn toy(variant: Variant) -> Self {
        let stages = vec![
            StageSpec { blocks: 2, channels: 16, downsample: false },
            StageSpec { blocks: 2, channels: 32, downsample: true },
            StageSpec { blocks: 2, channels: 64, downsample: true },
        ];
        Self::with_defaults(3, 2, stages, 2, 4, 4, variant)
    }

    /// Selection at every layer, hidden maps at every stage end, wide
    /// bounds at stage entries.
    pub fn with_defaults(
        in_channels: usize,
        stem_stride: usize,
        stages: Vec<StageSpec>,
        mini_channels: usize,
        hp_channels: usize,
        num_classes: usize,
        variant: Variant,
    ) -> Self {
        let mut spec = Self {
            in_channels,
            stem_stride,
            stages,
            mini_channels,
            hp_channels,
            hps_layers: BTreeSet::new(),
            hidden_layers: BTreeSet::new(),
            mask_ranges: Vec::new(),
            num_classes,
            variant,
        };
        spec.reset_layer_sets();
        spec
    }

    /// Recomputes the layer sets and mask ranges from the stage list.
    pub fn reset_layer_sets(&mut self) {
        let n = self.num_layers();
        self.hps_layers = (0..n).collect();
        self.hidden_layers = self.stage_final_layers();
        self.mask_ranges = (0..n)
            .map(|d| if self.is_stage_entry(d) { hp::STAGE_ENTRY_RANGE } else { hp::DEFAULT_RANGE })
            .collect();
    }

    pub fn num_layers(&self) -> usize {
        self.stages.iter().map(|s| s.blocks).sum()
    }

    pub fn stage_final_layers(&self) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        let mut acc = 0;
        for s in &self.stages {
            acc += s.blocks;
            out.insert(acc - 1);
        }
        out
    }

    fn stage_and_block(&self, d: usize) -> (usize, usize) {
        let mut start = 0;
        for (s, st) in self.stages.iter().enumerate() {
            if d < start + st.blocks {
                return (s, d - start);
            }
            start += st.blocks;
        }
        panic!("layer {d} out of range");
    }

    pub fn is_stage_entry(&self, d: usize) -> bool {
        self.stage_and_block(d).1 == 0
    }

    /// `min { m in hidden_layers : d <= m }`.
    pub fn hidden_source(&self, d: usize) -> Option<usize> {
        self.hidden_layers.range(d..).next().copied()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages.is_empty() {
            return bad("network needs at least one stage".into());
        }
        if self.stages.iter().any(|s| s.blocks == 0 || s.channels == 0) {
            return bad("every stage needs at least one block and one channel".into());
        }
        if self.in_channels == 0 || self.mini_channels == 0 || self.hp_channels == 0 || self.stem_stride == 0 {
            return bad("channel counts and stem stride must be positive".into());
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return bad(format!("num_classes must be in 2..=255, got {}", self.num_classes));
        }
        let n = self.num_layers();
        if let Some(&d) = self.hps_layers.iter().find(|&&d| d >= n) {
            return bad(format!("selection layer {d} out of range (network has {n} layers)"));
        }
        if self.hidden_layers != self.stage_final_layers() {
            return bad(format!(
                "hidden layers must be exactly the stage-final layers {:?}, got {:?}",
                self.stage_final_layers(),
                self.hidden_layers
            ));
        }
        if self.mask_ranges.len() != n {
            return bad(format!("need {n} mask ranges, got {}", self.mask_ranges.len()));
        }
        for r in &self.mask_ranges {
            MaskRange::new(r.alpha, r.beta).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn branch_channels(&self, branch: Branch, stage: usize) -> usize {
        match branch {
            Branch::Main => self.stages[stage].channels,
            Branch::Mini => self.mini_channels,
        }
    }

    /// Resolution after the stem.
    pub fn stem_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        match (conv_out_dim(h, 3, self.stem_stride, 1), conv_out_dim(w, 3, self.stem_stride, 1)) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::Config(format!("input {h}x{w} too small for the stem"))),
        }
    }

    /// Geometry of every layer for an `h x w` input.
    pub fn layers(&self, branch: Branch, h: usize, w: usize) -> Result<Vec<LayerInfo>> {
        let (mut cur_h, mut cur_w) = self.stem_size(h, w)?;
        // Cross-stage maps: image, stem output, then each stage output.
        let mut anchors = vec![(self.in_channels, h, w), (self.branch_channels(branch, 0), cur_h, cur_w)];
        let mut cur_c = self.branch_channels(branch, 0);
        let mut out = Vec::with_capacity(self.num_layers());
        let mut index = 0;
        for (s, st) in self.stages.iter().enumerate() {
            let c = self.branch_channels(branch, s);
            let pooled = st.downsample;
            if pooled {
                if cur_h < 2 || cur_w < 2 {
                    return Err(Error::Config(format!("input {h}x{w} too small for {} stages", self.stages.len())));
                }
                cur_h /= 2;
                cur_w /= 2;
            }
            for b in 0..st.blocks {
                let entry = b == 0;
                let (extra_channels, extra_h, extra_w) = if entry { anchors[s] } else { (0, 0, 0) };
                out.push(LayerInfo {
                    index,
                    stage: s,
                    block: b,
                    in_channels: cur_c,
                    out_channels: c,
                    entry,
                    pooled: entry && pooled,
                    paths: if entry { 3 } else { 2 },
                    extra_channels,
                    h: cur_h,
                    w: cur_w,
                    extra_h,
                    extra_w,
                });
                cur_c = c;
                index += 1;
            }
            anchors.push((c, cur_h, cur_w));
        }
        Ok(out)
    }

    /// Resolution of the last stage, where the classifier runs.
    pub fn head_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let layers = self.layers(Branch::Main, h, w)?;
        let last = layers.last().expect("validated non-empty");
        Ok((last.h, last.w))
    }
}

// Parameter names.
fn stem_name(branch: Branch) -> String {
    format!("{}.stem", branch.prefix())
}
fn layer_name(branch: Branch, d: usize, part: &str) -> String {
    format!("{}.l{d}.{part}", branch.prefix())
}
pub fn hp_reduce_name(d: usize) -> String {
    format!("hp.l{d}.reduce")
}
pub fn hp_mask_name(d: usize) -> String {
    format!("hp.l{d}.mask")
}
const HEAD_NAME: &str = "main.head";

/// Named convolution parameters of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, ConvParams>,
    pub seed: u64,
}

/// 64-bit FNV-1a, used to give every parameter its own seed so the main
/// branch initializes identically whatever else a variant adds.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct ConvInit {
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    std: f64,
}

impl ConvInit {
    fn he(in_ch: usize, out_ch: usize, k: usize, stride: usize, gain: f64) -> Self {
        let fan_in = (in_ch * k * k) as f64;
        Self {
            in_ch,
            out_ch,
            k,
            stride,
            std: gain * (2.0 / fan_in).sqrt(),
        }
    }

    fn build(&self, seed: u64, name: &str) -> ConvParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
        let normal = Normal::new(0.0, self.std).expect("finite std");
        let shape = Shape4::new(self.out_ch, self.in_ch, self.k, self.k);
        let data = (0..shape.numel()).map(|_| normal.sample(&mut rng)).collect();
        ConvParams {
            weight: Tensor4::new(shape, data).expect("sized"),
            bias: Tensor4::zeros((1, self.out_ch, 1, 1)),
            stride: self.stride,
            padding: self.k / 2,
        }
    }
}

impl ParameterStore {
    /// Seeded initialization of every parameter the spec's variant uses.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut inits: Vec<(String, ConvInit)> = Vec::new();
        let residual_gain = 1.0 / (spec.num_layers() as f64).sqrt();
        let mut branches = vec![Branch::Main];
        if spec.variant.needs_mini_branch() {
            branches.push(Branch::Mini);
        }
        // Geometry does not depend on the input size for channel counts;
        // any size large enough for the stage count works here.
        let probe = 1usize << (spec.stages.len() + spec.stem_stride + 2);
        for &branch in &branches {
            let c0 = spec.branch_channels(branch, 0);
            inits.push((stem_name(branch), ConvInit::he(spec.in_channels, c0, 3, spec.stem_stride, 1.0)));
            for l in spec.layers(branch, probe, probe)? {
                inits.push((layer_name(branch, l.index, "conv1"), ConvInit::he(l.in_channels, l.out_channels, 3, 1, 1.0)));
                inits.push((
                    layer_name(branch, l.index, "conv2"),
                    ConvInit::he(l.out_channels, l.out_channels, 3, 1, residual_gain),
                ));
                if l.in_channels != l.out_channels {
                    inits.push((
                        layer_name(branch, l.index, "skip"),
                        ConvInit::he(l.in_channels, l.out_channels, 1, 1, 0.5f64.sqrt()),
                    ));
                }
                if l.entry && l.extra_channels != l.out_channels {
                    inits.push((
                        layer_name(branch, l.index, "extra"),
                        ConvInit::he(l.extra_channels, l.out_channels, 1, 1, 0.5f64.sqrt()),
                    ));
                }
            }
        }
        let last_c = spec.stages.last().expect("validated").channels;
        inits.push((HEAD_NAME.to_string(), ConvInit::he(last_c, spec.num_classes, 3, 1, 0.1)));

        if spec.variant.has_mask_module() {
            let hidden_c = if spec.variant.mask_reads_hidden() { spec.mini_channels } else { 0 };
            for l in spec.layers(Branch::Main, probe, probe)? {
                if !spec.hps_layers.contains(&l.index) {
                    continue;
                }
                inits.push((hp_reduce_name(l.index), ConvInit::he(l.in_channels, spec.hp_channels, 3, 1, 1.0)));
                // Small logits: masks start near the centre of their range.
                inits.push((
                    hp_mask_name(l.index),
                    ConvInit::he(spec.hp_channels + hidden_c, l.paths, 3, 1, 0.1),
                ));
            }
        }

        let params = inits.into_iter().map(|(name, init)| {
            let p = init.build(seed, &name);
            (name, p)
        });
        Ok(Self {
            params: params.collect(),
            seed,
        })
    }

    pub fn get(&self, name: &str) -> Option<&ConvParams> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ConvParams> {
        self.params.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, params: ConvParams) {
        self.params.insert(name.into(), params);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ConvParams)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ConvParams)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of scalar parameters whose name starts with `prefix`.
    pub fn count_scalars(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.weight.numel() + p.bias.numel())
            .sum()
    }

    /// The mask module of layer `d` with the variant's gradient setting.
    pub fn hp_params(&self, spec: &NetworkSpec, d: usize) -> Option<HpParams> {
        Some(HpParams {
            reduce_conv: self.get(&hp_reduce_name(d))?.clone(),
            mask_conv: self.get(&hp_mask_name(d))?.clone(),
            range: spec.mask_ranges[d],
            cut_gradients: spec.variant.cuts_gradients(),
        })
    }
}

/// Registers store parameters on a tape on first use and remembers the
/// resulting variables so their gradients can be collected.
pub struct Binder<'s> {
    store: &'s ParameterStore,
    trainable: bool,
    shared: Option<&'s BTreeMap<String, (Arc<Tensor4>, Arc<Tensor4>)>>,
    bound: BTreeMap<String, BoundConv>,
}

/// Parameter values wrapped for cheap registration on many tapes.
pub type SharedParams = BTreeMap<String, (Arc<Tensor4>, Arc<Tensor4>)>;

pub fn share_params(store: &ParameterStore) -> SharedParams {
    store
        .iter()
        .map(|(k, p)| (k.clone(), (Arc::new(p.weight.clone()), Arc::new(p.bias.clone()))))
        .collect()
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParameterStore, trainable: bool) -> Self {
        Self {
            store,
            trainable,
            shared: None,
            bound: BTreeMap::new(),
        }
    }

    /// Like [`Binder::new`] but registering values from `shared` without copies.
    pub fn with_shared(store: &'s ParameterStore, shared: &'s SharedParams, trainable: bool) -> Self {
        Self {
            store,
            trainable,
            shared: Some(shared),
            bound: BTreeMap::new(),
        }
    }

    pub fn conv(&mut self, tape: &mut Tape, name: &str) -> Result<BoundConv> {
        if let Some(b) = self.bound.get(name) {
            return Ok(*b);
        }
        let p = self
            .store
            .get(name)
            .ok_or_else(|| Error::Config(format!("parameter {name} missing from the store")))?;
        let bound = match self.shared.and_then(|s| s.get(name)) {
            Some((w, b)) => BoundConv {
                weight: tape.leaf_shared(Arc::clone(w), self.trainable),
                bias: tape.leaf_shared(Arc::clone(b), self.trainable),
                stride: p.stride,
                padding: p.padding,
            },
            None => BoundConv::bind(tape, p, self.trainable),
        };
        self.bound.insert(name.to_string(), bound);
        Ok(bound)
    }

    pub fn hp_module(&mut self, tape: &mut Tape, spec: &NetworkSpec, d: usize) -> Result<HpModule> {
        Ok(HpModule {
            reduce_conv: self.conv(tape, &hp_reduce_name(d))?,
            mask_conv: self.conv(tape, &hp_mask_name(d))?,
            range: spec.mask_ranges[d],
            cut_gradients: spec.variant.cuts_gradients(),
        })
    }

    /// Gradients of every bound parameter; parameters that received none
    /// get zeros.
    pub fn gradients(&self, grads: &Gradients) -> ParamGrads {
        ParamGrads {
            map: self
                .bound
                .iter()
                .map(|(k, b)| (k.clone(), (grads.wrt(b.weight), grads.wrt(b.bias))))
                .collect(),
        }
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &String> {
        self.bound.keys()
    }
}

/// `(weight, bias)` gradients by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    pub map: BTreeMap<String, (Tensor4, Tensor4)>,
}

impl ParamGrads {
    /// Adds `other` into `self`, in `other`'s (sorted) key order.
    pub fn accumulate(&mut self, other: ParamGrads) {
        for (k, (gw, gb)) in other.map {
            match self.map.get_mut(&k) {
                Some((w, b)) => {
                    w.add_assign(&gw);
                    b.add_assign(&gb);
                }
                None => {
                    self.map.insert(k, (gw, gb));
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Replace every generated mask by ones.
    pub unit_masks: bool,
    /// Use these mask values, by layer, as constants instead of generating
    /// masks. The mini branch is skipped.
    pub frozen_masks: Option<&'a BTreeMap<usize, Tensor4>>,
}

impl ForwardOptions<'_> {
    fn generates_masks(&self) -> bool {
        !self.unit_masks && self.frozen_masks.is_none()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `(n, num_classes, H, W)` class scores.
    pub logits: Var,
    /// Masks applied at each selection layer.
    pub masks: BTreeMap<usize, SoftMask>,
    /// Input features of each selection layer, as fed to the mask module.
    pub layer_inputs: BTreeMap<usize, Var>,
}

/// Average-pools while the map is at least twice the target, then snaps to
/// the target with nearest-neighbour resampling.
pub fn align(tape: &mut Tape, x: Var, h: usize, w: usize) -> Result<Var> {
    let mut cur = x;
    loop {
        let s = tape.shape(cur);
        if s.h >= 2 * h && s.w >= 2 * w {
            cur = tape.avgpool_stride2(cur)?;
        } else {
            break;
        }
    }
    tape.resize_nearest(cur, h, w)
}

fn stem(tape: &mut Tape, binder: &mut Binder, branch: Branch, image: Var) -> Result<Var> {
    let conv = binder.conv(tape, &stem_name(branch))?;
    let y = conv.apply(tape, image)?;
    Ok(tape.relu(y))
}

/// Paths of one residual layer, in mask-channel order, plus the features
/// the mask module reads.
struct LayerPaths {
    paths: Vec<Var>,
    features: Var,
}

fn layer_paths(
    tape: &mut Tape,
    binder: &mut Binder,
    branch: Branch,
    info: &LayerInfo,
    x: Var,
    extra_source: Option<Var>,
) -> Result<LayerPaths> {
    let xin = if info.pooled { tape.avgpool_stride2(x)? } else { x };
    let conv1 = binder.conv(tape, &layer_name(branch, info.index, "conv1"))?;
    let conv2 = binder.conv(tape, &layer_name(branch, info.index, "conv2"))?;
    let r = conv1.apply(tape, xin)?;
    let r = tape.relu(r);
    let residual = conv2.apply(tape, r)?;
    let skip = if info.in_channels != info.out_channels {
        binder.conv(tape, &layer_name(branch, info.index, "skip"))?.apply(tape, xin)?
    } else {
        xin
    };
    let mut paths = vec![residual, skip];
    if info.entry {
        let src = extra_source.ok_or_else(|| Error::Config(format!("layer {} is missing its cross-stage input", info.index)))?;
        let aligned = align(tape, src, info.h, info.w)?;
        let extra = if info.extra_channels != info.out_channels {
            binder.conv(tape, &layer_name(branch, info.index, "extra"))?.apply(tape, aligned)?
        } else {
            aligned
        };
        paths.push(extra);
    }
    Ok(LayerPaths { paths, features: xin })
}

fn plain_sum(tape: &mut Tape, paths: &[Var]) -> Result<Var> {
    let mut acc = paths[0];
    for &p in &paths[1..] {
        acc = tape.add(acc, p)?;
    }
    Ok(acc)
}

/// Runs the mini branch and returns its stage-final maps keyed by hidden
/// layer index.
pub fn forward_mini(tape: &mut Tape, binder: &mut Binder, image: Var, spec: &NetworkSpec) -> Result<BTreeMap<usize, Var>> {
    let s = tape.shape(image);
    if s.c != spec.in_channels {
        return Err(Error::shape("forward_mini", s, s.with_c(spec.in_channels)));
    }
    let layers = spec.layers(Branch::Mini, s.h, s.w)?;
    let mut anchors = vec![image];
    let mut x = stem(tape, binder, Branch::Mini, image)?;
    anchors.push(x);
    let mut hidden = BTreeMap::new();
    for info in &layers {
        let extra = info.entry.then(|| anchors[info.stage]);
        let lp = layer_paths(tape, binder, Branch::Mini, info, x, extra)?;
        let sum = plain_sum(tape, &lp.paths)?;
        x = tape.relu(sum);
        if spec.hidden_layers.contains(&info.index) {
            hidden.insert(info.index, x);
            anchors.push(x);
        }
    }
    Ok(hidden)
}

/// Builds the mask for one layer according to `variant`. `hidden` is the
/// aligned hidden map; `hidden_channels` sizes the zero map for `HpsFh`.
pub fn build_variant_mask(
    tape: &mut Tape,
    f: Var,
    hidden: Option<Var>,
    module: &HpModule,
    variant: Variant,
    paths: usize,
    hidden_channels: usize,
) -> Result<SoftMask> {
    let with_cut = |cut: bool| HpModule { cut_gradients: cut, ..*module };
    let need_hidden = || hidden.ok_or_else(|| Error::Config(format!("variant {variant} needs hidden maps")));
    match variant {
        Variant::Baseline => Ok(hp::unit_mask(tape, f, paths)),
        Variant::Gated => hp::make_mask(tape, f, None, &with_cut(false)),
        Variant::Hps => hp::make_mask(tape, f, Some(need_hidden()?), &with_cut(true)),
        Variant::HpsPs => {
            let m = hp::make_mask(tape, f, Some(need_hidden()?), &with_cut(true))?;
            Ok(hp::share_over_pixels(tape, m))
        }
        Variant::HpsFh => {
            let zeros = tape.constant(Tensor4::zeros(tape.shape(f).with_c(hidden_channels)));
            hp::make_mask(tape, f, Some(zeros), &with_cut(true))
        }
        Variant::HpsIg => hp::make_mask(tape, f, Some(need_hidden()?), &with_cut(false)),
    }
}

/// Main-branch pass. `hidden` must cover every hidden layer when the
/// variant reads hidden maps.
pub fn forward_main(
    tape: &mut Tape,
    binder: &mut Binder,
    image: Var,
    hidden: Option<&BTreeMap<usize, Var>>,
    spec: &NetworkSpec,
    opts: ForwardOptions,
) -> Result<ForwardOutput> {
    let s = tape.shape(image);
    if s.c != spec.in_channels {
        return Err(Error::shape("forward_main", s, s.with_c(spec.in_channels)));
    }
    let variant = spec.variant;
    if variant.needs_mini_branch() && opts.generates_masks() {
        let covered = hidden.is_some_and(|h| spec.hidden_layers.iter().all(|d| h.contains_key(d)));
        if !covered {
            return Err(Error::Config(format!("variant {variant} needs hidden maps for layers {:?}", spec.hidden_layers)));
        }
    }
    let layers = spec.layers(Branch::Main, s.h, s.w)?;
    let mut anchors = vec![image];
    let mut x = stem(tape, binder, Branch::Main, image)?;
    anchors.push(x);
    let mut masks = BTreeMap::new();
    let mut layer_inputs = BTreeMap::new();

    for info in &layers {
        let extra = info.entry.then(|| anchors[info.stage]);
        let lp = layer_paths(tape, binder, Branch::Main, info, x, extra)?;
        let selects = spec.hps_layers.contains(&info.index) && variant.has_mask_module();
        let combined = if !selects {
            plain_sum(tape, &lp.paths)?
        } else {
            let mask = if opts.unit_masks {
                hp::unit_mask(tape, lp.features, info.paths)
            } else if let Some(frozen) = opts.frozen_masks {
                let value = frozen
                    .get(&info.index)
                    .ok_or_else(|| Error::Contract(format!("no frozen mask for layer {}", info.index)))?;
                let expected = tape.shape(lp.features).with_c(info.paths);
                if value.shape() != expected {
                    return Err(Error::shape("frozen mask", value.shape(), expected));
                }
                SoftMask {
                    values: tape.constant(value.clone()),
                    range: spec.mask_ranges[info.index],
                }
            } else {
                let module = binder.hp_module(tape, spec, info.index)?;
                let h = match (variant.needs_mini_branch(), hidden) {
                    (true, Some(map)) => {
                        let src = spec.hidden_source(info.index).expect("validated hidden layers");
                        Some(align(tape, map[&src], info.h, info.w)?)
                    }
                    _ => None,
                };
                build_variant_mask(tape, lp.features, h, &module, variant, info.paths, spec.mini_channels)?
            };
            masks.insert(info.index, mask);
            layer_inputs.insert(info.index, lp.features);
            hp::select_paths(tape, &lp.paths, &mask)?
        };
        x = tape.relu(combined);
        if spec.hidden_layers.contains(&info.index) {
            anchors.push(x);
        }
    }

    let head = binder.conv(tape, HEAD_NAME)?;
    let scores = head.apply(tape, x)?;
    let logits = tape.resize_nearest(scores, s.h, s.w)?;
    Ok(ForwardOutput {
        logits,
        masks,
        layer_inputs,
    })
}

/// Mini branch (when the variant needs it) followed by the main branch.
pub fn forward(
    tape: &mut Tape,
    binder: &mut Binder,
    image: Var,
    spec: &NetworkSpec,
    opts: ForwardOptions,
) -> Result<ForwardOutput> {
    let hidden = if spec.variant.needs_mini_branch() && opts.generates_masks() {
        Some(forward_mini(tape, binder, image, spec)?)
    } else {
        None
    };
    forward_main(tape, binder, image, hidden.as_ref(), spec, opts)
}

/// Per-pixel argmax over channels, lowest index on ties. Returns `n * h * w`
/// class ids in `(n, h, w)` order.
pub fn predict(logits: &Tensor4) -> Vec<u8> {
    let s = logits.shape();
    let p = s.plane();
    let d = logits.data();
    let mut out = Vec::with_capacity(s.n * p);
    for n in 0..s.n {
        let base = n * s.c * p;
        for px in 0..p {
            let mut best = 0;
            let mut best_v = d[base + px];
            for c in 1..s.c {
                let v = d[base + c * p + px];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hidden_source_is_stage_end() {
        let spec = NetworkSpec::toy(Variant::Hps);
        assert_eq!(spec.hidden_layers, BTreeSet::from([1, 3, 5]));
        let got: Vec<_> = (0..6).map(|d| spec.hidden_source(d).unwrap()).collect();
        assert_eq!(got, vec![1, 1, 3, 3, 5, 5]);
        assert_eq!(spec.hidden_source(6), None);
    }

    #[test]
    fn stage_entries_get_wide_ranges() {
        let spec = NetworkSpec::toy(Variant::Hps);
        for d in 0..6 {
            let expect = if d % 2 == 0 { hp::STAGE_ENTRY_RANGE } else { hp::DEFAULT_RANGE };
            assert_eq!(spec.mask_ranges[d], expect);
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("hps_ig".parse::<Variant>().unwrap(), Variant::HpsIg);
        assert!(matches!("nope".parse::<Variant>(), Err(Error::Config(_))));
    }

    #[test]
    fn validate_rejects_wrong_hidden_layers() {
        let mut spec = NetworkSpec::toy(Variant::Hps);
        spec.hidden_layers.insert(0);
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        let mut spec = NetworkSpec::toy(Variant::Hps);
        spec.hps_layers.insert(9);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn toy_geometry() {
        let spec = NetworkSpec::toy(Variant::Hps);
        let l = spec.layers(Branch::Main, 64, 64).unwrap();
        let dims: Vec<_> = l.iter().map(|i| (i.in_channels, i.out_channels, i.h, i.paths)).collect();
        assert_eq!(
            dims,
            vec![(16, 16, 32, 3), (16, 16, 32, 2), (16, 32, 16, 3), (32, 32, 16, 2), (32, 64, 8, 3), (64, 64, 8, 2)]
        );
        assert_eq!((l[0].extra_channels, l[0].extra_h), (3, 64));
        assert_eq!((l[2].extra_channels, l[2].extra_h), (16, 32));
        assert_eq!((l[4].extra_channels, l[4].extra_h), (16, 32));
    }

    #[test]
    fn predict_breaks_ties_low() {
        let t = Tensor4::from_fn((1, 3, 1, 3), |_, c, _, w| match w {
            0 => [0.0, 0.0, 0.0][c],
            1 => [0.0, 1.0, 1.0][c],
            _ => [-1.0, -3.0, 2.0][c],
        });
        assert_eq!(predict(&t), vec![0, 1, 2]);
    }

    #[test]
    fn stores_share_main_branch_across_variants() {
        let a = ParameterStore::init(&NetworkSpec::toy(Variant::Baseline), 7).unwrap();
        let b = ParameterStore::init(&NetworkSpec::toy(Variant::Hps), 7).unwrap();
        for (k, p) in a.iter() {
            assert_eq!(b.get(k), Some(p), "{k}");
        }
        assert!(b.len() > a.len());
        assert!(a.iter().all(|(k, _)| k.starts_with("main.")));
    }
}
