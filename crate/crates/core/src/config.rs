//! Run configuration files.
//!
//! One `key = value` pair per line, `#` starts a comment, keys carry a
//! section prefix. Every key and its default is listed in [`KEYS`]; unknown
//! keys are rejected.
//!
//! ```
//! use hpsnet::config::RunConfig;
//! use hpsnet::network::Variant;
//!
//! let cfg = RunConfig::parse("network.variant = fh  # zero hidden maps\ntrain.epochs = 3\n").unwrap();
//! assert_eq!(cfg.network.variant, Variant::HpsFh);
//! assert_eq!(cfg.train.epochs, 3);
//! assert!(RunConfig::parse("train.epoch = 3").is_err());
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{self, Sample, SynthConfig};
use crate::error::{Error, Result};
use crate::manifold::LabConfig;
use crate::network::{NetworkSpec, StageSpec, Variant};
use crate::train::TrainConfig;

pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

macro_rules! keys {
    ($($key:literal = $default:literal : $doc:literal,)*) => {
        &[$(KeySpec { key: $key, default: $default, doc: $doc },)*]
    };
}

/// Every accepted key with its default value.
pub const KEYS: &[KeySpec] = keys! {
    "seed" = "0" : "run seed: parameter init, shuffling and flips",
    "output_dir" = "runs" : "directory for checkpoint.bin and metrics.csv",
    "network.variant" = "hps" : "baseline | gated | hps | ps | fh | ig",
    "network.classes" = "4" : "number of segmentation classes",
    "network.in_channels" = "3" : "image channels",
    "network.stem_stride" = "2" : "stride of the first convolution",
    "network.channels" = "16,32,64" : "main-branch channels per stage",
    "network.blocks" = "2" : "residual blocks per stage",
    "network.mini_channels" = "2" : "mini-branch channels in every stage",
    "network.hp_channels" = "4" : "reduce-conv width inside each mask module",
    "train.base_lr" = "0.007" : "initial learning rate of the poly schedule",
    "train.momentum" = "0.9" : "SGD momentum",
    "train.weight_decay" = "0.0001" : "L2 decay on convolution weights",
    "train.poly_power" = "0.9" : "exponent of the poly schedule",
    "train.batch_size" = "10" : "samples per step",
    "train.epochs" = "15" : "passes over the training set",
    "train.flip_augment" = "true" : "random horizontal and vertical flips",
    "data.train_manifest" = "" : "manifest of training samples; empty means synthetic",
    "data.eval_manifest" = "" : "manifest of evaluation samples; empty means synthetic",
    "data.train_count" = "200" : "synthetic training samples",
    "data.eval_count" = "50" : "synthetic evaluation samples",
    "data.size" = "64" : "synthetic sample side length",
    "data.seed" = "1000" : "synthetic generator seed",
    "data.boundary_ignore" = "0.2" : "probability a region-boundary pixel is labelled 255",
};

/// Keys of a manifold-lab file.
pub const LAB_KEYS: &[KeySpec] = keys! {
    "lab.seed" = "0" : "seed for oracle fits, restarts and probe points",
    "lab.restarts" = "20" : "seeded restarts per constrained family",
    "lab.steps" = "2000" : "descent steps per restart",
    "lab.lr" = "2.0" : "descent step size",
    "lab.momentum" = "0.9" : "descent momentum",
    "lab.grid_steps" = "300" : "parameter-fit steps at each oracle grid point",
    "lab.fit_inits" = "4" : "seeded initializations per oracle parameter fit",
    "lab.refine_top" = "4" : "grid points refined jointly over parameters and masks",
    "lab.refine_steps" = "4000" : "joint refinement steps",
    "lab.polish_steps" = "2000" : "mask-only steps after refinement",
    "lab.radii" = "0.25,0.1,0.05" : "convexity probe radii",
    "lab.probe_points" = "200" : "samples per probe radius",
};

/// Splits `key = value` lines, dropping comments and blank lines. Keys
/// must appear in `keys` and at most once.
pub fn parse_pairs(text: &str, keys: &[KeySpec]) -> Result<BTreeMap<String, String>> {
    let mut pairs = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !keys.iter().any(|s| s.key == k) {
            return Err(Error::Config(format!("line {}: unknown key {k:?}", n + 1)));
        }
        if pairs.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: {k} given twice", n + 1)));
        }
    }
    Ok(pairs)
}

pub fn parse_lab(text: &str) -> Result<LabConfig> {
    let pairs = parse_pairs(text, LAB_KEYS)?;
    let get = |key: &str| -> &str {
        pairs.get(key).map(String::as_str).unwrap_or_else(|| {
            LAB_KEYS.iter().find(|s| s.key == key).map(|s| s.default).expect("key is listed")
        })
    };
    let radii: Vec<f64> = get("lab.radii")
        .split(',')
        .map(|v| parse_value("lab.radii", v.trim()))
        .collect::<Result<_>>()?;
    let cfg = LabConfig {
        restarts: parse_value("lab.restarts", get("lab.restarts"))?,
        steps: parse_value("lab.steps", get("lab.steps"))?,
        lr: parse_value("lab.lr", get("lab.lr"))?,
        momentum: parse_value("lab.momentum", get("lab.momentum"))?,
        grid_steps: parse_value("lab.grid_steps", get("lab.grid_steps"))?,
        fit_inits: parse_value("lab.fit_inits", get("lab.fit_inits"))?,
        refine_top: parse_value("lab.refine_top", get("lab.refine_top"))?,
        refine_steps: parse_value("lab.refine_steps", get("lab.refine_steps"))?,
        polish_steps: parse_value("lab.polish_steps", get("lab.polish_steps"))?,
        radii,
        probe_points: parse_value("lab.probe_points", get("lab.probe_points"))?,
        seed: parse_value("lab.seed", get("lab.seed"))?,
    };
    if cfg.restarts == 0 || cfg.radii.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::Config("lab needs at least one restart and positive radii".into()));
    }
    Ok(cfg)
}

/// Renders a key table as an aligned `key = default  # doc` listing.
pub fn keys_help(keys: &[KeySpec]) -> String {
    let width = keys.iter().map(|k| k.key.len() + k.default.len()).max().unwrap_or(0) + 3;
    let mut s = String::new();
    for k in keys {
        let lhs = format!("{} = {}", k.key, k.default);
        writeln!(s, "  {lhs:<width$}  # {}", k.doc).unwrap();
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    pub train_count: usize,
    pub eval_count: usize,
    pub size: usize,
    pub seed: u64,
    pub boundary_ignore: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub network: NetworkSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_pairs(&BTreeMap::new()).expect("defaults are valid")
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text, KEYS)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        // Relative paths inside a config file are relative to the file.
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.train_manifest, &mut cfg.data.eval_manifest].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    /// Builds a config from explicit pairs, defaults filling the rest.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let get = |key: &str| -> &str {
            pairs.get(key).map(String::as_str).unwrap_or_else(|| {
                KEYS.iter().find(|s| s.key == key).map(|s| s.default).expect("key is listed")
            })
        };
        for k in pairs.keys() {
            if !KEYS.iter().any(|s| s.key == k) {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
        }

        let seed: u64 = parse_value("seed", get("seed"))?;
        let channels = parse_list("network.channels", get("network.channels"))?;
        let blocks: usize = parse_value("network.blocks", get("network.blocks"))?;
        if channels.is_empty() || blocks == 0 {
            return Err(Error::Config("network needs at least one stage of one block".into()));
        }
        let stages = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| StageSpec { blocks, channels: c, downsample: i > 0 })
            .collect();
        let network = NetworkSpec::with_defaults(
            parse_value("network.in_channels", get("network.in_channels"))?,
            parse_value("network.stem_stride", get("network.stem_stride"))?,
            stages,
            parse_value("network.mini_channels", get("network.mini_channels"))?,
            parse_value("network.hp_channels", get("network.hp_channels"))?,
            parse_value("network.classes", get("network.classes"))?,
            parse_value::<Variant>("network.variant", get("network.variant"))?,
        );
        network.validate()?;

        let train = TrainConfig {
            base_lr: parse_value("train.base_lr", get("train.base_lr"))?,
            momentum: parse_value("train.momentum", get("train.momentum"))?,
            weight_decay: parse_value("train.weight_decay", get("train.weight_decay"))?,
            poly_power: parse_value("train.poly_power", get("train.poly_power"))?,
            batch_size: parse_value("train.batch_size", get("train.batch_size"))?,
            epochs: parse_value("train.epochs", get("train.epochs"))?,
            seed,
            flip_augment: parse_value("train.flip_augment", get("train.flip_augment"))?,
        };
        train.validate()?;

        let data = DataConfig {
            train_manifest: optional_path(get("data.train_manifest")),
            eval_manifest: optional_path(get("data.eval_manifest")),
            train_count: parse_value("data.train_count", get("data.train_count"))?,
            eval_count: parse_value("data.eval_count", get("data.eval_count"))?,
            size: parse_value("data.size", get("data.size"))?,
            seed: parse_value("data.seed", get("data.seed"))?,
            boundary_ignore: parse_value("data.boundary_ignore", get("data.boundary_ignore"))?,
        };
        if !(0.0..=1.0).contains(&data.boundary_ignore) {
            return Err(Error::Config(format!(
                "data.boundary_ignore must lie in [0, 1], got {}",
                data.boundary_ignore
            )));
        }

        Ok(Self {
            seed,
            output_dir: PathBuf::from(get("output_dir")),
            network,
            train,
            data,
        })
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            boundary_ignore: self.data.boundary_ignore,
            ..SynthConfig::new(self.network.num_classes, self.data.size)
        }
    }

    /// Training and evaluation sets. Synthetic sets come from one generator
    /// run, training samples first, so the two never overlap.
    pub fn datasets(&self) -> Result<(Vec<Sample>, Vec<Sample>)> {
        let synth = if self.data.train_manifest.is_none() || self.data.eval_manifest.is_none() {
            let total = self.data.train_count + self.data.eval_count;
            let mut all = data::gen_synthetic(total, &self.synth_config(), self.data.seed)?;
            let eval = all.split_off(self.data.train_count);
            Some((all, eval))
        } else {
            None
        };
        let train = match &self.data.train_manifest {
            Some(p) => data::load_dataset(p)?,
            None => synth.as_ref().expect("generated").0.clone(),
        };
        let eval = match &self.data.eval_manifest {
            Some(p) => data::load_dataset(p)?,
            None => synth.as_ref().expect("generated").1.clone(),
        };
        Ok((train, eval))
    }
}
