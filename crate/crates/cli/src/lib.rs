//! Subcommands of the `hps` binary, callable in-process.
//!
//! Every command returns the text it would print on stdout; the binary
//! prints it and maps errors to exit codes with [`exit_code`].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use hpsnet::config::{self, RunConfig};
use hpsnet::data::{self, SynthConfig, COARSE_CLASSES, FINE_CLASSES};
use hpsnet::eval::{self, FlopReport};
use hpsnet::manifold::{self, TinyInstance};
use hpsnet::network::{NetworkSpec, Variant};
use hpsnet::{checkpoint, gradcheck, train, Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";

/// 0 on success, 2 for file and format problems, 1 for everything else.
pub fn exit_code(result: &Result<String>) -> i32 {
    match result {
        Ok(_) => 0,
        Err(e) if e.is_io() => 2,
        Err(_) => 1,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn class_names(classes: usize) -> Vec<&'static str> {
    match classes {
        15 => FINE_CLASSES.to_vec(),
        5 => COARSE_CLASSES.to_vec(),
        _ => Vec::new(),
    }
}

/// Trains per the config file and writes the checkpoint and metrics CSV
/// into its output directory. Returns the metrics CSV.
pub fn cmd_train(config_path: &Path) -> Result<String> {
    let cfg = RunConfig::load(config_path)?;
    let (train_set, eval_set) = cfg.datasets()?;
    let outcome = train::train_from(
        hpsnet::network::ParameterStore::init(&cfg.network, cfg.seed)?,
        &train_set,
        Some(&eval_set),
        &cfg.network,
        &cfg.train,
        |row| {
            let miou = row.miou.map(|m| format!("{m:.4}")).unwrap_or_default();
            eprintln!("epoch {:>3}  loss {:.4}  miou {miou}", row.epoch, row.loss);
        },
    )?;
    create_dir(&cfg.output_dir)?;
    checkpoint::save(&cfg.output_dir.join(CHECKPOINT_FILE), &outcome.store)?;
    let csv = train::metrics_csv(&outcome.log);
    write_file(&cfg.output_dir.join(METRICS_FILE), &csv)?;
    Ok(csv)
}

/// Per-class IoU CSV of `checkpoint` on `manifest`, or on the config's
/// evaluation set when no manifest is given.
pub fn cmd_eval(config_path: &Path, checkpoint_path: &Path, manifest: Option<&Path>) -> Result<String> {
    let cfg = RunConfig::load(config_path)?;
    let store = checkpoint::load(checkpoint_path, &cfg.network)?;
    let samples = match manifest {
        Some(m) => data::load_dataset(m)?,
        None => cfg.datasets()?.1,
    };
    let cm = train::evaluate(&cfg.network, &store, &samples)?;
    Ok(cm.miou().to_csv(&class_names(cfg.network.num_classes)))
}

/// Finite-difference table over every primitive and the mask module.
/// Fails with a contract error naming the failing cases.
pub fn cmd_gradcheck(seed: u64) -> Result<String> {
    let reports = gradcheck::run_suite(seed)?;
    let mut s = format!("{:<24} {:>12} {:>8}  result\n", "case", "max_rel_err", "checked");
    for r in &reports {
        let verdict = if r.passed { "pass" } else { "FAIL" };
        writeln!(s, "{:<24} {:>12.3e} {:>8}  {verdict}", r.name, r.max_rel_err, r.checked).unwrap();
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(s)
    } else {
        print!("{s}");
        Err(Error::Contract(format!("gradient check failed for {}", failed.join(", "))))
    }
}

/// Renders the last mask of every stage for one image into `out_dir`.
pub fn cmd_inspect_masks(config_path: &Path, checkpoint_path: &Path, image: &Path, out_dir: &Path) -> Result<String> {
    let cfg = RunConfig::load(config_path)?;
    let store = checkpoint::load(checkpoint_path, &cfg.network)?;
    let (w, h, rgb) = data::read_ppm(image)?;
    let masks = train::stage_masks(&cfg.network, &store, &data::rgb_to_image(w, h, &rgb))?;
    if masks.is_empty() {
        return Err(Error::Config(format!("variant {} has no masks to render", cfg.network.variant)));
    }
    create_dir(out_dir)?;
    let paths = eval::render_masks(&masks, out_dir)?;
    Ok(paths.iter().map(|p| format!("{}\n", p.display())).collect())
}

/// Manifold-lab CSV over the shipped instances.
pub fn cmd_manifold(lab_config: Option<&Path>) -> Result<String> {
    let cfg = match lab_config {
        Some(p) => config::parse_lab(&fs::read_to_string(p).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?)?,
        None => manifold::LabConfig::default(),
    };
    let reports = TinyInstance::shipped()
        .iter()
        .map(|inst| manifold::run_instance(inst, &cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(manifold::report_csv(&reports))
}

/// Writes synthetic samples as PPM/PGM pairs plus a manifest. Returns the
/// manifest path.
pub fn cmd_gen_data(count: usize, classes: usize, size: usize, seed: u64, out_dir: &Path) -> Result<String> {
    let samples = data::gen_synthetic(count, &SynthConfig::new(classes, size), seed)?;
    create_dir(out_dir)?;
    let manifest: PathBuf = data::write_dataset(out_dir, &samples)?;
    Ok(format!("{}\n", manifest.display()))
}

/// FLOPs per sample for every variant of the configured network.
pub fn cmd_flops(config_path: Option<&Path>) -> Result<String> {
    let cfg = match config_path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let size = cfg.data.size;
    let per_variant = |v: Variant| -> Result<FlopReport> {
        let spec = NetworkSpec { variant: v, ..cfg.network.clone() };
        eval::count_flops(&spec, size, size)
    };
    let base = per_variant(Variant::Baseline)?;
    let mut s = format!(
        "{:<10} {:>14} {:>12} {:>12} {:>10} {:>14} {:>9}\n",
        "variant", "main", "mini", "hp_modules", "head", "total", "overhead"
    );
    for v in Variant::ALL {
        let r = per_variant(v)?;
        writeln!(
            s,
            "{:<10} {:>14} {:>12} {:>12} {:>10} {:>14} {:>8.2}%",
            v.name(),
            r.main,
            r.mini,
            r.hp_modules,
            r.head,
            r.total(),
            100.0 * r.overhead_ratio(&base)
        )
        .unwrap();
    }
    let hps = per_variant(Variant::Hps)?;
    let gated = per_variant(Variant::Gated)?;
    let share = (hps.total() - gated.total()) as f64 / (hps.total() - base.total()) as f64;
    writeln!(s, "hidden-variable share of hps overhead: {:.1}%", 100.0 * share).unwrap();
    Ok(s)
}
