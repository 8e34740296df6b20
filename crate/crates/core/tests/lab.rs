use hpsnet::manifold::{self, LabConfig, MaskFamily, TinyInstance};

fn quick() -> LabConfig {
    LabConfig { restarts: 3, steps: 400, grid_steps: 100, refine_top: 1, refine_steps: 400, polish_steps: 200, ..LabConfig::default() }
}

#[test]
fn one_free_mask_grid_lands_within_a_step_of_the_optimum() {
    // Loss with a known minimiser inside the range.
    let f = |w: &[f64]| Ok((w[0] - 1.13).powi(2) + 0.5);
    for r in [5, 9, 17] {
        let (v, p) = manifold::grid_minimum(1, r, 0.75, 1.25, f).unwrap();
        let step = 0.5 / (r - 1) as f64;
        assert!((p[0] - 1.13).abs() <= step / 2.0 + 1e-12, "resolution {r}");
        assert!(v - 0.5 <= (step / 2.0).powi(2) + 1e-12);
    }
}

#[test]
fn families_respect_containment() {
    let inst = TinyInstance::generate(9, 2, 3, 5).unwrap();
    let cfg = LabConfig { restarts: 8, ..LabConfig::default() };
    let oracle = manifold::oracle_best_loss(&inst, &cfg).unwrap();
    assert!(oracle.loss <= oracle.grid_loss);
    assert!(oracle.masks.iter().all(|&w| inst.range.contains(w)));
    let gated = manifold::constrained_best_loss(&inst, MaskFamily::Gated, &cfg).unwrap();
    let hidden = manifold::constrained_best_loss(&inst, MaskFamily::Hidden, &cfg).unwrap();
    assert!(oracle.loss <= hidden + 1e-9, "{} {hidden}", oracle.loss);
    assert!(oracle.loss <= gated + 1e-9);
}

#[test]
fn grids_coarser_than_five_are_refused() {
    let inst = TinyInstance::generate(0, 2, 2, 1).unwrap();
    assert!(manifold::oracle_with_resolution(&inst, 4, &quick()).is_err());
    assert!(TinyInstance::generate(0, 9, 2, 1).is_err());
}

#[test]
fn csv_has_one_row_per_instance() {
    let inst = TinyInstance::generate(4, 2, 2, 3).unwrap();
    let r = manifold::run_instance(&inst, &LabConfig { probe_points: 40, ..quick() }).unwrap();
    let csv = manifold::report_csv(&[r]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "instance,oracle,gated,hidden,residual_r0.25,residual_r0.1,residual_r0.05");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("4,"));
}
