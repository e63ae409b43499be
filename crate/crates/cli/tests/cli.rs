//! End-to-end checks of the command-line front end, the artifact formats and
//! the stage cache.

use std::path::Path;
use std::process::Command;

use drypar_cli::config::{MaskSection, PipelineConfig};
use drypar_cli::formats;
use drypar_core::fvm;
use drypar_core::grid::build_grid;
use drypar_core::material::{AmbientConditions, CalibrationWood};
use drypar_core::pod::{compute_pod, CombinedBasis, FieldId, SnapshotSet};
use drypar_core::state::StateVector;

const BIN: &str = env!("CARGO_BIN_EXE_drypar");

/// Small configuration that exercises every pipeline stage in seconds.
const TINY_CONFIG: &str = r#"
[grid]
n_x = 4
n_y = 4
n_z = 2
cell_size = 1e-3

[material]
id = "calibration-wood"

[ambient]
temperature = 350.0
vapor_density = 0.005

[initial]
moisture = 0.8
temperature = 298.15
sweep = [0.6]

[simulation]
horizon = 50.0
snapshots = 8

[pod]
threshold = 0.9999

[rom]
n_moisture = 2
n_temperature = 2

[gramian]
magnitudes = [1e-6]
dt = 0.5
samples = 20
settle_tol = 0.5
max_step = 1.0

[mask]
face = "x+"
width = 3
height = 1

[ekf]
measurement_interval = 5.0
r = 1e-4
p0_scale = 1e-8
q_scale = 1e-14
scenarios = [{ name = "a", initial_moisture = 0.9 }]

[output]
seed = 3
"#;

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY_CONFIG).unwrap();
    path
}

fn run(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).output().unwrap()
}

#[test]
fn preset_parses_and_matches_expected_shape() {
    let cfg = PipelineConfig::from_preset("paper-5").unwrap();
    assert_eq!(
        (cfg.grid.n_x, cfg.grid.n_y, cfg.grid.n_z),
        (10, 20, 5)
    );
    assert_eq!(cfg.initial_moistures(), vec![0.8, 0.6, 0.4, 0.2]);
    let grid = cfg.build_grid().unwrap();
    assert_eq!(cfg.mask.resolve(&grid).unwrap().len(), 51);
    assert_eq!(cfg.ekf.scenarios.len(), 3);
}

#[test]
fn unknown_preset_is_a_config_error() {
    let err = PipelineConfig::from_preset("nope").unwrap_err();
    assert_eq!(err.kind.exit_code(), 2);
    let out = run(&["simulate", "--preset", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[grid]\nn_x = 0\n").unwrap();
    let out = run(&["simulate", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    // Unknown keys are rejected rather than silently ignored.
    std::fs::write(&bad, TINY_CONFIG.replace("[output]", "[output]\ntypo = 1")).unwrap();
    let out = run(&["simulate", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mask_forms_resolve_and_reject_bad_cells() {
    let grid = build_grid(4, 4, 2, 1e-3).unwrap();
    let empty = MaskSection {
        cells: None,
        face: None,
        width: None,
        height: None,
        cell: None,
    };

    let patch = MaskSection {
        face: Some("x+".into()),
        width: Some(3),
        height: Some(1),
        ..empty.clone()
    };
    assert_eq!(patch.resolve(&grid).unwrap().len(), 3);

    let single = MaskSection {
        cell: Some(0),
        ..empty.clone()
    };
    assert_eq!(single.resolve(&grid).unwrap(), vec![0]);

    // No form or two forms set is rejected.
    assert!(empty.resolve(&grid).is_err());
    let both = MaskSection {
        cell: Some(0),
        cells: Some(vec![0]),
        ..empty.clone()
    };
    assert!(both.resolve(&grid).is_err());

    // Out-of-range cells are rejected; this grid has no interior cells, so
    // use an index past the end.
    let bad = MaskSection {
        cells: Some(vec![64]),
        ..empty.clone()
    };
    assert!(bad.resolve(&grid).is_err());

    let face_typo = MaskSection {
        face: Some("w+".into()),
        width: Some(1),
        height: Some(1),
        ..empty
    };
    assert!(face_typo.resolve(&grid).is_err());
}

#[test]
fn trajectory_and_basis_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let grid = build_grid(3, 4, 2, 1e-3).unwrap();
    let wood = CalibrationWood::default();
    let amb = AmbientConditions::constant(350.0, 0.005);
    let z0 = StateVector::uniform(grid.cell_count(), 0.8, 298.15);
    let dt = fvm::STABILITY_SAFETY * fvm::stability_dt(&grid, &wood);
    let traj = fvm::integrate(&z0, &grid, &wood, &amb, (0.0, 20.0), dt, 10).unwrap();

    let tpath = dir.path().join("traj.bin");
    formats::write_trajectory(&tpath, &grid, &traj).unwrap();
    let (grid2, traj2) = formats::read_trajectory(&tpath).unwrap();
    assert_eq!(grid2.cell_count(), grid.cell_count());
    assert_eq!(traj2.times, traj.times);
    assert_eq!(traj2.clamp_events, traj.clamp_events);
    for (a, b) in traj.states.iter().zip(&traj2.states) {
        assert_eq!(a.values, b.values);
    }

    let sx = SnapshotSet::from_trajectory(&traj, FieldId::Moisture, grid.cell_volume).unwrap();
    let st = SnapshotSet::from_trajectory(&traj, FieldId::Temperature, grid.cell_volume).unwrap();
    let basis = CombinedBasis::new(
        compute_pod(&sx).unwrap().with_cutoff(2).unwrap(),
        compute_pod(&st).unwrap().with_cutoff(3).unwrap(),
    )
    .unwrap();
    let bpath = dir.path().join("basis.bin");
    formats::write_basis(&bpath, &basis).unwrap();
    let basis2 = formats::read_basis(&bpath).unwrap();
    assert_eq!(basis2.moisture.cutoff, 2);
    assert_eq!(basis2.temperature.cutoff, 3);
    assert_eq!(basis2.moisture.modes, basis.moisture.modes);
    assert_eq!(basis2.temperature.mean, basis.temperature.mean);
    assert_eq!(basis2.moisture.singular_values, basis.moisture.singular_values);
    assert_eq!(basis2.dv(), basis.dv());
}

#[test]
fn fmt_f64_round_trips_and_is_shortest() {
    for &x in &[
        0.0,
        1.0,
        -1.5,
        0.1,
        1.0 / 3.0,
        6.626e-34,
        f64::MAX,
        f64::MIN_POSITIVE,
        -298.15,
    ] {
        assert_eq!(formats::fmt_f64(x).parse::<f64>().unwrap(), x);
    }
    assert_eq!(formats::fmt_f64(1.0), "1.0e0");
    assert_eq!(formats::fmt_f64(0.5), "5.0e-1");
}

#[test]
fn pipeline_caches_stages_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out_dir = dir.path().join("out");
    let cfg_s = cfg.to_str().unwrap();
    let out_s = out_dir.to_str().unwrap();

    let first = run(&["simulate", "--config", cfg_s, "--out", out_s]);
    assert_eq!(first.status.code(), Some(0), "{:?}", first);
    assert!(out_dir.join("total_moisture.csv").is_file());

    let second = run(&["simulate", "--config", cfg_s, "--out", out_s]);
    assert_eq!(second.status.code(), Some(0));
    assert!(
        String::from_utf8_lossy(&second.stdout).contains("cached"),
        "second run should hit the stage cache"
    );

    let pod = run(&["pod", "--config", cfg_s, "--out", out_s]);
    assert_eq!(pod.status.code(), Some(0), "{:?}", pod);
    let bpath = out_dir.join("basis.bin");
    assert!(bpath.is_file());

    let ok = run(&["validate", "--config", cfg_s, "--out", out_s]);
    assert_eq!(ok.status.code(), Some(0), "{:?}", ok);

    // Perturb one basis mode: validate must flag the loss of orthonormality
    // and exit with the validation failure code.
    let mut basis = formats::read_basis(&bpath).unwrap();
    basis.moisture.modes[(0, 0)] += 1e-3;
    formats::write_basis(&bpath, &basis).unwrap();
    let bad = run(&["validate", "--config", cfg_s, "--out", out_s]);
    assert_eq!(bad.status.code(), Some(4));
    let stdout = String::from_utf8_lossy(&bad.stdout);
    assert!(
        stdout.contains("basis-orthonormality") && stdout.contains("fail"),
        "{stdout}"
    );
}

#[test]
fn validate_linear_only_passes_from_scratch() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "validate",
        "--preset",
        "paper-5",
        "--out",
        dir.path().join("out").to_str().unwrap(),
        "--linear-only",
    ]);
    assert_eq!(out.status.code(), Some(0), "{:?}", out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("linear-gramian-oracle"));
    assert!(stdout.contains("pass"));
}
