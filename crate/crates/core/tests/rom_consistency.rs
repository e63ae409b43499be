//! Reduced-order-model checks: the face-loop Galerkin assembly against the
//! weighted projection of the finite-volume right-hand side (two independent
//! computational routes of the same reduction), closed-form behavior for
//! linear dynamics, and tracking of the full model.

use std::sync::Arc;

use drypar_core::fvm;
use drypar_core::grid::{build_grid, Face, Grid};
use drypar_core::material::{
    AmbientConditions, CalibrationWood, ConstantMaterial, FluxLaw, MaterialModel,
};
use drypar_core::ode::AdaptiveOptions;
use drypar_core::pod::{compute_pod, CombinedBasis, FieldId, SnapshotSet};
use drypar_core::rom::{self, RomState};
use drypar_core::state::{measure_output, StateVector, Trajectory};
use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn drying_trajectory(grid: &Grid, snapshots: usize) -> (CalibrationWood, AmbientConditions, Trajectory) {
    let wood = CalibrationWood::default();
    let amb = AmbientConditions::constant(350.0, 0.005);
    let z0 = StateVector::uniform(grid.cell_count(), 0.8, 298.15);
    let dt = 0.9 * fvm::stability_dt(grid, &wood);
    let horizon = 1100.0;
    let steps = (horizon / dt).ceil() as usize;
    let record_every = (steps / (snapshots - 1)).max(1);
    let traj = fvm::integrate(&z0, grid, &wood, &amb, (0.0, horizon), dt, record_every).unwrap();
    (wood, amb, traj)
}

fn basis_from(traj: &Trajectory, grid: &Grid, n_x: usize, n_t: usize) -> CombinedBasis {
    let sx = SnapshotSet::from_trajectory(traj, FieldId::Moisture, grid.cell_volume).unwrap();
    let st = SnapshotSet::from_trajectory(traj, FieldId::Temperature, grid.cell_volume).unwrap();
    let bx = compute_pod(&sx).unwrap().with_cutoff(n_x).unwrap();
    let bt = compute_pod(&st).unwrap().with_cutoff(n_t).unwrap();
    CombinedBasis::new(bx, bt).unwrap()
}

#[test]
fn galerkin_consistency_on_random_states() {
    let grid = build_grid(10, 20, 5, 1e-3).unwrap();
    let (wood, amb, traj) = drying_trajectory(&grid, 100);
    let basis = basis_from(&traj, &grid, 5, 5);
    let ops = rom::assemble(basis, grid, Arc::new(wood), amb).unwrap();

    let mut rng = StdRng::seed_from_u64(42);
    let mut checked = 0;
    'outer: for pass in 0.. {
        for state in &traj.states {
            if checked == 100 {
                break 'outer;
            }
            // Random admissible state near the snapshot manifold.
            let mut z = state.clone();
            let cells = z.cells;
            for i in 0..cells {
                z.values[i] = (z.values[i] + 0.02 * rng.gen_range(-1.0..1.0)).max(0.0);
                z.values[cells + i] += 2.0 * rng.gen_range(-1.0..1.0);
            }
            let c = ops.basis.project(&z);
            let lifted = ops.basis.reconstruct(&c);
            let rom_route = ops.rhs(0.0, &c).unwrap();
            let projection_route = ops
                .basis
                .project_weighted(&fvm::rhs(&lifted, &ops.grid, ops.material.as_ref(), &ops.ambient, 0.0).unwrap());
            let scale = projection_route.amax();
            let err = (rom_route - projection_route).amax() / scale;
            assert!(err < 1e-9, "pass {pass}: consistency error {err}");
            checked += 1;
        }
    }
    assert_eq!(checked, 100);
}

#[test]
fn rom_tracks_projected_full_model() {
    let grid = build_grid(10, 20, 5, 1e-3).unwrap();
    let (_wood, _amb, traj) = drying_trajectory(&grid, 100);
    let basis = basis_from(&traj, &grid, 5, 5);
    let ops = rom::assemble(
        basis,
        grid,
        Arc::new(CalibrationWood::default()),
        AmbientConditions::constant(350.0, 0.005),
    )
    .unwrap();

    let c0 = rom::project_initial(&traj.states[0], &ops.basis);
    let sample_times: Vec<f64> = traj.times.clone();
    let samples = rom::integrate_rom(
        &c0,
        &ops,
        *traj.times.last().unwrap(),
        &AdaptiveOptions::default(),
        &sample_times,
    )
    .unwrap();
    assert_eq!(samples.len(), traj.times.len());

    // Compare ROM coefficients against the projected full trajectory in a
    // relative L2 sense per coefficient scale.
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (state, (_t, c_rom)) in traj.states.iter().zip(&samples) {
        let c_ref = ops.basis.project(state);
        num += (c_rom - &c_ref).norm_squared();
        den += c_ref.norm_squared();
    }
    let rel = (num / den).sqrt();
    assert!(rel < 0.05, "ROM trajectory error {rel}");
}

#[test]
fn linear_rom_matches_closed_form() {
    let grid = build_grid(4, 3, 2, 1e-3).unwrap();
    let mat = ConstantMaterial {
        delta: [1e-8, 5e-9, 2e-9],
        lambda: [0.02, 0.01, 0.01],
        s: 1e6,
        j_x: FluxLaw::Linear {
            gain: 2e-7,
            reference: 0.0,
        },
        j_t: FluxLaw::Linear {
            gain: 0.5,
            reference: 0.0,
        },
        dh_v: 0.0,
        rho_d: 1.0,
    };
    let amb = AmbientConditions::constant(300.0, 0.0);
    let mut z0 = StateVector::uniform(grid.cell_count(), 0.5, 1.0);
    for i in 0..grid.cell_count() {
        z0.values[i] += 0.03 * ((i * 5) % 3) as f64;
        z0.values[grid.cell_count() + i] += 0.2 * ((i * 11) % 4) as f64;
    }
    let dt = 0.5 * fvm::stability_dt(&grid, &mat);
    let traj = fvm::integrate(&z0, &grid, &mat, &amb, (0.0, 60.0), dt, 5).unwrap();
    // Smooth linear dynamics leave few energetic directions; keep every mode
    // above the rank tolerance.
    let sx = SnapshotSet::from_trajectory(&traj, FieldId::Moisture, grid.cell_volume).unwrap();
    let st = SnapshotSet::from_trajectory(&traj, FieldId::Temperature, grid.cell_volume).unwrap();
    let basis = CombinedBasis::new(compute_pod(&sx).unwrap(), compute_pod(&st).unwrap()).unwrap();
    let phi = basis.dense_phi();
    let zbar = basis.mean_state();
    let ops = rom::assemble(basis, grid.clone(), Arc::new(mat.clone()), amb.clone()).unwrap();

    // Reduced dynamics are affine: dc/dt = A_r c + b_r with A_r, b_r from
    // the probed full system matrix.
    let n2 = 2 * grid.cell_count();
    let mut a = DMatrix::zeros(n2, n2);
    for j in 0..n2 {
        let mut e = DVector::zeros(n2);
        e[j] = 1.0;
        let z = StateVector::from_vector(e).unwrap();
        a.column_mut(j)
            .copy_from(&fvm::rhs(&z, &grid, &mat, &amb, 0.0).unwrap());
    }
    let a_r = grid.cell_volume * phi.transpose() * &a * &phi;
    let b_r = grid.cell_volume * phi.transpose() * &a * &zbar.values;

    let c0 = rom::project_initial(&z0, &ops.basis);
    let t_end = 40.0;
    let shift = a_r.clone().lu().solve(&b_r).expect("A_r invertible");
    let expected = drypar_oracles::expm(&a_r, t_end) * (&c0.c + &shift) - &shift;

    let opts = AdaptiveOptions {
        rtol: 1e-11,
        atol: 1e-14,
        ..Default::default()
    };
    let samples = rom::integrate_rom(&c0, &ops, t_end, &opts, &[t_end]).unwrap();
    let got = &samples[0].1;
    let err = (got - &expected).amax() / expected.amax();
    assert!(err < 1e-6, "closed-form mismatch {err}");
}

#[test]
fn rom_output_equals_full_measurement_of_reconstruction() {
    let grid = build_grid(6, 8, 4, 1e-3).unwrap();
    let (wood, amb, traj) = drying_trajectory(&grid, 40);
    let basis = basis_from(&traj, &grid, 4, 4);
    let ops = rom::assemble(basis, grid, Arc::new(wood), amb).unwrap();
    let mask = ops.grid.centered_patch(Face::XPos, 5, 3).unwrap();

    for state in traj.states.iter().step_by(9) {
        let c = ops.basis.project(state);
        let rom_w = rom::rom_output(&RomState { c: c.clone(), t: 0.0 }, &ops, &mask).unwrap();
        let rec = ops.basis.reconstruct(&c);
        let direct = measure_output(&rec, &ops.grid, &mask).unwrap();
        assert!((rom_w - direct).abs() < 1e-10 * direct.abs().max(1.0));
    }
}

fn _material_object_safety(m: &dyn MaterialModel) -> &str {
    m.id()
}
