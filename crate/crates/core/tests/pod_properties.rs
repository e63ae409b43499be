//! POD checks against an independent SVD route plus property-based
//! invariants: weighted orthonormality, projector idempotence, energy
//! monotonicity, and subspace stability under snapshot duplication.

use drypar_core::pod::{
    choose_cutoff, compute_pod, energy, FieldId, PodBasis, SnapshotSet,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const DV: f64 = 1e-9;

fn snapshot_set(matrix: DMatrix<f64>) -> SnapshotSet {
    let times = (0..matrix.ncols()).map(|j| j as f64).collect();
    SnapshotSet::new(FieldId::Moisture, matrix, times, DV).unwrap()
}

fn random_matrix(rng: &mut StdRng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn weighted_gram(basis: &PodBasis) -> DMatrix<f64> {
    basis.modes.transpose() * &basis.modes * basis.dv
}

#[test]
fn pod_matches_gram_based_svd() {
    let mut rng = StdRng::seed_from_u64(7);
    let x = random_matrix(&mut rng, 8, 5);
    let set = snapshot_set(x.clone());
    let basis = compute_pod(&set).unwrap();

    // Independent route: eigendecomposition of the Gram matrix of the
    // centered snapshots.
    let mean = DVector::from_fn(8, |i, _| x.row(i).sum() / 5.0);
    let mut centered = x.clone();
    for j in 0..5 {
        centered.column_mut(j).axpy(-1.0, &mean, 1.0);
    }
    // The Gram route squares the spectrum, so its noise floor sits at
    // sqrt(machine epsilon); truncate the oracle above that.
    let (u, s, _v) = drypar_oracles::svd_via_gram(&centered, 1e-7);

    assert_eq!(basis.singular_values.len(), s.len());
    for (a, b) in basis.singular_values.iter().zip(s.iter()) {
        assert!((a - b).abs() < 1e-9 * s[0], "singular values differ: {a} vs {b}");
    }
    // Modes agree with the oracle's left singular vectors up to the
    // 1/sqrt(dv) scaling and sign.
    for k in 0..s.len() {
        let mode = basis.modes.column(k) * DV.sqrt();
        let cos = mode.dot(&u.column(k)).abs();
        assert!(cos > 1.0 - 1e-9, "mode {k} subspace mismatch: cos = {cos}");
    }
}

#[test]
fn energy_is_monotone_and_saturates() {
    let mut rng = StdRng::seed_from_u64(11);
    let set = snapshot_set(random_matrix(&mut rng, 12, 7));
    let basis = compute_pod(&set).unwrap();
    let b = basis.singular_values.len();
    let mut prev = 0.0;
    for n in 1..=b {
        let e = energy(&basis, n).unwrap();
        assert!(e > prev);
        prev = e;
    }
    assert!((prev - 1.0).abs() < 1e-12);
    assert_eq!(choose_cutoff(&basis, 1.0).unwrap(), b);
}

#[test]
fn duplicated_snapshots_preserve_subspace() {
    let mut rng = StdRng::seed_from_u64(23);
    let x = random_matrix(&mut rng, 10, 4);
    let doubled = {
        let mut m = DMatrix::zeros(10, 8);
        m.view_mut((0, 0), (10, 4)).copy_from(&x);
        m.view_mut((0, 4), (10, 4)).copy_from(&x);
        m
    };
    let b1 = compute_pod(&snapshot_set(x)).unwrap();
    let b2 = compute_pod(&snapshot_set(doubled)).unwrap();
    assert_eq!(b1.singular_values.len(), b2.singular_values.len());
    for k in 0..b1.singular_values.len() {
        let cos = (b1.modes.column(k).dot(&b2.modes.column(k)) * DV).abs();
        assert!(cos > 1.0 - 1e-8, "mode {k} changed: cos = {cos}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn modes_orthonormal_and_projector_idempotent(seed in 0u64..1000, rows in 4usize..20, cols in 2usize..10) {
        let mut rng = StdRng::seed_from_u64(seed);
        let x = random_matrix(&mut rng, rows, cols);
        let set = snapshot_set(x);
        let basis = compute_pod(&set).unwrap();

        // Orthonormality in the dV-weighted inner product.
        let gram = weighted_gram(&basis);
        let eye = DMatrix::identity(gram.nrows(), gram.ncols());
        prop_assert!((gram - eye).amax() < 1e-10);

        // Projection of a reconstruction returns the coefficients.
        let c = DVector::from_fn(basis.singular_values.len(), |i, _| 0.3 * (i as f64 + 1.0));
        let field = basis.reconstruct_field(&c);
        let c2 = basis.project_field(&field);
        prop_assert!((c2 - &c).amax() < 1e-9 * c.amax());
    }

    #[test]
    fn reconstruction_error_decreases_with_cutoff(seed in 0u64..1000) {
        let mut rng = StdRng::seed_from_u64(seed);
        let x = random_matrix(&mut rng, 15, 6);
        let set = snapshot_set(x.clone());
        let full = compute_pod(&set).unwrap();
        let b = full.singular_values.len();
        let mut prev_err = f64::INFINITY;
        for n in 1..=b {
            let basis = full.clone().with_cutoff(n).unwrap();
            let mut err = 0.0f64;
            for j in 0..x.ncols() {
                let snap = x.column(j).clone_owned();
                let rec = basis.reconstruct_field(&basis.project_field(&snap));
                err += (rec - snap).norm_squared();
            }
            prop_assert!(err <= prev_err + 1e-12);
            prev_err = err;
        }
        // Full basis reproduces the snapshots exactly.
        prop_assert!(prev_err.sqrt() < 1e-8);
    }
}
