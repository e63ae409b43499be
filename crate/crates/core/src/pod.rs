//! Proper orthogonal decomposition of snapshot sets under the dV-weighted
//! inner product <a, b> = a^T b dV, plus the combined block-diagonal basis
//! for the stacked moisture/temperature state.

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};
use crate::state::{StateVector, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldId {
    Moisture,
    Temperature,
}

impl FieldId {
    pub fn label(self) -> &'static str {
        match self {
            FieldId::Moisture => "moisture",
            FieldId::Temperature => "temperature",
        }
    }
}

/// Snapshot matrix of one field: column j is the field at time `times[j]`.
#[derive(Debug, Clone)]
pub struct SnapshotSet {
    pub field_id: FieldId,
    pub matrix: DMatrix<f64>,
    pub times: Vec<f64>,
    pub dv: f64,
}

impl SnapshotSet {
    pub fn new(field_id: FieldId, matrix: DMatrix<f64>, times: Vec<f64>, dv: f64) -> Result<Self> {
        if matrix.ncols() != times.len() {
            return Err(CoreError::DimensionMismatch(
                "snapshot count does not match times".into(),
            ));
        }
        if matrix.ncols() < 2 {
            return Err(CoreError::InvalidArgument(
                "at least two snapshots required".into(),
            ));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidArgument(
                "snapshot matrix contains non-finite entries".into(),
            ));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CoreError::InvalidArgument(
                "snapshot times must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            field_id,
            matrix,
            times,
            dv,
        })
    }

    /// Extracts one field of a recorded trajectory as a snapshot set.
    pub fn from_trajectory(traj: &Trajectory, field_id: FieldId, dv: f64) -> Result<Self> {
        let cells = traj.states[0].cells;
        let m = traj.states.len();
        let mut matrix = DMatrix::zeros(cells, m);
        for (j, state) in traj.states.iter().enumerate() {
            let col = match field_id {
                FieldId::Moisture => state.moisture_slice(),
                FieldId::Temperature => state.temperature_slice(),
            };
            matrix.column_mut(j).copy_from_slice(col);
        }
        Self::new(field_id, matrix, traj.times.clone(), dv)
    }
}

/// POD basis of one field: time mean, dV-orthonormal modes and the full
/// singular-value spectrum of the centered snapshot matrix.
#[derive(Debug, Clone)]
pub struct PodBasis {
    pub field_id: FieldId,
    pub mean: DVector<f64>,
    /// N x b mode matrix, columns dV-orthonormal.
    pub modes: DMatrix<f64>,
    /// Nonincreasing spectrum of length b (the numerical rank).
    pub singular_values: Vec<f64>,
    pub dv: f64,
    /// Retained mode count, 1 <= cutoff <= b.
    pub cutoff: usize,
}

/// Elementwise time average of the snapshots.
pub fn compute_mean(snapshots: &SnapshotSet) -> DVector<f64> {
    let m = snapshots.matrix.ncols() as f64;
    let mut mean = DVector::zeros(snapshots.matrix.nrows());
    for col in snapshots.matrix.column_iter() {
        mean += col;
    }
    mean / m
}

/// One-sided Jacobi SVD: rotates column pairs of `a` until all columns are
/// mutually orthogonal, then reads off sigma_k = |a_k| and u_k = a_k / sigma_k.
/// Chosen over a bidiagonalization SVD for its high relative accuracy on the
/// small, tall snapshot matrices that occur here.
fn one_sided_jacobi_svd(mut a: DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let (rows, cols) = a.shape();
    let tol = 1e-14;
    let max_sweeps = 60;
    // Columns far below the numerical-rank threshold carry only round-off
    // noise; freezing them keeps the sweep from chasing it indefinitely.
    let scale2: f64 = (0..cols)
        .map(|j| a.column(j).norm_squared())
        .fold(0.0, f64::max);
    let freeze2 = 1e-28 * scale2;
    let mut converged = false;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let mut dot = 0.0;
                let mut npp = 0.0;
                let mut nqq = 0.0;
                for i in 0..rows {
                    let ap = a[(i, p)];
                    let aq = a[(i, q)];
                    dot += ap * aq;
                    npp += ap * ap;
                    nqq += aq * aq;
                }
                if dot.abs() <= tol * (npp * nqq).sqrt() || npp <= freeze2 || nqq <= freeze2 {
                    continue;
                }
                rotated = true;
                let tau = (nqq - npp) / (2.0 * dot);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for i in 0..rows {
                    let ap = a[(i, p)];
                    let aq = a[(i, q)];
                    a[(i, p)] = c * ap - s * aq;
                    a[(i, q)] = s * ap + c * aq;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(CoreError::NonConvergence {
            t_max: max_sweeps as f64,
            residual: f64::NAN,
        });
    }
    let mut sigmas = Vec::with_capacity(cols);
    for j in 0..cols {
        let norm = a.column(j).norm();
        sigmas.push(norm);
        if norm > 0.0 {
            a.column_mut(j).scale_mut(1.0 / norm);
        }
    }
    Ok((a, sigmas))
}

/// Centers the snapshots, takes an SVD and rescales the left singular
/// vectors by 1/sqrt(dV) so the modes are orthonormal under the weighted
/// inner product. The spectrum is truncated at the numerical rank
/// (1e-12 * sigma_1).
pub fn compute_pod(snapshots: &SnapshotSet) -> Result<PodBasis> {
    let mean = compute_mean(snapshots);
    let mut centered = snapshots.matrix.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let (u, sigmas) = one_sided_jacobi_svd(centered)?;
    let mut order: Vec<usize> = (0..sigmas.len()).collect();
    order.sort_by(|&a, &b| sigmas[b].total_cmp(&sigmas[a]));
    let sigma1 = sigmas[order[0]];
    if sigma1 <= 0.0 {
        return Err(CoreError::DegenerateSnapshots(
            "all snapshots identical (zero centered spectrum)".into(),
        ));
    }
    let rank_tol = 1e-12 * sigma1;
    let b = order
        .iter()
        .take_while(|&&i| sigmas[i] > rank_tol)
        .count();
    let scale = 1.0 / snapshots.dv.sqrt();
    let mut modes = DMatrix::zeros(u.nrows(), b);
    let mut singular_values = Vec::with_capacity(b);
    for (col, &src) in order.iter().take(b).enumerate() {
        let mut dst = modes.column_mut(col);
        dst.copy_from(&u.column(src));
        dst *= scale;
        // Deterministic sign: largest-magnitude entry positive.
        let mut lead = 0;
        for i in 0..dst.len() {
            if dst[i].abs() > dst[lead].abs() {
                lead = i;
            }
        }
        if dst[lead] < 0.0 {
            dst.neg_mut();
        }
        singular_values.push(sigmas[src]);
    }
    Ok(PodBasis {
        field_id: snapshots.field_id,
        mean,
        modes,
        singular_values,
        dv: snapshots.dv,
        cutoff: b,
    })
}

/// Captured-energy fraction E(n) of the leading n singular values.
pub fn energy(basis: &PodBasis, n: usize) -> Result<f64> {
    if n == 0 || n > basis.singular_values.len() {
        return Err(CoreError::InvalidArgument(format!(
            "mode count {n} outside 1..={}",
            basis.singular_values.len()
        )));
    }
    let total: f64 = basis.singular_values.iter().sum();
    let lead: f64 = basis.singular_values[..n].iter().sum();
    Ok(lead / total)
}

/// Smallest n with E(n) >= threshold.
pub fn choose_cutoff(basis: &PodBasis, threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(CoreError::InvalidArgument(
            "threshold must lie in (0, 1]".into(),
        ));
    }
    let total: f64 = basis.singular_values.iter().sum();
    let mut acc = 0.0;
    for (i, s) in basis.singular_values.iter().enumerate() {
        acc += s;
        if acc / total >= threshold {
            return Ok(i + 1);
        }
    }
    Ok(basis.singular_values.len())
}

impl PodBasis {
    pub fn cells(&self) -> usize {
        self.mean.len()
    }

    pub fn with_cutoff(mut self, cutoff: usize) -> Result<Self> {
        if cutoff > self.singular_values.len() {
            return Err(CoreError::InvalidArgument(format!(
                "cutoff {cutoff} outside 0..={}",
                self.singular_values.len()
            )));
        }
        self.cutoff = cutoff;
        Ok(self)
    }

    /// Coefficients of a single field vector: c_k = <v - mean, phi_k>.
    pub fn project_field(&self, field: &DVector<f64>) -> DVector<f64> {
        let centered = field - &self.mean;
        let mut c = DVector::zeros(self.cutoff);
        for k in 0..self.cutoff {
            c[k] = self.modes.column(k).dot(&centered) * self.dv;
        }
        c
    }

    /// Field vector from coefficients: mean + modes * c.
    pub fn reconstruct_field(&self, c: &DVector<f64>) -> DVector<f64> {
        let mut v = self.mean.clone();
        for k in 0..c.len().min(self.cutoff) {
            v.axpy(c[k], &self.modes.column(k).clone_owned(), 1.0);
        }
        v
    }
}

/// Block-diagonal arrangement of the truncated moisture and temperature
/// bases over the stacked state, with the stacked means.
#[derive(Debug, Clone)]
pub struct CombinedBasis {
    pub moisture: PodBasis,
    pub temperature: PodBasis,
}

impl CombinedBasis {
    pub fn new(moisture: PodBasis, temperature: PodBasis) -> Result<Self> {
        if moisture.field_id != FieldId::Moisture || temperature.field_id != FieldId::Temperature {
            return Err(CoreError::InvalidArgument(
                "combined basis requires one moisture and one temperature basis".into(),
            ));
        }
        if moisture.cells() != temperature.cells() {
            return Err(CoreError::DimensionMismatch(
                "field bases built on different grids".into(),
            ));
        }
        if (moisture.dv - temperature.dv).abs() > 1e-30 {
            return Err(CoreError::DimensionMismatch(
                "field bases use different cell volumes".into(),
            ));
        }
        Ok(Self {
            moisture,
            temperature,
        })
    }

    pub fn cells(&self) -> usize {
        self.moisture.cells()
    }

    pub fn dv(&self) -> f64 {
        self.moisture.dv
    }

    pub fn n_moisture(&self) -> usize {
        self.moisture.cutoff
    }

    pub fn n_temperature(&self) -> usize {
        self.temperature.cutoff
    }

    pub fn n(&self) -> usize {
        self.n_moisture() + self.n_temperature()
    }

    /// Stacked mean state z_bar.
    pub fn mean_state(&self) -> StateVector {
        let cells = self.cells();
        let mut values = DVector::zeros(2 * cells);
        values.rows_mut(0, cells).copy_from(&self.moisture.mean);
        values
            .rows_mut(cells, cells)
            .copy_from(&self.temperature.mean);
        StateVector { values, cells }
    }

    /// Coefficients of a stacked state: c = Phi^T (z - z_bar) dV.
    pub fn project(&self, z: &StateVector) -> DVector<f64> {
        let cells = self.cells();
        let dv = self.dv();
        let mut c = DVector::zeros(self.n());
        for k in 0..self.n_moisture() {
            let mut acc = 0.0;
            let col = self.moisture.modes.column(k);
            for i in 0..cells {
                acc += (z.values[i] - self.moisture.mean[i]) * col[i];
            }
            c[k] = acc * dv;
        }
        for k in 0..self.n_temperature() {
            let mut acc = 0.0;
            let col = self.temperature.modes.column(k);
            for i in 0..cells {
                acc += (z.values[cells + i] - self.temperature.mean[i]) * col[i];
            }
            c[self.n_moisture() + k] = acc * dv;
        }
        c
    }

    /// Stacked state from coefficients: z = Phi c + z_bar.
    pub fn reconstruct(&self, c: &DVector<f64>) -> StateVector {
        let mut z = self.mean_state();
        self.add_lifted(c, &mut z.values);
        z
    }

    /// Adds Phi c into a stacked vector (no mean offset).
    pub fn add_lifted(&self, c: &DVector<f64>, out: &mut DVector<f64>) {
        let cells = self.cells();
        debug_assert_eq!(c.len(), self.n());
        debug_assert_eq!(out.len(), 2 * cells);
        for k in 0..self.n_moisture() {
            let col = self.moisture.modes.column(k);
            let ck = c[k];
            for i in 0..cells {
                out[i] += ck * col[i];
            }
        }
        for k in 0..self.n_temperature() {
            let col = self.temperature.modes.column(k);
            let ck = c[self.n_moisture() + k];
            for i in 0..cells {
                out[cells + i] += ck * col[i];
            }
        }
    }

    /// Phi c as an owned stacked vector (no mean offset).
    pub fn lift(&self, c: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(2 * self.cells());
        self.add_lifted(c, &mut out);
        out
    }

    /// Weighted adjoint, dV * Phi^T v, for a stacked vector.
    pub fn project_weighted(&self, v: &DVector<f64>) -> DVector<f64> {
        let cells = self.cells();
        let dv = self.dv();
        let mut c = DVector::zeros(self.n());
        for k in 0..self.n_moisture() {
            c[k] = self.moisture.modes.column(k).dot(&v.rows(0, cells)) * dv;
        }
        for k in 0..self.n_temperature() {
            c[self.n_moisture() + k] =
                self.temperature.modes.column(k).dot(&v.rows(cells, cells)) * dv;
        }
        c
    }

    /// Dense 2N x n mode matrix (test-scale use).
    pub fn dense_phi(&self) -> DMatrix<f64> {
        let cells = self.cells();
        let mut phi = DMatrix::zeros(2 * cells, self.n());
        phi.view_mut((0, 0), (cells, self.n_moisture()))
            .copy_from(&self.moisture.modes.columns(0, self.n_moisture()));
        phi.view_mut((cells, self.n_moisture()), (cells, self.n_temperature()))
            .copy_from(&self.temperature.modes.columns(0, self.n_temperature()));
        phi
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_snapshots() -> SnapshotSet {
        // Rank-1 data: columns are multiples of one shape plus a mean.
        let shape = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let mean = DVector::from_vec(vec![5.0, 5.0, 5.0, 5.0]);
        let coeffs = [1.0, -0.5, 2.0];
        let mut m = DMatrix::zeros(4, 3);
        for (j, &a) in coeffs.iter().enumerate() {
            m.column_mut(j).copy_from(&(&mean + &shape * a));
        }
        SnapshotSet::new(FieldId::Moisture, m, vec![0.0, 1.0, 2.0], 1e-9).unwrap()
    }

    #[test]
    fn mean_of_two_columns() {
        let m = DMatrix::from_columns(&[
            DVector::from_vec(vec![0.0, 0.0]),
            DVector::from_vec(vec![1.0, 1.0]),
        ]);
        let s = SnapshotSet::new(FieldId::Moisture, m, vec![0.0, 1.0], 1.0).unwrap();
        let mean = compute_mean(&s);
        assert!((mean[0] - 0.5).abs() < 1e-15);
        assert!((mean[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rank_one_pod() {
        let s = toy_snapshots();
        let basis = compute_pod(&s).unwrap();
        assert_eq!(basis.singular_values.len(), 1);
        // dV-orthonormality of the single mode.
        let phi = basis.modes.column(0);
        assert!((phi.dot(&phi.clone_owned()) * basis.dv - 1.0).abs() < 1e-10);
        // Rank-1 reconstruction is exact.
        for j in 0..3 {
            let col = s.matrix.column(j).clone_owned();
            let c = basis.project_field(&col);
            let rec = basis.reconstruct_field(&c);
            assert!((rec - col).amax() < 1e-12);
        }
    }

    #[test]
    fn degenerate_snapshots_rejected() {
        let m = DMatrix::from_element(4, 3, 2.5);
        let s = SnapshotSet::new(FieldId::Moisture, m, vec![0.0, 1.0, 2.0], 1.0).unwrap();
        assert!(matches!(
            compute_pod(&s),
            Err(CoreError::DegenerateSnapshots(_))
        ));
    }

    #[test]
    fn energy_examples() {
        let basis = PodBasis {
            field_id: FieldId::Moisture,
            mean: DVector::zeros(2),
            modes: DMatrix::identity(2, 2),
            singular_values: vec![3.0, 1.0],
            dv: 1.0,
            cutoff: 2,
        };
        assert!((energy(&basis, 1).unwrap() - 0.75).abs() < 1e-15);
        assert!((energy(&basis, 2).unwrap() - 1.0).abs() < 1e-15);
        assert!(energy(&basis, 0).is_err());
        assert!(energy(&basis, 3).is_err());
    }

    #[test]
    fn cutoff_examples() {
        let basis = PodBasis {
            field_id: FieldId::Moisture,
            mean: DVector::zeros(2),
            modes: DMatrix::identity(2, 2),
            singular_values: vec![9.0, 1.0],
            dv: 1.0,
            cutoff: 2,
        };
        assert_eq!(choose_cutoff(&basis, 0.9).unwrap(), 1);
        assert_eq!(choose_cutoff(&basis, 1.0).unwrap(), 2);
        assert!(choose_cutoff(&basis, 0.0).is_err());
    }

    #[test]
    fn combined_projection_roundtrip() {
        // Two independent rank-1 fields.
        let sx = toy_snapshots();
        let shape = DVector::from_vec(vec![0.3, 0.1, -0.7, 0.2]);
        let mean = DVector::from_vec(vec![300.0; 4]);
        let mut mt = DMatrix::zeros(4, 3);
        for (j, a) in [0.5, 1.5, -1.0].iter().enumerate() {
            mt.column_mut(j).copy_from(&(&mean + &shape * *a));
        }
        let st = SnapshotSet::new(FieldId::Temperature, mt, vec![0.0, 1.0, 2.0], 1e-9).unwrap();
        let basis =
            CombinedBasis::new(compute_pod(&sx).unwrap(), compute_pod(&st).unwrap()).unwrap();
        assert_eq!(basis.n(), 2);
        // z_bar projects to zero.
        let c = basis.project(&basis.mean_state());
        assert!(c.amax() < 1e-12);
        // Unit coefficient along mode 1 round-trips by orthonormality.
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        let z = basis.reconstruct(&e1);
        let back = basis.project(&z);
        assert!((back - e1).amax() < 1e-10);
        // Moisture coefficients do not alter temperatures (block structure).
        let ex = DVector::from_vec(vec![2.0, 0.0]);
        let zx = basis.reconstruct(&ex);
        let zbar = basis.mean_state();
        for i in 0..4 {
            assert_eq!(zx.values[4 + i], zbar.values[4 + i]);
        }
    }
}
