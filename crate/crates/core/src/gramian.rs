//! Empirical observability Gramians for the reduced drying model.
//!
//! The Gramian is assembled from simulated output responses to paired
//! (+/-) initial-state perturbations around a steady state, for several
//! perturbation magnitudes. Time integrals are left-endpoint Riemann sums
//! over a fixed sampling grid; the settled output is taken from the final
//! sample rather than assumed to be the steady-state output, and the
//! integrals are expanded into running moments so that no trajectory has to
//! be stored.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::material::MaterialModel;
use crate::ode::{self, AdaptiveOptions};
use crate::pod::CombinedBasis;
use crate::rom::RomOperators;
use crate::state::StateVector;

/// Largest state dimension accepted by the brute-force full-order Gramian.
pub const FULL_GRAMIAN_MAX_DIM: usize = 512;

/// A dynamical system with a scalar output, as seen by the Gramian machinery.
pub trait ObservedSystem: Sync {
    type Scratch: Send;

    fn dim(&self) -> usize;
    fn make_scratch(&self) -> Self::Scratch;
    fn rhs(
        &self,
        t: f64,
        x: &DVector<f64>,
        scratch: &mut Self::Scratch,
        dx: &mut DVector<f64>,
    ) -> Result<()>;
    fn output(&self, x: &DVector<f64>, scratch: &mut Self::Scratch) -> f64;
}

/// Reduced drying model with the averaging temperature output.
pub struct RomObserved<'a> {
    pub ops: &'a RomOperators,
    h: DVector<f64>,
    offset: f64,
}

impl<'a> RomObserved<'a> {
    pub fn new(ops: &'a RomOperators, mask: &[usize]) -> Result<Self> {
        Ok(Self {
            ops,
            h: ops.output_gradient(mask)?,
            offset: ops.output_offset(mask)?,
        })
    }
}

impl ObservedSystem for RomObserved<'_> {
    type Scratch = crate::rom::RomScratch;

    fn dim(&self) -> usize {
        self.ops.n()
    }

    fn make_scratch(&self) -> Self::Scratch {
        self.ops.make_scratch()
    }

    fn rhs(
        &self,
        t: f64,
        x: &DVector<f64>,
        scratch: &mut Self::Scratch,
        dx: &mut DVector<f64>,
    ) -> Result<()> {
        self.ops.rhs_with(t, x, scratch, dx)
    }

    fn output(&self, x: &DVector<f64>, _scratch: &mut Self::Scratch) -> f64 {
        self.offset + self.h.dot(x)
    }
}

/// Full finite-volume model with the averaging temperature output; used for
/// small verification problems only.
pub struct FullObserved<'a> {
    pub grid: &'a crate::grid::Grid,
    pub material: &'a dyn MaterialModel,
    pub ambient: &'a crate::material::AmbientConditions,
    pub mask: Vec<usize>,
}

impl ObservedSystem for FullObserved<'_> {
    type Scratch = StateVector;

    fn dim(&self) -> usize {
        2 * self.grid.cell_count()
    }

    fn make_scratch(&self) -> Self::Scratch {
        StateVector::uniform(self.grid.cell_count(), 0.0, 0.0)
    }

    fn rhs(
        &self,
        t: f64,
        x: &DVector<f64>,
        scratch: &mut Self::Scratch,
        dx: &mut DVector<f64>,
    ) -> Result<()> {
        scratch.values.copy_from(x);
        crate::fvm::rhs_into(scratch, self.grid, self.material, self.ambient, t, dx)
    }

    fn output(&self, x: &DVector<f64>, scratch: &mut Self::Scratch) -> f64 {
        scratch.values.copy_from(x);
        crate::state::measure_output(scratch, self.grid, &self.mask)
            .expect("mask validated at construction")
    }
}

/// Time integration used for the perturbation responses.
#[derive(Debug, Clone)]
pub enum GramianIntegrator {
    Adaptive(AdaptiveOptions),
    /// Fixed-step RK4 with the sampling interval as the step; used where two
    /// integration routes must agree to round-off.
    FixedRk4,
}

/// Perturbation magnitudes and sampling grid for the response simulations.
#[derive(Debug, Clone)]
pub struct GramianScheme {
    /// Perturbation magnitudes applied in the (reduced) state coordinates.
    pub magnitudes: Vec<f64>,
    /// Output sampling interval.
    pub dt: f64,
    /// Number of samples per response (left-endpoint Riemann sum).
    pub samples: usize,
    /// Relative drift between the 90%-horizon and final samples above which
    /// a response is rejected as not settled.
    pub settle_tol: f64,
}

impl Default for GramianScheme {
    fn default() -> Self {
        Self {
            magnitudes: vec![1e-7, 1e-6, 1e-5],
            dt: 0.005,
            samples: 1_000_000,
            settle_tol: 1e-2,
        }
    }
}

impl GramianScheme {
    pub fn horizon(&self) -> f64 {
        self.dt * self.samples as f64
    }

    fn validate(&self) -> Result<()> {
        if self.magnitudes.is_empty() || self.magnitudes.iter().any(|m| !(*m > 0.0)) {
            return Err(CoreError::InvalidArgument(
                "perturbation magnitudes must be positive".into(),
            ));
        }
        if !(self.dt > 0.0) || self.samples < 2 {
            return Err(CoreError::InvalidArgument(
                "sampling grid needs dt > 0 and at least two samples".into(),
            ));
        }
        Ok(())
    }
}

/// One perturbed initial condition of the response ensemble.
#[derive(Debug, Clone)]
pub struct GramianRun {
    pub magnitude_index: usize,
    /// 0 for the negative perturbation, 1 for the positive one.
    pub sign_index: usize,
    pub direction: usize,
    pub x0: DVector<f64>,
}

/// Enumerates the perturbed initial conditions: magnitudes outermost, then
/// sign, then coordinate direction.
pub fn gramian_initial_conditions(
    x_ss: &DVector<f64>,
    scheme: &GramianScheme,
) -> Vec<GramianRun> {
    let n = x_ss.len();
    let mut runs = Vec::with_capacity(scheme.magnitudes.len() * 2 * n);
    for (d, &mag) in scheme.magnitudes.iter().enumerate() {
        for (l, sign) in [-1.0f64, 1.0].into_iter().enumerate() {
            for i in 0..n {
                let mut x0 = x_ss.clone();
                x0[i] += sign * mag;
                runs.push(GramianRun {
                    magnitude_index: d,
                    sign_index: l,
                    direction: i,
                    x0,
                });
            }
        }
    }
    runs
}

/// Symmetrized Gramian with its scalar observability measure.
#[derive(Debug, Clone)]
pub struct GramianResult {
    pub w: DMatrix<f64>,
    /// dv * trace(w).
    pub kappa: f64,
}

/// Streamed per-batch statistics of the output deviations d_b(t_k):
/// s2 = dt * sum_k d d^T, s1 = dt * sum_k d, plus the final and
/// 90%-checkpoint samples and the per-trajectory amplitude.
struct BatchMoments {
    s2: DMatrix<f64>,
    s1: DVector<f64>,
    d_end: DVector<f64>,
    d_chk: DVector<f64>,
    amplitude: DVector<f64>,
}

/// Integrates the B trajectories of one (magnitude, sign) batch as a single
/// block-diagonal system so the outputs can be streamed time-aligned, and
/// accumulates the moments of `values` (a caller-chosen per-trajectory
/// deviation vector of width `width`).
fn run_batch<S, V>(
    sys: &S,
    inits: &[DVector<f64>],
    scheme: &GramianScheme,
    integrator: &GramianIntegrator,
    width: usize,
    mut values: V,
) -> Result<BatchMoments>
where
    S: ObservedSystem,
    V: FnMut(&S, &DVector<f64>, &mut S::Scratch, &mut [f64]),
{
    let m = sys.dim();
    let b = inits.len();
    let p = b * width;
    let mut y0 = DVector::zeros(b * m);
    for (j, x0) in inits.iter().enumerate() {
        y0.rows_mut(j * m, m).copy_from(x0);
    }
    let mut scratch = sys.make_scratch();
    let mut xbuf = DVector::zeros(m);
    let mut dxbuf = DVector::zeros(m);

    let mut s2 = DMatrix::zeros(p, p);
    let mut s1 = DVector::zeros(p);
    let mut d_end = DVector::zeros(p);
    let mut d_chk = DVector::zeros(p);
    let mut amplitude = DVector::<f64>::zeros(p);
    let mut v = vec![0.0f64; p];
    let chk_index = (scheme.samples - 1) * 9 / 10;

    let mut rhs = |t: f64, y: &DVector<f64>, dy: &mut DVector<f64>| -> Result<()> {
        for j in 0..b {
            xbuf.copy_from(&y.rows(j * m, m));
            sys.rhs(t, &xbuf, &mut scratch, &mut dxbuf)?;
            dy.rows_mut(j * m, m).copy_from(&dxbuf);
        }
        Ok(())
    };

    let mut sample_scratch = sys.make_scratch();
    let mut sample_buf = DVector::zeros(m);
    let mut k_seen = 0usize;
    let mut on_sample = |k: usize, y: &DVector<f64>| {
        for j in 0..b {
            sample_buf.copy_from(&y.rows(j * m, m));
            values(
                sys,
                &sample_buf,
                &mut sample_scratch,
                &mut v[j * width..(j + 1) * width],
            );
        }
        for (slot, &val) in v.iter().enumerate() {
            s1[slot] += val;
            amplitude[slot] = amplitude[slot].max(val.abs());
        }
        // Rank-one moment update, upper triangle only.
        for a in 0..p {
            let va = v[a];
            if va != 0.0 {
                for bb in a..p {
                    s2[(a, bb)] += va * v[bb];
                }
            }
        }
        if k == chk_index {
            d_chk.copy_from_slice(&v);
        }
        if k + 1 == scheme.samples {
            d_end.copy_from_slice(&v);
        }
        k_seen = k + 1;
    };

    let t_end = scheme.dt * (scheme.samples - 1) as f64;
    match integrator {
        GramianIntegrator::Adaptive(opts) => {
            let mut k = 0usize;
            ode::integrate_adaptive(
                &mut rhs,
                0.0,
                &y0,
                t_end,
                opts,
                (0..scheme.samples).map(|j| scheme.dt * j as f64),
                |_t, y| {
                    on_sample(k, y);
                    k += 1;
                },
            )?;
        }
        GramianIntegrator::FixedRk4 => {
            ode::rk4_fixed(&mut rhs, 0.0, &y0, t_end, scheme.dt, |step, _t, y| {
                on_sample(step, y)
            })?;
        }
    }
    if k_seen != scheme.samples {
        return Err(CoreError::InvalidArgument(format!(
            "sampling produced {k_seen} of {} samples",
            scheme.samples
        )));
    }
    for a in 0..p {
        for bb in 0..a {
            s2[(a, bb)] = s2[(bb, a)];
        }
    }
    s2 *= scheme.dt;
    s1 *= scheme.dt;
    Ok(BatchMoments {
        s2,
        s1,
        d_end,
        d_chk,
        amplitude,
    })
}

fn check_settled(
    m: &BatchMoments,
    scheme: &GramianScheme,
    width: usize,
    d: usize,
    l: usize,
) -> Result<()> {
    let b = m.d_end.len() / width;
    for i in 0..b {
        let mut drift = 0.0f64;
        let mut amp = 0.0f64;
        for a in 0..width {
            let slot = i * width + a;
            drift = drift.max((m.d_end[slot] - m.d_chk[slot]).abs());
            amp = amp.max(m.amplitude[slot]);
        }
        if amp > 0.0 && drift / amp > scheme.settle_tol {
            return Err(CoreError::NotSettled {
                d,
                l,
                i,
                drift: drift / amp,
            });
        }
    }
    Ok(())
}

/// Converts streamed moments into the settled-output-corrected integral
/// sum_k dt (w_i(k) - w_i(end))(w_j(k) - w_j(end)) contracted with the
/// per-trajectory weight rows `rows` (each of length `width`).
fn contract_moments(
    m: &BatchMoments,
    rows: &[&[f64]],
    width: usize,
    horizon: f64,
) -> DMatrix<f64> {
    let b = rows.len();
    let mut s2 = DMatrix::<f64>::zeros(b, b);
    let mut s1 = DVector::<f64>::zeros(b);
    let mut e = DVector::<f64>::zeros(b);
    for i in 0..b {
        for a in 0..width {
            let slot = i * width + a;
            s1[i] += rows[i][a] * m.s1[slot];
            e[i] += rows[i][a] * m.d_end[slot];
        }
    }
    for i in 0..b {
        for j in 0..b {
            let mut acc = 0.0;
            for a in 0..width {
                let ra = rows[i][a];
                if ra == 0.0 {
                    continue;
                }
                for c in 0..width {
                    acc += ra * rows[j][c] * m.s2[(i * width + a, j * width + c)];
                }
            }
            s2[(i, j)] = acc;
        }
    }
    let mut w = s2;
    for i in 0..b {
        for j in 0..b {
            w[(i, j)] += -e[i] * s1[j] - e[j] * s1[i] + horizon * e[i] * e[j];
        }
    }
    w
}

/// Empirical observability Gramian along the columns of `directions`
/// (identity when `None`), scaled by the perturbation magnitudes and
/// averaged over the +/- pairs; symmetrized on return.
pub fn empirical_gramian<S: ObservedSystem>(
    sys: &S,
    x_ss: &DVector<f64>,
    directions: Option<&DMatrix<f64>>,
    scheme: &GramianScheme,
    integrator: &GramianIntegrator,
) -> Result<DMatrix<f64>> {
    scheme.validate()?;
    let m = sys.dim();
    if x_ss.len() != m {
        return Err(CoreError::DimensionMismatch(
            "steady state does not match the system dimension".into(),
        ));
    }
    let ncols = directions.map_or(m, |d| d.ncols());
    if let Some(d) = directions {
        if d.nrows() != m {
            return Err(CoreError::DimensionMismatch(
                "direction matrix does not match the system dimension".into(),
            ));
        }
    }
    let w_ref = sys.output(x_ss, &mut sys.make_scratch());
    let horizon = scheme.horizon();

    let batches: Vec<(usize, usize, f64)> = scheme
        .magnitudes
        .iter()
        .enumerate()
        .flat_map(|(d, &mag)| [(d, 0usize, -mag), (d, 1usize, mag)])
        .collect();

    let partials: Vec<DMatrix<f64>> = batches
        .par_iter()
        .map(|&(d, l, signed_mag)| {
            let inits: Vec<DVector<f64>> = (0..ncols)
                .map(|i| {
                    let mut x0 = x_ss.clone();
                    match directions {
                        Some(dm) => x0.axpy(signed_mag, &dm.column(i).clone_owned(), 1.0),
                        None => x0[i] += signed_mag,
                    }
                    x0
                })
                .collect();
            let moments = run_batch(
                sys,
                &inits,
                scheme,
                integrator,
                1,
                |s, x, scratch, out| {
                    out[0] = s.output(x, scratch) - w_ref;
                },
            )?;
            check_settled(&moments, scheme, 1, d, l)?;
            let unit = [1.0f64];
            let rows: Vec<&[f64]> = (0..ncols).map(|_| &unit[..]).collect();
            let mut w = contract_moments(&moments, &rows, 1, horizon);
            w /= signed_mag * signed_mag;
            Ok(w)
        })
        .collect::<Result<_>>()?;

    let mut w = DMatrix::zeros(ncols, ncols);
    for p in &partials {
        w += p;
    }
    w /= (2 * scheme.magnitudes.len()) as f64;
    let wt = w.transpose();
    w = 0.5 * (w + wt);
    Ok(w)
}

/// Gramian of the reduced model restricted to its own coordinates, with the
/// observability measure kappa = dv * trace.
pub fn reduced_gramian(
    ops: &RomOperators,
    c_ss: &DVector<f64>,
    mask: &[usize],
    scheme: &GramianScheme,
    integrator: &GramianIntegrator,
) -> Result<GramianResult> {
    let sys = RomObserved::new(ops, mask)?;
    let w = empirical_gramian(&sys, c_ss, None, scheme, integrator)?;
    let kappa = observability_measure(&w, ops.grid.cell_volume);
    Ok(GramianResult { w, kappa })
}

/// Brute-force full-order Gramian; refuses dimensions beyond the
/// verification scale.
pub fn empirical_gramian_full<S: ObservedSystem>(
    sys: &S,
    x_ss: &DVector<f64>,
    directions: Option<&DMatrix<f64>>,
    scheme: &GramianScheme,
    integrator: &GramianIntegrator,
) -> Result<DMatrix<f64>> {
    let dim = directions.map_or(sys.dim(), |d| d.ncols());
    if dim > FULL_GRAMIAN_MAX_DIM {
        return Err(CoreError::TestScaleExceeded {
            dim,
            threshold: FULL_GRAMIAN_MAX_DIM,
        });
    }
    empirical_gramian(sys, x_ss, directions, scheme, integrator)
}

/// Extends the Euclidean-orthonormal mode block to a full orthonormal
/// direction matrix: the first n columns are sqrt(dv) * Phi, the rest an
/// orthonormal complement.
pub fn build_perturbation_matrix(basis: &CombinedBasis) -> Result<DMatrix<f64>> {
    let m = 2 * basis.cells();
    if m > FULL_GRAMIAN_MAX_DIM {
        return Err(CoreError::TestScaleExceeded {
            dim: m,
            threshold: FULL_GRAMIAN_MAX_DIM,
        });
    }
    let n = basis.n();
    let sqrt_dv = basis.dv().sqrt();
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(m);
    let phi = basis.dense_phi();
    for j in 0..n {
        cols.push(phi.column(j) * sqrt_dv);
    }
    for j in 0..m {
        let mut v = DVector::zeros(m);
        v[j] = 1.0;
        // Two rounds of Gram-Schmidt for orthogonality to round-off.
        for _ in 0..2 {
            for c in &cols {
                let proj = c.dot(&v);
                v.axpy(-proj, c, 1.0);
            }
        }
        let norm = v.norm();
        if norm > 1e-8 {
            v /= norm;
            cols.push(v);
            if cols.len() == m {
                break;
            }
        }
    }
    if cols.len() != m {
        return Err(CoreError::DegenerateRange);
    }
    Ok(DMatrix::from_columns(&cols))
}

/// Lifted Gramian dv^2 * Phi W Phi^T kept in factored form.
pub struct LiftedGramian {
    pub dv: f64,
    pub phi: DMatrix<f64>,
    pub core: DMatrix<f64>,
}

/// Lifts a reduced Gramian to the full state space without forming the
/// dense matrix.
pub fn lift_gramian(basis: &CombinedBasis, w: &DMatrix<f64>) -> Result<LiftedGramian> {
    let n = basis.n();
    if w.nrows() != n || w.ncols() != n {
        return Err(CoreError::DimensionMismatch(format!(
            "gramian is {}x{}, basis has {n} modes",
            w.nrows(),
            w.ncols()
        )));
    }
    Ok(LiftedGramian {
        dv: basis.dv(),
        phi: basis.dense_phi(),
        core: w.clone(),
    })
}

impl LiftedGramian {
    pub fn trace(&self) -> f64 {
        let gram = self.phi.transpose() * &self.phi;
        self.dv * self.dv * (&self.core * gram).trace()
    }

    pub fn quadratic_form(&self, v: &DVector<f64>) -> f64 {
        let pv = self.phi.transpose() * v;
        self.dv * self.dv * (pv.transpose() * &self.core * pv)[(0, 0)]
    }

    /// Dense lifted Gramian; verification scale only.
    pub fn dense(&self) -> Result<DMatrix<f64>> {
        let m = self.phi.nrows();
        if m > FULL_GRAMIAN_MAX_DIM {
            return Err(CoreError::TestScaleExceeded {
                dim: m,
                threshold: FULL_GRAMIAN_MAX_DIM,
            });
        }
        Ok(self.dv * self.dv * &self.phi * &self.core * self.phi.transpose())
    }
}

/// Eigenpairs of dv * W, sorted by descending eigenvalue, with each vector's
/// largest-magnitude entry made positive.
pub fn gramian_eigs(w: &DMatrix<f64>, dv: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if w.nrows() != w.ncols() {
        return Err(CoreError::DimensionMismatch("gramian must be square".into()));
    }
    let eig = (dv * w).symmetric_eigen();
    let n = w.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut values = DVector::zeros(n);
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &idx) in order.iter().enumerate() {
        values[k] = eig.eigenvalues[idx];
        let col = eig.eigenvectors.column(idx);
        let pivot = col.iter().cloned().fold(0.0f64, |acc: f64, v| {
            if v.abs() > acc.abs() {
                v
            } else {
                acc
            }
        });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        vectors.column_mut(k).copy_from(&(col * sign));
    }
    Ok((values, vectors))
}

/// Scalar observability measure dv * trace(W).
pub fn observability_measure(w: &DMatrix<f64>, dv: f64) -> f64 {
    dv * w.trace()
}

/// Observability measure of every surface cell's single-cell temperature
/// output, computed from one shared response ensemble. The output is affine
/// with support only on the temperature modes, so per-cell Gramian traces
/// are contractions of the streamed temperature-coefficient moments.
pub fn position_sweep(
    ops: &RomOperators,
    c_ss: &DVector<f64>,
    scheme: &GramianScheme,
    integrator: &GramianIntegrator,
) -> Result<Vec<(usize, f64)>> {
    scheme.validate()?;
    let n = ops.n();
    let n_t = ops.basis.n_temperature();
    if c_ss.len() != n {
        return Err(CoreError::DimensionMismatch(
            "steady state does not match the reduced dimension".into(),
        ));
    }
    // Output row of an arbitrary mask never touches moisture modes; reuse
    // the plain reduced dynamics with a dummy single-cell output.
    let sys = RomObserved::new(ops, &[ops.grid.surface_cells[0].0])?;
    let n_x = ops.basis.n_moisture();
    let horizon = scheme.horizon();

    let batches: Vec<(usize, usize, f64)> = scheme
        .magnitudes
        .iter()
        .enumerate()
        .flat_map(|(d, &mag)| [(d, 0usize, -mag), (d, 1usize, mag)])
        .collect();

    let moments: Vec<(f64, BatchMoments)> = batches
        .par_iter()
        .map(|&(d, l, signed_mag)| {
            let inits: Vec<DVector<f64>> = (0..n)
                .map(|i| {
                    let mut x0 = c_ss.clone();
                    x0[i] += signed_mag;
                    x0
                })
                .collect();
            let m = run_batch(
                &sys,
                &inits,
                scheme,
                integrator,
                n_t,
                |_s, x, _scratch, out| {
                    for a in 0..n_t {
                        out[a] = x[n_x + a] - c_ss[n_x + a];
                    }
                },
            )?;
            check_settled(&m, scheme, n_t, d, l)?;
            Ok((signed_mag, m))
        })
        .collect::<Result<_>>()?;

    let weight = 1.0 / (2 * scheme.magnitudes.len()) as f64;
    let mut out = Vec::with_capacity(ops.grid.surface_cells.len());
    for (cell, _faces) in &ops.grid.surface_cells {
        let row: Vec<f64> = (0..n_t)
            .map(|a| ops.basis.temperature.modes[(*cell, a)])
            .collect();
        let mut trace = 0.0;
        for (signed_mag, m) in &moments {
            // Diagonal of the contracted Gramian only.
            for i in 0..n {
                let mut s2 = 0.0;
                let mut s1 = 0.0;
                let mut e = 0.0;
                for a in 0..n_t {
                    let slot = i * n_t + a;
                    s1 += row[a] * m.s1[slot];
                    e += row[a] * m.d_end[slot];
                    for c in 0..n_t {
                        s2 += row[a] * row[c] * m.s2[(slot, i * n_t + c)];
                    }
                }
                trace += (s2 - 2.0 * e * s1 + horizon * e * e) / (signed_mag * signed_mag);
            }
        }
        out.push((*cell, ops.grid.cell_volume * weight * trace));
    }
    Ok(out)
}
