//! Continuous-discrete extended Kalman filter on the reduced drying model:
//! adaptive joint integration of the state and covariance between
//! measurements, a scalar linear update at every measurement time, and the
//! normalized root-mean-square estimation-error metrics.

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};
use crate::ode::{self, AdaptiveOptions};
use crate::pod::CombinedBasis;
use crate::rom::{RomOperators, RomState};
use crate::state::Trajectory;

#[derive(Debug, Clone)]
pub struct EkfConfig {
    /// Process-noise covariance (n x n).
    pub q: DMatrix<f64>,
    /// Scalar measurement-noise variance.
    pub r: f64,
    /// Initial estimate covariance (n x n).
    pub p0: DMatrix<f64>,
    /// Spacing of the measurement grid.
    pub measurement_interval: f64,
    /// Relative step of the central finite-difference Jacobian.
    pub jacobian_step: f64,
    pub ode: AdaptiveOptions,
}

impl EkfConfig {
    /// Q = I, R = 1, P0 = p0_scale * I, 5 s measurement cadence.
    pub fn standard(n: usize, p0_scale: f64) -> Self {
        Self {
            q: DMatrix::identity(n, n),
            r: 1.0,
            p0: p0_scale * DMatrix::identity(n, n),
            measurement_interval: 5.0,
            jacobian_step: 1e-6,
            ode: AdaptiveOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.q.nrows();
        if self.q.ncols() != n || self.p0.nrows() != n || self.p0.ncols() != n {
            return Err(CoreError::DimensionMismatch(
                "Q and P0 must be square with matching sizes".into(),
            ));
        }
        for m in [&self.q, &self.p0] {
            if (m - m.transpose()).amax() > 1e-10 * m.amax().max(1.0) {
                return Err(CoreError::InvalidArgument(
                    "covariance matrices must be symmetric".into(),
                ));
            }
            if m.diagonal().iter().any(|d| *d < 0.0) {
                return Err(CoreError::InvalidArgument(
                    "covariance diagonals must be nonnegative".into(),
                ));
            }
        }
        if !(self.r > 0.0) {
            return Err(CoreError::InvalidArgument(
                "measurement variance must be positive".into(),
            ));
        }
        if !(self.measurement_interval > 0.0) || !(self.jacobian_step > 0.0) {
            return Err(CoreError::InvalidArgument(
                "measurement interval and jacobian step must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EkfState {
    pub c: DVector<f64>,
    pub p: DMatrix<f64>,
    pub t: f64,
}

/// One filtered step (posterior quantities at a measurement time).
#[derive(Debug, Clone)]
pub struct EkfStep {
    pub t: f64,
    pub measurement: f64,
    pub innovation: f64,
    /// Predicted innovation variance H P H^T + R.
    pub innovation_variance: f64,
    pub c: DVector<f64>,
    pub p_trace: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasurementSource {
    SyntheticTwin,
    File,
}

#[derive(Debug, Clone)]
pub struct MeasurementStream {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub source: MeasurementSource,
}

impl MeasurementStream {
    pub fn new(times: Vec<f64>, values: Vec<f64>, source: MeasurementSource) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(CoreError::InvalidArgument(
                "measurement stream needs matching, nonempty times and values".into(),
            ));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(CoreError::InvalidArgument(
                "measurement times must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            times,
            values,
            source,
        })
    }
}

/// Central finite-difference Jacobian of `rhs` with step
/// `step * max(1, |c_j|)` per coordinate.
pub fn jacobian<F>(mut rhs: F, t: f64, c: &DVector<f64>, step: f64) -> Result<DMatrix<f64>>
where
    F: FnMut(f64, &DVector<f64>, &mut DVector<f64>) -> Result<()>,
{
    let n = c.len();
    let mut jac = DMatrix::zeros(n, n);
    let mut cp = c.clone();
    let mut fp = DVector::zeros(n);
    let mut fm = DVector::zeros(n);
    for j in 0..n {
        let h = step * c[j].abs().max(1.0);
        cp[j] = c[j] + h;
        rhs(t, &cp, &mut fp)?;
        cp[j] = c[j] - h;
        rhs(t, &cp, &mut fm)?;
        cp[j] = c[j];
        let scale = 0.5 / h;
        for i in 0..n {
            jac[(i, j)] = (fp[i] - fm[i]) * scale;
        }
    }
    Ok(jac)
}

fn symmetrize(p: &mut DMatrix<f64>) {
    let n = p.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = v;
            p[(j, i)] = v;
        }
    }
}

/// Joint prediction of state and covariance to `t_next` for an arbitrary
/// reduced right-hand side.
pub fn predict_with<F>(
    state: &EkfState,
    mut rhs: F,
    q: &DMatrix<f64>,
    jacobian_step: f64,
    opts: &AdaptiveOptions,
    t_next: f64,
) -> Result<EkfState>
where
    F: FnMut(f64, &DVector<f64>, &mut DVector<f64>) -> Result<()> + Copy,
{
    if !(t_next > state.t) {
        return Err(CoreError::InvalidArgument(
            "prediction target must lie ahead of the current state".into(),
        ));
    }
    let n = state.c.len();
    let mut y0 = DVector::zeros(n + n * n);
    y0.rows_mut(0, n).copy_from(&state.c);
    y0.rows_mut(n, n * n)
        .copy_from_slice(state.p.as_slice());

    let mut c_buf = DVector::zeros(n);
    let mut dc = DVector::zeros(n);
    let yf = ode::integrate_adaptive(
        |t, y: &DVector<f64>, dy: &mut DVector<f64>| {
            c_buf.copy_from(&y.rows(0, n));
            rhs(t, &c_buf, &mut dc)?;
            dy.rows_mut(0, n).copy_from(&dc);
            let p = DMatrix::from_column_slice(n, n, &y.as_slice()[n..]);
            let f = jacobian(rhs, t, &c_buf, jacobian_step)?;
            let fp = &f * &p;
            let dp = &fp + fp.transpose() + q;
            dy.rows_mut(n, n * n).copy_from_slice(dp.as_slice());
            Ok(())
        },
        state.t,
        &y0,
        t_next,
        opts,
        std::iter::empty(),
        |_, _| {},
    )?;

    let c = DVector::from_column_slice(&yf.as_slice()[..n]);
    let mut p = DMatrix::from_column_slice(n, n, &yf.as_slice()[n..]);
    symmetrize(&mut p);
    Ok(EkfState { c, p, t: t_next })
}

/// Prediction step for the reduced drying model.
pub fn predict(
    state: &EkfState,
    ops: &RomOperators,
    cfg: &EkfConfig,
    t_next: f64,
) -> Result<EkfState> {
    // A shared scratch behind a RefCell keeps the closure Copy for the
    // nested Jacobian calls without reallocating per evaluation.
    let scratch = std::cell::RefCell::new(ops.make_scratch());
    let rhs = |t: f64, c: &DVector<f64>, dc: &mut DVector<f64>| {
        ops.rhs_with(t, c, &mut scratch.borrow_mut(), dc)
    };
    predict_with(state, rhs, &cfg.q, cfg.jacobian_step, &cfg.ode, t_next)
}

/// Scalar measurement update; returns the posterior together with the
/// innovation and its predicted variance.
pub fn update(
    state: &EkfState,
    w: f64,
    h: &DVector<f64>,
    offset: f64,
    r: f64,
) -> Result<(EkfState, f64, f64)> {
    let ph = &state.p * h;
    let s = h.dot(&ph) + r;
    if !(s > 0.0) || !s.is_finite() {
        return Err(CoreError::DegenerateInnovation(s));
    }
    let innovation = w - (offset + h.dot(&state.c));
    let k = &ph / s;
    let c = &state.c + &k * innovation;
    let mut p = &state.p - &k * ph.transpose();
    symmetrize(&mut p);
    Ok((
        EkfState {
            c,
            p,
            t: state.t,
        },
        innovation,
        s,
    ))
}

/// Full filter run over a measurement stream.
#[derive(Debug, Clone)]
pub struct FilterRun {
    pub steps: Vec<EkfStep>,
    pub final_state: EkfState,
}

pub fn run_filter(
    ops: &RomOperators,
    mask: &[usize],
    cfg: &EkfConfig,
    stream: &MeasurementStream,
    c0: &RomState,
) -> Result<FilterRun> {
    cfg.validate()?;
    if cfg.q.nrows() != ops.n() {
        return Err(CoreError::DimensionMismatch(
            "filter configuration does not match the reduced dimension".into(),
        ));
    }
    let h = ops.output_gradient(mask)?;
    let offset = ops.output_offset(mask)?;
    let mut state = EkfState {
        c: c0.c.clone(),
        p: cfg.p0.clone(),
        t: c0.t,
    };
    let mut steps = Vec::with_capacity(stream.times.len());
    for (k, (&t_k, &w_k)) in stream.times.iter().zip(&stream.values).enumerate() {
        if t_k > state.t {
            state = predict(&state, ops, cfg, t_k)?;
        } else if t_k < state.t {
            return Err(CoreError::InvalidArgument(format!(
                "measurement {k} at t = {t_k} predates the filter state"
            )));
        }
        let (posterior, innovation, s) = update(&state, w_k, &h, offset, cfg.r)?;
        state = posterior;
        steps.push(EkfStep {
            t: t_k,
            measurement: w_k,
            innovation,
            innovation_variance: s,
            c: state.c.clone(),
            p_trace: state.p.trace(),
        });
    }
    Ok(FilterRun {
        steps,
        final_state: state,
    })
}

/// Initial reduced state from the first temperature measurement (assumed
/// spatially uniform) and a uniform moisture guess.
pub fn init_from_measurement(w0: f64, x_guess: f64, basis: &CombinedBasis) -> Result<RomState> {
    if !(x_guess >= 0.0) {
        return Err(CoreError::InvalidArgument(
            "moisture guess must be nonnegative".into(),
        ));
    }
    let cells = basis.cells();
    let dv = basis.dv();
    let mut c = DVector::zeros(basis.n());
    for k in 0..basis.n_moisture() {
        let mut acc = 0.0;
        for i in 0..cells {
            acc += (x_guess - basis.moisture.mean[i]) * basis.moisture.modes[(i, k)];
        }
        c[k] = acc * dv;
    }
    for k in 0..basis.n_temperature() {
        let mut acc = 0.0;
        for i in 0..cells {
            acc += (w0 - basis.temperature.mean[i]) * basis.temperature.modes[(i, k)];
        }
        c[basis.n_moisture() + k] = acc * dv;
    }
    Ok(RomState { c, t: 0.0 })
}

/// Normalized root-mean-square errors of a reconstructed coefficient
/// trajectory against a full-order reference: per-cell temperature and
/// moisture errors normalized by the reference field ranges, and the
/// volume-averaged total-moisture error normalized by its range.
pub fn estimation_errors(
    truth: &Trajectory,
    estimates: &[(f64, DVector<f64>)],
    basis: &CombinedBasis,
) -> Result<(f64, f64, f64)> {
    if truth.states.len() != estimates.len() || estimates.is_empty() {
        return Err(CoreError::DimensionMismatch(format!(
            "reference has {} states, estimate has {}",
            truth.states.len(),
            estimates.len()
        )));
    }
    for (t_ref, (t_est, _)) in truth.times.iter().zip(estimates) {
        if (t_ref - t_est).abs() > 1e-9 * t_ref.abs().max(1.0) {
            return Err(CoreError::InvalidArgument(format!(
                "time grids differ: {t_ref} vs {t_est}"
            )));
        }
    }
    let cells = basis.cells();
    let m = estimates.len();
    let mut sq_t = 0.0;
    let mut sq_x = 0.0;
    let mut sq_big_x = 0.0;
    let mut min_t = f64::INFINITY;
    let mut max_t = f64::NEG_INFINITY;
    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_big_x = f64::INFINITY;
    let mut max_big_x = f64::NEG_INFINITY;
    for (state, (_, c)) in truth.states.iter().zip(estimates) {
        let rec = basis.reconstruct(c);
        let mut x_tot_ref = 0.0;
        let mut x_tot_est = 0.0;
        for i in 0..cells {
            let x_ref = state.moisture(i);
            let t_ref = state.temperature(i);
            min_x = min_x.min(x_ref);
            max_x = max_x.max(x_ref);
            min_t = min_t.min(t_ref);
            max_t = max_t.max(t_ref);
            let ex = x_ref - rec.moisture(i);
            let et = t_ref - rec.temperature(i);
            sq_x += ex * ex;
            sq_t += et * et;
            x_tot_ref += x_ref;
            x_tot_est += rec.moisture(i);
        }
        x_tot_ref /= cells as f64;
        x_tot_est /= cells as f64;
        min_big_x = min_big_x.min(x_tot_ref);
        max_big_x = max_big_x.max(x_tot_ref);
        let e = x_tot_ref - x_tot_est;
        sq_big_x += e * e;
    }
    let range_t = max_t - min_t;
    let range_x = max_x - min_x;
    let range_big_x = max_big_x - min_big_x;
    if !(range_t > 0.0) || !(range_x > 0.0) || !(range_big_x > 0.0) {
        return Err(CoreError::DegenerateRange);
    }
    let denom = (m * cells) as f64;
    Ok((
        (sq_t / denom).sqrt() / range_t,
        (sq_x / denom).sqrt() / range_x,
        (sq_big_x / m as f64).sqrt() / range_big_x,
    ))
}
