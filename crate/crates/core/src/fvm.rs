//! Structured-grid finite-volume discretization of the coupled moisture
//! diffusion and heat conduction equations with flux boundary conditions.
//!
//! Interior faces use a two-point flux approximation with arithmetically
//! averaged face coefficients. Boundary faces substitute the flux laws of the
//! material model, evaluated at the boundary cell state, with outward-positive
//! orientation: each boundary face adds J * A / dV = J / cell_size to the cell
//! balance. The temperature balance is divided by the local volumetric heat
//! capacity s(x).

use nalgebra::DVector;

use crate::error::{CoreError, Result};
use crate::grid::{Axis, Grid};
use crate::material::{AmbientConditions, MaterialModel};
use crate::state::{StateVector, Trajectory};

/// Default safety factor on the diffusive stability bound.
pub const STABILITY_SAFETY: f64 = 0.9;

/// Time derivative of the stacked state, f(z) of the semi-discrete model.
pub fn rhs(
    z: &StateVector,
    grid: &Grid,
    mat: &dyn MaterialModel,
    amb: &AmbientConditions,
    t: f64,
) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(2 * grid.cell_count());
    rhs_into(z, grid, mat, amb, t, &mut out)?;
    Ok(out)
}

pub fn rhs_into(
    z: &StateVector,
    grid: &Grid,
    mat: &dyn MaterialModel,
    amb: &AmbientConditions,
    t: f64,
    out: &mut DVector<f64>,
) -> Result<()> {
    let n = grid.cell_count();
    debug_assert_eq!(z.cells, n);
    debug_assert_eq!(out.len(), 2 * n);
    let h = grid.cell_size;
    let inv_h2 = 1.0 / (h * h);
    let inv_h = 1.0 / h;
    let ambient = amb.at(t);
    let x = z.moisture_slice();
    let temp = z.temperature_slice();

    // Per-cell coefficients.
    let mut delta = vec![[0.0f64; 3]; n];
    let mut lambda = vec![[0.0f64; 3]; n];
    let mut s = vec![0.0f64; n];
    for i in 0..n {
        if !mat.admissible(x[i], temp[i]) {
            return Err(CoreError::AdmissibleRange {
                cell: i,
                moisture: x[i],
                temperature: temp[i],
            });
        }
        delta[i] = mat.moisture_diffusivity(temp[i]);
        lambda[i] = mat.heat_conductivity(x[i]);
        s[i] = mat.heat_capacity(x[i]);
    }

    let out = out.as_mut_slice();
    out.fill(0.0);
    let (dx_out, dt_out) = out.split_at_mut(n);

    // Interior faces: accumulate the two-point fluxes into both cells.
    let strides = [1usize, grid.n_x, grid.n_x * grid.n_y];
    let counts = [grid.n_x, grid.n_y, grid.n_z];
    for axis in [Axis::X, Axis::Y, Axis::Z] {
        let a = axis.index();
        if counts[a] < 2 {
            continue;
        }
        let stride = strides[a];
        for k in 0..grid.n_z {
            for j in 0..grid.n_y {
                for i in 0..grid.n_x {
                    // Face between cell and its positive-axis neighbor.
                    let at_end = match axis {
                        Axis::X => i + 1 == grid.n_x,
                        Axis::Y => j + 1 == grid.n_y,
                        Axis::Z => k + 1 == grid.n_z,
                    };
                    if at_end {
                        continue;
                    }
                    let c = grid.index(i, j, k);
                    let nb = c + stride;
                    let df = 0.5 * (delta[c][a] + delta[nb][a]);
                    let lf = 0.5 * (lambda[c][a] + lambda[nb][a]);
                    let fx = df * (x[nb] - x[c]) * inv_h2;
                    let ft = lf * (temp[nb] - temp[c]) * inv_h2;
                    dx_out[c] += fx;
                    dx_out[nb] -= fx;
                    dt_out[c] += ft;
                    dt_out[nb] -= ft;
                }
            }
        }
    }

    // Boundary faces: substitute the flux laws.
    let dh_rho = mat.evaporation_heat() * mat.dry_density();
    for (c, faces) in &grid.surface_cells {
        let c = *c;
        let jx = mat.moisture_flux(x[c], temp[c], &ambient);
        let jt = mat.heat_flux(x[c], temp[c], &ambient)
            + dh_rho * mat.evaporation_flux(x[c], temp[c], &ambient);
        let nf = faces.len() as f64;
        dx_out[c] += nf * jx * inv_h;
        dt_out[c] += nf * jt * inv_h;
    }

    // Heat equation is divided by the volumetric heat capacity.
    for i in 0..n {
        dt_out[i] /= s[i];
    }
    Ok(())
}

/// Maximal admissible RK4 time step from the diffusive stability bounds,
/// sampled over the admissible (x, T) box, before the safety factor.
pub fn stability_dt(grid: &Grid, mat: &dyn MaterialModel) -> f64 {
    let h2 = grid.cell_size * grid.cell_size;
    let mut max_trace_delta = 0.0f64;
    let mut max_trace_lambda = 0.0f64;
    let mut min_s = f64::INFINITY;
    for xi in 0..=24 {
        let x = 1.2 * xi as f64 / 24.0;
        for ti in 0..=24 {
            let t = 270.0 + 150.0 * ti as f64 / 24.0;
            if !mat.admissible(x, t) {
                continue;
            }
            let d: f64 = mat.moisture_diffusivity(t).iter().sum();
            let l: f64 = mat.heat_conductivity(x).iter().sum();
            max_trace_delta = max_trace_delta.max(d);
            max_trace_lambda = max_trace_lambda.max(l);
            min_s = min_s.min(mat.heat_capacity(x));
        }
    }
    let bound_x = if max_trace_delta > 0.0 {
        h2 / (2.0 * max_trace_delta)
    } else {
        f64::INFINITY
    };
    let bound_t = if max_trace_lambda > 0.0 {
        h2 * min_s / (2.0 * max_trace_lambda)
    } else {
        f64::INFINITY
    };
    bound_x.min(bound_t)
}

/// Fixed-step RK4 integration with snapshot recording.
///
/// Snapshots are recorded every `record_every` steps (the initial state is
/// always the first snapshot); the final state is appended even if it does
/// not fall on the recording stride.
pub fn integrate(
    z0: &StateVector,
    grid: &Grid,
    mat: &dyn MaterialModel,
    amb: &AmbientConditions,
    t_span: (f64, f64),
    dt: f64,
    record_every: usize,
) -> Result<Trajectory> {
    if !(dt > 0.0) {
        return Err(CoreError::InvalidArgument("dt must be positive".into()));
    }
    if record_every == 0 {
        return Err(CoreError::InvalidArgument(
            "record_every must be positive".into(),
        ));
    }
    let max_dt = STABILITY_SAFETY * stability_dt(grid, mat);
    if dt > max_dt {
        return Err(CoreError::StabilityBound { dt, max_dt });
    }
    let (t0, t1) = t_span;
    if t1 < t0 {
        return Err(CoreError::InvalidArgument(
            "t_span end before start".into(),
        ));
    }

    let dim = 2 * grid.cell_count();
    let mut z = z0.clone();
    let mut times = vec![t0];
    let mut states = vec![z.clone()];
    let mut clamp_events = 0usize;

    let mut k1 = DVector::zeros(dim);
    let mut k2 = DVector::zeros(dim);
    let mut k3 = DVector::zeros(dim);
    let mut k4 = DVector::zeros(dim);
    let mut tmp = z.clone();

    let steps = ((t1 - t0) / dt).ceil() as usize;
    let mut t = t0;
    for step in 1..=steps {
        let hstep = dt.min(t1 - t);
        if hstep <= 0.0 {
            break;
        }
        rhs_into(&z, grid, mat, amb, t, &mut k1)?;
        tmp.values.copy_from(&z.values);
        tmp.values.axpy(0.5 * hstep, &k1, 1.0);
        rhs_into(&tmp, grid, mat, amb, t + 0.5 * hstep, &mut k2)?;
        tmp.values.copy_from(&z.values);
        tmp.values.axpy(0.5 * hstep, &k2, 1.0);
        rhs_into(&tmp, grid, mat, amb, t + 0.5 * hstep, &mut k3)?;
        tmp.values.copy_from(&z.values);
        tmp.values.axpy(hstep, &k3, 1.0);
        rhs_into(&tmp, grid, mat, amb, t + hstep, &mut k4)?;

        let w = hstep / 6.0;
        z.values.axpy(w, &k1, 1.0);
        z.values.axpy(2.0 * w, &k2, 1.0);
        z.values.axpy(2.0 * w, &k3, 1.0);
        z.values.axpy(w, &k4, 1.0);
        t += hstep;

        // Negative-moisture guard: clamp round-off undershoot, reject more.
        for c in 0..grid.cell_count() {
            let v = z.values[c];
            if v < 0.0 {
                if v < -1e-9 {
                    return Err(CoreError::NegativeMoisture { cell: c, value: v });
                }
                z.values[c] = 0.0;
                clamp_events += 1;
            }
        }
        if !z.values.sum().is_finite() {
            return Err(CoreError::Divergence { time: t });
        }

        if step % record_every == 0 {
            times.push(t);
            states.push(z.clone());
        }
    }
    if (times.last().unwrap() - t).abs() > 1e-12 * t.abs().max(1.0) {
        times.push(t);
        states.push(z.clone());
    }
    Ok(Trajectory {
        times,
        states,
        clamp_events,
    })
}

/// Integrates until the infinity norm of the right-hand side drops below
/// `tol`; returns the steady state and the time at which it was reached.
pub fn find_steady_state(
    z0: &StateVector,
    grid: &Grid,
    mat: &dyn MaterialModel,
    amb: &AmbientConditions,
    tol: f64,
    t_max: f64,
) -> Result<(StateVector, f64)> {
    if !(tol > 0.0) {
        return Err(CoreError::InvalidArgument("tol must be positive".into()));
    }
    let residual = |z: &StateVector, t: f64| -> Result<f64> {
        Ok(rhs(z, grid, mat, amb, t)?.amax())
    };
    if residual(z0, 0.0)? < tol {
        return Ok((z0.clone(), 0.0));
    }
    let dt = STABILITY_SAFETY * stability_dt(grid, mat);
    let chunk = 50usize;
    let mut z = z0.clone();
    let mut t = 0.0;
    let mut res = f64::INFINITY;
    while t < t_max {
        let t_end = (t + chunk as f64 * dt).min(t_max);
        let traj = integrate(&z, grid, mat, amb, (t, t_end), dt, chunk)?;
        z = traj.last().clone();
        t = *traj.times.last().unwrap();
        res = residual(&z, t)?;
        if res < tol {
            return Ok((z, t));
        }
    }
    Err(CoreError::NonConvergence {
        t_max,
        residual: res,
    })
}
