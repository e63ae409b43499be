//! Explicit ODE integrators: adaptive Dormand-Prince 5(4) with cubic-Hermite
//! dense output, and a fixed-step RK4 used where bit-for-bit agreement
//! between two integration routes matters.

use nalgebra::DVector;

use crate::error::{CoreError, Result};

#[derive(Debug, Clone)]
pub struct AdaptiveOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_step: f64,
    pub initial_step: Option<f64>,
}

impl Default for AdaptiveOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-7,
            atol: 1e-10,
            max_step: f64::INFINITY,
            initial_step: None,
        }
    }
}

const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const B_ERR: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];

/// Integrates y' = f(t, y) from `t0` to `t_end`, invoking `on_sample` for
/// each time yielded by `sample_times` (which must be nondecreasing and lie
/// in [t0, t_end]). Returns the state at `t_end`.
pub fn integrate_adaptive<F, S>(
    mut f: F,
    t0: f64,
    y0: &DVector<f64>,
    t_end: f64,
    opts: &AdaptiveOptions,
    sample_times: impl IntoIterator<Item = f64>,
    mut on_sample: S,
) -> Result<DVector<f64>>
where
    F: FnMut(f64, &DVector<f64>, &mut DVector<f64>) -> Result<()>,
    S: FnMut(f64, &DVector<f64>),
{
    let dim = y0.len();
    let mut samples = sample_times.into_iter();
    let mut next_sample = samples.next();

    let mut y = y0.clone();
    let mut t = t0;
    let mut k: Vec<DVector<f64>> = (0..7).map(|_| DVector::zeros(dim)).collect();
    let mut ytmp = DVector::zeros(dim);
    let mut yerr = DVector::zeros(dim);
    let mut interp = DVector::zeros(dim);

    // Emit samples at or before t0.
    while let Some(ts) = next_sample {
        if ts <= t0 {
            on_sample(ts, &y);
            next_sample = samples.next();
        } else {
            break;
        }
    }
    if t_end <= t0 {
        return Ok(y);
    }

    f(t, &y, &mut k[0])?;
    let mut h = opts
        .initial_step
        .unwrap_or((t_end - t0) * 1e-3)
        .min(opts.max_step)
        .min(t_end - t0);

    loop {
        if t >= t_end {
            break;
        }
        h = h.min(t_end - t).min(opts.max_step);
        if h < 1e-14 * t.abs().max(1.0) {
            return Err(CoreError::StepSizeUnderflow { time: t });
        }

        for stage in 0..6 {
            ytmp.copy_from(&y);
            for (j, kj) in k.iter().take(stage + 1).enumerate() {
                let a = A[stage][j];
                if a != 0.0 {
                    ytmp.axpy(h * a, kj, 1.0);
                }
            }
            let (head, tail) = k.split_at_mut(stage + 1);
            let _ = head;
            f(t + C[stage] * h, &ytmp, &mut tail[0])?;
        }
        // 5th-order solution is the stage-6 combination; ytmp holds it after
        // the last stage loop iteration used A[5] (the b row).
        let ynew = &ytmp;
        // k[6] = f(t + h, ynew) (FSAL).
        yerr.fill(0.0);
        for (j, kj) in k.iter().enumerate() {
            let b = B_ERR[j];
            if b != 0.0 {
                yerr.axpy(h * b, kj, 1.0);
            }
        }

        let mut err = 0.0f64;
        for i in 0..dim {
            let sc = opts.atol + opts.rtol * y[i].abs().max(ynew[i].abs());
            let e = yerr[i] / sc;
            err += e * e;
        }
        let err = (err / dim as f64).sqrt();

        if err <= 1.0 {
            // Accept.
            let t_new = t + h;
            // Dense output over [t, t_new] via cubic Hermite with the
            // derivative at both ends (k[0] at t, k[6] at t_new).
            while let Some(ts) = next_sample {
                if ts <= t_new || (t_new >= t_end && ts <= t_end + 1e-9 * t_end.abs().max(1.0)) {
                    let theta = ((ts - t) / h).clamp(0.0, 1.0);
                    let h00 = (1.0 + 2.0 * theta) * (1.0 - theta) * (1.0 - theta);
                    let h10 = theta * (1.0 - theta) * (1.0 - theta);
                    let h01 = theta * theta * (3.0 - 2.0 * theta);
                    let h11 = theta * theta * (theta - 1.0);
                    interp.copy_from(&y);
                    interp *= h00;
                    interp.axpy(h10 * h, &k[0], 1.0);
                    interp.axpy(h01, ynew, 1.0);
                    interp.axpy(h11 * h, &k[6], 1.0);
                    on_sample(ts, &interp);
                    next_sample = samples.next();
                } else {
                    break;
                }
            }
            y.copy_from(ynew);
            k.swap(0, 6); // FSAL
            t = t_new;
            let fac = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            h *= fac;
        } else if err.is_finite() {
            h *= (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
        } else {
            h *= 0.1;
        }
    }
    Ok(y)
}

/// Fixed-step RK4; `on_step` is invoked with the state after every step
/// (and once with the initial state).
pub fn rk4_fixed<F, S>(
    mut f: F,
    t0: f64,
    y0: &DVector<f64>,
    t_end: f64,
    dt: f64,
    mut on_step: S,
) -> Result<DVector<f64>>
where
    F: FnMut(f64, &DVector<f64>, &mut DVector<f64>) -> Result<()>,
    S: FnMut(usize, f64, &DVector<f64>),
{
    if !(dt > 0.0) {
        return Err(CoreError::InvalidArgument("dt must be positive".into()));
    }
    let dim = y0.len();
    let mut y = y0.clone();
    let mut k1 = DVector::zeros(dim);
    let mut k2 = DVector::zeros(dim);
    let mut k3 = DVector::zeros(dim);
    let mut k4 = DVector::zeros(dim);
    let mut tmp = DVector::zeros(dim);
    on_step(0, t0, &y);
    let steps = ((t_end - t0) / dt).round().max(0.0) as usize;
    let mut t = t0;
    for step in 1..=steps {
        f(t, &y, &mut k1)?;
        tmp.copy_from(&y);
        tmp.axpy(0.5 * dt, &k1, 1.0);
        f(t + 0.5 * dt, &tmp, &mut k2)?;
        tmp.copy_from(&y);
        tmp.axpy(0.5 * dt, &k2, 1.0);
        f(t + 0.5 * dt, &tmp, &mut k3)?;
        tmp.copy_from(&y);
        tmp.axpy(dt, &k3, 1.0);
        f(t + dt, &tmp, &mut k4)?;
        let w = dt / 6.0;
        y.axpy(w, &k1, 1.0);
        y.axpy(2.0 * w, &k2, 1.0);
        y.axpy(2.0 * w, &k3, 1.0);
        y.axpy(w, &k4, 1.0);
        t = t0 + step as f64 * dt;
        on_step(step, t, &y);
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptive_matches_exponential_decay() {
        let y0 = DVector::from_vec(vec![1.0, 2.0]);
        let opts = AdaptiveOptions {
            rtol: 1e-10,
            atol: 1e-12,
            ..Default::default()
        };
        let mut sampled = Vec::new();
        let yf = integrate_adaptive(
            |_t, y: &DVector<f64>, dy: &mut DVector<f64>| {
                dy[0] = -y[0];
                dy[1] = -2.0 * y[1];
                Ok(())
            },
            0.0,
            &y0,
            3.0,
            &opts,
            (0..=30).map(|j| 0.1 * j as f64),
            |t, y| sampled.push((t, y[0])),
        )
        .unwrap();
        assert!((yf[0] - (-3.0f64).exp()).abs() < 1e-8);
        assert!((yf[1] - 2.0 * (-6.0f64).exp()).abs() < 1e-8);
        assert_eq!(sampled.len(), 31);
        for &(t, v) in &sampled {
            assert!((v - (-t).exp()).abs() < 1e-6, "dense output at t={t}");
        }
    }

    #[test]
    fn rk4_order() {
        let y0 = DVector::from_vec(vec![1.0]);
        let run = |dt: f64| {
            let yf = rk4_fixed(
                |_t, y: &DVector<f64>, dy: &mut DVector<f64>| {
                    dy[0] = -y[0];
                    Ok(())
                },
                0.0,
                &y0,
                1.0,
                dt,
                |_, _, _| {},
            )
            .unwrap();
            (yf[0] - (-1.0f64).exp()).abs()
        };
        let e1 = run(0.1);
        let e2 = run(0.05);
        let ratio = e1 / e2;
        assert!(ratio > 12.0 && ratio < 20.0, "RK4 order ratio {ratio}");
    }
}
