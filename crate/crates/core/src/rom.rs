//! Galerkin reduced-order model of the finite-volume drying dynamics.
//!
//! The reduced right-hand side is assembled from the discrete analogue of the
//! Gauss-theorem form: a face loop over mode-gradient stencils for the volume
//! integrals (reusing the FVM two-point stencils) plus a boundary loop over
//! mode traces for the surface integrals. For the temperature rows the
//! inverse volumetric heat capacity is folded into the test function
//! cellwise, which makes the assembly exactly the weighted projection of the
//! finite-volume right-hand side.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};
use crate::grid::{Axis, Grid};
use crate::material::{AmbientConditions, MaterialModel};
use crate::ode::{self, AdaptiveOptions};
use crate::pod::CombinedBasis;
use crate::state::StateVector;

/// Reduced state: Galerkin coefficients ordered (c_x, c_T).
#[derive(Debug, Clone)]
pub struct RomState {
    pub c: DVector<f64>,
    pub t: f64,
}

#[derive(Debug, Clone, Copy)]
struct InteriorFace {
    cell: u32,
    neighbor: u32,
    axis: u8,
}

/// Precomputed state-independent structure of the reduced model.
pub struct RomOperators {
    pub basis: CombinedBasis,
    pub grid: Grid,
    pub material: Arc<dyn MaterialModel>,
    pub ambient: AmbientConditions,
    faces: Vec<InteriorFace>,
}

/// Precomputes face stencils and boundary traces for the reduced model.
pub fn assemble(
    basis: CombinedBasis,
    grid: Grid,
    material: Arc<dyn MaterialModel>,
    ambient: AmbientConditions,
) -> Result<RomOperators> {
    if basis.cells() != grid.cell_count() {
        return Err(CoreError::DimensionMismatch(format!(
            "basis built for {} cells, grid has {}",
            basis.cells(),
            grid.cell_count()
        )));
    }
    if (basis.dv() - grid.cell_volume).abs() > 1e-24 {
        return Err(CoreError::DimensionMismatch(
            "basis cell volume does not match the grid".into(),
        ));
    }
    let mut faces = Vec::new();
    for axis in [Axis::X, Axis::Y, Axis::Z] {
        let a = axis.index();
        let stride = [1, grid.n_x, grid.n_x * grid.n_y][a];
        for k in 0..grid.n_z {
            for j in 0..grid.n_y {
                for i in 0..grid.n_x {
                    let at_end = match axis {
                        Axis::X => i + 1 == grid.n_x,
                        Axis::Y => j + 1 == grid.n_y,
                        Axis::Z => k + 1 == grid.n_z,
                    };
                    if at_end {
                        continue;
                    }
                    let c = grid.index(i, j, k);
                    faces.push(InteriorFace {
                        cell: c as u32,
                        neighbor: (c + stride) as u32,
                        axis: a as u8,
                    });
                }
            }
        }
    }
    Ok(RomOperators {
        basis,
        grid,
        material,
        ambient,
        faces,
    })
}

/// Reusable buffers for repeated right-hand side evaluations.
pub struct RomScratch {
    z: DVector<f64>,
    delta: Vec<[f64; 3]>,
    lambda: Vec<[f64; 3]>,
    inv_s: Vec<f64>,
    /// Temperature test functions phi_T / s, cells x n_T, column-major.
    psi: DMatrix<f64>,
}

impl RomOperators {
    pub fn n(&self) -> usize {
        self.basis.n()
    }

    pub fn make_scratch(&self) -> RomScratch {
        let cells = self.grid.cell_count();
        RomScratch {
            z: DVector::zeros(2 * cells),
            delta: vec![[0.0; 3]; cells],
            lambda: vec![[0.0; 3]; cells],
            inv_s: vec![0.0; cells],
            psi: DMatrix::zeros(cells, self.basis.n_temperature()),
        }
    }

    /// d/dt c, allocating fresh scratch.
    pub fn rhs(&self, t: f64, c: &DVector<f64>) -> Result<DVector<f64>> {
        let mut scratch = self.make_scratch();
        let mut out = DVector::zeros(self.n());
        self.rhs_with(t, c, &mut scratch, &mut out)?;
        Ok(out)
    }

    pub fn rhs_with(
        &self,
        t: f64,
        c: &DVector<f64>,
        scratch: &mut RomScratch,
        out: &mut DVector<f64>,
    ) -> Result<()> {
        let cells = self.grid.cell_count();
        let n_x = self.basis.n_moisture();
        let n_t = self.basis.n_temperature();
        debug_assert_eq!(c.len(), n_x + n_t);
        debug_assert_eq!(out.len(), n_x + n_t);
        out.fill(0.0);
        if n_x + n_t == 0 {
            return Ok(());
        }
        let h = self.grid.cell_size;
        let area = self.grid.face_area();
        let inv_h2_dv = self.grid.cell_volume / (h * h);
        let ambient = self.ambient.at(t);
        let mat = self.material.as_ref();

        // Reconstruct fields and evaluate coefficients cellwise.
        scratch
            .z
            .rows_mut(0, cells)
            .copy_from(&self.basis.moisture.mean);
        scratch
            .z
            .rows_mut(cells, cells)
            .copy_from(&self.basis.temperature.mean);
        self.basis.add_lifted(c, &mut scratch.z);
        {
            // Reconstructions undershoot the physical bounds by the basis
            // truncation error; evaluate on the projected state instead.
            let (xs, ts) = scratch.z.as_mut_slice().split_at_mut(cells);
            for i in 0..cells {
                match mat.project_admissible(xs[i], ts[i]) {
                    Some((xi, ti)) => {
                        xs[i] = xi;
                        ts[i] = ti;
                    }
                    None => {
                        return Err(CoreError::AdmissibleRange {
                            cell: i,
                            moisture: xs[i],
                            temperature: ts[i],
                        })
                    }
                }
            }
        }
        let (x, temp) = scratch.z.as_slice().split_at(cells);
        for i in 0..cells {
            scratch.delta[i] = mat.moisture_diffusivity(temp[i]);
            scratch.lambda[i] = mat.heat_conductivity(x[i]);
            scratch.inv_s[i] = 1.0 / mat.heat_capacity(x[i]);
        }
        for l in 0..n_t {
            let phi = self.basis.temperature.modes.column(l);
            let mut col = scratch.psi.column_mut(l);
            for i in 0..cells {
                col[i] = phi[i] * scratch.inv_s[i];
            }
        }

        let (out_x, out_t) = out.as_mut_slice().split_at_mut(n_x);

        // Volume integrals via face-gradient stencils.
        for f in &self.faces {
            let ci = f.cell as usize;
            let ni = f.neighbor as usize;
            let a = f.axis as usize;
            let df = 0.5 * (scratch.delta[ci][a] + scratch.delta[ni][a]);
            let lf = 0.5 * (scratch.lambda[ci][a] + scratch.lambda[ni][a]);
            let flux_x = df * (x[ni] - x[ci]) * inv_h2_dv;
            let flux_t = lf * (temp[ni] - temp[ci]) * inv_h2_dv;
            for l in 0..n_x {
                let col = self.basis.moisture.modes.column(l);
                out_x[l] -= flux_x * (col[ni] - col[ci]);
            }
            for l in 0..n_t {
                let col = scratch.psi.column(l);
                out_t[l] -= flux_t * (col[ni] - col[ci]);
            }
        }

        // Surface integrals of the flux laws against the mode traces.
        let dh_rho = mat.evaporation_heat() * mat.dry_density();
        for (cell, faces) in &self.grid.surface_cells {
            let i = *cell;
            let nf = faces.len() as f64;
            let jx = mat.moisture_flux(x[i], temp[i], &ambient) * nf * area;
            let jt = (mat.heat_flux(x[i], temp[i], &ambient)
                + dh_rho * mat.evaporation_flux(x[i], temp[i], &ambient))
                * nf
                * area;
            for l in 0..n_x {
                out_x[l] += self.basis.moisture.modes[(i, l)] * jx;
            }
            for l in 0..n_t {
                out_t[l] += scratch.psi[(i, l)] * jt;
            }
        }
        Ok(())
    }

    /// Gradient row H of the averaging output map over the mask; the output
    /// is affine in c, so H is constant.
    pub fn output_gradient(&self, mask: &[usize]) -> Result<DVector<f64>> {
        if mask.is_empty() {
            return Err(CoreError::InvalidArgument("empty measurement mask".into()));
        }
        let mut grad = DVector::zeros(self.n());
        let inv_v = 1.0 / mask.len() as f64;
        for &cell in mask {
            if cell >= self.grid.cell_count() || !self.grid.is_surface_cell(cell) {
                return Err(CoreError::InvalidMask(cell));
            }
            for k in 0..self.basis.n_temperature() {
                grad[self.basis.n_moisture() + k] += self.basis.temperature.modes[(cell, k)] * inv_v;
            }
        }
        Ok(grad)
    }

    /// Output offset h(z_bar) over the mask.
    pub fn output_offset(&self, mask: &[usize]) -> Result<f64> {
        if mask.is_empty() {
            return Err(CoreError::InvalidArgument("empty measurement mask".into()));
        }
        let mut sum = 0.0;
        for &cell in mask {
            if cell >= self.grid.cell_count() || !self.grid.is_surface_cell(cell) {
                return Err(CoreError::InvalidMask(cell));
            }
            sum += self.basis.temperature.mean[cell];
        }
        Ok(sum / mask.len() as f64)
    }
}

/// Reconstructed average surface temperature for the masked cells.
pub fn rom_output(state: &RomState, ops: &RomOperators, mask: &[usize]) -> Result<f64> {
    Ok(ops.output_offset(mask)? + ops.output_gradient(mask)?.dot(&state.c))
}

/// Projects a full-order state onto the reduced coordinates.
pub fn project_initial(z0: &StateVector, basis: &CombinedBasis) -> RomState {
    RomState {
        c: basis.project(z0),
        t: 0.0,
    }
}

/// Adaptive integration of the reduced model with dense-output sampling at
/// the requested times; returns the sampled coefficient trajectory.
pub fn integrate_rom(
    c0: &RomState,
    ops: &RomOperators,
    t_end: f64,
    opts: &AdaptiveOptions,
    sample_times: &[f64],
) -> Result<Vec<(f64, DVector<f64>)>> {
    let mut scratch = ops.make_scratch();
    let mut samples = Vec::with_capacity(sample_times.len());
    ode::integrate_adaptive(
        |t, c: &DVector<f64>, dc: &mut DVector<f64>| ops.rhs_with(t, c, &mut scratch, dc),
        c0.t,
        &c0.c,
        t_end,
        opts,
        sample_times.iter().copied(),
        |t, c| samples.push((t, c.clone())),
    )?;
    Ok(samples)
}
