use nalgebra::DVector;

use crate::error::{CoreError, Result};
use crate::grid::Grid;

/// Stacked finite-volume state: first N entries cell moistures (kg/kg),
/// last N entries cell temperatures (K).
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub values: DVector<f64>,
    pub cells: usize,
}

impl StateVector {
    pub fn uniform(cells: usize, moisture: f64, temperature: f64) -> Self {
        let mut values = DVector::zeros(2 * cells);
        for i in 0..cells {
            values[i] = moisture;
            values[cells + i] = temperature;
        }
        Self { values, cells }
    }

    pub fn from_vector(values: DVector<f64>) -> Result<Self> {
        if values.len() % 2 != 0 {
            return Err(CoreError::DimensionMismatch(
                "state vector length must be even".into(),
            ));
        }
        let cells = values.len() / 2;
        Ok(Self { values, cells })
    }

    #[inline]
    pub fn moisture(&self, cell: usize) -> f64 {
        self.values[cell]
    }

    #[inline]
    pub fn temperature(&self, cell: usize) -> f64 {
        self.values[self.cells + cell]
    }

    pub fn moisture_slice(&self) -> &[f64] {
        &self.values.as_slice()[..self.cells]
    }

    pub fn temperature_slice(&self) -> &[f64] {
        &self.values.as_slice()[self.cells..]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Recorded time series of full states.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<StateVector>,
    /// Number of round-off moisture undershoots clamped to zero during the run.
    pub clamp_events: usize,
}

impl Trajectory {
    pub fn last(&self) -> &StateVector {
        self.states.last().expect("trajectory is never empty")
    }
}

/// Volume-averaged total moisture, (1/V) sum x_i dV.
pub fn total_moisture(state: &StateVector, grid: &Grid) -> f64 {
    debug_assert_eq!(state.cells, grid.cell_count());
    state.moisture_slice().iter().sum::<f64>() / state.cells as f64
}

/// Arithmetic mean of the masked surface-cell temperatures.
pub fn measure_output(state: &StateVector, grid: &Grid, mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(CoreError::InvalidArgument("empty measurement mask".into()));
    }
    let mut sum = 0.0;
    for &cell in mask {
        if cell >= grid.cell_count() || !grid.is_surface_cell(cell) {
            return Err(CoreError::InvalidMask(cell));
        }
        sum += state.temperature(cell);
    }
    Ok(sum / mask.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;

    #[test]
    fn total_moisture_uniform() {
        let g = build_grid(10, 20, 5, 1e-3).unwrap();
        let z = StateVector::uniform(1000, 0.8, 298.15);
        assert!((total_moisture(&z, &g) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn total_moisture_two_cells() {
        let g = build_grid(1, 1, 2, 1e-3).unwrap();
        let mut z = StateVector::uniform(2, 0.0, 300.0);
        z.values[0] = 0.2;
        z.values[1] = 0.6;
        assert!((total_moisture(&z, &g) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn measure_output_masks() {
        let g = build_grid(3, 3, 3, 1e-3).unwrap();
        let z = StateVector::uniform(27, 0.5, 298.15);
        let w = measure_output(&z, &g, &[0]).unwrap();
        assert!((w - 298.15).abs() < 1e-12);
        let all: Vec<usize> = g.surface_cells.iter().map(|(c, _)| *c).collect();
        assert!((measure_output(&z, &g, &all).unwrap() - 298.15).abs() < 1e-12);
        // center cell of a 3x3x3 grid is interior
        let center = g.index(1, 1, 1);
        assert!(matches!(
            measure_output(&z, &g, &[center]),
            Err(CoreError::InvalidMask(_))
        ));
        assert!(measure_output(&z, &g, &[]).is_err());
    }
}
