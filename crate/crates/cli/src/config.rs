//! Pipeline configuration: a single nested TOML document with a shipped
//! default preset (`paper-5`) covering the full drying/reduction/estimation
//! chain.

use std::path::Path;

use drypar_core::grid::{build_grid, Face, Grid};
use drypar_core::material::{AmbientConditions, CalibrationWood};
use drypar_core::ode::AdaptiveOptions;
use drypar_core::gramian::{GramianIntegrator, GramianScheme};
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

/// Name of the embedded default preset.
pub const PRESET_PAPER5: &str = "paper-5";

const PAPER5_TOML: &str = include_str!("../presets/paper-5.toml");

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub grid: GridSection,
    pub material: MaterialSection,
    pub ambient: AmbientSection,
    pub initial: InitialSection,
    pub simulation: SimulationSection,
    pub pod: PodSection,
    pub rom: RomSection,
    pub gramian: GramianSection,
    pub mask: MaskSection,
    pub ekf: EkfSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub n_x: usize,
    pub n_y: usize,
    pub n_z: usize,
    /// Cubic cell edge length (m).
    pub cell_size: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialSection {
    /// Material-model identifier; only "calibration-wood" is available.
    pub id: String,
    /// Optional overrides of individual calibration-wood parameters.
    #[serde(default)]
    pub delta_ref: Option<[f64; 3]>,
    #[serde(default)]
    pub e_delta: Option<f64>,
    #[serde(default)]
    pub lambda0: Option<f64>,
    #[serde(default)]
    pub lambda1: Option<f64>,
    #[serde(default)]
    pub lambda_anisotropy: Option<[f64; 3]>,
    #[serde(default)]
    pub rho_d: Option<f64>,
    #[serde(default)]
    pub k_m: Option<f64>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub k_sorption: Option<f64>,
    #[serde(default)]
    pub dh_v: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmbientSection {
    /// Drying-air temperature (K).
    pub temperature: f64,
    /// Ambient vapor density (kg/m^3).
    pub vapor_density: f64,
    /// Optional piecewise-linear schedule (t, temperature, vapor density);
    /// overrides the constant values when present.
    #[serde(default)]
    pub schedule: Vec<(f64, f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    /// Training initial moisture content.
    pub moisture: f64,
    /// Initial temperature (K).
    pub temperature: f64,
    /// Additional initial moisture contents for the simulation sweep and
    /// ROM cross-validation.
    #[serde(default)]
    pub sweep: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    /// Simulated drying horizon (s).
    pub horizon: f64,
    /// Number of recorded snapshots per run.
    pub snapshots: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PodSection {
    /// Cumulative energy threshold used when no explicit order is set.
    pub threshold: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RomSection {
    /// Retained moisture modes; 0 selects by the POD energy threshold.
    #[serde(default)]
    pub n_moisture: usize,
    /// Retained temperature modes; 0 selects by the POD energy threshold.
    #[serde(default)]
    pub n_temperature: usize,
    #[serde(default = "default_rom_rtol")]
    pub rtol: f64,
    #[serde(default = "default_rom_atol")]
    pub atol: f64,
}

fn default_rom_rtol() -> f64 {
    1e-8
}
fn default_rom_atol() -> f64 {
    1e-14
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GramianSection {
    /// Perturbation magnitudes in the reduced coordinates.
    pub magnitudes: Vec<f64>,
    /// Output sampling interval (s).
    pub dt: f64,
    /// Samples per response.
    pub samples: usize,
    #[serde(default = "default_settle_tol")]
    pub settle_tol: f64,
    /// "adaptive" or "rk4".
    #[serde(default = "default_integrator")]
    pub integrator: String,
    #[serde(default = "default_gramian_rtol")]
    pub rtol: f64,
    #[serde(default = "default_gramian_atol")]
    pub atol: f64,
    #[serde(default = "default_max_step")]
    pub max_step: f64,
    /// Reduced orders for the convergence study; empty skips the study.
    #[serde(default)]
    pub orders: Vec<usize>,
}

fn default_settle_tol() -> f64 {
    1e-2
}
fn default_integrator() -> String {
    "adaptive".into()
}
fn default_gramian_rtol() -> f64 {
    1e-8
}
fn default_gramian_atol() -> f64 {
    1e-14
}
fn default_max_step() -> f64 {
    f64::INFINITY
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSection {
    /// Explicit surface-cell indices.
    #[serde(default)]
    pub cells: Option<Vec<usize>>,
    /// Boundary face label ("x+", "x-", "y+", "y-", "z+", "z-") for a
    /// centered rectangular patch.
    #[serde(default)]
    pub face: Option<String>,
    #[serde(default)]
    pub width: Option<usize>,
    #[serde(default)]
    pub height: Option<usize>,
    /// Single surface-cell index.
    #[serde(default)]
    pub cell: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EkfSection {
    /// Measurement cadence (s).
    pub measurement_interval: f64,
    /// Scalar measurement-noise variance R.
    pub r: f64,
    /// P0 = p0_scale * I for scenarios without exact initialization.
    pub p0_scale: f64,
    /// Q = q_scale * I.
    pub q_scale: f64,
    #[serde(default = "default_jacobian_step")]
    pub jacobian_step: f64,
    #[serde(default = "default_ekf_rtol")]
    pub rtol: f64,
    #[serde(default = "default_ekf_atol")]
    pub atol: f64,
    /// Standard deviation of the synthetic measurement noise; 0 keeps the
    /// twin measurements exact.
    #[serde(default)]
    pub noise_sigma: f64,
    pub scenarios: Vec<ScenarioSection>,
}

fn default_jacobian_step() -> f64 {
    1e-6
}
fn default_ekf_rtol() -> f64 {
    1e-7
}
fn default_ekf_atol() -> f64 {
    1e-16
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub name: String,
    /// Uniform initial moisture guess handed to the filter.
    pub initial_moisture: f64,
    /// Initialize from the projected true state with P0 = 0.
    #[serde(default)]
    pub exact_init: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Seed of the synthetic measurement-noise generator.
    pub seed: u64,
}

impl PipelineConfig {
    pub fn from_preset(name: &str) -> CliResult<Self> {
        if name != PRESET_PAPER5 {
            return Err(CliError::config(format!(
                "unknown preset '{name}'; available: {PRESET_PAPER5}"
            )));
        }
        let cfg: PipelineConfig = toml::from_str(PAPER5_TOML)
            .map_err(|e| CliError::config(format!("embedded preset is invalid: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: PipelineConfig = toml::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.build_grid()?;
        self.material()?;
        if !(self.ambient.temperature > 0.0) || !(self.ambient.vapor_density >= 0.0) {
            return Err(CliError::config(
                "ambient temperature must be positive and vapor density nonnegative",
            ));
        }
        if !(self.initial.moisture >= 0.0) || !(self.initial.temperature > 0.0) {
            return Err(CliError::config(
                "initial moisture must be nonnegative and temperature positive",
            ));
        }
        if self.initial.sweep.iter().any(|x| !(*x >= 0.0)) {
            return Err(CliError::config("sweep initial moistures must be nonnegative"));
        }
        if !(self.simulation.horizon >= 0.0) {
            return Err(CliError::config("simulation horizon must be nonnegative"));
        }
        if self.simulation.snapshots == 0 {
            return Err(CliError::config("at least one snapshot is required"));
        }
        if !(self.pod.threshold > 0.0 && self.pod.threshold <= 1.0) {
            return Err(CliError::config("pod threshold must lie in (0, 1]"));
        }
        if self.gramian.magnitudes.is_empty()
            || self.gramian.magnitudes.iter().any(|m| !(*m > 0.0))
        {
            return Err(CliError::config("gramian magnitudes must be positive"));
        }
        if !(self.gramian.dt > 0.0) || self.gramian.samples < 2 {
            return Err(CliError::config(
                "gramian sampling needs dt > 0 and at least two samples",
            ));
        }
        match self.gramian.integrator.as_str() {
            "adaptive" | "rk4" => {}
            other => {
                return Err(CliError::config(format!(
                    "unknown gramian integrator '{other}' (use \"adaptive\" or \"rk4\")"
                )))
            }
        }
        let grid = self.build_grid()?;
        self.mask.resolve(&grid)?;
        if !(self.ekf.measurement_interval > 0.0)
            || !(self.ekf.r > 0.0)
            || !(self.ekf.p0_scale >= 0.0)
            || !(self.ekf.q_scale >= 0.0)
            || !(self.ekf.noise_sigma >= 0.0)
        {
            return Err(CliError::config(
                "ekf section needs positive interval and R, nonnegative P0/Q scales and noise",
            ));
        }
        if self.ekf.scenarios.is_empty() {
            return Err(CliError::config("at least one ekf scenario is required"));
        }
        for (i, s) in self.ekf.scenarios.iter().enumerate() {
            if s.name.is_empty() || !(s.initial_moisture >= 0.0) {
                return Err(CliError::config(format!(
                    "scenario {i} needs a name and a nonnegative initial moisture"
                )));
            }
            if self.ekf.scenarios[..i].iter().any(|o| o.name == s.name) {
                return Err(CliError::config(format!(
                    "duplicate scenario name '{}'",
                    s.name
                )));
            }
        }
        Ok(())
    }

    pub fn build_grid(&self) -> CliResult<Grid> {
        build_grid(
            self.grid.n_x,
            self.grid.n_y,
            self.grid.n_z,
            self.grid.cell_size,
        )
        .map_err(CliError::from)
    }

    /// Calibration-wood model with the configured overrides applied.
    pub fn material(&self) -> CliResult<CalibrationWood> {
        if self.material.id != "calibration-wood" {
            return Err(CliError::config(format!(
                "unknown material id '{}'; available: calibration-wood",
                self.material.id
            )));
        }
        let mut m = CalibrationWood::default();
        let s = &self.material;
        if let Some(v) = s.delta_ref {
            m.delta_ref = v;
        }
        if let Some(v) = s.e_delta {
            m.e_delta = v;
        }
        if let Some(v) = s.lambda0 {
            m.lambda0 = v;
        }
        if let Some(v) = s.lambda1 {
            m.lambda1 = v;
        }
        if let Some(v) = s.lambda_anisotropy {
            m.lambda_anisotropy = v;
        }
        if let Some(v) = s.rho_d {
            m.rho_d = v;
        }
        if let Some(v) = s.k_m {
            m.k_m = v;
        }
        if let Some(v) = s.alpha {
            m.alpha = v;
        }
        if let Some(v) = s.k_sorption {
            m.k_sorption = v;
        }
        if let Some(v) = s.dh_v {
            m.dh_v = v;
        }
        Ok(m)
    }

    pub fn ambient(&self) -> CliResult<AmbientConditions> {
        if self.ambient.schedule.is_empty() {
            Ok(AmbientConditions::constant(
                self.ambient.temperature,
                self.ambient.vapor_density,
            ))
        } else {
            AmbientConditions::piecewise_linear(self.ambient.schedule.clone())
                .map_err(CliError::from)
        }
    }

    /// Initial moisture contents in run order: the training value first,
    /// then the sweep values (deduplicated).
    pub fn initial_moistures(&self) -> Vec<f64> {
        let mut out = vec![self.initial.moisture];
        for &x in &self.initial.sweep {
            if out.iter().all(|&y| (y - x).abs() > 1e-12) {
                out.push(x);
            }
        }
        out
    }

    pub fn gramian_scheme(&self) -> GramianScheme {
        GramianScheme {
            magnitudes: self.gramian.magnitudes.clone(),
            dt: self.gramian.dt,
            samples: self.gramian.samples,
            settle_tol: self.gramian.settle_tol,
        }
    }

    pub fn gramian_integrator(&self) -> GramianIntegrator {
        match self.gramian.integrator.as_str() {
            "rk4" => GramianIntegrator::FixedRk4,
            _ => GramianIntegrator::Adaptive(AdaptiveOptions {
                rtol: self.gramian.rtol,
                atol: self.gramian.atol,
                max_step: self.gramian.max_step,
                initial_step: None,
            }),
        }
    }
}

fn parse_face(label: &str) -> CliResult<Face> {
    Ok(match label {
        "x+" => Face::XPos,
        "x-" => Face::XNeg,
        "y+" => Face::YPos,
        "y-" => Face::YNeg,
        "z+" => Face::ZPos,
        "z-" => Face::ZNeg,
        other => {
            return Err(CliError::config(format!(
                "unknown face label '{other}' (use x+/x-/y+/y-/z+/z-)"
            )))
        }
    })
}

impl MaskSection {
    /// Resolves the mask specification to surface-cell indices; exactly one
    /// of the three forms (cell list, face patch, single cell) must be set.
    pub fn resolve(&self, grid: &Grid) -> CliResult<Vec<usize>> {
        let forms = [
            self.cells.is_some(),
            self.face.is_some(),
            self.cell.is_some(),
        ]
        .iter()
        .filter(|b| **b)
        .count();
        if forms != 1 {
            return Err(CliError::config(
                "mask must set exactly one of: cells, face (+ width/height), cell",
            ));
        }
        let cells = if let Some(list) = &self.cells {
            list.clone()
        } else if let Some(face) = &self.face {
            let (w, h) = match (self.width, self.height) {
                (Some(w), Some(h)) => (w, h),
                _ => {
                    return Err(CliError::config(
                        "a face mask needs both width and height",
                    ))
                }
            };
            grid.centered_patch(parse_face(face)?, w, h)?
        } else {
            vec![self.cell.unwrap()]
        };
        if cells.is_empty() {
            return Err(CliError::config("mask resolves to no cells"));
        }
        for &c in &cells {
            if c >= grid.cell_count() || !grid.is_surface_cell(c) {
                return Err(CliError::config(format!(
                    "mask cell {c} is not a surface cell"
                )));
            }
        }
        Ok(cells)
    }
}
