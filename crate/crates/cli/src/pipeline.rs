//! Stage orchestration: simulate -> pod -> rom -> gramian/sweep -> ekf,
//! plus the validation suite. Every stage persists its artifacts in the
//! output directory and records them in the run manifest; stages whose
//! configuration sections are unchanged are served from cache.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use drypar_core::ekf::{self, EkfConfig, EkfState, MeasurementSource, MeasurementStream};
use drypar_core::fvm;
use drypar_core::grid::{build_grid, Face, Grid};
use drypar_core::gramian::{
    self, GramianIntegrator, GramianScheme, ObservedSystem,
};
use drypar_core::material::{AmbientConditions, CalibrationWood, ConstantMaterial, MaterialModel};
use drypar_core::ode::AdaptiveOptions;
use drypar_core::pod::{choose_cutoff, compute_pod, CombinedBasis, FieldId, SnapshotSet};
use drypar_core::rom::{self, RomOperators};
use drypar_core::state::{measure_output, total_moisture, StateVector, Trajectory};
use drypar_core::CoreError;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::formats::{self, fmt_f64, GramianArtifact};
use crate::manifest::{sha256_bytes, sha256_file, Manifest, MANIFEST_FILE};
use crate::{CliError, CliResult};

pub const BASIS_FILE: &str = "basis.bin";

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
    pub manifest: Manifest,
    /// Suppress progress lines (tests).
    pub quiet: bool,
}

fn x0_label(x0: f64) -> String {
    format!("{x0:.4}")
}

pub fn trajectory_file(x0: f64) -> String {
    format!("snapshots_x0_{}.bin", x0_label(x0))
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, out: PathBuf) -> CliResult<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(&out)
            .map_err(|e| CliError::config(format!("cannot create {}: {e}", out.display())))?;
        let manifest = Manifest::load(&out)?;
        Ok(Self {
            cfg,
            out,
            manifest,
            quiet: false,
        })
    }

    fn log(&self, msg: &str) {
        if !self.quiet {
            println!("{msg}");
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Hash of the named top-level configuration sections.
    fn stage_hash(&self, sections: &[&str]) -> CliResult<String> {
        let value = toml::Value::try_from(&self.cfg)
            .map_err(|e| CliError::config(format!("config serialization failed: {e}")))?;
        let table = value.as_table().expect("config root is a table");
        let mut text = String::new();
        for name in sections {
            text.push_str(name);
            text.push('=');
            if let Some(section) = table.get(*name) {
                text.push_str(&section.to_string());
            }
            text.push('\n');
        }
        Ok(sha256_bytes(text.as_bytes()))
    }

    // ----- simulate ------------------------------------------------------

    const SIMULATE_SECTIONS: &'static [&'static str] =
        &["grid", "material", "ambient", "initial", "simulation"];

    /// Fixed time step and recording stride giving exactly the configured
    /// snapshot count over the horizon.
    fn snapshot_stepping(&self, grid: &Grid, mat: &dyn MaterialModel) -> (f64, usize) {
        let dt_max = fvm::STABILITY_SAFETY * fvm::stability_dt(grid, mat);
        let horizon = self.cfg.simulation.horizon;
        let m = self.cfg.simulation.snapshots;
        if horizon == 0.0 || m < 2 {
            return (dt_max, 1);
        }
        let steps = (horizon / dt_max).ceil() as usize;
        let record_every = steps.div_ceil(m - 1).max(1);
        let steps = record_every * (m - 1);
        (horizon / steps as f64, record_every)
    }

    pub fn simulate(&mut self) -> CliResult<()> {
        let hash = self.stage_hash(Self::SIMULATE_SECTIONS)?;
        if self.manifest.stage_is_fresh("simulate", &hash, &self.out) {
            self.log("simulate: cached");
            return Ok(());
        }
        let start = Instant::now();
        let grid = self.cfg.build_grid()?;
        let mat = self.cfg.material()?;
        let amb = self.cfg.ambient()?;
        let (dt, record_every) = self.snapshot_stepping(&grid, &mat);
        let horizon = self.cfg.simulation.horizon;
        let x0s = self.cfg.initial_moistures();

        let runs: Vec<(f64, Trajectory)> = x0s
            .par_iter()
            .map(|&x0| {
                let z0 = StateVector::uniform(grid.cell_count(), x0, self.cfg.initial.temperature);
                let traj = if horizon == 0.0 {
                    Trajectory {
                        times: vec![0.0],
                        states: vec![z0],
                        clamp_events: 0,
                    }
                } else {
                    fvm::integrate(&z0, &grid, &mat, &amb, (0.0, horizon), dt, record_every)?
                };
                Ok((x0, traj))
            })
            .collect::<Result<_, CoreError>>()?;

        let mut files = Vec::new();
        for (x0, traj) in &runs {
            let path = self.path(&trajectory_file(*x0));
            formats::write_trajectory(&path, &grid, traj)?;
            files.push(path);
        }

        // Volume-averaged moisture series, one column per initial condition.
        let mut header: Vec<String> = vec!["t".into()];
        for (x0, _) in &runs {
            header.push(format!("X_x0_{}", x0_label(*x0)));
        }
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let n_rows = runs.iter().map(|(_, tr)| tr.times.len()).min().unwrap_or(0);
        let mut rows = Vec::with_capacity(n_rows);
        for i in 0..n_rows {
            let mut row = vec![fmt_f64(runs[0].1.times[i])];
            for (_, traj) in &runs {
                row.push(fmt_f64(total_moisture(&traj.states[i], &grid)));
            }
            rows.push(row);
        }
        let moisture_csv = self.path("total_moisture.csv");
        formats::write_csv(&moisture_csv, &header_refs, &rows)?;
        files.push(moisture_csv);

        self.manifest
            .record_stage("simulate", &hash, start.elapsed().as_secs_f64(), &files, &self.out)?;
        self.log(&format!("simulate: {} run(s) written", runs.len()));
        Ok(())
    }

    // ----- pod -----------------------------------------------------------

    const POD_SECTIONS: &'static [&'static str] = &[
        "grid",
        "material",
        "ambient",
        "initial",
        "simulation",
        "pod",
        "rom",
    ];

    pub fn pod(&mut self) -> CliResult<()> {
        self.simulate()?;
        let hash = self.stage_hash(Self::POD_SECTIONS)?;
        if self.manifest.stage_is_fresh("pod", &hash, &self.out) {
            self.log("pod: cached");
            return Ok(());
        }
        let start = Instant::now();
        let (grid, traj) = formats::read_trajectory(&self.path(&trajectory_file(self.cfg.initial.moisture)))?;
        let basis = self.build_basis(&grid, &traj)?;

        let basis_path = self.path(BASIS_FILE);
        formats::write_basis(&basis_path, &basis)?;

        // Spectrum and cumulative energy per field.
        let mut rows = Vec::new();
        for field in [&basis.moisture, &basis.temperature] {
            let total: f64 = field.singular_values.iter().map(|s| s * s).sum();
            let mut acc = 0.0;
            for (k, s) in field.singular_values.iter().enumerate() {
                acc += s * s;
                rows.push(vec![
                    field.field_id.label().to_string(),
                    k.to_string(),
                    fmt_f64(*s),
                    fmt_f64(acc / total),
                    (if k < field.cutoff { 1 } else { 0 }).to_string(),
                ]);
            }
        }
        let spectrum_path = self.path("spectrum.csv");
        formats::write_csv(
            &spectrum_path,
            &["field", "k", "sigma", "cumulative_energy", "retained"],
            &rows,
        )?;

        self.manifest.record_stage(
            "pod",
            &hash,
            start.elapsed().as_secs_f64(),
            &[basis_path, spectrum_path],
            &self.out,
        )?;
        self.log(&format!(
            "pod: retained {} moisture + {} temperature modes",
            basis.n_moisture(),
            basis.n_temperature()
        ));
        Ok(())
    }

    /// POD of the training trajectory with the configured truncation.
    fn build_basis(&self, grid: &Grid, traj: &Trajectory) -> CliResult<CombinedBasis> {
        let sx = SnapshotSet::from_trajectory(traj, FieldId::Moisture, grid.cell_volume)?;
        let st = SnapshotSet::from_trajectory(traj, FieldId::Temperature, grid.cell_volume)?;
        let bx = compute_pod(&sx)?;
        let bt = compute_pod(&st)?;
        let n_x = if self.cfg.rom.n_moisture > 0 {
            self.cfg.rom.n_moisture
        } else {
            choose_cutoff(&bx, self.cfg.pod.threshold)?
        };
        let n_t = if self.cfg.rom.n_temperature > 0 {
            self.cfg.rom.n_temperature
        } else {
            choose_cutoff(&bt, self.cfg.pod.threshold)?
        };
        Ok(CombinedBasis::new(
            bx.with_cutoff(n_x)?,
            bt.with_cutoff(n_t)?,
        )?)
    }

    // ----- rom -----------------------------------------------------------

    fn build_ops(&self, basis: CombinedBasis) -> CliResult<RomOperators> {
        Ok(rom::assemble(
            basis,
            self.cfg.build_grid()?,
            Arc::new(self.cfg.material()?),
            self.cfg.ambient()?,
        )?)
    }

    fn rom_ode_options(&self) -> AdaptiveOptions {
        AdaptiveOptions {
            rtol: self.cfg.rom.rtol,
            atol: self.cfg.rom.atol,
            ..Default::default()
        }
    }

    pub fn rom(&mut self) -> CliResult<()> {
        self.pod()?;
        let hash = self.stage_hash(Self::POD_SECTIONS)?;
        if self.manifest.stage_is_fresh("rom", &hash, &self.out) {
            self.log("rom: cached");
            return Ok(());
        }
        let start = Instant::now();
        let ops = self.build_ops(formats::read_basis(&self.path(BASIS_FILE))?)?;
        let opts = self.rom_ode_options();

        let mut error_rows = Vec::new();
        let mut files = Vec::new();
        for x0 in self.cfg.initial_moistures() {
            let (_, traj) = formats::read_trajectory(&self.path(&trajectory_file(x0)))?;
            let c0 = rom::project_initial(&traj.states[0], &ops.basis);
            let t_end = *traj.times.last().unwrap();
            let samples = if t_end > 0.0 {
                rom::integrate_rom(&c0, &ops, t_end, &opts, &traj.times)?
            } else {
                vec![(0.0, c0.c.clone())]
            };
            let (eps_t, eps_x, eps_big_x) = ekf::estimation_errors(&traj, &samples, &ops.basis)?;
            error_rows.push(vec![
                x0_label(x0),
                fmt_f64(eps_t),
                fmt_f64(eps_x),
                fmt_f64(eps_big_x),
            ]);

            if (x0 - self.cfg.initial.moisture).abs() < 1e-12 {
                // Reduced coefficients against the projected reference.
                let mut header: Vec<String> = vec!["t".into()];
                for k in 0..ops.n() {
                    header.push(format!("c{k}_ref"));
                }
                for k in 0..ops.n() {
                    header.push(format!("c{k}_rom"));
                }
                let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
                let mut rows = Vec::with_capacity(samples.len());
                for (state, (t, c_rom)) in traj.states.iter().zip(&samples) {
                    let c_ref = ops.basis.project(state);
                    let mut row = vec![fmt_f64(*t)];
                    row.extend(c_ref.iter().map(|v| fmt_f64(*v)));
                    row.extend(c_rom.iter().map(|v| fmt_f64(*v)));
                    rows.push(row);
                }
                let coeff_path = self.path("rom_coefficients.csv");
                formats::write_csv(&coeff_path, &header_refs, &rows)?;
                files.push(coeff_path);
            }
        }
        let err_path = self.path("rom_errors.csv");
        formats::write_csv(&err_path, &["x0", "eps_T", "eps_x", "eps_X"], &error_rows)?;
        files.push(err_path);

        self.manifest
            .record_stage("rom", &hash, start.elapsed().as_secs_f64(), &files, &self.out)?;
        self.log("rom: trajectory comparison written");
        Ok(())
    }

    // ----- gramian / sweep ----------------------------------------------

    const GRAMIAN_SECTIONS: &'static [&'static str] = &[
        "grid",
        "material",
        "ambient",
        "initial",
        "simulation",
        "pod",
        "rom",
        "gramian",
        "mask",
    ];

    /// Dried-equilibrium state and its reduced coordinates. The uniform
    /// state at the ambient temperature and equilibrium moisture is an
    /// exact steady state of the constant-ambient model; fall back to the
    /// residual-driven search otherwise.
    fn reduced_steady_state(&self, ops: &RomOperators) -> CliResult<(StateVector, DVector<f64>)> {
        let grid = &ops.grid;
        let mat = self.cfg.material()?;
        let amb = self.cfg.ambient()?;
        let far = amb.at(f64::MAX.sqrt());
        let x_eq = mat.equilibrium_moisture(&far);
        let z_eq = StateVector::uniform(grid.cell_count(), x_eq, far.temperature);
        let residual = fvm::rhs(&z_eq, grid, &mat, &amb, 0.0)?.amax();
        let z_ss = if residual < 1e-9 {
            z_eq
        } else {
            fvm::find_steady_state(&z_eq, grid, &mat, &amb, 1e-9, 1e6)?.0
        };
        let c_ss = rom::project_initial(&z_ss, &ops.basis).c;
        Ok((z_ss, c_ss))
    }

    pub fn gramian(&mut self) -> CliResult<()> {
        self.rom()?;
        let hash = self.stage_hash(Self::GRAMIAN_SECTIONS)?;
        if self.manifest.stage_is_fresh("gramian", &hash, &self.out) {
            self.log("gramian: cached");
            return Ok(());
        }
        let start = Instant::now();
        let ops = self.build_ops(formats::read_basis(&self.path(BASIS_FILE))?)?;
        let mask = self.cfg.mask.resolve(&ops.grid)?;
        let scheme = self.cfg.gramian_scheme();
        let integrator = self.cfg.gramian_integrator();
        let (_, c_ss) = self.reduced_steady_state(&ops)?;

        let result = gramian::reduced_gramian(&ops, &c_ss, &mask, &scheme, &integrator)?;
        let (eigs, _) = gramian::gramian_eigs(&result.w, ops.grid.cell_volume)?;
        let artifact = GramianArtifact {
            n_moisture: ops.basis.n_moisture(),
            n_temperature: ops.basis.n_temperature(),
            dv: ops.grid.cell_volume,
            mask: mask.clone(),
            kappa: result.kappa,
            w: (0..result.w.nrows())
                .map(|i| result.w.row(i).iter().copied().collect())
                .collect(),
            eigenvalues: eigs.iter().copied().collect(),
        };
        let gramian_path = self.path("gramian.json");
        formats::write_json(&gramian_path, &artifact)?;
        let mut files = vec![gramian_path];

        if !self.cfg.gramian.orders.is_empty() {
            let rows = self.order_study(&scheme, &integrator, &mask)?;
            let orders_path = self.path("kappa_orders.csv");
            formats::write_csv(
                &orders_path,
                &["n", "n_moisture", "n_temperature", "kappa", "status"],
                &rows,
            )?;
            files.push(orders_path);
        }

        self.manifest
            .record_stage("gramian", &hash, start.elapsed().as_secs_f64(), &files, &self.out)?;
        self.log(&format!("gramian: kappa = {}", fmt_f64(result.kappa)));
        Ok(())
    }

    /// kappa(n) over the configured order list; per-order failures are
    /// reported in the status column without aborting the study.
    fn order_study(
        &self,
        scheme: &GramianScheme,
        integrator: &GramianIntegrator,
        mask: &[usize],
    ) -> CliResult<Vec<Vec<String>>> {
        let full = formats::read_basis(&self.path(BASIS_FILE))?;
        let mut rows = Vec::new();
        for &n in &self.cfg.gramian.orders {
            let n_x = (n / 2).max(1);
            let n_t = n.saturating_sub(n_x).max(1);
            let entry = (|| -> Result<f64, CoreError> {
                let basis = CombinedBasis::new(
                    full.moisture.clone().with_cutoff(n_x)?,
                    full.temperature.clone().with_cutoff(n_t)?,
                )?;
                let ops = rom::assemble(
                    basis,
                    self.cfg.build_grid().map_err(cli_to_core)?,
                    Arc::new(self.cfg.material().map_err(cli_to_core)?),
                    self.cfg.ambient().map_err(cli_to_core)?,
                )?;
                let c_ss = {
                    let (_, c) = self.reduced_steady_state(&ops).map_err(cli_to_core)?;
                    c
                };
                Ok(gramian::reduced_gramian(&ops, &c_ss, mask, scheme, integrator)?.kappa)
            })();
            match entry {
                Ok(kappa) => rows.push(vec![
                    n.to_string(),
                    n_x.to_string(),
                    n_t.to_string(),
                    fmt_f64(kappa),
                    "ok".into(),
                ]),
                Err(e) => rows.push(vec![
                    n.to_string(),
                    n_x.to_string(),
                    n_t.to_string(),
                    "nan".into(),
                    e.to_string().replace(',', ";"),
                ]),
            }
            self.log(&format!("order study: n = {n} done"));
        }
        Ok(rows)
    }

    pub fn sweep(&mut self) -> CliResult<()> {
        self.rom()?;
        let hash = self.stage_hash(Self::GRAMIAN_SECTIONS)?;
        if self.manifest.stage_is_fresh("sweep", &hash, &self.out) {
            self.log("sweep: cached");
            return Ok(());
        }
        let start = Instant::now();
        let ops = self.build_ops(formats::read_basis(&self.path(BASIS_FILE))?)?;
        let scheme = self.cfg.gramian_scheme();
        let integrator = self.cfg.gramian_integrator();
        let (_, c_ss) = self.reduced_steady_state(&ops)?;

        let sweep = gramian::position_sweep(&ops, &c_ss, &scheme, &integrator)?;
        let grid = &ops.grid;
        let mut rows = Vec::with_capacity(sweep.len());
        for ((cell, kappa), (cell2, faces)) in sweep.iter().zip(&grid.surface_cells) {
            debug_assert_eq!(cell, cell2);
            let (i, j, k) = grid.coords(*cell);
            let labels: Vec<&str> = faces.iter().map(|f| f.label()).collect();
            rows.push(vec![
                cell.to_string(),
                i.to_string(),
                j.to_string(),
                k.to_string(),
                labels.join("|"),
                (grid.is_edge_or_corner(*cell) as u8).to_string(),
                fmt_f64(*kappa),
            ]);
        }
        let sweep_path = self.path("sweep.csv");
        formats::write_csv(
            &sweep_path,
            &["cell", "i", "j", "k", "faces", "edge_or_corner", "kappa"],
            &rows,
        )?;

        // Face means over single-face cells (edges/corners excluded).
        let fiber = grid.fiber_orthogonal_faces();
        let mut summary = Vec::new();
        let mut grouped: Vec<(String, f64, usize)> = Vec::new();
        for face in drypar_core::grid::ALL_FACES {
            let mut acc = 0.0;
            let mut count = 0usize;
            for ((cell, kappa), (_, faces)) in sweep.iter().zip(&grid.surface_cells) {
                if !grid.is_edge_or_corner(*cell) && faces.len() == 1 && faces[0] == face {
                    acc += kappa;
                    count += 1;
                }
            }
            if count > 0 {
                grouped.push((face.label().to_string(), acc / count as f64, count));
            }
        }
        for (label, mean, count) in &grouped {
            summary.push(vec![
                label.clone(),
                count.to_string(),
                fmt_f64(*mean),
                (fiber.iter().any(|f| f.label() == label) as u8).to_string(),
            ]);
        }
        let summary_path = self.path("sweep_summary.csv");
        formats::write_csv(
            &summary_path,
            &["face", "cells", "mean_kappa", "fiber_orthogonal"],
            &summary,
        )?;

        self.manifest.record_stage(
            "sweep",
            &hash,
            start.elapsed().as_secs_f64(),
            &[sweep_path, summary_path],
            &self.out,
        )?;
        self.log(&format!("sweep: {} surface cells", sweep.len()));
        Ok(())
    }

    // ----- ekf -----------------------------------------------------------

    const EKF_SECTIONS: &'static [&'static str] = &[
        "grid",
        "material",
        "ambient",
        "initial",
        "simulation",
        "pod",
        "rom",
        "mask",
        "ekf",
        "output",
    ];

    /// Finite-volume truth run recorded exactly on the measurement grid.
    fn truth_on_measurement_grid(&self) -> CliResult<(Grid, Trajectory)> {
        let grid = self.cfg.build_grid()?;
        let mat = self.cfg.material()?;
        let amb = self.cfg.ambient()?;
        let interval = self.cfg.ekf.measurement_interval;
        let horizon = (self.cfg.simulation.horizon / interval).floor() * interval;
        if horizon <= 0.0 {
            return Err(CliError::config(
                "simulation horizon shorter than one measurement interval",
            ));
        }
        let dt_max = fvm::STABILITY_SAFETY * fvm::stability_dt(&grid, &mat);
        let per_interval = (interval / dt_max).ceil() as usize;
        let dt = interval / per_interval as f64;
        let z0 = StateVector::uniform(
            grid.cell_count(),
            self.cfg.initial.moisture,
            self.cfg.initial.temperature,
        );
        let traj = fvm::integrate(&z0, &grid, &mat, &amb, (0.0, horizon), dt, per_interval)?;
        Ok((grid, traj))
    }

    pub fn ekf(&mut self) -> CliResult<()> {
        self.rom()?;
        let hash = self.stage_hash(Self::EKF_SECTIONS)?;
        if self.manifest.stage_is_fresh("ekf", &hash, &self.out) {
            self.log("ekf: cached");
            return Ok(());
        }
        let start = Instant::now();
        let ops = self.build_ops(formats::read_basis(&self.path(BASIS_FILE))?)?;
        let mask = self.cfg.mask.resolve(&ops.grid)?;
        let (grid, truth) = self.truth_on_measurement_grid()?;

        // Synthetic measurements: masked surface temperature plus optional
        // Gaussian noise from the seeded generator.
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.output.seed);
        let sigma = self.cfg.ekf.noise_sigma;
        let mut values = Vec::with_capacity(truth.states.len());
        for state in &truth.states {
            let clean = measure_output(state, &grid, &mask)?;
            values.push(clean + sigma * standard_normal(&mut rng));
        }
        let stream = MeasurementStream::new(
            truth.times.clone(),
            values.clone(),
            MeasurementSource::SyntheticTwin,
        )?;

        let x_true: Vec<f64> = truth
            .states
            .iter()
            .map(|s| total_moisture(s, &grid))
            .collect();
        let x_range = x_true.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - x_true.iter().cloned().fold(f64::INFINITY, f64::min);

        let n = ops.n();
        let mut files = Vec::new();
        let mut summary = Vec::new();
        let mut timings = std::collections::BTreeMap::new();
        for scenario in &self.cfg.ekf.scenarios {
            let (c0, p0) = if scenario.exact_init {
                (
                    rom::project_initial(&truth.states[0], &ops.basis),
                    DMatrix::zeros(n, n),
                )
            } else {
                (
                    ekf::init_from_measurement(values[0], scenario.initial_moisture, &ops.basis)?,
                    self.cfg.ekf.p0_scale * DMatrix::identity(n, n),
                )
            };
            let cfg = EkfConfig {
                q: self.cfg.ekf.q_scale * DMatrix::identity(n, n),
                r: self.cfg.ekf.r,
                p0,
                measurement_interval: self.cfg.ekf.measurement_interval,
                jacobian_step: self.cfg.ekf.jacobian_step,
                ode: AdaptiveOptions {
                    rtol: self.cfg.ekf.rtol,
                    atol: self.cfg.ekf.atol,
                    ..Default::default()
                },
            };
            let run_start = Instant::now();
            let run = ekf::run_filter(&ops, &mask, &cfg, &stream, &c0)?;
            let wall = run_start.elapsed().as_secs_f64();
            let mean_step = wall / run.steps.len() as f64;

            let estimates: Vec<(f64, DVector<f64>)> =
                run.steps.iter().map(|s| (s.t, s.c.clone())).collect();
            let (eps_t, eps_x, eps_big_x) = ekf::estimation_errors(&truth, &estimates, &ops.basis)?;

            // Volume-averaged moisture of the reconstruction.
            let x_hat: Vec<f64> = run
                .steps
                .iter()
                .map(|s| {
                    let rec = ops.basis.reconstruct(&s.c);
                    total_moisture(&rec, &grid)
                })
                .collect();
            let convergence_time = convergence_time(&truth.times, &x_true, &x_hat, x_range, 0.05);

            let mut rows = Vec::with_capacity(run.steps.len());
            for (k, step) in run.steps.iter().enumerate() {
                rows.push(vec![
                    fmt_f64(step.t),
                    fmt_f64(step.measurement),
                    fmt_f64(step.innovation),
                    fmt_f64(step.innovation_variance),
                    fmt_f64(x_true[k]),
                    fmt_f64(x_hat[k]),
                    fmt_f64(step.p_trace),
                ]);
            }
            let path = self.path(&format!("ekf_{}.csv", scenario.name));
            formats::write_csv(
                &path,
                &["t", "w_meas", "innovation", "s", "X_true", "X_hat", "p_trace"],
                &rows,
            )?;
            files.push(path);

            summary.push(vec![
                scenario.name.clone(),
                fmt_f64(eps_t),
                fmt_f64(eps_x),
                fmt_f64(eps_big_x),
                convergence_time.map_or("never".into(), fmt_f64),
            ]);
            timings.insert(scenario.name.clone(), mean_step);
            self.log(&format!(
                "ekf {}: eps_X = {}, mean filter step {mean_step:.3} s",
                scenario.name,
                summary.last().unwrap()[3],
            ));
        }
        let summary_path = self.path("ekf_summary.csv");
        formats::write_csv(
            &summary_path,
            &["scenario", "eps_T", "eps_x", "eps_X", "convergence_time"],
            &summary,
        )?;
        files.push(summary_path);
        // Wall-clock numbers vary run to run; keep them out of the
        // deterministic CSVs.
        let timings_path = self.path("ekf_timings.json");
        formats::write_json(&timings_path, &timings)?;
        files.push(timings_path);

        self.manifest
            .record_stage("ekf", &hash, start.elapsed().as_secs_f64(), &files, &self.out)?;
        Ok(())
    }

    // ----- validate ------------------------------------------------------

    pub fn validate(&mut self, linear_only: bool) -> CliResult<ValidationReport> {
        let mut checks = Vec::new();
        checks.push(run_check("linear-gramian-oracle", 1e-3, linear_gramian_check));
        if !linear_only {
            checks.push(self.basis_checks());
            checks.push(run_check("conservation-insulated", 1e-10, conservation_check));
            checks.push(run_check("galerkin-consistency", 1e-9, galerkin_check));
            checks.push(run_check("jacobian-richardson", 0.5, jacobian_check));
            checks.push(run_check("ekf-covariance-psd", 1e-8, covariance_check));
            checks.push(self.manifest_check());
        }
        Ok(ValidationReport {
            checks: checks.into_iter().flatten().collect(),
        })
    }

    /// Orthonormality and spectrum monotonicity of the persisted basis when
    /// present, else of a freshly built desk-scale basis.
    fn basis_checks(&self) -> Vec<Check> {
        let basis = if self.path(BASIS_FILE).exists() {
            formats::read_basis(&self.path(BASIS_FILE))
        } else {
            desk_rom_and_trajectory()
                .map(|(ops, _, _)| ops.basis.clone())
                .map_err(CliError::from)
        };
        let basis = match basis {
            Ok(b) => b,
            Err(e) => {
                return vec![Check::failed_with(
                    "basis-orthonormality",
                    1e-10,
                    format!("basis unavailable: {e}"),
                )]
            }
        };
        let mut ortho: f64 = 0.0;
        let mut monotone: f64 = 0.0;
        for field in [&basis.moisture, &basis.temperature] {
            let phi = field.modes.columns(0, field.cutoff).clone_owned();
            let gram = field.dv * phi.transpose() * &phi;
            ortho = ortho.max((gram - DMatrix::identity(field.cutoff, field.cutoff)).amax());
            for pair in field.singular_values.windows(2) {
                monotone = monotone.max(pair[1] - pair[0]);
            }
        }
        vec![
            Check::new("basis-orthonormality", ortho, 1e-10),
            Check::new("spectrum-monotone", monotone, 0.0),
        ]
    }

    /// Every file in the output directory is listed in the manifest with a
    /// matching hash, and every listed file exists.
    fn manifest_check(&self) -> Vec<Check> {
        if !self.path(MANIFEST_FILE).exists() {
            return vec![Check::skipped("manifest-completeness", "no manifest yet")];
        }
        let listed = self.manifest.all_files();
        let mut bad = 0usize;
        let mut detail = String::new();
        let entries = match std::fs::read_dir(&self.out) {
            Ok(e) => e,
            Err(e) => {
                return vec![Check::failed_with(
                    "manifest-completeness",
                    0.0,
                    format!("cannot list output directory: {e}"),
                )]
            }
        };
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if name == MANIFEST_FILE || !entry.path().is_file() {
                continue;
            }
            match listed.get(name.as_str()) {
                Some(hash) => {
                    if sha256_file(&entry.path()).ok().as_deref() != Some(*hash) {
                        bad += 1;
                        detail = format!("hash mismatch: {name}");
                    }
                }
                None => {
                    bad += 1;
                    detail = format!("unlisted file: {name}");
                }
            }
        }
        for name in listed.keys() {
            if !self.path(name).exists() {
                bad += 1;
                detail = format!("missing file: {name}");
            }
        }
        let mut c = Check::new("manifest-completeness", bad as f64, 0.0);
        c.detail = detail;
        vec![c]
    }
}

fn cli_to_core(e: CliError) -> CoreError {
    CoreError::InvalidArgument(e.message)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller from two uniform draws.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// First measurement time after which the normalized mean-moisture error
/// stays below `tol` for good; None when it never does.
fn convergence_time(
    times: &[f64],
    x_true: &[f64],
    x_hat: &[f64],
    range: f64,
    tol: f64,
) -> Option<f64> {
    if !(range > 0.0) {
        return None;
    }
    let mut first: Option<f64> = None;
    for ((t, xt), xh) in times.iter().zip(x_true).zip(x_hat) {
        if (xt - xh).abs() / range < tol {
            first.get_or_insert(*t);
        } else {
            first = None;
        }
    }
    first
}

// ----- validation checks and report ------------------------------------

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, measured: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            threshold,
            passed: measured.is_finite() && measured <= threshold,
            detail: String::new(),
        }
    }

    fn failed_with(name: &str, threshold: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            measured: f64::NAN,
            threshold,
            passed: false,
            detail,
        }
    }

    fn skipped(name: &str, detail: &str) -> Self {
        Self {
            name: name.into(),
            measured: 0.0,
            threshold: 0.0,
            passed: true,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Machine-readable table, one line per check.
    pub fn render(&self) -> String {
        let mut s = String::from("check,measured,threshold,status,detail\n");
        for c in &self.checks {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                c.name,
                fmt_f64(c.measured),
                fmt_f64(c.threshold),
                if c.passed { "pass" } else { "fail" },
                c.detail
            ));
        }
        s
    }
}

fn run_check(name: &str, threshold: f64, f: fn() -> Result<f64, CoreError>) -> Vec<Check> {
    match f() {
        Ok(measured) => vec![Check::new(name, measured, threshold)],
        Err(e) => vec![Check::failed_with(name, threshold, e.to_string())],
    }
}

/// Desk-scale wood reduction shared by several checks: 6 x 8 x 4 grid,
/// 400 s drying run, 4 + 4 modes, 5 x 3 measurement patch.
fn desk_rom_and_trajectory() -> Result<(RomOperators, Trajectory, Vec<usize>), CoreError> {
    let grid = build_grid(6, 8, 4, 1e-3)?;
    let wood = CalibrationWood::default();
    let amb = AmbientConditions::constant(350.0, 0.005);
    let z0 = StateVector::uniform(grid.cell_count(), 0.8, 298.15);
    let dt = fvm::STABILITY_SAFETY * fvm::stability_dt(&grid, &wood);
    let steps = (400.0 / dt).ceil() as usize;
    let traj = fvm::integrate(&z0, &grid, &wood, &amb, (0.0, 400.0), dt, steps.div_ceil(60).max(1))?;
    let sx = SnapshotSet::from_trajectory(&traj, FieldId::Moisture, grid.cell_volume)?;
    let st = SnapshotSet::from_trajectory(&traj, FieldId::Temperature, grid.cell_volume)?;
    let basis = CombinedBasis::new(
        compute_pod(&sx)?.with_cutoff(4)?,
        compute_pod(&st)?.with_cutoff(4)?,
    )?;
    let mask = grid.centered_patch(Face::XPos, 5, 3)?;
    let ops = rom::assemble(basis, grid, Arc::new(wood), amb)?;
    Ok((ops, traj, mask))
}

/// Insulated constant-coefficient run: total moisture and total heat are
/// conserved; returns the larger relative drift.
fn conservation_check() -> Result<f64, CoreError> {
    let grid = build_grid(6, 6, 4, 1e-3)?;
    let mat = ConstantMaterial::insulated(1e-7, 0.2, 1e6);
    let amb = AmbientConditions::constant(300.0, 0.0);
    let cells = grid.cell_count();
    let mut z0 = StateVector::uniform(cells, 0.5, 310.0);
    for i in 0..cells {
        let (x, y, z) = grid.coords(i);
        z0.values[i] += 0.2 * ((x + 2 * y) as f64 * 0.7).sin();
        z0.values[cells + i] += 5.0 * ((y + 3 * z) as f64 * 0.4).cos();
    }
    let dt = fvm::STABILITY_SAFETY * fvm::stability_dt(&grid, &mat);
    let traj = fvm::integrate(&z0, &grid, &mat, &amb, (0.0, 200.0), dt, 50)?;
    let m0 = total_moisture(&z0, &grid);
    let h0: f64 = z0.temperature_slice().iter().sum();
    let mut worst: f64 = 0.0;
    for state in &traj.states {
        let dm = (total_moisture(state, &grid) - m0).abs() / m0.abs();
        let dh = (state.temperature_slice().iter().sum::<f64>() - h0).abs() / h0.abs();
        worst = worst.max(dm).max(dh);
    }
    Ok(worst)
}

/// Reduced right-hand side against the weighted projection of the full one.
fn galerkin_check() -> Result<f64, CoreError> {
    let (ops, traj, _) = desk_rom_and_trajectory()?;
    let mut worst: f64 = 0.0;
    for state in traj.states.iter().step_by(3).take(20) {
        let c = ops.basis.project(state);
        let lifted = ops.basis.reconstruct(&c);
        let rom_route = ops.rhs(0.0, &c)?;
        let projection = ops.basis.project_weighted(&fvm::rhs(
            &lifted,
            &ops.grid,
            ops.material.as_ref(),
            &ops.ambient,
            0.0,
        )?);
        worst = worst.max((rom_route - &projection).amax() / projection.amax());
    }
    Ok(worst)
}

/// |Richardson ratio - 4| of the finite-difference Jacobian on a
/// mid-drying reduced state; second-order convergence gives a ratio near 4.
fn jacobian_check() -> Result<f64, CoreError> {
    let (ops, traj, _) = desk_rom_and_trajectory()?;
    let c0 = rom::project_initial(&traj.states[0], &ops.basis);
    let opts = AdaptiveOptions {
        rtol: 1e-9,
        atol: 1e-15,
        ..Default::default()
    };
    let c_mid = rom::integrate_rom(&c0, &ops, 150.0, &opts, &[150.0])?
        .pop()
        .unwrap()
        .1;
    let rhs = |t: f64, c: &DVector<f64>, dc: &mut DVector<f64>| {
        let mut scratch = ops.make_scratch();
        ops.rhs_with(t, c, &mut scratch, dc)
    };
    let j1 = ekf::jacobian(rhs, 0.0, &c_mid, 4e-6)?;
    let j2 = ekf::jacobian(rhs, 0.0, &c_mid, 2e-6)?;
    let j3 = ekf::jacobian(rhs, 0.0, &c_mid, 1e-6)?;
    let ratio = (&j1 - &j2).norm() / (&j2 - &j3).norm();
    Ok((ratio - 4.0).abs())
}

/// Symmetry and positive-semidefiniteness of the filter covariance over a
/// short twin run; returns the worst normalized violation.
fn covariance_check() -> Result<f64, CoreError> {
    let (ops, _traj, mask) = desk_rom_and_trajectory()?;
    let n = ops.n();
    let c_true = rom::project_initial(
        &StateVector::uniform(ops.basis.cells(), 0.8, 298.15),
        &ops.basis,
    );
    let opts = AdaptiveOptions {
        rtol: 1e-9,
        atol: 1e-15,
        ..Default::default()
    };
    let times: Vec<f64> = (1..=8).map(|k| 5.0 * k as f64).collect();
    let samples = rom::integrate_rom(&c_true, &ops, *times.last().unwrap(), &opts, &times)?;
    let h = ops.output_gradient(&mask)?;
    let offset = ops.output_offset(&mask)?;
    let cfg = EkfConfig {
        q: 1e-14 * DMatrix::identity(n, n),
        r: 1e-4,
        p0: 1e-8 * DMatrix::identity(n, n),
        measurement_interval: 5.0,
        jacobian_step: 1e-6,
        ode: AdaptiveOptions::default(),
    };
    let mut state = EkfState {
        c: ekf::init_from_measurement(offset + h.dot(&c_true.c), 0.7, &ops.basis)?.c,
        p: cfg.p0.clone(),
        t: 0.0,
    };
    let mut worst: f64 = 0.0;
    for (t, c_ref) in &samples {
        state = ekf::predict(&state, &ops, &cfg, *t)?;
        let w = offset + h.dot(c_ref);
        let (posterior, _innovation, _s) = ekf::update(&state, w, &h, offset, cfg.r)?;
        state = posterior;
        let scale = state.p.trace().abs().max(1e-300);
        let asym = (&state.p - state.p.transpose()).amax() / scale;
        let min_eig = state
            .p
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(asym).max((-min_eig / scale).max(0.0));
    }
    Ok(worst)
}

/// Linear heat rod against the Lyapunov-equation Gramian, at reduced
/// sampling cost (bias well below the 1e-3 gate).
fn linear_gramian_check() -> Result<f64, CoreError> {
    struct LinearObserved {
        a: DMatrix<f64>,
        h: DVector<f64>,
    }
    impl ObservedSystem for LinearObserved {
        type Scratch = ();
        fn dim(&self) -> usize {
            self.a.nrows()
        }
        fn make_scratch(&self) {}
        fn rhs(
            &self,
            _t: f64,
            x: &DVector<f64>,
            _scratch: &mut (),
            dx: &mut DVector<f64>,
        ) -> Result<(), CoreError> {
            dx.gemv(1.0, &self.a, x, 0.0);
            Ok(())
        }
        fn output(&self, x: &DVector<f64>, _scratch: &mut ()) -> f64 {
            self.h.dot(x)
        }
    }

    let n = 8;
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        a[(i, i)] = -0.3;
        let mut lap = 0.0;
        if i > 0 {
            a[(i, i - 1)] += 0.15;
            lap += 0.15;
        }
        if i + 1 < n {
            a[(i, i + 1)] += 0.15;
            lap += 0.15;
        }
        a[(i, i)] -= lap;
    }
    let mut h = DVector::from_fn(n, |i, _| 1.0 + 0.3 * ((i + 1) as f64).sin());
    h /= h.norm();
    let w_ref = drypar_oracles::lyapunov_observability_gramian(
        &a,
        &DMatrix::from_row_slice(1, n, h.as_slice()),
    );

    let sys = LinearObserved { a, h };
    let mag = 1e-4;
    let scheme = GramianScheme {
        magnitudes: vec![mag],
        dt: 1e-3,
        samples: 100_000,
        settle_tol: 1e-2,
    };
    let integrator = GramianIntegrator::Adaptive(AdaptiveOptions {
        rtol: 1e-8,
        atol: 1e-12 * mag,
        max_step: 0.01,
        initial_step: None,
    });
    let x_ss = DVector::zeros(n);
    let w = gramian::empirical_gramian(&sys, &x_ss, None, &scheme, &integrator)?;
    Ok((&w - &w_ref).norm() / w_ref.norm())
}
