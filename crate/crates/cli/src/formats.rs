//! Artifact file formats: binary snapshot and basis files with a short text
//! header, Gramian results as JSON, and deterministic CSV emission.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use drypar_core::grid::Grid;
use drypar_core::pod::{CombinedBasis, FieldId, PodBasis};
use drypar_core::state::{StateVector, Trajectory};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

const TRAJECTORY_MAGIC: &str = "drypar-trajectory v1";
const BASIS_MAGIC: &str = "drypar-basis v1";
const END_HEADER: &str = "END HEADER";

/// Canonical shortest-round-trip float formatting shared by every text
/// artifact; byte-identical across runs for identical values.
pub fn fmt_f64(x: f64) -> String {
    // {:e} with 17 significant digits always round-trips; use the shortest
    // precision that parses back exactly.
    for p in 1..17 {
        let s = format!("{x:.p$e}");
        if s.parse::<f64>() == Ok(x) {
            return s;
        }
    }
    format!("{x:.17e}")
}

fn write_f64_slice(w: &mut impl Write, data: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 8);
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_f64_vec(r: &mut impl Read, len: usize) -> CliResult<Vec<f64>> {
    let mut buf = vec![0u8; len * 8];
    r.read_exact(&mut buf)
        .map_err(|e| CliError::config(format!("truncated binary payload: {e}")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn header_line(reader: &mut impl BufRead, what: &str) -> CliResult<String> {
    let mut line = String::new();
    reader
        .read_line(&mut line)
        .map_err(|e| CliError::config(format!("cannot read {what}: {e}")))?;
    Ok(line.trim_end().to_string())
}

fn parse_kv<'a>(line: &'a str, key: &str, path: &Path) -> CliResult<&'a str> {
    line.strip_prefix(key)
        .map(str::trim)
        .ok_or_else(|| CliError::config(format!("{}: expected '{key} ...' header line", path.display())))
}

pub fn write_trajectory(path: &Path, grid: &Grid, traj: &Trajectory) -> CliResult<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{TRAJECTORY_MAGIC}")?;
    writeln!(
        w,
        "grid {} {} {} {}",
        grid.n_x,
        grid.n_y,
        grid.n_z,
        fmt_f64(grid.cell_size)
    )?;
    writeln!(w, "count {}", traj.states.len())?;
    writeln!(w, "clamp_events {}", traj.clamp_events)?;
    writeln!(w, "{END_HEADER}")?;
    for (t, z) in traj.times.iter().zip(&traj.states) {
        write_f64_slice(&mut w, &[*t])?;
        write_f64_slice(&mut w, z.values.as_slice())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> CliResult<(Grid, Trajectory)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    if header_line(&mut r, "magic")? != TRAJECTORY_MAGIC {
        return Err(CliError::config(format!(
            "{}: not a drypar trajectory file",
            path.display()
        )));
    }
    let grid_line = header_line(&mut r, "grid")?;
    let parts: Vec<&str> = parse_kv(&grid_line, "grid", path)?.split_whitespace().collect();
    if parts.len() != 4 {
        return Err(CliError::config(format!("{}: malformed grid line", path.display())));
    }
    let dims: Vec<usize> = parts[..3]
        .iter()
        .map(|p| p.parse().map_err(|_| CliError::config("bad grid dimension")))
        .collect::<CliResult<_>>()?;
    let cell_size: f64 = parts[3]
        .parse()
        .map_err(|_| CliError::config("bad cell size"))?;
    let count: usize = parse_kv(&header_line(&mut r, "count")?, "count", path)?
        .parse()
        .map_err(|_| CliError::config("bad snapshot count"))?;
    let clamp_events: usize = parse_kv(&header_line(&mut r, "clamp_events")?, "clamp_events", path)?
        .parse()
        .map_err(|_| CliError::config("bad clamp_events"))?;
    if header_line(&mut r, "end-of-header")? != END_HEADER {
        return Err(CliError::config(format!(
            "{}: missing END HEADER",
            path.display()
        )));
    }
    let grid = drypar_core::grid::build_grid(dims[0], dims[1], dims[2], cell_size)?;
    let n2 = 2 * grid.cell_count();
    let mut times = Vec::with_capacity(count);
    let mut states = Vec::with_capacity(count);
    for _ in 0..count {
        times.push(read_f64_vec(&mut r, 1)?[0]);
        let values = DVector::from_vec(read_f64_vec(&mut r, n2)?);
        states.push(StateVector::from_vector(values)?);
    }
    Ok((
        grid,
        Trajectory {
            times,
            states,
            clamp_events,
        },
    ))
}

fn write_pod_field(w: &mut impl Write, basis: &PodBasis) -> CliResult<()> {
    write_f64_slice(w, basis.mean.as_slice())?;
    write_f64_slice(w, &basis.singular_values)?;
    write_f64_slice(w, basis.modes.as_slice())?;
    Ok(())
}

fn read_pod_field(
    r: &mut impl Read,
    field_id: FieldId,
    cells: usize,
    rank: usize,
    cutoff: usize,
    dv: f64,
) -> CliResult<PodBasis> {
    let mean = DVector::from_vec(read_f64_vec(r, cells)?);
    let singular_values = read_f64_vec(r, rank)?;
    let modes = DMatrix::from_vec(cells, rank, read_f64_vec(r, cells * rank)?);
    if cutoff == 0 || cutoff > rank {
        return Err(CliError::config("basis cutoff outside the stored rank"));
    }
    Ok(PodBasis {
        field_id,
        mean,
        modes,
        singular_values,
        dv,
        cutoff,
    })
}

pub fn write_basis(path: &Path, basis: &CombinedBasis) -> CliResult<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{BASIS_MAGIC}")?;
    writeln!(w, "cells {}", basis.cells())?;
    writeln!(w, "dv {}", fmt_f64(basis.dv()))?;
    writeln!(
        w,
        "moisture {} {}",
        basis.moisture.modes.ncols(),
        basis.moisture.cutoff
    )?;
    writeln!(
        w,
        "temperature {} {}",
        basis.temperature.modes.ncols(),
        basis.temperature.cutoff
    )?;
    writeln!(w, "{END_HEADER}")?;
    write_pod_field(&mut w, &basis.moisture)?;
    write_pod_field(&mut w, &basis.temperature)?;
    w.flush()?;
    Ok(())
}

pub fn read_basis(path: &Path) -> CliResult<CombinedBasis> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    if header_line(&mut r, "magic")? != BASIS_MAGIC {
        return Err(CliError::config(format!(
            "{}: not a drypar basis file",
            path.display()
        )));
    }
    let cells: usize = parse_kv(&header_line(&mut r, "cells")?, "cells", path)?
        .parse()
        .map_err(|_| CliError::config("bad cell count"))?;
    let dv: f64 = parse_kv(&header_line(&mut r, "dv")?, "dv", path)?
        .parse()
        .map_err(|_| CliError::config("bad dv"))?;
    let parse_field = |line: &str, key: &str| -> CliResult<(usize, usize)> {
        let parts: Vec<&str> = parse_kv(line, key, path)?.split_whitespace().collect();
        if parts.len() != 2 {
            return Err(CliError::config(format!("{}: malformed {key} line", path.display())));
        }
        Ok((
            parts[0].parse().map_err(|_| CliError::config("bad rank"))?,
            parts[1].parse().map_err(|_| CliError::config("bad cutoff"))?,
        ))
    };
    let x_line = header_line(&mut r, "moisture")?;
    let (rank_x, cut_x) = parse_field(&x_line, "moisture")?;
    let t_line = header_line(&mut r, "temperature")?;
    let (rank_t, cut_t) = parse_field(&t_line, "temperature")?;
    if header_line(&mut r, "end-of-header")? != END_HEADER {
        return Err(CliError::config(format!(
            "{}: missing END HEADER",
            path.display()
        )));
    }
    let moisture = read_pod_field(&mut r, FieldId::Moisture, cells, rank_x, cut_x, dv)?;
    let temperature = read_pod_field(&mut r, FieldId::Temperature, cells, rank_t, cut_t, dv)?;
    CombinedBasis::new(moisture, temperature).map_err(CliError::from)
}

/// Serialized reduced Gramian with its spectrum and the measurement mask.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GramianArtifact {
    pub n_moisture: usize,
    pub n_temperature: usize,
    pub dv: f64,
    pub mask: Vec<usize>,
    pub kappa: f64,
    /// Row-major n x n Gramian.
    pub w: Vec<Vec<f64>>,
    /// Nonincreasing eigenvalues of dv * W.
    pub eigenvalues: Vec<f64>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::config(format!("serialization failed: {e}")))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

/// Writes a CSV file with a fixed header; rows are preformatted cells.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        if row.len() != header.len() {
            return Err(CliError::config(format!(
                "csv row width {} does not match header width {}",
                row.len(),
                header.len()
            )));
        }
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}
