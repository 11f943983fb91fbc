//! On-disk formats.
//!
//! Binary fields: little-endian `f64`, interleaved `re, im`, one row per
//! time level, with a sidecar `<name>.hdr` text header. Tables: CSV whose
//! leading `# ` lines hold the resolved configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use insens_core::{Complex64, ComplexField, Grid, HalfStepField, Trajectory};

use crate::error::{CliError, CliResult};

pub const BINARY_FORMAT: &str = "f64-le-complex-interleaved";

pub struct OutputDir {
    root: PathBuf,
    provenance: String,
}

impl OutputDir {
    pub fn create(root: &Path, provenance: String) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(CliError::io(root))?;
        Ok(Self {
            root: root.to_path_buf(),
            provenance,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn comment_block(&self) -> String {
        self.provenance
            .lines()
            .map(|l| format!("# {l}\n"))
            .collect()
    }

    pub fn write_csv(
        &self,
        name: &str,
        columns: &[&str],
        rows: &[Vec<String>],
    ) -> CliResult<PathBuf> {
        let mut out = self.comment_block();
        out.push_str(&columns.join(","));
        out.push('\n');
        for r in rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        let path = self.path(name);
        fs::write(&path, out).map_err(CliError::io(&path))?;
        Ok(path)
    }

    fn write_binary(
        &self,
        name: &str,
        kind: &str,
        grid: &Grid,
        rows: &[ComplexField],
    ) -> CliResult<PathBuf> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut bytes = Vec::with_capacity(rows.len() * cols * 16);
        for r in rows {
            for z in r.iter() {
                bytes.extend_from_slice(&z.re.to_le_bytes());
                bytes.extend_from_slice(&z.im.to_le_bytes());
            }
        }
        let path = self.path(&format!("{name}.bin"));
        fs::write(&path, bytes).map_err(CliError::io(&path))?;
        let mut hdr = String::new();
        let _ = writeln!(hdr, "format = \"{BINARY_FORMAT}\"");
        let _ = writeln!(hdr, "kind = \"{kind}\"");
        let _ = writeln!(hdr, "rows = {}", rows.len());
        let _ = writeln!(hdr, "cols = {cols}");
        let _ = writeln!(hdr, "length = {:e}", grid.length());
        let _ = writeln!(hdr, "horizon = {:e}", grid.horizon());
        let _ = writeln!(hdr, "dx = {:e}", grid.dx());
        let _ = writeln!(hdr, "dt = {:e}", grid.dt());
        hdr.push_str(&self.comment_block());
        let hdr_path = self.path(&format!("{name}.hdr"));
        fs::write(&hdr_path, hdr).map_err(CliError::io(&hdr_path))?;
        Ok(path)
    }

    /// Snapshots `t_n = n·dt`, `M + 1` rows.
    pub fn write_trajectory(&self, name: &str, traj: &Trajectory) -> CliResult<PathBuf> {
        self.write_binary(name, "trajectory", traj.grid(), traj.snapshots())
    }

    /// Half-step slices `t_{n+1/2}`, `M` rows.
    pub fn write_half_step(&self, name: &str, field: &HalfStepField) -> CliResult<PathBuf> {
        self.write_binary(name, "half_step", field.grid(), field.slices())
    }
}

/// Reads a half-step field written by [`OutputDir::write_half_step`] and
/// checks it against `grid`.
pub fn read_half_step(bin: &Path, grid: &Grid) -> CliResult<HalfStepField> {
    let hdr_path = bin.with_extension("hdr");
    let hdr = fs::read_to_string(&hdr_path).map_err(CliError::io(&hdr_path))?;
    let field = |key: &str| -> Option<String> {
        hdr.lines()
            .filter(|l| !l.starts_with('#'))
            .filter_map(|l| l.split_once('='))
            .find(|(k, _)| k.trim() == key)
            .map(|(_, v)| v.trim().trim_matches('"').to_string())
    };
    let bad = |msg: String| CliError::Validation(format!("{}: {msg}", hdr_path.display()));
    if field("format").as_deref() != Some(BINARY_FORMAT)
        || field("kind").as_deref() != Some("half_step")
    {
        return Err(bad("not a half-step control file".into()));
    }
    let dim = |key: &str| -> CliResult<usize> {
        field(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("missing or bad `{key}`")))
    };
    let (rows, cols) = (dim("rows")?, dim("cols")?);
    if rows != grid.steps() || cols != grid.nodes() {
        return Err(bad(format!(
            "field is {rows}×{cols}, grid needs {}×{}",
            grid.steps(),
            grid.nodes()
        )));
    }
    let bytes = fs::read(bin).map_err(CliError::io(bin))?;
    if bytes.len() != rows * cols * 16 {
        return Err(bad(format!(
            "expected {} bytes, found {}",
            rows * cols * 16,
            bytes.len()
        )));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let slices = vals
        .chunks_exact(2 * cols)
        .map(|row| {
            ComplexField(
                row.chunks_exact(2)
                    .map(|p| Complex64::new(p[0], p[1]))
                    .collect(),
            )
        })
        .collect();
    Ok(HalfStepField::from_slices(grid, slices)?)
}

/// Shortest round-trip representation.
pub fn num(v: f64) -> String {
    format!("{v:e}")
}
