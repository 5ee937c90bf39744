//! Persistence and rendering: `record.json`, per-check CSV tables, the
//! sweep summary, and aligned console tables.

use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use pathfbsde_core::fbsde_problem::Verdict;

use crate::checks::CheckRecord;
use crate::CliError;

/// Top-level run artifact. Re-running an identical config reproduces an
/// identical record except for `duration_seconds`, which consumers must
/// strip before hashing.
#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub artifact_version: &'static str,
    /// FNV-1a hash of the canonical config JSON, hex.
    pub config_fingerprint: String,
    pub problem: String,
    pub all_pass: bool,
    pub checks: Vec<CheckSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSummary>,
    pub duration_seconds: f64,
}

#[derive(Debug, Serialize)]
pub struct CheckSummary {
    pub check: String,
    pub verdict: Verdict,
    pub report: serde_json::Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    /// Override assignment of this sweep point, e.g. `solver.n_steps=8`.
    pub assignment: Vec<(String, serde_json::Value)>,
    pub u_value: Vec<f64>,
    pub u_exact: Vec<f64>,
    pub abs_error: f64,
    pub all_pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    /// Log-log slope of abs_error against the (single, numeric) sweep
    /// axis, when that fit is meaningful.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fitted_slope: Option<f64>,
}

/// Stable 64-bit content hash (FNV-1a) of the canonical config JSON.
/// `DefaultHasher` is explicitly unstable across releases, and the
/// fingerprint must survive toolchain upgrades.
pub fn fingerprint(canonical_json: &str) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in canonical_json.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

pub fn write_record(dir: &Path, record: &RunRecord) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::config(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join("record.json");
    let json = serde_json::to_string_pretty(record)
        .map_err(|e| CliError::config(format!("record serialization: {e}")))?;
    std::fs::write(&path, json + "\n")
        .map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))
}

pub fn write_check_csv(dir: &Path, rec: &CheckRecord) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::config(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(format!("{}.csv", rec.check));
    let mut f = std::fs::File::create(&path)
        .map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))?;
    let (header, rows) = &rec.table;
    let io = |e: std::io::Error| CliError::config(format!("write {}: {e}", path.display()));
    writeln!(f, "{}", header.join(",")).map_err(io)?;
    for row in rows {
        writeln!(f, "{}", row.join(",")).map_err(io)?;
    }
    Ok(())
}

pub fn write_sweep_csv(dir: &Path, sweep: &SweepSummary) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::config(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join("sweep.csv");
    let mut f = std::fs::File::create(&path)
        .map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))?;
    let io = |e: std::io::Error| CliError::config(format!("write {}: {e}", path.display()));
    writeln!(f, "assignment,u_value,u_exact,abs_error,all_pass").map_err(io)?;
    for row in &sweep.rows {
        let assignment = row
            .assignment
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";");
        writeln!(
            f,
            "{assignment},{},{},{},{}",
            join_nums(&row.u_value),
            join_nums(&row.u_exact),
            row.abs_error,
            row.all_pass
        )
        .map_err(io)?;
    }
    if let Some(slope) = sweep.fitted_slope {
        writeln!(f, "fitted_slope,,,{slope},").map_err(io)?;
    }
    Ok(())
}

fn join_nums(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x}"))
        .collect::<Vec<_>>()
        .join(";")
}

/// Column-aligned plain-text table.
pub fn render_table(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate().take(cols) {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let fmt_row = |cells: &[String]| -> String {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{:>w$}", c, w = widths.get(i).copied().unwrap_or(c.len())))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = fmt_row(header);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (cols.saturating_sub(1))));
    for row in rows {
        out.push('\n');
        out.push_str(&fmt_row(row));
    }
    out
}
