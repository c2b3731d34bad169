//! File formats: PFM, 16-bit PPM, run configs, checkpoints and CSV reports.

pub mod checkpoint;
pub mod config;
mod header;
pub mod pfm;
pub mod ppm;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::dit::LossRecord;
use crate::metrics::EvalReport;
use crate::Result;

pub use config::RunConfig;
pub use pfm::{read_pfm, write_pfm, PfmImage};
pub use ppm::{read_ppm, write_ppm16, PpmSamples};

pub const LOSS_CSV_HEADER: &str = "step,l_img,l_rad,l_bracket,total";
pub const EVAL_CSV_HEADER: &str = "sample,ls,bracket_l1,monotonicity_rate,radiance_mae";

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut out = format!("{LOSS_CSV_HEADER}\n");
    for r in records {
        writeln!(out, "{},{},{},{},{}", r.step, r.img, r.rad, r.bracket, r.total).expect("string write");
    }
    out
}

/// Per-sample rows followed by an `aggregate` row.
pub fn eval_csv(rows: &[(String, EvalReport)], aggregate: &EvalReport) -> String {
    let mut out = format!("{EVAL_CSV_HEADER}\n");
    let mut row = |name: &str, r: &EvalReport| {
        writeln!(out, "{name},{},{},{},{}", r.ls, r.bracket_l1, r.monotonicity_rate, r.radiance_mae)
            .expect("string write");
    };
    for (name, r) in rows {
        row(name, r);
    }
    row("aggregate", aggregate);
    out
}

/// Path of the config echo written beside an output.
pub fn echo_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".config");
    output.with_file_name(name)
}

/// Writes the tool version, the invocation and the full config beside `output`.
pub fn write_echo(output: &Path, config: &RunConfig, invocation: &str) -> Result<()> {
    let text = format!(
        "# bracketflow {}\n# {invocation}\n{}",
        env!("CARGO_PKG_VERSION"),
        config.to_text()
    );
    std::fs::write(echo_path(output), text)?;
    Ok(())
}
