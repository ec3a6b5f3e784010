//! Structured experiment reports and plot-data emission.
//!
//! A report serializes to a stable JSON layout; re-running the same
//! configuration byte-reproduces every numeric field (the wall clock is
//! the one excluded field). Numbers in plot/CSV outputs carry the
//! configured decimal precision with no locale dependence.

use mvsde_core::report::AssertionRecord;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

#[derive(Serialize)]
pub struct ExperimentReport {
    pub command: String,
    pub config: BTreeMap<String, String>,
    /// SHA-256 of the canonical config text.
    pub input_hash: String,
    pub rng_policy: &'static str,
    pub assertions: Vec<AssertionRecord>,
    pub outputs: serde_json::Value,
    pub pass: bool,
    pub wall_clock_ms: u64,
}

impl ExperimentReport {
    pub fn new(
        command: &str,
        config: &crate::config::Config,
        assertions: Vec<AssertionRecord>,
        outputs: serde_json::Value,
        wall_clock_ms: u64,
    ) -> Self {
        let canonical = config.canonical_text();
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let pass = assertions.iter().all(|a| a.pass);
        ExperimentReport {
            command: command.to_string(),
            config: config.echo(),
            input_hash: format!("{:x}", hasher.finalize()),
            rng_policy: mvsde_core::rng::RNG_POLICY_VERSION,
            assertions,
            outputs,
            pass,
            wall_clock_ms,
        }
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut f = std::fs::File::create(dir.join("report.json"))?;
        f.write_all(serde_json::to_string_pretty(self).expect("serializable").as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

/// Fixed-precision scientific formatting: deterministic and locale-free.
pub fn fmt_num(v: f64, precision: usize) -> String {
    format!("{v:.precision$e}")
}

/// Plot-data kinds with their column schemas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PlotKind {
    LdpCurve,
    StrassenJSweep,
    PicardTrace,
    ContinuityFit,
}

impl PlotKind {
    pub fn parse(s: &str) -> Option<PlotKind> {
        match s {
            "ldp-curve" => Some(PlotKind::LdpCurve),
            "strassen-j-sweep" => Some(PlotKind::StrassenJSweep),
            "picard-trace" => Some(PlotKind::PicardTrace),
            "continuity-fit" => Some(PlotKind::ContinuityFit),
            _ => None,
        }
    }

    pub fn columns(&self) -> &'static [&'static str] {
        match self {
            PlotKind::LdpCurve => &["eps", "minus_eps_log_p", "wilson_lo", "wilson_hi", "delta_ref"],
            PlotKind::StrassenJSweep => &["j", "u", "d_alpha_to_K", "A_jc"],
            PlotKind::PicardTrace => &["iteration", "sup_time_W2"],
            PlotKind::ContinuityFit => &["lag", "mean_square_increment", "fitted_value"],
        }
    }

    pub fn file_name(&self) -> &'static str {
        match self {
            PlotKind::LdpCurve => "ldp_curve.dat",
            PlotKind::StrassenJSweep => "strassen_j_sweep.dat",
            PlotKind::PicardTrace => "picard_trace.dat",
            PlotKind::ContinuityFit => "continuity_fit.dat",
        }
    }
}

/// Whitespace-separated `.dat` emission with a one-line header comment.
pub fn emit_plot_data(
    dir: &Path,
    kind: PlotKind,
    rows: &[Vec<f64>],
    precision: usize,
) -> std::io::Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(kind.file_name());
    let mut f = std::fs::File::create(&path)?;
    writeln!(f, "# {}", kind.columns().join(" "))?;
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| fmt_num(*v, precision)).collect();
        writeln!(f, "{}", line.join(" "))?;
    }
    Ok(path)
}
