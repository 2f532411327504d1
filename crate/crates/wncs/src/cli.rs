//! Batch runner: executes scenarios, writes trace and metrics files, and
//! replays recorded traces.
//!
//! File naming: repetition with seed `s` writes `run-{s:04}.trace.csv` and
//! `run-{s:04}.metrics.json` (replays use the `replay-` prefix); a
//! `summary.csv` covering all repetitions is written last.

use crate::config::{parse_config, ScenarioConfig};
use crate::engine::{playback_trace, run_scenario};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::trace::{read_csv, Trace};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

/// One batch invocation.
#[derive(Debug, Clone)]
pub struct RunRequest {
    pub config_path: PathBuf,
    pub output_dir: PathBuf,
    pub seed_override: Option<u64>,
    pub repetitions: u32,
    pub playback_path: Option<PathBuf>,
    pub allow_fault: bool,
}

impl RunRequest {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions < 1 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.playback_path.is_some() && self.repetitions != 1 {
            return Err(Error::Config(
                "playback runs a single repetition; drop --reps".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct RepetitionOutcome {
    seed: u64,
    trace_file: String,
    metrics_file: String,
    report: MetricsReport,
}

pub const SUMMARY_HEADER: &str = "seed,faulted,rounds,quadratic_cost,actuation_intensity,max_abs_angle,angle_within_3deg_fraction,max_abs_pos,sync_rms_error,drop_rate_state,drop_rate_control,trace_file,metrics_file";

/// Executes the request and returns the process exit code: 0 on success,
/// 1 if any repetition faulted and faults are not allowed.
pub fn run(req: &RunRequest) -> Result<i32> {
    req.validate()?;
    let cfg = parse_config(&req.config_path)?;
    fs::create_dir_all(&req.output_dir)?;

    let playback_rows = match &req.playback_path {
        Some(path) => {
            let file = fs::File::open(path)
                .map_err(|e| Error::Playback(format!("cannot open {}: {e}", path.display())))?;
            Some(read_csv(BufReader::new(file))?)
        }
        None => None,
    };

    let base_seed = req.seed_override.unwrap_or(cfg.seed);
    let prefix = if playback_rows.is_some() { "replay" } else { "run" };
    let mut outcomes = Vec::with_capacity(req.repetitions as usize);
    for rep in 0..req.repetitions as u64 {
        let seed = base_seed + rep;
        let rep_cfg = ScenarioConfig { seed, ..cfg.clone() };
        let (trace, report) = match &playback_rows {
            Some(rows) => playback_trace(rows, &rep_cfg)?,
            None => run_scenario(&rep_cfg)?,
        };
        let outcome = write_repetition(&req.output_dir, prefix, seed, &trace, &report)?;
        println!(
            "{}: seed {} rounds {} faulted {} cost {:.6}",
            outcome.trace_file, seed, report.rounds, report.faulted, report.quadratic_cost
        );
        outcomes.push(outcome);
    }
    write_summary(&req.output_dir, &outcomes)?;

    let any_fault = outcomes.iter().any(|o| o.report.faulted);
    if any_fault && !req.allow_fault {
        eprintln!("at least one repetition faulted; rerun with --allow-fault to accept");
        return Ok(1);
    }
    Ok(0)
}

fn write_repetition(
    dir: &Path,
    prefix: &str,
    seed: u64,
    trace: &Trace,
    report: &MetricsReport,
) -> Result<RepetitionOutcome> {
    let trace_file = format!("{prefix}-{seed:04}.trace.csv");
    let metrics_file = format!("{prefix}-{seed:04}.metrics.json");
    fs::write(dir.join(&trace_file), trace.to_csv_string())?;
    fs::write(dir.join(&metrics_file), report.write_json())?;
    Ok(RepetitionOutcome { seed, trace_file, metrics_file, report: report.clone() })
}

fn write_summary(dir: &Path, outcomes: &[RepetitionOutcome]) -> Result<()> {
    let mut text = String::from(SUMMARY_HEADER);
    text.push('\n');
    for o in outcomes {
        let r = &o.report;
        let sync = match r.sync_rms_error {
            Some(v) => crate::trace::format_sig9(v),
            None => String::new(),
        };
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            o.seed,
            r.faulted,
            r.rounds,
            crate::trace::format_sig9(r.quadratic_cost),
            crate::trace::format_sig9(r.actuation_intensity),
            crate::trace::format_sig9(r.max_abs_angle),
            crate::trace::format_sig9(r.angle_within_3deg_fraction),
            crate::trace::format_sig9(r.max_abs_pos),
            sync,
            crate::trace::format_sig9(r.drop_rate_state),
            crate::trace::format_sig9(r.drop_rate_control),
            o.trace_file,
            o.metrics_file,
        ));
    }
    fs::write(dir.join("summary.csv"), text)?;
    Ok(())
}

/// Parses and validates a configuration, printing the resolved form.
pub fn validate(config_path: &Path) -> Result<()> {
    let cfg = parse_config(config_path)?;
    print!("{}", cfg.write_json());
    Ok(())
}
