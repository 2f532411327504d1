//! Time-indexed run record and its CSV serialization.
//!
//! Rows are canonicalized to the file representation (9 significant digits)
//! when they are created, so a persisted trace re-reads to bit-identical
//! values and metrics computed before and after a round trip agree exactly.

use crate::config::ScenarioConfig;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

pub const TRACE_HEADER: &str = "t_s,agent_id,theta_rad,pos_m,theta_est_rad,pos_est_m,thetadot_est,posdot_est,u_V,gamma_state,gamma_control";

/// One agent-round sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub agent: u32,
    pub theta: f64,
    pub pos: f64,
    pub theta_est: f64,
    pub pos_est: f64,
    pub theta_dot_est: f64,
    pub pos_dot_est: f64,
    pub u: f64,
    pub gamma_state: u8,
    pub gamma_control: u8,
}

impl TraceRow {
    /// Builds a row with every float quantized to the file representation.
    #[allow(clippy::too_many_arguments)]
    pub fn canonical(
        t: f64,
        agent: u32,
        theta: f64,
        pos: f64,
        est: [f64; 4],
        u: f64,
        gamma_state: u8,
        gamma_control: u8,
    ) -> Self {
        Self {
            t: canon(t),
            agent,
            theta: canon(theta),
            pos: canon(pos),
            theta_est: canon(est[0]),
            pos_est: canon(est[1]),
            theta_dot_est: canon(est[2]),
            pos_dot_est: canon(est[3]),
            u: canon(u),
            gamma_state,
            gamma_control,
        }
    }
}

/// Formats a float with 9 significant digits.
pub fn format_sig9(x: f64) -> String {
    format!("{:.8e}", x)
}

/// Maps a float onto the value its file representation parses back to.
pub fn canon(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0; // normalize -0.0
    }
    format_sig9(x).parse().expect("own format is parseable")
}

/// Which kind of event terminated a run early.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultKind {
    /// The cart reached the physical end stop.
    TrackLimit { pos: f64 },
    /// A controller lost too many consecutive state packets.
    Blackout { consecutive_losses: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultRecord {
    pub agent: u32,
    pub time: f64,
    #[serde(flatten)]
    pub kind: FaultKind,
}

/// Provenance of one applied input, kept for causality checks. Not part of
/// the persisted CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputProvenance {
    pub round: u64,
    pub agent: u32,
    /// Round in which the control packet was computed, if any arrived yet.
    pub computed_round: Option<u64>,
    /// Sensing round of the state estimate the input was computed from.
    pub based_on_round: Option<u64>,
}

/// Full record of one run: per-round rows plus run-level context.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
    pub faults: Vec<FaultRecord>,
    pub seed: u64,
    pub round_period: f64,
    pub agent_count: usize,
    pub config: ScenarioConfig,
    pub provenance: Vec<InputProvenance>,
}

impl Trace {
    pub fn faulted(&self) -> bool {
        !self.faults.is_empty()
    }

    pub fn rounds_recorded(&self) -> usize {
        if self.agent_count == 0 {
            0
        } else {
            self.rows.len() / self.agent_count
        }
    }

    /// Serializes the rows to the canonical CSV form.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{TRACE_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                format_sig9(r.t),
                r.agent,
                format_sig9(r.theta),
                format_sig9(r.pos),
                format_sig9(r.theta_est),
                format_sig9(r.pos_est),
                format_sig9(r.theta_dot_est),
                format_sig9(r.pos_dot_est),
                format_sig9(r.u),
                r.gamma_state,
                r.gamma_control
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("trace CSV is UTF-8")
    }
}

/// Parses rows from trace CSV.
pub fn read_csv<R: BufRead>(r: R) -> Result<Vec<TraceRow>> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Playback("empty trace file".into()))??;
    if header.trim_end() != TRACE_HEADER {
        return Err(Error::Playback(format!(
            "unexpected trace header: {header:?}"
        )));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(Error::Playback(format!(
                "line {}: expected 11 columns, found {}",
                lineno + 2,
                fields.len()
            )));
        }
        let f = |i: usize| -> Result<f64> {
            fields[i].parse().map_err(|_| {
                Error::Playback(format!("line {}: bad float {:?}", lineno + 2, fields[i]))
            })
        };
        let gamma = |i: usize| -> Result<u8> {
            match fields[i] {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(Error::Playback(format!(
                    "line {}: gamma must be 0 or 1, found {other:?}",
                    lineno + 2
                ))),
            }
        };
        rows.push(TraceRow {
            t: f(0)?,
            agent: fields[1].parse().map_err(|_| {
                Error::Playback(format!("line {}: bad agent id {:?}", lineno + 2, fields[1]))
            })?,
            theta: f(2)?,
            pos: f(3)?,
            theta_est: f(4)?,
            pos_est: f(5)?,
            theta_dot_est: f(6)?,
            pos_dot_est: f(7)?,
            u: f(8)?,
            gamma_state: gamma(9)?,
            gamma_control: gamma(10)?,
        });
    }
    Ok(rows)
}
