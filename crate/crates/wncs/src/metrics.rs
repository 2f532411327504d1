//! Primary and secondary performance metrics computed from a trace.
//!
//! Every metric is a pure function of the trace rows and the configuration,
//! so a report recomputed from a persisted trace file is bit-identical to
//! the in-run report.

use crate::config::ScenarioConfig;
use crate::engine;
use crate::error::{Error, Result};
use crate::network;
use crate::trace::TraceRow;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Aggregated run report. `sync_rms_error` is null for single-agent runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Per-round mean of the quadratic state/input error.
    pub quadratic_cost: f64,
    /// Integral of u^2 over the run [V^2 s].
    pub actuation_intensity: f64,
    /// Largest pole-angle deviation from the task equilibrium [rad].
    pub max_abs_angle: f64,
    /// Fraction of rows with the angle deviation within 3 degrees.
    pub angle_within_3deg_fraction: f64,
    /// Largest cart excursion [m].
    pub max_abs_pos: f64,
    /// RMS pairwise cart-position error over rounds and pairs [m].
    pub sync_rms_error: Option<f64>,
    pub drop_rate_state: f64,
    pub drop_rate_control: f64,
    /// Sensing-to-actuation delay of the configured pipeline [s].
    pub loop_latency: f64,
    pub radio_duty_cycle: f64,
    /// Rounds actually recorded; fewer than configured means the run faulted.
    pub rounds: u64,
    pub faulted: bool,
}

const THREE_DEGREES: f64 = 3.0 * std::f64::consts::PI / 180.0;

/// Mean per-round quadratic error `dx' Q dx + R u^2` with the velocity
/// entries taken from the recorded estimates.
pub fn quadratic_cost(
    rows: &[TraceRow],
    agent_count: usize,
    q: &DMatrix<f64>,
    r: f64,
    theta_eq: f64,
) -> f64 {
    if rows.is_empty() || agent_count == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for row in rows {
        let dx = DVector::from_row_slice(&[
            row.theta - theta_eq,
            row.pos,
            row.theta_dot_est,
            row.pos_dot_est,
        ]);
        total += (dx.transpose() * q * &dx)[(0, 0)] + r * row.u * row.u;
    }
    let rounds = (rows.len() / agent_count) as f64;
    total / rounds
}

/// Sum of u^2 * Ts over every row.
pub fn actuation_intensity(rows: &[TraceRow], sample_time: f64) -> f64 {
    rows.iter().map(|r| r.u * r.u * sample_time).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkStats {
    pub drop_rate_state: f64,
    pub drop_rate_control: f64,
    pub loop_latency: f64,
    pub radio_duty_cycle: f64,
}

/// Drop rates from the gamma columns plus the configured latency and duty
/// cycle.
pub fn network_stats(
    rows: &[TraceRow],
    schedule: &network::RoundSchedule,
    rounds_of_delay: u32,
    hops_active: u32,
) -> NetworkStats {
    let n = rows.len() as f64;
    let (state_sum, ctrl_sum) = rows.iter().fold((0.0, 0.0), |(s, c), r| {
        (s + r.gamma_state as f64, c + r.gamma_control as f64)
    });
    NetworkStats {
        drop_rate_state: if rows.is_empty() { 0.0 } else { state_sum / n },
        drop_rate_control: if rows.is_empty() { 0.0 } else { ctrl_sum / n },
        loop_latency: engine::loop_delay(rounds_of_delay, schedule.round_period),
        radio_duty_cycle: network::radio_duty_cycle(schedule, hops_active),
    }
}

/// RMS of the pairwise cart-position error over rounds and agent pairs.
pub fn sync_metric(rows: &[TraceRow], agent_count: usize) -> Result<f64> {
    if agent_count < 2 {
        return Err(Error::InvalidArgument(format!(
            "synchronization metric needs at least 2 agents, got {agent_count}"
        )));
    }
    let rounds = rows.len() / agent_count;
    if rounds == 0 {
        return Ok(0.0);
    }
    let pairs = (agent_count * (agent_count - 1) / 2) as f64;
    let mut total = 0.0;
    for round in 0..rounds {
        let block = &rows[round * agent_count..(round + 1) * agent_count];
        let mut round_sum = 0.0;
        for i in 0..agent_count {
            for j in (i + 1)..agent_count {
                let e = block[i].pos - block[j].pos;
                round_sum += e * e;
            }
        }
        total += round_sum / pairs;
    }
    Ok((total / rounds as f64).sqrt())
}

impl MetricsReport {
    /// Computes the full report from trace rows and the configuration that
    /// produced them. Used both in-run and when re-metering a persisted file.
    pub fn from_rows(rows: &[TraceRow], cfg: &ScenarioConfig) -> Result<Self> {
        let agents = cfg.agents;
        if agents == 0 || rows.len() % agents != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} rows do not tile {} agents",
                rows.len(),
                agents
            )));
        }
        let rounds = (rows.len() / agents) as u64;
        let theta_eq = cfg.task.theta_eq();
        let q = DMatrix::from_diagonal(&DVector::from_row_slice(&cfg.controller.q_diag));
        let schedule = engine::build_schedule(cfg)?;

        let mut max_abs_angle: f64 = 0.0;
        let mut max_abs_pos: f64 = 0.0;
        let mut within = 0usize;
        for row in rows {
            let dev = (row.theta - theta_eq).abs();
            max_abs_angle = max_abs_angle.max(dev);
            max_abs_pos = max_abs_pos.max(row.pos.abs());
            if dev <= THREE_DEGREES {
                within += 1;
            }
        }
        let stats = network_stats(rows, &schedule, cfg.rounds_of_delay(), cfg.network.hops);
        Ok(Self {
            quadratic_cost: quadratic_cost(rows, agents, &q, cfg.controller.r, theta_eq),
            actuation_intensity: actuation_intensity(rows, cfg.network.round_period_s),
            max_abs_angle,
            angle_within_3deg_fraction: if rows.is_empty() {
                0.0
            } else {
                within as f64 / rows.len() as f64
            },
            max_abs_pos,
            sync_rms_error: if agents >= 2 { Some(sync_metric(rows, agents)?) } else { None },
            drop_rate_state: stats.drop_rate_state,
            drop_rate_control: stats.drop_rate_control,
            loop_latency: stats.loop_latency,
            radio_duty_cycle: stats.radio_duty_cycle,
            rounds,
            faulted: rounds < cfg.expected_rounds(),
        })
    }

    pub fn write_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: f64, agent: u32, theta: f64, pos: f64, u: f64) -> TraceRow {
        TraceRow::canonical(t, agent, theta, pos, [theta, pos, 0.0, 0.0], u, 0, 0)
    }

    fn default_q() -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(&[5.0, 10.0, 0.1, 0.5]))
    }

    #[test]
    fn zero_deviation_trace_has_zero_cost() {
        let rows: Vec<TraceRow> = (0..10).map(|k| row(0.04 * k as f64, 0, 0.0, 0.0, 0.0)).collect();
        assert_eq!(quadratic_cost(&rows, 1, &default_q(), 1.0, 0.0), 0.0);
    }

    #[test]
    fn single_round_cost_matches_quadratic_form() {
        let rows = vec![row(0.0, 0, 0.1, 0.0, 0.0)];
        let c = quadratic_cost(&rows, 1, &default_q(), 1.0, 0.0);
        assert!((c - 0.05).abs() < 1e-12, "{c}");
        // Doubling Q doubles the state term.
        let c2 = quadratic_cost(&rows, 1, &(default_q() * 2.0), 1.0, 0.0);
        assert!((c2 - 0.1).abs() < 1e-12);
    }

    #[test]
    fn cost_is_a_per_round_mean() {
        let one = vec![row(0.0, 0, 0.1, 0.0, 0.0)];
        let padded: Vec<TraceRow> = (0..5)
            .map(|k| row(0.04 * k as f64, 0, if k == 0 { 0.1 } else { 0.0 }, 0.0, 0.0))
            .collect();
        let c1 = quadratic_cost(&one, 1, &default_q(), 1.0, 0.0);
        let c5 = quadratic_cost(&padded, 1, &default_q(), 1.0, 0.0);
        assert!((c5 - c1 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn empty_trace_has_zero_metrics() {
        assert_eq!(quadratic_cost(&[], 1, &default_q(), 1.0, 0.0), 0.0);
        assert_eq!(actuation_intensity(&[], 0.04), 0.0);
    }

    #[test]
    fn full_throttle_for_one_second_integrates_to_100() {
        let rows: Vec<TraceRow> =
            (0..25).map(|k| row(0.04 * k as f64, 0, 0.0, 0.0, 10.0)).collect();
        let a = actuation_intensity(&rows, 0.04);
        assert!((a - 100.0).abs() < 1e-9, "{a}");
        // Doubling u quadruples the integral.
        let rows2: Vec<TraceRow> =
            (0..25).map(|k| row(0.04 * k as f64, 0, 0.0, 0.0, 20.0)).collect();
        assert!((actuation_intensity(&rows2, 0.04) - 400.0).abs() < 1e-9);
    }

    #[test]
    fn drop_rates_are_column_means() {
        let mut rows: Vec<TraceRow> = (0..100)
            .map(|k| row(0.04 * k as f64, 0, 0.0, 0.0, 0.0))
            .collect();
        for k in [3, 30, 77] {
            rows[k].gamma_state = 1;
        }
        let sched = network::RoundSchedule::new(
            0.04,
            vec![network::Slot { source: network::NodeId(1), payload_bytes: 16 }],
            250_000.0,
            1e-3,
        )
        .unwrap();
        let stats = network_stats(&rows, &sched, 2, 3);
        assert!((stats.drop_rate_state - 0.03).abs() < 1e-12);
        assert_eq!(stats.drop_rate_control, 0.0);
        assert!((stats.loop_latency - 0.08).abs() < 1e-15);
    }

    #[test]
    fn sync_metric_handles_constant_offsets_and_relabeling() {
        let mk = |positions: [f64; 2], rounds: usize| -> Vec<TraceRow> {
            let mut rows = Vec::new();
            for k in 0..rounds {
                for (i, p) in positions.iter().enumerate() {
                    rows.push(row(0.04 * k as f64, i as u32, 0.0, *p, 0.0));
                }
            }
            rows
        };
        let same = mk([0.2, 0.2], 10);
        assert_eq!(sync_metric(&same, 2).unwrap(), 0.0);
        let offset = mk([0.25, 0.15], 10);
        let rms = sync_metric(&offset, 2).unwrap();
        assert!((rms - 0.1).abs() < 1e-12, "{rms}");
        let relabeled = mk([0.15, 0.25], 10);
        assert_eq!(sync_metric(&relabeled, 2).unwrap(), rms);
        assert!(matches!(sync_metric(&same, 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn report_from_empty_rows_is_zero_valued() {
        let cfg = ScenarioConfig::minimal_stabilization();
        let cfg = ScenarioConfig { duration_s: 0.0, ..cfg }.resolved().unwrap();
        let report = MetricsReport::from_rows(&[], &cfg).unwrap();
        assert_eq!(report.rounds, 0);
        assert!(!report.faulted);
        assert_eq!(report.quadratic_cost, 0.0);
        assert_eq!(report.actuation_intensity, 0.0);
        assert_eq!(report.sync_rms_error, None);
    }
}
