//! Scenario orchestration.
//!
//! One run advances plant physics at the fine step and the bus at round
//! granularity. Remote stabilization follows the two-round pipeline: a state
//! sensed at round r is delivered at r+1, the input computed from it travels
//! during round r+1, and actuation starts at round r+2. Controllers bridge
//! the delay (and packet loss) with model-based prediction over the mirrored
//! applied-input history.

use crate::config::{ControllerLocation, ScenarioConfig, SyncVariant, Task};
use crate::control::{
    build_augmented_sync_design, consensus_input, design_lqr, predict_state, stabilizing_inputs,
    LinearModel, LqrDesign, PredictorState, SyncGraph,
};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::network::{
    Bus, Delivery, NodeId, Outbound, Packet, PacketKind, RoundSchedule, Slot, Topology,
};
use crate::plant::{
    apply_actuation, integrate_step, measure, Disturbance, EstimatorState, PlantState,
};
use crate::trace::{FaultKind, FaultRecord, InputProvenance, Trace, TraceRow};
use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Consecutive state-packet losses on one link that fault the run.
pub const BLACKOUT_LIMIT: u32 = 25;

/// Sensing-to-actuation delay of the configured pipeline.
pub fn loop_delay(rounds_of_delay: u32, round_period: f64) -> f64 {
    rounds_of_delay as f64 * round_period
}

/// Round-clock parameters derived from the scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingModel {
    pub rounds_of_delay: u32,
    pub sample_time: f64,
}

impl TimingModel {
    pub fn for_config(cfg: &ScenarioConfig) -> Self {
        Self {
            rounds_of_delay: cfg.rounds_of_delay(),
            sample_time: cfg.network.round_period_s,
        }
    }
}

const STATE_PAYLOAD_BYTES: u32 = 16;
const CONTROL_BYTES_PER_INPUT: u32 = 4;

fn plant_node(cfg: &ScenarioConfig, agent: usize) -> NodeId {
    match cfg.location() {
        ControllerLocation::Remote => NodeId((cfg.controller_count() + agent) as u32),
        ControllerLocation::Local => NodeId(agent as u32),
    }
}

fn controller_node(cfg: &ScenarioConfig, agent: usize) -> NodeId {
    match cfg.location() {
        ControllerLocation::Remote => NodeId((agent % cfg.controller_count()) as u32),
        ControllerLocation::Local => plant_node(cfg, agent),
    }
}

/// Whether any state packets travel each round.
fn state_traffic(cfg: &ScenarioConfig) -> bool {
    cfg.location() == ControllerLocation::Remote || cfg.task.needs_sync()
}

/// Per-round slot plan: one state slot per plant, one control slot per
/// remotely controlled agent (its size grows with the lookahead).
pub fn build_schedule(cfg: &ScenarioConfig) -> Result<RoundSchedule> {
    let mut slots = Vec::new();
    if state_traffic(cfg) {
        for i in 0..cfg.agents {
            slots.push(Slot { source: plant_node(cfg, i), payload_bytes: STATE_PAYLOAD_BYTES });
        }
    }
    if cfg.location() == ControllerLocation::Remote {
        for i in 0..cfg.agents {
            slots.push(Slot {
                source: controller_node(cfg, i),
                payload_bytes: CONTROL_BYTES_PER_INPUT * cfg.lookahead as u32,
            });
        }
    }
    RoundSchedule::new(
        cfg.network.round_period_s,
        slots,
        cfg.network.bitrate_bps,
        cfg.network.per_slot_overhead_s,
    )
    .map_err(|e| Error::Config(format!("network: {e}")))
}

/// Hop-distance structure for the configured deployment.
pub fn build_topology(cfg: &ScenarioConfig) -> Result<Topology> {
    let n = cfg.network.node_count;
    let hops = cfg.network.hops;
    match cfg.location() {
        ControllerLocation::Remote => {
            Topology::hub(n, cfg.controller_count(), cfg.agents, hops)
        }
        ControllerLocation::Local => {
            // Agents pairwise `hops` apart; relay nodes fill the deployment.
            let agents = cfg.agents;
            let half = hops.div_ceil(2);
            let mut hop = vec![vec![0u32; n]; n];
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    hop[i][j] = match (i < agents, j < agents) {
                        (true, true) => hops,
                        (true, false) | (false, true) => half.max(1),
                        (false, false) => 1,
                    };
                }
            }
            Topology::new(hop)
        }
    }
}

fn initial_state(cfg: &ScenarioConfig, agent: usize) -> PlantState {
    let spread = if cfg.agents == 1 {
        0.0
    } else {
        -0.1 + 0.2 * agent as f64 / (cfg.agents - 1) as f64
    };
    let tilt = 2.0_f64.to_radians();
    match cfg.task {
        Task::Stabilization => PlantState::new(tilt, 0.0, 0.0, 0.0),
        Task::Synchronization => PlantState::new(std::f64::consts::PI, spread, 0.0, 0.0),
        Task::StabilizationSynchronization => PlantState::new(tilt, spread, 0.0, 0.0),
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ tag.wrapping_mul(0x9E3779B97F4A7C15))
}

const SEED_TAG_BUS: u64 = 1;
const SEED_TAG_SENSOR_BASE: u64 = 1000;

/// Plant-side consumption of lookahead input sequences: a newly received
/// packet resets the buffer, otherwise the cursor advances; a drained buffer
/// holds the last applied value.
#[derive(Debug, Clone)]
struct InputBuffer {
    pending: Vec<f64>,
    cursor: usize,
    last: f64,
    src: Option<(u64, Option<u64>)>,
}

impl InputBuffer {
    fn new() -> Self {
        Self { pending: Vec::new(), cursor: 0, last: 0.0, src: None }
    }

    fn receive(&mut self, inputs: Vec<f64>, computed_round: u64, based_on: Option<u64>) {
        self.pending = inputs;
        self.cursor = 0;
        self.src = Some((computed_round, based_on));
    }

    fn advance(&mut self) -> (f64, Option<(u64, Option<u64>)>) {
        if self.cursor < self.pending.len() {
            self.last = self.pending[self.cursor];
            self.cursor += 1;
        }
        (self.last, self.src)
    }
}

struct AgentRuntime {
    state: PlantState,
    estimator: EstimatorState,
    buffer: InputBuffer,
    rng: ChaCha8Rng,
}

/// Local controller context: last received neighbor estimates and per-link
/// loss streaks.
#[derive(Default)]
struct LocalController {
    neighbor_est: BTreeMap<usize, (u64, [f64; 4])>,
    loss_streak: BTreeMap<usize, u32>,
}

struct SyncSetup {
    variant: SyncVariant,
    graph: SyncGraph,
    coupling_gain: f64,
    k_aug: Option<DMatrix<f64>>,
    theta_eq: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct BodyKey {
    source: u32,
    kind: PacketKind,
    sequence: u64,
}

fn body_key(p: &Packet) -> BodyKey {
    BodyKey { source: p.source.0, kind: p.kind, sequence: p.sequence }
}

#[derive(Debug, Clone)]
struct StatePayload {
    agent: usize,
    sensed_round: u64,
    estimate: [f64; 4],
    /// Input the plant applies during the sensed round (acknowledged truth
    /// for the controller-side mirror).
    applied: f64,
}

#[derive(Debug, Clone)]
struct ControlPayload {
    agent: usize,
    computed_round: u64,
    based_on: Option<u64>,
    inputs: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Body {
    State(StatePayload),
    Control(ControlPayload),
}

struct TapeEntry {
    theta: f64,
    pos: f64,
    est: [f64; 4],
}

struct Tape {
    rounds: Vec<Vec<TapeEntry>>,
}

impl Tape {
    fn from_rows(rows: &[TraceRow], cfg: &ScenarioConfig) -> Result<Self> {
        let n = cfg.agents;
        if rows.is_empty() {
            return Err(Error::Playback("recorded trace has no rows".into()));
        }
        if rows.len() % n != 0 {
            return Err(Error::Playback(format!(
                "{} rows do not tile {} agents",
                rows.len(),
                n
            )));
        }
        let period = cfg.network.round_period_s;
        let mut rounds = Vec::with_capacity(rows.len() / n);
        for (r, block) in rows.chunks(n).enumerate() {
            let expected_t = r as f64 * period;
            let mut entries = Vec::with_capacity(n);
            for (i, row) in block.iter().enumerate() {
                if row.agent as usize != i {
                    return Err(Error::Playback(format!(
                        "round {r}: expected agent {i}, found {}",
                        row.agent
                    )));
                }
                if (row.t - expected_t).abs() > 1e-6 {
                    return Err(Error::Playback(format!(
                        "round {r}: timestamp {} does not match the configured round period {period}",
                        row.t
                    )));
                }
                entries.push(TapeEntry {
                    theta: row.theta,
                    pos: row.pos,
                    est: [row.theta_est, row.pos_est, row.theta_dot_est, row.pos_dot_est],
                });
            }
            rounds.push(entries);
        }
        Ok(Self { rounds })
    }
}

/// Runs one scenario and returns the trace plus its metrics report.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<(Trace, MetricsReport)> {
    let cfg = cfg.clone().resolved()?;
    run_inner(&cfg, None)
}

/// Re-runs controllers and network live while sensing comes from a recorded
/// trace. Physics is not re-integrated; the true-state columns replay the
/// recording.
pub fn playback_trace(recorded: &[TraceRow], cfg: &ScenarioConfig) -> Result<(Trace, MetricsReport)> {
    let cfg = cfg.clone().resolved()?;
    let tape = Tape::from_rows(recorded, &cfg)?;
    run_inner(&cfg, Some(tape))
}

fn run_inner(cfg: &ScenarioConfig, tape: Option<Tape>) -> Result<(Trace, MetricsReport)> {
    let n = cfg.agents;
    let ts = cfg.network.round_period_s;
    let dt = cfg.physics_dt_s;
    let steps_per_round = cfg.steps_per_round();
    let remote = cfg.location() == ControllerLocation::Remote;
    let prediction = cfg.controller.prediction;
    let lookahead = cfg.lookahead;
    let v_lim = cfg.plant.voltage_limit;
    let sensor_cfg = cfg.sensor.sensor_config();

    let rounds = match &tape {
        Some(t) => cfg.expected_rounds().min(t.rounds.len() as u64),
        None => cfg.expected_rounds(),
    };

    // Controller designs.
    let stab: Option<(LinearModel, LqrDesign)> = if cfg.task.needs_stabilization() {
        let model = LinearModel::for_plant(&cfg.plant, PlantState::upright(), 0.0, ts)?;
        let q = DMatrix::from_diagonal(&DVector::from_row_slice(&cfg.controller.q_diag));
        let r = DMatrix::from_element(1, 1, cfg.controller.r);
        let design = design_lqr(&model.a, &model.b, &q, &r)?;
        Some((model, design))
    } else {
        None
    };
    let sync: Option<SyncSetup> = if cfg.task.needs_sync() {
        let graph = cfg.controller.sync.graph.to_graph()?;
        let k_aug = match cfg.controller.sync.variant {
            SyncVariant::Augmented => {
                let model = LinearModel::for_plant(&cfg.plant, PlantState::hanging(), 0.0, ts)?;
                let design = build_augmented_sync_design(
                    n,
                    &model,
                    cfg.controller.sync.pairwise_weight,
                    cfg.controller.r,
                )?;
                Some(design.k)
            }
            SyncVariant::Consensus => None,
        };
        Some(SyncSetup {
            variant: cfg.controller.sync.variant.clone(),
            graph,
            coupling_gain: cfg.controller.sync.coupling_gain,
            k_aug,
            theta_eq: cfg.task.theta_eq(),
        })
    } else {
        None
    };

    let schedule = build_schedule(cfg)?;
    let topology = build_topology(cfg)?;
    let mut bus = Bus::new(
        schedule,
        topology,
        cfg.network.loss,
        derive_seed(cfg.seed, SEED_TAG_BUS),
    )?;

    let mut agents: Vec<AgentRuntime> = (0..n)
        .map(|i| -> Result<AgentRuntime> {
            Ok(AgentRuntime {
                state: initial_state(cfg, i),
                estimator: EstimatorState::new(cfg.sensor.filter_alpha)?,
                buffer: InputBuffer::new(),
                rng: ChaCha8Rng::seed_from_u64(derive_seed(
                    cfg.seed,
                    SEED_TAG_SENSOR_BASE + i as u64,
                )),
            })
        })
        .collect::<Result<_>>()?;

    // Remote predictors, one per agent; round 0 applies a held zero.
    let mut preds: Vec<PredictorState> = (0..n).map(|_| PredictorState::new()).collect();
    // Local controller contexts (local stabilization and/or sync).
    let mut locals: Vec<LocalController> =
        (0..n).map(|_| LocalController::default()).collect();

    let has_state_traffic = state_traffic(cfg);
    let mut rows: Vec<TraceRow> = Vec::new();
    let mut faults: Vec<FaultRecord> = Vec::new();
    let mut provenance: Vec<InputProvenance> = Vec::new();
    let mut inflight: Vec<Delivery> = Vec::new();
    let mut bodies: BTreeMap<BodyKey, Body> = BTreeMap::new();

    'rounds: for round in 0..rounds {
        let t = round as f64 * ts;

        // Deliveries from the previous round land at this boundary.
        for d in &inflight {
            let body = bodies.get(&body_key(&d.packet)).expect("body recorded at send time");
            match body {
                Body::State(sp) => {
                    if remote && d.destination == controller_node(cfg, sp.agent) {
                        let pred = &mut preds[sp.agent];
                        if d.received {
                            pred.ingest_state(sp.sensed_round, sp.estimate, sp.applied);
                        } else {
                            pred.note_state_loss();
                            if pred.consecutive_losses() >= BLACKOUT_LIMIT {
                                faults.push(FaultRecord {
                                    agent: sp.agent as u32,
                                    time: t,
                                    kind: FaultKind::Blackout {
                                        consecutive_losses: pred.consecutive_losses(),
                                    },
                                });
                                break 'rounds;
                            }
                        }
                    } else if !remote {
                        // Destination hosts a local controller.
                        let consumer = d.destination.0 as usize;
                        if consumer < n && consumer != sp.agent {
                            let lc = &mut locals[consumer];
                            if d.received {
                                lc.neighbor_est.insert(sp.agent, (sp.sensed_round, sp.estimate));
                                lc.loss_streak.insert(sp.agent, 0);
                            } else {
                                let streak = lc.loss_streak.entry(sp.agent).or_insert(0);
                                *streak += 1;
                                if *streak >= BLACKOUT_LIMIT {
                                    faults.push(FaultRecord {
                                        agent: consumer as u32,
                                        time: t,
                                        kind: FaultKind::Blackout { consecutive_losses: *streak },
                                    });
                                    break 'rounds;
                                }
                            }
                        }
                    }
                }
                Body::Control(cp) => {
                    if d.received {
                        agents[cp.agent].buffer.receive(
                            cp.inputs.clone(),
                            cp.computed_round,
                            cp.based_on,
                        );
                    }
                }
            }
        }
        inflight.clear();
        bodies.clear();

        // Sense every plant (or read the tape).
        let mut snapshots: Vec<(f64, f64)> = Vec::with_capacity(n);
        let mut estimates: Vec<[f64; 4]> = Vec::with_capacity(n);
        for (i, agent) in agents.iter_mut().enumerate() {
            match &tape {
                Some(tape) => {
                    let e = &tape.rounds[round as usize][i];
                    snapshots.push((e.theta, e.pos));
                    estimates.push(e.est);
                }
                None => {
                    let m = measure(&agent.state, &sensor_cfg, t, &mut agent.rng);
                    let est = agent.estimator.update(&m, ts)?;
                    snapshots.push((agent.state.theta, agent.state.pos));
                    // Controllers consume the file representation of the
                    // estimate, so replaying a recorded trace reproduces the
                    // original inputs exactly.
                    estimates.push(est.map(crate::trace::canon));
                }
            }
        }

        // Choose the input each plant applies during this round.
        let mut applied = vec![0.0; n];
        for i in 0..n {
            if remote {
                let (u, src) = agents[i].buffer.advance();
                applied[i] = apply_actuation(u, &cfg.plant);
                provenance.push(InputProvenance {
                    round,
                    agent: i as u32,
                    computed_round: src.map(|s| s.0),
                    based_on_round: src.and_then(|s| s.1),
                });
            } else {
                let mut u = 0.0;
                if let Some((model, design)) = &stab {
                    u += stabilizing_inputs(estimates[i], design, model, 1, v_lim)[0];
                }
                if let Some(sync) = &sync {
                    u += local_sync_input(
                        sync,
                        &locals[i],
                        i,
                        n,
                        &estimates[i],
                        round,
                        ts,
                        if prediction { Some(cfg.sensor.filter_alpha) } else { None },
                    )?;
                }
                applied[i] = apply_actuation(u, &cfg.plant);
                provenance.push(InputProvenance {
                    round,
                    agent: i as u32,
                    computed_round: Some(round),
                    based_on_round: Some(round),
                });
            }
        }

        // Enqueue this round's packets.
        let mut outbound: Vec<Outbound> = Vec::new();
        if has_state_traffic {
            for i in 0..n {
                let packet = Packet {
                    source: plant_node(cfg, i),
                    payload_bytes: STATE_PAYLOAD_BYTES,
                    sequence: round,
                    kind: PacketKind::State,
                };
                let mut destinations = Vec::new();
                if remote {
                    destinations.push(controller_node(cfg, i));
                }
                if let Some(sync) = &sync {
                    for j in sync.graph.neighbors_of(i, n) {
                        destinations.push(plant_node(cfg, j));
                    }
                }
                bodies.insert(
                    body_key(&packet),
                    Body::State(StatePayload {
                        agent: i,
                        sensed_round: round,
                        estimate: estimates[i],
                        applied: applied[i],
                    }),
                );
                outbound.push(Outbound { packet, destinations });
            }
        }
        if remote {
            let (model, design) = stab.as_ref().expect("remote control is stabilization");
            for i in 0..n {
                let pred = &mut preds[i];
                let (inputs, based_on) = match pred.last_received() {
                    Some((r, x_stale)) => {
                        let ahead = (round + 1) - r;
                        let x_hat = if prediction {
                            predict_state(pred, model, ahead)?
                        } else {
                            x_stale
                        };
                        (stabilizing_inputs(x_hat, design, model, lookahead, v_lim), Some(r))
                    }
                    None => (vec![0.0; lookahead], None),
                };
                pred.note_planned_input(round + 1, inputs[0]);
                let packet = Packet {
                    source: controller_node(cfg, i),
                    payload_bytes: CONTROL_BYTES_PER_INPUT * lookahead as u32,
                    sequence: round * n as u64 + i as u64,
                    kind: PacketKind::Control,
                };
                bodies.insert(
                    body_key(&packet),
                    Body::Control(ControlPayload {
                        agent: i,
                        computed_round: round,
                        based_on,
                        inputs,
                    }),
                );
                outbound.push(Outbound { packet, destinations: vec![plant_node(cfg, i)] });
            }
        }

        // Run the bus; deliveries land at the next boundary.
        let deliveries = bus.run_round(&outbound)?;
        let mut gamma_state = vec![0u8; n];
        let mut gamma_control = vec![0u8; n];
        for d in &deliveries {
            match bodies.get(&body_key(&d.packet)).expect("own packet") {
                Body::State(sp) => {
                    if d.gamma == 1 {
                        gamma_state[sp.agent] = 1;
                    }
                }
                Body::Control(cp) => gamma_control[cp.agent] = d.gamma,
            }
        }
        inflight = deliveries;

        // Integrate physics across the round; a track-limit hit faults the
        // run and drops this round from the trace.
        if tape.is_none() {
            for step in 0..steps_per_round {
                for (i, agent) in agents.iter_mut().enumerate() {
                    agent.state = integrate_step(
                        &agent.state,
                        applied[i],
                        &Disturbance::default(),
                        &cfg.plant,
                        dt,
                    )?;
                    if agent.state.pos.abs() > cfg.plant.track_limit {
                        faults.push(FaultRecord {
                            agent: i as u32,
                            time: t + (step + 1) as f64 * dt,
                            kind: FaultKind::TrackLimit { pos: agent.state.pos },
                        });
                        break 'rounds;
                    }
                }
            }
        }

        for i in 0..n {
            rows.push(TraceRow::canonical(
                t,
                i as u32,
                snapshots[i].0,
                snapshots[i].1,
                estimates[i],
                applied[i],
                gamma_state[i],
                gamma_control[i],
            ));
        }
    }

    let trace = Trace {
        rows,
        faults,
        seed: cfg.seed,
        round_period: ts,
        agent_count: n,
        config: cfg.clone(),
        provenance,
    };
    let report = MetricsReport::from_rows(&trace.rows, cfg)?;
    debug_assert_eq!(report.faulted, trace.faulted());
    Ok((trace, report))
}

/// Synchronization term of a local controller: consensus over predicted
/// neighbor positions, or the agent's row of the stacked LQR gain.
///
/// `lead_alpha` carries the filter coefficient when delay compensation is
/// on (None disables it, leaving stale values in place). Estimates are
/// extrapolated across their network age plus the known sensing latency:
/// half a sample for the backward difference, (1-alpha)/alpha samples of
/// filter group delay, and half a sample for the zero-order hold.
#[allow(clippy::too_many_arguments)]
fn local_sync_input(
    sync: &SyncSetup,
    lc: &LocalController,
    agent: usize,
    n: usize,
    own_est: &[f64; 4],
    round: u64,
    ts: f64,
    lead_alpha: Option<f64>,
) -> Result<f64> {
    let lead = match lead_alpha {
        Some(alpha) => 1.0 + (1.0 - alpha) / alpha,
        None => 0.0,
    };
    let extrapolate = |age_rounds: f64, est: &[f64; 4]| -> [f64; 4] {
        if lead_alpha.is_none() {
            return *est;
        }
        let horizon = (age_rounds + lead) * ts;
        [est[0] + horizon * est[2], est[1] + horizon * est[3], est[2], est[3]]
    };
    match sync.variant {
        SyncVariant::Consensus => {
            let mut neighbor_positions = Vec::new();
            for j in sync.graph.neighbors_of(agent, n) {
                if let Some((sensed, est)) = lc.neighbor_est.get(&j) {
                    neighbor_positions.push(extrapolate((round - sensed) as f64, est)[1]);
                }
            }
            if neighbor_positions.is_empty() {
                // Nothing heard yet.
                return Ok(0.0);
            }
            let own_pos = extrapolate(0.0, own_est)[1];
            consensus_input(own_pos, &neighbor_positions, sync.coupling_gain)
        }
        SyncVariant::Augmented => {
            let k = sync.k_aug.as_ref().expect("augmented design built");
            let x_eq = [sync.theta_eq, 0.0, 0.0, 0.0];
            let mut dx = DVector::zeros(4 * n);
            for j in 0..n {
                let est_j: [f64; 4] = if j == agent {
                    extrapolate(0.0, own_est)
                } else if let Some((sensed, est)) = lc.neighbor_est.get(&j) {
                    extrapolate((round - sensed) as f64, est)
                } else {
                    x_eq // unknown agents contribute zero deviation
                };
                for c in 0..4 {
                    dx[4 * j + c] = est_j[c] - x_eq[c];
                }
            }
            let u = -(k * dx);
            Ok(u[(agent, 0)])
        }
    }
}
