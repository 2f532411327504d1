//! Round-based many-to-many wireless bus abstraction.
//!
//! Every packet enqueued during a round is flooded to its interested
//! destinations and delivered exactly at the end of that round. Hop counts
//! affect only the minimum-delay diagnostic and the radio duty cycle, not
//! delivery timing within a round.

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

/// Identifier of a node attached to the bus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Static hop-distance structure of the deployment.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    node_count: usize,
    hop: Vec<Vec<u32>>,
}

impl Topology {
    /// Builds a topology from a full hop-distance matrix. The matrix must be
    /// symmetric with a zero diagonal and satisfy the triangle inequality.
    pub fn new(hop: Vec<Vec<u32>>) -> Result<Self> {
        let n = hop.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "topology needs at least 2 nodes, got {n}"
            )));
        }
        if hop.iter().any(|row| row.len() != n) {
            return Err(Error::InvalidArgument("hop matrix must be square".into()));
        }
        for i in 0..n {
            if hop[i][i] != 0 {
                return Err(Error::InvalidArgument(format!("hop({i},{i}) must be 0")));
            }
            for j in 0..n {
                if hop[i][j] != hop[j][i] {
                    return Err(Error::InvalidArgument(format!(
                        "hop distance must be symmetric, differs at ({i},{j})"
                    )));
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    if hop[i][j] > hop[i][k] + hop[k][j] {
                        return Err(Error::InvalidArgument(format!(
                            "triangle inequality violated for ({i},{j}) via {k}"
                        )));
                    }
                }
            }
        }
        Ok(Self { node_count: n, hop })
    }

    /// Hub deployment: `controllers` hub nodes (mutually co-located),
    /// `plants` agent nodes each `hops` away from the hub on their own
    /// branch, and relay nodes filling up `node_count`.
    pub fn hub(node_count: usize, controllers: usize, plants: usize, hops: u32) -> Result<Self> {
        if node_count < controllers + plants {
            return Err(Error::InvalidArgument(format!(
                "node_count {node_count} cannot host {controllers} controllers and {plants} plants"
            )));
        }
        let n = node_count;
        let mut hop = vec![vec![0u32; n]; n];
        let class = |i: usize| -> u8 {
            if i < controllers {
                0
            } else if i < controllers + plants {
                1
            } else {
                2
            }
        };
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                hop[i][j] = match (class(i), class(j)) {
                    (0, 0) => 0,
                    (0, 1) | (1, 0) => hops,
                    (1, 1) => 2 * hops,
                    (0, 2) | (2, 0) => 1,
                    (1, 2) | (2, 1) => hops + 1,
                    (2, 2) => 2,
                    _ => unreachable!(),
                };
            }
        }
        Self::new(hop)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn hop_distance(&self, a: NodeId, b: NodeId) -> Result<u32> {
        let (i, j) = (a.0 as usize, b.0 as usize);
        if i >= self.node_count || j >= self.node_count {
            return Err(Error::InvalidArgument(format!(
                "node out of range: {a}, {b} (count {})",
                self.node_count
            )));
        }
        Ok(self.hop[i][j])
    }
}

/// One transmission slot owned by a source node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub source: NodeId,
    pub payload_bytes: u32,
}

/// Per-round communication plan.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundSchedule {
    pub round_period: f64,
    pub slots: Vec<Slot>,
    pub bitrate: f64,
    pub per_slot_overhead: f64,
}

impl RoundSchedule {
    pub fn new(
        round_period: f64,
        slots: Vec<Slot>,
        bitrate: f64,
        per_slot_overhead: f64,
    ) -> Result<Self> {
        let s = Self { round_period, slots, bitrate, per_slot_overhead };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.round_period.is_finite() && self.round_period > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "round_period must be positive, got {}",
                self.round_period
            )));
        }
        if !(self.bitrate.is_finite() && self.bitrate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "bitrate must be positive, got {}",
                self.bitrate
            )));
        }
        if !(self.per_slot_overhead.is_finite() && self.per_slot_overhead >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "per_slot_overhead must be non-negative, got {}",
                self.per_slot_overhead
            )));
        }
        if self.slots.iter().any(|s| s.payload_bytes == 0) {
            return Err(Error::InvalidArgument("slot payload must be at least 1 byte".into()));
        }
        if self.busy_time() > self.round_period {
            return Err(Error::Capacity(format!(
                "slots need {:.6} s but the round is {:.6} s",
                self.busy_time(),
                self.round_period
            )));
        }
        Ok(())
    }

    pub fn slot_airtime(&self, slot: &Slot) -> f64 {
        slot.payload_bytes as f64 * 8.0 / self.bitrate
    }

    /// Total airtime plus per-slot overhead for one round.
    pub fn busy_time(&self) -> f64 {
        self.slots
            .iter()
            .map(|s| self.slot_airtime(s) + self.per_slot_overhead)
            .sum()
    }
}

/// Per-packet loss process, applied independently per destination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossModel {
    /// Independent losses with probability `p`.
    Bernoulli { p: f64 },
    /// Two-state Markov channel producing bursty losses.
    GilbertElliott {
        p_good_to_bad: f64,
        p_bad_to_good: f64,
        loss_good: f64,
        loss_bad: f64,
    },
}

impl Default for LossModel {
    fn default() -> Self {
        LossModel::Bernoulli { p: 0.02 }
    }
}

impl LossModel {
    pub fn validate(&self) -> Result<()> {
        let probs: Vec<(&str, f64)> = match self {
            LossModel::Bernoulli { p } => vec![("p", *p)],
            LossModel::GilbertElliott { p_good_to_bad, p_bad_to_good, loss_good, loss_bad } => {
                vec![
                    ("p_good_to_bad", *p_good_to_bad),
                    ("p_bad_to_good", *p_bad_to_good),
                    ("loss_good", *loss_good),
                    ("loss_bad", *loss_bad),
                ]
            }
        };
        for (name, v) in probs {
            if !(v.is_finite() && (0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be a probability in [0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Markov state of one directed channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChannelState {
    #[default]
    Good,
    Bad,
}

impl ChannelState {
    fn flipped(self) -> Self {
        match self {
            ChannelState::Good => ChannelState::Bad,
            ChannelState::Bad => ChannelState::Good,
        }
    }
}

/// Draws one reception outcome and advances the channel state.
pub fn sample_loss<R: Rng + ?Sized>(
    model: &LossModel,
    state: ChannelState,
    rng: &mut R,
) -> (bool, ChannelState) {
    match model {
        LossModel::Bernoulli { p } => (rng.gen::<f64>() >= *p, state),
        LossModel::GilbertElliott { p_good_to_bad, p_bad_to_good, loss_good, loss_bad } => {
            let loss_p = match state {
                ChannelState::Good => *loss_good,
                ChannelState::Bad => *loss_bad,
            };
            let received = rng.gen::<f64>() >= loss_p;
            let flip_p = match state {
                ChannelState::Good => *p_good_to_bad,
                ChannelState::Bad => *p_bad_to_good,
            };
            let next = if rng.gen::<f64>() < flip_p { state.flipped() } else { state };
            (received, next)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PacketKind {
    State,
    Control,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Packet {
    pub source: NodeId,
    pub payload_bytes: u32,
    pub sequence: u64,
    pub kind: PacketKind,
}

/// Outcome of one packet at one interested destination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Delivery {
    pub packet: Packet,
    pub destination: NodeId,
    pub received: bool,
    /// 1 exactly when the packet was lost at this destination.
    pub gamma: u8,
    /// End of the round in which the packet travelled.
    pub delivered_at: f64,
}

/// A packet together with the destinations that will consume it.
#[derive(Debug, Clone)]
pub struct Outbound {
    pub packet: Packet,
    pub destinations: Vec<NodeId>,
}

/// Lowest possible delay for a single packet over `hops` hops, ignoring
/// contention and buffering.
pub fn min_hop_delay(payload_bytes: u32, hops: u32, bitrate: f64) -> f64 {
    hops as f64 * (payload_bytes as f64 * 8.0 / bitrate)
}

/// Fraction of time the radio is busy, with the whole flood active over
/// `hops_active` hops. Capped at 1.
pub fn radio_duty_cycle(schedule: &RoundSchedule, hops_active: u32) -> f64 {
    let dc = schedule.busy_time() * hops_active as f64 / schedule.round_period;
    dc.min(1.0)
}

/// Sequential round-based bus instance. Channel states and the RNG evolve
/// from round to round; one instance drives one simulation run.
#[derive(Debug)]
pub struct Bus {
    schedule: RoundSchedule,
    topology: Topology,
    loss: LossModel,
    channels: BTreeMap<(NodeId, NodeId), ChannelState>,
    rng: ChaCha8Rng,
    round_index: u64,
    last_sequence: BTreeMap<(NodeId, PacketKind), u64>,
}

impl Bus {
    pub fn new(
        schedule: RoundSchedule,
        topology: Topology,
        loss: LossModel,
        seed: u64,
    ) -> Result<Self> {
        schedule.validate()?;
        loss.validate()?;
        Ok(Self {
            schedule,
            topology,
            loss,
            channels: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            round_index: 0,
            last_sequence: BTreeMap::new(),
        })
    }

    pub fn schedule(&self) -> &RoundSchedule {
        &self.schedule
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn round_index(&self) -> u64 {
        self.round_index
    }

    /// Runs one bus round. Every outbound packet is matched to a slot of its
    /// source, sampled for loss once per destination, and delivered at the
    /// end of the round. Deliveries are ordered by (slot index, destination).
    pub fn run_round(&mut self, outbound: &[Outbound]) -> Result<Vec<Delivery>> {
        let delivered_at = (self.round_index + 1) as f64 * self.schedule.round_period;

        // Match packets to slots: first unused slot of the same source.
        let mut used = vec![false; self.schedule.slots.len()];
        let mut assigned: Vec<(usize, &Outbound)> = Vec::with_capacity(outbound.len());
        for out in outbound {
            let p = &out.packet;
            if p.payload_bytes == 0 {
                return Err(Error::InvalidArgument("packet payload must be at least 1 byte".into()));
            }
            let slot_idx = self
                .schedule
                .slots
                .iter()
                .enumerate()
                .position(|(i, s)| !used[i] && s.source == p.source);
            let Some(idx) = slot_idx else {
                return Err(Error::Schedule(format!(
                    "no free slot for source {} in round {}",
                    p.source, self.round_index
                )));
            };
            if p.payload_bytes > self.schedule.slots[idx].payload_bytes {
                return Err(Error::Capacity(format!(
                    "packet of {} B from {} exceeds its {} B slot",
                    p.payload_bytes, p.source, self.schedule.slots[idx].payload_bytes
                )));
            }
            used[idx] = true;
            if let Some(last) = self.last_sequence.get(&(p.source, p.kind)) {
                if p.sequence <= *last {
                    return Err(Error::Schedule(format!(
                        "sequence {} from {} is not strictly increasing (last {})",
                        p.sequence, p.source, last
                    )));
                }
            }
            assigned.push((idx, out));
        }
        for (_, out) in &assigned {
            self.last_sequence
                .insert((out.packet.source, out.packet.kind), out.packet.sequence);
        }
        assigned.sort_by_key(|(idx, _)| *idx);

        let mut deliveries = Vec::new();
        for (_, out) in assigned {
            let mut dests = out.destinations.clone();
            dests.sort();
            dests.dedup();
            for dest in dests {
                self.topology.hop_distance(out.packet.source, dest)?;
                let state = self
                    .channels
                    .get(&(out.packet.source, dest))
                    .copied()
                    .unwrap_or_default();
                let (received, next) = sample_loss(&self.loss, state, &mut self.rng);
                self.channels.insert((out.packet.source, dest), next);
                deliveries.push(Delivery {
                    packet: out.packet,
                    destination: dest,
                    received,
                    gamma: u8::from(!received),
                    delivered_at,
                });
            }
        }
        self.round_index += 1;
        Ok(deliveries)
    }
}
