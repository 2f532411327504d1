//! Scenario configuration: JSON schema, defaults, and validation.

use crate::control::SyncGraph;
use crate::error::{Error, Result};
use crate::network::LossModel;
use crate::plant::{PlantParams, Resolution};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "stabilization")]
    Stabilization,
    #[serde(rename = "synchronization")]
    Synchronization,
    #[serde(rename = "stabilization+synchronization", alias = "stabilization_synchronization")]
    StabilizationSynchronization,
}

impl Task {
    pub fn needs_sync(self) -> bool {
        matches!(self, Task::Synchronization | Task::StabilizationSynchronization)
    }

    pub fn needs_stabilization(self) -> bool {
        matches!(self, Task::Stabilization | Task::StabilizationSynchronization)
    }

    /// Pole equilibrium angle the task operates around.
    pub fn theta_eq(self) -> f64 {
        match self {
            Task::Synchronization => std::f64::consts::PI,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerLocation {
    Local,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mobility {
    #[default]
    Stationary,
    Mobile,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Total nodes in the deployment (controllers, plants, relays).
    pub node_count: usize,
    /// Hops between each plant and its controller.
    pub hops: u32,
    pub round_period_s: f64,
    pub bitrate_bps: f64,
    pub per_slot_overhead_s: f64,
    pub loss: LossModel,
    pub node_mobility: Mobility,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            node_count: 9,
            hops: 3,
            round_period_s: 0.04,
            bitrate_bps: 250_000.0,
            per_slot_overhead_s: 1e-3,
            loss: LossModel::default(),
            node_mobility: Mobility::Stationary,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorSection {
    pub angle_resolution: Resolution,
    pub position_resolution: Resolution,
    pub angle_noise_std: f64,
    pub position_noise_std: f64,
    /// Low-pass coefficient in (0, 1]; 1 disables filtering.
    pub filter_alpha: f64,
}

impl Default for SensorSection {
    fn default() -> Self {
        // filter_alpha trades derivative-noise attenuation against phase lag
        // inside the loop; 0.8 keeps the remote two-round pipeline stable
        // with margin (heavier filtering destabilizes it).
        Self {
            angle_resolution: Resolution::Counts(4096),
            position_resolution: Resolution::Counts(10_000),
            angle_noise_std: 0.0,
            position_noise_std: 0.0,
            filter_alpha: 0.8,
        }
    }
}

impl SensorSection {
    pub fn sensor_config(&self) -> crate::plant::SensorConfig {
        crate::plant::SensorConfig {
            angle_resolution: self.angle_resolution,
            position_resolution: self.position_resolution,
            angle_noise_std: self.angle_noise_std,
            position_noise_std: self.position_noise_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyncVariant {
    Consensus,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GraphConfig {
    Named(String),
    Adjacency(Vec<Vec<usize>>),
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig::Named("complete".into())
    }
}

impl GraphConfig {
    pub fn to_graph(&self) -> Result<SyncGraph> {
        match self {
            GraphConfig::Named(name) if name == "complete" => Ok(SyncGraph::Complete),
            GraphConfig::Named(name) => {
                Err(Error::Config(format!("controller.sync.graph: unknown graph {name:?}")))
            }
            GraphConfig::Adjacency(adj) => Ok(SyncGraph::Neighbors(adj.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyncSection {
    pub variant: SyncVariant,
    pub coupling_gain: f64,
    pub pairwise_weight: f64,
    pub graph: GraphConfig,
}

impl Default for SyncSection {
    fn default() -> Self {
        // Gains up to ~1 V/m keep the networked loop stable; beyond that the
        // consensus mode couples into the barely damped pole and diverges.
        Self {
            variant: SyncVariant::Consensus,
            coupling_gain: 0.5,
            pairwise_weight: 1.0,
            graph: GraphConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerSection {
    /// Diagonal of the state weight over (theta, pos, theta_dot, pos_dot).
    pub q_diag: [f64; 4],
    /// Input weight.
    pub r: f64,
    /// Model-based prediction across the loop delay (and neighbor-state
    /// extrapolation for synchronization). Disabling it makes controllers
    /// act on the stale last-received data.
    pub prediction: bool,
    pub sync: SyncSection,
}

impl Default for ControllerSection {
    fn default() -> Self {
        Self {
            q_diag: [5.0, 10.0, 0.1, 0.5],
            r: 1.0,
            prediction: true,
            sync: SyncSection::default(),
        }
    }
}

/// One fully specified experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub task: Task,
    #[serde(default = "default_agents")]
    pub agents: usize,
    /// Number of controllers; defaults to 1 for remote stabilization and to
    /// one per agent otherwise.
    #[serde(default)]
    pub controllers: Option<usize>,
    #[serde(default)]
    pub controller_location: Option<ControllerLocation>,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default = "default_lookahead")]
    pub lookahead: usize,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    #[serde(default = "default_physics_dt")]
    pub physics_dt_s: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub plant: PlantParams,
    #[serde(default)]
    pub sensor: SensorSection,
    #[serde(default)]
    pub controller: ControllerSection,
}

fn default_agents() -> usize {
    1
}
fn default_lookahead() -> usize {
    2
}
fn default_duration() -> f64 {
    60.0
}
fn default_physics_dt() -> f64 {
    1e-3
}
fn default_seed() -> u64 {
    1
}

impl ScenarioConfig {
    /// Smallest valid stabilization scenario, with every default filled in.
    pub fn minimal_stabilization() -> Self {
        let cfg: ScenarioConfig =
            serde_json::from_str(r#"{"task": "stabilization"}"#).expect("minimal config parses");
        cfg.resolved().expect("minimal config validates")
    }

    /// Fills the auto fields and validates everything.
    pub fn resolved(mut self) -> Result<Self> {
        let location = self.controller_location.unwrap_or(match self.task {
            Task::Stabilization => ControllerLocation::Remote,
            _ => ControllerLocation::Local,
        });
        self.controller_location = Some(location);
        let controllers = self.controllers.unwrap_or(match location {
            ControllerLocation::Remote => 1,
            ControllerLocation::Local => self.agents,
        });
        self.controllers = Some(controllers);
        self.validate()?;
        Ok(self)
    }

    pub fn location(&self) -> ControllerLocation {
        self.controller_location.expect("config must be resolved")
    }

    pub fn controller_count(&self) -> usize {
        self.controllers.expect("config must be resolved")
    }

    /// Rounds of delay between sensing and actuation.
    pub fn rounds_of_delay(&self) -> u32 {
        match self.location() {
            ControllerLocation::Remote => 2,
            ControllerLocation::Local => 0,
        }
    }

    pub fn expected_rounds(&self) -> u64 {
        (self.duration_s / self.network.round_period_s + 1e-9).floor() as u64
    }

    fn validate(&self) -> Result<()> {
        let cfg_err = |msg: String| Err(Error::Config(msg));

        if self.agents == 0 {
            return cfg_err("agents: must be at least 1".into());
        }
        if self.task.needs_sync() && self.agents < 2 {
            return cfg_err(format!(
                "task: synchronization requires at least 2 agents, got {}",
                self.agents
            ));
        }
        if self.network.node_mobility == Mobility::Mobile {
            return cfg_err(
                "network.node_mobility: \"mobile\" is out of scope for this simulator; \
                 only \"stationary\" deployments are supported"
                    .into(),
            );
        }
        let location = self.controller_location.expect("resolved");
        let controllers = self.controllers.expect("resolved");
        if controllers == 0 || controllers > self.agents {
            return cfg_err(format!(
                "controllers: must be in 1..=agents ({}), got {controllers}",
                self.agents
            ));
        }
        if self.task.needs_sync() && location == ControllerLocation::Remote {
            return cfg_err(
                "controller_location: synchronization tasks compute inputs at the agents; \
                 use \"local\" (state exchange still runs over the network)"
                    .into(),
            );
        }
        if location == ControllerLocation::Local && controllers != self.agents {
            return cfg_err(format!(
                "controllers: local control needs one controller per agent ({}), got {controllers}",
                self.agents
            ));
        }

        if !(self.network.round_period_s.is_finite() && self.network.round_period_s > 0.0) {
            return cfg_err(format!(
                "network.round_period_s: must be positive, got {}",
                self.network.round_period_s
            ));
        }
        if !(self.network.bitrate_bps.is_finite() && self.network.bitrate_bps > 0.0) {
            return cfg_err(format!(
                "network.bitrate_bps: must be positive, got {}",
                self.network.bitrate_bps
            ));
        }
        if !(self.network.per_slot_overhead_s.is_finite()
            && self.network.per_slot_overhead_s >= 0.0)
        {
            return cfg_err(format!(
                "network.per_slot_overhead_s: must be non-negative, got {}",
                self.network.per_slot_overhead_s
            ));
        }
        if self.network.node_count < 2 {
            return cfg_err(format!(
                "network.node_count: must be at least 2, got {}",
                self.network.node_count
            ));
        }
        let role_nodes = match location {
            ControllerLocation::Remote => controllers + self.agents,
            ControllerLocation::Local => self.agents,
        };
        if self.network.node_count < role_nodes.max(2) {
            return cfg_err(format!(
                "network.node_count: {} nodes cannot host {} controllers and {} agents",
                self.network.node_count, controllers, self.agents
            ));
        }
        self.network
            .loss
            .validate()
            .map_err(|e| Error::Config(format!("network.loss: {e}")))?;

        if self.lookahead == 0 {
            return cfg_err("lookahead: must be at least 1".into());
        }
        if !(self.duration_s.is_finite() && self.duration_s >= 0.0) {
            return cfg_err(format!("duration_s: must be non-negative, got {}", self.duration_s));
        }
        if !(self.physics_dt_s.is_finite() && self.physics_dt_s > 0.0) {
            return cfg_err(format!(
                "physics_dt_s: must be positive, got {}",
                self.physics_dt_s
            ));
        }
        let ratio = self.network.round_period_s / self.physics_dt_s;
        if (ratio - ratio.round()).abs() > 1e-6 || ratio < 1.0 {
            return cfg_err(format!(
                "physics_dt_s: round period {} must be an integer multiple of the physics step {}",
                self.network.round_period_s, self.physics_dt_s
            ));
        }

        self.plant
            .validate()
            .map_err(|e| Error::Config(format!("plant: {e}")))?;
        self.sensor
            .sensor_config()
            .validate()
            .map_err(|e| Error::Config(format!("sensor: {e}")))?;
        if !(self.sensor.filter_alpha > 0.0 && self.sensor.filter_alpha <= 1.0) {
            return cfg_err(format!(
                "sensor.filter_alpha: must be in (0, 1], got {}",
                self.sensor.filter_alpha
            ));
        }

        for (i, w) in self.controller.q_diag.iter().enumerate() {
            if !(w.is_finite() && *w >= 0.0) {
                return cfg_err(format!(
                    "controller.q_diag[{i}]: must be non-negative, got {w}"
                ));
            }
        }
        if !(self.controller.r.is_finite() && self.controller.r > 0.0) {
            return cfg_err(format!("controller.r: must be positive, got {}", self.controller.r));
        }
        if self.task.needs_sync() {
            let sync = &self.controller.sync;
            if sync.variant == SyncVariant::Augmented {
                if self.task == Task::StabilizationSynchronization {
                    return cfg_err(
                        "controller.sync.variant: the combined task pairs the local \
                         stabilization loop with the consensus term; \"augmented\" applies \
                         to the pure synchronization task"
                            .into(),
                    );
                }
                if sync.graph != GraphConfig::default() {
                    return cfg_err(
                        "controller.sync.graph: the augmented design needs every agent's \
                         state, so the graph must be \"complete\""
                            .into(),
                    );
                }
            }
            if !(sync.coupling_gain.is_finite() && sync.coupling_gain > 0.0) {
                return cfg_err(format!(
                    "controller.sync.coupling_gain: must be positive, got {}",
                    sync.coupling_gain
                ));
            }
            if !(sync.pairwise_weight.is_finite() && sync.pairwise_weight >= 0.0) {
                return cfg_err(format!(
                    "controller.sync.pairwise_weight: must be non-negative, got {}",
                    sync.pairwise_weight
                ));
            }
            let graph = sync.graph.to_graph()?;
            graph
                .validate(self.agents)
                .map_err(|e| Error::Config(format!("controller.sync.graph: {e}")))?;
        }
        Ok(())
    }

    pub fn steps_per_round(&self) -> u64 {
        (self.network.round_period_s / self.physics_dt_s).round() as u64
    }

    /// Serializes the resolved configuration.
    pub fn write_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// Parses and validates a scenario configuration file.
pub fn parse_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ScenarioConfig> {
    let cfg: ScenarioConfig =
        serde_json::from_str(text).map_err(|e| Error::Config(format!("{e}")))?;
    cfg.resolved()
}
