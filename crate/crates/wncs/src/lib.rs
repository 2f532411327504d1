//! Deterministic co-simulation of cart-pole plants closed over a round-based
//! low-power wireless bus.
//!
//! The crate couples three pieces: a nonlinear cart-pole plant with encoder
//! sensing and local estimation ([`plant`]), a round-based multi-hop bus
//! abstraction with per-packet loss sampling ([`network`]), and LQR-based
//! stabilization plus multi-agent synchronization controllers that
//! compensate the network's delay and losses ([`control`]). The [`engine`]
//! wires them on a common round clock, [`metrics`] scores the resulting
//! traces, and [`cli`] drives batch experiments from configuration files.
//!
//! Every run is a pure function of its configuration (including the seed):
//! identical configs produce byte-identical trace files.

pub mod cli;
pub mod config;
pub mod control;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod network;
pub mod plant;
pub mod trace;

pub use config::{parse_config, ScenarioConfig};
pub use engine::{playback_trace, run_scenario};
pub use error::{Error, Result};
pub use metrics::MetricsReport;
pub use trace::Trace;
