//! Nonlinear cart-pole dynamics, fixed-step integration, sensing, and local
//! state estimation (finite differences plus first-order low-pass).
//!
//! State ordering everywhere is `(theta, pos, theta_dot, pos_dot)` with
//! `theta = 0` at the upright position and `theta = pi` hanging down.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::f64::consts::PI;
use std::fmt;

/// Physical constants of one cart-pole unit.
///
/// The pole is modelled as a rigid body of mass `pole_mass` whose center of
/// mass sits `com_distance` above the pivot, with inertia `pole_inertia`
/// about the center of mass. The cart is driven by a DC motor modelled as a
/// pure force gain on the input voltage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantParams {
    /// Cart mass [kg].
    pub cart_mass: f64,
    /// Pole mass [kg].
    pub pole_mass: f64,
    /// Pivot to pole center of mass [m].
    pub com_distance: f64,
    /// Pole inertia about its center of mass [kg m^2].
    pub pole_inertia: f64,
    /// Motor force per input volt [N/V].
    pub motor_gain: f64,
    /// Viscous cart friction [N s/m].
    pub cart_friction: f64,
    /// Viscous pole damping [N m s].
    pub pole_damping: f64,
    /// Gravitational acceleration [m/s^2].
    pub gravity: f64,
    /// Half-range of the usable track [m].
    pub track_limit: f64,
    /// Actuation saturation [V].
    pub voltage_limit: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        // Uniform rod of length 2*com_distance: inertia m*l^2/3 about the com.
        Self {
            cart_mass: 0.5,
            pole_mass: 0.2,
            com_distance: 0.3,
            pole_inertia: 0.2 * 0.3 * 0.3 / 3.0,
            motor_gain: 1.5,
            cart_friction: 0.1,
            pole_damping: 0.001,
            gravity: 9.81,
            track_limit: 0.25,
            voltage_limit: 10.0,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("cart_mass", self.cart_mass),
            ("pole_mass", self.pole_mass),
            ("com_distance", self.com_distance),
            ("pole_inertia", self.pole_inertia),
            ("motor_gain", self.motor_gain),
            ("gravity", self.gravity),
            ("track_limit", self.track_limit),
            ("voltage_limit", self.voltage_limit),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be strictly positive, got {v}"
                )));
            }
        }
        let non_negative = [
            ("cart_friction", self.cart_friction),
            ("pole_damping", self.pole_damping),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Continuous plant state `(theta, pos, theta_dot, pos_dot)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    /// Pole angle from upright [rad].
    pub theta: f64,
    /// Cart position [m].
    pub pos: f64,
    /// Angular velocity [rad/s].
    pub theta_dot: f64,
    /// Cart velocity [m/s].
    pub pos_dot: f64,
}

impl PlantState {
    pub fn new(theta: f64, pos: f64, theta_dot: f64, pos_dot: f64) -> Self {
        Self { theta, pos, theta_dot, pos_dot }
    }

    pub fn upright() -> Self {
        Self::new(0.0, 0.0, 0.0, 0.0)
    }

    pub fn hanging() -> Self {
        Self::new(PI, 0.0, 0.0, 0.0)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.theta, self.pos, self.theta_dot, self.pos_dot]
    }

    pub fn from_array(x: [f64; 4]) -> Self {
        Self::new(x[0], x[1], x[2], x[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Additive disturbance on the cart (force) and the pole (torque).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Disturbance {
    /// Horizontal force on the cart [N].
    pub force: f64,
    /// Torque on the pole [N m].
    pub torque: f64,
}

/// Encoder resolution: a finite number of counts, or no quantization at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    Counts(u64),
    Infinite,
}

impl Resolution {
    pub fn validate(&self, name: &str) -> Result<()> {
        if let Resolution::Counts(0) = self {
            return Err(Error::InvalidArgument(format!(
                "{name} must be a positive count or \"infinite\""
            )));
        }
        Ok(())
    }
}

impl Serialize for Resolution {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Resolution::Counts(c) => s.serialize_u64(*c),
            Resolution::Infinite => s.serialize_str("infinite"),
        }
    }
}

impl<'de> Deserialize<'de> for Resolution {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct ResVisitor;
        impl<'de> Visitor<'de> for ResVisitor {
            type Value = Resolution;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                write!(f, "a positive integer count or the string \"infinite\"")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Resolution, E> {
                if v == 0 {
                    return Err(E::custom("resolution count must be positive"));
                }
                Ok(Resolution::Counts(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Resolution, E> {
                if v <= 0 {
                    return Err(E::custom("resolution count must be positive"));
                }
                Ok(Resolution::Counts(v as u64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Resolution, E> {
                if v == "infinite" {
                    Ok(Resolution::Infinite)
                } else {
                    Err(E::custom(format!("unknown resolution \"{v}\"")))
                }
            }
        }
        d.deserialize_any(ResVisitor)
    }
}

/// Encoder and noise model for the measured states (angle, position).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    /// Angle encoder resolution [counts/revolution].
    pub angle_resolution: Resolution,
    /// Position encoder resolution [counts/m].
    pub position_resolution: Resolution,
    /// Gaussian angle noise standard deviation [rad].
    pub angle_noise_std: f64,
    /// Gaussian position noise standard deviation [m].
    pub position_noise_std: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            angle_resolution: Resolution::Counts(4096),
            position_resolution: Resolution::Counts(10_000),
            angle_noise_std: 0.0,
            position_noise_std: 0.0,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        self.angle_resolution.validate("angle_resolution")?;
        self.position_resolution.validate("position_resolution")?;
        for (name, v) in [
            ("angle_noise_std", self.angle_noise_std),
            ("position_noise_std", self.position_noise_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// One sensor sample of the measurable states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub theta_meas: f64,
    pub pos_meas: f64,
    pub timestamp: f64,
}

/// Finite-difference velocity estimation plus an element-wise first-order
/// low-pass on the full 4-vector.
#[derive(Debug, Clone)]
pub struct EstimatorState {
    prev: Option<Measurement>,
    filtered: Option<[f64; 4]>,
    filter_alpha: f64,
}

impl EstimatorState {
    /// `filter_alpha` must lie in (0, 1]; 1 disables the filter.
    pub fn new(filter_alpha: f64) -> Result<Self> {
        if !(filter_alpha.is_finite() && filter_alpha > 0.0 && filter_alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "filter_alpha must be in (0, 1], got {filter_alpha}"
            )));
        }
        Ok(Self { prev: None, filtered: None, filter_alpha })
    }

    pub fn filter_alpha(&self) -> f64 {
        self.filter_alpha
    }

    /// Ingests one measurement and returns the filtered state estimate.
    ///
    /// Velocities come from backward differences of the raw measurements
    /// (zero on the first call); the low-pass is seeded with the first raw
    /// vector and applied element-wise afterwards.
    pub fn update(&mut self, m: &Measurement, sample_time: f64) -> Result<[f64; 4]> {
        if !(sample_time.is_finite() && sample_time > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sample_time must be positive, got {sample_time}"
            )));
        }
        if let Some(prev) = &self.prev {
            if m.timestamp <= prev.timestamp {
                return Err(Error::InvalidArgument(format!(
                    "non-monotone measurement timestamps: {} after {}",
                    m.timestamp, prev.timestamp
                )));
            }
        }
        let (theta_dot, pos_dot) = match &self.prev {
            Some(prev) => (
                (m.theta_meas - prev.theta_meas) / sample_time,
                (m.pos_meas - prev.pos_meas) / sample_time,
            ),
            None => (0.0, 0.0),
        };
        let raw = [m.theta_meas, m.pos_meas, theta_dot, pos_dot];
        let filtered = match self.filtered {
            Some(prev) => {
                let mut out = [0.0; 4];
                for i in 0..4 {
                    out[i] = low_pass(self.filter_alpha, prev[i], raw[i]);
                }
                out
            }
            None => raw,
        };
        self.prev = Some(*m);
        self.filtered = Some(filtered);
        Ok(filtered)
    }
}

/// One step of the first-order low-pass `y = alpha*raw + (1-alpha)*y_prev`.
pub fn low_pass(alpha: f64, prev: f64, raw: f64) -> f64 {
    alpha * raw + (1.0 - alpha) * prev
}

/// Time derivative of the state under the given input and disturbance.
///
/// Returns `(theta_dot, pos_dot, theta_ddot, pos_ddot)`. The cart force is
/// `motor_gain*u - cart_friction*pos_dot + d.force`; the pole sees the
/// damping torque `-pole_damping*theta_dot + d.torque`.
pub fn cartpole_derivative(
    x: &PlantState,
    u: f64,
    d: &Disturbance,
    p: &PlantParams,
) -> Result<[f64; 4]> {
    if !x.is_finite() || !u.is_finite() || !d.force.is_finite() || !d.torque.is_finite() {
        return Err(Error::InvalidArgument(
            "cartpole_derivative requires finite state, input, and disturbance".into(),
        ));
    }
    let m_c = p.cart_mass;
    let m_p = p.pole_mass;
    let l = p.com_distance;
    let sin = x.theta.sin();
    let cos = x.theta.cos();

    let force = p.motor_gain * u - p.cart_friction * x.pos_dot + d.force;

    // Mass matrix [[a11, a12], [a12, a22]] * [pos_ddot, theta_ddot] = [rhs1, rhs2]
    let a11 = m_c + m_p;
    let a12 = m_p * l * cos;
    let a22 = p.pole_inertia + m_p * l * l;
    let rhs1 = force + m_p * l * x.theta_dot * x.theta_dot * sin;
    let rhs2 = m_p * p.gravity * l * sin - p.pole_damping * x.theta_dot + d.torque;

    // det > 0 whenever masses and inertia are positive.
    let det = a11 * a22 - a12 * a12;
    let pos_ddot = (a22 * rhs1 - a12 * rhs2) / det;
    let theta_ddot = (a11 * rhs2 - a12 * rhs1) / det;

    Ok([x.theta_dot, x.pos_dot, theta_ddot, pos_ddot])
}

/// Advances the state by `dt` with classical fourth-order Runge-Kutta,
/// holding `u` and `d` constant over the step.
pub fn integrate_step(
    x: &PlantState,
    u: f64,
    d: &Disturbance,
    p: &PlantParams,
    dt: f64,
) -> Result<PlantState> {
    if !(dt.is_finite() && dt >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "integration step must be non-negative, got {dt}"
        )));
    }
    let x0 = x.to_array();
    let eval = |y: [f64; 4]| cartpole_derivative(&PlantState::from_array(y), u, d, p);
    let k1 = eval(x0)?;
    let k2 = eval(add_scaled(x0, k1, dt / 2.0))?;
    let k3 = eval(add_scaled(x0, k2, dt / 2.0))?;
    let k4 = eval(add_scaled(x0, k3, dt))?;
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = x0[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(PlantState::from_array(out))
}

fn add_scaled(x: [f64; 4], k: [f64; 4], s: f64) -> [f64; 4] {
    [x[0] + s * k[0], x[1] + s * k[1], x[2] + s * k[2], x[3] + s * k[3]]
}

/// Samples the angle and position sensors: Gaussian noise first, then
/// quantization to the encoder grid (skipped for infinite resolution).
pub fn measure<R: Rng + ?Sized>(
    x: &PlantState,
    cfg: &SensorConfig,
    timestamp: f64,
    rng: &mut R,
) -> Measurement {
    let mut theta = x.theta;
    let mut pos = x.pos;
    if cfg.angle_noise_std > 0.0 {
        let n = Normal::new(0.0, cfg.angle_noise_std).expect("validated std");
        theta += n.sample(rng);
    }
    if cfg.position_noise_std > 0.0 {
        let n = Normal::new(0.0, cfg.position_noise_std).expect("validated std");
        pos += n.sample(rng);
    }
    if let Resolution::Counts(c) = cfg.angle_resolution {
        let res = c as f64;
        theta = (theta * res / (2.0 * PI)).round() * (2.0 * PI) / res;
    }
    if let Resolution::Counts(c) = cfg.position_resolution {
        let res = c as f64;
        pos = (pos * res).round() / res;
    }
    Measurement { theta_meas: theta, pos_meas: pos, timestamp }
}

/// Clamps the input to the actuator's voltage range.
pub fn apply_actuation(u: f64, p: &PlantParams) -> f64 {
    u.clamp(-p.voltage_limit, p.voltage_limit)
}
