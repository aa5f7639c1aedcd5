//! Haptic force rendering.
//!
//! Seven modes are rendered from a world snapshot while a cube is held:
//! weight, inertia, momentum (pick-up pulse), impact (contact-onset pulse),
//! texture, balance and rotation (a torque). Their sum is clamped to the
//! actuator's 5 N range.

use core::f64::consts::TAU;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::delay::{ConditionKind, ConditionSpec, Millis};
use crate::world::{Body, WorldState};

/// Largest force magnitude the actuator can render, newtons.
pub const FORCE_LIMIT: f64 = 5.0;

/// Pulse ages are compared with this slack so accumulated clock rounding does
/// not add or drop a sample at the pulse edge.
const PULSE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HapticsError {
    #[error("onset cue requested under the {0} condition; only anchoring provides one")]
    NotAnchoring(ConditionKind),
}

/// Where the haptic channel's forces come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HapticSource {
    /// Physics of the operator-side digital twin, available immediately.
    LocalSimulation,
    /// Sensors on the remote end effector.
    RemoteSensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModeBreakdown {
    pub weight: Vector3<f64>,
    pub inertia: Vector3<f64>,
    pub momentum: Vector3<f64>,
    pub impact: Vector3<f64>,
    pub texture: Vector3<f64>,
    pub balance: Vector3<f64>,
    /// Onset vibration cue, zero outside the anchoring cue.
    pub vibration: Vector3<f64>,
    /// Torque about the vertical axis, N·m.
    pub rotation: f64,
}

impl ModeBreakdown {
    pub fn total(&self) -> Vector3<f64> {
        self.weight + self.inertia + self.momentum + self.impact + self.texture + self.balance + self.vibration
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForceSample {
    pub force: Vector3<f64>,
    pub torque_z: f64,
    pub modes: ModeBreakdown,
    pub clamped: bool,
    /// Seconds.
    pub timestamp: f64,
}

impl ForceSample {
    pub fn zero(timestamp: f64) -> Self {
        Self {
            force: Vector3::zeros(),
            torque_z: 0.0,
            modes: ModeBreakdown::default(),
            clamped: false,
            timestamp,
        }
    }

    /// Clamps the summed modes to `limit` newtons.
    pub fn from_modes(modes: ModeBreakdown, limit: f64, timestamp: f64) -> Self {
        let total = modes.total();
        let norm = total.norm();
        let (force, clamped) = if norm > limit { (total * (limit / norm), true) } else { (total, false) };
        Self {
            force,
            torque_z: modes.rotation,
            modes,
            clamped,
            timestamp,
        }
    }

    pub fn magnitude(&self) -> f64 {
        self.force.norm()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HapticParams {
    pub gravity: f64,
    pub force_limit: f64,
    /// Duration of momentum and impact pulses, seconds.
    pub pulse_duration: f64,
    pub texture_amplitude: f64,
    /// Spatial frequency of the texture ripple, cycles per metre slid.
    pub texture_frequency: f64,
    pub floor_roughness: f64,
    /// Lateral force per metre of centre-of-mass offset, per unit weight.
    pub balance_gain: f64,
    /// Rotational damping, N·m·s/rad.
    pub rotation_damping: f64,
}

impl Default for HapticParams {
    fn default() -> Self {
        Self {
            gravity: 9.81,
            force_limit: FORCE_LIMIT,
            pulse_duration: 0.020,
            texture_amplitude: 1.0,
            texture_frequency: 200.0,
            floor_roughness: 0.5,
            balance_gain: 10.0,
            rotation_damping: 0.05,
        }
    }
}

/// Force felt at the handle for one world snapshot.
pub fn render_contact_forces(
    world: &WorldState,
    params: &HapticParams,
    effector_velocity: &Vector3<f64>,
    effector_acceleration: &Vector3<f64>,
    angular_velocity: f64,
) -> ForceSample {
    let now = world.time;
    let mut modes = ModeBreakdown::default();
    let (Some(binding), Some(cube)) = (&world.grasp_binding, world.grasped_cube()) else {
        return ForceSample::from_modes(modes, params.force_limit, now);
    };
    let m = cube.mass;
    let g = params.gravity;
    let in_pulse = |start: f64| {
        let age = now - start;
        age > -PULSE_EPS && age < params.pulse_duration - PULSE_EPS
    };

    modes.weight = Vector3::new(0.0, 0.0, -m * g);
    modes.inertia = -m * effector_acceleration;
    if in_pulse(binding.since) {
        modes.momentum = -m * binding.delta_v / params.pulse_duration;
    }

    let offset = cube.pose.position - world.end_effector.position;
    modes.balance = Vector3::new(offset.x, offset.y, 0.0) * (params.balance_gain * m * g);
    modes.rotation = -params.rotation_damping * angular_velocity;

    for contact in &world.contacts {
        // Orient every contact so `normal` points into the held cube.
        let (normal, other) = if contact.cube == cube.id {
            (contact.normal, contact.other)
        } else if contact.other == Body::Object(cube.id) {
            (-contact.normal, Body::Object(contact.cube))
        } else {
            continue;
        };
        if in_pulse(contact.onset_time) && contact.onset_speed > 0.0 {
            modes.impact += normal * (m * contact.onset_speed / params.pulse_duration);
        }
        let rel = effector_velocity - effector_velocity.dot(&normal) * normal;
        let speed = rel.norm();
        if speed > 0.0 {
            let roughness = match other {
                Body::Floor => params.floor_roughness,
                Body::Object(id) => world.object(id).map_or(0.0, |o| o.surface_roughness),
            };
            let ripple = libm::sin(TAU * params.texture_frequency * contact.slide_distance);
            modes.texture += -rel / speed * (params.texture_amplitude * roughness * ripple);
        }
    }

    ForceSample::from_modes(modes, params.force_limit, now)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueStyle {
    Vibration,
    SimulatedForce,
}

pub const VIBRATION_AMPLITUDE: f64 = 0.5;
pub const VIBRATION_FREQUENCY: f64 = 150.0;

/// Immediate haptic stream emitted when the operator starts an action under
/// the anchoring condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OnsetCue {
    /// No action in progress.
    Silent,
    /// Constant-amplitude vertical vibration starting at `start_ms`.
    Vibration { start_ms: Millis, amplitude: f64, frequency: f64 },
    /// Forces rendered from the operator-side simulation.
    SimulatedForce { start_ms: Millis },
}

pub fn haptic_onset_cue(
    condition: &ConditionSpec,
    style: CueStyle,
    action_start_ms: Option<Millis>,
) -> Result<OnsetCue, HapticsError> {
    if condition.kind != ConditionKind::Anchoring {
        return Err(HapticsError::NotAnchoring(condition.kind));
    }
    let Some(start_ms) = action_start_ms else {
        return Ok(OnsetCue::Silent);
    };
    Ok(match style {
        CueStyle::Vibration => OnsetCue::Vibration {
            start_ms,
            amplitude: VIBRATION_AMPLITUDE,
            frequency: VIBRATION_FREQUENCY,
        },
        CueStyle::SimulatedForce => OnsetCue::SimulatedForce { start_ms },
    })
}

impl OnsetCue {
    /// The cue's sample at `now_ms`. `local` renders the operator-side world
    /// and is only called for the simulated-force style.
    pub fn sample(&self, now_ms: Millis, local: impl FnOnce() -> ForceSample) -> ForceSample {
        let t = now_ms as f64 / 1000.0;
        match *self {
            OnsetCue::Silent => ForceSample::zero(t),
            OnsetCue::Vibration { start_ms, .. } if now_ms < start_ms => ForceSample::zero(t),
            OnsetCue::Vibration {
                start_ms,
                amplitude,
                frequency,
            } => {
                let phase = TAU * frequency * (now_ms - start_ms) as f64 / 1000.0;
                let modes = ModeBreakdown {
                    vibration: Vector3::new(0.0, 0.0, amplitude * libm::cos(phase)),
                    ..ModeBreakdown::default()
                };
                ForceSample::from_modes(modes, FORCE_LIMIT, t)
            }
            OnsetCue::SimulatedForce { start_ms } if now_ms < start_ms => ForceSample::zero(t),
            OnsetCue::SimulatedForce { .. } => {
                let mut s = local();
                s.timestamp = t;
                s
            }
        }
    }
}
