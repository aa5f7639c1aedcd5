//! Scripted operators.
//!
//! An operator acts on a 90 Hz grid and sees only what the feedback channels
//! have delivered: the latest visual frame and the latest force sample. It
//! commands the end effector through speed-limited pose increments and a grip
//! force. All three policies walk the same pick-and-place plan per cube and
//! differ in how they move and what they wait for:
//!
//! - `WaitForConfirmation` moves open loop on its own commanded pose and,
//!   after every grip change, waits until the confirmation channel shows the
//!   expected grasp or release.
//! - `ContinuousPursuit` servos toward each waypoint on the delayed visual
//!   end-effector position.
//! - `MoveAndWait` moves open loop in fixed-length bursts and waits one visual
//!   delay after each burst.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use nalgebra::Vector3;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::delay::{ConditionSpec, Millis};
use crate::haptics::ForceSample;
use crate::kinematics::Pose;
use crate::world::{ObjectId, Scene, VisualFrame};

pub const OPERATOR_RATE_HZ: u64 = 90;

/// Time of the `k`-th operator (and visual) frame.
pub fn frame_time(k: u64) -> Millis {
    k * 1000 / OPERATOR_RATE_HZ
}

/// Whether `t` lies on the 90 Hz frame grid.
pub fn is_frame_tick(t: Millis) -> bool {
    frame_time((t * OPERATOR_RATE_HZ).div_ceil(1000)) == t
}

/// Number of frames in `[0, t)`.
pub fn frames_before(t: Millis) -> u64 {
    (t * OPERATOR_RATE_HZ).div_ceil(1000)
}

/// Lowest travel height between waypoints, metres.
const MIN_TRAVEL_HEIGHT: f64 = 0.12;
/// Clearance kept above obstacle tops while carrying a cube.
const OBSTACLE_CLEARANCE: f64 = 0.055;
/// Height of the cube centre above its resting height when released.
const RELEASE_DROP: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("speed limit must be positive and finite, got {0}")]
    SpeedLimit(f64),
    #[error("grip force {0} N is below the grasp threshold {1} N")]
    GripForce(f64, f64),
    #[error("{0} must be positive and finite")]
    Parameter(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    ContinuousPursuit,
    WaitForConfirmation,
    MoveAndWait,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::ContinuousPursuit => "continuous_pursuit",
            PolicyKind::WaitForConfirmation => "wait_for_confirmation",
            PolicyKind::MoveAndWait => "move_and_wait",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfirmationChannel {
    Visual,
    Haptic,
    Either,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OperatorPolicy {
    pub kind: PolicyKind,
    pub reaction_time_ms: Millis,
    /// Reaction times are drawn uniformly from `reaction_time_ms ± jitter`.
    pub reaction_jitter_ms: Millis,
    /// m/s.
    pub speed_limit: f64,
    pub confirmation_channel: ConfirmationChannel,
    pub seed: u64,
    /// Grip force applied when closing, N.
    pub grip_force: f64,
    /// Proportional gain of continuous pursuit, 1/s.
    pub pursuit_gain: f64,
    /// Distance at which continuous pursuit counts a waypoint as reached, m.
    pub arrival_tolerance: f64,
    /// Length of one open-loop burst of move-and-wait.
    pub move_segment_ms: Millis,
    /// Extra time, beyond the feedback delays, after which an unconfirmed
    /// grip change is checked on the visual channel and retried.
    pub confirmation_timeout_ms: Millis,
}

impl Default for OperatorPolicy {
    fn default() -> Self {
        Self {
            kind: PolicyKind::WaitForConfirmation,
            reaction_time_ms: 200,
            reaction_jitter_ms: 40,
            speed_limit: 0.25,
            confirmation_channel: ConfirmationChannel::Haptic,
            seed: 0,
            grip_force: 3.0,
            pursuit_gain: 1.0,
            arrival_tolerance: 0.002,
            move_segment_ms: 400,
            confirmation_timeout_ms: 3000,
        }
    }
}

impl OperatorPolicy {
    pub fn new(kind: PolicyKind, seed: u64) -> Self {
        Self {
            kind,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self, grasp_threshold: f64) -> Result<(), PolicyError> {
        if !(self.speed_limit.is_finite() && self.speed_limit > 0.0) {
            return Err(PolicyError::SpeedLimit(self.speed_limit));
        }
        if !(self.grip_force >= grasp_threshold) || !self.grip_force.is_finite() {
            return Err(PolicyError::GripForce(self.grip_force, grasp_threshold));
        }
        if !(self.pursuit_gain.is_finite() && self.pursuit_gain > 0.0) {
            return Err(PolicyError::Parameter("pursuit_gain"));
        }
        if !(self.arrival_tolerance.is_finite() && self.arrival_tolerance > 0.0) {
            return Err(PolicyError::Parameter("arrival_tolerance"));
        }
        if self.move_segment_ms == 0 {
            return Err(PolicyError::Parameter("move_segment_ms"));
        }
        Ok(())
    }
}

/// One operator command: a pose increment and an absolute grip force.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorInput {
    pub timestamp: Millis,
    /// Time since the previous input, ms.
    pub dt_ms: Millis,
    pub translation: Vector3<f64>,
    /// Rotation increment as a scaled axis, rad.
    pub rotation: Vector3<f64>,
    pub grip_force: f64,
}

impl OperatorInput {
    pub fn idle(timestamp: Millis, dt_ms: Millis, grip_force: f64) -> Self {
        Self {
            timestamp,
            dt_ms,
            translation: Vector3::zeros(),
            rotation: Vector3::zeros(),
            grip_force,
        }
    }

    pub fn is_motion(&self) -> bool {
        self.translation != Vector3::zeros() || self.rotation != Vector3::zeros()
    }

    /// Largest translation allowed for `dt_ms` at `speed_limit`.
    pub fn max_step(speed_limit: f64, dt_ms: Millis) -> f64 {
        speed_limit * dt_ms as f64 / 1000.0
    }

    /// Scales the translation down to the speed limit. Returns whether it
    /// had to.
    pub fn limit_speed(&mut self, speed_limit: f64) -> bool {
        let max = Self::max_step(speed_limit, self.dt_ms);
        let norm = self.translation.norm();
        if norm > max {
            self.translation *= if norm > 0.0 { max / norm } else { 0.0 };
            while self.translation.norm() > max {
                self.translation *= 1.0 - f64::EPSILON;
            }
            true
        } else {
            false
        }
    }

    /// Applies the increment to a commanded pose.
    pub fn apply(&self, pose: &Pose) -> Pose {
        Pose {
            position: pose.position + self.translation,
            orientation: nalgebra::UnitQuaternion::from_scaled_axis(self.rotation) * pose.orientation,
        }
    }
}

/// Feedback available to the operator at one of its ticks.
#[derive(Debug, Clone, Copy)]
pub struct OperatorView<'a> {
    pub now: Millis,
    pub visual: Option<&'a VisualFrame>,
    pub haptic: Option<&'a ForceSample>,
    pub condition: &'a ConditionSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GripChange {
    Grasp,
    Release,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfirmedVia {
    Visual,
    Haptic,
    Timeout,
}

/// A grip change and the moment the operator saw it take effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confirmation {
    pub change: GripChange,
    pub cube: ObjectId,
    pub commanded_at: Millis,
    pub confirmed_at: Millis,
    pub via: ConfirmedVia,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Action {
    Move(Vector3<f64>),
    Grip(GripChange),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    Ready,
    Moving { to: Vector3<f64>, burst_until: Option<Millis> },
    Confirming { change: GripChange, since: Millis },
    Pausing { until: Millis },
    Finished,
}

/// Geometry of one task-script step as the operator plans it.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Leg {
    cube: ObjectId,
    target: Vector3<f64>,
    travel_height: f64,
}

/// A scripted operator walking the task plan.
#[derive(Debug, Clone)]
pub struct ScriptedOperator {
    policy: OperatorPolicy,
    legs: Vec<Leg>,
    initial_cubes: Vec<(ObjectId, Vector3<f64>)>,
    rng: ChaCha8Rng,
    commanded: Pose,
    grip_force: f64,
    last_tick: Option<Millis>,
    leg: usize,
    actions: VecDeque<Action>,
    phase: Phase,
    confirmations: Vec<Confirmation>,
    retries: u32,
}

impl ScriptedOperator {
    /// `start` is the end-effector pose at the start of the trial, which the
    /// operator sees before any delay applies.
    pub fn new(policy: OperatorPolicy, scene: &Scene, start: Pose) -> Self {
        let legs = scene
            .script
            .steps
            .iter()
            .map(|step| {
                let top = step
                    .obstacles
                    .iter()
                    .filter_map(|id| scene.object(*id))
                    .map(|o| o.pose.position.z + o.half_extents.z)
                    .fold(f64::NEG_INFINITY, f64::max);
                let target = scene.object(step.target).map_or(Vector3::zeros(), |t| t.pose.position);
                Leg {
                    cube: step.cube,
                    target,
                    travel_height: (top + OBSTACLE_CLEARANCE).max(MIN_TRAVEL_HEIGHT),
                }
            })
            .collect();
        let initial_cubes = scene
            .objects
            .iter()
            .filter(|o| o.color_tag.is_cube())
            .map(|o| (o.id, o.pose.position))
            .collect();
        Self {
            rng: ChaCha8Rng::seed_from_u64(policy.seed),
            policy,
            legs,
            initial_cubes,
            commanded: start,
            grip_force: 0.0,
            last_tick: None,
            leg: 0,
            actions: VecDeque::new(),
            phase: Phase::Ready,
            confirmations: Vec::new(),
            retries: 0,
        }
    }

    pub fn policy(&self) -> &OperatorPolicy {
        &self.policy
    }

    pub fn commanded(&self) -> &Pose {
        &self.commanded
    }

    pub fn confirmations(&self) -> &[Confirmation] {
        &self.confirmations
    }

    pub fn is_finished(&self) -> bool {
        self.phase == Phase::Finished
    }

    /// Grip changes that had to be retried after a confirmation timeout.
    pub fn retries(&self) -> u32 {
        self.retries
    }

    /// Produces the operator's input for one tick.
    pub fn policy_step(&mut self, view: &OperatorView<'_>) -> OperatorInput {
        let now = view.now;
        let dt_ms = self.last_tick.map_or(0, |t| now.saturating_sub(t));
        self.last_tick = Some(now);
        let mut input = OperatorInput::idle(now, dt_ms, self.grip_force);

        // A tick may pass through several instantaneous transitions before it
        // either moves, changes the grip, or decides to wait.
        for _ in 0..8 {
            match self.phase {
                Phase::Finished => break,
                Phase::Ready => match self.next_action(view) {
                    Some(Action::Move(to)) => {
                        let burst_until = match self.policy.kind {
                            PolicyKind::MoveAndWait => Some(now + self.policy.move_segment_ms),
                            _ => None,
                        };
                        self.phase = Phase::Moving { to, burst_until };
                    }
                    Some(Action::Grip(change)) => {
                        self.grip_force = match change {
                            GripChange::Grasp => self.policy.grip_force,
                            GripChange::Release => 0.0,
                        };
                        input.grip_force = self.grip_force;
                        self.phase = Phase::Confirming { change, since: now };
                        break;
                    }
                    None => {
                        self.phase = Phase::Finished;
                        break;
                    }
                },
                Phase::Moving { to, burst_until } => {
                    if let Some(until) = burst_until {
                        if now >= until {
                            let wait = view.condition.visual_delay_ms;
                            self.phase = Phase::Pausing { until: now + wait };
                            // Re-enter Moving toward the same waypoint afterwards.
                            self.actions.push_front(Action::Move(to));
                            continue;
                        }
                    }
                    let arrived = self.move_toward(&to, view, &mut input);
                    if arrived {
                        self.phase = match self.policy.kind {
                            PolicyKind::MoveAndWait => Phase::Pausing {
                                until: now + view.condition.visual_delay_ms,
                            },
                            _ => Phase::Ready,
                        };
                        if input.is_motion() || self.phase != Phase::Ready {
                            break;
                        }
                        continue;
                    }
                    break;
                }
                Phase::Confirming { change, since } => {
                    if let Some(via) = self.confirmed(view, change, since) {
                        self.confirm(change, since, now, via);
                        continue;
                    }
                    let limit = since
                        + view.condition.visual_delay_ms
                        + view.condition.haptic_delay_ms
                        + self.policy.confirmation_timeout_ms;
                    if now >= limit {
                        self.timeout(view, change, since);
                        continue;
                    }
                    break;
                }
                Phase::Pausing { until } => {
                    if now >= until {
                        self.phase = Phase::Ready;
                        continue;
                    }
                    break;
                }
            }
        }
        input.grip_force = self.grip_force;
        self.commanded = input.apply(&self.commanded);
        input
    }

    fn next_action(&mut self, view: &OperatorView<'_>) -> Option<Action> {
        if self.actions.is_empty() {
            if self.leg >= self.legs.len() {
                return None;
            }
            self.plan_leg(view);
        }
        self.actions.pop_front()
    }

    fn cube_position(&self, view: &OperatorView<'_>, cube: ObjectId) -> Vector3<f64> {
        view.visual
            .and_then(|f| f.cube(cube))
            .map(|p| p.position)
            .or_else(|| self.initial_cubes.iter().find(|c| c.0 == cube).map(|c| c.1))
            .unwrap_or_else(Vector3::zeros)
    }

    fn plan_leg(&mut self, view: &OperatorView<'_>) {
        let leg = self.legs[self.leg];
        let cube = self.cube_position(view, leg.cube);
        let h = leg.travel_height;
        let resting = self.cube_rest_height(leg.cube);
        let above_cube = Vector3::new(cube.x, cube.y, h);
        let above_target = Vector3::new(leg.target.x, leg.target.y, h);
        let place = Vector3::new(leg.target.x, leg.target.y, resting + RELEASE_DROP);
        self.actions.extend([
            Action::Move(above_cube),
            Action::Move(cube),
            Action::Grip(GripChange::Grasp),
            Action::Move(above_cube),
            Action::Move(above_target),
            Action::Move(place),
            Action::Grip(GripChange::Release),
            Action::Move(above_target),
        ]);
        self.leg += 1;
    }

    fn cube_rest_height(&self, cube: ObjectId) -> f64 {
        self.initial_cubes.iter().find(|c| c.0 == cube).map_or(0.025, |c| c.1.z)
    }

    /// Moves the commanded pose toward `to`. Returns whether the waypoint is
    /// reached.
    fn move_toward(&mut self, to: &Vector3<f64>, view: &OperatorView<'_>, input: &mut OperatorInput) -> bool {
        let max = OperatorInput::max_step(self.policy.speed_limit, input.dt_ms);
        match self.policy.kind {
            PolicyKind::WaitForConfirmation | PolicyKind::MoveAndWait => {
                let err = to - self.commanded.position;
                let dist = err.norm();
                if dist <= max {
                    input.translation = err;
                    true
                } else {
                    input.translation = err * (max / dist);
                    input.limit_speed(self.policy.speed_limit);
                    false
                }
            }
            PolicyKind::ContinuousPursuit => {
                let Some(frame) = view.visual else {
                    return false;
                };
                let err = to - frame.end_effector.position;
                if err.norm() <= self.policy.arrival_tolerance {
                    return true;
                }
                input.translation = err * (self.policy.pursuit_gain * input.dt_ms as f64 / 1000.0);
                input.limit_speed(self.policy.speed_limit);
                false
            }
        }
    }

    fn confirmed(&self, view: &OperatorView<'_>, change: GripChange, since: Millis) -> Option<ConfirmedVia> {
        let cube = self.current_cube();
        let visual = || {
            view.visual.is_some_and(|f| {
                f.sim_time_ms > since
                    && match change {
                        GripChange::Grasp => f.grasped == Some(cube),
                        GripChange::Release => f.grasped.is_none(),
                    }
            })
        };
        let haptic = || {
            view.haptic.is_some_and(|s| {
                let fresh = s.timestamp * 1000.0 > since as f64 + 0.5;
                let loaded = s.modes.weight.z < 0.0;
                fresh
                    && match change {
                        GripChange::Grasp => loaded,
                        GripChange::Release => !loaded,
                    }
            })
        };
        let (use_visual, use_haptic) = match self.policy.confirmation_channel {
            ConfirmationChannel::Visual => (true, false),
            ConfirmationChannel::Haptic => (false, true),
            ConfirmationChannel::Either => (true, true),
        };
        if use_haptic && haptic() {
            Some(ConfirmedVia::Haptic)
        } else if use_visual && visual() {
            Some(ConfirmedVia::Visual)
        } else {
            None
        }
    }

    fn current_cube(&self) -> ObjectId {
        self.legs[self.leg.saturating_sub(1)].cube
    }

    fn confirm(&mut self, change: GripChange, since: Millis, now: Millis, via: ConfirmedVia) {
        self.confirmations.push(Confirmation {
            change,
            cube: self.current_cube(),
            commanded_at: since,
            confirmed_at: now,
            via,
        });
        let j = self.policy.reaction_jitter_ms;
        let draw = if j == 0 { 0 } else { u64::from(self.rng.next_u32()) % (2 * j + 1) };
        let reaction = (self.policy.reaction_time_ms + draw).saturating_sub(j);
        self.phase = Phase::Pausing { until: now + reaction };
    }

    /// No confirmation arrived in time: trust the visual channel if it shows
    /// the change, otherwise redo the grip change.
    fn timeout(&mut self, view: &OperatorView<'_>, change: GripChange, since: Millis) {
        let cube = self.current_cube();
        let shown = view.visual.is_some_and(|f| match change {
            GripChange::Grasp => f.grasped == Some(cube),
            GripChange::Release => f.grasped.is_none(),
        });
        if shown {
            self.confirm(change, since, view.now, ConfirmedVia::Timeout);
            return;
        }
        self.retries += 1;
        log::warn!("operator: {change:?} of cube {cube} not confirmed by {} ms, retrying", view.now);
        match change {
            GripChange::Grasp => {
                // Open, back off and redo the whole leg from the cube's
                // currently visible position.
                self.grip_force = 0.0;
                self.actions.clear();
                self.leg -= 1;
                self.plan_leg(view);
            }
            GripChange::Release => {
                self.actions.push_front(Action::Grip(GripChange::Release));
            }
        }
        self.phase = Phase::Ready;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delay::{make_condition, ConditionKind};

    #[test]
    fn frame_grid_has_ninety_ticks_per_second() {
        let ticks: Vec<_> = (0..1000).filter(|t| is_frame_tick(*t)).collect();
        assert_eq!(ticks.len(), 90);
        assert_eq!(ticks[..3], [0, 11, 22]);
        assert_eq!(frames_before(60_000), 5400);
        assert!((0..5400).all(|k| is_frame_tick(frame_time(k))));
    }

    #[test]
    fn speed_limit_scaling() {
        let mut input = OperatorInput::idle(0, 11, 0.0);
        input.translation = Vector3::new(1.0, 2.0, -3.0);
        assert!(input.limit_speed(0.25));
        assert!(input.translation.norm() <= 0.25 * 0.011);
        assert!(!input.limit_speed(0.25));
    }

    #[test]
    fn policy_validation() {
        assert!(OperatorPolicy::default().validate(2.0).is_ok());
        let p = OperatorPolicy {
            speed_limit: 0.0,
            ..OperatorPolicy::default()
        };
        assert_eq!(p.validate(2.0), Err(PolicyError::SpeedLimit(0.0)));
        let p = OperatorPolicy {
            grip_force: 1.0,
            ..OperatorPolicy::default()
        };
        assert!(p.validate(2.0).is_err());
    }

    #[test]
    fn open_loop_walks_to_first_waypoint() {
        let scene = Scene::standard();
        let start = Pose::from_position(Vector3::new(0.3, 0.0, 0.4));
        let mut op = ScriptedOperator::new(OperatorPolicy::default(), &scene, start);
        let cond = make_condition(ConditionKind::Control, 0).unwrap();
        let first = Vector3::new(0.35, 0.15, 0.12);
        for k in 0..2000 {
            let view = OperatorView {
                now: frame_time(k),
                visual: None,
                haptic: None,
                condition: &cond,
            };
            let input = op.policy_step(&view);
            assert!(input.translation.norm() <= OperatorInput::max_step(0.25, input.dt_ms) + 1e-15);
            if (op.commanded().position - first).norm() == 0.0 {
                return;
            }
        }
        panic!("never reached the first waypoint");
    }
}
