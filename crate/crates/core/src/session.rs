//! The trial tick loop.
//!
//! One simulation tick is one millisecond. Within tick `t`, with the world in
//! state `S_t`:
//!
//! 1. the haptic sample of `S_t` is emitted, and on the 90 Hz grid (or when
//!    the previous step produced a world event) the visual frame of `S_t`;
//! 2. everything due at `t` is delivered;
//! 3. on the 90 Hz grid the operator acts on what has been delivered and its
//!    command is emitted, after which commands due at `t` are delivered;
//! 4. the arm moves toward the latest delivered command and the world steps
//!    to `S_{t+1}`.
//!
//! Every channel event is delivered exactly at `emit + delay`.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::delay::{Channel, ConditionError, ConditionKind, ConditionSpec, DelayPipeline, Millis, PipelineError};
use crate::haptics::{haptic_onset_cue, render_contact_forces, CueStyle, ForceSample, HapticParams, ModeBreakdown};
use crate::kinematics::{solve_ik_with, ArmModel, IkSettings, JointState, KinematicsError, Pose};
use crate::operator::{
    is_frame_tick, Confirmation, GripChange, OperatorInput, OperatorPolicy, OperatorView, PolicyError, ScriptedOperator,
    OPERATOR_RATE_HZ,
};
use crate::world::{ObjectId, Scene, TaskError, VisualFrame, World, WorldEventKind, WorldState};

pub const SIM_RATE_HZ: u32 = 1000;
pub const LOG_FORMAT_VERSION: u32 = 1;
/// Longest trial the loop will run, seconds.
pub const MAX_DURATION_S: f64 = 3600.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SessionError {
    #[error(transparent)]
    Condition(#[from] ConditionError),
    #[error(transparent)]
    Scene(#[from] TaskError),
    #[error(transparent)]
    Arm(#[from] KinematicsError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("invalid trial config: {0}")]
    Config(String),
}

/// Who drives the trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum OperatorSpec {
    Scripted(OperatorPolicy),
    /// A human at the console; inputs beyond `speed_limit` are scaled down.
    Live { speed_limit: f64 },
}

impl OperatorSpec {
    pub fn speed_limit(&self) -> f64 {
        match self {
            OperatorSpec::Scripted(p) => p.speed_limit,
            OperatorSpec::Live { speed_limit } => *speed_limit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub condition: ConditionSpec,
    pub operator: OperatorSpec,
    pub seed: u64,
    pub sim_rate_hz: u32,
    pub visual_rate_hz: u32,
    pub duration_cap_s: f64,
    /// End the trial as soon as a scripted operator has finished the task.
    pub stop_on_completion: bool,
    pub cue_style: CueStyle,
    pub haptics: HapticParams,
    /// Time constant of the low-pass filter on end-effector acceleration, ms.
    pub acceleration_filter_ms: f64,
    pub ik: IkSettings,
    pub arm: ArmModel,
    pub scene: Scene,
}

impl TrialConfig {
    pub fn new(condition: ConditionSpec, operator: OperatorSpec, seed: u64) -> Self {
        Self {
            condition,
            operator,
            seed,
            sim_rate_hz: SIM_RATE_HZ,
            visual_rate_hz: OPERATOR_RATE_HZ as u32,
            duration_cap_s: 300.0,
            stop_on_completion: true,
            cue_style: CueStyle::SimulatedForce,
            haptics: HapticParams::default(),
            acceleration_filter_ms: 20.0,
            ik: IkSettings::default(),
            arm: ArmModel::panda(),
            scene: Scene::standard(),
        }
    }

    /// A scripted trial with the default policy of `kind`, seeded by `seed`.
    pub fn scripted(condition: ConditionSpec, policy: OperatorPolicy, seed: u64) -> Self {
        Self::new(condition, OperatorSpec::Scripted(policy), seed)
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        self.condition.validate()?;
        self.scene.validate()?;
        self.arm.validate()?;
        if self.sim_rate_hz != SIM_RATE_HZ {
            return Err(SessionError::Config(alloc::format!(
                "sim rate must be {SIM_RATE_HZ} Hz, got {}",
                self.sim_rate_hz
            )));
        }
        if u64::from(self.visual_rate_hz) != OPERATOR_RATE_HZ {
            return Err(SessionError::Config(alloc::format!(
                "visual rate must be {OPERATOR_RATE_HZ} Hz, got {}",
                self.visual_rate_hz
            )));
        }
        if !(self.duration_cap_s > 0.0 && self.duration_cap_s <= MAX_DURATION_S) {
            return Err(SessionError::Config(alloc::format!(
                "duration cap must be in (0, {MAX_DURATION_S}] s, got {}",
                self.duration_cap_s
            )));
        }
        if !(self.acceleration_filter_ms >= 0.0 && self.acceleration_filter_ms.is_finite()) {
            return Err(SessionError::Config("acceleration_filter_ms must be >= 0".into()));
        }
        if !(self.haptics.force_limit > 0.0 && self.haptics.pulse_duration > 0.0) {
            return Err(SessionError::Config("haptic force limit and pulse duration must be positive".into()));
        }
        match &self.operator {
            OperatorSpec::Scripted(p) => p.validate(self.scene.physics.grasp_force_threshold)?,
            OperatorSpec::Live { speed_limit } => {
                if !(speed_limit.is_finite() && *speed_limit > 0.0) {
                    return Err(PolicyError::SpeedLimit(*speed_limit).into());
                }
            }
        }
        Ok(())
    }

    pub fn duration_cap_ms(&self) -> Millis {
        libm::round(self.duration_cap_s * 1000.0) as Millis
    }
}

/// Command-channel payload: the absolute end-effector target the operator's
/// inputs add up to, and the grip force.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub target: Pose,
    pub grip_force: f64,
    pub dt_ms: Millis,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Command(Command),
    Visual(VisualFrame),
    Haptic(ForceSample),
}

/// Per-tick record of the remote side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TickRow {
    pub time_ms: Millis,
    pub joints: [f64; 7],
    pub aperture: f64,
    pub ee_position: [f64; 3],
    /// (w, i, j, k).
    pub ee_orientation: [f64; 4],
    pub grasped: Option<ObjectId>,
    pub script_index: usize,
    /// Grip force in effect for the step leaving this tick.
    pub grip_force: f64,
    /// Sequence id of the last command applied to the arm.
    pub command_seq: Option<u64>,
    pub force: [f64; 3],
    pub torque_z: f64,
    pub clamped: bool,
}

/// One channel event with its delivery time, if delivered before the trial ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelRow {
    pub sequence: u64,
    pub channel: Channel,
    pub emit_ms: Millis,
    pub due_ms: Millis,
    pub delivered_ms: Option<Millis>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputRow {
    pub sequence: u64,
    pub input: OperatorInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameTrigger {
    /// On the 90 Hz grid.
    Periodic,
    /// Off the grid, right after a world event.
    Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualRow {
    pub sequence: u64,
    pub trigger: FrameTrigger,
    pub delivered_ms: Option<Millis>,
    pub frame: VisualFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LogEvent {
    Grasp { cube: ObjectId },
    Release { cube: ObjectId },
    Placed { cube: ObjectId, target: ObjectId },
    GraspRejected { cube: ObjectId, expected: Option<ObjectId> },
    Impact { cube: ObjectId, speed: f64 },
    /// The operator saw a grip change take effect.
    Confirmed { confirmation: Confirmation },
    /// First input of a motion after rest.
    ActionStart,
    /// Cube position when the trial ended.
    Settled { cube: ObjectId, position: [f64; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventRow {
    pub time_ms: Millis,
    pub event: LogEvent,
}

/// One pupil sample with the luminance of the frame on display.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PupilRow {
    pub time_ms: Millis,
    /// mm; `None` while the eye is closed or tracking is lost.
    pub diameter: Option<f64>,
    /// Per-pixel luminance averaged over the displayed frame, 0-255.
    pub luminance: f64,
}

/// Post-trial self reports. Missing entries were not submitted.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Questionnaire {
    pub perceived_visual_ms: Option<f64>,
    pub perceived_haptic_ms: Option<f64>,
    pub perceived_gap_ms: Option<f64>,
    pub tlx_total: Option<f64>,
    pub tlx_confidence: Option<f64>,
    pub tlx_frustration: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    Completed,
    DurationCap,
    Stopped,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub format_version: u32,
    pub config: TrialConfig,
    pub end_ms: Millis,
    pub end_reason: EndReason,
    /// Abort marker: why the trial stopped early.
    pub aborted: Option<String>,
    pub ik_failures: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialLog {
    pub header: LogHeader,
    pub ticks: Vec<TickRow>,
    pub channel: Vec<ChannelRow>,
    pub inputs: Vec<InputRow>,
    pub visual: Vec<VisualRow>,
    pub events: Vec<EventRow>,
    pub pupil: Vec<PupilRow>,
    pub post: Questionnaire,
}

impl TrialLog {
    pub fn empty(config: TrialConfig) -> Self {
        Self {
            header: LogHeader {
                format_version: LOG_FORMAT_VERSION,
                config,
                end_ms: 0,
                end_reason: EndReason::Completed,
                aborted: None,
                ik_failures: 0,
            },
            ticks: Vec::new(),
            channel: Vec::new(),
            inputs: Vec::new(),
            visual: Vec::new(),
            events: Vec::new(),
            pupil: Vec::new(),
            post: Questionnaire::default(),
        }
    }

    /// Times of grasps, placements and confirmations, for metrics.
    pub fn events_of<'a>(&'a self, pred: impl Fn(&LogEvent) -> bool + 'a) -> impl Iterator<Item = &'a EventRow> + 'a {
        self.events.iter().filter(move |e| pred(&e.event))
    }
}

/// Source of operator inputs at the 90 Hz ticks.
pub trait InputSource {
    /// Input for this operator tick, or `None` to send nothing.
    fn next_input(&mut self, view: &OperatorView<'_>) -> Option<OperatorInput>;

    /// Whether the operator has nothing more to do.
    fn finished(&self) -> bool {
        false
    }

    /// Grip-change confirmations observed so far.
    fn confirmations(&self) -> &[Confirmation] {
        &[]
    }
}

impl InputSource for ScriptedOperator {
    fn next_input(&mut self, view: &OperatorView<'_>) -> Option<OperatorInput> {
        Some(self.policy_step(view))
    }

    fn finished(&self) -> bool {
        self.is_finished()
    }

    fn confirmations(&self) -> &[Confirmation] {
        ScriptedOperator::confirmations(self)
    }
}

/// Replays recorded inputs at their original timestamps.
#[derive(Debug, Clone)]
pub struct PlaybackInput {
    inputs: Vec<OperatorInput>,
    next: usize,
}

impl PlaybackInput {
    pub fn new(inputs: Vec<OperatorInput>) -> Self {
        Self { inputs, next: 0 }
    }
}

impl InputSource for PlaybackInput {
    fn next_input(&mut self, view: &OperatorView<'_>) -> Option<OperatorInput> {
        while self.inputs.get(self.next).is_some_and(|i| i.timestamp < view.now) {
            self.next += 1;
        }
        match self.inputs.get(self.next) {
            Some(i) if i.timestamp == view.now => {
                self.next += 1;
                Some(*i)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Control {
    Continue,
    /// Normal end requested by the operator.
    Stop,
    /// Abnormal end; the partial log is kept with this marker.
    Abort(String),
}

/// Hooks for live sessions: pacing, streaming delivered feedback, aborting.
pub trait SessionObserver {
    fn on_tick(&mut self, _now: Millis) -> Control {
        Control::Continue
    }
    fn on_visual(&mut self, _delivered_ms: Millis, _frame: &VisualFrame) {}
    fn on_haptic(&mut self, _delivered_ms: Millis, _sample: &ForceSample) {}
    fn on_event(&mut self, _row: &EventRow) {}
}

/// Observer that does nothing, for headless runs.
pub struct Headless;

impl SessionObserver for Headless {}

/// Joint-space interpolation toward the latest IK solution over one command
/// period, so the arm moves smoothly between 90 Hz commands.
#[derive(Debug, Clone)]
struct ArmTracker {
    from: [f64; 7],
    to: [f64; 7],
    start: Millis,
    duration: Millis,
    goal: JointState,
}

impl ArmTracker {
    fn new(joints: JointState) -> Self {
        Self {
            from: joints.angles,
            to: joints.angles,
            start: 0,
            duration: 1,
            goal: joints,
        }
    }

    fn at(&self, t: Millis) -> [f64; 7] {
        let s = (t.saturating_sub(self.start) as f64 / self.duration as f64).min(1.0);
        let mut q = [0.0; 7];
        for i in 0..7 {
            q[i] = self.from[i] + (self.to[i] - self.from[i]) * s;
        }
        q
    }

    fn retarget(&mut self, now: Millis, goal: JointState, duration: Millis) {
        self.from = self.at(now);
        self.to = goal.angles;
        self.start = now;
        self.duration = duration.clamp(1, 50);
        self.goal = goal;
    }
}

/// Finite-difference acceleration and yaw rate of the end effector.
#[derive(Debug, Clone)]
struct EffectorEstimator {
    velocity: Vector3<f64>,
    orientation: nalgebra::UnitQuaternion<f64>,
    acceleration: Vector3<f64>,
    yaw_rate: f64,
    tau_s: f64,
}

impl EffectorEstimator {
    fn new(state: &WorldState, tau_ms: f64) -> Self {
        Self {
            velocity: state.effector_velocity,
            orientation: state.end_effector.orientation,
            acceleration: Vector3::zeros(),
            yaw_rate: 0.0,
            tau_s: tau_ms / 1000.0,
        }
    }

    fn update(&mut self, state: &WorldState, dt: f64) {
        let raw = (state.effector_velocity - self.velocity) / dt;
        let alpha = dt / (self.tau_s + dt);
        self.acceleration += (raw - self.acceleration) * alpha;
        self.yaw_rate = (state.end_effector.orientation * self.orientation.inverse()).scaled_axis().z / dt;
        self.velocity = state.effector_velocity;
        self.orientation = state.end_effector.orientation;
    }

    fn render(&self, state: &WorldState, params: &HapticParams) -> ForceSample {
        render_contact_forces(state, params, &state.effector_velocity, &self.acceleration, self.yaw_rate)
    }
}

/// A simulated arm: world state, joint interpolation and force estimator.
#[derive(Debug, Clone)]
struct Side {
    state: WorldState,
    tracker: ArmTracker,
    estimator: EffectorEstimator,
    grip_force: f64,
    command_seq: Option<u64>,
}

impl Side {
    fn new(world: &World, tau_ms: f64) -> Self {
        let ready = world.arm.ready_state();
        let state = world.initial_state(&ready);
        Self {
            tracker: ArmTracker::new(state.robot_joints),
            estimator: EffectorEstimator::new(&state, tau_ms),
            state,
            grip_force: 0.0,
            command_seq: None,
        }
    }

    /// Solves IK for `cmd` and starts moving toward it. Returns whether IK
    /// converged.
    fn apply(&mut self, arm: &ArmModel, ik: &IkSettings, cmd: &Command, seq: u64, now: Millis) -> bool {
        self.grip_force = cmd.grip_force;
        self.command_seq = Some(seq);
        match solve_ik_with(arm, &cmd.target, &self.tracker.goal, ik) {
            Ok(sol) => {
                self.tracker.retarget(now, sol.joints, cmd.dt_ms);
                true
            }
            Err(KinematicsError::ConvergenceFailure { best, position_residual, .. }) => {
                log::warn!("IK did not converge at {now} ms (residual {position_residual:.4} m); using best iterate");
                self.tracker.retarget(now, best, cmd.dt_ms);
                false
            }
            Err(e) => {
                log::warn!("IK rejected command at {now} ms: {e}");
                false
            }
        }
    }

    fn step(&mut self, world: &World, t: Millis) -> Vec<crate::world::WorldEvent> {
        let mut joints = self.state.robot_joints;
        joints.angles = self.tracker.at(t + 1);
        let out = world.step_to(&self.state, &joints, self.grip_force, (t + 1) as f64 / 1000.0);
        self.state = out.state;
        self.estimator.update(&self.state, 0.001);
        out.events
    }
}

fn world_event(kind: WorldEventKind) -> LogEvent {
    match kind {
        WorldEventKind::Grasp { cube } => LogEvent::Grasp { cube },
        WorldEventKind::Release { cube } => LogEvent::Release { cube },
        WorldEventKind::Placed { cube, target } => LogEvent::Placed { cube, target },
        WorldEventKind::GraspRejected { cube, expected } => LogEvent::GraspRejected { cube, expected },
        WorldEventKind::Impact { cube, speed } => LogEvent::Impact { cube, speed },
    }
}

fn tick_row(t: Millis, side: &Side, force: &ForceSample) -> TickRow {
    let s = &side.state;
    let q = s.end_effector.orientation.quaternion();
    TickRow {
        time_ms: t,
        joints: s.robot_joints.angles,
        aperture: s.robot_joints.gripper_aperture,
        ee_position: s.end_effector.position.into(),
        ee_orientation: [q.w, q.i, q.j, q.k],
        grasped: s.grasp_binding.as_ref().map(|b| b.cube),
        script_index: s.script_index,
        grip_force: side.grip_force,
        command_seq: side.command_seq,
        force: force.force.into(),
        torque_z: force.torque_z,
        clamped: force.clamped,
    }
}

/// Runs a scripted trial headless.
pub fn run_scripted(config: &TrialConfig) -> Result<TrialLog, SessionError> {
    let OperatorSpec::Scripted(policy) = &config.operator else {
        return Err(SessionError::Config("run_scripted needs a scripted operator".into()));
    };
    let world = World::new(config.arm.clone(), config.scene.clone());
    let start = world.initial_state(&world.arm.ready_state()).end_effector;
    let mut op = ScriptedOperator::new(policy.clone(), &config.scene, start);
    run_session(config, &mut op, &mut Headless)
}

/// Runs one trial to completion, the duration cap, or an observer stop.
pub fn run_session(
    config: &TrialConfig,
    input: &mut dyn InputSource,
    observer: &mut dyn SessionObserver,
) -> Result<TrialLog, SessionError> {
    config.validate()?;
    let cond = config.condition;
    let world = World::new(config.arm.clone(), config.scene.clone());
    let tau = config.acceleration_filter_ms;
    let mut remote = Side::new(&world, tau);
    // Operator-side twin, needed only when anchoring forces must run ahead of
    // a delayed robot.
    let mut twin = (cond.kind == ConditionKind::Anchoring && cond.onset_delay_ms > 0).then(|| Side::new(&world, tau));
    let mut pipeline: DelayPipeline<Payload> = DelayPipeline::new(cond);
    let mut log = TrialLog::empty(config.clone());
    let cap = config.duration_cap_ms();
    let speed_limit = config.operator.speed_limit();
    let scripted = matches!(config.operator, OperatorSpec::Scripted(_));

    let mut operator_target = remote.state.end_effector;
    let mut last_grip = 0.0;
    let mut action_start: Option<Millis> = None;
    let mut latest_visual: Option<VisualFrame> = None;
    let mut latest_haptic: Option<ForceSample> = None;
    let mut fresh_events = false;
    let mut confirmations_seen = 0;
    let mut visual_index: Vec<(u64, usize)> = Vec::new();
    let mut end = (cap, EndReason::DurationCap);

    for t in 0..cap {
        if config.stop_on_completion && scripted && input.finished() {
            end = (t, EndReason::Completed);
            break;
        }
        match observer.on_tick(t) {
            Control::Continue => {}
            Control::Stop => {
                end = (t, EndReason::Stopped);
                break;
            }
            Control::Abort(reason) => {
                log.header.aborted = Some(reason);
                end = (t, EndReason::Aborted);
                break;
            }
        }

        // 1. Feedback emission.
        let force = haptic_sample(config, &remote, twin.as_ref(), action_start, t);
        let hseq = pipeline.enqueue(Payload::Haptic(force), Channel::Haptic, t);
        log.channel.push(ChannelRow {
            sequence: hseq,
            channel: Channel::Haptic,
            emit_ms: t,
            due_ms: t + cond.haptic_delay_ms,
            delivered_ms: None,
        });
        let trigger = if is_frame_tick(t) {
            Some(FrameTrigger::Periodic)
        } else if fresh_events {
            Some(FrameTrigger::Event)
        } else {
            None
        };
        if let Some(trigger) = trigger {
            let frame = remote.state.visual_frame(t);
            let vseq = pipeline.enqueue(Payload::Visual(frame.clone()), Channel::Visual, t);
            log.channel.push(ChannelRow {
                sequence: vseq,
                channel: Channel::Visual,
                emit_ms: t,
                due_ms: t + cond.visual_delay_ms,
                delivered_ms: None,
            });
            visual_index.push((vseq, log.visual.len()));
            log.visual.push(VisualRow {
                sequence: vseq,
                trigger,
                delivered_ms: None,
                frame,
            });
        }
        log.ticks.push(tick_row(t, &remote, &force));

        // 2. Deliveries.
        let mut ctx = Delivery {
            t,
            world: &world,
            config,
            visual_index: &visual_index,
            observer: &mut *observer,
            latest_visual: &mut latest_visual,
            latest_haptic: &mut latest_haptic,
        };
        ctx.run(&mut pipeline, &mut log, &mut remote)?;

        // 3. Operator.
        if is_frame_tick(t) {
            let view = OperatorView {
                now: t,
                visual: latest_visual.as_ref(),
                haptic: latest_haptic.as_ref(),
                condition: &cond,
            };
            if let Some(mut inp) = input.next_input(&view) {
                if inp.limit_speed(speed_limit) {
                    log::warn!("operator input at {t} ms exceeded the speed limit and was scaled down");
                }
                let grip_changed = inp.grip_force != last_grip;
                if inp.is_motion() || grip_changed {
                    if action_start.is_none() {
                        action_start = Some(t);
                        let row = EventRow {
                            time_ms: t,
                            event: LogEvent::ActionStart,
                        };
                        observer.on_event(&row);
                        log.events.push(row);
                    }
                } else {
                    action_start = None;
                }
                last_grip = inp.grip_force;
                operator_target = inp.apply(&operator_target);
                // The table stops the gripper.
                operator_target.position.z = operator_target.position.z.max(crate::world::FLOOR_Z);
                let cmd = Command {
                    target: operator_target,
                    grip_force: inp.grip_force,
                    dt_ms: inp.dt_ms,
                };
                if let Some(tw) = twin.as_mut() {
                    tw.apply(&world.arm, &config.ik, &cmd, u64::MAX, t);
                }
                let cseq = pipeline.enqueue(Payload::Command(cmd), Channel::Command, t);
                log.channel.push(ChannelRow {
                    sequence: cseq,
                    channel: Channel::Command,
                    emit_ms: t,
                    due_ms: t + cond.onset_delay_ms,
                    delivered_ms: None,
                });
                log.inputs.push(InputRow { sequence: cseq, input: inp });
                Delivery {
                    t,
                    world: &world,
                    config,
                    visual_index: &visual_index,
                    observer: &mut *observer,
                    latest_visual: &mut latest_visual,
                    latest_haptic: &mut latest_haptic,
                }
                .run(&mut pipeline, &mut log, &mut remote)?;
            }
            for c in &input.confirmations()[confirmations_seen..] {
                let row = EventRow {
                    time_ms: c.confirmed_at,
                    event: LogEvent::Confirmed { confirmation: *c },
                };
                observer.on_event(&row);
                log.events.push(row);
            }
            confirmations_seen = input.confirmations().len();
        }

        // 4. World step.
        let events = remote.step(&world, t);
        if let Some(tw) = twin.as_mut() {
            tw.step(&world, t);
        }
        fresh_events = !events.is_empty();
        for e in events {
            let row = EventRow {
                time_ms: t + 1,
                event: world_event(e.kind),
            };
            observer.on_event(&row);
            log.events.push(row);
        }
    }

    log.header.end_ms = end.0;
    log.header.end_reason = end.1;
    for o in remote.state.objects.iter().filter(|o| o.color_tag.is_cube()) {
        log.events.push(EventRow {
            time_ms: end.0,
            event: LogEvent::Settled {
                cube: o.id,
                position: o.pose.position.into(),
            },
        });
    }
    Ok(log)
}

struct Delivery<'a> {
    t: Millis,
    world: &'a World,
    config: &'a TrialConfig,
    visual_index: &'a [(u64, usize)],
    observer: &'a mut dyn SessionObserver,
    latest_visual: &'a mut Option<VisualFrame>,
    latest_haptic: &'a mut Option<ForceSample>,
}

impl Delivery<'_> {
    fn run(&mut self, pipeline: &mut DelayPipeline<Payload>, log: &mut TrialLog, remote: &mut Side) -> Result<(), SessionError> {
        let t = self.t;
        for ev in pipeline.drain_due(t)? {
            // Sequence ids are handed out in emission order, one channel row each.
            log.channel[ev.sequence as usize].delivered_ms = Some(t);
            match ev.payload {
                Payload::Command(cmd) => {
                    if !remote.apply(&self.world.arm, &self.config.ik, &cmd, ev.sequence, t) {
                        log.header.ik_failures += 1;
                    }
                }
                Payload::Visual(frame) => {
                    if let Ok(i) = self.visual_index.binary_search_by_key(&ev.sequence, |(s, _)| *s) {
                        log.visual[self.visual_index[i].1].delivered_ms = Some(t);
                    }
                    self.observer.on_visual(t, &frame);
                    *self.latest_visual = Some(frame);
                }
                Payload::Haptic(sample) => {
                    self.observer.on_haptic(t, &sample);
                    *self.latest_haptic = Some(sample);
                }
            }
        }
        Ok(())
    }
}

fn haptic_sample(
    config: &TrialConfig,
    remote: &Side,
    twin: Option<&Side>,
    action_start: Option<Millis>,
    t: Millis,
) -> ForceSample {
    let source = twin.unwrap_or(remote);
    let local = source.estimator.render(&source.state, &config.haptics);
    if config.condition.kind != ConditionKind::Anchoring {
        return local;
    }
    match haptic_onset_cue(&config.condition, config.cue_style, action_start) {
        Ok(cue) if config.cue_style == CueStyle::Vibration => {
            let vib = cue.sample(t, || local);
            let modes = ModeBreakdown {
                vibration: vib.modes.vibration,
                ..local.modes
            };
            ForceSample::from_modes(modes, config.haptics.force_limit, local.timestamp)
        }
        Ok(cue) => {
            let mut s = cue.sample(t, || local);
            if action_start.is_none() {
                // Between actions the handle still carries what is held.
                s = local;
            }
            s.timestamp = local.timestamp;
            s
        }
        Err(_) => local,
    }
}

/// Per-cube time on task from a log: first grasp of the cube to the release
/// that placed it, in ms.
pub fn cube_times_ms(log: &TrialLog) -> Vec<(ObjectId, Millis)> {
    let mut out = Vec::new();
    for e in &log.events {
        if let LogEvent::Placed { cube, .. } = e.event {
            let grab = log.events.iter().find_map(|g| match g.event {
                LogEvent::Grasp { cube: c } if c == cube => Some(g.time_ms),
                _ => None,
            });
            if let Some(g) = grab {
                out.push((cube, e.time_ms - g));
            }
        }
    }
    out
}

/// Trial time on task: sum of the per-cube times, seconds.
pub fn trial_time_on_task(log: &TrialLog) -> f64 {
    cube_times_ms(log).iter().map(|(_, ms)| *ms as f64).sum::<f64>() / 1000.0
}

/// Grasp confirmations that fall inside a cube's time-on-task window.
pub fn grasp_confirmations(log: &TrialLog) -> Vec<Confirmation> {
    log.events
        .iter()
        .filter_map(|e| match e.event {
            LogEvent::Confirmed { confirmation } if confirmation.change == GripChange::Grasp => Some(confirmation),
            _ => None,
        })
        .collect()
}

impl fmt::Display for EndReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EndReason::Completed => "completed",
            EndReason::DurationCap => "duration_cap",
            EndReason::Stopped => "stopped",
            EndReason::Aborted => "aborted",
        })
    }
}

impl EndReason {
    pub fn parse(s: &str) -> Option<Self> {
        [EndReason::Completed, EndReason::DurationCap, EndReason::Stopped, EndReason::Aborted]
            .into_iter()
            .find(|r| r.to_string() == s)
    }
}
