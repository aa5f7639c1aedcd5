//! Headless pick-and-place world.
//!
//! Cubes are point masses with axis-aligned box extents. Free cubes fall under
//! gravity and are pushed out of the floor, static obstacles and each other
//! with inelastic impulses. The arm is kinematic: its joints are set from the
//! delivered command every tick and a grasped cube rigidly follows the TCP.
//! Targets are invisible acceptance boxes and never collide.

use alloc::vec::Vec;
use core::fmt;

use nalgebra::{Isometry3, Vector3};
use serde::{Deserialize, Serialize};

use crate::kinematics::{forward_kinematics, ArmModel, JointState, Pose};

pub type ObjectId = u32;

/// Gap below which two surfaces count as touching.
const CONTACT_SLOP: f64 = 1e-4;
/// Largest allowed step, seconds.
pub const MAX_DT: f64 = 0.01;
/// Height of the table surface, m.
pub const FLOOR_Z: f64 = 0.0;
pub const SCENE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TaskError {
    #[error("drop time {t_drop} s precedes grab time {t_grab} s")]
    InvalidInterval { t_grab: f64, t_drop: f64 },
    #[error("invalid scene: {0}")]
    InvalidScene(alloc::string::String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorTag {
    Grey,
    Green,
    Blue,
    Purple,
    Obstacle,
    Target,
}

impl ColorTag {
    pub fn is_cube(self) -> bool {
        matches!(self, ColorTag::Grey | ColorTag::Green | ColorTag::Blue | ColorTag::Purple)
    }

    pub fn name(self) -> &'static str {
        match self {
            ColorTag::Grey => "grey",
            ColorTag::Green => "green",
            ColorTag::Blue => "blue",
            ColorTag::Purple => "purple",
            ColorTag::Obstacle => "obstacle",
            ColorTag::Target => "target",
        }
    }
}

impl fmt::Display for ColorTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: ObjectId,
    pub color_tag: ColorTag,
    pub pose: Pose,
    pub half_extents: Vector3<f64>,
    /// kg; only meaningful for cubes.
    #[serde(default)]
    pub mass: f64,
    #[serde(default)]
    pub surface_roughness: f64,
    #[serde(default)]
    pub grasped: bool,
    #[serde(default = "Vector3::zeros")]
    pub velocity: Vector3<f64>,
}

impl SceneObject {
    pub fn position(&self) -> Vector3<f64> {
        self.pose.position
    }

    fn min(&self) -> Vector3<f64> {
        self.pose.position - self.half_extents
    }

    fn max(&self) -> Vector3<f64> {
        self.pose.position + self.half_extents
    }

    /// Euclidean distance from `p` to this box (zero inside).
    pub fn distance_to(&self, p: &Vector3<f64>) -> f64 {
        let d = (p - self.pose.position).abs() - self.half_extents;
        d.map(|v| v.max(0.0)).norm()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStep {
    pub cube: ObjectId,
    pub target: ObjectId,
    #[serde(default)]
    pub obstacles: Vec<ObjectId>,
}

/// Ordered cube sequence with each cube's target and the obstacles on its path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScript {
    pub steps: Vec<TaskStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicsParams {
    pub gravity: f64,
    /// Grip force (N) at or above which the gripper holds a cube.
    pub grasp_force_threshold: f64,
    /// Largest TCP-to-cube-surface distance (m) at which a grasp engages.
    pub grasp_radius: f64,
    /// Added to the target half extents to form the invisible collider box.
    pub gate_margin: f64,
    pub friction: f64,
}

impl Default for PhysicsParams {
    fn default() -> Self {
        Self {
            gravity: 9.81,
            grasp_force_threshold: 2.0,
            grasp_radius: 0.03,
            gate_margin: 0.02,
            friction: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub version: u32,
    pub name: alloc::string::String,
    pub physics: PhysicsParams,
    pub objects: Vec<SceneObject>,
    pub script: TaskScript,
}

impl Scene {
    /// Default four-cube layout: cubes start on the +y side and are carried
    /// across obstacles of increasing height to targets on the -y side; the
    /// purple cube travels the other way past two obstacles. Coordinates are a
    /// representative layout, not measured ones.
    pub fn standard() -> Self {
        let cube = |id, tag, x: f64, y: f64, mass, roughness| SceneObject {
            id,
            color_tag: tag,
            pose: Pose::from_position(Vector3::new(x, y, 0.025)),
            half_extents: Vector3::repeat(0.025),
            mass,
            surface_roughness: roughness,
            grasped: false,
            velocity: Vector3::zeros(),
        };
        let target = |id, x: f64, y: f64| SceneObject {
            id,
            color_tag: ColorTag::Target,
            pose: Pose::from_position(Vector3::new(x, y, 0.0)),
            half_extents: Vector3::new(0.04, 0.04, 0.05),
            mass: 0.0,
            surface_roughness: 0.0,
            grasped: false,
            velocity: Vector3::zeros(),
        };
        let obstacle = |id, x: f64, y: f64, hx: f64, hy: f64, height: f64| SceneObject {
            id,
            color_tag: ColorTag::Obstacle,
            pose: Pose::from_position(Vector3::new(x, y, height / 2.0)),
            half_extents: Vector3::new(hx, hy, height / 2.0),
            mass: 0.0,
            surface_roughness: 0.5,
            grasped: false,
            velocity: Vector3::zeros(),
        };
        let objects = alloc::vec![
            cube(1, ColorTag::Grey, 0.35, 0.15, 0.2, 0.2),
            cube(2, ColorTag::Green, 0.45, 0.22, 0.3, 0.5),
            cube(3, ColorTag::Blue, 0.56, 0.26, 0.4, 0.8),
            cube(4, ColorTag::Purple, 0.68, -0.18, 0.5, 1.0),
            target(11, 0.35, -0.12),
            target(12, 0.45, -0.20),
            target(13, 0.58, -0.22),
            target(14, 0.67, 0.20),
            obstacle(21, 0.45, 0.02, 0.04, 0.015, 0.08),
            obstacle(22, 0.57, 0.03, 0.04, 0.015, 0.12),
            obstacle(23, 0.675, 0.0, 0.03, 0.015, 0.16),
            obstacle(24, 0.675, 0.10, 0.03, 0.015, 0.10),
        ];
        let step = |cube, target, obstacles: &[ObjectId]| TaskStep {
            cube,
            target,
            obstacles: obstacles.to_vec(),
        };
        Self {
            version: SCENE_VERSION,
            name: "standard".into(),
            physics: PhysicsParams::default(),
            objects,
            script: TaskScript {
                steps: alloc::vec![
                    step(1, 11, &[]),
                    step(2, 12, &[21]),
                    step(3, 13, &[22]),
                    step(4, 14, &[23, 24]),
                ],
            },
        }
    }

    pub fn object(&self, id: ObjectId) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        use alloc::format;
        let bad = |m: alloc::string::String| Err(TaskError::InvalidScene(m));
        if self.version != SCENE_VERSION {
            return bad(format!("unsupported scene version {}", self.version));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if self.objects[..i].iter().any(|p| p.id == o.id) {
                return bad(format!("duplicate object id {}", o.id));
            }
            if o.half_extents.iter().any(|h| !(*h > 0.0)) {
                return bad(format!("object {} has non-positive half extents", o.id));
            }
            if o.color_tag.is_cube() && !(o.mass > 0.0) {
                return bad(format!("cube {} needs positive mass", o.id));
            }
            if o.surface_roughness < 0.0 {
                return bad(format!("object {} has negative roughness", o.id));
            }
        }
        for step in &self.script.steps {
            match self.object(step.cube) {
                Some(o) if o.color_tag.is_cube() => {}
                _ => return bad(format!("script cube {} is not a cube", step.cube)),
            }
            match self.object(step.target) {
                Some(o) if o.color_tag == ColorTag::Target => {}
                _ => return bad(format!("script target {} is not a target", step.target)),
            }
            for ob in &step.obstacles {
                match self.object(*ob) {
                    Some(o) if o.color_tag == ColorTag::Obstacle => {}
                    _ => return bad(format!("script obstacle {ob} is not an obstacle")),
                }
            }
        }
        if self.script.steps.is_empty() {
            return bad("task script is empty".into());
        }
        Ok(())
    }

    /// Validation plus the standard-scene shape: four cubes, four targets.
    pub fn validate_standard(&self) -> Result<(), TaskError> {
        self.validate()?;
        let cubes = self.objects.iter().filter(|o| o.color_tag.is_cube()).count();
        let targets = self.objects.iter().filter(|o| o.color_tag == ColorTag::Target).count();
        if cubes != 4 || targets != 4 || self.script.steps.len() != 4 {
            return Err(TaskError::InvalidScene(alloc::format!(
                "standard scene needs 4 cubes, 4 targets and 4 script steps (got {cubes}, {targets}, {})",
                self.script.steps.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "id")]
pub enum Body {
    Floor,
    Object(ObjectId),
}

/// Two surfaces currently touching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contact {
    pub cube: ObjectId,
    pub other: Body,
    /// Unit normal pointing from `other` into `cube`.
    pub normal: Vector3<f64>,
    pub depth: f64,
    /// Velocity of `cube` relative to `other`.
    pub relative_velocity: Vector3<f64>,
    pub onset_time: f64,
    /// Approach speed along the normal when the contact began.
    pub onset_speed: f64,
    /// Tangential distance slid since onset.
    pub slide_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspBinding {
    pub cube: ObjectId,
    /// Cube pose in the TCP frame at the moment of grasping.
    pub offset: Pose,
    pub since: f64,
    /// Velocity change imposed on the cube when it was picked up.
    pub delta_v: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub time: f64,
    pub objects: Vec<SceneObject>,
    pub robot_joints: JointState,
    pub end_effector: Pose,
    pub effector_velocity: Vector3<f64>,
    pub grip_closed: bool,
    pub grasp_binding: Option<GraspBinding>,
    pub contacts: Vec<Contact>,
    /// Index of the current step of the task script.
    pub script_index: usize,
}

impl WorldState {
    pub fn object(&self, id: ObjectId) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn grasped_cube(&self) -> Option<&SceneObject> {
        self.grasp_binding.as_ref().and_then(|b| self.object(b.cube))
    }

    pub fn visual_frame(&self, sim_time_ms: u64) -> VisualFrame {
        VisualFrame {
            sim_time_ms,
            joints: self.robot_joints,
            end_effector: self.end_effector,
            grasped: self.grasp_binding.as_ref().map(|b| b.cube),
            script_index: self.script_index,
            cubes: self
                .objects
                .iter()
                .filter(|o| o.color_tag.is_cube())
                .map(|o| FramePose { id: o.id, pose: o.pose })
                .collect(),
        }
    }

    pub fn task_complete(&self, scene: &Scene) -> bool {
        self.script_index >= scene.script.steps.len()
    }
}

/// Pose of one scene object inside a [`VisualFrame`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FramePose {
    pub id: ObjectId,
    pub pose: Pose,
}

/// What the operator sees: the visual channel's payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualFrame {
    /// Simulation time of the snapshot, ms.
    pub sim_time_ms: u64,
    pub joints: JointState,
    pub end_effector: Pose,
    pub grasped: Option<ObjectId>,
    pub script_index: usize,
    /// Cubes only; static objects do not move.
    pub cubes: Vec<FramePose>,
}

impl VisualFrame {
    pub fn cube(&self, id: ObjectId) -> Option<&Pose> {
        self.cubes.iter().find(|c| c.id == id).map(|c| &c.pose)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum WorldEventKind {
    Grasp { cube: ObjectId },
    Release { cube: ObjectId },
    /// A release inside the target's collider box; only these count as drops.
    Placed { cube: ObjectId, target: ObjectId },
    GraspRejected { cube: ObjectId, expected: Option<ObjectId> },
    Impact { cube: ObjectId, speed: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldEvent {
    pub time: f64,
    #[serde(flatten)]
    pub kind: WorldEventKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: WorldState,
    pub events: Vec<WorldEvent>,
}

/// Immutable simulation context: arm model plus scene.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub arm: ArmModel,
    pub scene: Scene,
}

impl World {
    pub fn new(arm: ArmModel, scene: Scene) -> Self {
        Self { arm, scene }
    }

    pub fn initial_state(&self, joints: &JointState) -> WorldState {
        let joints = self.arm.clamp(joints);
        let end_effector = forward_kinematics(&self.arm, &joints).unwrap_or_default();
        let mut state = WorldState {
            time: 0.0,
            objects: self.scene.objects.clone(),
            robot_joints: joints,
            end_effector,
            effector_velocity: Vector3::zeros(),
            grip_closed: false,
            grasp_binding: None,
            contacts: Vec::new(),
            script_index: 0,
        };
        state.contacts = detect_contacts(&state, &[], 0.0, 0.0);
        state
    }

    pub fn step(&self, state: &WorldState, joints: &JointState, grip_force: f64, dt: f64) -> StepOutcome {
        step_world(self, state, joints, grip_force, dt)
    }

    pub fn step_to(&self, state: &WorldState, joints: &JointState, grip_force: f64, time: f64) -> StepOutcome {
        step_world_to(self, state, joints, grip_force, time)
    }

    pub fn script_step(&self, state: &WorldState) -> Option<&TaskStep> {
        self.scene.script.steps.get(state.script_index)
    }
}

/// Advances the world by `dt` seconds with the arm set to `joints`.
///
/// Out-of-range inputs are clamped (and logged): `dt` into `(0, 10 ms]`,
/// joints onto their limits, negative or non-finite grip force to zero.
pub fn step_world(world: &World, state: &WorldState, joints: &JointState, grip_force: f64, dt: f64) -> StepOutcome {
    let dt = if dt.is_finite() && dt > 0.0 && dt <= MAX_DT {
        dt
    } else {
        log::warn!("step_world: dt {dt} outside (0, {MAX_DT}], clamping");
        if dt.is_finite() && dt > MAX_DT { MAX_DT } else { 1e-6 }
    };
    advance(world, state, joints, grip_force, dt, state.time + dt)
}

/// [`step_world`] landing exactly on `time` (seconds), so a caller with an
/// integer clock does not accumulate rounding in `state.time`.
pub fn step_world_to(world: &World, state: &WorldState, joints: &JointState, grip_force: f64, time: f64) -> StepOutcome {
    let dt = time - state.time;
    if !(dt.is_finite() && dt > 0.0 && dt <= MAX_DT + 1e-12) {
        return step_world(world, state, joints, grip_force, dt);
    }
    advance(world, state, joints, grip_force, dt, time)
}

fn advance(world: &World, state: &WorldState, joints: &JointState, grip_force: f64, dt: f64, time: f64) -> StepOutcome {
    let params = &world.scene.physics;
    let grip_force = if grip_force.is_finite() && grip_force > 0.0 { grip_force } else { 0.0 };
    let clamped = world.arm.clamp(joints);
    if clamped.angles != joints.angles {
        log::warn!("step_world: joint command outside limits, clamped");
    }

    let mut next = state.clone();
    let mut events = Vec::new();
    next.time = time;

    let prev_tcp = state.end_effector.to_isometry();
    let tcp_pose = forward_kinematics(&world.arm, &clamped).unwrap_or(state.end_effector);
    let tcp = tcp_pose.to_isometry();
    next.robot_joints = clamped;
    next.robot_joints.timestamp = time;
    next.end_effector = tcp_pose;
    next.effector_velocity = (tcp_pose.position - state.end_effector.position) / dt;

    // Grip transitions.
    let closing = grip_force >= params.grasp_force_threshold;
    if let Some(binding) = next.grasp_binding.clone() {
        if !closing {
            release(world, &mut next, &binding, time, &mut events);
        }
    } else if closing && !state.grip_closed {
        try_grasp(world, &mut next, &tcp, time, &mut events);
    }
    next.grip_closed = closing;

    // Kinematic follow of the grasped cube.
    if let Some(binding) = &next.grasp_binding {
        let offset = binding.offset.to_isometry();
        if let Some(cube) = next.objects.iter_mut().find(|o| o.id == binding.cube) {
            let old = prev_tcp * offset;
            let new = tcp * offset;
            cube.pose = Pose::from_isometry(&new);
            cube.velocity = (new.translation.vector - old.translation.vector) / dt;
        }
    }

    next.robot_joints.gripper_aperture = match (&next.grasp_binding, closing) {
        (_, false) => world.arm.max_aperture,
        (Some(b), true) => next
            .object(b.cube)
            .map_or(0.0, |c| (2.0 * c.half_extents.x).min(world.arm.max_aperture)),
        (None, true) => 0.0,
    };

    // Free-body integration (semi-implicit Euler).
    let pre_velocity: Vec<(ObjectId, Vector3<f64>)> = next
        .objects
        .iter_mut()
        .filter(|o| o.color_tag.is_cube() && !o.grasped)
        .map(|o| {
            o.velocity.z -= params.gravity * dt;
            o.pose.position += o.velocity * dt;
            (o.id, o.velocity)
        })
        .collect();

    for _ in 0..4 {
        if !resolve_penetrations(&mut next, params.friction) {
            break;
        }
    }

    let mut contacts = detect_contacts(&next, &state.contacts, time, dt);
    for c in &mut contacts {
        if c.onset_time == time {
            let v = pre_velocity
                .iter()
                .find(|(id, _)| *id == c.cube)
                .map_or(c.relative_velocity, |(_, v)| *v - other_velocity(&next, c.other));
            c.onset_speed = (-v.dot(&c.normal)).max(0.0);
            if c.onset_speed > 0.0 {
                events.push(WorldEvent {
                    time,
                    kind: WorldEventKind::Impact {
                        cube: c.cube,
                        speed: c.onset_speed,
                    },
                });
            }
        }
    }
    next.contacts = contacts;

    StepOutcome { state: next, events }
}

fn try_grasp(world: &World, state: &mut WorldState, tcp: &Isometry3<f64>, time: f64, events: &mut Vec<WorldEvent>) {
    let params = &world.scene.physics;
    let p = tcp.translation.vector;
    let candidate = state
        .objects
        .iter()
        .filter(|o| o.color_tag.is_cube())
        .map(|o| (o.distance_to(&p), o.id))
        .filter(|(d, _)| *d <= params.grasp_radius)
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let Some((_, id)) = candidate else {
        return;
    };
    let expected = world.scene.script.steps.get(state.script_index).map(|s| s.cube);
    if expected != Some(id) {
        log::info!("grasp of cube {id} rejected; script expects {expected:?}");
        events.push(WorldEvent {
            time,
            kind: WorldEventKind::GraspRejected { cube: id, expected },
        });
        return;
    }
    let effector_velocity = state.effector_velocity;
    let Some(cube) = state.objects.iter_mut().find(|o| o.id == id) else {
        return;
    };
    cube.grasped = true;
    let offset = tcp.inverse() * cube.pose.to_isometry();
    let delta_v = effector_velocity - cube.velocity;
    state.grasp_binding = Some(GraspBinding {
        cube: id,
        offset: Pose::from_isometry(&offset),
        since: time,
        delta_v,
    });
    events.push(WorldEvent {
        time,
        kind: WorldEventKind::Grasp { cube: id },
    });
}

fn release(world: &World, state: &mut WorldState, binding: &GraspBinding, time: f64, events: &mut Vec<WorldEvent>) {
    state.grasp_binding = None;
    let velocity = state.effector_velocity;
    let Some(cube) = state.objects.iter_mut().find(|o| o.id == binding.cube) else {
        return;
    };
    cube.grasped = false;
    cube.velocity = velocity;
    let cube = cube.clone();
    events.push(WorldEvent {
        time,
        kind: WorldEventKind::Release { cube: cube.id },
    });
    let Some(step) = world.scene.script.steps.get(state.script_index) else {
        return;
    };
    if step.cube != cube.id {
        return;
    }
    let inside = world
        .scene
        .object(step.target)
        .is_some_and(|t| placement_gate(&cube, t, world.scene.physics.gate_margin));
    if inside {
        events.push(WorldEvent {
            time,
            kind: WorldEventKind::Placed {
                cube: cube.id,
                target: step.target,
            },
        });
        state.script_index += 1;
    }
}

fn other_velocity(state: &WorldState, body: Body) -> Vector3<f64> {
    match body {
        Body::Floor => Vector3::zeros(),
        Body::Object(id) => state.object(id).map_or(Vector3::zeros(), |o| o.velocity),
    }
}

/// Overlap of two boxes: (depth, normal from `b` into `a`) along the axis of
/// least penetration, or the separating gap as a negative depth.
fn box_overlap(a_min: Vector3<f64>, a_max: Vector3<f64>, b_min: Vector3<f64>, b_max: Vector3<f64>) -> (f64, Vector3<f64>) {
    let mut best = (f64::INFINITY, Vector3::zeros());
    let mut gap = f64::NEG_INFINITY;
    for axis in 0..3 {
        let push_pos = b_max[axis] - a_min[axis];
        let push_neg = a_max[axis] - b_min[axis];
        let (depth, sign) = if push_pos < push_neg { (push_pos, 1.0) } else { (push_neg, -1.0) };
        if depth < best.0 {
            let mut n = Vector3::zeros();
            n[axis] = sign;
            best = (depth, n);
        }
        gap = gap.max(-depth);
    }
    if gap > 0.0 {
        (-gap, best.1)
    } else {
        best
    }
}

fn floor_overlap(o: &SceneObject) -> (f64, Vector3<f64>) {
    (FLOOR_Z - o.min().z, Vector3::z())
}

fn solid(o: &SceneObject) -> bool {
    o.color_tag != ColorTag::Target
}

/// Pushes free cubes out of everything they penetrate and removes the
/// approaching velocity component. Returns whether anything moved.
fn resolve_penetrations(state: &mut WorldState, friction: f64) -> bool {
    let mut moved = false;
    let n = state.objects.len();
    for i in 0..n {
        let o = &state.objects[i];
        if !o.color_tag.is_cube() || o.grasped {
            continue;
        }
        let (depth, normal) = floor_overlap(o);
        if depth > 0.0 {
            apply_push(&mut state.objects[i], depth, normal, Vector3::zeros(), friction);
            moved = true;
        }
        for j in 0..n {
            if i == j || !solid(&state.objects[j]) {
                continue;
            }
            let (a, b) = (&state.objects[i], &state.objects[j]);
            let (depth, normal) = box_overlap(a.min(), a.max(), b.min(), b.max());
            if depth <= 0.0 {
                continue;
            }
            let other_dynamic = b.color_tag.is_cube() && !b.grasped;
            let other_v = b.velocity;
            if other_dynamic {
                apply_push(&mut state.objects[i], depth / 2.0, normal, other_v, friction);
                let self_v = state.objects[i].velocity;
                apply_push(&mut state.objects[j], depth / 2.0, -normal, self_v, friction);
            } else {
                apply_push(&mut state.objects[i], depth, normal, other_v, friction);
            }
            moved = true;
        }
    }
    moved
}

fn apply_push(o: &mut SceneObject, depth: f64, normal: Vector3<f64>, other_v: Vector3<f64>, friction: f64) {
    o.pose.position += normal * depth;
    let rel = o.velocity - other_v;
    let vn = rel.dot(&normal);
    if vn < 0.0 {
        let normal_impulse = -vn;
        let tangential = rel - normal * vn;
        let t_speed = tangential.norm();
        let reduced = if t_speed > 0.0 {
            tangential * ((t_speed - friction * normal_impulse).max(0.0) / t_speed)
        } else {
            tangential
        };
        o.velocity = other_v + reduced;
    }
}

fn detect_contacts(state: &WorldState, previous: &[Contact], time: f64, dt: f64) -> Vec<Contact> {
    let mut out = Vec::new();
    for a in state.objects.iter().filter(|o| o.color_tag.is_cube()) {
        let mut push = |other: Body, depth: f64, normal: Vector3<f64>, other_v: Vector3<f64>| {
            if depth < -CONTACT_SLOP {
                return;
            }
            let relative_velocity = a.velocity - other_v;
            let tangential = relative_velocity - normal * relative_velocity.dot(&normal);
            let prev = previous.iter().find(|c| c.cube == a.id && c.other == other);
            let (onset_time, onset_speed, slide) = match prev {
                Some(p) => (p.onset_time, p.onset_speed, p.slide_distance + tangential.norm() * dt),
                None => (time, 0.0, 0.0),
            };
            out.push(Contact {
                cube: a.id,
                other,
                normal,
                depth: depth.max(0.0),
                relative_velocity,
                onset_time,
                onset_speed,
                slide_distance: slide,
            });
        };
        let (d, n) = floor_overlap(a);
        push(Body::Floor, d, n, Vector3::zeros());
        for b in state.objects.iter().filter(|b| b.id != a.id && solid(b)) {
            // Cube pairs are reported once, from the lower id.
            if b.color_tag.is_cube() && b.id < a.id {
                continue;
            }
            let (d, n) = box_overlap(a.min(), a.max(), b.min(), b.max());
            push(Body::Object(b.id), d, n, b.velocity);
        }
    }
    out
}

/// Planar distance between a placed cube and its target centre.
pub fn placement_accuracy(cube_final: &Vector3<f64>, target_center: &Vector3<f64>) -> f64 {
    let dx = cube_final.x - target_center.x;
    let dy = cube_final.y - target_center.y;
    libm::sqrt(dx * dx + dy * dy)
}

/// Seconds between grabbing a cube and dropping it.
pub fn time_on_task(t_grab: f64, t_drop: f64) -> Result<f64, TaskError> {
    if t_drop < t_grab || !(t_grab.is_finite() && t_drop.is_finite()) {
        return Err(TaskError::InvalidInterval { t_grab, t_drop });
    }
    Ok(t_drop - t_grab)
}

/// Whether the cube centre lies in the closed collider box around `target`
/// (target half extents grown by `margin`).
pub fn placement_gate(cube: &SceneObject, target: &SceneObject, margin: f64) -> bool {
    let d = (cube.pose.position - target.pose.position).abs();
    (0..3).all(|i| d[i] <= target.half_extents[i] + margin)
}

/// Per-cube time on task: first grasp of the cube to the release that placed it.
pub fn cube_times_on_task(events: &[WorldEvent]) -> Vec<(ObjectId, f64)> {
    let mut out = Vec::new();
    for e in events {
        if let WorldEventKind::Placed { cube, .. } = e.kind {
            let grab = events.iter().find_map(|g| match g.kind {
                WorldEventKind::Grasp { cube: c } if c == cube => Some(g.time),
                _ => None,
            });
            if let Some(Ok(tot)) = grab.map(|g| time_on_task(g, e.time)) {
                out.push((cube, tot));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        World::new(ArmModel::panda(), Scene::standard())
    }

    fn floating_cube(state: &mut WorldState, id: ObjectId, z: f64) {
        let o = state.objects.iter_mut().find(|o| o.id == id).unwrap();
        o.pose.position.z = z;
    }

    #[test]
    fn standard_scene_is_valid() {
        let scene = Scene::standard();
        scene.validate_standard().unwrap();
        let order: Vec<_> = scene
            .script
            .steps
            .iter()
            .map(|s| scene.object(s.cube).unwrap().color_tag)
            .collect();
        assert_eq!(order, [ColorTag::Grey, ColorTag::Green, ColorTag::Blue, ColorTag::Purple]);
    }

    #[test]
    fn free_fall_one_step() {
        let w = world();
        let mut s = w.initial_state(&w.arm.ready_state());
        floating_cube(&mut s, 1, 0.5);
        let out = w.step(&s, &s.robot_joints, 0.0, 0.01);
        let v = out.state.object(1).unwrap().velocity.z;
        assert!((v - -0.0981).abs() < 1e-15);
    }

    #[test]
    fn resting_cube_stays_put() {
        let w = world();
        let mut s = w.initial_state(&w.arm.ready_state());
        for _ in 0..100 {
            s = w.step(&s, &s.robot_joints, 0.0, 0.001).state;
            let c = s.object(1).unwrap();
            assert_eq!(c.velocity.z, 0.0);
            assert!((c.pose.position.z - 0.025).abs() < 1e-12);
        }
    }

    #[test]
    fn landing_resolves_penetration() {
        let w = world();
        let mut s = w.initial_state(&w.arm.ready_state());
        floating_cube(&mut s, 2, 0.3);
        let mut impacts = 0;
        for _ in 0..600 {
            let out = w.step(&s, &s.robot_joints, 0.0, 0.005);
            impacts += out
                .events
                .iter()
                .filter(|e| matches!(e.kind, WorldEventKind::Impact { cube: 2, .. }))
                .count();
            s = out.state;
            assert!(s.object(2).unwrap().pose.position.z >= 0.025 - 1e-3);
        }
        assert_eq!(impacts, 1);
        assert!(s.contacts.iter().any(|c| c.cube == 2 && c.other == Body::Floor));
    }

    #[test]
    fn gate_boundary_is_closed() {
        let mut target = Scene::standard().object(11).unwrap().clone();
        target.pose.position = Vector3::zeros();
        target.half_extents = Vector3::repeat(0.25);
        let mut cube = Scene::standard().object(1).unwrap().clone();
        cube.pose.position = Vector3::zeros();
        assert!(placement_gate(&cube, &target, 0.25));
        cube.pose.position = Vector3::new(0.5, -0.5, 0.5);
        assert!(placement_gate(&cube, &target, 0.25));
        cube.pose.position.x = 0.5 + f64::EPSILON;
        assert!(!placement_gate(&cube, &target, 0.25));
        cube.pose.position = Vector3::new(1.0, 0.0, 0.0);
        assert!(!placement_gate(&cube, &target, 0.02));
    }

    #[test]
    fn metric_formulas() {
        assert_eq!(placement_accuracy(&Vector3::new(3.0, 4.0, 9.0), &Vector3::zeros()), 5.0);
        assert_eq!(placement_accuracy(&Vector3::new(0.1, 0.2, 0.0), &Vector3::new(0.1, 0.2, 0.3)), 0.0);
        assert_eq!(time_on_task(2.0, 9.5).unwrap(), 7.5);
        assert_eq!(time_on_task(3.0, 3.0).unwrap(), 0.0);
        assert!(matches!(time_on_task(5.0, 4.0), Err(TaskError::InvalidInterval { .. })));
    }
}
