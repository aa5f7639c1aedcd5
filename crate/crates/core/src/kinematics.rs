//! Serial 7-DOF arm model: forward kinematics, damped least-squares IK and
//! joint-limit handling.
//!
//! Joints are described URDF-style: each joint has a fixed origin transform
//! relative to its parent frame (translation plus roll/pitch/yaw) followed by a
//! revolute rotation about a unit axis expressed in the joint frame. The tool
//! transform maps the last joint frame to the tool centre point (TCP).
//!
//! The default model follows the published Panda kinematic table. Joint 4's
//! upper limit is widened from -0.0698 to 0.0 so that the all-zero
//! configuration is admissible and can serve as the documented home pose.

use alloc::string::String;
use core::f64::consts::FRAC_PI_2;
use core::f64::consts::FRAC_PI_4;

use nalgebra::{
    Isometry3, Matrix6, SMatrix, SVector, Translation3, Unit, UnitQuaternion, Vector3, Vector6,
};
use serde::{Deserialize, Serialize};

pub const JOINT_COUNT: usize = 7;
pub const MAX_GRIPPER_APERTURE: f64 = 0.08;

type Jacobian = SMatrix<f64, 6, JOINT_COUNT>;
type JointVector = SVector<f64, JOINT_COUNT>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KinematicsError {
    #[error("joint {joint} angle {angle} outside limits [{min}, {max}]")]
    JointLimit {
        joint: usize,
        angle: f64,
        min: f64,
        max: f64,
    },
    #[error("gripper aperture {aperture} outside [0, {max}]")]
    Aperture { aperture: f64, max: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(
        "IK did not converge after {iterations} iterations \
         (position residual {position_residual} m, orientation residual {orientation_residual} rad)"
    )]
    ConvergenceFailure {
        iterations: usize,
        position_residual: f64,
        orientation_residual: f64,
        best: JointState,
    },
    #[error("invalid arm model: {0}")]
    InvalidModel(String),
}

/// Position plus unit-quaternion orientation in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
        }
    }

    pub fn from_position(position: Vector3<f64>) -> Self {
        Self {
            position,
            orientation: UnitQuaternion::identity(),
        }
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Self {
            position: iso.translation.vector,
            orientation: iso.rotation,
        }
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.position), self.orientation)
    }

    /// Builds a pose from a position and roll/pitch/yaw (URDF convention).
    pub fn from_xyz_rpy(xyz: [f64; 3], rpy: [f64; 3]) -> Self {
        Self {
            position: Vector3::from(xyz),
            orientation: UnitQuaternion::from_euler_angles(rpy[0], rpy[1], rpy[2]),
        }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    pub min: f64,
    pub max: f64,
}

impl JointLimits {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, angle: f64) -> bool {
        angle >= self.min && angle <= self.max
    }

    pub fn clamp(&self, angle: f64) -> f64 {
        angle.clamp(self.min, self.max)
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.min + self.max)
    }
}

/// Arm configuration at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub angles: [f64; JOINT_COUNT],
    /// Finger separation in metres.
    pub gripper_aperture: f64,
    /// Seconds since trial start.
    pub timestamp: f64,
}

impl JointState {
    pub fn new(angles: [f64; JOINT_COUNT]) -> Self {
        Self {
            angles,
            gripper_aperture: MAX_GRIPPER_APERTURE,
            timestamp: 0.0,
        }
    }

    fn vector(&self) -> JointVector {
        JointVector::from_column_slice(&self.angles)
    }
}

/// One revolute joint and the fixed link transform leading to it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Link {
    /// Translation from the parent joint frame, metres.
    pub offset: [f64; 3],
    /// Fixed roll/pitch/yaw of the joint frame relative to its parent.
    pub rpy: [f64; 3],
    /// Rotation axis in the joint frame.
    pub axis: [f64; 3],
    pub limits: JointLimits,
}

impl Link {
    fn origin(&self) -> Isometry3<f64> {
        Pose::from_xyz_rpy(self.offset, self.rpy).to_isometry()
    }

    fn unit_axis(&self) -> Unit<Vector3<f64>> {
        Unit::new_normalize(Vector3::from(self.axis))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmModel {
    pub links: [Link; JOINT_COUNT],
    /// Last joint frame to TCP.
    pub tool: Pose,
    pub base_pose: Pose,
    pub max_aperture: f64,
}

impl Default for ArmModel {
    fn default() -> Self {
        Self::panda()
    }
}

impl ArmModel {
    /// Panda-like default kinematic table, TCP 0.1034 m beyond the flange.
    pub fn panda() -> Self {
        let z = [0.0, 0.0, 1.0];
        let link = |offset: [f64; 3], roll: f64, min: f64, max: f64| Link {
            offset,
            rpy: [roll, 0.0, 0.0],
            axis: z,
            limits: JointLimits::new(min, max),
        };
        Self {
            links: [
                link([0.0, 0.0, 0.333], 0.0, -2.8973, 2.8973),
                link([0.0, 0.0, 0.0], -FRAC_PI_2, -1.7628, 1.7628),
                link([0.0, -0.316, 0.0], FRAC_PI_2, -2.8973, 2.8973),
                link([0.0825, 0.0, 0.0], FRAC_PI_2, -3.0718, 0.0),
                link([-0.0825, 0.384, 0.0], -FRAC_PI_2, -2.8973, 2.8973),
                link([0.0, 0.0, 0.0], FRAC_PI_2, -0.0175, 3.7525),
                link([0.088, 0.0, 0.0], FRAC_PI_2, -2.8973, 2.8973),
            ],
            tool: Pose::from_xyz_rpy([0.0, 0.0, 0.107 + 0.1034], [0.0, 0.0, -FRAC_PI_4]),
            base_pose: Pose::identity(),
            max_aperture: MAX_GRIPPER_APERTURE,
        }
    }

    /// The "ready" configuration used as a neutral IK seed: gripper pointing down
    /// in front of the base.
    pub fn ready_state(&self) -> JointState {
        let mut angles = [
            0.0,
            -FRAC_PI_4,
            0.0,
            -3.0 * FRAC_PI_4,
            0.0,
            FRAC_PI_2,
            FRAC_PI_4,
        ];
        for (a, link) in angles.iter_mut().zip(&self.links) {
            *a = link.limits.clamp(*a);
        }
        JointState::new(angles)
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        for (i, link) in self.links.iter().enumerate() {
            let l = link.limits;
            if !(l.min.is_finite() && l.max.is_finite()) || l.min >= l.max {
                return Err(KinematicsError::InvalidModel(alloc::format!(
                    "joint {i} has degenerate limits [{}, {}]",
                    l.min,
                    l.max
                )));
            }
            let axis = Vector3::from(link.axis);
            if !(axis.norm() > 1e-9) {
                return Err(KinematicsError::InvalidModel(alloc::format!(
                    "joint {i} has a zero rotation axis"
                )));
            }
            if link.offset.iter().chain(&link.rpy).any(|v| !v.is_finite()) {
                return Err(KinematicsError::NonFinite("link parameters"));
            }
        }
        if !(self.max_aperture > 0.0) {
            return Err(KinematicsError::InvalidModel("max_aperture must be positive".into()));
        }
        Ok(())
    }

    /// Upper bound on the distance from the first joint to the TCP.
    pub fn reach(&self) -> f64 {
        let links: f64 = self.links[1..]
            .iter()
            .map(|l| Vector3::from(l.offset).norm())
            .sum();
        links + self.tool.position.norm()
    }

    pub fn check_limits(&self, joints: &JointState) -> Result<(), KinematicsError> {
        for (joint, (&angle, link)) in joints.angles.iter().zip(&self.links).enumerate() {
            if !angle.is_finite() {
                return Err(KinematicsError::NonFinite("joint angles"));
            }
            if !link.limits.contains(angle) {
                return Err(KinematicsError::JointLimit {
                    joint,
                    angle,
                    min: link.limits.min,
                    max: link.limits.max,
                });
            }
        }
        let a = joints.gripper_aperture;
        if !(0.0..=self.max_aperture).contains(&a) {
            return Err(KinematicsError::Aperture {
                aperture: a,
                max: self.max_aperture,
            });
        }
        Ok(())
    }

    /// Projects every angle onto its limit interval and the aperture onto `[0, max]`.
    pub fn clamp(&self, joints: &JointState) -> JointState {
        let mut out = *joints;
        for (a, link) in out.angles.iter_mut().zip(&self.links) {
            *a = link.limits.clamp(*a);
        }
        out.gripper_aperture = out.gripper_aperture.clamp(0.0, self.max_aperture);
        out
    }

    /// World frame of every joint (before its own rotation) and the TCP.
    fn frames(&self, angles: &[f64; JOINT_COUNT]) -> ([Isometry3<f64>; JOINT_COUNT], Isometry3<f64>) {
        let mut frames = [Isometry3::identity(); JOINT_COUNT];
        let mut current = self.base_pose.to_isometry();
        for (i, link) in self.links.iter().enumerate() {
            current *= link.origin();
            frames[i] = current;
            current *= UnitQuaternion::from_axis_angle(&link.unit_axis(), angles[i]);
        }
        (frames, current * self.tool.to_isometry())
    }

    fn tcp(&self, angles: &[f64; JOINT_COUNT]) -> Isometry3<f64> {
        self.frames(angles).1
    }

    fn jacobian(&self, angles: &[f64; JOINT_COUNT]) -> (Jacobian, Isometry3<f64>) {
        let (frames, tcp) = self.frames(angles);
        let p_ee = tcp.translation.vector;
        let mut jac = Jacobian::zeros();
        for (i, (frame, link)) in frames.iter().zip(&self.links).enumerate() {
            let z = frame.rotation * link.unit_axis().into_inner();
            let lin = z.cross(&(p_ee - frame.translation.vector));
            jac.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
            jac.fixed_view_mut::<3, 1>(3, i).copy_from(&z);
        }
        (jac, tcp)
    }
}

/// Region in which IK is expected to converge from [`ArmModel::ready_state`]:
/// a shell in front of the base with the gripper within `max_tilt` of the
/// ready orientation. Targets close to the base axis need a fully folded
/// elbow and are excluded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub min_radius: f64,
    pub max_radius: f64,
    pub max_abs_y: f64,
    pub min_z: f64,
    pub max_z: f64,
    /// Radians.
    pub max_tilt: f64,
}

impl Default for Workspace {
    fn default() -> Self {
        Self {
            min_radius: 0.30,
            max_radius: 0.75,
            max_abs_y: 0.45,
            min_z: 0.0,
            max_z: 0.6,
            max_tilt: 30f64.to_radians(),
        }
    }
}

impl Workspace {
    pub fn contains(&self, model: &ArmModel, pose: &Pose) -> bool {
        let p = pose.position - model.base_pose.position;
        let radius = libm::hypot(p.x, p.y);
        let nominal = Pose::from_isometry(&model.tcp(&model.ready_state().angles));
        (self.min_radius..=self.max_radius).contains(&radius)
            && p.x > 0.0
            && p.y.abs() <= self.max_abs_y
            && (self.min_z..=self.max_z).contains(&p.z)
            && pose.orientation.angle_to(&nominal.orientation) <= self.max_tilt
    }
}

/// End-effector (TCP) pose for a joint configuration inside the limits.
pub fn forward_kinematics(model: &ArmModel, joints: &JointState) -> Result<Pose, KinematicsError> {
    model.check_limits(joints)?;
    Ok(Pose::from_isometry(&model.tcp(&joints.angles)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IkSettings {
    pub damping: f64,
    pub max_iterations: usize,
    pub position_tolerance: f64,
    pub orientation_tolerance: f64,
    /// Metres per radian used to fold orientation error into the scalar residual.
    pub orientation_weight: f64,
    /// Gain of the null-space pull toward mid-range joint angles.
    pub nullspace_gain: f64,
    /// Largest joint-space step norm per iteration, radians.
    pub max_step: f64,
}

impl Default for IkSettings {
    fn default() -> Self {
        Self {
            damping: 0.05,
            max_iterations: 100,
            position_tolerance: 1e-3,
            orientation_tolerance: 1e-2,
            orientation_weight: 0.3,
            nullspace_gain: 0.1,
            max_step: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residual {
    pub position: f64,
    pub orientation: f64,
    pub error: Vector6<f64>,
}

impl Residual {
    fn between(current: &Isometry3<f64>, target: &Pose) -> Self {
        let dp = target.position - current.translation.vector;
        let dr = (target.orientation * current.rotation.inverse()).scaled_axis();
        let mut error = Vector6::zeros();
        error.fixed_rows_mut::<3>(0).copy_from(&dp);
        error.fixed_rows_mut::<3>(3).copy_from(&dr);
        Self {
            position: dp.norm(),
            orientation: dr.norm(),
            error,
        }
    }

    fn scalar(&self, settings: &IkSettings) -> f64 {
        let o = self.orientation * settings.orientation_weight;
        libm::sqrt(self.position * self.position + o * o)
    }

    fn converged(&self, settings: &IkSettings) -> bool {
        self.position < settings.position_tolerance && self.orientation < settings.orientation_tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkSolution {
    pub joints: JointState,
    pub iterations: usize,
    pub position_residual: f64,
    pub orientation_residual: f64,
    /// Scalar residual after the seed and after every accepted step.
    pub residual_history: alloc::vec::Vec<f64>,
}

/// Damped least-squares IK with default settings.
pub fn solve_ik(model: &ArmModel, target: &Pose, seed: &JointState) -> Result<JointState, KinematicsError> {
    solve_ik_with(model, target, seed, &IkSettings::default()).map(|s| s.joints)
}

pub fn solve_ik_with(
    model: &ArmModel,
    target: &Pose,
    seed: &JointState,
    settings: &IkSettings,
) -> Result<IkSolution, KinematicsError> {
    if target.position.iter().any(|v| !v.is_finite()) || !target.orientation.coords.iter().all(|v| v.is_finite()) {
        return Err(KinematicsError::NonFinite("IK target"));
    }
    let start = model.clamp(seed);
    let mut q = start.vector();
    let mut residual = Residual::between(&model.tcp(&start.angles), target);
    let mut history = alloc::vec![residual.scalar(settings)];

    let finish = |q: &JointVector, r: &Residual, iterations: usize, history| {
        let mut joints = start;
        joints.angles.copy_from_slice(q.as_slice());
        IkSolution {
            joints,
            iterations,
            position_residual: r.position,
            orientation_residual: r.orientation,
            residual_history: history,
        }
    };

    if residual.converged(settings) {
        let mut sol = finish(&q, &residual, 0, history);
        sol.joints = *seed;
        if model.check_limits(seed).is_err() {
            sol.joints = start;
        }
        return Ok(sol);
    }

    let base = model.base_pose.position + model.links[0].offset[2] * Vector3::z();
    if (target.position - base).norm() > model.reach() {
        let best = finish(&q, &residual, 0, history).joints;
        return Err(KinematicsError::ConvergenceFailure {
            iterations: 0,
            position_residual: residual.position,
            orientation_residual: residual.orientation,
            best,
        });
    }

    let mid = JointVector::from_iterator(model.links.iter().map(|l| l.limits.mid()));
    let mut lambda = settings.damping;
    let mut gain = settings.nullspace_gain;
    let mut angles = [0.0; JOINT_COUNT];

    for iteration in 1..=settings.max_iterations {
        angles.copy_from_slice(q.as_slice());
        let (full_jac, _) = model.jacobian(&angles);
        let mut full_jac = full_jac;
        full_jac.fixed_rows_mut::<3>(3).scale_mut(settings.orientation_weight);
        let mut error = residual.error;
        error.fixed_rows_mut::<3>(3).scale_mut(settings.orientation_weight);
        let Some(mut dq) = damped_step(&full_jac, &error, &q, &mid, lambda, gain, model) else {
            lambda *= 4.0;
            continue;
        };
        let norm = dq.norm();
        if norm > settings.max_step {
            dq *= settings.max_step / norm;
        }

        let mut candidate = q + dq;
        for (v, link) in candidate.iter_mut().zip(&model.links) {
            *v = link.limits.clamp(*v);
        }
        angles.copy_from_slice(candidate.as_slice());
        let next = Residual::between(&model.tcp(&angles), target);

        if next.scalar(settings) < residual.scalar(settings) {
            q = candidate;
            residual = next;
            history.push(residual.scalar(settings));
            lambda = (lambda * 0.5).max(settings.damping);
            if residual.converged(settings) {
                return Ok(finish(&q, &residual, iteration, history));
            }
        } else {
            lambda *= 4.0;
            gain *= 0.5;
        }
    }

    let best = finish(&q, &residual, settings.max_iterations, history).joints;
    Err(KinematicsError::ConvergenceFailure {
        iterations: settings.max_iterations,
        position_residual: residual.position,
        orientation_residual: residual.orientation,
        best,
    })
}

/// One damped least-squares step with a null-space pull toward `mid`.
///
/// A joint whose step would cross its limit is pinned to move exactly onto the
/// limit, its contribution is removed from the task error, and the step is
/// recomputed for the remaining joints.
fn damped_step(
    full_jac: &Jacobian,
    error: &Vector6<f64>,
    q: &JointVector,
    mid: &JointVector,
    lambda: f64,
    gain: f64,
    model: &ArmModel,
) -> Option<JointVector> {
    let mut jac = *full_jac;
    let mut pinned = JointVector::zeros();
    let mut active = [true; JOINT_COUNT];
    let mut err = *error;
    for _ in 0..=JOINT_COUNT {
        let jjt = jac * jac.transpose() + Matrix6::identity() * (lambda * lambda);
        let chol = jjt.cholesky()?;
        let mut dq = jac.transpose() * chol.solve(&err);
        if gain > 0.0 {
            // Projector from the (nearly) undamped pseudo-inverse so the pull stays out of task space.
            let exact = jac * jac.transpose() + Matrix6::identity() * 1e-10;
            let Some(exact) = exact.cholesky() else {
                return Some(dq);
            };
            let null = SMatrix::<f64, JOINT_COUNT, JOINT_COUNT>::identity() - jac.transpose() * exact.solve(&jac);
            let mut pull = (mid - q) * gain;
            for (p, &on) in pull.iter_mut().zip(&active) {
                if !on {
                    *p = 0.0;
                }
            }
            dq += null * pull;
        }
        let mut saturated = false;
        for (i, link) in model.links.iter().enumerate() {
            if !active[i] {
                dq[i] = pinned[i];
                continue;
            }
            let next = q[i] + dq[i];
            let bound = if next < link.limits.min {
                link.limits.min
            } else if next > link.limits.max {
                link.limits.max
            } else {
                continue;
            };
            active[i] = false;
            pinned[i] = bound - q[i];
            err -= full_jac.column(i) * pinned[i];
            jac.column_mut(i).fill(0.0);
            saturated = true;
        }
        if !saturated {
            return Some(dq);
        }
    }
    Some(pinned)
}
