//! Deterministic teleoperation-delay simulation core.
//!
//! Everything here is `no_std` + `alloc`: pure functions and owned state
//! machines driven by an integer-millisecond simulation clock. File formats,
//! networking and the CLI live in the `telesim` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod delay;
pub mod haptics;
pub mod kinematics;
pub mod operator;
pub mod session;
pub mod world;

pub use kinematics::{ArmModel, JointState, KinematicsError, Pose};
