//! Host side of the teleoperation-delay simulator: trial configuration files,
//! CSV logs and replay, synthetic pupil traces, post-hoc analysis, the wire
//! protocol and the live session service.

pub mod analysis;
pub mod config;
pub mod logio;
pub mod pupil;
pub mod replay;
pub mod report;
pub mod service;
pub mod wire;
