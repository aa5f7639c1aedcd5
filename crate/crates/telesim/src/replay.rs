//! Replaying logged trials.
//!
//! Scripted trials are re-run from the logged config and seed. Live trials
//! are re-run by feeding the recorded operator inputs back at their original
//! ticks. Either way the recomputed simulation rows must match the log.

use std::fmt::Debug;
use std::path::{Path, PathBuf};
use std::{fmt, fs};

use telesim_core::delay::Millis;
use telesim_core::operator::{OperatorPolicy, ScriptedOperator};
use telesim_core::session::{
    run_scripted, run_session, Control, EndReason, OperatorSpec, PlaybackInput, SessionError, SessionObserver,
    TrialConfig, TrialLog, LOG_FORMAT_VERSION,
};
use telesim_core::world::World;

use crate::logio::{read_log, write_log, LogError};

/// Differences reported per table before giving up on it.
const MAX_DIFFS_PER_TABLE: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("log format version {found} cannot be replayed by this build (version {supported})")]
    Version { found: u32, supported: u32 },
    #[error("replay failed: {0}")]
    Session(#[from] SessionError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayMode {
    /// Scripted operator re-run from its seed.
    Rerun,
    /// Recorded inputs fed back in.
    Playback,
}

impl fmt::Display for ReplayMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReplayMode::Rerun => "scripted re-run",
            ReplayMode::Playback => "input playback",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowDiff {
    pub table: &'static str,
    pub row: usize,
    pub logged: Option<String>,
    pub replayed: Option<String>,
}

impl fmt::Display for RowDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |s: &Option<String>| s.clone().unwrap_or_else(|| "<absent>".into());
        write!(f, "{} row {}:\n  logged:   {}\n  replayed: {}", self.table, self.row, show(&self.logged), show(&self.replayed))
    }
}

#[derive(Debug, Clone)]
pub struct Replay {
    pub mode: ReplayMode,
    /// The recomputed log, carrying the original pupil and questionnaire rows.
    pub log: TrialLog,
    pub diffs: Vec<RowDiff>,
}

impl Replay {
    pub fn is_identical(&self) -> bool {
        self.diffs.is_empty()
    }
}

/// Ends the re-run exactly where the original stopped.
struct EndAt {
    end_ms: Millis,
    reason: EndReason,
    marker: Option<String>,
}

impl SessionObserver for EndAt {
    fn on_tick(&mut self, now: Millis) -> Control {
        if now < self.end_ms {
            return Control::Continue;
        }
        match self.reason {
            EndReason::Aborted => Control::Abort(self.marker.clone().unwrap_or_default()),
            _ => Control::Stop,
        }
    }
}

fn diff_table<T: PartialEq + Debug>(table: &'static str, logged: &[T], replayed: &[T], out: &mut Vec<RowDiff>) {
    let mut found = 0;
    for i in 0..logged.len().max(replayed.len()) {
        let (a, b) = (logged.get(i), replayed.get(i));
        if a != b {
            out.push(RowDiff {
                table,
                row: i,
                logged: a.map(|r| format!("{r:?}")),
                replayed: b.map(|r| format!("{r:?}")),
            });
            found += 1;
            if found == MAX_DIFFS_PER_TABLE {
                return;
            }
        }
    }
}

/// Every simulation row that differs between two logs.
pub fn diff_logs(logged: &TrialLog, replayed: &TrialLog) -> Vec<RowDiff> {
    let mut d = Vec::new();
    diff_table("header", std::slice::from_ref(&logged.header), std::slice::from_ref(&replayed.header), &mut d);
    diff_table("ticks", &logged.ticks, &replayed.ticks, &mut d);
    diff_table("channel", &logged.channel, &replayed.channel, &mut d);
    diff_table("inputs", &logged.inputs, &replayed.inputs, &mut d);
    diff_table("visual", &logged.visual, &replayed.visual, &mut d);
    diff_table("events", &logged.events, &replayed.events, &mut d);
    d
}

pub fn replay(log: &TrialLog) -> Result<Replay, ReplayError> {
    let h = &log.header;
    if h.format_version != LOG_FORMAT_VERSION {
        return Err(ReplayError::Version { found: h.format_version, supported: LOG_FORMAT_VERSION });
    }
    let config = &h.config;
    let natural_end = matches!(h.end_reason, EndReason::Completed | EndReason::DurationCap);
    let (mode, mut out) = match &config.operator {
        OperatorSpec::Scripted(_) if natural_end => (ReplayMode::Rerun, run_scripted(config)?),
        spec => {
            let mut end = EndAt { end_ms: h.end_ms, reason: h.end_reason, marker: h.aborted.clone() };
            if natural_end {
                end.end_ms = Millis::MAX;
            }
            let out = match spec {
                OperatorSpec::Scripted(policy) => run_session(config, &mut scripted_operator(config, policy), &mut end)?,
                OperatorSpec::Live { .. } => {
                    let mut input = PlaybackInput::new(log.inputs.iter().map(|r| r.input).collect());
                    run_session(config, &mut input, &mut end)?
                }
            };
            let mode = if matches!(spec, OperatorSpec::Live { .. }) { ReplayMode::Playback } else { ReplayMode::Rerun };
            (mode, out)
        }
    };
    out.pupil = log.pupil.clone();
    out.post = log.post;
    let diffs = diff_logs(log, &out);
    Ok(Replay { mode, log: out, diffs })
}

/// The scripted operator a trial starts with.
pub fn scripted_operator(config: &TrialConfig, policy: &OperatorPolicy) -> ScriptedOperator {
    let world = World::new(config.arm.clone(), config.scene.clone());
    let start = world.initial_state(&world.arm.ready_state()).end_effector;
    ScriptedOperator::new(policy.clone(), &config.scene, start)
}

/// Files whose bytes differ between two log directories.
pub fn differing_files(a: &Path, b: &Path) -> Result<Vec<String>, ReplayError> {
    let list = |d: &Path| -> Result<Vec<String>, ReplayError> {
        let io = |source| ReplayError::Io { path: d.to_path_buf(), source };
        let mut v = Vec::new();
        for e in fs::read_dir(d).map_err(io)? {
            v.push(e.map_err(io)?.file_name().to_string_lossy().into_owned());
        }
        v.sort();
        Ok(v)
    };
    let (la, lb) = (list(a)?, list(b)?);
    let mut names: Vec<String> = la.iter().chain(&lb).cloned().collect();
    names.sort();
    names.dedup();
    let mut out = Vec::new();
    for n in names {
        let (pa, pb) = (a.join(&n), b.join(&n));
        if fs::read(&pa).ok() != fs::read(&pb).ok() {
            out.push(n);
        }
    }
    Ok(out)
}

/// Replays the log in `dir`, writes the recomputed log to `scratch` and
/// returns the replay with the files whose bytes differ.
pub fn replay_dir(dir: &Path, scratch: &Path) -> Result<(Replay, Vec<String>), ReplayError> {
    let log = read_log(dir)?;
    let r = replay(&log)?;
    write_log(scratch, &r.log)?;
    let files = differing_files(dir, scratch)?;
    Ok((r, files))
}
