//! Trial logs on disk.
//!
//! A log is a directory:
//!
//! | file          | contents                                                   |
//! |---------------|------------------------------------------------------------|
//! | `meta.toml`   | format version, full trial config, end time and reason     |
//! | `ticks.csv`   | one row per 1 ms tick: joints, TCP pose, grasp, force      |
//! | `channel.csv` | every delay-channel event: emit, due and delivery times    |
//! | `inputs.csv`  | operator inputs with their command-channel sequence id     |
//! | `visual.csv`  | every visual frame sent, with its delivery time            |
//! | `events.csv`  | grasps, releases, placements, confirmations, final poses   |
//! | `pupil.csv`   | 90 Hz pupil diameter and displayed luminance               |
//! | `post.csv`    | post-trial questionnaire (header only when not submitted)  |
//!
//! Floats are written as the shortest decimal that parses back to the same
//! value, so write, read, write is byte-identical. Empty cells are missing
//! values.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use telesim_core::kinematics::{JointState, Pose};
use telesim_core::operator::{Confirmation, OperatorInput};
use telesim_core::session::{
    ChannelRow, EventRow, InputRow, LogEvent, LogHeader, PupilRow, Questionnaire, TickRow, TrialLog, VisualRow,
    LOG_FORMAT_VERSION,
};
use telesim_core::world::{FramePose, ObjectId, VisualFrame};

pub const META_FILE: &str = "meta.toml";

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: u64, message: String },
    #[error("{}: {message}", path.display())]
    Meta { path: PathBuf, message: String },
    #[error("{}: log format version {found} is not supported (this build reads version {supported})", path.display())]
    Version { path: PathBuf, found: u32, supported: u32 },
    #[error("{}: inconsistent log: {message}", path.display())]
    Invariant { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LogError + '_ {
    move |source| LogError::Io { path: path.to_path_buf(), source }
}

// ---- cell formatting ----------------------------------------------------

fn f(x: f64) -> String {
    format!("{x:?}")
}

fn opt<T: Display>(x: Option<T>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

fn optf(x: Option<f64>) -> String {
    x.map_or_else(String::new, f)
}

/// Serde name of a unit enum variant.
fn tag<T: Serialize>(x: &T) -> String {
    match serde_json::to_value(x) {
        Ok(serde_json::Value::String(s)) => s,
        other => panic!("not a unit variant: {other:?}"),
    }
}

/// Cursor over one CSV record that reports errors with file, line and column.
struct Cells<'a> {
    path: &'a Path,
    header: &'a [String],
    record: &'a csv::StringRecord,
    line: u64,
    next: usize,
}

impl<'a> Cells<'a> {
    fn err(&self, col: usize, message: impl Display) -> LogError {
        let name = self.header.get(col).map_or("?", String::as_str);
        LogError::Parse { path: self.path.to_path_buf(), line: self.line, message: format!("column `{name}`: {message}") }
    }

    fn raw(&mut self) -> Result<(usize, &'a str), LogError> {
        let col = self.next;
        self.next += 1;
        match self.record.get(col) {
            Some(s) => Ok((col, s)),
            None => Err(self.err(col, "missing cell")),
        }
    }

    fn parse<T: FromStr>(&mut self) -> Result<T, LogError>
    where
        T::Err: Display,
    {
        let (col, s) = self.raw()?;
        s.parse::<T>().map_err(|e| self.err(col, format!("`{s}`: {e}")))
    }

    fn opt<T: FromStr>(&mut self) -> Result<Option<T>, LogError>
    where
        T::Err: Display,
    {
        let (col, s) = self.raw()?;
        if s.is_empty() {
            return Ok(None);
        }
        s.parse::<T>().map(Some).map_err(|e| self.err(col, format!("`{s}`: {e}")))
    }

    fn tag<T: DeserializeOwned>(&mut self) -> Result<T, LogError> {
        let (col, s) = self.raw()?;
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| self.err(col, format!("unknown value `{s}`")))
    }

    fn floats<const N: usize>(&mut self) -> Result<[f64; N], LogError> {
        let mut out = [0.0; N];
        for x in &mut out {
            *x = self.parse()?;
        }
        Ok(out)
    }

    fn pose(&mut self) -> Result<Pose, LogError> {
        let [x, y, z, w, i, j, k] = self.floats::<7>()?;
        Ok(Pose {
            position: Vector3::new(x, y, z),
            orientation: UnitQuaternion::new_unchecked(Quaternion::new(w, i, j, k)),
        })
    }

    fn finish(&self) -> Result<(), LogError> {
        if self.record.len() != self.next {
            return Err(LogError::Parse {
                path: self.path.to_path_buf(),
                line: self.line,
                message: format!("expected {} cells, found {}", self.next, self.record.len()),
            });
        }
        Ok(())
    }
}

fn pose_cells(p: &Pose, out: &mut Vec<String>) {
    let q = p.orientation.quaternion();
    out.extend([p.position.x, p.position.y, p.position.z, q.w, q.i, q.j, q.k].map(f));
}

fn names(prefix: &str, suffixes: &[&str]) -> Vec<String> {
    suffixes.iter().map(|s| format!("{prefix}{s}")).collect()
}

const POSE: [&str; 7] = ["x", "y", "z", "qw", "qi", "qj", "qk"];
const JOINTS: [&str; 7] = ["q1", "q2", "q3", "q4", "q5", "q6", "q7"];

// ---- tables --------------------------------------------------------------

fn tick_header() -> Vec<String> {
    let mut h = vec!["time_ms".to_string()];
    h.extend(JOINTS.map(String::from));
    h.push("aperture".into());
    h.extend(names("ee_", &POSE));
    h.extend(
        ["grasped", "script_index", "grip_force", "command_seq", "force_x", "force_y", "force_z", "torque_z", "clamped"]
            .map(String::from),
    );
    h
}

fn tick_row(r: &TickRow) -> Vec<String> {
    let mut v = vec![r.time_ms.to_string()];
    v.extend(r.joints.map(f));
    v.push(f(r.aperture));
    v.extend(r.ee_position.map(f));
    v.extend(r.ee_orientation.map(f));
    v.push(opt(r.grasped));
    v.push(r.script_index.to_string());
    v.push(f(r.grip_force));
    v.push(opt(r.command_seq));
    v.extend(r.force.map(f));
    v.push(f(r.torque_z));
    v.push(r.clamped.to_string());
    v
}

fn parse_tick(c: &mut Cells) -> Result<TickRow, LogError> {
    Ok(TickRow {
        time_ms: c.parse()?,
        joints: c.floats()?,
        aperture: c.parse()?,
        ee_position: c.floats()?,
        ee_orientation: c.floats()?,
        grasped: c.opt()?,
        script_index: c.parse()?,
        grip_force: c.parse()?,
        command_seq: c.opt()?,
        force: c.floats()?,
        torque_z: c.parse()?,
        clamped: c.parse()?,
    })
}

const CHANNEL_HEADER: [&str; 5] = ["sequence", "channel", "emit_ms", "due_ms", "delivered_ms"];

fn channel_row(r: &ChannelRow) -> Vec<String> {
    vec![r.sequence.to_string(), tag(&r.channel), r.emit_ms.to_string(), r.due_ms.to_string(), opt(r.delivered_ms)]
}

fn parse_channel(c: &mut Cells) -> Result<ChannelRow, LogError> {
    Ok(ChannelRow { sequence: c.parse()?, channel: c.tag()?, emit_ms: c.parse()?, due_ms: c.parse()?, delivered_ms: c.opt()? })
}

const INPUT_HEADER: [&str; 10] =
    ["sequence", "timestamp_ms", "dt_ms", "dx", "dy", "dz", "rx", "ry", "rz", "grip_force"];

fn input_row(r: &InputRow) -> Vec<String> {
    let i = &r.input;
    let mut v = vec![r.sequence.to_string(), i.timestamp.to_string(), i.dt_ms.to_string()];
    v.extend([i.translation.x, i.translation.y, i.translation.z, i.rotation.x, i.rotation.y, i.rotation.z].map(f));
    v.push(f(i.grip_force));
    v
}

fn parse_input(c: &mut Cells) -> Result<InputRow, LogError> {
    let sequence = c.parse()?;
    let timestamp = c.parse()?;
    let dt_ms = c.parse()?;
    let [dx, dy, dz, rx, ry, rz] = c.floats::<6>()?;
    Ok(InputRow {
        sequence,
        input: OperatorInput {
            timestamp,
            dt_ms,
            translation: Vector3::new(dx, dy, dz),
            rotation: Vector3::new(rx, ry, rz),
            grip_force: c.parse()?,
        },
    })
}

fn visual_header(cubes: &[ObjectId]) -> Vec<String> {
    let mut h: Vec<String> = ["sequence", "trigger", "delivered_ms", "sim_time_ms"].map(String::from).to_vec();
    h.extend(JOINTS.map(String::from));
    h.push("aperture".into());
    h.push("joints_t".into());
    h.extend(names("ee_", &POSE));
    h.push("grasped".into());
    h.push("script_index".into());
    for id in cubes {
        h.extend(names(&format!("cube{id}_"), &POSE));
    }
    h
}

fn visual_row(r: &VisualRow, cubes: &[ObjectId]) -> Vec<String> {
    let fr = &r.frame;
    let mut v = vec![r.sequence.to_string(), tag(&r.trigger), opt(r.delivered_ms), fr.sim_time_ms.to_string()];
    v.extend(fr.joints.angles.map(f));
    v.push(f(fr.joints.gripper_aperture));
    v.push(f(fr.joints.timestamp));
    pose_cells(&fr.end_effector, &mut v);
    v.push(opt(fr.grasped));
    v.push(fr.script_index.to_string());
    for id in cubes {
        let p = fr.cube(*id).expect("frame lists every scene cube");
        pose_cells(p, &mut v);
    }
    v
}

fn parse_visual(c: &mut Cells, cubes: &[ObjectId]) -> Result<VisualRow, LogError> {
    let sequence = c.parse()?;
    let trigger = c.tag()?;
    let delivered_ms = c.opt()?;
    let sim_time_ms = c.parse()?;
    let joints = JointState { angles: c.floats()?, gripper_aperture: c.parse()?, timestamp: c.parse()? };
    let end_effector = c.pose()?;
    let grasped = c.opt()?;
    let script_index = c.parse()?;
    let mut frame_cubes = Vec::with_capacity(cubes.len());
    for id in cubes {
        frame_cubes.push(FramePose { id: *id, pose: c.pose()? });
    }
    Ok(VisualRow {
        sequence,
        trigger,
        delivered_ms,
        frame: VisualFrame { sim_time_ms, joints, end_effector, grasped, script_index, cubes: frame_cubes },
    })
}

const EVENT_HEADER: [&str; 13] = [
    "time_ms",
    "kind",
    "cube",
    "target",
    "expected",
    "speed",
    "x",
    "y",
    "z",
    "change",
    "commanded_ms",
    "confirmed_ms",
    "via",
];

fn event_row(r: &EventRow) -> Vec<String> {
    let mut v = vec![String::new(); EVENT_HEADER.len()];
    v[0] = r.time_ms.to_string();
    let kind = match &r.event {
        LogEvent::Grasp { cube } | LogEvent::Release { cube } => {
            v[2] = cube.to_string();
            if matches!(r.event, LogEvent::Grasp { .. }) {
                "grasp"
            } else {
                "release"
            }
        }
        LogEvent::Placed { cube, target } => {
            v[2] = cube.to_string();
            v[3] = target.to_string();
            "placed"
        }
        LogEvent::GraspRejected { cube, expected } => {
            v[2] = cube.to_string();
            v[4] = opt(*expected);
            "grasp_rejected"
        }
        LogEvent::Impact { cube, speed } => {
            v[2] = cube.to_string();
            v[5] = f(*speed);
            "impact"
        }
        LogEvent::Confirmed { confirmation: c } => {
            v[2] = c.cube.to_string();
            v[9] = tag(&c.change);
            v[10] = c.commanded_at.to_string();
            v[11] = c.confirmed_at.to_string();
            v[12] = tag(&c.via);
            "confirmed"
        }
        LogEvent::ActionStart => "action_start",
        LogEvent::Settled { cube, position } => {
            v[2] = cube.to_string();
            v[6] = f(position[0]);
            v[7] = f(position[1]);
            v[8] = f(position[2]);
            "settled"
        }
    };
    v[1] = kind.to_string();
    v
}

fn parse_event(c: &mut Cells) -> Result<EventRow, LogError> {
    let time_ms = c.parse()?;
    let (kind_col, kind) = c.raw()?;
    let kind = kind.to_string();
    let cube: Option<ObjectId> = c.opt()?;
    let target: Option<ObjectId> = c.opt()?;
    let expected: Option<ObjectId> = c.opt()?;
    let speed: Option<f64> = c.opt()?;
    let x: Option<f64> = c.opt()?;
    let y: Option<f64> = c.opt()?;
    let z: Option<f64> = c.opt()?;
    let (change_col, change) = c.raw()?;
    let change = change.to_string();
    let commanded: Option<u64> = c.opt()?;
    let confirmed: Option<u64> = c.opt()?;
    let (via_col, via) = c.raw()?;
    let via = via.to_string();
    fn need<T>(c: &Cells, v: Option<T>, col: usize, kind: &str) -> Result<T, LogError> {
        v.ok_or_else(|| c.err(col, format!("required for `{kind}`")))
    }
    fn parse_tag<T: DeserializeOwned>(c: &Cells, s: &str, col: usize) -> Result<T, LogError> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| c.err(col, format!("unknown value `{s}`")))
    }
    let event = match kind.as_str() {
        "grasp" => LogEvent::Grasp { cube: need(c, cube, 2, &kind)? },
        "release" => LogEvent::Release { cube: need(c, cube, 2, &kind)? },
        "placed" => LogEvent::Placed { cube: need(c, cube, 2, &kind)?, target: need(c, target, 3, &kind)? },
        "grasp_rejected" => LogEvent::GraspRejected { cube: need(c, cube, 2, &kind)?, expected },
        "impact" => LogEvent::Impact { cube: need(c, cube, 2, &kind)?, speed: need(c, speed, 5, &kind)? },
        "confirmed" => {
            LogEvent::Confirmed {
                confirmation: Confirmation {
                    change: parse_tag(c, &change, change_col)?,
                    cube: need(c, cube, 2, &kind)?,
                    commanded_at: need(c, commanded, 10, &kind)?,
                    confirmed_at: need(c, confirmed, 11, &kind)?,
                    via: parse_tag(c, &via, via_col)?,
                },
            }
        }
        "action_start" => LogEvent::ActionStart,
        "settled" => LogEvent::Settled { cube: need(c, cube, 2, &kind)?, position: [need(c, x, 6, &kind)?, need(c, y, 7, &kind)?, need(c, z, 8, &kind)?] },
        other => return Err(c.err(kind_col, format!("unknown event kind `{other}`"))),
    };
    Ok(EventRow { time_ms, event })
}

const PUPIL_HEADER: [&str; 3] = ["time_ms", "diameter_mm", "luminance"];

fn pupil_row(r: &PupilRow) -> Vec<String> {
    vec![r.time_ms.to_string(), optf(r.diameter), f(r.luminance)]
}

fn parse_pupil(c: &mut Cells) -> Result<PupilRow, LogError> {
    Ok(PupilRow { time_ms: c.parse()?, diameter: c.opt()?, luminance: c.parse()? })
}

const POST_HEADER: [&str; 6] = [
    "perceived_visual_ms",
    "perceived_haptic_ms",
    "perceived_gap_ms",
    "tlx_total",
    "tlx_confidence",
    "tlx_frustration",
];

fn post_fields(q: &Questionnaire) -> [Option<f64>; 6] {
    [q.perceived_visual_ms, q.perceived_haptic_ms, q.perceived_gap_ms, q.tlx_total, q.tlx_confidence, q.tlx_frustration]
}

fn parse_post(c: &mut Cells) -> Result<Questionnaire, LogError> {
    Ok(Questionnaire {
        perceived_visual_ms: c.opt()?,
        perceived_haptic_ms: c.opt()?,
        perceived_gap_ms: c.opt()?,
        tlx_total: c.opt()?,
        tlx_confidence: c.opt()?,
        tlx_frustration: c.opt()?,
    })
}

// ---- files ----------------------------------------------------------------

fn write_csv<I>(path: &Path, header: &[String], rows: I) -> Result<(), LogError>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let wrap = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(source) => LogError::Io { path: path.to_path_buf(), source },
        other => LogError::Meta { path: path.to_path_buf(), message: format!("{other:?}") },
    };
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(std::io::BufWriter::new(file));
    w.write_record(header).map_err(wrap)?;
    for r in rows {
        w.write_record(&r).map_err(wrap)?;
    }
    w.flush().map_err(io_err(path))
}

fn read_csv<T>(path: &Path, header: &[String], mut parse: impl FnMut(&mut Cells) -> Result<T, LogError>) -> Result<Vec<T>, LogError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => LogError::Io { path: path.to_path_buf(), source },
            other => LogError::Meta { path: path.to_path_buf(), message: format!("{other:?}") },
        })?;
    let mut out = Vec::new();
    let mut record = csv::StringRecord::new();
    let mut first = true;
    loop {
        let more = r.read_record(&mut record).map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            LogError::Parse { path: path.to_path_buf(), line, message: e.to_string() }
        })?;
        if !more {
            break;
        }
        let line = record.position().map_or(0, |p| p.line());
        if first {
            first = false;
            if record.iter().ne(header.iter().map(String::as_str)) {
                return Err(LogError::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("unexpected header; expected `{}`", header.join(",")),
                });
            }
            continue;
        }
        let mut cells = Cells { path, header, record: &record, line, next: 0 };
        let row = parse(&mut cells)?;
        cells.finish()?;
        out.push(row);
    }
    if first {
        return Err(LogError::Parse { path: path.to_path_buf(), line: 1, message: "missing header".into() });
    }
    Ok(out)
}

fn strings<const N: usize>(h: [&str; N]) -> Vec<String> {
    h.map(String::from).to_vec()
}

/// Cube ids in scene order; they name the per-cube columns of `visual.csv`.
fn cube_ids(log_header: &LogHeader) -> Vec<ObjectId> {
    log_header.config.scene.objects.iter().filter(|o| o.color_tag.is_cube()).map(|o| o.id).collect()
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

/// Writes `log` into directory `dir`, creating it if needed.
pub fn write_log(dir: &Path, log: &TrialLog) -> Result<(), LogError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta = dir.join(META_FILE);
    let text = toml::to_string(&log.header).map_err(|e| LogError::Meta { path: meta.clone(), message: e.to_string() })?;
    fs::write(&meta, text).map_err(io_err(&meta))?;
    let cubes = cube_ids(&log.header);
    write_csv(&dir.join("ticks.csv"), &tick_header(), log.ticks.iter().map(tick_row))?;
    write_csv(&dir.join("channel.csv"), &strings(CHANNEL_HEADER), log.channel.iter().map(channel_row))?;
    write_csv(&dir.join("inputs.csv"), &strings(INPUT_HEADER), log.inputs.iter().map(input_row))?;
    write_csv(&dir.join("visual.csv"), &visual_header(&cubes), log.visual.iter().map(|r| visual_row(r, &cubes)))?;
    write_csv(&dir.join("events.csv"), &strings(EVENT_HEADER), log.events.iter().map(event_row))?;
    write_csv(&dir.join("pupil.csv"), &strings(PUPIL_HEADER), log.pupil.iter().map(pupil_row))?;
    let post = post_fields(&log.post);
    let post_rows = post.iter().any(Option::is_some).then(|| post.map(optf).to_vec());
    write_csv(&dir.join("post.csv"), &strings(POST_HEADER), post_rows)?;
    Ok(())
}

/// Reads the log in `dir`. Unknown format versions are rejected before
/// anything else is parsed.
pub fn read_log(dir: &Path) -> Result<TrialLog, LogError> {
    let meta = dir.join(META_FILE);
    let text = fs::read_to_string(&meta).map_err(io_err(&meta))?;
    let probe: VersionProbe = toml::from_str(&text).map_err(|e| LogError::Meta { path: meta.clone(), message: e.to_string() })?;
    if probe.format_version != LOG_FORMAT_VERSION {
        return Err(LogError::Version { path: meta, found: probe.format_version, supported: LOG_FORMAT_VERSION });
    }
    let header: LogHeader = toml::from_str(&text).map_err(|e| LogError::Meta { path: meta.clone(), message: e.to_string() })?;
    let cubes = cube_ids(&header);
    let ticks = read_csv(&dir.join("ticks.csv"), &tick_header(), parse_tick)?;
    let channel = read_csv(&dir.join("channel.csv"), &strings(CHANNEL_HEADER), parse_channel)?;
    let inputs = read_csv(&dir.join("inputs.csv"), &strings(INPUT_HEADER), parse_input)?;
    let visual = read_csv(&dir.join("visual.csv"), &visual_header(&cubes), |c| parse_visual(c, &cubes))?;
    let events = read_csv(&dir.join("events.csv"), &strings(EVENT_HEADER), parse_event)?;
    let pupil = read_csv(&dir.join("pupil.csv"), &strings(PUPIL_HEADER), parse_pupil)?;
    let post_path = dir.join("post.csv");
    let mut post = read_csv(&post_path, &strings(POST_HEADER), parse_post)?;
    if post.len() > 1 {
        return Err(LogError::Parse { path: post_path, line: 3, message: "more than one questionnaire row".into() });
    }
    let log = TrialLog { header, ticks, channel, inputs, visual, events, pupil, post: post.pop().unwrap_or_default() };
    check_log(&log).map_err(|m| LogError::Invariant { path: dir.to_path_buf(), message: m })?;
    Ok(log)
}

/// Structural invariants every log satisfies: non-decreasing timestamps and
/// every referenced channel event present and of the right channel.
pub fn check_log(log: &TrialLog) -> Result<(), String> {
    use telesim_core::delay::Channel;
    let nondecreasing = |name: &str, t: &mut dyn Iterator<Item = u64>| {
        let mut prev = 0;
        for (i, x) in t.enumerate() {
            if x < prev {
                return Err(format!("{name} row {i}: time {x} before {prev}"));
            }
            prev = x;
        }
        Ok(())
    };
    nondecreasing("ticks", &mut log.ticks.iter().map(|r| r.time_ms))?;
    nondecreasing("channel", &mut log.channel.iter().map(|r| r.emit_ms))?;
    nondecreasing("inputs", &mut log.inputs.iter().map(|r| r.input.timestamp))?;
    nondecreasing("pupil", &mut log.pupil.iter().map(|r| r.time_ms))?;
    let channel_of = |seq: u64| log.channel.get(seq as usize).filter(|r| r.sequence == seq);
    for (i, r) in log.channel.iter().enumerate() {
        if r.sequence != i as u64 {
            return Err(format!("channel row {i} has sequence {}", r.sequence));
        }
        if r.due_ms < r.emit_ms || r.delivered_ms.is_some_and(|d| d < r.emit_ms) {
            return Err(format!("channel event {i} delivered before it was emitted"));
        }
    }
    for r in &log.inputs {
        match channel_of(r.sequence) {
            Some(c) if c.channel == Channel::Command => {}
            _ => return Err(format!("input references missing command event {}", r.sequence)),
        }
    }
    for r in &log.visual {
        match channel_of(r.sequence) {
            Some(c) if c.channel == Channel::Visual && c.delivered_ms == r.delivered_ms => {}
            _ => return Err(format!("visual row references missing visual event {}", r.sequence)),
        }
    }
    for r in &log.ticks {
        if let Some(seq) = r.command_seq {
            match channel_of(seq) {
                Some(c) if c.channel == Channel::Command && c.delivered_ms.is_some_and(|d| d <= r.time_ms) => {}
                _ => return Err(format!("tick {} applies undelivered command {seq}", r.time_ms)),
            }
        }
    }
    Ok(())
}
