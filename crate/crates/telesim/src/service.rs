//! Live session host.
//!
//! Each TCP connection is an isolated session on its own thread:
//!
//! 1. client `hello`, server `hello`;
//! 2. client `config`; server `trial_control` `accepted` or `rejected` (a
//!    rejected config leaves the session waiting for another);
//! 3. client `trial_control` `start`; the server runs the trial paced to wall
//!    time, streaming delivered `visual_frame`s at 90 Hz, `haptic_frame`
//!    gauges at 90 Hz and world `event`s; client `input`s received within
//!    one operator tick are summed into one command;
//! 4. the trial ends on client `stop`, task completion or the duration cap
//!    (`ended`), then the server waits for a `questionnaire` and writes the
//!    log (`log_written`). The session then accepts another `config`.
//!
//! A disconnect mid-trial aborts it; the partial log is written with the
//! abort marker. Malformed frames are answered with `rejected` and skipped.

use std::cell::RefCell;
use std::io::{BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, TryRecvError};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use telesim_core::delay::{make_condition, Millis};
use telesim_core::haptics::ForceSample;
use telesim_core::operator::{is_frame_tick, OperatorInput, OperatorView};
use telesim_core::session::{
    run_session, Control, EndReason, EventRow, InputSource, OperatorSpec, Questionnaire, SessionObserver, TrialConfig, TrialLog,
};
use telesim_core::world::VisualFrame;

use crate::config::{default_output_name, PupilSection};
use crate::logio::write_log;
use crate::pupil::attach_pupil;
use crate::replay::scripted_operator;
use crate::wire::{
    encode, Body, ClientInput, ConfigRequest, FrameDecoder, Hello, HapticGauge, ProtocolError, TrialControl, WireMessage,
    PROTOCOL_VERSION,
};

/// Marker stored in the log when the console goes away mid-trial.
pub const DISCONNECT_MARKER: &str = "client disconnected";

#[derive(Debug, Clone)]
pub struct ServeOptions {
    /// Template for every trial; the console picks condition and seed.
    pub base: TrialConfig,
    pub pupil: PupilSection,
    /// Logs are written to numbered subdirectories of this one.
    pub output_dir: PathBuf,
    /// Track wall time; off only for tests and batch use.
    pub pace: bool,
    /// How long to wait for the questionnaire after a trial.
    pub questionnaire_timeout: Duration,
}

impl ServeOptions {
    pub fn new(base: TrialConfig, output_dir: PathBuf) -> Self {
        Self {
            base,
            pupil: PupilSection::default(),
            output_dir,
            pace: true,
            questionnaire_timeout: Duration::from_secs(600),
        }
    }
}

enum Incoming {
    Message(WireMessage),
    Malformed(ProtocolError),
    Closed,
}

/// Reads frames off the socket until it closes or breaks.
fn spawn_reader(mut stream: TcpStream) -> Receiver<Incoming> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut dec = FrameDecoder::new();
        let mut buf = [0u8; 8192];
        loop {
            let n = match stream.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => n,
            };
            dec.push(&buf[..n]);
            while let Some(r) = dec.next_message() {
                let fatal = matches!(&r, Err(e) if !e.recoverable);
                let item = match r {
                    Ok(m) => Incoming::Message(m),
                    Err(e) => Incoming::Malformed(e),
                };
                if tx.send(item).is_err() || fatal {
                    let _ = tx.send(Incoming::Closed);
                    return;
                }
            }
        }
        let _ = tx.send(Incoming::Closed);
    });
    rx
}

struct Outbox {
    writer: BufWriter<TcpStream>,
    sequence: u64,
    broken: bool,
}

impl Outbox {
    fn send(&mut self, sim_timestamp: Millis, body: Body) {
        if self.broken {
            return;
        }
        let m = WireMessage { sequence: self.sequence, sim_timestamp, body };
        self.sequence += 1;
        if self.writer.write_all(&encode(&m)).is_err() {
            self.broken = true;
        }
    }

    fn flush(&mut self) {
        if !self.broken && self.writer.flush().is_err() {
            self.broken = true;
        }
    }

    fn reject(&mut self, now: Millis, reason: impl Into<String>) {
        self.send(now, Body::TrialControl(TrialControl::Rejected { reason: reason.into() }));
        self.flush();
    }
}

/// Sleeps the tick loop so sim time follows wall time.
#[derive(Debug, Clone)]
pub struct Pacer {
    start: Instant,
    /// Largest observed lag of wall time behind sim time, ms.
    pub max_lag_ms: f64,
}

impl Pacer {
    pub fn start() -> Self {
        Self { start: Instant::now(), max_lag_ms: 0.0 }
    }

    /// Blocks until `now` ms have passed since the start.
    pub fn wait_for(&mut self, now: Millis) {
        let due = self.start + Duration::from_millis(now);
        let mut t = Instant::now();
        if t > due {
            self.max_lag_ms = self.max_lag_ms.max((t - due).as_secs_f64() * 1000.0);
            return;
        }
        // Sleep most of the way, then spin for accuracy.
        if due - t > Duration::from_micros(1500) {
            thread::sleep(due - t - Duration::from_millis(1));
        }
        while {
            t = Instant::now();
            t < due
        } {
            std::hint::spin_loop();
        }
    }

    pub fn elapsed(&self) -> Duration {
        self.start.elapsed()
    }
}

/// Inputs received since the last operator tick, summed.
#[derive(Debug, Default)]
struct Inbox {
    translation: Vector3<f64>,
    rotation: Vector3<f64>,
    grip_force: f64,
}

impl Inbox {
    fn add(&mut self, i: &ClientInput) {
        self.translation += Vector3::from(i.translation);
        self.rotation += Vector3::from(i.rotation);
        self.grip_force = i.grip_force;
    }
}

/// Console input coalesced to one command per operator tick. With no new
/// input the handle holds still at the last grip force.
struct LiveInput {
    inbox: Rc<RefCell<Inbox>>,
    last_frame: Option<Millis>,
}

impl InputSource for LiveInput {
    fn next_input(&mut self, view: &OperatorView<'_>) -> Option<OperatorInput> {
        let dt = view.now - self.last_frame.unwrap_or(view.now);
        self.last_frame = Some(view.now);
        let mut b = self.inbox.borrow_mut();
        let input = OperatorInput {
            timestamp: view.now,
            dt_ms: dt,
            translation: b.translation,
            rotation: b.rotation,
            grip_force: b.grip_force,
        };
        b.translation = Vector3::zeros();
        b.rotation = Vector3::zeros();
        Some(input)
    }
}

struct Streamer<'a> {
    rx: &'a Receiver<Incoming>,
    out: &'a mut Outbox,
    inbox: Rc<RefCell<Inbox>>,
    pacer: Option<Pacer>,
    haptic: Option<(Millis, ForceSample)>,
    haptic_sent: Option<Millis>,
    questionnaire: Option<Questionnaire>,
}

impl SessionObserver for Streamer<'_> {
    fn on_tick(&mut self, now: Millis) -> Control {
        if let Some(p) = self.pacer.as_mut() {
            p.wait_for(now);
        }
        if is_frame_tick(now) {
            if let Some((at, s)) = self.haptic.filter(|(at, _)| Some(*at) != self.haptic_sent) {
                self.out.send(at, Body::HapticFrame(HapticGauge::from_sample(&s)));
                self.haptic_sent = Some(at);
            }
        }
        self.out.flush();
        if self.out.broken {
            return Control::Abort(DISCONNECT_MARKER.into());
        }
        loop {
            match self.rx.try_recv() {
                Ok(Incoming::Message(m)) => match m.body {
                    Body::Input(i) => self.inbox.borrow_mut().add(&i),
                    Body::TrialControl(TrialControl::Stop) => return Control::Stop,
                    Body::Questionnaire(q) => self.questionnaire = Some(q),
                    Body::Event(None) => {}
                    other => self.out.reject(now, format!("`{:?}` is not accepted during a trial", other.kind())),
                },
                Ok(Incoming::Malformed(e)) => self.out.reject(now, e.to_string()),
                Ok(Incoming::Closed) | Err(TryRecvError::Disconnected) => {
                    return Control::Abort(DISCONNECT_MARKER.into());
                }
                Err(TryRecvError::Empty) => return Control::Continue,
            }
        }
    }

    fn on_visual(&mut self, delivered_ms: Millis, frame: &VisualFrame) {
        self.out.send(delivered_ms, Body::VisualFrame(Box::new(frame.clone())));
    }

    fn on_haptic(&mut self, delivered_ms: Millis, sample: &ForceSample) {
        self.haptic = Some((delivered_ms, *sample));
    }

    fn on_event(&mut self, row: &EventRow) {
        self.out.send(row.time_ms, Body::Event(Some(row.event)));
    }
}

/// Builds the trial a console asked for.
pub fn trial_from_request(base: &TrialConfig, req: &ConfigRequest) -> Result<TrialConfig, String> {
    let condition = make_condition(req.condition, req.visual_delay_ms)
        .map_err(|e| e.to_string())?
        .with_onset_delay(req.onset_delay_ms);
    let mut t = base.clone();
    t.condition = condition;
    if let Some(seed) = req.seed {
        t.seed = seed;
        if let OperatorSpec::Scripted(p) = &mut t.operator {
            p.seed = seed;
        }
    }
    if let Some(v) = req.speed_limit {
        match &mut t.operator {
            OperatorSpec::Live { speed_limit } => *speed_limit = v,
            OperatorSpec::Scripted(p) => p.speed_limit = v,
        }
    }
    if let Some(v) = req.duration_cap_s {
        t.duration_cap_s = v;
    }
    if let Some(v) = req.cue_style {
        t.cue_style = v;
    }
    t.validate().map_err(|e| e.to_string())?;
    if i64::try_from(t.seed).is_err() {
        return Err("seed must be below 2^63".into());
    }
    Ok(t)
}

static LOG_COUNTER: AtomicU64 = AtomicU64::new(0);

/// A fresh log directory under `root` for `trial`.
fn next_log_dir(root: &Path, trial: &TrialConfig) -> PathBuf {
    let name = default_output_name(trial);
    loop {
        let n = LOG_COUNTER.fetch_add(1, Ordering::Relaxed);
        let p = root.join(format!("{name}-{n:03}"));
        if !p.exists() {
            return p;
        }
    }
}

enum Phase {
    Greeting,
    Configuring,
    Ready(TrialConfig),
}

/// Runs one console session until the client disconnects. Returns the logs
/// written.
pub fn handle_connection(stream: TcpStream, opts: &ServeOptions) -> anyhow::Result<Vec<PathBuf>> {
    let peer = stream.peer_addr().ok();
    stream.set_nodelay(true)?;
    let rx = spawn_reader(stream.try_clone()?);
    let mut out = Outbox { writer: BufWriter::new(stream), sequence: 0, broken: false };
    let mut phase = Phase::Greeting;
    let mut written = Vec::new();
    loop {
        let m = match rx.recv() {
            Ok(Incoming::Message(m)) => m,
            Ok(Incoming::Malformed(e)) => {
                log::warn!("{peer:?}: {e}");
                out.reject(0, e.to_string());
                continue;
            }
            Ok(Incoming::Closed) | Err(_) => return Ok(written),
        };
        phase = match (phase, m.body) {
            (Phase::Greeting, Body::Hello(h)) => {
                if h.protocol_version != PROTOCOL_VERSION {
                    out.reject(0, format!("protocol version {} is not supported (server speaks {PROTOCOL_VERSION})", h.protocol_version));
                    Phase::Greeting
                } else {
                    out.send(0, Body::Hello(Hello { role: "server".into(), protocol_version: PROTOCOL_VERSION }));
                    out.flush();
                    Phase::Configuring
                }
            }
            (Phase::Greeting, other) => {
                out.reject(0, format!("expected hello, got {:?}", other.kind()));
                Phase::Greeting
            }
            (Phase::Configuring | Phase::Ready(_), Body::Config(req)) => match trial_from_request(&opts.base, &req) {
                Ok(t) => {
                    out.send(0, Body::TrialControl(TrialControl::Accepted { condition: t.condition, seed: t.seed }));
                    out.flush();
                    Phase::Ready(t)
                }
                Err(reason) => {
                    out.reject(0, reason);
                    Phase::Configuring
                }
            },
            (Phase::Ready(t), Body::TrialControl(TrialControl::Start)) => {
                let (log, disconnected) = run_trial(&t, &rx, &mut out, opts)?;
                let dir = next_log_dir(&opts.output_dir, &t);
                write_log(&dir, &log)?;
                log::info!("{peer:?}: trial ended ({}), log written to {}", log.header.end_reason, dir.display());
                out.send(log.header.end_ms, Body::TrialControl(TrialControl::LogWritten { path: dir.display().to_string() }));
                out.flush();
                written.push(dir);
                if disconnected {
                    return Ok(written);
                }
                Phase::Configuring
            }
            (p, Body::Event(None)) => p,
            (p, other) => {
                out.reject(0, format!("`{:?}` is not expected now", other.kind()));
                p
            }
        };
    }
}

/// Runs one trial and collects its questionnaire. Returns the finished log
/// and whether the client went away.
fn run_trial(
    trial: &TrialConfig,
    rx: &Receiver<Incoming>,
    out: &mut Outbox,
    opts: &ServeOptions,
) -> anyhow::Result<(TrialLog, bool)> {
    let inbox = Rc::new(RefCell::new(Inbox::default()));
    let mut streamer = Streamer {
        rx,
        out,
        inbox: inbox.clone(),
        pacer: opts.pace.then(Pacer::start),
        haptic: None,
        haptic_sent: None,
        questionnaire: None,
    };
    let mut log = match &trial.operator {
        OperatorSpec::Live { .. } => run_session(trial, &mut LiveInput { inbox, last_frame: None }, &mut streamer)?,
        OperatorSpec::Scripted(p) => run_session(trial, &mut scripted_operator(trial, p), &mut streamer)?,
    };
    if let Some(p) = &streamer.pacer {
        let secs = log.header.end_ms as f64 / 1000.0;
        if p.max_lag_ms > 5.0 * secs.max(1.0) {
            log::warn!("sim clock fell {:.1} ms behind wall time", p.max_lag_ms);
        }
    }
    let early_questionnaire = streamer.questionnaire;
    let disconnected = log.header.end_reason == EndReason::Aborted;
    out.send(log.header.end_ms, Body::TrialControl(TrialControl::Ended { reason: log.header.end_reason, end_ms: log.header.end_ms }));
    out.flush();
    log.post = match early_questionnaire {
        Some(q) => q,
        None if disconnected => Default::default(),
        None => await_questionnaire(rx, out, log.header.end_ms, opts.questionnaire_timeout).unwrap_or_default(),
    };
    attach_pupil(&mut log, &opts.pupil);
    Ok((log, disconnected))
}

/// Waits for the questionnaire; a skip (`stop`), disconnect or timeout leaves
/// it missing.
fn await_questionnaire(
    rx: &Receiver<Incoming>,
    out: &mut Outbox,
    now: Millis,
    timeout: Duration,
) -> Option<Questionnaire> {
    let deadline = Instant::now() + timeout;
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        match rx.recv_timeout(left) {
            Ok(Incoming::Message(m)) => match m.body {
                Body::Questionnaire(q) => return Some(q),
                Body::TrialControl(TrialControl::Stop) => return None,
                Body::Input(_) | Body::Event(None) => {}
                other => out.reject(now, format!("waiting for the questionnaire, got {:?}", other.kind())),
            },
            Ok(Incoming::Malformed(e)) => out.reject(now, e.to_string()),
            Ok(Incoming::Closed) | Err(RecvTimeoutError::Timeout | RecvTimeoutError::Disconnected) => return None,
        }
    }
}

/// Accepts connections and serves each on its own thread. With `max_sessions`
/// set, returns after that many sessions have finished.
pub fn serve(listener: TcpListener, opts: ServeOptions, max_sessions: Option<usize>) -> anyhow::Result<Vec<PathBuf>> {
    let opts = Arc::new(opts);
    let mut handles = Vec::new();
    for (i, stream) in listener.incoming().enumerate() {
        let stream = stream?;
        let o = opts.clone();
        handles.push(thread::spawn(move || {
            let peer: Option<SocketAddr> = stream.peer_addr().ok();
            log::info!("session from {peer:?}");
            match handle_connection(stream, &o) {
                Ok(logs) => logs,
                Err(e) => {
                    log::error!("session {peer:?} failed: {e:#}");
                    Vec::new()
                }
            }
        }));
        if max_sessions.is_some_and(|m| i + 1 >= m) {
            break;
        }
    }
    let mut logs = Vec::new();
    for h in handles {
        logs.extend(h.join().map_err(|_| anyhow::anyhow!("session thread panicked"))?);
    }
    Ok(logs)
}
