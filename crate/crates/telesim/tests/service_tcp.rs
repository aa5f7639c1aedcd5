use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use telesim::analysis::perception::questionnaire_deltas;
use telesim::logio::read_log;
use telesim::service::{serve, ServeOptions, DISCONNECT_MARKER};
use telesim::wire::*;
use telesim_core::delay::{make_condition, ConditionKind};
use telesim_core::session::{EndReason, OperatorSpec, Questionnaire, TrialConfig};

struct Client {
    stream: TcpStream,
    dec: FrameDecoder,
    seq: u64,
}

impl Client {
    fn connect(port: u16) -> Self {
        let stream = TcpStream::connect(("127.0.0.1", port)).unwrap();
        stream.set_read_timeout(Some(Duration::from_secs(20))).unwrap();
        Self { stream, dec: FrameDecoder::new(), seq: 0 }
    }

    fn send(&mut self, body: Body) {
        let m = WireMessage { sequence: self.seq, sim_timestamp: 0, body };
        self.seq += 1;
        self.stream.write_all(&encode(&m)).unwrap();
    }

    fn send_raw(&mut self, bytes: &[u8]) {
        self.stream.write_all(bytes).unwrap();
    }

    fn recv(&mut self) -> WireMessage {
        loop {
            if let Some(r) = self.dec.next_message() {
                return r.expect("server frames are well formed");
            }
            let mut buf = [0u8; 65536];
            let n = self.stream.read(&mut buf).expect("server reply");
            assert!(n > 0, "server closed the connection");
            self.dec.push(&buf[..n]);
        }
    }

    /// Skips streamed feedback until a trial-control message arrives.
    fn control(&mut self) -> TrialControl {
        loop {
            if let Body::TrialControl(c) = self.recv().body {
                return c;
            }
        }
    }
}

fn start_server(pace: bool, out: PathBuf) -> (u16, JoinHandle<Vec<PathBuf>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    let base = TrialConfig::new(make_condition(ConditionKind::Control, 0).unwrap(), OperatorSpec::Live { speed_limit: 0.25 }, 7);
    let mut opts = ServeOptions::new(base, out);
    opts.pace = pace;
    opts.questionnaire_timeout = Duration::from_secs(20);
    (port, thread::spawn(move || serve(listener, opts, Some(1)).unwrap()))
}

fn hello() -> Body {
    Body::Hello(Hello { role: "console".into(), protocol_version: PROTOCOL_VERSION })
}

fn config(condition: ConditionKind, visual: u64, cap_s: f64) -> Body {
    Body::Config(ConfigRequest {
        condition,
        visual_delay_ms: visual,
        onset_delay_ms: 0,
        seed: Some(3),
        speed_limit: None,
        duration_cap_s: Some(cap_s),
        cue_style: None,
    })
}

fn rejected(c: TrialControl) -> String {
    match c {
        TrialControl::Rejected { reason } => reason,
        other => panic!("expected a rejection, got {other:?}"),
    }
}

#[test]
fn handshake_errors_leave_the_session_open() {
    let tmp = tempfile::tempdir().unwrap();
    let (port, server) = start_server(false, tmp.path().to_path_buf());
    let mut c = Client::connect(port);

    c.send(config(ConditionKind::Control, 0, 1.0));
    assert!(rejected(c.control()).contains("expected hello"));
    c.send(Body::Hello(Hello { role: "console".into(), protocol_version: 99 }));
    assert!(rejected(c.control()).contains("99"));
    c.send(hello());
    assert!(matches!(c.recv().body, Body::Hello(Hello { protocol_version: PROTOCOL_VERSION, .. })));

    c.send(config(ConditionKind::Asynchronous, 250, 1.0));
    rejected(c.control());
    c.send_raw(&[0, 0, 0, 5, b'h', b'e', b'l', b'l', b'o']);
    assert!(rejected(c.control()).contains("protocol error"));
    c.send(Body::TrialControl(TrialControl::Start));
    rejected(c.control());

    c.send(config(ConditionKind::Synchronous, 500, 0.2));
    match c.control() {
        TrialControl::Accepted { condition, seed } => {
            assert_eq!((condition.visual_delay_ms, condition.haptic_delay_ms, seed), (500, 500, 3));
        }
        other => panic!("{other:?}"),
    }
    drop(c);
    assert!(server.join().unwrap().is_empty());
}

#[test]
fn questionnaire_reaches_the_log_verbatim() {
    let tmp = tempfile::tempdir().unwrap();
    // Paced so the inputs sent after start land inside the 500 ms trial.
    let (port, server) = start_server(true, tmp.path().to_path_buf());
    let mut c = Client::connect(port);
    c.send(hello());
    c.recv();
    c.send(config(ConditionKind::Anchoring, 750, 0.5));
    assert!(matches!(c.control(), TrialControl::Accepted { .. }));
    c.send(Body::TrialControl(TrialControl::Start));
    for _ in 0..5 {
        c.send(Body::Input(ClientInput { translation: [0.0005, 0.0, 0.0], rotation: [0.0; 3], grip_force: 0.0 }));
    }

    let mut visual = 0;
    let mut haptic = 0;
    let ended = loop {
        match c.recv().body {
            Body::VisualFrame(_) => visual += 1,
            Body::HapticFrame(g) => {
                assert!(g.magnitude <= 5.0 + 1e-12);
                haptic += 1;
            }
            Body::TrialControl(t) => break t,
            _ => {}
        }
    };
    assert_eq!(ended, TrialControl::Ended { reason: EndReason::DurationCap, end_ms: 500 });
    // 750 ms of visual delay: nothing rendered inside the trial reaches the console.
    assert_eq!(visual, 0);
    assert!(haptic > 0);

    let q = Questionnaire {
        perceived_visual_ms: Some(100.0),
        perceived_haptic_ms: Some(0.0),
        perceived_gap_ms: Some(333.3),
        tlx_total: Some(47.5),
        tlx_confidence: Some(80.0),
        tlx_frustration: None,
    };
    c.send(Body::Questionnaire(q));
    let TrialControl::LogWritten { path } = c.control() else { panic!("no log") };
    drop(c);
    let logs = server.join().unwrap();
    assert_eq!(logs, vec![PathBuf::from(&path)]);

    let log = read_log(&logs[0]).unwrap();
    assert_eq!(log.post, q);
    assert_eq!(log.header.config.seed, 3);
    assert_eq!(questionnaire_deltas(&log.post, &log.header.config.condition).delta_v, Some(-650.0));
    assert!(!log.pupil.is_empty());
    assert!(log.inputs.iter().any(|r| r.input.translation.x > 0.0));
}

#[test]
fn disconnect_mid_trial_keeps_an_aborted_log() {
    let tmp = tempfile::tempdir().unwrap();
    let (port, server) = start_server(true, tmp.path().to_path_buf());
    let mut c = Client::connect(port);
    c.send(hello());
    c.recv();
    c.send(config(ConditionKind::Control, 0, 30.0));
    c.control();
    c.send(Body::TrialControl(TrialControl::Start));
    let mut frames = 0;
    while frames < 20 {
        if let Body::VisualFrame(_) = c.recv().body {
            frames += 1;
        }
    }
    drop(c);

    let logs = server.join().unwrap();
    assert_eq!(logs.len(), 1);
    let log = read_log(&logs[0]).unwrap();
    assert_eq!(log.header.end_reason, EndReason::Aborted);
    assert_eq!(log.header.aborted.as_deref(), Some(DISCONNECT_MARKER));
    assert!(log.header.end_ms > 200 && log.header.end_ms < 10_000, "{}", log.header.end_ms);
    assert_eq!(log.post, Questionnaire::default());
}
