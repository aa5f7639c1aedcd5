//! Console wire protocol.
//!
//! Every message is one frame: a 4-byte big-endian payload length followed by
//! that many bytes of UTF-8 JSON:
//!
//! ```json
//! {"kind":"visual_frame","sequence":12,"sim_timestamp":1133,"payload":{...}}
//! ```
//!
//! `sequence` counts messages per sender from 0. `sim_timestamp` is the
//! session's simulated clock in ms (for client messages, the last sim time the
//! client saw). `payload` is omitted for kinds that carry none; an `event`
//! without payload is a heartbeat and is the smallest possible frame,
//! [`MIN_FRAME_LEN`] bytes with sequence and time 0.
//!
//! | kind            | sender | payload                                              |
//! |-----------------|--------|------------------------------------------------------|
//! | `hello`         | both   | `{"role", "protocol_version"}`                       |
//! | `config`        | client | condition, optional seed / speed limit / duration    |
//! | `input`         | client | translation, rotation, grip force                    |
//! | `visual_frame`  | server | delivered visual snapshot                            |
//! | `haptic_frame`  | server | force gauge: magnitude, direction, torque, clamp     |
//! | `event`         | server | grasp / release / placement / confirmation, or none  |
//! | `trial_control` | both   | start, stop, accepted, rejected, ended, log_written  |
//! | `questionnaire` | client | perceived delays and NASA-TLX fields                 |

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use telesim_core::delay::{ConditionKind, ConditionSpec, Millis};
use telesim_core::haptics::{CueStyle, ForceSample};
use telesim_core::session::{EndReason, LogEvent, Questionnaire};
use telesim_core::world::VisualFrame;

pub const PROTOCOL_VERSION: u32 = 1;
/// Frames longer than this are refused.
pub const MAX_FRAME_LEN: u32 = 16 * 1024 * 1024;
/// Length in bytes of `{"kind":"event","sequence":0,"sim_timestamp":0}` with
/// its prefix.
pub const MIN_FRAME_LEN: usize = 4 + 47;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Hello,
    Config,
    Input,
    VisualFrame,
    HapticFrame,
    Event,
    TrialControl,
    Questionnaire,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub role: String,
    pub protocol_version: u32,
}

/// Trial requested by the console.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigRequest {
    pub condition: ConditionKind,
    #[serde(default)]
    pub visual_delay_ms: Millis,
    #[serde(default)]
    pub onset_delay_ms: Millis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed_limit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_cap_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cue_style: Option<CueStyle>,
}

/// One operator command from the console. Inputs arriving within one
/// operator tick are summed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientInput {
    /// End-effector translation increment, m.
    pub translation: [f64; 3],
    /// Rotation increment as a scaled axis, rad.
    #[serde(default)]
    pub rotation: [f64; 3],
    /// Absolute grip force, N.
    pub grip_force: f64,
}

/// Display proxy for a haptic sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HapticGauge {
    /// |F| after the actuator clamp, N.
    pub magnitude: f64,
    /// Unit force direction, zero when there is no force.
    pub direction: [f64; 3],
    pub torque_z: f64,
    pub clamped: bool,
    /// Sim time the sample was rendered, ms.
    pub emitted_ms: Millis,
}

impl HapticGauge {
    pub fn from_sample(s: &ForceSample) -> Self {
        let magnitude = s.force.norm();
        let direction = if magnitude > 0.0 { (s.force / magnitude).into() } else { [0.0; 3] };
        Self {
            magnitude,
            direction,
            torque_z: s.torque_z,
            clamped: s.clamped,
            emitted_ms: (s.timestamp * 1000.0).round() as Millis,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action")]
pub enum TrialControl {
    /// Client: begin the configured trial.
    Start,
    /// Client: end the trial normally.
    Stop,
    /// Server: config accepted; the resolved condition.
    Accepted { condition: ConditionSpec, seed: u64 },
    /// Server: config or message refused; the session stays open.
    Rejected { reason: String },
    /// Server: the trial loop has finished.
    Ended { reason: EndReason, end_ms: Millis },
    /// Server: the log was written.
    LogWritten { path: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Hello(Hello),
    Config(ConfigRequest),
    Input(ClientInput),
    VisualFrame(Box<VisualFrame>),
    HapticFrame(HapticGauge),
    /// `None` is a heartbeat.
    Event(Option<LogEvent>),
    TrialControl(TrialControl),
    Questionnaire(Questionnaire),
}

impl Body {
    pub fn kind(&self) -> Kind {
        match self {
            Body::Hello(_) => Kind::Hello,
            Body::Config(_) => Kind::Config,
            Body::Input(_) => Kind::Input,
            Body::VisualFrame(_) => Kind::VisualFrame,
            Body::HapticFrame(_) => Kind::HapticFrame,
            Body::Event(_) => Kind::Event,
            Body::TrialControl(_) => Kind::TrialControl,
            Body::Questionnaire(_) => Kind::Questionnaire,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub sequence: u64,
    pub sim_timestamp: Millis,
    pub body: Body,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolErrorKind {
    #[error("frame truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(u32),
    #[error("payload is not UTF-8")]
    Utf8,
    #[error("malformed message: {0}")]
    Json(String),
    #[error("`{0}` messages need a payload")]
    MissingPayload(&'static str),
    #[error("`{0}` messages take no payload")]
    UnexpectedPayload(&'static str),
}

/// A malformed frame. `offset` is the stream byte offset of the fault.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("protocol error at byte {offset}: {kind}")]
pub struct ProtocolError {
    pub offset: u64,
    pub kind: ProtocolErrorKind,
    /// Whether decoding can continue after this frame.
    pub recoverable: bool,
}

#[derive(Serialize)]
struct OutEnvelope<'a, P: Serialize> {
    kind: Kind,
    sequence: u64,
    sim_timestamp: Millis,
    #[serde(skip_serializing_if = "Option::is_none")]
    payload: Option<&'a P>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InEnvelope {
    kind: Kind,
    sequence: u64,
    sim_timestamp: Millis,
    #[serde(default)]
    payload: Option<serde_json::Value>,
}

fn json<P: Serialize>(kind: Kind, m: &WireMessage, payload: Option<&P>) -> Vec<u8> {
    let env = OutEnvelope { kind, sequence: m.sequence, sim_timestamp: m.sim_timestamp, payload };
    serde_json::to_vec(&env).expect("wire payloads serialize")
}

/// Encodes one frame, prefix included.
pub fn encode(m: &WireMessage) -> Vec<u8> {
    let k = m.body.kind();
    let body = match &m.body {
        Body::Hello(p) => json(k, m, Some(p)),
        Body::Config(p) => json(k, m, Some(p)),
        Body::Input(p) => json(k, m, Some(p)),
        Body::VisualFrame(p) => json(k, m, Some(p.as_ref())),
        Body::HapticFrame(p) => json(k, m, Some(p)),
        Body::Event(p) => json(k, m, p.as_ref()),
        Body::TrialControl(p) => json(k, m, Some(p)),
        Body::Questionnaire(p) => json(k, m, Some(p)),
    };
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

fn kind_name(k: Kind) -> &'static str {
    match k {
        Kind::Hello => "hello",
        Kind::Config => "config",
        Kind::Input => "input",
        Kind::VisualFrame => "visual_frame",
        Kind::HapticFrame => "haptic_frame",
        Kind::Event => "event",
        Kind::TrialControl => "trial_control",
        Kind::Questionnaire => "questionnaire",
    }
}

/// Decodes the JSON body of one frame starting at stream offset `base`.
fn decode_body(bytes: &[u8], base: u64) -> Result<WireMessage, ProtocolError> {
    let fail = |at: u64, kind| ProtocolError { offset: at, kind, recoverable: true };
    let text = std::str::from_utf8(bytes).map_err(|e| fail(base + e.valid_up_to() as u64, ProtocolErrorKind::Utf8))?;
    let json_fail = |e: serde_json::Error| {
        // Frames are single-line JSON, so the column is the byte position.
        let at = base + e.column().saturating_sub(1) as u64;
        fail(at, ProtocolErrorKind::Json(e.to_string()))
    };
    let env: InEnvelope = serde_json::from_str(text).map_err(json_fail)?;
    let name = kind_name(env.kind);
    fn take<T: DeserializeOwned>(v: Option<serde_json::Value>, name: &'static str, base: u64) -> Result<T, ProtocolError> {
        let v = v.ok_or(ProtocolError { offset: base, kind: ProtocolErrorKind::MissingPayload(name), recoverable: true })?;
        serde_json::from_value(v).map_err(|e| ProtocolError {
            offset: base,
            kind: ProtocolErrorKind::Json(format!("`{name}` payload: {e}")),
            recoverable: true,
        })
    }
    let p = env.payload;
    let body = match env.kind {
        Kind::Hello => Body::Hello(take(p, name, base)?),
        Kind::Config => Body::Config(take(p, name, base)?),
        Kind::Input => Body::Input(take(p, name, base)?),
        Kind::VisualFrame => Body::VisualFrame(Box::new(take(p, name, base)?)),
        Kind::HapticFrame => Body::HapticFrame(take(p, name, base)?),
        Kind::Event => Body::Event(match p {
            None => None,
            Some(v) => Some(take(Some(v), name, base)?),
        }),
        Kind::TrialControl => Body::TrialControl(take(p, name, base)?),
        Kind::Questionnaire => Body::Questionnaire(take(p, name, base)?),
    };
    Ok(WireMessage { sequence: env.sequence, sim_timestamp: env.sim_timestamp, body })
}

/// Decodes the first frame of `bytes`, returning the message and the number
/// of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(WireMessage, usize), ProtocolError> {
    let mut d = FrameDecoder::new();
    d.push(bytes);
    match d.next_message() {
        Some(r) => r.map(|m| (m, d.consumed as usize)),
        None => Err(d.truncation().unwrap_or(ProtocolError {
            offset: 0,
            kind: ProtocolErrorKind::Truncated { needed: 4, available: 0 },
            recoverable: false,
        })),
    }
}

/// Incremental decoder over a byte stream.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    /// Stream offset of `buf[0]`.
    consumed: u64,
    broken: bool,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes received but not yet decoded.
    pub fn pending(&self) -> usize {
        self.buf.len()
    }

    /// The next complete frame, or `None` if more bytes are needed. A
    /// malformed frame is skipped and reported; an oversize length prefix
    /// cannot be skipped and stops the decoder.
    pub fn next_message(&mut self) -> Option<Result<WireMessage, ProtocolError>> {
        if self.broken || self.buf.len() < 4 {
            return None;
        }
        let len = u32::from_be_bytes(self.buf[..4].try_into().unwrap());
        if len > MAX_FRAME_LEN {
            self.broken = true;
            return Some(Err(ProtocolError { offset: self.consumed, kind: ProtocolErrorKind::TooLarge(len), recoverable: false }));
        }
        let total = 4 + len as usize;
        if self.buf.len() < total {
            return None;
        }
        let result = decode_body(&self.buf[4..total], self.consumed + 4);
        self.buf.drain(..total);
        self.consumed += total as u64;
        Some(result)
    }

    /// The error for a stream that ended with a partial frame.
    pub fn truncation(&self) -> Option<ProtocolError> {
        if self.buf.is_empty() || self.broken {
            return None;
        }
        let needed = if self.buf.len() < 4 { 4 } else { 4 + u32::from_be_bytes(self.buf[..4].try_into().unwrap()) as usize };
        Some(ProtocolError {
            offset: self.consumed + self.buf.len() as u64,
            kind: ProtocolErrorKind::Truncated { needed, available: self.buf.len() },
            recoverable: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn heartbeat() -> WireMessage {
        WireMessage { sequence: 0, sim_timestamp: 0, body: Body::Event(None) }
    }

    #[test]
    fn heartbeat_is_the_minimal_frame() {
        let b = encode(&heartbeat());
        assert_eq!(b.len(), MIN_FRAME_LEN);
        assert_eq!(&b[4..], br#"{"kind":"event","sequence":0,"sim_timestamp":0}"#);
        assert_eq!(decode(&b).unwrap(), (heartbeat(), MIN_FRAME_LEN));
    }

    #[test]
    fn truncated_frame_reports_where_it_stopped() {
        let b = encode(&heartbeat());
        let err = decode(&b[..20]).unwrap_err();
        assert_eq!(err.offset, 20);
        assert_eq!(err.kind, ProtocolErrorKind::Truncated { needed: MIN_FRAME_LEN, available: 20 });
    }

    #[test]
    fn decoder_survives_a_bad_frame() {
        let mut d = FrameDecoder::new();
        let bad = br#"{"kind":"input","sequence":1,"sim_timestamp":5,"payload":{"grip_force":"x"}}"#;
        d.push(&(bad.len() as u32).to_be_bytes());
        d.push(bad);
        let good = encode(&heartbeat());
        d.push(&good[..10]);
        let err = d.next_message().unwrap().unwrap_err();
        assert!(err.recoverable && err.offset == 4, "{err}");
        assert!(d.next_message().is_none());
        d.push(&good[10..]);
        assert_eq!(d.next_message().unwrap().unwrap(), heartbeat());
    }

    #[test]
    fn json_error_offset_points_into_the_frame() {
        let body = br#"{"kind":"event","sequence":0,"sim_timestamp":0 oops}"#;
        let mut f = (body.len() as u32).to_be_bytes().to_vec();
        f.extend_from_slice(body);
        let err = decode(&f).unwrap_err();
        assert_eq!(err.offset, 4 + 47);
    }

    #[test]
    fn oversize_frame_stops_the_stream() {
        let mut d = FrameDecoder::new();
        d.push(&(MAX_FRAME_LEN + 1).to_be_bytes());
        let err = d.next_message().unwrap().unwrap_err();
        assert!(!err.recoverable);
        assert!(d.next_message().is_none());
    }

    #[test]
    fn missing_payload_is_an_error() {
        let body = br#"{"kind":"input","sequence":0,"sim_timestamp":0}"#;
        let mut f = (body.len() as u32).to_be_bytes().to_vec();
        f.extend_from_slice(body);
        assert_eq!(decode(&f).unwrap_err().kind, ProtocolErrorKind::MissingPayload("input"));
    }
}
