//! Per-trial metrics and cross-condition statistics.

pub mod perception;
pub mod pupillometry;
pub mod sax;
pub mod stats;

use serde::{Deserialize, Serialize};
use telesim_core::delay::{ConditionSpec, Millis};
use telesim_core::operator::frame_time;
use telesim_core::session::{trial_time_on_task, EndReason, LogEvent, OperatorSpec, TrialLog};
use telesim_core::world::{placement_accuracy, ObjectId};

use crate::analysis::perception::questionnaire_deltas;
use crate::analysis::pupillometry::{
    baseline_correct, compensate_light_reflex, correct_blinks, dilation_in_window, hampel_filter, BlinkWindow,
    HampelParams, LightResponse, PupilError, ReflexFit,
};
use crate::analysis::sax::{sax_align, SaxAlignment, SaxError};

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Pupil(#[from] PupilError),
    #[error(transparent)]
    Sax(#[from] SaxError),
}

/// Preprocessing stages, in the order they always run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    BlinkCorrection,
    Hampel,
    LightReflex,
    Baseline,
    SaxAlignment,
    Aggregation,
}

pub const PIPELINE: [Stage; 6] = [
    Stage::BlinkCorrection,
    Stage::Hampel,
    Stage::LightReflex,
    Stage::Baseline,
    Stage::SaxAlignment,
    Stage::Aggregation,
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PupilParams {
    pub blink: BlinkWindow,
    pub hampel: HampelParams,
    /// Samples per SAX segment.
    pub sax_segment: usize,
    pub sax_alphabet: usize,
    /// Largest response latency the alignment considers, ms.
    pub max_latency_ms: f64,
    /// Nominal length of the pickup and drop-off stages, s.
    pub stage_s: f64,
}

impl Default for PupilParams {
    fn default() -> Self {
        Self {
            blink: BlinkWindow::default(),
            hampel: HampelParams::default(),
            sax_segment: 3,
            sax_alphabet: 8,
            max_latency_ms: 1000.0,
            stage_s: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PupilResult {
    pub stages: Vec<Stage>,
    pub times_ms: Vec<f64>,
    /// Baseline-corrected dilation, mm.
    pub dilation: Vec<Option<f64>>,
    pub baseline_mm: f64,
    pub interpolated_blinks: usize,
    pub flagged_samples: usize,
    pub reflex: LightResponse,
    pub reflex_fit: ReflexFit,
    pub alignment: SaxAlignment,
    /// Response latency found by the alignment, ms.
    pub offset_ms: f64,
    pub pickup_window_ms: (f64, f64),
    pub dropoff_window_ms: (f64, f64),
    pub d_pickup: f64,
    pub d_dropoff: f64,
}

/// The event template pupil responses are aligned against: 1 while the
/// operator waits for a grip change to be confirmed, 0 otherwise.
pub fn wait_template(log: &TrialLog, times_ms: &[f64]) -> Vec<f64> {
    let waits: Vec<(f64, f64)> = log
        .events
        .iter()
        .filter_map(|e| match e.event {
            LogEvent::Confirmed { confirmation: c } => Some((c.commanded_at as f64, c.confirmed_at as f64)),
            _ => None,
        })
        .collect();
    times_ms
        .iter()
        .map(|t| waits.iter().any(|(a, b)| t >= a && t < b) as u8 as f64)
        .collect()
}

/// Stage windows: one nominal stage length after motion onset and one
/// before the last placement, each capped at half the task span so they
/// do not overlap.
pub fn stage_windows(log: &TrialLog, stage_s: f64) -> ((f64, f64), (f64, f64)) {
    let onset = log
        .events
        .iter()
        .find(|e| e.event == LogEvent::ActionStart)
        .map_or(0.0, |e| e.time_ms as f64);
    let end = log
        .events
        .iter()
        .rev()
        .find(|e| matches!(e.event, LogEvent::Placed { .. }))
        .map_or(log.header.end_ms as f64, |e| e.time_ms as f64);
    let len = (stage_s * 1000.0).min((end - onset).max(0.0) / 2.0);
    ((onset, onset + len), (end - len, end))
}

/// Runs the fixed preprocessing chain over a trial's pupil rows.
pub fn process_pupil(log: &TrialLog, params: &PupilParams) -> Result<PupilResult, AnalysisError> {
    let times: Vec<f64> = log.pupil.iter().map(|p| p.time_ms as f64).collect();
    let raw: Vec<Option<f64>> = log.pupil.iter().map(|p| p.diameter).collect();
    let lum: Vec<f64> = log.pupil.iter().map(|p| p.luminance).collect();
    if raw.is_empty() {
        return Err(PupilError::Empty.into());
    }
    let mut stages = Vec::with_capacity(PIPELINE.len());

    let blinks = correct_blinks(&times, &raw, params.blink)?;
    stages.push(Stage::BlinkCorrection);
    let filtered = hampel_filter(&blinks.values, params.hampel);
    stages.push(Stage::Hampel);
    let comp = compensate_light_reflex(&filtered, &lum)?;
    stages.push(Stage::LightReflex);
    let (dilation, baseline) = baseline_correct(&comp.values)?;
    stages.push(Stage::Baseline);

    let filled: Vec<f64> = dilation.iter().map(|v| v.unwrap_or(0.0)).collect();
    let template = wait_template(log, &times);
    let seg = params.sax_segment.max(1);
    let word = (filled.len() / seg).max(1);
    let sample_ms = 1000.0 / telesim_core::operator::OPERATOR_RATE_HZ as f64;
    let max_lag = (params.max_latency_ms / (sample_ms * seg as f64)).round() as usize;
    let alignment = sax_align(&filled, &template, word, params.sax_alphabet, max_lag)?;
    let offset_ms = alignment.offset_samples as f64 * filled.len() as f64 / (word * seg) as f64 * sample_ms;
    stages.push(Stage::SaxAlignment);

    let (p, d) = stage_windows(log, params.stage_s);
    let pickup = (p.0 + offset_ms, p.1 + offset_ms);
    let dropoff = (d.0 + offset_ms, d.1 + offset_ms);
    let d_pickup = dilation_in_window(&times, &dilation, pickup.0, pickup.1);
    let d_dropoff = dilation_in_window(&times, &dilation, dropoff.0, dropoff.1);
    stages.push(Stage::Aggregation);
    log::debug!("pupil pipeline: {stages:?}");

    Ok(PupilResult {
        stages,
        times_ms: times,
        dilation,
        baseline_mm: baseline,
        interpolated_blinks: blinks.interpolated_runs,
        flagged_samples: blinks.flagged.iter().filter(|f| **f).count(),
        reflex: comp.model,
        reflex_fit: comp.fit,
        alignment,
        offset_ms,
        pickup_window_ms: pickup,
        dropoff_window_ms: dropoff,
        d_pickup,
        d_dropoff,
    })
}

/// Placement accuracy of each placed cube, m.
pub fn placement_accuracies(log: &TrialLog) -> Vec<(ObjectId, f64)> {
    let scene = &log.header.config.scene;
    let mut out = Vec::new();
    for e in &log.events {
        let LogEvent::Placed { cube, target } = e.event else { continue };
        let settled = log.events.iter().rev().find_map(|s| match s.event {
            LogEvent::Settled { cube: c, position } if c == cube => Some(position),
            _ => None,
        });
        if let (Some(p), Some(t)) = (settled, scene.object(target)) {
            out.push((cube, placement_accuracy(&p.into(), &t.pose.position)));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub trial: String,
    pub condition: ConditionSpec,
    /// Pairing key across conditions.
    pub seed: u64,
    pub operator: String,
    pub end_reason: EndReason,
    pub end_ms: Millis,
    pub cubes_placed: usize,
    /// Mean over placed cubes, m.
    pub pa_m: Option<f64>,
    pub tot_s: Option<f64>,
    pub delta_v_ms: Option<f64>,
    pub delta_h_ms: Option<f64>,
    pub delta_gap_ms: Option<f64>,
    pub d_pickup: Option<f64>,
    pub d_dropoff: Option<f64>,
    pub pupil_offset_ms: Option<f64>,
    pub tlx_total: Option<f64>,
    pub tlx_confidence: Option<f64>,
    pub tlx_frustration: Option<f64>,
}

pub fn trial_metrics(name: &str, log: &TrialLog, params: &PupilParams) -> MetricsReport {
    let cfg = &log.header.config;
    let pa = placement_accuracies(log);
    let deltas = questionnaire_deltas(&log.post, &cfg.condition);
    let pupil = if log.pupil.is_empty() {
        None
    } else {
        match process_pupil(log, params) {
            Ok(p) => Some(p),
            Err(e) => {
                log::warn!("{name}: pupil trace unusable: {e}");
                None
            }
        }
    };
    MetricsReport {
        trial: name.to_string(),
        condition: cfg.condition,
        seed: cfg.seed,
        operator: match &cfg.operator {
            OperatorSpec::Scripted(p) => p.kind.name().to_string(),
            OperatorSpec::Live { .. } => "live".to_string(),
        },
        end_reason: log.header.end_reason,
        end_ms: log.header.end_ms,
        cubes_placed: pa.len(),
        pa_m: (!pa.is_empty()).then(|| pa.iter().map(|p| p.1).sum::<f64>() / pa.len() as f64),
        tot_s: (!pa.is_empty()).then(|| trial_time_on_task(log)),
        delta_v_ms: deltas.delta_v,
        delta_h_ms: deltas.delta_h,
        delta_gap_ms: deltas.delta_gap,
        d_pickup: pupil.as_ref().map(|p| p.d_pickup),
        d_dropoff: pupil.as_ref().map(|p| p.d_dropoff),
        pupil_offset_ms: pupil.as_ref().map(|p| p.offset_ms),
        tlx_total: log.post.tlx_total,
        tlx_confidence: log.post.tlx_confidence,
        tlx_frustration: log.post.tlx_frustration,
    }
}

/// Timestamps of the 90 Hz samples before `end_ms`.
pub fn sample_times(end_ms: Millis) -> Vec<Millis> {
    (0..).map(frame_time).take_while(|t| *t < end_ms).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use telesim_core::delay::{make_condition, ConditionKind};
    use telesim_core::operator::{OperatorPolicy, PolicyKind};
    use telesim_core::session::{run_scripted, TrialConfig};

    #[test]
    fn scripted_trial_metrics() {
        let c = make_condition(ConditionKind::Synchronous, 500).unwrap();
        let log = run_scripted(&TrialConfig::scripted(c, OperatorPolicy::new(PolicyKind::WaitForConfirmation, 3), 3)).unwrap();
        let m = trial_metrics("t", &log, &PupilParams::default());
        assert_eq!(m.cubes_placed, 4);
        let gate = log.header.config.scene.physics.gate_margin;
        assert!(m.pa_m.unwrap() < 0.03 + gate, "{:?}", m.pa_m);
        assert!(m.tot_s.unwrap() > 10.0);
        assert_eq!(m.delta_v_ms, None);
        assert_eq!(m.d_pickup, None);
    }

    #[test]
    fn windows_do_not_overlap() {
        let c = make_condition(ConditionKind::Control, 0).unwrap();
        let log = run_scripted(&TrialConfig::scripted(c, OperatorPolicy::new(PolicyKind::WaitForConfirmation, 1), 1)).unwrap();
        let (p, d) = stage_windows(&log, 20.0);
        assert!(p.1 <= d.0 + 1e-9);
        assert!(p.0 >= 0.0 && d.1 <= log.header.end_ms as f64);
    }

    #[test]
    fn sample_grid() {
        let t = sample_times(1000);
        assert_eq!(t.len(), 90);
        assert_eq!(t[1], 11);
    }
}
