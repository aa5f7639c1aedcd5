//! Synthetic pupil traces for scripted trials.
//!
//! The eye sees the delivered visual frames. Diameter is a light response to
//! the displayed luminance plus a load term that rises while the operator
//! waits for a grip change to be confirmed, lagged by a per-subject
//! latency, with sensor noise, spikes, blinks and tracking dropouts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use telesim_core::session::{LogEvent, PupilRow, TrialLog};
use telesim_core::world::VisualFrame;

use crate::analysis::pupillometry::{pixel_luminance, LightResponse};
use crate::analysis::sample_times;
use crate::config::PupilSection;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PupilModel {
    pub light: LightResponse,
    /// Dilation while waiting for a confirmation, mm.
    pub wait_load_mm: f64,
    /// Dilation while moving, mm.
    pub motion_load_mm: f64,
    /// Time constant of the load response, ms.
    pub load_tau_ms: f64,
    /// Per-subject response latency is drawn from this range, ms.
    pub latency_ms: (f64, f64),
    pub noise_sd_mm: f64,
    pub spike_probability: f64,
    /// Mean interval between blinks, ms.
    pub blink_interval_ms: f64,
    /// Fraction of eye closures that are long tracking losses instead of blinks.
    pub dropout_fraction: f64,
}

impl Default for PupilModel {
    fn default() -> Self {
        Self {
            light: LightResponse { a: 2.5, b: 3.5, c: 0.012 },
            wait_load_mm: 0.35,
            motion_load_mm: 0.1,
            load_tau_ms: 400.0,
            latency_ms: (150.0, 450.0),
            noise_sd_mm: 0.015,
            spike_probability: 0.004,
            blink_interval_ms: 3500.0,
            dropout_fraction: 0.15,
        }
    }
}

/// Display palette: region colour and its share of the screen.
const BACKGROUND: [f64; 3] = [70.0, 75.0, 90.0];
const TABLE: [f64; 3] = [170.0, 150.0, 120.0];
const ROBOT: [f64; 3] = [235.0, 235.0, 240.0];
const CUBE: [f64; 3] = [120.0, 160.0, 110.0];

/// Mean pixel luminance of the screen while `frame` is displayed. The arm
/// covers more of the view the higher and further left it is.
pub fn display_luminance(frame: Option<&VisualFrame>) -> f64 {
    let Some(f) = frame else {
        return pixel_luminance(BACKGROUND);
    };
    let p = f.end_effector.position;
    let robot = 0.10 + 0.6 * p.z.clamp(0.0, 0.5) + 0.15 * (p.y + 0.5).clamp(0.0, 1.0);
    let cubes = 0.01 * f.cubes.len() as f64 + if f.grasped.is_some() { 0.02 } else { 0.0 };
    let table = 0.35;
    let background = 1.0 - robot - cubes - table;
    [(BACKGROUND, background), (TABLE, table), (ROBOT, robot), (CUBE, cubes)]
        .iter()
        .map(|(rgb, share)| share * pixel_luminance(*rgb))
        .sum()
}

/// Fills the log's pupil rows when synthesis is on, seeded by the trial seed.
pub fn attach_pupil(log: &mut TrialLog, section: &PupilSection) {
    if section.synthesize {
        log.pupil = synthesize(log, &section.model, log.header.config.seed);
    }
}

/// 90 Hz pupil rows covering the whole trial. Deterministic in `seed`.
pub fn synthesize(log: &TrialLog, model: &PupilModel, seed: u64) -> Vec<PupilRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7075_7069_6c5f_7379);
    let times = sample_times(log.header.end_ms);
    let latency = rng.gen_range(model.latency_ms.0..=model.latency_ms.1);
    let noise = Normal::new(0.0, model.noise_sd_mm.max(0.0)).expect("finite sd");
    let gaps = Exp::new(1.0 / model.blink_interval_ms.max(1.0)).expect("positive rate");

    let waits: Vec<(f64, f64)> = log
        .events
        .iter()
        .filter_map(|e| match e.event {
            LogEvent::Confirmed { confirmation: c } => Some((c.commanded_at as f64, c.confirmed_at as f64)),
            _ => None,
        })
        .collect();
    let load_target = |t: f64| {
        if waits.iter().any(|(a, b)| t >= *a && t < *b) {
            return model.wait_load_mm;
        }
        // Moving if the most recent input had any motion.
        let idx = log.inputs.partition_point(|r| (r.input.timestamp as f64) <= t);
        match idx.checked_sub(1).map(|i| &log.inputs[i].input) {
            Some(i) if i.is_motion() => model.motion_load_mm,
            _ => 0.0,
        }
    };

    // Eye closures: (start, end) in ms.
    let mut closures = Vec::new();
    let end = log.header.end_ms as f64;
    let mut t = 1500.0 + gaps.sample(&mut rng);
    while t < end {
        let len = if rng.gen_bool(model.dropout_fraction.clamp(0.0, 1.0)) {
            if rng.gen_bool(0.5) {
                rng.gen_range(100.0..250.0)
            } else {
                rng.gen_range(700.0..900.0)
            }
        } else {
            rng.gen_range(390.0..580.0)
        };
        closures.push((t, t + len));
        t += len + 800.0 + gaps.sample(&mut rng);
    }

    let mut order: Vec<usize> = (0..log.visual.len()).filter(|i| log.visual[*i].delivered_ms.is_some()).collect();
    order.sort_by_key(|i| (log.visual[*i].delivered_ms, log.visual[*i].sequence));
    let mut shown = 0usize;
    let mut load = 0.0;
    let mut rows = Vec::with_capacity(times.len());
    let dt = 1000.0 / 90.0;
    for tm in &times {
        let t = *tm as f64;
        while shown < order.len() && log.visual[order[shown]].delivered_ms.unwrap() <= *tm {
            shown += 1;
        }
        let frame = shown.checked_sub(1).map(|i| &log.visual[order[i]].frame);
        let lum = display_luminance(frame);
        // First-order response to the load, evaluated at t - latency.
        let alpha = 1.0 - (-dt / model.load_tau_ms.max(1e-9)).exp();
        load += alpha * (load_target(t - latency) - load);
        let mut d = model.light.eval(lum) + load + noise.sample(&mut rng);
        if rng.gen_bool(model.spike_probability.clamp(0.0, 1.0)) {
            let s = rng.gen_range(0.8..1.5);
            d += if rng.gen_bool(0.5) { s } else { -s };
        }
        let closed = closures.iter().any(|(a, b)| t >= *a && t < *b);
        rows.push(PupilRow {
            time_ms: *tm,
            diameter: (!closed).then_some(d.clamp(1.5, 9.0)),
            luminance: lum,
        });
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use telesim_core::delay::{make_condition, ConditionKind};
    use telesim_core::operator::{OperatorPolicy, PolicyKind};
    use telesim_core::session::{run_scripted, TrialConfig};

    #[test]
    fn trace_is_deterministic_and_plausible() {
        let c = make_condition(ConditionKind::Anchoring, 500).unwrap();
        let log = run_scripted(&TrialConfig::scripted(c, OperatorPolicy::new(PolicyKind::WaitForConfirmation, 2), 2)).unwrap();
        let a = synthesize(&log, &PupilModel::default(), 2);
        let b = synthesize(&log, &PupilModel::default(), 2);
        assert_eq!(a, b);
        assert_eq!(a.len(), sample_times(log.header.end_ms).len());
        assert!(a.iter().flat_map(|r| r.diameter).all(|d| d > 1.0 && d < 10.0));
        assert!(a.iter().any(|r| r.diameter.is_none()));
        let lums: Vec<f64> = a.iter().map(|r| r.luminance).collect();
        let spread = lums.iter().cloned().fold(f64::MIN, f64::max) - lums.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread > 10.0, "luminance spread {spread}");
    }
}
