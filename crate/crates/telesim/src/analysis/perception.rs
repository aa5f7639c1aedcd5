//! Perceived versus actual delays.

use serde::{Deserialize, Serialize};
use telesim_core::delay::ConditionSpec;
use telesim_core::session::Questionnaire;

/// Visual delay, haptic delay and visuomotor gap, ms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayTriple {
    pub visual_ms: f64,
    pub haptic_ms: f64,
    pub gap_ms: f64,
}

impl DelayTriple {
    /// The delays a condition actually imposes; the gap is their absolute difference.
    pub fn actual(condition: &ConditionSpec) -> Self {
        Self {
            visual_ms: condition.visual_delay_ms as f64,
            haptic_ms: condition.haptic_delay_ms as f64,
            gap_ms: condition.visuomotor_gap_ms() as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerceptionReport {
    pub delay_vp: f64,
    pub delay_va: f64,
    pub delay_hp: f64,
    pub delay_ha: f64,
    pub gap_p: f64,
    pub gap_a: f64,
    pub delta_v: f64,
    pub delta_h: f64,
    pub delta_gap: f64,
}

/// Signed perceived-minus-actual differences. Negative means less delay was
/// perceived than imposed.
pub fn perception_deltas(perceived: DelayTriple, actual: DelayTriple) -> PerceptionReport {
    PerceptionReport {
        delay_vp: perceived.visual_ms,
        delay_va: actual.visual_ms,
        delay_hp: perceived.haptic_ms,
        delay_ha: actual.haptic_ms,
        gap_p: perceived.gap_ms,
        gap_a: actual.gap_ms,
        delta_v: perceived.visual_ms - actual.visual_ms,
        delta_h: perceived.haptic_ms - actual.haptic_ms,
        delta_gap: perceived.gap_ms - actual.gap_ms,
    }
}

/// Per-field deltas from a questionnaire; unanswered items stay missing.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PartialDeltas {
    pub delta_v: Option<f64>,
    pub delta_h: Option<f64>,
    pub delta_gap: Option<f64>,
}

pub fn questionnaire_deltas(post: &Questionnaire, condition: &ConditionSpec) -> PartialDeltas {
    let actual = DelayTriple::actual(condition);
    PartialDeltas {
        delta_v: post.perceived_visual_ms.map(|p| p - actual.visual_ms),
        delta_h: post.perceived_haptic_ms.map(|p| p - actual.haptic_ms),
        delta_gap: post.perceived_gap_ms.map(|p| p - actual.gap_ms),
    }
}
