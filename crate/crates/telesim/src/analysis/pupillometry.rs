//! Pupil-diameter preprocessing: blink repair, outlier rejection, light-reflex
//! compensation, baseline correction and dilation aggregation.
//!
//! Series are `Option<f64>` per sample; `None` marks missing data (eye
//! closed, tracking lost, or a rejected gap).

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

pub const SAMPLE_RATE_HZ: f64 = 90.0;
pub const BASELINE_SAMPLES: usize = 90;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PupilError {
    #[error("trace has no valid samples")]
    UnusableTrace,
    #[error("trace is empty")]
    Empty,
    #[error("timestamps must increase strictly (index {0})")]
    NonMonotonic(usize),
    #[error("{what} has {got} samples, expected {expected}")]
    LengthMismatch { what: &'static str, got: usize, expected: usize },
    #[error("baseline needs {BASELINE_SAMPLES} valid samples, found {0}")]
    InsufficientBaseline(usize),
}

/// Missing-data runs whose span falls in `[min_ms, max_ms]` are blinks and
/// get interpolated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlinkWindow {
    pub min_ms: f64,
    pub max_ms: f64,
}

impl Default for BlinkWindow {
    fn default() -> Self {
        Self { min_ms: 400.0, max_ms: 600.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlinkCorrected {
    pub values: Vec<Option<f64>>,
    /// Samples left missing because their gap was not a blink.
    pub flagged: Vec<bool>,
    pub interpolated_runs: usize,
}

/// Linear interpolation across blink gaps.
///
/// A gap's span is the time between the valid samples on either side of
/// it. Gaps touching either end of the trace have no flank and are flagged.
pub fn correct_blinks(times_ms: &[f64], values: &[Option<f64>], window: BlinkWindow) -> Result<BlinkCorrected, PupilError> {
    check_lengths(times_ms, values.len(), "diameter")?;
    check_times(times_ms)?;
    if values.iter().all(Option::is_none) {
        return Err(PupilError::UnusableTrace);
    }
    let mut out = values.to_vec();
    let mut flagged = vec![false; values.len()];
    let mut runs = 0;
    let mut i = 0;
    while i < values.len() {
        if values[i].is_some() {
            i += 1;
            continue;
        }
        let start = i;
        while i < values.len() && values[i].is_none() {
            i += 1;
        }
        let flanks = (start.checked_sub(1), (i < values.len()).then_some(i));
        let fill = match flanks {
            (Some(l), Some(r)) => {
                let span = times_ms[r] - times_ms[l];
                (span >= window.min_ms && span <= window.max_ms).then_some((l, r))
            }
            _ => None,
        };
        match fill {
            Some((l, r)) => {
                let (t0, t1) = (times_ms[l], times_ms[r]);
                let (v0, v1) = (values[l].unwrap(), values[r].unwrap());
                for k in start..i {
                    let w = (times_ms[k] - t0) / (t1 - t0);
                    out[k] = Some(v0 + (v1 - v0) * w);
                }
                runs += 1;
            }
            None => flagged[start..i].iter_mut().for_each(|f| *f = true),
        }
    }
    Ok(BlinkCorrected { values: out, flagged, interpolated_runs: runs })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HampelParams {
    /// Samples on each side of the centre.
    pub half_window: usize,
    pub n_sigma: f64,
}

impl Default for HampelParams {
    fn default() -> Self {
        Self { half_window: 15, n_sigma: 3.0 }
    }
}

/// Consistency constant turning a MAD into a Gaussian standard deviation.
pub const MAD_SCALE: f64 = 1.4826;

/// One Hampel pass. Windows are truncated at the ends of the series and
/// skip missing samples; missing samples stay missing.
pub fn hampel_pass(values: &[Option<f64>], params: HampelParams) -> Vec<Option<f64>> {
    let n = values.len();
    let k = params.half_window;
    let mut out = values.to_vec();
    // Sorted contents of the current window, maintained incrementally.
    let mut window: Vec<f64> = Vec::with_capacity(2 * k + 1);
    let mut lo = 0usize;
    let mut hi = 0usize; // exclusive
    let mut deviations: Vec<f64> = Vec::with_capacity(2 * k + 1);
    for i in 0..n {
        let (want_lo, want_hi) = (i.saturating_sub(k), (i + k + 1).min(n));
        while hi < want_hi {
            if let Some(v) = values[hi] {
                let at = window.partition_point(|w| w.total_cmp(&v).is_lt());
                window.insert(at, v);
            }
            hi += 1;
        }
        while lo < want_lo {
            if let Some(v) = values[lo] {
                let at = window.partition_point(|w| w.total_cmp(&v).is_lt());
                window.remove(at);
            }
            lo += 1;
        }
        let Some(x) = values[i] else { continue };
        let m = median_sorted(&window);
        deviations.clear();
        deviations.extend(window.iter().map(|w| (w - m).abs()));
        deviations.sort_by(f64::total_cmp);
        let scale = MAD_SCALE * median_sorted(&deviations);
        if (x - m).abs() > params.n_sigma * scale {
            out[i] = Some(m);
        }
    }
    out
}

/// Hampel passes until nothing changes, so that filtering the output again
/// is a no-op. Gives up after `MAX_HAMPEL_PASSES`.
pub fn hampel_filter(values: &[Option<f64>], params: HampelParams) -> Vec<Option<f64>> {
    let mut cur = values.to_vec();
    for _ in 0..MAX_HAMPEL_PASSES {
        let next = hampel_pass(&cur, params);
        if next == cur {
            return cur;
        }
        cur = next;
    }
    log::warn!("hampel filter did not settle after {MAX_HAMPEL_PASSES} passes");
    cur
}

pub const MAX_HAMPEL_PASSES: usize = 64;

pub(crate) fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Luminance of one pixel from 0-255 channel values.
pub fn pixel_luminance([r, g, b]: [f64; 3]) -> f64 {
    (0.299 * r * r + 0.587 * g * g + 0.114 * b * b).sqrt()
}

/// Mean per-pixel luminance of a frame; zero for an empty frame.
pub fn frame_luminance(pixels: &[[f64; 3]]) -> f64 {
    if pixels.is_empty() {
        return 0.0;
    }
    pixels.iter().map(|p| pixel_luminance(*p)).sum::<f64>() / pixels.len() as f64
}

/// `a + b * exp(-c * L)`, mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LightResponse {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl LightResponse {
    pub fn eval(&self, luminance: f64) -> f64 {
        self.a + self.b * (-self.c * luminance).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflexFit {
    /// The exponential model was fitted and subtracted.
    Fitted,
    /// Luminance barely varies; only the mean was removed.
    DegenerateLuminance,
    /// The exponential term did not explain the data; only the mean was removed.
    NotSignificant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Compensated {
    pub values: Vec<Option<f64>>,
    pub model: LightResponse,
    pub fit: ReflexFit,
}

/// Range of the decay constant searched, per luminance unit.
pub const REFLEX_C_RANGE: (f64, f64) = (1e-4, 1.0);
/// Significance level the exponential term must reach to be subtracted.
pub const REFLEX_ALPHA: f64 = 1e-6;

/// Removes the luminance-driven part of the pupil trace.
///
/// `a` and `b` are solved linearly for each `c`; `c` is found by a log-spaced
/// grid followed by golden-section refinement. The exponential term is only
/// subtracted if an F test against the constant-only model is significant at
/// `REFLEX_ALPHA`; otherwise only the mean is removed.
pub fn compensate_light_reflex(values: &[Option<f64>], luminance: &[f64]) -> Result<Compensated, PupilError> {
    if values.is_empty() {
        return Err(PupilError::Empty);
    }
    check_lengths(luminance, values.len(), "luminance")?;
    let pts: Vec<(f64, f64)> = values
        .iter()
        .zip(luminance)
        .filter_map(|(v, l)| v.map(|v| (*l, v)))
        .collect();
    if pts.is_empty() {
        return Err(PupilError::UnusableTrace);
    }
    let n = pts.len() as f64;
    let mean = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let flat = LightResponse { a: mean, b: 0.0, c: 0.0 };
    let (lmin, lmax) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    let subtract = |model: LightResponse, fit| Compensated {
        values: values
            .iter()
            .zip(luminance)
            .map(|(v, l)| v.map(|v| v - model.eval(*l)))
            .collect(),
        model,
        fit,
    };
    if !(lmax - lmin > 1e-9) || pts.len() < 4 {
        log::warn!("luminance is degenerate; light reflex reduced to a constant");
        return Ok(subtract(flat, ReflexFit::DegenerateLuminance));
    }
    let ss0: f64 = pts.iter().map(|p| (p.1 - mean).powi(2)).sum();
    let (best, ss1) = fit_exponential(&pts);
    let significant = if ss0 <= 0.0 {
        false
    } else if ss1 <= ss0 * 1e-24 {
        true
    } else {
        let df2 = n - 3.0;
        let f = ((ss0 - ss1) / 2.0) / (ss1 / df2);
        FisherSnedecor::new(2.0, df2).map(|d| d.sf(f) < REFLEX_ALPHA).unwrap_or(false)
    };
    if significant {
        Ok(subtract(best, ReflexFit::Fitted))
    } else {
        Ok(subtract(flat, ReflexFit::NotSignificant))
    }
}

/// Least-squares `a`, `b` for fixed `c`, with the residual sum of squares.
fn solve_linear(pts: &[(f64, f64)], c: f64) -> Option<(LightResponse, f64)> {
    let n = pts.len() as f64;
    // Shifting luminance by its minimum keeps exp() in range; `b` absorbs it.
    let l0 = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let u: Vec<f64> = pts.iter().map(|p| (-c * (p.0 - l0)).exp()).collect();
    let ubar = u.iter().sum::<f64>() / n;
    let ybar = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut suu, mut suy) = (0.0, 0.0);
    for (ui, p) in u.iter().zip(pts) {
        suu += (ui - ubar) * (ui - ubar);
        suy += (ui - ubar) * (p.1 - ybar);
    }
    if !(suu > 1e-300) {
        return None;
    }
    let b = suy / suu;
    let a = ybar - b * ubar;
    let ss = u.iter().zip(pts).map(|(ui, p)| (p.1 - a - b * ui).powi(2)).sum();
    Some((LightResponse { a, b: b * (c * l0).exp(), c }, ss))
}

fn fit_exponential(pts: &[(f64, f64)]) -> (LightResponse, f64) {
    const GRID: usize = 240;
    let (lo, hi) = (REFLEX_C_RANGE.0.ln(), REFLEX_C_RANGE.1.ln());
    let at = |i: usize| (lo + (hi - lo) * i as f64 / (GRID - 1) as f64).exp();
    let cost = |c: f64| solve_linear(pts, c).map_or(f64::INFINITY, |s| s.1);
    let mut best_i = 0;
    let mut best = f64::INFINITY;
    for i in 0..GRID {
        let s = cost(at(i));
        if s < best {
            best = s;
            best_i = i;
        }
    }
    // Golden-section search on ln c within the neighbouring grid cells.
    let (mut a, mut b) = (at(best_i.saturating_sub(1)).ln(), at((best_i + 1).min(GRID - 1)).ln());
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let (mut f1, mut f2) = (cost(x1.exp()), cost(x2.exp()));
    for _ in 0..100 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = cost(x1.exp());
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = cost(x2.exp());
        }
        if (b - a).abs() < 1e-13 {
            break;
        }
    }
    let candidates = [at(best_i), x1.exp(), x2.exp()];
    candidates
        .iter()
        .filter_map(|c| solve_linear(pts, *c))
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .expect("grid point always solvable")
}

/// Subtracts the mean of the first `BASELINE_SAMPLES` valid samples.
pub fn baseline_correct(values: &[Option<f64>]) -> Result<(Vec<Option<f64>>, f64), PupilError> {
    let first: Vec<f64> = values.iter().flatten().take(BASELINE_SAMPLES).copied().collect();
    if first.len() < BASELINE_SAMPLES {
        return Err(PupilError::InsufficientBaseline(first.len()));
    }
    let base = first.iter().sum::<f64>() / BASELINE_SAMPLES as f64;
    Ok((values.iter().map(|v| v.map(|v| v - base)).collect(), base))
}

/// Sum of above-baseline dilation over the frames that dilated, correctly
/// rounded.
pub fn aggregate_dilation(values: &[Option<f64>]) -> f64 {
    exact_sum(values.iter().flatten().copied().filter(|d| *d > 0.0))
}

/// Correctly rounded sum (Shewchuk's non-overlapping partials).
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut kept = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                core::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }
    // Add the partials from the top, fixing the half-way rounding case.
    let Some(mut hi) = partials.pop() else { return 0.0 };
    let mut lo = 0.0;
    while let Some(y) = partials.pop() {
        let x = hi;
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if let Some(next) = partials.last() {
        if (lo < 0.0 && *next < 0.0) || (lo > 0.0 && *next > 0.0) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}

/// Dilation summed over samples with `start_ms <= t < end_ms`.
pub fn dilation_in_window(times_ms: &[f64], values: &[Option<f64>], start_ms: f64, end_ms: f64) -> f64 {
    exact_sum(
        times_ms
            .iter()
            .zip(values)
            .filter(|(t, _)| **t >= start_ms && **t < end_ms)
            .filter_map(|(_, v)| *v)
            .filter(|d| *d > 0.0),
    )
}

fn check_lengths(times: &[f64], n: usize, what: &'static str) -> Result<(), PupilError> {
    if times.len() != n {
        return Err(PupilError::LengthMismatch { what, got: n, expected: times.len() });
    }
    Ok(())
}

fn check_times(times_ms: &[f64]) -> Result<(), PupilError> {
    match times_ms.windows(2).position(|w| !(w[1] > w[0])) {
        Some(i) => Err(PupilError::NonMonotonic(i + 1)),
        None => Ok(()),
    }
}
