//! Symbolic aggregate approximation and symbol-level alignment.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SaxError {
    #[error("series of {len} samples is shorter than word length {word_length}")]
    TooShort { len: usize, word_length: usize },
    #[error("alphabet size must be between 2 and 26, got {0}")]
    Alphabet(usize),
    #[error("word length must be positive")]
    WordLength,
    #[error("series and template lengths differ ({0} vs {1})")]
    Length(usize, usize),
}

/// The `alphabet_size - 1` standard-normal quantiles splitting the line into
/// equiprobable regions.
pub fn gaussian_breakpoints(alphabet_size: usize) -> Result<Vec<f64>, SaxError> {
    if !(2..=26).contains(&alphabet_size) {
        return Err(SaxError::Alphabet(alphabet_size));
    }
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    Ok((1..alphabet_size)
        .map(|i| {
            let q = n.inverse_cdf(i as f64 / alphabet_size as f64);
            // The middle quantile of an even alphabet is exactly zero.
            if 2 * i == alphabet_size {
                0.0
            } else {
                q
            }
        })
        .collect())
}

/// Zero-mean, unit-variance copy; a constant series maps to zeros.
pub fn z_normalize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(sd > 1e-12) {
        return vec![0.0; x.len()];
    }
    x.iter().map(|v| (v - mean) / sd).collect()
}

/// Segment `j` of `w` covers samples `[j*n/w, (j+1)*n/w)`.
pub fn paa(x: &[f64], word_length: usize) -> Vec<f64> {
    let n = x.len();
    (0..word_length)
        .map(|j| {
            let (a, b) = (j * n / word_length, (j + 1) * n / word_length);
            x[a..b].iter().sum::<f64>() / (b - a) as f64
        })
        .collect()
}

/// Symbol index of a value: the number of breakpoints at or below it.
pub fn symbol(value: f64, breakpoints: &[f64]) -> u8 {
    breakpoints.partition_point(|b| *b <= value) as u8
}

pub fn sax_word(x: &[f64], word_length: usize, alphabet_size: usize) -> Result<Vec<u8>, SaxError> {
    if word_length == 0 {
        return Err(SaxError::WordLength);
    }
    if x.len() < word_length {
        return Err(SaxError::TooShort { len: x.len(), word_length });
    }
    let bp = gaussian_breakpoints(alphabet_size)?;
    Ok(paa(&z_normalize(x), word_length).into_iter().map(|v| symbol(v, &bp)).collect())
}

pub fn word_to_string(word: &[u8]) -> String {
    word.iter().map(|s| (b'a' + s) as char).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaxAlignment {
    pub word: String,
    pub template_word: String,
    /// Lag in segments; positive when the series trails the template.
    pub lag_segments: i64,
    /// Lag converted to samples.
    pub offset_samples: i64,
    pub correlation: f64,
}

/// Aligns `series` to `template` by the lag maximising the correlation of
/// their SAX words, searched over `±max_lag_segments`. Ties go to the
/// smallest absolute lag.
///
/// For each lag the overlapping segments of both series are z-normalized
/// and symbolized on their own, so a pure shift gives identical words over
/// the overlap whatever the samples outside it.
pub fn sax_align(
    series: &[f64],
    template: &[f64],
    word_length: usize,
    alphabet_size: usize,
    max_lag_segments: usize,
) -> Result<SaxAlignment, SaxError> {
    if series.len() != template.len() {
        return Err(SaxError::Length(series.len(), template.len()));
    }
    let a = sax_word(series, word_length, alphabet_size)?;
    let b = sax_word(template, word_length, alphabet_size)?;
    let bp = gaussian_breakpoints(alphabet_size)?;
    let (pa, pb) = (paa(series, word_length), paa(template, word_length));
    let max_lag = max_lag_segments.min(word_length.saturating_sub(2)) as i64;
    let mut best = (0i64, f64::NEG_INFINITY);
    for mag in 0..=max_lag {
        for lag in if mag == 0 { vec![0] } else { vec![-mag, mag] } {
            let r = lagged_correlation(&pa, &pb, lag, &bp);
            if r > best.1 {
                best = (lag, r);
            }
        }
    }
    let seg = series.len() as f64 / word_length as f64;
    Ok(SaxAlignment {
        word: word_to_string(&a),
        template_word: word_to_string(&b),
        lag_segments: best.0,
        offset_samples: (best.0 as f64 * seg).round() as i64,
        correlation: if best.1.is_finite() { best.1 } else { 0.0 },
    })
}

/// Pearson correlation of the symbols of `x[i + lag]` and `y[i]` over their
/// overlap.
fn lagged_correlation(x: &[f64], y: &[f64], lag: i64, breakpoints: &[f64]) -> f64 {
    let n = x.len() as i64;
    let (xs, ys): (Vec<f64>, Vec<f64>) = (0..n)
        .filter_map(|i| {
            let j = i + lag;
            (0..n).contains(&j).then(|| (x[j as usize], y[i as usize]))
        })
        .unzip();
    if xs.len() < 2 {
        return 0.0;
    }
    let sym = |v: &[f64]| -> Vec<f64> { z_normalize(v).into_iter().map(|z| symbol(z, breakpoints) as f64).collect() };
    let (sx, sy) = (sym(&xs), sym(&ys));
    let m = sx.len() as f64;
    let (mx, my) = (sx.iter().sum::<f64>() / m, sy.iter().sum::<f64>() / m);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in sx.iter().zip(&sy) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}
