//! Paired condition comparisons laid out as result tables.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use telesim_core::delay::ConditionKind;

/// Significance level for calling a direction.
pub const ALPHA: f64 = 0.05;
/// Largest untied sample for which the exact signed-rank distribution is used.
pub const EXACT_LIMIT: usize = 25;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("need at least two condition groups, got {0}")]
    TooFewGroups(usize),
    #[error("group {0} is empty")]
    EmptyGroup(String),
    #[error("{a} and {b} are not paired: subjects differ")]
    Unpaired { a: String, b: String },
    #[error("samples differ in length ({0} vs {1})")]
    Length(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PairedTest {
    #[default]
    Wilcoxon,
    PairedT,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    Exact,
    NormalApproximation,
    StudentT,
    /// Every difference was zero.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Pairs used (nonzero differences for the signed-rank test).
    pub n: usize,
    pub method: TestMethod,
    /// Sign of the location shift of `x - y`: -1, 0 or 1.
    pub shift: i8,
}

/// Two-sided Wilcoxon signed-rank test on the pairs `(x[i], y[i])`.
///
/// Zero differences are dropped. Exact when at most `EXACT_LIMIT` pairs
/// remain and their magnitudes are untied; otherwise the normal
/// approximation with tie and continuity corrections.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<TestResult, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::Length(x.len(), y.len()));
    }
    let mut d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Ok(TestResult { statistic: 0.0, p_value: 1.0, n: 0, method: TestMethod::Degenerate, shift: 0 });
    }
    d.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    // Average ranks over runs of tied magnitudes.
    let mut ranks = vec![0.0; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && d[j].abs() == d[i].abs() {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        ranks[i..j].iter_mut().for_each(|r| *r = avg);
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let shift = if w_plus > mean {
        1
    } else if w_plus < mean {
        -1
    } else {
        0
    };
    let (p, method) = if n <= EXACT_LIMIT && tie_term == 0.0 {
        (exact_signed_rank_p(n, w_plus as usize), TestMethod::Exact)
    } else {
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let p = if var <= 0.0 {
            1.0
        } else {
            let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
            2.0 * Normal::new(0.0, 1.0).expect("unit normal").sf(z)
        };
        (p.min(1.0), TestMethod::NormalApproximation)
    };
    Ok(TestResult { statistic: w_plus, p_value: p, n, method, shift })
}

/// Two-sided exact p-value of `W+ = w` with `n` untied ranks.
fn exact_signed_rank_p(n: usize, w: usize) -> f64 {
    let max = n * (n + 1) / 2;
    // counts[s] = number of sign assignments with rank sum s.
    let mut counts = vec![0f64; max + 1];
    counts[0] = 1.0;
    for r in 1..=n {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    let total = 2f64.powi(n as i32);
    let lower: f64 = counts[..=w].iter().sum::<f64>() / total;
    let upper: f64 = counts[w..].iter().sum::<f64>() / total;
    (2.0 * lower.min(upper)).min(1.0)
}

/// Two-sided paired t test.
pub fn paired_t(x: &[f64], y: &[f64]) -> Result<TestResult, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::Length(x.len(), y.len()));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let n = d.len();
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let shift = (mean > 0.0) as i8 - (mean < 0.0) as i8;
    if n < 2 {
        return Ok(TestResult { statistic: 0.0, p_value: 1.0, n, method: TestMethod::Degenerate, shift: 0 });
    }
    let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
    if sd == 0.0 {
        let p = if mean == 0.0 { 1.0 } else { 0.0 };
        return Ok(TestResult { statistic: 0.0, p_value: p, n, method: TestMethod::Degenerate, shift });
    }
    let t = mean / (sd / nf.sqrt());
    let dist = StudentsT::new(0.0, 1.0, nf - 1.0).expect("positive degrees of freedom");
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TestResult { statistic: t, p_value: p, n, method: TestMethod::StudentT, shift })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Smaller,
    Larger,
    NoDifference,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Smaller => "Smaller",
            Direction::Larger => "Larger",
            Direction::NoDifference => "No Difference",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub a: ConditionKind,
    pub b: ConditionKind,
    /// How `a` compares with `b`.
    pub direction: Direction,
    pub result: TestResult,
}

impl ComparisonRow {
    pub fn label(&self) -> String {
        format!("{} vs {}", title(self.a), title(self.b))
    }

    /// `Smaller (p=0.009)`, with `p<0.001` below a thousandth.
    pub fn cell(&self) -> String {
        let p = self.result.p_value;
        if p < 0.001 {
            format!("{} (p<0.001)", self.direction)
        } else {
            format!("{} (p={p:.3})", self.direction)
        }
    }
}

fn title(kind: ConditionKind) -> &'static str {
    match kind {
        ConditionKind::Control => "Control",
        ConditionKind::Anchoring => "Anchoring",
        ConditionKind::Synchronous => "Synchronous",
        ConditionKind::Asynchronous => "Asynchronous",
    }
}

/// Row order of the comparison tables.
pub const TABLE_PAIRS: [(ConditionKind, ConditionKind); 6] = [
    (ConditionKind::Control, ConditionKind::Anchoring),
    (ConditionKind::Control, ConditionKind::Asynchronous),
    (ConditionKind::Control, ConditionKind::Synchronous),
    (ConditionKind::Anchoring, ConditionKind::Asynchronous),
    (ConditionKind::Anchoring, ConditionKind::Synchronous),
    (ConditionKind::Asynchronous, ConditionKind::Synchronous),
];

/// Metric values per condition, keyed by subject (the trial seed).
pub type Groups = BTreeMap<ConditionKind, BTreeMap<u64, f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub metric: String,
    pub test: PairedTest,
    pub rows: Vec<ComparisonRow>,
}

/// Paired test for each table pair whose two groups are both present.
pub fn compare_conditions(metric: &str, groups: &Groups, test: PairedTest) -> Result<ComparisonTable, StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::TooFewGroups(groups.len()));
    }
    if let Some((k, _)) = groups.iter().find(|(_, g)| g.is_empty()) {
        return Err(StatsError::EmptyGroup(k.to_string()));
    }
    let mut rows = Vec::new();
    for (a, b) in TABLE_PAIRS {
        let (Some(ga), Some(gb)) = (groups.get(&a), groups.get(&b)) else { continue };
        if !ga.keys().eq(gb.keys()) {
            return Err(StatsError::Unpaired { a: a.to_string(), b: b.to_string() });
        }
        let x: Vec<f64> = ga.values().copied().collect();
        let y: Vec<f64> = gb.values().copied().collect();
        let result = match test {
            PairedTest::Wilcoxon => wilcoxon_signed_rank(&x, &y)?,
            PairedTest::PairedT => paired_t(&x, &y)?,
        };
        let direction = match (result.p_value < ALPHA, result.shift) {
            (true, s) if s < 0 => Direction::Smaller,
            (true, s) if s > 0 => Direction::Larger,
            _ => Direction::NoDifference,
        };
        rows.push(ComparisonRow { a, b, direction, result });
    }
    Ok(ComparisonTable { metric: metric.to_string(), test, rows })
}
