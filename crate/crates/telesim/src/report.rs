//! Analysis reports: per-trial metrics and condition comparison tables.
//!
//! `telesim analyze` writes into the report directory:
//!
//! - `metrics.csv` / `metrics.json`: one row per trial;
//! - `comparisons.txt`: a table per visual delay level (control trials join
//!   every level) and one over subject means across levels, with the six
//!   condition pairs as rows and one column per metric;
//! - `comparisons.json`: the same tables with test statistics.
//!
//! Trials are paired across conditions by seed. A metric is compared only
//! over seeds that have a value in every condition of the table.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use telesim_core::delay::{ConditionKind, Millis};

use crate::analysis::stats::{compare_conditions, ComparisonTable, Groups, PairedTest, TABLE_PAIRS};
use crate::analysis::{trial_metrics, MetricsReport, PupilParams};
use crate::logio::{read_log, LogError};

pub type MetricFn = fn(&MetricsReport) -> Option<f64>;

/// Compared metrics, in column order.
pub const METRICS: [(&str, MetricFn); 10] = [
    ("PA (m)", |m| m.pa_m),
    ("ToT (s)", |m| m.tot_s),
    ("Δv (ms)", |m| m.delta_v_ms),
    ("Δh (ms)", |m| m.delta_h_ms),
    ("Δgap (ms)", |m| m.delta_gap_ms),
    ("D pickup", |m| m.d_pickup),
    ("D drop-off", |m| m.d_dropoff),
    ("TLX total", |m| m.tlx_total),
    ("TLX confidence", |m| m.tlx_confidence),
    ("TLX frustration", |m| m.tlx_frustration),
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelTables {
    /// Visual delay of the non-control conditions; `None` pools all levels.
    pub visual_delay_ms: Option<Millis>,
    pub tables: Vec<ComparisonTable>,
    /// Metrics left out, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Seeds with a value in every group, and the groups cut down to them.
fn paired_only(groups: Groups) -> Groups {
    let mut common: Option<BTreeSet<u64>> = None;
    for g in groups.values() {
        let keys: BTreeSet<u64> = g.keys().copied().collect();
        common = Some(match common {
            None => keys,
            Some(c) => c.intersection(&keys).copied().collect(),
        });
    }
    let common = common.unwrap_or_default();
    groups
        .into_iter()
        .map(|(k, g)| (k, g.into_iter().filter(|(s, _)| common.contains(s)).collect()))
        .collect()
}

fn tables_for(rows: &[&MetricsReport], level: Option<Millis>, test: PairedTest) -> LevelTables {
    let mut tables = Vec::new();
    let mut skipped = Vec::new();
    for (name, get) in METRICS {
        // Mean per (condition, seed), which is the value itself within a level.
        let mut sums: BTreeMap<(ConditionKind, u64), (f64, usize)> = BTreeMap::new();
        for m in rows {
            if let Some(v) = get(m).filter(|v| v.is_finite()) {
                let e = sums.entry((m.condition.kind, m.seed)).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
        let mut groups: Groups = BTreeMap::new();
        for ((k, seed), (s, n)) in sums {
            groups.entry(k).or_default().insert(seed, s / n as f64);
        }
        let groups = paired_only(groups);
        let n = groups.values().next().map_or(0, BTreeMap::len);
        if groups.len() < 2 || n < 2 {
            let why = if groups.is_empty() {
                "no values in these logs".to_string()
            } else {
                format!("{} condition(s) with {n} paired seed(s)", groups.len())
            };
            skipped.push((name.to_string(), why));
            continue;
        }
        match compare_conditions(name, &groups, test) {
            Ok(t) => tables.push(t),
            Err(e) => skipped.push((name.to_string(), e.to_string())),
        }
    }
    LevelTables { visual_delay_ms: level, tables, skipped }
}

/// Comparison tables per visual delay level, then pooled over levels.
pub fn build_tables(metrics: &[MetricsReport], test: PairedTest) -> Vec<LevelTables> {
    let levels: BTreeSet<Millis> = metrics
        .iter()
        .filter(|m| m.condition.kind != ConditionKind::Control)
        .map(|m| m.condition.visual_delay_ms)
        .collect();
    let mut out = Vec::new();
    for level in &levels {
        let rows: Vec<&MetricsReport> = metrics
            .iter()
            .filter(|m| m.condition.kind == ConditionKind::Control || m.condition.visual_delay_ms == *level)
            .collect();
        out.push(tables_for(&rows, Some(*level), test));
    }
    let all: Vec<&MetricsReport> = metrics.iter().collect();
    out.push(tables_for(&all, None, test));
    out
}

/// Plain-text tables: condition pairs down, metrics across.
pub fn render_tables(levels: &[LevelTables]) -> String {
    let mut s = String::new();
    for lt in levels {
        let scope = match lt.visual_delay_ms {
            Some(v) => format!("visual delay {v} ms"),
            None => "all delay levels (subject means)".to_string(),
        };
        let test = match lt.tables.first().map(|t| t.test) {
            Some(PairedTest::PairedT) => "paired t-test",
            _ => "Wilcoxon signed-rank",
        };
        let _ = writeln!(s, "== {scope}; {test}, two-sided, paired by seed");
        if lt.tables.is_empty() {
            let _ = writeln!(s, "(no comparable metrics)");
        } else {
            let mut header = vec!["Comparison".to_string()];
            header.extend(lt.tables.iter().map(|t| t.metric.clone()));
            let mut grid = vec![header];
            for (a, b) in TABLE_PAIRS {
                let Some(label) = lt
                    .tables
                    .iter()
                    .flat_map(|t| &t.rows)
                    .find(|r| r.a == a && r.b == b)
                    .map(|r| r.label())
                else {
                    continue;
                };
                let mut line = vec![label];
                for t in &lt.tables {
                    line.push(t.rows.iter().find(|r| r.a == a && r.b == b).map_or_else(|| "-".into(), |r| r.cell()));
                }
                grid.push(line);
            }
            let widths: Vec<usize> =
                (0..grid[0].len()).map(|c| grid.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
            for (i, row) in grid.iter().enumerate() {
                let cells: Vec<String> =
                    row.iter().zip(&widths).map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count()))).collect();
                let _ = writeln!(s, "| {} |", cells.join(" | "));
                if i == 0 {
                    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                    let _ = writeln!(s, "|-{}-|", rule.join("-|-"));
                }
            }
        }
        let mut by_reason: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (m, why) in &lt.skipped {
            by_reason.entry(why).or_default().push(m);
        }
        for (why, ms) in by_reason {
            let _ = writeln!(s, "  not compared ({why}): {}", ms.join(", "));
        }
        s.push('\n');
    }
    s
}

const CSV_HEADER: [&str; 21] = [
    "trial",
    "condition",
    "visual_delay_ms",
    "haptic_delay_ms",
    "onset_delay_ms",
    "seed",
    "operator",
    "end_reason",
    "end_ms",
    "cubes_placed",
    "pa_m",
    "tot_s",
    "delta_v_ms",
    "delta_h_ms",
    "delta_gap_ms",
    "d_pickup",
    "d_dropoff",
    "pupil_offset_ms",
    "tlx_total",
    "tlx_confidence",
    "tlx_frustration",
];

fn cell(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:?}"))
}

pub fn metrics_csv(metrics: &[MetricsReport]) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for m in metrics {
        let c = &m.condition;
        w.write_record([
            m.trial.clone(),
            c.kind.to_string(),
            c.visual_delay_ms.to_string(),
            c.haptic_delay_ms.to_string(),
            c.onset_delay_ms.to_string(),
            m.seed.to_string(),
            m.operator.clone(),
            m.end_reason.to_string(),
            m.end_ms.to_string(),
            m.cubes_placed.to_string(),
            cell(m.pa_m),
            cell(m.tot_s),
            cell(m.delta_v_ms),
            cell(m.delta_h_ms),
            cell(m.delta_gap_ms),
            cell(m.d_pickup),
            cell(m.d_dropoff),
            cell(m.pupil_offset_ms),
            cell(m.tlx_total),
            cell(m.tlx_confidence),
            cell(m.tlx_frustration),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("no logs given")]
    NoLogs,
}

/// Reads every log and computes its metrics, in parallel. Names are the log
/// directory names.
pub fn load_metrics(dirs: &[PathBuf], params: &PupilParams) -> Result<Vec<MetricsReport>, ReportError> {
    if dirs.is_empty() {
        return Err(ReportError::NoLogs);
    }
    let workers = std::thread::available_parallelism().map_or(4, |n| n.get()).min(dirs.len());
    let chunk = dirs.len().div_ceil(workers);
    let results: Vec<Result<Vec<MetricsReport>, ReportError>> = std::thread::scope(|s| {
        let handles: Vec<_> = dirs
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|d| {
                            let log = read_log(d)?;
                            let name = d.file_name().map_or_else(|| d.display().to_string(), |n| n.to_string_lossy().into_owned());
                            Ok(trial_metrics(&name, &log, params))
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("analysis worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(dirs.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Writes the report files into `dir`.
pub fn write_report(dir: &Path, metrics: &[MetricsReport], levels: &[LevelTables]) -> Result<(), ReportError> {
    let put = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|source| ReportError::Io { path: p, source })
    };
    fs::create_dir_all(dir).map_err(|source| ReportError::Io { path: dir.into(), source })?;
    put("metrics.csv", metrics_csv(metrics))?;
    put("metrics.json", serde_json::to_string_pretty(metrics).expect("metrics serialize") + "\n")?;
    put("comparisons.txt", render_tables(levels))?;
    put("comparisons.json", serde_json::to_string_pretty(levels).expect("tables serialize") + "\n")?;
    Ok(())
}
