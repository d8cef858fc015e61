//! Accuracy, the exact one-sided Wilcoxon signed-rank test and results
//! tables in CSV, JSON and Markdown.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Significance level for starring a cell.
pub const ALPHA: f64 = 0.05;

/// Differences and absolute differences closer than this (relative to their
/// magnitude) are treated as zero or tied, so accuracies that differ only by
/// rounding noise rank together.
const TIE_EPS: f64 = 1e-12;

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "accuracy needs equal non-empty lengths, got {} and {}",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_EPS * a.abs().max(b.abs()).max(1.0)
}

/// Mid-ranks (1-based) of `values`, doubled so they stay integral.
pub fn doubled_mid_ranks(values: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && close(values[order[j]], values[order[i]]) {
            j += 1;
        }
        // positions i+1 ..= j share the rank (i+1+j)/2
        for &k in &order[i..j] {
            ranks[k] = (i + 1 + j) as u64;
        }
        i = j;
    }
    ranks
}

/// Exact p-value of the one-sample signed-rank test against `mu0`, for the
/// alternative that the location exceeds `mu0`. Differences equal to `mu0`
/// are dropped and tied magnitudes get mid-ranks. With nothing left, p = 1.
///
/// The null distribution counts all `2^n` sign assignments (by dynamic
/// programming over doubled ranks, so any `n` is exact).
pub fn wilcoxon_one_sample(samples: &[f64], mu0: f64) -> Result<f64> {
    if samples.iter().any(|x| !x.is_finite()) || !mu0.is_finite() {
        return Err(Error::invalid("wilcoxon: samples and mu0 must be finite"));
    }
    let diffs: Vec<f64> = samples.iter().filter(|&&x| !close(x, mu0)).map(|&x| x - mu0).collect();
    if diffs.is_empty() {
        return Ok(1.0);
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = doubled_mid_ranks(&abs);
    let observed: u64 = ranks
        .iter()
        .zip(&diffs)
        .filter(|(_, d)| **d > 0.0)
        .map(|(r, _)| r)
        .sum();
    let total: u64 = ranks.iter().sum();
    // counts[s] = number of sign patterns whose positive doubled ranks sum to s
    let mut counts = vec![0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in &ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let tail: f64 = counts[observed as usize..].iter().sum();
    Ok(tail / 2f64.powi(diffs.len() as i32))
}

/// One accuracy observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub pair: String,
    pub method: String,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub pair: String,
    pub method: String,
    pub seed_count: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
    /// Against the baseline mean of the same pair; absent for the baseline.
    pub p_value: Option<f64>,
    pub starred: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AverageRow {
    pub method: String,
    pub pair_count: usize,
    pub mean: f64,
    /// Number of pairs on which this method is starred.
    pub daggers: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub baseline: String,
    /// Sorted by pair, then by method column order.
    pub rows: Vec<Row>,
    pub averages: Vec<AverageRow>,
}

fn mean_std(values: &mut [f64]) -> (f64, f64) {
    // Sorting first makes the floating-point sums independent of seed order.
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups samples into (pair, method) cells. `methods` fixes the column
/// order and must name every method present; `baseline` supplies each
/// pair's reference mean.
pub fn aggregate(samples: &[Sample], methods: &[&str], baseline: &str) -> Result<ResultsTable> {
    let mut cells: BTreeMap<(&str, usize), Vec<f64>> = BTreeMap::new();
    for s in samples {
        let col = methods
            .iter()
            .position(|m| *m == s.method)
            .ok_or_else(|| Error::invalid(format!("method {:?} is not a table column", s.method)))?;
        cells.entry((s.pair.as_str(), col)).or_default().push(s.accuracy);
    }
    let pairs: BTreeSet<&str> = samples.iter().map(|s| s.pair.as_str()).collect();
    let base_col = methods.iter().position(|m| *m == baseline);
    let mut reference = BTreeMap::new();
    for &pair in &pairs {
        let base = base_col
            .and_then(|c| cells.get(&(pair, c)))
            .ok_or_else(|| Error::invalid(format!("pair {pair:?} has no {baseline:?} runs")))?;
        reference.insert(pair, mean_std(&mut base.clone()).0);
    }
    let mut rows = Vec::new();
    for ((pair, col), values) in &cells {
        let (mean, std) = mean_std(&mut values.clone());
        let p_value = if Some(*col) == base_col {
            None
        } else {
            Some(wilcoxon_one_sample(values, reference[pair])?)
        };
        rows.push(Row {
            pair: pair.to_string(),
            method: methods[*col].to_string(),
            seed_count: values.len(),
            mean,
            std,
            p_value,
            starred: p_value.is_some_and(|p| p < ALPHA),
        });
    }
    let averages = methods
        .iter()
        .filter_map(|m| {
            let mut means: Vec<f64> = rows.iter().filter(|r| r.method == *m).map(|r| r.mean).collect();
            if means.is_empty() {
                return None;
            }
            let daggers = rows.iter().filter(|r| r.method == *m && r.starred).count();
            Some(AverageRow {
                method: m.to_string(),
                pair_count: means.len(),
                mean: mean_std(&mut means).0,
                daggers,
            })
        })
        .collect();
    Ok(ResultsTable {
        baseline: baseline.to_string(),
        rows,
        averages,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
    Markdown,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "markdown" | "md" => Ok(Format::Markdown),
            other => Err(Error::invalid(format!(
                "unknown table format {other:?}; expected csv, json or markdown"
            ))),
        }
    }
}

/// `fraction` as a percentage with one decimal, rounding half away from zero.
pub fn pct(fraction: f64) -> String {
    format!("{:.1}", (fraction * 1000.0).round() / 10.0)
}

/// Table-1 style cell: `86.7*±0.2`.
pub fn cell(row: &Row) -> String {
    format!(
        "{}{}±{}",
        pct(row.mean),
        if row.starred { "*" } else { "" },
        pct(row.std)
    )
}

pub const CSV_HEADER: &str = "pair,method,seed_count,mean_pct,std_pct,p_value,starred";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn emit_table(table: &ResultsTable, format: Format) -> Result<String> {
    let mut out = String::new();
    match format {
        Format::Json => {
            out = serde_json::to_string_pretty(table)?;
            out.push('\n');
        }
        Format::Csv => {
            out.push_str(CSV_HEADER);
            out.push('\n');
            for r in &table.rows {
                let p = r.p_value.map(|p| format!("{p:.6}")).unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    csv_field(&r.pair),
                    csv_field(&r.method),
                    r.seed_count,
                    pct(r.mean),
                    pct(r.std),
                    p,
                    r.starred
                );
            }
        }
        Format::Markdown => {
            let methods: Vec<&str> = table.averages.iter().map(|a| a.method.as_str()).collect();
            let _ = writeln!(out, "| pair | {} |", methods.join(" | "));
            let _ = writeln!(out, "|---|{}", "---|".repeat(methods.len()));
            let pairs: BTreeSet<&str> = table.rows.iter().map(|r| r.pair.as_str()).collect();
            for pair in pairs {
                let cells: Vec<String> = methods
                    .iter()
                    .map(|m| {
                        table
                            .rows
                            .iter()
                            .find(|r| r.pair == pair && r.method == *m)
                            .map(cell)
                            .unwrap_or_else(|| "-".into())
                    })
                    .collect();
                let _ = writeln!(out, "| {pair} | {} |", cells.join(" | "));
            }
            if !table.averages.is_empty() {
                let avg: Vec<String> = table
                    .averages
                    .iter()
                    .map(|a| format!("{} ({}†)", pct(a.mean), a.daggers))
                    .collect();
                let _ = writeln!(out, "| Average | {} |", avg.join(" | "));
            }
        }
    }
    Ok(out)
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = vec![String::new()];
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                chars.next();
                fields.last_mut().unwrap().push('"');
            }
            ('"', _) => quoted = !quoted,
            (',', false) => fields.push(String::new()),
            (c, _) => fields.last_mut().unwrap().push(c),
        }
    }
    fields
}

/// Reads rows written by [`emit_table`] in CSV form. Values come back at the
/// printed precision; averages are recomputed from the rows. Lines starting
/// with `#` are comments.
pub fn parse_csv(text: &str, methods: &[&str], baseline: &str) -> Result<ResultsTable> {
    let bad = |line: usize, msg: String| Error::Parse {
        path: "<csv>".into(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.starts_with('#'));
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        _ => return Err(bad(1, format!("expected header {CSV_HEADER:?}"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let f = split_csv_line(line);
        if f.len() != 7 {
            return Err(bad(i + 1, format!("expected 7 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(i + 1, format!("{s:?}: {e}")));
        rows.push(Row {
            pair: f[0].clone(),
            method: f[1].clone(),
            seed_count: f[2].parse().map_err(|e| bad(i + 1, format!("seed_count: {e}")))?,
            mean: num(&f[3])? / 100.0,
            std: num(&f[4])? / 100.0,
            p_value: if f[5].is_empty() { None } else { Some(num(&f[5])?) },
            starred: f[6].parse().map_err(|e| bad(i + 1, format!("starred: {e}")))?,
        });
    }
    let averages = methods
        .iter()
        .filter_map(|m| {
            let mut means: Vec<f64> = rows.iter().filter(|r| r.method == *m).map(|r| r.mean).collect();
            (!means.is_empty()).then(|| AverageRow {
                method: m.to_string(),
                pair_count: means.len(),
                mean: mean_std(&mut means).0,
                daggers: rows.iter().filter(|r| r.method == *m && r.starred).count(),
            })
        })
        .collect();
    Ok(ResultsTable {
        baseline: baseline.to_string(),
        rows,
        averages,
    })
}
