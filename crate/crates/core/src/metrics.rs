//! Localization error statistics.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub mean: f64,
    pub median: f64,
    pub cdf90: f64,
    pub count: usize,
    /// Errors in ascending order.
    pub sorted_errors: Vec<f64>,
}

pub fn euclidean_errors(estimates: &[[f64; 2]], truths: &[[f64; 2]]) -> Result<Vec<f64>> {
    if estimates.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} estimates but {} ground-truth positions",
            estimates.len(),
            truths.len()
        )));
    }
    Ok(estimates
        .iter()
        .zip(truths)
        .map(|(e, t)| (e[0] - t[0]).hypot(e[1] - t[1]))
        .collect())
}

/// Linear-interpolation quantile at rank `q·(N-1)` of an ascending list.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::invalid("quantile of an empty list"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("quantile level {q} outside [0, 1]")));
    }
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

pub fn summarize(errors: &[f64]) -> Result<MetricsSummary> {
    if errors.is_empty() {
        return Err(Error::invalid("cannot summarize an empty error list"));
    }
    if let Some(i) = errors.iter().position(|e| !e.is_finite() || *e < 0.0) {
        return Err(Error::invalid(format!("error {i} is {} (must be finite and >= 0)", errors[i])));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(MetricsSummary {
        mean: errors.iter().sum::<f64>() / errors.len() as f64,
        median: quantile_sorted(&sorted, 0.5)?,
        cdf90: quantile_sorted(&sorted, 0.9)?,
        count: errors.len(),
        sorted_errors: sorted,
    })
}

/// Empirical CDF on `resolution` evenly spaced points from 0 to the largest
/// error. `resolution == 0` evaluates at every distinct error instead.
pub fn cdf_curve(errors: &[f64], resolution: usize) -> Result<Vec<(f64, f64)>> {
    if errors.is_empty() {
        return Err(Error::invalid("cannot build a CDF from an empty error list"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let frac_at = |x: f64| sorted.partition_point(|&e| e <= x) as f64 / n;
    let max = *sorted.last().unwrap();
    let grid: Vec<f64> = if resolution == 0 {
        let mut g = sorted.clone();
        g.dedup();
        g
    } else if resolution == 1 {
        vec![max]
    } else {
        (0..resolution)
            .map(|i| if i + 1 == resolution { max } else { max * i as f64 / (resolution - 1) as f64 })
            .collect()
    };
    Ok(grid.into_iter().map(|x| (x, frac_at(x))).collect())
}

pub fn summary_table(rows: &[(String, MetricsSummary)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut out = format!(
        "{:<width$}  {:>10}  {:>10}  {:>10}  {:>8}\n",
        "method", "mean_m", "median_m", "cdf90_m", "count"
    );
    for (name, s) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>10.4}  {:>10.4}  {:>10.4}  {:>8}",
            name, s.mean, s.median, s.cdf90, s.count
        );
    }
    out
}

pub fn summary_csv(rows: &[(String, MetricsSummary)]) -> String {
    let mut out = String::from("method,mean_m,median_m,cdf90_m,count\n");
    for (name, s) in rows {
        let _ = writeln!(out, "{name},{},{},{},{}", s.mean, s.median, s.cdf90, s.count);
    }
    out
}

pub fn write_cdf_csv(path: &Path, curve: &[(f64, f64)]) -> Result<()> {
    let mut out = String::from("error_m,cdf\n");
    for (e, f) in curve {
        let _ = writeln!(out, "{e},{f}");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
