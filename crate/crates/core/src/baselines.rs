//! Classical reference localizers: trilateration and k-NN fingerprinting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_RANGE_M: f64 = 0.1;
pub const MAX_RANGE_M: f64 = 50.0;
pub const STEP_TOLERANCE: f64 = 1e-9;
pub const MAX_ITERATIONS: usize = 100;
pub const LM_LAMBDA: f64 = 1e-3;
const IDW_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorKind {
    Wifi,
    Uwb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub id: String,
    pub x: f64,
    pub y: f64,
    #[serde(rename = "type")]
    pub kind: AnchorKind,
}

/// Anchor positions, in file order within each kind.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnchorMap {
    pub anchors: Vec<Anchor>,
}

impl AnchorMap {
    pub fn new(anchors: Vec<Anchor>) -> Result<Self> {
        for a in &anchors {
            if !a.x.is_finite() || !a.y.is_finite() {
                return Err(Error::invalid(format!("anchor `{}` has a non-finite position", a.id)));
            }
        }
        Ok(Self { anchors })
    }

    pub fn positions(&self, kind: AnchorKind) -> Vec<[f64; 2]> {
        self.anchors
            .iter()
            .filter(|a| a.kind == kind)
            .map(|a| [a.x, a.y])
            .collect()
    }

    /// Reads `id,x,y,type` CSV.
    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let mut anchors = Vec::new();
        for (i, rec) in rdr.deserialize::<Anchor>().enumerate() {
            anchors.push(rec.map_err(|e| Error::format(path, format!("row {}: {e}", i + 1)))?);
        }
        Self::new(anchors)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        for a in &self.anchors {
            w.serialize(a).map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Log-distance model `rssi = PL₀ − 10·n·log10(d / 1 m)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathLossModel {
    pub pl0: f64,
    pub exponent: f64,
}

impl PathLossModel {
    pub fn new(pl0: f64, exponent: f64) -> Result<Self> {
        if !(exponent > 0.0) || !pl0.is_finite() || !exponent.is_finite() {
            return Err(Error::invalid(format!("path-loss exponent must be > 0, got {exponent}")));
        }
        Ok(Self { pl0, exponent })
    }

    /// Least-squares fit over `(distance_m, rssi_dbm)` pairs.
    pub fn fit(pairs: &[(f64, f64)]) -> Result<Self> {
        let pts: Vec<(f64, f64)> = pairs
            .iter()
            .filter(|(d, r)| *d > 0.0 && d.is_finite() && r.is_finite())
            .map(|&(d, r)| (d.log10(), r))
            .collect();
        if pts.len() < 2 {
            return Err(Error::invalid("path-loss fit needs at least two readings"));
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        if sxx < 1e-12 {
            return Err(Error::invalid("path-loss fit needs readings at distinct distances"));
        }
        let slope = sxy / sxx;
        Self::new(my - slope * mx, -slope / 10.0)
    }

    pub fn rssi_at(&self, distance: f64) -> f64 {
        self.pl0 - 10.0 * self.exponent * distance.log10()
    }
}

pub fn range_to_rssi(distance: f64, model: &PathLossModel) -> f64 {
    model.rssi_at(distance)
}

pub fn rssi_to_range(rssi: f64, model: &PathLossModel) -> f64 {
    let d = 10f64.powf((model.pl0 - rssi) / (10.0 * model.exponent));
    if d.is_nan() {
        MAX_RANGE_M
    } else {
        d.clamp(MIN_RANGE_M, MAX_RANGE_M)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrilaterationResult {
    pub position: [f64; 2],
    /// Root-mean-square range residual at the estimate (m).
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Anchors are (nearly) collinear; the estimate may be mirrored.
    pub ill_conditioned: bool,
}

fn cost(p: [f64; 2], anchors: &[[f64; 2]], ranges: &[f64]) -> f64 {
    anchors
        .iter()
        .zip(ranges)
        .map(|(a, r)| ((p[0] - a[0]).hypot(p[1] - a[1]) - r).powi(2))
        .sum()
}

fn solve2(a: [[f64; 2]; 2], b: [f64; 2]) -> Option<[f64; 2]> {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let scale = a[0][0].abs() + a[1][1].abs();
    if det.abs() <= 1e-14 * scale * scale || det == 0.0 {
        return None;
    }
    Some([
        (b[0] * a[1][1] - b[1] * a[0][1]) / det,
        (a[0][0] * b[1] - a[1][0] * b[0]) / det,
    ])
}

/// Smallest-to-largest eigenvalue ratio of the centred anchor scatter.
fn collinearity(anchors: &[[f64; 2]]) -> f64 {
    let n = anchors.len() as f64;
    let cx = anchors.iter().map(|a| a[0]).sum::<f64>() / n;
    let cy = anchors.iter().map(|a| a[1]).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for a in anchors {
        let (dx, dy) = (a[0] - cx, a[1] - cy);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let tr = sxx + syy;
    if tr == 0.0 {
        return 0.0;
    }
    let disc = ((sxx - syy).powi(2) + 4.0 * sxy * sxy).sqrt();
    ((tr - disc) / 2.0).max(0.0) / ((tr + disc) / 2.0)
}

/// Closed-form start from differencing the squared range equations.
fn linear_start(anchors: &[[f64; 2]], ranges: &[f64]) -> Option<[f64; 2]> {
    let (a0, r0) = (anchors[0], ranges[0]);
    let mut ata = [[0.0; 2]; 2];
    let mut atb = [0.0; 2];
    for (a, r) in anchors.iter().zip(ranges).skip(1) {
        let row = [2.0 * (a[0] - a0[0]), 2.0 * (a[1] - a0[1])];
        let rhs = r0 * r0 - r * r + a[0] * a[0] - a0[0] * a0[0] + a[1] * a[1] - a0[1] * a0[1];
        for i in 0..2 {
            for j in 0..2 {
                ata[i][j] += row[i] * row[j];
            }
            atb[i] += row[i] * rhs;
        }
    }
    solve2(ata, atb)
}

fn gauss_newton(start: [f64; 2], anchors: &[[f64; 2]], ranges: &[f64]) -> ([f64; 2], usize, bool) {
    let mut p = start;
    let mut c = cost(p, anchors, ranges);
    for it in 1..=MAX_ITERATIONS {
        let mut jtj = [[0.0; 2]; 2];
        let mut jtr = [0.0; 2];
        for (a, r) in anchors.iter().zip(ranges) {
            let (dx, dy) = (p[0] - a[0], p[1] - a[1]);
            let d = dx.hypot(dy);
            if d < 1e-12 {
                continue;
            }
            let j = [dx / d, dy / d];
            let res = d - r;
            for u in 0..2 {
                for v in 0..2 {
                    jtj[u][v] += j[u] * j[v];
                }
                jtr[u] -= j[u] * res;
            }
        }
        let mut lambda = 0.0;
        let mut accepted = None;
        for _ in 0..30 {
            let damped = [[jtj[0][0] + lambda, jtj[0][1]], [jtj[1][0], jtj[1][1] + lambda]];
            if let Some(step) = solve2(damped, jtr) {
                let cand = [p[0] + step[0], p[1] + step[1]];
                let cc = cost(cand, anchors, ranges);
                if cc <= c {
                    accepted = Some((cand, cc, step));
                    break;
                }
            }
            lambda = if lambda == 0.0 { LM_LAMBDA } else { lambda * 10.0 };
        }
        let Some((cand, cc, step)) = accepted else {
            return (p, it, true);
        };
        p = cand;
        c = cc;
        if step[0].hypot(step[1]) < STEP_TOLERANCE {
            return (p, it, true);
        }
    }
    (p, MAX_ITERATIONS, false)
}

/// Least-squares position from ranges to known anchors.
///
/// Starts from `initial` (anchor centroid when `None`). If that start ends
/// in a local minimum, a closed-form linearised start is tried as well and
/// the lower-cost estimate wins.
pub fn trilaterate(
    ranges: &[f64],
    anchors: &[[f64; 2]],
    initial: Option<[f64; 2]>,
) -> Result<TrilaterationResult> {
    if ranges.len() != anchors.len() {
        return Err(Error::invalid(format!(
            "{} ranges for {} anchors",
            ranges.len(),
            anchors.len()
        )));
    }
    if ranges.len() < 3 {
        return Err(Error::invalid(format!(
            "trilateration needs at least 3 ranges, got {}",
            ranges.len()
        )));
    }
    if ranges.iter().chain(anchors.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite range or anchor coordinate"));
    }
    let n = anchors.len() as f64;
    let centroid = [
        anchors.iter().map(|a| a[0]).sum::<f64>() / n,
        anchors.iter().map(|a| a[1]).sum::<f64>() / n,
    ];
    let ill_conditioned = collinearity(anchors) < 1e-8;
    let (mut p, mut its, mut conv) = gauss_newton(initial.unwrap_or(centroid), anchors, ranges);
    let mut c = cost(p, anchors, ranges);
    let tol = 1e-12 * (1.0 + ranges.iter().map(|r| r * r).sum::<f64>());
    if c > tol && !ill_conditioned {
        if let Some(start) = linear_start(anchors, ranges) {
            let (q, qi, qc) = gauss_newton(start, anchors, ranges);
            let cq = cost(q, anchors, ranges);
            its += qi;
            if cq < c {
                (p, c, conv) = (q, cq, qc);
            }
        }
    }
    Ok(TrilaterationResult {
        position: p,
        residual: (c / n).sqrt(),
        iterations: its,
        converged: conv,
        ill_conditioned,
    })
}

/// Reference fingerprints with their positions.
#[derive(Clone, Debug, Default)]
pub struct FingerprintDb {
    pub features: Vec<Vec<f64>>,
    pub positions: Vec<[f64; 2]>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Inverse-distance interpolation between the `k` nearest fingerprints.
/// Ties go to the lower database index; an exact match returns its
/// position verbatim.
pub fn knn_fingerprint(query: &[f64], db: &FingerprintDb, k: usize) -> Result<[f64; 2]> {
    if db.features.is_empty() || db.features.len() != db.positions.len() {
        return Err(Error::invalid("fingerprint database is empty or inconsistent"));
    }
    if let Some(i) = db.features.iter().position(|f| f.len() != query.len()) {
        return Err(Error::invalid(format!(
            "fingerprint {i} has {} features, query has {}",
            db.features[i].len(),
            query.len()
        )));
    }
    let k = k.clamp(1, db.features.len());
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (i, f) in db.features.iter().enumerate() {
        let d = sq_dist(query, f);
        if best.len() == k && d >= best[k - 1].0 {
            continue;
        }
        let pos = best.partition_point(|&(bd, _)| bd <= d);
        best.insert(pos, (d, i));
        best.truncate(k);
    }
    if best[0].0 == 0.0 {
        return Ok(db.positions[best[0].1]);
    }
    let mut num = [0.0; 2];
    let mut den = 0.0;
    for &(d2, i) in &best {
        let w = 1.0 / (d2.sqrt() + IDW_EPS);
        num[0] += w * db.positions[i][0];
        num[1] += w * db.positions[i][1];
        den += w;
    }
    Ok([num[0] / den, num[1] / den])
}
