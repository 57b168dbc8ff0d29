//! CSI amplitude calibration and polynomial compression.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SUBCARRIERS: usize = 64;
pub const DEFAULT_POLY_ORDER: usize = 8;

/// Raw FFT-bin indices of the guard band and DC bin of a 64-bin 20 MHz OFDM
/// symbol: signed subcarriers -32..=-27, 0 and 27..=31.
pub fn default_null_subcarriers() -> Vec<usize> {
    let mut nulls: Vec<usize> = (0..=5).map(|k| 32 + k).collect();
    nulls.push(0);
    nulls.extend(27..=31);
    nulls.sort_unstable();
    nulls
}

/// Maps a raw FFT bin to its signed subcarrier index (FFT-shift order).
pub fn signed_subcarrier(raw: usize, num_subcarriers: usize) -> i64 {
    if raw >= num_subcarriers.div_ceil(2) {
        raw as i64 - num_subcarriers as i64
    } else {
        raw as i64
    }
}

/// Surviving subcarrier amplitudes in ascending signed-subcarrier order.
#[derive(Clone, Debug, PartialEq)]
pub struct FlippedCsi {
    pub amplitudes: Vec<f64>,
    pub subcarriers: Vec<i64>,
}

/// Drops the null bins and reorders the rest from FFT order `[0, N)` into
/// contiguous signed order `[-N/2, N/2)`, keeping magnitudes only.
pub fn remove_null_and_flip(raw: &[Complex64], null_indices: &[usize]) -> Result<FlippedCsi> {
    let n = raw.len();
    if let Some(bad) = null_indices.iter().find(|&&i| i >= n) {
        return Err(Error::invalid(format!(
            "null subcarrier {bad} outside 0..{n}"
        )));
    }
    let mut kept: Vec<(i64, f64)> = raw
        .iter()
        .enumerate()
        .filter(|(i, _)| !null_indices.contains(i))
        .map(|(i, c)| (signed_subcarrier(i, n), c.norm()))
        .collect();
    if kept.is_empty() {
        return Err(Error::invalid("every subcarrier is marked null"));
    }
    kept.sort_by_key(|&(k, _)| k);
    let (subcarriers, amplitudes) = kept.into_iter().unzip();
    Ok(FlippedCsi {
        amplitudes,
        subcarriers,
    })
}

/// L1 normalization that removes the per-capture AGC gain.
pub fn normalize_csi(amplitudes: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = amplitudes.iter().map(|a| a.abs()).sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::invalid("CSI capture has no energy"));
    }
    Ok(amplitudes.iter().map(|a| a.abs() / total).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsiPolyCoeffs {
    pub order: usize,
    pub coeffs: Vec<f64>,
}

/// Least-squares polynomial fitter for a fixed abscissa set.
///
/// The abscissae are mapped affinely onto [-1, 1] before building the
/// Vandermonde basis; coefficients are reported in that rescaled basis. The
/// basis is factored once with Householder QR so every capture sharing the
/// same subcarrier set costs one `O(n p)` back-substitution.
#[derive(Clone, Debug)]
pub struct PolyFitter {
    order: usize,
    scaled: Vec<f64>,
    // Householder reflectors stored column-wise below the diagonal of `qr`,
    // R on and above it.
    qr: Vec<f64>,
    betas: Vec<f64>,
    n: usize,
}

impl PolyFitter {
    pub fn new(abscissae: &[f64], order: usize) -> Result<Self> {
        let n = abscissae.len();
        let p = order + 1;
        if n < p {
            return Err(Error::invalid(format!(
                "polynomial order {order} needs at least {p} points, got {n}"
            )));
        }
        if abscissae.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite subcarrier index"));
        }
        let mut sorted = abscissae.to_vec();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("subcarrier indices must be distinct"));
        }
        let (lo, hi) = (sorted[0], sorted[n - 1]);
        let scaled: Vec<f64> = if hi > lo {
            abscissae
                .iter()
                .map(|x| 2.0 * (x - lo) / (hi - lo) - 1.0)
                .collect()
        } else {
            vec![0.0; n]
        };

        // Column-major Vandermonde matrix.
        let mut qr = vec![0.0; n * p];
        for (i, &x) in scaled.iter().enumerate() {
            let mut pow = 1.0;
            for j in 0..p {
                qr[j * n + i] = pow;
                pow *= x;
            }
        }
        let col_norms: Vec<f64> = (0..p)
            .map(|j| qr[j * n..(j + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();

        let mut betas = vec![0.0; p];
        for j in 0..p {
            let norm = qr[j * n + j..(j + 1) * n]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm <= 1e-12 * col_norms[j].max(1.0) {
                return Err(Error::Numeric(format!(
                    "rank-deficient polynomial basis at column {j}"
                )));
            }
            let x0 = qr[j * n + j];
            let alpha = if x0 >= 0.0 { -norm } else { norm };
            let v0 = x0 - alpha;
            // v = (x - alpha e1) / v0, so v[0] = 1
            for i in (j + 1)..n {
                qr[j * n + i] /= v0;
            }
            let vtv: f64 = 1.0 + qr[j * n + j + 1..(j + 1) * n].iter().map(|v| v * v).sum::<f64>();
            betas[j] = 2.0 / vtv;
            qr[j * n + j] = alpha;
            for k in (j + 1)..p {
                let mut dot = qr[k * n + j];
                for i in (j + 1)..n {
                    dot += qr[j * n + i] * qr[k * n + i];
                }
                let s = betas[j] * dot;
                qr[k * n + j] -= s;
                for i in (j + 1)..n {
                    qr[k * n + i] -= s * qr[j * n + i];
                }
            }
        }
        Ok(Self {
            order,
            scaled,
            qr,
            betas,
            n,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn num_points(&self) -> usize {
        self.n
    }

    pub fn fit(&self, y: &[f64]) -> Result<CsiPolyCoeffs> {
        let n = self.n;
        let p = self.order + 1;
        if y.len() != n {
            return Err(Error::Shape {
                op: "PolyFitter::fit",
                lhs: (n, 1),
                rhs: (y.len(), 1),
            });
        }
        let mut b = y.to_vec();
        for j in 0..p {
            let mut dot = b[j];
            for i in (j + 1)..n {
                dot += self.qr[j * n + i] * b[i];
            }
            let s = self.betas[j] * dot;
            b[j] -= s;
            for i in (j + 1)..n {
                b[i] -= s * self.qr[j * n + i];
            }
        }
        let mut coeffs = vec![0.0; p];
        for j in (0..p).rev() {
            let mut acc = b[j];
            for k in (j + 1)..p {
                acc -= self.qr[k * n + j] * coeffs[k];
            }
            coeffs[j] = acc / self.qr[j * n + j];
        }
        Ok(CsiPolyCoeffs {
            order: self.order,
            coeffs,
        })
    }

    /// Evaluates a coefficient vector at the fitter's abscissae.
    pub fn evaluate(&self, coeffs: &[f64]) -> Vec<f64> {
        self.scaled
            .iter()
            .map(|&x| coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c))
            .collect()
    }

    pub fn residual_norm(&self, y: &[f64], coeffs: &[f64]) -> f64 {
        self.evaluate(coeffs)
            .iter()
            .zip(y)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// One-shot least-squares fit of `amplitudes` against `subcarriers`.
pub fn fit_polynomial(amplitudes: &[f64], subcarriers: &[f64], order: usize) -> Result<CsiPolyCoeffs> {
    if amplitudes.len() != subcarriers.len() {
        return Err(Error::Shape {
            op: "fit_polynomial",
            lhs: (amplitudes.len(), 1),
            rhs: (subcarriers.len(), 1),
        });
    }
    PolyFitter::new(subcarriers, order)?.fit(amplitudes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn indices(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 - (n as f64) / 2.0).collect()
    }

    #[test]
    fn default_null_set_leaves_52() {
        let nulls = default_null_subcarriers();
        assert_eq!(nulls.len(), 12);
        let raw = vec![Complex64::new(1.0, 0.0); 64];
        let out = remove_null_and_flip(&raw, &nulls).unwrap();
        assert_eq!(out.amplitudes.len(), 52);
        let expect: Vec<i64> = (-26..=-1).chain(1..=26).collect();
        assert_eq!(out.subcarriers, expect);
    }

    #[test]
    fn empty_null_set_is_pure_reorder() {
        let raw: Vec<Complex64> = (0..8).map(|i| Complex64::new(i as f64, 0.0)).collect();
        let out = remove_null_and_flip(&raw, &[]).unwrap();
        assert_eq!(out.amplitudes, vec![4.0, 5.0, 6.0, 7.0, 0.0, 1.0, 2.0, 3.0]);
        assert_eq!(out.subcarriers, vec![-4, -3, -2, -1, 0, 1, 2, 3]);
    }

    #[test]
    fn constant_magnitude_is_order_free() {
        let raw: Vec<Complex64> = (0..64)
            .map(|i| Complex64::from_polar(2.0, i as f64 * 0.3))
            .collect();
        let out = remove_null_and_flip(&raw, &default_null_subcarriers()).unwrap();
        assert!(out.amplitudes.iter().all(|a| (a - 2.0).abs() < 1e-12));
    }

    #[test]
    fn all_null_rejected() {
        let raw = vec![Complex64::new(1.0, 1.0); 4];
        assert!(remove_null_and_flip(&raw, &[0, 1, 2, 3]).is_err());
        assert!(remove_null_and_flip(&raw, &[9]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let ones = normalize_csi(&[1.0; 52]).unwrap();
        assert!(ones.iter().all(|v| (v - 1.0 / 52.0).abs() < 1e-15));
        assert_eq!(normalize_csi(&[1.0, 3.0]).unwrap(), vec![0.25, 0.75]);
        let x = [0.3, 1.7, 2.2, 0.01];
        let scaled: Vec<f64> = x.iter().map(|v| v * 7.0).collect();
        let (a, b) = (normalize_csi(&x).unwrap(), normalize_csi(&scaled).unwrap());
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() <= 1e-12);
        }
        assert!(normalize_csi(&[0.0; 5]).is_err());
    }

    #[test]
    fn constant_fit() {
        let fit = fit_polynomial(&[0.42; 52], &indices(52), 8).unwrap();
        assert!((fit.coeffs[0] - 0.42).abs() < 1e-9);
        assert!(fit.coeffs[1..].iter().all(|c| c.abs() < 1e-9));
    }

    #[test]
    fn square_system_interpolates() {
        let xs = indices(6);
        let ys = [0.3, -1.0, 2.0, 0.7, 0.0, 5.0];
        let fitter = PolyFitter::new(&xs, 5).unwrap();
        let c = fitter.fit(&ys).unwrap();
        assert!(fitter.residual_norm(&ys, &c.coeffs) < 1e-9);
    }

    #[test]
    fn rank_deficiency_and_bad_inputs() {
        assert!(PolyFitter::new(&[1.0, 2.0], 3).is_err());
        assert!(PolyFitter::new(&[1.0, 1.0, 2.0, 3.0], 2).is_err());
        assert!(fit_polynomial(&[1.0, 2.0], &[1.0, 2.0, 3.0], 1).is_err());
    }

    #[test]
    fn recovers_known_coefficients() {
        let xs: Vec<f64> = (-26..=-1).chain(1..=26).map(|k| k as f64).collect();
        let fitter = PolyFitter::new(&xs, 8).unwrap();
        let truth = [0.02, -0.004, 0.011, 0.003, -0.007, 0.0015, 0.002, -0.001, 0.0005];
        let y = fitter.evaluate(&truth);
        let fit = fitter.fit(&y).unwrap();
        for (a, b) in fit.coeffs.iter().zip(&truth) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        let rebuilt = fitter.evaluate(&fit.coeffs);
        let worst = rebuilt.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-8);
    }

    proptest! {
        #[test]
        fn residual_non_increasing_in_order(ys in proptest::collection::vec(-1.0f64..1.0, 20)) {
            let xs = indices(20);
            let mut prev = f64::INFINITY;
            for order in 0..10 {
                let fitter = PolyFitter::new(&xs, order).unwrap();
                let c = fitter.fit(&ys).unwrap();
                let r = fitter.residual_norm(&ys, &c.coeffs);
                prop_assert!(r <= prev + 1e-10);
                prev = r;
            }
        }

        #[test]
        fn normalization_scale_invariant(
            xs in proptest::collection::vec(0.0f64..10.0, 1..60),
            gain in 1e-3f64..1e3,
        ) {
            prop_assume!(xs.iter().sum::<f64>() > 1e-6);
            let a = normalize_csi(&xs).unwrap();
            let scaled: Vec<f64> = xs.iter().map(|v| v * gain).collect();
            let b = normalize_csi(&scaled).unwrap();
            for (p, q) in a.iter().zip(&b) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
        }
    }
}
