//! Measurement curation: raw multi-sensor captures in, standardized
//! per-sensor feature streams and fixed-length windows out.
//!
//! The pipeline per sample is: clip RSSI/UWB outliers, calibrate and
//! compress each CSI capture ([`csi`]), impute missing readings at the clip
//! boundary with a validity mask. Whole datasets are then standardized with
//! training-split statistics and cut into sliding windows.

pub mod csi;
pub mod io;

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub use csi::{
    default_null_subcarriers, fit_polynomial, normalize_csi, remove_null_and_flip, CsiPolyCoeffs,
    PolyFitter,
};

pub const UWB_RANGE_CLIP_M: f64 = 10.0;
pub const RSSI_CLIP_DBM: f64 = 0.0;
pub const UWB_POWER_CLIP_DBM: f64 = 0.0;
pub const IMU_DIM: usize = 9;

/// Sensor modality feeding one recurrent stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sensor {
    Rssi,
    Csi,
    Uwb,
    Imu,
}

impl Sensor {
    pub const ALL: [Sensor; 4] = [Sensor::Rssi, Sensor::Csi, Sensor::Uwb, Sensor::Imu];

    pub fn name(self) -> &'static str {
        match self {
            Sensor::Rssi => "rssi",
            Sensor::Csi => "csi",
            Sensor::Uwb => "uwb",
            Sensor::Imu => "imu",
        }
    }
}

impl fmt::Display for Sensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Sensor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rssi" => Ok(Sensor::Rssi),
            "csi" => Ok(Sensor::Csi),
            "uwb" => Ok(Sensor::Uwb),
            "imu" => Ok(Sensor::Imu),
            other => Err(Error::invalid(format!(
                "unknown sensor `{other}` (expected rssi, csi, uwb or imu)"
            ))),
        }
    }
}

/// Parses a comma-separated sensor list, rejecting duplicates.
pub fn parse_sensor_set(s: &str) -> Result<Vec<Sensor>> {
    let mut out = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let sensor: Sensor = part.parse()?;
        if out.contains(&sensor) {
            return Err(Error::invalid(format!("sensor `{sensor}` listed twice")));
        }
        out.push(sensor);
    }
    if out.is_empty() {
        return Err(Error::invalid("empty sensor set"));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UwbReading {
    pub range: f64,
    pub power: f64,
}

/// One synchronized capture from every sensor. `None` marks a missing
/// reading.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSample {
    pub timestamp: f64,
    pub position: [f64; 2],
    pub rssi: Vec<Option<f64>>,
    pub csi: Vec<Option<Vec<Complex64>>>,
    pub uwb: Vec<Option<UwbReading>>,
    pub imu: [f64; IMU_DIM],
}

/// Fixed per-dataset dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorLayout {
    pub wifi_anchors: usize,
    pub uwb_anchors: usize,
    pub subcarriers: usize,
}

impl SensorLayout {
    pub fn check(&self, s: &RawSample) -> Result<()> {
        if s.rssi.len() != self.wifi_anchors || s.csi.len() != self.wifi_anchors {
            return Err(Error::invalid(format!(
                "sample at t={} has {} RSSI / {} CSI anchors, expected {}",
                s.timestamp,
                s.rssi.len(),
                s.csi.len(),
                self.wifi_anchors
            )));
        }
        if s.uwb.len() != self.uwb_anchors {
            return Err(Error::invalid(format!(
                "sample at t={} has {} UWB anchors, expected {}",
                s.timestamp,
                s.uwb.len(),
                self.uwb_anchors
            )));
        }
        if let Some(bad) = s.csi.iter().flatten().find(|c| c.len() != self.subcarriers) {
            return Err(Error::invalid(format!(
                "sample at t={} has a CSI capture of {} subcarriers, expected {}",
                s.timestamp,
                bad.len(),
                self.subcarriers
            )));
        }
        if !s.position.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!("non-finite position at t={}", s.timestamp)));
        }
        Ok(())
    }
}

/// Clips UWB range at 10 m and RSSI (and UWB power) at 0 dBm. Missing
/// readings stay missing; imputation happens in [`curate_sample`].
pub fn clip_features(sample: &RawSample) -> RawSample {
    let mut out = sample.clone();
    for r in out.rssi.iter_mut().flatten() {
        *r = r.min(RSSI_CLIP_DBM);
    }
    for u in out.uwb.iter_mut().flatten() {
        u.range = u.range.min(UWB_RANGE_CLIP_M);
        u.power = u.power.min(UWB_POWER_CLIP_DBM);
    }
    out
}

/// Per-sample curated features with validity masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CuratedSample {
    pub timestamp: f64,
    pub position: [f64; 2],
    pub rssi: Vec<f64>,
    pub rssi_mask: Vec<bool>,
    /// `wifi_anchors * (order + 1)` coefficients, anchor-major.
    pub csi: Vec<f64>,
    pub csi_mask: Vec<bool>,
    /// `(range, power)` per UWB anchor.
    pub uwb: Vec<f64>,
    pub uwb_mask: Vec<bool>,
    pub imu: [f64; IMU_DIM],
}

fn mask_values(mask: &[bool]) -> impl Iterator<Item = f64> + '_ {
    mask.iter().map(|&m| if m { 1.0 } else { 0.0 })
}

impl CuratedSample {
    /// Stream input vector: values followed by the 0/1 validity mask.
    pub fn features(&self, sensor: Sensor) -> Vec<f64> {
        match sensor {
            Sensor::Rssi => self.rssi.iter().copied().chain(mask_values(&self.rssi_mask)).collect(),
            Sensor::Csi => self.csi.iter().copied().chain(mask_values(&self.csi_mask)).collect(),
            Sensor::Uwb => self.uwb.iter().copied().chain(mask_values(&self.uwb_mask)).collect(),
            Sensor::Imu => self.imu.to_vec(),
        }
    }

    pub fn valid_uwb_ranges(&self) -> Vec<(usize, f64)> {
        self.uwb_mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(j, _)| (j, self.uwb[2 * j]))
            .collect()
    }

    pub fn valid_rssi(&self) -> Vec<(usize, f64)> {
        self.rssi_mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| (i, self.rssi[i]))
            .collect()
    }
}

/// Stream input width for a sensor under a given layout and polynomial order.
pub fn feature_dim(sensor: Sensor, layout: &SensorLayout, poly_order: usize) -> usize {
    match sensor {
        Sensor::Rssi => 2 * layout.wifi_anchors,
        Sensor::Csi => layout.wifi_anchors * (poly_order + 2),
        Sensor::Uwb => 3 * layout.uwb_anchors,
        Sensor::Imu => IMU_DIM,
    }
}

/// CSI calibration settings shared by every capture in a dataset.
#[derive(Clone, Debug)]
pub struct CsiCalibrator {
    nulls: Vec<usize>,
    fitter: PolyFitter,
    subcarriers: usize,
}

impl CsiCalibrator {
    pub fn new(subcarriers: usize, nulls: &[usize], order: usize) -> Result<Self> {
        let probe = vec![Complex64::new(1.0, 0.0); subcarriers];
        let flipped = remove_null_and_flip(&probe, nulls)?;
        let xs: Vec<f64> = flipped.subcarriers.iter().map(|&k| k as f64).collect();
        if xs.len() <= order {
            return Err(Error::Config(format!(
                "{} surviving subcarriers cannot support polynomial order {order}",
                xs.len()
            )));
        }
        Ok(Self {
            nulls: nulls.to_vec(),
            fitter: PolyFitter::new(&xs, order)?,
            subcarriers,
        })
    }

    pub fn surviving_subcarriers(&self) -> usize {
        self.fitter.num_points()
    }

    pub fn order(&self) -> usize {
        self.fitter.order()
    }

    pub fn fitter(&self) -> &PolyFitter {
        &self.fitter
    }

    /// Flip, L1-normalize and compress one capture.
    pub fn calibrate(&self, raw: &[Complex64]) -> Result<CsiPolyCoeffs> {
        if raw.len() != self.subcarriers {
            return Err(Error::invalid(format!(
                "CSI capture has {} subcarriers, expected {}",
                raw.len(),
                self.subcarriers
            )));
        }
        let flipped = remove_null_and_flip(raw, &self.nulls)?;
        let normalized = normalize_csi(&flipped.amplitudes)?;
        self.fitter.fit(&normalized)
    }
}

/// Clips, calibrates and imputes one raw sample.
pub fn curate_sample(raw: &RawSample, calibrator: &CsiCalibrator) -> Result<CuratedSample> {
    let s = clip_features(raw);
    let p = calibrator.order() + 1;

    let rssi_mask: Vec<bool> = s.rssi.iter().map(Option::is_some).collect();
    let rssi = s.rssi.iter().map(|r| r.unwrap_or(RSSI_CLIP_DBM)).collect();

    let mut csi = Vec::with_capacity(s.csi.len() * p);
    let mut csi_mask = Vec::with_capacity(s.csi.len());
    for capture in &s.csi {
        // A capture with no energy is a dead reading, treated as missing.
        match capture.as_deref().map(|c| calibrator.calibrate(c)) {
            Some(Ok(fit)) => {
                csi.extend(fit.coeffs);
                csi_mask.push(true);
            }
            Some(Err(Error::InvalidInput(_))) | None => {
                csi.extend(std::iter::repeat(0.0).take(p));
                csi_mask.push(false);
            }
            Some(Err(e)) => return Err(e),
        }
    }

    let uwb_mask: Vec<bool> = s.uwb.iter().map(Option::is_some).collect();
    let uwb = s
        .uwb
        .iter()
        .flat_map(|u| match u {
            Some(r) => [r.range, r.power],
            None => [UWB_RANGE_CLIP_M, UWB_POWER_CLIP_DBM],
        })
        .collect();

    Ok(CuratedSample {
        timestamp: s.timestamp,
        position: s.position,
        rssi,
        rssi_mask,
        csi,
        csi_mask,
        uwb,
        uwb_mask,
        imu: s.imu,
    })
}

/// An aligned curated time series.
#[derive(Clone, Debug, PartialEq)]
pub struct CuratedDataset {
    pub layout: SensorLayout,
    pub poly_order: usize,
    pub samples: Vec<CuratedSample>,
}

impl CuratedDataset {
    pub fn curate(
        layout: SensorLayout,
        raw: &[RawSample],
        nulls: &[usize],
        poly_order: usize,
    ) -> Result<Self> {
        let calibrator = CsiCalibrator::new(layout.subcarriers, nulls, poly_order)?;
        let samples = raw
            .iter()
            .map(|s| {
                layout.check(s)?;
                curate_sample(s, &calibrator)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layout,
            poly_order,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self, sensor: Sensor) -> usize {
        feature_dim(sensor, &self.layout, self.poly_order)
    }

    pub fn table(&self, sensor: Sensor) -> FeatureTable {
        let dim = self.feature_dim(sensor);
        let mut data = Vec::with_capacity(dim * self.samples.len());
        for s in &self.samples {
            data.extend(s.features(sensor));
        }
        FeatureTable {
            sensor,
            dim,
            data,
        }
    }

    pub fn targets(&self) -> Vec<[f64; 2]> {
        self.samples.iter().map(|s| s.position).collect()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.timestamp).collect()
    }
}

/// Row-major `N x dim` feature matrix for one sensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub sensor: Sensor,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Per-feature mean and standard deviation (population convention).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const MIN_STD: f64 = 1e-12;

impl Standardizer {
    /// Fits on rows `rows` of the table (the training samples).
    pub fn fit(table: &FeatureTable, rows: std::ops::Range<usize>) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.end > table.len() {
            return Err(Error::invalid(format!(
                "cannot fit standardization on rows {rows:?} of {}",
                table.len()
            )));
        }
        let d = table.dim;
        let mut mean = vec![0.0; d];
        for i in rows.clone() {
            for (m, v) in mean.iter_mut().zip(table.row(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for i in rows {
            for ((s, v), m) in var.iter_mut().zip(table.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd < MIN_STD {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn apply(&self, table: &FeatureTable) -> Result<FeatureTable> {
        if table.dim != self.dim() {
            return Err(Error::Shape {
                op: "Standardizer::apply",
                lhs: (self.dim(), 1),
                rhs: (table.dim, 1),
            });
        }
        let data = table
            .data
            .chunks(table.dim.max(1))
            .flat_map(|r| self.apply_row(r))
            .collect();
        Ok(FeatureTable {
            sensor: table.sensor,
            dim: table.dim,
            data,
        })
    }
}

/// Start offsets of the windows of length `len` taken every `stride` samples.
pub fn window_starts(n: usize, len: usize, stride: usize) -> Result<Vec<usize>> {
    if len == 0 || stride == 0 {
        return Err(Error::Config("window length and stride must be >= 1".into()));
    }
    if n < len {
        log::warn!("series of {n} samples is shorter than the window length {len}; no windows");
        return Ok(Vec::new());
    }
    Ok((0..=(n - len)).step_by(stride).collect())
}

/// A length-T multi-sensor window labeled with the final step's position.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalWindow {
    /// `(sensor, T x dim)` with one row per time step.
    pub streams: Vec<(Sensor, Matrix)>,
    pub timestamps: Vec<f64>,
    pub target: [f64; 2],
}

impl MultiModalWindow {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn stream(&self, sensor: Sensor) -> Option<&Matrix> {
        self.streams.iter().find(|(s, _)| *s == sensor).map(|(_, m)| m)
    }
}

/// Cuts the dataset into windows over the requested sensors (features left
/// unstandardized).
pub fn window_sequences(
    dataset: &CuratedDataset,
    sensors: &[Sensor],
    len: usize,
    stride: usize,
) -> Result<Vec<MultiModalWindow>> {
    let tables: Vec<FeatureTable> = sensors.iter().map(|&s| dataset.table(s)).collect();
    let starts = window_starts(dataset.len(), len, stride)?;
    Ok(starts
        .into_iter()
        .map(|start| {
            let streams = tables
                .iter()
                .map(|t| {
                    let rows = t.data[start * t.dim..(start + len) * t.dim].to_vec();
                    (t.sensor, Matrix::from_raw(len, t.dim, rows))
                })
                .collect();
            MultiModalWindow {
                streams,
                timestamps: dataset.samples[start..start + len]
                    .iter()
                    .map(|s| s.timestamp)
                    .collect(),
                target: dataset.samples[start + len - 1].position,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(rssi: Vec<Option<f64>>, uwb: Vec<Option<UwbReading>>) -> RawSample {
        RawSample {
            timestamp: 0.0,
            position: [1.0, 2.0],
            csi: vec![None; rssi.len()],
            rssi,
            uwb,
            imu: [0.0; IMU_DIM],
        }
    }

    #[test]
    fn clipping_rules() {
        let s = sample(
            vec![Some(5.0), Some(-60.0), None],
            vec![
                Some(UwbReading { range: 12.0, power: -80.0 }),
                Some(UwbReading { range: 3.2, power: -70.0 }),
            ],
        );
        let c = clip_features(&s);
        assert_eq!(c.rssi, vec![Some(0.0), Some(-60.0), None]);
        assert_eq!(c.uwb[0].unwrap().range, 10.0);
        assert_eq!(c.uwb[1].unwrap().range, 3.2);
    }

    #[test]
    fn missing_readings_imputed_with_mask() {
        let s = sample(vec![None, Some(-50.0)], vec![None]);
        let cal = CsiCalibrator::new(64, &default_null_subcarriers(), 8).unwrap();
        let c = curate_sample(&s, &cal).unwrap();
        assert_eq!(c.rssi, vec![RSSI_CLIP_DBM, -50.0]);
        assert_eq!(c.rssi_mask, vec![false, true]);
        assert_eq!(c.uwb, vec![UWB_RANGE_CLIP_M, UWB_POWER_CLIP_DBM]);
        assert_eq!(c.uwb_mask, vec![false]);
        assert_eq!(c.csi, vec![0.0; 18]);
        assert_eq!(c.csi_mask, vec![false, false]);
        assert_eq!(c.features(Sensor::Rssi), vec![0.0, -50.0, 0.0, 1.0]);
    }

    #[test]
    fn dead_csi_capture_is_masked() {
        let mut s = sample(vec![Some(-40.0)], vec![]);
        s.csi = vec![Some(vec![Complex64::new(0.0, 0.0); 64])];
        let cal = CsiCalibrator::new(64, &default_null_subcarriers(), 8).unwrap();
        let c = curate_sample(&s, &cal).unwrap();
        assert_eq!(c.csi_mask, vec![false]);
    }

    #[test]
    fn standardize_examples() {
        let t = FeatureTable {
            sensor: Sensor::Imu,
            dim: 2,
            data: vec![0.0, 5.0, 2.0, 5.0],
        };
        let st = Standardizer::fit(&t, 0..2).unwrap();
        assert_eq!(st.mean, vec![1.0, 5.0]);
        assert_eq!(st.std, vec![1.0, 1.0]);
        let out = st.apply(&t).unwrap();
        assert_eq!(out.data, vec![-1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn standardized_fit_column_has_zero_mean() {
        let t = FeatureTable {
            sensor: Sensor::Rssi,
            dim: 1,
            data: vec![-71.3, -65.2, -80.9, -44.1, -59.0],
        };
        let out = Standardizer::fit(&t, 0..5).unwrap().apply(&t).unwrap();
        let mean: f64 = out.data.iter().sum::<f64>() / 5.0;
        assert!(mean.abs() <= 1e-12);
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_starts(100, 10, 1).unwrap().len(), 91);
        assert_eq!(window_starts(10, 10, 1).unwrap().len(), 1);
        assert_eq!(window_starts(100, 30, 2).unwrap().len(), 36);
        assert!(window_starts(5, 10, 1).unwrap().is_empty());
        assert!(window_starts(5, 0, 1).is_err());
    }

    #[test]
    fn sensor_parsing() {
        assert_eq!(
            parse_sensor_set("rssi, uwb,imu").unwrap(),
            vec![Sensor::Rssi, Sensor::Uwb, Sensor::Imu]
        );
        assert!(parse_sensor_set("rssi,rssi").is_err());
        assert!(parse_sensor_set("lidar").is_err());
        assert!(parse_sensor_set("").is_err());
    }

    fn arb_sample() -> impl Strategy<Value = RawSample> {
        (
            proptest::collection::vec(proptest::option::of(-120.0f64..20.0), 3),
            proptest::collection::vec(
                proptest::option::of((0.0f64..30.0, -120.0f64..10.0)),
                2,
            ),
        )
            .prop_map(|(rssi, uwb)| {
                sample(
                    rssi,
                    uwb.into_iter()
                        .map(|u| u.map(|(range, power)| UwbReading { range, power }))
                        .collect(),
                )
            })
    }

    proptest! {
        #[test]
        fn clipping_idempotent(s in arb_sample()) {
            let once = clip_features(&s);
            prop_assert_eq!(clip_features(&once), once.clone());
            prop_assert!(once.rssi.iter().flatten().all(|&r| r <= RSSI_CLIP_DBM));
            prop_assert!(once.uwb.iter().flatten().all(|u| u.range <= UWB_RANGE_CLIP_M));
        }

        #[test]
        fn window_count_formula(n in 0usize..400, len in 1usize..40, stride in 1usize..5) {
            let starts = window_starts(n, len, stride).unwrap();
            let expect = if n < len { 0 } else { (n - len) / stride + 1 };
            prop_assert_eq!(starts.len(), expect);
        }
    }
}
