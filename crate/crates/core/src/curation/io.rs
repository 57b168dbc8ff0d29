//! CSV recordings, curated tables and JSON manifests.
//!
//! Raw recording columns: `timestamp, x, y, rssi_<i>...,
//! csi_<i>_<k>_re, csi_<i>_<k>_im ..., uwb_<j>_range, uwb_<j>_power ...,
//! imu_0..imu_8`. Missing readings are empty fields. The curated table keeps
//! the same order with CSI replaced by `csi_<i>_a<p>` coefficients and
//! `*_mask_<i>` validity columns appended per sensor block.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CuratedDataset, CuratedSample, RawSample, Sensor, SensorLayout, Standardizer, UwbReading, IMU_DIM};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

pub fn raw_header(layout: &SensorLayout) -> Vec<String> {
    let mut h: Vec<String> = vec!["timestamp".into(), "x".into(), "y".into()];
    h.extend((0..layout.wifi_anchors).map(|i| format!("rssi_{i}")));
    for i in 0..layout.wifi_anchors {
        for k in 0..layout.subcarriers {
            h.push(format!("csi_{i}_{k}_re"));
            h.push(format!("csi_{i}_{k}_im"));
        }
    }
    for j in 0..layout.uwb_anchors {
        h.push(format!("uwb_{j}_range"));
        h.push(format!("uwb_{j}_power"));
    }
    h.extend((0..IMU_DIM).map(|i| format!("imu_{i}")));
    h
}

pub fn curated_header(layout: &SensorLayout, poly_order: usize) -> Vec<String> {
    let mut h: Vec<String> = vec!["timestamp".into(), "x".into(), "y".into()];
    h.extend((0..layout.wifi_anchors).map(|i| format!("rssi_{i}")));
    h.extend((0..layout.wifi_anchors).map(|i| format!("rssi_mask_{i}")));
    for i in 0..layout.wifi_anchors {
        h.extend((0..=poly_order).map(|p| format!("csi_{i}_a{p}")));
    }
    h.extend((0..layout.wifi_anchors).map(|i| format!("csi_mask_{i}")));
    for j in 0..layout.uwb_anchors {
        h.push(format!("uwb_{j}_range"));
        h.push(format!("uwb_{j}_power"));
    }
    h.extend((0..layout.uwb_anchors).map(|j| format!("uwb_mask_{j}")));
    h.extend((0..IMU_DIM).map(|i| format!("imu_{i}")));
    h
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn fmt_mask(m: bool) -> String {
    if m { "1" } else { "0" }.to_string()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

pub fn write_recording(path: &Path, layout: &SensorLayout, samples: &[RawSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(raw_header(layout)).map_err(|e| csv_err(path, e))?;
    let mut row: Vec<String> = Vec::new();
    for s in samples {
        layout.check(s)?;
        row.clear();
        row.push(fmt_f64(s.timestamp));
        row.push(fmt_f64(s.position[0]));
        row.push(fmt_f64(s.position[1]));
        row.extend(s.rssi.iter().map(|r| fmt_opt(*r)));
        for capture in &s.csi {
            match capture {
                Some(c) => {
                    for z in c {
                        row.push(fmt_f64(z.re));
                        row.push(fmt_f64(z.im));
                    }
                }
                None => row.extend(std::iter::repeat(String::new()).take(2 * layout.subcarriers)),
            }
        }
        for u in &s.uwb {
            row.push(fmt_opt(u.map(|u| u.range)));
            row.push(fmt_opt(u.map(|u| u.power)));
        }
        row.extend(s.imu.iter().map(|v| fmt_f64(*v)));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn count_prefixed(header: &csv::StringRecord, pred: impl Fn(&str) -> bool) -> usize {
    header.iter().filter(|h| pred(h)).count()
}

struct Fields<'a> {
    path: &'a Path,
    line: u64,
    rec: &'a csv::StringRecord,
    pos: usize,
}

impl Fields<'_> {
    fn next_opt(&mut self) -> Result<Option<f64>> {
        let raw = self.rec.get(self.pos).unwrap_or("").trim();
        self.pos += 1;
        if raw.is_empty() {
            return Ok(None);
        }
        let v: f64 = raw.parse().map_err(|_| {
            Error::format(
                self.path,
                format!("line {}: field {} is not a number: `{raw}`", self.line, self.pos),
            )
        })?;
        if !v.is_finite() {
            return Err(Error::format(
                self.path,
                format!("line {}: field {} is not finite", self.line, self.pos),
            ));
        }
        Ok(Some(v))
    }

    fn next(&mut self) -> Result<f64> {
        self.next_opt()?.ok_or_else(|| {
            Error::format(
                self.path,
                format!("line {}: required field {} is empty", self.line, self.pos),
            )
        })
    }

    fn next_mask(&mut self) -> Result<bool> {
        Ok(self.next()? != 0.0)
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<BufReader<File>>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().from_reader(BufReader::new(f)))
}

fn check_header(path: &Path, got: &csv::StringRecord, expect: &[String]) -> Result<()> {
    if got.len() != expect.len() || got.iter().zip(expect).any(|(a, b)| a != b) {
        let first_bad = got
            .iter()
            .zip(expect)
            .position(|(a, b)| a != b)
            .unwrap_or(got.len().min(expect.len()));
        return Err(Error::format(
            path,
            format!(
                "unexpected header at column {first_bad} (expected `{}`)",
                expect.get(first_bad).map(String::as_str).unwrap_or("<end>")
            ),
        ));
    }
    Ok(())
}

pub fn read_recording(path: &Path) -> Result<(SensorLayout, Vec<RawSample>)> {
    let mut r = open_csv(path)?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let wifi = count_prefixed(&header, |h| h.starts_with("rssi_"));
    let uwb = count_prefixed(&header, |h| h.starts_with("uwb_") && h.ends_with("_range"));
    let csi_cols = count_prefixed(&header, |h| h.starts_with("csi_"));
    let subcarriers = if wifi == 0 { 0 } else { csi_cols / (2 * wifi) };
    let layout = SensorLayout {
        wifi_anchors: wifi,
        uwb_anchors: uwb,
        subcarriers,
    };
    check_header(path, &header, &raw_header(&layout))?;

    let mut samples = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let mut f = Fields {
            path,
            line: n as u64 + 2,
            rec: &rec,
            pos: 0,
        };
        let timestamp = f.next()?;
        let position = [f.next()?, f.next()?];
        let rssi = (0..wifi).map(|_| f.next_opt()).collect::<Result<Vec<_>>>()?;
        let mut csi = Vec::with_capacity(wifi);
        for _ in 0..wifi {
            let vals = (0..2 * subcarriers)
                .map(|_| f.next_opt())
                .collect::<Result<Vec<_>>>()?;
            if vals.iter().all(Option::is_none) {
                csi.push(None);
            } else {
                let vals: Option<Vec<f64>> = vals.into_iter().collect();
                let vals = vals.ok_or_else(|| {
                    Error::format(path, format!("line {}: partially missing CSI capture", f.line))
                })?;
                csi.push(Some(
                    vals.chunks(2).map(|c| Complex64::new(c[0], c[1])).collect(),
                ));
            }
        }
        let mut uwb_readings = Vec::with_capacity(uwb);
        for _ in 0..uwb {
            let (range, power) = (f.next_opt()?, f.next_opt()?);
            uwb_readings.push(match (range, power) {
                (Some(range), Some(power)) => Some(UwbReading { range, power }),
                (None, None) => None,
                _ => {
                    return Err(Error::format(
                        path,
                        format!("line {}: UWB range/power must be both present or both empty", f.line),
                    ))
                }
            });
        }
        let mut imu = [0.0; IMU_DIM];
        for v in &mut imu {
            *v = f.next()?;
        }
        samples.push(RawSample {
            timestamp,
            position,
            rssi,
            csi,
            uwb: uwb_readings,
            imu,
        });
    }
    Ok((layout, samples))
}

pub fn write_curated(path: &Path, ds: &CuratedDataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(curated_header(&ds.layout, ds.poly_order))
        .map_err(|e| csv_err(path, e))?;
    let mut row: Vec<String> = Vec::new();
    for s in &ds.samples {
        row.clear();
        row.push(fmt_f64(s.timestamp));
        row.push(fmt_f64(s.position[0]));
        row.push(fmt_f64(s.position[1]));
        row.extend(s.rssi.iter().map(|v| fmt_f64(*v)));
        row.extend(s.rssi_mask.iter().map(|m| fmt_mask(*m)));
        row.extend(s.csi.iter().map(|v| fmt_f64(*v)));
        row.extend(s.csi_mask.iter().map(|m| fmt_mask(*m)));
        row.extend(s.uwb.iter().map(|v| fmt_f64(*v)));
        row.extend(s.uwb_mask.iter().map(|m| fmt_mask(*m)));
        row.extend(s.imu.iter().map(|v| fmt_f64(*v)));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_curated(path: &Path) -> Result<CuratedDataset> {
    let mut r = open_csv(path)?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let wifi = count_prefixed(&header, |h| h.starts_with("rssi_mask_"));
    let uwb = count_prefixed(&header, |h| h.starts_with("uwb_mask_"));
    let coeff_cols = count_prefixed(&header, |h| h.starts_with("csi_") && h.contains("_a"));
    let poly_order = if wifi == 0 || coeff_cols == 0 {
        0
    } else {
        coeff_cols / wifi - 1
    };
    let layout = SensorLayout {
        wifi_anchors: wifi,
        uwb_anchors: uwb,
        subcarriers: 0,
    };
    check_header(path, &header, &curated_header(&layout, poly_order))?;

    let mut samples = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let mut f = Fields {
            path,
            line: n as u64 + 2,
            rec: &rec,
            pos: 0,
        };
        let timestamp = f.next()?;
        let position = [f.next()?, f.next()?];
        let rssi = (0..wifi).map(|_| f.next()).collect::<Result<Vec<_>>>()?;
        let rssi_mask = (0..wifi).map(|_| f.next_mask()).collect::<Result<Vec<_>>>()?;
        let csi = (0..wifi * (poly_order + 1))
            .map(|_| f.next())
            .collect::<Result<Vec<_>>>()?;
        let csi_mask = (0..wifi).map(|_| f.next_mask()).collect::<Result<Vec<_>>>()?;
        let uwb_vals = (0..2 * uwb).map(|_| f.next()).collect::<Result<Vec<_>>>()?;
        let uwb_mask = (0..uwb).map(|_| f.next_mask()).collect::<Result<Vec<_>>>()?;
        let mut imu = [0.0; IMU_DIM];
        for v in &mut imu {
            *v = f.next()?;
        }
        samples.push(CuratedSample {
            timestamp,
            position,
            rssi,
            rssi_mask,
            csi,
            csi_mask,
            uwb: uwb_vals,
            uwb_mask,
            imu,
        });
    }
    Ok(CuratedDataset {
        layout,
        poly_order,
        samples,
    })
}

/// Half-open window-index ranges of the temporal split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRanges {
    pub train: (usize, usize),
    pub val: (usize, usize),
    pub test: (usize, usize),
}

/// Everything needed to rebuild model inputs from a curated table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurationManifest {
    pub format_version: u32,
    pub layout: SensorLayout,
    pub poly_order: usize,
    pub null_subcarriers: Vec<usize>,
    pub surviving_subcarriers: usize,
    pub num_samples: usize,
    pub window_len: usize,
    pub stride: usize,
    pub split_fractions: [f64; 3],
    pub split: SplitRanges,
    pub standardization: BTreeMap<Sensor, Standardizer>,
    pub source_sha256: String,
}

impl CurationManifest {
    /// Stable content hash used to pair checkpoints with their data.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::format(path, e))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::format(path, e))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(t: f64, missing_uwb: bool) -> RawSample {
        RawSample {
            timestamp: t,
            position: [0.1 * t, 7.25 - t],
            rssi: vec![Some(-61.5 + t), None],
            csi: vec![
                Some((0..4).map(|k| Complex64::new(k as f64 * 0.1 + t, -0.3)).collect()),
                None,
            ],
            uwb: vec![
                if missing_uwb {
                    None
                } else {
                    Some(UwbReading { range: 3.0 + 1e-13, power: -77.125 })
                },
            ],
            imu: [0.1, -0.2, 9.81, 0.0, 0.0, 0.05, 22.0, -3.0, 40.0 + 1.0 / 3.0],
        }
    }

    #[test]
    fn recording_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.csv");
        let layout = SensorLayout {
            wifi_anchors: 2,
            uwb_anchors: 1,
            subcarriers: 4,
        };
        let samples = vec![sample(0.0, false), sample(0.1, true), sample(0.2, false)];
        write_recording(&path, &layout, &samples).unwrap();
        let (l2, back) = read_recording(&path).unwrap();
        assert_eq!(l2, layout);
        assert_eq!(back, samples);

        let text = std::fs::read_to_string(&path).unwrap();
        let second = text.lines().nth(2).unwrap();
        // missing UWB range and power serialize as two empty fields
        assert!(second.contains(",,"), "{second}");
    }

    #[test]
    fn header_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "timestamp,x,why\n0,0,0\n").unwrap();
        let err = read_recording(&path).unwrap_err().to_string();
        assert!(err.contains("bad.csv") && err.contains("`y`"), "{err}");
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_recording(Path::new("/nonexistent/rec.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/rec.csv"));
    }
}
