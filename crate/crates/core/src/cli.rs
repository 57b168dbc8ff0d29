//! Command implementations behind the `mmloc` binary.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{knn_fingerprint, rssi_to_range, trilaterate, AnchorKind, AnchorMap, FingerprintDb, PathLossModel};
use crate::checkpoint::{load_model, save_model};
use crate::curation::csi::{default_null_subcarriers, DEFAULT_POLY_ORDER};
use crate::curation::io::{file_sha256, read_curated, read_json, read_recording, write_curated, write_json, CurationManifest, SplitRanges, MANIFEST_VERSION};
use crate::curation::{window_starts, CsiCalibrator, CuratedDataset, Sensor, Standardizer};
use crate::error::{Error, Result};
use crate::fusion::FusionModel;
use crate::metrics::{cdf_curve, euclidean_errors, summarize, summary_csv, summary_table, write_cdf_csv, MetricsSummary};
use crate::sim::{simulate, write_dataset, SimConfig};
use crate::train::{fit, predict_windows, split_dataset, write_loss_csv, TrainConfig, WindowedData};

pub const OUT_ROOT_ENV: &str = "MMLOC_OUT_ROOT";
pub const RECORDING_FILE: &str = "recording.csv";
pub const ANCHORS_FILE: &str = "anchors.csv";
pub const CURATED_FILE: &str = "curated.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "model.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const RUN_FILE: &str = "run.json";
const CDF_RESOLUTION: usize = 200;

/// Reads a TOML config; unknown keys and type errors name the offending
/// key and line.
pub fn load_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<(T, String)> {
    let Some(path) = path else {
        return Ok((T::default(), String::new()));
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok((value, text))
}

/// Resolves `--out` against the output-root environment override.
pub fn resolve_out(out: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if out.is_relative() => Path::new(&root).join(out),
        _ => out.to_path_buf(),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Provenance record written by every command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub tool_version: String,
}

impl RunManifest {
    fn start(command: &str, config: &impl Serialize, seed: Option<u64>) -> Self {
        Self {
            command: command.into(),
            config_hash: sha256_hex(&serde_json::to_vec(config).expect("config serializes")),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix: unix_now(),
            finished_unix: 0,
            tool_version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    fn finish(mut self, dir: &Path) -> Result<Self> {
        self.finished_unix = unix_now();
        self.outputs.push(RUN_FILE.into());
        write_json(&dir.join(RUN_FILE), &self)?;
        Ok(self)
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

// ---------------------------------------------------------------- simulate

pub fn cmd_simulate(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<RunManifest> {
    let (mut cfg, _) = load_toml::<SimConfig>(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let out = resolve_out(out);
    ensure_dir(&out)?;
    let mut run = RunManifest::start("simulate", &cfg, Some(cfg.seed));
    run.inputs.extend(config.map(display));
    let samples = simulate(&cfg)?;
    let rec = out.join(RECORDING_FILE);
    write_dataset(&samples, &cfg, &rec)?;
    cfg.floorplan.anchor_map().write(&out.join(ANCHORS_FILE))?;
    println!("wrote {} samples to {}", samples.len(), rec.display());
    run.outputs = vec![RECORDING_FILE.into(), crate::sim::manifest_path(Path::new(RECORDING_FILE)).display().to_string(), ANCHORS_FILE.into()];
    run.finish(&out)
}

// ------------------------------------------------------------------ curate

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurateConfig {
    pub poly_order: usize,
    pub null_subcarriers: Vec<usize>,
    pub window_len: usize,
    pub stride: usize,
    pub split: [f64; 3],
}

impl Default for CurateConfig {
    fn default() -> Self {
        Self {
            poly_order: DEFAULT_POLY_ORDER,
            null_subcarriers: default_null_subcarriers(),
            window_len: 10,
            stride: 1,
            split: [0.8, 0.1, 0.1],
        }
    }
}

/// Window offsets and split, empty when there are no windows.
pub fn windows_and_split(n: usize, len: usize, stride: usize, fractions: [f64; 3]) -> Result<(Vec<usize>, SplitRanges)> {
    let starts = window_starts(n, len, stride)?;
    let split = if starts.is_empty() {
        SplitRanges { train: (0, 0), val: (0, 0), test: (0, 0) }
    } else {
        split_dataset(starts.len(), fractions)?
    };
    Ok((starts, split))
}

fn train_rows(starts: &[usize], split: &SplitRanges, len: usize) -> std::ops::Range<usize> {
    let (a, b) = split.train;
    if a == b {
        0..0
    } else {
        starts[a]..starts[b - 1] + len
    }
}

pub fn cmd_curate(recording: &Path, config: Option<&Path>, out: &Path) -> Result<CurationManifest> {
    let (cfg, _) = load_toml::<CurateConfig>(config)?;
    let out = resolve_out(out);
    ensure_dir(&out)?;
    let mut run = RunManifest::start("curate", &cfg, None);
    run.inputs.push(display(recording));
    run.inputs.extend(config.map(display));

    let (layout, raw) = read_recording(recording)?;
    let calibrator = CsiCalibrator::new(layout.subcarriers, &cfg.null_subcarriers, cfg.poly_order)?;
    let ds = CuratedDataset::curate(layout, &raw, &cfg.null_subcarriers, cfg.poly_order)?;
    let (starts, split) = windows_and_split(ds.len(), cfg.window_len, cfg.stride, cfg.split)?;
    let rows = train_rows(&starts, &split, cfg.window_len);
    let mut standardization = BTreeMap::new();
    for s in Sensor::ALL {
        let table = ds.table(s);
        let st = if rows.is_empty() { Standardizer::identity(table.dim) } else { Standardizer::fit(&table, rows.clone())? };
        standardization.insert(s, st);
    }
    let manifest = CurationManifest {
        format_version: MANIFEST_VERSION,
        layout,
        poly_order: cfg.poly_order,
        null_subcarriers: cfg.null_subcarriers.clone(),
        surviving_subcarriers: calibrator.surviving_subcarriers(),
        num_samples: ds.len(),
        window_len: cfg.window_len,
        stride: cfg.stride,
        split_fractions: cfg.split,
        split,
        standardization,
        source_sha256: file_sha256(recording)?,
    };
    write_curated(&out.join(CURATED_FILE), &ds)?;
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    println!("surviving subcarriers: {}", manifest.surviving_subcarriers);
    println!(
        "windows: {} (train {}, val {}, test {})",
        starts.len(),
        split.train.1 - split.train.0,
        split.val.1 - split.val.0,
        split.test.1 - split.test.0
    );
    run.outputs = vec![CURATED_FILE.into(), MANIFEST_FILE.into()];
    run.finish(&out)?;
    Ok(manifest)
}

/// A curated dataset directory.
pub struct LoadedDataset {
    pub dataset: CuratedDataset,
    pub manifest: CurationManifest,
    pub starts: Vec<usize>,
}

impl LoadedDataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let mut dataset = read_curated(&dir.join(CURATED_FILE))?;
        let manifest: CurationManifest = read_json(&dir.join(MANIFEST_FILE))?;
        let (have, want) = (&dataset.layout, &manifest.layout);
        if manifest.num_samples != dataset.len()
            || manifest.poly_order != dataset.poly_order
            || (have.wifi_anchors, have.uwb_anchors) != (want.wifi_anchors, want.uwb_anchors)
        {
            return Err(Error::format(dir.join(MANIFEST_FILE), "manifest does not describe the curated table"));
        }
        // The curated table does not record the raw subcarrier count.
        dataset.layout = manifest.layout;
        let starts = window_starts(dataset.len(), manifest.window_len, manifest.stride)?;
        Ok(Self { dataset, manifest, starts })
    }

    pub fn windowed(&self, sensors: &[Sensor]) -> WindowedData {
        WindowedData::new(&self.dataset, sensors, self.manifest.window_len, self.starts.clone(), self.manifest.split)
    }

    /// Sample index labelling each window of `range`.
    pub fn label_rows(&self, range: (usize, usize)) -> Vec<usize> {
        (range.0..range.1).map(|w| self.starts[w] + self.manifest.window_len - 1).collect()
    }
}

// ------------------------------------------------------------------- train

pub fn cmd_train(
    dataset_dir: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    sensors: Option<Vec<Sensor>>,
    out: &Path,
) -> Result<crate::train::TrainOutcome> {
    let (mut cfg, _) = load_toml::<TrainConfig>(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(s) = sensors {
        cfg.sensors = s;
    }
    let data = LoadedDataset::open(dataset_dir)?;
    let m = &data.manifest;
    if (cfg.window_len, cfg.stride, cfg.split) != (m.window_len, m.stride, m.split_fractions) {
        log::warn!(
            "using the dataset's windowing (T={}, stride={}, split={:?})",
            m.window_len,
            m.stride,
            m.split_fractions
        );
        cfg.window_len = m.window_len;
        cfg.stride = m.stride;
        cfg.split = m.split_fractions;
    }
    let out = resolve_out(out);
    ensure_dir(&out)?;
    let mut run = RunManifest::start("train", &cfg, Some(cfg.seed));
    run.inputs.push(display(dataset_dir));
    run.inputs.extend(config.map(display));

    let windowed = data.windowed(&cfg.sensors);
    let (model, outcome) = fit(&windowed, &cfg)?;
    save_model(&model, Some(m.content_hash()), &out.join(CHECKPOINT_FILE))?;
    write_loss_csv(&out.join(LOSS_FILE), &outcome.history)?;
    match outcome.best_val_mse {
        Some(v) => println!("best val MSE {v:.6} at iteration {}", outcome.best_iteration),
        None => println!("trained {} iterations (no validation split)", outcome.iterations_run),
    }
    run.outputs = vec![CHECKPOINT_FILE.into(), LOSS_FILE.into()];
    run.finish(&out)?;
    Ok(outcome)
}

// -------------------------------------------------------------------- eval

/// Anything that maps windows to position estimates.
pub trait Localizer {
    /// Streams the localizer reads, in input order.
    fn sensors(&self) -> Vec<Sensor> {
        Sensor::ALL.to_vec()
    }

    /// Estimates and optional per-window importance weights.
    fn localize(&self, data: &WindowedData, windows: &[usize]) -> Result<(Vec<[f64; 2]>, Option<Vec<Vec<f64>>>)>;
}

impl Localizer for FusionModel {
    fn sensors(&self) -> Vec<Sensor> {
        self.config.sensors.clone()
    }

    fn localize(&self, data: &WindowedData, windows: &[usize]) -> Result<(Vec<[f64; 2]>, Option<Vec<Vec<f64>>>)> {
        let (p, a) = predict_windows(self, data, windows, 256)?;
        Ok((p, Some(a)))
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub summary: MetricsSummary,
    pub errors: Vec<f64>,
    pub estimates: Vec<[f64; 2]>,
    pub truths: Vec<[f64; 2]>,
    pub alphas: Option<Vec<Vec<f64>>>,
}

pub fn evaluate(localizer: &dyn Localizer, data: &WindowedData, windows: &[usize]) -> Result<EvalReport> {
    let (estimates, alphas) = localizer.localize(data, windows)?;
    let truths: Vec<[f64; 2]> = windows.iter().map(|&w| data.target(w)).collect();
    let errors = euclidean_errors(&estimates, &truths)?;
    Ok(EvalReport {
        summary: summarize(&errors)?,
        errors,
        estimates,
        truths,
        alphas,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    #[default]
    Test,
}

impl SplitName {
    pub fn range(self, s: &SplitRanges) -> (usize, usize) {
        match self {
            SplitName::Train => s.train,
            SplitName::Val => s.val,
            SplitName::Test => s.test,
        }
    }
}

impl FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (expected train, val or test)"))),
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        })
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_report(out: &Path, name: &str, report: &EvalReport, sensors: &[Sensor]) -> Result<Vec<String>> {
    let rows = vec![(name.to_string(), report.summary.clone())];
    write_text(&out.join("metrics.txt"), &summary_table(&rows))?;
    write_text(&out.join("metrics.csv"), &summary_csv(&rows))?;
    write_cdf_csv(&out.join("cdf.csv"), &cdf_curve(&report.errors, CDF_RESOLUTION)?)?;
    let mut err = String::from("index,x_true,y_true,x_est,y_est,error_m\n");
    for (i, ((t, e), d)) in report.truths.iter().zip(&report.estimates).zip(&report.errors).enumerate() {
        err.push_str(&format!("{i},{},{},{},{},{d}\n", t[0], t[1], e[0], e[1]));
    }
    write_text(&out.join("errors.csv"), &err)?;
    let mut files = vec!["metrics.txt".into(), "metrics.csv".into(), "cdf.csv".into(), "errors.csv".into()];
    if let Some(alphas) = &report.alphas {
        let mut s = String::from("index");
        for sensor in sensors {
            s.push_str(&format!(",alpha_{sensor}"));
        }
        s.push('\n');
        for (i, a) in alphas.iter().enumerate() {
            s.push_str(&i.to_string());
            for v in a {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        write_text(&out.join("alpha.csv"), &s)?;
        files.push("alpha.csv".into());
    }
    print!("{}", summary_table(&rows));
    Ok(files)
}

pub fn cmd_eval(checkpoint: &Path, dataset_dir: &Path, split: SplitName, out: &Path) -> Result<EvalReport> {
    let data = LoadedDataset::open(dataset_dir)?;
    let model = load_model(checkpoint, Some(&data.manifest.content_hash()))?;
    if model.config.window_len != data.manifest.window_len {
        return Err(Error::Config(format!(
            "model expects windows of {} steps, dataset has {}",
            model.config.window_len, data.manifest.window_len
        )));
    }
    eval_with(&model, &data, split, out, "fusion")
}

/// Evaluates any localizer on a curated dataset directory and writes the
/// report files.
pub fn eval_with(localizer: &dyn Localizer, data: &LoadedDataset, split: SplitName, out: &Path, name: &str) -> Result<EvalReport> {
    let sensors = localizer.sensors();
    let windowed = data.windowed(&sensors);
    let (a, b) = split.range(&data.manifest.split);
    if a == b {
        return Err(Error::invalid(format!("the {split} split has no windows")));
    }
    let windows: Vec<usize> = (a..b).collect();
    let report = evaluate(localizer, &windowed, &windows)?;
    let out = resolve_out(out);
    ensure_dir(&out)?;
    let mut run = RunManifest::start("eval", &name, None);
    run.inputs.push(format!("{split} split"));
    run.outputs = write_report(&out, name, &report, &sensors)?;
    run.finish(&out)?;
    Ok(report)
}

// ---------------------------------------------------------------- baseline

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineMethod {
    UwbTri,
    RssiTri,
    RssiFp,
    CsiFp,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 4] = [Self::UwbTri, Self::RssiTri, Self::RssiFp, Self::CsiFp];

    pub fn name(self) -> &'static str {
        match self {
            Self::UwbTri => "uwb-tri",
            Self::RssiTri => "rssi-tri",
            Self::RssiFp => "rssi-fp",
            Self::CsiFp => "csi-fp",
        }
    }
}

impl FromStr for BaselineMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Self::ALL.iter().map(|m| m.name()).collect();
            Error::Config(format!("unknown method `{s}`; valid methods: {}", valid.join(", ")))
        })
    }
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Trilaterates every row, holding the previous estimate when fewer than
/// three ranges are available.
fn trilaterate_rows(rows: &[usize], anchors: &[[f64; 2]], ranges_of: impl Fn(usize) -> Vec<(usize, f64)>) -> Result<(Vec<[f64; 2]>, usize)> {
    let n = anchors.len().max(1) as f64;
    let mut last = [anchors.iter().map(|a| a[0]).sum::<f64>() / n, anchors.iter().map(|a| a[1]).sum::<f64>() / n];
    let mut held = 0;
    let mut out = Vec::with_capacity(rows.len());
    for &r in rows {
        let valid = ranges_of(r);
        if valid.len() >= 3 {
            let pos: Vec<[f64; 2]> = valid.iter().map(|&(i, _)| anchors[i]).collect();
            let rng: Vec<f64> = valid.iter().map(|&(_, d)| d).collect();
            last = trilaterate(&rng, &pos, None)?.position;
        } else {
            held += 1;
        }
        out.push(last);
    }
    Ok((out, held))
}

fn fingerprints(ds: &CuratedDataset, rows: &[usize], sensor: Sensor, st: &Standardizer) -> Vec<Vec<f64>> {
    rows.iter().map(|&r| st.apply_row(&ds.samples[r].features(sensor))).collect()
}

/// Runs a classical baseline on the chosen split of a curated dataset.
pub fn run_baseline(method: BaselineMethod, data: &LoadedDataset, anchors: &AnchorMap, query: SplitName) -> Result<EvalReport> {
    let ds = &data.dataset;
    let split = data.manifest.split;
    let q = query.range(&split);
    if q.0 == q.1 {
        return Err(Error::invalid(format!("the {query} split has no windows")));
    }
    let rows = data.label_rows(q);
    let train_rows = data.label_rows(split.train);
    let truths: Vec<[f64; 2]> = rows.iter().map(|&r| ds.samples[r].position).collect();
    let estimates = match method {
        BaselineMethod::UwbTri => {
            let pos = anchors.positions(AnchorKind::Uwb);
            if pos.len() != ds.layout.uwb_anchors {
                return Err(Error::Config(format!("anchor map lists {} UWB anchors, dataset has {}", pos.len(), ds.layout.uwb_anchors)));
            }
            let (est, held) = trilaterate_rows(&rows, &pos, |r| ds.samples[r].valid_uwb_ranges())?;
            log::info!("uwb-tri held the previous estimate for {held} of {} samples", rows.len());
            est
        }
        BaselineMethod::RssiTri => {
            let pos = anchors.positions(AnchorKind::Wifi);
            if pos.len() != ds.layout.wifi_anchors {
                return Err(Error::Config(format!("anchor map lists {} Wi-Fi anchors, dataset has {}", pos.len(), ds.layout.wifi_anchors)));
            }
            let mut per_anchor: Vec<Vec<(f64, f64)>> = vec![Vec::new(); pos.len()];
            for &r in &train_rows {
                let s = &ds.samples[r];
                for (i, v) in s.valid_rssi() {
                    let d = (s.position[0] - pos[i][0]).hypot(s.position[1] - pos[i][1]);
                    per_anchor[i].push((d, v));
                }
            }
            let pooled: Vec<(f64, f64)> = per_anchor.iter().flatten().copied().collect();
            let fallback = PathLossModel::fit(&pooled)?;
            let models: Vec<PathLossModel> = per_anchor.iter().map(|p| PathLossModel::fit(p).unwrap_or(fallback)).collect();
            let (est, held) = trilaterate_rows(&rows, &pos, |r| {
                ds.samples[r].valid_rssi().into_iter().map(|(i, v)| (i, rssi_to_range(v, &models[i]))).collect()
            })?;
            log::info!("rssi-tri held the previous estimate for {held} of {} samples", rows.len());
            est
        }
        BaselineMethod::RssiFp | BaselineMethod::CsiFp => {
            let sensor = if method == BaselineMethod::RssiFp { Sensor::Rssi } else { Sensor::Csi };
            let st = data
                .manifest
                .standardization
                .get(&sensor)
                .cloned()
                .unwrap_or_else(|| Standardizer::identity(ds.feature_dim(sensor)));
            let db = FingerprintDb {
                features: fingerprints(ds, &train_rows, sensor, &st),
                positions: train_rows.iter().map(|&r| ds.samples[r].position).collect(),
            };
            fingerprints(ds, &rows, sensor, &st)
                .iter()
                .map(|f| knn_fingerprint(f, &db, 2))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let errors = euclidean_errors(&estimates, &truths)?;
    Ok(EvalReport {
        summary: summarize(&errors)?,
        errors,
        estimates,
        truths,
        alphas: None,
    })
}

pub fn cmd_baseline(method: BaselineMethod, dataset_dir: &Path, anchors: &Path, query: SplitName, out: &Path) -> Result<EvalReport> {
    let data = LoadedDataset::open(dataset_dir)?;
    let map = AnchorMap::read(anchors)?;
    let report = run_baseline(method, &data, &map, query)?;
    let out = resolve_out(out);
    ensure_dir(&out)?;
    let mut run = RunManifest::start("baseline", &method.name(), None);
    run.inputs = vec![display(dataset_dir), display(anchors), format!("{query} split")];
    run.outputs = write_report(&out, method.name(), &report, &[])?;
    run.finish(&out)?;
    Ok(report)
}
