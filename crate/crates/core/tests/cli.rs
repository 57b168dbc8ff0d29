//! Command-line workflow: simulate, curate, train, eval and baseline.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use mmloc::baselines::AnchorMap;
use mmloc::checkpoint::load_model;
use mmloc::cli::{
    cmd_baseline, cmd_curate, cmd_eval, cmd_simulate, cmd_train, eval_with, BaselineMethod, LoadedDataset, Localizer,
    SplitName, ANCHORS_FILE, CHECKPOINT_FILE, LOSS_FILE, RECORDING_FILE,
};
use mmloc::curation::io::file_sha256;
use mmloc::curation::Sensor;
use mmloc::sim::{Floorplan, NoiseConfig, Room, SimConfig, Wall};
use mmloc::train::WindowedData;

const TRAIN_TOML: &str = "max_iterations = 30\nhidden_dim = 8\nbatch_size = 8\nvalidation_interval = 10\nmlp_hidden = [8]\n";

fn mmloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmloc")).args(args).output().unwrap()
}

fn write(path: &Path, text: &str) -> PathBuf {
    std::fs::write(path, text).unwrap();
    path.to_path_buf()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Simulated, curated and trained once for the whole file.
struct Fixture {
    root: tempfile::TempDir,
}

impl Fixture {
    fn dir(&self, name: &str) -> PathBuf {
        self.root.path().join(name)
    }
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let r = root.path();
        let sim_cfg = write(&r.join("sim.toml"), "num_samples = 400\n");
        let train_cfg = write(&r.join("train.toml"), TRAIN_TOML);
        cmd_simulate(Some(&sim_cfg), Some(2), &r.join("sim")).unwrap();
        cmd_curate(&r.join("sim").join(RECORDING_FILE), None, &r.join("cur")).unwrap();
        cmd_train(&r.join("cur"), Some(&train_cfg), Some(2), None, &r.join("train")).unwrap();
        cmd_eval(&r.join("train").join(CHECKPOINT_FILE), &r.join("cur"), SplitName::Test, &r.join("eval")).unwrap();
        Fixture { root }
    })
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn column(path: &Path, idx: usize) -> Vec<f64> {
    csv_rows(path).iter().map(|r| r[idx].parse().unwrap()).collect()
}

#[test]
fn simulate_is_reproducible_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("sim.toml"), "num_samples = 150\n");
    let mut hashes = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let res = mmloc(&["simulate", "--config", path_str(&cfg), "--seed", "4", "--out", path_str(&out)]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        hashes.push((
            file_sha256(&out.join(RECORDING_FILE)).unwrap(),
            file_sha256(&out.join(ANCHORS_FILE)).unwrap(),
        ));
    }
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("sim.toml"), "num_sampels = 150\n");
    let res = mmloc(&["simulate", "--config", path_str(&cfg), "--out", path_str(&dir.path().join("o"))]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("num_sampels"));
}

#[test]
fn curate_reports_window_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (n, windows) in [(100, "windows: 91 "), (5, "windows: 0 ")] {
        let cfg = write(&d.join(format!("sim{n}.toml")), &format!("num_samples = {n}\n"));
        let sim = d.join(format!("sim{n}"));
        cmd_simulate(Some(&cfg), None, &sim).unwrap();
        let res = mmloc(&["curate", path_str(&sim.join(RECORDING_FILE)), "--out", path_str(&d.join(format!("cur{n}")))]);
        assert!(res.status.success());
        let stdout = String::from_utf8_lossy(&res.stdout);
        assert!(stdout.contains("surviving subcarriers: 52"), "{stdout}");
        assert!(stdout.contains(windows), "{stdout}");
        if n < 10 {
            assert!(String::from_utf8_lossy(&res.stderr).contains("shorter than the window length"));
        }
    }
}

#[test]
fn train_with_a_sensor_subset_builds_a_single_stream_model() {
    let f = fixture();
    let cfg = write(&f.dir("imu.toml"), TRAIN_TOML);
    let out = f.dir("train-imu");
    let res = mmloc(&[
        "train",
        path_str(&f.dir("cur")),
        "--config",
        path_str(&cfg),
        "--sensors",
        "imu",
        "--out",
        path_str(&out),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let model = load_model(&out.join(CHECKPOINT_FILE), None).unwrap();
    assert_eq!(model.sensors(), &[Sensor::Imu]);
    assert_eq!(model.num_streams(), 1);
}

#[test]
fn zero_learning_rate_gives_a_flat_loss_curve() {
    let f = fixture();
    let cfg = write(&f.dir("lr0.toml"), &format!("{TRAIN_TOML}learning_rate = 0.0\n"));
    let out = f.dir("train-lr0");
    cmd_train(&f.dir("cur"), Some(&cfg), Some(2), None, &out).unwrap();
    let rows = csv_rows(&out.join(LOSS_FILE));
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r[1] == rows[0][1] && r[2] == rows[0][2]));
}

#[test]
fn fixed_seed_reproduces_the_loss_curve() {
    let f = fixture();
    let cfg = f.root.path().join("train.toml");
    let out = f.dir("train-again");
    cmd_train(&f.dir("cur"), Some(&cfg), Some(2), None, &out).unwrap();
    assert_eq!(
        std::fs::read(out.join(LOSS_FILE)).unwrap(),
        std::fs::read(f.dir("train").join(LOSS_FILE)).unwrap()
    );
}

#[test]
fn importance_weights_are_a_distribution() {
    let rows = csv_rows(&fixture().dir("eval").join("alpha.csv"));
    assert!(!rows.is_empty());
    for r in rows {
        let values: Vec<f64> = r[1..].iter().map(|v| v.parse().unwrap()).collect();
        assert_eq!(values.len(), 3);
        assert!(values.iter().all(|a| (0.0..=1.0).contains(a)));
        assert!((values.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn reported_metrics_match_the_per_window_errors() {
    let eval = fixture().dir("eval");
    let errors = column(&eval.join("errors.csv"), 5);
    let mut sorted = errors.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quantile = |q: f64| {
        let rank = q * (sorted.len() - 1) as f64;
        let lo = rank.floor() as usize;
        let hi = (lo + 1).min(sorted.len() - 1);
        sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
    };
    let mut total = 0.0;
    for e in &errors {
        total += e;
    }
    let row = &csv_rows(&eval.join("metrics.csv"))[0];
    let got: Vec<f64> = row[1..4].iter().map(|v| v.parse().unwrap()).collect();
    assert_eq!(row[0], "fusion");
    assert_eq!(got, vec![total / errors.len() as f64, quantile(0.5), quantile(0.9)]);
    assert_eq!(row[4].parse::<usize>().unwrap(), errors.len());

    let cdf = column(&eval.join("cdf.csv"), 1);
    assert!(cdf.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(cdf.last(), Some(&1.0));
}

struct Oracle;

impl Localizer for Oracle {
    fn localize(
        &self,
        data: &WindowedData,
        windows: &[usize],
    ) -> mmloc::Result<(Vec<[f64; 2]>, Option<Vec<Vec<f64>>>)> {
        Ok((windows.iter().map(|&w| data.target(w)).collect(), None))
    }
}

#[test]
fn perfect_localizer_scores_zero() {
    let f = fixture();
    let data = LoadedDataset::open(&f.dir("cur")).unwrap();
    let out = f.dir("eval-oracle");
    let report = eval_with(&Oracle, &data, SplitName::Val, &out, "oracle").unwrap();
    let s = report.summary;
    assert_eq!((s.mean, s.median, s.cdf90), (0.0, 0.0, 0.0));
    assert_eq!(s.count, data.manifest.split.val.1 - data.manifest.split.val.0);
    assert!(!out.join("alpha.csv").exists());
}

#[test]
fn eval_refuses_a_checkpoint_from_other_data() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("sim.toml"), "num_samples = 120\n");
    cmd_simulate(Some(&cfg), Some(8), &dir.path().join("sim")).unwrap();
    cmd_curate(&dir.path().join("sim").join(RECORDING_FILE), None, &dir.path().join("cur")).unwrap();
    let res = mmloc(&[
        "eval",
        "--checkpoint",
        path_str(&f.dir("train").join(CHECKPOINT_FILE)),
        path_str(&dir.path().join("cur")),
        "--out",
        path_str(&dir.path().join("eval")),
    ]);
    assert_eq!(res.status.code(), Some(2));
}

/// One 6×6 m room with no walls inside and three UWB anchors within 10 m of
/// every point.
fn open_room_config() -> SimConfig {
    let w = |a, b| Wall { a, b };
    SimConfig {
        num_samples: 300,
        seed: 6,
        noise: NoiseConfig::zero(),
        floorplan: Floorplan {
            width: 6.0,
            height: 6.0,
            walls: vec![
                w([0.0, 0.0], [6.0, 0.0]),
                w([6.0, 0.0], [6.0, 6.0]),
                w([6.0, 6.0], [0.0, 6.0]),
                w([0.0, 6.0], [0.0, 0.0]),
            ],
            rooms: vec![Room { min: [0.0, 0.0], max: [6.0, 6.0] }],
            doors: vec![],
            wifi_anchors: vec![[0.5, 0.5], [5.5, 0.5], [3.0, 5.5]],
            uwb_anchors: vec![[1.0, 1.0], [5.0, 1.5], [2.5, 5.0]],
        },
        ..SimConfig::default()
    }
}

#[test]
fn noiseless_uwb_trilateration_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write(&d.join("sim.toml"), &toml::to_string(&open_room_config()).unwrap());
    cmd_simulate(Some(&cfg), None, &d.join("sim")).unwrap();
    cmd_curate(&d.join("sim").join(RECORDING_FILE), None, &d.join("cur")).unwrap();
    let report = cmd_baseline(
        BaselineMethod::UwbTri,
        &d.join("cur"),
        &d.join("sim").join(ANCHORS_FILE),
        SplitName::Test,
        &d.join("base"),
    )
    .unwrap();
    assert!(report.summary.mean <= 1e-3, "mean error {}", report.summary.mean);
    assert!(report.summary.cdf90 <= 1e-3);
    assert_eq!(AnchorMap::read(&d.join("sim").join(ANCHORS_FILE)).unwrap().anchors.len(), 6);
}

#[test]
fn fingerprint_queries_on_the_database_are_exact() {
    let f = fixture();
    let res = mmloc(&[
        "baseline",
        "--method",
        "rssi-fp",
        path_str(&f.dir("cur")),
        "--anchors",
        path_str(&f.dir("sim").join(ANCHORS_FILE)),
        "--query",
        "train",
        "--out",
        path_str(&f.dir("base-fp")),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(column(&f.dir("base-fp").join("errors.csv"), 5).iter().all(|&e| e == 0.0));
}

#[test]
fn unknown_baseline_method_lists_the_valid_ones() {
    let f = fixture();
    let res = mmloc(&[
        "baseline",
        "--method",
        "uwb-trl",
        path_str(&f.dir("cur")),
        "--anchors",
        path_str(&f.dir("sim").join(ANCHORS_FILE)),
        "--out",
        path_str(&f.dir("base-typo")),
    ]);
    assert_eq!(res.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&res.stderr);
    for m in ["uwb-tri", "rssi-tri", "rssi-fp", "csi-fp"] {
        assert!(stderr.contains(m), "{stderr}");
    }
}

#[test]
fn out_root_prefixes_relative_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("sim.toml"), "num_samples = 50\n");
    let res = Command::new(env!("CARGO_BIN_EXE_mmloc"))
        .args(["simulate", "--config", path_str(&cfg), "--out", "runs/sim"])
        .env("MMLOC_OUT_ROOT", dir.path())
        .current_dir(dir.path().join(".."))
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(dir.path().join("runs/sim").join(RECORDING_FILE).exists());
}
