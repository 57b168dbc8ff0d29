use std::ffi::{CStr, CString};
use std::ptr;

use mmloc::checkpoint::save_model;
use mmloc::curation::{MultiModalWindow, Sensor};
use mmloc::fusion::{FusionModel, ModelConfig};
use mmloc::tensor::Matrix;
use mmloc_ffi::*;
use rand::SeedableRng;

fn last_error() -> String {
    unsafe { CStr::from_ptr(mmloc_last_error()) }.to_string_lossy().into_owned()
}

fn small_model() -> FusionModel {
    let cfg = ModelConfig {
        sensors: vec![Sensor::Uwb, Sensor::Imu],
        input_dims: vec![9, 9],
        hidden_dim: 4,
        num_layers: 1,
        bidirectional: false,
        dropout: 0.0,
        history: 1,
        window_len: 3,
        mlp_hidden: vec![6],
        peephole: true,
    };
    FusionModel::new(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(5)).unwrap()
}

#[test]
fn load_query_predict_free() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    let model = small_model();
    save_model(&model, None, &path).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();

    let mut handle: *mut MmlocModel = ptr::null_mut();
    assert_eq!(unsafe { mmloc_model_load(cpath.as_ptr(), &mut handle) }, MmlocStatus::Ok);
    assert!(!handle.is_null());

    let (mut m, mut t, mut d) = (0usize, 0usize, 0usize);
    unsafe {
        assert_eq!(mmloc_model_num_streams(handle, &mut m), MmlocStatus::Ok);
        assert_eq!(mmloc_model_window_len(handle, &mut t), MmlocStatus::Ok);
        assert_eq!(mmloc_model_stream_dim(handle, 1, &mut d), MmlocStatus::Ok);
        assert_eq!(mmloc_model_stream_dim(handle, 2, &mut d), MmlocStatus::InvalidArgument);
    }
    assert_eq!((m, t, d), (2, 3, 9));

    let uwb: Vec<f64> = (0..27).map(|i| (i as f64 * 0.37).sin()).collect();
    let imu: Vec<f64> = (0..27).map(|i| (i as f64 * 0.11).cos()).collect();
    let streams = [uwb.as_ptr(), imu.as_ptr()];
    let mut xy = [0.0; 2];
    let mut alpha = [0.0; 2];
    let st = unsafe { mmloc_model_predict(handle, streams.as_ptr(), 2, xy.as_mut_ptr(), alpha.as_mut_ptr()) };
    assert_eq!(st, MmlocStatus::Ok, "{}", last_error());

    let window = MultiModalWindow {
        streams: vec![
            (Sensor::Uwb, Matrix::new(3, 9, uwb.clone()).unwrap()),
            (Sensor::Imu, Matrix::new(3, 9, imu.clone()).unwrap()),
        ],
        timestamps: vec![0.0, 1.0, 2.0],
        target: [0.0; 2],
    };
    let (want, w_alpha) = model.predict_window(&window).unwrap();
    assert_eq!(xy, want);
    assert_eq!(alpha.to_vec(), w_alpha.0);
    assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let st = unsafe { mmloc_model_predict(handle, streams.as_ptr(), 1, xy.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, MmlocStatus::InvalidArgument);
    assert!(last_error().contains("2 streams"));

    unsafe { mmloc_model_free(handle) };
    unsafe { mmloc_model_free(ptr::null_mut()) };
}

#[test]
fn load_errors_are_classified() {
    let mut handle: *mut MmlocModel = ptr::null_mut();
    assert_eq!(unsafe { mmloc_model_load(ptr::null(), &mut handle) }, MmlocStatus::NullPointer);
    let missing = CString::new("/nonexistent/model.json").unwrap();
    assert_eq!(unsafe { mmloc_model_load(missing.as_ptr(), &mut handle) }, MmlocStatus::Io);
    assert!(last_error().contains("/nonexistent/model.json"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"format_version\": 1}").unwrap();
    let bad = CString::new(bad.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { mmloc_model_load(bad.as_ptr(), &mut handle) }, MmlocStatus::Format);
    assert!(handle.is_null());
}

#[test]
fn summarize_and_trilaterate() {
    let errors: Vec<f64> = (0..=10).map(f64::from).collect();
    let mut s = MmlocSummary::default();
    assert_eq!(unsafe { mmloc_summarize(errors.as_ptr(), errors.len(), &mut s) }, MmlocStatus::Ok);
    assert_eq!((s.mean, s.median, s.cdf90, s.count), (5.0, 5.0, 9.0, 11));
    assert_eq!(unsafe { mmloc_summarize(errors.as_ptr(), 0, &mut s) }, MmlocStatus::InvalidArgument);
    assert!(last_error().contains("empty"));

    let anchors = [0.0, 0.0, 4.0, 0.0, 0.0, 4.0];
    let ranges = [2f64.sqrt(), 10f64.sqrt(), 10f64.sqrt()];
    let mut xy = [0.0; 2];
    let mut res = -1.0;
    assert_eq!(unsafe { mmloc_trilaterate(anchors.as_ptr(), ranges.as_ptr(), 3, xy.as_mut_ptr(), &mut res) }, MmlocStatus::Ok);
    assert!((xy[0] - 1.0).abs() < 1e-6 && (xy[1] - 1.0).abs() < 1e-6 && res < 1e-6);
    assert_eq!(unsafe { mmloc_trilaterate(anchors.as_ptr(), ranges.as_ptr(), 2, xy.as_mut_ptr(), ptr::null_mut()) }, MmlocStatus::InvalidArgument);
    assert_eq!(unsafe { mmloc_trilaterate(ptr::null(), ranges.as_ptr(), 3, xy.as_mut_ptr(), ptr::null_mut()) }, MmlocStatus::NullPointer);
}

#[test]
fn version_and_error_reset() {
    let v = unsafe { CStr::from_ptr(mmloc_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    let e = [1.0];
    let mut s = MmlocSummary::default();
    unsafe { mmloc_summarize(e.as_ptr(), 0, &mut s) };
    assert!(!last_error().is_empty());
    unsafe { mmloc_summarize(e.as_ptr(), 1, &mut s) };
    assert!(last_error().is_empty());
}

#[test]
fn header_declares_every_export_and_compiles() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/mmloc.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "mmloc_model_load",
        "mmloc_model_free",
        "mmloc_model_predict",
        "mmloc_model_num_streams",
        "mmloc_model_window_len",
        "mmloc_model_stream_dim",
        "mmloc_summarize",
        "mmloc_trilaterate",
        "mmloc_last_error",
        "mmloc_version",
        "MMLOC_STATUS_PANIC",
    ] {
        assert!(text.contains(f), "{f} missing from header");
    }
    if let Ok(status) = std::process::Command::new("cc").args(["-fsyntax-only", "-x", "c"]).arg(&header).status() {
        assert!(status.success(), "header does not compile as C");
    }
}
