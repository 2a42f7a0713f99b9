use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use seqwatch_ffi::*;

fn last_error() -> String {
    let p = sw_last_error_message();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

/// Low-discrepancy points in the unit cube (additive recurrence).
fn lattice(n: usize, dim: usize) -> Vec<f64> {
    let steps = [0.618_033_988_75, 0.414_213_562_37, 0.732_050_807_57, 0.236_067_977_5, 0.645_751_311_06];
    (0..n)
        .flat_map(|i| (0..dim).map(move |j| ((i + 1) as f64 * steps[j % steps.len()]).fract()))
        .collect()
}

fn trained(n: usize, dim: usize) -> *mut SwModel {
    let data = lattice(n, dim);
    let mut model = ptr::null_mut();
    let st = unsafe { sw_model_train(data.as_ptr(), n, dim, ptr::null(), &mut model) };
    assert_eq!(st, SwStatus::Ok);
    assert!(!model.is_null());
    model
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(sw_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn train_query_insert_and_stats() {
    let dim = 4;
    let model = trained(200, dim);
    let mut stats = unsafe { std::mem::zeroed::<SwModelStats>() };
    assert_eq!(unsafe { sw_model_stats(model, &mut stats) }, SwStatus::Ok);
    assert_eq!(stats.dim, dim);
    assert_eq!(stats.reference_size + stats.calibration_size, 200);
    assert_eq!(stats.k, 3);
    assert!(stats.d_alpha > 0.0);

    let q = [0.5; 4];
    let mut d = f64::NAN;
    assert_eq!(unsafe { sw_model_knn_distance(model, q.as_ptr(), dim, &mut d) }, SwStatus::Ok);
    assert!(d.is_finite() && d >= 0.0);

    // inserting the query k times makes its k-th neighbour distance zero
    let batch = [q, q, q].concat();
    let mut inserted = 0usize;
    assert_eq!(unsafe { sw_model_insert(model, batch.as_ptr(), 3, dim, &mut inserted) }, SwStatus::Ok);
    assert_eq!(inserted, 3);
    assert_eq!(unsafe { sw_model_knn_distance(model, q.as_ptr(), dim, &mut d) }, SwStatus::Ok);
    assert_eq!(d, 0.0);

    let mut after = stats;
    assert_eq!(unsafe { sw_model_stats(model, &mut after) }, SwStatus::Ok);
    assert_eq!(after.reference_size, stats.reference_size + 3);
    assert_eq!(after.insert_count, 3);
    unsafe { sw_model_free(model) };
}

#[test]
fn errors_set_status_and_message() {
    let mut out = ptr::null_mut();
    let data = lattice(4, 2);
    let mut cfg = sw_train_config_default();
    cfg.k = 50;
    let st = unsafe { sw_model_train(data.as_ptr(), 4, 2, &cfg, &mut out) };
    assert_eq!(st, SwStatus::Training);
    assert!(out.is_null());
    assert!(!last_error().is_empty());

    let st = unsafe { sw_model_train(ptr::null(), 4, 2, ptr::null(), &mut out) };
    assert_eq!(st, SwStatus::NullPointer);
    assert!(last_error().contains("null"));

    let model = trained(50, 3);
    let q = [0.1, 0.2];
    let mut d = 0.0;
    let st = unsafe { sw_model_knn_distance(model, q.as_ptr(), 2, &mut d) };
    assert_eq!(st, SwStatus::Dimension);
    assert!(last_error().contains("dimension"));

    let bad = [f64::NAN, 0.0, 0.0];
    let st = unsafe { sw_model_knn_distance(model, bad.as_ptr(), 3, &mut d) };
    assert_eq!(st, SwStatus::InvalidArgument);

    // a successful call clears the previous message
    let ok = [0.1, 0.2, 0.3];
    assert_eq!(unsafe { sw_model_knn_distance(model, ok.as_ptr(), 3, &mut d) }, SwStatus::Ok);
    assert!(sw_last_error_message().is_null());

    unsafe { sw_model_free(model) };
    unsafe { sw_model_free(ptr::null_mut()) };
}

#[test]
fn last_error_is_per_thread() {
    let mut d = 0.0;
    let st = unsafe { sw_model_knn_distance(ptr::null(), ptr::null(), 0, &mut d) };
    assert_eq!(st, SwStatus::NullPointer);
    let other = std::thread::spawn(|| sw_last_error_message().is_null()).join().unwrap();
    assert!(other);
    assert!(last_error().contains("model"));
}

#[test]
fn save_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.bin").to_str().unwrap()).unwrap();
    let model = trained(120, 3);
    assert_eq!(unsafe { sw_model_save(model, path.as_ptr()) }, SwStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { sw_model_load(path.as_ptr(), &mut loaded) }, SwStatus::Ok);

    let q = [0.3, 0.6, 0.9];
    let (mut a, mut b) = (0.0, 0.0);
    unsafe {
        sw_model_knn_distance(model, q.as_ptr(), 3, &mut a);
        sw_model_knn_distance(loaded, q.as_ptr(), 3, &mut b);
    }
    assert_eq!(a.to_bits(), b.to_bits());

    let missing = CString::new(dir.path().join("nope.bin").to_str().unwrap()).unwrap();
    let mut none = ptr::null_mut();
    assert_eq!(unsafe { sw_model_load(missing.as_ptr(), &mut none) }, SwStatus::Io);
    unsafe {
        sw_model_free(model);
        sw_model_free(loaded);
    }
}

#[test]
fn evidence_and_flow_stats() {
    let mut e = 0.0;
    assert_eq!(unsafe { sw_evidence(2.0, 1.0, 3, 1e6, &mut e) }, SwStatus::Ok);
    assert_eq!(e, 7.0);
    assert_eq!(unsafe { sw_evidence(100.0, 1.0, 9, 50.0, &mut e) }, SwStatus::Ok);
    assert_eq!(e, 50.0);
    assert_eq!(unsafe { sw_evidence(-1.0, 1.0, 3, 1e6, &mut e) }, SwStatus::InvalidArgument);

    let xs = [1.0, 2.0, 3.0, 4.0];
    let mut s = SwFlowStats { mean: 0.0, variance: 0.0, skewness: 0.0, kurtosis: 0.0 };
    assert_eq!(unsafe { sw_flow_stats(xs.as_ptr(), xs.len(), &mut s) }, SwStatus::Ok);
    assert_eq!(s.mean, 2.5);
    assert_eq!(s.variance, 1.25);
    assert!(s.skewness.abs() < 1e-12);
    assert!((s.kurtosis - 1.64).abs() < 1e-12);
}

#[test]
fn detector_opens_and_closes() {
    let mut cfg = sw_detector_config_default();
    cfg.h = 5.0;
    cfg.n_consec = 2;
    let mut det = ptr::null_mut();
    assert_eq!(unsafe { sw_detector_new(&cfg, 1.0, 1, &mut det) }, SwStatus::Ok);

    let deltas = [-1.0, 2.0, 2.0, 2.0, -1.0, -1.0];
    let mut r = unsafe { std::mem::zeroed::<SwStepResult>() };
    let mut events = Vec::new();
    for (t, d) in deltas.iter().enumerate() {
        assert_eq!(unsafe { sw_detector_step_delta(det, t as u64, *d, &mut r) }, SwStatus::Ok);
        events.push((r.event, r.s));
    }
    assert_eq!(events[3], (SwEventKind::Opened, 6.0));
    assert_eq!(events[5].0, SwEventKind::Closed);
    assert_eq!(r.tau_start, 0);
    assert_eq!(r.detection_frame, 3);
    assert_eq!(r.tau_end, 3);
    assert_eq!(r.closed_at, 5);
    assert_eq!(r.peak_statistic, 6.0);
    assert_eq!(r.s, 0.0);

    assert_eq!(unsafe { sw_detector_step_delta(det, 2, 0.0, &mut r) }, SwStatus::OutOfOrder);

    // distances: d_alpha = 1, exponent 1, so delta = max distance - 1
    let ds = [0.5, 3.0];
    assert_eq!(unsafe { sw_detector_reset(det) }, SwStatus::Ok);
    assert_eq!(unsafe { sw_detector_step(det, 0, ds.as_ptr(), 2, &mut r) }, SwStatus::Ok);
    assert_eq!(r.delta, 2.0);
    assert_eq!(r.event, SwEventKind::None);
    unsafe { sw_detector_free(det) };
}

#[test]
fn session_scores_frames_and_shares_the_model() {
    let dim = 3;
    let model = trained(300, dim);
    let mut cfg = sw_detector_config_default();
    cfg.h = 1e-6;
    cfg.n_consec = 1;
    let mut policy = sw_update_policy_default();
    policy.auto_insert_stride = 1;
    let id = CString::new("cam").unwrap();
    let mut session = ptr::null_mut();
    assert_eq!(unsafe { sw_session_new(model, id.as_ptr(), &cfg, &policy, &mut session) }, SwStatus::Ok);

    let mut before = unsafe { std::mem::zeroed::<SwModelStats>() };
    unsafe { sw_model_stats(model, &mut before) };

    // the training point closest to the reference set is certainly nominal
    let data = lattice(300, dim);
    let knn = |q: &[f64]| {
        let mut d = f64::NAN;
        assert_eq!(unsafe { sw_model_knn_distance(model, q.as_ptr(), dim, &mut d) }, SwStatus::Ok);
        d
    };
    let nominal = data.chunks(dim).min_by(|a, b| knn(a).total_cmp(&knn(b))).unwrap().to_vec();
    assert!(knn(&nominal) <= before.d_alpha);
    let far = [9.0, 9.0, 9.0];
    let mut r = unsafe { std::mem::zeroed::<SwStepResult>() };
    assert_eq!(unsafe { sw_session_process(session, 0, nominal.as_ptr(), 1, dim, &mut r) }, SwStatus::Ok);
    assert_eq!(r.s, 0.0);
    assert_eq!(r.inserted, 1);

    assert_eq!(unsafe { sw_session_process(session, 1, far.as_ptr(), 1, dim, &mut r) }, SwStatus::Ok);
    assert_eq!(r.event, SwEventKind::Opened);
    assert_eq!(r.alarm_id, 1);
    assert_eq!(r.tau_start, 0);

    // an empty frame contributes the floor evidence and closes the alarm
    assert_eq!(unsafe { sw_session_process(session, 2, ptr::null(), 0, dim, &mut r) }, SwStatus::Ok);
    assert_eq!(r.event, SwEventKind::Closed);
    assert_eq!(r.alarm_id, 1);

    let wrong = [0.0; 2];
    assert_eq!(unsafe { sw_session_process(session, 3, wrong.as_ptr(), 1, 2, &mut r) }, SwStatus::Dimension);

    let mut after = before;
    unsafe { sw_model_stats(model, &mut after) };
    assert_eq!(after.reference_size, before.reference_size + 1);

    // the session keeps the model alive after the model handle is freed
    unsafe { sw_model_free(model) };
    assert_eq!(unsafe { sw_session_process(session, 4, nominal.as_ptr(), 1, dim, &mut r) }, SwStatus::Ok);
    unsafe { sw_session_free(session) };
}

fn compiler(names: &[&str]) -> Option<String> {
    names
        .iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .map(|c| c.to_string())
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("seqwatch.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["sw_model_train", "sw_detector_step", "sw_session_process", "sw_last_error_message"] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"seqwatch.h\"\n\
         int main(void) {\n\
           SwTrainConfig cfg = sw_train_config_default();\n\
           SwModel *m = 0;\n\
           SwStatus st = sw_model_train(0, 0, 0, &cfg, &m);\n\
           return st == SW_STATUS_OK;\n\
         }\n",
    )
    .unwrap();
    let inc = header.parent().unwrap();
    let cc = compiler(&["cc", "gcc", "clang"]).expect("a C compiler is on PATH");
    let out = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(inc)
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cxx = compiler(&["c++", "g++", "clang++"]).expect("a C++ compiler is on PATH");
    let out = Command::new(&cxx)
        .args(["-x", "c++", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(inc)
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
