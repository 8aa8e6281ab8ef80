use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use confroute::pipeline::{build_vocab, predict_prompt, LatencyMode, PredictConfig};
use confroute::tinylm::{add_confidence_tokens, save_checkpoint, ModelDims, TinyModel};
use confroute::{AnswerValue, Choice, Dataset, QueryRecord, SplitTag};
use confroute_ffi::*;

fn last_error() -> String {
    let p = cr_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn take_string(p: *mut std::ffi::c_char) -> String {
    let s = unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned();
    unsafe { cr_string_free(p) };
    s
}

fn dataset() -> Dataset {
    let rec = |id: &str, gt: char| QueryRecord {
        id: id.into(),
        prompt: "pick one".into(),
        choices: Some(vec![Choice::new('A', "x"), Choice::new('B', "y")]),
        ground_truth: AnswerValue::Choice(gt),
        subject: None,
    };
    Dataset::new(vec![rec("a", 'A'), rec("b", 'B')], SplitTag::Test)
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/confroute.h");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"confroute.h\"\n\
         int main(void) {\n\
           double c = 0.0;\n\
           CrStatus s = cr_self_ref_score(0.2, 0.6, &c);\n\
           CrModel *m = NULL;\n\
           CrPrediction p;\n\
           (void)m; (void)p;\n\
           return s == CR_OK && cr_route(c, 0.5) == CR_ROUTE_LOCAL ? 0 : 1;\n\
         }\n",
    )
    .unwrap();
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
        .expect("run cc");
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn scores_and_metrics() {
    let mut c = 0.0;
    assert_eq!(
        unsafe { cr_self_ref_score(0.2, 0.6, &mut c) },
        CrStatus::CrOk
    );
    assert!((c - 0.75).abs() < 1e-12);
    assert_eq!(
        unsafe { cr_self_ref_score(0.0, 0.0, &mut c) },
        CrStatus::CrErrInvalidArgument
    );
    assert!(!last_error().is_empty());
    assert_eq!(
        unsafe { cr_self_ref_score(0.2, 0.6, ptr::null_mut()) },
        CrStatus::CrErrNullPointer
    );

    assert_eq!(cr_route(0.25, 0.5), CrRoute::CrRouteRemote);
    assert_eq!(cr_route(0.5, 0.5), CrRoute::CrRouteLocal);

    let scores = [1.0, 0.0, 0.5, 0.5];
    let correct = [1u8, 0, 1, 0];
    let mut v = f64::NAN;
    let s = unsafe {
        cr_calibration(
            CrMetric::CrMetricBrier,
            scores.as_ptr(),
            correct.as_ptr(),
            4,
            10,
            &mut v,
        )
    };
    assert_eq!(s, CrStatus::CrOk);
    // (0 + 0 + 0.25 + 0.25) / 4
    assert!((v - 0.125).abs() < 1e-12);
    let s = unsafe {
        cr_calibration(
            CrMetric::CrMetricEce,
            scores.as_ptr(),
            correct.as_ptr(),
            4,
            10,
            &mut v,
        )
    };
    assert_eq!(s, CrStatus::CrOk);
    assert!(v.abs() < 1e-12);
    let s = unsafe {
        cr_calibration(
            CrMetric::CrMetricCe,
            scores.as_ptr(),
            correct.as_ptr(),
            0,
            10,
            &mut v,
        )
    };
    assert_ne!(s, CrStatus::CrOk);

    // Perfect separation: low confidence exactly on rejected items.
    let conf = [0.1, 0.2, 0.8, 0.9];
    let reject = [1u8, 1, 0, 0];
    let s = unsafe { cr_rejection_auc(conf.as_ptr(), reject.as_ptr(), 4, &mut v) };
    assert_eq!(s, CrStatus::CrOk);
    assert_eq!(v, 1.0);
}

#[test]
fn model_and_dataset_handles() {
    let dir = tempfile::tempdir().unwrap();
    let d = dataset();
    let data_path = dir.path().join("d.jsonl");
    confroute::dataset::save_jsonl(&d, &data_path).unwrap();
    let base = TinyModel::new(
        build_vocab([&d]).unwrap(),
        ModelDims::with_width(4, 7),
        confroute::RngSeed(3),
    );
    let model = add_confidence_tokens(&base).unwrap();
    let model_path = dir.path().join("m.json");
    save_checkpoint(&model, &model_path).unwrap();

    let mut ds = ptr::null_mut();
    let path = CString::new(data_path.to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { cr_dataset_load(path.as_ptr(), &mut ds) },
        CrStatus::CrOk
    );
    assert_eq!(unsafe { cr_dataset_len(ds) }, 2);
    let mut prompt = ptr::null_mut();
    assert_eq!(
        unsafe { cr_dataset_prompt(ds, 1, &mut prompt) },
        CrStatus::CrOk
    );
    let prompt = take_string(prompt);
    assert_eq!(prompt, d.records[1].rendered_prompt());
    let mut unused = ptr::null_mut();
    assert_eq!(
        unsafe { cr_dataset_prompt(ds, 2, &mut unused) },
        CrStatus::CrErrInvalidArgument
    );
    unsafe { cr_dataset_free(ds) };

    let mut m = ptr::null_mut();
    let path = CString::new(model_path.to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { cr_model_load(path.as_ptr(), &mut m) },
        CrStatus::CrOk
    );
    let c_prompt = CString::new(prompt.clone()).unwrap();
    let mut pred = CrPrediction {
        answer: ptr::null_mut(),
        p_un: 0.0,
        p_cn: 0.0,
        confidence: 0.0,
        token_count: 0,
    };
    assert_eq!(
        unsafe { cr_model_predict(m, c_prompt.as_ptr(), 4, &mut pred) },
        CrStatus::CrOk
    );
    let cfg = PredictConfig {
        max_new_tokens: 4,
        latency: LatencyMode::PerToken(0.0),
        ..PredictConfig::default()
    };
    let want = predict_prompt(&model, "", &prompt, &cfg).unwrap();
    assert_eq!(
        unsafe { CStr::from_ptr(pred.answer) }.to_str().unwrap(),
        want.answer
    );
    assert_eq!(
        (pred.p_un, pred.p_cn, pred.token_count),
        (want.p_un, want.p_cn, want.token_count)
    );
    assert!((pred.confidence - want.p_cn / (want.p_un + want.p_cn)).abs() < 1e-12);
    unsafe { cr_prediction_free(&mut pred) };
    assert!(pred.answer.is_null());

    let bad = CString::new("pick zzz").unwrap();
    assert_eq!(
        unsafe { cr_model_predict(m, bad.as_ptr(), 4, &mut pred) },
        CrStatus::CrErrModel
    );
    assert!(last_error().contains("zzz"));
    unsafe { cr_model_free(m) };

    let missing = CString::new(dir.path().join("none.json").to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { cr_model_load(missing.as_ptr(), &mut m) },
        CrStatus::CrErrIo
    );
    assert!(m.is_null());
    assert_eq!(
        unsafe { cr_model_load(ptr::null(), &mut m) },
        CrStatus::CrErrNullPointer
    );
}

#[test]
fn gateway_lifecycle() {
    let config = CString::new(
        r#"{"threshold": 0.5,
            "local": {"name": "local", "base_url": "http://127.0.0.1:9", "timeout_ms": 100},
            "remote": {"name": "remote", "base_url": "http://127.0.0.1:10", "timeout_ms": 100},
            "listen_address": "127.0.0.1:0",
            "degraded_mode": "fallback-to-local"}"#,
    )
    .unwrap();
    let mut gw = ptr::null_mut();
    assert_eq!(
        unsafe { cr_gateway_start(config.as_ptr(), &mut gw) },
        CrStatus::CrOk
    );
    assert_ne!(unsafe { cr_gateway_port(gw) }, 0);
    assert_eq!(unsafe { cr_gateway_set_threshold(gw, 2.0) }, CrStatus::CrOk);
    assert_eq!(
        unsafe { cr_gateway_set_threshold(gw, -1.0) },
        CrStatus::CrErrInvalidArgument
    );
    let mut json = ptr::null_mut();
    assert_eq!(
        unsafe { cr_gateway_metrics_json(gw, &mut json) },
        CrStatus::CrOk
    );
    let metrics: serde_json::Value = serde_json::from_str(&take_string(json)).unwrap();
    assert_eq!(metrics["requests_total"], 0);
    unsafe { cr_gateway_stop(gw) };

    let bad = CString::new("{\"threshold\": 0.5}").unwrap();
    let mut gw = ptr::null_mut();
    assert_eq!(
        unsafe { cr_gateway_start(bad.as_ptr(), &mut gw) },
        CrStatus::CrErrParse
    );
    assert!(gw.is_null());
}
