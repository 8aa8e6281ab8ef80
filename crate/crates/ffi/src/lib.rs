//! C ABI over the routing toolkit.
//!
//! Conventions: every fallible function returns a [`CrStatus`]; results go
//! through out-pointers. On failure, [`cr_last_error`] describes the most
//! recent error on the calling thread. Handles are opaque and must be
//! released with their matching `*_free` function. Strings returned by the
//! library are released with [`cr_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use confroute::calibration;
use confroute::confidence::self_ref_score;
use confroute::dataset::load_jsonl;
use confroute::gateway::{GatewayConfig, GatewayServer, Threshold};
use confroute::pipeline::{predict_prompt, LatencyMode, PredictConfig};
use confroute::rejection::roc_from_confidence;
use confroute::routing::{route_value, RouteDecision};
use confroute::tinylm::{load_checkpoint, TinyModel};
use confroute::{Dataset, Error, SplitTag};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrStatus {
    CrOk = 0,
    CrErrNullPointer = 1,
    CrErrInvalidUtf8 = 2,
    CrErrInvalidArgument = 3,
    CrErrIo = 4,
    CrErrParse = 5,
    CrErrModel = 6,
    CrErrNetwork = 7,
    CrErrPanic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrRoute {
    CrRouteLocal = 0,
    CrRouteRemote = 1,
}

/// One greedy prediction. `answer` is owned by the library; release the
/// whole struct with [`cr_prediction_free`].
#[repr(C)]
#[derive(Debug)]
pub struct CrPrediction {
    pub answer: *mut c_char,
    pub p_un: f64,
    pub p_cn: f64,
    /// `P(<CN>) / (P(<UN>) + P(<CN>))`, or -1 when the model has no confidence tokens.
    pub confidence: f64,
    pub token_count: u32,
}

/// Loaded model checkpoint.
pub struct CrModel {
    model: TinyModel,
}

/// Loaded dataset.
pub struct CrDataset {
    dataset: Dataset,
}

/// Running gateway with its own async runtime.
pub struct CrGateway {
    runtime: tokio::runtime::Runtime,
    server: Option<GatewayServer>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(err: &Error) -> CrStatus {
    match err {
        Error::Io { .. } | Error::Bind { .. } => CrStatus::CrErrIo,
        Error::Schema { .. }
        | Error::DuplicateId { .. }
        | Error::Json(_)
        | Error::Parse(_)
        | Error::Config(_) => CrStatus::CrErrParse,
        Error::Checkpoint(_)
        | Error::OutOfVocab(_)
        | Error::SequenceTooLong { .. }
        | Error::NoConfidenceTokens
        | Error::Empty(_) => CrStatus::CrErrModel,
        Error::Upstream { .. } => CrStatus::CrErrNetwork,
        _ => CrStatus::CrErrInvalidArgument,
    }
}

fn fail(err: Error) -> CrStatus {
    let status = status_of(&err);
    set_error(err.to_string());
    status
}

/// Run `f`, turning panics into [`CrStatus::CrErrPanic`].
fn guard(f: impl FnOnce() -> CrStatus) -> CrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            CrStatus::CrErrPanic
        }
    }
}

/// Borrow a C string as `&str`.
///
/// # Safety
/// `p` must be null or point to a NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, CrStatus> {
    if p.is_null() {
        set_error(format!("{what} is null"));
        return Err(CrStatus::CrErrNullPointer);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        CrStatus::CrErrInvalidUtf8
    })
}

fn null_error(what: &str) -> CrStatus {
    set_error(format!("{what} is null"));
    CrStatus::CrErrNullPointer
}

fn owned_string(s: &str) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .map(CString::into_raw)
        .unwrap_or(ptr::null_mut())
}

/// Message for the last failure on this thread, or null. Valid until the
/// next failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn cr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Release a string returned by the library.
///
/// # Safety
/// `s` must be null or a pointer obtained from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn cr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Confidence-token score `p_cn / (p_un + p_cn)`.
///
/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cr_self_ref_score(p_un: f64, p_cn: f64, out: *mut f64) -> CrStatus {
    if out.is_null() {
        return null_error("out");
    }
    match self_ref_score(p_un, p_cn) {
        Ok(s) => {
            *out = s.value;
            CrStatus::CrOk
        }
        Err(e) => fail(e),
    }
}

/// Remote iff `confidence < threshold`.
#[no_mangle]
pub extern "C" fn cr_route(confidence: f64, threshold: f64) -> CrRoute {
    match route_value(confidence, threshold) {
        RouteDecision::Local => CrRoute::CrRouteLocal,
        RouteDecision::Remote => CrRoute::CrRouteRemote,
    }
}

/// # Safety
/// Both arrays must hold `n` elements.
unsafe fn slices<'a>(
    scores: *const f64,
    flags: *const u8,
    n: usize,
) -> Result<(&'a [f64], Vec<bool>), CrStatus> {
    if n > 0 && (scores.is_null() || flags.is_null()) {
        return Err(null_error("input array"));
    }
    if n == 0 {
        return Ok((&[], Vec::new()));
    }
    let s = std::slice::from_raw_parts(scores, n);
    let f = std::slice::from_raw_parts(flags, n)
        .iter()
        .map(|&b| b != 0)
        .collect();
    Ok((s, f))
}

/// Which calibration metric [`cr_calibration`] computes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrMetric {
    CrMetricEce = 0,
    CrMetricBrier = 1,
    CrMetricCe = 2,
}

/// ECE (with `n_bins` bins), Brier score, or cross-entropy (clamped at the
/// default epsilon) of `scores` against 0/1 `correct`.
///
/// # Safety
/// `scores` and `correct` must hold `n` elements; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cr_calibration(
    metric: CrMetric,
    scores: *const f64,
    correct: *const u8,
    n: usize,
    n_bins: usize,
    out: *mut f64,
) -> CrStatus {
    guard(|| {
        if out.is_null() {
            return null_error("out");
        }
        let (s, c) = match slices(scores, correct, n) {
            Ok(x) => x,
            Err(st) => return st,
        };
        let r = match metric {
            CrMetric::CrMetricEce => calibration::ece(s, &c, n_bins),
            CrMetric::CrMetricBrier => calibration::brier(s, &c),
            CrMetric::CrMetricCe => calibration::ce(s, &c, calibration::DEFAULT_CE_EPS),
        };
        match r {
            Ok(v) => {
                *out = v;
                CrStatus::CrOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Rejection AUC of `confidence` (rejection score `1 - c`) against
/// `is_reject` labels.
///
/// # Safety
/// Arrays must hold `n` elements; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cr_rejection_auc(
    confidence: *const f64,
    is_reject: *const u8,
    n: usize,
    out: *mut f64,
) -> CrStatus {
    guard(|| {
        if out.is_null() {
            return null_error("out");
        }
        let (s, c) = match slices(confidence, is_reject, n) {
            Ok(x) => x,
            Err(st) => return st,
        };
        match roc_from_confidence(s, &c) {
            Ok(roc) => {
                *out = roc.auc;
                CrStatus::CrOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Load a checkpoint written by `confroute train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cr_model_load(path: *const c_char, out: *mut *mut CrModel) -> CrStatus {
    guard(|| {
        if out.is_null() {
            return null_error("out");
        }
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_checkpoint(Path::new(path)) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(CrModel { model }));
                CrStatus::CrOk
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `model` must be null or a handle from [`cr_model_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn cr_model_free(model: *mut CrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Greedy prediction for an already-rendered prompt.
///
/// # Safety
/// `model` must be a live handle, `prompt` a NUL-terminated string and
/// `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cr_model_predict(
    model: *const CrModel,
    prompt: *const c_char,
    max_new_tokens: u32,
    out: *mut CrPrediction,
) -> CrStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            return null_error("model or out");
        }
        let prompt = match str_arg(prompt, "prompt") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let config = PredictConfig {
            max_new_tokens: max_new_tokens as usize,
            latency: LatencyMode::PerToken(0.0),
            ..PredictConfig::default()
        };
        match predict_prompt(&(*model).model, "", prompt, &config) {
            Ok(p) => {
                let confidence = self_ref_score(p.p_un, p.p_cn).map_or(-1.0, |s| s.value);
                *out = CrPrediction {
                    answer: owned_string(&p.answer),
                    p_un: p.p_un,
                    p_cn: p.p_cn,
                    confidence,
                    token_count: p.token_count,
                };
                CrStatus::CrOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Release the answer string inside `p` and reset it.
///
/// # Safety
/// `p` must be null or point to a prediction filled by [`cr_model_predict`].
#[no_mangle]
pub unsafe extern "C" fn cr_prediction_free(p: *mut CrPrediction) {
    if let Some(p) = p.as_mut() {
        cr_string_free(p.answer);
        p.answer = ptr::null_mut();
    }
}

/// Load and validate a JSONL dataset.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cr_dataset_load(
    path: *const c_char,
    out: *mut *mut CrDataset,
) -> CrStatus {
    guard(|| {
        if out.is_null() {
            return null_error("out");
        }
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_jsonl(path, SplitTag::Test) {
            Ok(dataset) => {
                *out = Box::into_raw(Box::new(CrDataset { dataset }));
                CrStatus::CrOk
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `dataset` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cr_dataset_len(dataset: *const CrDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.dataset.len())
}

/// Rendered prompt of record `index`; free with [`cr_string_free`].
///
/// # Safety
/// `dataset` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cr_dataset_prompt(
    dataset: *const CrDataset,
    index: usize,
    out: *mut *mut c_char,
) -> CrStatus {
    let (Some(d), false) = (dataset.as_ref(), out.is_null()) else {
        return null_error("dataset or out");
    };
    match d.dataset.records.get(index) {
        Some(r) => {
            *out = owned_string(&r.rendered_prompt());
            CrStatus::CrOk
        }
        None => {
            set_error(format!(
                "index {index} out of range for {} records",
                d.dataset.len()
            ));
            CrStatus::CrErrInvalidArgument
        }
    }
}

/// # Safety
/// `dataset` must be null or a handle from [`cr_dataset_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn cr_dataset_free(dataset: *mut CrDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Start a gateway from a JSON config (same schema as the config file).
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cr_gateway_start(
    config_json: *const c_char,
    out: *mut *mut CrGateway,
) -> CrStatus {
    guard(|| {
        if out.is_null() {
            return null_error("out");
        }
        let text = match str_arg(config_json, "config_json") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let config: GatewayConfig = match serde_json::from_str(text) {
            Ok(c) => c,
            Err(e) => return fail(Error::Config(e.to_string())),
        };
        let runtime = match tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()
        {
            Ok(r) => r,
            Err(e) => {
                set_error(e.to_string());
                return CrStatus::CrErrIo;
            }
        };
        match runtime.block_on(GatewayServer::start(config)) {
            Ok(server) => {
                *out = Box::into_raw(Box::new(CrGateway {
                    runtime,
                    server: Some(server),
                }));
                CrStatus::CrOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Bound port of a running gateway, or 0 for a null handle.
///
/// # Safety
/// `gateway` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cr_gateway_port(gateway: *const CrGateway) -> u16 {
    gateway
        .as_ref()
        .and_then(|g| g.server.as_ref())
        .map_or(0, |s| s.local_addr().port())
}

/// Atomically replace the routing threshold. Values above 1 route everything.
///
/// # Safety
/// `gateway` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cr_gateway_set_threshold(
    gateway: *const CrGateway,
    threshold: f64,
) -> CrStatus {
    let Some(server) = gateway.as_ref().and_then(|g| g.server.as_ref()) else {
        return null_error("gateway");
    };
    let t = if threshold > 1.0 {
        Ok(Threshold::AboveMax)
    } else {
        Threshold::new(threshold)
    };
    match t.and_then(|t| server.gateway.set_threshold(t)) {
        Ok(()) => CrStatus::CrOk,
        Err(e) => {
            set_error(e.to_string());
            CrStatus::CrErrInvalidArgument
        }
    }
}

/// Counter snapshot as JSON; free with [`cr_string_free`].
///
/// # Safety
/// `gateway` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cr_gateway_metrics_json(
    gateway: *const CrGateway,
    out: *mut *mut c_char,
) -> CrStatus {
    let (Some(server), false) = (
        gateway.as_ref().and_then(|g| g.server.as_ref()),
        out.is_null(),
    ) else {
        return null_error("gateway or out");
    };
    match serde_json::to_string(&server.gateway.metrics()) {
        Ok(s) => {
            *out = owned_string(&s);
            CrStatus::CrOk
        }
        Err(e) => fail(e.into()),
    }
}

/// Shut the gateway down gracefully and release the handle.
///
/// # Safety
/// `gateway` must be null or a handle from [`cr_gateway_start`], freed once.
#[no_mangle]
pub unsafe extern "C" fn cr_gateway_stop(gateway: *mut CrGateway) {
    if gateway.is_null() {
        return;
    }
    let mut g = Box::from_raw(gateway);
    if let Some(server) = g.server.take() {
        g.runtime.block_on(server.shutdown());
    }
}
