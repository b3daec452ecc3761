//! C ABI over `comprune`.
//!
//! Objects are opaque handles created by `*_new`/`*_load` functions and
//! released with the matching `*_free`. Every fallible call returns a
//! [`CprStatus`]; on failure [`cpr_last_error`] describes the cause for the
//! calling thread. Strings returned to the caller are released with
//! [`cpr_string_free`].

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use comprune::gates::{init_gates, Granularity};
use comprune::metrics::{count_flops, count_params};
use comprune::network::Network;
use comprune::pipeline::{self, Checkpoint, ExperimentConfig};
use comprune::spec::shortcuts::{insert_shortcuts, MismatchPolicy};
use comprune::spec::structure::analyze;
use comprune::spec::{catalog, ModelSpec};
use comprune::tensor::Tensor;
use comprune::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CprStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidSpec = 3,
    ShapeMismatch = 4,
    InvalidArgument = 5,
    Surgery = 6,
    Data = 7,
    Config = 8,
    Numerical = 9,
    Checkpoint = 10,
    Io = 11,
    Json = 12,
    Panic = 13,
}

/// Bit flags selecting granularities.
pub const CPR_FILTER: u32 = 1;
pub const CPR_LAYER: u32 = 2;
pub const CPR_BRANCH: u32 = 4;
pub const CPR_BLOCK: u32 = 8;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CprPolicy {
    Skip = 0,
    Adapt = 1,
}

/// Opaque model spec.
pub struct CprSpec(ModelSpec);

/// Opaque executable network with its gates.
pub struct CprNetwork(Network);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> CprStatus {
    match err.kind() {
        "invalid_spec" => CprStatus::InvalidSpec,
        "shape_mismatch" => CprStatus::ShapeMismatch,
        "surgery" => CprStatus::Surgery,
        "data" => CprStatus::Data,
        "config" => CprStatus::Config,
        "numerical" => CprStatus::Numerical,
        "checkpoint" => CprStatus::Checkpoint,
        "io" => CprStatus::Io,
        "json" => CprStatus::Json,
        _ => CprStatus::InvalidArgument,
    }
}

enum Failure {
    Status(CprStatus, String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CprStatus {
    let status = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => return CprStatus::Ok,
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            CprStatus::Panic
        }
    };
    status
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Status(CprStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Status(CprStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn null(what: &str) -> Failure {
    Failure::Status(CprStatus::NullPointer, format!("{what} is null"))
}

unsafe fn put<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

fn granularities(mask: u32) -> Result<BTreeSet<Granularity>, Failure> {
    if mask == 0 || mask & !0xF != 0 {
        return Err(Failure::Status(CprStatus::InvalidArgument, format!("granularity mask {mask:#x} must be a nonzero combination of 0xF")));
    }
    Ok(Granularity::ALL.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, &g)| g).collect())
}

/// Message for the last failed call on this thread; empty when none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cpr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, statically allocated.
#[no_mangle]
pub extern "C" fn cpr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn cpr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a spec from JSON.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cpr_spec_from_json(json: *const c_char, out: *mut *mut CprSpec) -> CprStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = ModelSpec::from_json(read_str(json, "json")?)?;
        comprune::spec::validate(&spec)?;
        put(out, CprSpec(spec));
        Ok(())
    })
}

/// A catalog spec at its default input shape.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cpr_spec_builtin(name: *const c_char, out: *mut *mut CprSpec) -> CprStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        put(out, CprSpec(catalog::builtin(read_str(name, "name")?)?));
        Ok(())
    })
}

/// # Safety
/// `spec` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn cpr_spec_free(spec: *mut CprSpec) {
    if !spec.is_null() {
        drop(Box::from_raw(spec));
    }
}

/// Serializes a spec; release the string with [`cpr_string_free`].
///
/// # Safety
/// `spec` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cpr_spec_to_json(spec: *const CprSpec, out: *mut *mut c_char) -> CprStatus {
    guard(|| {
        let spec = spec.as_ref().ok_or_else(|| null("spec"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let json = spec.0.to_json()?;
        *out = CString::new(json).map_err(|_| Failure::Status(CprStatus::Json, "spec JSON contains NUL".into()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `spec` must be a live handle; `params` and `flops` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cpr_spec_cost(spec: *const CprSpec, params: *mut u64, flops: *mut u64) -> CprStatus {
    guard(|| {
        let spec = spec.as_ref().ok_or_else(|| null("spec"))?;
        if params.is_null() || flops.is_null() {
            return Err(null("output"));
        }
        *params = count_params(&spec.0)?;
        *flops = count_flops(&spec.0)?;
        Ok(())
    })
}

/// Copies `spec` with shortcuts added around every site of the structural
/// granularities in `mask`; filter bits are ignored.
///
/// # Safety
/// `spec` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cpr_spec_insert_shortcuts(spec: *const CprSpec, mask: u32, policy: CprPolicy, out: *mut *mut CprSpec) -> CprStatus {
    guard(|| {
        let spec = spec.as_ref().ok_or_else(|| null("spec"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let policy = match policy {
            CprPolicy::Skip => MismatchPolicy::Skip,
            CprPolicy::Adapt => MismatchPolicy::Adapt,
        };
        let mut next = spec.0.clone();
        for g in granularities(mask)?.into_iter().filter(|g| g.is_structural()) {
            next = insert_shortcuts(&next, g, policy)?;
        }
        put(out, CprSpec(next));
        Ok(())
    })
}

/// Fresh weights and one gate per attachment point of the granularities in
/// `mask` (0 for none), all from `seed`.
///
/// # Safety
/// `spec` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cpr_network_new(spec: *const CprSpec, mask: u32, seed: u64, out: *mut *mut CprNetwork) -> CprStatus {
    guard(|| {
        let spec = spec.as_ref().ok_or_else(|| null("spec"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let gates = if mask == 0 { Vec::new() } else { init_gates(&spec.0, &analyze(&spec.0)?, &granularities(mask)?, seed) };
        put(out, CprNetwork(Network::instantiate(&spec.0, gates, seed)?));
        Ok(())
    })
}

/// Loads a checkpoint written by the pipeline.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cpr_network_load(path: *const c_char, out: *mut *mut CprNetwork) -> CprStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = Checkpoint::load(read_str(path, "path")?)?;
        put(out, CprNetwork(ckpt.network(0)?));
        Ok(())
    })
}

/// # Safety
/// `net` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn cpr_network_free(net: *mut CprNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Number of gates and of trainable parameters.
///
/// # Safety
/// `net` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn cpr_network_sizes(net: *const CprNetwork, gates: *mut usize, params: *mut usize) -> CprStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        if gates.is_null() || params.is_null() {
            return Err(null("output"));
        }
        *gates = net.0.gates.len();
        *params = net.0.weights.param_count();
        Ok(())
    })
}

/// Eval-mode logits for `batch` samples laid out `[batch, C, H, W]`.
/// `input_len` must equal `batch * C * H * W` and `logits_len` must equal
/// `batch * classes`.
///
/// # Safety
/// `net` must be a live handle; `input` must hold `input_len` readable values
/// and `logits` `logits_len` writable ones.
#[no_mangle]
pub unsafe extern "C" fn cpr_network_predict(
    net: *mut CprNetwork,
    input: *const f64,
    input_len: usize,
    batch: usize,
    logits: *mut f64,
    logits_len: usize,
) -> CprStatus {
    guard(|| {
        let net = net.as_mut().ok_or_else(|| null("net"))?;
        if input.is_null() || logits.is_null() {
            return Err(null("buffer"));
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(&net.0.spec.input_shape);
        let expected: usize = shape.iter().product();
        if input_len != expected || logits_len != batch * net.0.spec.classes {
            return Err(Failure::Status(
                CprStatus::ShapeMismatch,
                format!("expected {expected} inputs and {} logits, got {input_len} and {logits_len}", batch * net.0.spec.classes),
            ));
        }
        let x = Tensor::new(shape, std::slice::from_raw_parts(input, input_len).to_vec())?;
        let y = net.0.predict_batched(&x, 256)?;
        ptr::copy_nonoverlapping(y.data().as_ptr(), logits, logits_len);
        Ok(())
    })
}

/// Runs the full prune protocol from a config file and returns the report
/// as JSON; release it with [`cpr_string_free`].
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `report_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cpr_prune(config_path: *const c_char, report_json: *mut *mut c_char) -> CprStatus {
    guard(|| {
        if report_json.is_null() {
            return Err(null("report_json"));
        }
        let cfg = ExperimentConfig::load(read_str(config_path, "config_path")?)?;
        let outcome = pipeline::prune_pipeline(&cfg)?;
        let json = serde_json::to_string_pretty(&outcome.report).map_err(Error::from)?;
        *report_json = CString::new(json).map_err(|_| Failure::Status(CprStatus::Json, "report contains NUL".into()))?.into_raw();
        Ok(())
    })
}
