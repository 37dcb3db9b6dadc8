//! C interface to the selfcomp toolkit.
//!
//! Every function returns an [`ScStatus`]. On failure the message of the
//! last error on the calling thread is available from
//! [`sc_last_error_message`]. Networks are opaque handles released with
//! [`sc_network_free`]; strings returned by the library are released with
//! [`sc_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use selfcomp::network::{build_cifar_net, checkpoint, logits, BuildOptions, Network, WidthConfig};
use selfcomp::pruner::{find_removable, keep_one_survivor, prune_verified, PruneOptions, PRESERVATION_TOL};
use selfcomp::quantizer::{quantize_backward, quantize_value};
use selfcomp::size::{network_size, SizeMode};
use selfcomp::tensor::Tensor;
use selfcomp::Error;

/// Random inputs compared before and after [`sc_network_prune`].
pub const SC_PRESERVATION_PROBES: usize = 32;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Checkpoint = 5,
    Network = 6,
    Diverged = 7,
    Preservation = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScSizeMode {
    Simple = 0,
    Coupled = 1,
}

/// Opaque network handle.
pub struct ScNetwork {
    net: Network,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(msg).expect("nul bytes removed")));
}

struct Failure(ScStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) => ScStatus::Config,
            Error::Data(_) => ScStatus::Data,
            Error::Checkpoint { .. } | Error::Io { .. } | Error::Json(_) => ScStatus::Checkpoint,
            Error::Diverged { .. } => ScStatus::Diverged,
            Error::Preservation { .. } => ScStatus::Preservation,
            Error::Quant(_) | Error::Tensor(_) => ScStatus::InvalidArgument,
            _ => ScStatus::Network,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(ScStatus::InvalidArgument, msg.into())
}

fn null(name: &str) -> Failure {
    Failure(ScStatus::NullPointer, format!("`{name}` is null"))
}

/// Run `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ScStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ScStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            ScStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize, name: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, name: &str) -> Result<&'a mut [T], Failure> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{name}` is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a>(p: *const ScNetwork) -> Result<&'a ScNetwork, Failure> {
    p.as_ref().ok_or_else(|| null("network"))
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    let c = CString::new(s).map_err(|_| invalid("string contains a nul byte"))?;
    *out = c.into_raw();
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Quantize `n` values with one bit depth and exponent.
///
/// # Safety
/// `x` and `out` must point to `n` readable and writable floats.
#[no_mangle]
pub unsafe extern "C" fn sc_quantize(x: *const f32, n: usize, bits: f32, exponent: f32, out: *mut f32) -> ScStatus {
    guard(|| {
        let x = slice(x, n, "x")?;
        let out = slice_mut(out, n, "out")?;
        for (o, &v) in out.iter_mut().zip(x) {
            *o = quantize_value(v, bits, exponent).map_err(|e| invalid(e.to_string()))?;
        }
        Ok(())
    })
}

/// Straight-through gradients of [`sc_quantize`]. `dx` receives `n`
/// values; the bit-depth and exponent gradients are summed.
///
/// # Safety
/// `upstream`, `x` and `dx` must point to `n` floats; `dbits` and
/// `dexponent` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sc_quantize_backward(
    upstream: *const f32,
    x: *const f32,
    n: usize,
    bits: f32,
    exponent: f32,
    dx: *mut f32,
    dbits: *mut f32,
    dexponent: *mut f32,
) -> ScStatus {
    guard(|| {
        let up = Tensor::from_vec(slice(upstream, n, "upstream")?.to_vec());
        let xs = Tensor::from_vec(slice(x, n, "x")?.to_vec());
        let dx = slice_mut(dx, n, "dx")?;
        if dbits.is_null() || dexponent.is_null() {
            return Err(null("dbits/dexponent"));
        }
        let (g, gb, ge) = quantize_backward(&up, &xs, bits, exponent).map_err(|e| invalid(e.to_string()))?;
        dx.copy_from_slice(g.data());
        *dbits = gb;
        *dexponent = ge;
        Ok(())
    })
}

/// Build a freshly initialized CIFAR network with widths scaled by
/// `width_scale`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sc_network_build(width_scale: f64, seed: u64, out: *mut *mut ScNetwork) -> ScStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if !(width_scale.is_finite() && width_scale > 0.0) {
            return Err(invalid("width_scale must be positive"));
        }
        let opts = BuildOptions {
            seed,
            ..BuildOptions::default()
        };
        let net = build_cifar_net(&WidthConfig::default().scaled(width_scale), &opts)?;
        *out = Box::into_raw(Box::new(ScNetwork { net }));
        Ok(())
    })
}

/// Load a checkpoint directory.
///
/// # Safety
/// `dir` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sc_network_load(dir: *const c_char, out: *mut *mut ScNetwork) -> ScStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let net = checkpoint::load(&path_arg(dir, "dir")?)?;
        *out = Box::into_raw(Box::new(ScNetwork { net }));
        Ok(())
    })
}

/// Write a checkpoint directory.
///
/// # Safety
/// `network` must come from this library; `dir` must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn sc_network_save(network: *const ScNetwork, dir: *const c_char) -> ScStatus {
    guard(|| {
        let h = handle(network)?;
        checkpoint::save(&h.net, &path_arg(dir, "dir")?)?;
        Ok(())
    })
}

/// Release a handle; null is ignored.
///
/// # Safety
/// `network` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sc_network_free(network: *mut ScNetwork) {
    if !network.is_null() {
        drop(Box::from_raw(network));
    }
}

/// Input shape `[channels, height, width]` and number of classes.
///
/// # Safety
/// `shape` must point to 3 writable values and `classes` be writable.
#[no_mangle]
pub unsafe extern "C" fn sc_network_shape(network: *const ScNetwork, shape: *mut usize, classes: *mut usize) -> ScStatus {
    guard(|| {
        let h = handle(network)?;
        let shape = slice_mut(shape, 3, "shape")?;
        if classes.is_null() {
            return Err(null("classes"));
        }
        shape.copy_from_slice(&h.net.graph.input_shape);
        *classes = h.net.graph.classes;
        Ok(())
    })
}

/// Evaluation-mode logits of `n` images laid out `[n, c, h, w]`, written
/// as `[n, classes]`.
///
/// # Safety
/// `images` must hold `n*c*h*w` floats and `logits` `n*classes` floats.
#[no_mangle]
pub unsafe extern "C" fn sc_network_forward(
    network: *const ScNetwork,
    images: *const f32,
    n: usize,
    out_logits: *mut f32,
) -> ScStatus {
    guard(|| {
        let h = handle(network)?;
        if n == 0 {
            return Err(invalid("n must be positive"));
        }
        let [c, hh, w] = h.net.graph.input_shape;
        let input = slice(images, n * c * hh * w, "images")?;
        let out = slice_mut(out_logits, n * h.net.graph.classes, "logits")?;
        let t = Tensor::new(vec![n, c, hh, w], input.to_vec()).map_err(|e| invalid(e.to_string()))?;
        out.copy_from_slice(logits(&h.net, &t)?.data());
        Ok(())
    })
}

/// Size report as JSON; release with [`sc_string_free`].
///
/// # Safety
/// `network` must come from this library and `out_json` be writable.
#[no_mangle]
pub unsafe extern "C" fn sc_network_size_report_json(
    network: *const ScNetwork,
    mode: ScSizeMode,
    out_json: *mut *mut c_char,
) -> ScStatus {
    guard(|| {
        let h = handle(network)?;
        let mode = match mode {
            ScSizeMode::Simple => SizeMode::Simple,
            ScSizeMode::Coupled => SizeMode::Coupled,
        };
        let json = serde_json::to_string(&network_size(&h.net, mode)).map_err(|e| Failure::from(Error::from(e)))?;
        put_string(out_json, json)
    })
}

/// Remove zero-bit channels whose zero-input response is below
/// `bias_tol`. The network is left unchanged if its logits on random
/// inputs would move. The prune report is returned as JSON when
/// `out_report_json` is not null.
///
/// # Safety
/// `network` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn sc_network_prune(
    network: *mut ScNetwork,
    bias_tol: f32,
    seed: u64,
    out_report_json: *mut *mut c_char,
) -> ScStatus {
    guard(|| {
        let h = network.as_mut().ok_or_else(|| null("network"))?;
        if !(bias_tol.is_finite() && bias_tol > 0.0) {
            return Err(invalid("bias_tol must be positive"));
        }
        let opts = PruneOptions {
            bias_tol,
            ..PruneOptions::default()
        };
        let mut set = find_removable(&h.net, &opts);
        keep_one_survivor(&h.net, &mut set);
        let report = prune_verified(&mut h.net, &set, SC_PRESERVATION_PROBES, seed, PRESERVATION_TOL)?;
        if !out_report_json.is_null() {
            let json = serde_json::to_string(&report).map_err(|e| Failure::from(Error::from(e)))?;
            put_string(out_report_json, json)?;
        }
        Ok(())
    })
}

/// Release a string returned by this library; null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
