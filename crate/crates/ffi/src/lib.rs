//! C ABI over `elastic_attention`.
//!
//! Every fallible call returns an [`EaStatus`]; on failure the message is
//! available from [`ea_last_error_message`] on the same thread. Head modes
//! cross the boundary as bytes: [`EA_MODE_FULL`] or [`EA_MODE_SPARSE`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use elastic_attention::attention::{streaming_rho, unified_dispatch, AttnMode, HeadAssignment, SparsityPattern};
use elastic_attention::autograd::DTensor;
use elastic_attention::checkpoint::Checkpoint;
use elastic_attention::eval::{run_sequence, Routing};
use elastic_attention::metrics::compute_msr_hard;
use elastic_attention::{Error, ErrorCategory};

pub const EA_MODE_FULL: u8 = 0;
pub const EA_MODE_SPARSE: u8 = 1;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Config = 3,
    Checkpoint = 4,
    Io = 5,
    Numeric = 6,
    Training = 7,
    Verification = 8,
    Panic = 9,
}

impl From<ErrorCategory> for EaStatus {
    fn from(c: ErrorCategory) -> Self {
        match c {
            ErrorCategory::InvalidInput => EaStatus::InvalidInput,
            ErrorCategory::Config => EaStatus::Config,
            ErrorCategory::Checkpoint => EaStatus::Checkpoint,
            ErrorCategory::Io => EaStatus::Io,
            ErrorCategory::Numeric => EaStatus::Numeric,
            ErrorCategory::Training => EaStatus::Training,
            ErrorCategory::Verification => EaStatus::Verification,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EaPatternKind {
    Full = 0,
    Streaming = 1,
    BlockSparse = 2,
}

/// Sparse pattern parameters; fields unused by `kind` are ignored.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct EaPattern {
    pub kind: EaPatternKind,
    pub sink: usize,
    pub window: usize,
    pub block_size: usize,
    pub mass_threshold: f64,
}

impl EaPattern {
    fn to_pattern(self) -> SparsityPattern {
        match self.kind {
            EaPatternKind::Full => SparsityPattern::Full,
            EaPatternKind::Streaming => SparsityPattern::Streaming {
                sink: self.sink,
                window: self.window,
            },
            EaPatternKind::BlockSparse => SparsityPattern::BlockSparse {
                block_size: self.block_size,
                mass_threshold: self.mass_threshold,
            },
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct EaModelDims {
    pub layers: usize,
    pub heads: usize,
    pub d_head: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub has_router: bool,
}

/// A loaded checkpoint.
pub struct EaModel {
    ckpt: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Fail {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail::Core(Error::InvalidArgument(msg.into()))
}

/// Runs `f`, converting errors and panics into a status and the thread's
/// last error message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EaStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EaStatus::Ok,
        Ok(Err(Fail::Null(name))) => {
            set_error(format!("null pointer: {name}"));
            EaStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            e.category().into()
        }
        Err(_) => {
            set_error("internal panic".into());
            EaStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize, name: &'static str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, name: &'static str) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn model<'a>(m: *const EaModel) -> Result<&'a EaModel, Fail> {
    m.as_ref().ok_or(Fail::Null("model"))
}

fn mode_of(b: u8) -> Result<AttnMode, Fail> {
    match b {
        EA_MODE_FULL => Ok(AttnMode::Full),
        EA_MODE_SPARSE => Ok(AttnMode::Sparse),
        other => Err(invalid(format!("head mode byte must be 0 or 1, got {other}"))),
    }
}

fn mode_byte(m: AttnMode) -> u8 {
    match m {
        AttnMode::Full => EA_MODE_FULL,
        AttnMode::Sparse => EA_MODE_SPARSE,
    }
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn ea_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ea_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint directory (or its manifest). On success `*out` owns a
/// model that must be released with [`ea_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ea_model_load(path: *const c_char, out: *mut *mut EaModel) -> EaStatus {
    guard(|| {
        if path.is_null() {
            return Err(Fail::Null("path"));
        }
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not valid UTF-8"))?;
        let ckpt = Checkpoint::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(EaModel { ckpt }));
        Ok(())
    })
}

/// Releases a model from [`ea_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must come from `ea_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ea_model_free(model: *mut EaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ea_model_dims(model: *const EaModel, out: *mut EaModelDims) -> EaStatus {
    guard(|| {
        let m = self::model(model)?;
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        let c = &m.ckpt.config.model;
        *out = EaModelDims {
            layers: c.layers,
            heads: c.heads,
            d_head: c.d_head,
            vocab: c.vocab,
            seq_len: c.seq_len,
            has_router: m.ckpt.router.is_some(),
        };
        Ok(())
    })
}

fn tokens_of(raw: &[u32]) -> Vec<usize> {
    raw.iter().map(|&t| t as usize).collect()
}

/// Routes one token sequence. Writes `layers * heads` mode bytes, layer-major,
/// into `modes`, which must hold `modes_len` bytes.
///
/// # Safety
/// `tokens` must hold `len` values and `modes` `modes_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ea_model_route(
    model: *const EaModel,
    tokens: *const u32,
    len: usize,
    modes: *mut u8,
    modes_len: usize,
) -> EaStatus {
    guard(|| {
        let m = self::model(model)?;
        let router = m
            .ckpt
            .router
            .as_ref()
            .ok_or_else(|| invalid("checkpoint has no router"))?;
        let tokens = tokens_of(slice(tokens, len, "tokens")?);
        let c = &m.ckpt.config.model;
        if modes_len != c.layers * c.heads {
            return Err(invalid(format!("modes buffer holds {modes_len}, need {}", c.layers * c.heads)));
        }
        let out = slice_mut(modes, modes_len, "modes")?;
        let (_, grid) = run_sequence(&m.ckpt.backbone, &m.ckpt.config, &tokens, &Routing::Router(router))?;
        for (o, &mode) in out.iter_mut().zip(grid.iter().flatten()) {
            *o = mode_byte(mode);
        }
        Ok(())
    })
}

/// Argmax next-token prediction at every position. With `use_router` false
/// every head runs full attention. Writes `len` tokens to `predictions`.
///
/// # Safety
/// `tokens` and `predictions` must each hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn ea_model_predict(
    model: *const EaModel,
    tokens: *const u32,
    len: usize,
    use_router: bool,
    predictions: *mut u32,
) -> EaStatus {
    guard(|| {
        let m = self::model(model)?;
        let tokens = tokens_of(slice(tokens, len, "tokens")?);
        let out = slice_mut(predictions, len, "predictions")?;
        let c = &m.ckpt.config.model;
        let full = vec![vec![AttnMode::Full; c.heads]; c.layers];
        let routing = match (&m.ckpt.router, use_router) {
            (Some(r), true) => Routing::Router(r),
            (None, true) => return Err(invalid("checkpoint has no router")),
            (_, false) => Routing::Fixed(&full),
        };
        let (logits, _) = run_sequence(&m.ckpt.backbone, &m.ckpt.config, &tokens, &routing)?;
        for (i, o) in out.iter_mut().enumerate() {
            let row = logits.row(i);
            let best = (0..row.len())
                .reduce(|b, j| if row[j] > row[b] { j } else { b })
                .unwrap_or(0);
            *o = best as u32;
        }
        Ok(())
    })
}

/// One attention layer with per-head modes. `q`, `k`, `v` and `out` are
/// row-major `len x (heads * d_head)`.
///
/// # Safety
/// Buffers must hold `len * heads * d_head` values; `modes` must hold `heads` bytes.
#[no_mangle]
pub unsafe extern "C" fn ea_hybrid_attention(
    q: *const f64,
    k: *const f64,
    v: *const f64,
    len: usize,
    heads: usize,
    d_head: usize,
    modes: *const u8,
    pattern: *const EaPattern,
    out: *mut f64,
) -> EaStatus {
    guard(|| {
        let n = len * heads * d_head;
        let tensor = |p, name| -> Result<DTensor, Fail> {
            Ok(DTensor::new(vec![len, heads * d_head], slice(p, n, name)?.to_vec())?)
        };
        let (q, k, v) = (tensor(q, "q")?, tensor(k, "k")?, tensor(v, "v")?);
        let modes = slice(modes, heads, "modes")?
            .iter()
            .map(|&b| mode_of(b))
            .collect::<Result<Vec<_>, _>>()?;
        let pattern = pattern.as_ref().ok_or(Fail::Null("pattern"))?.to_pattern();
        pattern.validate()?;
        let dst = slice_mut(out, n, "out")?;
        let (o, _) = unified_dispatch(&q, &k, &v, heads, &modes, &pattern)?;
        dst.copy_from_slice(o.data());
        Ok(())
    })
}

/// Fraction of heads in sparse mode over a `layers x heads` mode grid.
///
/// # Safety
/// `modes` must hold `layers * heads` bytes and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn ea_msr(modes: *const u8, layers: usize, heads: usize, out: *mut f64) -> EaStatus {
    guard(|| {
        let bytes = slice(modes, layers * heads, "modes")?;
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        let assignments = bytes
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                Ok(HeadAssignment {
                    layer: i / heads.max(1),
                    head: i % heads.max(1),
                    mode: mode_of(b)?,
                })
            })
            .collect::<Result<Vec<_>, Fail>>()?;
        *out = compute_msr_hard(&assignments, layers, heads)?;
        Ok(())
    })
}

/// Mean fraction of causal keys a streaming pattern drops at length `len`.
#[no_mangle]
pub extern "C" fn ea_streaming_rho(len: usize, sink: usize, window: usize) -> f64 {
    streaming_rho(len, sink, window)
}
