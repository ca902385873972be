//! C ABI over the `miat` toolkit.
//!
//! Every function returns a [`MiatStatus`]; on failure the message is
//! available from [`miat_last_error`] on the same thread. Objects are opaque
//! handles owned by the caller and released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use libc::{c_char, size_t};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use miat::autodiff::Graph;
use miat::fusion::{box_loss, BBox};
use miat::harness::checkpoint::Checkpoint;
use miat::ltmi::{count_parameters, LayerKind, LtmiStack};
use miat::metrics::ranking_metrics;
use miat::optim::{schedule_lr, ScheduleConfig};
use miat::params::ParamStore;
use miat::tensor::Tensor;
use miat::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MiatStatus {
    Ok = 0,
    Usage = 1,
    Data = 2,
    Numeric = 3,
    NullPointer = 4,
    Panic = 5,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MiatLayerKind {
    Ltmi = 0,
    Naive = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MiatRankingMetrics {
    pub has_gold: bool,
    pub rank: u64,
    pub mrr: f64,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub has_ndcg: bool,
    pub ndcg: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MiatBoxLoss {
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
}

/// A stack of LTMI layers with its parameters.
pub struct MiatLtmi {
    store: ParamStore,
    stack: LtmiStack,
}

/// A training checkpoint held in memory.
pub struct MiatCheckpoint {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MiatStatus {
    match e.exit_code() {
        1 => MiatStatus::Usage,
        3 => MiatStatus::Numeric,
        _ => MiatStatus::Data,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> MiatStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MiatStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            MiatStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            MiatStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &'static str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail::Null(what))
    } else {
        Ok(())
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    non_null(p, "path")?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Lib(Error::Usage("path is not valid UTF-8".into())))?;
    Ok(PathBuf::from(s))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn miat_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Parameter count of `layers` stacked layers over `u` utilities of width `d`.
///
/// # Safety
/// `out` must point to writable memory for one `u64`.
#[no_mangle]
pub unsafe extern "C" fn miat_param_count(
    kind: MiatLayerKind,
    u: size_t,
    d: size_t,
    layers: size_t,
    out: *mut u64,
) -> MiatStatus {
    guard(|| {
        non_null(out, "out")?;
        if u == 0 || d == 0 || layers == 0 {
            return Err(Error::Usage("u, d and layers must be positive".into()).into());
        }
        let k = match kind {
            MiatLayerKind::Ltmi => LayerKind::Ltmi,
            MiatLayerKind::Naive => LayerKind::Naive,
        };
        *out = count_parameters(k, u, d, layers) as u64;
        Ok(())
    })
}

/// Learning rate at a fractional `epoch` of the warmup-then-halving schedule.
///
/// # Safety
/// `out` must point to writable memory for one `double`.
#[no_mangle]
pub unsafe extern "C" fn miat_schedule_lr(
    start: f64,
    end: f64,
    warmup_epochs: f64,
    period: f64,
    epoch: f64,
    out: *mut f64,
) -> MiatStatus {
    guard(|| {
        non_null(out, "out")?;
        let cfg = ScheduleConfig {
            start,
            end,
            warmup_epochs,
            period,
        };
        cfg.validate()?;
        *out = schedule_lr(&cfg, epoch);
        Ok(())
    })
}

/// Ranking metrics of `n` scores. `gold < 0` means no gold index;
/// `relevance` may be null, otherwise it holds `n` values.
///
/// # Safety
/// `scores` (and `relevance` when non-null) must point to `n` doubles and
/// `out` to a writable [`MiatRankingMetrics`].
#[no_mangle]
pub unsafe extern "C" fn miat_ranking_metrics(
    scores: *const f64,
    n: size_t,
    gold: i64,
    relevance: *const f64,
    out: *mut MiatRankingMetrics,
) -> MiatStatus {
    guard(|| {
        non_null(scores, "scores")?;
        non_null(out, "out")?;
        let s = std::slice::from_raw_parts(scores, n);
        let rel = (!relevance.is_null()).then(|| std::slice::from_raw_parts(relevance, n));
        let gold = usize::try_from(gold).ok();
        let m = ranking_metrics(s, gold, rel)?;
        let mut r = MiatRankingMetrics::default();
        if let Some(g) = m.gold {
            r.has_gold = true;
            r.rank = g.rank as u64;
            r.mrr = g.mrr;
            r.r_at_1 = g.r_at_1;
            r.r_at_5 = g.r_at_5;
            r.r_at_10 = g.r_at_10;
        }
        if let Some(v) = m.ndcg {
            r.has_ndcg = true;
            r.ndcg = v;
        }
        *out = r;
        Ok(())
    })
}

/// Box loss between a target and a predicted box, each `x1, y1, x2, y2`.
///
/// # Safety
/// `target` and `pred` must each point to four doubles and `out` to a
/// writable [`MiatBoxLoss`].
#[no_mangle]
pub unsafe extern "C" fn miat_box_loss(
    target: *const f64,
    pred: *const f64,
    out: *mut MiatBoxLoss,
) -> MiatStatus {
    guard(|| {
        non_null(target, "target")?;
        non_null(pred, "pred")?;
        non_null(out, "out")?;
        let t = std::slice::from_raw_parts(target, 4);
        let p = std::slice::from_raw_parts(pred, 4);
        let l = box_loss(
            &BBox::new(t[0], t[1], t[2], t[3])?,
            &BBox::new(p[0], p[1], p[2], p[3])?,
        )?;
        *out = MiatBoxLoss {
            l1: l.l1,
            giou: l.giou,
            total: l.total,
        };
        Ok(())
    })
}

/// Creates `layers` LTMI layers over `utilities` inputs of width `d`,
/// initialised from `seed`.
///
/// # Safety
/// `out` must point to writable memory for one handle pointer.
#[no_mangle]
pub unsafe extern "C" fn miat_ltmi_new(
    utilities: size_t,
    d: size_t,
    heads: size_t,
    layers: size_t,
    seed: u64,
    out: *mut *mut MiatLtmi,
) -> MiatStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        if utilities == 0 || d == 0 || heads == 0 || layers == 0 {
            return Err(
                Error::Usage("utilities, d, heads and layers must be positive".into()).into(),
            );
        }
        let names: Vec<String> = (0..utilities).map(|u| format!("u{u}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack = LtmiStack::new(&mut store, "ltmi", &refs, layers, d, heads, &mut rng)?;
        *out = Box::into_raw(Box::new(MiatLtmi { store, stack }));
        Ok(())
    })
}

/// Number of trainable values held by the handle.
///
/// # Safety
/// `h` must come from [`miat_ltmi_new`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn miat_ltmi_param_count(h: *const MiatLtmi, out: *mut u64) -> MiatStatus {
    guard(|| {
        non_null(h, "handle")?;
        non_null(out, "out")?;
        *out = (*h).store.count() as u64;
        Ok(())
    })
}

/// Inference pass. Utility `u` has `rows[u]` row-major rows of width `d` at
/// `inputs[u]`; its updated features are written to `outputs[u]` with the
/// same shape.
///
/// # Safety
/// `inputs`, `rows` and `outputs` must hold one entry per utility, each
/// buffer sized `rows[u] * d` doubles.
#[no_mangle]
pub unsafe extern "C" fn miat_ltmi_forward(
    h: *const MiatLtmi,
    inputs: *const *const f64,
    rows: *const size_t,
    outputs: *const *mut f64,
) -> MiatStatus {
    guard(|| {
        non_null(h, "handle")?;
        non_null(inputs, "inputs")?;
        non_null(rows, "rows")?;
        non_null(outputs, "outputs")?;
        let h = &*h;
        let u = h.stack.names.len();
        let d = h.stack.d;
        let ins = std::slice::from_raw_parts(inputs, u);
        let rows = std::slice::from_raw_parts(rows, u);
        let outs = std::slice::from_raw_parts(outputs, u);
        let mut g = Graph::new();
        let mut feats = Vec::with_capacity(u);
        for (&p, &r) in ins.iter().zip(rows) {
            non_null(p, "input buffer")?;
            let data = std::slice::from_raw_parts(p, r * d).to_vec();
            feats.push(g.constant(Tensor::new(&[r, d], data)?)?);
        }
        let ys = h.stack.forward(&mut g, &h.store, &feats, None)?;
        for ((&o, y), &r) in outs.iter().zip(ys).zip(rows) {
            non_null(o, "output buffer")?;
            std::slice::from_raw_parts_mut(o, r * d).copy_from_slice(g.value(y).data());
        }
        Ok(())
    })
}

/// # Safety
/// `h` must come from [`miat_ltmi_new`] and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn miat_ltmi_free(h: *mut MiatLtmi) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Reads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn miat_checkpoint_load(
    path: *const c_char,
    out: *mut *mut MiatCheckpoint,
) -> MiatStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let p = path_arg(path)?;
        let inner = Checkpoint::load(&p)?;
        *out = Box::into_raw(Box::new(MiatCheckpoint { inner }));
        Ok(())
    })
}

/// Writes the checkpoint back out; the bytes equal those it was read from.
///
/// # Safety
/// `h` must come from [`miat_checkpoint_load`]; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn miat_checkpoint_save(
    h: *const MiatCheckpoint,
    path: *const c_char,
) -> MiatStatus {
    guard(|| {
        non_null(h, "handle")?;
        let p = path_arg(path)?;
        (*h).inner.save(&p)?;
        Ok(())
    })
}

/// Completed epochs recorded in the checkpoint.
///
/// # Safety
/// `h` must come from [`miat_checkpoint_load`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn miat_checkpoint_epoch(
    h: *const MiatCheckpoint,
    out: *mut u32,
) -> MiatStatus {
    guard(|| {
        non_null(h, "handle")?;
        non_null(out, "out")?;
        *out = (*h).inner.epoch;
        Ok(())
    })
}

/// Number of named parameter tensors in the checkpoint.
///
/// # Safety
/// `h` must come from [`miat_checkpoint_load`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn miat_checkpoint_tensor_count(
    h: *const MiatCheckpoint,
    out: *mut size_t,
) -> MiatStatus {
    guard(|| {
        non_null(h, "handle")?;
        non_null(out, "out")?;
        *out = (*h).inner.params.len();
        Ok(())
    })
}

/// # Safety
/// `h` must come from [`miat_checkpoint_load`] and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn miat_checkpoint_free(h: *mut MiatCheckpoint) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}
