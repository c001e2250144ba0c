//! C ABI over the associative memories.
//!
//! Every function returns an [`AmStatus`]; on failure a message is kept per
//! thread and can be fetched with [`am_last_error_message`]. Handles are
//! opaque and must be released with their `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use attractor_mem::bench::Checkpoint;
use attractor_mem::energy::ParameterSet;
use attractor_mem::hopfield::{self, HopfieldNet, Rule};
use attractor_mem::patterns::{Domain, PatternBatch};
use attractor_mem::reader::Reader;
use attractor_mem::tape::Precision;
use attractor_mem::util::sub_rng;
use attractor_mem::writer::Writer;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numeric = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AmRule {
    Hebb = 0,
    Storkey = 1,
    Pinv = 2,
}

/// A classical Hopfield network.
pub struct AmHopfield {
    net: HopfieldNet,
}

/// A trained energy model plus the parameters of its latest write.
pub struct AmMemory {
    ck: Checkpoint,
    written: ParameterSet,
    reader: Option<Reader>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = s);
}

struct Failure(AmStatus, String);

impl Failure {
    fn invalid(msg: impl Into<String>) -> Self {
        Failure(AmStatus::InvalidArgument, msg.into())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AmStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            AmStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(AmStatus::NullPointer, format!("`{what}` is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be null or point to `n` readable values.
unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, n))
}

fn numeric(e: impl std::fmt::Display) -> Failure {
    Failure(AmStatus::Numeric, e.to_string())
}

/// Message for the last failure on this thread. The pointer stays valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn am_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Store `n` bipolar patterns of dimension `d` (row-major, ±1) with `rule`.
///
/// # Safety
/// `patterns` must hold `n * d` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn am_hopfield_new(
    rule: AmRule,
    patterns: *const f64,
    n: usize,
    d: usize,
    out: *mut *mut AmHopfield,
) -> AmStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let len = n.checked_mul(d).ok_or_else(|| Failure::invalid("n * d overflows"))?;
        let data = slice(patterns, len, "patterns")?.to_vec();
        let x = PatternBatch::new(Domain::Bipolar, d, data).map_err(|e| Failure::invalid(e.to_string()))?;
        let rule = match rule {
            AmRule::Hebb => Rule::Hebb,
            AmRule::Storkey => Rule::Storkey,
            AmRule::Pinv => Rule::Pinv,
        };
        let net = hopfield::write(rule, &x).map_err(|e| Failure::invalid(e.to_string()))?;
        *out = Box::into_raw(Box::new(AmHopfield { net }));
        Ok(())
    })
}

/// # Safety
/// `h` must be null or come from [`am_hopfield_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn am_hopfield_free(h: *mut AmHopfield) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// # Safety
/// `h` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn am_hopfield_dim(h: *const AmHopfield, out: *mut usize) -> AmStatus {
    guard(|| {
        non_null(h, "h")?;
        non_null(out, "out")?;
        *out = (*h).net.dim();
        Ok(())
    })
}

/// Asynchronous retrieval from a bipolar `query`. `clamp` may be null;
/// otherwise nonzero entries are held fixed. Writes `d` values to `out`.
///
/// # Safety
/// `h` must be live; `query`, `out` and a non-null `clamp` must hold `d` values.
#[no_mangle]
pub unsafe extern "C" fn am_hopfield_read(
    h: *const AmHopfield,
    query: *const f64,
    clamp: *const u8,
    max_sweeps: usize,
    seed: u64,
    out: *mut f64,
) -> AmStatus {
    guard(|| {
        non_null(h, "h")?;
        non_null(out, "out")?;
        let net = &(*h).net;
        let d = net.dim();
        let q = slice(query, d, "query")?;
        let c: Option<Vec<bool>> = if clamp.is_null() {
            None
        } else {
            Some(slice(clamp, d, "clamp")?.iter().map(|&v| v != 0).collect())
        };
        let mut rng = sub_rng(seed, 0, 0);
        let r = hopfield::read(net, q, c.as_deref(), max_sweeps.max(1), &mut rng)
            .map_err(|e| Failure::invalid(e.to_string()))?;
        std::slice::from_raw_parts_mut(out, d).copy_from_slice(&r.state);
        Ok(())
    })
}

/// # Safety
/// `h` must be live; `state` must hold `d` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn am_hopfield_energy(h: *const AmHopfield, state: *const f64, out: *mut f64) -> AmStatus {
    guard(|| {
        non_null(h, "h")?;
        non_null(out, "out")?;
        let net = &(*h).net;
        let s = slice(state, net.dim(), "state")?;
        *out = net.energy(s).map_err(|e| Failure::invalid(e.to_string()))?;
        Ok(())
    })
}

/// Load a trained model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn am_memory_load(path: *const c_char, out: *mut *mut AmMemory) -> AmStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        non_null(path, "path")?;
        let p = CStr::from_ptr(path).to_str().map_err(|_| Failure::invalid("path is not UTF-8"))?;
        let ck = Checkpoint::load(Path::new(p)).map_err(|e| match e {
            attractor_mem::bench::CheckpointError::Io(e) => Failure(AmStatus::Io, e.to_string()),
            e => Failure(AmStatus::Format, e.to_string()),
        })?;
        let written = ck.state.params.clone();
        *out = Box::into_raw(Box::new(AmMemory { ck, written, reader: None }));
        Ok(())
    })
}

/// # Safety
/// `m` must be null or come from [`am_memory_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn am_memory_free(m: *mut AmMemory) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn am_memory_dim(m: *const AmMemory, out: *mut usize) -> AmStatus {
    guard(|| {
        non_null(m, "m")?;
        non_null(out, "out")?;
        *out = (*m).ck.state.arch.dim();
        Ok(())
    })
}

/// Store `n` unit-box patterns (row-major, values in [0, 1]), replacing
/// whatever was stored before.
///
/// # Safety
/// `m` must be live; `patterns` must hold `n * d` values.
#[no_mangle]
pub unsafe extern "C" fn am_memory_write(m: *mut AmMemory, patterns: *const f64, n: usize) -> AmStatus {
    guard(|| {
        non_null(m, "m")?;
        let mem = &mut *m;
        let d = mem.ck.state.arch.dim();
        let len = n.checked_mul(d).ok_or_else(|| Failure::invalid("n * d overflows"))?;
        let x = PatternBatch::new(Domain::UnitBox, d, slice(patterns, len, "patterns")?.to_vec())
            .map_err(|e| Failure::invalid(e.to_string()))?;
        if x.is_empty() {
            return Err(Failure::invalid("no patterns"));
        }
        let s = &mem.ck.state;
        let model = s.model();
        let w = Writer::new(&model, &s.params, n, &s.write).map_err(numeric)?;
        let (theta, _) = w.write(&x, &s.params, &s.write, Precision::F64).map_err(numeric)?;
        mem.written = theta;
        Ok(())
    })
}

/// Retrieve from a unit-box `query` with the learned read schedule. `clamp`
/// may be null; otherwise nonzero entries are held at the query. Writes
/// the final iterate (`d` values) to `out`.
///
/// # Safety
/// `m` must be live; `query`, `out` and a non-null `clamp` must hold `d` values.
#[no_mangle]
pub unsafe extern "C" fn am_memory_read(
    m: *mut AmMemory,
    query: *const f64,
    clamp: *const u8,
    out: *mut f64,
) -> AmStatus {
    guard(|| {
        non_null(m, "m")?;
        non_null(out, "out")?;
        let mem = &mut *m;
        let s = &mem.ck.state;
        let d = s.arch.dim();
        let q = slice(query, d, "query")?;
        let c: Option<Vec<bool>> = if clamp.is_null() {
            None
        } else {
            Some(slice(clamp, d, "clamp")?.iter().map(|&v| v != 0).collect())
        };
        if mem.reader.is_none() {
            let r = Reader::new(&s.model(), &s.params, s.read.steps, true).map_err(numeric)?;
            mem.reader = Some(r);
        }
        let reader = mem.reader.as_ref().expect("just built");
        let mask = c.unwrap_or_else(|| vec![false; d]);
        let r = reader
            .read(q, &mem.written, &s.read, Some(&mask), Precision::F64)
            .map_err(|e| match e {
                attractor_mem::reader::ReadError::NonFinite(_) => numeric(e),
                e => Failure::invalid(e.to_string()),
            })?;
        std::slice::from_raw_parts_mut(out, d).copy_from_slice(r.final_pattern());
        Ok(())
    })
}

/// Energy of `x` under the currently stored parameters.
///
/// # Safety
/// `m` must be live; `x` must hold `d` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn am_memory_energy(m: *const AmMemory, x: *const f64, out: *mut f64) -> AmStatus {
    guard(|| {
        non_null(m, "m")?;
        non_null(out, "out")?;
        let mem = &*m;
        let x = slice(x, mem.ck.state.arch.dim(), "x")?;
        *out = mem.ck.model().energy(x, &mem.written, Precision::F64).map_err(|e| Failure::invalid(e.to_string()))?;
        Ok(())
    })
}
