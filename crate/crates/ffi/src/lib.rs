//! C interface. Every function returns an [`ArlStatus`]; on failure the
//! message is kept per thread and read with [`arl_last_error`]. Models are
//! opaque handles released with [`arl_model_free`]. Strings are UTF-8 and
//! NUL-terminated; output buffers follow the usual "pass the capacity, get the
//! required length back" convention.

use arithrl::eval::{evaluate_params, EvalConfig, EvalMode};
use arithrl::model::{generate, load_checkpoint, GenerationConfig, Params};
use arithrl::scratchpad::{render_scratchpad, verify_answer, AdditionProblem, Verdict, Vocabulary};
use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Checkpoint = 5,
    Config = 6,
    BufferTooSmall = 7,
    Internal = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArlVerdict {
    Correct = 0,
    Incorrect = 1,
    Malformed = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArlEvalMode {
    Identical = 0,
    Varying = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ArlEvalResult {
    pub accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_correct: usize,
    pub n_examples: usize,
}

/// Loaded model parameters.
pub struct ArlModel {
    params: Params<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: ArlStatus, msg: impl Into<String>) -> ArlStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn from_error(err: arithrl::Error) -> ArlStatus {
    use arithrl::Error as E;
    let status = match &err {
        E::Io { .. } => ArlStatus::Io,
        E::Checkpoint(_) | E::ConfigMismatch { .. } => ArlStatus::Checkpoint,
        E::Config(_) => ArlStatus::Config,
        E::UnknownChar { .. } | E::TokenOutOfRange { .. } | E::SequenceTooLong { .. } => ArlStatus::InvalidArgument,
        _ => ArlStatus::Internal,
    };
    fail(status, err.to_string())
}

fn guarded(f: impl FnOnce() -> ArlStatus) -> ArlStatus {
    LAST_ERROR.with(|e| e.borrow_mut().clear());
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(ArlStatus::Panic, "panic inside arithrl"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, ArlStatus> {
    if p.is_null() {
        return Err(fail(ArlStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(ArlStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn read_problem(a: *const c_char, b: *const c_char) -> Result<AdditionProblem, ArlStatus> {
    let (a, b) = (read_str(a, "a")?, read_str(b, "b")?);
    AdditionProblem::parse(a, b).ok_or_else(|| fail(ArlStatus::InvalidArgument, format!("{a:?} + {b:?} is not a pair of decimals")))
}

/// Copies `s` plus a NUL into `buf`. `needed` always receives the length
/// including the NUL.
unsafe fn write_str(s: &str, buf: *mut c_char, cap: usize, needed: *mut usize) -> ArlStatus {
    let n = s.len() + 1;
    if !needed.is_null() {
        *needed = n;
    }
    if buf.is_null() || cap < n {
        return fail(ArlStatus::BufferTooSmall, format!("need {n} bytes, have {cap}"));
    }
    std::ptr::copy_nonoverlapping(s.as_ptr(), buf as *mut u8, s.len());
    *buf.add(s.len()) = 0;
    ArlStatus::Ok
}

/// Length of the last error message on this thread, NUL included; 1 when
/// there is none.
#[no_mangle]
pub extern "C" fn arl_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len() + 1)
}

/// Copies the last error message on this thread into `buf`.
///
/// # Safety
/// `buf` must be valid for `cap` bytes; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn arl_last_error(buf: *mut c_char, cap: usize, needed: *mut usize) -> ArlStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    write_str(&msg, buf, cap, needed)
}

/// Renders the full scratchpad document (prompt, body, answer, EOS) for
/// `a + b`.
///
/// # Safety
/// `a` and `b` must be NUL-terminated strings; `buf` valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn arl_render_scratchpad(
    a: *const c_char,
    b: *const c_char,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> ArlStatus {
    guarded(|| match read_problem(a, b) {
        Ok(p) => write_str(&render_scratchpad(&p).full_text, buf, cap, needed),
        Err(s) => s,
    })
}

/// Checks the answer line of a generated completion against `a + b`.
///
/// # Safety
/// All strings must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn arl_verify_answer(
    a: *const c_char,
    b: *const c_char,
    text: *const c_char,
    out: *mut ArlVerdict,
) -> ArlStatus {
    guarded(|| {
        if out.is_null() {
            return fail(ArlStatus::NullPointer, "out is null");
        }
        let p = match read_problem(a, b) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let text = match read_str(text, "text") {
            Ok(t) => t,
            Err(s) => return s,
        };
        *out = match verify_answer(text, &p) {
            Verdict::Correct => ArlVerdict::Correct,
            Verdict::Incorrect => ArlVerdict::Incorrect,
            Verdict::Malformed => ArlVerdict::Malformed,
        };
        ArlStatus::Ok
    })
}

/// Per-token weight of the certainty-weighted KL penalty.
#[no_mangle]
pub extern "C" fn arl_certainty_weight(certainty: f64, beta: f64) -> f64 {
    arithrl::a2c::certainty_weight(certainty, beta)
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable. On success the
/// handle must be released with [`arl_model_free`].
#[no_mangle]
pub unsafe extern "C" fn arl_model_load(path: *const c_char, out: *mut *mut ArlModel) -> ArlStatus {
    guarded(|| {
        if out.is_null() {
            return fail(ArlStatus::NullPointer, "out is null");
        }
        *out = std::ptr::null_mut();
        let path = match read_str(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_checkpoint::<f32>(std::path::Path::new(path), None) {
            Ok((params, _)) => {
                *out = Box::into_raw(Box::new(ArlModel { params }));
                ArlStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Releases a model. Null is accepted.
///
/// # Safety
/// `model` must come from [`arl_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn arl_model_free(model: *mut ArlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of scalar parameters in the model.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn arl_model_num_params(model: *const ArlModel, out: *mut usize) -> ArlStatus {
    if model.is_null() || out.is_null() {
        return fail(ArlStatus::NullPointer, "model or out is null");
    }
    *out = (*model).params.len();
    ArlStatus::Ok
}

/// Greedy completion of the prompt for `a + b`, without the prompt and
/// without the EOS symbol.
///
/// # Safety
/// `model` must be a live handle; strings NUL-terminated; `buf` valid for
/// `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn arl_model_complete(
    model: *const ArlModel,
    a: *const c_char,
    b: *const c_char,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> ArlStatus {
    guarded(|| {
        if model.is_null() {
            return fail(ArlStatus::NullPointer, "model is null");
        }
        let params = &(*model).params;
        let p = match read_problem(a, b) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let vocab = Vocabulary::scratchpad();
        let prompt = match vocab.encode(&p.prompt()) {
            Ok(t) => t,
            Err(e) => return from_error(e),
        };
        let budget = params.config().context_len.saturating_sub(prompt.len());
        let g = match generate(params, &prompt, vocab.eos_id(), &GenerationConfig::greedy(budget)) {
            Ok(g) => g,
            Err(e) => return from_error(e),
        };
        let body: Vec<u32> = g.tokens.into_iter().filter(|&t| t != vocab.eos_id()).collect();
        match vocab.decode(&body) {
            Ok(text) => write_str(&text, buf, cap, needed),
            Err(e) => from_error(e),
        }
    })
}

/// Greedy accuracy on `n` fresh problems with a bootstrap interval.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn arl_model_evaluate(
    model: *const ArlModel,
    mode: ArlEvalMode,
    digits: usize,
    n: usize,
    seed: u64,
    out: *mut ArlEvalResult,
) -> ArlStatus {
    guarded(|| {
        if model.is_null() || out.is_null() {
            return fail(ArlStatus::NullPointer, "model or out is null");
        }
        let cfg = EvalConfig {
            mode: match mode {
                ArlEvalMode::Identical => EvalMode::Identical,
                ArlEvalMode::Varying => EvalMode::Varying,
            },
            digit_length: digits,
            n_examples: n,
            seed,
            ..EvalConfig::default()
        };
        match evaluate_params(&(*model).params, &cfg) {
            Ok(r) => {
                *out = ArlEvalResult {
                    accuracy: r.accuracy,
                    ci_low: r.ci_low,
                    ci_high: r.ci_high,
                    n_correct: r.n_correct,
                    n_examples: r.n_examples,
                };
                ArlStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}
