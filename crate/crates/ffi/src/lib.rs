//! C ABI over `seqdiff`: load a checkpoint, generate with MBR selection, score text.
//!
//! Every fallible call returns an [`SdStatus`]; on failure a message for the calling thread is
//! available from [`sd_last_error`]. Handles are opaque and must be released with their `free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use seqdiff::decoding::{generate_candidates, mbr_select, SampleConfig};
use seqdiff::denoiser::ModelParams;
use seqdiff::metrics::{bleu, rouge_l, tokens};
use seqdiff::schedule::NoiseSchedule;
use seqdiff::tokenizer::Vocab;
use seqdiff::training::Checkpoint;
use seqdiff::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Checkpoint = 4,
    Vocab = 5,
    Config = 6,
    Data = 7,
    Numeric = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

impl From<&Error> for SdStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => SdStatus::Config,
            Error::NonFinite { .. } => SdStatus::Numeric,
            Error::Checkpoint(_) => SdStatus::Checkpoint,
            Error::Vocab(_) => SdStatus::Vocab,
            Error::Data(_) | Error::Json(_) => SdStatus::Data,
            Error::Io { .. } => SdStatus::Io,
        }
    }
}

/// A loaded model: parameters, noise schedule and vocab.
pub struct SdModel {
    params: ModelParams,
    schedule: NoiseSchedule,
    vocab: Vocab,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: SdStatus, msg: impl Into<String>) -> SdStatus {
    set_error(msg.into());
    status
}

fn fail_with(e: Error) -> SdStatus {
    let status = SdStatus::from(&e);
    fail(status, e.to_string())
}

/// Runs `f`, turning a panic into [`SdStatus::Panic`].
fn guard(f: impl FnOnce() -> SdStatus) -> SdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(SdStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, SdStatus> {
    if p.is_null() {
        return Err(fail(SdStatus::NullPointer, format!("`{name}` is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SdStatus::InvalidUtf8, format!("`{name}` is not valid UTF-8")))
}

/// Message describing the last failure on this thread, or NULL if none. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn sd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads a checkpoint. If `vocab_path` is non-NULL that vocab is used and checked against the
/// checkpoint; otherwise the vocab embedded in the checkpoint is used.
///
/// # Safety
/// `ckpt_path` and `vocab_path` (when non-NULL) must be NUL-terminated strings; `out` must be a
/// valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn sd_model_load(
    ckpt_path: *const c_char,
    vocab_path: *const c_char,
    out: *mut *mut SdModel,
) -> SdStatus {
    guard(|| {
        if out.is_null() {
            return fail(SdStatus::NullPointer, "`out` is NULL");
        }
        *out = ptr::null_mut();
        let path = match str_arg(ckpt_path, "ckpt_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let ckpt = match Checkpoint::load(Path::new(path)) {
            Ok(c) => c,
            Err(e) => return fail_with(e),
        };
        let vocab = if vocab_path.is_null() {
            ckpt.vocab()
        } else {
            let vp = match str_arg(vocab_path, "vocab_path") {
                Ok(p) => p,
                Err(s) => return s,
            };
            std::fs::read_to_string(vp)
                .map_err(|e| Error::io(vp, e))
                .and_then(|t| Vocab::from_text(&t))
                .and_then(|v| ckpt.verify_vocab(&v).map(|_| v))
        };
        let vocab = match vocab {
            Ok(v) => v,
            Err(e) => return fail_with(e),
        };
        let schedule = match ckpt.meta.schedule.build() {
            Ok(s) => s,
            Err(e) => return fail_with(e),
        };
        *out = Box::into_raw(Box::new(SdModel {
            params: ckpt.params,
            schedule,
            vocab,
        }));
        SdStatus::Ok
    })
}

/// Releases a handle from [`sd_model_load`]. NULL is ignored.
///
/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sd_model_free(model: *mut SdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of diffusion steps the model was trained with (0 for NULL).
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sd_model_diffusion_steps(model: *const SdModel) -> u32 {
    model.as_ref().map_or(0, |m| m.schedule.steps() as u32)
}

/// Vocab size of the model (0 for NULL).
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sd_model_vocab_size(model: *const SdModel) -> u32 {
    model.as_ref().map_or(0, |m| m.vocab.len() as u32)
}

/// Generates `candidates` outputs for `src` and writes the MBR choice into `out_buf` as a
/// NUL-terminated string. `steps` = 0 uses the trained step count. `out_len` (optional)
/// receives the byte length without the NUL; when the buffer is too small it still receives
/// the required length and [`SdStatus::BufferTooSmall`] is returned.
///
/// # Safety
/// `model` must be a live handle, `src` a NUL-terminated string, and `out_buf` writable for
/// `buf_len` bytes (it may be NULL when `buf_len` is 0).
#[no_mangle]
pub unsafe extern "C" fn sd_model_generate(
    model: *const SdModel,
    src: *const c_char,
    steps: u32,
    candidates: u32,
    clamp: bool,
    seed: u64,
    out_buf: *mut c_char,
    buf_len: usize,
    out_len: *mut usize,
) -> SdStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(SdStatus::NullPointer, "`model` is NULL");
        };
        let src = match str_arg(src, "src") {
            Ok(s) => s,
            Err(s) => return s,
        };
        let cfg = SampleConfig {
            steps: if steps == 0 { m.schedule.steps() } else { steps as usize },
            clamp,
            candidates: candidates as usize,
            seed,
        };
        let ids = vec![m.vocab.encode(src)];
        let cands = match generate_candidates(&m.params, &m.schedule, &ids, &cfg) {
            Ok(mut c) => c.remove(0),
            Err(e) => return fail_with(e),
        };
        let choice = match mbr_select(&cands) {
            Ok((i, _)) => i,
            Err(e) => return fail_with(e),
        };
        let text = m.vocab.decode(&cands[choice]);
        if !out_len.is_null() {
            *out_len = text.len();
        }
        if out_buf.is_null() || buf_len < text.len() + 1 {
            return fail(
                SdStatus::BufferTooSmall,
                format!("output needs {} bytes including NUL", text.len() + 1),
            );
        }
        ptr::copy_nonoverlapping(text.as_ptr(), out_buf as *mut u8, text.len());
        *out_buf.add(text.len()) = 0;
        SdStatus::Ok
    })
}

unsafe fn score(
    hyp: *const c_char,
    reference: *const c_char,
    out: *mut f64,
    f: impl FnOnce(&[&str], &[&str]) -> f64,
) -> SdStatus {
    guard(|| {
        if out.is_null() {
            return fail(SdStatus::NullPointer, "`out` is NULL");
        }
        let (h, r) = match (str_arg(hyp, "hyp"), str_arg(reference, "reference")) {
            (Ok(h), Ok(r)) => (h, r),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        *out = f(&tokens(h), &tokens(r));
        SdStatus::Ok
    })
}

/// Smoothed sentence BLEU of whitespace-tokenized `hyp` against one reference.
///
/// # Safety
/// `hyp` and `reference` must be NUL-terminated strings and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sd_bleu(hyp: *const c_char, reference: *const c_char, out: *mut f64) -> SdStatus {
    score(hyp, reference, out, |h, r| bleu(h, &[r]))
}

/// LCS-based ROUGE-L F1 of whitespace-tokenized `hyp` against `reference`.
///
/// # Safety
/// `hyp` and `reference` must be NUL-terminated strings and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sd_rouge_l(hyp: *const c_char, reference: *const c_char, out: *mut f64) -> SdStatus {
    score(hyp, reference, out, |h, r| rouge_l(h, r))
}
