//! C ABI over the svla pipeline.
//!
//! Models are opaque heap handles created by `svla_model_create` or
//! `svla_model_load_checkpoint` and released with `svla_model_free`. Every
//! fallible call returns an [`SvlaStatus`]; on failure the message is kept
//! per thread and read with `svla_last_error_message`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use svla::config::RunConfig;
use svla::decoder::{coupler_token_count, DecoderMode};
use svla::efficiency::transformer_flops;
use svla::model::Model;
use svla::scene::generate_episode;
use svla::train::load_checkpoint;
use svla::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SvlaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Shape = 4,
    Format = 5,
    Io = 6,
    BufferTooSmall = 7,
    InvalidInput = 8,
    NonFinite = 9,
    Panic = 10,
}

/// Opaque model handle.
pub struct SvlaModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: SvlaStatus, msg: impl Into<String>) -> SvlaStatus {
    set_error(msg.into());
    status
}

fn status_of(e: &Error) -> SvlaStatus {
    match e {
        Error::Shape(_) => SvlaStatus::Shape,
        Error::Config(_) => SvlaStatus::Config,
        Error::Input(_) => SvlaStatus::InvalidInput,
        Error::Format(_) => SvlaStatus::Format,
        Error::Io { .. } => SvlaStatus::Io,
        Error::NonFinite { .. } => SvlaStatus::NonFinite,
    }
}

fn guard(f: impl FnOnce() -> Result<(), SvlaStatus>) -> SvlaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SvlaStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(SvlaStatus::Panic, "internal panic"),
    }
}

fn lib<T>(r: svla::Result<T>) -> Result<T, SvlaStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, SvlaStatus> {
    if p.is_null() {
        return Err(fail(SvlaStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SvlaStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn model_ref<'a>(m: *const SvlaModel) -> Result<&'a SvlaModel, SvlaStatus> {
    m.as_ref()
        .ok_or_else(|| fail(SvlaStatus::NullPointer, "model handle is null"))
}

fn out_ptr<T>(p: *mut T, what: &str) -> Result<(), SvlaStatus> {
    if p.is_null() {
        return Err(fail(SvlaStatus::NullPointer, format!("{what} is null")));
    }
    Ok(())
}

/// Builds a freshly initialised model from flat config text; null text
/// means all defaults. On success `*out` owns a new handle.
///
/// # Safety
/// `config_text` is null or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn svla_model_create(config_text: *const c_char, out: *mut *mut SvlaModel) -> SvlaStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let cfg = if config_text.is_null() {
            RunConfig::default()
        } else {
            lib(RunConfig::parse(text(config_text, "config_text")?))?
        };
        let model = lib(Model::new(&cfg))?;
        *out = Box::into_raw(Box::new(SvlaModel { model }));
        Ok(())
    })
}

/// Loads a checkpoint written by the trainer.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn svla_model_load_checkpoint(path: *const c_char, out: *mut *mut SvlaModel) -> SvlaStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let p = text(path, "path")?;
        let model = lib(load_checkpoint(Path::new(p)))?;
        *out = Box::into_raw(Box::new(SvlaModel { model }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn svla_model_free(model: *mut SvlaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Rows and columns of one predicted chunk (`K` and `7·arms`).
///
/// # Safety
/// `model` is a live handle; `rows` and `cols` are writable.
#[no_mangle]
pub unsafe extern "C" fn svla_model_chunk_shape(
    model: *const SvlaModel,
    rows: *mut usize,
    cols: *mut usize,
) -> SvlaStatus {
    guard(|| {
        let m = model_ref(model)?;
        out_ptr(rows, "rows")?;
        out_ptr(cols, "cols")?;
        *rows = m.model.cfg.chunk_len;
        *cols = svla::scene::ACTION_DIM * m.model.cfg.arms;
        Ok(())
    })
}

/// Visual tokens reaching the decoder and the decoder sequence length.
///
/// # Safety
/// `model` is a live handle; both outputs are writable.
#[no_mangle]
pub unsafe extern "C" fn svla_model_token_budget(
    model: *const SvlaModel,
    visual_tokens: *mut usize,
    sequence_len: *mut usize,
) -> SvlaStatus {
    guard(|| {
        let m = model_ref(model)?;
        out_ptr(visual_tokens, "visual_tokens")?;
        out_ptr(sequence_len, "sequence_len")?;
        *visual_tokens = m.model.budget.visual_out;
        *sequence_len = m.model.budget.sequence_len;
        Ok(())
    })
}

/// Generates the episode for `seed` and writes the predicted chunk
/// row-major into `buf`. `*written` receives the element count, also when
/// the buffer is too small.
///
/// # Safety
/// `model` is a live handle; `buf` holds `len` doubles; `written` is writable.
#[no_mangle]
pub unsafe extern "C" fn svla_model_predict_episode(
    model: *const SvlaModel,
    seed: u64,
    buf: *mut f64,
    len: usize,
    written: *mut usize,
) -> SvlaStatus {
    guard(|| {
        let m = model_ref(model)?;
        out_ptr(written, "written")?;
        let ep = lib(generate_episode(seed, &m.model.cfg.scene()))?;
        let pred = lib(m.model.predict(&ep))?;
        let data = pred.chunk.data();
        *written = data.len();
        if len < data.len() {
            return Err(fail(
                SvlaStatus::BufferTooSmall,
                format!("buffer holds {len} values, chunk needs {}", data.len()),
            ));
        }
        out_ptr(buf, "buf")?;
        std::slice::from_raw_parts_mut(buf, data.len()).copy_from_slice(data);
        Ok(())
    })
}

/// Forward FLOPs of `layers` transformer layers at sequence length `s`,
/// width `d` and MLP ratio `r`, counting two FLOPs per multiply-add.
#[no_mangle]
pub extern "C" fn svla_transformer_flops(s: u64, d: u64, layers: u64, r: u64) -> u64 {
    transformer_flops(s, d, layers, r)
}

/// Action placeholder count for `mode` 0 coupled, 1 lite, 2 conventional.
///
/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn svla_coupler_token_count(
    mode: u32,
    chunk_len: usize,
    arms: usize,
    out: *mut usize,
) -> SvlaStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let mode = match mode {
            0 => DecoderMode::Coupled,
            1 => DecoderMode::Lite,
            2 => DecoderMode::Conventional,
            m => return Err(fail(SvlaStatus::InvalidInput, format!("unknown decoder mode {m}"))),
        };
        *out = coupler_token_count(chunk_len, arms, mode);
        Ok(())
    })
}

/// Message of the last failure on this thread, or null. The caller owns
/// the string and releases it with `svla_string_free`.
#[no_mangle]
pub extern "C" fn svla_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| {
        e.borrow()
            .as_ref()
            .map_or(std::ptr::null_mut(), |c| c.clone().into_raw())
    })
}

/// # Safety
/// `s` is null or came from `svla_last_error_message`.
#[no_mangle]
pub unsafe extern "C" fn svla_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
