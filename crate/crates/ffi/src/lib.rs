//! C ABI over the router: a hashed-feature embedder, a trained checkpoint and
//! an embedded catalog behind opaque handles.
//!
//! Every entry point returns an [`NcceStatus`]; on failure the message is
//! kept per thread and read back with [`ncce_last_error_message`]. Strings
//! are copied into caller buffers with a trailing NUL, and the required size
//! is always reported so callers can retry with a larger buffer.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ncce::catalog::{load_catalog, serialize_strategy, ContextStrategy};
use ncce::embedding::{embed_strategy, EmbeddingProvider, EmbeddingVector, HashFeatures};
use ncce::model::{Checkpoint, PreferenceModel};
use ncce::routing::route_index;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NcceStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    DimensionMismatch = 5,
    BufferTooSmall = 6,
    Panic = 7,
    Error = 8,
}

/// Hashed-feature text embedder.
pub struct NcceEmbedder {
    inner: HashFeatures,
}

/// Trained preference model.
pub struct NcceModel {
    model: PreferenceModel,
    temperature: f64,
}

/// Strategies with their embeddings and canonical texts.
pub struct NcceCatalog {
    strategies: Vec<ContextStrategy>,
    texts: Vec<Vec<u8>>,
    embeddings: Vec<EmbeddingVector>,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

struct Fail {
    status: NcceStatus,
    message: String,
}

impl Fail {
    fn new(status: NcceStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<ncce::Error> for Fail {
    fn from(e: ncce::Error) -> Self {
        let status = match e.root() {
            ncce::Error::Io { .. } => NcceStatus::Io,
            ncce::Error::DimensionMismatch { .. } => NcceStatus::DimensionMismatch,
            ncce::Error::EmptyText | ncce::Error::Empty(_) | ncce::Error::InvalidConfig(_) => {
                NcceStatus::InvalidArgument
            }
            _ => NcceStatus::Error,
        };
        Fail::new(status, e.to_string())
    }
}

fn set_last_error(message: &str) {
    LAST_ERROR.with(|m| {
        let mut m = m.borrow_mut();
        m.clear();
        m.extend(message.bytes().filter(|&b| b != 0));
    });
}

/// Runs `f`, converting errors and panics into a status plus a stored message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> NcceStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            NcceStatus::Ok
        }
        Ok(Err(fail)) => {
            set_last_error(&fail.message);
            fail.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            NcceStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref()
        .ok_or_else(|| Fail::new(NcceStatus::NullPointer, format!("{what} is null")))
}

unsafe fn as_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::new(
            NcceStatus::NullPointer,
            format!("{what} is null"),
        ));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Fail::new(NcceStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(Fail::new(
            NcceStatus::NullPointer,
            format!("{what} is null"),
        ));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::new(
            NcceStatus::NullPointer,
            format!("{what} is null"),
        ));
    }
    out.write(value);
    Ok(())
}

/// Copies `bytes` plus a NUL into `buf`. `needed` receives the full size.
unsafe fn write_bytes(
    bytes: &[u8],
    buf: *mut c_char,
    buf_len: usize,
    needed: *mut usize,
) -> Result<(), Fail> {
    let size = bytes.len() + 1;
    if !needed.is_null() {
        needed.write(size);
    }
    if buf.is_null() || buf_len < size {
        return Err(Fail::new(
            NcceStatus::BufferTooSmall,
            format!("buffer holds {buf_len} bytes, {size} needed"),
        ));
    }
    std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), bytes.len());
    buf.add(bytes.len()).write(0);
    Ok(())
}

fn check_dim(what: &str, expected: usize, actual: usize) -> Result<(), Fail> {
    if expected != actual {
        return Err(Fail::new(
            NcceStatus::DimensionMismatch,
            format!("{what}: expected {expected} values, got {actual}"),
        ));
    }
    Ok(())
}

/// Copies the calling thread's last error message into `buf` and returns
/// its size including the NUL (1 when there is no error). Truncates to fit.
///
/// # Safety
/// `buf` must be null or valid for `buf_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ncce_last_error_message(buf: *mut c_char, buf_len: usize) -> usize {
    LAST_ERROR.with(|m| {
        let m = m.borrow();
        if !buf.is_null() && buf_len > 0 {
            let n = m.len().min(buf_len - 1);
            std::ptr::copy_nonoverlapping(m.as_ptr(), buf.cast::<u8>(), n);
            buf.add(n).write(0);
        }
        m.len() + 1
    })
}

/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ncce_embedder_new(
    dimension: usize,
    seed: u64,
    out: *mut *mut NcceEmbedder,
) -> NcceStatus {
    guard(|| {
        if dimension == 0 {
            return Err(Fail::new(
                NcceStatus::InvalidArgument,
                "dimension must be positive",
            ));
        }
        let handle = Box::new(NcceEmbedder {
            inner: HashFeatures::new(dimension, seed),
        });
        write_out(out, Box::into_raw(handle), "out")
    })
}

/// # Safety
/// `embedder` must come from [`ncce_embedder_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ncce_embedder_free(embedder: *mut NcceEmbedder) {
    if !embedder.is_null() {
        drop(Box::from_raw(embedder));
    }
}

/// 0 for a null handle.
///
/// # Safety
/// `embedder` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ncce_embedder_dimension(embedder: *const NcceEmbedder) -> usize {
    embedder.as_ref().map_or(0, |e| e.inner.dimension())
}

/// Unit-norm embedding of `text` into `out`, which must hold exactly the
/// embedder's dimension.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` valid for `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ncce_embed_text(
    embedder: *const NcceEmbedder,
    text: *const c_char,
    out: *mut f64,
    out_len: usize,
) -> NcceStatus {
    guard(|| {
        let e = as_ref(embedder, "embedder")?;
        let text = as_str(text, "text")?;
        check_dim("output buffer", e.inner.dimension(), out_len)?;
        if out.is_null() {
            return Err(Fail::new(NcceStatus::NullPointer, "out is null"));
        }
        let v = e.inner.embed_text(text)?;
        std::ptr::copy_nonoverlapping(v.as_slice().as_ptr(), out, out_len);
        Ok(())
    })
}

/// Loads a checkpoint written by `ncce train` or `ncce evolve`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ncce_model_load(
    path: *const c_char,
    out: *mut *mut NcceModel,
) -> NcceStatus {
    guard(|| {
        let path = as_str(path, "path")?;
        let ck = Checkpoint::load(Path::new(path))?;
        let handle = Box::new(NcceModel {
            model: ck.model,
            temperature: ck.temperature,
        });
        write_out(out, Box::into_raw(handle), "out")
    })
}

/// # Safety
/// `model` must come from [`ncce_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ncce_model_free(model: *mut NcceModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ncce_model_embedding_dim(model: *const NcceModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.embedding_dim())
}

/// Logit and preference score `σ(logit/τ)` for an instance embedding `e` and
/// a strategy embedding `h`. Either output may be null.
///
/// # Safety
/// `e` and `h` must be valid for `e_len` and `h_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ncce_model_score(
    model: *const NcceModel,
    e: *const f64,
    e_len: usize,
    h: *const f64,
    h_len: usize,
    out_logit: *mut f64,
    out_score: *mut f64,
) -> NcceStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        let dim = m.model.embedding_dim();
        check_dim("instance embedding", dim, e_len)?;
        check_dim("strategy embedding", dim, h_len)?;
        let out = m.model.forward(
            slice(e, e_len, "e")?,
            slice(h, h_len, "h")?,
            None,
            m.temperature,
        )?;
        if !out_logit.is_null() {
            out_logit.write(out.logit);
        }
        if !out_score.is_null() {
            out_score.write(out.score);
        }
        Ok(())
    })
}

/// Loads a catalog (JSONL) and embeds every strategy's canonical text.
///
/// # Safety
/// `path` must be a NUL-terminated string, `embedder` a live handle and
/// `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ncce_catalog_load(
    path: *const c_char,
    embedder: *const NcceEmbedder,
    out: *mut *mut NcceCatalog,
) -> NcceStatus {
    guard(|| {
        let path = as_str(path, "path")?;
        let e = as_ref(embedder, "embedder")?;
        let strategies = load_catalog(Path::new(path))?;
        if strategies.is_empty() {
            return Err(Fail::new(
                NcceStatus::InvalidArgument,
                format!("{path} holds no strategies"),
            ));
        }
        let embeddings = strategies
            .iter()
            .map(|p| embed_strategy(&e.inner, p))
            .collect::<ncce::Result<Vec<_>>>()?;
        let texts = strategies
            .iter()
            .map(|p| serialize_strategy(p).into_bytes())
            .collect();
        let handle = Box::new(NcceCatalog {
            strategies,
            texts,
            embeddings,
        });
        write_out(out, Box::into_raw(handle), "out")
    })
}

/// # Safety
/// `catalog` must come from [`ncce_catalog_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ncce_catalog_free(catalog: *mut NcceCatalog) {
    if !catalog.is_null() {
        drop(Box::from_raw(catalog));
    }
}

/// 0 for a null handle.
///
/// # Safety
/// `catalog` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ncce_catalog_len(catalog: *const NcceCatalog) -> usize {
    catalog.as_ref().map_or(0, |c| c.strategies.len())
}

fn entry(c: &NcceCatalog, index: usize) -> Result<usize, Fail> {
    if index >= c.strategies.len() {
        return Err(Fail::new(
            NcceStatus::InvalidArgument,
            format!(
                "index {index} out of range for {} strategies",
                c.strategies.len()
            ),
        ));
    }
    Ok(index)
}

/// Id of strategy `index`.
///
/// # Safety
/// `buf` must be null or valid for `buf_len` bytes; `needed` null or valid.
#[no_mangle]
pub unsafe extern "C" fn ncce_catalog_id(
    catalog: *const NcceCatalog,
    index: usize,
    buf: *mut c_char,
    buf_len: usize,
    needed: *mut usize,
) -> NcceStatus {
    guard(|| {
        let c = as_ref(catalog, "catalog")?;
        let j = entry(c, index)?;
        write_bytes(c.strategies[j].id.as_bytes(), buf, buf_len, needed)
    })
}

/// Canonical text of strategy `index`, the string its embedding is built from.
///
/// # Safety
/// `buf` must be null or valid for `buf_len` bytes; `needed` null or valid.
#[no_mangle]
pub unsafe extern "C" fn ncce_catalog_canonical_text(
    catalog: *const NcceCatalog,
    index: usize,
    buf: *mut c_char,
    buf_len: usize,
    needed: *mut usize,
) -> NcceStatus {
    guard(|| {
        let c = as_ref(catalog, "catalog")?;
        let j = entry(c, index)?;
        write_bytes(&c.texts[j], buf, buf_len, needed)
    })
}

/// Catalog index with the highest logit for `text`; ties go to the lowest
/// index. The embedder must be the one the model was trained with.
///
/// # Safety
/// All handles must be live and `text` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ncce_route(
    model: *const NcceModel,
    catalog: *const NcceCatalog,
    embedder: *const NcceEmbedder,
    text: *const c_char,
    out_index: *mut usize,
) -> NcceStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        let c = as_ref(catalog, "catalog")?;
        let e = as_ref(embedder, "embedder")?;
        let text = as_str(text, "text")?;
        check_dim("embedder", m.model.embedding_dim(), e.inner.dimension())?;
        check_dim(
            "catalog embeddings",
            m.model.embedding_dim(),
            c.embeddings[0].dim(),
        )?;
        let x = e.inner.embed_text(text)?;
        let hs: Vec<&[f64]> = c.embeddings.iter().map(|v| v.as_slice()).collect();
        let j = route_index(&m.model, x.as_slice(), &hs)?;
        write_out(out_index, j, "out_index")
    })
}
