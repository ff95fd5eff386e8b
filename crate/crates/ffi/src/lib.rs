//! C ABI over the splitvault core.
//!
//! Handles are opaque and owned by the caller until passed to the matching
//! `*_free`/`*_destroy`. Every function returns an [`SvStatus`]; on failure
//! [`sv_last_error_message`] describes the most recent error on this thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;
use std::sync::Arc;

use splitvault::cipher_suite::Registry;
use splitvault::document_vault::{KdfParams, Plaintext, Vault, VaultError};
use splitvault::keygen_audit;
use splitvault::token_store::{TokenClient, TokenError};
use splitvault::{combine, split, KeyMaterial, SplitError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvStatus {
    Ok = 0,
    InvalidArgument = 1,
    BadPassword = 2,
    NotFound = 3,
    Conflict = 4,
    TokenUnreachable = 5,
    TokenDenied = 6,
    Corrupt = 7,
    Io = 8,
    Internal = 9,
    Panic = 10,
}

/// Connection to a token service.
pub struct SvToken(TokenClient);

/// Unlocked phone-side document store.
pub struct SvVault(Vault);

/// Decrypted document. Wiped by [`sv_buffer_destroy`].
pub struct SvBuffer(Plaintext);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SvEntropy {
    pub exact_log2: f64,
    pub asymptotic_log2: f64,
    pub refined_log2: f64,
    pub combined_exact_log2: f64,
    pub combined_asymptotic_log2: f64,
    pub combined_refined_log2: f64,
    pub upper_bound_bits: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Failure(SvStatus, String);

impl Failure {
    fn arg(msg: &str) -> Self {
        Failure(SvStatus::InvalidArgument, msg.to_string())
    }
}

impl From<SplitError> for Failure {
    fn from(e: SplitError) -> Self {
        Failure(SvStatus::InvalidArgument, e.to_string())
    }
}

impl From<TokenError> for Failure {
    fn from(e: TokenError) -> Self {
        let status = match e {
            TokenError::Unreachable(_) => SvStatus::TokenUnreachable,
            TokenError::NotFound => SvStatus::NotFound,
            TokenError::Denied => SvStatus::TokenDenied,
            TokenError::Server(_) | TokenError::Protocol(_) => SvStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

impl From<VaultError> for Failure {
    fn from(e: VaultError) -> Self {
        use VaultError::*;
        let status = match &e {
            BadPassword => SvStatus::BadPassword,
            UnknownDocument(_) | NoStore(_) | TokenRecordMissing(_) => SvStatus::NotFound,
            AlreadyExists(_) | DuplicateDocId(_) => SvStatus::Conflict,
            InvalidDocId(_) | AlreadyDestroyed | VaultLocked => SvStatus::InvalidArgument,
            TokenUnreachable(_) => SvStatus::TokenUnreachable,
            TokenDenied => SvStatus::TokenDenied,
            CorruptStore(_) | CorruptTokenRecord(_) => SvStatus::Corrupt,
            Io(_) => SvStatus::Io,
            _ => SvStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SvStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SvStatus::Panic
        }
    }
}

unsafe fn bytes<'a>(data: *const u8, len: usize) -> Result<&'a [u8], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(Failure::arg("null buffer with nonzero length"));
    }
    Ok(slice::from_raw_parts(data, len))
}

unsafe fn out_bytes<'a>(data: *mut u8, len: usize) -> Result<&'a mut [u8], Failure> {
    if data.is_null() {
        return Err(Failure::arg("null output buffer"));
    }
    Ok(slice::from_raw_parts_mut(data, len))
}

unsafe fn text<'a>(s: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if s.is_null() {
        return Err(Failure::arg(&format!("null {what}")));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| Failure::arg(&format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure::arg(&format!("null {what} handle")))
}

/// Message for the last failed call on this thread. Valid until the next
/// call into this library on the same thread; empty after a success.
#[no_mangle]
pub extern "C" fn sv_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Splits `len` key bytes into two halves written to `half_a` and `half_b`,
/// each `len` bytes. Either half alone is uniformly distributed.
///
/// # Safety
/// `key` must be readable and both outputs writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn sv_split(
    key: *const u8,
    len: usize,
    half_a: *mut u8,
    half_b: *mut u8,
) -> SvStatus {
    guard(|| {
        let key = KeyMaterial::from_slice(bytes(key, len)?)?;
        let pair = split(&key, &mut rand::rng())?;
        out_bytes(half_a, len)?.copy_from_slice(pair.half_a.expose()?);
        out_bytes(half_b, len)?.copy_from_slice(pair.half_b.expose()?);
        Ok(())
    })
}

/// Recombines two `len`-byte halves into `out`.
///
/// # Safety
/// Inputs must be readable and `out` writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn sv_combine(
    half_a: *const u8,
    half_b: *const u8,
    len: usize,
    out: *mut u8,
) -> SvStatus {
    guard(|| {
        let a = KeyMaterial::from_slice(bytes(half_a, len)?)?;
        let b = KeyMaterial::from_slice(bytes(half_b, len)?)?;
        let key = combine(&a, &b)?;
        out_bytes(out, len)?.copy_from_slice(key.expose()?);
        Ok(())
    })
}

/// Connects to a token service at `addr` ("host:port"). `device_id` may be
/// null for a personal token; enterprise tokens require one.
///
/// # Safety
/// Strings must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sv_token_connect(
    addr: *const c_char,
    device_id: *const c_char,
    out: *mut *mut SvToken,
) -> SvStatus {
    guard(|| {
        let out = handle(out, "output")?;
        *out = ptr::null_mut();
        let addr = text(addr, "address")?;
        let device = if device_id.is_null() {
            None
        } else {
            Some(text(device_id, "device id")?)
        };
        let client = TokenClient::connect(addr, device)?;
        *out = Box::into_raw(Box::new(SvToken(client)));
        Ok(())
    })
}

/// # Safety
/// `token` must come from [`sv_token_connect`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sv_token_free(token: *mut SvToken) {
    if !token.is_null() {
        drop(Box::from_raw(token));
    }
}

fn registry() -> Arc<Registry> {
    Arc::new(Registry::standard())
}

/// Creates a new store at `path` and returns it unlocked. `kdf_iterations`
/// of 0 selects the default cost.
///
/// # Safety
/// `path` must be NUL-terminated, `password` readable for `password_len`
/// bytes and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sv_vault_create(
    path: *const c_char,
    password: *const u8,
    password_len: usize,
    kdf_iterations: u32,
    out: *mut *mut SvVault,
) -> SvStatus {
    guard(|| {
        let out = handle(out, "output")?;
        *out = ptr::null_mut();
        let kdf = match kdf_iterations {
            0 => KdfParams::default(),
            iterations => KdfParams { iterations },
        };
        let vault = Vault::create(
            text(path, "path")?,
            bytes(password, password_len)?,
            kdf,
            registry(),
        )?;
        *out = Box::into_raw(Box::new(SvVault(vault)));
        Ok(())
    })
}

/// Opens and unlocks an existing store.
///
/// # Safety
/// As for [`sv_vault_create`].
#[no_mangle]
pub unsafe extern "C" fn sv_vault_open(
    path: *const c_char,
    password: *const u8,
    password_len: usize,
    out: *mut *mut SvVault,
) -> SvStatus {
    guard(|| {
        let out = handle(out, "output")?;
        *out = ptr::null_mut();
        let vault = Vault::unlock_at(
            text(path, "path")?,
            bytes(password, password_len)?,
            registry(),
        )?;
        *out = Box::into_raw(Box::new(SvVault(vault)));
        Ok(())
    })
}

/// Encrypts `len` bytes as document `doc_id`, storing the token's part on
/// `token`.
///
/// # Safety
/// Handles must be live, `doc_id` NUL-terminated, `data` readable for `len`.
#[no_mangle]
pub unsafe extern "C" fn sv_vault_encrypt(
    vault: *mut SvVault,
    token: *mut SvToken,
    doc_id: *const c_char,
    data: *const u8,
    len: usize,
) -> SvStatus {
    guard(|| {
        let vault = handle(vault, "vault")?;
        let token = handle(token, "token")?;
        let id = text(doc_id, "document id")?;
        vault
            .0
            .encrypt_document(&mut token.0, id, bytes(data, len)?, &mut rand::rng())?;
        Ok(())
    })
}

/// Decrypts document `doc_id` into a new buffer.
///
/// # Safety
/// Handles must be live, `doc_id` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sv_vault_read(
    vault: *mut SvVault,
    token: *mut SvToken,
    doc_id: *const c_char,
    out: *mut *mut SvBuffer,
) -> SvStatus {
    guard(|| {
        let out = handle(out, "output")?;
        *out = ptr::null_mut();
        let vault = handle(vault, "vault")?;
        let token = handle(token, "token")?;
        let plain = vault
            .0
            .read_document(&mut token.0, text(doc_id, "document id")?)?;
        *out = Box::into_raw(Box::new(SvBuffer(plain)));
        Ok(())
    })
}

/// Removes document `doc_id` from the store and the token.
///
/// # Safety
/// Handles must be live and `doc_id` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sv_vault_remove(
    vault: *mut SvVault,
    token: *mut SvToken,
    doc_id: *const c_char,
) -> SvStatus {
    guard(|| {
        let vault = handle(vault, "vault")?;
        let token = handle(token, "token")?;
        vault
            .0
            .remove_document(&mut token.0, text(doc_id, "document id")?)?;
        Ok(())
    })
}

/// Locks and releases a store handle.
///
/// # Safety
/// `vault` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sv_vault_free(vault: *mut SvVault) {
    if !vault.is_null() {
        let mut v = Box::from_raw(vault);
        v.0.lock();
    }
}

/// Pointer to the buffer's bytes, with the length in `len`. Null once the
/// buffer has been destroyed.
///
/// # Safety
/// `buffer` must be live; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sv_buffer_data(buffer: *const SvBuffer, len: *mut usize) -> *const u8 {
    let data = buffer.as_ref().and_then(|b| b.0.bytes().ok());
    if let Some(len) = len.as_mut() {
        *len = data.map_or(0, <[u8]>::len);
    }
    data.map_or(ptr::null(), <[u8]>::as_ptr)
}

/// Wipes and releases a document buffer.
///
/// # Safety
/// `buffer` must come from [`sv_vault_read`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sv_buffer_destroy(buffer: *mut SvBuffer) {
    if !buffer.is_null() {
        let mut b = Box::from_raw(buffer);
        let _ = b.0.destroy();
    }
}

/// Entropy of `passes` card passes over a `deck_size`-card deck with
/// `discarded` cards thrown out of each.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sv_entropy_estimate(
    deck_size: usize,
    discarded: usize,
    passes: u32,
    out: *mut SvEntropy,
) -> SvStatus {
    guard(|| {
        let out = handle(out, "output")?;
        let r = keygen_audit::entropy_estimate(deck_size, discarded, passes)
            .map_err(|e| Failure(SvStatus::InvalidArgument, e.to_string()))?;
        *out = SvEntropy {
            exact_log2: r.exact_log2,
            asymptotic_log2: r.asymptotic_log2,
            refined_log2: r.refined_log2,
            combined_exact_log2: r.combined_exact_log2,
            combined_asymptotic_log2: r.combined_asymptotic_log2,
            combined_refined_log2: r.combined_refined_log2,
            upper_bound_bits: r.upper_bound_bits,
        };
        Ok(())
    })
}
