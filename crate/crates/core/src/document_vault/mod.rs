//! Document encryption with the key split across the phone and a token.
//!
//! Encrypting document `i`:
//!
//! 1. draw a document key K₁ and encrypt the document, D′ = E₁(D, K₁);
//! 2. split K₁ into K′₁ and K″₁;
//! 3. draw two wrapping keys K′₂, K″₂ and wrap the halves,
//!    S₁ = E₂(K′₁, K′₂), S₂ = E₂(K″₁, K″₂);
//! 4. keep {D′, K″₂, S₁} on the phone and send {K′₂, S₂} to the token.
//!
//! Each device holds one wrapped half and the key for the *other* device's
//! wrapped half, so neither can unwrap anything alone. Reading reverses the
//! steps: K′₁ = D₂(S₁, K′₂), K″₁ = D₂(S₂, K″₂), K₁ = K′₁ ⊕ K″₁, D = D₁(D′, K₁).
//! Every intermediate is zeroized before the read returns, whether it
//! succeeded or not.

mod ephemeral;
pub mod store;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::RngCore;
use thiserror::Error;
use zeroize::Zeroize;

pub use ephemeral::{EphemeralSet, Live};
pub use store::KdfParams;

use crate::cipher_suite::{CipherError, Ciphertext, Registry, Role};
use crate::secret_split::{self, KeyMaterial, RandomSource, SplitError};
use crate::tlv::{self, Reader};
use crate::token_store::{TokenError, TokenStore};
use store::{Header, StoreKeys, SALT_LEN};

/// Tags of the token-side record.
pub const TOKEN_TAG_DOC_ID: u8 = 0x01;
pub const TOKEN_TAG_WRAP_KEY_A: u8 = 0x06;
pub const TOKEN_TAG_S2: u8 = 0x07;

const MAX_DOC_ID: usize = 200;

#[derive(Debug, Error)]
pub enum VaultError {
    #[error("vault is locked")]
    VaultLocked,
    #[error("bad password")]
    BadPassword,
    #[error("corrupt store: {0}")]
    CorruptStore(String),
    #[error("store {0} already exists")]
    AlreadyExists(PathBuf),
    #[error("no store at {0}")]
    NoStore(PathBuf),
    #[error("document {0:?} already exists")]
    DuplicateDocId(String),
    #[error("unknown document {0:?}")]
    UnknownDocument(String),
    #[error("invalid document id {0:?}")]
    InvalidDocId(String),
    #[error("token unreachable: {0}")]
    TokenUnreachable(String),
    #[error("token denied access to this device")]
    TokenDenied,
    #[error("token holds no record for {0:?}")]
    TokenRecordMissing(String),
    #[error("token rejected the request: {0}")]
    TokenRejected(String),
    #[error("token record is malformed: {0}")]
    CorruptTokenRecord(String),
    #[error("plaintext already destroyed")]
    AlreadyDestroyed,
    #[error(transparent)]
    Cipher(#[from] CipherError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error("injected failure after step {0:?}")]
    InjectedFailure(ReadStep),
    #[error(transparent)]
    Io(io::Error),
}

fn token_error(doc_id: &str, e: TokenError) -> VaultError {
    match e {
        TokenError::NotFound => VaultError::TokenRecordMissing(doc_id.to_string()),
        TokenError::Denied => VaultError::TokenDenied,
        TokenError::Unreachable(m) | TokenError::Protocol(m) => VaultError::TokenUnreachable(m),
        TokenError::Server(m) => VaultError::TokenRejected(m),
    }
}

/// The phone-side record: exactly D′, K″₂ and S₁, plus its id and creation
/// time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocumentRecord {
    pub doc_id: String,
    pub d_prime: Ciphertext,
    pub wrap_key_b: KeyMaterial,
    pub s1: Ciphertext,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

/// The token-side record: exactly K′₂ and S₂.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenRecord {
    pub doc_id: String,
    pub wrap_key_a: KeyMaterial,
    pub s2: Ciphertext,
}

impl TokenRecord {
    pub fn to_bytes(&self) -> zeroize::Zeroizing<Vec<u8>> {
        let mut out = zeroize::Zeroizing::new(Vec::new());
        tlv::put(&mut out, TOKEN_TAG_DOC_ID, self.doc_id.as_bytes());
        tlv::put(
            &mut out,
            TOKEN_TAG_WRAP_KEY_A,
            self.wrap_key_a.expose().expect("live key"),
        );
        tlv::put(&mut out, TOKEN_TAG_S2, &self.s2.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, VaultError> {
        let bad = |e: tlv::TlvError| VaultError::CorruptTokenRecord(e.to_string());
        let mut r = Reader::new(bytes);
        let doc_id = String::from_utf8(r.expect(TOKEN_TAG_DOC_ID).map_err(bad)?.to_vec())
            .map_err(|_| VaultError::CorruptTokenRecord("doc id is not UTF-8".into()))?;
        let wrap_key_a = KeyMaterial::from_slice(r.expect(TOKEN_TAG_WRAP_KEY_A).map_err(bad)?)
            .map_err(|_| VaultError::CorruptTokenRecord("empty wrap key".into()))?;
        let s2 = Ciphertext::from_bytes(r.expect(TOKEN_TAG_S2).map_err(bad)?).map_err(bad)?;
        if !r.is_empty() {
            return Err(VaultError::CorruptTokenRecord("trailing fields".into()));
        }
        Ok(Self {
            doc_id,
            wrap_key_a,
            s2,
        })
    }
}

impl Zeroize for TokenRecord {
    fn zeroize(&mut self) {
        self.wrap_key_a.zeroize();
        self.s2.zeroize();
    }
}

/// Tags present in a serialized token record, in order.
pub fn token_record_tags(bytes: &[u8]) -> Result<Vec<u8>, VaultError> {
    let mut r = Reader::new(bytes);
    let mut tags = Vec::new();
    while !r.is_empty() {
        tags.push(
            r.item()
                .map_err(|e| VaultError::CorruptTokenRecord(e.to_string()))?
                .0,
        );
    }
    Ok(tags)
}

/// Key id under which a document's token record is stored.
pub fn token_key_id(doc_id: &str) -> Vec<u8> {
    [b"doc/".as_slice(), doc_id.as_bytes()].concat()
}

/// Steps of a document read, in order. Used to inject failures in tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ReadStep {
    FetchToken = 1,
    UnwrapHalfA = 2,
    UnwrapHalfB = 3,
    Combine = 4,
    DecryptDocument = 5,
}

impl ReadStep {
    pub const ALL: [ReadStep; 5] = [
        ReadStep::FetchToken,
        ReadStep::UnwrapHalfA,
        ReadStep::UnwrapHalfB,
        ReadStep::Combine,
        ReadStep::DecryptDocument,
    ];
}

/// A decrypted document. The buffer is zeroized by [`Plaintext::destroy`] or
/// on drop, whichever comes first.
pub struct Plaintext {
    buf: Vec<u8>,
    destroyed: bool,
}

impl Plaintext {
    pub fn bytes(&self) -> Result<&[u8], VaultError> {
        if self.destroyed {
            return Err(VaultError::AlreadyDestroyed);
        }
        Ok(&self.buf)
    }

    pub fn destroy(&mut self) -> Result<(), VaultError> {
        if self.destroyed {
            return Err(VaultError::AlreadyDestroyed);
        }
        self.buf.as_mut_slice().zeroize();
        self.destroyed = true;
        Ok(())
    }

    pub fn is_destroyed(&self) -> bool {
        self.destroyed
    }

    /// The managed buffer regardless of state, for memory inspection tests.
    #[doc(hidden)]
    pub fn raw_buffer(&self) -> &[u8] {
        &self.buf
    }
}

impl Drop for Plaintext {
    fn drop(&mut self) {
        self.buf.as_mut_slice().zeroize();
    }
}

impl std::fmt::Debug for Plaintext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Plaintext")
            .field("len", &self.buf.len())
            .field("destroyed", &self.destroyed)
            .finish()
    }
}

/// The phone side of the scheme: a password-protected store of document
/// records plus the encrypt and read flows.
pub struct Vault {
    path: PathBuf,
    registry: Arc<Registry>,
    header: Header,
    check: [u8; 32],
    keys: Option<StoreKeys>,
    records: BTreeMap<String, DocumentRecord>,
    ephemeral: EphemeralSet,
    fail_after: AtomicU8,
}

impl Vault {
    /// Creates a new, unlocked vault at `path`.
    pub fn create(
        path: impl AsRef<Path>,
        password: &[u8],
        kdf: KdfParams,
        registry: Arc<Registry>,
    ) -> Result<Self, VaultError> {
        let path = path.as_ref().to_path_buf();
        if path.exists() {
            return Err(VaultError::AlreadyExists(path));
        }
        if kdf.iterations == 0 {
            return Err(VaultError::CorruptStore(
                "KDF iterations must be positive".into(),
            ));
        }
        let mut salt = [0u8; SALT_LEN];
        rand::rng().fill_bytes(&mut salt);
        let header = Header { salt, kdf };
        let keys = StoreKeys::derive(password, &salt, kdf);
        let mut vault = Self {
            path,
            registry,
            header,
            check: [0; 32],
            keys: Some(keys),
            records: BTreeMap::new(),
            ephemeral: EphemeralSet::default(),
            fail_after: AtomicU8::new(0),
        };
        vault.save()?;
        Ok(vault)
    }

    /// Opens an existing store in the locked state.
    pub fn open(path: impl AsRef<Path>, registry: Arc<Registry>) -> Result<Self, VaultError> {
        let path = path.as_ref().to_path_buf();
        let bytes = read_store(&path)?;
        let (header, check) = store::read_header(&bytes)?;
        Ok(Self {
            path,
            registry,
            header,
            check,
            keys: None,
            records: BTreeMap::new(),
            ephemeral: EphemeralSet::default(),
            fail_after: AtomicU8::new(0),
        })
    }

    /// Opens and unlocks in one step.
    pub fn unlock_at(
        path: impl AsRef<Path>,
        password: &[u8],
        registry: Arc<Registry>,
    ) -> Result<Self, VaultError> {
        let mut v = Self::open(path, registry)?;
        v.unlock(password)?;
        Ok(v)
    }

    /// Derives the store keys from `password` and loads the records. A wrong
    /// password leaves the vault locked with no records loaded.
    pub fn unlock(&mut self, password: &[u8]) -> Result<(), VaultError> {
        let bytes = read_store(&self.path)?;
        let (header, check) = store::read_header(&bytes)?;
        let keys = store::unlock_keys(&header, &check, password)?;
        let table = store::open_table(&bytes, &keys)?;
        let records = store::decode_table(&table)?;
        self.header = header;
        self.check = check;
        self.records = records.into_iter().map(|r| (r.doc_id.clone(), r)).collect();
        self.keys = Some(keys);
        Ok(())
    }

    /// Drops the store keys and all in-memory records.
    pub fn lock(&mut self) {
        self.keys = None;
        self.records.clear();
    }

    pub fn is_unlocked(&self) -> bool {
        self.keys.is_some()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn kdf(&self) -> KdfParams {
        self.header.kdf
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    fn keys(&self) -> Result<&StoreKeys, VaultError> {
        self.keys.as_ref().ok_or(VaultError::VaultLocked)
    }

    pub fn records(&self) -> Result<impl Iterator<Item = &DocumentRecord>, VaultError> {
        self.keys()?;
        Ok(self.records.values())
    }

    pub fn record(&self, doc_id: &str) -> Result<&DocumentRecord, VaultError> {
        self.keys()?;
        self.records
            .get(doc_id)
            .ok_or_else(|| VaultError::UnknownDocument(doc_id.to_string()))
    }

    /// Secrets alive right now. Empty whenever no operation is in flight.
    pub fn ephemeral(&self) -> &EphemeralSet {
        &self.ephemeral
    }

    /// Makes the next reads fail right after `step` completes.
    #[doc(hidden)]
    pub fn inject_read_failure(&self, step: Option<ReadStep>) {
        self.fail_after
            .store(step.map_or(0, |s| s as u8), Ordering::SeqCst);
    }

    fn checkpoint(&self, step: ReadStep) -> Result<(), VaultError> {
        if self.fail_after.load(Ordering::SeqCst) == step as u8 {
            return Err(VaultError::InjectedFailure(step));
        }
        Ok(())
    }

    fn save(&mut self) -> Result<(), VaultError> {
        let keys = self.keys()?;
        let table = store::encode_table(self.records.values());
        let mut nonce = [0u8; 12];
        rand::rng().fill_bytes(&mut nonce);
        let mut bytes = store::seal(&self.header, keys, &table, nonce);
        let result = store::write_atomic(&self.path, &bytes);
        bytes.zeroize();
        result?;
        self.check = store::read_header(&fs::read(&self.path).map_err(VaultError::Io)?)?.1;
        Ok(())
    }

    /// Encrypts `plaintext` as document `doc_id`, placing {D′, K″₂, S₁} in
    /// this store and {K′₂, S₂} on `token`. If the token cannot take its part
    /// nothing is committed on either side.
    pub fn encrypt_document(
        &mut self,
        token: &mut (impl TokenStore + ?Sized),
        doc_id: &str,
        plaintext: &[u8],
        rng: &mut (impl RandomSource + ?Sized),
    ) -> Result<&DocumentRecord, VaultError> {
        self.keys()?;
        if doc_id.is_empty() || doc_id.len() > MAX_DOC_ID || doc_id.chars().any(char::is_control) {
            return Err(VaultError::InvalidDocId(doc_id.to_string()));
        }
        if self.records.contains_key(doc_id) {
            return Err(VaultError::DuplicateDocId(doc_id.to_string()));
        }
        let doc_cipher = self.registry.for_role(Role::Document)?;
        let wrap_cipher = self.registry.for_role(Role::Wrap)?;
        let eph = &self.ephemeral;

        let doc_key = eph.track("document_key", doc_cipher.generate_key(rng)?);
        let d_prime = doc_cipher.encrypt(&doc_key, plaintext, rng)?;
        let halves = secret_split::split(&doc_key, rng)?;
        drop(doc_key);
        let half_a = eph.track("half_a", halves.half_a);
        let half_b = eph.track("half_b", halves.half_b);

        let wrap_key_a = eph.track("wrap_key_a", wrap_cipher.generate_key(rng)?);
        let wrap_key_b = wrap_cipher.generate_key(rng)?;
        let s1 = wrap_cipher.encrypt(&wrap_key_a, half_a.expose()?, rng)?;
        let s2 = wrap_cipher.encrypt(&wrap_key_b, half_b.expose()?, rng)?;
        drop((half_a, half_b));

        let token_record = eph.track(
            "token_record",
            TokenRecord {
                doc_id: doc_id.to_string(),
                wrap_key_a: (*wrap_key_a).clone(),
                s2,
            },
        );
        drop(wrap_key_a);
        let key_id = token_key_id(doc_id);
        token
            .put(&key_id, &token_record.to_bytes(), false)
            .map_err(|e| token_error(doc_id, e))?;
        drop(token_record);

        let record = DocumentRecord {
            doc_id: doc_id.to_string(),
            d_prime,
            wrap_key_b,
            s1,
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        };
        self.records.insert(doc_id.to_string(), record);
        if let Err(e) = self.save() {
            self.records.remove(doc_id);
            let _ = token.delete(&key_id);
            return Err(e);
        }
        Ok(&self.records[doc_id])
    }

    /// Fetches {K′₂, S₂} from `token`, restores the document key and decrypts.
    pub fn read_document(
        &self,
        token: &mut (impl TokenStore + ?Sized),
        doc_id: &str,
    ) -> Result<Plaintext, VaultError> {
        let record = self.record(doc_id)?;
        let eph = &self.ephemeral;

        let blob = eph.track(
            "token_blob",
            token
                .get(&token_key_id(doc_id))
                .map_err(|e| token_error(doc_id, e))?
                .to_vec(),
        );
        let token_record = eph.track("token_record", TokenRecord::from_bytes(&blob)?);
        drop(blob);
        if token_record.doc_id != doc_id {
            return Err(VaultError::CorruptTokenRecord(format!(
                "record is for {:?}",
                token_record.doc_id
            )));
        }
        self.checkpoint(ReadStep::FetchToken)?;

        let half_a = self
            .registry
            .decrypt(&token_record.wrap_key_a, &record.s1)
            .and_then(|b| KeyMaterial::from_bytes(b).map_err(CipherError::from))?;
        let half_a = eph.track("half_a", half_a);
        self.checkpoint(ReadStep::UnwrapHalfA)?;

        let half_b = self
            .registry
            .decrypt(&record.wrap_key_b, &token_record.s2)
            .and_then(|b| KeyMaterial::from_bytes(b).map_err(CipherError::from))?;
        let half_b = eph.track("half_b", half_b);
        drop(token_record);
        self.checkpoint(ReadStep::UnwrapHalfB)?;

        let doc_key = eph.track("document_key", secret_split::combine(&half_a, &half_b)?);
        drop((half_a, half_b));
        self.checkpoint(ReadStep::Combine)?;

        let mut plaintext = Plaintext {
            buf: self.registry.decrypt(&doc_key, &record.d_prime)?,
            destroyed: false,
        };
        drop(doc_key);
        if let Err(e) = self.checkpoint(ReadStep::DecryptDocument) {
            plaintext.destroy()?;
            return Err(e);
        }
        Ok(plaintext)
    }

    /// Zeroizes a plaintext returned by [`Vault::read_document`].
    pub fn destroy_plaintext(&self, plaintext: &mut Plaintext) -> Result<(), VaultError> {
        plaintext.destroy()
    }

    /// Deletes the token record, then the local record. A record already
    /// missing on the token is not an error.
    pub fn remove_document(
        &mut self,
        token: &mut (impl TokenStore + ?Sized),
        doc_id: &str,
    ) -> Result<(), VaultError> {
        self.record(doc_id)?;
        match token.delete(&token_key_id(doc_id)) {
            Ok(()) | Err(TokenError::NotFound) => {}
            Err(e) => return Err(token_error(doc_id, e)),
        }
        let removed = self.records.remove(doc_id).expect("checked above");
        if let Err(e) = self.save() {
            self.records.insert(doc_id.to_string(), removed);
            return Err(e);
        }
        Ok(())
    }

    /// Record tags as persisted on disk, per document, after decrypting the
    /// store file. For placement checks.
    pub fn stored_tags(&self) -> Result<Vec<(String, Vec<u8>)>, VaultError> {
        let keys = self.keys()?;
        let bytes = read_store(&self.path)?;
        let table = store::open_table(&bytes, keys)?;
        store::table_tags(&table)
    }
}

fn read_store(path: &Path) -> Result<Vec<u8>, VaultError> {
    fs::read(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => VaultError::NoStore(path.to_path_buf()),
        _ => VaultError::Io(e),
    })
}
