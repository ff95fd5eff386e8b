//! Pluggable symmetric stream ciphers and the role bindings that tie them to
//! documents, key wrapping, and calls.
//!
//! Every cipher is a keystream generator: encryption and decryption both XOR
//! the keystream into the data, so `decrypt(encrypt(x, k), k) == x` holds by
//! construction and ciphertext bodies have exactly the plaintext length.
//!
//! The registry enforces that the document cipher and the wrapping cipher are
//! different systems with different key lengths, so a key from one can never
//! be fed to the other. The same holds for the call and call-wrap pair.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use aes::{Aes128, Aes256};
use chacha20::cipher::{KeyIvInit, StreamCipher as _};
use chacha20::ChaCha20;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::secret_split::{KeyMaterial, RandomSource, SplitError};
use crate::tlv::{Reader, TlvError};

type Aes128Ctr = ctr::Ctr128BE<Aes128>;
type Aes256Ctr = ctr::Ctr128BE<Aes256>;

pub const CHACHA20: &str = "chacha20";
pub const AES128_CTR: &str = "aes128-ctr";
pub const AES256_CTR: &str = "aes256-ctr";
pub const TEST64: &str = "test64";
/// Two-byte and one-byte variants of the test cipher, for exhaustive
/// key-space searches. Only present in test-mode registries.
pub const TOY16: &str = "toy16";
pub const TOY8: &str = "toy8";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CipherError {
    #[error("unknown cipher {0:?}")]
    UnknownCipher(String),
    #[error("cipher {0:?} is already registered")]
    DuplicateCipherId(String),
    #[error("role conflict: {0}")]
    RoleConflict(String),
    #[error("cipher {0:?} is not secure and the registry is not in test mode")]
    InsecureCipher(String),
    #[error("cipher {id:?} has a {key_length}-byte key; secure ciphers need at least 16")]
    WeakKeyLength { id: String, key_length: usize },
    #[error("no cipher bound to role {0}")]
    UnboundRole(Role),
    #[error("wrong key length: expected {expected}, got {got}")]
    WrongKeyLength { expected: usize, got: usize },
    #[error("ciphertext was produced by {found:?}, not {expected:?}")]
    CipherMismatch { expected: String, found: String },
    #[error("wrong nonce length: expected {expected}, got {got}")]
    WrongNonceLength { expected: usize, got: usize },
    #[error("key material has already been destroyed")]
    ZeroizedMaterial,
    #[error(transparent)]
    Randomness(SplitError),
    #[error("malformed ciphertext: {0}")]
    Malformed(#[from] TlvError),
}

impl From<SplitError> for CipherError {
    fn from(e: SplitError) -> Self {
        match e {
            SplitError::ZeroizedMaterial => CipherError::ZeroizedMaterial,
            other => CipherError::Randomness(other),
        }
    }
}

/// Static description of one cryptosystem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CipherSpec {
    pub id: String,
    pub key_length: usize,
    pub nonce_length: usize,
    pub description: String,
    /// False for the test ciphers; they may only be bound to roles in test mode.
    pub secure: bool,
}

/// Keystream generator for one cryptosystem.
pub trait StreamCipher: Send + Sync {
    /// Starts a keystream for `key` and `nonce`. Lengths are checked by the
    /// caller against the cipher's spec.
    fn start(&self, key: &[u8], nonce: &[u8]) -> Box<dyn Keystream>;
}

/// Running keystream state. Successive calls continue the stream, so any
/// chunking of the input yields the same output.
pub trait Keystream: Send {
    fn apply(&mut self, buf: &mut [u8]);
}

struct ChaCha;

impl StreamCipher for ChaCha {
    fn start(&self, key: &[u8], nonce: &[u8]) -> Box<dyn Keystream> {
        Box::new(ChaCha20::new(key.into(), nonce.into()))
    }
}

impl Keystream for ChaCha20 {
    fn apply(&mut self, buf: &mut [u8]) {
        self.apply_keystream(buf);
    }
}

struct AesCtr128;

impl StreamCipher for AesCtr128 {
    fn start(&self, key: &[u8], nonce: &[u8]) -> Box<dyn Keystream> {
        Box::new(Aes128Ctr::new(key.into(), nonce.into()))
    }
}

impl Keystream for Aes128Ctr {
    fn apply(&mut self, buf: &mut [u8]) {
        self.apply_keystream(buf);
    }
}

struct AesCtr256;

impl StreamCipher for AesCtr256 {
    fn start(&self, key: &[u8], nonce: &[u8]) -> Box<dyn Keystream> {
        Box::new(Aes256Ctr::new(key.into(), nonce.into()))
    }
}

impl Keystream for Aes256Ctr {
    fn apply(&mut self, buf: &mut [u8]) {
        self.apply_keystream(buf);
    }
}

/// The fully specified, deliberately weak test cipher.
///
/// State is a `u64` seeded from the key bytes with `s = (s * 0x100000001B3) ^ b`
/// starting at zero. Each keystream byte advances
/// `s = s * 6364136223846793005 + 1442695040888963407 (mod 2^64)` and emits the
/// top eight bits of `s`. There is no nonce.
pub struct TestCipher;

impl TestCipher {
    pub fn seed(key: &[u8]) -> u64 {
        key.iter().fold(0u64, |s, &b| {
            s.wrapping_mul(0x0000_0100_0000_01B3) ^ u64::from(b)
        })
    }
}

pub struct TestKeystream(u64);

impl Keystream for TestKeystream {
    fn apply(&mut self, buf: &mut [u8]) {
        for b in buf {
            self.0 = self
                .0
                .wrapping_mul(6_364_136_223_846_793_005)
                .wrapping_add(1_442_695_040_888_963_407);
            *b ^= (self.0 >> 56) as u8;
        }
    }
}

impl StreamCipher for TestCipher {
    fn start(&self, key: &[u8], _nonce: &[u8]) -> Box<dyn Keystream> {
        Box::new(TestKeystream(Self::seed(key)))
    }
}

/// Output of [`Cipher::encrypt`].
///
/// Serialized as the cipher id (1-byte length + ASCII), the nonce (1-byte
/// length + bytes) and the body (4-byte big-endian length + bytes).
#[derive(Clone, PartialEq, Eq)]
pub struct Ciphertext {
    pub cipher_id: String,
    pub nonce: Vec<u8>,
    pub body: Vec<u8>,
}

impl fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Ciphertext")
            .field("cipher_id", &self.cipher_id)
            .field("nonce_len", &self.nonce.len())
            .field("body_len", &self.body.len())
            .finish()
    }
}

impl zeroize::Zeroize for Ciphertext {
    fn zeroize(&mut self) {
        self.nonce.zeroize();
        self.body.zeroize();
    }
}

impl Ciphertext {
    pub fn encoded_len(&self) -> usize {
        1 + self.cipher_id.len() + 1 + self.nonce.len() + 4 + self.body.len()
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.reserve(self.encoded_len());
        out.push(self.cipher_id.len() as u8);
        out.extend_from_slice(self.cipher_id.as_bytes());
        out.push(self.nonce.len() as u8);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&(self.body.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.body);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out);
        out
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, TlvError> {
        let id_len = r.u8()? as usize;
        let id = r.take(id_len)?;
        if !id.is_ascii() {
            return Err(TlvError::Malformed("cipher id is not ASCII"));
        }
        let nonce_len = r.u8()? as usize;
        let nonce = r.take(nonce_len)?.to_vec();
        let body_len = r.u32()? as usize;
        let body = r.take(body_len)?.to_vec();
        Ok(Self {
            cipher_id: String::from_utf8(id.to_vec()).expect("ascii"),
            nonce,
            body,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TlvError> {
        let mut r = Reader::new(bytes);
        let ct = Self::decode(&mut r)?;
        if !r.is_empty() {
            return Err(TlvError::Malformed("trailing bytes after ciphertext"));
        }
        Ok(ct)
    }
}

/// A registered cipher: its spec plus the keystream implementation.
#[derive(Clone)]
pub struct Cipher {
    spec: Arc<CipherSpec>,
    imp: Arc<dyn StreamCipher>,
}

impl fmt::Debug for Cipher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("Cipher").field(&self.spec.id).finish()
    }
}

impl Cipher {
    pub fn new(spec: CipherSpec, imp: impl StreamCipher + 'static) -> Self {
        Self {
            spec: Arc::new(spec),
            imp: Arc::new(imp),
        }
    }

    pub fn spec(&self) -> &CipherSpec {
        &self.spec
    }

    pub fn id(&self) -> &str {
        &self.spec.id
    }

    pub fn key_length(&self) -> usize {
        self.spec.key_length
    }

    fn check_key<'k>(&self, key: &'k KeyMaterial) -> Result<&'k [u8], CipherError> {
        let bytes = key.expose()?;
        if bytes.len() != self.spec.key_length {
            return Err(CipherError::WrongKeyLength {
                expected: self.spec.key_length,
                got: bytes.len(),
            });
        }
        Ok(bytes)
    }

    /// Generates a fresh key of this cipher's length.
    pub fn generate_key(
        &self,
        rng: &mut (impl RandomSource + ?Sized),
    ) -> Result<KeyMaterial, CipherError> {
        Ok(KeyMaterial::random(self.spec.key_length, rng)?)
    }

    /// Encrypts under a freshly drawn nonce (none for nonce-less ciphers).
    pub fn encrypt(
        &self,
        key: &KeyMaterial,
        plaintext: &[u8],
        rng: &mut (impl RandomSource + ?Sized),
    ) -> Result<Ciphertext, CipherError> {
        let key = self.check_key(key)?;
        let mut nonce = vec![0u8; self.spec.nonce_length];
        rng.fill(&mut nonce)?;
        let mut body = plaintext.to_vec();
        self.imp.start(key, &nonce).apply(&mut body);
        Ok(Ciphertext {
            cipher_id: self.spec.id.clone(),
            nonce,
            body,
        })
    }

    pub fn decrypt(&self, key: &KeyMaterial, ct: &Ciphertext) -> Result<Vec<u8>, CipherError> {
        if ct.cipher_id != self.spec.id {
            return Err(CipherError::CipherMismatch {
                expected: self.spec.id.clone(),
                found: ct.cipher_id.clone(),
            });
        }
        let key = self.check_key(key)?;
        if ct.nonce.len() != self.spec.nonce_length {
            return Err(CipherError::WrongNonceLength {
                expected: self.spec.nonce_length,
                got: ct.nonce.len(),
            });
        }
        let mut body = ct.body.clone();
        self.imp.start(key, &ct.nonce).apply(&mut body);
        Ok(body)
    }

    /// Starts a running keystream for streaming use (calls).
    pub fn keystream(
        &self,
        key: &KeyMaterial,
        nonce: &[u8],
    ) -> Result<Box<dyn Keystream>, CipherError> {
        let key = self.check_key(key)?;
        if nonce.len() != self.spec.nonce_length {
            return Err(CipherError::WrongNonceLength {
                expected: self.spec.nonce_length,
                got: nonce.len(),
            });
        }
        Ok(self.imp.start(key, nonce))
    }
}

/// What a cipher is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Encrypts documents.
    Document,
    /// Wraps document-key halves.
    Wrap,
    /// Encrypts call streams.
    Call,
    /// Wraps call-key halves.
    #[serde(rename = "callwrap")]
    CallWrap,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Document, Role::Wrap, Role::Call, Role::CallWrap];

    /// The role whose cipher must be a different system from this one's.
    pub fn counterpart(self) -> Role {
        match self {
            Role::Document => Role::Wrap,
            Role::Wrap => Role::Document,
            Role::Call => Role::CallWrap,
            Role::CallWrap => Role::Call,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Document => "document",
            Role::Wrap => "wrap",
            Role::Call => "call",
            Role::CallWrap => "callwrap",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Role-to-cipher-id assignments, as they appear in the config file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoleBindings {
    pub document: String,
    pub wrap: String,
    pub call: String,
    pub callwrap: String,
}

impl Default for RoleBindings {
    fn default() -> Self {
        Self {
            document: CHACHA20.into(),
            wrap: AES128_CTR.into(),
            call: CHACHA20.into(),
            callwrap: AES128_CTR.into(),
        }
    }
}

impl RoleBindings {
    pub fn get(&self, role: Role) -> &str {
        match role {
            Role::Document => &self.document,
            Role::Wrap => &self.wrap,
            Role::Call => &self.call,
            Role::CallWrap => &self.callwrap,
        }
    }
}

/// Cipher registry plus role bindings. Build it at startup, then share it
/// immutably (e.g. behind an `Arc`).
#[derive(Debug, Clone)]
pub struct Registry {
    ciphers: BTreeMap<String, Cipher>,
    roles: BTreeMap<Role, String>,
    test_mode: bool,
}

impl Registry {
    pub fn empty(test_mode: bool) -> Self {
        Self {
            ciphers: BTreeMap::new(),
            roles: BTreeMap::new(),
            test_mode,
        }
    }

    /// ChaCha20, AES-128-CTR, AES-256-CTR and the test cipher, with the
    /// default role bindings.
    pub fn standard() -> Self {
        Self::with_bindings(&RoleBindings::default(), false).expect("default bindings are valid")
    }

    /// A test-mode registry: the standard ciphers plus the toy key-space
    /// variants of the test cipher, with the default bindings.
    pub fn standard_test() -> Self {
        Self::with_bindings(&RoleBindings::default(), true).expect("default bindings are valid")
    }

    pub fn with_bindings(bindings: &RoleBindings, test_mode: bool) -> Result<Self, CipherError> {
        let mut reg = Self::empty(test_mode);
        reg.register(
            CipherSpec {
                id: CHACHA20.into(),
                key_length: 32,
                nonce_length: 12,
                description: "ChaCha20 stream cipher (RFC 8439), random 96-bit nonce".into(),
                secure: true,
            },
            ChaCha,
        )?;
        reg.register(
            CipherSpec {
                id: AES128_CTR.into(),
                key_length: 16,
                nonce_length: 16,
                description: "AES-128 in counter mode, random 128-bit initial counter".into(),
                secure: true,
            },
            AesCtr128,
        )?;
        reg.register(
            CipherSpec {
                id: AES256_CTR.into(),
                key_length: 32,
                nonce_length: 16,
                description: "AES-256 in counter mode, random 128-bit initial counter".into(),
                secure: true,
            },
            AesCtr256,
        )?;
        reg.register(test_spec(TEST64, 8), TestCipher)?;
        if test_mode {
            reg.register(test_spec(TOY16, 2), TestCipher)?;
            reg.register(test_spec(TOY8, 1), TestCipher)?;
        }
        for role in Role::ALL {
            reg.bind(role, bindings.get(role))?;
        }
        Ok(reg)
    }

    pub fn is_test_mode(&self) -> bool {
        self.test_mode
    }

    pub fn register(
        &mut self,
        spec: CipherSpec,
        imp: impl StreamCipher + 'static,
    ) -> Result<(), CipherError> {
        if self.ciphers.contains_key(&spec.id) {
            return Err(CipherError::DuplicateCipherId(spec.id));
        }
        if spec.secure && spec.key_length < 16 {
            return Err(CipherError::WeakKeyLength {
                id: spec.id,
                key_length: spec.key_length,
            });
        }
        assert!(
            spec.id.is_ascii() && spec.id.len() <= 255,
            "cipher ids are short ASCII strings"
        );
        assert!(spec.nonce_length <= 255 && spec.key_length > 0);
        self.ciphers.insert(spec.id.clone(), Cipher::new(spec, imp));
        Ok(())
    }

    /// Binds `role` to the cipher `id`, rejecting insecure ciphers outside
    /// test mode and any overlap with the counterpart role.
    pub fn bind(&mut self, role: Role, id: &str) -> Result<(), CipherError> {
        let cipher = self.get(id)?;
        if !cipher.spec().secure && !self.test_mode {
            return Err(CipherError::InsecureCipher(id.to_string()));
        }
        let other_role = role.counterpart();
        if let Some(other_id) = self.roles.get(&other_role) {
            let other = &self.ciphers[other_id];
            if other_id == id {
                return Err(CipherError::RoleConflict(format!(
                    "{role} and {other_role} both bound to {id:?}"
                )));
            }
            if other.key_length() == cipher.key_length() {
                return Err(CipherError::RoleConflict(format!(
                    "{role} ({id}) and {other_role} ({other_id}) share a {}-byte key space",
                    cipher.key_length()
                )));
            }
        }
        self.roles.insert(role, id.to_string());
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&Cipher, CipherError> {
        self.ciphers
            .get(id)
            .ok_or_else(|| CipherError::UnknownCipher(id.to_string()))
    }

    pub fn for_role(&self, role: Role) -> Result<&Cipher, CipherError> {
        let id = self
            .roles
            .get(&role)
            .ok_or(CipherError::UnboundRole(role))?;
        self.get(id)
    }

    pub fn ciphers(&self) -> impl Iterator<Item = &CipherSpec> {
        self.ciphers.values().map(Cipher::spec)
    }

    /// Decrypts with whichever registered cipher produced `ct`.
    pub fn decrypt(&self, key: &KeyMaterial, ct: &Ciphertext) -> Result<Vec<u8>, CipherError> {
        self.get(&ct.cipher_id)?.decrypt(key, ct)
    }
}

fn test_spec(id: &str, key_length: usize) -> CipherSpec {
    CipherSpec {
        id: id.into(),
        key_length,
        nonce_length: 0,
        description: format!("{}-byte-key LCG test cipher; NOT SECURE", key_length),
        secure: false,
    }
}
