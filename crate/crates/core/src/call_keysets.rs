//! Pre-distributed, one-time call keysets.
//!
//! For every unordered pair of employees (i, j) and every index t in 1..=m a
//! call key K³ is drawn, split into halves, and each half wrapped under its
//! own key: S₁ = E₄(K³′, K⁴′), S₂ = E₄(K³″, K⁴″). The phone keeps
//! {K⁴″, S₁}, the token keeps {K⁴′, S₂}. Opening a call fetches the token
//! part, restores K³ and runs the call cipher over the voice stream. Closing
//! the call, whether it completed or the connection failed, consumes the
//! entry on both devices.
//!
//! The simple variant skips splitting and keeps m plain keys per pair on the
//! phone.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;
use zeroize::{Zeroize, Zeroizing};

use crate::cipher_suite::{CipherError, Ciphertext, Keystream, Registry, Role};
use crate::secret_split::{self, KeyMaterial, RandomSource, SplitError};
use crate::tlv::{self, Reader};
use crate::token_store::{TokenError, TokenStore};

pub const TAG_PAIR: u8 = 0x10;
pub const TAG_INDEX: u8 = 0x11;
pub const TAG_WRAP_KEY: u8 = 0x12;
pub const TAG_WRAPPED_HALF: u8 = 0x13;
pub const TAG_STATE: u8 = 0x14;
pub const TAG_PENDING_DELETE: u8 = 0x15;
pub const TAG_CALL_KEY: u8 = 0x16;

const MAGIC: &[u8; 4] = b"SVKS";
const VERSION: u8 = 1;
const TOKEN_DELETE_ATTEMPTS: usize = 3;

/// Largest deployment accepted by [`provision`].
pub const MAX_EMPLOYEES: u32 = 10_000;

#[derive(Debug, Error)]
pub enum CallError {
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("keyset {pair}/{index} already consumed")]
    AlreadyConsumed { pair: Pair, index: u32 },
    #[error("no keyset {pair}/{index}")]
    MissingEntry { pair: Pair, index: u32 },
    #[error("token unreachable: {0}")]
    TokenUnreachable(String),
    #[error("session closed")]
    SessionClosed,
    #[error("cipher {0} has no nonce and cannot key two call directions")]
    UnsuitableCipher(String),
    #[error("corrupt keyring: {0}")]
    CorruptKeyring(String),
    #[error(transparent)]
    Cipher(#[from] CipherError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn corrupt(msg: impl fmt::Display) -> CallError {
    CallError::CorruptKeyring(msg.to_string())
}

/// An unordered employee pair, stored with `lo < hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pair {
    pub lo: u32,
    pub hi: u32,
}

impl Pair {
    pub fn new(a: u32, b: u32) -> Result<Self, CallError> {
        match a.cmp(&b) {
            std::cmp::Ordering::Less => Ok(Self { lo: a, hi: b }),
            std::cmp::Ordering::Greater => Ok(Self { lo: b, hi: a }),
            std::cmp::Ordering::Equal => Err(CallError::InvalidParameters(format!(
                "employee {a} cannot call itself"
            ))),
        }
    }

    pub fn contains(&self, who: u32) -> bool {
        self.lo == who || self.hi == who
    }

    pub fn peer_of(&self, who: u32) -> Option<u32> {
        if who == self.lo {
            Some(self.hi)
        } else if who == self.hi {
            Some(self.lo)
        } else {
            None
        }
    }

    fn to_bytes(self) -> [u8; 8] {
        let mut b = [0u8; 8];
        b[..4].copy_from_slice(&self.lo.to_be_bytes());
        b[4..].copy_from_slice(&self.hi.to_be_bytes());
        b
    }

    fn from_bytes(b: &[u8]) -> Result<Self, CallError> {
        let b: [u8; 8] = b.try_into().map_err(|_| corrupt("pair field"))?;
        let lo = u32::from_be_bytes(b[..4].try_into().unwrap());
        let hi = u32::from_be_bytes(b[4..].try_into().unwrap());
        if lo >= hi {
            return Err(corrupt("pair not ordered"));
        }
        Ok(Self { lo, hi })
    }
}

impl fmt::Display for Pair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.lo, self.hi)
    }
}

/// Token key id of keyset `index` for `pair`.
pub fn token_key_id(pair: Pair, index: u32) -> Vec<u8> {
    format!("ks/{pair}/{index}").into_bytes()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryState {
    Fresh,
    /// Key restored for a call that has not been closed yet. Not reusable.
    InUse,
    Consumed,
}

impl EntryState {
    fn code(self) -> u8 {
        match self {
            EntryState::Fresh => 0,
            EntryState::InUse => 1,
            EntryState::Consumed => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self, CallError> {
        Ok(match c {
            0 => EntryState::Fresh,
            1 => EntryState::InUse,
            2 => EntryState::Consumed,
            _ => return Err(corrupt(format!("state {c}"))),
        })
    }
}

/// Phone side of a split keyset: K⁴″ and S₁.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonePart {
    pub wrap_key_b: KeyMaterial,
    pub s1: Ciphertext,
}

/// Token side of a split keyset: K⁴′ and S₂.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenPart {
    pub pair: Pair,
    pub index: u32,
    pub wrap_key_a: KeyMaterial,
    pub s2: Ciphertext,
}

impl TokenPart {
    pub fn to_bytes(&self) -> Zeroizing<Vec<u8>> {
        let mut out = Zeroizing::new(Vec::new());
        tlv::put(&mut out, TAG_PAIR, &self.pair.to_bytes());
        tlv::put(&mut out, TAG_INDEX, &self.index.to_be_bytes());
        tlv::put(
            &mut out,
            TAG_WRAP_KEY,
            self.wrap_key_a.expose().expect("live key"),
        );
        tlv::put(&mut out, TAG_WRAPPED_HALF, &self.s2.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CallError> {
        let mut r = Reader::new(bytes);
        let part = Self::read(&mut r)?;
        if !r.is_empty() {
            return Err(corrupt("trailing bytes after token part"));
        }
        Ok(part)
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, CallError> {
        let pair = Pair::from_bytes(r.expect(TAG_PAIR).map_err(corrupt)?)?;
        let index = read_index(r)?;
        let wrap_key_a =
            KeyMaterial::from_slice(r.expect(TAG_WRAP_KEY).map_err(corrupt)?).map_err(corrupt)?;
        let s2 = Ciphertext::from_bytes(r.expect(TAG_WRAPPED_HALF).map_err(corrupt)?)
            .map_err(corrupt)?;
        Ok(Self {
            pair,
            index,
            wrap_key_a,
            s2,
        })
    }
}

impl Zeroize for TokenPart {
    fn zeroize(&mut self) {
        self.wrap_key_a.zeroize();
        self.s2.zeroize();
    }
}

fn read_index(r: &mut Reader<'_>) -> Result<u32, CallError> {
    let b = r.expect(TAG_INDEX).map_err(corrupt)?;
    let index = u32::from_be_bytes(b.try_into().map_err(|_| corrupt("index field"))?);
    if index == 0 {
        return Err(corrupt("index 0"));
    }
    Ok(index)
}

/// One keyset as generated on the provisioning server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeysetEntry {
    pub pair: Pair,
    pub index: u32,
    pub phone_part: PhonePart,
    pub token_part: TokenPart,
    pub state: EntryState,
}

/// Output of [`provision`]: every keyset, from which per-device exports are
/// cut.
#[derive(Debug, Clone)]
pub struct Distribution {
    pub employees: u32,
    pub sets: u32,
    pub entries: Vec<KeysetEntry>,
}

/// Output of [`provision_simple`].
#[derive(Debug, Clone)]
pub struct SimpleDistribution {
    pub employees: u32,
    pub sets: u32,
    pub entries: Vec<(Pair, u32, KeyMaterial)>,
}

/// Number of keysets for `employees` people with `sets` per pair.
pub fn keyset_count(employees: u32, sets: u32) -> u64 {
    let n = employees as u64;
    sets as u64 * n * n.saturating_sub(1) / 2
}

fn check_params(employees: u32, sets: u32) -> Result<(), CallError> {
    if employees < 2 {
        return Err(CallError::InvalidParameters(format!(
            "need at least 2 employees, got {employees}"
        )));
    }
    if employees > MAX_EMPLOYEES {
        return Err(CallError::InvalidParameters(format!(
            "at most {MAX_EMPLOYEES} employees"
        )));
    }
    if sets == 0 {
        return Err(CallError::InvalidParameters(
            "need at least 1 set per pair".into(),
        ));
    }
    Ok(())
}

fn pairs(employees: u32) -> impl Iterator<Item = Pair> {
    (0..employees).flat_map(move |lo| (lo + 1..employees).map(move |hi| Pair { lo, hi }))
}

/// Generates `sets` split keysets for every pair among `employees` people,
/// numbered 0..employees.
pub fn provision(
    employees: u32,
    sets: u32,
    registry: &Registry,
    rng: &mut (impl RandomSource + ?Sized),
) -> Result<Distribution, CallError> {
    check_params(employees, sets)?;
    let call = registry.for_role(Role::Call)?;
    let wrap = registry.for_role(Role::CallWrap)?;
    let mut entries = Vec::with_capacity(keyset_count(employees, sets) as usize);
    for pair in pairs(employees) {
        for index in 1..=sets {
            let call_key = call.generate_key(rng)?;
            let halves = secret_split::split(&call_key, rng)?;
            drop(call_key);
            let wrap_key_a = wrap.generate_key(rng)?;
            let wrap_key_b = wrap.generate_key(rng)?;
            let s1 = wrap.encrypt(&wrap_key_a, halves.half_a.expose()?, rng)?;
            let s2 = wrap.encrypt(&wrap_key_b, halves.half_b.expose()?, rng)?;
            entries.push(KeysetEntry {
                pair,
                index,
                phone_part: PhonePart { wrap_key_b, s1 },
                token_part: TokenPart {
                    pair,
                    index,
                    wrap_key_a,
                    s2,
                },
                state: EntryState::Fresh,
            });
        }
    }
    Ok(Distribution {
        employees,
        sets,
        entries,
    })
}

/// Generates `sets` plain call keys per pair, all phone-resident.
pub fn provision_simple(
    employees: u32,
    sets: u32,
    registry: &Registry,
    rng: &mut (impl RandomSource + ?Sized),
) -> Result<SimpleDistribution, CallError> {
    check_params(employees, sets)?;
    let call = registry.for_role(Role::Call)?;
    let mut entries = Vec::with_capacity(keyset_count(employees, sets) as usize);
    for pair in pairs(employees) {
        for index in 1..=sets {
            entries.push((pair, index, call.generate_key(rng)?));
        }
    }
    Ok(SimpleDistribution {
        employees,
        sets,
        entries,
    })
}

impl Distribution {
    fn check_owner(&self, owner: u32) -> Result<(), CallError> {
        if owner >= self.employees {
            return Err(CallError::InvalidParameters(format!(
                "no employee {owner} among {}",
                self.employees
            )));
        }
        Ok(())
    }

    /// The phone keyring of employee `owner`.
    pub fn phone_keyring(&self, owner: u32) -> Result<Keyring, CallError> {
        self.check_owner(owner)?;
        let mut ring = Keyring::new(owner);
        for e in self.entries.iter().filter(|e| e.pair.contains(owner)) {
            ring.slots.insert(
                (e.pair, e.index),
                Slot {
                    state: e.state,
                    material: Some(Material::Split(e.phone_part.clone())),
                },
            );
        }
        Ok(ring)
    }

    /// The token parts for employee `owner`.
    pub fn token_export(&self, owner: u32) -> Result<TokenExport, CallError> {
        self.check_owner(owner)?;
        Ok(TokenExport {
            owner,
            parts: self
                .entries
                .iter()
                .filter(|e| e.pair.contains(owner))
                .map(|e| e.token_part.clone())
                .collect(),
        })
    }
}

impl SimpleDistribution {
    pub fn phone_keyring(&self, owner: u32) -> Result<Keyring, CallError> {
        if owner >= self.employees {
            return Err(CallError::InvalidParameters(format!("no employee {owner}")));
        }
        let mut ring = Keyring::new(owner);
        for (pair, index, key) in self.entries.iter().filter(|e| e.0.contains(owner)) {
            ring.slots.insert(
                (*pair, *index),
                Slot {
                    state: EntryState::Fresh,
                    material: Some(Material::Simple(key.clone())),
                },
            );
        }
        Ok(ring)
    }
}

/// Token parts destined for one employee's token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenExport {
    pub owner: u32,
    pub parts: Vec<TokenPart>,
}

impl TokenExport {
    /// Loads every part onto `token`.
    pub fn install(&self, token: &mut (impl TokenStore + ?Sized)) -> Result<usize, CallError> {
        for part in &self.parts {
            token
                .put(&token_key_id(part.pair, part.index), &part.to_bytes(), true)
                .map_err(|e| CallError::TokenUnreachable(e.to_string()))?;
        }
        Ok(self.parts.len())
    }

    pub fn to_bytes(&self) -> Zeroizing<Vec<u8>> {
        let mut out = Zeroizing::new(file_header(KIND_TOKEN, self.owner));
        for part in &self.parts {
            out.extend_from_slice(&part.to_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CallError> {
        let (kind, owner, body) = read_file_header(bytes)?;
        if kind != KIND_TOKEN {
            return Err(corrupt("not a token export"));
        }
        let mut r = Reader::new(body);
        let mut parts = Vec::new();
        while !r.is_empty() {
            parts.push(TokenPart::read(&mut r)?);
        }
        Ok(Self { owner, parts })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CallError> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CallError> {
        Self::from_bytes(&Zeroizing::new(fs::read(path)?))
    }
}

const KIND_PHONE: u8 = 1;
const KIND_TOKEN: u8 = 2;

fn file_header(kind: u8, owner: u32) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(kind);
    out.extend_from_slice(&owner.to_be_bytes());
    out
}

fn read_file_header(bytes: &[u8]) -> Result<(u8, u32, &[u8]), CallError> {
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(corrupt(format!("unsupported version {}", bytes[4])));
    }
    let owner = u32::from_be_bytes(bytes[6..10].try_into().unwrap());
    Ok((bytes[5], owner, &bytes[10..]))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CallError> {
    crate::document_vault::store::write_atomic(path, bytes).map_err(|e| match e {
        crate::document_vault::VaultError::Io(io) => CallError::Io(io),
        other => CallError::Io(io::Error::other(other.to_string())),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Material {
    Split(PhonePart),
    Simple(KeyMaterial),
}

impl Zeroize for Material {
    fn zeroize(&mut self) {
        match self {
            Material::Split(p) => {
                p.wrap_key_b.zeroize();
                p.s1.zeroize();
            }
            Material::Simple(k) => k.zeroize(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Slot {
    state: EntryState,
    material: Option<Material>,
}

/// Per-peer summary of a keyring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PeerStatus {
    pub fresh: u32,
    pub in_use: u32,
    pub consumed: u32,
}

/// How a call ended. Both outcomes consume the keyset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CallOutcome {
    Completed,
    ConnectionFailed,
}

/// What happened to the token side when a call was closed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenCleanup {
    /// Simple-mode keys have nothing on the token.
    NotNeeded,
    Deleted,
    /// Deletion failed; the key id stays queued in the keyring.
    Queued(String),
}

#[derive(Debug)]
pub struct CloseReport {
    pub pair: Pair,
    pub index: u32,
    pub token: TokenCleanup,
    /// Set if the consumed state could not be written to disk.
    pub persist_error: Option<String>,
}

/// One employee's phone keyring, optionally backed by a file that is rewritten
/// on every state change.
#[derive(Debug)]
pub struct Keyring {
    owner: u32,
    slots: BTreeMap<(Pair, u32), Slot>,
    pending_deletes: BTreeSet<Vec<u8>>,
    path: Option<PathBuf>,
}

impl Keyring {
    fn new(owner: u32) -> Self {
        Self {
            owner,
            slots: BTreeMap::new(),
            pending_deletes: BTreeSet::new(),
            path: None,
        }
    }

    pub fn owner(&self) -> u32 {
        self.owner
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn state(&self, peer: u32, index: u32) -> Option<EntryState> {
        let pair = Pair::new(self.owner, peer).ok()?;
        self.slots.get(&(pair, index)).map(|s| s.state)
    }

    /// True if the keyring still holds secret material for the entry.
    pub fn holds_material(&self, peer: u32, index: u32) -> bool {
        Pair::new(self.owner, peer)
            .ok()
            .and_then(|p| self.slots.get(&(p, index)))
            .is_some_and(|s| s.material.is_some())
    }

    pub fn status(&self) -> BTreeMap<u32, PeerStatus> {
        let mut out: BTreeMap<u32, PeerStatus> = BTreeMap::new();
        for ((pair, _), slot) in &self.slots {
            let st = out.entry(pair.peer_of(self.owner).unwrap()).or_default();
            match slot.state {
                EntryState::Fresh => st.fresh += 1,
                EntryState::InUse => st.in_use += 1,
                EntryState::Consumed => st.consumed += 1,
            }
        }
        out
    }

    /// Token deletions still owed from earlier closes.
    pub fn pending_deletes(&self) -> impl Iterator<Item = &[u8]> {
        self.pending_deletes.iter().map(Vec::as_slice)
    }

    /// Smallest fresh index for `peer`.
    pub fn next_fresh(&self, peer: u32) -> Result<u32, CallError> {
        let pair = Pair::new(self.owner, peer)?;
        let mut last = 0;
        for ((p, index), slot) in self.slots.range((pair, 0)..=(pair, u32::MAX)) {
            debug_assert_eq!(*p, pair);
            if slot.state == EntryState::Fresh {
                return Ok(*index);
            }
            last = *index;
        }
        Err(CallError::MissingEntry {
            pair,
            index: last + 1,
        })
    }

    /// Restores the call key of keyset `index` shared with `peer` and starts a
    /// session. Split keysets need the token; a failed fetch leaves the entry
    /// fresh. On success the entry is marked in use, and persisted as such,
    /// before the session is returned.
    pub fn open_call(
        &mut self,
        registry: &Registry,
        token: Option<&mut dyn TokenStore>,
        peer: u32,
        index: u32,
    ) -> Result<CallSession, CallError> {
        let pair = Pair::new(self.owner, peer)?;
        let slot = self
            .slots
            .get(&(pair, index))
            .ok_or(CallError::MissingEntry { pair, index })?;
        if slot.state != EntryState::Fresh {
            return Err(CallError::AlreadyConsumed { pair, index });
        }
        let call_key = match slot.material.as_ref() {
            None => return Err(CallError::AlreadyConsumed { pair, index }),
            Some(Material::Simple(k)) => k.clone(),
            Some(Material::Split(phone)) => {
                let token = token.ok_or_else(|| CallError::TokenUnreachable("no token".into()))?;
                restore_split(registry, token, pair, index, phone)?
            }
        };
        let session = CallSession::start(registry, pair, index, self.owner, call_key)?;
        self.slots.get_mut(&(pair, index)).unwrap().state = EntryState::InUse;
        if let Err(e) = self.persist() {
            self.slots.get_mut(&(pair, index)).unwrap().state = EntryState::Fresh;
            return Err(e);
        }
        Ok(session)
    }

    /// Ends `session`: its key is zeroized, the entry is consumed and its phone
    /// material wiped, and the token part is deleted (retried, then queued).
    pub fn close_call(
        &mut self,
        session: &mut CallSession,
        outcome: CallOutcome,
        token: Option<&mut dyn TokenStore>,
    ) -> CloseReport {
        let _ = outcome;
        session.end();
        let (pair, index) = (session.pair, session.index);
        let mut split = false;
        if let Some(slot) = self.slots.get_mut(&(pair, index)) {
            slot.state = EntryState::Consumed;
            if let Some(mut m) = slot.material.take() {
                split = matches!(m, Material::Split(_));
                m.zeroize();
            }
        }
        let token_state = if split {
            let key_id = token_key_id(pair, index);
            self.pending_deletes.insert(key_id.clone());
            match token {
                Some(t) => match delete_with_retry(t, &key_id) {
                    Ok(()) => {
                        self.pending_deletes.remove(&key_id);
                        TokenCleanup::Deleted
                    }
                    Err(e) => TokenCleanup::Queued(e.to_string()),
                },
                None => TokenCleanup::Queued("no token".into()),
            }
        } else {
            TokenCleanup::NotNeeded
        };
        CloseReport {
            pair,
            index,
            token: token_state,
            persist_error: self.persist().err().map(|e| e.to_string()),
        }
    }

    /// Retries queued token deletions. Returns how many are still pending.
    pub fn flush_pending(&mut self, token: &mut dyn TokenStore) -> Result<usize, CallError> {
        let ids: Vec<_> = self.pending_deletes.iter().cloned().collect();
        for id in ids {
            if delete_with_retry(token, &id).is_ok() {
                self.pending_deletes.remove(&id);
            }
        }
        self.persist()?;
        Ok(self.pending_deletes.len())
    }

    pub fn to_bytes(&self) -> Zeroizing<Vec<u8>> {
        let mut out = Zeroizing::new(file_header(KIND_PHONE, self.owner));
        for ((pair, index), slot) in &self.slots {
            tlv::put(&mut out, TAG_PAIR, &pair.to_bytes());
            tlv::put(&mut out, TAG_INDEX, &index.to_be_bytes());
            match &slot.material {
                Some(Material::Split(p)) => {
                    tlv::put(
                        &mut out,
                        TAG_WRAP_KEY,
                        p.wrap_key_b.expose().expect("live key"),
                    );
                    tlv::put(&mut out, TAG_WRAPPED_HALF, &p.s1.to_bytes());
                }
                Some(Material::Simple(k)) => {
                    tlv::put(&mut out, TAG_CALL_KEY, k.expose().expect("live key"));
                }
                None => {}
            }
            tlv::put(&mut out, TAG_STATE, &[slot.state.code()]);
        }
        for id in &self.pending_deletes {
            tlv::put(&mut out, TAG_PENDING_DELETE, id);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CallError> {
        let (kind, owner, body) = read_file_header(bytes)?;
        if kind != KIND_PHONE {
            return Err(corrupt("not a phone keyring"));
        }
        let mut ring = Keyring::new(owner);
        let mut r = Reader::new(body);
        while let Some(tag) = r.peek_tag() {
            if tag == TAG_PENDING_DELETE {
                ring.pending_deletes
                    .insert(r.expect(TAG_PENDING_DELETE).map_err(corrupt)?.to_vec());
                continue;
            }
            let pair = Pair::from_bytes(r.expect(TAG_PAIR).map_err(corrupt)?)?;
            if !pair.contains(owner) {
                return Err(corrupt(format!("pair {pair} does not involve {owner}")));
            }
            let index = read_index(&mut r)?;
            let material = match r.peek_tag() {
                Some(TAG_WRAP_KEY) => {
                    let wrap_key_b =
                        KeyMaterial::from_slice(r.expect(TAG_WRAP_KEY).map_err(corrupt)?)
                            .map_err(corrupt)?;
                    let s1 = Ciphertext::from_bytes(r.expect(TAG_WRAPPED_HALF).map_err(corrupt)?)
                        .map_err(corrupt)?;
                    Some(Material::Split(PhonePart { wrap_key_b, s1 }))
                }
                Some(TAG_CALL_KEY) => Some(Material::Simple(
                    KeyMaterial::from_slice(r.expect(TAG_CALL_KEY).map_err(corrupt)?)
                        .map_err(corrupt)?,
                )),
                _ => None,
            };
            let state = match r.expect(TAG_STATE).map_err(corrupt)? {
                [c] => EntryState::from_code(*c)?,
                _ => return Err(corrupt("state field")),
            };
            if (state == EntryState::Consumed) != material.is_none() {
                return Err(corrupt(format!(
                    "keyset {pair}/{index} state and material disagree"
                )));
            }
            if ring
                .slots
                .insert((pair, index), Slot { state, material })
                .is_some()
            {
                return Err(corrupt(format!("duplicate keyset {pair}/{index}")));
            }
        }
        Ok(ring)
    }

    /// Writes the keyring to `path` and keeps it there on every change.
    pub fn save_to(&mut self, path: impl AsRef<Path>) -> Result<(), CallError> {
        self.path = Some(path.as_ref().to_path_buf());
        self.persist()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CallError> {
        let bytes = Zeroizing::new(fs::read(path.as_ref())?);
        let mut ring = Self::from_bytes(&bytes)?;
        ring.path = Some(path.as_ref().to_path_buf());
        Ok(ring)
    }

    fn persist(&self) -> Result<(), CallError> {
        match &self.path {
            Some(p) => write_atomic(p, &self.to_bytes()),
            None => Ok(()),
        }
    }
}

fn token_failure(e: TokenError, pair: Pair, index: u32) -> CallError {
    match e {
        TokenError::NotFound => CallError::MissingEntry { pair, index },
        other => CallError::TokenUnreachable(other.to_string()),
    }
}

fn restore_split(
    registry: &Registry,
    token: &mut dyn TokenStore,
    pair: Pair,
    index: u32,
    phone: &PhonePart,
) -> Result<KeyMaterial, CallError> {
    let blob = token
        .get(&token_key_id(pair, index))
        .map_err(|e| token_failure(e, pair, index))?;
    let mut part = TokenPart::from_bytes(&blob)?;
    drop(blob);
    let result = (|| {
        if part.pair != pair || part.index != index {
            return Err(corrupt("token part belongs to another keyset"));
        }
        let half_a = KeyMaterial::from_bytes(registry.decrypt(&part.wrap_key_a, &phone.s1)?)?;
        let half_b = KeyMaterial::from_bytes(registry.decrypt(&phone.wrap_key_b, &part.s2)?)?;
        Ok(secret_split::combine(&half_a, &half_b)?)
    })();
    part.zeroize();
    result
}

fn delete_with_retry(token: &mut dyn TokenStore, key_id: &[u8]) -> Result<(), TokenError> {
    let mut last = None;
    for _ in 0..TOKEN_DELETE_ATTEMPTS {
        match token.delete(key_id) {
            Ok(()) | Err(TokenError::NotFound) => return Ok(()),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Direction of a voice stream within a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    LowToHigh,
    HighToLow,
}

impl Direction {
    fn slot(self) -> usize {
        match self {
            Direction::LowToHigh => 0,
            Direction::HighToLow => 1,
        }
    }
}

/// An open call. Each direction has its own running keystream, so chunks
/// must be fed in order per direction; chunk boundaries do not matter.
pub struct CallSession {
    pair: Pair,
    index: u32,
    owner: u32,
    call_key: KeyMaterial,
    streams: Option<[Box<dyn Keystream>; 2]>,
}

impl CallSession {
    fn start(
        registry: &Registry,
        pair: Pair,
        index: u32,
        owner: u32,
        call_key: KeyMaterial,
    ) -> Result<Self, CallError> {
        let cipher = registry.for_role(Role::Call)?;
        let n = cipher.spec().nonce_length;
        if n == 0 {
            return Err(CallError::UnsuitableCipher(cipher.id().to_string()));
        }
        let nonce = |d: Direction| {
            let mut v = vec![0u8; n];
            v[0] = d.slot() as u8;
            v
        };
        let streams = [
            cipher.keystream(&call_key, &nonce(Direction::LowToHigh))?,
            cipher.keystream(&call_key, &nonce(Direction::HighToLow))?,
        ];
        Ok(Self {
            pair,
            index,
            owner,
            call_key,
            streams: Some(streams),
        })
    }

    pub fn pair(&self) -> Pair {
        self.pair
    }

    pub fn index(&self) -> u32 {
        self.index
    }

    pub fn is_open(&self) -> bool {
        self.streams.is_some()
    }

    /// The call key, for endpoint agreement checks.
    pub fn call_key(&self) -> Result<&[u8], CallError> {
        if !self.is_open() {
            return Err(CallError::SessionClosed);
        }
        Ok(self.call_key.expose()?)
    }

    /// The direction this endpoint sends in.
    pub fn outgoing(&self) -> Direction {
        if self.owner == self.pair.lo {
            Direction::LowToHigh
        } else {
            Direction::HighToLow
        }
    }

    pub fn incoming(&self) -> Direction {
        match self.outgoing() {
            Direction::LowToHigh => Direction::HighToLow,
            Direction::HighToLow => Direction::LowToHigh,
        }
    }

    /// Encrypts or decrypts the next `chunk` of the `direction` stream.
    pub fn stream_chunk(
        &mut self,
        direction: Direction,
        chunk: &[u8],
    ) -> Result<Vec<u8>, CallError> {
        let streams = self.streams.as_mut().ok_or(CallError::SessionClosed)?;
        let mut out = chunk.to_vec();
        streams[direction.slot()].apply(&mut out);
        Ok(out)
    }

    fn end(&mut self) {
        self.streams = None;
        self.call_key.zeroize();
    }

    #[doc(hidden)]
    pub fn raw_call_key(&self) -> &[u8] {
        self.call_key.raw_buffer()
    }
}

impl Drop for CallSession {
    fn drop(&mut self) {
        self.end();
    }
}

impl fmt::Debug for CallSession {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CallSession")
            .field("pair", &self.pair)
            .field("index", &self.index)
            .field("open", &self.is_open())
            .finish_non_exhaustive()
    }
}
