//! Phone-side store file.
//!
//! ```text
//! "SVLT" | version u8 | salt [16] | kdf id u8 | iterations u32 BE
//!        | password check [32] | nonce [12] | table length u32 BE
//!        | encrypted record table | tag [32]
//! ```
//!
//! The store key and MAC key come from PBKDF2-HMAC-SHA256 over the password
//! and salt. The password check is `HMAC(mac_key, "password-check")`; the tag
//! is an HMAC over everything before it. The record table is encrypted with
//! ChaCha20 and holds the records as TLV items, each record starting with its
//! doc id (0x01) followed by D′ (0x02), K″₂ (0x03), S₁ (0x04) and the creation
//! time (0x05).

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use chacha20::cipher::{KeyIvInit, StreamCipher};
use chacha20::ChaCha20;
use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use zeroize::Zeroizing;

use super::{DocumentRecord, VaultError};
use crate::cipher_suite::Ciphertext;
use crate::secret_split::KeyMaterial;
use crate::tlv::{self, Reader};

pub const MAGIC: &[u8; 4] = b"SVLT";
pub const VERSION: u8 = 1;
pub const SALT_LEN: usize = 16;
const KDF_PBKDF2_SHA256: u8 = 0x01;
const NONCE_LEN: usize = 12;
const MAC_LEN: usize = 32;
const HEADER_LEN: usize = 4 + 1 + SALT_LEN + 1 + 4 + MAC_LEN;

pub const TAG_DOC_ID: u8 = 0x01;
pub const TAG_D_PRIME: u8 = 0x02;
pub const TAG_WRAP_KEY_B: u8 = 0x03;
pub const TAG_S1: u8 = 0x04;
pub const TAG_CREATED_AT: u8 = 0x05;

type HmacSha256 = Hmac<Sha256>;

/// Password KDF cost. The algorithm is fixed to PBKDF2-HMAC-SHA256.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdfParams {
    pub iterations: u32,
}

impl Default for KdfParams {
    fn default() -> Self {
        Self {
            iterations: 600_000,
        }
    }
}

pub(crate) struct StoreKeys {
    enc: Zeroizing<[u8; 32]>,
    mac: Zeroizing<[u8; 32]>,
}

impl StoreKeys {
    pub(crate) fn derive(password: &[u8], salt: &[u8; SALT_LEN], kdf: KdfParams) -> Self {
        let mut out = Zeroizing::new([0u8; 64]);
        pbkdf2::pbkdf2_hmac::<Sha256>(password, salt, kdf.iterations, out.as_mut());
        let mut enc = Zeroizing::new([0u8; 32]);
        let mut mac = Zeroizing::new([0u8; 32]);
        enc.copy_from_slice(&out[..32]);
        mac.copy_from_slice(&out[32..]);
        Self { enc, mac }
    }

    fn mac(&self) -> HmacSha256 {
        HmacSha256::new_from_slice(self.mac.as_ref()).expect("any key length")
    }

    fn password_check(&self) -> [u8; MAC_LEN] {
        let mut m = self.mac();
        m.update(b"password-check");
        m.finalize().into_bytes().into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Header {
    pub salt: [u8; SALT_LEN],
    pub kdf: KdfParams,
}

fn corrupt(msg: impl Into<String>) -> VaultError {
    VaultError::CorruptStore(msg.into())
}

pub(crate) fn read_header(bytes: &[u8]) -> Result<(Header, [u8; MAC_LEN]), VaultError> {
    if bytes.len() < HEADER_LEN {
        return Err(corrupt("file shorter than header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(corrupt(format!("unsupported version {}", bytes[4])));
    }
    let mut r = Reader::new(&bytes[5..HEADER_LEN]);
    let salt: [u8; SALT_LEN] = r.take(SALT_LEN).unwrap().try_into().unwrap();
    let kdf_id = r.u8().unwrap();
    if kdf_id != KDF_PBKDF2_SHA256 {
        return Err(corrupt(format!("unknown KDF {kdf_id:#04x}")));
    }
    let iterations = r.u32().unwrap();
    if iterations == 0 {
        return Err(corrupt("zero KDF iterations"));
    }
    let check: [u8; MAC_LEN] = r.take(MAC_LEN).unwrap().try_into().unwrap();
    Ok((
        Header {
            salt,
            kdf: KdfParams { iterations },
        },
        check,
    ))
}

/// Derives the store keys and checks them against the file's password check.
pub(crate) fn unlock_keys(
    header: &Header,
    check: &[u8; MAC_LEN],
    password: &[u8],
) -> Result<StoreKeys, VaultError> {
    let keys = StoreKeys::derive(password, &header.salt, header.kdf);
    let mut m = keys.mac();
    m.update(b"password-check");
    m.verify_slice(check).map_err(|_| VaultError::BadPassword)?;
    Ok(keys)
}

pub(crate) fn encode_table<'a>(
    records: impl Iterator<Item = &'a DocumentRecord>,
) -> Zeroizing<Vec<u8>> {
    let mut out = Zeroizing::new(Vec::new());
    for rec in records {
        tlv::put(&mut out, TAG_DOC_ID, rec.doc_id.as_bytes());
        tlv::put(&mut out, TAG_D_PRIME, &rec.d_prime.to_bytes());
        tlv::put(
            &mut out,
            TAG_WRAP_KEY_B,
            rec.wrap_key_b.expose().expect("stored keys are live"),
        );
        tlv::put(&mut out, TAG_S1, &rec.s1.to_bytes());
        tlv::put(&mut out, TAG_CREATED_AT, &rec.created_at.to_be_bytes());
    }
    out
}

pub(crate) fn decode_table(table: &[u8]) -> Result<Vec<DocumentRecord>, VaultError> {
    let bad = |e: tlv::TlvError| corrupt(format!("record table: {e}"));
    let mut r = Reader::new(table);
    let mut out = Vec::new();
    while !r.is_empty() {
        let doc_id = String::from_utf8(r.expect(TAG_DOC_ID).map_err(bad)?.to_vec())
            .map_err(|_| corrupt("doc id is not UTF-8"))?;
        let d_prime = Ciphertext::from_bytes(r.expect(TAG_D_PRIME).map_err(bad)?).map_err(bad)?;
        let wrap_key_b = KeyMaterial::from_slice(r.expect(TAG_WRAP_KEY_B).map_err(bad)?)
            .map_err(|_| corrupt("empty wrap key"))?;
        let s1 = Ciphertext::from_bytes(r.expect(TAG_S1).map_err(bad)?).map_err(bad)?;
        let ts = r.expect(TAG_CREATED_AT).map_err(bad)?;
        let created_at = u64::from_be_bytes(ts.try_into().map_err(|_| corrupt("bad timestamp"))?);
        out.push(DocumentRecord {
            doc_id,
            d_prime,
            wrap_key_b,
            s1,
            created_at,
        });
    }
    Ok(out)
}

/// Tags of each stored record, in file order, keyed by doc id.
pub(crate) fn table_tags(table: &[u8]) -> Result<Vec<(String, Vec<u8>)>, VaultError> {
    let mut r = Reader::new(table);
    let mut out: Vec<(String, Vec<u8>)> = Vec::new();
    while !r.is_empty() {
        let (tag, value) = r.item().map_err(|e| corrupt(e.to_string()))?;
        if tag == TAG_DOC_ID {
            out.push((String::from_utf8_lossy(value).into_owned(), Vec::new()));
        }
        match out.last_mut() {
            Some((_, tags)) => tags.push(tag),
            None => return Err(corrupt("record table does not start with a doc id")),
        }
    }
    Ok(out)
}

pub(crate) fn seal(
    header: &Header,
    keys: &StoreKeys,
    table: &[u8],
    nonce: [u8; NONCE_LEN],
) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + NONCE_LEN + 4 + table.len() + MAC_LEN);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&header.salt);
    out.push(KDF_PBKDF2_SHA256);
    out.extend_from_slice(&header.kdf.iterations.to_be_bytes());
    out.extend_from_slice(&keys.password_check());
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&(table.len() as u32).to_be_bytes());
    let body_start = out.len();
    out.extend_from_slice(table);
    ChaCha20::new(keys.enc.as_ref().into(), &nonce.into()).apply_keystream(&mut out[body_start..]);
    let mut m = keys.mac();
    m.update(&out);
    out.extend_from_slice(&m.finalize().into_bytes());
    out
}

/// Verifies the tag and returns the decrypted record table.
pub(crate) fn open_table(bytes: &[u8], keys: &StoreKeys) -> Result<Zeroizing<Vec<u8>>, VaultError> {
    if bytes.len() < HEADER_LEN + NONCE_LEN + 4 + MAC_LEN {
        return Err(corrupt("file truncated"));
    }
    let (signed, tag) = bytes.split_at(bytes.len() - MAC_LEN);
    let mut m = keys.mac();
    m.update(signed);
    m.verify_slice(tag)
        .map_err(|_| corrupt("integrity tag mismatch"))?;
    let nonce: [u8; NONCE_LEN] = signed[HEADER_LEN..HEADER_LEN + NONCE_LEN]
        .try_into()
        .unwrap();
    let len_at = HEADER_LEN + NONCE_LEN;
    let len = u32::from_be_bytes(signed[len_at..len_at + 4].try_into().unwrap()) as usize;
    let body = &signed[len_at + 4..];
    if body.len() != len {
        return Err(corrupt("table length mismatch"));
    }
    let mut table = Zeroizing::new(body.to_vec());
    ChaCha20::new(keys.enc.as_ref().into(), &nonce.into()).apply_keystream(&mut table);
    Ok(table)
}

/// Replaces `path` atomically with `bytes`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), VaultError> {
    let tmp = path.with_extension("tmp");
    let result = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        crate::token_store::log::sync_parent(path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(VaultError::Io)
}
