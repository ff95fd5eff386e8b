//! Durable blob storage for the token service.
//!
//! An append-only log of TLV entries after a 5-byte header (`SVTK`, version).
//! PUT entries carry the key id and blob, DELETE entries the key id. Replaying
//! the log rebuilds the live map. Every append is flushed to disk before the
//! call returns. Superseded and deleted blobs are overwritten with zeros in
//! place, and the log is rewritten without them once dead entries outnumber
//! live ones.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tlv::{self, Reader};

const MAGIC: &[u8; 4] = b"SVTK";
const VERSION: u8 = 1;
const HEADER_LEN: u64 = 5;

const TAG_PUT: u8 = 0x21;
const TAG_DELETE: u8 = 0x22;

/// Compaction kicks in only past this many dead entries.
const COMPACT_MIN_DEAD: usize = 256;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store file {path} is corrupt: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    /// File offset of the blob bytes.
    offset: u64,
    len: usize,
}

pub struct LogStore {
    path: PathBuf,
    file: File,
    live: HashMap<Vec<u8>, Slot>,
    dead: usize,
    end: u64,
}

impl LogStore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let corrupt = |reason: String| StoreError::Corrupt {
            path: path.clone(),
            reason,
        };

        if bytes.is_empty() {
            file.write_all(MAGIC)?;
            file.write_all(&[VERSION])?;
            file.sync_all()?;
            sync_parent(&path)?;
            bytes.extend_from_slice(MAGIC);
            bytes.push(VERSION);
        }
        if bytes.len() < HEADER_LEN as usize || &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(corrupt(format!("unsupported version {}", bytes[4])));
        }

        let mut live = HashMap::new();
        let mut dead = 0;
        let body = &bytes[HEADER_LEN as usize..];
        let mut r = Reader::new(body);
        let mut good_end = 0usize;
        while !r.is_empty() {
            let start = r.position();
            let (tag, value) = match r.item() {
                Ok(item) => item,
                // A torn final append: drop it, the client never got an OK.
                Err(_) => break,
            };
            let value_offset = HEADER_LEN as usize + start + 5;
            let mut v = Reader::new(value);
            let parsed: Result<(), tlv::TlvError> = (|| {
                let key_len = v.u16()? as usize;
                let key = v.take(key_len)?.to_vec();
                match tag {
                    TAG_PUT => {
                        let blob_len = v.u32()? as usize;
                        v.take(blob_len)?;
                        let offset = (value_offset + 2 + key_len + 4) as u64;
                        if live
                            .insert(
                                key,
                                Slot {
                                    offset,
                                    len: blob_len,
                                },
                            )
                            .is_some()
                        {
                            dead += 1;
                        }
                    }
                    TAG_DELETE => {
                        if live.remove(&key).is_some() {
                            dead += 1;
                        }
                        dead += 1;
                    }
                    other => {
                        return Err(tlv::TlvError::UnexpectedTag {
                            found: other,
                            wanted: TAG_PUT,
                        })
                    }
                }
                Ok(())
            })();
            parsed.map_err(|e| corrupt(format!("entry at offset {start}: {e}")))?;
            good_end = r.position();
        }
        let end = HEADER_LEN + good_end as u64;
        if end < bytes.len() as u64 {
            file.set_len(end)?;
            file.sync_all()?;
        }
        let mut store = Self {
            path,
            file,
            live,
            dead,
            end,
        };
        store.maybe_compact()?;
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live.is_empty()
    }

    pub fn contains(&self, key: &[u8]) -> bool {
        self.live.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &[u8]> {
        self.live.keys().map(Vec::as_slice)
    }

    pub fn get(&mut self, key: &[u8]) -> Result<Option<Vec<u8>>, StoreError> {
        let Some(slot) = self.live.get(key).copied() else {
            return Ok(None);
        };
        let mut buf = vec![0u8; slot.len];
        read_at(&mut self.file, slot.offset, &mut buf)?;
        Ok(Some(buf))
    }

    /// Stores `blob` under `key`; returns once the entry is on disk.
    pub fn put(&mut self, key: &[u8], blob: &[u8]) -> Result<(), StoreError> {
        let mut value = Vec::with_capacity(2 + key.len() + 4 + blob.len());
        value.extend_from_slice(&(key.len() as u16).to_be_bytes());
        value.extend_from_slice(key);
        value.extend_from_slice(&(blob.len() as u32).to_be_bytes());
        value.extend_from_slice(blob);
        let value_offset = self.append(TAG_PUT, &value)?;
        let slot = Slot {
            offset: value_offset + 2 + key.len() as u64 + 4,
            len: blob.len(),
        };
        if let Some(old) = self.live.insert(key.to_vec(), slot) {
            self.dead += 1;
            self.scrub(old)?;
        }
        self.maybe_compact()
    }

    /// Removes `key`. Returns false if it was not present.
    pub fn delete(&mut self, key: &[u8]) -> Result<bool, StoreError> {
        let Some(old) = self.live.get(key).copied() else {
            return Ok(false);
        };
        let mut value = Vec::with_capacity(2 + key.len());
        value.extend_from_slice(&(key.len() as u16).to_be_bytes());
        value.extend_from_slice(key);
        self.append(TAG_DELETE, &value)?;
        self.live.remove(key);
        self.dead += 2;
        self.scrub(old)?;
        self.maybe_compact()?;
        Ok(true)
    }

    fn append(&mut self, tag: u8, value: &[u8]) -> Result<u64, StoreError> {
        let mut entry = Vec::with_capacity(5 + value.len());
        tlv::put(&mut entry, tag, value);
        self.file.seek(SeekFrom::Start(self.end))?;
        if let Err(e) = self
            .file
            .write_all(&entry)
            .and_then(|_| self.file.sync_data())
        {
            // Leave no torn entry behind for the next append to follow.
            let _ = self.file.set_len(self.end);
            return Err(e.into());
        }
        let value_offset = self.end + 5;
        self.end += entry.len() as u64;
        Ok(value_offset)
    }

    /// Best-effort overwrite of a superseded blob.
    fn scrub(&mut self, slot: Slot) -> Result<(), StoreError> {
        if slot.len == 0 {
            return Ok(());
        }
        self.file.seek(SeekFrom::Start(slot.offset))?;
        self.file.write_all(&vec![0u8; slot.len])?;
        self.file.sync_data()?;
        Ok(())
    }

    fn maybe_compact(&mut self) -> Result<(), StoreError> {
        if self.dead >= COMPACT_MIN_DEAD && self.dead > self.live.len() {
            self.compact()?;
        }
        Ok(())
    }

    /// Rewrites the log with only the live entries.
    pub fn compact(&mut self) -> Result<(), StoreError> {
        let tmp = self.path.with_extension("compact");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        let mut keys: Vec<_> = self.live.keys().cloned().collect();
        keys.sort();
        let mut live = HashMap::with_capacity(keys.len());
        for key in keys {
            let blob = self.get(&key)?.expect("live key");
            let mut value = Vec::with_capacity(6 + key.len() + blob.len());
            value.extend_from_slice(&(key.len() as u16).to_be_bytes());
            value.extend_from_slice(&key);
            value.extend_from_slice(&(blob.len() as u32).to_be_bytes());
            value.extend_from_slice(&blob);
            let offset = (out.len() + 5 + 2 + key.len() + 4) as u64;
            tlv::put(&mut out, TAG_PUT, &value);
            live.insert(
                key,
                Slot {
                    offset,
                    len: blob.len(),
                },
            );
        }
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&out)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &self.path)?;
        sync_parent(&self.path)?;
        // The old file's dead blobs were already scrubbed.
        self.file = OpenOptions::new().read(true).write(true).open(&self.path)?;
        self.live = live;
        self.dead = 0;
        self.end = out.len() as u64;
        Ok(())
    }
}

fn read_at(file: &mut File, offset: u64, buf: &mut [u8]) -> io::Result<()> {
    file.seek(SeekFrom::Start(offset))?;
    file.read_exact(buf)
}

pub(crate) fn sync_parent(path: &Path) -> io::Result<()> {
    #[cfg(unix)]
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        File::open(dir)?.sync_all()?;
    }
    #[cfg(not(unix))]
    let _ = path;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.log");
        {
            let mut s = LogStore::open(&path).unwrap();
            s.put(b"a", b"one").unwrap();
            s.put(b"b", b"").unwrap();
            s.put(b"a", b"two").unwrap();
            s.put(b"c", b"three").unwrap();
            assert!(s.delete(b"c").unwrap());
            assert!(!s.delete(b"c").unwrap());
        }
        let mut s = LogStore::open(&path).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.get(b"a").unwrap().unwrap(), b"two");
        assert_eq!(s.get(b"b").unwrap().unwrap(), b"");
        assert_eq!(s.get(b"c").unwrap(), None);
    }

    #[test]
    fn deleted_blob_bytes_are_scrubbed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.log");
        let mut s = LogStore::open(&path).unwrap();
        s.put(b"k", b"SECRETSECRET").unwrap();
        s.delete(b"k").unwrap();
        let raw = fs::read(&path).unwrap();
        assert!(!raw.windows(12).any(|w| w == b"SECRETSECRET"));
    }

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.log");
        {
            let mut s = LogStore::open(&path).unwrap();
            s.put(b"a", b"1").unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(&[TAG_PUT, 0, 0, 0, 50, 0]).unwrap();
        drop(f);
        let mut s = LogStore::open(&path).unwrap();
        assert_eq!(s.get(b"a").unwrap().unwrap(), b"1");
        s.put(b"b", b"2").unwrap();
        drop(s);
        let mut s = LogStore::open(&path).unwrap();
        assert_eq!(s.get(b"b").unwrap().unwrap(), b"2");
    }

    #[test]
    fn bad_magic_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.log");
        fs::write(&path, b"NOPE\x01").unwrap();
        assert!(matches!(
            LogStore::open(&path),
            Err(StoreError::Corrupt { .. })
        ));
    }

    #[test]
    fn compaction_keeps_live_set() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.log");
        let mut s = LogStore::open(&path).unwrap();
        for i in 0..600u32 {
            s.put(&(i % 10).to_be_bytes(), &i.to_be_bytes()).unwrap();
        }
        let size = fs::metadata(&path).unwrap().len();
        assert!(size < 600 * 15, "log was never compacted ({size} bytes)");
        drop(s);
        let mut s = LogStore::open(&path).unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!(
            s.get(&9u32.to_be_bytes()).unwrap().unwrap(),
            599u32.to_be_bytes()
        );
    }
}
