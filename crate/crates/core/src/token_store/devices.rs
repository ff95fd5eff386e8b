//! Enterprise-mode device registry.
//!
//! Kept as an append-only text log next to the record log, one
//! `enroll <id>` or `revoke <id>` line per event, last event wins. The file is
//! the admin channel: `token revoke` appends to it from another process and a
//! running server picks the change up on the next frame it handles.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceStatus {
    Active,
    Revoked,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceRegistryEntry {
    pub device_id: String,
    pub status: DeviceStatus,
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("unknown device {0:?}")]
    UnknownDevice(String),
    #[error("invalid device id {0:?}")]
    InvalidDeviceId(String),
    #[error("device registry {path} is corrupt at line {line}")]
    Corrupt { path: PathBuf, line: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Device ids are 1 to 64 printable ASCII characters without whitespace.
pub fn valid_device_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_graphic())
}

#[derive(Debug)]
pub struct DeviceRegistry {
    path: PathBuf,
    devices: BTreeMap<String, DeviceStatus>,
    /// File length at the last load; the log only grows.
    seen_len: u64,
}

impl DeviceRegistry {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, RegistryError> {
        let mut reg = Self {
            path: path.as_ref().to_path_buf(),
            devices: BTreeMap::new(),
            seen_len: u64::MAX,
        };
        reg.refresh()?;
        Ok(reg)
    }

    /// Reloads the log if another process appended to it.
    pub fn refresh(&mut self) -> Result<(), RegistryError> {
        let len = match fs::metadata(&self.path) {
            Ok(m) => m.len(),
            Err(e) if e.kind() == io::ErrorKind::NotFound => 0,
            Err(e) => return Err(e.into()),
        };
        if len == self.seen_len {
            return Ok(());
        }
        let text = match fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(e.into()),
        };
        let mut devices = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let corrupt = || RegistryError::Corrupt {
                path: self.path.clone(),
                line: i + 1,
            };
            let (verb, id) = line.split_once(' ').ok_or_else(corrupt)?;
            let status = match verb {
                "enroll" => DeviceStatus::Active,
                "revoke" => DeviceStatus::Revoked,
                _ => return Err(corrupt()),
            };
            if !valid_device_id(id) {
                return Err(corrupt());
            }
            devices.insert(id.to_string(), status);
        }
        self.devices = devices;
        self.seen_len = text.len() as u64;
        Ok(())
    }

    pub fn status(&self, device_id: &str) -> Option<DeviceStatus> {
        self.devices.get(device_id).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = DeviceRegistryEntry> + '_ {
        self.devices
            .iter()
            .map(|(id, &status)| DeviceRegistryEntry {
                device_id: id.clone(),
                status,
            })
    }

    /// Enrolls a new device or re-enrolls a revoked one.
    pub fn enroll(&mut self, device_id: &str) -> Result<(), RegistryError> {
        if !valid_device_id(device_id) {
            return Err(RegistryError::InvalidDeviceId(device_id.to_string()));
        }
        self.append("enroll", device_id)?;
        self.devices
            .insert(device_id.to_string(), DeviceStatus::Active);
        Ok(())
    }

    pub fn revoke(&mut self, device_id: &str) -> Result<(), RegistryError> {
        self.refresh()?;
        if !self.devices.contains_key(device_id) {
            return Err(RegistryError::UnknownDevice(device_id.to_string()));
        }
        self.append("revoke", device_id)?;
        self.devices
            .insert(device_id.to_string(), DeviceStatus::Revoked);
        Ok(())
    }

    fn append(&mut self, verb: &str, id: &str) -> Result<(), RegistryError> {
        let line = format!("{verb} {id}\n");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)?;
        // One write call so concurrent appenders cannot interleave a line.
        f.write_all(line.as_bytes())?;
        f.sync_data()?;
        // Force a reload next time so appends by others are not skipped.
        self.seen_len = u64::MAX;
        Ok(())
    }
}
