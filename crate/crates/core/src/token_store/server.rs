use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{self, BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use thiserror::Error;

use super::devices::{valid_device_id, DeviceRegistry, DeviceStatus, RegistryError};
use super::frame::{encode_blob, encode_key_list, Frame, FrameError, Request, Response, OP_HELLO};
use super::log::{LogStore, StoreError};

pub const RECORDS_FILE: &str = "records.log";
pub const DEVICES_FILE: &str = "devices.log";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Personal token: no device registry, no HELLO required.
    Wristband,
    /// Enterprise server: HELLO(device_id) first, per-device key space,
    /// revocation honored on every frame.
    Enterprise,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wristband" => Ok(Mode::Wristband),
            "enterprise" => Ok(Mode::Enterprise),
            other => Err(format!("unknown mode {other:?} (wristband|enterprise)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Wristband => "wristband",
            Mode::Enterprise => "enterprise",
        })
    }
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: String, source: io::Error },
    #[error(transparent)]
    StoreCorrupt(#[from] StoreError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("store directory {0}: {1}")]
    StoreDir(PathBuf, io::Error),
}

/// Revokes `device_id` in the registry kept in `store_dir`. This is the
/// local admin channel; it never goes over the wire.
pub fn revoke(store_dir: impl AsRef<Path>, device_id: &str) -> Result<(), RegistryError> {
    DeviceRegistry::open(store_dir.as_ref().join(DEVICES_FILE))?.revoke(device_id)
}

/// Enrolls (or re-enrolls after revocation) `device_id`.
pub fn enroll(store_dir: impl AsRef<Path>, device_id: &str) -> Result<(), RegistryError> {
    DeviceRegistry::open(store_dir.as_ref().join(DEVICES_FILE))?.enroll(device_id)
}

struct Shared {
    mode: Mode,
    store: Mutex<LogStore>,
    devices: Option<Mutex<DeviceRegistry>>,
}

impl Shared {
    fn dispatch(&self, device: &mut Option<String>, frame: &Frame) -> Response {
        if self.mode == Mode::Enterprise && device.is_none() && frame.opcode != OP_HELLO {
            return Response::Denied;
        }
        let req = match Request::from_frame(frame) {
            Ok(r) => r,
            Err(e) => return Response::Err(e.to_string()),
        };
        if let Request::Hello { device_id } = &req {
            return self.hello(device, device_id);
        }
        let namespace = match (self.mode, device.as_deref()) {
            (Mode::Enterprise, Some(dev)) => match self.status(dev) {
                Ok(Some(DeviceStatus::Active)) => Some(dev),
                Ok(_) => return Response::Denied,
                Err(e) => return Response::Err(e.to_string()),
            },
            _ => None,
        };
        match self.apply(namespace, req) {
            Ok(resp) => resp,
            Err(e) => Response::Err(e.to_string()),
        }
    }

    fn status(&self, device_id: &str) -> Result<Option<DeviceStatus>, RegistryError> {
        let mut reg = self
            .devices
            .as_ref()
            .expect("enterprise mode")
            .lock()
            .unwrap();
        reg.refresh()?;
        Ok(reg.status(device_id))
    }

    fn hello(&self, session: &mut Option<String>, device_id: &str) -> Response {
        if self.mode == Mode::Wristband {
            return Response::Ok(Vec::new());
        }
        if !valid_device_id(device_id) {
            return Response::Err(format!("invalid device id {device_id:?}"));
        }
        if session.as_deref().is_some_and(|d| d != device_id) {
            return Response::Err("connection already identified".into());
        }
        let mut reg = self
            .devices
            .as_ref()
            .expect("enterprise mode")
            .lock()
            .unwrap();
        if let Err(e) = reg.refresh() {
            return Response::Err(e.to_string());
        }
        match reg.status(device_id) {
            Some(DeviceStatus::Revoked) => return Response::Denied,
            Some(DeviceStatus::Active) => {}
            None => {
                if let Err(e) = reg.enroll(device_id) {
                    return Response::Err(e.to_string());
                }
            }
        }
        *session = Some(device_id.to_string());
        Response::Ok(Vec::new())
    }

    fn apply(&self, namespace: Option<&str>, req: Request) -> Result<Response, ServerFault> {
        let scoped = |key: &[u8]| -> Vec<u8> {
            match namespace {
                Some(dev) => [dev.as_bytes(), &[0], key].concat(),
                None => key.to_vec(),
            }
        };
        let mut store = self.store.lock().unwrap();
        Ok(match req {
            Request::Hello { .. } => unreachable!("handled before"),
            Request::Put {
                key_id,
                blob,
                overwrite,
            } => {
                let key = scoped(&key_id);
                if !overwrite && store.contains(&key) {
                    Response::Err("key id already exists".into())
                } else {
                    store.put(&key, &blob)?;
                    Response::Ok(Vec::new())
                }
            }
            Request::Get { key_id } => match store.get(&scoped(&key_id))? {
                Some(blob) => Response::Ok(encode_blob(&blob)),
                None => Response::NotFound,
            },
            Request::Delete { key_id } => {
                if store.delete(&scoped(&key_id))? {
                    Response::Ok(Vec::new())
                } else {
                    Response::NotFound
                }
            }
            Request::List => {
                let prefix = namespace.map(|d| [d.as_bytes(), &[0]].concat());
                let mut keys: Vec<Vec<u8>> = store
                    .keys()
                    .filter_map(|k| match &prefix {
                        Some(p) => k.strip_prefix(p.as_slice()).map(<[u8]>::to_vec),
                        None => Some(k.to_vec()),
                    })
                    .collect();
                keys.sort();
                Response::Ok(encode_key_list(&keys)?)
            }
        })
    }
}

#[derive(Debug, Error)]
enum ServerFault {
    #[error("storage failure: {0}")]
    Store(#[from] StoreError),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

/// A running token service. Dropping it shuts the service down.
pub struct TokenServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    conns: Arc<Mutex<HashMap<u64, TcpStream>>>,
    workers: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

impl TokenServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop exits.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let mut wake = self.addr;
        if wake.ip().is_unspecified() {
            wake.set_ip(if wake.is_ipv4() {
                [127, 0, 0, 1].into()
            } else {
                std::net::Ipv6Addr::LOCALHOST.into()
            });
        }
        let _ = TcpStream::connect(wake);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        for (_, s) in self.conns.lock().unwrap().drain() {
            let _ = s.shutdown(Shutdown::Both);
        }
        let workers: Vec<_> = self.workers.lock().unwrap().drain(..).collect();
        for w in workers {
            let _ = w.join();
        }
    }
}

impl Drop for TokenServer {
    fn drop(&mut self) {
        self.stop_now();
    }
}

/// Binds `bind` and starts serving the store in `store_dir` on background
/// threads, one per connection.
pub fn serve(
    bind: impl ToSocketAddrs + fmt::Display,
    mode: Mode,
    store_dir: impl AsRef<Path>,
) -> Result<TokenServer, ServeError> {
    let dir = store_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| ServeError::StoreDir(dir.to_path_buf(), e))?;
    let store = LogStore::open(dir.join(RECORDS_FILE))?;
    let devices = match mode {
        Mode::Enterprise => Some(Mutex::new(DeviceRegistry::open(dir.join(DEVICES_FILE))?)),
        Mode::Wristband => None,
    };
    let listener = TcpListener::bind(&bind).map_err(|source| ServeError::BindFailure {
        addr: bind.to_string(),
        source,
    })?;
    let addr = listener
        .local_addr()
        .map_err(|source| ServeError::BindFailure {
            addr: bind.to_string(),
            source,
        })?;

    let shared = Arc::new(Shared {
        mode,
        store: Mutex::new(store),
        devices,
    });
    let stop = Arc::new(AtomicBool::new(false));
    let conns: Arc<Mutex<HashMap<u64, TcpStream>>> = Arc::default();
    let workers: Arc<Mutex<Vec<JoinHandle<()>>>> = Arc::default();

    let accept = {
        let stop = stop.clone();
        let conns = conns.clone();
        let workers = workers.clone();
        thread::Builder::new()
            .name("token-accept".into())
            .spawn(move || {
                let next_id = AtomicU64::new(0);
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let id = next_id.fetch_add(1, Ordering::Relaxed);
                    if let Ok(clone) = stream.try_clone() {
                        conns.lock().unwrap().insert(id, clone);
                    }
                    let shared = shared.clone();
                    let conns = conns.clone();
                    let handle = thread::spawn(move || {
                        handle_connection(&shared, stream);
                        conns.lock().unwrap().remove(&id);
                    });
                    let mut ws = workers.lock().unwrap();
                    ws.retain(|h| !h.is_finished());
                    ws.push(handle);
                }
            })
            .expect("spawn accept thread")
    };

    Ok(TokenServer {
        addr,
        stop,
        accept: Some(accept),
        conns,
        workers,
    })
}

fn handle_connection(shared: &Shared, stream: TcpStream) {
    let _ = stream.set_nodelay(true);
    let Ok(read_half) = stream.try_clone() else {
        return;
    };
    let mut reader = BufReader::new(read_half);
    let mut writer = BufWriter::new(stream);
    let mut device = None;
    loop {
        let frame = match Frame::read_from(&mut reader) {
            Ok(Some(f)) => f,
            Ok(None) | Err(FrameError::Io(_)) => break,
            Err(e) => {
                // Cannot resynchronize after a bad length prefix.
                let _ = Response::Err(e.to_string())
                    .to_frame()
                    .write_to(&mut writer);
                break;
            }
        };
        let resp = shared.dispatch(&mut device, &frame);
        if resp.to_frame().write_to(&mut writer).is_err() {
            break;
        }
    }
}
