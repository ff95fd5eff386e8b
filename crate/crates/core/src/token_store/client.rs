use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use thiserror::Error;
use zeroize::Zeroizing;

use super::frame::{decode_blob, decode_key_list, Frame, FrameError, Request, Response};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenError {
    #[error("token unreachable: {0}")]
    Unreachable(String),
    #[error("not found")]
    NotFound,
    #[error("denied by token")]
    Denied,
    #[error("token error: {0}")]
    Server(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl From<FrameError> for TokenError {
    fn from(e: FrameError) -> Self {
        match e {
            FrameError::Io(io) => TokenError::Unreachable(io.to_string()),
            other => TokenError::Protocol(other.to_string()),
        }
    }
}

/// The off-phone half of the key placement: anything that can hold opaque
/// blobs by key id.
pub trait TokenStore {
    fn put(&mut self, key_id: &[u8], blob: &[u8], overwrite: bool) -> Result<(), TokenError>;
    fn get(&mut self, key_id: &[u8]) -> Result<Zeroizing<Vec<u8>>, TokenError>;
    fn delete(&mut self, key_id: &[u8]) -> Result<(), TokenError>;
    fn list(&mut self) -> Result<Vec<Vec<u8>>, TokenError>;
}

impl<T: TokenStore + ?Sized> TokenStore for &mut T {
    fn put(&mut self, key_id: &[u8], blob: &[u8], overwrite: bool) -> Result<(), TokenError> {
        (**self).put(key_id, blob, overwrite)
    }
    fn get(&mut self, key_id: &[u8]) -> Result<Zeroizing<Vec<u8>>, TokenError> {
        (**self).get(key_id)
    }
    fn delete(&mut self, key_id: &[u8]) -> Result<(), TokenError> {
        (**self).delete(key_id)
    }
    fn list(&mut self) -> Result<Vec<Vec<u8>>, TokenError> {
        (**self).list()
    }
}

const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
const IO_TIMEOUT: Duration = Duration::from_secs(30);

/// Client for a networked token service.
pub struct TokenClient {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl TokenClient {
    /// Connects and, when `device_id` is given, identifies with HELLO.
    pub fn connect(addr: impl ToSocketAddrs, device_id: Option<&str>) -> Result<Self, TokenError> {
        let unreachable = |e: std::io::Error| TokenError::Unreachable(e.to_string());
        let mut last = TokenError::Unreachable("address resolved to nothing".into());
        let mut stream = None;
        for a in addr.to_socket_addrs().map_err(unreachable)? {
            match TcpStream::connect_timeout(&a, CONNECT_TIMEOUT) {
                Ok(s) => {
                    stream = Some(s);
                    break;
                }
                Err(e) => last = unreachable(e),
            }
        }
        let stream = stream.ok_or(last)?;
        stream.set_nodelay(true).map_err(unreachable)?;
        stream
            .set_read_timeout(Some(IO_TIMEOUT))
            .map_err(unreachable)?;
        stream
            .set_write_timeout(Some(IO_TIMEOUT))
            .map_err(unreachable)?;
        let mut client = Self {
            reader: BufReader::new(stream.try_clone().map_err(unreachable)?),
            writer: BufWriter::new(stream),
        };
        if let Some(id) = device_id {
            client.expect_ok(Request::Hello {
                device_id: id.to_string(),
            })?;
        }
        Ok(client)
    }

    fn call(&mut self, req: Request) -> Result<Response, TokenError> {
        req.to_frame()?.write_to(&mut self.writer)?;
        match Frame::read_from(&mut self.reader)? {
            Some(f) => Ok(Response::from_frame(f)?),
            None => Err(TokenError::Unreachable("connection closed".into())),
        }
    }

    fn expect_ok(&mut self, req: Request) -> Result<Vec<u8>, TokenError> {
        match self.call(req)? {
            Response::Ok(body) => Ok(body),
            Response::NotFound => Err(TokenError::NotFound),
            Response::Denied => Err(TokenError::Denied),
            Response::Err(msg) => Err(TokenError::Server(msg)),
        }
    }
}

impl TokenStore for TokenClient {
    fn put(&mut self, key_id: &[u8], blob: &[u8], overwrite: bool) -> Result<(), TokenError> {
        self.expect_ok(Request::Put {
            key_id: key_id.to_vec(),
            blob: blob.to_vec(),
            overwrite,
        })
        .map(drop)
    }

    fn get(&mut self, key_id: &[u8]) -> Result<Zeroizing<Vec<u8>>, TokenError> {
        let body = Zeroizing::new(self.expect_ok(Request::Get {
            key_id: key_id.to_vec(),
        })?);
        Ok(Zeroizing::new(decode_blob(&body)?))
    }

    fn delete(&mut self, key_id: &[u8]) -> Result<(), TokenError> {
        self.expect_ok(Request::Delete {
            key_id: key_id.to_vec(),
        })
        .map(drop)
    }

    fn list(&mut self) -> Result<Vec<Vec<u8>>, TokenError> {
        Ok(decode_key_list(&self.expect_ok(Request::List)?)?)
    }
}

/// In-process token, for loopback simulations and tests. Can be switched
/// offline or into the revoked state.
#[derive(Debug, Default, Clone)]
pub struct MemoryToken {
    records: BTreeMap<Vec<u8>, Vec<u8>>,
    offline: bool,
    revoked: bool,
}

impl MemoryToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_online(&mut self, online: bool) {
        self.offline = !online;
    }

    pub fn set_revoked(&mut self, revoked: bool) {
        self.revoked = revoked;
    }

    /// Direct view of the stored records, bypassing the online/revoked state.
    pub fn records(&self) -> &BTreeMap<Vec<u8>, Vec<u8>> {
        &self.records
    }

    fn check(&self) -> Result<(), TokenError> {
        if self.offline {
            return Err(TokenError::Unreachable("token offline".into()));
        }
        if self.revoked {
            return Err(TokenError::Denied);
        }
        Ok(())
    }
}

impl TokenStore for MemoryToken {
    fn put(&mut self, key_id: &[u8], blob: &[u8], overwrite: bool) -> Result<(), TokenError> {
        self.check()?;
        if !overwrite && self.records.contains_key(key_id) {
            return Err(TokenError::Server("key id already exists".into()));
        }
        self.records.insert(key_id.to_vec(), blob.to_vec());
        Ok(())
    }

    fn get(&mut self, key_id: &[u8]) -> Result<Zeroizing<Vec<u8>>, TokenError> {
        self.check()?;
        self.records
            .get(key_id)
            .map(|b| Zeroizing::new(b.clone()))
            .ok_or(TokenError::NotFound)
    }

    fn delete(&mut self, key_id: &[u8]) -> Result<(), TokenError> {
        self.check()?;
        match self.records.remove(key_id) {
            Some(mut b) => {
                zeroize::Zeroize::zeroize(&mut b);
                Ok(())
            }
            None => Err(TokenError::NotFound),
        }
    }

    fn list(&mut self) -> Result<Vec<Vec<u8>>, TokenError> {
        self.check()?;
        Ok(self.records.keys().cloned().collect())
    }
}
