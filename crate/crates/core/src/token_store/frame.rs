//! Wire format of the token protocol.
//!
//! Every message is one frame: a 4-byte big-endian length covering the opcode
//! and payload, a 1-byte opcode, then the payload. Key ids travel as a 2-byte
//! big-endian length plus bytes, blobs as a 4-byte big-endian length plus
//! bytes.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::tlv::Reader;

/// Largest permitted value of the length field (opcode + payload).
pub const MAX_FRAME: usize = 1 << 20;
pub const MAX_KEY_ID: usize = 256;

pub const OP_HELLO: u8 = 0x00;
pub const OP_PUT: u8 = 0x01;
pub const OP_GET: u8 = 0x02;
pub const OP_DELETE: u8 = 0x03;
pub const OP_LIST: u8 = 0x04;

pub const RESP_OK: u8 = 0x80;
pub const RESP_NOT_FOUND: u8 = 0x81;
pub const RESP_DENIED: u8 = 0x82;
pub const RESP_ERR: u8 = 0x83;

/// Flag byte that may follow a PUT's blob.
pub const PUT_OVERWRITE: u8 = 0x01;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame length {0} exceeds the {MAX_FRAME}-byte limit")]
    TooLarge(usize),
    #[error("zero-length frame has no opcode")]
    Empty,
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("unknown opcode {0:#04x}")]
    UnknownOpcode(u8),
    #[error("key id longer than {MAX_KEY_ID} bytes")]
    KeyIdTooLong,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub opcode: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(opcode: u8, payload: Vec<u8>) -> Self {
        Self { opcode, payload }
    }

    pub fn encode(&self) -> Result<Vec<u8>, FrameError> {
        let len = 1 + self.payload.len();
        if len > MAX_FRAME {
            return Err(FrameError::TooLarge(len));
        }
        let mut out = Vec::with_capacity(4 + len);
        out.extend_from_slice(&(len as u32).to_be_bytes());
        out.push(self.opcode);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    /// Decodes one frame from the front of `buf`. Returns `Ok(None)` when
    /// `buf` does not yet hold a whole frame, otherwise the frame and the
    /// number of bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<Option<(Frame, usize)>, FrameError> {
        if buf.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
        check_len(len)?;
        if buf.len() < 4 + len {
            return Ok(None);
        }
        let frame = Frame {
            opcode: buf[4],
            payload: buf[5..4 + len].to_vec(),
        };
        Ok(Some((frame, 4 + len)))
    }

    /// Reads one frame. `Ok(None)` on a clean end of stream before any byte
    /// of a new frame.
    pub fn read_from(r: &mut impl Read) -> Result<Option<Frame>, FrameError> {
        let mut header = [0u8; 4];
        let mut got = 0;
        while got < 4 {
            match r.read(&mut header[got..]) {
                Ok(0) if got == 0 => return Ok(None),
                Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
                Ok(n) => got += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        let len = u32::from_be_bytes(header) as usize;
        check_len(len)?;
        let mut body = vec![0u8; len];
        r.read_exact(&mut body)?;
        let opcode = body.remove(0);
        Ok(Some(Frame {
            opcode,
            payload: body,
        }))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), FrameError> {
        w.write_all(&self.encode()?)?;
        w.flush()?;
        Ok(())
    }
}

fn check_len(len: usize) -> Result<(), FrameError> {
    if len == 0 {
        return Err(FrameError::Empty);
    }
    if len > MAX_FRAME {
        return Err(FrameError::TooLarge(len));
    }
    Ok(())
}

fn put_key_id(out: &mut Vec<u8>, key_id: &[u8]) -> Result<(), FrameError> {
    if key_id.len() > MAX_KEY_ID {
        return Err(FrameError::KeyIdTooLong);
    }
    out.extend_from_slice(&(key_id.len() as u16).to_be_bytes());
    out.extend_from_slice(key_id);
    Ok(())
}

fn put_blob(out: &mut Vec<u8>, blob: &[u8]) {
    out.extend_from_slice(&(blob.len() as u32).to_be_bytes());
    out.extend_from_slice(blob);
}

fn read_key_id(r: &mut Reader<'_>) -> Result<Vec<u8>, FrameError> {
    let len = r.u16().map_err(malformed)? as usize;
    if len > MAX_KEY_ID {
        return Err(FrameError::KeyIdTooLong);
    }
    Ok(r.take(len).map_err(malformed)?.to_vec())
}

fn read_blob(r: &mut Reader<'_>) -> Result<Vec<u8>, FrameError> {
    let len = r.u32().map_err(malformed)? as usize;
    Ok(r.take(len).map_err(malformed)?.to_vec())
}

fn malformed(e: impl std::fmt::Display) -> FrameError {
    FrameError::Malformed(e.to_string())
}

fn finish(r: &Reader<'_>) -> Result<(), FrameError> {
    if r.is_empty() {
        Ok(())
    } else {
        Err(FrameError::Malformed("trailing bytes".into()))
    }
}

/// A decoded client request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Hello {
        device_id: String,
    },
    Put {
        key_id: Vec<u8>,
        blob: Vec<u8>,
        overwrite: bool,
    },
    Get {
        key_id: Vec<u8>,
    },
    Delete {
        key_id: Vec<u8>,
    },
    List,
}

impl Request {
    pub fn to_frame(&self) -> Result<Frame, FrameError> {
        let mut p = Vec::new();
        let op = match self {
            Request::Hello { device_id } => {
                put_key_id(&mut p, device_id.as_bytes())?;
                OP_HELLO
            }
            Request::Put {
                key_id,
                blob,
                overwrite,
            } => {
                put_key_id(&mut p, key_id)?;
                put_blob(&mut p, blob);
                if *overwrite {
                    p.push(PUT_OVERWRITE);
                }
                OP_PUT
            }
            Request::Get { key_id } => {
                put_key_id(&mut p, key_id)?;
                OP_GET
            }
            Request::Delete { key_id } => {
                put_key_id(&mut p, key_id)?;
                OP_DELETE
            }
            Request::List => OP_LIST,
        };
        Ok(Frame::new(op, p))
    }

    pub fn from_frame(f: &Frame) -> Result<Self, FrameError> {
        let mut r = Reader::new(&f.payload);
        let req = match f.opcode {
            OP_HELLO => {
                let id = read_key_id(&mut r)?;
                Request::Hello {
                    device_id: String::from_utf8(id)
                        .map_err(|_| FrameError::Malformed("device id is not UTF-8".into()))?,
                }
            }
            OP_PUT => {
                let key_id = read_key_id(&mut r)?;
                let blob = read_blob(&mut r)?;
                let overwrite = match r.peek_tag() {
                    None => false,
                    Some(PUT_OVERWRITE) => {
                        r.u8().map_err(malformed)?;
                        true
                    }
                    Some(other) => {
                        return Err(FrameError::Malformed(format!("bad PUT flags {other:#04x}")))
                    }
                };
                Request::Put {
                    key_id,
                    blob,
                    overwrite,
                }
            }
            OP_GET => Request::Get {
                key_id: read_key_id(&mut r)?,
            },
            OP_DELETE => Request::Delete {
                key_id: read_key_id(&mut r)?,
            },
            OP_LIST => Request::List,
            other => return Err(FrameError::UnknownOpcode(other)),
        };
        finish(&r)?;
        Ok(req)
    }
}

/// A server response. `Ok` carries the opcode-specific body: the blob for
/// GET, the key list for LIST, nothing otherwise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Response {
    Ok(Vec<u8>),
    NotFound,
    Denied,
    Err(String),
}

impl Response {
    pub fn to_frame(&self) -> Frame {
        match self {
            Response::Ok(body) => Frame::new(RESP_OK, body.clone()),
            Response::NotFound => Frame::new(RESP_NOT_FOUND, Vec::new()),
            Response::Denied => Frame::new(RESP_DENIED, Vec::new()),
            Response::Err(msg) => Frame::new(RESP_ERR, msg.as_bytes().to_vec()),
        }
    }

    pub fn from_frame(f: Frame) -> Result<Self, FrameError> {
        Ok(match f.opcode {
            RESP_OK => Response::Ok(f.payload),
            RESP_NOT_FOUND => Response::NotFound,
            RESP_DENIED => Response::Denied,
            RESP_ERR => Response::Err(String::from_utf8_lossy(&f.payload).into_owned()),
            other => return Err(FrameError::UnknownOpcode(other)),
        })
    }
}

pub fn encode_blob(blob: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + blob.len());
    put_blob(&mut out, blob);
    out
}

pub fn decode_blob(body: &[u8]) -> Result<Vec<u8>, FrameError> {
    let mut r = Reader::new(body);
    let blob = read_blob(&mut r)?;
    finish(&r)?;
    Ok(blob)
}

pub fn encode_key_list(keys: &[Vec<u8>]) -> Result<Vec<u8>, FrameError> {
    let mut out = Vec::new();
    out.extend_from_slice(&(keys.len() as u32).to_be_bytes());
    for k in keys {
        put_key_id(&mut out, k)?;
    }
    Ok(out)
}

pub fn decode_key_list(body: &[u8]) -> Result<Vec<Vec<u8>>, FrameError> {
    let mut r = Reader::new(body);
    let n = r.u32().map_err(malformed)? as usize;
    let mut keys = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        keys.push(read_key_id(&mut r)?);
    }
    finish(&r)?;
    Ok(keys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn get_frame_bytes() {
        let f = Request::Get {
            key_id: b"ab".to_vec(),
        }
        .to_frame()
        .unwrap();
        assert_eq!(f.encode().unwrap(), [0, 0, 0, 5, 0x02, 0, 2, b'a', b'b']);
    }

    #[test]
    fn put_frame_bytes() {
        let f = Request::Put {
            key_id: b"k".to_vec(),
            blob: vec![7, 8],
            overwrite: true,
        }
        .to_frame()
        .unwrap();
        assert_eq!(
            f.encode().unwrap(),
            [0, 0, 0, 11, 0x01, 0, 1, b'k', 0, 0, 0, 2, 7, 8, 0x01]
        );
    }

    #[test]
    fn response_frames() {
        assert_eq!(
            Response::NotFound.to_frame().encode().unwrap(),
            [0, 0, 0, 1, 0x81]
        );
        assert_eq!(
            Response::Denied.to_frame().encode().unwrap(),
            [0, 0, 0, 1, 0x82]
        );
    }

    #[test]
    fn size_limits() {
        assert!(matches!(
            Frame::new(OP_PUT, vec![0; MAX_FRAME]).encode(),
            Err(FrameError::TooLarge(_))
        ));
        assert!(Frame::new(OP_PUT, vec![0; MAX_FRAME - 1]).encode().is_ok());
        let mut huge = ((MAX_FRAME + 1) as u32).to_be_bytes().to_vec();
        huge.push(0);
        assert!(matches!(Frame::decode(&huge), Err(FrameError::TooLarge(_))));
        assert!(matches!(
            Frame::decode(&[0, 0, 0, 0]),
            Err(FrameError::Empty)
        ));
        assert!(matches!(
            Request::Get {
                key_id: vec![1; 257]
            }
            .to_frame(),
            Err(FrameError::KeyIdTooLong)
        ));
    }

    #[test]
    fn partial_input() {
        let bytes = Request::List.to_frame().unwrap().encode().unwrap();
        assert!(Frame::decode(&bytes[..3]).unwrap().is_none());
        let (f, used) = Frame::decode(&bytes).unwrap().unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(f.opcode, OP_LIST);
    }

    #[test]
    fn unknown_opcode() {
        assert!(matches!(
            Request::from_frame(&Frame::new(0x42, vec![])),
            Err(FrameError::UnknownOpcode(0x42))
        ));
    }

    #[test]
    fn streaming_read() {
        let mut wire = Vec::new();
        for i in 0..3u8 {
            Frame::new(i, vec![i; i as usize])
                .write_to(&mut wire)
                .unwrap();
        }
        let mut cur = std::io::Cursor::new(wire);
        for i in 0..3u8 {
            assert_eq!(
                Frame::read_from(&mut cur).unwrap().unwrap(),
                Frame::new(i, vec![i; i as usize])
            );
        }
        assert!(Frame::read_from(&mut cur).unwrap().is_none());
    }

    fn arb_request() -> impl Strategy<Value = Request> {
        let key = proptest::collection::vec(any::<u8>(), 0..=MAX_KEY_ID);
        prop_oneof![
            "[a-z0-9-]{1,32}".prop_map(|device_id| Request::Hello { device_id }),
            (
                key.clone(),
                proptest::collection::vec(any::<u8>(), 0..2048),
                any::<bool>()
            )
                .prop_map(|(key_id, blob, overwrite)| Request::Put {
                    key_id,
                    blob,
                    overwrite
                }),
            key.clone().prop_map(|key_id| Request::Get { key_id }),
            key.prop_map(|key_id| Request::Delete { key_id }),
            Just(Request::List),
        ]
    }

    proptest! {
        #[test]
        fn request_round_trip(req in arb_request()) {
            let bytes = req.to_frame().unwrap().encode().unwrap();
            let (frame, used) = Frame::decode(&bytes).unwrap().unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(Request::from_frame(&frame).unwrap(), req);
        }

        #[test]
        fn key_list_round_trip(keys in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..64), 0..20)) {
            prop_assert_eq!(decode_key_list(&encode_key_list(&keys).unwrap()).unwrap(), keys);
        }
    }
}
