//! The off-phone key holder: a wristband or an enterprise server, modelled as
//! a key-value service over a framed TCP protocol.
//!
//! The service stores opaque blobs. It cannot tell a wrapping key from a
//! wrapped key half, and nothing it holds is useful without the phone.

mod client;
pub mod devices;
pub mod frame;
pub mod log;
mod server;

pub use client::{MemoryToken, TokenClient, TokenError, TokenStore};
pub use devices::{DeviceRegistry, DeviceRegistryEntry, DeviceStatus, RegistryError};
pub use frame::{Frame, FrameError, Request, Response, MAX_FRAME, MAX_KEY_ID};
pub use server::{
    enroll, revoke, serve, Mode, ServeError, TokenServer, DEVICES_FILE, RECORDS_FILE,
};
