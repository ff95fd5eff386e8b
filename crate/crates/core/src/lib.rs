//! Split-key vault.
//!
//! Document and call keys are split into two XOR halves, each half is wrapped
//! under a second cipher, and the wrapped halves and wrapping keys are spread
//! over the phone and a token so that neither device can decrypt anything on
//! its own.

pub mod call_keysets;
pub mod cipher_suite;
pub mod cli;
pub mod document_vault;
pub mod keygen_audit;
pub mod secret_split;
pub mod tlv;
pub mod token_store;

pub use secret_split::{combine, split, KeyMaterial, RandomSource, SplitError, SplitPair};
