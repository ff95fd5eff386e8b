//! Two-of-two key splitting.
//!
//! A key is split into two halves of the same length: the first half is
//! uniformly random, the second is the key XORed with the first. Either
//! half alone is uniformly distributed regardless of the key, and the two
//! together restore it with another XOR.

use std::fmt;

use rand::TryRngCore;
use thiserror::Error;
use zeroize::Zeroize;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SplitError {
    #[error("key material has already been destroyed")]
    ZeroizedMaterial,
    #[error("randomness source exhausted: needed {needed} bytes")]
    RandomnessExhausted { needed: usize },
    #[error("key halves differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("key material must be at least one byte long")]
    Empty,
}

/// Source of uniformly random bytes that is allowed to fail.
///
/// Every [`TryRngCore`] is a source, so `rand::rng()`, `OsRng` and seeded
/// generators all plug in directly.
pub trait RandomSource {
    fn fill(&mut self, dest: &mut [u8]) -> Result<(), SplitError>;
}

impl<R: TryRngCore + ?Sized> RandomSource for R {
    fn fill(&mut self, dest: &mut [u8]) -> Result<(), SplitError> {
        self.try_fill_bytes(dest)
            .map_err(|_| SplitError::RandomnessExhausted { needed: dest.len() })
    }
}

/// Fixed-length secret bytes, overwritten with zeros on drop.
///
/// After [`KeyMaterial::zeroize`] every byte reads `0x00` and all accessors
/// that hand out the secret return [`SplitError::ZeroizedMaterial`].
#[derive(Clone)]
pub struct KeyMaterial {
    bytes: Vec<u8>,
    zeroized: bool,
}

impl KeyMaterial {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, SplitError> {
        if bytes.is_empty() {
            return Err(SplitError::Empty);
        }
        Ok(Self {
            bytes,
            zeroized: false,
        })
    }

    /// Copies `bytes` into a new key. The caller still owns (and should wipe)
    /// the source slice.
    pub fn from_slice(bytes: &[u8]) -> Result<Self, SplitError> {
        Self::from_bytes(bytes.to_vec())
    }

    pub fn random(len: usize, rng: &mut (impl RandomSource + ?Sized)) -> Result<Self, SplitError> {
        if len == 0 {
            return Err(SplitError::Empty);
        }
        let mut bytes = vec![0u8; len];
        if let Err(e) = rng.fill(&mut bytes) {
            bytes.zeroize();
            return Err(e);
        }
        Ok(Self {
            bytes,
            zeroized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    /// Always false; key material is at least one byte.
    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn is_zeroized(&self) -> bool {
        self.zeroized
    }

    pub fn expose(&self) -> Result<&[u8], SplitError> {
        if self.zeroized {
            return Err(SplitError::ZeroizedMaterial);
        }
        Ok(&self.bytes)
    }

    /// The underlying buffer, readable even after destruction. Used by
    /// inspection tests to confirm the bytes were really wiped.
    #[doc(hidden)]
    pub fn raw_buffer(&self) -> &[u8] {
        &self.bytes
    }

    /// Overwrites the bytes with zeros and marks the key unusable. The length
    /// is preserved.
    pub fn zeroize(&mut self) {
        // `Zeroize` on `Vec` would also truncate; wipe the slice in place instead.
        self.bytes.as_mut_slice().zeroize();
        self.zeroized = true;
    }
}

impl Zeroize for KeyMaterial {
    fn zeroize(&mut self) {
        KeyMaterial::zeroize(self);
    }
}

impl Drop for KeyMaterial {
    fn drop(&mut self) {
        self.bytes.as_mut_slice().zeroize();
    }
}

impl PartialEq for KeyMaterial {
    fn eq(&self, other: &Self) -> bool {
        self.zeroized == other.zeroized && constant_time_eq(&self.bytes, &other.bytes)
    }
}

impl Eq for KeyMaterial {}

impl fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyMaterial")
            .field("len", &self.bytes.len())
            .field("zeroized", &self.zeroized)
            .finish_non_exhaustive()
    }
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

/// The two halves of a split key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPair {
    pub half_a: KeyMaterial,
    pub half_b: KeyMaterial,
}

impl SplitPair {
    pub fn zeroize(&mut self) {
        self.half_a.zeroize();
        self.half_b.zeroize();
    }
}

/// Splits `key` into a uniformly random `half_a` and `half_b = key ^ half_a`.
pub fn split(
    key: &KeyMaterial,
    rng: &mut (impl RandomSource + ?Sized),
) -> Result<SplitPair, SplitError> {
    let secret = key.expose()?;
    let half_a = KeyMaterial::random(secret.len(), rng)?;
    let half_b = xor(secret, half_a.expose()?);
    Ok(SplitPair {
        half_a,
        half_b: KeyMaterial::from_bytes(half_b)?,
    })
}

/// Restores a key from its two halves.
pub fn combine(half_a: &KeyMaterial, half_b: &KeyMaterial) -> Result<KeyMaterial, SplitError> {
    let a = half_a.expose()?;
    let b = half_b.expose()?;
    if a.len() != b.len() {
        return Err(SplitError::LengthMismatch(a.len(), b.len()));
    }
    KeyMaterial::from_bytes(xor(a, b))
}

fn xor(a: &[u8], b: &[u8]) -> Vec<u8> {
    a.iter().zip(b).map(|(x, y)| x ^ y).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    /// Hands out a fixed byte sequence, then fails.
    struct Script(Vec<u8>);

    impl RandomSource for Script {
        fn fill(&mut self, dest: &mut [u8]) -> Result<(), SplitError> {
            if self.0.len() < dest.len() {
                return Err(SplitError::RandomnessExhausted { needed: dest.len() });
            }
            let rest = self.0.split_off(dest.len());
            dest.copy_from_slice(&self.0);
            self.0 = rest;
            Ok(())
        }
    }

    fn km(b: &[u8]) -> KeyMaterial {
        KeyMaterial::from_slice(b).unwrap()
    }

    #[test]
    fn single_byte_split_matches_xor() {
        let pair = split(&km(&[0x5C]), &mut Script(vec![0xAB])).unwrap();
        assert_eq!(pair.half_a.expose().unwrap(), &[0xAB]);
        assert_eq!(pair.half_b.expose().unwrap(), &[0xF7]);
    }

    #[test]
    fn zero_key_gives_equal_halves() {
        let mask = vec![0x13, 0x37, 0xC0, 0xDE];
        let pair = split(&km(&[0; 4]), &mut Script(mask.clone())).unwrap();
        assert_eq!(pair.half_a, pair.half_b);
        assert_eq!(pair.half_b.expose().unwrap(), &mask[..]);
    }

    #[test]
    fn combine_examples() {
        assert_eq!(combine(&km(&[0xAB]), &km(&[0xF7])).unwrap(), km(&[0x5C]));
        let x = km(&[9, 8, 7, 6, 5]);
        assert_eq!(combine(&x, &x).unwrap(), km(&[0; 5]));
    }

    #[test]
    fn every_mask_yields_each_half_once() {
        for key in 0..=255u8 {
            let mut seen = [0u32; 256];
            for mask in 0..=255u8 {
                let pair = split(&km(&[key]), &mut Script(vec![mask])).unwrap();
                seen[pair.half_b.expose().unwrap()[0] as usize] += 1;
            }
            assert!(seen.iter().all(|&c| c == 1), "key {key:#04x}");
        }
    }

    #[test]
    fn random_round_trips() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for len in [16, 32, 64] {
            for _ in 0..10_000 {
                let key = KeyMaterial::random(len, &mut rng).unwrap();
                let pair = split(&key, &mut rng).unwrap();
                assert_eq!(pair.half_a.len(), len);
                assert_eq!(pair.half_b.len(), len);
                assert_eq!(combine(&pair.half_a, &pair.half_b).unwrap(), key);
            }
        }
    }

    #[test]
    fn zeroized_material_is_rejected() {
        let mut key = km(&[1, 2, 3]);
        key.zeroize();
        assert_eq!(key.raw_buffer(), &[0, 0, 0]);
        assert_eq!(key.len(), 3);
        assert_eq!(
            split(&key, &mut Script(vec![0; 3])).unwrap_err(),
            SplitError::ZeroizedMaterial
        );
        assert_eq!(
            combine(&key, &km(&[1, 1, 1])).unwrap_err(),
            SplitError::ZeroizedMaterial
        );
    }

    #[test]
    fn exhausted_randomness_is_reported() {
        let err = split(&km(&[1, 2, 3, 4]), &mut Script(vec![0; 2])).unwrap_err();
        assert_eq!(err, SplitError::RandomnessExhausted { needed: 4 });
    }

    #[test]
    fn mismatched_halves() {
        assert_eq!(
            combine(&km(&[1, 2]), &km(&[1])).unwrap_err(),
            SplitError::LengthMismatch(2, 1)
        );
    }

    #[test]
    fn empty_key_is_rejected() {
        assert_eq!(
            KeyMaterial::from_bytes(vec![]).unwrap_err(),
            SplitError::Empty
        );
    }

    #[test]
    fn debug_does_not_leak_bytes() {
        let s = format!("{:?}", km(&[0xDE, 0xAD]));
        assert!(!s.contains("222") && !s.contains("DE") && !s.contains("de"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn split_then_combine_is_identity(key in proptest::collection::vec(any::<u8>(), 1..128), seed: u64) {
                let key = KeyMaterial::from_bytes(key).unwrap();
                let pair = split(&key, &mut ChaCha20Rng::seed_from_u64(seed)).unwrap();
                prop_assert_eq!(combine(&pair.half_a, &pair.half_b).unwrap(), key);
            }
        }
    }
}
