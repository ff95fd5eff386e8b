//! Keystream vectors for the test cipher, produced by the Python oracle in
//! `tests/vectors/test64_oracle.py`.

use splitvault::cipher_suite::{Registry, TEST64};
use splitvault::KeyMaterial;

const VECTORS: &str = include_str!("vectors/test64.json");

fn unhex(s: &str) -> Vec<u8> {
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap())
        .collect()
}

/// A second, deliberately different formulation: 128-bit arithmetic reduced
/// by masking.
fn reference(key: &[u8], len: usize) -> Vec<u8> {
    const M: u128 = (1 << 64) - 1;
    let mut s: u128 = 0;
    for &b in key {
        s = ((s * 0x100000001B3) & M) ^ b as u128;
    }
    (0..len)
        .map(|_| {
            s = (s * 6364136223846793005 + 1442695040888963407) & M;
            (s >> 56) as u8
        })
        .collect()
}

fn vectors() -> Vec<(Vec<u8>, usize, Vec<u8>)> {
    let doc: serde_json::Value = serde_json::from_str(VECTORS).unwrap();
    assert_eq!(doc["cipher"], TEST64);
    doc["vectors"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| {
            (
                unhex(v["key"].as_str().unwrap()),
                v["length"].as_u64().unwrap() as usize,
                unhex(v["keystream"].as_str().unwrap()),
            )
        })
        .collect()
}

#[test]
fn ten_published_vectors() {
    let vs = vectors();
    assert_eq!(vs.len(), 10);
    let reg = Registry::standard();
    let cipher = reg.get(TEST64).unwrap();
    for (key, len, expected) in vs {
        assert_eq!(expected.len(), len);
        let mut ks = vec![0u8; len];
        cipher
            .keystream(&KeyMaterial::from_slice(&key).unwrap(), &[])
            .unwrap()
            .apply(&mut ks);
        assert_eq!(ks, expected, "library, key {key:02x?}");
        assert_eq!(reference(&key, len), expected, "reference, key {key:02x?}");
    }
}

#[test]
fn encrypting_zeros_yields_the_keystream() {
    let reg = Registry::standard();
    let ct = reg
        .get(TEST64)
        .unwrap()
        .encrypt(
            &KeyMaterial::from_slice(&[0; 8]).unwrap(),
            &[0; 4],
            &mut rand::rng(),
        )
        .unwrap();
    assert_eq!(ct.body, [0x14, 0x1a, 0x9a, 0x66]);
    assert!(ct.nonce.is_empty());
}
