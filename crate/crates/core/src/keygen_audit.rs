//! Key generation from shuffled playing cards, and entropy accounting for it.
//!
//! A pass draws a shuffled deck with one or two cards thrown out and writes a
//! 0 for every red card and a 1 for every black one. Several passes are
//! concatenated into a key. A 2n-card deck has C(2n, n) balanced colour
//! sequences, about 4ⁿ/√(πn), so four passes over 50 cards give roughly
//! 2¹⁸⁷ keys.
//!
//! The collision audit is the other side of the coin: a generator that
//! advertises 2^c keys but really draws from a much smaller space produces
//! duplicates far sooner than the birthday bound allows.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use statrs::distribution::{DiscreteCDF, Poisson};
use thiserror::Error;
use zeroize::Zeroize;

use crate::secret_split::{KeyMaterial, RandomSource};

pub const STANDARD_DECK: usize = 52;
pub const MAX_DECK: usize = 200;
/// Default significance level of the collision audit.
pub const DEFAULT_ALPHA: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KeygenError {
    #[error("malformed pass: {0}")]
    MalformedPass(String),
    #[error("no passes to combine")]
    EmptyInput,
    #[error("invalid deck: {0}")]
    InvalidDeck(String),
    #[error("key generator failed: {0}")]
    GeneratorFailure(String),
    #[error("insufficient entropy: {available} bits available, {requested} requested")]
    InsufficientEntropy { available: usize, requested: usize },
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Color {
    Red,
    Black,
}

/// One pass through a shuffled deck, in draw order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CardPass {
    deck_size: usize,
    discarded: usize,
    colors: Vec<Color>,
}

impl CardPass {
    /// A pass through a standard 52-card deck.
    pub fn new(colors: Vec<Color>) -> Result<Self, KeygenError> {
        Self::with_deck(STANDARD_DECK, colors)
    }

    pub fn with_deck(deck_size: usize, colors: Vec<Color>) -> Result<Self, KeygenError> {
        if deck_size % 2 != 0 || !(4..=MAX_DECK).contains(&deck_size) {
            return Err(KeygenError::InvalidDeck(format!(
                "deck of {deck_size} cards"
            )));
        }
        let discarded = deck_size.checked_sub(colors.len()).ok_or_else(|| {
            KeygenError::MalformedPass(format!(
                "{} cards from a {deck_size}-card deck",
                colors.len()
            ))
        })?;
        if !(1..=2).contains(&discarded) {
            return Err(KeygenError::MalformedPass(format!(
                "{discarded} cards thrown out, expected 1 or 2"
            )));
        }
        let reds = colors.iter().filter(|c| **c == Color::Red).count();
        let half = deck_size / 2;
        if reds > half || colors.len() - reds > half {
            return Err(KeygenError::MalformedPass(format!(
                "{reds} red and {} black cards; a deck has {half} of each",
                colors.len() - reds
            )));
        }
        Ok(Self {
            deck_size,
            discarded,
            colors,
        })
    }

    pub fn deck_size(&self) -> usize {
        self.deck_size
    }

    pub fn discarded(&self) -> usize {
        self.discarded
    }

    pub fn colors(&self) -> &[Color] {
        &self.colors
    }
}

impl FromStr for CardPass {
    type Err = KeygenError;

    /// Parses a line of `r`/`b` characters (case-insensitive).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let colors = s
            .trim()
            .chars()
            .map(|c| match c.to_ascii_lowercase() {
                'r' => Ok(Color::Red),
                'b' => Ok(Color::Black),
                other => Err(KeygenError::MalformedPass(format!("unexpected {other:?}"))),
            })
            .collect::<Result<_, _>>()?;
        Self::new(colors)
    }
}

impl fmt::Display for CardPass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.colors {
            f.write_str(if *c == Color::Red { "r" } else { "b" })?;
        }
        Ok(())
    }
}

/// Parses a card transcript: one pass per line, blank lines and `#` comments
/// ignored.
pub fn parse_transcript(text: &str) -> Result<Vec<CardPass>, KeygenError> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .enumerate()
        .map(|(i, l)| {
            l.parse().map_err(|e: KeygenError| {
                KeygenError::MalformedPass(format!("pass {}: {e}", i + 1))
            })
        })
        .collect()
}

/// Red is 0, black is 1.
pub fn pass_to_bits(pass: &CardPass) -> Vec<bool> {
    pass.colors.iter().map(|c| *c == Color::Black).collect()
}

/// A key built from a bit string, packed most significant bit first. The
/// last byte is padded with `pad_bits` zero bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedKey {
    pub key: KeyMaterial,
    pub bit_len: usize,
    pub pad_bits: usize,
}

fn pack(bits: &[bool]) -> Result<PackedKey, KeygenError> {
    if bits.is_empty() {
        return Err(KeygenError::EmptyInput);
    }
    let mut bytes = vec![0u8; bits.len().div_ceil(8)];
    for (i, _) in bits.iter().enumerate().filter(|(_, b)| **b) {
        bytes[i / 8] |= 0x80 >> (i % 8);
    }
    Ok(PackedKey {
        key: KeyMaterial::from_bytes(bytes).expect("non-empty"),
        bit_len: bits.len(),
        pad_bits: bytes_pad(bits.len()),
    })
}

fn bytes_pad(bits: usize) -> usize {
    (8 - bits % 8) % 8
}

/// Concatenates passes in order into one key.
pub fn combine_passes(passes: &[Vec<bool>]) -> Result<PackedKey, KeygenError> {
    if passes.is_empty() {
        return Err(KeygenError::EmptyInput);
    }
    let mut bits: Vec<bool> = passes.concat();
    let key = pack(&bits);
    bits.zeroize();
    key
}

/// Entropy of card-deck keys, in bits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropyReport {
    pub deck_size: usize,
    pub discarded: usize,
    pub passes: u32,
    /// log₂ C(2n, n), exact.
    pub exact_log2: f64,
    /// 2n − ½ log₂(πn).
    pub asymptotic_log2: f64,
    /// log₂ of the number of colour sequences reachable with `discarded`
    /// cards thrown out.
    pub refined_log2: f64,
    pub combined_exact_log2: f64,
    pub combined_asymptotic_log2: f64,
    pub combined_refined_log2: f64,
    /// One bit per card drawn, over all passes.
    pub upper_bound_bits: f64,
}

/// log₂ of a big integer, accurate to double precision.
pub fn log2_big(x: &BigUint) -> f64 {
    let bits = x.bits();
    if bits == 0 {
        return f64::NEG_INFINITY;
    }
    if bits <= 64 {
        return x.to_u64().unwrap().to_f64().unwrap().log2();
    }
    let shift = bits - 64;
    let top = (x >> shift).to_u64().unwrap();
    (top as f64).log2() + shift as f64
}

fn factorial(n: usize) -> BigUint {
    (2..=n as u64).fold(BigUint::one(), |acc, k| acc * k)
}

/// C(n, k) from exact factorials.
pub fn binomial(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::ZERO;
    }
    factorial(n) / (factorial(k) * factorial(n - k))
}

/// Number of red/black sequences of `deck_size − discarded` cards drawn from
/// a deck with `deck_size / 2` of each colour.
pub fn reachable_sequences(deck_size: usize, discarded: usize) -> BigUint {
    let n = deck_size / 2;
    let drawn = deck_size - discarded;
    let lo = drawn.saturating_sub(n);
    (lo..=n.min(drawn)).map(|reds| binomial(drawn, reds)).sum()
}

pub fn entropy_estimate(
    deck_size: usize,
    discarded: usize,
    passes: u32,
) -> Result<EntropyReport, KeygenError> {
    if deck_size % 2 != 0 || !(2..=MAX_DECK).contains(&deck_size) {
        return Err(KeygenError::InvalidDeck(format!(
            "deck size must be even and in 2..={MAX_DECK}, got {deck_size}"
        )));
    }
    if discarded >= deck_size {
        return Err(KeygenError::InvalidDeck(format!(
            "cannot throw out {discarded} of {deck_size} cards"
        )));
    }
    if passes == 0 {
        return Err(KeygenError::InvalidParameters(
            "need at least one pass".into(),
        ));
    }
    let n = deck_size / 2;
    let exact_log2 = log2_big(&binomial(deck_size, n));
    let asymptotic_log2 = deck_size as f64 - 0.5 * (PI * n as f64).log2();
    let refined_log2 = log2_big(&reachable_sequences(deck_size, discarded));
    let p = passes as f64;
    Ok(EntropyReport {
        deck_size,
        discarded,
        passes,
        exact_log2,
        asymptotic_log2,
        refined_log2,
        combined_exact_log2: p * exact_log2,
        combined_asymptotic_log2: p * asymptotic_log2,
        combined_refined_log2: p * refined_log2,
        upper_bound_bits: p * (deck_size - discarded) as f64,
    })
}

/// A source of fixed-length keys to audit.
pub trait KeySource {
    fn next_key(&mut self) -> Result<Vec<u8>, KeygenError>;
}

impl<F: FnMut() -> Result<Vec<u8>, KeygenError>> KeySource for F {
    fn next_key(&mut self) -> Result<Vec<u8>, KeygenError> {
        self()
    }
}

/// The system CSPRNG.
pub struct CsprngSource {
    pub key_len: usize,
}

impl KeySource for CsprngSource {
    fn next_key(&mut self) -> Result<Vec<u8>, KeygenError> {
        let mut k = vec![0u8; self.key_len];
        rand::rngs::OsRng
            .fill(&mut k)
            .map_err(|e| KeygenError::GeneratorFailure(e.to_string()))?;
        Ok(k)
    }
}

/// A deliberately weak generator: it draws a seed from only `2^space_bits`
/// values and stretches it into `key_len` bytes, so its keys look full-length
/// but live in a small space.
pub struct ShrunkenSource {
    space_bits: u32,
    key_len: usize,
    rng: ChaCha20Rng,
}

impl ShrunkenSource {
    pub fn new(space_bits: u32, key_len: usize, seed: u64) -> Result<Self, KeygenError> {
        if space_bits == 0 || space_bits > 64 || key_len == 0 {
            return Err(KeygenError::InvalidParameters(format!(
                "space of 2^{space_bits} with {key_len}-byte keys"
            )));
        }
        Ok(Self {
            space_bits,
            key_len,
            rng: ChaCha20Rng::seed_from_u64(seed),
        })
    }
}

impl KeySource for ShrunkenSource {
    fn next_key(&mut self) -> Result<Vec<u8>, KeygenError> {
        let seed = self.rng.next_u64() >> (64 - self.space_bits);
        let mut k = vec![0u8; self.key_len];
        ChaCha20Rng::seed_from_u64(seed).fill_bytes(&mut k);
        Ok(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Inconclusive,
    Consistent,
    FraudSuspected,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Inconclusive => "INCONCLUSIVE",
            Verdict::Consistent => "CONSISTENT",
            Verdict::FraudSuspected => "FRAUD_SUSPECTED",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AuditReport {
    pub samples: u64,
    pub claimed_log2_space: f64,
    pub distinct: u64,
    /// Pairs of samples that are equal.
    pub observed_collisions: u64,
    /// Expected colliding pairs under the claim, N(N−1)/2 / 2^c.
    pub expected_collisions: f64,
    /// Probability of at least one collision under the claim.
    pub p_any_collision: f64,
    /// P[X ≥ observed] for X ~ Poisson(expected).
    pub tail_probability: f64,
    /// Space size that would make the observed count expected, if any
    /// collisions were seen.
    pub fitted_log2_space: Option<f64>,
    pub alpha: f64,
    pub verdict: Verdict,
}

/// Draws `samples` keys and tests the collision count against the claimed
/// key space of `2^claimed_log2_space`.
pub fn collision_audit(
    source: &mut (impl KeySource + ?Sized),
    claimed_log2_space: f64,
    samples: u64,
    alpha: f64,
) -> Result<AuditReport, KeygenError> {
    if !(claimed_log2_space > 0.0 && claimed_log2_space.is_finite()) {
        return Err(KeygenError::InvalidParameters(format!(
            "claimed space 2^{claimed_log2_space}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(KeygenError::InvalidParameters(format!("alpha {alpha}")));
    }
    let mut seen: HashMap<Vec<u8>, u64> = HashMap::new();
    let mut key_len = None;
    for _ in 0..samples {
        let k = source.next_key()?;
        if *key_len.get_or_insert(k.len()) != k.len() {
            return Err(KeygenError::GeneratorFailure("key length changed".into()));
        }
        *seen.entry(k).or_default() += 1;
    }
    let observed: u64 = seen.values().map(|&c| c * (c - 1) / 2).sum();
    let distinct = seen.len() as u64;
    for (mut k, _) in seen.drain() {
        k.zeroize();
    }

    let pairs = samples as f64 * (samples.saturating_sub(1)) as f64 / 2.0;
    let expected = pairs * (-claimed_log2_space).exp2();
    let tail = if observed == 0 {
        1.0
    } else if expected == 0.0 {
        0.0
    } else {
        Poisson::new(expected)
            .map_err(|e| KeygenError::InvalidParameters(e.to_string()))?
            .sf(observed - 1)
    };
    let verdict = if samples < 2 {
        Verdict::Inconclusive
    } else if tail < alpha {
        Verdict::FraudSuspected
    } else {
        Verdict::Consistent
    };
    Ok(AuditReport {
        samples,
        claimed_log2_space,
        distinct,
        observed_collisions: observed,
        expected_collisions: expected,
        p_any_collision: -(-expected).exp_m1(),
        tail_probability: tail,
        fitted_log2_space: (observed > 0).then(|| (pairs / observed as f64).log2()),
        alpha,
        verdict,
    })
}

pub enum KeygenMethod<'a> {
    Csprng,
    CardTranscript(&'a [CardPass]),
}

/// Produces a key of `bits` bits, packed like [`combine_passes`]. A card
/// transcript longer than needed is truncated to its first `bits` bits.
pub fn generate_key(
    method: KeygenMethod<'_>,
    bits: usize,
    rng: &mut (impl RandomSource + ?Sized),
) -> Result<PackedKey, KeygenError> {
    if bits == 0 {
        return Err(KeygenError::InvalidParameters("zero-length key".into()));
    }
    match method {
        KeygenMethod::Csprng => {
            let mut bytes = vec![0u8; bits.div_ceil(8)];
            rng.fill(&mut bytes)
                .map_err(|e| KeygenError::GeneratorFailure(e.to_string()))?;
            let pad = bytes_pad(bits);
            if let Some(last) = bytes.last_mut() {
                *last &= 0xFFu8 << pad;
            }
            Ok(PackedKey {
                key: KeyMaterial::from_bytes(bytes).expect("non-empty"),
                bit_len: bits,
                pad_bits: pad,
            })
        }
        KeygenMethod::CardTranscript(passes) => {
            if passes.is_empty() {
                return Err(KeygenError::EmptyInput);
            }
            let mut all: Vec<bool> = passes.iter().flat_map(pass_to_bits).collect();
            if all.len() < bits {
                let available = all.len();
                all.zeroize();
                return Err(KeygenError::InsufficientEntropy {
                    available,
                    requested: bits,
                });
            }
            let key = pack(&all[..bits]);
            all.zeroize();
            key
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pass(s: &str) -> CardPass {
        s.parse().unwrap()
    }

    fn balanced(len: usize, offset: usize) -> String {
        (0..len)
            .map(|i| if (i + offset) % 2 == 0 { 'r' } else { 'b' })
            .collect()
    }

    /// C(n, k) by the multiplicative formula in u128.
    fn binom_u128(n: u128, k: u128) -> u128 {
        (0..k).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
    }

    #[test]
    fn colours_map_to_bits() {
        let reds = CardPass::with_deck(52, vec![Color::Red; 26]);
        assert!(reds.is_err(), "26 cards is not 50 or 51");
        let all_red_50 =
            CardPass::with_deck(52, [vec![Color::Red; 26], vec![Color::Black; 24]].concat())
                .unwrap();
        assert_eq!(pass_to_bits(&all_red_50)[..26], [false; 26]);
        let alt = pass(&balanced(50, 0));
        let bits = pass_to_bits(&alt);
        assert!(bits.iter().enumerate().all(|(i, b)| *b == (i % 2 == 1)));
        assert_eq!(alt.to_string().parse::<CardPass>().unwrap(), alt);
    }

    #[test]
    fn hand_transcribed_pass() {
        let line = "rrbbrbrbbbrrbrbrrbbbrbrrbrbbrrbrbrbbrrbrbrbbrrbrbrb";
        assert_eq!(line.len(), 51);
        let bits = pass_to_bits(&pass(line));
        let hand = "0011010111 0010100111 0100101100 1010110010 1011001010 1";
        let expect: Vec<bool> = hand
            .chars()
            .filter(|c| *c != ' ')
            .map(|c| c == '1')
            .collect();
        assert_eq!(bits, expect);
    }

    #[test]
    fn malformed_passes() {
        assert!(matches!(
            "rbx".parse::<CardPass>(),
            Err(KeygenError::MalformedPass(_))
        ));
        assert!(matches!(
            balanced(52, 0).parse::<CardPass>(),
            Err(KeygenError::MalformedPass(_))
        ));
        assert!(matches!(
            balanced(49, 0).parse::<CardPass>(),
            Err(KeygenError::MalformedPass(_))
        ));
        // 27 blacks cannot come out of a standard deck.
        let too_black = format!("{}{}", "b".repeat(27), "r".repeat(24));
        assert!(matches!(
            too_black.parse::<CardPass>(),
            Err(KeygenError::MalformedPass(_))
        ));
    }

    #[test]
    fn four_passes_make_203_bits() {
        let passes: Vec<_> = [51, 51, 51, 50]
            .iter()
            .enumerate()
            .map(|(i, &n)| pass_to_bits(&pass(&balanced(n, i))))
            .collect();
        let key = combine_passes(&passes).unwrap();
        assert_eq!(key.bit_len, 203);
        assert_eq!(key.key.len(), 26);
        assert_eq!(key.pad_bits, 5);
        assert_eq!(key.key.expose().unwrap()[25] & 0x1F, 0);
        // Order is preserved: the first pass is the key's prefix.
        let first = combine_passes(&passes[..1]).unwrap();
        assert_eq!(first.bit_len, 51);
        assert_eq!(
            key.key.expose().unwrap()[..6],
            first.key.expose().unwrap()[..6]
        );
        assert_eq!(combine_passes(&[]).unwrap_err(), KeygenError::EmptyInput);
    }

    #[test]
    fn exact_binomials() {
        assert_eq!(binomial(52, 26), BigUint::from(495_918_532_948_104u64));
        assert_eq!(binomial(52, 26), BigUint::from(binom_u128(52, 26)));
        let r = entropy_estimate(52, 0, 1).unwrap();
        assert!((r.exact_log2 - (binom_u128(52, 26) as f64).log2()).abs() < 1e-9);
        assert!((r.exact_log2 - 48.8).abs() < 0.05);
        assert_eq!(entropy_estimate(2, 0, 1).unwrap().exact_log2, 1.0);
        for n in 1..=60u128 {
            assert_eq!(
                binomial(2 * n as usize, n as usize),
                BigUint::from(binom_u128(2 * n, n))
            );
        }
    }

    #[test]
    fn bound_for_four_passes_of_25() {
        let r = entropy_estimate(50, 0, 4).unwrap();
        let expect = 200.0 - 2.0 * (25.0 * PI).log2();
        assert!((r.combined_asymptotic_log2 - expect).abs() < 1e-9);
        assert!(r.combined_asymptotic_log2 >= 187.0);
        assert!(r.combined_exact_log2 >= 187.0);
    }

    #[test]
    fn asymptotic_is_within_one_percent() {
        for n in 10..=100 {
            let r = entropy_estimate(2 * n, 0, 1).unwrap();
            assert!(
                (r.exact_log2 - r.asymptotic_log2).abs() / r.exact_log2 < 0.01,
                "n={n}"
            );
        }
    }

    #[test]
    fn refined_count_and_upper_bound() {
        // Throwing out one card of a balanced deck leaves exactly C(52,26)
        // reachable sequences.
        assert_eq!(reachable_sequences(52, 1), binomial(52, 26));
        assert_eq!(
            reachable_sequences(52, 2),
            binomial(50, 24) + binomial(50, 25) + binomial(50, 26)
        );
        for deck in (2..=MAX_DECK).step_by(2) {
            for d in 0..3.min(deck) {
                let r = entropy_estimate(deck, d, 3).unwrap();
                assert!(r.combined_refined_log2 <= r.upper_bound_bits + 1e-9);
                assert!(r.exact_log2 <= deck as f64);
            }
        }
    }

    #[test]
    fn monotone_in_n_and_passes() {
        let mut prev = 0.0;
        for n in 1..=100 {
            let r = entropy_estimate(2 * n, 0, 1).unwrap();
            assert!(r.exact_log2 > prev);
            prev = r.exact_log2;
        }
        let a = entropy_estimate(52, 1, 2).unwrap();
        let b = entropy_estimate(52, 1, 3).unwrap();
        assert!(b.combined_exact_log2 > a.combined_exact_log2);
    }

    #[test]
    fn invalid_decks() {
        for (deck, d, p) in [(51, 0, 1), (0, 0, 1), (202, 0, 1), (52, 52, 1), (52, 0, 0)] {
            assert!(entropy_estimate(deck, d, p).is_err(), "{deck} {d} {p}");
        }
    }

    #[test]
    fn audit_single_sample_is_inconclusive() {
        let mut s = CsprngSource { key_len: 8 };
        let r = collision_audit(&mut s, 64.0, 1, DEFAULT_ALPHA).unwrap();
        assert_eq!(r.verdict, Verdict::Inconclusive);
        assert_eq!(r.p_any_collision, 0.0);
    }

    #[test]
    fn audit_catches_a_small_space() {
        let mut s = ShrunkenSource::new(8, 32, 1).unwrap();
        let r = collision_audit(&mut s, 16.0, 512, DEFAULT_ALPHA).unwrap();
        assert_eq!(r.verdict, Verdict::FraudSuspected);
        assert!((r.p_any_collision - 0.864).abs() < 0.001);
        assert!(r.distinct <= 256);
        let fitted = r.fitted_log2_space.unwrap();
        assert!((fitted - 8.0).abs() < 0.5, "{fitted}");
    }

    #[test]
    fn audit_passes_an_honest_generator() {
        let mut s = CsprngSource { key_len: 8 };
        let r = collision_audit(&mut s, 64.0, 1 << 10, DEFAULT_ALPHA).unwrap();
        assert_eq!(r.verdict, Verdict::Consistent);
        assert_eq!(r.observed_collisions, 0);
        assert!(r.expected_collisions < 1e-12);
    }

    #[test]
    fn failing_generator() {
        let mut broken = || Err(KeygenError::GeneratorFailure("unplugged".into()));
        assert!(matches!(
            collision_audit(&mut broken, 64.0, 4, DEFAULT_ALPHA),
            Err(KeygenError::GeneratorFailure(_))
        ));
    }

    #[test]
    fn generate_from_cards() {
        let passes: Vec<_> = [51, 51, 51, 50]
            .iter()
            .enumerate()
            .map(|(i, &n)| pass(&balanced(n, i)))
            .collect();
        let mut rng = rand::rng();
        let k = generate_key(KeygenMethod::CardTranscript(&passes), 203, &mut rng).unwrap();
        let bits: Vec<_> = passes.iter().map(pass_to_bits).collect();
        assert_eq!(k, combine_passes(&bits).unwrap());
        assert_eq!(
            generate_key(KeygenMethod::CardTranscript(&passes), 256, &mut rng).unwrap_err(),
            KeygenError::InsufficientEntropy {
                available: 203,
                requested: 256
            }
        );
        let short = generate_key(KeygenMethod::CardTranscript(&passes), 12, &mut rng).unwrap();
        assert_eq!(short.key.len(), 2);
        assert_eq!(short.pad_bits, 4);
    }

    #[test]
    fn csprng_keys() {
        let k = generate_key(KeygenMethod::Csprng, 203, &mut rand::rng()).unwrap();
        assert_eq!(k.key.len(), 26);
        assert_eq!(k.key.expose().unwrap()[25] & 0x1F, 0);
    }

    #[test]
    fn transcript_file() {
        let text = format!("# deck 1\n{}\n\n{}\n", balanced(51, 0), balanced(50, 1));
        let passes = parse_transcript(&text).unwrap();
        assert_eq!(passes.len(), 2);
        assert_eq!(passes[1].discarded(), 2);
        assert!(parse_transcript("rb\n").is_err());
    }
}
