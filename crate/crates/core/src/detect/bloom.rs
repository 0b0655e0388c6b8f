//! Bloom filter over the normalized name dictionary.
//!
//! Indices use double hashing, `h_i = h1 + i * h2 (mod m)`, where `h1` and
//! `h2` are the two halves of one seeded 128-bit XXH3 digest of the token.
//!
//! Serialized layout (all integers little-endian):
//!
//! ```text
//! magic "WDBF" | version u16 | m u64 | k u16 | seed u64 | ceil(m/8) bytes, LSB-first
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;
use xxhash_rust::xxh3::xxh3_128_with_seed;

use crate::text::normalize_token;

pub const BLOOM_MAGIC: [u8; 4] = *b"WDBF";
pub const BLOOM_VERSION: u16 = 1;
pub const BLOOM_HEADER_LEN: usize = 4 + 2 + 8 + 2 + 8;
pub const DEFAULT_BLOOM_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Error)]
pub enum BloomError {
    #[error("target false-positive rate must lie in (0, 1), got {0}")]
    InvalidFalsePositiveRate(f64),
    #[error("cannot size a filter for zero elements")]
    EmptyCapacity,
    #[error("filter needs at least one bit and one hash function")]
    Degenerate,
    #[error("not a bloom filter file (bad magic)")]
    BadMagic,
    #[error("unsupported bloom filter version {0}")]
    UnsupportedVersion(u16),
    #[error("bloom filter truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("bloom filter has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Bit count and hash count for a filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BloomParams {
    pub bits: u64,
    pub hashes: u16,
}

impl BloomParams {
    /// Sizes a filter for `n` elements at false-positive rate `target_fp`:
    /// `m = ceil(-n ln p / ln^2 2)` and `k = max(1, round((m / n) ln 2))`.
    pub fn optimal(n: u64, target_fp: f64) -> Result<Self, BloomError> {
        if !(target_fp > 0.0 && target_fp < 1.0) {
            return Err(BloomError::InvalidFalsePositiveRate(target_fp));
        }
        if n == 0 {
            return Err(BloomError::EmptyCapacity);
        }
        let ln2 = std::f64::consts::LN_2;
        let n_f = n as f64;
        let bits = (-n_f * target_fp.ln() / (ln2 * ln2)).ceil().max(1.0) as u64;
        let hashes = ((bits as f64 / n_f) * ln2).round().max(1.0) as u16;
        Ok(Self { bits, hashes })
    }

    /// Like [`optimal`](Self::optimal) but with at least `min_bits` bits and
    /// the fewest hashes that still meet `target_fp` at that size.
    ///
    /// Double hashing yields only about `m * phi(m)` distinct probe patterns,
    /// so a tiny optimal filter cannot reach a very low target: two tokens with
    /// the same pattern always collide. A floor on `m` lifts that limit.
    pub fn with_min_bits(n: u64, target_fp: f64, min_bits: u64) -> Result<Self, BloomError> {
        let optimal = Self::optimal(n, target_fp)?;
        if optimal.bits >= min_bits {
            return Ok(optimal);
        }
        let hashes = (1..optimal.hashes)
            .find(|&k| Self { bits: min_bits, hashes: k }.expected_fp_rate(n) <= target_fp)
            .unwrap_or(optimal.hashes);
        Ok(Self { bits: min_bits, hashes })
    }

    pub fn bits_per_element(&self, n: u64) -> f64 {
        self.bits as f64 / n as f64
    }

    /// Standard approximation `(1 - e^{-kn/m})^k`.
    pub fn expected_fp_rate(&self, n: u64) -> f64 {
        let k = f64::from(self.hashes);
        (1.0 - (-k * n as f64 / self.bits as f64).exp()).powf(k)
    }
}

/// Membership sketch with false positives but no false negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BloomFilter {
    bits: Vec<u8>,
    m: u64,
    k: u16,
    seed: u64,
    /// Unknown for filters read back from disk.
    inserted: Option<u64>,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl BloomFilter {
    pub fn new(params: BloomParams, seed: u64) -> Result<Self, BloomError> {
        if params.bits == 0 || params.hashes == 0 {
            return Err(BloomError::Degenerate);
        }
        Ok(Self {
            bits: vec![0; params.bits.div_ceil(8) as usize],
            m: params.bits,
            k: params.hashes,
            seed,
            inserted: Some(0),
        })
    }

    /// Builds a filter sized for `tokens` and inserts all of them (normalized).
    pub fn from_tokens<I, S>(tokens: I, target_fp: f64, seed: u64) -> Result<Self, BloomError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self::sized_from_tokens(tokens, target_fp, 0, seed)
    }

    /// [`from_tokens`](Self::from_tokens) with a floor on the bit count; see
    /// [`BloomParams::with_min_bits`].
    pub fn sized_from_tokens<I, S>(tokens: I, target_fp: f64, min_bits: u64, seed: u64) -> Result<Self, BloomError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let normalized: Vec<String> =
            tokens.into_iter().map(|t| normalize_token(t.as_ref())).filter(|t| !t.is_empty()).collect();
        let params = BloomParams::with_min_bits(normalized.len() as u64, target_fp, min_bits)?;
        let mut filter = Self::new(params, seed)?;
        for token in &normalized {
            filter.insert_normalized(token);
        }
        Ok(filter)
    }

    pub fn params(&self) -> BloomParams {
        BloomParams { bits: self.m, hashes: self.k }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn inserted(&self) -> Option<u64> {
        self.inserted
    }

    pub fn insert(&mut self, token: &str) {
        self.insert_normalized(&normalize_token(token));
    }

    pub fn contains(&self, token: &str) -> bool {
        self.contains_normalized(&normalize_token(token))
    }

    /// Sets the k bit positions of an already-normalized token.
    pub fn insert_normalized(&mut self, token: &str) {
        let (h1, h2) = self.digest(token);
        for i in 0..self.k {
            let bit = self.index(h1, h2, i);
            self.bits[(bit / 8) as usize] |= 1 << (bit % 8);
        }
        if let Some(n) = self.inserted.as_mut() {
            *n += 1;
        }
    }

    pub fn contains_normalized(&self, token: &str) -> bool {
        let (h1, h2) = self.digest(token);
        (0..self.k).all(|i| {
            let bit = self.index(h1, h2, i);
            self.bits[(bit / 8) as usize] & (1 << (bit % 8)) != 0
        })
    }

    /// Both halves reduced mod m. The step is bumped to the next value
    /// coprime with m so the k probes never cycle over a short orbit.
    fn digest(&self, token: &str) -> (u64, u64) {
        let h = xxh3_128_with_seed(token.as_bytes(), self.seed);
        let mut step = ((h >> 64) as u64) % self.m;
        while gcd(step, self.m) != 1 {
            step = (step + 1) % self.m;
        }
        ((h as u64) % self.m, step)
    }

    fn index(&self, h1: u64, h2: u64, i: u16) -> u64 {
        ((u128::from(h1) + u128::from(i) * u128::from(h2)) % u128::from(self.m)) as u64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(BLOOM_HEADER_LEN + self.bits.len());
        out.extend_from_slice(&BLOOM_MAGIC);
        out.extend_from_slice(&BLOOM_VERSION.to_le_bytes());
        out.extend_from_slice(&self.m.to_le_bytes());
        out.extend_from_slice(&self.k.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.bits);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BloomError> {
        if bytes.len() < BLOOM_HEADER_LEN {
            return Err(BloomError::Truncated { expected: BLOOM_HEADER_LEN, actual: bytes.len() });
        }
        if bytes[..4] != BLOOM_MAGIC {
            return Err(BloomError::BadMagic);
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != BLOOM_VERSION {
            return Err(BloomError::UnsupportedVersion(version));
        }
        let m = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
        let k = u16::from_le_bytes([bytes[14], bytes[15]]);
        let seed = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        if m == 0 || k == 0 {
            return Err(BloomError::Degenerate);
        }
        let body = &bytes[BLOOM_HEADER_LEN..];
        let expected = m.div_ceil(8) as usize;
        if body.len() < expected {
            return Err(BloomError::Truncated { expected: BLOOM_HEADER_LEN + expected, actual: bytes.len() });
        }
        if body.len() > expected {
            return Err(BloomError::TrailingBytes(body.len() - expected));
        }
        Ok(Self { bits: body.to_vec(), m, k, seed, inserted: None })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BloomError> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), BloomError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}
