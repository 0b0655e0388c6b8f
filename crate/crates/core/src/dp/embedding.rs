//! Name embeddings and the noisy nearest-neighbour replacement.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{CryptoRng, Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh3::xxh3_128_with_seed;

use super::{check_epsilon, laplace_fill, DpError};
use crate::dictionary::Gender;
use crate::text::normalize_token;

pub const TABLE_MAGIC: [u8; 4] = *b"WDET";
pub const TABLE_VERSION: u16 = 1;
pub const TABLE_HEADER_LEN: usize = 4 + 2 + 2 + 4;
pub const NORM_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_EMBEDDING_DIM: usize = 128;
/// Key for hash-derived vectors when nothing better is configured.
pub const DEFAULT_SYNTHETIC_KEY: u64 = 0x5ee_d0f7_ab1e;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("table truncated at byte {0}")]
    Truncated(usize),
    #[error("bad magic, not an embedding table")]
    BadMagic,
    #[error("unsupported table version {0}")]
    UnsupportedVersion(u16),
    #[error("{0} trailing bytes after the last entry")]
    TrailingBytes(usize),
    #[error("dimension must be positive")]
    ZeroDimension,
    #[error("entry {index}: name is not UTF-8")]
    BadName { index: usize },
    #[error("entry {index}: unknown gender byte {byte}")]
    BadGender { index: usize, byte: u8 },
    #[error("entry {name:?}: vector has {actual} components, expected {expected}")]
    WrongDimension { name: String, expected: usize, actual: usize },
    #[error("entry {name:?}: L2 norm {norm} is not 1")]
    NotNormalized { name: String, norm: f64 },
    #[error("duplicate name {name:?} in the {gender} partition")]
    Duplicate { name: String, gender: Gender },
    #[error("too many entries for the format")]
    TooLarge,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingEntry {
    pub name: String,
    pub gender: Gender,
    pub vector: Vec<f32>,
}

/// Entries of one gender, sorted by name, vectors stored contiguously.
#[derive(Debug, Clone, Default)]
struct Partition {
    names: Vec<String>,
    data: Vec<f32>,
}

/// Immutable name → unit vector table, partitioned by gender.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    partitions: [Partition; 3],
    index: HashMap<String, Vec<(Gender, usize)>>,
    synthetic_key: u64,
}

fn l2_norm(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl EmbeddingTable {
    pub fn from_entries(dim: usize, mut entries: Vec<EmbeddingEntry>) -> Result<Self, TableError> {
        if dim == 0 {
            return Err(TableError::ZeroDimension);
        }
        if entries.len() > u32::MAX as usize {
            return Err(TableError::TooLarge);
        }
        for e in &entries {
            if e.vector.len() != dim {
                return Err(TableError::WrongDimension { name: e.name.clone(), expected: dim, actual: e.vector.len() });
            }
            let norm = l2_norm(e.vector.iter().map(|&x| x as f64));
            // Negated so a NaN norm is rejected too.
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
                return Err(TableError::NotNormalized { name: e.name.clone(), norm });
            }
        }
        entries.sort_by(|a, b| a.gender.cmp(&b.gender).then_with(|| a.name.cmp(&b.name)));
        let mut partitions: [Partition; 3] = Default::default();
        let mut index: HashMap<String, Vec<(Gender, usize)>> = HashMap::new();
        for e in entries {
            let part = &mut partitions[e.gender.to_byte() as usize];
            if part.names.last() == Some(&e.name) {
                return Err(TableError::Duplicate { name: e.name, gender: e.gender });
            }
            index.entry(normalize_token(&e.name)).or_default().push((e.gender, part.names.len()));
            part.names.push(e.name);
            part.data.extend_from_slice(&e.vector);
        }
        Ok(Self { dim, partitions, index, synthetic_key: DEFAULT_SYNTHETIC_KEY })
    }

    /// A table of hash-derived vectors; deterministic given `key`.
    pub fn synthetic<I, S>(names: I, dim: usize, key: u64) -> Result<Self, TableError>
    where
        I: IntoIterator<Item = (S, Gender)>,
        S: Into<String>,
    {
        let entries = names
            .into_iter()
            .map(|(name, gender)| {
                let name = name.into();
                let vector = synthetic_vector(&name, dim, key);
                EmbeddingEntry { name, gender, vector }
            })
            .collect();
        Ok(Self::from_entries(dim, entries)?.with_synthetic_key(key))
    }

    /// Key used for names that have no stored vector.
    pub fn with_synthetic_key(mut self, key: u64) -> Self {
        self.synthetic_key = key;
        self
    }

    pub fn synthetic_key(&self) -> u64 {
        self.synthetic_key
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.partitions.iter().map(|p| p.names.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn partition_len(&self, gender: Gender) -> usize {
        self.partitions[gender.to_byte() as usize].names.len()
    }

    pub fn names(&self, gender: Gender) -> &[String] {
        &self.partitions[gender.to_byte() as usize].names
    }

    fn row(&self, gender: Gender, i: usize) -> &[f32] {
        let d = self.dim;
        &self.partitions[gender.to_byte() as usize].data[i * d..(i + 1) * d]
    }

    /// Stored vector for `name`, preferring the given gender's partition.
    pub fn vector(&self, name: &str, gender: Gender) -> Option<&[f32]> {
        let hits = self.index.get(&normalize_token(name))?;
        let (g, i) = hits.iter().find(|(g, _)| *g == gender).or_else(|| hits.first())?;
        Some(self.row(*g, *i))
    }

    /// Gender partition that stores `name`, if exactly one does.
    pub fn gender_of(&self, name: &str) -> Option<Gender> {
        match self.index.get(&normalize_token(name))?.as_slice() {
            [(g, _)] => Some(*g),
            _ => None,
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = EmbeddingEntry> + '_ {
        Gender::ALL.into_iter().flat_map(move |g| {
            self.names(g).iter().enumerate().map(move |(i, name)| EmbeddingEntry {
                name: name.clone(),
                gender: g,
                vector: self.row(g, i).to_vec(),
            })
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(TABLE_HEADER_LEN + self.len() * (8 + 4 * self.dim));
        out.extend_from_slice(&TABLE_MAGIC);
        out.extend_from_slice(&TABLE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u16).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for e in self.entries() {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.gender.to_byte());
            for x in e.vector {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TableError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != TABLE_MAGIC {
            return Err(TableError::BadMagic);
        }
        let version = r.u16()?;
        if version != TABLE_VERSION {
            return Err(TableError::UnsupportedVersion(version));
        }
        let dim = r.u16()? as usize;
        if dim == 0 {
            return Err(TableError::ZeroDimension);
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for index in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| TableError::BadName { index })?.to_string();
            let byte = r.take(1)?[0];
            let gender = Gender::from_byte(byte).ok_or(TableError::BadGender { index, byte })?;
            let raw = r.take(4 * dim)?;
            let vector = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk"))).collect();
            entries.push(EmbeddingEntry { name, gender, vector });
        }
        if r.pos != bytes.len() {
            return Err(TableError::TrailingBytes(bytes.len() - r.pos));
        }
        Self::from_entries(dim, entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TableError> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TableError> {
        if self.dim > u16::MAX as usize || self.names_too_long() {
            return Err(TableError::TooLarge);
        }
        Ok(fs::write(path, self.to_bytes())?)
    }

    fn names_too_long(&self) -> bool {
        self.partitions.iter().flat_map(|p| &p.names).any(|n| n.len() > u16::MAX as usize)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TableError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(TableError::Truncated(self.bytes.len()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, TableError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, TableError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Unit vector drawn from a Gaussian seeded by a keyed hash of the
/// normalized name. Stable across runs and platforms, and carries no
/// semantic information.
pub fn synthetic_vector(name: &str, dim: usize, key: u64) -> Vec<f32> {
    let norm = normalize_token(name);
    let lo = xxh3_128_with_seed(norm.as_bytes(), key).to_le_bytes();
    let hi = xxh3_128_with_seed(norm.as_bytes(), !key).to_le_bytes();
    let mut seed = [0u8; 32];
    seed[..16].copy_from_slice(&lo);
    seed[16..].copy_from_slice(&hi);
    let mut rng = ChaCha20Rng::from_seed(seed);
    let raw: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = l2_norm(raw.iter().copied());
    raw.into_iter().map(|x| (x / n) as f32).collect()
}

const LANES: usize = 8;

/// Independent lanes let the compiler vectorize; the summation order is
/// fixed, so results are reproducible.
fn squared_distance(row: &[f32], v: &[f64]) -> f64 {
    let mut acc = [0.0f64; LANES];
    let split = row.len() - row.len() % LANES;
    let (rc, rt) = row.split_at(split);
    let (vc, vt) = v.split_at(split);
    for (r, x) in rc.chunks_exact(LANES).zip(vc.chunks_exact(LANES)) {
        for l in 0..LANES {
            let diff = f64::from(r[l]) - x[l];
            acc[l] += diff * diff;
        }
    }
    let tail: f64 = rt.iter().zip(vt).map(|(&a, &b)| (f64::from(a) - b).powi(2)).sum();
    acc.iter().sum::<f64>() + tail
}

/// Exact nearest neighbour of `v` within one gender partition. Ties go to
/// the lexicographically smaller name.
pub fn nearest_neighbor<'t>(v: &[f64], table: &'t EmbeddingTable, gender: Gender) -> Result<(&'t str, f64), DpError> {
    if v.len() != table.dim {
        return Err(DpError::DimensionMismatch { expected: table.dim, actual: v.len() });
    }
    let names = table.names(gender);
    if names.is_empty() {
        return Err(DpError::EmptyPartition(gender));
    }
    let rows = table.partitions[gender.to_byte() as usize].data.chunks_exact(table.dim);
    let mut best = (0, f64::INFINITY);
    for (i, row) in rows.enumerate() {
        let d2 = squared_distance(row, v);
        // Rows are name-sorted, so strict `<` keeps the smallest name on ties.
        if d2 < best.1 {
            best = (i, d2);
        }
    }
    Ok((names[best.0].as_str(), best.1.sqrt()))
}

/// Source of embeddings for names missing from the table.
pub trait Embedder: Send + Sync {
    /// A vector of the requested dimension, or `None` when unavailable.
    fn embed(&self, name: &str, dim: usize) -> Option<Vec<f32>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedSource {
    Table,
    Provider,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdpOutcome {
    pub replacement: String,
    pub distance: f64,
    pub source: EmbedSource,
    pub epsilon_spent: f64,
}

/// Unit-normalized vector for `name`: the table's own entry, else the
/// embedder's, else the hash-derived fallback.
pub fn source_vector(
    name: &str,
    table: &EmbeddingTable,
    gender: Gender,
    embedder: Option<&dyn Embedder>,
) -> Result<(Vec<f64>, EmbedSource), DpError> {
    let d = table.dim;
    let (raw, source) = match table.vector(name, gender) {
        Some(v) => (v.to_vec(), EmbedSource::Table),
        None => match embedder.and_then(|e| e.embed(name, d)) {
            Some(v) if v.len() == d => (v, EmbedSource::Provider),
            Some(v) => return Err(DpError::DimensionMismatch { expected: d, actual: v.len() }),
            None => (synthetic_vector(name, d, table.synthetic_key), EmbedSource::Synthetic),
        },
    };
    let norm = l2_norm(raw.iter().map(|&x| x as f64));
    let unit = raw.iter().map(|&x| if norm > 0.0 { x as f64 / norm } else { 0.0 }).collect();
    Ok((unit, source))
}

/// Adds Lap(2√d/ε) to every coordinate of `unit` and decodes to the nearest
/// name of the partition.
pub fn perturb_and_decode<'t, R: RngCore + CryptoRng + ?Sized>(
    unit: &[f64],
    epsilon: f64,
    table: &'t EmbeddingTable,
    gender: Gender,
    rng: &mut R,
) -> Result<(&'t str, f64), DpError> {
    check_epsilon(epsilon)?;
    if table.partition_len(gender) == 0 {
        return Err(DpError::EmptyPartition(gender));
    }
    let scale = 2.0 * (table.dim as f64).sqrt() / epsilon;
    let mut noisy = vec![0.0; unit.len()];
    laplace_fill(scale, &mut noisy, rng);
    for (n, &x) in noisy.iter_mut().zip(unit) {
        *n += x;
    }
    nearest_neighbor(&noisy, table, gender)
}

/// Perturbs the name's embedding with per-coordinate Laplace noise of scale
/// `2 * sqrt(d) / epsilon` and decodes to the nearest name of `gender`.
pub fn embed_ldp<R: RngCore + CryptoRng + ?Sized>(
    name: &str,
    epsilon: f64,
    table: &EmbeddingTable,
    gender: Gender,
    embedder: Option<&dyn Embedder>,
    rng: &mut R,
) -> Result<LdpOutcome, DpError> {
    check_epsilon(epsilon)?;
    if table.partition_len(gender) == 0 {
        return Err(DpError::EmptyPartition(gender));
    }
    let (unit, source) = source_vector(name, table, gender, embedder)?;
    let (replacement, distance) = perturb_and_decode(&unit, epsilon, table, gender, rng)?;
    Ok(LdpOutcome { replacement: replacement.to_string(), distance, source, epsilon_spent: epsilon })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<(String, Gender)> {
        (0..n).map(|i| (format!("Name{i:03}"), Gender::ALL[i % 3])).collect()
    }

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn synthetic_vectors_are_unit_and_keyed() {
        let a = synthetic_vector("Mary", 128, 1);
        assert_eq!(a, synthetic_vector("MARY", 128, 1));
        assert_ne!(a, synthetic_vector("Mary", 128, 2));
        let n = l2_norm(a.iter().map(|&x| x as f64));
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn byte_round_trip() {
        let table = EmbeddingTable::synthetic(names(10), 16, 7).unwrap();
        let bytes = table.to_bytes();
        let expected: usize = TABLE_HEADER_LEN + table.entries().map(|e| 2 + e.name.len() + 1 + 4 * 16).sum::<usize>();
        assert_eq!(bytes.len(), expected);
        assert_eq!(&bytes[..4], b"WDET");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 10);
        let back = EmbeddingTable::from_bytes(&bytes).unwrap();
        assert_eq!(back.entries().collect::<Vec<_>>(), table.entries().collect::<Vec<_>>());
    }

    #[test]
    fn malformed_tables_are_rejected() {
        let table = EmbeddingTable::synthetic(names(3), 4, 7).unwrap();
        let bytes = table.to_bytes();
        assert!(matches!(EmbeddingTable::from_bytes(&bytes[..bytes.len() - 1]), Err(TableError::Truncated(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(EmbeddingTable::from_bytes(&extra), Err(TableError::TrailingBytes(1))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(EmbeddingTable::from_bytes(&magic), Err(TableError::BadMagic)));

        // Scale the first vector component of the first entry.
        let mut bad_norm = bytes.clone();
        let name_len = u16::from_le_bytes(bad_norm[12..14].try_into().unwrap()) as usize;
        let at = 14 + name_len + 1;
        let x = f32::from_le_bytes(bad_norm[at..at + 4].try_into().unwrap());
        bad_norm[at..at + 4].copy_from_slice(&(x + 0.5).to_le_bytes());
        assert!(matches!(EmbeddingTable::from_bytes(&bad_norm), Err(TableError::NotNormalized { .. })));

        let dup = vec![("A", Gender::F), ("A", Gender::F)];
        assert!(matches!(EmbeddingTable::synthetic(dup, 4, 1), Err(TableError::Duplicate { .. })));
        // The same name in two partitions is fine.
        let split = vec![("Jordan", Gender::M), ("Jordan", Gender::N)];
        let t = EmbeddingTable::synthetic(split, 4, 1).unwrap();
        assert_eq!(t.gender_of("jordan"), None);
    }

    #[test]
    fn nearest_neighbor_of_member_is_itself() {
        let table = EmbeddingTable::synthetic(names(30), 32, 3).unwrap();
        for e in table.entries() {
            let v: Vec<f64> = e.vector.iter().map(|&x| x as f64).collect();
            let (name, dist) = nearest_neighbor(&v, &table, e.gender).unwrap();
            assert_eq!(name, e.name);
            assert!(dist < 1e-12);
        }
    }

    #[test]
    fn ties_go_to_smaller_name() {
        let entries = vec![
            EmbeddingEntry { name: "Zed".into(), gender: Gender::N, vector: vec![1.0, 0.0] },
            EmbeddingEntry { name: "Abe".into(), gender: Gender::N, vector: vec![0.0, 1.0] },
        ];
        let table = EmbeddingTable::from_entries(2, entries).unwrap();
        let (name, _) = nearest_neighbor(&[0.5, 0.5], &table, Gender::N).unwrap();
        assert_eq!(name, "Abe");
    }

    #[test]
    fn nearest_neighbor_matches_brute_force() {
        let table = EmbeddingTable::synthetic((0..1000).map(|i| (format!("n{i}"), Gender::F)), 24, 11).unwrap();
        let all: Vec<EmbeddingEntry> = table.entries().collect();
        let mut r = rng(12);
        for _ in 0..100 {
            let v: Vec<f64> = (0..24).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
            let brute = all
                .iter()
                .map(|e| {
                    let d: f64 = e.vector.iter().zip(&v).map(|(&a, b)| (a as f64 - b).powi(2)).sum();
                    (d, e.name.as_str())
                })
                .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)))
                .unwrap();
            assert_eq!(nearest_neighbor(&v, &table, Gender::F).unwrap().0, brute.1);
        }
    }

    #[test]
    fn errors() {
        let table = EmbeddingTable::synthetic(vec![("Mary", Gender::F)], 8, 1).unwrap();
        assert_eq!(
            nearest_neighbor(&[0.0; 3], &table, Gender::F),
            Err(DpError::DimensionMismatch { expected: 8, actual: 3 })
        );
        assert_eq!(
            embed_ldp("Mary", 1.0, &table, Gender::M, None, &mut rng(1)),
            Err(DpError::EmptyPartition(Gender::M))
        );
        assert!(matches!(
            embed_ldp("Mary", 0.0, &table, Gender::F, None, &mut rng(1)),
            Err(DpError::InvalidEpsilon(_))
        ));
    }

    #[test]
    fn zero_noise_returns_self() {
        let table = EmbeddingTable::synthetic(names(50), 128, 5).unwrap();
        let mut r = rng(2);
        for (name, g) in names(50) {
            let out = embed_ldp(&name, 1e12, &table, g, None, &mut r).unwrap();
            assert_eq!(out.replacement, name);
            assert_eq!(out.source, EmbedSource::Table);
        }
    }

    #[test]
    fn sources_are_reported() {
        struct Fixed;
        impl Embedder for Fixed {
            fn embed(&self, _: &str, dim: usize) -> Option<Vec<f32>> {
                let mut v = vec![0.0; dim];
                v[0] = 3.0;
                Some(v)
            }
        }
        let table = EmbeddingTable::synthetic(names(6), 8, 5).unwrap();
        let mut r = rng(3);
        let synth = embed_ldp("Unknown", 1.0, &table, Gender::F, None, &mut r).unwrap();
        assert_eq!(synth.source, EmbedSource::Synthetic);
        let prov = embed_ldp("Unknown", 1.0, &table, Gender::F, Some(&Fixed), &mut r).unwrap();
        assert_eq!(prov.source, EmbedSource::Provider);
        assert!(table.names(Gender::F).contains(&prov.replacement));
    }

    #[test]
    fn seeded_runs_reproduce() {
        let table = EmbeddingTable::synthetic(names(30), 32, 5).unwrap();
        let run = |seed| {
            let mut r = rng(seed);
            (0..20)
                .map(|_| embed_ldp("Name000", 10.0, &table, Gender::F, None, &mut r).unwrap().replacement)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(8), run(8));
    }
}
