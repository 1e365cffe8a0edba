//! Non-parametric memory of `(hidden state, next-window target)` pairs
//! harvested from the training set, with exact k-nearest-neighbor retrieval.
//!
//! Distances are squared Euclidean; they order neighbors exactly as the
//! Euclidean distance (or an RBF similarity) would.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::event_data::EventSequence;
use crate::neural::{hidden_trajectory, HiddenState, ModelError, ModelState};

pub const BANK_MAGIC: [u8; 8] = *b"EVADBANK";
pub const BANK_FORMAT_VERSION: u32 = 1;

#[derive(Error, Debug)]
pub enum MemoryError {
    #[error("memory bank is empty")]
    EmptyBank,
    #[error("no training data to build a memory from")]
    EmptyData,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("bank file version error: {0}")]
    Version(String),
    #[error("bank file format error: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MemoryError> = std::result::Result<T, E>;

/// Where a memory entry came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub patient_id: String,
    /// 0-based index of the last window read before the key was taken.
    pub step: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    hidden_dim: usize,
    n_target: usize,
    /// Row-major `len × hidden_dim`.
    keys: Vec<f64>,
    /// Row-major `len × n_target`, entries 0/1.
    values: Vec<u8>,
    provenance: Vec<Provenance>,
}

impl MemoryBank {
    pub fn new(hidden_dim: usize, n_target: usize) -> Self {
        Self { hidden_dim, n_target, keys: Vec::new(), values: Vec::new(), provenance: Vec::new() }
    }

    pub fn push(&mut self, key: &[f64], value: &[u8], provenance: Provenance) -> Result<()> {
        if key.len() != self.hidden_dim {
            return Err(MemoryError::DimensionMismatch { expected: self.hidden_dim, got: key.len() });
        }
        if value.len() != self.n_target {
            return Err(MemoryError::DimensionMismatch { expected: self.n_target, got: value.len() });
        }
        if !key.iter().all(|x| x.is_finite()) {
            return Err(MemoryError::Format("non-finite key".into()));
        }
        if value.iter().any(|&b| b > 1) {
            return Err(MemoryError::Format("non-binary value".into()));
        }
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        self.provenance.push(provenance);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn n_target(&self) -> usize {
        self.n_target
    }

    pub fn key(&self, i: usize) -> &[f64] {
        &self.keys[i * self.hidden_dim..(i + 1) * self.hidden_dim]
    }

    pub fn value(&self, i: usize) -> &[u8] {
        &self.values[i * self.n_target..(i + 1) * self.n_target]
    }

    pub fn provenance(&self, i: usize) -> &Provenance {
        &self.provenance[i]
    }

    /// Squared Euclidean distance between entry `i` and `query`.
    pub fn distance(&self, i: usize, query: &[f64]) -> f64 {
        self.key(i).iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

/// Runs the frozen model over every training sequence and stores
/// `(h_t, targets[t + 1])` for each supervised step.
pub fn build_memory(model: &ModelState, train_data: &[EventSequence]) -> Result<MemoryBank> {
    if train_data.is_empty() {
        return Err(MemoryError::EmptyData);
    }
    let mut bank = MemoryBank::new(model.config.hidden_dim, model.config.n_target);
    for seq in train_data {
        if seq.len() < 2 {
            continue;
        }
        let traj = hidden_trajectory(model, &seq.inputs[..seq.n_pairs()])?;
        for (t, h) in traj.iter().enumerate() {
            bank.push(
                h.as_slice(),
                seq.pair_target(t),
                Provenance { patient_id: seq.patient_id.clone(), step: t as u32 },
            )?;
        }
    }
    Ok(bank)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    /// Row in the bank.
    pub index: usize,
    /// Squared Euclidean distance to the query.
    pub distance: f64,
}

/// Up to `k` neighbors sorted by ascending distance, ties by bank order.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    pub k: usize,
    pub entries: Vec<Neighbor>,
}

impl Neighborhood {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|n| n.index)
    }
}

#[derive(PartialEq)]
struct Candidate(Neighbor);

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.distance.total_cmp(&other.0.distance).then(self.0.index.cmp(&other.0.index))
    }
}

/// Exact k-nearest neighbors by linear scan with a bounded max-heap.
pub fn knn(bank: &MemoryBank, query: &HiddenState, k: usize) -> Result<Neighborhood> {
    knn_slice(bank, query.as_slice(), k)
}

pub fn knn_slice(bank: &MemoryBank, query: &[f64], k: usize) -> Result<Neighborhood> {
    if k == 0 {
        return Err(MemoryError::InvalidK);
    }
    if bank.is_empty() {
        return Err(MemoryError::EmptyBank);
    }
    if query.len() != bank.hidden_dim {
        return Err(MemoryError::DimensionMismatch { expected: bank.hidden_dim, got: query.len() });
    }
    let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
    for index in 0..bank.len() {
        let c = Candidate(Neighbor { index, distance: bank.distance(index, query) });
        if heap.len() < k {
            heap.push(c);
        } else if c < *heap.peek().expect("heap holds k items") {
            heap.pop();
            heap.push(c);
        }
    }
    let entries = heap.into_sorted_vec().into_iter().map(|c| c.0).collect();
    Ok(Neighborhood { k, entries })
}

fn truncated(e: std::io::Error) -> MemoryError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        MemoryError::Format("file is truncated".into())
    } else {
        MemoryError::Io(e)
    }
}

/// Binary layout: magic `EVADBANK`, `u32` version, `u64` n_entries,
/// `u64` hidden_dim, `u64` n_target, keys as `f64`, values packed 8 per byte
/// (LSB first, row-major, final byte zero-padded), then per entry a `u32`
/// step, a `u32` byte length and the UTF-8 patient id. Little-endian.
pub fn write_bank<W: Write>(mut w: W, bank: &MemoryBank) -> Result<()> {
    w.write_all(&BANK_MAGIC)?;
    w.write_u32::<LittleEndian>(BANK_FORMAT_VERSION)?;
    for d in [bank.len(), bank.hidden_dim, bank.n_target] {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    for &x in &bank.keys {
        w.write_f64::<LittleEndian>(x)?;
    }
    for chunk in bank.values.chunks(8) {
        let byte = chunk.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | (b << i));
        w.write_u8(byte)?;
    }
    for p in &bank.provenance {
        w.write_u32::<LittleEndian>(p.step)?;
        w.write_u32::<LittleEndian>(p.patient_id.len() as u32)?;
        w.write_all(p.patient_id.as_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bank<R: Read>(mut r: R) -> Result<MemoryBank> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if magic != BANK_MAGIC {
        return Err(MemoryError::Version(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != BANK_FORMAT_VERSION {
        return Err(MemoryError::Version(format!("unsupported format version {version}")));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let v = r.read_u64::<LittleEndian>().map_err(truncated)?;
        *d = usize::try_from(v).ok().filter(|&v| v < 1 << 40).ok_or_else(|| MemoryError::Format(format!("bad dimension {v}")))?;
    }
    let [n, hidden_dim, n_target] = dims;
    let n_keys = n.checked_mul(hidden_dim).filter(|&x| x < 1 << 32).ok_or_else(|| MemoryError::Format("bank too large".into()))?;
    let mut keys = vec![0.0; n_keys];
    r.read_f64_into::<LittleEndian>(&mut keys).map_err(truncated)?;
    let n_values = n * n_target;
    let mut packed = vec![0u8; n_values.div_ceil(8)];
    r.read_exact(&mut packed).map_err(truncated)?;
    let values = (0..n_values).map(|i| (packed[i / 8] >> (i % 8)) & 1).collect();
    let mut provenance = Vec::with_capacity(n);
    for _ in 0..n {
        let step = r.read_u32::<LittleEndian>().map_err(truncated)?;
        let len = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(truncated)?;
        let patient_id = String::from_utf8(buf).map_err(|_| MemoryError::Format("patient id is not UTF-8".into()))?;
        provenance.push(Provenance { patient_id, step });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(MemoryError::Format("trailing bytes after bank".into()));
    }
    Ok(MemoryBank { hidden_dim, n_target, keys, values, provenance })
}

pub fn save_bank(path: impl AsRef<Path>, bank: &MemoryBank) -> Result<()> {
    write_bank(BufWriter::new(File::create(path)?), bank)
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<MemoryBank> {
    read_bank(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_data::EventVocabulary;
    use crate::neural::{forward_step, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_bank(n: usize, dim: usize, seed: u64) -> MemoryBank {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = MemoryBank::new(dim, 3);
        for i in 0..n {
            let key: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let value: Vec<u8> = (0..3).map(|_| rng.random_range(0..2)).collect();
            bank.push(&key, &value, Provenance { patient_id: format!("p{}", i % 17), step: i as u32 }).unwrap();
        }
        bank
    }

    /// Full sort of every distance, stable in bank order.
    fn oracle(bank: &MemoryBank, q: &[f64], k: usize) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> =
            (0..bank.len()).map(|i| Neighbor { index: i, distance: bank.distance(i, q) }).collect();
        all.sort_by(|a, b| a.distance.total_cmp(&b.distance));
        all.truncate(k);
        all
    }

    #[test]
    fn matches_full_sort_oracle() {
        let bank = random_bank(200, 6, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let q: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert_eq!(knn_slice(&bank, &q, 7).unwrap().entries, oracle(&bank, &q, 7));
        }
    }

    #[test]
    fn exact_key_comes_first_and_large_k_returns_all() {
        let bank = random_bank(20, 4, 3);
        let q = bank.key(11).to_vec();
        let nb = knn_slice(&bank, &q, 3).unwrap();
        assert_eq!(nb.entries[0], Neighbor { index: 11, distance: 0.0 });
        let all = knn_slice(&bank, &q, 50).unwrap();
        assert_eq!(all.len(), 20);
        assert!(all.entries.windows(2).all(|w| w[0].distance <= w[1].distance));
    }

    #[test]
    fn ties_follow_insertion_order() {
        let mut bank = MemoryBank::new(1, 1);
        for i in 0..5 {
            bank.push(&[1.0], &[0], Provenance { patient_id: "x".into(), step: i }).unwrap();
        }
        let nb = knn_slice(&bank, &[0.0], 3).unwrap();
        assert_eq!(nb.indices().collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn errors() {
        let empty = MemoryBank::new(2, 1);
        assert!(matches!(knn_slice(&empty, &[0.0, 0.0], 1), Err(MemoryError::EmptyBank)));
        let bank = random_bank(3, 2, 0);
        assert!(matches!(knn_slice(&bank, &[0.0, 0.0], 0), Err(MemoryError::InvalidK)));
        assert!(matches!(knn_slice(&bank, &[0.0], 1), Err(MemoryError::DimensionMismatch { .. })));
    }

    fn model() -> ModelState {
        ModelState::new(ModelConfig { embed_dim: 3, hidden_dim: 5, ..ModelConfig::new(4, 4) }).unwrap()
    }

    fn seqs() -> Vec<EventSequence> {
        let v = EventVocabulary::synthetic(4);
        let mk = |id: &str, inputs: Vec<Vec<u8>>| EventSequence::from_inputs(id, inputs, v.target_indices(), 24.0);
        vec![
            mk("a", vec![vec![1, 0, 0, 0], vec![0, 1, 0, 0], vec![0, 0, 1, 0], vec![0, 0, 0, 1]]),
            mk("b", vec![vec![1, 1, 0, 0], vec![0, 0, 1, 1], vec![1, 0, 1, 0]]),
            mk("c", vec![vec![1, 0, 0, 0], vec![0, 1, 0, 0], vec![0, 0, 1, 0], vec![0, 0, 0, 1]]),
        ]
    }

    #[test]
    fn build_stores_one_entry_per_supervised_step() {
        let m = model();
        let data = seqs();
        let bank = build_memory(&m, &data[..2]).unwrap();
        assert_eq!(bank.len(), 3 + 2);
        let full = build_memory(&m, &data).unwrap();
        assert_eq!(full.len(), data.iter().map(|s| s.len() - 1).sum::<usize>());
        // identical sequences a and c produce identical keys
        for t in 0..3 {
            assert_eq!(full.key(t), full.key(5 + t));
        }
        // replay oracle: an independent step-by-step unroll
        let mut h = HiddenState::zeros(5);
        for t in 0..3 {
            h = forward_step(&m, &h, &data[0].inputs[t]).unwrap().0;
            assert_eq!(full.key(t), h.as_slice());
            assert_eq!(full.value(t), data[0].inputs[t + 1].as_slice());
            assert_eq!(full.provenance(t), &Provenance { patient_id: "a".into(), step: t as u32 });
        }
        assert!(matches!(build_memory(&m, &[]), Err(MemoryError::EmptyData)));
    }

    #[test]
    fn bank_round_trip() {
        let bank = random_bank(37, 5, 9);
        let mut buf = Vec::new();
        write_bank(&mut buf, &bank).unwrap();
        assert_eq!(read_bank(buf.as_slice()).unwrap(), bank);
        let mut cut = buf.clone();
        cut.truncate(buf.len() - 2);
        assert!(matches!(read_bank(cut.as_slice()), Err(MemoryError::Format(_))));
        let mut bad = buf.clone();
        bad[8] = 7;
        assert!(matches!(read_bank(bad.as_slice()), Err(MemoryError::Version(_))));
    }

    #[test]
    fn large_bank_round_trip_preserves_queries() {
        let bank = random_bank(10_000, 8, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.bin");
        save_bank(&path, &bank).unwrap();
        let back = load_bank(&path).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let q: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert_eq!(knn_slice(&bank, &q, 32).unwrap(), knn_slice(&back, &q, 32).unwrap());
        }
    }
}
