//! Desk-scale synthetic cohorts with planted subpopulation and patient structure.
//!
//! Each subpopulation owns a noisy-OR dependency table: the probability that
//! event `j` fires in window `t+1` is
//! `1 - (1 - leak_j) · Π_{i active at t} (1 - link_ij)`.
//! Each patient additionally carries a personal rate vector (a few events it
//! tends to produce regardless of history), mixed in with weight
//! `patient_noise`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, EventSequence, EventVocabulary, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyTable {
    /// Background probability of each event.
    pub leak: Vec<f64>,
    /// `links[i][j]`: chance that an occurrence of `i` triggers `j` in the next window.
    pub links: Vec<Vec<f64>>,
}

impl DependencyTable {
    pub fn n_events(&self) -> usize {
        self.leak.len()
    }

    /// Probability that event `j` occurs in the window after `prev`.
    pub fn probability(&self, prev: &[u8], j: usize) -> f64 {
        let mut off = 1.0 - self.leak[j];
        for (i, &y) in prev.iter().enumerate() {
            if y == 1 {
                off *= 1.0 - self.links[i][j];
            }
        }
        1.0 - off
    }

    fn random(n: usize, links_per_event: usize, strength: (f64, f64), rng: &mut ChaCha8Rng) -> Self {
        let leak = (0..n).map(|_| rng.random_range(0.005..0.03)).collect();
        let mut links = vec![vec![0.0; n]; n];
        for (i, row) in links.iter_mut().enumerate() {
            if rng.random_bool(0.5) {
                row[i] = rng.random_range(strength.0..strength.1);
            }
            for j in sample(rng, n, links_per_event.min(n)) {
                if j != i {
                    row[j] = rng.random_range(strength.0..strength.1);
                }
            }
        }
        Self { leak, links }
    }

    fn validate(&self, n: usize) -> Result<()> {
        let ok_prob = |p: &f64| (0.0..=1.0).contains(p);
        if self.leak.len() != n || self.links.len() != n || self.links.iter().any(|r| r.len() != n) {
            return Err(DataError::InvalidSpec(format!("dependency table must be {n}x{n}")));
        }
        if !self.leak.iter().all(ok_prob) || !self.links.iter().flatten().all(ok_prob) {
            return Err(DataError::InvalidSpec("table entries must be probabilities".into()));
        }
        Ok(())
    }
}

/// Fully specified generator input.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_patients: usize,
    pub n_event_types: usize,
    pub n_subpopulations: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Per-event probabilities for the first window.
    pub base_rates: Vec<f64>,
    pub subpop_tables: Vec<DependencyTable>,
    /// Weight of the patient-specific component, in `[0, 1]`.
    pub patient_noise: f64,
    /// Expected fraction of event types that are "personal" for a patient.
    pub personal_event_fraction: f64,
    /// Range of a personal event's rate.
    pub personal_rate: (f64, f64),
    pub window_hours: f64,
    pub rng_seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if self.n_event_types < 2 {
            return bad("need at least 2 event types");
        }
        if self.n_subpopulations == 0 || self.subpop_tables.len() != self.n_subpopulations {
            return bad("need one dependency table per subpopulation (at least one)");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("sequence lengths must satisfy 1 <= min_len <= max_len");
        }
        if self.base_rates.len() != self.n_event_types || !self.base_rates.iter().all(|p| (0.0..=1.0).contains(p)) {
            return bad("base_rates must hold one probability per event type");
        }
        let unit = 0.0..=1.0;
        if !unit.contains(&self.patient_noise) || !unit.contains(&self.personal_event_fraction) {
            return bad("patient_noise and personal_event_fraction must lie in [0, 1]");
        }
        let (lo, hi) = self.personal_rate;
        if !(unit.contains(&lo) && unit.contains(&hi) && lo <= hi) {
            return bad("personal_rate must be an ordered pair of probabilities");
        }
        if !(self.window_hours.is_finite() && self.window_hours > 0.0) {
            return bad("window_hours must be positive");
        }
        for t in &self.subpop_tables {
            t.validate(self.n_event_types)?;
        }
        Ok(())
    }
}

/// Config-file form of a synthetic cohort; the dependency tables are drawn
/// from `rng_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub n_event_types: usize,
    pub n_subpopulations: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub base_rate: f64,
    pub patient_noise: f64,
    pub links_per_event: usize,
    pub link_strength_min: f64,
    pub link_strength_max: f64,
    pub personal_event_fraction: f64,
    pub personal_rate_min: f64,
    pub personal_rate_max: f64,
    pub window_hours: f64,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 200,
            n_event_types: 20,
            n_subpopulations: 3,
            min_len: 10,
            max_len: 30,
            base_rate: 0.1,
            patient_noise: 0.3,
            links_per_event: 2,
            link_strength_min: 0.3,
            link_strength_max: 0.8,
            personal_event_fraction: 0.08,
            personal_rate_min: 0.8,
            personal_rate_max: 1.0,
            window_hours: 24.0,
            rng_seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn to_spec(&self) -> Result<SyntheticSpec> {
        if self.n_event_types < 2 {
            return Err(DataError::InvalidSpec("need at least 2 event types".into()));
        }
        let (lo, hi) = (self.link_strength_min, self.link_strength_max);
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
            return Err(DataError::InvalidSpec("link strengths must satisfy 0 <= min < max <= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(1);
        let subpop_tables = (0..self.n_subpopulations)
            .map(|_| DependencyTable::random(self.n_event_types, self.links_per_event, (lo, hi), &mut rng))
            .collect();
        let spec = SyntheticSpec {
            n_patients: self.n_patients,
            n_event_types: self.n_event_types,
            n_subpopulations: self.n_subpopulations,
            min_len: self.min_len,
            max_len: self.max_len,
            base_rates: vec![self.base_rate; self.n_event_types],
            subpop_tables,
            patient_noise: self.patient_noise,
            personal_event_fraction: self.personal_event_fraction,
            personal_rate: (self.personal_rate_min, self.personal_rate_max),
            window_hours: self.window_hours,
            rng_seed: self.rng_seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub vocabulary: EventVocabulary,
    pub sequences: Vec<EventSequence>,
    /// Planted subpopulation of each sequence, aligned with `sequences`.
    pub subpopulation: Vec<usize>,
}

impl SyntheticData {
    pub fn ground_truth(&self) -> Vec<(String, usize)> {
        self.sequences.iter().map(|s| s.patient_id.clone()).zip(self.subpopulation.iter().copied()).collect()
    }
}

/// Samples a cohort. Deterministic in `spec.rng_seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let n = spec.n_event_types;
    let vocabulary = EventVocabulary::synthetic(n);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    rng.set_stream(2);
    let noise = spec.patient_noise;
    let mut sequences = Vec::with_capacity(spec.n_patients);
    let mut subpopulation = Vec::with_capacity(spec.n_patients);
    for p in 0..spec.n_patients {
        let group = rng.random_range(0..spec.n_subpopulations);
        let table = &spec.subpop_tables[group];
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let personal: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random_bool(spec.personal_event_fraction) {
                    rng.random_range(spec.personal_rate.0..=spec.personal_rate.1)
                } else {
                    0.0
                }
            })
            .collect();
        let mut inputs: Vec<Vec<u8>> = Vec::with_capacity(len);
        let mut first: Vec<u8> = (0..n)
            .map(|j| u8::from(rng.random_bool((1.0 - noise) * spec.base_rates[j] + noise * personal[j])))
            .collect();
        // every admission records at least one event
        if first.iter().all(|&b| b == 0) {
            first[rng.random_range(0..n)] = 1;
        }
        inputs.push(first);
        for t in 1..len {
            let prev = &inputs[t - 1];
            let next: Vec<u8> = (0..n)
                .map(|j| {
                    let q = (1.0 - noise) * table.probability(prev, j) + noise * personal[j];
                    u8::from(rng.random_bool(q.clamp(0.0, 1.0)))
                })
                .collect();
            inputs.push(next);
        }
        sequences.push(EventSequence::from_inputs(
            format!("P{p:05}"),
            inputs,
            vocabulary.target_indices(),
            spec.window_hours,
        ));
        subpopulation.push(group);
    }
    Ok(SyntheticData { vocabulary, sequences, subpopulation })
}
