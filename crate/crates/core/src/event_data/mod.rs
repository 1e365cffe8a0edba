//! Event vocabularies, raw timestamped logs and discretized binary sequences.
//!
//! A raw log is a list of `(event name, hours since admission)` pairs. It is
//! bucketed into non-overlapping windows of `W` hours; each window becomes a
//! binary vector with one slot per vocabulary entry.

mod discretize;
mod io;
mod split;
mod synthetic;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use discretize::{discretize, Discretized};
pub use io::{
    load_event_log, load_ground_truth, load_vocabulary, parse_event_log, save_event_log,
    save_ground_truth, save_vocabulary, sequences_to_logs,
};
pub use split::split_train_test;
pub use synthetic::{generate_synthetic, DependencyTable, SynthConfig, SyntheticData, SyntheticSpec};

/// A binary event vector. Every entry is exactly 0 or 1.
pub type EventVector = Vec<u8>;

#[derive(Error, Debug)]
pub enum DataError {
    #[error("event log for patient {0:?} is empty")]
    EmptyLog(String),
    #[error("event log for patient {0:?} has no events known to the vocabulary")]
    NoKnownEvents(String),
    #[error("patient {patient:?} has an invalid timestamp {timestamp}")]
    InvalidTimestamp { patient: String, timestamp: f64 },
    #[error("window length must be positive and finite, got {0}")]
    InvalidWindow(f64),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("split ratio must lie strictly between 0 and 1, got {0}")]
    InvalidRatio(f64),
    #[error("need at least 2 patients to split, got {0}")]
    TooFewPatients(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Medication,
    Lab,
    Procedure,
    Physiological,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Medication,
        Category::Lab,
        Category::Procedure,
        Category::Physiological,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Medication => "medication",
            Category::Lab => "lab",
            Category::Procedure => "procedure",
            Category::Physiological => "physiological",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "medication" => Ok(Category::Medication),
            "lab" => Ok(Category::Lab),
            "procedure" => Ok(Category::Procedure),
            "physiological" => Ok(Category::Physiological),
            other => Err(format!("unknown event category {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabEntry {
    pub name: String,
    pub category: Category,
    pub index: usize,
}

/// Maps event names to dense input indices and marks the predicted subset.
///
/// Target slot `j` of a target vector corresponds to the `j`-th input index
/// whose mask bit is set, in ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventVocabulary {
    entries: Vec<VocabEntry>,
    target_mask: Vec<bool>,
    target_indices: Vec<usize>,
    by_name: HashMap<String, usize>,
}

impl EventVocabulary {
    /// Builds a vocabulary; indices follow the order of `entries`.
    pub fn new<S: Into<String>>(entries: impl IntoIterator<Item = (S, Category, bool)>) -> Result<Self> {
        let mut out = Vec::new();
        let mut mask = Vec::new();
        let mut by_name = HashMap::new();
        for (index, (name, category, is_target)) in entries.into_iter().enumerate() {
            let name = name.into();
            if name.is_empty() || name.contains(['\t', '\n']) {
                return Err(DataError::InvalidVocabulary(format!(
                    "entry {index} has an empty name or contains tabs/newlines"
                )));
            }
            if by_name.insert(name.clone(), index).is_some() {
                return Err(DataError::InvalidVocabulary(format!("duplicate event name {name:?}")));
            }
            out.push(VocabEntry { name, category, index });
            mask.push(is_target);
        }
        if out.is_empty() {
            return Err(DataError::InvalidVocabulary("vocabulary is empty".into()));
        }
        let target_indices: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        if target_indices.is_empty() {
            return Err(DataError::InvalidVocabulary("no event is flagged as a target".into()));
        }
        Ok(Self { entries: out, target_mask: mask, target_indices, by_name })
    }

    /// Vocabulary `E000, E001, ...` with categories assigned round-robin and
    /// every type predicted.
    pub fn synthetic(n_event_types: usize) -> Self {
        let entries = (0..n_event_types).map(|i| (format!("E{i:03}"), Category::ALL[i % 4], true));
        Self::new(entries).expect("synthetic vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_targets(&self) -> usize {
        self.target_indices.len()
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &VocabEntry {
        &self.entries[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn target_mask(&self) -> &[bool] {
        &self.target_mask
    }

    /// Input indices of the target slots, ascending.
    pub fn target_indices(&self) -> &[usize] {
        &self.target_indices
    }

    /// Vocabulary entry behind target slot `j`.
    pub fn target_entry(&self, j: usize) -> &VocabEntry {
        &self.entries[self.target_indices[j]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawEvent {
    pub name: String,
    /// Hours since admission.
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawEventLog {
    pub patient_id: String,
    pub events: Vec<RawEvent>,
}

impl RawEventLog {
    pub fn new(patient_id: impl Into<String>, events: Vec<RawEvent>) -> Self {
        Self { patient_id: patient_id.into(), events }
    }

    pub fn is_sorted(&self) -> bool {
        self.events.windows(2).all(|w| w[0].timestamp <= w[1].timestamp)
    }
}

/// One patient's discretized sequence.
///
/// `targets[t]` is the target-masked projection of `inputs[t]`. The model
/// reads `inputs[..=t]` and predicts `targets[t + 1]`, so a sequence of
/// length `T` yields `T - 1` supervised pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSequence {
    pub patient_id: String,
    pub inputs: Vec<EventVector>,
    pub targets: Vec<EventVector>,
    pub window_hours: f64,
}

impl EventSequence {
    /// Builds a sequence, deriving targets from `target_indices`.
    pub fn from_inputs(
        patient_id: impl Into<String>,
        inputs: Vec<EventVector>,
        target_indices: &[usize],
        window_hours: f64,
    ) -> Self {
        let targets = inputs
            .iter()
            .map(|y| target_indices.iter().map(|&i| y[i]).collect())
            .collect();
        Self { patient_id: patient_id.into(), inputs, targets, window_hours }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Number of (prefix, next target) pairs.
    pub fn n_pairs(&self) -> usize {
        self.inputs.len().saturating_sub(1)
    }

    pub fn n_inputs(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn n_targets(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }

    /// Target of supervised pair `i`, i.e. the masked content of window `i + 1`.
    pub fn pair_target(&self, i: usize) -> &[u8] {
        &self.targets[i + 1]
    }

    /// The first `len` windows.
    pub fn prefix(&self, len: usize) -> EventSequence {
        let len = len.min(self.len());
        EventSequence {
            patient_id: self.patient_id.clone(),
            inputs: self.inputs[..len].to_vec(),
            targets: self.targets[..len].to_vec(),
            window_hours: self.window_hours,
        }
    }
}
