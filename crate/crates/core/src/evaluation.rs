//! AUPRC and the breakdowns built on it: per step, per event type, per
//! category, repetitive versus first-time events, plus switch selection
//! ratios and per-event gain tables.
//!
//! The overall figure is micro-pooled over every (patient, step, event)
//! instance. Macro figures average per-event AUPRC over events that have at
//! least one positive; events without positives are reported as NaN.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::event_data::{Category, EventSequence, EventVocabulary};
use crate::switching::{Strategy, SwitchTrace};

#[derive(Error, Debug)]
pub enum EvalError {
    #[error("no prediction records to evaluate")]
    Empty,
    #[error("record for {patient:?} step {step} has {got} components, expected {expected}")]
    Shape { patient: String, step: usize, expected: usize, got: usize },
    #[error("record for {patient:?} step {step} does not match its sequence")]
    Misaligned { patient: String, step: usize },
    #[error("no sequence for patient {0:?}")]
    UnknownPatient(String),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// One emitted prediction. `step` counts the windows observed so far; the
/// prediction is for window `step` (0-based) of the patient's sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub patient_id: String,
    pub step: usize,
    pub strategy: Strategy,
    pub scores: Vec<f64>,
    pub target: Vec<u8>,
}

/// Average precision: scores are visited in descending order and precision
/// is summed at every recall increment. Tied scores form one threshold.
/// Returns NaN when there are no positive labels.
pub fn auprc(scores: &[f64], labels: &[u8]) -> f64 {
    assert_eq!(scores.len(), labels.len(), "scores and labels must align");
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 {
        return f64::NAN;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut block_tp = 0;
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                block_tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        tp += block_tp;
        if block_tp > 0 {
            ap += (tp as f64 / (tp + fp) as f64) * block_tp as f64;
        }
    }
    ap / n_pos as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetric {
    pub step: usize,
    pub n_patients: usize,
    pub auprc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventMetric {
    pub index: usize,
    pub name: String,
    pub category: Category,
    pub n_positive: usize,
    pub auprc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryMetric {
    pub category: Category,
    /// Events of this category with at least one positive.
    pub n_events: usize,
    pub macro_auprc: f64,
    pub micro_auprc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub n_instances: usize,
    pub overall_micro: f64,
    pub overall_macro: f64,
    pub per_step: Vec<StepMetric>,
    pub per_event: Vec<EventMetric>,
    pub per_category: Vec<CategoryMetric>,
}

impl MetricReport {
    /// Target slots with no positive instance; left out of macro averages.
    pub fn excluded_events(&self) -> Vec<usize> {
        self.per_event.iter().filter(|e| e.n_positive == 0).map(|e| e.index).collect()
    }
}

fn nan_mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().filter(|x| !x.is_nan()).fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

#[derive(Default)]
struct Pool {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl Pool {
    fn push(&mut self, s: f64, y: u8) {
        self.scores.push(s);
        self.labels.push(y);
    }

    fn auprc(&self) -> f64 {
        auprc(&self.scores, &self.labels)
    }
}

fn check_records(records: &[PredictionRecord], n_target: usize) -> Result<()> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    for r in records {
        for len in [r.scores.len(), r.target.len()] {
            if len != n_target {
                return Err(EvalError::Shape {
                    patient: r.patient_id.clone(),
                    step: r.step,
                    expected: n_target,
                    got: len,
                });
            }
        }
    }
    Ok(())
}

/// Metrics over one strategy's records.
pub fn evaluate(records: &[PredictionRecord], vocab: &EventVocabulary) -> Result<MetricReport> {
    let n_target = vocab.n_targets();
    check_records(records, n_target)?;
    let mut all = Pool::default();
    let mut by_event: Vec<Pool> = (0..n_target).map(|_| Pool::default()).collect();
    let mut by_step: BTreeMap<usize, (Pool, usize)> = BTreeMap::new();
    for r in records {
        let (step_pool, n) = by_step.entry(r.step).or_default();
        *n += 1;
        for (j, (&s, &y)) in r.scores.iter().zip(&r.target).enumerate() {
            all.push(s, y);
            by_event[j].push(s, y);
            step_pool.push(s, y);
        }
    }
    let per_event: Vec<EventMetric> = by_event
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let e = vocab.target_entry(j);
            EventMetric {
                index: j,
                name: e.name.clone(),
                category: e.category,
                n_positive: p.labels.iter().filter(|&&y| y == 1).count(),
                auprc: p.auprc(),
            }
        })
        .collect();
    let per_category = Category::ALL
        .iter()
        .filter_map(|&c| {
            let members: Vec<usize> = (0..n_target).filter(|&j| vocab.target_entry(j).category == c).collect();
            if members.is_empty() {
                return None;
            }
            let mut pooled = Pool::default();
            for &j in &members {
                pooled.scores.extend(&by_event[j].scores);
                pooled.labels.extend(&by_event[j].labels);
            }
            Some(CategoryMetric {
                category: c,
                n_events: members.iter().filter(|&&j| per_event[j].n_positive > 0).count(),
                macro_auprc: nan_mean(members.iter().map(|&j| per_event[j].auprc)),
                micro_auprc: pooled.auprc(),
            })
        })
        .collect();
    Ok(MetricReport {
        n_instances: all.scores.len(),
        overall_micro: all.auprc(),
        overall_macro: nan_mean(per_event.iter().map(|e| e.auprc)),
        per_step: by_step
            .into_iter()
            .map(|(step, (pool, n))| StepMetric { step, n_patients: n, auprc: pool.auprc() })
            .collect(),
        per_event,
        per_category,
    })
}

/// Splits records by strategy and evaluates each group.
pub fn evaluate_strategies(
    records: &[PredictionRecord],
    vocab: &EventVocabulary,
) -> Result<BTreeMap<Strategy, MetricReport>> {
    let mut groups: BTreeMap<Strategy, Vec<PredictionRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.strategy).or_default().push(r.clone());
    }
    if groups.is_empty() {
        return Err(EvalError::Empty);
    }
    groups.into_iter().map(|(s, rs)| Ok((s, evaluate(&rs, vocab)?))).collect()
}

/// A single (patient, step, event) prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Instance {
    pub step: usize,
    pub event: usize,
    pub score: f64,
    pub label: u8,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RepetitiveSplit {
    /// The event type already occurred before the predicted window.
    pub repetitive: Vec<Instance>,
    pub non_repetitive: Vec<Instance>,
}

impl RepetitiveSplit {
    pub fn repetitive_auprc(&self) -> f64 {
        instances_auprc(&self.repetitive)
    }

    pub fn non_repetitive_auprc(&self) -> f64 {
        instances_auprc(&self.non_repetitive)
    }
}

pub fn instances_auprc(xs: &[Instance]) -> f64 {
    let scores: Vec<f64> = xs.iter().map(|x| x.score).collect();
    let labels: Vec<u8> = xs.iter().map(|x| x.label).collect();
    auprc(&scores, &labels)
}

/// Classifies every prediction instance by whether its event type appears in
/// any window before the predicted one.
pub fn split_repetitive(records: &[PredictionRecord], sequences: &[EventSequence]) -> Result<RepetitiveSplit> {
    // first window index at which each target slot is present
    let first: HashMap<&str, (&EventSequence, Vec<usize>)> = sequences
        .iter()
        .map(|s| {
            let n = s.n_targets();
            let f = (0..n).map(|j| s.targets.iter().position(|t| t[j] == 1).unwrap_or(usize::MAX)).collect();
            (s.patient_id.as_str(), (s, f))
        })
        .collect();
    let mut out = RepetitiveSplit::default();
    for r in records {
        let (seq, f) = first.get(r.patient_id.as_str()).ok_or_else(|| EvalError::UnknownPatient(r.patient_id.clone()))?;
        if r.step == 0 || r.step >= seq.len() || seq.targets[r.step] != r.target || r.scores.len() != r.target.len() {
            return Err(EvalError::Misaligned { patient: r.patient_id.clone(), step: r.step });
        }
        for (j, (&score, &label)) in r.scores.iter().zip(&r.target).enumerate() {
            let inst = Instance { step: r.step, event: j, score, label };
            if f[j] < r.step {
                out.repetitive.push(inst);
            } else {
                out.non_repetitive.push(inst);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRatio {
    pub step: usize,
    pub n_patients: usize,
    /// Fraction choosing each label, in `ModelLabel::ALL` order.
    pub fractions: [f64; 4],
}

/// Per step, the share of patients whose global switch chose each model.
pub fn selection_ratio(traces: &[SwitchTrace]) -> Vec<SelectionRatio> {
    let mut counts: BTreeMap<usize, [usize; 4]> = BTreeMap::new();
    for tr in traces {
        for s in &tr.steps {
            counts.entry(s.step).or_default()[s.chosen.slot()] += 1;
        }
    }
    counts
        .into_iter()
        .map(|(step, c)| {
            let n: usize = c.iter().sum();
            SelectionRatio { step, n_patients: n, fractions: c.map(|k| k as f64 / n as f64) }
        })
        .collect()
}

/// Fraction of windows in which each target slot is present.
pub fn occurrence_rates(sequences: &[EventSequence], n_target: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_target];
    let mut windows = 0usize;
    for s in sequences {
        for t in &s.targets {
            windows += 1;
            for (c, &y) in counts.iter_mut().zip(t) {
                *c += y as usize;
            }
        }
    }
    counts.iter().map(|&c| if windows == 0 { 0.0 } else { c as f64 / windows as f64 }).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainRow {
    pub index: usize,
    pub name: String,
    pub auprc_a: f64,
    pub auprc_b: f64,
    /// Percent change from A to B; `None` when A's AUPRC is zero or undefined.
    pub gain: Option<f64>,
    pub occurrence: f64,
}

pub fn performance_gain_table(a: &MetricReport, b: &MetricReport, occurrence: &[f64]) -> Vec<GainRow> {
    a.per_event
        .iter()
        .zip(&b.per_event)
        .map(|(ea, eb)| {
            let gain = (ea.auprc.is_finite() && ea.auprc != 0.0 && eb.auprc.is_finite())
                .then(|| 100.0 * (eb.auprc - ea.auprc) / ea.auprc);
            GainRow {
                index: ea.index,
                name: ea.name.clone(),
                auprc_a: ea.auprc,
                auprc_b: eb.auprc,
                gain,
                occurrence: occurrence.get(ea.index).copied().unwrap_or(f64::NAN),
            }
        })
        .collect()
}
