//! Online selection among the population, subpopulation, self-adapted and
//! combined models.
//!
//! At step `t` (the number of windows observed so far) every model predicts
//! window `t`. A model's discounted loss sums its past errors on windows that
//! have already been revealed, weighted by the recency kernel. The global
//! switch emits the prediction of the model with the lowest discounted loss;
//! the per-event switch picks a model separately for each event type.
//!
//! Ties are broken in the fixed order P, S, C, I so that the population model
//! wins whenever nothing distinguishes the candidates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptation::{
    adapt_combined_from, adapt_self, adapt_subpopulation, discount_kernel, AdaptConfig, AdaptError, AdaptResult,
};
use crate::evaluation::PredictionRecord;
use crate::event_data::EventSequence;
use crate::exec::{self, ExecMode};
use crate::memory::MemoryBank;
use crate::neural::{bce, bce_component, hidden_trajectory, predict_from_hidden, predict_next, HiddenState, ModelError, ModelState};

#[derive(Error, Debug)]
pub enum SwitchError {
    #[error("patient {0:?} has fewer than 2 windows")]
    TooShort(String),
    #[error("patient {patient:?}: {source}")]
    Adapt { patient: String, source: AdaptError },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = SwitchError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelLabel {
    /// Population model.
    P,
    /// Subpopulation-adapted model.
    S,
    /// Self-adapted model.
    I,
    /// Combined-adapted model.
    C,
}

impl ModelLabel {
    /// Storage order of per-model arrays.
    pub const ALL: [ModelLabel; 4] = [ModelLabel::P, ModelLabel::S, ModelLabel::I, ModelLabel::C];
    /// Order in which ties are resolved.
    pub const TIE_ORDER: [ModelLabel; 4] = [ModelLabel::P, ModelLabel::S, ModelLabel::C, ModelLabel::I];

    pub fn slot(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelLabel::P => "P",
            ModelLabel::S => "S",
            ModelLabel::I => "I",
            ModelLabel::C => "C",
        }
    }
}

impl fmt::Display for ModelLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        ModelLabel::ALL.into_iter().find(|l| l.as_str() == s).ok_or_else(|| format!("unknown model label {s:?}"))
    }
}

/// The six prediction streams emitted for every step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    GruPop,
    SubpopAdap,
    SelfAdapt,
    CombinedAdap,
    MetaSwitch,
    MetaSwitchEvent,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::GruPop,
        Strategy::SubpopAdap,
        Strategy::SelfAdapt,
        Strategy::CombinedAdap,
        Strategy::MetaSwitch,
        Strategy::MetaSwitchEvent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::GruPop => "GRU-POP",
            Strategy::SubpopAdap => "SubpopAdap",
            Strategy::SelfAdapt => "SelfAdapt",
            Strategy::CombinedAdap => "CombinedAdap",
            Strategy::MetaSwitch => "Meta-Switch",
            Strategy::MetaSwitchEvent => "Meta-Switch-Event",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Strategy::ALL.into_iter().find(|l| l.as_str() == s).ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

/// How the per-event switch scores candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventCriterion {
    /// Component error on the most recently revealed window.
    #[default]
    LastStep,
    /// Kernel-discounted component error over all revealed windows.
    Discounted,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwitchConfig {
    pub event_criterion: EventCriterion,
}

/// `Σ_{i=1}^{t-1} e(y_{i+1}, ŷ_{i+1}) · K(t, i)` where history entry `k`
/// holds the target and prediction made at step `k + 1`. Only entries for
/// steps before `t` count; an empty window yields `+∞`.
pub fn discounted_model_loss(targets: &[Vec<u8>], preds: &[Vec<f64>], t: usize, gamma: f64) -> f64 {
    let n = t.saturating_sub(1).min(targets.len()).min(preds.len());
    if n == 0 {
        return f64::INFINITY;
    }
    (0..n)
        .map(|k| bce(&targets[k], &preds[k]).expect("history entries are aligned") * discount_kernel(t, k + 1, gamma))
        .sum()
}

/// Argmin over models with ties resolved by `ModelLabel::TIE_ORDER`.
pub fn select_global(losses: &[f64; 4]) -> ModelLabel {
    let mut best = ModelLabel::TIE_ORDER[0];
    for l in ModelLabel::TIE_ORDER {
        if losses[l.slot()] < losses[best.slot()] {
            best = l;
        }
    }
    best
}

/// Componentwise argmin over per-event criteria.
pub fn select_per_event(criteria: &[[f64; 4]]) -> Vec<ModelLabel> {
    criteria.iter().map(select_global).collect()
}

/// Targets revealed so far and what each model predicted for them.
#[derive(Debug, Clone, Default)]
pub struct ModelPool {
    targets: Vec<Vec<u8>>,
    preds: [Vec<Vec<f64>>; 4],
}

impl ModelPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the outcome of one step. Must be called only after the step's
    /// predictions were emitted.
    pub fn record(&mut self, target: Vec<u8>, preds: [Vec<f64>; 4]) {
        self.targets.push(target);
        for (h, p) in self.preds.iter_mut().zip(preds) {
            h.push(p);
        }
    }

    pub fn n_recorded(&self) -> usize {
        self.targets.len()
    }

    pub fn losses(&self, t: usize, gamma: f64) -> [f64; 4] {
        ModelLabel::ALL.map(|l| discounted_model_loss(&self.targets, &self.preds[l.slot()], t, gamma))
    }

    /// Per event, the criterion value of every model; `+∞` before any
    /// window has been revealed.
    pub fn event_criteria(&self, t: usize, gamma: f64, criterion: EventCriterion) -> Vec<[f64; 4]> {
        let n_target = self.targets.first().map_or(0, Vec::len);
        let n = t.saturating_sub(1).min(self.targets.len());
        if n == 0 {
            return Vec::new();
        }
        (0..n_target)
            .map(|j| {
                ModelLabel::ALL.map(|l| {
                    let err = |k: usize| bce_component(self.targets[k][j], self.preds[l.slot()][k][j]);
                    match criterion {
                        EventCriterion::LastStep => err(n - 1),
                        EventCriterion::Discounted => (0..n).map(|k| err(k) * discount_kernel(t, k + 1, gamma)).sum(),
                    }
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchStep {
    pub step: usize,
    /// Discounted loss per model in `ModelLabel::ALL` order.
    pub losses: [f64; 4],
    pub chosen: ModelLabel,
    /// Per-event choice; all `P` on the first step.
    pub event_choices: Vec<ModelLabel>,
    /// Per-event criterion values behind `event_choices`; empty on the first step.
    pub event_criteria: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchTrace {
    pub patient_id: String,
    pub steps: Vec<SwitchStep>,
}

/// Loss trace of one adaptation call.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptLog {
    pub step: usize,
    pub label: ModelLabel,
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PatientRun {
    pub records: Vec<PredictionRecord>,
    pub trace: SwitchTrace,
    pub adapt_logs: Vec<AdaptLog>,
}

fn adapted_prediction(model: &ModelState, h_t: &HiddenState, prefix: &EventSequence, cfg: &AdaptConfig) -> Result<Vec<f64>> {
    if cfg.param_mask.recurrence_frozen() {
        Ok(predict_from_hidden(model, h_t))
    } else {
        Ok(predict_next(model, &prefix.inputs)?)
    }
}

/// Runs every strategy over one test sequence, strictly online: the
/// prediction for window `t` is computed from windows `0..t` only.
pub fn run_patient(
    pop: &ModelState,
    bank: &MemoryBank,
    seq: &EventSequence,
    adapt: &AdaptConfig,
    switch: &SwitchConfig,
) -> Result<PatientRun> {
    if seq.len() < 2 {
        return Err(SwitchError::TooShort(seq.patient_id.clone()));
    }
    let wrap = |source| SwitchError::Adapt { patient: seq.patient_id.clone(), source };
    adapt.validate().map_err(wrap)?;
    let pop_traj = hidden_trajectory(pop, &seq.inputs[..seq.n_pairs()])?;
    let mut pool = ModelPool::new();
    let mut warm: [Option<ModelState>; 3] = [None, None, None];
    let mut records = Vec::with_capacity(seq.n_pairs() * Strategy::ALL.len());
    let mut steps = Vec::with_capacity(seq.n_pairs());
    let mut adapt_logs = Vec::new();
    for t in 1..seq.len() {
        let prefix = seq.prefix(t);
        let h_t = &pop_traj[t - 1];
        let init = |i: usize| if adapt.warm_start { warm[i].as_ref().unwrap_or(pop) } else { pop };
        let s = adapt_subpopulation(init(0), bank, h_t, adapt).map_err(wrap)?;
        let i = adapt_self(init(1), &prefix, adapt).map_err(wrap)?;
        let c = adapt_combined_from(init(2), h_t, bank, &prefix, adapt).map_err(wrap)?;
        let p_pred = predict_from_hidden(pop, h_t);
        let s_pred = adapted_prediction(&s.model, h_t, &prefix, adapt)?;
        let i_pred = adapted_prediction(&i.model, h_t, &prefix, adapt)?;
        let c_pred = adapted_prediction(&c.model, h_t, &prefix, adapt)?;
        let preds = [p_pred, s_pred, i_pred, c_pred];

        let losses = pool.losses(t, adapt.gamma);
        let chosen = select_global(&losses);
        let event_criteria = pool.event_criteria(t, adapt.gamma, switch.event_criterion);
        let event_choices = if event_criteria.is_empty() {
            vec![ModelLabel::P; seq.n_targets()]
        } else {
            select_per_event(&event_criteria)
        };
        let meta = preds[chosen.slot()].clone();
        let meta_event: Vec<f64> = event_choices.iter().enumerate().map(|(j, l)| preds[l.slot()][j]).collect();

        let target = &seq.targets[t];
        let emitted = [&preds[0], &preds[1], &preds[2], &preds[3], &meta, &meta_event];
        for (strategy, scores) in Strategy::ALL.into_iter().zip(emitted) {
            records.push(PredictionRecord {
                patient_id: seq.patient_id.clone(),
                step: t,
                strategy,
                scores: scores.clone(),
                target: target.clone(),
            });
        }
        steps.push(SwitchStep { step: t, losses, chosen, event_choices, event_criteria });
        for (label, r) in [(ModelLabel::S, &s), (ModelLabel::I, &i), (ModelLabel::C, &c)] {
            adapt_logs.push(AdaptLog { step: t, label, loss_trace: r.loss_trace.clone() });
        }
        let keep = |r: AdaptResult| adapt.warm_start.then_some(r.model);
        warm = [keep(s), keep(i), keep(c)];
        // the target of this step is revealed only now
        pool.record(target.clone(), preds);
    }
    Ok(PatientRun { records, trace: SwitchTrace { patient_id: seq.patient_id.clone(), steps }, adapt_logs })
}

/// `run_patient` over many sequences; results keep the input order.
pub fn run_patients(
    pop: &ModelState,
    bank: &MemoryBank,
    seqs: &[EventSequence],
    adapt: &AdaptConfig,
    switch: &SwitchConfig,
    mode: ExecMode,
) -> Vec<Result<PatientRun>> {
    exec::map(mode, seqs, |s| run_patient(pop, bank, s, adapt, switch))
}
