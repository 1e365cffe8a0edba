//! Online adaptation of the population model: subpopulation adaptation on
//! retrieved neighbors, self-adaptation on the patient's own prefix with a
//! recency kernel, and the combination of both.
//!
//! Every call clones its initial model and resets the optimizer moments, so
//! the population model is never touched.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_data::EventSequence;
use crate::memory::{knn, MemoryBank, MemoryError};
use crate::neural::{
    head_loss_and_gradient, hidden_trajectory, loss_and_gradient, optimizer_step_with_lr, GradientSet,
    HeadExample, HiddenState, ModelError, ModelState, ParamMask, Parameters,
};

#[derive(Error, Debug)]
pub enum AdaptError {
    #[error("invalid adaptation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

pub type Result<T, E = AdaptError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// Stop once an epoch improves the loss by less than this.
    pub epsilon: f64,
    /// Bandwidth of the recency kernel.
    pub gamma: f64,
    /// Weight of the subpopulation term in the combined loss.
    pub mu: f64,
    pub k_neighbors: usize,
    pub adapt_lr: f64,
    pub param_mask: ParamMask,
    pub max_adapt_epochs: usize,
    /// Start step `t` from the model adapted at step `t - 1` instead of the
    /// population model.
    pub warm_start: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            gamma: 3.0,
            mu: 1.0,
            k_neighbors: 32,
            adapt_lr: 0.005,
            param_mask: ParamMask::OUTPUT,
            max_adapt_epochs: 50,
            warm_start: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AdaptError::InvalidConfig(m));
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.gamma.is_nan() || self.gamma <= 0.0 {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return bad(format!("mu must be nonnegative, got {}", self.mu));
        }
        if self.k_neighbors == 0 {
            return bad("k_neighbors must be at least 1".into());
        }
        if !(self.adapt_lr.is_finite() && self.adapt_lr > 0.0) {
            return bad(format!("adapt_lr must be positive, got {}", self.adapt_lr));
        }
        if self.max_adapt_epochs == 0 {
            return bad("max_adapt_epochs must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdaptResult {
    pub model: ModelState,
    pub epochs_run: usize,
    /// Objective value at the start of each epoch.
    pub loss_trace: Vec<f64>,
    pub wall_time: Duration,
}

impl AdaptResult {
    /// True when the run ended on the improvement threshold or at the cap.
    pub fn stopped_soundly(&self, cfg: &AdaptConfig) -> bool {
        stopped_soundly(&self.loss_trace, cfg)
    }
}

pub fn stopped_soundly(trace: &[f64], cfg: &AdaptConfig) -> bool {
    match trace {
        [] => true,
        [.., a, b] if a - b < cfg.epsilon => true,
        _ => trace.len() == cfg.max_adapt_epochs,
    }
}

/// `exp(-|t - i| / gamma)`.
pub fn discount_kernel(t: usize, i: usize, gamma: f64) -> f64 {
    (-(t.abs_diff(i) as f64) / gamma).exp()
}

/// Kernel weights for the supervised pairs of a prefix of `prefix_len`
/// windows. Pair `p` predicts window `p + 1` and is weighted by its distance
/// to the most recent window.
pub fn self_weights(prefix_len: usize, gamma: f64) -> Vec<f64> {
    (0..prefix_len.saturating_sub(1)).map(|p| discount_kernel(prefix_len, p + 1, gamma)).collect()
}

enum SelfTerm<'a> {
    /// Recurrence is frozen: hidden states are fixed, only the head moves.
    Head(Vec<(HiddenState, &'a [u8], f64)>),
    Full(&'a EventSequence, Vec<f64>),
}

fn self_term<'a>(init: &ModelState, prefix: &'a EventSequence, cfg: &AdaptConfig) -> Result<Option<SelfTerm<'a>>> {
    if prefix.len() < 2 {
        return Ok(None);
    }
    let weights = self_weights(prefix.len(), cfg.gamma);
    if !cfg.param_mask.recurrence_frozen() {
        return Ok(Some(SelfTerm::Full(prefix, weights)));
    }
    let traj = hidden_trajectory(init, &prefix.inputs[..prefix.n_pairs()])?;
    let examples = traj.into_iter().zip(weights).enumerate().map(|(p, (h, w))| (h, prefix.pair_target(p), w)).collect();
    Ok(Some(SelfTerm::Head(examples)))
}

fn neighbor_examples<'a>(bank: &'a MemoryBank, query: &HiddenState, k: usize) -> Result<Vec<HeadExample<'a>>> {
    let nb = knn(bank, query, k)?;
    Ok(nb
        .indices()
        .map(|i| HeadExample { hidden: bank.key(i), target: bank.value(i), weight: 1.0 })
        .collect())
}

/// Minimizes `L_self + mu · L_subpop` from a clone of `init`.
fn optimize(
    init: &ModelState,
    self_term: Option<SelfTerm<'_>>,
    neighbors: &[HeadExample<'_>],
    mu: f64,
    cfg: &AdaptConfig,
) -> Result<AdaptResult> {
    let start = Instant::now();
    let mut model = init.clone();
    model.reset_optimizer();
    let use_subpop = mu > 0.0 && !neighbors.is_empty();
    if self_term.is_none() && !use_subpop {
        return Ok(AdaptResult { model, epochs_run: 0, loss_trace: Vec::new(), wall_time: start.elapsed() });
    }
    let mut trace = Vec::new();
    let mut prev = f64::INFINITY;
    for _ in 0..cfg.max_adapt_epochs {
        let (mut loss, mut grads) = match &self_term {
            None => (0.0, Parameters::zeros(&model.config)),
            Some(SelfTerm::Full(prefix, weights)) => loss_and_gradient(&model, prefix, Some(weights), 0.0)?,
            Some(SelfTerm::Head(examples)) => {
                let mut g: GradientSet = Parameters::zeros(&model.config);
                let ex = examples.iter().map(|(h, target, weight)| HeadExample { hidden: h.as_slice(), target, weight: *weight });
                let l = head_loss_and_gradient(&model, ex, &mut g);
                (l, g)
            }
        };
        if use_subpop {
            let scaled = neighbors.iter().map(|e| HeadExample { weight: mu * e.weight, ..*e });
            loss += head_loss_and_gradient(&model, scaled, &mut grads);
        }
        if !loss.is_finite() || !grads.all_finite() {
            return Err(ModelError::NonFinite("adaptation objective").into());
        }
        trace.push(loss);
        if prev - loss < cfg.epsilon {
            break;
        }
        prev = loss;
        optimizer_step_with_lr(&mut model, &grads, cfg.param_mask, cfg.adapt_lr)?;
    }
    Ok(AdaptResult { epochs_run: trace.len(), model, loss_trace: trace, wall_time: start.elapsed() })
}

/// Self-adaptation on the observed prefix. A prefix shorter than two windows
/// has no supervised pair and returns an unmodified clone.
pub fn adapt_self(init: &ModelState, prefix: &EventSequence, cfg: &AdaptConfig) -> Result<AdaptResult> {
    cfg.validate()?;
    let term = self_term(init, prefix, cfg)?;
    optimize(init, term, &[], 0.0, cfg)
}

/// Subpopulation adaptation on the `k` bank entries nearest to `h_t`. The head
/// is applied directly to the stored hidden states.
pub fn adapt_subpopulation(
    init: &ModelState,
    bank: &MemoryBank,
    h_t: &HiddenState,
    cfg: &AdaptConfig,
) -> Result<AdaptResult> {
    cfg.validate()?;
    let examples = neighbor_examples(bank, h_t, cfg.k_neighbors)?;
    optimize(init, None, &examples, 1.0, cfg)
}

/// Combined adaptation with the retrieval query taken from `init` itself.
pub fn adapt_combined(
    pop: &ModelState,
    bank: &MemoryBank,
    prefix: &EventSequence,
    cfg: &AdaptConfig,
) -> Result<AdaptResult> {
    let traj = hidden_trajectory(pop, &prefix.inputs)?;
    let h_t = traj.last().ok_or(ModelError::TooShort(0))?;
    adapt_combined_from(pop, h_t, bank, prefix, cfg)
}

/// Combined adaptation starting from `init`, querying the bank with `h_t`.
/// With `mu == 0` this follows exactly the self-adaptation trajectory.
pub fn adapt_combined_from(
    init: &ModelState,
    h_t: &HiddenState,
    bank: &MemoryBank,
    prefix: &EventSequence,
    cfg: &AdaptConfig,
) -> Result<AdaptResult> {
    cfg.validate()?;
    let examples = neighbor_examples(bank, h_t, cfg.k_neighbors)?;
    let term = self_term(init, prefix, cfg)?;
    optimize(init, term, &examples, cfg.mu, cfg)
}
