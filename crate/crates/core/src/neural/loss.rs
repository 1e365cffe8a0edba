use ndarray::Array1;

use super::cell::{check_input, head, step, step_backward, StepCache};
use super::{GradientSet, ModelError, ModelState, Parameters, Result};
use crate::event_data::EventSequence;

/// Predictions are clamped to `[ε, 1 - ε]` before taking logarithms.
pub const PROBABILITY_CLAMP: f64 = 1e-7;

/// Binary cross-entropy of a single component.
#[inline]
pub fn bce_component(y: u8, p: f64) -> f64 {
    let p = p.clamp(PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// `-Σ_j [y_j ln ŷ_j + (1 - y_j) ln(1 - ŷ_j)]`, summed over components.
pub fn bce(y_true: &[u8], yhat: &[f64]) -> Result<f64> {
    if y_true.len() != yhat.len() {
        return Err(ModelError::ShapeMismatch { what: "bce operands", expected: y_true.len(), got: yhat.len() });
    }
    Ok(y_true.iter().zip(yhat).map(|(&y, &p)| bce_component(y, p)).sum())
}

fn check_sequence(model: &ModelState, seq: &EventSequence, weights: Option<&[f64]>) -> Result<()> {
    if seq.len() < 2 {
        return Err(ModelError::TooShort(seq.len()));
    }
    if seq.targets.len() != seq.inputs.len() {
        return Err(ModelError::ShapeMismatch { what: "target count", expected: seq.inputs.len(), got: seq.targets.len() });
    }
    for y in &seq.inputs {
        check_input(model, y)?;
    }
    for t in &seq.targets {
        if t.len() != model.config.n_target {
            return Err(ModelError::ShapeMismatch { what: "target vector", expected: model.config.n_target, got: t.len() });
        }
    }
    if let Some(w) = weights {
        if w.len() != seq.n_pairs() {
            return Err(ModelError::ShapeMismatch { what: "step weights", expected: seq.n_pairs(), got: w.len() });
        }
        if !w.iter().all(|x| x.is_finite()) {
            return Err(ModelError::NonFinite("step weights"));
        }
    }
    Ok(())
}

fn unroll(model: &ModelState, seq: &EventSequence) -> Vec<StepCache> {
    let mut h = Array1::zeros(model.config.hidden_dim);
    let mut caches = Vec::with_capacity(seq.n_pairs());
    // the last window has no target, so it never influences the loss
    for y in &seq.inputs[..seq.n_pairs()] {
        let c = step(&model.params, &h, y);
        h = c.h.clone();
        caches.push(c);
    }
    caches
}

/// `Σ_t w_t · e(targets[t + 1], ŷ_{t+1})` with the model unrolled from a zero
/// hidden state. Weights default to one.
pub fn sequence_loss(model: &ModelState, seq: &EventSequence, weights: Option<&[f64]>) -> Result<f64> {
    check_sequence(model, seq, weights)?;
    let mut total = 0.0;
    for (t, c) in unroll(model, seq).iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[t]);
        total += w * bce(seq.pair_target(t), &head(&model.params, &c.h))?;
    }
    if !total.is_finite() {
        return Err(ModelError::NonFinite("sequence loss"));
    }
    Ok(total)
}

/// Loss `sequence_loss + l2 · ‖θ‖²` and its gradient by backpropagation
/// through time.
///
/// The output gradient is `w_t (ŷ - y)`, the exact derivative of the
/// unclamped cross-entropy; it differs from the clamped loss only when a
/// prediction lies within `PROBABILITY_CLAMP` of 0 or 1.
pub fn loss_and_gradient(
    model: &ModelState,
    seq: &EventSequence,
    weights: Option<&[f64]>,
    l2: f64,
) -> Result<(f64, GradientSet)> {
    check_sequence(model, seq, weights)?;
    let p = &model.params;
    let caches = unroll(model, seq);
    let mut grads = Parameters::zeros(&model.config);
    let mut loss = 0.0;
    let mut dh_next = Array1::<f64>::zeros(model.config.hidden_dim);
    for (t, c) in caches.iter().enumerate().rev() {
        let w = weights.map_or(1.0, |w| w[t]);
        let target = seq.pair_target(t);
        let yhat = head(p, &c.h);
        loss += w * bce(target, &yhat)?;
        let dlogit: Array1<f64> = yhat.iter().zip(target).map(|(&q, &y)| w * (q - y as f64)).collect();
        for (mut row, &d) in grads.w_o.rows_mut().into_iter().zip(&dlogit) {
            row.scaled_add(d, &c.h);
        }
        grads.b_o += &dlogit;
        let dh = p.w_o.t().dot(&dlogit) + &dh_next;
        dh_next = step_backward(p, c, &dh, &mut grads);
    }
    if l2 > 0.0 {
        loss += l2 * p.squared_norm();
        grads.add_scaled(2.0 * l2, p);
    }
    if !loss.is_finite() || !grads.all_finite() {
        return Err(ModelError::NonFinite("gradient"));
    }
    Ok((loss, grads))
}

/// Gradient of `sequence_loss` plus the configured L2 penalty.
pub fn backward(model: &ModelState, seq: &EventSequence, weights: Option<&[f64]>) -> Result<GradientSet> {
    loss_and_gradient(model, seq, weights, model.config.l2_weight).map(|(_, g)| g)
}

/// A stored hidden state with its next-window target.
#[derive(Debug, Clone, Copy)]
pub struct HeadExample<'a> {
    pub hidden: &'a [f64],
    pub target: &'a [u8],
    pub weight: f64,
}

/// Weighted cross-entropy of the output head on fixed hidden states.
/// Adds the `W_o`/`b_o` gradient into `grads` and returns the loss.
pub fn head_loss_and_gradient<'a>(
    model: &ModelState,
    examples: impl IntoIterator<Item = HeadExample<'a>>,
    grads: &mut GradientSet,
) -> f64 {
    let p = &model.params;
    let mut loss = 0.0;
    for ex in examples {
        let h = ndarray::ArrayView1::from(ex.hidden);
        let logits = p.w_o.dot(&h) + &p.b_o;
        for (j, (&a, &y)) in logits.iter().zip(ex.target).enumerate() {
            let q = super::sigmoid(a);
            loss += ex.weight * bce_component(y, q);
            let d = ex.weight * (q - y as f64);
            grads.b_o[j] += d;
            grads.w_o.row_mut(j).scaled_add(d, &h);
        }
    }
    loss
}
