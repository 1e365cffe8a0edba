use super::{GradientSet, ModelError, ModelState, ParamGroup, ParamMask, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adaptive-moment update at the model's configured learning rate.
pub fn optimizer_step(model: &mut ModelState, grads: &GradientSet, mask: ParamMask) -> Result<()> {
    let lr = model.config.learning_rate;
    optimizer_step_with_lr(model, grads, mask, lr)
}

/// Adaptive-moment update of the groups selected by `mask`. Parameters and
/// moments outside the mask are left untouched, and each group keeps its own
/// step counter for bias correction.
pub fn optimizer_step_with_lr(model: &mut ModelState, grads: &GradientSet, mask: ParamMask, lr: f64) -> Result<()> {
    if grads.w_emb.dim() != model.params.w_emb.dim()
        || grads.w_z.dim() != model.params.w_z.dim()
        || grads.w_o.dim() != model.params.w_o.dim()
    {
        return Err(ModelError::ShapeMismatch { what: "gradient set", expected: model.params.len(), got: grads.len() });
    }
    let mut corrections = [(0.0, 0.0); 3];
    for (slot, g) in ParamGroup::ALL.into_iter().enumerate() {
        if mask.contains(g) {
            model.adam.steps[slot] += 1;
            let t = model.adam.steps[slot] as i32;
            corrections[slot] = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
        }
    }
    let ModelState { params, adam, .. } = model;
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(adam.m.tensors_mut())
        .zip(adam.v.tensors_mut())
        .zip(grads.tensors());
    for ((((group, theta), (_, m)), (_, v)), g) in tensors {
        if !mask.contains(group) {
            continue;
        }
        let (c1, c2) = corrections[group.slot()];
        for (((x, m), v), &g) in theta.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{ModelConfig, Parameters};

    fn model() -> ModelState {
        ModelState::new(ModelConfig { embed_dim: 2, hidden_dim: 3, ..ModelConfig::new(4, 2) }).unwrap()
    }

    fn ones(m: &ModelState) -> Parameters {
        let mut g = Parameters::zeros(&m.config);
        for (_, t) in g.tensors_mut() {
            t.fill(0.25);
        }
        g
    }

    #[test]
    fn masked_groups_are_untouched() {
        let before = model();
        let mut after = before.clone();
        optimizer_step(&mut after, &ones(&before), ParamMask::OUTPUT).unwrap();
        assert!(before.group_bits_equal(&after, ParamGroup::Embedding));
        assert!(before.group_bits_equal(&after, ParamGroup::Cell));
        assert!(!before.group_bits_equal(&after, ParamGroup::Output));
        assert_eq!(after.adam.steps, [0, 0, 1]);
        assert_eq!(before.adam.m.w_z, after.adam.m.w_z);
    }

    #[test]
    fn deterministic() {
        let mut a = model();
        let mut b = model();
        let g = ones(&a);
        for _ in 0..3 {
            optimizer_step(&mut a, &g, ParamMask::ALL).unwrap();
            optimizer_step(&mut b, &g, ParamMask::ALL).unwrap();
        }
        assert!(a.params_bits_equal(&b));
    }

    /// Hand-computed scalar recurrence for three steps.
    #[test]
    fn scalar_trajectory_matches_recurrence() {
        let mut m = model();
        m.params.b_o[0] = 1.0;
        let lr = 0.1;
        let grads_seq = [0.5, -0.2, 0.8];
        let (mut theta, mut mm, mut vv) = (1.0f64, 0.0f64, 0.0f64);
        for (t, &g) in grads_seq.iter().enumerate() {
            let mut grads = Parameters::zeros(&m.config);
            grads.b_o[0] = g;
            optimizer_step_with_lr(&mut m, &grads, ParamMask::OUTPUT, lr).unwrap();
            let k = (t + 1) as i32;
            mm = 0.9 * mm + 0.1 * g;
            vv = 0.999 * vv + 0.001 * g * g;
            theta -= lr * (mm / (1.0 - 0.9f64.powi(k))) / ((vv / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
            assert!((m.params.b_o[0] - theta).abs() < 1e-15, "step {k}");
        }
        // first step of Adam moves by ~lr regardless of gradient scale
        assert!((theta - 1.0).abs() > 0.0);
    }
}
