use ndarray::{s, Array1, Array2};

use super::{sigmoid, HiddenState, ModelError, ModelState, Parameters, Result};

/// Intermediate values of one recurrent step, kept for backpropagation.
pub(crate) struct StepCache {
    active: Vec<usize>,
    /// `[v; h_prev]`
    x: Array1<f64>,
    /// `[v; r ⊙ h_prev]`
    xn: Array1<f64>,
    z: Array1<f64>,
    r: Array1<f64>,
    n: Array1<f64>,
    pub(crate) h: Array1<f64>,
}

pub(crate) fn check_input(model: &ModelState, y: &[u8]) -> Result<()> {
    if y.len() != model.config.n_input {
        return Err(ModelError::ShapeMismatch { what: "input vector", expected: model.config.n_input, got: y.len() });
    }
    if y.iter().any(|&b| b > 1) {
        return Err(ModelError::Format("input vector is not binary".into()));
    }
    Ok(())
}

pub(crate) fn step(p: &Parameters, h_prev: &Array1<f64>, y: &[u8]) -> StepCache {
    let e = p.w_emb.nrows();
    let active: Vec<usize> = y.iter().enumerate().filter(|(_, &b)| b != 0).map(|(i, _)| i).collect();
    let mut x = Array1::zeros(e + h_prev.len());
    {
        let mut v = x.slice_mut(s![..e]);
        for &i in &active {
            v += &p.w_emb.column(i);
        }
    }
    x.slice_mut(s![e..]).assign(h_prev);
    let z = (p.w_z.dot(&x) + &p.b_z).mapv_into(sigmoid);
    let r = (p.w_r.dot(&x) + &p.b_r).mapv_into(sigmoid);
    let mut xn = x.clone();
    xn.slice_mut(s![e..]).assign(&(&r * h_prev));
    let n = (p.w_n.dot(&xn) + &p.b_n).mapv_into(f64::tanh);
    let h = &n + &(&z * &(h_prev - &n));
    StepCache { active, x, xn, z, r, n, h }
}

fn accumulate_outer(w: &mut Array2<f64>, a: &Array1<f64>, x: &Array1<f64>) {
    for (mut row, &ai) in w.rows_mut().into_iter().zip(a) {
        if ai != 0.0 {
            row.scaled_add(ai, x);
        }
    }
}

/// Backpropagates `dh` (gradient w.r.t. `h_t`) through one step, accumulating
/// into `g`, and returns the gradient w.r.t. `h_{t-1}`.
pub(crate) fn step_backward(p: &Parameters, c: &StepCache, dh: &Array1<f64>, g: &mut Parameters) -> Array1<f64> {
    let e = p.w_emb.nrows();
    let h_prev = c.x.slice(s![e..]);

    // h = (1 - z) ⊙ n + z ⊙ h_prev
    let dz = dh * &(&h_prev - &c.n);
    let dn = dh * &c.z.mapv(|z| 1.0 - z);
    let mut dh_prev = dh * &c.z;

    let da_n = dn * &c.n.mapv(|n| 1.0 - n * n);
    accumulate_outer(&mut g.w_n, &da_n, &c.xn);
    g.b_n += &da_n;
    let dxn = p.w_n.t().dot(&da_n);
    let mut dv = dxn.slice(s![..e]).to_owned();
    let drh = dxn.slice(s![e..]);
    let dr = &drh * &h_prev;
    dh_prev += &(&drh * &c.r);

    let da_r = dr * &c.r.mapv(|r| r * (1.0 - r));
    accumulate_outer(&mut g.w_r, &da_r, &c.x);
    g.b_r += &da_r;
    let dx = p.w_r.t().dot(&da_r);
    dv += &dx.slice(s![..e]);
    dh_prev += &dx.slice(s![e..]);

    let da_z = dz * &c.z.mapv(|z| z * (1.0 - z));
    accumulate_outer(&mut g.w_z, &da_z, &c.x);
    g.b_z += &da_z;
    let dx = p.w_z.t().dot(&da_z);
    dv += &dx.slice(s![..e]);
    dh_prev += &dx.slice(s![e..]);

    for &i in &c.active {
        let mut col = g.w_emb.column_mut(i);
        col += &dv;
    }
    dh_prev
}

pub(crate) fn head(p: &Parameters, h: &Array1<f64>) -> Vec<f64> {
    (p.w_o.dot(h) + &p.b_o).mapv_into(sigmoid).to_vec()
}

/// One recurrent step: reads `y_t`, returns `h_t` and the prediction for the
/// next window.
pub fn forward_step(model: &ModelState, h_prev: &HiddenState, y: &[u8]) -> Result<(HiddenState, Vec<f64>)> {
    check_input(model, y)?;
    if h_prev.len() != model.config.hidden_dim {
        return Err(ModelError::ShapeMismatch { what: "hidden state", expected: model.config.hidden_dim, got: h_prev.len() });
    }
    if !h_prev.0.iter().all(|x| x.is_finite()) {
        return Err(ModelError::NonFinite("hidden state"));
    }
    let c = step(&model.params, &h_prev.0, y);
    let yhat = head(&model.params, &c.h);
    if !c.h.iter().all(|x| x.is_finite()) || !yhat.iter().all(|x| x.is_finite()) {
        return Err(ModelError::NonFinite("forward pass"));
    }
    Ok((HiddenState(c.h), yhat))
}

/// Output head applied to a given hidden state.
pub fn predict_from_hidden(model: &ModelState, h: &HiddenState) -> Vec<f64> {
    head(&model.params, &h.0)
}

/// Hidden states after reading each input, starting from zero.
pub fn hidden_trajectory(model: &ModelState, inputs: &[Vec<u8>]) -> Result<Vec<HiddenState>> {
    let mut h = HiddenState::zeros(model.config.hidden_dim);
    let mut out = Vec::with_capacity(inputs.len());
    for y in inputs {
        check_input(model, y)?;
        h = HiddenState(step(&model.params, &h.0, y).h);
        out.push(h.clone());
    }
    if out.last().is_some_and(|h| !h.0.iter().all(|x| x.is_finite())) {
        return Err(ModelError::NonFinite("hidden trajectory"));
    }
    Ok(out)
}

/// Unrolls the whole prefix and returns the prediction for the window after it.
pub fn predict_next(model: &ModelState, inputs: &[Vec<u8>]) -> Result<Vec<f64>> {
    let traj = hidden_trajectory(model, inputs)?;
    let h = traj.last().ok_or(ModelError::TooShort(0))?;
    Ok(predict_from_hidden(model, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::ModelConfig;

    fn toy(seed: u64) -> ModelState {
        ModelState::new(ModelConfig { embed_dim: 2, hidden_dim: 3, rng_seed: seed, ..ModelConfig::new(4, 2) }).unwrap()
    }

    #[test]
    fn zero_input_and_zero_cell_gives_sigmoid_bias() {
        let mut m = toy(0);
        m.params.w_z.fill(0.0);
        m.params.w_r.fill(0.0);
        m.params.w_n.fill(0.0);
        m.params.b_o = ndarray::arr1(&[0.3, -1.2]);
        let (h, yhat) = forward_step(&m, &HiddenState::zeros(3), &[0, 0, 0, 0]).unwrap();
        assert!(h.0.iter().all(|&x| x == 0.0));
        assert_eq!(yhat, vec![sigmoid(0.3), sigmoid(-1.2)]);
    }

    /// Straight-line scalar evaluation of the gate equations.
    #[allow(clippy::needless_range_loop)]
    fn hand_unrolled(m: &ModelState, h_prev: &[f64], y: &[u8]) -> Vec<f64> {
        let p = &m.params;
        let (e, hd) = (2, 3);
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut v = vec![0.0; e];
        for k in 0..e {
            for (i, &yi) in y.iter().enumerate() {
                v[k] += p.w_emb[[k, i]] * yi as f64;
            }
        }
        let gate = |w: &Array2<f64>, b: &Array1<f64>, hid: &[f64], k: usize| {
            let mut a = b[k];
            for j in 0..e {
                a += w[[k, j]] * v[j];
            }
            for j in 0..hd {
                a += w[[k, e + j]] * hid[j];
            }
            a
        };
        let z: Vec<f64> = (0..hd).map(|k| sig(gate(&p.w_z, &p.b_z, h_prev, k))).collect();
        let r: Vec<f64> = (0..hd).map(|k| sig(gate(&p.w_r, &p.b_r, h_prev, k))).collect();
        let rh: Vec<f64> = (0..hd).map(|k| r[k] * h_prev[k]).collect();
        let n: Vec<f64> = (0..hd).map(|k| gate(&p.w_n, &p.b_n, &rh, k).tanh()).collect();
        (0..hd).map(|k| (1.0 - z[k]) * n[k] + z[k] * h_prev[k]).collect()
    }

    #[test]
    fn matches_hand_unrolled_gates() {
        for seed in 0..5 {
            let mut m = toy(seed);
            m.params.b_z = ndarray::arr1(&[0.1, -0.2, 0.3]);
            m.params.b_r = ndarray::arr1(&[-0.1, 0.2, 0.05]);
            m.params.b_n = ndarray::arr1(&[0.0, 0.4, -0.3]);
            let h_prev = [0.2, -0.5, 0.7];
            let y = [1, 0, 1, 1];
            let (h, _) = forward_step(&m, &HiddenState(ndarray::arr1(&h_prev)), &y).unwrap();
            for (a, b) in h.0.iter().zip(hand_unrolled(&m, &h_prev, &y)) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn outputs_are_probabilities() {
        let m = toy(3);
        let mut h = HiddenState::zeros(3);
        for y in [[1, 1, 1, 1], [0, 0, 0, 0], [1, 0, 0, 1]] {
            let (next, yhat) = forward_step(&m, &h, &y).unwrap();
            assert!(yhat.iter().all(|&p| p > 0.0 && p < 1.0));
            h = next;
        }
    }

    #[test]
    fn rejects_bad_shapes_and_non_finite() {
        let mut m = toy(0);
        assert!(matches!(forward_step(&m, &HiddenState::zeros(3), &[1, 0]), Err(ModelError::ShapeMismatch { .. })));
        assert!(forward_step(&m, &HiddenState::zeros(2), &[1, 0, 0, 0]).is_err());
        let bad = HiddenState(ndarray::arr1(&[f64::NAN, 0.0, 0.0]));
        assert!(matches!(forward_step(&m, &bad, &[1, 0, 0, 0]), Err(ModelError::NonFinite(_))));
        m.params.w_o[[0, 0]] = f64::INFINITY;
        m.params.b_o[0] = f64::NEG_INFINITY;
        let h = HiddenState(ndarray::arr1(&[1.0, 0.0, 0.0]));
        assert!(matches!(forward_step(&m, &h, &[1, 0, 0, 0]), Err(ModelError::NonFinite(_))));
    }

    #[test]
    fn trajectory_matches_stepwise_unroll() {
        let m = toy(2);
        let inputs = vec![vec![1, 0, 0, 1], vec![0, 1, 0, 0], vec![0, 0, 1, 1]];
        let traj = hidden_trajectory(&m, &inputs).unwrap();
        let mut h = HiddenState::zeros(3);
        for (y, want) in inputs.iter().zip(&traj) {
            h = forward_step(&m, &h, y).unwrap().0;
            assert_eq!(&h, want);
        }
        assert_eq!(predict_next(&m, &inputs).unwrap(), predict_from_hidden(&m, &h));
    }
}
