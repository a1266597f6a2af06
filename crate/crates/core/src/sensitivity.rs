//! Sensitivity of the model output to the last-layer parameters.
//!
//! For a model with hidden activation `h`, final dense weights `W` and
//! softmax output `p`, the squared Frobenius norm of the Jacobian of `p`
//! with respect to the selected parameters factors in closed form:
//!
//! ```text
//! d p_i / d W[k][l] = J[i][k] * h[l]        J[i][k] = p_i (delta_ik - p_k)
//! S = ||J||_F^2 * (||h||^2 + 1_if_bias)
//! ```
//!
//! `||J||_F^2` reduces to `m2 - 2 m3 + m2^2` with `m2 = sum p^2`,
//! `m3 = sum p^3`. The gradient of `S` with respect to the input follows by
//! the chain rule through the final dense layer and `backprop_to_input`.
//! Both routes are gated by independent finite-difference oracles that run
//! the network in 64-bit: [`fd_sensitivity`] perturbs each selected
//! parameter, [`fd_grad_x`] perturbs each input element.

use crate::error::{Error, Result};
use crate::nn::{LayerKind, Model};
use crate::tensor::Tensor;

/// Which parameters the sensitivity is taken against. Only the final dense
/// layer is supported; the closed form above is specific to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSelector {
    pub layer_index: usize,
    pub include_bias: bool,
}

impl ParamSelector {
    /// All weights and the bias of the final dense layer.
    pub fn last_layer(model: &Model) -> Self {
        ParamSelector { layer_index: model.last_layer_index(), include_bias: true }
    }

    pub fn weights_only(model: &Model) -> Self {
        ParamSelector { layer_index: model.last_layer_index(), include_bias: false }
    }

    fn validate(&self, model: &Model) -> Result<()> {
        if self.layer_index != model.last_layer_index() {
            return Err(Error::invalid_input(format!(
                "sensitivity is defined for the final dense layer (index {}), got {}",
                model.last_layer_index(),
                self.layer_index
            )));
        }
        match model.layers()[self.layer_index].kind {
            LayerKind::Dense { .. } => Ok(()),
            _ => Err(Error::invalid_input("selected layer is not dense")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SensitivityValue {
    /// `||d p / d W||_F^2`, always non-negative.
    pub s: f64,
    /// Gradient of `s` with respect to the input.
    pub grad_x: Tensor,
}

/// Jacobian of softmax probabilities with respect to the logits:
/// `J[i][j] = p_i (delta_ij - p_j)`. Every row sums to zero.
pub fn softmax_jacobian(probs: &[f32]) -> Vec<Vec<f64>> {
    let r = probs.len();
    let p: Vec<f64> = probs.iter().map(|&v| v as f64).collect();
    (0..r)
        .map(|i| {
            (0..r)
                .map(|j| {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    p[i] * (delta - p[j])
                })
                .collect()
        })
        .collect()
}

/// `||J(p)||_F^2` via the moment identity `m2 - 2 m3 + m2^2`.
fn jac_sq_norm(p: &[f64]) -> f64 {
    let m2: f64 = p.iter().map(|&v| v * v).sum();
    let m3: f64 = p.iter().map(|&v| v * v * v).sum();
    m2 - 2.0 * m3 + m2 * m2
}

/// Gradient of `||J(p)||_F^2` with respect to the logits.
fn jac_sq_norm_logit_grad(p: &[f64]) -> Vec<f64> {
    let m2: f64 = p.iter().map(|&v| v * v).sum();
    // d g / d p_k for g = m2 - 2 m3 + m2^2.
    let dgdp: Vec<f64> = p.iter().map(|&pk| 2.0 * pk - 6.0 * pk * pk + 4.0 * m2 * pk).collect();
    // Chain through the softmax: d g / d z_t = p_t (dgdp_t - sum_k dgdp_k p_k).
    let dot: f64 = dgdp.iter().zip(p).map(|(d, pk)| d * pk).sum();
    p.iter().zip(&dgdp).map(|(&pt, &dt)| pt * (dt - dot)).collect()
}

/// Closed-form sensitivity and its input gradient.
pub fn sensitivity(model: &Model, x: &Tensor, sel: ParamSelector) -> Result<SensitivityValue> {
    sel.validate(model)?;
    let (probs, hidden) = model.forward(x)?;
    let p: Vec<f64> = probs.iter().map(|&v| v as f64).collect();
    let h: Vec<f64> = hidden.data().iter().map(|&v| v as f64).collect();

    let g = jac_sq_norm(&p);
    let bias_term = if sel.include_bias { 1.0 } else { 0.0 };
    let hs: f64 = h.iter().map(|&v| v * v).sum::<f64>() + bias_term;
    let s = g * hs;

    // grad_h S = hs * W^T (dg/dz) + 2 g h
    let dz = jac_sq_norm_logit_grad(&p);
    let (weights, _, out, inp) = model.last_dense();
    let mut grad_h = vec![0.0f64; inp];
    for k in 0..out {
        let dzk = dz[k];
        if dzk == 0.0 {
            continue;
        }
        let row = &weights[k * inp..(k + 1) * inp];
        for (j, gh) in grad_h.iter_mut().enumerate() {
            *gh += row[j] as f64 * dzk;
        }
    }
    for j in 0..inp {
        grad_h[j] = hs * grad_h[j] + 2.0 * g * h[j];
    }

    let grad_hidden = Tensor::new(
        hidden.shape().to_vec(),
        grad_h.iter().map(|&v| v as f32).collect(),
    )?;
    let grad_x = model.backprop_to_input(x, &grad_hidden)?;
    Ok(SensitivityValue { s, grad_x })
}

/// Sensitivity evaluated from a 64-bit forward pass; used by the
/// input-gradient oracle so its differences are not drowned in f32 noise.
fn sensitivity_f64(model: &Model, x: &[f64], sel: ParamSelector) -> Result<f64> {
    let (p, h) = model.forward_f64(x)?;
    let bias_term = if sel.include_bias { 1.0 } else { 0.0 };
    let hs: f64 = h.iter().map(|&v| v * v).sum::<f64>() + bias_term;
    Ok(jac_sq_norm(&p) * hs)
}

/// Brute-force estimate of the sensitivity: central differences of each
/// softmax output with respect to every selected parameter, squared and
/// accumulated. Runs in 64-bit. Perturbing last-dense weight `W[k][l]` by
/// `d` shifts logit `k` by `d * h[l]` and nothing else, so the hidden
/// vector is computed once and each probe recomputes only the softmax.
pub fn fd_sensitivity(model: &Model, x: &Tensor, sel: ParamSelector, step: f64) -> Result<f64> {
    sel.validate(model)?;
    if step <= 0.0 {
        return Err(Error::invalid_input("step must be positive"));
    }
    if x.shape() != model.input_shape() {
        return Err(Error::invalid_input("input shape mismatch"));
    }
    let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let (_, h) = model.forward_f64(&x64)?;
    let (weights, bias, out, inp) = model.last_dense();
    let mut logits = vec![0.0f64; out];
    for k in 0..out {
        let mut acc = bias[k] as f64;
        let row = &weights[k * inp..(k + 1) * inp];
        for j in 0..inp {
            acc += row[j] as f64 * h[j];
        }
        logits[k] = acc;
    }

    let mut total = 0.0f64;
    for k in 0..out {
        for j in 0..inp {
            let delta = step * h[j];
            let hi = softmax_shifted(&logits, k, delta);
            let lo = softmax_shifted(&logits, k, -delta);
            for i in 0..out {
                let d = (hi[i] - lo[i]) / (2.0 * step);
                total += d * d;
            }
        }
        if sel.include_bias {
            let hi = softmax_shifted(&logits, k, step);
            let lo = softmax_shifted(&logits, k, -step);
            for i in 0..out {
                let d = (hi[i] - lo[i]) / (2.0 * step);
                total += d * d;
            }
        }
    }
    Ok(total)
}

fn softmax64_local(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

fn softmax_shifted(logits: &[f64], k: usize, delta: f64) -> Vec<f64> {
    let mut z = logits.to_vec();
    z[k] += delta;
    softmax64_local(&z)
}

/// Central-difference estimate of the input gradient of the sensitivity,
/// element-wise over `x`, evaluated on the 64-bit forward path.
pub fn fd_grad_x(model: &Model, x: &Tensor, sel: ParamSelector, step: f64) -> Result<Tensor> {
    sel.validate(model)?;
    if step <= 0.0 {
        return Err(Error::invalid_input("step must be positive"));
    }
    if x.shape() != model.input_shape() {
        return Err(Error::invalid_input("input shape mismatch"));
    }
    let base: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let mut grad = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut hi = base.clone();
        let mut lo = base.clone();
        hi[i] += step;
        lo[i] -= step;
        let d = (sensitivity_f64(model, &hi, sel)? - sensitivity_f64(model, &lo, sel)?) / (2.0 * step);
        grad.push(d as f32);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Layer, LayerSpec};
    use crate::rng::Rng;

    /// Flatten extractor under a final dense 2x2 with W = 0, b = 0.
    fn flat_then_dense_zero() -> Model {
        Model::new(
            vec![2],
            vec![
                Layer { kind: LayerKind::Flatten, activation: Activation::Identity },
                Layer {
                    kind: LayerKind::Dense { out: 2, inp: 2, weights: vec![0.0; 4], bias: vec![0.0; 2] },
                    activation: Activation::Identity,
                },
            ],
            2,
        )
        .unwrap()
    }

    #[test]
    fn jacobian_hand_case() {
        let j = softmax_jacobian(&[0.5, 0.5]);
        assert_eq!(j, vec![vec![0.25, -0.25], vec![-0.25, 0.25]]);
    }

    #[test]
    fn jacobian_saturated_is_zero() {
        let j = softmax_jacobian(&[1.0, 0.0]);
        for row in &j {
            assert!(row.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn jacobian_rows_sum_to_zero() {
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let raw: Vec<f64> = (0..4).map(|_| rng.next_f64() + 1e-3).collect();
            let sum: f64 = raw.iter().sum();
            let probs: Vec<f32> = raw.iter().map(|&v| (v / sum) as f32).collect();
            for row in softmax_jacobian(&probs) {
                assert!(row.iter().sum::<f64>().abs() < 1e-7);
            }
        }
    }

    #[test]
    fn hand_case_sensitivity_is_one() {
        // ||x||^2 = 3: with W = 0 the output is uniform, ||J||_F^2 = 0.25,
        // so S = 0.25 * (3 + 1) = 1.
        let model = flat_then_dense_zero();
        let x = Tensor::from_vec(vec![2f32.sqrt(), 1.0]).unwrap();
        let sel = ParamSelector::last_layer(&model);
        let v = sensitivity(&model, &x, sel).unwrap();
        assert!((v.s - 1.0).abs() < 1e-6, "s = {}", v.s);
        let fd = fd_sensitivity(&model, &x, sel, 1e-3).unwrap();
        assert!((fd - 1.0).abs() < 1e-4, "fd = {fd}");
    }

    #[test]
    fn saturated_softmax_has_near_zero_sensitivity() {
        let model = Model::new(
            vec![2],
            vec![Layer {
                kind: LayerKind::Dense {
                    out: 2,
                    inp: 2,
                    weights: vec![80.0, 80.0, -80.0, -80.0],
                    bias: vec![0.0; 2],
                },
                activation: Activation::Identity,
            }],
            2,
        )
        .unwrap();
        let x = Tensor::from_vec(vec![1.0, 1.0]).unwrap();
        let sel = ParamSelector::last_layer(&model);
        let v = sensitivity(&model, &x, sel).unwrap();
        assert!(v.s < 1e-12, "s = {}", v.s);
        assert!(v.grad_x.data().iter().all(|&g| g.abs() < 1e-6));
    }

    fn random_net(seed: u64) -> Model {
        Model::seeded(
            vec![5],
            &[
                LayerSpec::Dense { out: 4, activation: Activation::Sigmoid },
                LayerSpec::Dense { out: 4, activation: Activation::Sigmoid },
                LayerSpec::Dense { out: 3, activation: Activation::Identity },
            ],
            3,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn closed_form_matches_fd_oracle() {
        for seed in 0..10u64 {
            let model = random_net(seed);
            let mut rng = Rng::new(seed + 1000);
            let x = Tensor::from_vec((0..5).map(|_| rng.next_f64() as f32).collect()).unwrap();
            for include_bias in [true, false] {
                let sel = ParamSelector { layer_index: model.last_layer_index(), include_bias };
                let s = sensitivity(&model, &x, sel).unwrap().s;
                let fd = fd_sensitivity(&model, &x, sel, 1e-3).unwrap();
                let rel = (s - fd).abs() / fd.max(1e-12);
                assert!(rel <= 1e-4, "seed {seed} bias {include_bias}: s {s} fd {fd} rel {rel}");
                assert!(s >= 0.0);
            }
        }
    }

    #[test]
    fn grad_x_matches_fd_oracle() {
        for seed in 0..10u64 {
            let model = random_net(seed + 50);
            let mut rng = Rng::new(seed + 2000);
            let x = Tensor::from_vec((0..5).map(|_| rng.next_f64() as f32).collect()).unwrap();
            let sel = ParamSelector::last_layer(&model);
            let grad = sensitivity(&model, &x, sel).unwrap().grad_x;
            let fd = fd_grad_x(&model, &x, sel, 1e-3).unwrap();
            for (a, b) in grad.data().iter().zip(fd.data()) {
                let err = (*a as f64 - *b as f64).abs();
                let tol = 1e-3 * (*b as f64).abs() + 1e-6;
                assert!(err <= tol, "seed {seed}: analytic {a} fd {b}");
            }
        }
    }

    #[test]
    fn fd_oracle_is_reproducible() {
        let model = random_net(7);
        let x = Tensor::from_vec(vec![0.1, 0.9, 0.4, 0.2, 0.6]).unwrap();
        let sel = ParamSelector::last_layer(&model);
        let a = fd_sensitivity(&model, &x, sel, 1e-3).unwrap();
        let b = fd_sensitivity(&model, &x, sel, 1e-3).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn constant_extractor_gives_zero_grad() {
        // ReLU layer with strongly negative biases zeroes the hidden vector
        // regardless of input, so S is flat in x.
        let model = Model::new(
            vec![2],
            vec![
                Layer {
                    kind: LayerKind::Dense { out: 3, inp: 2, weights: vec![0.1; 6], bias: vec![-5.0; 3] },
                    activation: Activation::Relu,
                },
                Layer {
                    kind: LayerKind::Dense { out: 2, inp: 3, weights: vec![0.3; 6], bias: vec![0.0; 2] },
                    activation: Activation::Identity,
                },
            ],
            2,
        )
        .unwrap();
        let x = Tensor::from_vec(vec![0.5, 0.5]).unwrap();
        let sel = ParamSelector::last_layer(&model);
        let v = sensitivity(&model, &x, sel).unwrap();
        assert!(v.grad_x.data().iter().all(|&g| g == 0.0));
        let fd = fd_grad_x(&model, &x, sel, 1e-3).unwrap();
        assert!(fd.data().iter().all(|&g| g.abs() < 1e-9));
    }

    #[test]
    fn inactive_neuron_contributes_nothing() {
        // Hidden unit squashed to exactly zero by ReLU: the fd contribution
        // of its weight column must vanish (bias column excluded).
        let model = Model::new(
            vec![2],
            vec![
                Layer {
                    kind: LayerKind::Dense {
                        out: 2,
                        inp: 2,
                        // First unit active, second driven negative.
                        weights: vec![0.8, 0.4, -0.7, -0.9],
                        bias: vec![0.0, 0.0],
                    },
                    activation: Activation::Relu,
                },
                Layer {
                    kind: LayerKind::Dense {
                        out: 2,
                        inp: 2,
                        weights: vec![0.5, 0.2, -0.3, 0.4],
                        bias: vec![0.0; 2],
                    },
                    activation: Activation::Identity,
                },
            ],
            2,
        )
        .unwrap();
        let x = Tensor::from_vec(vec![0.5, 0.5]).unwrap();
        let (_, hidden) = model.forward(&x).unwrap();
        assert_eq!(hidden.data()[1], 0.0, "fixture must have a dead unit");

        // Sum the dead column's finite-difference share directly.
        let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let (_, h) = model.forward_f64(&x64).unwrap();
        let (weights, bias, out, inp) = model.last_dense();
        let mut logits = vec![0.0f64; out];
        for k in 0..out {
            let mut acc = bias[k] as f64;
            for j in 0..inp {
                acc += weights[k * inp + j] as f64 * h[j];
            }
            logits[k] = acc;
        }
        let step = 1e-3;
        let mut dead_share = 0.0;
        for k in 0..out {
            let delta = step * h[1];
            let hi = softmax_shifted(&logits, k, delta);
            let lo = softmax_shifted(&logits, k, -delta);
            for i in 0..out {
                let d = (hi[i] - lo[i]) / (2.0 * step);
                dead_share += d * d;
            }
        }
        assert!(dead_share <= 1e-8, "dead column share {dead_share}");
        let sel = ParamSelector::weights_only(&model);
        assert!(fd_sensitivity(&model, &x, sel, step).unwrap() > 0.0);
    }

    #[test]
    fn selector_must_point_at_final_dense() {
        let model = random_net(3);
        let bad = ParamSelector { layer_index: 0, include_bias: true };
        assert!(sensitivity(&model, &Tensor::from_vec(vec![0.0; 5]).unwrap(), bad).is_err());
    }
}
