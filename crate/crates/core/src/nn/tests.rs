use super::*;
use crate::data::{synth_blobs, LabeledSet};
use crate::rng::Rng;
use crate::tensor::Tensor;

fn dense(out: usize, inp: usize, weights: Vec<f32>, bias: Vec<f32>, act: Activation) -> Layer {
    Layer { kind: LayerKind::Dense { out, inp, weights, bias }, activation: act }
}

fn flatten() -> Layer {
    Layer { kind: LayerKind::Flatten, activation: Activation::Identity }
}

/// Small random MLP used across the gradient tests.
fn random_mlp(seed: u64) -> Model {
    Model::seeded(
        vec![6],
        &[
            LayerSpec::Dense { out: 5, activation: Activation::Sigmoid },
            LayerSpec::Dense { out: 4, activation: Activation::Sigmoid },
            LayerSpec::Dense { out: 3, activation: Activation::Identity },
        ],
        3,
        seed,
    )
    .unwrap()
}

fn random_input(len: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::from_vec((0..len).map(|_| rng.next_f64() as f32).collect()).unwrap()
}

#[test]
fn zero_weights_give_uniform_softmax() {
    let model = Model::new(
        vec![2],
        vec![dense(2, 2, vec![0.0; 4], vec![0.0; 2], Activation::Identity)],
        2,
    )
    .unwrap();
    let (probs, hidden) = model.forward(&Tensor::from_vec(vec![0.3, -0.7]).unwrap()).unwrap();
    assert_eq!(probs, vec![0.5, 0.5]);
    assert_eq!(hidden.data(), &[0.3, -0.7]);
}

#[test]
fn forward_is_bit_deterministic() {
    let model = random_mlp(11);
    let x = random_input(6, 4);
    let (p1, h1) = model.forward(&x).unwrap();
    let (p2, h2) = model.forward(&x).unwrap();
    assert_eq!(
        p1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        p2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(h1, h2);
}

#[test]
fn probs_sum_to_one() {
    for seed in 0..20 {
        let model = random_mlp(seed);
        let (probs, _) = model.forward(&random_input(6, seed + 100)).unwrap();
        let sum: f64 = probs.iter().map(|&p| p as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6, "sum {sum}");
        assert!(probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}

/// Independent naive re-implementation of the forward pass used as an
/// oracle: nested Vec matrices, f64 throughout, plain softmax.
fn naive_forward(model: &Model, x: &[f32]) -> Vec<f64> {
    let mut cur: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    for layer in model.layers() {
        cur = match &layer.kind {
            LayerKind::Dense { out, inp, weights, bias } => {
                let mut rows: Vec<Vec<f64>> = Vec::new();
                for k in 0..*out {
                    rows.push(weights[k * inp..(k + 1) * inp].iter().map(|&w| w as f64).collect());
                }
                (0..*out)
                    .map(|k| {
                        let z: f64 = rows[k].iter().zip(&cur).map(|(w, v)| w * v).sum::<f64>()
                            + bias[k] as f64;
                        match layer.activation {
                            Activation::Relu => z.max(0.0),
                            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
                            Activation::Identity => z,
                        }
                    })
                    .collect()
            }
            LayerKind::Flatten => cur,
            LayerKind::Conv2d { .. } => unreachable!("naive oracle covers dense nets"),
        };
    }
    let denom: f64 = cur.iter().map(|&z| z.exp()).sum();
    cur.iter().map(|&z| z.exp() / denom).collect()
}

#[test]
fn forward_matches_naive_oracle() {
    for seed in [3u64, 17, 99] {
        let model = random_mlp(seed);
        let x = random_input(6, seed * 7 + 1);
        let (probs, _) = model.forward(&x).unwrap();
        let expect = naive_forward(&model, x.data());
        for (a, b) in probs.iter().zip(&expect) {
            assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn forward_rejects_shape_mismatch() {
    let model = random_mlp(1);
    let err = model.forward(&Tensor::from_vec(vec![0.0; 5]).unwrap()).unwrap_err();
    assert!(matches!(err, crate::error::Error::InvalidInput(_)));
}

#[test]
fn backprop_through_flatten_is_identity() {
    let model = Model::new(
        vec![2, 2],
        vec![
            flatten(),
            dense(2, 4, vec![0.1; 8], vec![0.0; 2], Activation::Identity),
        ],
        2,
    )
    .unwrap();
    let x = Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let g = Tensor::from_vec(vec![1.0, -2.0, 3.0, 0.5]).unwrap();
    let gx = model.backprop_to_input(&x, &g).unwrap();
    assert_eq!(gx.shape(), &[2, 2]);
    assert_eq!(gx.data(), g.data());
}

#[test]
fn dead_relu_zeroes_gradient() {
    // Hidden dense pushes every pre-activation negative.
    let model = Model::new(
        vec![2],
        vec![
            dense(3, 2, vec![0.5; 6], vec![-10.0; 3], Activation::Relu),
            dense(2, 3, vec![1.0; 6], vec![0.0; 2], Activation::Identity),
        ],
        2,
    )
    .unwrap();
    let x = Tensor::from_vec(vec![0.5, 0.25]).unwrap();
    let gx = model
        .backprop_to_input(&x, &Tensor::from_vec(vec![1.0, 1.0, 1.0]).unwrap())
        .unwrap();
    assert_eq!(gx.data(), &[0.0, 0.0]);
}

/// Central finite differences of s(x) = dot(g, hidden(x)) in f64.
fn fd_input_grad(model: &Model, x: &Tensor, g: &[f32], step: f64) -> Vec<f64> {
    let base: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let scalar = |pt: &[f64]| -> f64 {
        let (_, hidden) = model.forward_f64(pt).unwrap();
        hidden.iter().zip(g).map(|(h, &gv)| h * gv as f64).sum()
    };
    (0..base.len())
        .map(|i| {
            let mut hi = base.clone();
            let mut lo = base.clone();
            hi[i] += step;
            lo[i] -= step;
            (scalar(&hi) - scalar(&lo)) / (2.0 * step)
        })
        .collect()
}

#[test]
fn backprop_matches_finite_differences_on_conv_net() {
    let model = Model::seeded(
        vec![1, 6, 6],
        &[
            LayerSpec::Conv2d { out_c: 2, kh: 3, kw: 3, activation: Activation::Sigmoid },
            LayerSpec::Conv2d { out_c: 2, kh: 2, kw: 2, activation: Activation::Sigmoid },
            LayerSpec::Flatten,
            LayerSpec::Dense { out: 3, activation: Activation::Identity },
        ],
        3,
        5,
    )
    .unwrap();
    let x = random_input(36, 8).reshaped(vec![1, 6, 6]).unwrap();
    let mut rng = Rng::new(77);
    let g: Vec<f32> = (0..model.hidden_len()).map(|_| (rng.next_f64() * 2.0 - 1.0) as f32).collect();
    let gx = model
        .backprop_to_input(&x, &Tensor::from_vec(g.clone()).unwrap())
        .unwrap();
    let fd = fd_input_grad(&model, &x, &g, 1e-3);
    for (a, b) in gx.data().iter().zip(&fd) {
        let err = (*a as f64 - b).abs();
        assert!(err <= 1e-3 * b.abs().max(1e-3), "analytic {a} vs fd {b}");
    }
}

#[test]
fn backprop_rejects_bad_grad_shape() {
    let model = random_mlp(2);
    let x = random_input(6, 1);
    let err = model
        .backprop_to_input(&x, &Tensor::from_vec(vec![0.0; 2]).unwrap())
        .unwrap_err();
    assert!(matches!(err, crate::error::Error::InvalidInput(_)));
}

fn blob_set() -> LabeledSet {
    synth_blobs(2, 20, 4, 0.05, 21).unwrap()
}

fn random_mlp_for_blobs(seed: u64) -> Model {
    Model::seeded(
        vec![4],
        &[
            LayerSpec::Dense { out: 8, activation: Activation::Relu },
            LayerSpec::Dense { out: 2, activation: Activation::Identity },
        ],
        2,
        seed,
    )
    .unwrap()
}

#[test]
fn fine_tune_zero_epochs_is_identity() {
    let model = random_mlp_for_blobs(0);
    let out = fine_tune(&model, &blob_set(), 0, 0.1, 1).unwrap();
    assert_eq!(out.digest(), model.digest());
}

#[test]
fn fine_tune_is_deterministic_and_pure() {
    let model = random_mlp_for_blobs(5);
    let before = model.digest();
    let set = blob_set();
    let a = fine_tune(&model, &set, 3, 0.1, 42).unwrap();
    let b = fine_tune(&model, &set, 3, 0.1, 42).unwrap();
    assert_eq!(a.digest(), b.digest());
    let c = fine_tune(&model, &set, 3, 0.1, 43).unwrap();
    assert_ne!(a.digest(), c.digest());
    assert_eq!(model.digest(), before, "input model must not be mutated");
}

#[test]
fn fine_tune_learns_separable_blobs() {
    let model = random_mlp_for_blobs(5);
    let set = blob_set();
    let trained = fine_tune(&model, &set, 50, 0.5, 42).unwrap();
    let acc = accuracy(&trained, &set).unwrap();
    assert!(acc >= 0.95, "training accuracy {acc}");
}

#[test]
fn fine_tune_rejects_empty_dataset() {
    let model = random_mlp_for_blobs(1);
    let empty = LabeledSet::new(vec![], vec![], 2).unwrap();
    assert!(fine_tune(&model, &empty, 1, 0.1, 0).is_err());
}

#[test]
fn digest_changes_with_any_parameter() {
    let model = random_mlp(9);
    assert_eq!(model.digest(), model.digest());
    let flipped = model.map_params(|li, role, data| {
        if li == 1 && role == ParamRole::Weights {
            data[0] = -data[0];
        }
    });
    assert_ne!(model.digest(), flipped.digest());
}

#[test]
fn serialization_round_trips_bit_exactly() {
    let model = Model::seeded(
        vec![1, 5, 5],
        &[
            LayerSpec::Conv2d { out_c: 3, kh: 2, kw: 2, activation: Activation::Relu },
            LayerSpec::Flatten,
            LayerSpec::Dense { out: 6, activation: Activation::Sigmoid },
            LayerSpec::Dense { out: 4, activation: Activation::Identity },
        ],
        4,
        31,
    )
    .unwrap();
    let bytes = to_bytes(&model);
    let back = from_bytes(&bytes).unwrap();
    assert_eq!(back, model);
    assert_eq!(to_bytes(&back), bytes);
    assert_eq!(back.digest(), model.digest());
}

#[test]
fn from_bytes_rejects_corruption() {
    let model = random_mlp(4);
    let bytes = to_bytes(&model);
    // Truncated payload.
    let err = from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
    assert!(matches!(err, crate::error::Error::Parse { .. }));
    // Wrong version.
    let mut wrong = bytes.clone();
    let pos = wrong.iter().position(|&b| b == b'1').unwrap();
    wrong[pos] = b'7';
    let err = from_bytes(&wrong).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains('7') && msg.contains('1'), "{msg}");
    // Garbage magic.
    let err = from_bytes(b"NOTAMODEL 1\n").unwrap_err();
    assert!(matches!(err, crate::error::Error::Parse { .. }));
}

#[test]
fn model_construction_validates_chain() {
    // Dense after conv without flatten.
    assert!(Model::new(
        vec![1, 4, 4],
        vec![
            Layer {
                kind: LayerKind::Conv2d {
                    out_c: 1,
                    in_c: 1,
                    kh: 2,
                    kw: 2,
                    kernels: vec![0.0; 4],
                    bias: vec![0.0],
                },
                activation: Activation::Relu,
            },
            dense(2, 9, vec![0.0; 18], vec![0.0; 2], Activation::Identity),
        ],
        2,
    )
    .is_err());
    // Final layer must be identity dense.
    assert!(Model::new(
        vec![2],
        vec![dense(2, 2, vec![0.0; 4], vec![0.0; 2], Activation::Relu)],
        2,
    )
    .is_err());
}
