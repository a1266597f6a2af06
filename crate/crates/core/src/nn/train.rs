//! Cross-entropy fine-tuning with plain mini-batch SGD.
//!
//! The batch order is a pure function of the seed (one shuffle per epoch,
//! no time-dependent state), so training the same model on the same data
//! with the same seed reproduces the same bytes.

use super::{Layer, LayerKind, Model, ParamRole, Trace};
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::rng::{mix, Rng};

const BATCH_SIZE: usize = 32;

/// Argmax with ties broken by the lowest class index.
pub fn predicted_label(probs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose top-1 prediction matches the label.
pub fn accuracy(model: &Model, set: &LabeledSet) -> Result<f64> {
    if set.len() == 0 {
        return Err(Error::invalid_input("empty dataset"));
    }
    let mut hits = 0usize;
    for (x, &label) in set.inputs.iter().zip(&set.labels) {
        let (probs, _) = model.forward(x)?;
        if predicted_label(&probs) == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / set.len() as f64)
}

/// Per-layer parameter gradients, accumulated in f64.
struct Grads {
    layers: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Grads {
    fn zeros(model: &Model) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|l| match &l.kind {
                LayerKind::Dense { weights, bias, .. } => {
                    Some((vec![0.0; weights.len()], vec![0.0; bias.len()]))
                }
                LayerKind::Conv2d { kernels, bias, .. } => {
                    Some((vec![0.0; kernels.len()], vec![0.0; bias.len()]))
                }
                LayerKind::Flatten => None,
            })
            .collect();
        Grads { layers }
    }
}

/// Backward pass for one sample; `dlogits` is the cross-entropy gradient
/// w.r.t. the final dense logits (`probs - onehot`).
fn accumulate_sample(model: &Model, trace: &Trace, dlogits: &[f64], grads: &mut Grads) {
    let mut g: Vec<f64> = dlogits.to_vec();
    for li in (0..model.layers.len()).rev() {
        let layer = &model.layers[li];
        // Gradient w.r.t. this layer's pre-activation.
        let gz: Vec<f64> = if li == model.layers.len() - 1 {
            g.clone()
        } else {
            match layer.activation {
                super::Activation::Identity => g.clone(),
                act => g
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * act.derivative(trace.preacts[li][i], trace.outputs[li][i]))
                    .collect(),
            }
        };
        let input: &[f32] = if li == 0 { &trace.input } else { &trace.outputs[li - 1] };
        if let Some((dw, db)) = grads.layers[li].as_mut() {
            accumulate_layer(layer, model.layer_in_shape(li), input, &gz, dw, db);
        }
        if li > 0 {
            g = propagate(model, li, &gz);
        }
    }
}

fn accumulate_layer(
    layer: &Layer,
    in_shape: &[usize],
    input: &[f32],
    gz: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    match &layer.kind {
        LayerKind::Dense { out, inp, .. } => {
            for k in 0..*out {
                db[k] += gz[k];
                let row = &mut dw[k * inp..(k + 1) * inp];
                for j in 0..*inp {
                    row[j] += gz[k] * input[j] as f64;
                }
            }
        }
        LayerKind::Conv2d { out_c, in_c, kh, kw, .. } => {
            let (h, w) = (in_shape[1], in_shape[2]);
            let (oh, ow) = (h - kh + 1, w - kw + 1);
            for oc in 0..*out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gzv = gz[(oc * oh + oy) * ow + ox];
                        if gzv == 0.0 {
                            continue;
                        }
                        db[oc] += gzv;
                        for ic in 0..*in_c {
                            for ky in 0..*kh {
                                for kx in 0..*kw {
                                    let iv = input[(ic * h + oy + ky) * w + ox + kx] as f64;
                                    dw[((oc * in_c + ic) * kh + ky) * kw + kx] += gzv * iv;
                                }
                            }
                        }
                    }
                }
            }
        }
        LayerKind::Flatten => {}
    }
}

/// Push a pre-activation gradient back through layer `li` to its input.
fn propagate(model: &Model, li: usize, gz: &[f64]) -> Vec<f64> {
    let layer = &model.layers[li];
    let in_shape = model.layer_in_shape(li);
    match &layer.kind {
        LayerKind::Dense { out, inp, weights, .. } => {
            let mut gin = vec![0.0f64; *inp];
            for k in 0..*out {
                if gz[k] == 0.0 {
                    continue;
                }
                let row = &weights[k * inp..(k + 1) * inp];
                for j in 0..*inp {
                    gin[j] += row[j] as f64 * gz[k];
                }
            }
            gin
        }
        LayerKind::Conv2d { out_c, in_c, kh, kw, kernels, .. } => {
            let (h, w) = (in_shape[1], in_shape[2]);
            let (oh, ow) = (h - kh + 1, w - kw + 1);
            let mut gin = vec![0.0f64; in_c * h * w];
            for oc in 0..*out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gzv = gz[(oc * oh + oy) * ow + ox];
                        if gzv == 0.0 {
                            continue;
                        }
                        for ic in 0..*in_c {
                            for ky in 0..*kh {
                                for kx in 0..*kw {
                                    let kv = kernels[((oc * in_c + ic) * kh + ky) * kw + kx] as f64;
                                    gin[(ic * h + oy + ky) * w + ox + kx] += kv * gzv;
                                }
                            }
                        }
                    }
                }
            }
            gin
        }
        LayerKind::Flatten => gz.to_vec(),
    }
}

impl Model {
    fn layer_in_shape(&self, li: usize) -> &[usize] {
        if li == 0 {
            &self.input_shape
        } else {
            &self.output_shapes[li - 1]
        }
    }
}

/// Train a copy of `model` on `set` with mini-batch cross-entropy SGD.
/// The input model is not modified; the result is deterministic in `seed`.
pub fn fine_tune(model: &Model, set: &LabeledSet, epochs: u32, lr: f64, seed: u64) -> Result<Model> {
    if set.len() == 0 {
        return Err(Error::invalid_input("empty dataset"));
    }
    for x in &set.inputs {
        if x.shape() != model.input_shape() {
            return Err(Error::invalid_input(format!(
                "dataset input shape {:?} does not match model input {:?}",
                x.shape(),
                model.input_shape()
            )));
        }
    }
    if set.labels.iter().any(|&l| l >= model.num_classes()) {
        return Err(Error::invalid_input("label out of model class range"));
    }

    let mut work = model.clone();
    let n = set.len();
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        Rng::new(mix(seed, epoch as u64)).shuffle(&mut order);
        for batch in order.chunks(BATCH_SIZE) {
            let mut grads = Grads::zeros(&work);
            for &idx in batch {
                let trace = work.trace(&set.inputs[idx]);
                let mut dlogits: Vec<f64> = trace.probs.iter().map(|&p| p as f64).collect();
                dlogits[set.labels[idx]] -= 1.0;
                accumulate_sample(&work, &trace, &dlogits, &mut grads);
            }
            let scale = lr / batch.len() as f64;
            work.for_each_param_mut(|layer_idx, role, data| {
                if let Some((dw, db)) = grads.layers[layer_idx].as_ref() {
                    let g = match role {
                        ParamRole::Weights => dw,
                        ParamRole::Bias => db,
                    };
                    for (w, &gv) in data.iter_mut().zip(g.iter()) {
                        *w = (*w as f64 - scale * gv) as f32;
                    }
                }
            });
        }
    }
    Ok(work)
}
