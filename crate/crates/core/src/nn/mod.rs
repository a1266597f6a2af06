//! Minimal deterministic feed-forward network engine.
//!
//! Supports the architectures the toolkit needs and nothing more: `Dense`,
//! `Conv2d` (stride 1, valid padding) and `Flatten` layers with ReLU,
//! sigmoid or identity activations, followed by an implicit softmax over
//! the final dense layer's outputs.
//!
//! Determinism is the load-bearing property. All arithmetic is 32-bit with
//! 64-bit accumulation, loops run in a fixed order, and models are
//! immutable after construction, so a forward pass over the same bytes
//! yields the same bytes on every run and from any thread.

mod io;
mod train;

pub use io::{from_bytes, load, save, to_bytes, ModelDigest};
pub use train::{accuracy, fine_tune, predicted_label};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f32) -> f32 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => (1.0 / (1.0 + (-(z as f64)).exp())) as f32,
            Activation::Identity => z,
        }
    }

    #[inline]
    fn apply64(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Identity => z,
        }
    }

    /// Derivative given the pre-activation `z` and post-activation `a`.
    #[inline]
    fn derivative(self, z: f32, a: f32) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let a = a as f64;
                a * (1.0 - a)
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::invalid_input(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// Affine map `z = W x + b`; `weights` is row-major `out x inp`.
    Dense {
        out: usize,
        inp: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    },
    /// 2-D convolution, stride 1, valid padding. `kernels` is
    /// `[out_c][in_c][kh][kw]` flattened; input is `[in_c, h, w]`.
    Conv2d {
        out_c: usize,
        in_c: usize,
        kh: usize,
        kw: usize,
        kernels: Vec<f32>,
        bias: Vec<f32>,
    },
    /// Reshape to 1-D. Carries no parameters and must use `Identity`.
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weights,
    Bias,
}

/// Architecture description used to build randomly initialised models.
/// Shapes are inferred from the input shape and preceding layers.
#[derive(Debug, Clone)]
pub enum LayerSpec {
    Dense { out: usize, activation: Activation },
    Conv2d { out_c: usize, kh: usize, kw: usize, activation: Activation },
    Flatten,
}

/// An immutable feed-forward model. The final layer is always `Dense` with
/// `Identity` activation; `forward` applies softmax over its outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    num_classes: usize,
    /// Output shape of each layer, precomputed at construction.
    output_shapes: Vec<Vec<usize>>,
}

fn infer_output_shape(kind: &LayerKind, activation: Activation, in_shape: &[usize]) -> Result<Vec<usize>> {
    match kind {
        LayerKind::Dense { out, inp, weights, bias } => {
            if in_shape.len() != 1 || in_shape[0] != *inp {
                return Err(Error::invalid_input(format!(
                    "dense layer expects 1-D input of {inp}, got {in_shape:?}"
                )));
            }
            if weights.len() != out * inp || bias.len() != *out || *out == 0 {
                return Err(Error::invalid_input("dense layer has inconsistent shapes"));
            }
            Ok(vec![*out])
        }
        LayerKind::Conv2d { out_c, in_c, kh, kw, kernels, bias } => {
            if in_shape.len() != 3 || in_shape[0] != *in_c {
                return Err(Error::invalid_input(format!(
                    "conv2d expects [in_c={in_c}, h, w] input, got {in_shape:?}"
                )));
            }
            let (h, w) = (in_shape[1], in_shape[2]);
            if h < *kh || w < *kw {
                return Err(Error::invalid_input(format!(
                    "conv2d {kh}x{kw} kernel does not fit {h}x{w} input"
                )));
            }
            if kernels.len() != out_c * in_c * kh * kw || bias.len() != *out_c || *out_c == 0 {
                return Err(Error::invalid_input("conv2d layer has inconsistent shapes"));
            }
            Ok(vec![*out_c, h - kh + 1, w - kw + 1])
        }
        LayerKind::Flatten => {
            if activation != Activation::Identity {
                return Err(Error::invalid_input("flatten must use identity activation"));
            }
            Ok(vec![in_shape.iter().product()])
        }
    }
}

impl Model {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>, num_classes: usize) -> Result<Self> {
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid_input("input shape must be positive dims"));
        }
        if layers.is_empty() {
            return Err(Error::invalid_input("model needs at least one layer"));
        }
        if num_classes < 2 {
            return Err(Error::invalid_input("num_classes must be at least 2"));
        }
        let mut shape = input_shape.clone();
        let mut output_shapes = Vec::with_capacity(layers.len());
        for layer in &layers {
            shape = infer_output_shape(&layer.kind, layer.activation, &shape)?;
            output_shapes.push(shape.clone());
        }
        let last = layers.last().unwrap();
        match (&last.kind, last.activation) {
            (LayerKind::Dense { out, .. }, Activation::Identity) if *out == num_classes => {}
            _ => {
                return Err(Error::invalid_input(
                    "final layer must be dense with identity activation and num_classes outputs",
                ))
            }
        }
        if let Some(bad) = layers.iter().find_map(|l| match &l.kind {
            LayerKind::Dense { weights, bias, .. } | LayerKind::Conv2d { kernels: weights, bias, .. } => weights
                .iter()
                .chain(bias.iter())
                .find(|v| !v.is_finite()),
            LayerKind::Flatten => None,
        }) {
            return Err(Error::invalid_input(format!("non-finite parameter {bad}")));
        }
        Ok(Model {
            input_shape,
            layers,
            num_classes,
            output_shapes,
        })
    }

    /// Build a model with Xavier-uniform weights and zero biases,
    /// deterministic in `seed`.
    pub fn seeded(
        input_shape: Vec<usize>,
        specs: &[LayerSpec],
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let mut shape = input_shape.clone();
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let layer = match spec {
                LayerSpec::Dense { out, activation } => {
                    if shape.len() != 1 {
                        return Err(Error::invalid_input(format!(
                            "dense layer needs 1-D input, got {shape:?} (insert flatten?)"
                        )));
                    }
                    let inp = shape[0];
                    let weights = xavier(&mut rng, *out * inp, inp, *out);
                    Layer {
                        kind: LayerKind::Dense { out: *out, inp, weights, bias: vec![0.0; *out] },
                        activation: *activation,
                    }
                }
                LayerSpec::Conv2d { out_c, kh, kw, activation } => {
                    if shape.len() != 3 {
                        return Err(Error::invalid_input(format!(
                            "conv2d needs [c, h, w] input, got {shape:?}"
                        )));
                    }
                    let in_c = shape[0];
                    let fan_in = in_c * kh * kw;
                    let fan_out = out_c * kh * kw;
                    let kernels = xavier(&mut rng, out_c * in_c * kh * kw, fan_in, fan_out);
                    Layer {
                        kind: LayerKind::Conv2d {
                            out_c: *out_c,
                            in_c,
                            kh: *kh,
                            kw: *kw,
                            kernels,
                            bias: vec![0.0; *out_c],
                        },
                        activation: *activation,
                    }
                }
                LayerSpec::Flatten => Layer { kind: LayerKind::Flatten, activation: Activation::Identity },
            };
            shape = infer_output_shape(&layer.kind, layer.activation, &shape)?;
            layers.push(layer);
        }
        Model::new(input_shape, layers, num_classes)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Length of the activation vector feeding the final dense layer.
    pub fn hidden_len(&self) -> usize {
        match &self.layers.last().unwrap().kind {
            LayerKind::Dense { inp, .. } => *inp,
            _ => unreachable!("validated at construction"),
        }
    }

    /// Index of the final dense layer.
    pub fn last_layer_index(&self) -> usize {
        self.layers.len() - 1
    }

    /// Weights and bias of the final dense layer.
    pub fn last_dense(&self) -> (&[f32], &[f32], usize, usize) {
        match &self.layers.last().unwrap().kind {
            LayerKind::Dense { out, inp, weights, bias } => (weights, bias, *out, *inp),
            _ => unreachable!("validated at construction"),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match &l.kind {
                LayerKind::Dense { weights, bias, .. } => weights.len() + bias.len(),
                LayerKind::Conv2d { kernels, bias, .. } => kernels.len() + bias.len(),
                LayerKind::Flatten => 0,
            })
            .sum()
    }

    /// Visit every parameter tensor in declaration order (weights before
    /// bias within a layer).
    pub fn visit_params(&self, mut f: impl FnMut(usize, ParamRole, &[f32])) {
        for (i, layer) in self.layers.iter().enumerate() {
            match &layer.kind {
                LayerKind::Dense { weights, bias, .. } => {
                    f(i, ParamRole::Weights, weights);
                    f(i, ParamRole::Bias, bias);
                }
                LayerKind::Conv2d { kernels, bias, .. } => {
                    f(i, ParamRole::Weights, kernels);
                    f(i, ParamRole::Bias, bias);
                }
                LayerKind::Flatten => {}
            }
        }
    }

    /// A copy of the model with every parameter tensor rewritten in place,
    /// in declaration order. The original is untouched.
    pub fn map_params(&self, mut f: impl FnMut(usize, ParamRole, &mut [f32])) -> Model {
        let mut copy = self.clone();
        copy.for_each_param_mut(|i, role, data| f(i, role, data));
        copy
    }

    pub(crate) fn for_each_param_mut(&mut self, mut f: impl FnMut(usize, ParamRole, &mut [f32])) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match &mut layer.kind {
                LayerKind::Dense { weights, bias, .. } => {
                    f(i, ParamRole::Weights, weights);
                    f(i, ParamRole::Bias, bias);
                }
                LayerKind::Conv2d { kernels, bias, .. } => {
                    f(i, ParamRole::Weights, kernels);
                    f(i, ParamRole::Bias, bias);
                }
                LayerKind::Flatten => {}
            }
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::invalid_input(format!(
                "input shape {:?} does not match model input {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Forward pass. Returns the softmax probabilities and the hidden
    /// activation vector feeding the final dense layer.
    pub fn forward(&self, x: &Tensor) -> Result<(Vec<f32>, Tensor)> {
        self.check_input(x)?;
        let trace = self.trace(x);
        let hidden_shape = if self.layers.len() == 1 {
            self.input_shape.clone()
        } else {
            self.output_shapes[self.layers.len() - 2].clone()
        };
        let hidden = Tensor::new(hidden_shape, trace.hidden().to_vec())?;
        Ok((trace.probs, hidden))
    }

    /// Forward pass of the whole net in f64, used by the finite-difference
    /// oracles. Parameters are widened from their f32 values; `x` supplies
    /// the (possibly perturbed) input.
    pub fn forward_f64(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != self.input_len() {
            return Err(Error::invalid_input(format!(
                "expected {} input elements, got {}",
                self.input_len(),
                x.len()
            )));
        }
        let mut cur: Vec<f64> = x.to_vec();
        let mut in_shape = self.input_shape.clone();
        let mut hidden = cur.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            if li == self.layers.len() - 1 {
                hidden = cur.clone();
            }
            let pre = match &layer.kind {
                LayerKind::Dense { out, inp, weights, bias } => {
                    let mut z = vec![0.0f64; *out];
                    for k in 0..*out {
                        let mut acc = bias[k] as f64;
                        let row = &weights[k * inp..(k + 1) * inp];
                        for j in 0..*inp {
                            acc += row[j] as f64 * cur[j];
                        }
                        z[k] = acc;
                    }
                    z
                }
                LayerKind::Conv2d { out_c, in_c, kh, kw, kernels, bias } => {
                    let (h, w) = (in_shape[1], in_shape[2]);
                    let (oh, ow) = (h - kh + 1, w - kw + 1);
                    let mut z = vec![0.0f64; out_c * oh * ow];
                    for oc in 0..*out_c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = bias[oc] as f64;
                                for ic in 0..*in_c {
                                    for ky in 0..*kh {
                                        for kx in 0..*kw {
                                            let kv = kernels[((oc * in_c + ic) * kh + ky) * kw + kx] as f64;
                                            let iv = cur[(ic * h + oy + ky) * w + ox + kx];
                                            acc += kv * iv;
                                        }
                                    }
                                }
                                z[(oc * oh + oy) * ow + ox] = acc;
                            }
                        }
                    }
                    z
                }
                LayerKind::Flatten => cur.clone(),
            };
            cur = pre.iter().map(|&z| layer.activation.apply64(z)).collect();
            in_shape = self.output_shapes[li].clone();
        }
        // `cur` now holds the final dense logits (identity activation).
        let probs = softmax64(&cur);
        Ok((probs, hidden))
    }

    /// Gradient of a scalar with respect to the input, where `grad_hidden`
    /// is its gradient with respect to the last hidden activation. The
    /// chain rule is carried through every layer before the final dense.
    pub fn backprop_to_input(&self, x: &Tensor, grad_hidden: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        if grad_hidden.len() != self.hidden_len() {
            return Err(Error::invalid_input(format!(
                "grad_hidden has {} elements, hidden layer has {}",
                grad_hidden.len(),
                self.hidden_len()
            )));
        }
        let trace = self.trace(x);
        let mut g: Vec<f64> = grad_hidden.data().iter().map(|&v| v as f64).collect();
        // Walk back over every layer before the final dense.
        for li in (0..self.layers.len() - 1).rev() {
            g = self.backward_input_one(li, &trace, &g);
        }
        let data: Vec<f32> = g.iter().map(|&v| v as f32).collect();
        Tensor::new(self.input_shape.clone(), data)
    }

    /// Gradient through layer `li`: `g` is w.r.t. the layer's
    /// post-activation output; returns the gradient w.r.t. its input.
    pub(crate) fn backward_input_one(&self, li: usize, trace: &Trace, g: &[f64]) -> Vec<f64> {
        let layer = &self.layers[li];
        let gz = apply_activation_grad(layer, &trace.preacts[li], &trace.outputs[li], g);
        let in_shape = if li == 0 {
            &self.input_shape
        } else {
            &self.output_shapes[li - 1]
        };
        match &layer.kind {
            LayerKind::Dense { out, inp, weights, .. } => {
                let mut gin = vec![0.0f64; *inp];
                for k in 0..*out {
                    let gzk = gz[k];
                    if gzk == 0.0 {
                        continue;
                    }
                    let row = &weights[k * inp..(k + 1) * inp];
                    for j in 0..*inp {
                        gin[j] += row[j] as f64 * gzk;
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
            LayerKind::Flatten => gz,
        }
    }

    /// Full forward pass retaining every layer's pre- and post-activation
    /// values; shared by inference, input backprop and training.
    pub(crate) fn trace(&self, x: &Tensor) -> Trace {
        let mut outputs: Vec<Vec<f32>> = Vec::with_capacity(self.layers.len());
        let mut preacts: Vec<Vec<f32>> = Vec::with_capacity(self.layers.len());
        let mut cur: Vec<f32> = x.data().to_vec();
        let mut in_shape: &[usize] = &self.input_shape;
        for (li, layer) in self.layers.iter().enumerate() {
            let pre = match &layer.kind {
                LayerKind::Dense { out, inp, weights, bias } => {
                    let mut z = vec![0.0f32; *out];
                    for k in 0..*out {
                        let mut acc = bias[k] as f64;
                        let row = &weights[k * inp..(k + 1) * inp];
                        for j in 0..*inp {
                            acc += row[j] as f64 * cur[j] as f64;
                        }
                        z[k] = acc as f32;
                    }
                    z
                }
                LayerKind::Conv2d { out_c, in_c, kh, kw, kernels, bias } => {
                    let (h, w) = (in_shape[1], in_shape[2]);
                    let (oh, ow) = (h - kh + 1, w - kw + 1);
                    let mut z = vec![0.0f32; out_c * oh * ow];
                    for oc in 0..*out_c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = bias[oc] as f64;
                                for ic in 0..*in_c {
                                    for ky in 0..*kh {
                                        for kx in 0..*kw {
                                            let kv = kernels[((oc * in_c + ic) * kh + ky) * kw + kx] as f64;
                                            let iv = cur[(ic * h + oy + ky) * w + ox + kx] as f64;
                                            acc += kv * iv;
                                        }
                                    }
                                }
                                z[(oc * oh + oy) * ow + ox] = acc as f32;
                            }
                        }
                    }
                    z
                }
                LayerKind::Flatten => cur.clone(),
            };
            let post: Vec<f32> = pre.iter().map(|&z| layer.activation.apply(z)).collect();
            preacts.push(pre);
            outputs.push(post.clone());
            cur = post;
            in_shape = &self.output_shapes[li];
        }
        let probs = softmax32(outputs.last().unwrap());
        Trace {
            input: x.data().to_vec(),
            preacts,
            outputs,
            probs,
        }
    }
}

/// Cached intermediate values of one forward pass.
pub(crate) struct Trace {
    pub input: Vec<f32>,
    /// Pre-activation values per layer (the layer input copy for Flatten).
    pub preacts: Vec<Vec<f32>>,
    /// Post-activation values per layer.
    pub outputs: Vec<Vec<f32>>,
    pub probs: Vec<f32>,
}

impl Trace {
    /// Activation vector feeding the final dense layer.
    pub fn hidden(&self) -> &[f32] {
        if self.outputs.len() == 1 {
            &self.input
        } else {
            &self.outputs[self.outputs.len() - 2]
        }
    }
}

fn apply_activation_grad(layer: &Layer, pre: &[f32], post: &[f32], g: &[f64]) -> Vec<f64> {
    match layer.activation {
        Activation::Identity => g.to_vec(),
        act => g
            .iter()
            .enumerate()
            .map(|(i, &gv)| gv * act.derivative(pre[i], post[i]))
            .collect(),
    }
}

fn xavier(rng: &mut Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<f32> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n)
        .map(|_| ((rng.next_f64() * 2.0 - 1.0) * limit) as f32)
        .collect()
}

/// Numerically stable softmax: f32 in, f64 accumulation, f32 out.
pub(crate) fn softmax32(logits: &[f32]) -> Vec<f32> {
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&z| ((z - m) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| (e / sum) as f32).collect()
}

pub(crate) fn softmax64(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

#[cfg(test)]
mod tests;
