//! Constrained sensitive-sample generation.
//!
//! [`generate`] runs ADAM gradient ascent on the sensitivity of a model's
//! output to its last-layer parameters, starting from a natural origin
//! input. Each iterate is projected onto the valid box by clamping, and
//! the walk stops once the next step would push the relative perturbation
//! `||v - v0|| / ||v0||` past the similarity threshold. The best feasible
//! iterate seen wins, so every returned sample satisfies both constraints
//! by construction.
//!
//! The module also provides the comparison transforms (random noise,
//! rotation, sinusoidal distortion) used as baseline fingerprint
//! generators.

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::rng::{mix, Rng};
use crate::sensitivity::{sensitivity, ParamSelector};
use crate::tensor::Tensor;

/// Generation hyper-parameters. The defaults mirror the shipped
/// experiment settings: ADAM with learning rate 1e-3 for at most 1000
/// iterations, a 10% relative-perturbation budget, and the unit box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenConfig {
    pub lr: f64,
    pub itr_max: u32,
    /// Similarity threshold on `||v - v0|| / ||v0||`.
    pub epsilon: f64,
    pub box_low: f32,
    pub box_high: f32,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            lr: 1e-3,
            itr_max: 1000,
            epsilon: 0.1,
            box_low: 0.0,
            box_high: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl GenConfig {
    fn validate(&self) -> Result<()> {
        if !(self.box_low < self.box_high) {
            return Err(Error::invalid_input("box_low must be below box_high"));
        }
        if self.lr <= 0.0 || self.epsilon < 0.0 {
            return Err(Error::invalid_input("lr must be positive and epsilon non-negative"));
        }
        Ok(())
    }
}

/// A generated sample with its provenance and the reference model's
/// softmax output at the final iterate.
#[derive(Debug, Clone)]
pub struct SensitiveSample {
    pub v: Tensor,
    pub v0: Tensor,
    pub s_final: f64,
    /// `||v - v0|| / ||v0||`.
    pub snr_ratio: f64,
    pub iterations_used: u32,
    pub expected_probs: Vec<f32>,
}

impl SensitiveSample {
    /// Wrap an untransformed input as a zero-iteration sample, used for
    /// natural and transform-baseline fingerprints.
    pub fn from_origin(model: &Model, sel: ParamSelector, v: Tensor) -> Result<Self> {
        let s = sensitivity(model, &v, sel)?.s;
        let (probs, _) = model.forward(&v)?;
        Ok(SensitiveSample {
            v0: v.clone(),
            v,
            s_final: s,
            snr_ratio: 0.0,
            iterations_used: 0,
            expected_probs: probs,
        })
    }

    /// The perturbation expressed in decibels, `20 log10(1 / ratio)`;
    /// infinite for an untouched sample.
    pub fn snr_db(&self) -> f64 {
        if self.snr_ratio == 0.0 {
            f64::INFINITY
        } else {
            20.0 * (1.0 / self.snr_ratio).log10()
        }
    }
}

fn perturbation_ratio(v: &Tensor, v0: &Tensor, v0_norm: f64) -> f64 {
    let diff = v.dist(v0);
    if v0_norm == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / v0_norm
    }
}

/// Projected ADAM ascent on the sensitivity, from origin `v0`.
pub fn generate(model: &Model, sel: ParamSelector, v0: &Tensor, cfg: &GenConfig) -> Result<SensitiveSample> {
    cfg.validate()?;
    if v0.shape() != model.input_shape() {
        return Err(Error::invalid_input("origin shape does not match model input"));
    }
    if v0
        .data()
        .iter()
        .any(|&p| p < cfg.box_low || p > cfg.box_high)
    {
        return Err(Error::invalid_input(format!(
            "origin leaves the [{}, {}] box",
            cfg.box_low, cfg.box_high
        )));
    }

    let v0_norm = v0.norm();
    let n = v0.len();
    let mut v = v0.clone();
    let mut value = sensitivity(model, &v, sel)?;

    let mut best_s = value.s;
    let mut best_v = v0.clone();
    let mut best_ratio = 0.0f64;

    let mut m = vec![0.0f64; n];
    let mut u = vec![0.0f64; n];
    let mut iterations_used = 0u32;

    for t in 1..=cfg.itr_max {
        let grad = value.grad_x.data();
        let bias1 = 1.0 - cfg.adam_beta1.powi(t as i32);
        let bias2 = 1.0 - cfg.adam_beta2.powi(t as i32);
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let g = grad[i] as f64;
            m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * g;
            u[i] = cfg.adam_beta2 * u[i] + (1.0 - cfg.adam_beta2) * g * g;
            let step = cfg.lr * (m[i] / bias1) / ((u[i] / bias2).sqrt() + cfg.adam_eps);
            let moved = (v.data()[i] as f64 + step) as f32;
            next.push(moved.clamp(cfg.box_low, cfg.box_high));
        }
        let candidate = Tensor::new(v0.shape().to_vec(), next)?;
        let ratio = perturbation_ratio(&candidate, v0, v0_norm);
        if ratio > cfg.epsilon {
            break;
        }
        v = candidate;
        iterations_used = t;
        value = sensitivity(model, &v, sel)?;
        if value.s > best_s {
            best_s = value.s;
            best_v = v.clone();
            best_ratio = ratio;
        }
    }

    let (probs, _) = model.forward(&best_v)?;
    Ok(SensitiveSample {
        v: best_v,
        v0: v0.clone(),
        s_final: best_s,
        snr_ratio: best_ratio,
        iterations_used,
        expected_probs: probs,
    })
}

/// Generate one sample per origin drawn from `pool` without replacement
/// (reshuffling and wrapping when `n` exceeds the pool). Output order is
/// the draw order and is deterministic in `cfg.seed`.
pub fn generate_bag(
    model: &Model,
    sel: ParamSelector,
    pool: &[Tensor],
    n: usize,
    cfg: &GenConfig,
) -> Result<Vec<SensitiveSample>> {
    if pool.is_empty() {
        return Err(Error::invalid_input("origin pool is empty"));
    }
    if n == 0 {
        return Err(Error::invalid_input("bag size must be at least 1"));
    }
    let mut rng = Rng::new(mix(cfg.seed, 0x6261_67)); // "bag"
    let mut picks = Vec::with_capacity(n);
    while picks.len() < n {
        let want = (n - picks.len()).min(pool.len());
        picks.extend(rng.sample_indices(pool.len(), want));
    }
    picks
        .into_iter()
        .map(|i| generate(model, sel, &pool[i], cfg))
        .collect()
}

/// Origin plus Gaussian noise, clamped to the unit box.
pub fn baseline_noise(v0: &Tensor, sigma: f64, seed: u64) -> Tensor {
    assert!(sigma >= 0.0, "sigma must be non-negative");
    let mut rng = Rng::new(seed);
    let data = v0
        .data()
        .iter()
        .map(|&p| ((p as f64 + sigma * rng.gaussian()) as f32).clamp(0.0, 1.0))
        .collect();
    Tensor::new(v0.shape().to_vec(), data).expect("clamped values are finite")
}

fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [h, w] => Ok((1, *h, *w)),
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(Error::invalid_input(format!(
            "expected a 2-D or channelled 2-D image, got shape {other:?}"
        ))),
    }
}

/// Nearest-neighbour rotation about the image centre; pixels sampled from
/// outside the frame are filled with the box floor (0.0).
pub fn baseline_rotate(v0: &Tensor, degrees: f64) -> Result<Tensor> {
    let (c, h, w) = image_dims(v0.shape())?;
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = vec![0.0f32; v0.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let sy = (cy + dy * cos + dx * sin).round();
                let sx = (cx - dy * sin + dx * cos).round();
                if sy >= 0.0 && sy < h as f64 && sx >= 0.0 && sx < w as f64 {
                    let (sy, sx) = (sy as usize, sx as usize);
                    out[(ch * h + y) * w + x] = v0.data()[(ch * h + sy) * w + sx];
                }
            }
        }
    }
    Tensor::new(v0.shape().to_vec(), out)
}

/// Sinusoidal horizontal shear: row `y` rotates cyclically by
/// `round(amplitude * sin(2 pi y / period))` pixels.
pub fn baseline_distort(v0: &Tensor, amplitude: f64, period: f64, _seed: u64) -> Result<Tensor> {
    if amplitude < 0.0 || period <= 0.0 {
        return Err(Error::invalid_input("amplitude must be >= 0 and period > 0"));
    }
    let (c, h, w) = image_dims(v0.shape())?;
    let mut out = vec![0.0f32; v0.len()];
    for ch in 0..c {
        for y in 0..h {
            let shift = (amplitude * (std::f64::consts::TAU * y as f64 / period).sin()).round() as i64;
            for x in 0..w {
                let src = (x as i64 - shift).rem_euclid(w as i64) as usize;
                out[(ch * h + y) * w + x] = v0.data()[(ch * h + y) * w + src];
            }
        }
    }
    Tensor::new(v0.shape().to_vec(), out)
}
