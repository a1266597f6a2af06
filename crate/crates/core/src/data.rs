//! Desk-scale dataset provisioning: synthetic blob datasets, IDX archive
//! ingestion, and deterministic stratified splits. Every emitted input
//! lies in the `[0, 1]` box that sample generation assumes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{mix, Rng};
use crate::tensor::Tensor;

/// A labelled dataset with uniform input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledSet {
    pub fn new(inputs: Vec<Tensor>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::invalid_input(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(first) = inputs.first() {
            let shape = first.shape().to_vec();
            for t in &inputs {
                if t.shape() != shape.as_slice() {
                    return Err(Error::invalid_input("inputs have mixed shapes"));
                }
                if t.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                    return Err(Error::invalid_input("input element outside [0, 1]"));
                }
            }
        }
        if labels.iter().any(|&l| l >= class_count) {
            return Err(Error::invalid_input("label out of class range"));
        }
        Ok(LabeledSet { inputs, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// The same samples reshaped to a new uniform input shape.
    pub fn reshaped(&self, shape: &[usize]) -> Result<LabeledSet> {
        let inputs = self
            .inputs
            .iter()
            .map(|t| t.reshaped(shape.to_vec()))
            .collect::<Result<_>>()?;
        Ok(LabeledSet { inputs, labels: self.labels.clone(), class_count: self.class_count })
    }
}

/// Gaussian class clusters with per-class means on a scaled simplex
/// (coordinate `c % dims` high, the rest low), clamped to `[0, 1]`.
pub fn synth_blobs(
    classes: usize,
    per_class: usize,
    dims: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledSet> {
    if classes < 2 {
        return Err(Error::invalid_input("need at least 2 classes"));
    }
    if per_class < 1 || dims < 1 {
        return Err(Error::invalid_input("per_class and dims must be positive"));
    }
    if spread < 0.0 {
        return Err(Error::invalid_input("spread must be non-negative"));
    }
    let mut rng = Rng::new(seed);
    let mut inputs = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let hot = c % dims;
        for _ in 0..per_class {
            let data: Vec<f32> = (0..dims)
                .map(|j| {
                    let mean = if j == hot { 0.8 } else { 0.2 };
                    let v = mean + spread * rng.gaussian();
                    v.clamp(0.0, 1.0) as f32
                })
                .collect();
            inputs.push(Tensor::from_vec(data).expect("clamped values are finite"));
            labels.push(c);
        }
    }
    LabeledSet::new(inputs, labels, classes)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::parse(offset, format!("file too short reading {what}")))
}

/// Parse an IDX image/label archive pair from raw bytes. Pixels are scaled
/// from `[0, 255]` bytes to `[0, 1]` reals; images come out as `[rows, cols]`.
pub fn load_idx_bytes(images: &[u8], labels: &[u8]) -> Result<LabeledSet> {
    let magic = read_be_u32(images, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::parse(0, format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let count = read_be_u32(images, 4, "image count")? as usize;
    let rows = read_be_u32(images, 8, "row count")? as usize;
    let cols = read_be_u32(images, 12, "column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::parse(8, "zero image dimensions"));
    }
    let pixel_bytes = count
        .checked_mul(rows * cols)
        .ok_or_else(|| Error::parse(4, "image sizes overflow"))?;
    if images.len() != 16 + pixel_bytes {
        return Err(Error::parse(
            images.len().min(16 + pixel_bytes),
            format!("image payload: expected {} bytes, found {}", 16 + pixel_bytes, images.len()),
        ));
    }

    let lmagic = read_be_u32(labels, 0, "label magic")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::parse(0, format!("bad label magic {lmagic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let lcount = read_be_u32(labels, 4, "label count")? as usize;
    if lcount != count {
        return Err(Error::parse(4, format!("{count} images but {lcount} labels")));
    }
    if labels.len() != 8 + lcount {
        return Err(Error::parse(
            labels.len().min(8 + lcount),
            format!("label payload: expected {} bytes, found {}", 8 + lcount, labels.len()),
        ));
    }

    let mut inputs = Vec::with_capacity(count);
    for i in 0..count {
        let at = 16 + i * rows * cols;
        let data: Vec<f32> = images[at..at + rows * cols]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        inputs.push(Tensor::new(vec![rows, cols], data)?);
    }
    let label_values: Vec<usize> = labels[8..].iter().map(|&b| b as usize).collect();
    let class_count = label_values.iter().copied().max().unwrap_or(0) + 1;
    LabeledSet::new(inputs, label_values, class_count.max(2))
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledSet> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    load_idx_bytes(&images, &labels)
}

/// Disjoint, label-stratified split. Per class, `round(fraction * n)` of
/// the samples (at least one, at most `n - 1`) go to the held-out side.
pub fn split(set: &LabeledSet, held_out_fraction: f64, seed: u64) -> Result<(LabeledSet, LabeledSet)> {
    if !(held_out_fraction > 0.0 && held_out_fraction < 1.0) {
        return Err(Error::invalid_input("held_out_fraction must be in (0, 1)"));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); set.class_count];
    for (i, &label) in set.labels.iter().enumerate() {
        by_class[label].push(i);
    }
    let mut held_mask = vec![false; set.len()];
    for (c, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::invalid_input(format!(
                "class {c} has {} sample(s); need at least 2 to split",
                members.len()
            )));
        }
        let take = ((held_out_fraction * members.len() as f64).round() as usize)
            .clamp(1, members.len() - 1);
        let mut order = members.clone();
        Rng::new(mix(seed, c as u64)).shuffle(&mut order);
        for &idx in order.iter().take(take) {
            held_mask[idx] = true;
        }
    }
    let mut train = (Vec::new(), Vec::new());
    let mut held = (Vec::new(), Vec::new());
    for i in 0..set.len() {
        let bucket = if held_mask[i] { &mut held } else { &mut train };
        bucket.0.push(set.inputs[i].clone());
        bucket.1.push(set.labels[i]);
    }
    Ok((
        LabeledSet { inputs: train.0, labels: train.1, class_count: set.class_count },
        LabeledSet { inputs: held.0, labels: held.1, class_count: set.class_count },
    ))
}
