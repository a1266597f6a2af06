//! Experiment harness: manifests, detection-rate curves and reports.
//!
//! A manifest fully determines an experiment; re-running one reproduces
//! every number bit-exactly. Per manifest the harness generates one bag of
//! sensitive samples (plus transform-baseline bags from the same origins),
//! then per trial derives a seed from the master seed, applies the attack
//! (stochastic attacks re-sample per trial, training-based ones are fit
//! once), re-selects a candidate pool and an ordered sample prefix per
//! selection method, and records which (spec, N_S) cells detected the
//! tampering. Selections are prefix-stable, so detection is monotone in
//! N_S within a trial by construction.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::{self, PoisonMode, TriggerSpec};
use crate::data::{self, LabeledSet};
use crate::error::{Error, Result};
use crate::fingerprint::{apply_output_spec, ObservedOutput, OutputSpec};
use crate::manc::{manc_select, patterns_for_samples, ActivationPattern, RELU_TAU};
use crate::nn::Model;
use crate::rng::{mix, Rng};
use crate::samplegen::{self, GenConfig};
use crate::sensitivity::ParamSelector;
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

// Seed streams hung off the master seed.
const STREAM_ORIGINS: u64 = 1;
const STREAM_GEN: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_ATTACK: u64 = 5;
const STREAM_TRIALS: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMethod {
    Manc,
    Random,
    Natural,
    Noise,
    Rotate,
    Distort,
}

impl SelectionMethod {
    pub fn name(self) -> &'static str {
        match self {
            SelectionMethod::Manc => "manc",
            SelectionMethod::Random => "random",
            SelectionMethod::Natural => "natural",
            SelectionMethod::Noise => "noise",
            SelectionMethod::Rotate => "rotate",
            SelectionMethod::Distort => "distort",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "manc" => SelectionMethod::Manc,
            "random" => SelectionMethod::Random,
            "natural" => SelectionMethod::Natural,
            "noise" => SelectionMethod::Noise,
            "rotate" => SelectionMethod::Rotate,
            "distort" => SelectionMethod::Distort,
            other => return Err(Error::invalid_input(format!("unknown selection method `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSection {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_itr_max")]
    pub itr_max: u32,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Size of the generated bag.
    #[serde(default = "default_bag")]
    pub bag: usize,
    /// Per-trial candidate pool drawn from the bag.
    #[serde(default = "default_pool")]
    pub pool: usize,
    /// Activity threshold for activation patterns.
    #[serde(default = "default_tau")]
    pub tau: f32,
    #[serde(default = "default_true")]
    pub include_bias: bool,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_itr_max() -> u32 {
    1000
}
fn default_epsilon() -> f64 {
    0.1
}
fn default_bag() -> usize {
    100
}
fn default_pool() -> usize {
    30
}
fn default_tau() -> f32 {
    RELU_TAU
}
fn default_true() -> bool {
    true
}

impl Default for GenSection {
    fn default() -> Self {
        GenSection {
            lr: default_lr(),
            itr_max: default_itr_max(),
            epsilon: default_epsilon(),
            bag: default_bag(),
            pool: default_pool(),
            tau: default_tau(),
            include_bias: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    #[serde(default = "default_degrees")]
    pub rotate_degrees: f64,
    #[serde(default = "default_amplitude")]
    pub distort_amplitude: f64,
    #[serde(default = "default_period")]
    pub distort_period: f64,
}

fn default_sigma() -> f64 {
    0.1
}
fn default_degrees() -> f64 {
    10.0
}
fn default_amplitude() -> f64 {
    2.0
}
fn default_period() -> f64 {
    8.0
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection {
            noise_sigma: default_sigma(),
            rotate_degrees: default_degrees(),
            distort_amplitude: default_amplitude(),
            distort_period: default_period(),
        }
    }
}

/// One attack row of the experiment. Training-based attacks (trojan,
/// poison) are fit once per manifest; `weight_noise` draws fresh noise per
/// trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackEntry {
    pub id: String,
    #[serde(flatten)]
    pub kind: AttackKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackKind {
    WeightNoise {
        r: f64,
        sigma: f64,
    },
    Quantize {
        bits: u32,
    },
    Trojan {
        row: usize,
        col: usize,
        size: usize,
        value: f32,
        target_class: usize,
        stamp_fraction: f64,
        epochs: u32,
        lr: f64,
    },
    Poison {
        source_class: usize,
        /// Present for error-specific poisoning, absent for error-generic.
        target_class: Option<usize>,
        poison_fraction: f64,
        epochs: u32,
        lr: f64,
    },
}

/// Where the CLI finds the reference model.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub path: String,
}

/// Dataset recipe, resolved by [`resolve_data`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSection {
    Synth {
        classes: usize,
        per_class: usize,
        dims: usize,
        spread: f64,
        seed: u64,
        held_out_fraction: f64,
        #[serde(default)]
        shape: Option<Vec<usize>>,
    },
    Idx {
        images: String,
        labels: String,
        seed: u64,
        held_out_fraction: f64,
        #[serde(default)]
        shape: Option<Vec<usize>>,
    },
}

/// Build the train/held-out pools a manifest describes.
pub fn resolve_data(section: &DataSection) -> Result<(LabeledSet, LabeledSet)> {
    let (set, seed, fraction, shape) = match section {
        DataSection::Synth { classes, per_class, dims, spread, seed, held_out_fraction, shape } => (
            data::synth_blobs(*classes, *per_class, *dims, *spread, *seed)?,
            *seed,
            *held_out_fraction,
            shape.clone(),
        ),
        DataSection::Idx { images, labels, seed, held_out_fraction, shape } => (
            data::load_idx(images, labels)?,
            *seed,
            *held_out_fraction,
            shape.clone(),
        ),
    };
    let set = match shape {
        Some(shape) => set.reshaped(&shape)?,
        None => set,
    };
    data::split(&set, fraction, mix(seed, 0x73706c)) // "spl"
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub version: u32,
    pub master_seed: u64,
    pub trials: u32,
    pub methods: Vec<String>,
    pub ns: Vec<usize>,
    pub specs: Vec<String>,
    #[serde(default)]
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub generation: GenSection,
    #[serde(default)]
    pub baselines: BaselineSection,
    pub attacks: Vec<AttackEntry>,
}

impl ExperimentManifest {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let manifest: ExperimentManifest =
            toml::from_str(s).map_err(|e| Error::invalid_input(format!("manifest: {e}")))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn parsed_methods(&self) -> Result<Vec<SelectionMethod>> {
        self.methods.iter().map(|m| SelectionMethod::parse(m)).collect()
    }

    pub fn parsed_specs(&self) -> Result<Vec<OutputSpec>> {
        self.specs.iter().map(|s| OutputSpec::parse_token(s)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::invalid_input(format!(
                "manifest version {} unsupported (this build runs version {MANIFEST_VERSION})",
                self.version
            )));
        }
        if self.trials == 0 {
            return Err(Error::invalid_input("trials must be at least 1"));
        }
        if self.attacks.is_empty() {
            return Err(Error::invalid_input("at least one attack row is required"));
        }
        let mut ids: Vec<&str> = self.attacks.iter().map(|a| a.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.attacks.len() {
            return Err(Error::invalid_input("attack ids must be unique"));
        }
        let methods = self.parsed_methods()?;
        if methods.is_empty() {
            return Err(Error::invalid_input("at least one selection method is required"));
        }
        self.parsed_specs()?;
        if self.ns.is_empty() || self.ns.iter().any(|&n| n == 0) {
            return Err(Error::invalid_input("ns must be non-empty positive sample counts"));
        }
        let max_ns = *self.ns.iter().max().unwrap();
        if self.generation.pool > self.generation.bag {
            return Err(Error::invalid_input("pool cannot exceed the bag size"));
        }
        if max_ns > self.generation.pool {
            return Err(Error::invalid_input(format!(
                "largest N_S {max_ns} exceeds the per-trial pool of {}",
                self.generation.pool
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub method: String,
    pub spec: String,
    pub ns: usize,
    pub attack: String,
    pub trials: u32,
    pub detections: u32,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct DetectionCurve {
    pub rows: Vec<CurveRow>,
}

impl DetectionCurve {
    pub fn rate(&self, method: &str, spec: &str, ns: usize, attack: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.spec == spec && r.ns == ns && r.attack == attack)
            .map(|r| r.rate)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("method,spec,ns,attack,trials,detections,rate\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.6}\n",
                r.method, r.spec, r.ns, r.attack, r.trials, r.detections, r.rate
            ));
        }
        out
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("curve serializes");
        s.push('\n');
        s
    }
}

/// Write a file atomically: to a sibling temp path, then rename over.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Per-trial detection outcomes, indexed
/// `[attack][method][spec][ns][trial]`, for the logical cross-checks the
/// aggregate curve cannot express.
#[derive(Debug, Clone)]
pub struct DetailedOutcomes {
    pub attacks: Vec<String>,
    pub methods: Vec<String>,
    pub specs: Vec<String>,
    pub ns: Vec<usize>,
    pub trials: u32,
    bits: Vec<bool>,
}

impl DetailedOutcomes {
    fn index(&self, a: usize, m: usize, s: usize, n: usize, t: usize) -> usize {
        (((a * self.methods.len() + m) * self.specs.len() + s) * self.ns.len() + n) * self.trials as usize
            + t
    }

    pub fn detected(&self, attack: usize, method: usize, spec: usize, ns_idx: usize, trial: usize) -> bool {
        self.bits[self.index(attack, method, spec, ns_idx, trial)]
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub curve: DetectionCurve,
    pub detailed: DetailedOutcomes,
}

struct MethodBag {
    method: SelectionMethod,
    /// Candidate inputs (the bag, or the held-out pool for `natural`).
    candidates: Vec<Tensor>,
    /// Activation patterns on the reference model, only for MANC.
    patterns: Option<Vec<ActivationPattern>>,
    /// Reference canonical outputs, `[spec][candidate]`.
    reference: Vec<Vec<ObservedOutput>>,
}

fn canonical_outputs(model: &Model, inputs: &[Tensor], specs: &[OutputSpec]) -> Result<Vec<Vec<ObservedOutput>>> {
    let mut per_spec = vec![Vec::with_capacity(inputs.len()); specs.len()];
    for input in inputs {
        let (probs, _) = model.forward(input)?;
        for (si, spec) in specs.iter().enumerate() {
            per_spec[si].push(apply_output_spec(&probs, spec)?);
        }
    }
    Ok(per_spec)
}

fn apply_attack(
    entry: &AttackEntry,
    model: &Model,
    train: &LabeledSet,
    seed: u64,
) -> Result<Model> {
    let tampered = match &entry.kind {
        AttackKind::WeightNoise { r, sigma } => attacks::weight_noise(model, *r, *sigma, seed)?,
        AttackKind::Quantize { bits } => attacks::quantize(model, *bits)?,
        AttackKind::Trojan { row, col, size, value, target_class, stamp_fraction, epochs, lr } => {
            attacks::trojan(
                model,
                train,
                &attacks::TrojanConfig {
                    trigger: TriggerSpec { row: *row, col: *col, size: *size, value: *value },
                    target_class: *target_class,
                    stamp_fraction: *stamp_fraction,
                    epochs: *epochs,
                    lr: *lr,
                    seed,
                },
            )?
        }
        AttackKind::Poison { source_class, target_class, poison_fraction, epochs, lr } => {
            attacks::poison(
                model,
                train,
                &attacks::PoisonConfig {
                    source_class: *source_class,
                    mode: match target_class {
                        Some(t) => PoisonMode::Specific { target_class: *t },
                        None => PoisonMode::Generic,
                    },
                    poison_fraction: *poison_fraction,
                    epochs: *epochs,
                    lr: *lr,
                    seed,
                },
            )?
        }
    };
    Ok(tampered.tampered)
}

/// Run a manifest against a resolved model and data pools.
pub fn run_experiment(
    manifest: &ExperimentManifest,
    model: &Model,
    train: &LabeledSet,
    held: &LabeledSet,
) -> Result<ExperimentResult> {
    manifest.validate()?;
    let methods = manifest.parsed_methods()?;
    let specs = manifest.parsed_specs()?;
    for spec in &specs {
        spec.validate(model.num_classes())?;
    }
    if held.is_empty() {
        return Err(Error::invalid_input("held-out pool is empty"));
    }
    let master = manifest.master_seed;
    let gen = &manifest.generation;
    let max_ns = *manifest.ns.iter().max().unwrap();
    let sel = ParamSelector {
        layer_index: model.last_layer_index(),
        include_bias: gen.include_bias,
    };

    // One bag of origins per manifest; every transform method reuses them.
    let mut origin_rng = Rng::new(mix(master, STREAM_ORIGINS));
    let mut origin_idx = Vec::with_capacity(gen.bag);
    while origin_idx.len() < gen.bag {
        let want = (gen.bag - origin_idx.len()).min(held.len());
        origin_idx.extend(origin_rng.sample_indices(held.len(), want));
    }
    let origins: Vec<Tensor> = origin_idx.iter().map(|&i| held.inputs[i].clone()).collect();

    let cfg = GenConfig {
        lr: gen.lr,
        itr_max: gen.itr_max,
        epsilon: gen.epsilon,
        seed: mix(master, STREAM_GEN),
        ..GenConfig::default()
    };
    let needs_sensitive = methods
        .iter()
        .any(|m| matches!(m, SelectionMethod::Manc | SelectionMethod::Random));
    let sensitive: Vec<Tensor> = if needs_sensitive {
        origins
            .iter()
            .map(|v0| samplegen::generate(model, sel, v0, &cfg).map(|s| s.v))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut bags = Vec::with_capacity(methods.len());
    for &method in &methods {
        let candidates: Vec<Tensor> = match method {
            SelectionMethod::Manc | SelectionMethod::Random => sensitive.clone(),
            SelectionMethod::Natural => held.inputs.clone(),
            SelectionMethod::Noise => origins
                .iter()
                .enumerate()
                .map(|(i, v0)| {
                    samplegen::baseline_noise(v0, manifest.baselines.noise_sigma, mix(master, STREAM_NOISE + i as u64))
                })
                .collect(),
            SelectionMethod::Rotate => origins
                .iter()
                .map(|v0| samplegen::baseline_rotate(v0, manifest.baselines.rotate_degrees))
                .collect::<Result<_>>()?,
            SelectionMethod::Distort => origins
                .iter()
                .map(|v0| {
                    samplegen::baseline_distort(
                        v0,
                        manifest.baselines.distort_amplitude,
                        manifest.baselines.distort_period,
                        0,
                    )
                })
                .collect::<Result<_>>()?,
        };
        if manifest.generation.pool > candidates.len() {
            return Err(Error::invalid_input(format!(
                "pool of {} exceeds the {} candidates available to `{}`",
                manifest.generation.pool,
                candidates.len(),
                method.name()
            )));
        }
        let patterns = match method {
            SelectionMethod::Manc => Some(patterns_for_samples(model, &candidates, gen.tau)?),
            _ => None,
        };
        let reference = canonical_outputs(model, &candidates, &specs)?;
        bags.push(MethodBag { method, candidates, patterns, reference });
    }

    let trials = manifest.trials as usize;
    let mut detailed = DetailedOutcomes {
        attacks: manifest.attacks.iter().map(|a| a.id.clone()).collect(),
        methods: manifest.methods.clone(),
        specs: manifest.specs.clone(),
        ns: manifest.ns.clone(),
        trials: manifest.trials,
        bits: vec![false; manifest.attacks.len() * methods.len() * specs.len() * manifest.ns.len() * trials],
    };

    for (ai, attack) in manifest.attacks.iter().enumerate() {
        let attack_stream = mix(master, STREAM_ATTACK + ai as u64);
        // Training-based and deterministic attacks are applied once; their
        // tampered outputs per candidate are reusable across trials.
        let fixed_tampered = match attack.kind {
            AttackKind::WeightNoise { .. } => None,
            _ => Some(apply_attack(attack, model, train, mix(attack_stream, 0))?),
        };
        let fixed_outputs: Option<Vec<Vec<Vec<ObservedOutput>>>> = match &fixed_tampered {
            Some(tampered) => Some(
                bags.iter()
                    .map(|bag| canonical_outputs(tampered, &bag.candidates, &specs))
                    .collect::<Result<_>>()?,
            ),
            None => None,
        };

        for t in 0..trials {
            let trial_seed = mix(mix(attack_stream, STREAM_TRIALS), t as u64);
            let trial_tampered = match attack.kind {
                AttackKind::WeightNoise { r, sigma } => {
                    Some(attacks::weight_noise(model, r, sigma, mix(trial_seed, 1))?.tampered)
                }
                _ => None,
            };

            for (mi, bag) in bags.iter().enumerate() {
                let mut pool_rng = Rng::new(mix(trial_seed, 100 + mi as u64));
                let pool = pool_rng.sample_indices(bag.candidates.len(), manifest.generation.pool);
                // Ordered selection, prefix-stable across N_S.
                let order: Vec<usize> = match (&bag.patterns, bag.method) {
                    (Some(patterns), SelectionMethod::Manc) => {
                        let pool_patterns: Vec<ActivationPattern> = pool
                            .iter()
                            .map(|&c| ActivationPattern {
                                sample_index: c,
                                active: patterns[c].active.clone(),
                            })
                            .collect();
                        let k = max_ns.min(pool_patterns.len());
                        manc_select(&pool_patterns, k)?.selected
                    }
                    _ => pool.iter().copied().take(max_ns).collect(),
                };

                // Mismatch flags per spec for each selected candidate.
                let mut mismatch: Vec<Vec<bool>> = vec![Vec::with_capacity(order.len()); specs.len()];
                for &c in &order {
                    match (&fixed_outputs, &trial_tampered) {
                        (Some(fixed), _) => {
                            for (si, spec_outputs) in fixed[mi].iter().enumerate() {
                                mismatch[si].push(spec_outputs[c] != bag.reference[si][c]);
                            }
                        }
                        (None, Some(tampered)) => {
                            let (probs, _) = tampered.forward(&bag.candidates[c])?;
                            for (si, spec) in specs.iter().enumerate() {
                                let observed = apply_output_spec(&probs, spec)?;
                                mismatch[si].push(observed != bag.reference[si][c]);
                            }
                        }
                        (None, None) => unreachable!("one source of tampered outputs exists"),
                    }
                }

                for (si, flags) in mismatch.iter().enumerate() {
                    let mut any = false;
                    let mut prefix = vec![false; flags.len() + 1];
                    for (i, &f) in flags.iter().enumerate() {
                        any |= f;
                        prefix[i + 1] = any;
                    }
                    for (ni, &ns) in manifest.ns.iter().enumerate() {
                        let hit = prefix[ns.min(flags.len())];
                        if hit {
                            let idx = detailed.index(ai, mi, si, ni, t);
                            detailed.bits[idx] = true;
                        }
                    }
                }
            }
        }
    }

    // Aggregate counts into curve rows, ordered attack > method > spec > ns.
    let mut rows = Vec::new();
    for (ai, attack) in manifest.attacks.iter().enumerate() {
        for (mi, method) in manifest.methods.iter().enumerate() {
            for (si, spec) in manifest.specs.iter().enumerate() {
                for (ni, &ns) in manifest.ns.iter().enumerate() {
                    let detections = (0..trials)
                        .filter(|&t| detailed.detected(ai, mi, si, ni, t))
                        .count() as u32;
                    rows.push(CurveRow {
                        method: method.clone(),
                        spec: spec.clone(),
                        ns,
                        attack: attack.id.clone(),
                        trials: manifest.trials,
                        detections,
                        rate: detections as f64 / manifest.trials as f64,
                    });
                }
            }
        }
    }

    Ok(ExperimentResult { curve: DetectionCurve { rows }, detailed })
}

/// Convenience: the manifest metadata recorded into fingerprints built by
/// the CLI.
pub fn manifest_metadata(manifest: &ExperimentManifest) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("master_seed".into(), manifest.master_seed.to_string());
    m.insert("trials".into(), manifest.trials.to_string());
    m.insert("gen.lr".into(), manifest.generation.lr.to_string());
    m.insert("gen.itr_max".into(), manifest.generation.itr_max.to_string());
    m.insert("gen.epsilon".into(), manifest.generation.epsilon.to_string());
    m.insert("gen.bag".into(), manifest.generation.bag.to_string());
    m.insert("gen.pool".into(), manifest.generation.pool.to_string());
    m
}
