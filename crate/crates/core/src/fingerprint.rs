//! Fingerprints: samples paired with the reference model's canonical
//! outputs, plus black-box verification against a prediction oracle.
//!
//! Everything the served model reveals is governed by an [`OutputSpec`];
//! outputs are canonicalized (ordered labels, fixed-point probabilities)
//! before any comparison, so verification is exact equality and immune to
//! sub-rounding float jitter between in-process and served paths.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Model, ModelDigest};
use crate::samplegen::SensitiveSample;
use crate::tensor::Tensor;

/// What a served model reveals per query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputSpec {
    /// The `k` most probable class labels, most probable first.
    TopK { k: usize },
    /// Top-`k` labels plus their probabilities at `decimals` digits.
    TopKProb { k: usize, decimals: u8 },
    /// All class probabilities at `decimals` digits, in class order.
    AllProbs { decimals: u8 },
}

impl OutputSpec {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let k = match self {
            OutputSpec::TopK { k } | OutputSpec::TopKProb { k, .. } => *k,
            OutputSpec::AllProbs { .. } => return Ok(()),
        };
        if k == 0 || k > num_classes {
            return Err(Error::InvalidSpec(format!(
                "top-k of {k} against {num_classes} classes"
            )));
        }
        Ok(())
    }

    pub fn reveals_labels(&self) -> bool {
        !matches!(self, OutputSpec::AllProbs { .. })
    }

    pub fn reveals_probs(&self) -> bool {
        !matches!(self, OutputSpec::TopK { .. })
    }

    pub fn decimals(&self) -> Option<u8> {
        match self {
            OutputSpec::TopK { .. } => None,
            OutputSpec::TopKProb { decimals, .. } | OutputSpec::AllProbs { decimals } => {
                Some(*decimals)
            }
        }
    }

    /// Compact canonical token: `top3`, `top1p2`, `allp1`.
    pub fn token(&self) -> String {
        match self {
            OutputSpec::TopK { k } => format!("top{k}"),
            OutputSpec::TopKProb { k, decimals } => format!("top{k}p{decimals}"),
            OutputSpec::AllProbs { decimals } => format!("allp{decimals}"),
        }
    }

    pub fn parse_token(token: &str) -> Result<Self> {
        let bad = || Error::InvalidSpec(format!("unrecognized output spec `{token}`"));
        if let Some(rest) = token.strip_prefix("allp") {
            let decimals = rest.parse().map_err(|_| bad())?;
            return Ok(OutputSpec::AllProbs { decimals });
        }
        if let Some(rest) = token.strip_prefix("top") {
            return match rest.split_once('p') {
                Some((k, d)) => Ok(OutputSpec::TopKProb {
                    k: k.parse().map_err(|_| bad())?,
                    decimals: d.parse().map_err(|_| bad())?,
                }),
                None => Ok(OutputSpec::TopK { k: rest.parse().map_err(|_| bad())? }),
            };
        }
        Err(bad())
    }
}

/// A probability rounded half-away-from-zero to a fixed number of decimal
/// digits, stored exactly as scaled integer units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedProb {
    pub units: u64,
    pub decimals: u8,
}

impl FixedProb {
    pub fn round(p: f32, decimals: u8) -> Self {
        let scale = 10f64.powi(decimals as i32);
        // f64::round is round-half-away-from-zero.
        let units = (p as f64 * scale).round().max(0.0) as u64;
        FixedProb { units, decimals }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::invalid_input(format!("bad fixed-point probability `{s}`"));
        match s.split_once('.') {
            None => {
                let units = s.parse().map_err(|_| bad())?;
                Ok(FixedProb { units, decimals: 0 })
            }
            Some((int, frac)) => {
                if frac.is_empty() || frac.len() > 18 || !frac.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(bad());
                }
                let int: u64 = int.parse().map_err(|_| bad())?;
                let frac_units: u64 = frac.parse().map_err(|_| bad())?;
                let decimals = frac.len() as u8;
                let units = int
                    .checked_mul(10u64.pow(decimals as u32))
                    .and_then(|v| v.checked_add(frac_units))
                    .ok_or_else(bad)?;
                Ok(FixedProb { units, decimals })
            }
        }
    }
}

impl fmt::Display for FixedProb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.decimals == 0 {
            write!(f, "{}", self.units)
        } else {
            let scale = 10u64.pow(self.decimals as u32);
            write!(
                f,
                "{}.{:0width$}",
                self.units / scale,
                self.units % scale,
                width = self.decimals as usize
            )
        }
    }
}

/// A canonical observed output: labels sorted by descending probability
/// (ties to the lower class index) and/or fixed-point probabilities.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ObservedOutput {
    pub labels: Vec<usize>,
    pub probs: Vec<FixedProb>,
}

/// Class indices ranked by descending probability, ascending index on ties.
fn ranked_labels(probs: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx
}

/// Project a raw probability vector onto what the spec reveals.
pub fn apply_output_spec(probs: &[f32], spec: &OutputSpec) -> Result<ObservedOutput> {
    spec.validate(probs.len())?;
    Ok(match spec {
        OutputSpec::TopK { k } => ObservedOutput {
            labels: ranked_labels(probs)[..*k].to_vec(),
            probs: Vec::new(),
        },
        OutputSpec::TopKProb { k, decimals } => {
            let labels = ranked_labels(probs)[..*k].to_vec();
            let rounded = labels
                .iter()
                .map(|&l| FixedProb::round(probs[l], *decimals))
                .collect();
            ObservedOutput { labels, probs: rounded }
        }
        OutputSpec::AllProbs { decimals } => ObservedOutput {
            labels: Vec::new(),
            probs: probs.iter().map(|&p| FixedProb::round(p, *decimals)).collect(),
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintEntry {
    pub input: Tensor,
    pub expected: ObservedOutput,
}

/// An ordered set of (input, expected canonical output) pairs bound to a
/// reference model digest and an output specification.
#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    pub spec: OutputSpec,
    pub entries: Vec<FingerprintEntry>,
    pub reference_digest: ModelDigest,
    /// Generation metadata: seeds, configuration, selection method.
    pub manifest: BTreeMap<String, String>,
}

/// Build a fingerprint from generated samples. Expected outputs are the
/// reference model's canonical outputs on each sample.
pub fn build_fingerprint(
    model: &Model,
    samples: &[SensitiveSample],
    spec: OutputSpec,
) -> Result<Fingerprint> {
    let inputs: Vec<Tensor> = samples.iter().map(|s| s.v.clone()).collect();
    build_fingerprint_from_inputs(model, &inputs, spec)
}

/// Build a fingerprint from arbitrary inputs (natural samples, transform
/// baselines).
pub fn build_fingerprint_from_inputs(
    model: &Model,
    inputs: &[Tensor],
    spec: OutputSpec,
) -> Result<Fingerprint> {
    if inputs.is_empty() {
        return Err(Error::invalid_input("fingerprint needs at least one sample"));
    }
    spec.validate(model.num_classes())?;
    let mut entries = Vec::with_capacity(inputs.len());
    for input in inputs {
        let (probs, _) = model.forward(input)?;
        entries.push(FingerprintEntry {
            input: input.clone(),
            expected: apply_output_spec(&probs, &spec)?,
        });
    }
    Ok(Fingerprint {
        spec,
        entries,
        reference_digest: model.digest(),
        manifest: BTreeMap::new(),
    })
}

/// A black-box prediction oracle answering under a fixed output spec.
pub trait Oracle {
    fn query(&mut self, input: &Tensor) -> Result<ObservedOutput>;
}

impl<F> Oracle for F
where
    F: FnMut(&Tensor) -> Result<ObservedOutput>,
{
    fn query(&mut self, input: &Tensor) -> Result<ObservedOutput> {
        self(input)
    }
}

/// In-process oracle over a local model.
pub struct ModelOracle<'a> {
    pub model: &'a Model,
    pub spec: OutputSpec,
}

impl Oracle for ModelOracle<'_> {
    fn query(&mut self, input: &Tensor) -> Result<ObservedOutput> {
        let (probs, _) = self.model.forward(input)?;
        apply_output_spec(&probs, &self.spec)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleCheck {
    pub index: usize,
    pub matched: bool,
    /// The reply's structure (label count, probability count or precision)
    /// differed from the expected canonical form. Flagged distinctly but
    /// still a detection.
    pub shape_mismatch: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionReport {
    pub detected: bool,
    pub per_sample: Vec<SampleCheck>,
    pub queries_used: usize,
}

/// Verification stopped early on an oracle failure. Carries whatever was
/// checked before the failure; the `detected` flag of the partial report
/// must not be read as a verdict.
#[derive(Debug)]
pub struct VerificationAborted {
    pub partial: DetectionReport,
    pub source: Error,
}

impl fmt::Display for VerificationAborted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "verification aborted after {} queries: {}",
            self.partial.queries_used, self.source
        )
    }
}

impl std::error::Error for VerificationAborted {}

fn structural_mismatch(expected: &ObservedOutput, observed: &ObservedOutput) -> bool {
    expected.labels.len() != observed.labels.len()
        || expected.probs.len() != observed.probs.len()
        || expected
            .probs
            .iter()
            .zip(&observed.probs)
            .any(|(a, b)| a.decimals != b.decimals)
}

/// Query the oracle once per entry and compare canonical outputs exactly.
/// The full report is produced by default; see [`verify_with`] for the
/// early-exit variant.
pub fn verify(
    fp: &Fingerprint,
    oracle: &mut dyn Oracle,
) -> std::result::Result<DetectionReport, Box<VerificationAborted>> {
    verify_with(fp, oracle, false)
}

pub fn verify_with(
    fp: &Fingerprint,
    oracle: &mut dyn Oracle,
    early_exit: bool,
) -> std::result::Result<DetectionReport, Box<VerificationAborted>> {
    let mut per_sample = Vec::with_capacity(fp.entries.len());
    let mut queries_used = 0;
    let mut detected = false;
    for (index, entry) in fp.entries.iter().enumerate() {
        let observed = match oracle.query(&entry.input) {
            Ok(obs) => obs,
            Err(source) => {
                return Err(Box::new(VerificationAborted {
                    partial: DetectionReport { detected, per_sample, queries_used },
                    source,
                }))
            }
        };
        queries_used += 1;
        let matched = observed == entry.expected;
        let shape_mismatch = !matched && structural_mismatch(&entry.expected, &observed);
        detected |= !matched;
        per_sample.push(SampleCheck { index, matched, shape_mismatch });
        if early_exit && detected {
            break;
        }
    }
    Ok(DetectionReport { detected, per_sample, queries_used })
}

// ---------------------------------------------------------------------
// Fingerprint file format.
//
// Versioned text header followed by the entry tensors as little-endian
// 32-bit reals in entry order:
//
//   SSFP 1
//   spec top1
//   reference_digest 9c41...           (16 hex digits)
//   manifest <count>
//   <key> <value>                      (sorted by key)
//   entries <n>
//   entry <i> shape <d> <dims...> labels <n> <l...> probs <n> <p...>
//   payload <f32 count>
//   <payload bytes>
// ---------------------------------------------------------------------

const FP_MAGIC: &str = "SSFP";
const FP_VERSION: u32 = 1;

pub fn fingerprint_to_bytes(fp: &Fingerprint) -> Result<Vec<u8>> {
    let mut head = String::new();
    head.push_str(&format!("{FP_MAGIC} {FP_VERSION}\n"));
    head.push_str(&format!("spec {}\n", fp.spec.token()));
    head.push_str(&format!("reference_digest {}\n", fp.reference_digest));
    head.push_str(&format!("manifest {}\n", fp.manifest.len()));
    for (key, value) in &fp.manifest {
        if key.is_empty() || key.chars().any(|c| c.is_whitespace()) {
            return Err(Error::invalid_input(format!("manifest key `{key}` contains whitespace")));
        }
        if value.contains('\n') {
            return Err(Error::invalid_input(format!("manifest value for `{key}` contains a newline")));
        }
        head.push_str(&format!("{key} {value}\n"));
    }
    head.push_str(&format!("entries {}\n", fp.entries.len()));
    let mut payload_len = 0usize;
    for (i, entry) in fp.entries.iter().enumerate() {
        head.push_str(&format!("entry {i} shape {}", entry.input.shape().len()));
        for d in entry.input.shape() {
            head.push_str(&format!(" {d}"));
        }
        head.push_str(&format!(" labels {}", entry.expected.labels.len()));
        for l in &entry.expected.labels {
            head.push_str(&format!(" {l}"));
        }
        head.push_str(&format!(" probs {}", entry.expected.probs.len()));
        for p in &entry.expected.probs {
            head.push_str(&format!(" {p}"));
        }
        head.push('\n');
        payload_len += entry.input.len();
    }
    head.push_str(&format!("payload {payload_len}\n"));
    let mut bytes = head.into_bytes();
    for entry in &fp.entries {
        for v in entry.input.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(bytes)
}

struct Lines<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<(usize, &'a str)> {
        let start = self.pos;
        let rest = &self.bytes[start..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(start, "unexpected end of fingerprint header"))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::parse(start, "header is not valid utf-8"))?;
        self.pos = start + end + 1;
        Ok((start, line))
    }
}

fn expect_field<'a>(line: &'a str, key: &str, off: usize) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .ok_or_else(|| Error::parse(off, format!("expected `{key} ...`, found `{line}`")))
}

pub fn fingerprint_from_bytes(bytes: &[u8]) -> Result<Fingerprint> {
    let mut lines = Lines { bytes, pos: 0 };

    let (off, line) = lines.next()?;
    let (magic, version) = line.split_once(' ').unwrap_or((line, ""));
    if magic != FP_MAGIC {
        return Err(Error::parse(off, format!("expected `{FP_MAGIC}`, found `{magic}`")));
    }
    if version != FP_VERSION.to_string() {
        return Err(Error::parse(
            off,
            format!("unsupported fingerprint version `{version}` (this build reads version {FP_VERSION})"),
        ));
    }

    let (off, line) = lines.next()?;
    let spec = OutputSpec::parse_token(expect_field(line, "spec", off)?)
        .map_err(|e| Error::parse(off, e.to_string()))?;

    let (off, line) = lines.next()?;
    let reference_digest: ModelDigest = expect_field(line, "reference_digest", off)?
        .parse()
        .map_err(|_| Error::parse(off, "bad reference digest"))?;

    let (off, line) = lines.next()?;
    let manifest_len: usize = expect_field(line, "manifest", off)?
        .parse()
        .map_err(|_| Error::parse(off, "bad manifest count"))?;
    let mut manifest = BTreeMap::new();
    for _ in 0..manifest_len {
        let (off, line) = lines.next()?;
        let (key, value) = line
            .split_once(' ')
            .ok_or_else(|| Error::parse(off, "manifest line needs `key value`"))?;
        manifest.insert(key.to_string(), value.to_string());
    }

    let (off, line) = lines.next()?;
    let entry_count: usize = expect_field(line, "entries", off)?
        .parse()
        .map_err(|_| Error::parse(off, "bad entry count"))?;

    struct PendingEntry {
        shape: Vec<usize>,
        expected: ObservedOutput,
    }
    let mut pending = Vec::with_capacity(entry_count);
    for i in 0..entry_count {
        let (off, line) = lines.next()?;
        let mut toks = line.split(' ');
        let mut eat = |what: &str| {
            toks.next()
                .ok_or_else(|| Error::parse(off, format!("entry {i}: missing {what}")))
        };
        if eat("entry keyword")? != "entry" {
            return Err(Error::parse(off, "expected entry line"));
        }
        let idx: usize = eat("index")?
            .parse()
            .map_err(|_| Error::parse(off, "bad entry index"))?;
        if idx != i {
            return Err(Error::parse(off, format!("entry {idx} out of order (expected {i})")));
        }
        if eat("shape keyword")? != "shape" {
            return Err(Error::parse(off, "expected shape"));
        }
        let ndims: usize = eat("rank")?
            .parse()
            .map_err(|_| Error::parse(off, "bad shape rank"))?;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(
                eat("dimension")?
                    .parse()
                    .map_err(|_| Error::parse(off, "bad dimension"))?,
            );
        }
        if eat("labels keyword")? != "labels" {
            return Err(Error::parse(off, "expected labels"));
        }
        let nlabels: usize = eat("label count")?
            .parse()
            .map_err(|_| Error::parse(off, "bad label count"))?;
        let mut labels = Vec::with_capacity(nlabels);
        for _ in 0..nlabels {
            labels.push(
                eat("label")?
                    .parse()
                    .map_err(|_| Error::parse(off, "bad label"))?,
            );
        }
        if eat("probs keyword")? != "probs" {
            return Err(Error::parse(off, "expected probs"));
        }
        let nprobs: usize = eat("prob count")?
            .parse()
            .map_err(|_| Error::parse(off, "bad prob count"))?;
        let mut probs = Vec::with_capacity(nprobs);
        for _ in 0..nprobs {
            probs.push(
                FixedProb::parse(eat("prob")?).map_err(|e| Error::parse(off, e.to_string()))?,
            );
        }
        if toks.next().is_some() {
            return Err(Error::parse(off, "trailing tokens on entry line"));
        }
        pending.push(PendingEntry { shape, expected: ObservedOutput { labels, probs } });
    }

    let (off, line) = lines.next()?;
    let payload_count: usize = expect_field(line, "payload", off)?
        .parse()
        .map_err(|_| Error::parse(off, "bad payload count"))?;
    let payload_start = lines.pos;
    let expected_bytes = payload_count
        .checked_mul(4)
        .ok_or_else(|| Error::parse(off, "payload count overflow"))?;
    if bytes.len() - payload_start != expected_bytes {
        return Err(Error::parse(
            payload_start,
            format!(
                "payload declares {expected_bytes} bytes, file has {}",
                bytes.len() - payload_start
            ),
        ));
    }
    let declared: usize = pending.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if declared != payload_count {
        return Err(Error::parse(
            payload_start,
            format!("entry shapes need {declared} values, payload has {payload_count}"),
        ));
    }

    let mut cursor = payload_start;
    let mut entries = Vec::with_capacity(entry_count);
    for p in pending {
        let n: usize = p.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = f32::from_le_bytes(bytes[cursor..cursor + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::parse(cursor, format!("non-finite tensor element {v}")));
            }
            data.push(v);
            cursor += 4;
        }
        let input = Tensor::new(p.shape, data).map_err(|e| Error::parse(cursor, e.to_string()))?;
        entries.push(FingerprintEntry { input, expected: p.expected });
    }

    if entries.is_empty() {
        return Err(Error::parse(0, "fingerprint has no entries"));
    }
    Ok(Fingerprint { spec, entries, reference_digest, manifest })
}

pub fn save_fingerprint(fp: &Fingerprint, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, fingerprint_to_bytes(fp)?)?;
    Ok(())
}

pub fn load_fingerprint(path: impl AsRef<Path>) -> Result<Fingerprint> {
    let bytes = std::fs::read(path)?;
    fingerprint_from_bytes(&bytes)
}
