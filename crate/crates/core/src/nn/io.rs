//! Canonical model serialization and digest.
//!
//! A model file is a human-readable header followed by the parameter
//! payload as little-endian 32-bit reals in declaration order (row-major;
//! weights before bias within each layer):
//!
//! ```text
//! SSMODEL 1
//! input_shape 1 8 8
//! num_classes 5
//! layers 4
//! conv2d 4 1 3 3 relu
//! flatten
//! dense 16 144 relu
//! dense 5 16 identity
//! payload 2785
//! <2785 x f32, little endian>
//! ```
//!
//! The digest is FNV-1a-64 over the header bytes followed by the payload
//! bytes, so byte-identical canonical serializations hash equally and any
//! parameter flip changes the digest with overwhelming probability.

use std::fmt;
use std::path::Path;

use super::{Activation, Layer, LayerKind, Model};
use crate::error::{Error, Result};

const MAGIC: &str = "SSMODEL";
const VERSION: u32 = 1;

const FNV_OFFSET: u64 = 14695981039346656037;
const FNV_PRIME: u64 = 1099511628211;

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// 64-bit identity of a model's canonical serialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelDigest(pub u64);

impl fmt::Display for ModelDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl std::str::FromStr for ModelDigest {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        u64::from_str_radix(s, 16)
            .map(ModelDigest)
            .map_err(|_| Error::invalid_input(format!("bad digest `{s}`")))
    }
}

impl Model {
    pub fn digest(&self) -> ModelDigest {
        ModelDigest(fnv1a64(&to_bytes(self)))
    }
}

fn header_string(model: &Model) -> String {
    let mut s = String::new();
    s.push_str(&format!("{MAGIC} {VERSION}\n"));
    s.push_str("input_shape");
    for d in model.input_shape() {
        s.push_str(&format!(" {d}"));
    }
    s.push('\n');
    s.push_str(&format!("num_classes {}\n", model.num_classes()));
    s.push_str(&format!("layers {}\n", model.layers().len()));
    for layer in model.layers() {
        match &layer.kind {
            LayerKind::Dense { out, inp, .. } => {
                s.push_str(&format!("dense {out} {inp} {}\n", layer.activation.name()));
            }
            LayerKind::Conv2d { out_c, in_c, kh, kw, .. } => {
                s.push_str(&format!(
                    "conv2d {out_c} {in_c} {kh} {kw} {}\n",
                    layer.activation.name()
                ));
            }
            LayerKind::Flatten => s.push_str("flatten\n"),
        }
    }
    s.push_str(&format!("payload {}\n", model.param_count()));
    s
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut bytes = header_string(model).into_bytes();
    model.visit_params(|_, _, data| {
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    });
    bytes
}

/// Line-oriented header reader that tracks byte offsets for errors.
struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        let start = self.pos;
        let rest = &self.bytes[start..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(start, "unexpected end of header"))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::parse(start, "header is not valid utf-8"))?;
        self.pos = start + end + 1;
        Ok((start, line))
    }
}

fn parse_usize(tok: &str, offset: usize, what: &str) -> Result<usize> {
    tok.parse()
        .map_err(|_| Error::parse(offset, format!("bad {what} `{tok}`")))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut rd = HeaderReader { bytes, pos: 0 };

    let (off, line) = rd.next_line()?;
    let mut it = line.split(' ');
    let magic = it.next().unwrap_or("");
    let version = it.next().unwrap_or("");
    if magic != MAGIC {
        return Err(Error::parse(off, format!("expected `{MAGIC}`, found `{magic}`")));
    }
    if version != VERSION.to_string() {
        return Err(Error::parse(
            off,
            format!("unsupported version `{version}` (this build reads version {VERSION})"),
        ));
    }

    let (off, line) = rd.next_line()?;
    let mut toks = line.split(' ');
    if toks.next() != Some("input_shape") {
        return Err(Error::parse(off, "expected input_shape"));
    }
    let input_shape: Vec<usize> = toks
        .map(|t| parse_usize(t, off, "dimension"))
        .collect::<Result<_>>()?;

    let (off, line) = rd.next_line()?;
    let num_classes = match line.strip_prefix("num_classes ") {
        Some(v) => parse_usize(v, off, "num_classes")?,
        None => return Err(Error::parse(off, "expected num_classes")),
    };

    let (off, line) = rd.next_line()?;
    let layer_count = match line.strip_prefix("layers ") {
        Some(v) => parse_usize(v, off, "layer count")?,
        None => return Err(Error::parse(off, "expected layers")),
    };

    struct PendingLayer {
        kind_line: String,
        offset: usize,
    }
    let mut pending = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let (off, line) = rd.next_line()?;
        pending.push(PendingLayer { kind_line: line.to_string(), offset: off });
    }

    let (off, line) = rd.next_line()?;
    let payload_count = match line.strip_prefix("payload ") {
        Some(v) => parse_usize(v, off, "payload count")?,
        None => return Err(Error::parse(off, "expected payload")),
    };

    let payload_start = rd.pos;
    let expected_bytes = payload_count
        .checked_mul(4)
        .ok_or_else(|| Error::parse(off, "payload count overflow"))?;
    let avail = bytes.len() - payload_start;
    if avail != expected_bytes {
        return Err(Error::parse(
            payload_start,
            format!("payload declares {payload_count} values ({expected_bytes} bytes), file has {avail}"),
        ));
    }
    let mut values = Vec::with_capacity(payload_count);
    for i in 0..payload_count {
        let at = payload_start + i * 4;
        let v = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::parse(at, format!("non-finite parameter {v}")));
        }
        values.push(v);
    }

    let mut cursor = 0usize;
    let mut take = |n: usize, off: usize| -> Result<Vec<f32>> {
        if cursor + n > values.len() {
            return Err(Error::parse(off, "payload shorter than layer shapes require"));
        }
        let out = values[cursor..cursor + n].to_vec();
        cursor += n;
        Ok(out)
    };

    let mut layers = Vec::with_capacity(layer_count);
    for p in &pending {
        let toks: Vec<&str> = p.kind_line.split(' ').collect();
        let layer = match toks[0] {
            "dense" => {
                if toks.len() != 4 {
                    return Err(Error::parse(p.offset, "dense expects `dense OUT IN ACT`"));
                }
                let out = parse_usize(toks[1], p.offset, "out")?;
                let inp = parse_usize(toks[2], p.offset, "in")?;
                let activation = Activation::parse(toks[3])
                    .map_err(|e| Error::parse(p.offset, e.to_string()))?;
                let weights = take(out * inp, p.offset)?;
                let bias = take(out, p.offset)?;
                Layer { kind: LayerKind::Dense { out, inp, weights, bias }, activation }
            }
            "conv2d" => {
                if toks.len() != 6 {
                    return Err(Error::parse(
                        p.offset,
                        "conv2d expects `conv2d OUT_C IN_C KH KW ACT`",
                    ));
                }
                let out_c = parse_usize(toks[1], p.offset, "out_c")?;
                let in_c = parse_usize(toks[2], p.offset, "in_c")?;
                let kh = parse_usize(toks[3], p.offset, "kh")?;
                let kw = parse_usize(toks[4], p.offset, "kw")?;
                let activation = Activation::parse(toks[5])
                    .map_err(|e| Error::parse(p.offset, e.to_string()))?;
                let kernels = take(out_c * in_c * kh * kw, p.offset)?;
                let bias = take(out_c, p.offset)?;
                Layer {
                    kind: LayerKind::Conv2d { out_c, in_c, kh, kw, kernels, bias },
                    activation,
                }
            }
            "flatten" => Layer { kind: LayerKind::Flatten, activation: Activation::Identity },
            other => {
                return Err(Error::parse(p.offset, format!("unknown layer kind `{other}`")))
            }
        };
        layers.push(layer);
    }
    if cursor != values.len() {
        return Err(Error::parse(
            payload_start,
            format!("payload has {} values beyond the declared layers", values.len() - cursor),
        ));
    }

    Model::new(input_shape, layers, num_classes)
        .map_err(|e| Error::parse(0, format!("invalid model: {e}")))
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}
