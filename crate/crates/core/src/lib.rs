//! Sensitive-sample fingerprinting for small feed-forward networks.
//!
//! The toolkit fingerprints a reference model with inputs optimized so the
//! model's outputs are maximally sensitive to weight changes, then verifies
//! a deployed copy through black-box prediction queries alone. It ships a
//! deterministic inference/training engine, the sensitivity objective and
//! its finite-difference oracles, constrained sample generation, greedy
//! active-neuron-cover selection, fingerprint building/verification,
//! desk-scale tampering simulators, a local serving endpoint with matching
//! client, and an experiment harness for detection-rate curves.

pub mod attacks;
pub mod bench;
pub mod data;
pub mod error;
pub mod fingerprint;
pub mod manc;
pub mod nn;
pub mod rng;
pub mod samplegen;
pub mod sensitivity;
pub mod serving;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
