//! Maximum Active-Neuron Cover sample selection.
//!
//! A neuron that stays inactive on a sample contributes nothing to that
//! sample's sensitivity for the weights feeding it, so a fingerprint wants
//! samples that collectively activate as many last-hidden-layer neurons as
//! possible. [`manc_select`] runs the classic greedy maximum-coverage
//! heuristic over per-sample activation patterns: each step takes the
//! sample adding the most uncovered neurons, ties broken by the lowest
//! sample index so runs are reproducible.

use crate::error::{Error, Result};
use crate::nn::{Activation, Model};
use crate::tensor::Tensor;

/// Default activity threshold for ReLU hidden layers.
pub const RELU_TAU: f32 = 1e-6;
/// Default activity threshold for sigmoid hidden layers, whose output is
/// only ever "very close to 0" rather than exactly 0.
pub const SIGMOID_TAU: f32 = 0.05;

pub fn default_tau(activation: Activation) -> f32 {
    match activation {
        Activation::Sigmoid => SIGMOID_TAU,
        _ => RELU_TAU,
    }
}

/// A fixed-width bit set over the neurons of interest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeuronSet {
    words: Vec<u64>,
    len: usize,
}

impl NeuronSet {
    pub fn new(len: usize) -> Self {
        NeuronSet { words: vec![0; len.div_ceil(64)], len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn insert(&mut self, i: usize) {
        assert!(i < self.len);
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn contains(&self, i: usize) -> bool {
        i < self.len && self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn union_with(&mut self, other: &NeuronSet) {
        assert_eq!(self.len, other.len);
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
    }

    /// Number of bits set in `other` but not in `self`.
    pub fn count_added(&self, other: &NeuronSet) -> usize {
        assert_eq!(self.len, other.len);
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (b & !a).count_ones() as usize)
            .sum()
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(|&i| self.contains(i))
    }
}

/// Which neurons of the last hidden layer a sample drives above the
/// activity threshold.
#[derive(Debug, Clone)]
pub struct ActivationPattern {
    pub sample_index: usize,
    pub active: NeuronSet,
}

/// Pattern of the last hidden activation: bit `i` set iff activation `i`
/// exceeds `tau`.
pub fn activation_pattern(model: &Model, x: &Tensor, tau: f32) -> Result<ActivationPattern> {
    if tau < 0.0 {
        return Err(Error::invalid_input("tau must be non-negative"));
    }
    let (_, hidden) = model.forward(x)?;
    let mut active = NeuronSet::new(hidden.len());
    for (i, &a) in hidden.data().iter().enumerate() {
        if a > tau {
            active.insert(i);
        }
    }
    Ok(ActivationPattern { sample_index: 0, active })
}

/// Patterns for a slice of samples, indexed by position.
pub fn patterns_for_samples(model: &Model, samples: &[Tensor], tau: f32) -> Result<Vec<ActivationPattern>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let mut p = activation_pattern(model, x, tau)?;
            p.sample_index = i;
            Ok(p)
        })
        .collect()
}

/// Result of a greedy cover run.
#[derive(Debug, Clone)]
pub struct CoverResult {
    /// Sample indices in selection order, length exactly `k`.
    pub selected: Vec<usize>,
    /// Union of the selected activation sets.
    pub anc: NeuronSet,
    /// `|anc|` over the number of neurons of interest.
    pub coverage_fraction: f64,
    /// Newly covered neurons contributed by each selection step.
    pub gains: Vec<usize>,
}

/// Greedy maximum coverage over activation patterns.
pub fn manc_select(patterns: &[ActivationPattern], k: usize) -> Result<CoverResult> {
    if patterns.is_empty() || k == 0 || k > patterns.len() {
        return Err(Error::invalid_input(format!(
            "k must be in 1..={}, got {k}",
            patterns.len()
        )));
    }
    let width = patterns[0].active.len();
    if patterns.iter().any(|p| p.active.len() != width) {
        return Err(Error::invalid_input("patterns cover different neuron counts"));
    }

    let mut covered = NeuronSet::new(width);
    let mut taken = vec![false; patterns.len()];
    let mut selected = Vec::with_capacity(k);
    let mut gains = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<(usize, usize, usize)> = None; // (gain, sample_index, position)
        for (pos, pattern) in patterns.iter().enumerate() {
            if taken[pos] {
                continue;
            }
            let gain = covered.count_added(&pattern.active);
            let candidate = (gain, pattern.sample_index, pos);
            best = match best {
                None => Some(candidate),
                Some(cur) => {
                    // Highest gain wins; ties go to the lowest sample index.
                    if gain > cur.0 || (gain == cur.0 && pattern.sample_index < cur.1) {
                        Some(candidate)
                    } else {
                        Some(cur)
                    }
                }
            };
        }
        let (gain, sample_index, pos) = best.expect("k <= patterns.len() leaves a candidate");
        taken[pos] = true;
        covered.union_with(&patterns[pos].active);
        selected.push(sample_index);
        gains.push(gain);
    }
    let coverage_fraction = covered.count() as f64 / width as f64;
    Ok(CoverResult { selected, anc: covered, coverage_fraction, gains })
}

/// Covered fraction against an explicit neuron total.
pub fn coverage_report(result: &CoverResult, total_neurons: usize) -> f64 {
    assert!(total_neurons > 0, "total_neurons must be positive");
    result.anc.count() as f64 / total_neurons as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Layer, LayerKind, LayerSpec, Model};
    use crate::rng::Rng;

    fn pattern(index: usize, width: usize, bits: &[usize]) -> ActivationPattern {
        let mut active = NeuronSet::new(width);
        for &b in bits {
            active.insert(b);
        }
        ActivationPattern { sample_index: index, active }
    }

    #[test]
    fn hand_case_prefers_big_then_lowest_index() {
        // P1 = {1,2,3}, P2 = {3,4}, P3 = {5}; k = 2. P1 first, then the
        // 1-gain tie between P2 and P3 goes to the lower index. Brute force
        // over all 2-subsets confirms coverage 4 is optimal.
        let patterns = vec![
            pattern(0, 6, &[1, 2, 3]),
            pattern(1, 6, &[3, 4]),
            pattern(2, 6, &[5]),
        ];
        let result = manc_select(&patterns, 2).unwrap();
        assert_eq!(result.selected, vec![0, 1]);
        assert_eq!(result.anc.iter_ones().collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert_eq!(result.gains, vec![3, 1]);
        assert_eq!(brute_force_best(&patterns, 2), 4);
    }

    #[test]
    fn selecting_all_covers_union() {
        let patterns = vec![
            pattern(0, 8, &[0, 1]),
            pattern(1, 8, &[2]),
            pattern(2, 8, &[1, 7]),
        ];
        let result = manc_select(&patterns, 3).unwrap();
        let mut sorted = result.selected.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2]);
        assert_eq!(result.anc.iter_ones().collect::<Vec<_>>(), vec![0, 1, 2, 7]);
    }

    #[test]
    fn identical_patterns_select_lowest_indices() {
        let patterns = vec![
            pattern(0, 4, &[1, 2]),
            pattern(1, 4, &[1, 2]),
            pattern(2, 4, &[1, 2]),
        ];
        let result = manc_select(&patterns, 2).unwrap();
        assert_eq!(result.selected, vec![0, 1]);
        assert_eq!(result.anc.count(), 2);
        assert_eq!(result.coverage_fraction, 0.5);
    }

    #[test]
    fn k_out_of_range_rejected() {
        let patterns = vec![pattern(0, 4, &[0])];
        assert!(manc_select(&patterns, 0).is_err());
        assert!(manc_select(&patterns, 2).is_err());
        assert!(manc_select(&[], 1).is_err());
    }

    #[test]
    fn greedy_gains_are_monotone_reported() {
        let mut rng = Rng::new(9);
        for _ in 0..50 {
            let patterns: Vec<ActivationPattern> = (0..8)
                .map(|i| {
                    let bits: Vec<usize> = (0..12).filter(|_| rng.next_f64() < 0.3).collect();
                    pattern(i, 12, &bits)
                })
                .collect();
            let k = 1 + rng.below(patterns.len());
            let result = manc_select(&patterns, k).unwrap();
            // Gains are non-increasing and sum to the final coverage.
            for pair in result.gains.windows(2) {
                assert!(pair[0] >= pair[1], "gains not monotone: {:?}", result.gains);
            }
            assert_eq!(result.gains.iter().sum::<usize>(), result.anc.count());
            assert_eq!(result.selected.len(), k);
            let mut dedup = result.selected.clone();
            dedup.sort_unstable();
            dedup.dedup();
            assert_eq!(dedup.len(), k, "duplicate selections");
        }
    }

    fn brute_force_best(patterns: &[ActivationPattern], k: usize) -> usize {
        let n = patterns.len();
        let mut best = 0;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let mut union = NeuronSet::new(patterns[0].active.len());
            for (i, p) in patterns.iter().enumerate() {
                if mask >> i & 1 == 1 {
                    union.union_with(&p.active);
                }
            }
            best = best.max(union.count());
        }
        best
    }

    #[test]
    fn greedy_achieves_max_coverage_bound() {
        // (1 - 1/e) approximation bound, checked exhaustively on random
        // small instances.
        let bound = 1.0 - (-1.0f64).exp();
        let mut rng = Rng::new(123);
        for round in 0..200 {
            let n = 2 + rng.below(9); // up to 10 patterns
            let width = 3 + rng.below(10); // up to 12 neurons
            let patterns: Vec<ActivationPattern> = (0..n)
                .map(|i| {
                    let bits: Vec<usize> = (0..width).filter(|_| rng.next_f64() < 0.35).collect();
                    pattern(i, width, &bits)
                })
                .collect();
            let k = 1 + rng.below(n);
            let greedy = manc_select(&patterns, k).unwrap().anc.count() as f64;
            let optimal = brute_force_best(&patterns, k) as f64;
            assert!(
                greedy >= bound * optimal - 1e-9,
                "round {round}: greedy {greedy} vs optimal {optimal}"
            );
        }
    }

    #[test]
    fn deterministic_selection() {
        let patterns = vec![
            pattern(0, 10, &[0, 3, 5]),
            pattern(1, 10, &[1, 3]),
            pattern(2, 10, &[2, 4, 6, 8]),
            pattern(3, 10, &[9]),
        ];
        let a = manc_select(&patterns, 3).unwrap();
        let b = manc_select(&patterns, 3).unwrap();
        assert_eq!(a.selected, b.selected);
    }

    #[test]
    fn pattern_thresholding() {
        // Dense forcing hidden = [0.0, 0.3, relu(-0.2) = 0, 1.1].
        let model = Model::new(
            vec![4],
            vec![
                Layer {
                    kind: LayerKind::Dense {
                        out: 4,
                        inp: 4,
                        weights: {
                            let mut w = vec![0.0f32; 16];
                            w[1 * 4 + 1] = 0.3;
                            w[2 * 4 + 2] = -0.2;
                            w[3 * 4 + 3] = 1.1;
                            w
                        },
                        bias: vec![0.0; 4],
                    },
                    activation: Activation::Relu,
                },
                Layer {
                    kind: LayerKind::Dense { out: 2, inp: 4, weights: vec![0.1; 8], bias: vec![0.0; 2] },
                    activation: Activation::Identity,
                },
            ],
            2,
        )
        .unwrap();
        let x = Tensor::from_vec(vec![1.0; 4]).unwrap();
        let (_, hidden) = model.forward(&x).unwrap();
        assert_eq!(hidden.data(), &[0.0, 0.3, 0.0, 1.1]);
        let p = activation_pattern(&model, &x, 1e-6).unwrap();
        assert_eq!(p.active.iter_ones().collect::<Vec<_>>(), vec![1, 3]);
        // tau above every activation leaves the pattern empty.
        let p = activation_pattern(&model, &x, 10.0).unwrap();
        assert!(p.active.is_empty());
    }

    #[test]
    fn zero_hidden_output_gives_empty_pattern() {
        let model = Model::seeded(
            vec![3],
            &[
                LayerSpec::Dense { out: 4, activation: Activation::Relu },
                LayerSpec::Dense { out: 2, activation: Activation::Identity },
            ],
            2,
            3,
        )
        .unwrap();
        // Bias-free Xavier net on a zero input has zero pre-activations.
        let x = Tensor::from_vec(vec![0.0; 3]).unwrap();
        let p = activation_pattern(&model, &x, RELU_TAU).unwrap();
        assert!(p.active.is_empty());
    }

    #[test]
    fn coverage_report_hand_values() {
        let mut anc = NeuronSet::new(4096);
        for i in 0..3296 {
            anc.insert(i);
        }
        let result = CoverResult {
            selected: vec![0],
            coverage_fraction: 0.0,
            gains: vec![3296],
            anc,
        };
        assert_eq!(coverage_report(&result, 4096), 0.8046875);
        let empty = CoverResult {
            selected: vec![],
            anc: NeuronSet::new(8),
            coverage_fraction: 0.0,
            gains: vec![],
        };
        assert_eq!(coverage_report(&empty, 8), 0.0);
        let mut full = NeuronSet::new(8);
        for i in 0..8 {
            full.insert(i);
        }
        let all = CoverResult { selected: vec![0], anc: full, coverage_fraction: 1.0, gains: vec![8] };
        assert_eq!(coverage_report(&all, 8), 1.0);
    }
}
