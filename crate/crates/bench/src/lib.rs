//! Shared inputs for the criterion benches.

use amsp_core::nms::synth::dense_corpus;
use amsp_core::{init, DetBox, Tensor};

/// Box counts the suppression benches sweep over.
pub const CORPUS_SIZES: [usize; 3] = [500, 1000, 2000];

pub fn corpus(n: usize) -> Vec<DetBox> {
    dense_corpus(n, 0).expect("non-empty corpus")
}

/// Seeded standard-normal activations.
pub fn activations(shape: [usize; 4]) -> Tensor {
    Tensor::normal(shape, 1.0, &mut init::rng(7))
}
