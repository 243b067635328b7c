//! Shared fixtures for the criterion benches.

use tsadv_core::data::synthetic::{generate, SyntheticSpec};
use tsadv_core::LabeledDataset;

/// Seeded sinusoid dataset; `samples` series of `channels × length`.
pub fn fixture(channels: usize, length: usize, samples: usize) -> LabeledDataset {
    generate(&SyntheticSpec::new(channels, length, 2, samples, 7)).expect("valid synthetic spec")
}

/// Single-channel values of the first sample.
pub fn univariate(length: usize, seed_shift: usize) -> Vec<f64> {
    let ds = fixture(1, length, seed_shift + 1);
    ds.samples()[seed_shift].valid(0).to_vec()
}
