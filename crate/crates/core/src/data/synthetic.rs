//! Seeded synthetic datasets with known class structure, used for desk-scale
//! experiments and tests.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::series::{LabeledDataset, MultivariateSeries};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub name: String,
    pub channels: usize,
    pub length: usize,
    pub classes: usize,
    pub samples: usize,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(channels: usize, length: usize, classes: usize, samples: usize, seed: u64) -> Self {
        SyntheticSpec {
            name: "Synthetic".into(),
            channels,
            length,
            classes,
            samples,
            noise: 0.3,
            seed,
        }
    }
}

/// Class `k` is a sinusoid with `k + 1` periods over the window; each
/// channel gets a fixed phase offset and every sample a random phase and
/// amplitude jitter. Labels cycle through the classes in order.
pub fn generate(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    if spec.channels == 0 || spec.length == 0 || spec.classes < 2 || spec.samples == 0 {
        return Err(Error::invalid(format!(
            "degenerate synthetic spec {spec:?}"
        )));
    }
    let mut rng = rng::seeded(spec.seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::invalid(e.to_string()))?;
    let mut samples = Vec::with_capacity(spec.samples);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let class = i % spec.classes;
        let periods = (class + 1) as f64;
        let phase: f64 = rng.random_range(-0.4..0.4);
        let amplitude: f64 = rng.random_range(0.8..1.2);
        let channels = (0..spec.channels)
            .map(|c| {
                let offset = c as f64 * PI / 3.0;
                (0..spec.length)
                    .map(|t| {
                        let u = t as f64 / spec.length as f64;
                        amplitude * (2.0 * PI * periods * u + offset + phase).sin()
                            + noise.sample(&mut rng)
                    })
                    .collect()
            })
            .collect();
        samples.push(MultivariateSeries::new(channels)?);
        labels.push(class);
    }
    let names = (0..spec.classes).map(|c| c.to_string()).collect();
    LabeledDataset::new(spec.name.clone(), names, samples, labels)
}
