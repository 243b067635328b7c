use serde::{Deserialize, Serialize};

use super::series::LabeledDataset;
use crate::error::{Error, Result};

/// Per-channel z-normalization statistics over valid (unpadded) positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Population standard deviation; 1 for flagged channels.
    pub std: Vec<f64>,
    pub zero_variance: Vec<bool>,
}

impl NormStats {
    pub fn fit(reference: &LabeledDataset) -> Result<Self> {
        if reference.is_empty() {
            return Err(Error::invalid(
                "cannot fit normalization on an empty dataset",
            ));
        }
        let channels = reference.channels();
        let mut mean = vec![0.0; channels];
        let mut count = 0usize;
        for s in reference.samples() {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += s.valid(c).iter().sum::<f64>();
            }
            count += s.len();
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; channels];
        for s in reference.samples() {
            for (c, v) in var.iter_mut().enumerate() {
                *v += s
                    .valid(c)
                    .iter()
                    .map(|x| (x - mean[c]).powi(2))
                    .sum::<f64>();
            }
        }
        let mut std = Vec::with_capacity(channels);
        let mut zero_variance = Vec::with_capacity(channels);
        for v in var {
            let sd = (v / count as f64).sqrt();
            let flat = sd <= f64::EPSILON * 16.0;
            zero_variance.push(flat);
            std.push(if flat { 1.0 } else { sd });
        }
        Ok(NormStats {
            mean,
            std,
            zero_variance,
        })
    }

    /// `(x - mean) / std` at valid positions; padding stays zero. Applying
    /// twice is not the same as applying once.
    pub fn apply(&self, dataset: &LabeledDataset) -> Result<LabeledDataset> {
        if dataset.channels() != self.mean.len() && !dataset.is_empty() {
            return Err(Error::shape(
                "normalize",
                &[self.mean.len()],
                &[dataset.channels()],
            ));
        }
        let samples = dataset
            .samples()
            .iter()
            .map(|s| {
                let mut s = s.clone();
                for c in 0..s.channels() {
                    let (m, sd) = (self.mean[c], self.std[c]);
                    s.valid_mut(c).iter_mut().for_each(|v| *v = (*v - m) / sd);
                }
                s
            })
            .collect();
        Ok(dataset.with_samples(samples))
    }
}

/// Fits statistics on `dataset` and applies them to it.
pub fn znormalize(dataset: &LabeledDataset) -> Result<(LabeledDataset, NormStats)> {
    let stats = NormStats::fit(dataset)?;
    Ok((stats.apply(dataset)?, stats))
}
