use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One sample: `channels × max_len` values, zero beyond `len`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultivariateSeries {
    channels: usize,
    max_len: usize,
    len: usize,
    values: Vec<f64>,
}

impl MultivariateSeries {
    /// Builds a series from equal-length channels.
    pub fn new(channels: Vec<Vec<f64>>) -> Result<Self> {
        let count = channels.len();
        let len = channels.first().map_or(0, Vec::len);
        if count == 0 || len == 0 {
            return Err(Error::invalid(
                "series needs at least one channel and one step",
            ));
        }
        if let Some(bad) = channels.iter().position(|c| c.len() != len) {
            return Err(Error::invalid(format!(
                "channel {bad} has length {} but channel 0 has {len}",
                channels[bad].len()
            )));
        }
        Ok(MultivariateSeries {
            channels: count,
            max_len: len,
            len,
            values: channels.concat(),
        })
    }

    /// Zero-pads every channel to `max_len` steps.
    pub fn padded(&self, max_len: usize) -> Result<Self> {
        if max_len < self.len {
            return Err(Error::invalid(format!(
                "cannot pad series of length {} to {max_len}",
                self.len
            )));
        }
        let mut values = vec![0.0; self.channels * max_len];
        for c in 0..self.channels {
            values[c * max_len..c * max_len + self.len].copy_from_slice(self.valid(c));
        }
        Ok(MultivariateSeries {
            channels: self.channels,
            max_len,
            len: self.len,
            values,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Original (unpadded) length.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Full padded row of channel `c`.
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * self.max_len..(c + 1) * self.max_len]
    }

    /// Unpadded prefix of channel `c`.
    pub fn valid(&self, c: usize) -> &[f64] {
        &self.values[c * self.max_len..c * self.max_len + self.len]
    }

    /// Replaces the values, keeping shape and original length. Positions
    /// beyond the original length are forced back to zero.
    pub fn with_values(&self, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::shape(
                "with_values",
                &[self.channels, self.max_len],
                &[values.len()],
            ));
        }
        for c in 0..self.channels {
            values[c * self.max_len + self.len..(c + 1) * self.max_len].fill(0.0);
        }
        Ok(MultivariateSeries {
            values,
            ..self.clone()
        })
    }

    pub(crate) fn valid_mut(&mut self, c: usize) -> &mut [f64] {
        let start = c * self.max_len;
        &mut self.values[start..start + self.len]
    }
}

/// Stacks samples into a `[N, C, L]` batch.
pub fn batch_tensor(samples: &[MultivariateSeries]) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("cannot batch an empty sample list"))?;
    let (c, l) = (first.channels, first.max_len);
    let mut data = Vec::with_capacity(samples.len() * c * l);
    for s in samples {
        if s.channels != c || s.max_len != l {
            return Err(Error::shape("batch", &[c, l], &[s.channels, s.max_len]));
        }
        data.extend_from_slice(&s.values);
    }
    Tensor::new(vec![samples.len(), c, l], data)
}

/// `[N, C, L]` mask with ones at valid positions.
pub fn batch_mask(samples: &[MultivariateSeries]) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("cannot batch an empty sample list"))?;
    let (c, l) = (first.channels, first.max_len);
    let mut data = Vec::with_capacity(samples.len() * c * l);
    for s in samples {
        for _ in 0..c {
            data.extend((0..l).map(|t| if t < s.len { 1.0 } else { 0.0 }));
        }
    }
    Tensor::new(vec![samples.len(), c, l], data)
}

/// Samples with integer labels in `[0, C)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    name: String,
    class_names: Vec<String>,
    samples: Vec<MultivariateSeries>,
    labels: Vec<usize>,
    /// Labels the dataset was loaded with, kept when `labels` have been
    /// replaced by a model's predictions.
    ground_truth: Option<Vec<usize>>,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        class_names: Vec<String>,
        samples: Vec<MultivariateSeries>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} samples but {} labels",
                samples.len(),
                labels.len()
            )));
        }
        if class_names.len() < 2 {
            return Err(Error::invalid("a dataset needs at least two classes"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        if let Some(first) = samples.first() {
            let (c, l) = (first.channels, first.max_len);
            if let Some(s) = samples.iter().find(|s| s.channels != c || s.max_len != l) {
                return Err(Error::shape("dataset", &[c, l], &[s.channels, s.max_len]));
            }
        }
        Ok(LabeledDataset {
            name: name.into(),
            class_names,
            samples,
            labels,
            ground_truth: None,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn samples(&self) -> &[MultivariateSeries] {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Labels as loaded, even after [`crate::data::relabel_by_model`].
    pub fn ground_truth(&self) -> &[usize] {
        self.ground_truth.as_deref().unwrap_or(&self.labels)
    }

    pub fn is_relabeled(&self) -> bool {
        self.ground_truth.is_some()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.samples.first().map_or(0, |s| s.channels)
    }

    pub fn max_len(&self) -> usize {
        self.samples.first().map_or(0, |s| s.max_len)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count()];
        self.labels.iter().for_each(|&l| counts[l] += 1);
        counts
    }

    pub fn batch(&self) -> Result<Tensor> {
        batch_tensor(&self.samples)
    }

    pub(crate) fn with_predicted_labels(&self, predicted: Vec<usize>) -> Result<Self> {
        if predicted.len() != self.len() {
            return Err(Error::invalid(format!(
                "{} predictions for {} samples",
                predicted.len(),
                self.len()
            )));
        }
        if predicted.iter().any(|&p| p >= self.class_count()) {
            return Err(Error::invalid("prediction outside the class range"));
        }
        Ok(LabeledDataset {
            labels: predicted,
            ground_truth: Some(self.ground_truth().to_vec()),
            ..self.clone()
        })
    }

    pub(crate) fn with_samples(&self, samples: Vec<MultivariateSeries>) -> Self {
        LabeledDataset {
            samples,
            ..self.clone()
        }
    }

    /// Subset in the given index order.
    pub fn select(&self, indices: &[usize]) -> Self {
        LabeledDataset {
            name: self.name.clone(),
            class_names: self.class_names.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ground_truth: self
                .ground_truth
                .as_ref()
                .map(|g| indices.iter().map(|&i| g[i]).collect()),
        }
    }
}
