//! Dynamic time warping, 1-NN classification over distance tensors and the
//! softmax representation of a 1-NN decision.
//!
//! Pointwise cost is the squared difference and the distance is the square
//! root of the cumulative cost at the far corner. No warping window is
//! applied. Multivariate distance is the sum of per-channel distances.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::MultivariateSeries;
use crate::error::{Error, Result};
use crate::tensor::graph::softmax_row;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DtwOptions {
    /// Start the recurrence from `D(1,1) = 0` instead of `D(1,1) = d(1,1)`.
    /// This drops the first alignment cost, so two single-step series are
    /// always at distance zero. Off by default.
    pub literal_origin: bool,
}

/// Cumulative cost grid for one pair of sequences, row-major `n × m`.
#[derive(Clone, Debug, PartialEq)]
pub struct DtwMatrix {
    rows: usize,
    cols: usize,
    cells: Vec<f64>,
}

impl DtwMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.cells[i * self.cols + j]
    }

    /// Cumulative cost at the far corner.
    pub fn total(&self) -> f64 {
        self.get(self.rows - 1, self.cols - 1)
    }

    /// One optimal warping path, from `(0, 0)` to `(n-1, m-1)`. Ties
    /// prefer the diagonal, then the step in `a`.
    pub fn path(&self) -> Vec<(usize, usize)> {
        let (mut i, mut j) = (self.rows - 1, self.cols - 1);
        let mut path = vec![(i, j)];
        while i > 0 || j > 0 {
            (i, j) = if i == 0 {
                (0, j - 1)
            } else if j == 0 {
                (i - 1, 0)
            } else {
                let diag = self.get(i - 1, j - 1);
                let up = self.get(i - 1, j);
                let left = self.get(i, j - 1);
                if diag <= up && diag <= left {
                    (i - 1, j - 1)
                } else if up <= left {
                    (i - 1, j)
                } else {
                    (i, j - 1)
                }
            };
            path.push((i, j));
        }
        path.reverse();
        path
    }
}

fn check_nonempty(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("dtw requires non-empty sequences"));
    }
    Ok(())
}

pub fn cost_matrix(a: &[f64], b: &[f64], options: DtwOptions) -> Result<DtwMatrix> {
    check_nonempty(a, b)?;
    let (n, m) = (a.len(), b.len());
    let mut cells = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let d = (a[i] - b[j]).powi(2);
            let prev = match (i, j) {
                (0, 0) => {
                    cells[0] = if options.literal_origin { 0.0 } else { d };
                    continue;
                }
                (0, _) => cells[j - 1],
                (_, 0) => cells[(i - 1) * m],
                _ => cells[(i - 1) * m + j - 1]
                    .min(cells[(i - 1) * m + j])
                    .min(cells[i * m + j - 1]),
            };
            cells[i * m + j] = d + prev;
        }
    }
    Ok(DtwMatrix {
        rows: n,
        cols: m,
        cells,
    })
}

/// `sqrt(D(n, m))` using two rolling rows.
pub fn dtw_distance_with(a: &[f64], b: &[f64], options: DtwOptions) -> Result<f64> {
    check_nonempty(a, b)?;
    // Iterate over the longer sequence so the rows stay short.
    let (a, b) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m];
    let mut curr = vec![0.0; m];
    for (i, &x) in a.iter().enumerate() {
        for j in 0..m {
            let d = (x - b[j]).powi(2);
            let best = match (i, j) {
                (0, 0) => {
                    curr[0] = if options.literal_origin { 0.0 } else { d };
                    continue;
                }
                (0, _) => curr[j - 1],
                (_, 0) => prev[0],
                _ => prev[j - 1].min(prev[j]).min(curr[j - 1]),
            };
            curr[j] = d + best;
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    Ok(prev[m - 1].sqrt())
}

pub fn dtw_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    dtw_distance_with(a, b, DtwOptions::default())
}

/// Sum of per-channel distances over the unpadded prefixes.
pub fn multivariate_dtw(
    a: &MultivariateSeries,
    b: &MultivariateSeries,
    options: DtwOptions,
) -> Result<f64> {
    if a.channels() != b.channels() {
        return Err(Error::shape(
            "multivariate_dtw",
            &[a.channels()],
            &[b.channels()],
        ));
    }
    (0..a.channels())
        .map(|c| dtw_distance_with(a.valid(c), b.valid(c), options))
        .sum()
}

/// Per-channel distances, shape `[n_test, n_train, channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceTensor {
    n_test: usize,
    n_train: usize,
    channels: usize,
    data: Vec<f64>,
}

impl DistanceTensor {
    pub fn new(n_test: usize, n_train: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_test * n_train * channels {
            return Err(Error::shape(
                "distance_tensor",
                &[n_test, n_train, channels],
                &[data.len()],
            ));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!(
                "distance entries must be finite and nonnegative, found {bad}"
            )));
        }
        Ok(DistanceTensor {
            n_test,
            n_train,
            channels,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.n_test, self.n_train, self.channels]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, test: usize, train: usize, channel: usize) -> f64 {
        self.data[(test * self.n_train + train) * self.channels + channel]
    }

    /// Channel-summed distance between a test and a train sample.
    pub fn summed(&self, test: usize, train: usize) -> f64 {
        let start = (test * self.n_train + train) * self.channels;
        self.data[start..start + self.channels].iter().sum()
    }

    /// Header of three little-endian u64 dimensions, then row-major
    /// little-endian f64 values.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        for d in self.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 24 {
            return Err(Error::CorruptContainer(
                "distance tensor header truncated".into(),
            ));
        }
        let dim = |k: usize| {
            u64::from_le_bytes(bytes[8 * k..8 * k + 8].try_into().expect("8 bytes")) as usize
        };
        let (n_test, n_train, channels) = (dim(0), dim(1), dim(2));
        let count = n_test
            .checked_mul(n_train)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::CorruptContainer("distance tensor dimensions overflow".into()))?;
        if bytes.len() != 24 + 8 * count {
            return Err(Error::CorruptContainer(format!(
                "distance tensor expects {} payload bytes, found {}",
                8 * count,
                bytes.len() - 24
            )));
        }
        let data = bytes[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        DistanceTensor::new(n_test, n_train, channels, data)
            .map_err(|e| Error::CorruptContainer(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(24 + 8 * self.data.len());
        self.write_to(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

fn check_channels(test: &[MultivariateSeries], train: &[MultivariateSeries]) -> Result<usize> {
    let channels = train
        .first()
        .or(test.first())
        .map_or(0, MultivariateSeries::channels);
    if let Some(s) = test.iter().chain(train).find(|s| s.channels() != channels) {
        return Err(Error::shape(
            "distance_tensor",
            &[channels],
            &[s.channels()],
        ));
    }
    if test.is_empty() || train.is_empty() {
        return Err(Error::invalid(
            "distance tensor needs non-empty test and train sets",
        ));
    }
    Ok(channels)
}

fn pair_distances(a: &MultivariateSeries, b: &MultivariateSeries, options: DtwOptions) -> Vec<f64> {
    (0..a.channels())
        .map(|c| dtw_distance_with(a.valid(c), b.valid(c), options).expect("validated non-empty"))
        .collect()
}

/// All test × train × channel distances, computed in parallel over test
/// samples. Each entry is independent, so the result does not depend on
/// scheduling.
pub fn distance_tensor(
    test: &[MultivariateSeries],
    train: &[MultivariateSeries],
    options: DtwOptions,
) -> Result<DistanceTensor> {
    let channels = check_channels(test, train)?;
    let data: Vec<f64> = test
        .par_iter()
        .flat_map_iter(|a| {
            train
                .iter()
                .flat_map(move |b| pair_distances(a, b, options))
        })
        .collect();
    DistanceTensor::new(test.len(), train.len(), channels, data)
}

pub fn distance_tensor_sequential(
    test: &[MultivariateSeries],
    train: &[MultivariateSeries],
    options: DtwOptions,
) -> Result<DistanceTensor> {
    let channels = check_channels(test, train)?;
    let mut data = Vec::with_capacity(test.len() * train.len() * channels);
    for a in test {
        for b in train {
            data.extend(pair_distances(a, b, options));
        }
    }
    DistanceTensor::new(test.len(), train.len(), channels, data)
}

/// Probabilistic form of a 1-NN decision.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftNeighbors {
    /// Per-class maximum of the negated channel-summed distance, `[N_test][C]`.
    pub logits: Vec<Vec<f64>>,
    /// `softmax(logits)` row-wise.
    pub probabilities: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
}

fn validate_labels(v: &DistanceTensor, labels: &[usize], classes: usize) -> Result<()> {
    if labels.len() != v.n_train {
        return Err(Error::invalid(format!(
            "{} train labels for a distance tensor with {} train samples",
            labels.len(),
            v.n_train
        )));
    }
    let mut seen = vec![false; classes];
    for &l in labels {
        if l >= classes {
            return Err(Error::invalid(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        seen[l] = true;
    }
    match seen.iter().position(|s| !s) {
        Some(class) => Err(Error::MissingClass { class }),
        None => Ok(()),
    }
}

/// Negate, sum channels, take the per-class maximum over train samples and
/// apply a unit-temperature softmax. The predicted class is the first index
/// attaining the largest per-class score, which is the class of the nearest
/// training sample with ties going to the lowest class index.
pub fn soft_1nn(
    v: &DistanceTensor,
    train_labels: &[usize],
    classes: usize,
) -> Result<SoftNeighbors> {
    validate_labels(v, train_labels, classes)?;
    let mut logits = Vec::with_capacity(v.n_test);
    let mut probabilities = Vec::with_capacity(v.n_test);
    let mut predictions = Vec::with_capacity(v.n_test);
    for i in 0..v.n_test {
        let mut per_class = vec![f64::NEG_INFINITY; classes];
        for (j, &label) in train_labels.iter().enumerate() {
            per_class[label] = per_class[label].max(-v.summed(i, j));
        }
        predictions.push(argmax(&per_class));
        probabilities.push(softmax_row(&per_class, 1.0));
        logits.push(per_class);
    }
    Ok(SoftNeighbors {
        logits,
        probabilities,
        predictions,
    })
}

/// Label of the nearest training sample by channel-summed distance; among
/// equally near samples the lowest class index wins.
pub fn hard_1nn(v: &DistanceTensor, train_labels: &[usize], classes: usize) -> Result<Vec<usize>> {
    validate_labels(v, train_labels, classes)?;
    Ok((0..v.n_test)
        .map(|i| {
            let mut best = (f64::INFINITY, usize::MAX);
            for (j, &label) in train_labels.iter().enumerate() {
                let d = v.summed(i, j);
                if d < best.0 || (d == best.0 && label < best.1) {
                    best = (d, label);
                }
            }
            best.1
        })
        .collect())
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
