use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::series::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub fractions: [f64; 2],
}

impl SplitSpec {
    pub fn halves(seed: u64) -> Self {
        SplitSpec {
            seed,
            fractions: [0.5, 0.5],
        }
    }

    fn validate(&self) -> Result<()> {
        let [a, b] = self.fractions;
        if a < 0.0 || b < 0.0 || ((a + b) - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "split fractions must be nonnegative and sum to 1, got {:?}",
                self.fractions
            )));
        }
        Ok(())
    }
}

/// Sample indices of each half, in ascending order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub dataset: String,
    pub seed: u64,
    pub first: Vec<usize>,
    pub second: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Split {
    pub first: LabeledDataset,
    pub second: LabeledDataset,
    pub manifest: SplitManifest,
}

/// Class-balanced two-way split.
///
/// Within each class the samples are shuffled and the first half receives
/// `round(f * cumulative) - assigned` of them, so the rounding surplus of
/// odd-sized classes alternates between the halves.
pub fn stratified_split(dataset: &LabeledDataset, spec: SplitSpec) -> Result<Split> {
    spec.validate()?;
    let mut rng = rng::seeded(spec.seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.class_count()];
    for (i, &l) in dataset.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    if let Some(class) = by_class.iter().position(|idx| idx.len() == 1) {
        return Err(Error::ClassTooSmall { class });
    }
    let mut first = Vec::new();
    let mut second = Vec::new();
    let mut cumulative = 0usize;
    let mut assigned = 0usize;
    for mut idx in by_class {
        idx.shuffle(&mut rng);
        cumulative += idx.len();
        let target = (spec.fractions[0] * cumulative as f64).round() as usize;
        let take = target.saturating_sub(assigned).min(idx.len());
        assigned += take;
        first.extend_from_slice(&idx[..take]);
        second.extend_from_slice(&idx[take..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    Ok(Split {
        first: dataset.select(&first),
        second: dataset.select(&second),
        manifest: SplitManifest {
            dataset: dataset.name().to_string(),
            seed: spec.seed,
            first,
            second,
        },
    })
}
