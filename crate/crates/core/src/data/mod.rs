//! Multivariate series containers, the `.ts` archive format, preprocessing
//! and the split-and-relabel protocol for the attack dataset.

mod normalize;
mod series;
mod split;
pub mod synthetic;
mod ts;

pub use normalize::{znormalize, NormStats};
pub use series::{batch_mask, batch_tensor, LabeledDataset, MultivariateSeries};
pub use split::{stratified_split, Split, SplitManifest, SplitSpec};
pub use ts::{parse_ts, read_ts_file, serialize_ts, write_ts_file};

use crate::error::{Error, Result};

/// Anything that assigns class labels to series.
pub trait Predictor {
    fn class_count(&self) -> usize;

    fn predict(&self, samples: &[MultivariateSeries]) -> Result<Vec<usize>>;
}

/// Replaces labels with the model's predictions, keeping the originals as
/// ground truth for the final adversary count.
pub fn relabel_by_model(dataset: &LabeledDataset, model: &dyn Predictor) -> Result<LabeledDataset> {
    if model.class_count() != dataset.class_count() {
        return Err(Error::invalid(format!(
            "model predicts {} classes but dataset {:?} declares {}",
            model.class_count(),
            dataset.name(),
            dataset.class_count()
        )));
    }
    let predicted = model.predict(dataset.samples())?;
    dataset.with_predicted_labels(predicted)
}
