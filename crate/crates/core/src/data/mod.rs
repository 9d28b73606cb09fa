//! Rating ingestion, binarization, leave-one-out splitting and negative sampling.

mod dataset;
mod raw;
mod sampler;
mod snapshot;

use std::path::Path;

pub use dataset::{binarize, binarize_and_filter, leave_one_out_split, BinarizedData, IdMap, ImplicitDataset, Positive};
pub use raw::{load_ratings, parse_ratings, Interaction, RatingFormat, RawInteractions};
pub use sampler::{EvalNegatives, NegativeSampler};
pub use snapshot::{load_dataset, save_dataset, DatasetManifest, DATASET_FORMAT_VERSION};

use crate::error::Result;

/// Load a rating log and run the full preparation pipeline, or load a
/// directory previously written by [`save_dataset`].
pub fn prepare(path: impl AsRef<Path>, format: RatingFormat, min_interactions: usize) -> Result<ImplicitDataset> {
    let path = path.as_ref();
    if path.is_dir() {
        return Ok(load_dataset(path)?.0);
    }
    let raw = load_ratings(path, format)?;
    leave_one_out_split(binarize_and_filter(&raw, min_interactions)?)
}
