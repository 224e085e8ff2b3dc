//! Loading, splitting, normalizing and windowing multivariate series.

mod calendar;
mod dataset;
mod mask;
mod norm;
mod prepared;
mod split;
mod synth;
mod window;

pub use calendar::{calendar_codes, calendar_covariates, Covariates, CALENDAR_CARDINALITIES};
pub use dataset::{load_csv_dataset, Frequency, SeriesDataset};
pub use mask::{mask_patches, MaskedInputs};
pub use norm::NormStats;
pub use prepared::PreparedData;
pub use split::{chronological_split, SplitRanges, SplitSpec};
pub use synth::{
    pulse_onsets, synth_retail_generate, synth_retail_with, RetailParams, MIN_SYNTH_DAYS, RETAIL_CHANNELS,
};
pub use window::{gather_batch, WindowBatch, WindowIter, Windows};
