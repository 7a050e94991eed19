//! Tracks, observation windows, the synthetic scene generator and the
//! dataset files.

mod augment;
mod io;
mod slicing;
mod synth;
mod types;

use serde::{Deserialize, Serialize};

pub use augment::{balance_training_split, flip_window, normalize, split_tracks};
pub use io::{
    load_pie_records, read_dataset, read_tracks, track_to_line, window_to_line, write_dataset,
    write_tracks,
};
pub use slicing::{slice_track, tte_sweep_slices, SliceConfig, SplitKind, TteBand};
pub use synth::{
    generate_synthetic, handcrafted_features, nearest_centroid_accuracy, Domain, Range,
    ScenarioConfig,
};
pub use types::{
    quantize, BoundingBox, CrossingLabel, NormalizedWindow, ObservationWindow, Track,
};

use crate::error::{Error, Result};

/// Track-level split fractions; the test split takes the remainder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            val_fraction: 0.15,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        if !ok(self.train_fraction)
            || !ok(self.val_fraction)
            || self.train_fraction + self.val_fraction > 1.0 + 1e-12
        {
            return Err(Error::Config(format!(
                "split fractions {} / {} invalid",
                self.train_fraction, self.val_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<ObservationWindow>,
    pub val: Vec<ObservationWindow>,
    pub test: Vec<ObservationWindow>,
}

/// Splits tracks, slices them and balances the training windows.
///
/// Training windows overlap and are balanced with flips and undersampling;
/// validation and test windows are back-to-back and left as sliced.
pub fn build_splits(
    tracks: &[Track],
    slicing: &SliceConfig,
    split: &SplitConfig,
) -> Result<DatasetSplits> {
    slicing.validate()?;
    split.validate()?;
    let (train, val, test) =
        split_tracks(tracks, split.train_fraction, split.val_fraction, split.seed);
    let slice_all = |ts: &[Track], kind| -> Vec<ObservationWindow> {
        ts.iter().flat_map(|t| slice_track(t, slicing, kind)).collect()
    };
    Ok(DatasetSplits {
        train: balance_training_split(&slice_all(&train, SplitKind::Train), split.seed),
        val: slice_all(&val, SplitKind::Eval),
        test: slice_all(&test, SplitKind::Eval),
    })
}

/// `(crossing, not_crossing)` counts.
pub fn label_counts(windows: &[ObservationWindow]) -> (usize, usize) {
    let c = windows
        .iter()
        .filter(|w| w.label == CrossingLabel::Crossing)
        .count();
    (c, windows.len() - c)
}
