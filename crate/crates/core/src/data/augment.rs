use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::types::{CrossingLabel, NormalizedWindow, ObservationWindow, Track};

/// Horizontal mirror: `x1' = W - x2`, `x2' = W - x1`, `y` unchanged, applied
/// to observation and target boxes.
pub fn flip_window(w: &ObservationWindow) -> ObservationWindow {
    w.flipped()
}

pub fn normalize(w: &ObservationWindow) -> NormalizedWindow {
    w.normalized()
}

/// Equalises crossing and non-crossing counts in a training split.
///
/// Flipped copies of minority windows are added first; if the minority is
/// still short the majority is undersampled at random, otherwise only as
/// many flipped copies as needed are kept. Originals of the minority class
/// are never dropped.
pub fn balance_training_split(windows: &[ObservationWindow], seed: u64) -> Vec<ObservationWindow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (crossing, not_crossing): (Vec<_>, Vec<_>) = windows
        .iter()
        .cloned()
        .partition(|w| w.label == CrossingLabel::Crossing);
    if crossing.is_empty() || not_crossing.is_empty() || crossing.len() == not_crossing.len() {
        return windows.to_vec();
    }
    let (minority, mut majority) = if crossing.len() < not_crossing.len() {
        (crossing, not_crossing)
    } else {
        (not_crossing, crossing)
    };
    let mut flipped: Vec<ObservationWindow> = minority.iter().map(flip_window).collect();
    let augmented = 2 * minority.len();
    if augmented <= majority.len() {
        majority.shuffle(&mut rng);
        majority.truncate(augmented);
        // deterministic order for the surviving majority windows
        majority.sort_by(|a, b| {
            (&a.track_id, a.last_obs_frame).cmp(&(&b.track_id, b.last_obs_frame))
        });
    } else {
        flipped.shuffle(&mut rng);
        flipped.truncate(majority.len() - minority.len());
    }
    let mut out = minority;
    out.extend(flipped);
    out.extend(majority);
    out
}

/// Splits tracks into train/validation/test, stratified by label.
pub fn split_tracks(
    tracks: &[Track],
    train_fraction: f64,
    val_fraction: f64,
    seed: u64,
) -> (Vec<Track>, Vec<Track>, Vec<Track>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for label in [CrossingLabel::Crossing, CrossingLabel::NotCrossing] {
        let mut group: Vec<&Track> = tracks.iter().filter(|t| t.label == label).collect();
        group.shuffle(&mut rng);
        let n = group.len();
        let n_train = (n as f64 * train_fraction).round() as usize;
        let n_val = ((n as f64 * val_fraction).round() as usize).min(n - n_train.min(n));
        for (i, t) in group.into_iter().enumerate() {
            let dst = if i < n_train {
                &mut train
            } else if i < n_train + n_val {
                &mut val
            } else {
                &mut test
            };
            dst.push(t.clone());
        }
    }
    let by_id = |a: &Track, b: &Track| a.track_id.cmp(&b.track_id);
    train.sort_by(by_id);
    val.sort_by(by_id);
    test.sort_by(by_id);
    (train, val, test)
}
