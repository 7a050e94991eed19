//! Cutting tracks into fixed-length observation windows under a
//! time-to-event constraint.

use serde::{Deserialize, Serialize};

use super::types::{ObservationWindow, Track};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SliceConfig {
    pub obs_len: usize,
    /// Fraction of a window shared with its neighbour in training splits.
    pub overlap: f64,
    pub tte_min: usize,
    pub tte_max: usize,
    /// Attach the boxes from M+1 to A (needed by the encoder-decoder).
    pub include_target: bool,
}

impl Default for SliceConfig {
    fn default() -> Self {
        Self {
            obs_len: 16,
            overlap: 0.6,
            tte_min: 30,
            tte_max: 60,
            include_target: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    /// Overlapping windows.
    Train,
    /// Back-to-back windows, stride = `obs_len`.
    Eval,
}

impl SliceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.obs_len == 0 {
            return Err(Error::Config("obs_len must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("overlap {} not in [0, 1)", self.overlap)));
        }
        if self.tte_min > self.tte_max {
            return Err(Error::Config(format!(
                "tte_min {} exceeds tte_max {}",
                self.tte_min, self.tte_max
            )));
        }
        Ok(())
    }

    /// `round(obs_len * (1 - overlap))`, at least one frame.
    pub fn train_stride(&self) -> usize {
        ((self.obs_len as f64 * (1.0 - self.overlap)).round() as usize).max(1)
    }

    pub fn stride(&self, kind: SplitKind) -> usize {
        match kind {
            SplitKind::Train => self.train_stride(),
            SplitKind::Eval => self.obs_len,
        }
    }
}

/// Windows of `track` whose last frame M satisfies
/// `tte_min <= A - M <= tte_max`.
///
/// The latest admissible M (`A - tte_min`) is always taken first when the
/// track reaches back far enough; earlier windows step back by the stride.
/// The result is in chronological order. Short tracks yield no windows.
pub fn slice_track(track: &Track, cfg: &SliceConfig, kind: SplitKind) -> Vec<ObservationWindow> {
    slice_band(
        track,
        cfg.obs_len,
        cfg.tte_min,
        cfg.tte_max,
        cfg.stride(kind),
        cfg.include_target,
    )
}

pub(crate) fn slice_band(
    track: &Track,
    obs_len: usize,
    tte_min: usize,
    tte_max: usize,
    stride: usize,
    include_target: bool,
) -> Vec<ObservationWindow> {
    let mut windows = Vec::new();
    if obs_len == 0 || track.len() < obs_len || stride == 0 {
        return windows;
    }
    let a = track.critical_frame;
    let earliest_m = track.first_frame + obs_len as i64 - 1;
    let mut tte = tte_min;
    while tte <= tte_max {
        let m = a - tte as i64;
        if m < earliest_m {
            break;
        }
        if m <= track.last_frame() {
            windows.push(make_window(track, m, tte, obs_len, include_target));
        }
        tte += stride;
    }
    windows.reverse();
    windows
}

fn make_window(
    track: &Track,
    m: i64,
    tte: usize,
    obs_len: usize,
    include_target: bool,
) -> ObservationWindow {
    let end = (m - track.first_frame) as usize;
    let obs = track.boxes[end + 1 - obs_len..=end].to_vec();
    let target = include_target.then(|| track.boxes[end + 1..=end + tte].to_vec());
    ObservationWindow {
        track_id: track.track_id.clone(),
        last_obs_frame: m,
        tte,
        label: track.label,
        image_w: track.image_w,
        image_h: track.image_h,
        obs,
        target,
    }
}

/// Inclusive TTE interval in frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TteBand {
    pub lo: usize,
    pub hi: usize,
}

impl TteBand {
    pub fn new(lo: usize, hi: usize) -> Result<Self> {
        if lo > hi {
            return Err(Error::Config(format!("empty TTE band {lo}-{hi}")));
        }
        Ok(Self { lo, hi })
    }

    /// Parses `"15-30,30-45"`.
    pub fn parse_list(text: &str) -> Result<Vec<TteBand>> {
        text.split(',')
            .map(|part| {
                let (lo, hi) = part
                    .trim()
                    .split_once('-')
                    .ok_or_else(|| Error::Config(format!("bad TTE band {part:?}")))?;
                let parse = |s: &str| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad TTE band {part:?}")))
                };
                TteBand::new(parse(lo)?, parse(hi)?)
            })
            .collect()
    }
}

impl std::fmt::Display for TteBand {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}", self.lo, self.hi)
    }
}

/// Evaluation windows (stride = `obs_len`) for each TTE band, bands sorted
/// by their lower bound.
pub fn tte_sweep_slices(
    tracks: &[Track],
    obs_len: usize,
    bands: &[TteBand],
    include_target: bool,
) -> Vec<(TteBand, Vec<ObservationWindow>)> {
    let mut bands = bands.to_vec();
    bands.sort();
    bands
        .into_iter()
        .map(|band| {
            let windows = tracks
                .iter()
                .flat_map(|t| slice_band(t, obs_len, band.lo, band.hi, obs_len, include_target))
                .collect();
            (band, windows)
        })
        .collect()
}
