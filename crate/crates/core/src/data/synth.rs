//! Kinematic street scenes seen from a forward-facing camera on a moving car.
//!
//! Pedestrians live on a flat ground plane. `X` is the lateral offset from
//! the camera axis (the road occupies `|X| <= road_half_width`) and `Z` the
//! depth ahead. The car drives at constant speed, so boxes grow like `1/Z`.
//! Crossers walk toward the road and the critical frame is the first frame
//! with `|X| <= road_half_width`; the rest walk along the sidewalk or stand,
//! and their critical frame is the last frame.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::slicing::{slice_track, SliceConfig, SplitKind};
use super::types::{BoundingBox, CrossingLabel, ObservationWindow, Track};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Domain::A),
            "B" | "b" => Ok(Domain::B),
            other => Err(Error::Config(format!("unknown domain {other:?}, expected A or B"))),
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::A => "A",
            Domain::B => "B",
        })
    }
}

/// Closed interval sampled uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.hi <= self.lo {
            self.lo
        } else {
            rng.gen_range(self.lo..=self.hi)
        }
    }

    fn check(&self, name: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite()) || self.lo > self.hi {
            return Err(Error::Config(format!("{name}: bad range [{}, {}]", self.lo, self.hi)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub domain: Domain,
    pub n_pedestrians: usize,
    pub crossing_fraction: f64,
    pub seed: u64,
    pub image_w: u32,
    pub image_h: u32,
    /// Horizontal field of view in degrees.
    pub fov_deg: f64,
    /// Metres above the ground.
    pub camera_height: f64,
    pub road_half_width: f64,
    /// Ego speed, m/s.
    pub ego_speed: Range,
    /// Crossers' speed toward the road, m/s.
    pub crossing_speed: Range,
    /// Along-road walking speed of non-crossers, m/s (either direction).
    pub walk_speed: Range,
    /// Sideways drift of non-crossing walkers, m/s (either direction).
    pub walk_drift: Range,
    /// Non-crossers' distance from the road edge, m.
    pub curb_offset: Range,
    /// Depth at the last frame, m.
    pub final_depth: Range,
    pub pedestrian_height: Range,
    /// Frames before the critical frame for crossers; whole length otherwise.
    pub track_frames: Range,
    /// Frames kept after road entry for crossers.
    pub post_event_frames: Range,
    /// Fraction of non-crossers that stand still.
    pub standing_fraction: f64,
    /// Std of the Gaussian jitter added to each box corner, px.
    pub noise_px: f64,
}

impl ScenarioConfig {
    /// Preset for `domain`; the two differ in ego speed, walking speeds,
    /// camera height, road width and noise.
    pub fn new(domain: Domain, n_pedestrians: usize, seed: u64) -> Self {
        let base = Self {
            domain,
            n_pedestrians,
            crossing_fraction: 0.25,
            seed,
            image_w: 1920,
            image_h: 1080,
            fov_deg: 110.0,
            camera_height: 1.5,
            road_half_width: 3.5,
            ego_speed: Range::new(2.0, 4.0),
            crossing_speed: Range::new(1.8, 2.6),
            walk_speed: Range::new(0.8, 1.6),
            walk_drift: Range::new(0.0, 0.1),
            curb_offset: Range::new(0.3, 3.0),
            final_depth: Range::new(6.0, 14.0),
            pedestrian_height: Range::new(1.5, 1.9),
            track_frames: Range::new(90.0, 150.0),
            post_event_frames: Range::new(0.0, 15.0),
            standing_fraction: 0.3,
            noise_px: 1.0,
        };
        match domain {
            Domain::A => base,
            Domain::B => Self {
                camera_height: 1.2,
                road_half_width: 5.0,
                ego_speed: Range::new(1.0, 3.0),
                crossing_speed: Range::new(1.3, 2.1),
                walk_speed: Range::new(0.5, 1.2),
                walk_drift: Range::new(0.0, 0.15),
                curb_offset: Range::new(0.2, 2.0),
                final_depth: Range::new(5.0, 12.0),
                standing_fraction: 0.5,
                noise_px: 2.0,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.crossing_fraction) {
            return Err(Error::Config(format!(
                "crossing_fraction {} not in [0, 1]",
                self.crossing_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.standing_fraction) {
            return Err(Error::Config(format!(
                "standing_fraction {} not in [0, 1]",
                self.standing_fraction
            )));
        }
        if self.image_w == 0 || self.image_h == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::Config(format!("fov_deg {} not in (0, 180)", self.fov_deg)));
        }
        if !(self.noise_px >= 0.0) || !(self.camera_height > 0.0) || !(self.road_half_width > 0.0) {
            return Err(Error::Config(
                "noise_px, camera_height and road_half_width must be non-negative/positive".into(),
            ));
        }
        for (name, r) in [
            ("ego_speed", self.ego_speed),
            ("crossing_speed", self.crossing_speed),
            ("walk_speed", self.walk_speed),
            ("walk_drift", self.walk_drift),
            ("curb_offset", self.curb_offset),
            ("final_depth", self.final_depth),
            ("pedestrian_height", self.pedestrian_height),
            ("track_frames", self.track_frames),
            ("post_event_frames", self.post_event_frames),
        ] {
            r.check(name)?;
        }
        if self.final_depth.lo <= 1.0 {
            return Err(Error::Config("final_depth must stay above 1 m".into()));
        }
        if self.track_frames.lo < 1.0 || self.post_event_frames.lo < 0.0 {
            return Err(Error::Config("track_frames must be >= 1, post_event_frames >= 0".into()));
        }
        if self.crossing_speed.lo <= 0.0 || self.pedestrian_height.lo <= 0.0 {
            return Err(Error::Config(
                "crossing_speed and pedestrian_height must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Focal length in pixels.
    pub fn focal_px(&self) -> f64 {
        0.5 * self.image_w as f64 / (0.5 * self.fov_deg.to_radians()).tan()
    }

    pub fn crossing_count(&self) -> usize {
        (self.n_pedestrians as f64 * self.crossing_fraction).round() as usize
    }
}

struct Camera {
    f: f64,
    cx: f64,
    cy: f64,
    height: f64,
    w: f64,
    h: f64,
}

impl Camera {
    /// Box of a pedestrian of height `ped_h` standing at `(x, z)`.
    fn project(&self, x: f64, z: f64, ped_h: f64) -> BoundingBox {
        let u = self.cx + self.f * x / z;
        let bottom = self.cy + self.f * self.height / z;
        let top = self.cy + self.f * (self.height - ped_h) / z;
        let half_w = 0.5 * self.f * 0.4 * ped_h / z;
        BoundingBox {
            x1: u - half_w,
            y1: top,
            x2: u + half_w,
            y2: bottom,
        }
    }
}

/// Tracks for `cfg`, a pure function of the config. Exactly
/// `round(n * crossing_fraction)` tracks are crossers.
pub fn generate_synthetic(cfg: &ScenarioConfig) -> Result<Vec<Track>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut crossing = vec![false; cfg.n_pedestrians];
    crossing[..cfg.crossing_count()].iter_mut().for_each(|c| *c = true);
    crossing.shuffle(&mut rng);

    let camera = Camera {
        f: cfg.focal_px(),
        cx: 0.5 * cfg.image_w as f64,
        cy: 0.5 * cfg.image_h as f64,
        height: cfg.camera_height,
        w: cfg.image_w as f64,
        h: cfg.image_h as f64,
    };
    let jitter = (cfg.noise_px > 0.0)
        .then(|| Normal::new(0.0, cfg.noise_px))
        .transpose()
        .map_err(|e| Error::Config(format!("noise_px: {e}")))?;
    let prefix = match cfg.domain {
        Domain::A => "a",
        Domain::B => "b",
    };
    crossing
        .iter()
        .enumerate()
        .map(|(i, &crosses)| {
            let id = format!("{prefix}{}-{i:05}", cfg.seed);
            pedestrian(cfg, &camera, &jitter, crosses, id, &mut rng)
        })
        .collect()
}

fn pedestrian(
    cfg: &ScenarioConfig,
    camera: &Camera,
    jitter: &Option<Normal<f64>>,
    crosses: bool,
    track_id: String,
    rng: &mut ChaCha8Rng,
) -> Result<Track> {
    let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let ego = cfg.ego_speed.sample(rng);
    let ped_h = cfg.pedestrian_height.sample(rng);
    let final_depth = cfg.final_depth.sample(rng);
    let first_frame = rng.gen_range(0..300i64);
    let road = cfg.road_half_width;

    // lateral position and along-road velocity per frame, relative to the end
    let (len, critical, lateral, along): (usize, usize, Box<dyn Fn(f64) -> f64>, f64) = if crosses {
        let pre = cfg.track_frames.sample(rng).round() as usize;
        let post = cfg.post_event_frames.sample(rng).round() as usize;
        let speed = cfg.crossing_speed.sample(rng) / 30.0;
        // |X| reaches the road edge exactly at frame `pre`
        let start = road + speed * (pre as f64 - 0.5);
        (
            pre + post + 1,
            pre,
            Box::new(move |t| side * (start - speed * t)),
            0.0,
        )
    } else {
        let len = cfg.track_frames.sample(rng).round() as usize + 1;
        let offset = road + cfg.curb_offset.sample(rng);
        let standing = rng.gen::<f64>() < cfg.standing_fraction;
        let (drift, along) = if standing {
            (0.0, 0.0)
        } else {
            let dir = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let drift_dir = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            (
                drift_dir * cfg.walk_drift.sample(rng) / 30.0,
                dir * cfg.walk_speed.sample(rng) / 30.0,
            )
        };
        (
            len,
            len - 1,
            Box::new(move |t| side * (offset + drift * t).max(road + 0.05)),
            along,
        )
    };

    // depth decreases with the ego motion, minus the pedestrian's own
    let closing = ego / 30.0 - along;
    let last = (len - 1) as f64;
    let boxes = (0..len)
        .map(|i| {
            let t = i as f64;
            let z = final_depth + closing * (last - t);
            let mut b = camera.project(lateral(t), z, ped_h);
            if let Some(jitter) = jitter {
                b.x1 += jitter.sample(rng);
                b.y1 += jitter.sample(rng);
                b.x2 += jitter.sample(rng);
                b.y2 += jitter.sample(rng);
            }
            b.clamped(camera.w, camera.h, 1.0).quantized()
        })
        .collect();
    let track = Track {
        track_id,
        first_frame,
        boxes,
        label: if crosses {
            CrossingLabel::Crossing
        } else {
            CrossingLabel::NotCrossing
        },
        critical_frame: first_frame + critical as i64,
        image_w: cfg.image_w,
        image_h: cfg.image_h,
    };
    track.validate()?;
    Ok(track)
}

/// Depth-free motion features of a window.
///
/// `(u - cx) / h` equals lateral offset over pedestrian height, so its change
/// toward the image centre over the window measures lateral walking speed
/// regardless of distance. The second feature is the least-squares slope of
/// the box centre toward the image centre, in image widths per frame.
pub fn handcrafted_features(w: &ObservationWindow) -> [f64; 2] {
    let cx = 0.5 * w.image_w as f64;
    let n = w.obs.len();
    let k = (n / 4).max(1);
    let side = {
        let mean_u: f64 = w.obs.iter().map(|b| b.center_x()).sum::<f64>() / n as f64;
        if mean_u >= cx {
            1.0
        } else {
            -1.0
        }
    };
    let ratio = |b: &BoundingBox| side * (b.center_x() - cx) / b.height();
    let early: f64 = w.obs[..k].iter().map(ratio).sum::<f64>() / k as f64;
    let late: f64 = w.obs[n - k..].iter().map(ratio).sum::<f64>() / k as f64;

    let t_mean = (n as f64 - 1.0) / 2.0;
    let u: Vec<f64> = w.obs.iter().map(|b| side * b.center_x() / w.image_w as f64).collect();
    let u_mean = u.iter().sum::<f64>() / n as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, ui) in u.iter().enumerate() {
        let dt = i as f64 - t_mean;
        num += dt * (ui - u_mean);
        den += dt * dt;
    }
    let slope = if den > 0.0 { num / den } else { 0.0 };
    [early - late, -slope]
}

/// Accuracy of a nearest-centroid classifier on [`handcrafted_features`],
/// standardized by the pooled per-feature spread. Centroids are fit on the
/// windows of even-indexed tracks and scored on the odd-indexed ones.
pub fn nearest_centroid_accuracy(tracks: &[Track], slicing: &SliceConfig) -> Result<f64> {
    let mut fit: [Vec<[f64; 2]>; 2] = [Vec::new(), Vec::new()];
    let mut score: Vec<([f64; 2], usize)> = Vec::new();
    for (i, t) in tracks.iter().enumerate() {
        for w in slice_track(t, slicing, SplitKind::Eval) {
            let f = handcrafted_features(&w);
            let label = w.label.as_u8() as usize;
            if i % 2 == 0 {
                fit[label].push(f);
            } else {
                score.push((f, label));
            }
        }
    }
    if fit.iter().any(|c| c.is_empty()) || score.is_empty() {
        return Err(Error::Data(
            "nearest-centroid check needs windows of both labels".into(),
        ));
    }
    let centroid = |c: &[[f64; 2]]| {
        let n = c.len() as f64;
        [
            c.iter().map(|f| f[0]).sum::<f64>() / n,
            c.iter().map(|f| f[1]).sum::<f64>() / n,
        ]
    };
    let centroids = [centroid(&fit[0]), centroid(&fit[1])];
    let mut scale = [0.0; 2];
    let total = (fit[0].len() + fit[1].len()) as f64;
    for (label, class) in fit.iter().enumerate() {
        for f in class {
            for d in 0..2 {
                scale[d] += (f[d] - centroids[label][d]).powi(2) / total;
            }
        }
    }
    let scale = scale.map(|v| v.sqrt().max(1e-12));
    let dist = |f: &[f64; 2], c: &[f64; 2]| {
        (0..2).map(|d| ((f[d] - c[d]) / scale[d]).powi(2)).sum::<f64>()
    };
    let correct = score
        .iter()
        .filter(|(f, label)| {
            let predicted = usize::from(dist(f, &centroids[1]) < dist(f, &centroids[0]));
            predicted == *label
        })
        .count();
    Ok(correct as f64 / score.len() as f64)
}
