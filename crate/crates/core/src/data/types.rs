use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Rounds to the 6-decimal grid used by the dataset files, so values survive
/// a write/read cycle unchanged.
pub fn quantize(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// Pixel box given by its upper-left `(x1, y1)` and lower-right `(x2, y2)` corners.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if !b.is_valid() {
            return Err(Error::Data(format!("invalid bounding box {b:?}")));
        }
        Ok(b)
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center_x(&self) -> f64 {
        0.5 * (self.x1 + self.x2)
    }

    /// Clamps into the image, keeping at least `min_size` pixels per side.
    pub fn clamped(&self, image_w: f64, image_h: f64, min_size: f64) -> Self {
        let clamp_axis = |lo: f64, hi: f64, limit: f64| {
            let lo = lo.clamp(0.0, limit - min_size);
            let hi = hi.clamp(lo + min_size, limit);
            (lo, hi)
        };
        let (x1, x2) = clamp_axis(self.x1, self.x2, image_w);
        let (y1, y2) = clamp_axis(self.y1, self.y2, image_h);
        Self { x1, y1, x2, y2 }
    }

    /// Horizontal mirror inside an image of width `image_w`.
    pub fn flipped(&self, image_w: f64) -> Self {
        Self {
            x1: quantize(image_w - self.x2),
            y1: self.y1,
            x2: quantize(image_w - self.x1),
            y2: self.y2,
        }
    }

    pub fn quantized(&self) -> Self {
        Self {
            x1: quantize(self.x1),
            y1: quantize(self.y1),
            x2: quantize(self.x2),
            y2: quantize(self.y2),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CrossingLabel {
    NotCrossing,
    Crossing,
}

impl CrossingLabel {
    pub fn as_f64(self) -> f64 {
        match self {
            CrossingLabel::NotCrossing => 0.0,
            CrossingLabel::Crossing => 1.0,
        }
    }

    pub fn as_u8(self) -> u8 {
        self.as_f64() as u8
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(CrossingLabel::NotCrossing),
            1 => Ok(CrossingLabel::Crossing),
            other => Err(Error::Data(format!("label must be 0 or 1, got {other}"))),
        }
    }
}

/// One pedestrian's trajectory at 30 fps.
///
/// Frames are consecutive starting at `first_frame`; `critical_frame` is the
/// crossing onset for crossers and the last observed frame otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub track_id: String,
    pub first_frame: i64,
    pub boxes: Vec<BoundingBox>,
    pub label: CrossingLabel,
    pub critical_frame: i64,
    pub image_w: u32,
    pub image_h: u32,
}

impl Track {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn last_frame(&self) -> i64 {
        self.first_frame + self.boxes.len() as i64 - 1
    }

    pub fn frames(&self) -> impl Iterator<Item = i64> {
        self.first_frame..=self.last_frame()
    }

    pub fn box_at(&self, frame: i64) -> Option<&BoundingBox> {
        let idx = frame.checked_sub(self.first_frame)?;
        usize::try_from(idx).ok().and_then(|i| self.boxes.get(i))
    }

    pub fn validate(&self) -> Result<()> {
        if self.boxes.is_empty() {
            return Err(Error::Data(format!("track {} has no boxes", self.track_id)));
        }
        if self.critical_frame < self.first_frame || self.critical_frame > self.last_frame() {
            return Err(Error::Data(format!(
                "track {}: critical frame {} outside [{}, {}]",
                self.track_id,
                self.critical_frame,
                self.first_frame,
                self.last_frame()
            )));
        }
        if let Some(b) = self.boxes.iter().find(|b| !b.is_valid()) {
            return Err(Error::Data(format!(
                "track {}: invalid box {b:?}",
                self.track_id
            )));
        }
        Ok(())
    }
}

/// A fixed-length slice of a track ending at frame `last_obs_frame` (M).
///
/// Boxes are kept in pixels; [`ObservationWindow::normalized`] produces the
/// model inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationWindow {
    pub track_id: String,
    pub last_obs_frame: i64,
    /// Frames from M to the critical frame A.
    pub tte: usize,
    pub label: CrossingLabel,
    pub image_w: u32,
    pub image_h: u32,
    pub obs: Vec<BoundingBox>,
    /// Boxes for frames `M+1..=A` when the window carries a trajectory target.
    pub target: Option<Vec<BoundingBox>>,
}

/// Window coordinates divided by the image size, ready for a model.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedWindow {
    /// `obs_len x 4`.
    pub obs: Tensor,
    /// `tte x 4`.
    pub target: Option<Tensor>,
    pub label: f64,
    pub tte: usize,
}

fn normalize_boxes(boxes: &[BoundingBox], w: f64, h: f64) -> Tensor {
    let data = boxes
        .iter()
        .flat_map(|b| [b.x1 / w, b.y1 / h, b.x2 / w, b.y2 / h])
        .collect();
    Tensor::raw(vec![boxes.len(), 4], data)
}

impl ObservationWindow {
    /// Mirrors observation and target boxes horizontally; label and TTE stay.
    pub fn flipped(&self) -> Self {
        let w = self.image_w as f64;
        Self {
            obs: self.obs.iter().map(|b| b.flipped(w)).collect(),
            target: self
                .target
                .as_ref()
                .map(|t| t.iter().map(|b| b.flipped(w)).collect()),
            ..self.clone()
        }
    }

    /// All coordinates divided by the image width/height into `[0, 1]`.
    pub fn normalized(&self) -> NormalizedWindow {
        let (w, h) = (self.image_w as f64, self.image_h as f64);
        NormalizedWindow {
            obs: normalize_boxes(&self.obs, w, h),
            target: self.target.as_ref().map(|t| normalize_boxes(t, w, h)),
            label: self.label.as_f64(),
            tte: self.tte,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_arithmetic() {
        let b = BoundingBox::new(10.0, 5.0, 20.0, 15.0).unwrap();
        assert_eq!(b.flipped(100.0), BoundingBox::new(80.0, 5.0, 90.0, 15.0).unwrap());
    }

    #[test]
    fn invalid_box_rejected() {
        assert!(BoundingBox::new(5.0, 0.0, 5.0, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 2.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn clamping_keeps_order() {
        let b = BoundingBox {
            x1: -30.0,
            y1: 1000.0,
            x2: -10.0,
            y2: 1200.0,
        };
        let c = b.clamped(1920.0, 1080.0, 1.0);
        assert!(c.is_valid());
        assert!(c.x1 >= 0.0 && c.y2 <= 1080.0);
    }

    #[test]
    fn quantize_is_idempotent() {
        for v in [0.1234567, 1919.9999996, 3.0, 523.125] {
            assert_eq!(quantize(quantize(v)), quantize(v));
            let text = format!("{:.6}", quantize(v));
            assert_eq!(text.parse::<f64>().unwrap(), quantize(v));
        }
    }
}
