//! Line-delimited JSON files for windows and tracks, and the adapter for
//! external pedestrian annotations.
//!
//! Dataset file, one window per line, fields in this order:
//!
//! ```text
//! {"track_id":"a7-00012","M":118,"tte":31,"label":1,"image_w":1920,"image_h":1080,
//!  "obs":[[x1,y1,x2,y2],...16],"target":[[x1,y1,x2,y2],...tte]|null}
//! ```
//!
//! Track file, one track per line:
//!
//! ```text
//! {"track_id":"a7-00012","first_frame":0,"label":1,"critical_frame":149,
//!  "image_w":1920,"image_h":1080,"boxes":[[x1,y1,x2,y2],...]}
//! ```
//!
//! Reals are written with six decimals. Values already on that grid (see
//! [`quantize`](super::types::quantize)) read back bit-identical.
//!
//! External annotation record, one pedestrian per line:
//!
//! ```text
//! {"ped_id":"1_2_34","image_w":1920,"image_h":1080,"frames":[100,101,...],
//!  "bbox":[[x1,y1,x2,y2],...],"crossing":1,"critical_frame":187}
//! ```
//!
//! `frames` must be consecutive. `crossing` is 1 or 0 (-1, "irrelevant", is
//! read as 0). `critical_frame` is required for crossers and defaults to the
//! last frame otherwise.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use super::types::{BoundingBox, CrossingLabel, ObservationWindow, Track};
use crate::error::{Error, Result};

fn push_boxes(out: &mut String, boxes: &[BoundingBox]) {
    out.push('[');
    for (i, b) in boxes.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "[{:.6},{:.6},{:.6},{:.6}]", b.x1, b.y1, b.x2, b.y2);
    }
    out.push(']');
}

fn push_str(out: &mut String, s: &str) {
    out.push_str(&serde_json::to_string(s).expect("strings always serialize"));
}

/// One dataset line, without the newline.
pub fn window_to_line(w: &ObservationWindow) -> String {
    let mut out = String::with_capacity(64 * (w.obs.len() + w.tte));
    out.push_str("{\"track_id\":");
    push_str(&mut out, &w.track_id);
    let _ = write!(
        out,
        ",\"M\":{},\"tte\":{},\"label\":{},\"image_w\":{},\"image_h\":{},\"obs\":",
        w.last_obs_frame,
        w.tte,
        w.label.as_u8(),
        w.image_w,
        w.image_h
    );
    push_boxes(&mut out, &w.obs);
    out.push_str(",\"target\":");
    match &w.target {
        Some(t) => push_boxes(&mut out, t),
        None => out.push_str("null"),
    }
    out.push('}');
    out
}

pub fn track_to_line(t: &Track) -> String {
    let mut out = String::with_capacity(64 * t.len());
    out.push_str("{\"track_id\":");
    push_str(&mut out, &t.track_id);
    let _ = write!(
        out,
        ",\"first_frame\":{},\"label\":{},\"critical_frame\":{},\"image_w\":{},\"image_h\":{},\"boxes\":",
        t.first_frame,
        t.label.as_u8(),
        t.critical_frame,
        t.image_w,
        t.image_h
    );
    push_boxes(&mut out, &t.boxes);
    out.push('}');
    out
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WindowRecord {
    track_id: String,
    #[serde(rename = "M")]
    m: i64,
    tte: usize,
    label: u8,
    image_w: u32,
    image_h: u32,
    obs: Vec<[f64; 4]>,
    target: Option<Vec<[f64; 4]>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrackRecord {
    track_id: String,
    first_frame: i64,
    label: u8,
    critical_frame: i64,
    image_w: u32,
    image_h: u32,
    boxes: Vec<[f64; 4]>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PieRecord {
    ped_id: String,
    image_w: u32,
    image_h: u32,
    frames: Vec<i64>,
    bbox: Vec<[f64; 4]>,
    crossing: i8,
    #[serde(default)]
    critical_frame: Option<i64>,
}

fn boxes_from(raw: &[[f64; 4]]) -> Result<Vec<BoundingBox>> {
    raw.iter().map(|a| BoundingBox::from_array(*a)).collect()
}

fn window_from_record(r: WindowRecord) -> Result<ObservationWindow> {
    let target = r.target.as_deref().map(boxes_from).transpose()?;
    if let Some(t) = &target {
        if t.len() != r.tte {
            return Err(Error::Data(format!(
                "target has {} boxes but tte is {}",
                t.len(),
                r.tte
            )));
        }
    }
    if r.obs.is_empty() {
        return Err(Error::Data("empty observation".into()));
    }
    Ok(ObservationWindow {
        track_id: r.track_id,
        last_obs_frame: r.m,
        tte: r.tte,
        label: CrossingLabel::from_u8(r.label)?,
        image_w: r.image_w,
        image_h: r.image_h,
        obs: boxes_from(&r.obs)?,
        target,
    })
}

fn track_from_record(r: TrackRecord) -> Result<Track> {
    let track = Track {
        track_id: r.track_id,
        first_frame: r.first_frame,
        boxes: boxes_from(&r.boxes)?,
        label: CrossingLabel::from_u8(r.label)?,
        critical_frame: r.critical_frame,
        image_w: r.image_w,
        image_h: r.image_h,
    };
    track.validate()?;
    Ok(track)
}

fn track_from_pie(r: PieRecord) -> Result<Track> {
    if r.frames.is_empty() || r.frames.len() != r.bbox.len() {
        return Err(Error::Data(format!(
            "{}: {} frames but {} boxes",
            r.ped_id,
            r.frames.len(),
            r.bbox.len()
        )));
    }
    if let Some(pair) = r.frames.windows(2).find(|p| p[1] != p[0] + 1) {
        return Err(Error::Data(format!(
            "{}: frames not consecutive ({} then {})",
            r.ped_id, pair[0], pair[1]
        )));
    }
    let label = match r.crossing {
        1 => CrossingLabel::Crossing,
        0 | -1 => CrossingLabel::NotCrossing,
        other => return Err(Error::Data(format!("{}: crossing = {other}", r.ped_id))),
    };
    let last = *r.frames.last().expect("non-empty");
    let critical_frame = match (label, r.critical_frame) {
        (_, Some(a)) => a,
        (CrossingLabel::NotCrossing, None) => last,
        (CrossingLabel::Crossing, None) => {
            return Err(Error::Data(format!("{}: crosser without critical_frame", r.ped_id)))
        }
    };
    let (w, h) = (r.image_w as f64, r.image_h as f64);
    let boxes = r
        .bbox
        .iter()
        .map(|a| {
            let b = BoundingBox {
                x1: a[0],
                y1: a[1],
                x2: a[2],
                y2: a[3],
            };
            if !b.to_array().iter().all(|v| v.is_finite()) {
                return Err(Error::Data(format!("{}: non-finite box", r.ped_id)));
            }
            Ok(b.clamped(w, h, 1.0).quantized())
        })
        .collect::<Result<Vec<_>>>()?;
    let track = Track {
        track_id: r.ped_id,
        first_frame: r.frames[0],
        boxes,
        label,
        critical_frame,
        image_w: r.image_w,
        image_h: r.image_h,
    };
    track.validate()?;
    Ok(track)
}

fn write_lines<T>(path: &Path, items: &[T], line: impl Fn(&T) -> String) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for item in items {
        writeln!(out, "{}", line(item)).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn read_lines<R, T>(
    path: &Path,
    convert: impl Fn(R) -> Result<T>,
) -> Result<Vec<T>>
where
    R: for<'de> Deserialize<'de>,
{
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let record: R = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        items.push(convert(record).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(items)
}

pub fn write_dataset(path: impl AsRef<Path>, windows: &[ObservationWindow]) -> Result<()> {
    write_lines(path.as_ref(), windows, window_to_line)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<ObservationWindow>> {
    read_lines(path.as_ref(), window_from_record)
}

pub fn write_tracks(path: impl AsRef<Path>, tracks: &[Track]) -> Result<()> {
    write_lines(path.as_ref(), tracks, track_to_line)
}

pub fn read_tracks(path: impl AsRef<Path>) -> Result<Vec<Track>> {
    read_lines(path.as_ref(), track_from_record)
}

/// Reads external annotation records (schema in the module docs). Boxes are
/// clamped to the image and rounded to the dataset grid.
pub fn load_pie_records(path: impl AsRef<Path>) -> Result<Vec<Track>> {
    read_lines(path.as_ref(), track_from_pie)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_window(target: bool) -> ObservationWindow {
        let b = |i: usize| {
            BoundingBox::new(i as f64 + 0.125, 3.5, i as f64 + 10.333333, 40.0).unwrap()
        };
        ObservationWindow {
            track_id: "p\"1".into(),
            last_obs_frame: 57,
            tte: 3,
            label: CrossingLabel::Crossing,
            image_w: 1920,
            image_h: 1080,
            obs: (0..16).map(b).collect(),
            target: target.then(|| (16..19).map(b).collect()),
        }
    }

    #[test]
    fn line_layout() {
        let line = window_to_line(&sample_window(false));
        assert!(line.starts_with(
            "{\"track_id\":\"p\\\"1\",\"M\":57,\"tte\":3,\"label\":1,\"image_w\":1920,\"image_h\":1080,\"obs\":[[0.125000,3.500000,10.333333,40.000000],"
        ));
        assert!(line.ends_with(",\"target\":null}"));
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.jsonl");
        let ws = vec![sample_window(true), sample_window(false)];
        write_dataset(&path, &ws).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), ws);
    }

    #[test]
    fn unknown_field_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.jsonl");
        let mut line = window_to_line(&sample_window(false));
        line.insert_str(1, "\"extra\":1,");
        fs::write(&path, line).unwrap();
        let err = read_dataset(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn pie_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pie.jsonl");
        fs::write(
            &path,
            concat!(
                "{\"ped_id\":\"x\",\"image_w\":100,\"image_h\":50,\"frames\":[4,5,6],",
                "\"bbox\":[[1,1,5,9],[2,1,6,9],[3,1,120,9]],\"crossing\":1,\"critical_frame\":6}\n",
                "{\"ped_id\":\"y\",\"image_w\":100,\"image_h\":50,\"frames\":[1,2],",
                "\"bbox\":[[1,1,5,9],[2,1,6,9]],\"crossing\":-1}\n"
            ),
        )
        .unwrap();
        let tracks = load_pie_records(&path).unwrap();
        assert_eq!(tracks[0].first_frame, 4);
        assert_eq!(tracks[0].boxes[2].x2, 100.0);
        assert_eq!(tracks[1].critical_frame, 2);
        assert_eq!(tracks[1].label, CrossingLabel::NotCrossing);

        fs::write(
            &path,
            "{\"ped_id\":\"z\",\"image_w\":100,\"image_h\":50,\"frames\":[1,3],\"bbox\":[[1,1,5,9],[2,1,6,9]],\"crossing\":0}\n",
        )
        .unwrap();
        assert!(load_pie_records(&path).is_err());
    }
}
