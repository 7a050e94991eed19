use crate::data::NormalizedWindow;
use crate::error::{Error, Result};
use crate::model::BOX_DIM;
use crate::numerics::{Segment, Tensor};

/// Teacher-forcing inputs and targets for the decoder.
///
/// For a window ending at frame M with targets for M+1..=A, the decoder sees
/// the box at M followed by the targets for M+1..A-1, and must output the
/// boxes for M+1..=A, one step ahead of its input.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBatch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub segments: Vec<Segment>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `batch * obs_len x 4`.
    pub x: Tensor,
    pub labels: Vec<f64>,
    pub decoder: Option<DecoderBatch>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn make_batch(windows: &[&NormalizedWindow], with_decoder: bool) -> Result<Batch> {
    let first = windows
        .first()
        .ok_or_else(|| Error::invalid("make_batch", "empty batch"))?;
    let obs_len = first.obs.shape()[0];
    let mut x = Vec::with_capacity(windows.len() * obs_len * BOX_DIM);
    let mut labels = Vec::with_capacity(windows.len());
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut segments = Vec::new();
    for w in windows {
        if w.obs.shape() != [obs_len, BOX_DIM] {
            return Err(Error::Shape {
                op: "make_batch",
                lhs: w.obs.shape().to_vec(),
                rhs: vec![obs_len, BOX_DIM],
            });
        }
        x.extend_from_slice(w.obs.data());
        labels.push(w.label);
        if with_decoder {
            let target = w
                .target
                .as_ref()
                .ok_or_else(|| Error::Data("window without trajectory target".into()))?;
            let c = target.shape()[0];
            if c == 0 {
                return Err(Error::Data("empty trajectory target".into()));
            }
            segments.push(Segment::new(targets.len() / BOX_DIM, c));
            inputs.extend_from_slice(w.obs.row(obs_len - 1));
            inputs.extend_from_slice(&target.data()[..(c - 1) * BOX_DIM]);
            targets.extend_from_slice(target.data());
        }
    }
    let decoder = if with_decoder {
        let rows = targets.len() / BOX_DIM;
        Some(DecoderBatch {
            inputs: Tensor::new(vec![rows, BOX_DIM], inputs)?,
            targets: Tensor::new(vec![rows, BOX_DIM], targets)?,
            segments,
        })
    } else {
        None
    };
    Ok(Batch {
        x: Tensor::new(vec![windows.len() * obs_len, BOX_DIM], x)?,
        labels,
        decoder,
    })
}
