//! Per-frame detector output and MOT Challenge rows.

use alloc::string::ToString;

use crate::error::{invalid, shape_err};
use crate::numerics::Grid;
use crate::{Error, Result};

/// Channel count of identity embedding grids produced by the detector head.
pub const EMBED_DIM: usize = 512;
/// Channel count of visual feature grids.
pub const FEAT_DIM: usize = 256;

/// Everything the detector emits for one frame.
///
/// `prob` is the per-cell foreground probability (`H×W×1`), `boxes` the raw
/// box regression (`H×W×4`), `embed` the identity embedding grid and `feat`
/// the visual feature grid used by the refinement head.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameContainer {
    /// 1-based position in the sequence.
    pub frame_index: u32,
    pub prob: Grid,
    pub boxes: Grid,
    pub embed: Grid,
    pub feat: Grid,
}

impl FrameContainer {
    pub fn new(frame_index: u32, prob: Grid, boxes: Grid, embed: Grid, feat: Grid) -> Result<Self> {
        let frame = Self {
            frame_index,
            prob,
            boxes,
            embed,
            feat,
        };
        frame.validate()?;
        Ok(frame)
    }

    pub fn height(&self) -> usize {
        self.prob.height()
    }

    pub fn width(&self) -> usize {
        self.prob.width()
    }

    pub fn validate(&self) -> Result<()> {
        if self.prob.channels() != 1 {
            return Err(shape_err!("prob must have 1 channel, has {}", self.prob.channels()));
        }
        if self.boxes.channels() != 4 {
            return Err(shape_err!("boxes must have 4 channels, has {}", self.boxes.channels()));
        }
        for (name, g) in [("boxes", &self.boxes), ("embed", &self.embed), ("feat", &self.feat)] {
            if !g.same_spatial(&self.prob) {
                return Err(shape_err!(
                    "{} is {}x{}, prob is {}x{}",
                    name,
                    g.height(),
                    g.width(),
                    self.prob.height(),
                    self.prob.width()
                ));
            }
        }
        for (name, g) in [
            ("prob", &self.prob),
            ("boxes", &self.boxes),
            ("embed", &self.embed),
            ("feat", &self.feat),
        ] {
            if !g.is_finite() {
                return Err(Error::NonFinite(name));
            }
        }
        if self.prob.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid!("prob values must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One row of a MOT Challenge det/gt/results file, in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotBox {
    pub frame: u32,
    /// `-1` for anonymous detections.
    pub id: i64,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub conf: f64,
}

impl MotBox {
    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.h > 0.0) {
            return Err(Error::Invalid(
                "MOT box width and height must be positive".to_string(),
            ));
        }
        Ok(())
    }

    pub fn iou(&self, other: &MotBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        let union = self.w * self.h + other.w * other.h - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }
}

/// A named dense `f32` tensor, as stored in container and weight files.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: alloc::string::String,
    pub dims: alloc::vec::Vec<usize>,
    pub data: alloc::vec::Vec<f32>,
}

impl NamedTensor {
    pub fn new(
        name: impl Into<alloc::string::String>,
        dims: alloc::vec::Vec<usize>,
        data: alloc::vec::Vec<f32>,
    ) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(shape_err!(
                "tensor with dims {:?} needs {} values, got {}",
                dims,
                expected,
                data.len()
            ));
        }
        Ok(Self {
            name: name.into(),
            dims,
            data,
        })
    }

    pub fn from_grid(name: impl Into<alloc::string::String>, grid: &Grid) -> Self {
        Self {
            name: name.into(),
            dims: alloc::vec![grid.height(), grid.width(), grid.channels()],
            data: grid.data().to_vec(),
        }
    }

    pub fn into_grid(self) -> Result<Grid> {
        match self.dims.as_slice() {
            &[h, w, c] => Grid::from_vec(h, w, c, self.data),
            other => Err(shape_err!(
                "tensor {} must be 3-d (H, W, C), has dims {:?}",
                self.name,
                other
            )),
        }
    }
}

impl FrameContainer {
    /// Tensor names used when a frame is stored on disk.
    pub const TENSOR_NAMES: [&'static str; 4] = ["prob", "boxes", "embed", "feat"];

    pub fn to_tensors(&self) -> alloc::vec::Vec<NamedTensor> {
        alloc::vec![
            NamedTensor::from_grid("prob", &self.prob),
            NamedTensor::from_grid("boxes", &self.boxes),
            NamedTensor::from_grid("embed", &self.embed),
            NamedTensor::from_grid("feat", &self.feat),
        ]
    }

    /// Rebuilds a frame from its four named tensors, in any order.
    pub fn from_tensors(frame_index: u32, tensors: alloc::vec::Vec<NamedTensor>) -> Result<Self> {
        let mut slots: [Option<Grid>; 4] = [None, None, None, None];
        for t in tensors {
            let Some(pos) = Self::TENSOR_NAMES.iter().position(|n| *n == t.name) else {
                return Err(invalid!("unexpected tensor {:?} in frame {}", t.name, frame_index));
            };
            if slots[pos].is_some() {
                return Err(invalid!("duplicate tensor {:?} in frame {}", t.name, frame_index));
            }
            slots[pos] = Some(t.into_grid()?);
        }
        let [prob, boxes, embed, feat] = slots;
        let missing = |name: &str| invalid!("frame {} is missing tensor {:?}", frame_index, name);
        Self::new(
            frame_index,
            prob.ok_or_else(|| missing("prob"))?,
            boxes.ok_or_else(|| missing("boxes"))?,
            embed.ok_or_else(|| missing("embed"))?,
            feat.ok_or_else(|| missing("feat"))?,
        )
    }
}
