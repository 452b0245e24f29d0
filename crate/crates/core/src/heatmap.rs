//! Gaussian heatmap targets and argmax decoding.
//!
//! Coordinates are continuous pixel positions where pixel `i` spans
//! `[i, i + 1)`. Heatmap cell `c` at stride `s` covers input pixels
//! `[c·s, (c+1)·s)` and its center sits at `(c + 0.5)·s`.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::frequency::ImagePlane;
use crate::protocol::{DatasetId, ProtocolError, ProtocolTable, UnifiedLandmarkId};

pub const DEFAULT_STRIDE: usize = 4;
/// Kernel width in heatmap cells.
pub const DEFAULT_KERNEL_SIGMA: f64 = 1.5;

const DUMP_MAGIC: &[u8; 4] = b"UFHM";

#[derive(Debug, Error)]
pub enum HeatmapError {
    #[error("stride must be at least 1")]
    ZeroStride,
    #[error("kernel sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error("landmark set has {got} points but {dataset} has {expected}")]
    LengthMismatch { dataset: DatasetId, got: usize, expected: usize },
    #[error("non-finite landmark coordinate at index {0}")]
    NonFinite(usize),
    #[error("stack has no present plane")]
    NothingPresent,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("bad heatmap dump: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Landmark coordinates of one face in one dataset's local indexing.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub dataset: DatasetId,
    pub coords: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

impl LandmarkSet {
    /// All landmarks visible.
    pub fn new(dataset: DatasetId, coords: Vec<[f64; 2]>) -> Self {
        let visible = vec![true; coords.len()];
        Self { dataset, coords, visible }
    }

    pub fn with_visibility(dataset: DatasetId, coords: Vec<[f64; 2]>, visible: Vec<bool>) -> Self {
        debug_assert_eq!(coords.len(), visible.len());
        Self { dataset, coords, visible }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn num_visible(&self) -> usize {
        self.visible.iter().filter(|v| **v).count()
    }

    /// Checks length against the protocol and finiteness of coordinates.
    pub fn validate(&self, table: &ProtocolTable) -> Result<(), HeatmapError> {
        let expected = table.dataset_size(self.dataset)?;
        if self.coords.len() != expected || self.visible.len() != expected {
            return Err(HeatmapError::LengthMismatch { dataset: self.dataset, got: self.coords.len(), expected });
        }
        if let Some(i) = self.coords.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(HeatmapError::NonFinite(i));
        }
        Ok(())
    }
}

/// One plane per unified landmark at a fixed stride.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub dataset: Option<DatasetId>,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub planes: Vec<ImagePlane>,
    /// Plane carries a supervised landmark (targets) or a prediction.
    pub present: Vec<bool>,
    /// The landmark fell outside the grid and its peak was clamped to the border.
    pub clipped: Vec<bool>,
}

impl HeatmapStack {
    pub fn zeros(num_planes: usize, height: usize, width: usize, stride: usize) -> Self {
        Self {
            dataset: None,
            stride,
            height,
            width,
            planes: vec![ImagePlane::zeros(height, width); num_planes],
            present: vec![false; num_planes],
            clipped: vec![false; num_planes],
        }
    }

    /// Wrap predicted planes; every plane counts as present.
    pub fn from_planes(planes: Vec<ImagePlane>, stride: usize) -> Self {
        let (height, width) = planes.first().map_or((0, 0), |p| (p.height(), p.width()));
        let n = planes.len();
        Self { dataset: None, stride, height, width, planes, present: vec![true; n], clipped: vec![false; n] }
    }

    pub fn num_planes(&self) -> usize {
        self.planes.len()
    }

    /// Write the dump format: `UFHM`, then plane count, height and width as
    /// little-endian u32, then every plane as little-endian f32, row-major.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<(), HeatmapError> {
        w.write_all(DUMP_MAGIC)?;
        for v in [self.planes.len(), self.height, self.width] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for plane in &self.planes {
            for &v in plane.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Read a dump; all planes are flagged present.
    pub fn read_dump<R: Read>(mut r: R, stride: usize) -> Result<Self, HeatmapError> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if &header[..4] != DUMP_MAGIC {
            return Err(HeatmapError::Format("missing UFHM magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        let (n, h, w) = (word(1), word(2), word(3));
        let mut buf = vec![0u8; n * h * w * 4];
        r.read_exact(&mut buf)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(HeatmapError::Format(format!("{} trailing bytes", rest.len())));
        }
        let values: Vec<f64> =
            buf.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
        let planes = values
            .chunks(h * w)
            .map(|c| ImagePlane::from_vec(h, w, c.to_vec()).expect("chunk has h*w values"))
            .collect();
        let mut stack = Self::from_planes(planes, stride);
        stack.height = h;
        stack.width = w;
        Ok(stack)
    }
}

/// Heatmap-grid coordinate of an input-pixel coordinate.
fn to_grid(x: f64, stride: usize) -> f64 {
    x / stride as f64 - 0.5
}

fn from_grid(u: f64, stride: usize) -> f64 {
    (u + 0.5) * stride as f64
}

/// Render targets for a landmark set. Each visible landmark becomes an
/// unnormalized Gaussian with value 1 at the nearest cell, on the plane of its
/// unified id. Landmarks beyond the grid are clamped to the border cell and
/// flagged in `clipped`.
pub fn encode(
    lms: &LandmarkSet,
    table: &ProtocolTable,
    image_size: (usize, usize),
    stride: usize,
    kernel_sigma: f64,
) -> Result<HeatmapStack, HeatmapError> {
    if stride == 0 {
        return Err(HeatmapError::ZeroStride);
    }
    if !(kernel_sigma > 0.0) {
        return Err(HeatmapError::BadSigma(kernel_sigma));
    }
    lms.validate(table)?;
    let (h, w) = (image_size.0.div_ceil(stride), image_size.1.div_ceil(stride));
    let mut stack = HeatmapStack::zeros(table.num_unified(), h, w, stride);
    stack.dataset = Some(lms.dataset);
    let forward = table.forward(lms.dataset)?;
    let two_s2 = 2.0 * kernel_sigma * kernel_sigma;
    // Gaussian terms depend only on integer offsets from the peak.
    let reach = (kernel_sigma * 3.0).ceil() as i64;
    let profile: Vec<f64> = (0..=reach).map(|d| (-((d * d) as f64) / two_s2).exp()).collect();

    for (local, (&[x, y], &vis)) in lms.coords.iter().zip(&lms.visible).enumerate() {
        if !vis {
            continue;
        }
        let plane_idx = forward[local].index();
        let cu = to_grid(x, stride).round();
        let cv = to_grid(y, stride).round();
        let cc = cu.clamp(0.0, (w - 1) as f64) as i64;
        let cr = cv.clamp(0.0, (h - 1) as f64) as i64;
        stack.clipped[plane_idx] = cc as f64 != cu || cr as f64 != cv;
        stack.present[plane_idx] = true;
        let plane = &mut stack.planes[plane_idx];
        for r in (cr - reach).max(0)..=(cr + reach).min(h as i64 - 1) {
            let gy = profile[(r - cr).unsigned_abs() as usize];
            for c in (cc - reach).max(0)..=(cc + reach).min(w as i64 - 1) {
                let gx = profile[(c - cc).unsigned_abs() as usize];
                plane.set(r as usize, c as usize, gx * gy);
            }
        }
    }
    Ok(stack)
}

/// Decoded position of every plane in input-pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedLandmarks {
    pub coords: Vec<[f64; 2]>,
    pub present: Vec<bool>,
    /// False when the plane was all zero and the plane center was returned.
    pub confident: Vec<bool>,
}

impl DecodedLandmarks {
    pub fn get(&self, p: UnifiedLandmarkId) -> [f64; 2] {
        self.coords[p.index()]
    }

    /// Gather the unified predictions into one dataset's local indexing.
    pub fn to_dataset(&self, table: &ProtocolTable, ds: DatasetId) -> Result<LandmarkSet, HeatmapError> {
        let forward = table.forward(ds)?;
        let coords = forward.iter().map(|u| self.coords[u.index()]).collect();
        Ok(LandmarkSet::new(ds, coords))
    }
}

/// Argmax decoding of a single plane with a quarter-cell shift toward the
/// larger neighbour on each axis. Ties resolve to the lowest row, then column.
pub fn decode_plane(plane: &ImagePlane, stride: usize) -> ([f64; 2], bool) {
    let (h, w) = (plane.height(), plane.width());
    let mut best = (0, 0);
    let mut best_v = f64::NEG_INFINITY;
    for r in 0..h {
        for c in 0..w {
            let v = plane.get(r, c);
            if v > best_v {
                best_v = v;
                best = (r, c);
            }
        }
    }
    if best_v <= 0.0 && plane.data().iter().all(|&v| v == 0.0) {
        return ([w as f64 * stride as f64 / 2.0, h as f64 * stride as f64 / 2.0], false);
    }
    let (r, c) = best;
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            plane.get(r as usize, c as usize)
        }
    };
    let shift = |lo: f64, hi: f64| -> f64 {
        if hi > lo {
            0.25
        } else if lo > hi {
            -0.25
        } else {
            0.0
        }
    };
    let (ri, ci) = (r as isize, c as isize);
    let du = shift(at(ri, ci - 1), at(ri, ci + 1));
    let dv = shift(at(ri - 1, ci), at(ri + 1, ci));
    ([from_grid(c as f64 + du, stride), from_grid(r as f64 + dv, stride)], true)
}

/// Decode every plane of a stack.
pub fn decode(stack: &HeatmapStack) -> Result<DecodedLandmarks, HeatmapError> {
    if !stack.present.iter().any(|p| *p) {
        return Err(HeatmapError::NothingPresent);
    }
    let mut coords = Vec::with_capacity(stack.planes.len());
    let mut confident = Vec::with_capacity(stack.planes.len());
    for plane in &stack.planes {
        let (xy, ok) = decode_plane(plane, stack.stride);
        coords.push(xy);
        confident.push(ok);
    }
    Ok(DecodedLandmarks { coords, present: stack.present.clone(), confident })
}
