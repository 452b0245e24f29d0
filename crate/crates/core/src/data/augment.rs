//! Face cropping and geometric augmentation.
//!
//! Every geometric operation is an affine map applied identically to the
//! image (by inverse bilinear sampling, zero fill outside) and to the
//! landmark coordinates.

use rand::Rng;

use crate::frequency::{Image, ImagePlane};
use crate::heatmap::LandmarkSet;
use crate::metrics::FaceBox;
use crate::protocol::{ProtocolError, ProtocolTable};

use super::Sample;

/// Full-resolution crop side in pixels.
pub const CROP_SIZE: usize = 480;
/// Fractional enlargement of the face box before cropping.
pub const CROP_MARGIN: f64 = 0.25;

pub const SCALE_RANGE: (f64, f64) = (1.0, 1.25);
pub const ROTATION_PROB: f64 = 0.6;
pub const ROTATION_MAX_DEG: f64 = 30.0;
pub const FLIP_PROB: f64 = 0.5;

/// `p' = M · [x, y, 1]ᵀ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine2 {
    pub m: [[f64; 3]; 2],
}

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2 { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]] };

    pub fn translation(tx: f64, ty: f64) -> Self {
        Affine2 { m: [[1.0, 0.0, tx], [0.0, 1.0, ty]] }
    }

    pub fn scaling(s: f64) -> Self {
        Affine2 { m: [[s, 0.0, 0.0], [0.0, s, 0.0]] }
    }

    /// Counter-clockwise on screen (y axis pointing down).
    pub fn rotation_deg(deg: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        Affine2 { m: [[c, s, 0.0], [-s, c, 0.0]] }
    }

    /// Mirror about the vertical line `x = width / 2`.
    pub fn hflip(width: f64) -> Self {
        Affine2 { m: [[-1.0, 0.0, width], [0.0, 1.0, 0.0]] }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn then_after(&self, other: &Affine2) -> Affine2 {
        let a = &self.m;
        let b = &other.m;
        let mut m = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                m[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c] + if c == 2 { a[r][2] } else { 0.0 };
            }
        }
        Affine2 { m }
    }

    /// Apply `self` about a pivot point.
    pub fn about(&self, cx: f64, cy: f64) -> Affine2 {
        Affine2::translation(cx, cy).then_after(&self.then_after(&Affine2::translation(-cx, -cy)))
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let m = &self.m;
        [m[0][0] * p[0] + m[0][1] * p[1] + m[0][2], m[1][0] * p[0] + m[1][1] * p[1] + m[1][2]]
    }

    pub fn inverse(&self) -> Affine2 {
        let m = &self.m;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
        Affine2 { m: [[a, b, -(a * m[0][2] + b * m[1][2])], [c, d, -(c * m[0][2] + d * m[1][2])]] }
    }
}

fn sample_bilinear(plane: &ImagePlane, x: f64, y: f64) -> f64 {
    // pixel (r, c) has its center at (c + 0.5, r + 0.5)
    let (u, v) = (x - 0.5, y - 0.5);
    let (c0, r0) = (u.floor(), v.floor());
    let (fx, fy) = (u - c0, v - r0);
    let (h, w) = (plane.height() as isize, plane.width() as isize);
    let px = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h || c >= w {
            0.0
        } else {
            plane.get(r as usize, c as usize)
        }
    };
    let (r0, c0) = (r0 as isize, c0 as isize);
    (1.0 - fy) * ((1.0 - fx) * px(r0, c0) + fx * px(r0, c0 + 1)) + fy * ((1.0 - fx) * px(r0 + 1, c0) + fx * px(r0 + 1, c0 + 1))
}

/// Resample `img` onto an `out_h × out_w` grid through the forward map `map`.
pub fn warp_image(img: &Image, map: &Affine2, out_h: usize, out_w: usize) -> Image {
    let inv = map.inverse();
    let channels = img
        .channels
        .iter()
        .map(|plane| {
            ImagePlane::from_fn(out_h, out_w, |r, c| {
                let src = inv.apply([c as f64 + 0.5, r as f64 + 0.5]);
                sample_bilinear(plane, src[0], src[1])
            })
        })
        .collect();
    Image::new(channels)
}

/// Map from source pixels to a `size × size` crop of the face box enlarged by
/// [`CROP_MARGIN`] and squared around its center.
pub fn crop_transform(face_box: &FaceBox, size: usize) -> Affine2 {
    let cx = 0.5 * (face_box[0] + face_box[2]);
    let cy = 0.5 * (face_box[1] + face_box[3]);
    let side = (face_box[2] - face_box[0]).max(face_box[3] - face_box[1]).max(1.0) * (1.0 + CROP_MARGIN);
    let s = size as f64 / side;
    Affine2::scaling(s).then_after(&Affine2::translation(-(cx - side / 2.0), -(cy - side / 2.0)))
}

fn transform_landmarks(lms: &LandmarkSet, map: &Affine2) -> LandmarkSet {
    LandmarkSet::with_visibility(lms.dataset, lms.coords.iter().map(|&p| map.apply(p)).collect(), lms.visible.clone())
}

/// Crop a raw annotated image to `size × size`.
pub fn crop_sample(image: &Image, landmarks: &LandmarkSet, face_box: &FaceBox, size: usize, id: String) -> Sample {
    let map = crop_transform(face_box, size);
    let fb = {
        let a = map.apply([face_box[0], face_box[1]]);
        let b = map.apply([face_box[2], face_box[3]]);
        [a[0], a[1], b[0], b[1]]
    };
    Sample { image: warp_image(image, &map, size, size), landmarks: transform_landmarks(landmarks, &map), face_box: fb, id }
}

/// One draw of the augmentation schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub rotation_deg: Option<f64>,
    pub flip: bool,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams { scale: 1.0, rotation_deg: None, flip: false };

    /// Scale uniform in [1, 1.25]; rotation with probability 0.6, uniform in
    /// ±30°; flip with probability 0.5. Draws happen in that order.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let scale = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
        let rotate = rng.random::<f64>() < ROTATION_PROB;
        let angle = rng.random_range(-ROTATION_MAX_DEG..=ROTATION_MAX_DEG);
        let flip = rng.random::<f64>() < FLIP_PROB;
        Self { scale, rotation_deg: rotate.then_some(angle), flip }
    }

    /// Forward map for a square crop of side `size`, all ops about the crop center.
    pub fn transform(&self, size: usize) -> Affine2 {
        let c = size as f64 / 2.0;
        let mut map = Affine2::scaling(self.scale);
        if let Some(deg) = self.rotation_deg {
            map = Affine2::rotation_deg(deg).then_after(&map);
        }
        let mut map = map.about(c, c);
        if self.flip {
            map = Affine2::hflip(size as f64).then_after(&map);
        }
        map
    }
}

/// Apply `params` to a cropped sample. Flipping also permutes landmark
/// indices with the dataset's flip permutation.
pub fn apply_augment(sample: &Sample, params: &AugmentParams, table: &ProtocolTable) -> Result<Sample, ProtocolError> {
    let (h, w) = (sample.image.height(), sample.image.width());
    let map = params.transform(w);
    let image = warp_image(&sample.image, &map, h, w);
    let moved = transform_landmarks(&sample.landmarks, &map);
    let landmarks = if params.flip {
        let perm = table.flip_permutation(moved.dataset)?;
        LandmarkSet::with_visibility(
            moved.dataset,
            perm.iter().map(|&k| moved.coords[k]).collect(),
            perm.iter().map(|&k| moved.visible[k]).collect(),
        )
    } else {
        moved
    };
    let corners = [
        [sample.face_box[0], sample.face_box[1]],
        [sample.face_box[2], sample.face_box[1]],
        [sample.face_box[0], sample.face_box[3]],
        [sample.face_box[2], sample.face_box[3]],
    ]
    .map(|p| map.apply(p));
    let face_box = super::annotation::landmark_box(&corners);
    Ok(Sample { image, landmarks, face_box, id: sample.id.clone() })
}

/// Draw parameters from `rng` and apply them.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, rng: &mut R, table: &ProtocolTable) -> Result<Sample, ProtocolError> {
    let params = AugmentParams::sample(rng);
    apply_augment(sample, &params, table)
}
