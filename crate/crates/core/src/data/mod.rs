//! Annotation loading, cropping, augmentation, batch sampling and synthetic data.
//!
//! On-disk layout of one dataset directory: either a `list.txt` in the
//! dataset's list-file schema (image paths relative to the directory), or,
//! for 300W, `.pts` files next to images with the same stem.

pub mod annotation;
pub mod augment;
pub mod imageio;
pub mod sampler;
pub mod synth;

use std::fs;
use std::io;
use std::path::Path;

use crate::frequency::Image;
use crate::heatmap::LandmarkSet;
use crate::metrics::FaceBox;
use crate::protocol::DatasetId;

pub use annotation::{parse_pts, parse_tabular, AnnotationError, TabularEntry};
pub use augment::{apply_augment, augment, crop_sample, AugmentParams, CROP_SIZE};
pub use sampler::{MixedBatch, MixedBatchSampler, SamplerError};
pub use synth::{write_synthetic, SynthFace};

pub const LIST_FILE: &str = "list.txt";

/// An image with its annotation. After [`crop_sample`] the image is square
/// and landmark coordinates are in crop pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub landmarks: LandmarkSet,
    pub face_box: FaceBox,
    pub id: String,
}

impl Sample {
    pub fn dataset(&self) -> DatasetId {
        self.landmarks.dataset
    }
}

fn invalid(msg: impl std::fmt::Display) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

fn stem_of(path: &str) -> String {
    Path::new(path).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.to_string())
}

/// Annotations only, without reading images. Entries are sorted by path for
/// `.pts` directories and kept in file order for list files.
pub fn load_annotations(dir: &Path, ds: DatasetId) -> io::Result<Vec<TabularEntry>> {
    let list = dir.join(LIST_FILE);
    if list.exists() {
        let text = fs::read_to_string(&list)?;
        return parse_tabular(&text, ds).map_err(|e| invalid(format!("{}: {e}", list.display())));
    }
    if ds != DatasetId::W300 {
        return Err(invalid(format!("{} not found", list.display())));
    }
    let mut pts: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pts"))
        .collect();
    pts.sort();
    pts.iter()
        .map(|p| {
            let text = fs::read_to_string(p)?;
            let landmarks = parse_pts(&text).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
            let image = ["ppm", "pgm", "pnm"]
                .iter()
                .map(|ext| p.with_extension(ext))
                .find(|c| c.exists())
                .ok_or_else(|| invalid(format!("no image next to {}", p.display())))?;
            Ok(TabularEntry {
                path: image.file_name().unwrap().to_string_lossy().into_owned(),
                face_box: annotation::landmark_box(&landmarks.coords),
                landmarks,
                attributes: Vec::new(),
            })
        })
        .collect()
}

/// Uncropped samples with their images.
pub fn load_raw(dir: &Path, ds: DatasetId) -> io::Result<Vec<Sample>> {
    load_annotations(dir, ds)?
        .into_iter()
        .map(|e| {
            let image = imageio::read_image(&dir.join(&e.path)).map_err(invalid)?;
            Ok(Sample { image, landmarks: e.landmarks, face_box: e.face_box, id: stem_of(&e.path) })
        })
        .collect()
}

/// Samples cropped to `size × size` around their face boxes.
pub fn load_cropped(dir: &Path, ds: DatasetId, size: usize) -> io::Result<Vec<Sample>> {
    Ok(load_raw(dir, ds)?
        .into_iter()
        .map(|s| crop_sample(&s.image, &s.landmarks, &s.face_box, size, s.id))
        .collect())
}
