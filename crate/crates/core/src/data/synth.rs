//! Synthetic stand-ins for the four datasets.
//!
//! A single left/right symmetric 124-point face template is posed by a random
//! similarity transform per image, so every dataset sees the same geometry
//! through its own landmark subset. Images show a bright face ellipse with a
//! small blob at each annotated point.

use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::frequency::{Image, ImagePlane};
use crate::heatmap::LandmarkSet;
use crate::metrics::FaceBox;
use crate::protocol::{DatasetId, ProtocolError, ProtocolTable};

use super::annotation::{landmark_box, write_pts, write_tabular_line, TabularEntry};
use super::imageio::write_image;
use super::{Sample, LIST_FILE};

const TEMPLATE_SEED: u64 = 0x5eed_fa11;
const MIN_SEPARATION: f64 = 0.09;
const OCCLUSION_PROB: f64 = 0.1;

/// `mirror[p]` is the unified id that `p` becomes under a horizontal flip.
pub fn unified_mirror(table: &ProtocolTable) -> Result<Vec<usize>, ProtocolError> {
    let mut mirror: Vec<Option<usize>> = vec![None; table.num_unified()];
    for ds in table.datasets() {
        let fwd = table.forward(ds)?;
        let perm = table.flip_permutation(ds)?;
        for (j, &k) in perm.iter().enumerate() {
            mirror[fwd[j].index()] = Some(fwd[k].index());
        }
    }
    Ok(mirror.into_iter().enumerate().map(|(p, m)| m.unwrap_or(p)).collect())
}

/// Template coordinates in a unit frame: x in [-1, 1] mirrored about 0, y in
/// [-1.2, 1.2]. Fixed for a given table.
pub fn face_template(table: &ProtocolTable) -> Result<Vec<[f64; 2]>, ProtocolError> {
    let mirror = unified_mirror(table)?;
    let mut rng = ChaCha8Rng::seed_from_u64(TEMPLATE_SEED);
    let mut pts: Vec<Option<[f64; 2]>> = vec![None; mirror.len()];
    let mut placed: Vec<[f64; 2]> = Vec::new();
    for p in 0..mirror.len() {
        if pts[p].is_some() {
            continue;
        }
        let on_axis = mirror[p] == p;
        let mut sep = MIN_SEPARATION;
        let candidate = loop {
            let mut found = None;
            for _ in 0..200 {
                let y = rng.random_range(-1.0..1.0);
                let x = if on_axis { 0.0 } else { -rng.random_range(0.08..0.85) * (1.0 - 0.3 * y * y) };
                let c = [x, 1.2 * y];
                let far = |q: &[f64; 2]| ((q[0] - c[0]).powi(2) + (q[1] - c[1]).powi(2)).sqrt() >= sep;
                if placed.iter().all(far) && (on_axis || far(&[-c[0], c[1]])) {
                    found = Some(c);
                    break;
                }
            }
            match found {
                Some(c) => break c,
                None => sep *= 0.8,
            }
        };
        pts[p] = Some(candidate);
        placed.push(candidate);
        if !on_axis {
            let m = [-candidate[0], candidate[1]];
            pts[mirror[p]] = Some(m);
            placed.push(m);
        }
    }
    Ok(pts.into_iter().map(|p| p.expect("every id placed")).collect())
}

/// Draws one synthetic face. Used by the file generator and by tests.
pub struct SynthFace<'a> {
    template: Vec<[f64; 2]>,
    table: &'a ProtocolTable,
    size: usize,
}

impl<'a> SynthFace<'a> {
    pub fn new(table: &'a ProtocolTable, size: usize) -> Result<Self, ProtocolError> {
        Ok(Self { template: face_template(table)?, table, size })
    }

    pub fn template(&self) -> &[[f64; 2]] {
        &self.template
    }

    /// Raw image, landmarks and face box for dataset `ds`.
    pub fn draw<R: Rng + ?Sized>(&self, ds: DatasetId, rng: &mut R) -> Result<(Image, LandmarkSet, FaceBox), ProtocolError> {
        let size = self.size as f64;
        let scale = size * rng.random_range(0.26..0.32);
        let (sn, cs) = rng.random_range(-15f64..15.0).to_radians().sin_cos();
        let center = [size / 2.0 + rng.random_range(-2.0..2.0), size / 2.0 + rng.random_range(-2.0..2.0)];
        let pose = |t: [f64; 2]| [center[0] + scale * (cs * t[0] + sn * t[1]), center[1] + scale * (-sn * t[0] + cs * t[1])];

        let fwd = self.table.forward(ds)?;
        let jitter = 0.01 * scale;
        let coords: Vec<[f64; 2]> = fwd
            .iter()
            .map(|u| {
                let p = pose(self.template[u.index()]);
                [p[0] + rng.random_range(-jitter..jitter), p[1] + rng.random_range(-jitter..jitter)]
            })
            .collect();
        let visible: Vec<bool> = match ds {
            DatasetId::Cofw | DatasetId::Aflw => coords.iter().map(|_| rng.random::<f64>() >= OCCLUSION_PROB).collect(),
            _ => vec![true; coords.len()],
        };

        let tint: [f64; 3] = [rng.random_range(0.9..1.1), rng.random_range(0.8..1.0), rng.random_range(0.7..0.9)];
        let noise_amp = 0.04;
        let mut base = ImagePlane::from_fn(self.size, self.size, |r, c| {
            let (x, y) = (c as f64 + 0.5 - center[0], r as f64 + 0.5 - center[1]);
            let (u, v) = ((cs * x - sn * y) / scale, (sn * x + cs * y) / scale);
            let inside = (u / 1.05).powi(2) + (v / 1.35).powi(2);
            0.15 + 0.35 / (1.0 + (8.0 * (inside - 1.0)).exp())
        });
        for (p, &vis) in coords.iter().zip(&visible) {
            if !vis {
                continue;
            }
            let (r0, r1) = ((p[1] - 3.0).max(0.0) as usize, ((p[1] + 4.0).max(0.0) as usize).min(self.size));
            let (c0, c1) = ((p[0] - 3.0).max(0.0) as usize, ((p[0] + 4.0).max(0.0) as usize).min(self.size));
            for r in r0..r1 {
                for c in c0..c1 {
                    let d2 = (c as f64 + 0.5 - p[0]).powi(2) + (r as f64 + 0.5 - p[1]).powi(2);
                    let v = base.get(r, c) + 0.45 * (-d2 / 1.0).exp();
                    base.set(r, c, v);
                }
            }
        }
        let channels = tint
            .iter()
            .map(|&t| {
                let mut plane = base.clone();
                for v in plane.data_mut() {
                    *v = (*v * t + rng.random_range(-noise_amp..noise_amp)).clamp(0.0, 1.0);
                }
                plane
            })
            .collect();

        let tight = landmark_box(&coords);
        let pad = 0.05 * scale;
        let face_box = [tight[0] - pad, tight[1] - pad, tight[2] + pad, tight[3] + pad];
        Ok((Image::new(channels), LandmarkSet::with_visibility(ds, coords, visible), face_box))
    }

    /// Draw and crop `count` samples for `ds` at `crop` pixels.
    pub fn samples(&self, ds: DatasetId, count: usize, crop: usize, seed: u64) -> Result<Vec<Sample>, ProtocolError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1 + ds.index() as u64);
        (0..count)
            .map(|k| {
                let (img, lms, fb) = self.draw(ds, &mut rng)?;
                Ok(super::augment::crop_sample(&img, &lms, &fb, crop, format!("{ds}_{k:04}")))
            })
            .collect()
    }
}

/// Write `count` synthetic images per dataset under `out/<dataset>/`:
/// `.pts` files beside each image for 300W and a `list.txt` for the rest.
pub fn write_synthetic(out: &Path, table: &ProtocolTable, count: usize, size: usize, seed: u64) -> io::Result<()> {
    let gen = SynthFace::new(table, size).map_err(io::Error::other)?;
    for ds in DatasetId::ALL {
        let dir = out.join(ds.name());
        fs::create_dir_all(&dir)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1 + ds.index() as u64);
        let mut list = String::new();
        for k in 0..count {
            let (img, lms, face_box) = gen.draw(ds, &mut rng).map_err(io::Error::other)?;
            let stem = format!("{ds}_{k:04}");
            let file = format!("{stem}.ppm");
            write_image(&dir.join(&file), &img).map_err(io::Error::other)?;
            if ds == DatasetId::W300 {
                fs::write(dir.join(format!("{stem}.pts")), write_pts(&lms))?;
            } else {
                let attributes = if ds == DatasetId::Wflw { vec![0; 6] } else { Vec::new() };
                let entry = TabularEntry { path: file, landmarks: lms, face_box, attributes };
                list.push_str(&write_tabular_line(&entry));
                list.push('\n');
            }
        }
        if ds != DatasetId::W300 {
            fs::write(dir.join(LIST_FILE), list)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_is_symmetric_and_separated() {
        let t = ProtocolTable::default_table();
        let tpl = face_template(&t).unwrap();
        let mirror = unified_mirror(&t).unwrap();
        assert_eq!(tpl.len(), 124);
        for (p, &m) in mirror.iter().enumerate() {
            assert_eq!(mirror[m], p);
            assert_eq!(tpl[m], [-tpl[p][0], tpl[p][1]]);
        }
        for i in 0..tpl.len() {
            for j in 0..i {
                let d = ((tpl[i][0] - tpl[j][0]).powi(2) + (tpl[i][1] - tpl[j][1]).powi(2)).sqrt();
                assert!(d > 0.02, "{i} {j} {d}");
            }
        }
    }

    #[test]
    fn shared_landmarks_coincide_across_datasets() {
        // with jitter removed the same unified point lands on the same pixel
        let t = ProtocolTable::default_table();
        let g = SynthFace::new(&t, 64).unwrap();
        let (_, w, _) = g.draw(DatasetId::Wflw, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let (_, a, _) = g.draw(DatasetId::W300, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        // outer eye corners: WFLW 60 and 300W 36 share a unified id
        let fw = t.map_forward(DatasetId::Wflw, 60).unwrap();
        let fa = t.map_forward(DatasetId::W300, 36).unwrap();
        assert_eq!(fw, fa);
        let dist = ((w.coords[60][0] - a.coords[36][0]).powi(2) + (w.coords[60][1] - a.coords[36][1]).powi(2)).sqrt();
        assert!(dist < 2.0, "{dist}");
    }

    #[test]
    fn written_files_load_back() {
        let t = ProtocolTable::default_table();
        let dir = tempfile::tempdir().unwrap();
        write_synthetic(dir.path(), &t, 3, 48, 11).unwrap();
        for ds in DatasetId::ALL {
            let raw = super::super::load_raw(&dir.path().join(ds.name()), ds).unwrap();
            assert_eq!(raw.len(), 3);
            assert_eq!(raw[0].landmarks.len(), ds.num_landmarks());
            assert_eq!(raw[0].image.height(), 48);
        }
    }
}
