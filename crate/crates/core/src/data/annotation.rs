//! Annotation file formats.
//!
//! * 300W `.pts`: `version: 1`, `n_points: <k>`, `{`, `k` lines of `x y`
//!   (1-based pixel coordinates), `}`.
//! * Whitespace-separated list files, one face per line, 0-based coordinates:
//!   - WFLW: 98 `x y` pairs, box `x_min y_min x_max y_max`, 6 attribute flags, image path
//!   - COFW: 29 `x y` pairs, 29 visibility bits (1 = visible), image path
//!   - AFLW: 19 `x y` pairs, 19 visibility bits, box, image path

use thiserror::Error;

use crate::heatmap::LandmarkSet;
use crate::metrics::FaceBox;
use crate::protocol::DatasetId;

#[derive(Debug, Error, PartialEq)]
pub enum AnnotationError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("header declares {declared} points but {found} were given")]
    CountMismatch { declared: usize, found: usize },
    #[error("line {line}: expected {expected} fields for {dataset}, found {found}")]
    ColumnCount { line: usize, dataset: DatasetId, expected: usize, found: usize },
    #[error("line {line}, field {field}: `{value}` is not a number")]
    NotNumeric { line: usize, field: usize, value: String },
    #[error("unexpected content after closing brace at line {0}")]
    Trailing(usize),
    #[error("unterminated point block")]
    Unterminated,
}

/// One entry of a list file.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularEntry {
    pub path: String,
    pub landmarks: LandmarkSet,
    pub face_box: FaceBox,
    /// WFLW attribute flags (pose, expression, illumination, make-up, occlusion, blur).
    pub attributes: Vec<u8>,
}

/// Tight box around a set of points.
pub fn landmark_box(coords: &[[f64; 2]]) -> FaceBox {
    coords.iter().fold([f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY], |b, p| {
        [b[0].min(p[0]), b[1].min(p[1]), b[2].max(p[0]), b[3].max(p[1])]
    })
}

fn number(line: usize, field: usize, s: &str) -> Result<f64, AnnotationError> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(AnnotationError::NotNumeric { line, field, value: s.to_string() }),
    }
}

/// Parse a 300W points file into 0-based coordinates.
pub fn parse_pts(text: &str) -> Result<LandmarkSet, AnnotationError> {
    let mut declared = None;
    let mut coords = Vec::new();
    let mut state = 0; // 0 header, 1 inside braces, 2 closed
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let t = raw.trim();
        if t.is_empty() {
            continue;
        }
        let malformed = |msg: &str| AnnotationError::Malformed { line, msg: msg.to_string() };
        match state {
            0 => {
                if let Some(rest) = t.strip_prefix("version:") {
                    rest.trim().parse::<f64>().map_err(|_| malformed("bad version"))?;
                } else if let Some(rest) = t.strip_prefix("n_points:") {
                    declared = Some(rest.trim().parse::<usize>().map_err(|_| malformed("bad n_points"))?);
                } else if t == "{" {
                    if declared.is_none() {
                        return Err(malformed("`{` before n_points header"));
                    }
                    state = 1;
                } else {
                    return Err(malformed(&format!("unexpected header line `{t}`")));
                }
            }
            1 => {
                if t == "}" {
                    state = 2;
                    continue;
                }
                let fields: Vec<&str> = t.split_whitespace().collect();
                if fields.len() != 2 {
                    return Err(malformed("expected `x y`"));
                }
                let x = number(line, 1, fields[0])?;
                let y = number(line, 2, fields[1])?;
                coords.push([x - 1.0, y - 1.0]);
            }
            _ => return Err(AnnotationError::Trailing(line)),
        }
    }
    if state != 2 {
        return Err(AnnotationError::Unterminated);
    }
    let declared = declared.expect("state 2 implies a header");
    if declared != coords.len() {
        return Err(AnnotationError::CountMismatch { declared, found: coords.len() });
    }
    Ok(LandmarkSet::new(DatasetId::W300, coords))
}

/// Inverse of [`parse_pts`].
pub fn write_pts(lms: &LandmarkSet) -> String {
    let mut out = format!("version: 1\nn_points: {}\n{{\n", lms.coords.len());
    for p in &lms.coords {
        out.push_str(&format!("{} {}\n", p[0] + 1.0, p[1] + 1.0));
    }
    out.push_str("}\n");
    out
}

fn expected_columns(ds: DatasetId) -> usize {
    let n = ds.num_landmarks();
    match ds {
        DatasetId::Wflw => 2 * n + 4 + 6 + 1,
        DatasetId::Cofw => 2 * n + n + 1,
        DatasetId::Aflw => 2 * n + n + 4 + 1,
        DatasetId::W300 => 2 * n + 1,
    }
}

/// Parse a list file for `ds`. Blank lines and `#` comments are skipped.
pub fn parse_tabular(text: &str, ds: DatasetId) -> Result<Vec<TabularEntry>, AnnotationError> {
    let n = ds.num_landmarks();
    let expected = expected_columns(ds);
    let mut entries = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split_whitespace().collect();
        if fields.len() != expected {
            return Err(AnnotationError::ColumnCount { line, dataset: ds, expected, found: fields.len() });
        }
        let nums = |range: std::ops::Range<usize>| -> Result<Vec<f64>, AnnotationError> {
            range.map(|i| number(line, i + 1, fields[i])).collect()
        };
        let flat = nums(0..2 * n)?;
        let coords: Vec<[f64; 2]> = flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        let bits = |start: usize| -> Result<Vec<bool>, AnnotationError> {
            (start..start + n)
                .map(|i| match fields[i] {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(AnnotationError::NotNumeric { line, field: i + 1, value: other.to_string() }),
                })
                .collect()
        };
        let (visible, face_box, attributes) = match ds {
            DatasetId::Wflw => {
                let b = nums(2 * n..2 * n + 4)?;
                let attrs = nums(2 * n + 4..2 * n + 10)?.iter().map(|&a| a as u8).collect();
                (vec![true; n], [b[0], b[1], b[2], b[3]], attrs)
            }
            DatasetId::Cofw => (bits(2 * n)?, landmark_box(&coords), Vec::new()),
            DatasetId::Aflw => {
                let b = nums(3 * n..3 * n + 4)?;
                (bits(2 * n)?, [b[0], b[1], b[2], b[3]], Vec::new())
            }
            DatasetId::W300 => (vec![true; n], landmark_box(&coords), Vec::new()),
        };
        entries.push(TabularEntry {
            path: fields[expected - 1].to_string(),
            landmarks: LandmarkSet::with_visibility(ds, coords, visible),
            face_box,
            attributes,
        });
    }
    Ok(entries)
}

/// Format one list-file line; `parse_tabular` reads it back.
pub fn write_tabular_line(entry: &TabularEntry) -> String {
    let lms = &entry.landmarks;
    let mut fields: Vec<String> = lms.coords.iter().flat_map(|p| [p[0].to_string(), p[1].to_string()]).collect();
    let bits = || lms.visible.iter().map(|&v| if v { "1" } else { "0" }.to_string());
    let boxed = || entry.face_box.iter().map(f64::to_string);
    match lms.dataset {
        DatasetId::Wflw => {
            fields.extend(boxed());
            let mut attrs = entry.attributes.clone();
            attrs.resize(6, 0);
            fields.extend(attrs.iter().map(u8::to_string));
        }
        DatasetId::Cofw => fields.extend(bits()),
        DatasetId::Aflw => {
            fields.extend(bits());
            fields.extend(boxed());
        }
        DatasetId::W300 => {}
    }
    fields.push(entry.path.clone());
    fields.join(" ")
}
