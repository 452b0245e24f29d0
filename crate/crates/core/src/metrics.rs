//! Normalized mean error and failure rate.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::heatmap::LandmarkSet;
use crate::protocol::DatasetId;

/// Default failure threshold.
pub const DEFAULT_TAU: f64 = 0.10;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("normalizing distance must be positive, got {0}")]
    ZeroNormalizer(f64),
    #[error("landmark count mismatch: ground truth {0}, prediction {1}")]
    CountMismatch(usize, usize),
    #[error("no visible landmarks to evaluate")]
    NoVisible,
    #[error("failure rate needs at least one image")]
    Empty,
    #[error("tau must be positive, got {0}")]
    BadTau(f64),
    #[error("{kind} normalization needs a face box for {dataset}")]
    MissingBox { kind: NormKind, dataset: DatasetId },
    #[error("unknown normalization `{0}` (expected inter_ocular, inter_pupil or face_diag)")]
    UnknownKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    InterOcular,
    InterPupil,
    FaceDiag,
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::InterOcular => "inter_ocular",
            NormKind::InterPupil => "inter_pupil",
            NormKind::FaceDiag => "face_diag",
        })
    }
}

impl NormKind {
    /// Customary normalization of each benchmark: face size for AFLW,
    /// outer eye corners everywhere else.
    pub fn standard_for(ds: DatasetId) -> Self {
        match ds {
            DatasetId::Aflw => NormKind::FaceDiag,
            _ => NormKind::InterOcular,
        }
    }
}

impl FromStr for NormKind {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inter_ocular" | "io" => Ok(NormKind::InterOcular),
            "inter_pupil" | "ip" => Ok(NormKind::InterPupil),
            "face_diag" | "face_size" | "box" => Ok(NormKind::FaceDiag),
            _ => Err(MetricError::UnknownKind(s.to_string())),
        }
    }
}

/// Axis-aligned face box `[x_min, y_min, x_max, y_max]`.
pub type FaceBox = [f64; 4];

/// How the normalizing distance `d` is obtained for one image.
#[derive(Debug, Clone, PartialEq)]
pub enum NormalizationRule {
    /// Distance between the centroids of two ground-truth anchor groups.
    Anchors { kind: NormKind, left: Vec<usize>, right: Vec<usize> },
    /// Geometric mean of the face box width and height.
    FaceBox(FaceBox),
    Fixed(f64),
}

impl NormalizationRule {
    /// Standard anchors per dataset: outer eye corners for inter-ocular,
    /// pupils or eye-contour centroids for inter-pupil. `face_diag` needs the box.
    pub fn for_dataset(kind: NormKind, ds: DatasetId, face_box: Option<FaceBox>) -> Result<Self, MetricError> {
        let anchors = |l: &[usize], r: &[usize]| NormalizationRule::Anchors { kind, left: l.to_vec(), right: r.to_vec() };
        let boxed = || face_box.map(NormalizationRule::FaceBox).ok_or(MetricError::MissingBox { kind, dataset: ds });
        match (kind, ds) {
            (NormKind::FaceDiag, _) => boxed(),
            (NormKind::InterOcular, DatasetId::W300) => Ok(anchors(&[36], &[45])),
            (NormKind::InterOcular, DatasetId::Wflw) => Ok(anchors(&[60], &[72])),
            (NormKind::InterOcular, DatasetId::Cofw) => Ok(anchors(&[8], &[9])),
            (NormKind::InterOcular, DatasetId::Aflw) => Ok(anchors(&[6], &[11])),
            (NormKind::InterPupil, DatasetId::W300) => Ok(anchors(&[36, 37, 38, 39, 40, 41], &[42, 43, 44, 45, 46, 47])),
            (NormKind::InterPupil, DatasetId::Wflw) => Ok(anchors(&[96], &[97])),
            (NormKind::InterPupil, DatasetId::Cofw) => Ok(anchors(&[16], &[17])),
            (NormKind::InterPupil, DatasetId::Aflw) => Ok(anchors(&[7], &[10])),
        }
    }

    pub fn distance(&self, gt: &LandmarkSet) -> Result<f64, MetricError> {
        let d = match self {
            NormalizationRule::Anchors { left, right, .. } => {
                let centroid = |idx: &[usize]| -> [f64; 2] {
                    let n = idx.len() as f64;
                    let (sx, sy) = idx.iter().fold((0.0, 0.0), |(x, y), &i| (x + gt.coords[i][0], y + gt.coords[i][1]));
                    [sx / n, sy / n]
                };
                if left.iter().chain(right).any(|&i| i >= gt.coords.len()) {
                    return Err(MetricError::CountMismatch(gt.coords.len(), left.len().max(right.len())));
                }
                let (a, b) = (centroid(left), centroid(right));
                (a[0] - b[0]).hypot(a[1] - b[1])
            }
            NormalizationRule::FaceBox(b) => ((b[2] - b[0]) * (b[3] - b[1])).sqrt(),
            NormalizationRule::Fixed(d) => *d,
        };
        if d > 0.0 && d.is_finite() {
            Ok(d)
        } else {
            Err(MetricError::ZeroNormalizer(d))
        }
    }
}

/// Mean Euclidean error over visible landmarks divided by `d`.
pub fn nme(gt: &LandmarkSet, pred: &LandmarkSet, rule: &NormalizationRule) -> Result<f64, MetricError> {
    if gt.coords.len() != pred.coords.len() {
        return Err(MetricError::CountMismatch(gt.coords.len(), pred.coords.len()));
    }
    let d = rule.distance(gt)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((g, p), &vis) in gt.coords.iter().zip(&pred.coords).zip(&gt.visible) {
        if vis {
            sum += (g[0] - p[0]).hypot(g[1] - p[1]);
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricError::NoVisible);
    }
    Ok(sum / (count as f64 * d))
}

/// Fraction of images whose NME is strictly above `tau`.
pub fn failure_rate(per_image_nmes: &[f64], tau: f64) -> Result<f64, MetricError> {
    if per_image_nmes.is_empty() {
        return Err(MetricError::Empty);
    }
    if !(tau > 0.0) {
        return Err(MetricError::BadTau(tau));
    }
    let failures = per_image_nmes.iter().filter(|&&e| e > tau).count();
    Ok(failures as f64 / per_image_nmes.len() as f64)
}

/// One image to evaluate.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub id: String,
    pub gt: LandmarkSet,
    pub pred: LandmarkSet,
    pub rule: NormalizationRule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub per_image: Vec<(String, f64)>,
    pub mean_nme: f64,
    pub failure_rate: f64,
    pub tau: f64,
}

impl EvalSummary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,nme\n");
        for (id, e) in &self.per_image {
            out.push_str(&format!("{id},{e}\n"));
        }
        out.push_str(&format!("# mean_nme,{}\n# failure_rate@{},{}\n", self.mean_nme, self.tau, self.failure_rate));
        out
    }
}

pub fn evaluate(items: &[EvalItem], tau: f64) -> Result<EvalSummary, MetricError> {
    let per_image = items
        .iter()
        .map(|it| nme(&it.gt, &it.pred, &it.rule).map(|e| (it.id.clone(), e)))
        .collect::<Result<Vec<_>, _>>()?;
    let values: Vec<f64> = per_image.iter().map(|(_, e)| *e).collect();
    let fr = failure_rate(&values, tau)?;
    let mean_nme = values.iter().sum::<f64>() / values.len() as f64;
    Ok(EvalSummary { per_image, mean_nme, failure_rate: fr, tau })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(coords: Vec<[f64; 2]>) -> LandmarkSet {
        LandmarkSet::new(DatasetId::W300, coords)
    }

    #[test]
    fn hand_cases() {
        let gt = set(vec![[0.0, 0.0], [10.0, 0.0]]);
        assert_eq!(nme(&gt, &gt, &NormalizationRule::Fixed(10.0)).unwrap(), 0.0);
        let pred = set(vec![[3.0, 0.0], [10.0, 4.0]]);
        assert_eq!(nme(&gt, &pred, &NormalizationRule::Fixed(10.0)).unwrap(), 0.35);
        let one = set(vec![[1.0, 1.0]]);
        let moved = set(vec![[1.0, 8.0]]);
        assert_eq!(nme(&one, &moved, &NormalizationRule::Fixed(7.0)).unwrap(), 1.0);
    }

    #[test]
    fn failure_rate_cases() {
        assert_eq!(failure_rate(&[0.01, 0.05], 0.1).unwrap(), 0.0);
        assert_eq!(failure_rate(&[0.05, 0.12, 0.20], 0.1).unwrap(), 2.0 / 3.0);
        assert_eq!(failure_rate(&[0.5, 0.2], 0.1).unwrap(), 1.0);
        assert_eq!(failure_rate(&[0.1], 0.1).unwrap(), 0.0);
        assert_eq!(failure_rate(&[], 0.1), Err(MetricError::Empty));
    }

    #[test]
    fn errors() {
        let gt = set(vec![[0.0, 0.0]]);
        let two = set(vec![[0.0, 0.0], [1.0, 1.0]]);
        assert_eq!(nme(&gt, &two, &NormalizationRule::Fixed(1.0)), Err(MetricError::CountMismatch(1, 2)));
        assert_eq!(nme(&gt, &gt, &NormalizationRule::Fixed(0.0)), Err(MetricError::ZeroNormalizer(0.0)));
        assert!(matches!(
            NormalizationRule::for_dataset(NormKind::FaceDiag, DatasetId::Aflw, None),
            Err(MetricError::MissingBox { .. })
        ));
    }

    #[test]
    fn invisible_points_are_skipped() {
        let gt = LandmarkSet::with_visibility(DatasetId::Cofw, vec![[0.0, 0.0], [5.0, 5.0]], vec![true, false]);
        let pred = LandmarkSet::new(DatasetId::Cofw, vec![[2.0, 0.0], [50.0, 50.0]]);
        assert_eq!(nme(&gt, &pred, &NormalizationRule::Fixed(4.0)).unwrap(), 0.5);
    }

    #[test]
    fn dataset_anchors() {
        let mut coords = vec![[0.0, 0.0]; 68];
        coords[36] = [10.0, 20.0];
        coords[45] = [40.0, 60.0];
        let gt = set(coords);
        let rule = NormalizationRule::for_dataset(NormKind::InterOcular, DatasetId::W300, None).unwrap();
        assert_eq!(rule.distance(&gt).unwrap(), 50.0);
        let boxed = NormalizationRule::for_dataset(NormKind::FaceDiag, DatasetId::Aflw, Some([0.0, 0.0, 4.0, 9.0])).unwrap();
        assert_eq!(boxed.distance(&gt).unwrap(), 6.0);
        assert_eq!("inter_pupil".parse::<NormKind>().unwrap(), NormKind::InterPupil);
    }

    #[test]
    fn batch_matches_loop() {
        let items: Vec<EvalItem> = (0..5)
            .map(|k| {
                let gt = set(vec![[0.0, 0.0], [1.0 + k as f64, 2.0]]);
                let pred = set(vec![[0.5 * k as f64, 0.1], [1.0, 2.0 + 0.3 * k as f64]]);
                EvalItem { id: format!("img{k}"), gt, pred, rule: NormalizationRule::Fixed(3.0 + k as f64) }
            })
            .collect();
        let summary = evaluate(&items, 0.1).unwrap();
        for (item, (_, e)) in items.iter().zip(&summary.per_image) {
            let mut s = 0.0;
            for i in 0..2 {
                s += (item.gt.coords[i][0] - item.pred.coords[i][0]).hypot(item.gt.coords[i][1] - item.pred.coords[i][1]);
            }
            let NormalizationRule::Fixed(d) = item.rule else { unreachable!() };
            assert_eq!(*e, s / (2.0 * d));
        }
        assert!(summary.to_csv().contains("# mean_nme"));
    }
}
