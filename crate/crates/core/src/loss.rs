//! Adaptive wing heatmap loss and the capacity-balanced batch aggregate.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::capacity::WeightTable;
use crate::frequency::ImagePlane;
use crate::heatmap::HeatmapStack;
use crate::protocol::{DatasetId, ProtocolTable, UnifiedLandmarkId};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("plane shape mismatch: prediction {0}x{1}, target {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("sample {sample}: prediction has {got} planes, needs plane {needed}")]
    MissingPlane { sample: usize, got: usize, needed: usize },
    #[error("sample {sample} is tagged with dataset {dataset}, which the protocol does not define")]
    UnknownDataset { sample: usize, dataset: String },
    #[error("{0} targets but {1} predictions")]
    BatchMismatch(usize, usize),
}

/// Adaptive wing parameters (ω, θ, α, ε).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AWingParams {
    pub omega: f64,
    pub theta: f64,
    pub alpha: f64,
    pub epsilon: f64,
}

impl Default for AWingParams {
    fn default() -> Self {
        Self { omega: 14.0, theta: 0.5, alpha: 2.1, epsilon: 1.0 }
    }
}

impl AWingParams {
    /// Slope `A` and offset `C` of the linear branch for ground-truth value `y`.
    /// They make the two branches meet with matching value and slope at `|Δ| = θ`.
    pub fn linear_coeffs(&self, y: f64) -> (f64, f64) {
        let p = self.alpha - y;
        let t = self.theta / self.epsilon;
        let tp = t.powf(p);
        let a = self.omega * (1.0 / (1.0 + tp)) * p * t.powf(p - 1.0) * (1.0 / self.epsilon);
        let c = self.theta * a - self.omega * (1.0 + tp).ln();
        (a, c)
    }
}

/// Per-pixel loss for target `y` and prediction `y_hat`.
pub fn awing_pixel(y: f64, y_hat: f64, params: &AWingParams) -> f64 {
    let d = (y - y_hat).abs();
    if d < params.theta {
        params.omega * (1.0 + (d / params.epsilon).powf(params.alpha - y)).ln()
    } else {
        let (a, c) = params.linear_coeffs(y);
        a * d - c
    }
}

/// Derivative of [`awing_pixel`] with respect to `y_hat`. At exactly
/// `|Δ| = θ` the linear branch is used.
pub fn awing_pixel_grad(y: f64, y_hat: f64, params: &AWingParams) -> f64 {
    let diff = y_hat - y;
    let d = diff.abs();
    if d == 0.0 {
        return 0.0;
    }
    let sign = diff.signum();
    if d < params.theta {
        let p = params.alpha - y;
        let u = d / params.epsilon;
        let up = u.powf(p);
        // d/dd ln(1 + u^p) = p u^(p-1) / (ε (1 + u^p))
        sign * params.omega * p * u.powf(p - 1.0) / (params.epsilon * (1.0 + up))
    } else {
        sign * params.linear_coeffs(y).0
    }
}

/// Pixel-mean AWing loss of one plane, scaled by `weight`.
pub fn fmb_landmark_loss(
    pred: &ImagePlane,
    gt: &ImagePlane,
    weight: f64,
    params: &AWingParams,
) -> Result<f64, LossError> {
    Ok(weight * raw_plane_loss(pred, gt, params)?)
}

fn raw_plane_loss(pred: &ImagePlane, gt: &ImagePlane, params: &AWingParams) -> Result<f64, LossError> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(LossError::ShapeMismatch(pred.height(), pred.width(), gt.height(), gt.width()));
    }
    let sum: f64 = gt.data().iter().zip(pred.data()).map(|(&y, &p)| awing_pixel(y, p, params)).sum();
    Ok(sum / gt.data().len() as f64)
}

/// Contribution of one unified landmark summed over the batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LandmarkTerm {
    /// Σ of unweighted plane losses.
    pub raw: f64,
    /// Σ of weighted plane losses.
    pub weighted: f64,
    /// Number of pixels that contributed.
    pub pixels: usize,
}

/// Result of [`fmb_batch_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Σ over the dataset's samples of (Σ_j weighted landmark loss) / N_X.
    pub per_dataset: BTreeMap<DatasetId, f64>,
    pub per_unified_landmark: BTreeMap<UnifiedLandmarkId, LandmarkTerm>,
    pub num_samples: usize,
}

impl LossBreakdown {
    /// Total recomputed from the per-dataset entries.
    pub fn total_from_datasets(&self) -> f64 {
        if self.num_samples == 0 {
            return 0.0;
        }
        self.per_dataset.values().sum::<f64>() / self.num_samples as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,key,raw,weighted,pixels\n");
        out.push_str(&format!("total,all,,{},\n", self.total));
        for (ds, v) in &self.per_dataset {
            out.push_str(&format!("dataset,{ds},,{v},\n"));
        }
        for (p, term) in &self.per_unified_landmark {
            out.push_str(&format!("landmark,{p},{},{},{}\n", term.raw, term.weighted, term.pixels));
        }
        out
    }
}

/// Planes of one sample that enter the loss: unified ids annotated by the
/// sample's dataset whose target is present.
fn supervised_planes(
    sample: usize,
    target: &HeatmapStack,
    table: &ProtocolTable,
) -> Result<(DatasetId, Vec<UnifiedLandmarkId>), LossError> {
    let unknown = |name: String| LossError::UnknownDataset { sample, dataset: name };
    let ds = target.dataset.ok_or_else(|| unknown("<untagged>".into()))?;
    let forward = table.forward(ds).map_err(|_| unknown(ds.to_string()))?;
    let planes = forward.iter().copied().filter(|u| target.present.get(u.index()).copied().unwrap_or(false)).collect();
    Ok((ds, planes))
}

/// Balanced batch loss
/// `L = (1/n) Σ_samples (Σ_j w_{f(j)} · mean_pixels AWing) / N_X`,
/// with `N_X` counting the sample's visible landmarks.
///
/// Also returns `dL/dŷ` for every prediction plane when `want_grad` is set.
pub fn fmb_batch_loss_with_grad(
    targets: &[HeatmapStack],
    preds: &[HeatmapStack],
    table: &ProtocolTable,
    weights: &WeightTable,
    params: &AWingParams,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<HeatmapStack>>), LossError> {
    if targets.len() != preds.len() {
        return Err(LossError::BatchMismatch(targets.len(), preds.len()));
    }
    let n = targets.len();
    let mut per_dataset = BTreeMap::new();
    let mut per_landmark: BTreeMap<UnifiedLandmarkId, LandmarkTerm> = BTreeMap::new();
    let mut grads = want_grad.then(|| {
        preds.iter().map(|p| HeatmapStack::zeros(p.num_planes(), p.height, p.width, p.stride)).collect::<Vec<_>>()
    });

    for (s, (target, pred)) in targets.iter().zip(preds).enumerate() {
        let (ds, planes) = supervised_planes(s, target, table)?;
        *per_dataset.entry(ds).or_insert(0.0) += 0.0;
        if planes.is_empty() {
            continue;
        }
        let n_x = planes.len() as f64;
        let mut sample_sum = 0.0;
        for &u in &planes {
            let i = u.index();
            let pred_plane =
                pred.planes.get(i).ok_or(LossError::MissingPlane { sample: s, got: pred.num_planes(), needed: i })?;
            let gt_plane = &target.planes[i];
            let raw = raw_plane_loss(pred_plane, gt_plane, params)?;
            let w = weights.weight(u);
            let weighted = w * raw;
            sample_sum += weighted;
            let term = per_landmark.entry(u).or_default();
            term.raw += raw;
            term.weighted += weighted;
            term.pixels += gt_plane.data().len();

            if let Some(g) = grads.as_mut() {
                let scale = w / (gt_plane.data().len() as f64 * n_x * n as f64);
                let out = &mut g[s].planes[i];
                for ((o, &y), &p) in out.data_mut().iter_mut().zip(gt_plane.data()).zip(pred_plane.data()) {
                    *o = scale * awing_pixel_grad(y, p, params);
                }
                g[s].present[i] = true;
            }
        }
        *per_dataset.get_mut(&ds).expect("inserted above") += sample_sum / n_x;
    }

    let mut breakdown =
        LossBreakdown { total: 0.0, per_dataset, per_unified_landmark: per_landmark, num_samples: n };
    breakdown.total = breakdown.total_from_datasets();
    Ok((breakdown, grads))
}

/// [`fmb_batch_loss_with_grad`] without the gradient.
pub fn fmb_batch_loss(
    targets: &[HeatmapStack],
    preds: &[HeatmapStack],
    table: &ProtocolTable,
    weights: &WeightTable,
    params: &AWingParams,
) -> Result<LossBreakdown, LossError> {
    fmb_batch_loss_with_grad(targets, preds, table, weights, params, false).map(|(b, _)| b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capacity::Beta;
    use crate::heatmap::{encode, LandmarkSet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const P: AWingParams = AWingParams { omega: 14.0, theta: 0.5, alpha: 2.1, epsilon: 1.0 };

    #[test]
    fn awing_scalar_values() {
        assert_eq!(awing_pixel(0.3, 0.3, &P), 0.0);
        let log_branch = 14.0 * (1.0 + 0.5f64.powf(2.1)).ln();
        let (a, c) = P.linear_coeffs(0.0);
        assert!((log_branch - (a * 0.5 - c)).abs() < 1e-12);
        assert!((awing_pixel(0.0, 0.5, &P) - log_branch).abs() < 1e-12);
        assert!((log_branch - 2.9352).abs() < 1e-3, "{log_branch}");
        let v = awing_pixel(1.0, 0.6, &P);
        assert!((v - 14.0 * (1.0 + 0.4f64.powf(1.1)).ln()).abs() < 1e-12);
    }

    #[test]
    fn continuity_at_theta() {
        for y in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let nonlinear = P.omega * (1.0 + (P.theta / P.epsilon).powf(P.alpha - y)).ln();
            let (a, c) = P.linear_coeffs(y);
            assert!((nonlinear - (a * P.theta - c)).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_branches() {
        assert_eq!(awing_pixel_grad(0.4, 0.4, &P), 0.0);
        let (a, _) = P.linear_coeffs(0.2);
        assert_eq!(awing_pixel_grad(0.2, 0.9, &P), a);
        assert_eq!(awing_pixel_grad(0.2, -0.5, &P), -a);
        assert_eq!(awing_pixel_grad(0.0, 0.5, &P), P.linear_coeffs(0.0).0);
        let h = 1e-6;
        let fd = (awing_pixel(0.0, 0.3 + h, &P) - awing_pixel(0.0, 0.3 - h, &P)) / (2.0 * h);
        let g = awing_pixel_grad(0.0, 0.3, &P);
        assert!(((fd - g) / g).abs() < 1e-6);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 100 {
            let y: f64 = rng.random_range(0.0..=1.0);
            let yh: f64 = rng.random_range(-0.5..1.5);
            let d = (y - yh).abs();
            if (d - P.theta).abs() < 1e-4 || d < 1e-3 {
                continue;
            }
            let fd = (awing_pixel(y, yh + h, &P) - awing_pixel(y, yh - h, &P)) / (2.0 * h);
            let g = awing_pixel_grad(y, yh, &P);
            assert!((fd - g).abs() / g.abs().max(1e-12) < 1e-5, "y={y} yh={yh} fd={fd} g={g}");
            checked += 1;
        }
    }

    #[test]
    fn landmark_loss_properties() {
        let gt = ImagePlane::from_vec(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let zero = ImagePlane::zeros(2, 2);
        assert_eq!(fmb_landmark_loss(&gt, &gt, 1.0, &P).unwrap(), 0.0);
        let full = fmb_landmark_loss(&zero, &gt, 1.0, &P).unwrap();
        let expected = (awing_pixel(1.0, 0.0, &P) + 3.0 * awing_pixel(0.0, 0.0, &P)) / 4.0;
        assert_eq!(full, expected);
        assert_eq!(fmb_landmark_loss(&zero, &gt, 0.5, &P).unwrap(), 0.5 * full);
        let wrong = ImagePlane::zeros(3, 2);
        assert!(matches!(fmb_landmark_loss(&wrong, &gt, 1.0, &P), Err(LossError::ShapeMismatch(..))));
    }

    fn sample(table: &ProtocolTable, ds: DatasetId, rng: &mut ChaCha8Rng) -> HeatmapStack {
        let coords = (0..ds.num_landmarks()).map(|_| [rng.random_range(4.0..28.0), rng.random_range(4.0..28.0)]).collect();
        encode(&LandmarkSet::new(ds, coords), table, (32, 32), 4, 1.5).unwrap()
    }

    #[test]
    fn batch_errors() {
        let t = ProtocolTable::default_table();
        let w = WeightTable::build(&t, Beta::default());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = sample(&t, DatasetId::Aflw, &mut rng);
        let short = HeatmapStack::from_planes(vec![ImagePlane::zeros(8, 8); 3], 4);
        assert!(matches!(
            fmb_batch_loss(std::slice::from_ref(&gt), &[short], &t, &w, &P),
            Err(LossError::MissingPlane { sample: 0, .. })
        ));
        let mut untagged = gt.clone();
        untagged.dataset = None;
        assert!(matches!(
            fmb_batch_loss(&[untagged], std::slice::from_ref(&gt), &t, &w, &P),
            Err(LossError::UnknownDataset { .. })
        ));
        let minimal = ProtocolTable::parse("dataset AFLW 1\nmap AFLW 0 0\n").unwrap();
        let mut cofw = HeatmapStack::zeros(124, 8, 8, 4);
        cofw.dataset = Some(DatasetId::Cofw);
        assert!(matches!(
            fmb_batch_loss(&[cofw.clone()], &[cofw], &minimal, &w, &P),
            Err(LossError::UnknownDataset { .. })
        ));
    }

    #[test]
    fn gradient_of_batch_loss() {
        let t = ProtocolTable::default_table();
        let w = WeightTable::build(&t, Beta::default());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gts: Vec<_> = [DatasetId::Cofw, DatasetId::Aflw].iter().map(|&d| sample(&t, d, &mut rng)).collect();
        let mut preds: Vec<_> = gts
            .iter()
            .map(|g| {
                let planes = g
                    .planes
                    .iter()
                    .map(|p| ImagePlane::from_fn(p.height(), p.width(), |r, c| p.get(r, c) * 0.7 + 0.02 * ((r * 3 + c) % 5) as f64))
                    .collect();
                HeatmapStack::from_planes(planes, 4)
            })
            .collect();
        let (_, grads) = fmb_batch_loss_with_grad(&gts, &preds, &t, &w, &P, true).unwrap();
        let grads = grads.unwrap();
        let p = t.map_forward(DatasetId::Aflw, 3).unwrap().index();
        let h = 1e-6;
        for (r, c) in [(2, 2), (5, 1), (7, 7)] {
            let base = preds[1].planes[p].get(r, c);
            preds[1].planes[p].set(r, c, base + h);
            let up = fmb_batch_loss(&gts, &preds, &t, &w, &P).unwrap().total;
            preds[1].planes[p].set(r, c, base - h);
            let down = fmb_batch_loss(&gts, &preds, &t, &w, &P).unwrap().total;
            preds[1].planes[p].set(r, c, base);
            let fd = (up - down) / (2.0 * h);
            let g = grads[1].planes[p].get(r, c);
            assert!((fd - g).abs() <= 1e-6 * g.abs().max(1e-6), "fd={fd} g={g}");
        }
        // planes the dataset does not annotate get no gradient
        let foreign = t.map_forward(DatasetId::W300, 37).unwrap().index();
        assert!(grads[1].planes[foreign].data().iter().all(|&v| v == 0.0));
    }
}
