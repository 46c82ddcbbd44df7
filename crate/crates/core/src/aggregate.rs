//! Fusion of K compensated branch predictions.
//!
//! Branch weights are per landmark: the displacement magnitude a branch
//! applied to that landmark, normalized over branches. The same weights
//! scale the training loss and combine the final prediction.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imaging::NormalizedPoint;
use crate::landmarks::LandmarkSet;
use crate::tps::DisplacementField;

/// `L × K` weights, each row summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    landmarks: usize,
    branches: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    /// Equal weight `1/K` everywhere.
    pub fn uniform(landmarks: usize, branches: usize) -> Self {
        Self {
            landmarks,
            branches,
            data: vec![1.0 / branches as f64; landmarks * branches],
        }
    }

    pub fn landmarks(&self) -> usize {
        self.landmarks
    }

    pub fn branches(&self) -> usize {
        self.branches
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.data[i * self.branches + k]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.branches..(i + 1) * self.branches]
    }
}

/// How displacement magnitudes become weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// Weight grows with displacement.
    #[default]
    Proportional,
    /// Weight grows with `1 / displacement`; zero-displacement branches take
    /// all the weight among themselves.
    Inverse,
}

/// Per-landmark branch weights from the displacement fields that built the
/// branches. Rows where every branch left the landmark in place are uniform.
pub fn branch_scores(displacements: &[DisplacementField], weighting: Weighting) -> Result<ScoreMatrix> {
    let k = displacements.len();
    if k == 0 {
        return Err(Error::Config("need at least one branch".into()));
    }
    let l = displacements[0].len();
    if displacements.iter().any(|d| d.len() != l) {
        return Err(Error::ShapeMismatch("displacement fields differ in length".into()));
    }
    let mut data = Vec::with_capacity(l * k);
    for i in 0..l {
        let mags: Vec<f64> = displacements.iter().map(|d| d.0[i][0].hypot(d.0[i][1])).collect();
        let raw: Vec<f64> = match weighting {
            Weighting::Proportional => mags,
            Weighting::Inverse if mags.contains(&0.0) => {
                mags.iter().map(|&m| if m == 0.0 { 1.0 } else { 0.0 }).collect()
            }
            Weighting::Inverse => mags.iter().map(|m| 1.0 / m).collect(),
        };
        let total: f64 = raw.iter().sum();
        if total > 0.0 {
            data.extend(raw.iter().map(|r| r / total));
        } else {
            data.extend(std::iter::repeat_n(1.0 / k as f64, k));
        }
    }
    Ok(ScoreMatrix {
        landmarks: l,
        branches: k,
        data,
    })
}

fn check_shapes(preds: &[LandmarkSet], sc: &ScoreMatrix) -> Result<()> {
    if preds.len() != sc.branches || preds.iter().any(|p| p.len() != sc.landmarks) {
        return Err(Error::ShapeMismatch(format!(
            "{} branch predictions vs a {}x{} score matrix",
            preds.len(),
            sc.landmarks,
            sc.branches
        )));
    }
    Ok(())
}

/// `(1 / LK) Σ_i Σ_k Sc[i,k] ‖p*_i − p̃_{i,k}‖`.
pub fn aggregation_loss(truth: &LandmarkSet, preds: &[LandmarkSet], sc: &ScoreMatrix) -> Result<f64> {
    check_shapes(preds, sc)?;
    truth.ensure_same_len(&preds[0], "aggregation loss")?;
    let mut total = 0.0;
    for (k, p) in preds.iter().enumerate() {
        for (i, (t, q)) in truth.iter().zip(p.iter()).enumerate() {
            total += sc.get(i, k) * (t.x - q.x).hypot(t.y - q.y);
        }
    }
    Ok(total / (sc.landmarks * sc.branches) as f64)
}

/// Gradient of [`aggregation_loss`] with respect to each branch prediction.
/// The subgradient at `p̃ = p*` is taken as zero.
pub fn aggregation_loss_grad(
    truth: &LandmarkSet,
    preds: &[LandmarkSet],
    sc: &ScoreMatrix,
) -> Result<Vec<Vec<[f64; 2]>>> {
    check_shapes(preds, sc)?;
    truth.ensure_same_len(&preds[0], "aggregation loss")?;
    let norm = 1.0 / (sc.landmarks * sc.branches) as f64;
    Ok(preds
        .iter()
        .enumerate()
        .map(|(k, p)| {
            truth
                .iter()
                .zip(p.iter())
                .enumerate()
                .map(|(i, (t, q))| {
                    let (dx, dy) = (q.x - t.x, q.y - t.y);
                    let r = dx.hypot(dy);
                    if r == 0.0 {
                        [0.0, 0.0]
                    } else {
                        let s = norm * sc.get(i, k) / r;
                        [s * dx, s * dy]
                    }
                })
                .collect()
        })
        .collect())
}

/// `p^f_i = Σ_k Sc[i,k] p̃_{i,k}`.
pub fn final_landmarks(preds: &[LandmarkSet], sc: &ScoreMatrix) -> Result<LandmarkSet> {
    check_shapes(preds, sc)?;
    Ok((0..sc.landmarks)
        .map(|i| {
            if sc.branches == 1 {
                return preds[0][i];
            }
            let (x, y) = preds
                .iter()
                .enumerate()
                .fold((0.0, 0.0), |(x, y), (k, p)| (x + sc.get(i, k) * p[i].x, y + sc.get(i, k) * p[i].y));
            NormalizedPoint::new(x, y)
        })
        .collect())
}

/// Ground truth plus i.i.d. Gaussian noise per coordinate, clamped to the frame.
pub fn perturb_ground_truth<R: Rng + ?Sized>(truth: &LandmarkSet, sigma: f64, rng: &mut R) -> Result<LandmarkSet> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("noise sigma must be finite and nonnegative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(truth.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    Ok(truth
        .iter()
        .map(|p| {
            NormalizedPoint::new(
                (p.x + normal.sample(rng)).clamp(-1.0, 1.0),
                (p.y + normal.sample(rng)).clamp(-1.0, 1.0),
            )
        })
        .collect())
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn field(v: &[[f64; 2]]) -> DisplacementField {
        DisplacementField(v.to_vec())
    }

    #[test]
    fn score_examples() {
        let sc = branch_scores(&[field(&[[0.3, 0.4]]), field(&[[0.6, 0.8]])], Weighting::Proportional).unwrap();
        assert!((sc.get(0, 0) - 1.0 / 3.0).abs() < 1e-15 && (sc.get(0, 1) - 2.0 / 3.0).abs() < 1e-15);

        let same = vec![field(&[[0.1, -0.2]]); 3];
        let sc = branch_scores(&same, Weighting::Proportional).unwrap();
        assert!(sc.row(0).iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let zeros = vec![DisplacementField::zeros(2); 4];
        let sc = branch_scores(&zeros, Weighting::Proportional).unwrap();
        assert!(sc.row(1).iter().all(|&v| v == 0.25));

        let inv = branch_scores(&[field(&[[0.3, 0.4]]), field(&[[0.6, 0.8]])], Weighting::Inverse).unwrap();
        assert!((inv.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        let inv = branch_scores(&[field(&[[0.0, 0.0]]), field(&[[0.6, 0.8]])], Weighting::Inverse).unwrap();
        assert_eq!(inv.row(0), &[1.0, 0.0]);

        assert!(branch_scores(&[], Weighting::Proportional).is_err());
        assert!(branch_scores(&[field(&[[0.0, 0.0]]), DisplacementField::zeros(2)], Weighting::Proportional).is_err());
    }

    #[test]
    fn loss_and_fusion_examples() {
        let truth = LandmarkSet::from_xy(&[[0.0, 0.0]]);
        let preds = [LandmarkSet::from_xy(&[[0.1, 0.0]]), LandmarkSet::from_xy(&[[0.0, 0.2]])];
        let sc = ScoreMatrix {
            landmarks: 1,
            branches: 2,
            data: vec![0.25, 0.75],
        };
        assert!((aggregation_loss(&truth, &preds, &sc).unwrap() - 0.0875).abs() < 1e-15);
        let f = final_landmarks(&preds, &sc).unwrap();
        assert!((f[0].x - 0.025).abs() < 1e-15 && (f[0].y - 0.15).abs() < 1e-15);

        let exact = [truth.clone(), truth.clone()];
        assert_eq!(aggregation_loss(&truth, &exact, &sc).unwrap(), 0.0);
        assert!(aggregation_loss_grad(&truth, &exact, &sc).unwrap().iter().flatten().all(|g| *g == [0.0, 0.0]));
        assert_eq!(final_landmarks(&exact, &sc).unwrap(), truth);
        assert!(aggregation_loss(&truth, &preds[..1], &sc).is_err());
    }

    #[test]
    fn single_branch_is_passed_through() {
        let p = LandmarkSet::from_xy(&[[0.123456789, -0.3], [0.7, 0.1]]);
        let sc = branch_scores(&[field(&[[0.01, 0.0], [0.0, 0.0]])], Weighting::Proportional).unwrap();
        assert_eq!(sc.row(0), &[1.0]);
        assert_eq!(sc.row(1), &[1.0]);
        assert_eq!(final_landmarks(std::slice::from_ref(&p), &sc).unwrap(), p);
    }

    #[test]
    fn noise_statistics() {
        let truth = LandmarkSet::from_xy(&[[0.1, -0.2]]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert_eq!(perturb_ground_truth(&truth, 0.0, &mut rng).unwrap(), truth);
        let n = 100_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let p = perturb_ground_truth(&truth, 0.02, &mut rng).unwrap();
            let d = p[0].x - 0.1;
            s += d;
            s2 += d * d;
        }
        let mean = s / n as f64;
        let std = (s2 / n as f64 - mean * mean).sqrt();
        assert!((std / 0.02 - 1.0).abs() < 0.02);

        let edge = LandmarkSet::from_xy(&[[0.99, -1.0]]);
        for _ in 0..1000 {
            let p = perturb_ground_truth(&edge, 0.5, &mut rng).unwrap();
            assert!(p[0].x.abs() <= 1.0 && p[0].y.abs() <= 1.0);
        }
        assert!(perturb_ground_truth(&truth, -1.0, &mut rng).is_err());
        let again = |seed| perturb_ground_truth(&truth, 0.02, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(again(1), again(1));
    }

    fn instance() -> impl Strategy<Value = (Vec<DisplacementField>, LandmarkSet, Vec<LandmarkSet>)> {
        (1usize..6, 1usize..5).prop_flat_map(|(l, k)| {
            let coord = -1.0f64..1.0;
            let disp = prop::collection::vec(
                prop::collection::vec(prop_oneof![1 => Just([0.0, 0.0]), 4 => [coord.clone(), coord.clone()]], l),
                k,
            );
            let truth = prop::collection::vec([coord.clone(), coord.clone()], l);
            let preds = prop::collection::vec(prop::collection::vec([coord.clone(), coord.clone()], l), k);
            (disp, truth, preds).prop_map(|(d, t, p)| {
                (
                    d.into_iter().map(DisplacementField).collect(),
                    LandmarkSet::from_xy(&t),
                    p.iter().map(|v| LandmarkSet::from_xy(v)).collect(),
                )
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn fusion_matches_brute_force((disp, truth, preds) in instance(), c in 0.1f64..10.0) {
            let sc = branch_scores(&disp, Weighting::Proportional).unwrap();
            let (l, k) = (truth.len(), preds.len());
            for i in 0..l {
                prop_assert!((sc.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(sc.row(i).iter().all(|&v| v >= 0.0));
            }

            let mut brute = 0.0;
            for i in 0..l {
                for kk in 0..k {
                    let (dx, dy) = (truth[i].x - preds[kk][i].x, truth[i].y - preds[kk][i].y);
                    brute += sc.get(i, kk) * (dx * dx + dy * dy).sqrt();
                }
            }
            brute /= (l * k) as f64;
            prop_assert!((aggregation_loss(&truth, &preds, &sc).unwrap() - brute).abs() < 1e-12);

            let fused = final_landmarks(&preds, &sc).unwrap();
            for i in 0..l {
                let (mut x, mut y) = (0.0, 0.0);
                for kk in 0..k {
                    x += sc.get(i, kk) * preds[kk][i].x;
                    y += sc.get(i, kk) * preds[kk][i].y;
                }
                prop_assert!((fused[i].x - x).abs() < 1e-12 && (fused[i].y - y).abs() < 1e-12);
                let xs = preds.iter().map(|p| p[i].x);
                let ys = preds.iter().map(|p| p[i].y);
                prop_assert!(fused[i].x >= xs.clone().fold(f64::INFINITY, f64::min) - 1e-12);
                prop_assert!(fused[i].x <= xs.fold(f64::NEG_INFINITY, f64::max) + 1e-12);
                prop_assert!(fused[i].y >= ys.clone().fold(f64::INFINITY, f64::min) - 1e-12);
                prop_assert!(fused[i].y <= ys.fold(f64::NEG_INFINITY, f64::max) + 1e-12);
            }

            // homogeneity: scaling every error by c scales the loss by c
            let scaled: Vec<LandmarkSet> = preds
                .iter()
                .map(|p| p.iter().zip(truth.iter()).map(|(q, t)| NormalizedPoint::new(t.x + c * (q.x - t.x), t.y + c * (q.y - t.y))).collect())
                .collect();
            let ratio = aggregation_loss(&truth, &scaled, &sc).unwrap();
            prop_assert!((ratio - c * brute).abs() < 1e-9 * (1.0 + c * brute));

            // gradient matches central differences on one coordinate
            let grad = aggregation_loss_grad(&truth, &preds, &sc).unwrap();
            let h = 1e-7;
            let mut plus = preds.clone();
            plus[0][0].x += h;
            let mut minus = preds.clone();
            minus[0][0].x -= h;
            let fd = (aggregation_loss(&truth, &plus, &sc).unwrap() - aggregation_loss(&truth, &minus, &sc).unwrap()) / (2.0 * h);
            let r = (preds[0][0].x - truth[0].x).hypot(preds[0][0].y - truth[0].y);
            if r > 1e-3 {
                prop_assert!((grad[0][0][0] - fd).abs() < 1e-5);
            }
        }
    }
}
