//! Training losses: penalty-reduced focal loss on heatmaps, L1 size and
//! offset losses read at keypoint cells, per-stage combination, and the
//! two-stage total.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::targets::TargetMaps;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    /// Focal exponent on the prediction.
    pub alpha: f64,
    /// Focal exponent down-weighting soft-target cells.
    pub beta: f64,
    pub lambda_size: f64,
    pub lambda_offset: f64,
    /// (w_LR, w_HR) stage combination weights.
    pub stage_weights: (f64, f64),
    /// Prediction clip before logs.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 2.0,
            beta: 4.0,
            lambda_size: 1.0,
            lambda_offset: 0.1,
            stage_weights: (1.0, 1.0),
            epsilon: 1e-6,
        }
    }
}

/// Per-batch stacked targets plus the derived loss masks.
pub struct BatchTargets<T> {
    /// `[B,C,h,w]` ground-truth heatmap.
    pub heatmap: ArrayD<T>,
    /// `[B,2,h,w]` size targets (stride units).
    pub size_map: ArrayD<T>,
    /// `[B,2,h,w]` offset targets.
    pub offset_map: ArrayD<T>,
    /// `[B,C,h,w]`: 1 at keypoint cells.
    pub pos_mask: ArrayD<T>,
    /// `[B,2,h,w]`: per-cell keypoint multiplicity, broadcast to both
    /// regression channels (collided cells count once per keypoint).
    pub reg_weight: ArrayD<T>,
    /// Total keypoints across the batch.
    pub num_keypoints: usize,
    pub stride: usize,
}

impl<T: Scalar> BatchTargets<T> {
    pub fn stack(targets: &[TargetMaps<T>]) -> Result<Self> {
        let first = targets.first().ok_or_else(|| Error::shape("empty target batch"))?;
        let (c, h, w) = first.heatmap.dim();
        let b = targets.len();
        let mut heatmap = ArrayD::<T>::zeros(IxDyn(&[b, c, h, w]));
        let mut size_map = ArrayD::<T>::zeros(IxDyn(&[b, 2, h, w]));
        let mut offset_map = ArrayD::<T>::zeros(IxDyn(&[b, 2, h, w]));
        let mut pos_mask = ArrayD::<T>::zeros(IxDyn(&[b, c, h, w]));
        let mut reg_weight = ArrayD::<T>::zeros(IxDyn(&[b, 2, h, w]));
        let mut n = 0;
        for (bi, t) in targets.iter().enumerate() {
            if t.heatmap.dim() != (c, h, w) || t.stride != first.stride {
                return Err(Error::shape("mismatched target shapes in batch"));
            }
            for ((ci, y, x), &v) in t.heatmap.indexed_iter() {
                heatmap[[bi, ci, y, x]] = v;
            }
            for ((ci, y, x), &v) in t.size_map.indexed_iter() {
                size_map[[bi, ci, y, x]] = v;
            }
            for ((ci, y, x), &v) in t.offset_map.indexed_iter() {
                offset_map[[bi, ci, y, x]] = v;
            }
            for &(x, y, class) in &t.keypoints {
                pos_mask[[bi, class, y, x]] = T::one();
                for ch in 0..2 {
                    reg_weight[[bi, ch, y, x]] += T::one();
                }
            }
            n += t.num_keypoints;
        }
        Ok(BatchTargets {
            heatmap,
            size_map,
            offset_map,
            pos_mask,
            reg_weight,
            num_keypoints: n,
            stride: first.stride,
        })
    }

    fn norm(&self) -> f64 {
        self.num_keypoints.max(1) as f64
    }
}

/// Penalty-reduced focal loss. Keypoint cells contribute
/// `(1-p)^alpha log p`; all others `(1-y)^beta p^alpha log(1-p)`; the sum is
/// negated and divided by `max(N, 1)`.
pub fn focal_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred_heatmap: Var,
    targets: &BatchTargets<T>,
    cfg: &LossConfig,
) -> Result<Var> {
    if g.shape(pred_heatmap) != targets.heatmap.shape() {
        return Err(Error::shape(format!(
            "focal_loss: pred {:?} vs target {:?}",
            g.shape(pred_heatmap),
            targets.heatmap.shape()
        )));
    }
    let eps = T::c(cfg.epsilon);
    let beta = T::c(cfg.beta);
    let alpha = T::c(cfg.alpha);

    let p = g.clamp(pred_heatmap, eps, T::one() - eps);
    let pos = g.constant(targets.pos_mask.clone());
    // (1-y)^beta is exactly zero at keypoint cells, masking them out.
    let negw = g.constant(targets.heatmap.mapv(|y| (T::one() - y).powf(beta)));

    let one_m = g.one_minus(p);
    let pos_pow = g.powf_const(one_m, alpha);
    let log_p = g.ln(p);
    let pos_term0 = g.mul(pos_pow, log_p)?;
    let pos_term = g.mul(pos_term0, pos)?;

    let neg_pow = g.powf_const(p, alpha);
    let log_1m = g.ln(one_m);
    let neg_term0 = g.mul(neg_pow, log_1m)?;
    let neg_term = g.mul(neg_term0, negw)?;

    let both = g.add(pos_term, neg_term)?;
    let total = g.sum_all(both);
    Ok(g.scale(total, -T::one() / T::c(targets.norm())))
}

fn masked_l1<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: &ArrayD<T>,
    weight: &ArrayD<T>,
    norm: f64,
    what: &str,
) -> Result<Var> {
    if g.shape(pred) != target.shape() {
        return Err(Error::shape(format!(
            "{what}: pred {:?} vs target {:?}",
            g.shape(pred),
            target.shape()
        )));
    }
    let t = g.constant(target.clone());
    let w = g.constant(weight.clone());
    let d = g.sub(pred, t)?;
    let a = g.abs(d);
    let m = g.mul(a, w)?;
    let s = g.sum_all(m);
    Ok(g.scale(s, T::one() / T::c(norm)))
}

/// Mean (over keypoints) L1 distance between predicted and target box
/// extents, read only at keypoint cells.
pub fn size_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred_size: Var,
    targets: &BatchTargets<T>,
) -> Result<Var> {
    masked_l1(g, pred_size, &targets.size_map, &targets.reg_weight, targets.norm(), "size_loss")
}

/// Mean (over keypoints) L1 distance to the fractional sub-cell offsets.
pub fn offset_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred_offset: Var,
    targets: &BatchTargets<T>,
) -> Result<Var> {
    masked_l1(
        g,
        pred_offset,
        &targets.offset_map,
        &targets.reg_weight,
        targets.norm(),
        "offset_loss",
    )
}

/// Maps of one prediction stage, as graph nodes.
pub struct StageMaps {
    pub heatmap: Var,
    pub offset: Var,
    pub size: Var,
}

/// focal + lambda_offset * offset + lambda_size * size.
pub fn stage_loss<T: Scalar>(
    g: &mut Graph<T>,
    stage: &StageMaps,
    targets: &BatchTargets<T>,
    cfg: &LossConfig,
) -> Result<Var> {
    let f = focal_loss(g, stage.heatmap, targets, cfg)?;
    let o = offset_loss(g, stage.offset, targets)?;
    let s = size_loss(g, stage.size, targets)?;
    let ow = g.scale(o, T::c(cfg.lambda_offset));
    let sw = g.scale(s, T::c(cfg.lambda_size));
    let fo = g.add(f, ow)?;
    g.add(fo, sw)
}

/// w_LR * stage_loss(LR) + w_HR * stage_loss(HR).
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    lr: &StageMaps,
    hr: &StageMaps,
    lr_targets: &BatchTargets<T>,
    hr_targets: &BatchTargets<T>,
    cfg: &LossConfig,
) -> Result<Var> {
    let l = stage_loss(g, lr, lr_targets, cfg)?;
    let h = stage_loss(g, hr, hr_targets, cfg)?;
    let lw = g.scale(l, T::c(cfg.stage_weights.0));
    let hw = g.scale(h, T::c(cfg.stage_weights.1));
    g.add(lw, hw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{make_targets, BoxAnnotation};
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_target(heat: Vec<f64>, kps: Vec<(usize, usize)>, h: usize, w: usize) -> BatchTargets<f64> {
        let heatmap = ndarray::Array3::from_shape_vec((1, h, w), heat).unwrap();
        let mut t = TargetMaps {
            heatmap,
            size_map: ndarray::Array3::zeros((2, h, w)),
            offset_map: ndarray::Array3::zeros((2, h, w)),
            keypoints: kps.iter().map(|&(x, y)| (x, y, 0)).collect(),
            stride: 4,
            num_keypoints: kps.len(),
        };
        t.num_keypoints = t.keypoints.len();
        BatchTargets::stack(std::slice::from_ref(&t)).unwrap()
    }

    /// Direct per-pixel evaluation of the focal loss definition.
    fn focal_oracle(pred: &ArrayD<f64>, gt: &ArrayD<f64>, alpha: f64, beta: f64, n: usize) -> f64 {
        let mut sum = 0.0;
        for (p, y) in pred.iter().zip(gt.iter()) {
            let p = p.clamp(1e-6, 1.0 - 1e-6);
            if *y == 1.0 {
                sum += (1.0 - p).powf(alpha) * p.ln();
            } else {
                sum += (1.0 - y).powf(beta) * p.powf(alpha) * (1.0 - p).ln();
            }
        }
        -sum / n.max(1) as f64
    }

    #[test]
    fn focal_two_by_two_hand_case() {
        // gt = [[1,0],[0,0]], pred = 0.5 everywhere, alpha 2, beta 4, N = 1.
        let t = single_target(vec![1.0, 0.0, 0.0, 0.0], vec![(0, 0)], 2, 2);
        let pred = ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 0.5);
        let mut g = Graph::<f64>::new();
        let pv = g.constant(pred.clone());
        let loss = focal_loss(&mut g, pv, &t, &LossConfig::default()).unwrap();
        let got = g.scalar_value(loss);
        assert!((got - 0.6931).abs() < 1e-4, "{got}");
        let oracle = focal_oracle(&pred, &t.heatmap, 2.0, 4.0, 1);
        assert!((got - oracle).abs() < 1e-9);
    }

    #[test]
    fn focal_matches_oracle_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let boxes: Vec<BoxAnnotation> = (0..6)
            .map(|i| BoxAnnotation::new(4.0 + 9.0 * i as f64, 3.0 + 7.0 * (i % 3) as f64, 8.0, 10.0))
            .collect();
        let tm = make_targets::<f64>(&boxes, 64, 64, 1, 4).unwrap();
        let n = tm.num_keypoints;
        let t = BatchTargets::stack(std::slice::from_ref(&tm)).unwrap();
        let pred = ArrayD::from_shape_vec(
            IxDyn(&[1, 1, 16, 16]),
            (0..256).map(|_| rng.random_range(0.01..0.99)).collect(),
        )
        .unwrap();
        let mut g = Graph::<f64>::new();
        let pv = g.constant(pred.clone());
        let loss = focal_loss(&mut g, pv, &t, &LossConfig::default()).unwrap();
        let oracle = focal_oracle(&pred, &t.heatmap, 2.0, 4.0, n);
        assert!((g.scalar_value(loss) - oracle).abs() < 1e-9);
    }

    #[test]
    fn focal_near_perfect_prediction_is_tiny_and_empty_image_is_finite() {
        let t = single_target(vec![1.0, 0.0, 0.0, 0.0], vec![(0, 0)], 2, 2);
        let pred = t.heatmap.mapv(|y: f64| if y == 1.0 { 1.0 - 1e-6 } else { 1e-6 });
        let mut g = Graph::<f64>::new();
        let pv = g.constant(pred);
        let loss = focal_loss(&mut g, pv, &t, &LossConfig::default()).unwrap();
        assert!(g.scalar_value(loss) < 1e-3);

        let empty = single_target(vec![0.0; 4], vec![], 2, 2);
        let pred = ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 0.5);
        let pv = g.constant(pred);
        let loss = focal_loss(&mut g, pv, &empty, &LossConfig::default()).unwrap();
        assert!(g.scalar_value(loss).is_finite());
    }

    #[test]
    fn focal_is_monotone_toward_one_at_keypoints() {
        let t = single_target(vec![1.0, 0.0, 0.0, 0.0], vec![(0, 0)], 2, 2);
        let mut last = f64::INFINITY;
        for p in [0.1, 0.3, 0.5, 0.7, 0.9, 0.99] {
            let mut pred = ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 0.2);
            pred[[0, 0, 0, 0]] = p;
            let mut g = Graph::<f64>::new();
            let pv = g.constant(pred);
            let loss = focal_loss(&mut g, pv, &t, &LossConfig::default()).unwrap();
            let v = g.scalar_value(loss);
            assert!(v <= last + 1e-12, "loss rose when moving p to {p}");
            assert!(v >= 0.0);
            last = v;
        }
    }

    #[test]
    fn size_loss_hand_case_and_empty() {
        // One keypoint, pred (10, 8) vs target (12, 5) -> |10-12| + |8-5| = 5.
        let boxes = [BoxAnnotation::new(14.0, 34.0, 48.0, 20.0)];
        let tm: TargetMaps<f64> = {
            let mut tm = make_targets(&boxes, 64, 64, 1, 4).unwrap();
            // Overwrite the size target to exactly (12, 5) at the cell.
            let (x, y, _) = tm.keypoints[0];
            tm.size_map[[0, y, x]] = 12.0;
            tm.size_map[[1, y, x]] = 5.0;
            tm
        };
        let (x, y, _) = tm.keypoints[0];
        let t = BatchTargets::stack(std::slice::from_ref(&tm)).unwrap();
        let mut pred = ArrayD::<f64>::zeros(IxDyn(&[1, 2, 16, 16]));
        pred[[0, 0, y, x]] = 10.0;
        pred[[0, 1, y, x]] = 8.0;
        let mut g = Graph::<f64>::new();
        let pv = g.constant(pred.clone());
        let loss = size_loss(&mut g, pv, &t).unwrap();
        assert!((g.scalar_value(loss) - 5.0).abs() < 1e-9);

        // Identical prediction at the keypoint: zero.
        let mut exact = ArrayD::<f64>::zeros(IxDyn(&[1, 2, 16, 16]));
        exact[[0, 0, y, x]] = 12.0;
        exact[[0, 1, y, x]] = 5.0;
        // Values away from keypoints are ignored entirely.
        exact[[0, 0, 0, 0]] = 99.0;
        let pv = g.constant(exact);
        let loss = size_loss(&mut g, pv, &t).unwrap();
        assert_eq!(g.scalar_value(loss), 0.0);

        // N = 0 -> 0.
        let empty = single_target(vec![0.0; 4], vec![], 2, 2);
        let pv = g.constant(ArrayD::from_elem(IxDyn(&[1, 2, 2, 2]), 3.0));
        let loss = size_loss(&mut g, pv, &empty).unwrap();
        assert_eq!(g.scalar_value(loss), 0.0);
    }

    #[test]
    fn offset_loss_hand_cases() {
        // Centers at exact stride multiples, zero prediction -> 0.
        let boxes = [BoxAnnotation::new(8.0, 8.0, 8.0, 8.0)];
        let tm: TargetMaps<f64> = make_targets(&boxes, 64, 64, 1, 4).unwrap();
        let t = BatchTargets::stack(std::slice::from_ref(&tm)).unwrap();
        let mut g = Graph::<f64>::new();
        let pv = g.constant(ArrayD::<f64>::zeros(IxDyn(&[1, 2, 16, 16])));
        let loss = offset_loss(&mut g, pv, &t).unwrap();
        assert_eq!(g.scalar_value(loss), 0.0);

        // Target (0.25, 0.75), prediction zero -> 1.0.
        let boxes = [BoxAnnotation::new(9.0, 11.0, 8.0, 8.0)]; // center (13, 15)
        let tm: TargetMaps<f64> = make_targets(&boxes, 64, 64, 1, 4).unwrap();
        let t = BatchTargets::stack(std::slice::from_ref(&tm)).unwrap();
        let pv = g.constant(ArrayD::<f64>::zeros(IxDyn(&[1, 2, 16, 16])));
        let loss = offset_loss(&mut g, pv, &t).unwrap();
        assert!((g.scalar_value(loss) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn stage_loss_is_weighted_sum_and_total_combines_stages() {
        // Verify the weighted-sum arithmetic with component losses
        // (0.5, 1.0, 2.0) and lambdas (0.1, 1.0): 0.5 + 0.1 + 2.0 = 2.6.
        // Components are produced by constructed predictions.
        let t = single_target(vec![1.0, 0.0, 0.0, 0.0], vec![(0, 0)], 2, 2);
        let cfg = LossConfig::default();

        // Solve for a heatmap prediction giving focal = 0.5 at the keypoint
        // only: -(1-p)^2 ln p = 0.5 with others perfect.
        let mut p_heat = t.heatmap.mapv(|y: f64| if y == 1.0 { 0.0 } else { 1e-6 });
        let target_focal = 0.5f64;
        let mut lo: f64 = 1e-6;
        let mut hi = 1.0 - 1e-6;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let v = -(1.0 - mid).powi(2) * mid.ln();
            if v > target_focal {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        p_heat[[0, 0, 0, 0]] = lo;

        // Offset loss 1.0: target (0,0); predict (0.6, 0.4) at the cell.
        let mut p_off = ArrayD::<f64>::zeros(IxDyn(&[1, 2, 2, 2]));
        p_off[[0, 0, 0, 0]] = 0.6;
        p_off[[0, 1, 0, 0]] = 0.4;
        // Size loss 2.0: target (0,0); predict (1.5, 0.5).
        let mut p_size = ArrayD::<f64>::zeros(IxDyn(&[1, 2, 2, 2]));
        p_size[[0, 0, 0, 0]] = 1.5;
        p_size[[0, 1, 0, 0]] = 0.5;

        let mut g = Graph::<f64>::new();
        let stage = StageMaps {
            heatmap: g.constant(p_heat.clone()),
            offset: g.constant(p_off.clone()),
            size: g.constant(p_size.clone()),
        };
        let loss = stage_loss(&mut g, &stage, &t, &cfg).unwrap();
        assert!((g.scalar_value(loss) - 2.6).abs() < 1e-4, "{}", g.scalar_value(loss));

        // total_loss with stage weights (1,1) adds the two stages.
        let stage2 = StageMaps {
            heatmap: g.constant(p_heat),
            offset: g.constant(p_off),
            size: g.constant(p_size),
        };
        let total = total_loss(&mut g, &stage, &stage2, &t, &t, &cfg).unwrap();
        assert!((g.scalar_value(total) - 5.2).abs() < 2e-4);
    }

    #[test]
    fn lambda_zero_removes_offset_gradient() {
        let t = single_target(vec![1.0, 0.0, 0.0, 0.0], vec![(0, 0)], 2, 2);
        let cfg = LossConfig { lambda_offset: 0.0, ..Default::default() };
        let mut g = Graph::<f64>::new();
        let heat = g.input(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 0.4)).unwrap();
        let off = g.input(ArrayD::from_elem(IxDyn(&[1, 2, 2, 2]), 0.3)).unwrap();
        let size = g.input(ArrayD::from_elem(IxDyn(&[1, 2, 2, 2]), 0.7)).unwrap();
        let stage = StageMaps { heatmap: heat, offset: off, size };
        let loss = stage_loss(&mut g, &stage, &t, &cfg).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(off).unwrap().iter().all(|&v| v == 0.0));
        assert!(g.grad(size).unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn stage_weight_zero_decouples_lr_gradient() {
        let t = single_target(vec![1.0, 0.0, 0.0, 0.0], vec![(0, 0)], 2, 2);
        let cfg = LossConfig { stage_weights: (0.0, 1.0), ..Default::default() };
        let mut g = Graph::<f64>::new();
        let mk = |g: &mut Graph<f64>| -> (StageMaps, Var, Var, Var) {
            let h = g.input(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 0.4)).unwrap();
            let o = g.input(ArrayD::from_elem(IxDyn(&[1, 2, 2, 2]), 0.3)).unwrap();
            let s = g.input(ArrayD::from_elem(IxDyn(&[1, 2, 2, 2]), 0.7)).unwrap();
            (StageMaps { heatmap: h, offset: o, size: s }, h, o, s)
        };
        let (lr, lh, lo, ls) = mk(&mut g);
        let (hr, hh, _, _) = mk(&mut g);
        let loss = total_loss(&mut g, &lr, &hr, &t, &t, &cfg).unwrap();
        g.backward(loss).unwrap();
        for v in [lh, lo, ls] {
            assert!(g.grad(v).unwrap().iter().all(|&x| x == 0.0));
        }
        assert!(g.grad(hh).unwrap().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn perfect_predictions_give_near_zero_total() {
        let boxes = [BoxAnnotation::new(9.0, 11.0, 8.0, 8.0)];
        let tm: TargetMaps<f64> = make_targets(&boxes, 64, 64, 1, 4).unwrap();
        let t = BatchTargets::stack(std::slice::from_ref(&tm)).unwrap();
        let mut g = Graph::<f64>::new();
        let eps: f64 = 1e-6;
        // "Perfect": 1-eps at keypoint cells, eps everywhere else.
        let heat = g.constant(t.heatmap.mapv(|y: f64| if y == 1.0 { 1.0 - eps } else { eps }));
        let off = g.constant(t.offset_map.clone());
        let size = g.constant(t.size_map.clone());
        let stage = StageMaps { heatmap: heat, offset: off, size };
        let loss = total_loss(&mut g, &stage, &stage, &t, &t, &LossConfig::default()).unwrap();
        assert!(g.scalar_value(loss) < 1e-3, "{}", g.scalar_value(loss));
    }

    #[test]
    fn all_losses_are_non_negative_and_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let boxes = [
            BoxAnnotation::new(5.0, 5.0, 10.0, 8.0),
            BoxAnnotation::new(40.0, 30.0, 12.0, 16.0),
        ];
        let tm: TargetMaps<f64> = make_targets(&boxes, 64, 64, 1, 8).unwrap();
        let t = BatchTargets::stack(std::slice::from_ref(&tm)).unwrap();
        let logits: ArrayD<f64> = ArrayD::from_shape_vec(
            IxDyn(&[1, 1, 8, 8]),
            (0..64).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let offp: ArrayD<f64> = ArrayD::from_shape_vec(
            IxDyn(&[1, 2, 8, 8]),
            (0..128).map(|_| rng.random_range(-0.8..0.8)).collect(),
        )
        .unwrap();
        let sizep = offp.mapv(|v: f64| v * 2.0 + 0.1);

        let report = crate::gradcheck::check_groups(
            "stage_loss",
            &[("heat_logits", logits), ("offset", offp), ("size", sizep)],
            1e-5,
            1e-4,
            |g, vals| {
                let hl = g.input(vals[0].clone())?;
                let h = g.sigmoid(hl);
                let o = g.input(vals[1].clone())?;
                let s = g.input(vals[2].clone())?;
                let stage = StageMaps { heatmap: h, offset: o, size: s };
                let loss = stage_loss(g, &stage, &t, &LossConfig::default())?;
                assert!(g.scalar_value(loss) >= 0.0);
                Ok((loss, vec![hl, o, s]))
            },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
