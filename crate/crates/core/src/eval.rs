//! Counting and detection metrics: absolute error, MAE, and single-class
//! average precision with IoU-thresholded greedy matching.

use crate::decode::Detection;
use crate::error::{Error, Result};
use crate::targets::BoxAnnotation;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub fn absolute_error(pred_count: usize, gt_count: usize) -> usize {
    pred_count.abs_diff(gt_count)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PerImage {
    pub scene_id: String,
    pub gt_count: usize,
    pub pred_count: usize,
    pub ae: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub per_image: Vec<PerImage>,
    pub mae: f64,
    pub ap: f64,
    /// Mean AE over test images sharing the same ground-truth count.
    pub ae_by_count: BTreeMap<usize, f64>,
}

impl EvalReport {
    /// Two-column CSV (`count,mean_ae`) for count-binned curves.
    pub fn ae_by_count_csv(&self) -> String {
        let mut out = String::from("count,mean_ae\n");
        for (count, ae) in &self.ae_by_count {
            out.push_str(&format!("{count},{ae}\n"));
        }
        out
    }
}

/// Pascal-style all-point-interpolated AP for one class: detections across
/// all images sorted by score, matched greedily (best unmatched IoU >=
/// threshold) within their image.
fn average_precision(
    detections: &[(usize, Detection)],
    gts: &[Vec<BoxAnnotation>],
    iou_threshold: f64,
) -> f64 {
    let total_gt: usize = gts.iter().map(|g| g.len()).sum();
    if total_gt == 0 {
        return if detections.is_empty() { 1.0 } else { 0.0 };
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .1
            .score
            .partial_cmp(&detections[a].1.score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(order.len());
    for &di in &order {
        let (img, det) = &detections[di];
        let mut best = (0.0f64, None);
        for (gi, gt) in gts[*img].iter().enumerate() {
            if matched[*img][gi] {
                continue;
            }
            let iou = det.bbox.iou(gt);
            if iou > best.0 {
                best = (iou, Some(gi));
            }
        }
        if best.0 >= iou_threshold {
            matched[*img][best.1.unwrap()] = true;
            tp.push(true);
        } else {
            tp.push(false);
        }
    }
    // Precision-recall curve with the interpolated (envelope) precision.
    let mut cum_tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(tp.len());
    for (i, &t) in tp.iter().enumerate() {
        if t {
            cum_tp += 1;
        }
        let recall = cum_tp as f64 / total_gt as f64;
        let precision = cum_tp as f64 / (i + 1) as f64;
        points.push((recall, precision));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        let (r, _) = points[i];
        if r > prev_recall {
            let max_p = points[i..]
                .iter()
                .map(|&(_, p)| p)
                .fold(0.0, f64::max);
            ap += (r - prev_recall) * max_p;
            prev_recall = r;
        }
    }
    ap
}

/// Score detections against ground truth. The count used for AE/MAE is the
/// number of detections at or above `score_threshold`; AP uses every
/// detection provided. Image ids must match one-to-one.
pub fn evaluate(
    detections: &[(String, Vec<Detection>)],
    ground_truth: &[(String, Vec<BoxAnnotation>)],
    iou_threshold: f64,
    score_threshold: f64,
) -> Result<EvalReport> {
    if ground_truth.is_empty() {
        return Err(Error::eval("no scenes"));
    }
    let det_ids: std::collections::BTreeSet<&str> =
        detections.iter().map(|(id, _)| id.as_str()).collect();
    let gt_ids: std::collections::BTreeSet<&str> =
        ground_truth.iter().map(|(id, _)| id.as_str()).collect();
    if det_ids != gt_ids || detections.len() != ground_truth.len() {
        let missing: Vec<&&str> = gt_ids.symmetric_difference(&det_ids).collect();
        return Err(Error::eval(format!("unmatched image ids: {missing:?}")));
    }
    let by_id: std::collections::HashMap<&str, usize> = ground_truth
        .iter()
        .enumerate()
        .map(|(i, (id, _))| (id.as_str(), i))
        .collect();

    let mut per_image = Vec::with_capacity(ground_truth.len());
    let mut flat: Vec<(usize, Detection)> = Vec::new();
    let gts: Vec<Vec<BoxAnnotation>> = ground_truth.iter().map(|(_, b)| b.clone()).collect();
    for (id, dets) in detections {
        let img = by_id[id.as_str()];
        let pred_count = dets.iter().filter(|d| d.score >= score_threshold).count();
        let gt_count = gts[img].len();
        per_image.push((
            img,
            PerImage {
                scene_id: id.clone(),
                gt_count,
                pred_count,
                ae: absolute_error(pred_count, gt_count),
            },
        ));
        for d in dets {
            flat.push((img, d.clone()));
        }
    }
    per_image.sort_by_key(|(img, _)| *img);
    let per_image: Vec<PerImage> = per_image.into_iter().map(|(_, p)| p).collect();

    let mae = per_image.iter().map(|p| p.ae as f64).sum::<f64>() / per_image.len() as f64;
    let ap = average_precision(&flat, &gts, iou_threshold);

    let mut groups: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for p in &per_image {
        let e = groups.entry(p.gt_count).or_insert((0, 0));
        e.0 += p.ae;
        e.1 += 1;
    }
    let ae_by_count = groups
        .into_iter()
        .map(|(c, (sum, n))| (c, sum as f64 / n as f64))
        .collect();

    Ok(EvalReport { per_image, mae, ap, ae_by_count })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f64, y: f64, w: f64, h: f64, score: f64) -> Detection {
        Detection {
            center: (x + w / 2.0, y + h / 2.0),
            bbox: BoxAnnotation::new(x, y, w, h),
            score,
            class_id: 0,
        }
    }

    #[test]
    fn absolute_error_cases() {
        assert_eq!(absolute_error(90, 90), 0);
        assert_eq!(absolute_error(93, 90), 3);
        assert_eq!(absolute_error(88, 90), 2);
    }

    #[test]
    fn batch_ae_sums_match_resummation_oracle() {
        let counts = [(10usize, 12usize), (5, 5), (0, 3), (40, 31)];
        let total: usize = counts.iter().map(|&(p, g)| absolute_error(p, g)).sum();
        let oracle: usize = counts.iter().map(|&(p, g)| p.abs_diff(g)).sum();
        assert_eq!(total, oracle);
    }

    #[test]
    fn perfect_detections_score_mae_zero_ap_one() {
        let gt = vec![
            ("a".to_string(), vec![BoxAnnotation::new(10.0, 10.0, 20.0, 20.0)]),
            ("b".to_string(), vec![BoxAnnotation::new(5.0, 5.0, 8.0, 8.0), BoxAnnotation::new(40.0, 40.0, 10.0, 12.0)]),
        ];
        let dets = vec![
            ("a".to_string(), vec![det(10.0, 10.0, 20.0, 20.0, 0.9)]),
            (
                "b".to_string(),
                vec![det(5.0, 5.0, 8.0, 8.0, 0.8), det(40.0, 40.0, 10.0, 12.0, 0.7)],
            ),
        ];
        let r = evaluate(&dets, &gt, 0.5, 0.3).unwrap();
        assert_eq!(r.mae, 0.0);
        assert_eq!(r.ap, 1.0);
        assert_eq!(r.ae_by_count[&1], 0.0);
        assert_eq!(r.ae_by_count[&2], 0.0);
    }

    #[test]
    fn zero_detections_mae_is_mean_count_ap_zero() {
        let gt = vec![
            ("a".to_string(), vec![BoxAnnotation::new(10.0, 10.0, 20.0, 20.0)]),
            ("b".to_string(), vec![BoxAnnotation::new(5.0, 5.0, 8.0, 8.0), BoxAnnotation::new(40.0, 40.0, 10.0, 12.0)]),
        ];
        let dets = vec![("a".to_string(), vec![]), ("b".to_string(), vec![])];
        let r = evaluate(&dets, &gt, 0.5, 0.3).unwrap();
        assert_eq!(r.mae, 1.5);
        assert_eq!(r.ap, 0.0);
    }

    /// Brute-force PR oracle: enumerate every score threshold, compute
    /// precision/recall by greedy matching, integrate the envelope.
    fn ap_oracle(
        detections: &[(usize, Detection)],
        gts: &[Vec<BoxAnnotation>],
        iou_thr: f64,
    ) -> f64 {
        let total_gt: usize = gts.iter().map(|g| g.len()).sum();
        let mut scores: Vec<f64> = detections.iter().map(|(_, d)| d.score).collect();
        scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
        scores.dedup();
        let mut pr: Vec<(f64, f64)> = Vec::new();
        for &thr in &scores {
            let mut kept: Vec<(usize, Detection)> = detections
                .iter()
                .filter(|(_, d)| d.score >= thr)
                .cloned()
                .collect();
            kept.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap());
            let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
            let mut tp = 0usize;
            for (img, d) in &kept {
                let mut best = (0.0, None);
                for (gi, gt) in gts[*img].iter().enumerate() {
                    if matched[*img][gi] {
                        continue;
                    }
                    let iou = d.bbox.iou(gt);
                    if iou > best.0 {
                        best = (iou, Some(gi));
                    }
                }
                if best.0 >= iou_thr {
                    matched[*img][best.1.unwrap()] = true;
                    tp += 1;
                }
            }
            pr.push((tp as f64 / total_gt as f64, tp as f64 / kept.len() as f64));
        }
        pr.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut ap = 0.0;
        let mut prev_r = 0.0;
        for i in 0..pr.len() {
            let (r, _) = pr[i];
            if r > prev_r {
                let max_p = pr[i..].iter().map(|&(_, p)| p).fold(0.0, f64::max);
                ap += (r - prev_r) * max_p;
                prev_r = r;
            }
        }
        ap
    }

    #[test]
    fn toy_ap_matches_brute_force_pr_oracle() {
        // 3 images, one false positive and one false negative.
        let gts = vec![
            vec![BoxAnnotation::new(10.0, 10.0, 10.0, 10.0)],
            vec![BoxAnnotation::new(20.0, 20.0, 10.0, 10.0), BoxAnnotation::new(50.0, 50.0, 10.0, 10.0)],
            vec![BoxAnnotation::new(30.0, 30.0, 12.0, 12.0)],
        ];
        let flat = vec![
            (0usize, det(10.0, 10.0, 10.0, 10.0, 0.95)),
            (1, det(20.5, 20.0, 10.0, 10.0, 0.9)),
            (1, det(80.0, 80.0, 10.0, 10.0, 0.85)), // FP
            (2, det(30.0, 30.5, 12.0, 12.0, 0.6)),
            // second gt of image 1 never detected: FN
        ];
        let got = average_precision(&flat, &gts, 0.5);
        let want = ap_oracle(&flat, &gts, 0.5);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!(got > 0.0 && got < 1.0);
    }

    #[test]
    fn ap_is_monotone_non_increasing_in_iou_threshold() {
        let gts = vec![vec![
            BoxAnnotation::new(10.0, 10.0, 10.0, 10.0),
            BoxAnnotation::new(30.0, 30.0, 10.0, 10.0),
        ]];
        let flat = vec![
            (0usize, det(11.0, 11.0, 10.0, 10.0, 0.9)), // IoU ~0.68
            (0, det(33.0, 30.0, 10.0, 10.0, 0.8)),      // IoU ~0.54
        ];
        let ap50 = average_precision(&flat, &gts, 0.5);
        let ap75 = average_precision(&flat, &gts, 0.75);
        assert!(ap75 <= ap50);
    }

    #[test]
    fn unmatched_ids_error_and_empty_set_errors() {
        let gt = vec![("a".to_string(), vec![])];
        let dets = vec![("b".to_string(), vec![])];
        assert!(evaluate(&dets, &gt, 0.5, 0.3).is_err());
        assert!(evaluate(&[], &[], 0.5, 0.3).is_err());
    }

    #[test]
    fn report_mae_equals_mean_of_ae_column_and_csv_emits() {
        let gt = vec![
            ("a".to_string(), vec![BoxAnnotation::new(10.0, 10.0, 20.0, 20.0)]),
            ("b".to_string(), vec![]),
        ];
        let dets = vec![
            ("a".to_string(), vec![det(10.0, 10.0, 20.0, 20.0, 0.9); 3]),
            ("b".to_string(), vec![]),
        ];
        let r = evaluate(&dets, &gt, 0.5, 0.3).unwrap();
        let mean: f64 =
            r.per_image.iter().map(|p| p.ae as f64).sum::<f64>() / r.per_image.len() as f64;
        assert_eq!(r.mae, mean);
        let csv = r.ae_by_count_csv();
        assert!(csv.starts_with("count,mean_ae\n"));
        assert!(csv.lines().count() >= 2);
    }
}
