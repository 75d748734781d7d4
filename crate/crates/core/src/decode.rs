//! Prediction decoding: max-pool peak extraction and box reconstruction.

use crate::scalar::Scalar;
use crate::targets::{BoxAnnotation, TargetMaps};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

/// One stage's materialized prediction maps for a single image.
#[derive(Debug, Clone)]
pub struct PredictionTriple<T> {
    /// `[C, h, w]`, sigmoid outputs in (0,1).
    pub heatmap: Array3<T>,
    /// `[2, h, w]` fractional center offsets.
    pub offset_map: Array3<T>,
    /// `[2, h, w]` box extents in stride units.
    pub size_map: Array3<T>,
    pub stride: usize,
}

impl<T: Scalar> PredictionTriple<T> {
    /// Treat rendered ground-truth maps as a perfect prediction.
    pub fn from_targets(t: &TargetMaps<T>) -> Self {
        PredictionTriple {
            heatmap: t.heatmap.clone(),
            offset_map: t.offset_map.clone(),
            size_map: t.size_map.clone(),
            stride: t.stride,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub cx: usize,
    pub cy: usize,
    pub class: usize,
    pub score: f64,
}

/// A cell is a peak iff its value equals the `kernel x kernel` max-pooled
/// value at that cell and exceeds `threshold`. Equal-valued neighbors all
/// qualify (so perfect adjacent keypoints both survive); the deterministic
/// output order is score descending, then lexicographic cell order, truncated
/// to `max_det`.
pub fn extract_peaks<T: Scalar>(
    heatmap: &Array3<T>,
    kernel: usize,
    threshold: f64,
    max_det: usize,
) -> Vec<Peak> {
    let (classes, h, w) = heatmap.dim();
    let r = (kernel / 2) as isize;
    let mut peaks = Vec::new();
    for c in 0..classes {
        for y in 0..h {
            for x in 0..w {
                let v = heatmap[[c, y, x]];
                if v.to_f64_lossy() <= threshold {
                    continue;
                }
                let mut is_peak = true;
                'scan: for dy in -r..=r {
                    for dx in -r..=r {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let ny = y as isize + dy;
                        let nx = x as isize + dx;
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        if heatmap[[c, ny as usize, nx as usize]] > v {
                            is_peak = false;
                            break 'scan;
                        }
                    }
                }
                if is_peak {
                    peaks.push(Peak { cx: x, cy: y, class: c, score: v.to_f64_lossy() });
                }
            }
        }
    }
    peaks.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.cy.cmp(&b.cy))
            .then(a.cx.cmp(&b.cx))
            .then(a.class.cmp(&b.class))
    });
    peaks.truncate(max_det);
    peaks
}

/// Decoded object.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detection {
    /// Center in input-image pixels.
    pub center: (f64, f64),
    pub bbox: BoxAnnotation,
    pub score: f64,
    pub class_id: usize,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct DecodeDiagnostics {
    /// Predicted extents that were non-positive and clamped to one pixel.
    pub clamped_sizes: usize,
}

/// center = (cell + offset) * stride; extents = size * stride, box centered
/// on the refined center. Non-positive extents clamp to one pixel.
pub fn decode_boxes<T: Scalar>(
    peaks: &[Peak],
    pred: &PredictionTriple<T>,
) -> (Vec<Detection>, DecodeDiagnostics) {
    let stride = pred.stride as f64;
    let mut diag = DecodeDiagnostics::default();
    let dets = peaks
        .iter()
        .map(|p| {
            let ox = pred.offset_map[[0, p.cy, p.cx]].to_f64_lossy();
            let oy = pred.offset_map[[1, p.cy, p.cx]].to_f64_lossy();
            let cx = (p.cx as f64 + ox) * stride;
            let cy = (p.cy as f64 + oy) * stride;
            let mut w = pred.size_map[[0, p.cy, p.cx]].to_f64_lossy() * stride;
            let mut h = pred.size_map[[1, p.cy, p.cx]].to_f64_lossy() * stride;
            if w <= 0.0 {
                w = 1.0;
                diag.clamped_sizes += 1;
            }
            if h <= 0.0 {
                h = 1.0;
                diag.clamped_sizes += 1;
            }
            Detection {
                center: (cx, cy),
                bbox: BoxAnnotation {
                    x_min: cx - w / 2.0,
                    y_min: cy - h / 2.0,
                    width: w,
                    height: h,
                    class_id: p.class,
                },
                score: p.score,
                class_id: p.class,
            }
        })
        .collect();
    (dets, diag)
}

/// Convenience: peak extraction plus box decoding with default NMS settings.
pub fn decode<T: Scalar>(
    pred: &PredictionTriple<T>,
    threshold: f64,
    max_det: usize,
) -> (Vec<Detection>, DecodeDiagnostics) {
    let peaks = extract_peaks(&pred.heatmap, 3, threshold, max_det);
    decode_boxes(&peaks, pred)
}
