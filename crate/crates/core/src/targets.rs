//! Ground-truth rendering: per-stride heatmaps, size maps, and offset maps
//! from box annotations, with peak values pinned to exactly 1.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

/// Axis-aligned box in input-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub x_min: f64,
    pub y_min: f64,
    pub width: f64,
    pub height: f64,
    pub class_id: usize,
}

impl BoxAnnotation {
    pub fn new(x_min: f64, y_min: f64, width: f64, height: f64) -> Self {
        BoxAnnotation { x_min, y_min, width, height, class_id: 0 }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x_min + self.width / 2.0, self.y_min + self.height / 2.0)
    }

    pub fn validate(&self, image_w: usize, image_h: usize) -> Result<()> {
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(Error::annotation(format!(
                "non-positive box extents {}x{}",
                self.width, self.height
            )));
        }
        if self.x_min < 0.0
            || self.y_min < 0.0
            || self.x_min + self.width > image_w as f64
            || self.y_min + self.height > image_h as f64
        {
            return Err(Error::annotation(format!(
                "box ({}, {}, {}, {}) outside {}x{} image",
                self.x_min, self.y_min, self.width, self.height, image_w, image_h
            )));
        }
        Ok(())
    }

    /// Intersection-over-union with another box.
    pub fn iou(&self, other: &BoxAnnotation) -> f64 {
        let x1 = self.x_min.max(other.x_min);
        let y1 = self.y_min.max(other.y_min);
        let x2 = (self.x_min + self.width).min(other.x_min + other.width);
        let y2 = (self.y_min + self.height).min(other.y_min + other.height);
        let inter = (x2 - x1).max(0.0) * (y2 - y1).max(0.0);
        let union = self.width * self.height + other.width * other.height - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// One keypoint to splat onto a heatmap.
#[derive(Debug, Clone, Copy)]
pub struct HeatKeypoint {
    pub cx: usize,
    pub cy: usize,
    pub radius: usize,
    pub class: usize,
}

/// Rendered training targets at one stride.
#[derive(Debug, Clone)]
pub struct TargetMaps<T> {
    /// `[C, H/s, W/s]`, values in [0,1], exactly 1 at keypoint cells.
    pub heatmap: Array3<T>,
    /// `[2, H/s, W/s]`: (w, h) in stride units, set at keypoint cells.
    pub size_map: Array3<T>,
    /// `[2, H/s, W/s]`: fractional (x, y) remainders in [0,1).
    pub offset_map: Array3<T>,
    /// Cell coordinates plus class per annotation, in annotation order.
    /// Duplicate cells stay in the list (collision policy: size/offset are
    /// last-writer-wins, both keypoints still count toward `num_keypoints`).
    pub keypoints: Vec<(usize, usize, usize)>,
    pub stride: usize,
    pub num_keypoints: usize,
}

impl<T: Scalar> TargetMaps<T> {
    /// Number of cells hit by more than one keypoint.
    pub fn collision_count(&self) -> usize {
        let mut cells: Vec<(usize, usize)> = self.keypoints.iter().map(|&(x, y, _)| (x, y)).collect();
        cells.sort_unstable();
        cells.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

/// Smallest integer radius (clamped to >= 1) such that shifting, shrinking,
/// or inflating the box by that many cells keeps IoU with the original at or
/// above `min_overlap`. The three perturbation geometries each give a
/// quadratic; the binding one is the minimum root.
pub fn gaussian_radius(box_w: f64, box_h: f64, min_overlap: f64) -> Result<usize> {
    if !(box_w > 0.0 && box_h > 0.0) {
        return Err(Error::annotation(format!(
            "gaussian_radius: non-positive box {box_w}x{box_h}"
        )));
    }
    if !(min_overlap > 0.0 && min_overlap < 1.0) {
        return Err(Error::config(format!(
            "gaussian_radius: min_overlap {min_overlap} outside (0,1)"
        )));
    }
    let (w, h) = (box_w, box_h);

    // Diagonal shift: overlap (w-r)(h-r), union 2wh - (w-r)(h-r).
    let a1 = 1.0;
    let b1 = h + w;
    let c1 = w * h * (1.0 - min_overlap) / (1.0 + min_overlap);
    let sq1 = (b1 * b1 - 4.0 * a1 * c1).max(0.0).sqrt();
    let r1 = (b1 - sq1) / (2.0 * a1);

    // Both corners inward: overlap (w-2r)(h-2r), union wh.
    let a2 = 4.0;
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - min_overlap) * w * h;
    let sq2 = (b2 * b2 - 4.0 * a2 * c2).max(0.0).sqrt();
    let r2 = (b2 - sq2) / (2.0 * a2);

    // Both corners outward: overlap wh, union (w+2r)(h+2r).
    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (h + w);
    let c3 = (min_overlap - 1.0) * w * h;
    let sq3 = (b3 * b3 - 4.0 * a3 * c3).max(0.0).sqrt();
    let r3 = (-b3 + sq3) / (2.0 * a3);

    let r = r1.min(r2).min(r3);
    Ok((r.floor() as usize).max(1))
}

/// Splat unnormalized Gaussians (sigma = (2r+1)/6) around each keypoint,
/// combining overlaps by elementwise max, then pin keypoint cells to 1.
pub fn render_heatmap<T: Scalar>(
    keypoints: &[HeatKeypoint],
    shape: (usize, usize, usize),
) -> Result<Array3<T>> {
    let (classes, h, w) = shape;
    let mut heat = Array3::<T>::zeros((classes, h, w));
    for kp in keypoints {
        if kp.class >= classes || kp.cx >= w || kp.cy >= h {
            return Err(Error::annotation(format!(
                "keypoint ({}, {}, class {}) outside {classes}x{h}x{w} heatmap",
                kp.cx, kp.cy, kp.class
            )));
        }
        let r = kp.radius as isize;
        let sigma = (2.0 * kp.radius as f64 + 1.0) / 6.0;
        let denom = 2.0 * sigma * sigma;
        for dy in -r..=r {
            let y = kp.cy as isize + dy;
            if y < 0 || y >= h as isize {
                continue;
            }
            for dx in -r..=r {
                let x = kp.cx as isize + dx;
                if x < 0 || x >= w as isize {
                    continue;
                }
                let v = T::c((-((dx * dx + dy * dy) as f64) / denom).exp());
                let cell = &mut heat[[kp.class, y as usize, x as usize]];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
    // Peaks stay at exactly one after filtering.
    for kp in keypoints {
        heat[[kp.class, kp.cy, kp.cx]] = T::one();
    }
    Ok(heat)
}

/// Render all target maps for one scene at the given stride. Map dims are
/// `ceil(H/stride) x ceil(W/stride)`; radii come from `gaussian_radius` on the
/// stride-scaled box (clamped to >= 1 cell) at min_overlap 0.7.
pub fn make_targets<T: Scalar>(
    boxes: &[BoxAnnotation],
    image_w: usize,
    image_h: usize,
    classes: usize,
    stride: usize,
) -> Result<TargetMaps<T>> {
    let mw = image_w.div_ceil(stride);
    let mh = image_h.div_ceil(stride);
    let mut size_map = Array3::<T>::zeros((2, mh, mw));
    let mut offset_map = Array3::<T>::zeros((2, mh, mw));
    let mut keypoints = Vec::with_capacity(boxes.len());
    let mut splats = Vec::with_capacity(boxes.len());
    let mut seen = std::collections::HashSet::new();

    for b in boxes {
        b.validate(image_w, image_h)?;
        let (cx, cy) = b.center();
        let fx = cx / stride as f64;
        let fy = cy / stride as f64;
        let ix = fx.floor() as usize;
        let iy = fy.floor() as usize;
        if ix >= mw || iy >= mh {
            return Err(Error::annotation(format!(
                "center ({cx}, {cy}) maps outside the {mw}x{mh} grid at stride {stride}"
            )));
        }
        if !seen.insert((ix, iy, b.class_id)) {
            log::debug!(
                "keypoint cell collision at ({ix}, {iy}) stride {stride}; later box overwrites size/offset"
            );
        }
        offset_map[[0, iy, ix]] = T::c(fx - ix as f64);
        offset_map[[1, iy, ix]] = T::c(fy - iy as f64);
        size_map[[0, iy, ix]] = T::c(b.width / stride as f64);
        size_map[[1, iy, ix]] = T::c(b.height / stride as f64);
        let radius = gaussian_radius(
            (b.width / stride as f64).max(1.0),
            (b.height / stride as f64).max(1.0),
            0.7,
        )?;
        keypoints.push((ix, iy, b.class_id));
        splats.push(HeatKeypoint { cx: ix, cy: iy, radius, class: b.class_id });
    }

    let heatmap = render_heatmap(&splats, (classes, mh, mw))?;
    let num_keypoints = keypoints.len();
    Ok(TargetMaps { heatmap, size_map, offset_map, keypoints, stride, num_keypoints })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    /// Worst-case IoU after perturbing a (w, h) box by `r` cells under the
    /// three geometries the radius is solved from, computed with plain box
    /// arithmetic (independent of the quadratic solution).
    fn worst_iou(w: f64, h: f64, r: f64) -> f64 {
        let base = BoxAnnotation::new(100.0, 100.0, w, h);
        let shifted = BoxAnnotation::new(100.0 + r, 100.0 + r, w, h);
        let shrunk = BoxAnnotation::new(100.0 + r, 100.0 + r, (w - 2.0 * r).max(1e-9), (h - 2.0 * r).max(1e-9));
        let inflated = BoxAnnotation::new(100.0 - r, 100.0 - r, w + 2.0 * r, h + 2.0 * r);
        base.iou(&shifted).min(base.iou(&shrunk)).min(base.iou(&inflated))
    }

    #[test]
    fn radius_clamps_tiny_boxes_to_one() {
        assert_eq!(gaussian_radius(1.0, 1.0, 0.7).unwrap(), 1);
    }

    #[test]
    fn radius_matches_brute_force_iou_scan() {
        for (w, h) in [(24.0, 24.0), (40.0, 10.0), (13.0, 57.0), (128.0, 96.0)] {
            let r = gaussian_radius(w, h, 0.7).unwrap();
            assert!(
                worst_iou(w, h, r as f64) >= 0.7 - 1e-9,
                "({w},{h}): r={r} violates the overlap bound"
            );
            assert!(
                worst_iou(w, h, (r + 1) as f64) < 0.7,
                "({w},{h}): r={r} is not maximal"
            );
        }
    }

    #[test]
    fn radius_rejects_degenerate_boxes() {
        assert!(gaussian_radius(0.0, 5.0, 0.7).is_err());
        assert!(gaussian_radius(5.0, -1.0, 0.7).is_err());
        assert!(gaussian_radius(5.0, 5.0, 1.5).is_err());
    }

    #[test]
    fn empty_heatmap_is_all_zero() {
        let h: Array3<f64> = render_heatmap(&[], (1, 8, 8)).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_keypoint_peak_is_exactly_one() {
        let h: Array3<f64> =
            render_heatmap(&[HeatKeypoint { cx: 5, cy: 5, radius: 2, class: 0 }], (1, 12, 12))
                .unwrap();
        assert_eq!(h[[0, 5, 5]], 1.0);
        for ((c, y, x), &v) in h.indexed_iter() {
            assert!((0.0..=1.0).contains(&v));
            if (c, y, x) != (0, 5, 5) {
                assert!(v < 1.0, "({c},{y},{x}) = {v}");
            }
        }
    }

    #[test]
    fn overlapping_splats_combine_by_per_pixel_max() {
        let kps = [
            HeatKeypoint { cx: 4, cy: 4, radius: 2, class: 0 },
            HeatKeypoint { cx: 6, cy: 4, radius: 2, class: 0 },
        ];
        let h: Array3<f64> = render_heatmap(&kps, (1, 12, 12)).unwrap();
        // Per-pixel oracle: evaluate both Gaussians directly.
        let sigma = 5.0 / 6.0;
        for y in 0..12usize {
            for x in 0..12usize {
                if (y, x) == (4, 4) || (y, x) == (4, 6) {
                    assert_eq!(h[[0, y, x]], 1.0);
                    continue;
                }
                let g = |cx: f64, cy: f64| {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    if dx.abs() > 2.0 || dy.abs() > 2.0 {
                        0.0
                    } else {
                        (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
                    }
                };
                let expect = g(4.0, 4.0).max(g(6.0, 4.0));
                assert!((h[[0, y, x]] - expect).abs() < 1e-12, "({y},{x})");
            }
        }
    }

    #[test]
    fn keypoint_outside_grid_is_rejected() {
        let r: Result<Array3<f64>> =
            render_heatmap(&[HeatKeypoint { cx: 8, cy: 2, radius: 1, class: 0 }], (1, 8, 8));
        assert!(r.is_err());
    }

    #[test]
    fn make_targets_quantizes_centers_and_offsets() {
        // Center at (12, 12), stride 4 -> cell (3,3), offset (0,0).
        let boxes = [BoxAnnotation::new(8.0, 8.0, 8.0, 8.0)];
        let t: TargetMaps<f64> = make_targets(&boxes, 64, 64, 1, 4).unwrap();
        assert_eq!(t.keypoints, vec![(3, 3, 0)]);
        assert_eq!(t.offset_map[[0, 3, 3]], 0.0);
        assert_eq!(t.offset_map[[1, 3, 3]], 0.0);
        assert_eq!(t.size_map[[0, 3, 3]], 2.0);
        assert_eq!(t.heatmap[[0, 3, 3]], 1.0);
        assert_eq!(t.num_keypoints, 1);

        // Center at (13, 15): cell (3,3), offset (0.25, 0.75) per hand
        // evaluation of center/stride - floor(center/stride).
        let boxes = [BoxAnnotation::new(9.0, 11.0, 8.0, 8.0)];
        let t: TargetMaps<f64> = make_targets(&boxes, 64, 64, 1, 4).unwrap();
        assert_eq!(t.keypoints, vec![(3, 3, 0)]);
        assert!((t.offset_map[[0, 3, 3]] - 0.25).abs() < 1e-12);
        assert!((t.offset_map[[1, 3, 3]] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn make_targets_empty_scene() {
        let t: TargetMaps<f32> = make_targets(&[], 64, 64, 1, 4).unwrap();
        assert_eq!(t.num_keypoints, 0);
        assert!(t.heatmap.iter().all(|&v| v == 0.0));
        assert!(t.size_map.iter().all(|&v| v == 0.0));
        assert_eq!(t.collision_count(), 0);
    }

    #[test]
    fn make_targets_collision_keeps_both_keypoints_last_writer_maps() {
        // Centers (10,10) and (11,11) both land in cell (2,2) at stride 4.
        let boxes = [
            BoxAnnotation::new(8.0, 8.0, 4.0, 4.0),
            BoxAnnotation::new(9.0, 9.0, 4.0, 4.0),
        ];
        let t: TargetMaps<f64> = make_targets(&boxes, 64, 64, 1, 4).unwrap();
        assert_eq!(t.num_keypoints, 2);
        assert_eq!(t.collision_count(), 1);
        // Last writer wins for size/offset.
        assert!((t.offset_map[[0, 2, 2]] - 0.75).abs() < 1e-12);
        assert_eq!(t.size_map[[0, 2, 2]], 1.0);
    }

    #[test]
    fn rendering_is_deterministic() {
        let boxes: Vec<BoxAnnotation> = (0..20)
            .map(|i| BoxAnnotation::new((i * 5) as f64 % 100.0, (i * 7) as f64 % 100.0, 9.0, 13.0))
            .collect();
        let a: TargetMaps<f32> = make_targets(&boxes, 128, 128, 1, 4).unwrap();
        let b: TargetMaps<f32> = make_targets(&boxes, 128, 128, 1, 4).unwrap();
        assert_eq!(a.heatmap, b.heatmap);
        assert_eq!(a.size_map, b.size_map);
        assert_eq!(a.offset_map, b.offset_map);
    }

    #[test]
    fn heatmap_max_is_one_iff_keypoints_exist() {
        let t: TargetMaps<f64> = make_targets(&[], 64, 64, 1, 4).unwrap();
        assert!(t.heatmap.iter().all(|&v| v < 1.0));
        let boxes = [BoxAnnotation::new(20.0, 20.0, 10.0, 10.0)];
        let t: TargetMaps<f64> = make_targets(&boxes, 64, 64, 1, 4).unwrap();
        let max = t.heatmap.iter().copied().fold(0.0, f64::max);
        assert_eq!(max, 1.0);
    }
}
