//! Deformable unfolding: im2col where each kernel tap is displaced by a
//! learned per-position 2-D offset and read through bilinear interpolation.
//!
//! `deform_im2col(x, offsets)` produces columns such that a following 1x1
//! convolution with the reshaped 3x3 kernel equals deformable convolution.

use super::resample::BilinearTap;
use super::{dims4, GradOp, GradSink, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use rayon::prelude::*;

struct DeformIm2colOp {
    x: Var,
    offsets: Var,
    k: usize,
    pad: usize,
}

impl<T: Scalar> GradOp<T> for DeformIm2colOp {
    fn backward(&self, v: &[ArrayD<T>], grad: &ArrayD<T>, sink: &mut GradSink<'_, T>) {
        let s = v[self.x.0].shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let k2 = self.k * self.k;
        let xs = v[self.x.0].as_slice().unwrap();
        let os = v[self.offsets.0].as_slice().unwrap();
        let gs = grad.as_slice().unwrap();
        let plane = h * w;

        let want_x = sink.wants(self.x);
        let want_o = sink.wants(self.offsets);

        let per: Vec<(Vec<T>, Vec<T>)> = (0..b)
            .into_par_iter()
            .map(|bi| {
                let mut dx = vec![T::zero(); c * plane];
                let mut doff = vec![T::zero(); 2 * k2 * plane];
                let xb = &xs[bi * c * plane..(bi + 1) * c * plane];
                let ob = &os[bi * 2 * k2 * plane..(bi + 1) * 2 * k2 * plane];
                let gb = &gs[bi * c * k2 * plane..(bi + 1) * c * k2 * plane];
                for t in 0..k2 {
                    let (ky, kx) = (t / self.k, t % self.k);
                    let dy_plane = &ob[2 * t * plane..(2 * t + 1) * plane];
                    let dx_plane = &ob[(2 * t + 1) * plane..(2 * t + 2) * plane];
                    for y in 0..h {
                        for x in 0..w {
                            let p = y * w + x;
                            let py = y as f64 + ky as f64 - self.pad as f64
                                + dy_plane[p].to_f64_lossy();
                            let px = x as f64 + kx as f64 - self.pad as f64
                                + dx_plane[p].to_f64_lossy();
                            let tap = BilinearTap::at(px, py, h, w);
                            let mut gy_acc = T::zero();
                            let mut gx_acc = T::zero();
                            for ci in 0..c {
                                let g = gb[(ci * k2 + t) * plane + p];
                                if want_x {
                                    tap.scatter(
                                        &mut dx[ci * plane..(ci + 1) * plane],
                                        w,
                                        g,
                                    );
                                }
                                if want_o {
                                    let (ddx, ddy) = tap
                                        .coord_grads(&xb[ci * plane..(ci + 1) * plane], w);
                                    gx_acc += g * ddx;
                                    gy_acc += g * ddy;
                                }
                            }
                            doff[2 * t * plane + p] = gy_acc;
                            doff[(2 * t + 1) * plane + p] = gx_acc;
                        }
                    }
                }
                (dx, doff)
            })
            .collect();

        if want_x {
            let mut dx = ArrayD::<T>::zeros(IxDyn(&[b, c, h, w]));
            let dxs = dx.as_slice_mut().unwrap();
            for (bi, (dxb, _)) in per.iter().enumerate() {
                dxs[bi * c * plane..(bi + 1) * c * plane].copy_from_slice(dxb);
            }
            sink.add(self.x, dx);
        }
        if want_o {
            let mut doff = ArrayD::<T>::zeros(IxDyn(&[b, 2 * k2, h, w]));
            let dos = doff.as_slice_mut().unwrap();
            for (bi, (_, dob)) in per.iter().enumerate() {
                dos[bi * 2 * k2 * plane..(bi + 1) * 2 * k2 * plane].copy_from_slice(dob);
            }
            sink.add(self.offsets, doff);
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Unfold `x: [B,C,H,W]` under a `k x k` grid displaced by
    /// `offsets: [B,2*k*k,H,W]` (channel `2t` = dy, `2t+1` = dx of tap `t`,
    /// taps in row-major kernel order) into `[B, C*k*k, H, W]`.
    /// Stride 1; out-of-bounds reads are zero.
    pub fn deform_im2col(&mut self, x: Var, offsets: Var, k: usize, pad: usize) -> Result<Var> {
        let (b, c, h, w) = dims4(self.value(x), "deform_im2col input")?;
        let (bo, co, ho, wo) = dims4(self.value(offsets), "deform_im2col offsets")?;
        let k2 = k * k;
        if bo != b || co != 2 * k2 || ho != h || wo != w {
            return Err(Error::shape(format!(
                "deform_im2col: offsets {:?}, expected [{b},{},{h},{w}]",
                self.shape(offsets),
                2 * k2
            )));
        }
        if !self.value(offsets).iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("deform_im2col: non-finite offsets"));
        }
        let plane = h * w;
        let xs = self.value(x).as_slice().unwrap();
        let os = self.value(offsets).as_slice().unwrap();
        let mut out = ArrayD::<T>::zeros(IxDyn(&[b, c * k2, h, w]));
        {
            let outs = out.as_slice_mut().unwrap();
            outs.par_chunks_mut(c * k2 * plane).enumerate().for_each(|(bi, cols)| {
                let xb = &xs[bi * c * plane..(bi + 1) * c * plane];
                let ob = &os[bi * 2 * k2 * plane..(bi + 1) * 2 * k2 * plane];
                for t in 0..k2 {
                    let (ky, kx) = (t / k, t % k);
                    let dy_plane = &ob[2 * t * plane..(2 * t + 1) * plane];
                    let dx_plane = &ob[(2 * t + 1) * plane..(2 * t + 2) * plane];
                    for y in 0..h {
                        for x in 0..w {
                            let p = y * w + x;
                            let py = y as f64 + ky as f64 - pad as f64
                                + dy_plane[p].to_f64_lossy();
                            let px = x as f64 + kx as f64 - pad as f64
                                + dx_plane[p].to_f64_lossy();
                            let tap = BilinearTap::at(px, py, h, w);
                            for ci in 0..c {
                                cols[(ci * k2 + t) * plane + p] =
                                    tap.gather(&xb[ci * plane..(ci + 1) * plane], w);
                            }
                        }
                    }
                }
            });
        }
        let needs = self.any_needs(&[x, offsets]);
        Ok(self.push(
            out,
            Some(Box::new(DeformIm2colOp { x, offsets, k, pad })),
            needs,
        ))
    }
}
