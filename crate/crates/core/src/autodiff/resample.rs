//! Differentiable resampling: fixed 2x up/down interpolation and bilinear
//! sampling at arbitrary fractional coordinates.

use super::{dims4, GradOp, GradSink, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use rayon::prelude::*;

const MAX_TAPS: usize = 4;

/// Per-output-position source taps for one axis of a separable resize.
#[derive(Clone)]
struct AxisTable<T> {
    taps: usize,
    idx: Vec<[usize; MAX_TAPS]>,
    w: Vec<[T; MAX_TAPS]>,
}

fn nearest2x_table<T: Scalar>(n: usize) -> AxisTable<T> {
    let mut idx = Vec::with_capacity(2 * n);
    let mut w = Vec::with_capacity(2 * n);
    for d in 0..2 * n {
        idx.push([d / 2, 0, 0, 0]);
        w.push([T::one(), T::zero(), T::zero(), T::zero()]);
    }
    AxisTable { taps: 1, idx, w }
}

/// align_corners=false mapping: src = (dst + 0.5) / 2 - 0.5, clamped.
fn bilinear2x_table<T: Scalar>(n: usize) -> AxisTable<T> {
    let mut idx = Vec::with_capacity(2 * n);
    let mut w = Vec::with_capacity(2 * n);
    for d in 0..2 * n {
        let s = (d as f64 + 0.5) / 2.0 - 0.5;
        let s = s.clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        let f = s - i0 as f64;
        idx.push([i0, i1, 0, 0]);
        w.push([T::c(1.0 - f), T::c(f), T::zero(), T::zero()]);
    }
    AxisTable { taps: 2, idx, w }
}

/// Keys cubic kernel with a = -0.5 (reproduces constants and linear ramps).
fn cubic_weight(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t.powi(3) - (a + 3.0) * t.powi(2) + 1.0
    } else if t < 2.0 {
        a * t.powi(3) - 5.0 * a * t.powi(2) + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

fn bicubic2x_table<T: Scalar>(n: usize) -> AxisTable<T> {
    let mut idx = Vec::with_capacity(2 * n);
    let mut w = Vec::with_capacity(2 * n);
    for d in 0..2 * n {
        let s = (d as f64 + 0.5) / 2.0 - 0.5;
        let base = s.floor();
        let f = s - base;
        let mut ii = [0usize; MAX_TAPS];
        let mut ww = [T::zero(); MAX_TAPS];
        for (j, (iv, wv)) in ii.iter_mut().zip(ww.iter_mut()).enumerate() {
            let src = base as isize - 1 + j as isize;
            *iv = src.clamp(0, n as isize - 1) as usize;
            *wv = T::c(cubic_weight(f + 1.0 - j as f64));
        }
        idx.push(ii);
        w.push(ww);
    }
    AxisTable { taps: 4, idx, w }
}

struct SeparableResizeOp<T> {
    a: Var,
    ty: AxisTable<T>,
    tx: AxisTable<T>,
}

impl<T: Scalar> GradOp<T> for SeparableResizeOp<T> {
    fn backward(&self, v: &[ArrayD<T>], grad: &ArrayD<T>, sink: &mut GradSink<'_, T>) {
        let si = v[self.a.0].shape();
        let (b, c, h, w) = (si[0], si[1], si[2], si[3]);
        let so = grad.shape();
        let (ho, wo) = (so[2], so[3]);
        let gs = grad.as_slice().unwrap();
        let mut dx = ArrayD::<T>::zeros(IxDyn(&[b, c, h, w]));
        {
            let dxs = dx.as_slice_mut().unwrap();
            dxs.par_chunks_mut(h * w).enumerate().for_each(|(plane_i, dp)| {
                let gp = &gs[plane_i * ho * wo..(plane_i + 1) * ho * wo];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g = gp[oy * wo + ox];
                        for jy in 0..self.ty.taps {
                            let wy = self.ty.w[oy][jy];
                            let iy = self.ty.idx[oy][jy];
                            for jx in 0..self.tx.taps {
                                dp[iy * w + self.tx.idx[ox][jx]] +=
                                    g * wy * self.tx.w[ox][jx];
                            }
                        }
                    }
                }
            });
        }
        sink.add(self.a, dx);
    }
}

impl<T: Scalar> Graph<T> {
    fn separable_resize(&mut self, a: Var, ty: AxisTable<T>, tx: AxisTable<T>) -> Result<Var> {
        let (b, c, h, w) = dims4(self.value(a), "resize input")?;
        let (ho, wo) = (ty.idx.len(), tx.idx.len());
        let xs = self.value(a).as_slice().unwrap();
        let mut out = ArrayD::<T>::zeros(IxDyn(&[b, c, ho, wo]));
        {
            let os = out.as_slice_mut().unwrap();
            os.par_chunks_mut(ho * wo).enumerate().for_each(|(plane_i, op)| {
                let xp = &xs[plane_i * h * w..(plane_i + 1) * h * w];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = T::zero();
                        for jy in 0..ty.taps {
                            let wy = ty.w[oy][jy];
                            let row = &xp[ty.idx[oy][jy] * w..ty.idx[oy][jy] * w + w];
                            for jx in 0..tx.taps {
                                acc += wy * tx.w[ox][jx] * row[tx.idx[ox][jx]];
                            }
                        }
                        op[oy * wo + ox] = acc;
                    }
                }
            });
        }
        let _ = (b, c);
        let needs = self.any_needs(&[a]);
        Ok(self.push(out, Some(Box::new(SeparableResizeOp { a, ty, tx })), needs))
    }

    pub fn upsample_nearest_2x(&mut self, a: Var) -> Result<Var> {
        let (_, _, h, w) = dims4(self.value(a), "upsample_nearest_2x")?;
        self.separable_resize(a, nearest2x_table(h), nearest2x_table(w))
    }

    pub fn upsample_bilinear_2x(&mut self, a: Var) -> Result<Var> {
        let (_, _, h, w) = dims4(self.value(a), "upsample_bilinear_2x")?;
        self.separable_resize(a, bilinear2x_table(h), bilinear2x_table(w))
    }

    pub fn upsample_bicubic_2x(&mut self, a: Var) -> Result<Var> {
        let (_, _, h, w) = dims4(self.value(a), "upsample_bicubic_2x")?;
        self.separable_resize(a, bicubic2x_table(h), bicubic2x_table(w))
    }

    /// 2x2 mean pooling; spatial dims must be even.
    pub fn avg_pool_2x2(&mut self, a: Var) -> Result<Var> {
        let (b, c, h, w) = dims4(self.value(a), "avg_pool_2x2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("avg_pool_2x2: odd dims {h}x{w}")));
        }
        let quarter = T::c(0.25);
        let xs = self.value(a).as_slice().unwrap();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = ArrayD::<T>::zeros(IxDyn(&[b, c, ho, wo]));
        {
            let os = out.as_slice_mut().unwrap();
            for plane_i in 0..b * c {
                let xp = &xs[plane_i * h * w..(plane_i + 1) * h * w];
                let op = &mut os[plane_i * ho * wo..(plane_i + 1) * ho * wo];
                for oy in 0..ho {
                    for ox in 0..wo {
                        op[oy * wo + ox] = quarter
                            * (xp[2 * oy * w + 2 * ox]
                                + xp[2 * oy * w + 2 * ox + 1]
                                + xp[(2 * oy + 1) * w + 2 * ox]
                                + xp[(2 * oy + 1) * w + 2 * ox + 1]);
                    }
                }
            }
        }
        let needs = self.any_needs(&[a]);
        Ok(self.push(out, Some(Box::new(AvgPool2x2Op { a })), needs))
    }

    /// Bilinear sampling of `f: [B,C,H,W]` at fractional coordinates
    /// `coords: [B,2,Ho,Wo]` (channel 0 = x, channel 1 = y, in pixels of `f`).
    /// Out-of-bounds neighbors contribute zero. Differentiable in both inputs.
    pub fn grid_bilinear_sample(&mut self, f: Var, coords: Var) -> Result<Var> {
        let (b, c, h, w) = dims4(self.value(f), "grid_bilinear_sample input")?;
        let (bc, two, ho, wo) = dims4(self.value(coords), "grid_bilinear_sample coords")?;
        if bc != b || two != 2 {
            return Err(Error::shape(format!(
                "grid_bilinear_sample: coords {:?} vs input batch {b}",
                self.shape(coords)
            )));
        }
        if !self.value(coords).iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("grid_bilinear_sample: non-finite coordinates"));
        }
        let xs = self.value(f).as_slice().unwrap();
        let cs = self.value(coords).as_slice().unwrap();
        let mut out = ArrayD::<T>::zeros(IxDyn(&[b, c, ho, wo]));
        {
            let os = out.as_slice_mut().unwrap();
            for bi in 0..b {
                let cx = &cs[(bi * 2) * ho * wo..(bi * 2 + 1) * ho * wo];
                let cy = &cs[(bi * 2 + 1) * ho * wo..(bi * 2 + 2) * ho * wo];
                for t in 0..ho * wo {
                    let tap = BilinearTap::at(cx[t].to_f64_lossy(), cy[t].to_f64_lossy(), h, w);
                    for ci in 0..c {
                        let plane = &xs[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                        os[(bi * c + ci) * ho * wo + t] = tap.gather::<T>(plane, w);
                    }
                }
            }
        }
        let needs = self.any_needs(&[f, coords]);
        Ok(self.push(out, Some(Box::new(GridSampleOp { f, coords })), needs))
    }
}

struct AvgPool2x2Op {
    a: Var,
}

impl<T: Scalar> GradOp<T> for AvgPool2x2Op {
    fn backward(&self, v: &[ArrayD<T>], grad: &ArrayD<T>, sink: &mut GradSink<'_, T>) {
        let si = v[self.a.0].shape();
        let (b, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::c(0.25);
        let gs = grad.as_slice().unwrap();
        let mut dx = ArrayD::<T>::zeros(IxDyn(&[b, c, h, w]));
        {
            let dxs = dx.as_slice_mut().unwrap();
            for plane_i in 0..b * c {
                let gp = &gs[plane_i * ho * wo..(plane_i + 1) * ho * wo];
                let dp = &mut dxs[plane_i * h * w..(plane_i + 1) * h * w];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g = gp[oy * wo + ox] * quarter;
                        dp[2 * oy * w + 2 * ox] += g;
                        dp[2 * oy * w + 2 * ox + 1] += g;
                        dp[(2 * oy + 1) * w + 2 * ox] += g;
                        dp[(2 * oy + 1) * w + 2 * ox + 1] += g;
                    }
                }
            }
        }
        sink.add(self.a, dx);
    }
}

/// The four integer neighbors and weights of one fractional sample position.
pub(crate) struct BilinearTap {
    pub y0: isize,
    pub x0: isize,
    pub fy: f64,
    pub fx: f64,
    pub h: usize,
    pub w: usize,
}

impl BilinearTap {
    pub fn at(x: f64, y: f64, h: usize, w: usize) -> Self {
        BilinearTap { y0: y.floor() as isize, x0: x.floor() as isize, fy: y - y.floor(), fx: x - x.floor(), h, w }
    }

    #[inline]
    fn corner<T: Scalar>(&self, plane: &[T], w: usize, dy: isize, dx: isize) -> T {
        let y = self.y0 + dy;
        let x = self.x0 + dx;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            T::zero()
        } else {
            plane[y as usize * w + x as usize]
        }
    }

    pub fn gather<T: Scalar>(&self, plane: &[T], w: usize) -> T {
        let (fy, fx) = (T::c(self.fy), T::c(self.fx));
        let one = T::one();
        self.corner(plane, w, 0, 0) * (one - fy) * (one - fx)
            + self.corner(plane, w, 0, 1) * (one - fy) * fx
            + self.corner(plane, w, 1, 0) * fy * (one - fx)
            + self.corner(plane, w, 1, 1) * fy * fx
    }

    /// Scatter `g` into the in-bounds corners.
    pub fn scatter<T: Scalar>(&self, plane: &mut [T], w: usize, g: T) {
        let (fy, fx) = (T::c(self.fy), T::c(self.fx));
        let one = T::one();
        let mut put = |dy: isize, dx: isize, wgt: T| {
            let y = self.y0 + dy;
            let x = self.x0 + dx;
            if y >= 0 && x >= 0 && y < self.h as isize && x < self.w as isize {
                plane[y as usize * w + x as usize] += g * wgt;
            }
        };
        put(0, 0, (one - fy) * (one - fx));
        put(0, 1, (one - fy) * fx);
        put(1, 0, fy * (one - fx));
        put(1, 1, fy * fx);
    }

    /// d(sample)/dx and d(sample)/dy of the bilinear interpolant.
    pub fn coord_grads<T: Scalar>(&self, plane: &[T], w: usize) -> (T, T) {
        let (fy, fx) = (T::c(self.fy), T::c(self.fx));
        let one = T::one();
        let v00 = self.corner(plane, w, 0, 0);
        let v01 = self.corner(plane, w, 0, 1);
        let v10 = self.corner(plane, w, 1, 0);
        let v11 = self.corner(plane, w, 1, 1);
        let ddx = (v01 - v00) * (one - fy) + (v11 - v10) * fy;
        let ddy = (v10 - v00) * (one - fx) + (v11 - v01) * fx;
        (ddx, ddy)
    }
}

struct GridSampleOp {
    f: Var,
    coords: Var,
}

impl<T: Scalar> GradOp<T> for GridSampleOp {
    fn backward(&self, v: &[ArrayD<T>], grad: &ArrayD<T>, sink: &mut GradSink<'_, T>) {
        let si = v[self.f.0].shape();
        let (b, c, h, w) = (si[0], si[1], si[2], si[3]);
        let so = grad.shape();
        let (ho, wo) = (so[2], so[3]);
        let xs = v[self.f.0].as_slice().unwrap();
        let cs = v[self.coords.0].as_slice().unwrap();
        let gs = grad.as_slice().unwrap();

        let want_f = sink.wants(self.f);
        let want_c = sink.wants(self.coords);
        let mut df = ArrayD::<T>::zeros(IxDyn(&[b, c, h, w]));
        let mut dc = ArrayD::<T>::zeros(IxDyn(&[b, 2, ho, wo]));
        {
            let dfs = df.as_slice_mut().unwrap();
            let dcs = dc.as_slice_mut().unwrap();
            for bi in 0..b {
                let cx = &cs[(bi * 2) * ho * wo..(bi * 2 + 1) * ho * wo];
                let cy = &cs[(bi * 2 + 1) * ho * wo..(bi * 2 + 2) * ho * wo];
                for t in 0..ho * wo {
                    let tap = BilinearTap::at(cx[t].to_f64_lossy(), cy[t].to_f64_lossy(), h, w);
                    let mut gx = T::zero();
                    let mut gy = T::zero();
                    for ci in 0..c {
                        let g = gs[(bi * c + ci) * ho * wo + t];
                        if want_f {
                            let plane =
                                &mut dfs[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                            tap.scatter(plane, w, g);
                        }
                        if want_c {
                            let plane = &xs[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                            let (ddx, ddy) = tap.coord_grads(plane, w);
                            gx += g * ddx;
                            gy += g * ddy;
                        }
                    }
                    dcs[(bi * 2) * ho * wo + t] = gx;
                    dcs[(bi * 2 + 1) * ho * wo + t] = gy;
                }
            }
        }
        if want_f {
            sink.add(self.f, df);
        }
        if want_c {
            sink.add(self.coords, dc);
        }
    }
}
