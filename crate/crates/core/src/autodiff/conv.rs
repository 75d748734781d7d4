//! 2-D convolution via im2col + GEMM, parallel over the batch.

use super::{dims4, GradOp, GradSink, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{linalg::general_mat_mul, Array2, ArrayD, ArrayView2, IxDyn};
use rayon::prelude::*;

#[derive(Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    fn cols_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

pub(crate) fn out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad).checked_sub(kernel).map(|v| v / stride + 1)
}

/// Unfold one sample `[Cin,H,W]` into `[Cin*kh*kw, Ho*Wo]` with zero padding.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let plane = g.ho * g.wo;
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let out = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut out[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix >= 0 && ix < g.w as isize {
                            src_row[ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Fold `[Cin*kh*kw, Ho*Wo]` gradients back onto one `[Cin,H,W]` sample.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, x: &mut [T]) {
    let plane = g.ho * g.wo;
    for c in 0..g.cin {
        let xc = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src_row = &src[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, s) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += *s;
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dOp {
    x: Var,
    weight: Var,
    bias: Option<Var>,
    geom: ConvGeometry,
    cout: usize,
}

impl<T: Scalar> GradOp<T> for Conv2dOp {
    fn backward(&self, v: &[ArrayD<T>], grad: &ArrayD<T>, sink: &mut GradSink<'_, T>) {
        let g = self.geom;
        let batch = v[self.x.0].shape()[0];
        let plane = g.ho * g.wo;
        let rows = g.cols_rows();
        let xs = v[self.x.0].as_slice().unwrap();
        let gs = grad.as_slice().unwrap();
        let wmat: ArrayView2<T> = v[self.weight.0]
            .view()
            .into_shape_with_order((self.cout, rows))
            .unwrap();

        let want_x = sink.wants(self.x);
        let want_w = sink.wants(self.weight);

        // Per-sample work in parallel; combined in index order for determinism.
        let per: Vec<(Option<Vec<T>>, Option<Array2<T>>)> = (0..batch)
            .into_par_iter()
            .map(|b| {
                let xb = &xs[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
                let gb = ArrayView2::from_shape(
                    (self.cout, plane),
                    &gs[b * self.cout * plane..(b + 1) * self.cout * plane],
                )
                .unwrap();
                let mut cols = vec![T::zero(); rows * plane];
                im2col(xb, &g, &mut cols);
                let cols_m = ArrayView2::from_shape((rows, plane), &cols[..]).unwrap();

                let dw = if want_w {
                    let mut dwb = Array2::<T>::zeros((self.cout, rows));
                    general_mat_mul(T::one(), &gb, &cols_m.t(), T::zero(), &mut dwb);
                    Some(dwb)
                } else {
                    None
                };
                let dx = if want_x {
                    let mut dcols = Array2::<T>::zeros((rows, plane));
                    general_mat_mul(T::one(), &wmat.t(), &gb, T::zero(), &mut dcols);
                    let mut dxb = vec![T::zero(); g.cin * g.h * g.w];
                    col2im(dcols.as_slice().unwrap(), &g, &mut dxb);
                    Some(dxb)
                } else {
                    None
                };
                (dx, dw)
            })
            .collect();

        if want_w {
            let mut dw = Array2::<T>::zeros((self.cout, rows));
            for (_, dwb) in &per {
                dw.zip_mut_with(dwb.as_ref().unwrap(), |a, b| *a += *b);
            }
            sink.add(
                self.weight,
                dw.into_shape_with_order(v[self.weight.0].raw_dim())
                    .unwrap(),
            );
        }
        if want_x {
            let mut dx = ArrayD::<T>::zeros(v[self.x.0].raw_dim());
            let dxs = dx.as_slice_mut().unwrap();
            for (b, (dxb, _)) in per.iter().enumerate() {
                let dst = &mut dxs[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
                dst.copy_from_slice(dxb.as_ref().unwrap());
            }
            sink.add(self.x, dx);
        }
        if let Some(bias) = self.bias {
            if sink.wants(bias) {
                let mut db = vec![T::zero(); self.cout];
                for b in 0..batch {
                    for (c, dbc) in db.iter_mut().enumerate() {
                        let seg = &gs[(b * self.cout + c) * plane..(b * self.cout + c + 1) * plane];
                        for v in seg {
                            *dbc += *v;
                        }
                    }
                }
                sink.add(bias, ArrayD::from_shape_vec(IxDyn(&[self.cout]), db).unwrap());
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Standard 2-D convolution. `x: [B,Cin,H,W]`, `weight: [Cout,Cin,kh,kw]`,
    /// optional `bias: [Cout]`, zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (batch, cin, h, w) = dims4(self.value(x), "conv2d input")?;
        let (cout, wcin, kh, kw) = dims4(self.value(weight), "conv2d weight")?;
        if cin != wcin {
            return Err(Error::shape(format!(
                "conv2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape(format!(
                    "conv2d: bias shape {:?} vs {cout} output channels",
                    self.shape(b)
                )));
            }
        }
        let (ho, wo) = match (out_dim(h, kh, stride, pad), out_dim(w, kw, stride, pad)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d: kernel {kh}x{kw} stride {stride} pad {pad} does not fit {h}x{w}"
                )))
            }
        };
        let geom = ConvGeometry { cin, h, w, kh, kw, stride, pad, ho, wo };
        let rows = geom.cols_rows();
        let plane = ho * wo;
        let xs = self.value(x).as_slice().unwrap();
        let wmat: ArrayView2<T> = self
            .value(weight)
            .view()
            .into_shape_with_order((cout, rows))
            .unwrap();
        let bias_vals: Option<Vec<T>> = bias.map(|b| self.value(b).iter().copied().collect());

        let mut out = ArrayD::<T>::zeros(IxDyn(&[batch, cout, ho, wo]));
        {
            let os = out.as_slice_mut().unwrap();
            os.par_chunks_mut(cout * plane).enumerate().for_each(|(b, ob)| {
                let xb = &xs[b * cin * h * w..(b + 1) * cin * h * w];
                let mut cols = vec![T::zero(); rows * plane];
                im2col(xb, &geom, &mut cols);
                let cols_m = ArrayView2::from_shape((rows, plane), &cols[..]).unwrap();
                let mut ob_m =
                    ndarray::ArrayViewMut2::from_shape((cout, plane), ob).unwrap();
                general_mat_mul(T::one(), &wmat, &cols_m, T::zero(), &mut ob_m);
                if let Some(bv) = &bias_vals {
                    for c in 0..cout {
                        let seg = &mut ob[c * plane..(c + 1) * plane];
                        for v in seg {
                            *v += bv[c];
                        }
                    }
                }
            });
        }
        let mut parents = vec![x, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let needs = self.any_needs(&parents);
        Ok(self.push(
            out,
            Some(Box::new(Conv2dOp { x, weight, bias, geom, cout })),
            needs,
        ))
    }
}
