//! Batched matrix products and row softmax for the attention stack.

use super::{dims3, GradOp, GradSink, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{linalg::general_mat_mul, ArrayD, ArrayView2, ArrayViewMut2, Axis, IxDyn};

fn mat2<T: Scalar>(a: &ArrayD<T>, b: usize) -> ArrayView2<'_, T> {
    a.index_axis(Axis(0), b).into_dimensionality().unwrap()
}

fn mat2_mut<T: Scalar>(a: &mut ArrayD<T>, b: usize) -> ArrayViewMut2<'_, T> {
    a.index_axis_mut(Axis(0), b).into_dimensionality().unwrap()
}

/// C[b] = A[b] · B[b]   (or A[b] · B[b]^T when `transpose_b`).
struct BatchMatmulOp {
    a: Var,
    b: Var,
    transpose_b: bool,
}

impl<T: Scalar> GradOp<T> for BatchMatmulOp {
    fn backward(&self, v: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<'_, T>) {
        let batches = v[self.a.0].shape()[0];
        let one = T::one();
        if sink.wants(self.a) {
            let mut ga = ArrayD::<T>::zeros(v[self.a.0].raw_dim());
            for i in 0..batches {
                let gi = mat2(g, i);
                let bi = mat2(&v[self.b.0], i);
                // dA = dC · B^T, or dC · B when B was transposed in forward.
                if self.transpose_b {
                    general_mat_mul(one, &gi, &bi, T::zero(), &mut mat2_mut(&mut ga, i));
                } else {
                    general_mat_mul(one, &gi, &bi.t(), T::zero(), &mut mat2_mut(&mut ga, i));
                }
            }
            sink.add(self.a, ga);
        }
        if sink.wants(self.b) {
            let mut gb = ArrayD::<T>::zeros(v[self.b.0].raw_dim());
            for i in 0..batches {
                let gi = mat2(g, i);
                let ai = mat2(&v[self.a.0], i);
                // dB = A^T · dC, or dC^T · A when B was transposed in forward.
                if self.transpose_b {
                    general_mat_mul(one, &gi.t(), &ai, T::zero(), &mut mat2_mut(&mut gb, i));
                } else {
                    general_mat_mul(one, &ai.t(), &gi, T::zero(), &mut mat2_mut(&mut gb, i));
                }
            }
            sink.add(self.b, gb);
        }
    }
}

struct SoftmaxLastOp {
    a: Var,
    out: Var,
}

impl<T: Scalar> GradOp<T> for SoftmaxLastOp {
    fn backward(&self, v: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<'_, T>) {
        let y = &v[self.out.0];
        let last = y.ndim() - 1;
        let mut ga = g.clone();
        // dx = y * (g - sum(g*y, last))
        for (mut grow, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
            let dot: T = grow
                .iter()
                .zip(yrow.iter())
                .map(|(a, b)| *a * *b)
                .sum();
            for (gv, yv) in grow.iter_mut().zip(yrow.iter()) {
                *gv = *yv * (*gv - dot);
            }
        }
        let _ = last;
        sink.add(self.a, ga);
    }
}

impl<T: Scalar> Graph<T> {
    /// Batched product of rank-3 tensors: `[B,M,K] x [B,K,N] -> [B,M,N]`;
    /// with `transpose_b`, the second operand is `[B,N,K]` and used transposed.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ba, m, k) = dims3(self.value(a), "batch_matmul lhs")?;
        let (bb, r0, r1) = dims3(self.value(b), "batch_matmul rhs")?;
        let (kb, n) = if transpose_b { (r1, r0) } else { (r0, r1) };
        if ba != bb || k != kb {
            return Err(Error::shape(format!(
                "batch_matmul: {:?} x {:?} (transpose_b={})",
                self.shape(a),
                self.shape(b),
                transpose_b
            )));
        }
        let mut out = ArrayD::<T>::zeros(IxDyn(&[ba, m, n]));
        for i in 0..ba {
            let ai = mat2(self.value(a), i);
            let bi = mat2(self.value(b), i);
            if transpose_b {
                general_mat_mul(T::one(), &ai, &bi.t(), T::zero(), &mut mat2_mut(&mut out, i));
            } else {
                general_mat_mul(T::one(), &ai, &bi, T::zero(), &mut mat2_mut(&mut out, i));
            }
        }
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(out, Some(Box::new(BatchMatmulOp { a, b, transpose_b })), needs))
    }

    /// Numerically stable softmax over the last axis; every row sums to one.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let needs = self.any_needs(&[a]);
        let v = self.push(out, None, needs);
        self.ops[v.0] = Some(Box::new(SoftmaxLastOp { a, out: v }));
        v
    }
}
