//! Reshapes, channel concatenation/slicing, and the NCHW <-> token layout swap.

use super::{dims3, dims4, GradOp, GradSink, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{ArrayD, Axis, IxDyn};

struct ReshapeOp {
    a: Var,
}

impl<T: Scalar> GradOp<T> for ReshapeOp {
    fn backward(&self, v: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<'_, T>) {
        let shape = v[self.a.0].raw_dim();
        let flat: Vec<T> = g.iter().copied().collect();
        sink.add(self.a, ArrayD::from_shape_vec(shape, flat).unwrap());
    }
}

struct ConcatChannelsOp {
    parts: Vec<(Var, usize)>, // (var, channel count)
}

impl<T: Scalar> GradOp<T> for ConcatChannelsOp {
    fn backward(&self, _v: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<'_, T>) {
        let mut start = 0;
        for &(p, c) in &self.parts {
            let slice = g
                .slice_axis(Axis(1), ndarray::Slice::from(start..start + c))
                .to_owned();
            sink.add(p, slice);
            start += c;
        }
    }
}

struct SliceChannelsOp {
    a: Var,
    start: usize,
    len: usize,
}

impl<T: Scalar> GradOp<T> for SliceChannelsOp {
    fn backward(&self, v: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<'_, T>) {
        let mut full = ArrayD::zeros(v[self.a.0].raw_dim());
        full.slice_axis_mut(
            Axis(1),
            ndarray::Slice::from(self.start..self.start + self.len),
        )
        .assign(g);
        sink.add(self.a, full);
    }
}

struct SpatialToTokensOp {
    a: Var,
}

impl<T: Scalar> GradOp<T> for SpatialToTokensOp {
    fn backward(&self, v: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<'_, T>) {
        // g: [B, HW, C] -> [B, C, H, W]
        let s = v[self.a.0].shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = ArrayD::<T>::zeros(IxDyn(&[b, c, h, w]));
        {
            let gs = g.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            for bi in 0..b {
                for t in 0..h * w {
                    for ci in 0..c {
                        os[((bi * c + ci) * h * w) + t] = gs[(bi * h * w + t) * c + ci];
                    }
                }
            }
        }
        sink.add(self.a, out);
    }
}

struct TokensToSpatialOp {
    a: Var,
}

impl<T: Scalar> GradOp<T> for TokensToSpatialOp {
    fn backward(&self, v: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<'_, T>) {
        // g: [B, C, H, W] -> [B, HW, C]
        let s = v[self.a.0].shape();
        let (b, n, c) = (s[0], s[1], s[2]);
        let mut out = ArrayD::<T>::zeros(IxDyn(&[b, n, c]));
        {
            let gs = g.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            for bi in 0..b {
                for t in 0..n {
                    for ci in 0..c {
                        os[(bi * n + t) * c + ci] = gs[((bi * c + ci) * n) + t];
                    }
                }
            }
        }
        sink.add(self.a, out);
    }
}

impl<T: Scalar> Graph<T> {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(Error::shape(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.shape(a),
                shape
            )));
        }
        let flat: Vec<T> = self.value(a).iter().copied().collect();
        let out = ArrayD::from_shape_vec(IxDyn(shape), flat).unwrap();
        let needs = self.any_needs(&[a]);
        Ok(self.push(out, Some(Box::new(ReshapeOp { a })), needs))
    }

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_channels: empty input list"));
        }
        let (b0, _, h0, w0) = dims4(self.value(parts[0]), "concat_channels")?;
        let mut meta = Vec::with_capacity(parts.len());
        let mut ctot = 0;
        for &p in parts {
            let (b, c, h, w) = dims4(self.value(p), "concat_channels")?;
            if (b, h, w) != (b0, h0, w0) {
                return Err(Error::shape(format!(
                    "concat_channels: incompatible {:?} vs first {:?}",
                    self.shape(p),
                    self.shape(parts[0])
                )));
            }
            meta.push((p, c));
            ctot += c;
        }
        let mut out = ArrayD::<T>::zeros(IxDyn(&[b0, ctot, h0, w0]));
        let mut start = 0;
        for &(p, c) in &meta {
            out.slice_axis_mut(Axis(1), ndarray::Slice::from(start..start + c))
                .assign(self.value(p));
            start += c;
        }
        let needs = self.any_needs(parts);
        Ok(self.push(out, Some(Box::new(ConcatChannelsOp { parts: meta })), needs))
    }

    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (_, c, _, _) = dims4(self.value(a), "slice_channels")?;
        if start + len > c {
            return Err(Error::shape(format!(
                "slice_channels: {start}..{} out of {c} channels",
                start + len
            )));
        }
        let out = self
            .value(a)
            .slice_axis(Axis(1), ndarray::Slice::from(start..start + len))
            .to_owned();
        let needs = self.any_needs(&[a]);
        Ok(self.push(out, Some(Box::new(SliceChannelsOp { a, start, len })), needs))
    }

    /// [B, C, H, W] -> [B, H*W, C]: one token per spatial position.
    pub fn spatial_to_tokens(&mut self, a: Var) -> Result<Var> {
        let (b, c, h, w) = dims4(self.value(a), "spatial_to_tokens")?;
        let mut out = ArrayD::<T>::zeros(IxDyn(&[b, h * w, c]));
        {
            let is = self.value(a).as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            for bi in 0..b {
                for ci in 0..c {
                    for t in 0..h * w {
                        os[(bi * h * w + t) * c + ci] = is[((bi * c + ci) * h * w) + t];
                    }
                }
            }
        }
        let needs = self.any_needs(&[a]);
        Ok(self.push(out, Some(Box::new(SpatialToTokensOp { a })), needs))
    }

    /// [B, H*W, C] -> [B, C, H, W]; inverse of `spatial_to_tokens`.
    pub fn tokens_to_spatial(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let (b, n, c) = dims3(self.value(a), "tokens_to_spatial")?;
        if n != h * w {
            return Err(Error::shape(format!(
                "tokens_to_spatial: {n} tokens cannot fill {h}x{w}"
            )));
        }
        let mut out = ArrayD::<T>::zeros(IxDyn(&[b, c, h, w]));
        {
            let is = self.value(a).as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            for bi in 0..b {
                for t in 0..n {
                    for ci in 0..c {
                        os[((bi * c + ci) * n) + t] = is[(bi * n + t) * c + ci];
                    }
                }
            }
        }
        let needs = self.any_needs(&[a]);
        Ok(self.push(out, Some(Box::new(TokensToSpatialOp { a })), needs))
    }
}
