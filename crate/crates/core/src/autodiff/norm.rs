//! Per-channel batch normalization over (batch, height, width).

use super::{dims4, GradOp, GradSink, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array1, ArrayD, IxDyn};

/// Batch statistics produced by a training-mode normalization, handed back to
/// the layer so it can maintain running averages outside the graph.
pub struct BatchStats<T> {
    pub mean: Array1<T>,
    /// Biased (population) variance, as used for normalization.
    pub var: Array1<T>,
}

struct BatchNormTrainOp<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    mean: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> GradOp<T> for BatchNormTrainOp<T> {
    fn backward(&self, v: &[ArrayD<T>], grad: &ArrayD<T>, sink: &mut GradSink<'_, T>) {
        let s = v[self.x.0].shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let n = T::from_usize(b * plane).unwrap();
        let xs = v[self.x.0].as_slice().unwrap();
        let gs = grad.as_slice().unwrap();
        let gamma = v[self.gamma.0].as_slice().unwrap();

        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = vec![T::zero(); xs.len()];

        for ci in 0..c {
            let mu = self.mean[ci];
            let is = self.inv_std[ci];
            // Sums of dy and dy*xhat over the channel.
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                for i in 0..plane {
                    let xhat = (xs[base + i] - mu) * is;
                    let dy = gs[base + i];
                    sum_dy += dy;
                    sum_dy_xhat += dy * xhat;
                }
            }
            dgamma[ci] = sum_dy_xhat;
            dbeta[ci] = sum_dy;
            let gsc = gamma[ci] * is / n;
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                for i in 0..plane {
                    let xhat = (xs[base + i] - mu) * is;
                    dx[base + i] = gsc * (n * gs[base + i] - sum_dy - xhat * sum_dy_xhat);
                }
            }
        }
        sink.add(self.x, ArrayD::from_shape_vec(v[self.x.0].raw_dim(), dx).unwrap());
        sink.add(self.gamma, ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).unwrap());
        sink.add(self.beta, ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).unwrap());
    }
}

/// Eval mode is a per-channel affine map with frozen statistics.
struct BatchNormEvalOp<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    mean: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> GradOp<T> for BatchNormEvalOp<T> {
    fn backward(&self, v: &[ArrayD<T>], grad: &ArrayD<T>, sink: &mut GradSink<'_, T>) {
        let s = v[self.x.0].shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let xs = v[self.x.0].as_slice().unwrap();
        let gs = grad.as_slice().unwrap();
        let gamma = v[self.gamma.0].as_slice().unwrap();

        if sink.wants(self.x) {
            let mut dx = vec![T::zero(); xs.len()];
            for ci in 0..c {
                let k = gamma[ci] * self.inv_std[ci];
                for bi in 0..b {
                    let base = (bi * c + ci) * plane;
                    for i in 0..plane {
                        dx[base + i] = gs[base + i] * k;
                    }
                }
            }
            sink.add(self.x, ArrayD::from_shape_vec(v[self.x.0].raw_dim(), dx).unwrap());
        }
        if sink.wants(self.gamma) || sink.wants(self.beta) {
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for ci in 0..c {
                let mu = self.mean[ci];
                let is = self.inv_std[ci];
                for bi in 0..b {
                    let base = (bi * c + ci) * plane;
                    for i in 0..plane {
                        dgamma[ci] += gs[base + i] * (xs[base + i] - mu) * is;
                        dbeta[ci] += gs[base + i];
                    }
                }
            }
            sink.add(self.gamma, ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).unwrap());
            sink.add(self.beta, ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).unwrap());
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Training-mode batch norm: normalizes with the current batch statistics
    /// (returned so the caller can update running averages).
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let (b, c, h, w) = dims4(self.value(x), "batch_norm input")?;
        check_affine_shapes(self.shape(gamma), self.shape(beta), c)?;
        let plane = h * w;
        let n = T::from_usize(b * plane).unwrap();
        let xs = self.value(x).as_slice().unwrap();

        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ci in 0..c {
            let mut s = T::zero();
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                for i in 0..plane {
                    s += xs[base + i];
                }
            }
            let mu = s / n;
            let mut sq = T::zero();
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                for i in 0..plane {
                    let d = xs[base + i] - mu;
                    sq += d * d;
                }
            }
            mean[ci] = mu;
            var[ci] = sq / n;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let gamma_v = self.value(gamma).as_slice().unwrap();
        let beta_v = self.value(beta).as_slice().unwrap();
        let mut out = vec![T::zero(); xs.len()];
        for ci in 0..c {
            let (mu, is, ga, be) = (mean[ci], inv_std[ci], gamma_v[ci], beta_v[ci]);
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                for i in 0..plane {
                    out[base + i] = (xs[base + i] - mu) * is * ga + be;
                }
            }
        }
        let stats = BatchStats {
            mean: Array1::from_vec(mean.clone()),
            var: Array1::from_vec(var),
        };
        let value = ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), out).unwrap();
        let needs = self.any_needs(&[x, gamma, beta]);
        let op = BatchNormTrainOp { x, gamma, beta, mean, inv_std };
        Ok((self.push(value, Some(Box::new(op)), needs), stats))
    }

    /// Eval-mode batch norm with frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Array1<T>,
        running_var: &Array1<T>,
        eps: T,
    ) -> Result<Var> {
        let (b, c, h, w) = dims4(self.value(x), "batch_norm input")?;
        check_affine_shapes(self.shape(gamma), self.shape(beta), c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(format!(
                "batch_norm: running stats have {} channels, input has {c}",
                running_mean.len()
            )));
        }
        let plane = h * w;
        let xs = self.value(x).as_slice().unwrap();
        let gamma_v = self.value(gamma).as_slice().unwrap();
        let beta_v = self.value(beta).as_slice().unwrap();
        let mean: Vec<T> = running_mean.iter().copied().collect();
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let mut out = vec![T::zero(); xs.len()];
        for ci in 0..c {
            let (mu, is, ga, be) = (mean[ci], inv_std[ci], gamma_v[ci], beta_v[ci]);
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                for i in 0..plane {
                    out[base + i] = (xs[base + i] - mu) * is * ga + be;
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), out).unwrap();
        let needs = self.any_needs(&[x, gamma, beta]);
        let op = BatchNormEvalOp { x, gamma, beta, mean, inv_std };
        Ok(self.push(value, Some(Box::new(op)), needs))
    }
}

fn check_affine_shapes(gamma: &[usize], beta: &[usize], c: usize) -> Result<()> {
    if gamma != [c] || beta != [c] {
        return Err(Error::shape(format!(
            "batch_norm: gamma {gamma:?} / beta {beta:?} vs {c} channels"
        )));
    }
    Ok(())
}
