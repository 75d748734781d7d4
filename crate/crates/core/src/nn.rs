//! Layer building blocks: convolution, batch norm, conv block
//! (conv -> norm -> rectifier) and the residual block used everywhere.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore, Scope};
use crate::scalar::Scalar;
use ndarray::Array1;

/// Whether batch statistics are live (training) or frozen (inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new<T: Scalar>(
        scope: &mut Scope<'_, T>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let weight = scope.he_normal("weight", &[cout, cin, kernel, kernel], cin * kernel * kernel);
        let bias = Some(scope.zeros("bias", &[cout]));
        Conv2dLayer { weight, bias, stride, pad: kernel / 2 }
    }

    /// Zero-initialized variant (offset predictors start inert).
    pub fn new_zeroed<T: Scalar>(
        scope: &mut Scope<'_, T>,
        cin: usize,
        cout: usize,
        kernel: usize,
    ) -> Self {
        let weight = scope.zeros("weight", &[cout, cin, kernel, kernel]);
        let bias = Some(scope.zeros("bias", &[cout]));
        Conv2dLayer { weight, bias, stride: 1, pad: kernel / 2 }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = self.bias.map(|b| g.param(ps, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(scope: &mut Scope<'_, T>, channels: usize) -> Self {
        BatchNorm2d {
            gamma: scope.constant("gamma", &[channels], 1.0, true),
            beta: scope.zeros("beta", &[channels]),
            running_mean: scope.buffer("running_mean", &[channels], 0.0),
            running_var: scope.buffer("running_var", &[channels], 1.0),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        match mode {
            Mode::Train => {
                let eps = T::c(self.eps);
                let (y, stats) = g.batch_norm_train(x, gamma, beta, eps)?;
                // Running averages track the batch statistics (unbiased variance).
                let shape = g.shape(x);
                let n = (shape[0] * shape[2] * shape[3]) as f64;
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let mom = T::c(self.momentum);
                let keep = T::one() - mom;
                let rm = ps.value_mut(self.running_mean);
                for (r, &m) in rm.iter_mut().zip(stats.mean.iter()) {
                    *r = keep * *r + mom * m;
                }
                let rv = ps.value_mut(self.running_var);
                let ub = T::c(unbias);
                for (r, &v) in rv.iter_mut().zip(stats.var.iter()) {
                    *r = keep * *r + mom * v * ub;
                }
                Ok(y)
            }
            Mode::Eval => {
                let rm: Array1<T> = ps
                    .value(self.running_mean)
                    .iter()
                    .copied()
                    .collect::<Vec<_>>()
                    .into();
                let rv: Array1<T> = ps
                    .value(self.running_var)
                    .iter()
                    .copied()
                    .collect::<Vec<_>>()
                    .into();
                g.batch_norm_eval(x, gamma, beta, &rm, &rv, T::c(self.eps))
            }
        }
    }
}

/// conv -> batch norm -> ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2dLayer,
    pub bn: BatchNorm2d,
}

impl ConvBlock {
    pub fn new<T: Scalar>(
        scope: &mut Scope<'_, T>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let conv = Conv2dLayer::new(&mut scope.child("conv"), cin, cout, kernel, stride);
        let bn = BatchNorm2d::new(&mut scope.child("bn"), cout);
        ConvBlock { conv, bn }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let y = self.conv.forward(g, ps, x)?;
        let y = self.bn.forward(g, ps, y, mode)?;
        Ok(g.relu(y))
    }
}

/// Two conv blocks plus an identity (or projected) shortcut; no activation
/// after the addition, so a zeroed branch passes the input through exactly.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub cb1: ConvBlock,
    pub conv2: Conv2dLayer,
    pub bn2: BatchNorm2d,
    pub shortcut: Option<(Conv2dLayer, BatchNorm2d)>,
}

impl ResidualBlock {
    pub fn new<T: Scalar>(
        scope: &mut Scope<'_, T>,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let cb1 = ConvBlock::new(&mut scope.child("cb1"), cin, cout, 3, stride);
        let conv2 = Conv2dLayer::new(&mut scope.child("conv2"), cout, cout, 3, 1);
        let bn2 = BatchNorm2d::new(&mut scope.child("bn2"), cout);
        let shortcut = if cin != cout || stride != 1 {
            let sc = Conv2dLayer::new(&mut scope.child("shortcut.conv"), cin, cout, 1, stride);
            let sbn = BatchNorm2d::new(&mut scope.child("shortcut.bn"), cout);
            Some((sc, sbn))
        } else {
            None
        };
        ResidualBlock { cb1, conv2, bn2, shortcut }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let branch = self.cb1.forward(g, ps, x, mode)?;
        let branch = self.conv2.forward(g, ps, branch)?;
        let branch = self.bn2.forward(g, ps, branch, mode)?;
        let short = match &self.shortcut {
            Some((sc, sbn)) => {
                let s = sc.forward(g, ps, x)?;
                sbn.forward(g, ps, s, mode)?
            }
            None => x,
        };
        g.add(branch, short)
    }
}
