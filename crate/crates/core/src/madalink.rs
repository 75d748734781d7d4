//! The between-hourglass skip connection: deformable convolution applied to
//! internal LR features, and scaled-dot-product attention that fuses them
//! into internal HR features.
//!
//! Q and V are linear transforms of the HR tap; K is a linear transform of
//! the deformed LR tap bilinearly upsampled to the HR grid so Q, K, and V all
//! carry one token per HR position (the LR features act as a guide weighting
//! the HR features). The decoder variant adds the within-hourglass skip S to
//! the attention result.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Conv2dLayer;
use crate::params::{ParamId, ParamStore, Scope};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AttentionConfig {
    /// Embedding dimension of the Q/K/V projections.
    pub d_k: usize,
    /// Hard cap on token count (HR positions) per attention site.
    pub max_tokens: usize,
    /// When over the cap, average-pool Q/V 2x2 (and skip upsampling K)
    /// instead of erroring.
    pub pool_over_capacity: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig { d_k: 32, max_tokens: 4096, pool_over_capacity: false }
    }
}

/// 3x3 deformable convolution; the offset predictor is zero-initialized so an
/// untrained layer equals a standard convolution.
#[derive(Debug, Clone)]
pub struct DeformableConv2d {
    pub offset_conv: Conv2dLayer,
    pub weight: ParamId,
    pub bias: ParamId,
    channels_in: usize,
    channels_out: usize,
}

impl DeformableConv2d {
    pub fn new<T: Scalar>(scope: &mut Scope<'_, T>, cin: usize, cout: usize) -> Self {
        let offset_conv = Conv2dLayer::new_zeroed(&mut scope.child("offset"), cin, 18, 3);
        let weight = scope.he_normal("weight", &[cout, cin, 3, 3], cin * 9);
        let bias = scope.zeros("bias", &[cout]);
        DeformableConv2d { offset_conv, weight, bias, channels_in: cin, channels_out: cout }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != self.channels_in {
            return Err(Error::shape(format!(
                "deformable_conv: input {:?}, expected {} channels",
                shape, self.channels_in
            )));
        }
        let offsets = self.offset_conv.forward(g, ps, x)?;
        let cols = g.deform_im2col(x, offsets, 3, 1)?;
        let w = g.param(ps, self.weight);
        let w_flat = g.reshape(w, &[self.channels_out, self.channels_in * 9, 1, 1])?;
        let b = g.param(ps, self.bias);
        g.conv2d(cols, w_flat, Some(b), 1, 0)
    }
}

/// Scaled-dot-product attention between one HR tap and its deformed LR tap.
#[derive(Debug, Clone)]
pub struct MultiscaleAttention {
    pub q_proj: Conv2dLayer,
    pub k_proj: Conv2dLayer,
    pub v_proj: Conv2dLayer,
    pub out_proj: Conv2dLayer,
    channels: usize,
    d_k: usize,
}

impl MultiscaleAttention {
    pub fn new<T: Scalar>(scope: &mut Scope<'_, T>, channels: usize, d_k: usize) -> Self {
        MultiscaleAttention {
            q_proj: Conv2dLayer::new(&mut scope.child("q"), channels, d_k, 1, 1),
            k_proj: Conv2dLayer::new(&mut scope.child("k"), channels, d_k, 1, 1),
            v_proj: Conv2dLayer::new(&mut scope.child("v"), channels, d_k, 1, 1),
            out_proj: Conv2dLayer::new(&mut scope.child("out"), d_k, channels, 1, 1),
            channels,
            d_k,
        }
    }

    /// Encoder form (`skip = None`) or decoder form (`skip = Some(S)`, added
    /// to the attention output). Also returns the attention weights
    /// `[B, N, N]` for inspection.
    pub fn forward_detailed<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        hr_tap: Var,
        lr_deformed: Var,
        skip: Option<Var>,
        cfg: &AttentionConfig,
    ) -> Result<(Var, Var)> {
        let hs = g.shape(hr_tap).to_vec();
        let ls = g.shape(lr_deformed).to_vec();
        if hs.len() != 4 || hs[1] != self.channels {
            return Err(Error::shape(format!(
                "attention: hr tap {:?}, expected {} channels",
                hs, self.channels
            )));
        }
        if ls != [hs[0], hs[1], hs[2] / 2, hs[3] / 2] || hs[2] % 2 != 0 || hs[3] % 2 != 0 {
            return Err(Error::shape(format!(
                "attention: lr tap {ls:?} must be exactly half of hr tap {hs:?}"
            )));
        }
        if let Some(s) = skip {
            if g.shape(s) != hs.as_slice() {
                return Err(Error::shape(format!(
                    "attention: skip {:?} vs hr tap {:?}",
                    g.shape(s),
                    hs
                )));
            }
        }

        let tokens = hs[2] * hs[3];
        let (q_src, v_src, k_src, pooled) = if tokens > cfg.max_tokens {
            if !cfg.pool_over_capacity {
                return Err(Error::Capacity { tokens, max_tokens: cfg.max_tokens });
            }
            let pooled_tokens = tokens / 4;
            if pooled_tokens > cfg.max_tokens {
                return Err(Error::Capacity { tokens: pooled_tokens, max_tokens: cfg.max_tokens });
            }
            let q = g.avg_pool_2x2(hr_tap)?;
            (q, q, lr_deformed, true)
        } else {
            let k = g.upsample_bilinear_2x(lr_deformed)?;
            (hr_tap, hr_tap, k, false)
        };

        let (th, tw) = {
            let s = g.shape(q_src);
            (s[2], s[3])
        };
        let q = self.q_proj.forward(g, ps, q_src)?;
        let k = self.k_proj.forward(g, ps, k_src)?;
        let v = self.v_proj.forward(g, ps, v_src)?;
        let qt = g.spatial_to_tokens(q)?;
        let kt = g.spatial_to_tokens(k)?;
        let vt = g.spatial_to_tokens(v)?;
        let scores = g.batch_matmul(qt, kt, true)?;
        let scaled = g.scale(scores, T::one() / T::c(self.d_k as f64).sqrt());
        let attn = g.softmax_last(scaled);
        let mixed = g.batch_matmul(attn, vt, false)?;
        let spatial = g.tokens_to_spatial(mixed, th, tw)?;
        let mut out = self.out_proj.forward(g, ps, spatial)?;
        if pooled {
            out = g.upsample_bilinear_2x(out)?;
        }
        if let Some(s) = skip {
            out = g.add(out, s)?;
        }
        Ok((out, attn))
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        hr_tap: Var,
        lr_deformed: Var,
        skip: Option<Var>,
        cfg: &AttentionConfig,
    ) -> Result<Var> {
        self.forward_detailed(g, ps, hr_tap, lr_deformed, skip, cfg)
            .map(|(out, _)| out)
    }
}
