//! Hourglass encoder-decoder with within-hourglass skip connections and
//! tap points on the main path.
//!
//! Main-path residual blocks are indexed in execution order; for depth `D`
//! there are `4D + 2` of them:
//!
//! ```text
//! index            block        scale (vs. hourglass input)
//! 2d               down_a[d]    1 / 2^(d+1)   (stride-2, widens channels)
//! 2d + 1           down_b[d]    1 / 2^(d+1)
//! 2D, 2D+1         bottleneck   1 / 2^D
//! 2D+2 + 2(D-1-d)  up_a[d]      1 / 2^d       (after upsample + skip add)
//! ... + 1          up_b[d]      1 / 2^d
//! ```
//!
//! The per-level skip branch (one residual block at each scale) and the 1x1
//! channel-mapping conv blocks in the decoder are not part of the indexed
//! main path. Decoder blocks at level `d` see the skip feature `S_d` of the
//! same shape, which injection callbacks may consume.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvBlock, Mode, ResidualBlock};
use crate::params::{ParamStore, Scope};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HourglassConfig {
    pub depth: usize,
    /// Channel count per level; `channels[depth]` is the bottleneck width.
    pub channels: Vec<usize>,
    /// Main-path indices this hourglass exposes as taps (LR role).
    pub lr_taps: Vec<usize>,
    /// Main-path indices accepting injections (HR role).
    pub hr_taps: Vec<usize>,
}

/// Static description of one main-path block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockInfo {
    pub index: usize,
    pub channels: usize,
    /// Spatial divisor relative to the hourglass input.
    pub scale_div: usize,
    /// `Some(level)` for decoder blocks (which have a skip feature `S`).
    pub decoder_level: Option<usize>,
}

impl HourglassConfig {
    /// Desk-scale default: depth 3, channels (32, 48, 64, 80); the LR side
    /// exposes all main-path blocks except the first and last two, the HR
    /// side accepts injections everywhere except the first two and last three.
    pub fn desk() -> Self {
        Self::with_policies(3, vec![32, 48, 64, 80], 1, 2, 2, 3)
    }

    pub fn with_policies(
        depth: usize,
        channels: Vec<usize>,
        lr_skip_first: usize,
        lr_skip_last: usize,
        hr_skip_first: usize,
        hr_skip_last: usize,
    ) -> Self {
        let n = 4 * depth + 2;
        let lr_taps = (lr_skip_first..n - lr_skip_last).collect();
        let hr_taps = (hr_skip_first..n - hr_skip_last).collect();
        HourglassConfig { depth, channels, lr_taps, hr_taps }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::config("hourglass depth must be >= 1"));
        }
        if self.channels.len() != self.depth + 1 {
            return Err(Error::config(format!(
                "hourglass needs {} channel entries, got {}",
                self.depth + 1,
                self.channels.len()
            )));
        }
        let n = self.main_path_len();
        for &t in self.lr_taps.iter().chain(&self.hr_taps) {
            if t >= n {
                return Err(Error::config(format!("tap index {t} out of {n} blocks")));
            }
        }
        Ok(())
    }

    pub fn main_path_len(&self) -> usize {
        4 * self.depth + 2
    }

    /// Channels / scale / role of every main-path block, in index order.
    pub fn main_path(&self) -> Vec<BlockInfo> {
        let d = self.depth;
        let mut out = Vec::with_capacity(self.main_path_len());
        for level in 0..d {
            let div = 1 << (level + 1);
            for k in 0..2 {
                out.push(BlockInfo {
                    index: 2 * level + k,
                    channels: self.channels[level + 1],
                    scale_div: div,
                    decoder_level: None,
                });
            }
        }
        for k in 0..2 {
            out.push(BlockInfo {
                index: 2 * d + k,
                channels: self.channels[d],
                scale_div: 1 << d,
                decoder_level: None,
            });
        }
        for level in (0..d).rev() {
            let base = 2 * d + 2 + 2 * (d - 1 - level);
            for k in 0..2 {
                out.push(BlockInfo {
                    index: base + k,
                    channels: self.channels[level],
                    scale_div: 1 << level,
                    decoder_level: Some(level),
                });
            }
        }
        out
    }

    /// Taps exposed by the LR role that the HR role also accepts; this is the
    /// set actually linked across hourglasses.
    pub fn linked_taps(&self) -> Vec<usize> {
        self.lr_taps
            .iter()
            .copied()
            .filter(|t| self.hr_taps.contains(t))
            .collect()
    }
}

/// Context handed to the block callback during a forward pass.
pub struct TapContext {
    pub info: BlockInfo,
    /// Within-hourglass skip feature of matching shape (decoder blocks only).
    pub skip: Option<Var>,
}

pub struct Hourglass {
    pub cfg: HourglassConfig,
    skip: Vec<ResidualBlock>,
    down_a: Vec<ResidualBlock>,
    down_b: Vec<ResidualBlock>,
    map_cb: Vec<ConvBlock>,
    up_a: Vec<ResidualBlock>,
    up_b: Vec<ResidualBlock>,
    bneck: Vec<ResidualBlock>,
}

impl Hourglass {
    pub fn new<T: Scalar>(scope: &mut Scope<'_, T>, cfg: HourglassConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = &cfg.channels;
        let mut skip = Vec::new();
        let mut down_a = Vec::new();
        let mut down_b = Vec::new();
        let mut map_cb = Vec::new();
        let mut up_a = Vec::new();
        let mut up_b = Vec::new();
        for d in 0..cfg.depth {
            skip.push(ResidualBlock::new(&mut scope.child(&format!("skip{d}")), ch[d], ch[d], 1));
            down_a.push(ResidualBlock::new(
                &mut scope.child(&format!("down{d}a")),
                ch[d],
                ch[d + 1],
                2,
            ));
            down_b.push(ResidualBlock::new(
                &mut scope.child(&format!("down{d}b")),
                ch[d + 1],
                ch[d + 1],
                1,
            ));
            map_cb.push(ConvBlock::new(&mut scope.child(&format!("map{d}")), ch[d + 1], ch[d], 1, 1));
            up_a.push(ResidualBlock::new(&mut scope.child(&format!("up{d}a")), ch[d], ch[d], 1));
            up_b.push(ResidualBlock::new(&mut scope.child(&format!("up{d}b")), ch[d], ch[d], 1));
        }
        let bneck = vec![
            ResidualBlock::new(&mut scope.child("bneck1"), ch[cfg.depth], ch[cfg.depth], 1),
            ResidualBlock::new(&mut scope.child("bneck2"), ch[cfg.depth], ch[cfg.depth], 1),
        ];
        Ok(Hourglass { cfg, skip, down_a, down_b, map_cb, up_a, up_b, bneck })
    }

    /// Forward pass invoking `on_block` at every main-path residual block.
    /// The callback may replace the block output (shape must be preserved);
    /// returning it unchanged gives the plain hourglass. Also returns the
    /// (post-callback) values of every main-path block, indexed by position.
    pub fn forward<T: Scalar, F>(
        &self,
        g: &mut Graph<T>,
        ps: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
        mut on_block: F,
    ) -> Result<(Var, Vec<Var>)>
    where
        F: FnMut(&mut Graph<T>, &mut ParamStore<T>, &TapContext, Var) -> Result<Var>,
    {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.channels[0] {
            return Err(Error::shape(format!(
                "hourglass input {:?}, expected channels {}",
                shape, self.cfg.channels[0]
            )));
        }
        let div = 1 << self.cfg.depth;
        if shape[2] % div != 0 || shape[3] % div != 0 {
            return Err(Error::shape(format!(
                "hourglass input {}x{} not divisible by 2^{}",
                shape[2], shape[3], self.cfg.depth
            )));
        }
        let infos = self.cfg.main_path();
        let mut taps = vec![x; infos.len()]; // placeholder, overwritten below
        let out = self.level_forward(g, ps, x, 0, mode, &mut on_block, &infos, &mut taps)?;
        Ok((out, taps))
    }

    #[allow(clippy::too_many_arguments)]
    fn level_forward<T: Scalar, F>(
        &self,
        g: &mut Graph<T>,
        ps: &mut ParamStore<T>,
        x: Var,
        level: usize,
        mode: Mode,
        on_block: &mut F,
        infos: &[BlockInfo],
        taps: &mut [Var],
    ) -> Result<Var>
    where
        F: FnMut(&mut Graph<T>, &mut ParamStore<T>, &TapContext, Var) -> Result<Var>,
    {
        let d = self.cfg.depth;
        if level == d {
            let mut y = x;
            for (k, rb) in self.bneck.iter().enumerate() {
                y = self.run_block(g, ps, rb, 2 * d + k, y, None, mode, on_block, infos, taps)?;
            }
            return Ok(y);
        }

        let s = self.skip[level].forward(g, ps, x, mode)?;
        let mut y =
            self.run_block(g, ps, &self.down_a[level], 2 * level, x, None, mode, on_block, infos, taps)?;
        y = self.run_block(g, ps, &self.down_b[level], 2 * level + 1, y, None, mode, on_block, infos, taps)?;
        y = self.level_forward(g, ps, y, level + 1, mode, on_block, infos, taps)?;
        y = self.map_cb[level].forward(g, ps, y, mode)?;
        y = g.upsample_nearest_2x(y)?;
        y = g.add(y, s)?;
        let base = 2 * d + 2 + 2 * (d - 1 - level);
        y = self.run_block(g, ps, &self.up_a[level], base, y, Some(s), mode, on_block, infos, taps)?;
        y = self.run_block(g, ps, &self.up_b[level], base + 1, y, Some(s), mode, on_block, infos, taps)?;
        Ok(y)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_block<T: Scalar, F>(
        &self,
        g: &mut Graph<T>,
        ps: &mut ParamStore<T>,
        rb: &ResidualBlock,
        index: usize,
        input: Var,
        skip: Option<Var>,
        mode: Mode,
        on_block: &mut F,
        infos: &[BlockInfo],
        taps: &mut [Var],
    ) -> Result<Var>
    where
        F: FnMut(&mut Graph<T>, &mut ParamStore<T>, &TapContext, Var) -> Result<Var>,
    {
        let raw = rb.forward(g, ps, input, mode)?;
        let ctx = TapContext { info: infos[index], skip };
        let replaced = on_block(g, ps, &ctx, raw)?;
        if g.shape(replaced) != g.shape(raw) {
            return Err(Error::shape(format!(
                "injection at block {index} changed shape {:?} -> {:?}",
                g.shape(raw),
                g.shape(replaced)
            )));
        }
        taps[index] = replaced;
        Ok(replaced)
    }
}

/// Identity callback: taps recorded, nothing replaced.
pub fn no_injection<T: Scalar>(
    _g: &mut Graph<T>,
    _ps: &mut ParamStore<T>,
    _ctx: &TapContext,
    out: Var,
) -> Result<Var> {
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::probe_loss;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> HourglassConfig {
        HourglassConfig::with_policies(2, vec![4, 6, 8], 1, 2, 2, 3)
    }

    fn build<T: Scalar>(cfg: &HourglassConfig, seed: u64) -> (crate::params::ParamStore<T>, Hourglass) {
        let mut store = crate::params::ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scope = Scope::new(&mut store, &mut rng);
        let hg = Hourglass::new(&mut scope.child("hg"), cfg.clone()).unwrap();
        (store, hg)
    }

    fn randx(shape: &[usize], seed: u64) -> ArrayD<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn main_path_layout_matches_documentation() {
        let cfg = HourglassConfig::desk();
        assert_eq!(cfg.main_path_len(), 14);
        let info = cfg.main_path();
        let divs: Vec<usize> = info.iter().map(|b| b.scale_div).collect();
        assert_eq!(divs, vec![2, 2, 4, 4, 8, 8, 8, 8, 4, 4, 2, 2, 1, 1]);
        let chans: Vec<usize> = info.iter().map(|b| b.channels).collect();
        assert_eq!(chans, vec![48, 48, 64, 64, 80, 80, 80, 80, 64, 64, 48, 48, 32, 32]);
        assert_eq!(cfg.lr_taps, (1..12).collect::<Vec<_>>());
        assert_eq!(cfg.hr_taps, (2..11).collect::<Vec<_>>());
        assert_eq!(cfg.linked_taps(), (2..11).collect::<Vec<_>>());
        // Linked set includes decoder blocks (attention with S).
        assert!(info[10].decoder_level.is_some());
        assert!(info[8].decoder_level == Some(2));
        assert!(info[7].decoder_level.is_none());
    }

    #[test]
    fn output_shape_matches_input_and_taps_follow_scales() {
        let cfg = tiny_cfg();
        let (mut store, hg) = build::<f64>(&cfg, 1);
        let mut g = Graph::<f64>::new();
        let x = g.constant(randx(&[1, 4, 8, 8], 2));
        let (out, taps) = hg.forward(&mut g, &mut store, x, Mode::Train, no_injection).unwrap();
        assert_eq!(g.shape(out), &[1, 4, 8, 8]);
        for info in cfg.main_path() {
            let v = taps[info.index];
            assert_eq!(
                g.shape(v),
                &[1, info.channels, 8 / info.scale_div, 8 / info.scale_div],
                "block {}",
                info.index
            );
        }
    }

    #[test]
    fn forward_is_deterministic_and_identity_injection_is_exact() {
        let cfg = tiny_cfg();
        let (mut store, hg) = build::<f64>(&cfg, 3);
        let x0 = randx(&[2, 4, 8, 8], 4);

        let mut g1 = Graph::<f64>::new();
        let x = g1.constant(x0.clone());
        let (o1, _) = hg.forward(&mut g1, &mut store, x, Mode::Eval, no_injection).unwrap();

        let mut g2 = Graph::<f64>::new();
        let x = g2.constant(x0.clone());
        let (o2, _) = hg
            .forward(&mut g2, &mut store, x, Mode::Eval, |_g, _ps, _ctx, out| Ok(out))
            .unwrap();

        assert_eq!(g1.value(o1), g2.value(o2));

        let mut g3 = Graph::<f64>::new();
        let x = g3.constant(x0);
        let (o3, _) = hg.forward(&mut g3, &mut store, x, Mode::Eval, no_injection).unwrap();
        assert_eq!(g1.value(o1), g3.value(o3));
    }

    #[test]
    fn injection_shape_change_is_rejected_with_block_index() {
        let cfg = tiny_cfg();
        let (mut store, hg) = build::<f64>(&cfg, 5);
        let mut g = Graph::<f64>::new();
        let x = g.constant(randx(&[1, 4, 8, 8], 6));
        let err = hg
            .forward(&mut g, &mut store, x, Mode::Train, |g, _ps, ctx, out| {
                if ctx.info.index == 3 {
                    g.avg_pool_2x2(out)
                } else {
                    Ok(out)
                }
            })
            .unwrap_err();
        assert!(err.to_string().contains("block 3"), "{err}");
    }

    #[test]
    fn input_shape_violations_are_rejected() {
        let cfg = tiny_cfg();
        let (mut store, hg) = build::<f64>(&cfg, 7);
        let mut g = Graph::<f64>::new();
        // Not divisible by 2^depth.
        let x = g.constant(randx(&[1, 4, 6, 6], 8));
        assert!(hg.forward(&mut g, &mut store, x, Mode::Train, no_injection).is_err());
        // Wrong channel count.
        let x = g.constant(randx(&[1, 3, 8, 8], 9));
        assert!(hg.forward(&mut g, &mut store, x, Mode::Train, no_injection).is_err());
    }

    #[test]
    fn residual_block_zeroed_branch_is_identity() {
        let mut store = crate::params::ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut scope = Scope::new(&mut store, &mut rng);
        let rb = ResidualBlock::new(&mut scope.child("rb"), 3, 3, 1);
        // Zero the branch weights; matching channels means identity shortcut.
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.name(id).starts_with("rb.") && store.name(id).ends_with("weight") {
                store.value_mut(id).fill(0.0);
            }
        }
        let mut g = Graph::<f64>::new();
        let x0 = randx(&[1, 3, 4, 4], 2);
        let x = g.constant(x0.clone());
        let y = rb.forward(&mut g, &mut store, x, Mode::Train).unwrap();
        assert_eq!(g.value(y), &x0);
    }

    #[test]
    fn conv_block_zero_input_zero_bias_gives_zero_output() {
        let mut store = crate::params::ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut scope = Scope::new(&mut store, &mut rng);
        let cb = ConvBlock::new(&mut scope.child("cb"), 2, 5, 3, 1);
        let mut g = Graph::<f64>::new();
        let x = g.constant(ArrayD::zeros(IxDyn(&[1, 2, 4, 4])));
        let y = cb.forward(&mut g, &mut store, x, Mode::Train).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_block_shape_contracts() {
        let mut store = crate::params::ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut scope = Scope::new(&mut store, &mut rng);
        let cb = ConvBlock::new(&mut scope.child("cb"), 8, 16, 3, 1);
        let cb2 = ConvBlock::new(&mut scope.child("cb2"), 16, 16, 3, 2);
        let mut g = Graph::<f64>::new();
        let x = g.constant(randx(&[1, 8, 16, 16], 3));
        let y = cb.forward(&mut g, &mut store, x, Mode::Train).unwrap();
        assert_eq!(g.shape(y), &[1, 16, 16, 16]);
        let z = cb2.forward(&mut g, &mut store, y, Mode::Train).unwrap();
        assert_eq!(g.shape(z), &[1, 16, 8, 8]);
        // Channel mismatch is a shape error.
        let bad = g.constant(randx(&[1, 3, 16, 16], 4));
        assert!(cb.forward(&mut g, &mut store, bad, Mode::Train).is_err());
    }

    #[test]
    fn residual_block_gradcheck() {
        let report = crate::gradcheck::check_groups(
            "residual_block",
            &[("x", randx(&[1, 2, 4, 4], 10))],
            1e-5,
            1e-4,
            |g, vals| {
                let mut store = crate::params::ParamStore::<f64>::new();
                let mut rng = ChaCha8Rng::seed_from_u64(11);
                let mut scope = Scope::new(&mut store, &mut rng);
                let rb = ResidualBlock::new(&mut scope.child("rb"), 2, 2, 1);
                let x = g.input(vals[0].clone())?;
                let y = rb.forward(g, &mut store, x, Mode::Train)?;
                let s = probe_loss(g, y)?;
                Ok((s, vec![x]))
            },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn hourglass_gradcheck_small() {
        let cfg = HourglassConfig::with_policies(1, vec![2, 3], 1, 2, 2, 3);
        let report = crate::gradcheck::check_groups(
            "hourglass",
            &[("x", randx(&[1, 2, 4, 4], 12))],
            1e-5,
            1e-4,
            |g, vals| {
                let (mut store, hg) = build::<f64>(&cfg, 13);
                let x = g.input(vals[0].clone())?;
                let (y, _) = hg.forward(g, &mut store, x, Mode::Train, no_injection)?;
                let s = probe_loss(g, y)?;
                Ok((s, vec![x]))
            },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
