//! Conditional building blocks: the dual-path conditional block (DPCB), the
//! dual-path conditional group (DPCG), and the older conditional residual
//! block (CRB) kept for ablations.
//!
//! Both network modules take a *basic* input that stays fixed across
//! unrolled iterations and a *conditional* input that is refreshed every
//! iteration. A DPCB processes the two independently and couples them by an
//! elementwise product, so a `1×1` conditional input is convolved at `1×1`
//! and only broadcast at the product.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DanError, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Negative slope of every leaky rectifier in the blocks.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Initial scale applied to the last convolution of each residual branch.
pub const RESIDUAL_INIT_SCALE: f64 = 0.1;

/// A 2-D convolution layer with bias and "same" zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Kaiming fan-in initialization for a leaky-rectifier network, scaled
    /// by `gain`; biases start at zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gain: f64,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let std = gain * (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE) / fan_in).sqrt();
        let w = Tensor::from_vec(
            [out_channels, in_channels, kernel, kernel],
            (0..out_channels * in_channels * kernel * kernel)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )
        .expect("shape");
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_channels, 1, 1, 1]));
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    /// Stride-1 convolution that preserves spatial size (odd `kernel`).
    pub fn same<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        gain: f64,
    ) -> Self {
        Self::new(store, rng, name, in_channels, out_channels, kernel, 1, kernel / 2, gain)
    }

    pub fn forward(&self, g: &mut Graph, x: &Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, &w, Some(&b), self.stride, self.pad)
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * (self.in_channels * self.kernel * self.kernel + 1)
    }
}

/// Channel counts, kernel sizes, and strides of one conditional block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub c_basic: usize,
    pub c_cond: usize,
    pub k_b: usize,
    pub k_c: usize,
    pub s_b: usize,
    pub s_c: usize,
}

impl BlockConfig {
    pub fn new(channels: usize, k_b: usize, k_c: usize) -> Self {
        BlockConfig {
            c_basic: channels,
            c_cond: channels,
            k_b,
            k_c,
            s_b: 1,
            s_c: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_basic == 0 || self.c_cond == 0 {
            return Err(DanError::Config("block channel counts must be positive".into()));
        }
        if self.k_b.is_multiple_of(2) || self.k_c.is_multiple_of(2) {
            return Err(DanError::Config(format!("block kernel sizes must be odd, got {} and {}", self.k_b, self.k_c)));
        }
        if self.s_b != 1 || self.s_c != 1 {
            return Err(DanError::Config(format!(
                "block strides must be 1 for the residual paths, got {} and {}",
                self.s_b, self.s_c
            )));
        }
        Ok(())
    }
}

fn check_pair(cfg: &BlockConfig, basic: &Var, cond: &Var, cond_channels: usize) -> Result<()> {
    let [n, c, h, w] = basic.shape();
    let [cn, cc, ch, cw] = cond.shape();
    if c != cfg.c_basic {
        return Err(DanError::Shape(format!("basic input has {c} channels, block expects {}", cfg.c_basic)));
    }
    if cn != n || cc != cond_channels {
        return Err(DanError::Shape(format!(
            "conditional input {:?} incompatible with basic {:?}",
            cond.shape(),
            basic.shape()
        )));
    }
    if !((ch, cw) == (h, w) || (ch, cw) == (1, 1)) {
        return Err(DanError::Shape(format!(
            "conditional spatial size {ch}×{cw} must equal {h}×{w} or be 1×1"
        )));
    }
    Ok(())
}

/// Dual-path conditional block.
///
/// ```text
/// cond'  = cond  + conv_c2(lrelu(conv_c1(cond)))
/// basic' = basic + conv_b2(lrelu(conv_b1(basic))) ⊙ cond'
/// ```
#[derive(Clone, Debug)]
pub struct Dpcb {
    pub config: BlockConfig,
    pub cond1: Conv2d,
    pub cond2: Conv2d,
    pub basic1: Conv2d,
    pub basic2: Conv2d,
}

impl Dpcb {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, config: BlockConfig) -> Result<Self> {
        config.validate()?;
        if config.c_cond != config.c_basic {
            return Err(DanError::Config(format!(
                "DPCB multiplies the two paths, so c_cond ({}) must equal c_basic ({})",
                config.c_cond, config.c_basic
            )));
        }
        let (cb, cc) = (config.c_basic, config.c_cond);
        Ok(Dpcb {
            config,
            cond1: Conv2d::same(store, rng, &format!("{name}.cond1"), cc, cc, config.k_c, 1.0),
            cond2: Conv2d::same(store, rng, &format!("{name}.cond2"), cc, cc, config.k_c, RESIDUAL_INIT_SCALE),
            basic1: Conv2d::same(store, rng, &format!("{name}.basic1"), cb, cb, config.k_b, 1.0),
            basic2: Conv2d::same(store, rng, &format!("{name}.basic2"), cb, cb, config.k_b, RESIDUAL_INIT_SCALE),
        })
    }

    /// The conditional path with its skip, at the input's own spatial size.
    pub fn cond_path(&self, g: &mut Graph, cond: &Var) -> Result<Var> {
        let h = self.cond1.forward(g, cond)?;
        let h = g.leaky_relu(&h, LEAKY_SLOPE);
        let h = self.cond2.forward(g, &h)?;
        g.add(cond, &h)
    }

    /// The basic path's residual branch (before conditioning).
    pub fn basic_path(&self, g: &mut Graph, basic: &Var) -> Result<Var> {
        let h = self.basic1.forward(g, basic)?;
        let h = g.leaky_relu(&h, LEAKY_SLOPE);
        self.basic2.forward(g, &h)
    }

    pub fn forward(&self, g: &mut Graph, basic: &Var, cond: &Var) -> Result<(Var, Var)> {
        check_pair(&self.config, basic, cond, self.config.c_cond)?;
        let cond_out = self.cond_path(g, cond)?;
        let res = self.basic_path(g, basic)?;
        let modulated = g.mul(&res, &cond_out)?;
        let basic_out = g.add(basic, &modulated)?;
        Ok((basic_out, cond_out))
    }

    pub fn num_params(&self) -> usize {
        self.cond1.num_params() + self.cond2.num_params() + self.basic1.num_params() + self.basic2.num_params()
    }
}

/// A chain of DPCBs wrapped by a long skip connection:
/// `basic' = basic + conv_tail(chain(basic))`.
///
/// Without the long skip the group is the bare chain.
#[derive(Clone, Debug)]
pub struct Dpcg {
    pub blocks: Vec<Dpcb>,
    pub tail: Option<Conv2d>,
}

impl Dpcg {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        config: BlockConfig,
        n_blocks: usize,
        long_skip: bool,
    ) -> Result<Self> {
        if n_blocks == 0 {
            return Err(DanError::Config("a group needs at least one block".into()));
        }
        let blocks = (0..n_blocks)
            .map(|i| Dpcb::new(store, rng, &format!("{name}.block{i}"), config))
            .collect::<Result<Vec<_>>>()?;
        let tail = long_skip.then(|| {
            Conv2d::same(store, rng, &format!("{name}.tail"), config.c_basic, config.c_basic, config.k_b, RESIDUAL_INIT_SCALE)
        });
        Ok(Dpcg { blocks, tail })
    }

    pub fn has_long_skip(&self) -> bool {
        self.tail.is_some()
    }

    pub fn forward(&self, g: &mut Graph, basic: &Var, cond: &Var) -> Result<(Var, Var)> {
        let (mut b, mut c) = (basic.clone(), cond.clone());
        for block in &self.blocks {
            (b, c) = block.forward(g, &b, &c)?;
        }
        match &self.tail {
            Some(tail) => {
                let t = tail.forward(g, &b)?;
                Ok((g.add(basic, &t)?, c))
            }
            None => Ok((b, c)),
        }
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(Dpcb::num_params).sum::<usize>() + self.tail.as_ref().map_or(0, Conv2d::num_params)
    }
}

/// Conditional residual block with channel attention.
///
/// The conditional input is expanded to the basic input's size and
/// concatenated with it; the conditional input itself passes through
/// unchanged.
#[derive(Clone, Debug)]
pub struct Crb {
    pub config: BlockConfig,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub attn_down: Conv2d,
    pub attn_up: Conv2d,
}

/// Channel reduction inside the attention squeeze.
pub const CRB_ATTENTION_REDUCTION: usize = 16;

impl Crb {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, config: BlockConfig) -> Result<Self> {
        config.validate()?;
        let (cb, cc) = (config.c_basic, config.c_cond);
        let squeezed = (cb / CRB_ATTENTION_REDUCTION).max(1);
        Ok(Crb {
            config,
            conv1: Conv2d::same(store, rng, &format!("{name}.conv1"), cb + cc, cb, config.k_b, 1.0),
            conv2: Conv2d::same(store, rng, &format!("{name}.conv2"), cb, cb, config.k_b, RESIDUAL_INIT_SCALE),
            attn_down: Conv2d::same(store, rng, &format!("{name}.attn_down"), cb, squeezed, 1, 1.0),
            attn_up: Conv2d::same(store, rng, &format!("{name}.attn_up"), squeezed, cb, 1, 1.0),
        })
    }

    pub fn forward(&self, g: &mut Graph, basic: &Var, cond: &Var) -> Result<Var> {
        check_pair(&self.config, basic, cond, self.config.c_cond)?;
        let [_, _, h, w] = basic.shape();
        let cond_full = if cond.shape()[2..] == [1, 1] && (h, w) != (1, 1) {
            g.expand(cond, h, w)?
        } else {
            cond.clone()
        };
        let x = g.concat(basic, &cond_full)?;
        let r = self.conv1.forward(g, &x)?;
        let r = g.leaky_relu(&r, LEAKY_SLOPE);
        let r = self.conv2.forward(g, &r)?;
        let s = g.global_avg_pool(&r);
        let s = self.attn_down.forward(g, &s)?;
        let s = g.relu(&s);
        let s = self.attn_up.forward(g, &s)?;
        let s = g.sigmoid(&s);
        let r = g.mul(&r, &s)?;
        g.add(basic, &r)
    }

    pub fn num_params(&self) -> usize {
        self.conv1.num_params() + self.conv2.num_params() + self.attn_down.num_params() + self.attn_up.num_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probe(shape: [usize; 4], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Scalar readout `Σ basic'·r1 + Σ cond'·r2` with fixed random weights.
    fn readout(g: &mut Graph, b: &Var, c: &Var) -> Result<Var> {
        let r1 = g.input(probe(b.shape(), 101));
        let r2 = g.input(probe(c.shape(), 102));
        let pb = g.mul(b, &r1)?;
        let pc = g.mul(c, &r2)?;
        let (sb, sc) = (g.sum(&pb), g.sum(&pc));
        g.add(&sb, &sc)
    }

    #[test]
    fn dpcb_preserves_shapes_with_pointwise_cond() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = Dpcb::new(&mut store, &mut rng, "b", BlockConfig::new(8, 3, 1)).unwrap();
        let mut g = Graph::new(&store);
        let basic = g.input(probe([2, 8, 5, 7], 1));
        let cond = g.input(probe([2, 8, 1, 1], 2));
        let (b, c) = block.forward(&mut g, &basic, &cond).unwrap();
        assert_eq!(b.shape(), basic.shape());
        assert_eq!(c.shape(), cond.shape());
        let bad = g.input(probe([2, 8, 2, 2], 3));
        assert!(block.forward(&mut g, &basic, &bad).is_err());
    }

    #[test]
    fn dpcb_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = Dpcb::new(&mut store, &mut rng, "b", BlockConfig::new(4, 3, 3)).unwrap();
        let (xb, xc) = (probe([1, 4, 6, 6], 3), probe([1, 4, 6, 6], 4));
        let report = check_params(
            &store,
            |g| {
                let b = g.input(xb.clone());
                let c = g.input(xc.clone());
                let (b, c) = block.forward(g, &b, &c)?;
                readout(g, &b, &c)
            },
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-3, "{report:?}");
    }

    #[test]
    fn dpcb_output_depends_on_condition() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = Dpcb::new(&mut store, &mut rng, "b", BlockConfig::new(4, 3, 1)).unwrap();
        let xb = probe([1, 4, 6, 6], 5);
        let c1 = probe([1, 4, 1, 1], 6);
        let mut c2 = c1.clone();
        c2.data_mut()[2] += 0.5;
        let run = |c: &Tensor| {
            let mut g = Graph::inference(&store);
            let b = g.input(xb.clone());
            let c = g.input(c.clone());
            block.forward(&mut g, &b, &c).unwrap().0.value().clone()
        };
        assert!(run(&c1).max_abs_diff(&run(&c2)) > 0.0);
    }

    #[test]
    fn zero_weights_make_group_an_identity_on_basic() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let group = Dpcg::new(&mut store, &mut rng, "g", BlockConfig::new(4, 3, 3), 3, true).unwrap();
        store.zero_where(|_| true);
        let mut g = Graph::inference(&store);
        let basic = g.input(probe([1, 4, 5, 5], 7));
        let cond = g.input(probe([1, 4, 5, 5], 8));
        let (b, _) = group.forward(&mut g, &basic, &cond).unwrap();
        assert_eq!(b.value(), basic.value());
    }

    #[test]
    fn single_block_group_is_block_then_long_skip() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let group = Dpcg::new(&mut store, &mut rng, "g", BlockConfig::new(4, 3, 3), 1, true).unwrap();
        let mut g = Graph::inference(&store);
        let basic = g.input(probe([1, 4, 5, 5], 9));
        let cond = g.input(probe([1, 4, 5, 5], 10));
        let (gb, gc) = group.forward(&mut g, &basic, &cond).unwrap();
        let (bb, bc) = group.blocks[0].forward(&mut g, &basic, &cond).unwrap();
        let t = group.tail.as_ref().unwrap().forward(&mut g, &bb).unwrap();
        let manual = g.add(&basic, &t).unwrap();
        assert_eq!(gb.value(), manual.value());
        assert_eq!(gc.value(), bc.value());
    }

    #[test]
    fn dpcg_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let group = Dpcg::new(&mut store, &mut rng, "g", BlockConfig::new(4, 3, 3), 2, true).unwrap();
        let (xb, xc) = (probe([1, 4, 6, 6], 11), probe([1, 4, 1, 1], 12));
        let report = check_params(
            &store,
            |g| {
                let b = g.input(xb.clone());
                let c = g.input(xc.clone());
                let (b, c) = group.forward(g, &b, &c)?;
                readout(g, &b, &c)
            },
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-3, "{report:?}");
    }

    #[test]
    fn crb_shapes_gradients_and_sensitivity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = BlockConfig {
            c_cond: 3,
            ..BlockConfig::new(4, 3, 3)
        };
        let crb = Crb::new(&mut store, &mut rng, "c", cfg).unwrap();
        let (xb, xc) = (probe([1, 4, 6, 6], 13), probe([1, 3, 1, 1], 14));
        let report = check_params(
            &store,
            |g| {
                let b = g.input(xb.clone());
                let c = g.input(xc.clone());
                let out = crb.forward(g, &b, &c)?;
                assert_eq!(out.shape(), [1, 4, 6, 6]);
                let r = g.input(probe(out.shape(), 15));
                let p = g.mul(&out, &r)?;
                Ok(g.sum(&p))
            },
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-3, "{report:?}");

        let mut xc2 = xc.clone();
        xc2.data_mut()[0] += 0.5;
        let run = |c: &Tensor| {
            let mut g = Graph::inference(&store);
            let b = g.input(xb.clone());
            let c = g.input(c.clone());
            crb.forward(&mut g, &b, &c).unwrap().value().clone()
        };
        assert!(run(&xc).max_abs_diff(&run(&xc2)) > 0.0);
    }

    #[test]
    fn pointwise_cond_path_cost_is_independent_of_image_size() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let block = Dpcb::new(&mut store, &mut rng, "b", BlockConfig::new(8, 3, 1)).unwrap();
        let cond_macs = |h: usize, w: usize| {
            let mut g = Graph::inference(&store);
            let cond = g.input(probe([1, 8, 1, 1], 16));
            let _ = g.input(probe([1, 8, h, w], 17));
            let before = g.macs();
            block.cond_path(&mut g, &cond).unwrap();
            g.macs() - before
        };
        assert_eq!(cond_macs(4, 4), cond_macs(32, 24));
        assert_eq!(cond_macs(4, 4), 2 * 8 * 8);
    }
}
