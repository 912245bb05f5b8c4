//! The Restorer, the Estimator, and the unfolded alternating network.
//!
//! Starting from a Dirac kernel, every iteration restores an SR image from
//! the LR image and the current (PCA-reduced) kernel, then re-estimates the
//! kernel from the LR/SR pair. The same parameters serve every iteration,
//! so the iteration count is a free inference-time choice.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockConfig, Conv2d, Crb, Dpcg, LEAKY_SLOPE};
use crate::error::{DanError, Result};
use crate::graph::{Graph, Var};
use crate::imaging::{ColorSpace, ImagePlane};
use crate::kernels::{dirac_kernel, BlurKernel, PcaBasis, ReducedKernel};
use crate::param::ParamStore;
use crate::tensor::Tensor;

/// Architecture variants of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Conditional residual blocks, reduced-kernel Estimator (row A).
    Crb,
    /// DPCBs without group long skips, reduced-kernel Estimator (row B).
    NoLongskip,
    /// DPCGs, reduced-kernel Estimator (row C).
    NoSoftmax,
    /// DPCGs with a Softmax complete-kernel Estimator (row D, default).
    Dpcb,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Crb, Ablation::NoLongskip, Ablation::NoSoftmax, Ablation::Dpcb];

    pub fn uses_crb(self) -> bool {
        self == Ablation::Crb
    }

    pub fn long_skip(self) -> bool {
        matches!(self, Ablation::NoSoftmax | Ablation::Dpcb)
    }

    /// Whether the Estimator emits a complete kernel through a Softmax.
    pub fn softmax(self) -> bool {
        self == Ablation::Dpcb
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Crb => "A",
            Ablation::NoLongskip => "B",
            Ablation::NoSoftmax => "C",
            Ablation::Dpcb => "D",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Crb => "crb",
            Ablation::NoLongskip => "no-longskip",
            Ablation::NoSoftmax => "no-softmax",
            Ablation::Dpcb => "dpcb",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = DanError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| DanError::Config(format!("unknown ablation {s:?} (expected dpcb, crb, no-softmax, no-longskip)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RestorerConfig {
    pub n_groups: usize,
    pub blocks_per_group: usize,
    pub channels: usize,
    pub scale: usize,
    pub reduced_dim: usize,
    /// Kernel size of the conditional path; the condition stays `1×1`.
    pub cond_kernel: usize,
    pub image_channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub n_groups: usize,
    pub blocks_per_group: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub scale: usize,
    pub image_channels: usize,
}

/// Full network configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub scale: usize,
    pub image_channels: usize,
    pub kernel_size: usize,
    pub reduced_dim: usize,
    pub restorer_groups: usize,
    pub restorer_blocks: usize,
    pub restorer_channels: usize,
    pub restorer_cond_kernel: usize,
    pub estimator_groups: usize,
    pub estimator_blocks: usize,
    pub estimator_channels: usize,
    pub ablation: Ablation,
    pub iterations: usize,
}

impl NetworkConfig {
    /// The published full-size configuration for `scale` and `kernel_size`.
    pub fn full(scale: usize, kernel_size: usize) -> Self {
        NetworkConfig {
            scale,
            image_channels: 3,
            kernel_size,
            reduced_dim: 10,
            restorer_groups: 5,
            restorer_blocks: 10,
            restorer_channels: 64,
            restorer_cond_kernel: 1,
            estimator_groups: 1,
            estimator_blocks: 5,
            estimator_channels: 32,
            ablation: Ablation::Dpcb,
            iterations: 4,
        }
    }

    /// The small configuration used for desk-scale training runs.
    pub fn toy(scale: usize, kernel_size: usize) -> Self {
        NetworkConfig {
            restorer_groups: 1,
            restorer_blocks: 3,
            restorer_channels: 16,
            estimator_groups: 1,
            estimator_blocks: 2,
            estimator_channels: 8,
            ..Self::full(scale, kernel_size)
        }
    }

    pub fn restorer(&self) -> RestorerConfig {
        RestorerConfig {
            n_groups: self.restorer_groups,
            blocks_per_group: self.restorer_blocks,
            channels: self.restorer_channels,
            scale: self.scale,
            reduced_dim: self.reduced_dim,
            cond_kernel: self.restorer_cond_kernel,
            image_channels: self.image_channels,
        }
    }

    pub fn estimator(&self) -> EstimatorConfig {
        EstimatorConfig {
            n_groups: self.estimator_groups,
            blocks_per_group: self.estimator_blocks,
            channels: self.estimator_channels,
            kernel_size: self.kernel_size,
            scale: self.scale,
            image_channels: self.image_channels,
        }
    }

    pub fn color(&self) -> Result<ColorSpace> {
        match self.image_channels {
            1 => Ok(ColorSpace::Y),
            3 => Ok(ColorSpace::Rgb),
            c => Err(DanError::Config(format!("image_channels must be 1 or 3, got {c}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.scale) {
            return Err(DanError::Config(format!("scale must be in 1..=4, got {}", self.scale)));
        }
        self.color()?;
        if self.kernel_size.is_multiple_of(2) {
            return Err(DanError::Config(format!("kernel_size must be odd, got {}", self.kernel_size)));
        }
        let counts = [
            self.reduced_dim,
            self.restorer_groups,
            self.restorer_blocks,
            self.restorer_channels,
            self.estimator_groups,
            self.estimator_blocks,
            self.estimator_channels,
            self.iterations,
        ];
        if counts.contains(&0) {
            return Err(DanError::Config("network counts must all be positive".into()));
        }
        if self.restorer_cond_kernel.is_multiple_of(2) {
            return Err(DanError::Config("restorer_cond_kernel must be odd".into()));
        }
        Ok(())
    }

    /// Sub-pixel upscaling stages: one ×3 for scale 3, ×2 stages otherwise.
    pub fn upsample_factors(&self) -> Vec<usize> {
        match self.scale {
            1 => vec![],
            2 => vec![2],
            3 => vec![3],
            4 => vec![2, 2],
            _ => unreachable!("validated"),
        }
    }
}

/// Conditional body: DPCG groups or a flat CRB chain.
#[derive(Clone, Debug)]
enum Body {
    Groups(Vec<Dpcg>),
    Crbs(Vec<Crb>),
}

impl Body {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        ablation: Ablation,
        groups: usize,
        blocks: usize,
        cfg: BlockConfig,
        crb_cond_channels: usize,
    ) -> Result<Self> {
        if ablation.uses_crb() {
            let cfg = BlockConfig {
                c_cond: crb_cond_channels,
                ..cfg
            };
            let crbs = (0..groups * blocks)
                .map(|i| Crb::new(store, rng, &format!("{name}.crb{i}"), cfg))
                .collect::<Result<Vec<_>>>()?;
            Ok(Body::Crbs(crbs))
        } else {
            let gs = (0..groups)
                .map(|i| Dpcg::new(store, rng, &format!("{name}.group{i}"), cfg, blocks, ablation.long_skip()))
                .collect::<Result<Vec<_>>>()?;
            Ok(Body::Groups(gs))
        }
    }

    /// Runs the body; `cond` is the already-projected condition for DPCGs
    /// and the raw condition for CRBs.
    fn forward(&self, g: &mut Graph, basic: &Var, cond: &Var) -> Result<Var> {
        match self {
            Body::Groups(groups) => {
                let (mut b, mut c) = (basic.clone(), cond.clone());
                for group in groups {
                    (b, c) = group.forward(g, &b, &c)?;
                }
                Ok(b)
            }
            Body::Crbs(crbs) => {
                let mut b = basic.clone();
                for crb in crbs {
                    b = crb.forward(g, &b, cond)?;
                }
                Ok(b)
            }
        }
    }
}

/// Maps an LR image and a reduced kernel to an SR image.
#[derive(Clone, Debug)]
pub struct Restorer {
    pub config: RestorerConfig,
    head: Conv2d,
    cond_head: Option<Conv2d>,
    body: Body,
    body_tail: Conv2d,
    upsample: Vec<(Conv2d, usize)>,
    out: Conv2d,
}

impl Restorer {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: RestorerConfig, ablation: Ablation, factors: &[usize]) -> Result<Self> {
        let ch = cfg.channels;
        let head = Conv2d::same(store, rng, "restorer.head", cfg.image_channels, ch, 3, 1.0);
        let cond_head = (!ablation.uses_crb()).then(|| Conv2d::same(store, rng, "restorer.cond_head", cfg.reduced_dim, ch, 1, 1.0));
        let body = Body::new(
            store,
            rng,
            "restorer",
            ablation,
            cfg.n_groups,
            cfg.blocks_per_group,
            BlockConfig::new(ch, 3, cfg.cond_kernel),
            cfg.reduced_dim,
        )?;
        let body_tail = Conv2d::same(store, rng, "restorer.body_tail", ch, ch, 3, 1.0);
        let upsample = factors
            .iter()
            .enumerate()
            .map(|(i, &r)| (Conv2d::same(store, rng, &format!("restorer.up{i}"), ch, ch * r * r, 3, 1.0), r))
            .collect();
        let out = Conv2d::same(store, rng, "restorer.out", ch, cfg.image_channels, 3, 1.0);
        Ok(Restorer {
            config: cfg,
            head,
            cond_head,
            body,
            body_tail,
            upsample,
            out,
        })
    }

    /// `lr`: `N×C×h×w`; `reduced`: `N×d×1×1`. Returns `N×C×sh×sw`.
    pub fn forward(&self, g: &mut Graph, lr: &Var, reduced: &Var) -> Result<Var> {
        let [n, c, _, _] = lr.shape();
        if c != self.config.image_channels {
            return Err(DanError::Shape(format!("restorer expects {} channels, got {c}", self.config.image_channels)));
        }
        if reduced.shape() != [n, self.config.reduced_dim, 1, 1] {
            return Err(DanError::Shape(format!(
                "reduced kernel {:?} does not match d={} for batch {n}",
                reduced.shape(),
                self.config.reduced_dim
            )));
        }
        let feat = self.head.forward(g, lr)?;
        let cond = match &self.cond_head {
            Some(h) => h.forward(g, reduced)?,
            None => reduced.clone(),
        };
        let body = self.body.forward(g, &feat, &cond)?;
        let body = self.body_tail.forward(g, &body)?;
        let mut x = g.add(&feat, &body)?;
        for (conv, r) in &self.upsample {
            let y = conv.forward(g, &x)?;
            x = g.pixel_shuffle(&y, *r)?;
        }
        self.out.forward(g, &x)
    }
}

/// What the Estimator emits.
#[derive(Clone, Debug)]
pub enum Estimate {
    /// Softmax-normalized complete kernel, `N×size²×1×1`.
    Complete(Var),
    /// PCA coordinates, `N×d×1×1`.
    Reduced(Var),
}

/// Maps an LR image and an SR image to a blur-kernel estimate.
#[derive(Clone, Debug)]
pub struct Estimator {
    pub config: EstimatorConfig,
    sr_head: Conv2d,
    lr_head: Conv2d,
    body: Body,
    dense: Conv2d,
    softmax: bool,
}

impl Estimator {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: EstimatorConfig, ablation: Ablation, reduced_dim: usize) -> Result<Self> {
        let ch = cfg.channels;
        let s = cfg.scale;
        // kernel 2s+1, stride s, pad s maps s·h×s·w onto h×w
        let sr_head = Conv2d::new(store, rng, "estimator.sr_head", cfg.image_channels, ch, 2 * s + 1, s, s, 1.0);
        let lr_head = Conv2d::same(store, rng, "estimator.lr_head", cfg.image_channels, ch, 3, 1.0);
        let body = Body::new(
            store,
            rng,
            "estimator",
            ablation,
            cfg.n_groups,
            cfg.blocks_per_group,
            BlockConfig::new(ch, 3, 3),
            ch,
        )?;
        let outputs = if ablation.softmax() {
            cfg.kernel_size * cfg.kernel_size
        } else {
            reduced_dim
        };
        let dense = Conv2d::same(store, rng, "estimator.dense", ch, outputs, 1, 1.0);
        Ok(Estimator {
            config: cfg,
            sr_head,
            lr_head,
            body,
            dense,
            softmax: ablation.softmax(),
        })
    }

    pub fn forward(&self, g: &mut Graph, lr: &Var, sr: &Var) -> Result<Estimate> {
        let [n, c, h, w] = lr.shape();
        let s = self.config.scale;
        if sr.shape() != [n, c, h * s, w * s] {
            return Err(DanError::Shape(format!(
                "SR {:?} must be ×{s} of LR {:?}",
                sr.shape(),
                lr.shape()
            )));
        }
        let cond = self.sr_head.forward(g, sr)?;
        let basic = self.lr_head.forward(g, lr)?;
        let feat = self.body.forward(g, &basic, &cond)?;
        let feat = g.leaky_relu(&feat, LEAKY_SLOPE);
        let pooled = g.global_avg_pool(&feat);
        let logits = self.dense.forward(g, &pooled)?;
        if self.softmax {
            Ok(Estimate::Complete(g.softmax(&logits)?))
        } else {
            Ok(Estimate::Reduced(logits))
        }
    }
}

/// One iteration's state.
#[derive(Clone, Debug)]
pub struct DanState {
    pub iteration: usize,
    pub sr: ImagePlane,
    pub kernel: BlurKernel,
    pub reduced: ReducedKernel,
}

/// Graph-level view of one iteration.
#[derive(Clone, Debug)]
pub struct TraceStep {
    pub sr: Var,
    /// Complete kernel, `N×size²×1×1`.
    pub kernel: Var,
    /// Reduced kernel, `N×d×1×1`.
    pub reduced: Var,
}

/// Result of an unrolled forward pass inside a graph.
#[derive(Clone, Debug)]
pub struct DanOutput {
    pub trace: Vec<TraceStep>,
}

impl DanOutput {
    pub fn last(&self) -> &TraceStep {
        self.trace.last().expect("at least one iteration")
    }
}

/// The deep alternating network.
#[derive(Clone, Debug)]
pub struct Dan {
    config: NetworkConfig,
    restorer: Restorer,
    estimator: Estimator,
    basis: Arc<PcaBasis>,
    reduce_w: Tensor,
    reduce_b: Tensor,
    expand_w: Tensor,
    expand_b: Tensor,
    dirac_reduced: Vec<f64>,
}

impl Dan {
    /// Builds the network and freshly initialized parameters.
    pub fn new(config: NetworkConfig, basis: Arc<PcaBasis>, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let dan = Self::with_store(config, basis, seed, &mut store)?;
        Ok((dan, store))
    }

    fn with_store(config: NetworkConfig, basis: Arc<PcaBasis>, seed: u64, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        if basis.size() != config.kernel_size || basis.dim() != config.reduced_dim {
            return Err(DanError::Config(format!(
                "PCA basis ({}×{}, d={}) does not match kernel_size {} / reduced_dim {}",
                basis.size(),
                basis.size(),
                basis.dim(),
                config.kernel_size,
                config.reduced_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let restorer = Restorer::new(store, &mut rng, config.restorer(), config.ablation, &config.upsample_factors())?;
        let estimator = Estimator::new(store, &mut rng, config.estimator(), config.ablation, config.reduced_dim)?;
        let (reduce_w, reduce_b) = basis.affine_tensors();
        let k2 = config.kernel_size * config.kernel_size;
        let d = config.reduced_dim;
        let mut ew = vec![0.0; k2 * d];
        for i in 0..d {
            for (j, v) in basis.component(i).iter().enumerate() {
                ew[j * d + i] = *v;
            }
        }
        let expand_w = Tensor::from_vec([k2, d, 1, 1], ew)?;
        let expand_b = Tensor::from_vec([k2, 1, 1, 1], basis.mean().to_vec())?;
        let dirac_reduced = basis.reduce(&dirac_kernel(config.kernel_size)?)?.coords().to_vec();
        Ok(Dan {
            config,
            restorer,
            estimator,
            basis,
            reduce_w,
            reduce_b,
            expand_w,
            expand_b,
            dirac_reduced,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn basis(&self) -> &Arc<PcaBasis> {
        &self.basis
    }

    pub fn restorer(&self) -> &Restorer {
        &self.restorer
    }

    pub fn estimator(&self) -> &Estimator {
        &self.estimator
    }

    /// Cached reduction of the Dirac initialization.
    pub fn dirac_reduced(&self) -> &[f64] {
        &self.dirac_reduced
    }

    /// PCA reduction of `N×size²×1×1` kernels inside the graph.
    pub fn reduce_in_graph(&self, g: &mut Graph, kernel: &Var) -> Result<Var> {
        let w = g.input(self.reduce_w.clone());
        let b = g.input(self.reduce_b.clone());
        g.conv2d(kernel, &w, Some(&b), 1, 0)
    }

    /// PCA reconstruction of `N×d×1×1` coordinates inside the graph.
    pub fn expand_in_graph(&self, g: &mut Graph, reduced: &Var) -> Result<Var> {
        let w = g.input(self.expand_w.clone());
        let b = g.input(self.expand_b.clone());
        g.conv2d(reduced, &w, Some(&b), 1, 0)
    }

    /// Unrolls `iterations` alternating steps on an `N×C×h×w` batch.
    pub fn forward_graph(&self, g: &mut Graph, lr: &Var, iterations: usize) -> Result<DanOutput> {
        if iterations == 0 {
            return Err(DanError::InvalidArgument("iteration count must be ≥ 1".into()));
        }
        let n = lr.shape()[0];
        let d = self.config.reduced_dim;
        let init: Vec<f64> = (0..n).flat_map(|_| self.dirac_reduced.iter().cloned()).collect();
        let mut reduced = g.input(Tensor::from_vec([n, d, 1, 1], init)?);
        let mut trace = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let sr = self.restorer.forward(g, lr, &reduced)?;
            let (kernel, next) = match self.estimator.forward(g, lr, &sr)? {
                Estimate::Complete(k) => {
                    let r = self.reduce_in_graph(g, &k)?;
                    (k, r)
                }
                Estimate::Reduced(r) => (self.expand_in_graph(g, &r)?, r),
            };
            reduced = next.clone();
            trace.push(TraceStep { sr, kernel, reduced: next });
        }
        Ok(DanOutput { trace })
    }

    fn lr_var(&self, g: &mut Graph, lr: &ImagePlane) -> Result<Var> {
        if lr.channels() != self.config.image_channels {
            return Err(DanError::Shape(format!(
                "model expects {}-channel images, got {}",
                self.config.image_channels,
                lr.channels()
            )));
        }
        Ok(g.input(lr.to_tensor()))
    }

    /// One Restorer pass on a single image.
    pub fn restorer_forward(&self, params: &ParamStore, lr: &ImagePlane, reduced: &ReducedKernel) -> Result<ImagePlane> {
        let mut g = Graph::inference(params);
        let x = self.lr_var(&mut g, lr)?;
        let r = g.input(reduced.to_tensor());
        let sr = self.restorer.forward(&mut g, &x, &r)?;
        Ok(ImagePlane::from_tensor(sr.value(), 0, lr.color())?.clamped())
    }

    /// One Estimator pass on a single LR/SR pair; returns the complete kernel.
    pub fn estimator_forward(&self, params: &ParamStore, lr: &ImagePlane, sr: &ImagePlane) -> Result<BlurKernel> {
        let mut g = Graph::inference(params);
        let x = self.lr_var(&mut g, lr)?;
        let y = self.lr_var(&mut g, sr)?;
        let k = match self.estimator.forward(&mut g, &x, &y)? {
            Estimate::Complete(k) => k,
            Estimate::Reduced(r) => self.expand_in_graph(&mut g, &r)?,
        };
        self.kernel_from(&k, 0)
    }

    fn kernel_from(&self, k: &Var, n: usize) -> Result<BlurKernel> {
        let len = self.config.kernel_size * self.config.kernel_size;
        BlurKernel::reconstruction(self.config.kernel_size, k.value().data()[n * len..(n + 1) * len].to_vec())
    }

    /// Runs the alternating network on one image and returns the final SR
    /// image, the final kernel, and every iteration's state.
    pub fn dan_forward(&self, params: &ParamStore, lr: &ImagePlane, iterations: usize) -> Result<(ImagePlane, BlurKernel, Vec<DanState>)> {
        let mut g = Graph::inference(params);
        let x = self.lr_var(&mut g, lr)?;
        let out = self.forward_graph(&mut g, &x, iterations)?;
        let mut states = Vec::with_capacity(iterations);
        for (t, step) in out.trace.iter().enumerate() {
            states.push(DanState {
                iteration: t + 1,
                sr: ImagePlane::from_tensor(step.sr.value(), 0, lr.color())?.clamped(),
                kernel: self.kernel_from(&step.kernel, 0)?,
                reduced: ReducedKernel::new(step.reduced.value().data().to_vec())?,
            });
        }
        let last = states.last().expect("iterations ≥ 1");
        Ok((last.sr.clone(), last.kernel.clone(), states))
    }

    /// Exact number of learnable scalars.
    pub fn num_params(params: &ParamStore) -> usize {
        params.num_scalars()
    }

    /// Analytic multiply-accumulate count of `iterations` unrolled steps on
    /// one `h×w` LR image (convolutions and dense maps).
    pub fn analytic_macs(&self, h: usize, w: usize, iterations: usize) -> u64 {
        let conv = |c: &Conv2d, hh: usize, ww: usize| -> (u64, usize, usize) {
            let ho = (hh + 2 * c.pad - c.kernel) / c.stride + 1;
            let wo = (ww + 2 * c.pad - c.kernel) / c.stride + 1;
            ((c.out_channels * c.in_channels * c.kernel * c.kernel * ho * wo) as u64, ho, wo)
        };
        let body_macs = |body: &Body, bh: usize, bw: usize, ch: usize, cw: usize| -> u64 {
            match body {
                Body::Groups(groups) => groups
                    .iter()
                    .map(|grp| {
                        grp.blocks
                            .iter()
                            .map(|b| {
                                conv(&b.cond1, ch, cw).0 + conv(&b.cond2, ch, cw).0 + conv(&b.basic1, bh, bw).0 + conv(&b.basic2, bh, bw).0
                            })
                            .sum::<u64>()
                            + grp.tail.as_ref().map_or(0, |t| conv(t, bh, bw).0)
                    })
                    .sum(),
                Body::Crbs(crbs) => crbs
                    .iter()
                    .map(|c| conv(&c.conv1, bh, bw).0 + conv(&c.conv2, bh, bw).0 + conv(&c.attn_down, 1, 1).0 + conv(&c.attn_up, 1, 1).0)
                    .sum(),
            }
        };
        let r = &self.restorer;
        let mut per_iter = conv(&r.head, h, w).0;
        if let Some(c) = &r.cond_head {
            per_iter += conv(c, 1, 1).0;
        }
        per_iter += body_macs(&r.body, h, w, 1, 1);
        per_iter += conv(&r.body_tail, h, w).0;
        let (mut uh, mut uw) = (h, w);
        for (c, f) in &r.upsample {
            per_iter += conv(c, uh, uw).0;
            uh *= f;
            uw *= f;
        }
        per_iter += conv(&r.out, uh, uw).0;

        let e = &self.estimator;
        let (sr_macs, ch, cw) = conv(&e.sr_head, uh, uw);
        per_iter += sr_macs + conv(&e.lr_head, h, w).0;
        per_iter += body_macs(&e.body, h, w, ch, cw);
        per_iter += conv(&e.dense, 1, 1).0;
        let k2 = self.config.kernel_size * self.config.kernel_size;
        // PCA reduction (complete) or reconstruction (reduced) of the estimate
        per_iter += (k2 * self.config.reduced_dim) as u64;
        per_iter * iterations as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{fit_family_basis, isotropic_gaussian, KernelFamilySpec};

    fn basis(size: usize) -> Arc<PcaBasis> {
        Arc::new(fit_family_basis(&KernelFamilySpec::isotropic(size, 0.2, 2.0), 200, 10, 1).unwrap())
    }

    fn tiny(scale: usize, ablation: Ablation) -> NetworkConfig {
        NetworkConfig {
            restorer_groups: 1,
            restorer_blocks: 1,
            restorer_channels: 4,
            estimator_groups: 1,
            estimator_blocks: 1,
            estimator_channels: 4,
            ablation,
            ..NetworkConfig::full(scale, 5)
        }
    }

    fn lr_image(h: usize, w: usize) -> ImagePlane {
        ImagePlane::from_fn(h, w, ColorSpace::Rgb, |y, x, c| ((y * 7 + x * 3 + c * 5) % 11) as f64 / 10.0).unwrap()
    }

    #[test]
    fn output_shapes_for_every_scale() {
        for s in 1..=4 {
            let (dan, params) = Dan::new(tiny(s, Ablation::Dpcb), basis(5), 3).unwrap();
            let lr = lr_image(6, 5);
            let (sr, k, trace) = dan.dan_forward(&params, &lr, 2).unwrap();
            assert_eq!(sr.shape(), (6 * s, 5 * s, 3));
            assert_eq!(k.size(), 5);
            assert_eq!(trace.len(), 2);
            assert!(trace.iter().all(|st| (st.kernel.sum() - 1.0).abs() < 1e-5));
        }
    }

    #[test]
    fn one_iteration_equals_manual_composition() {
        let (dan, params) = Dan::new(tiny(2, Ablation::Dpcb), basis(5), 4).unwrap();
        let lr = lr_image(6, 6);
        let dirac = ReducedKernel::new(dan.dirac_reduced().to_vec()).unwrap();
        let sr = dan.restorer_forward(&params, &lr, &dirac).unwrap();
        let (sr_t, k_t, _) = dan.dan_forward(&params, &lr, 1).unwrap();
        assert_eq!(sr, sr_t);
        // the estimator saw the unclamped SR in the unrolled pass
        let mut g = Graph::inference(&params);
        let x = g.input(lr.to_tensor());
        let r = g.input(dirac.to_tensor());
        let raw = dan.restorer.forward(&mut g, &x, &r).unwrap();
        let k = match dan.estimator.forward(&mut g, &x, &raw).unwrap() {
            Estimate::Complete(k) => k,
            Estimate::Reduced(_) => unreachable!(),
        };
        assert_eq!(k.value().data(), k_t.data());
    }

    #[test]
    fn restorer_depends_on_kernel() {
        let b = basis(5);
        let (dan, params) = Dan::new(tiny(2, Ablation::Dpcb), Arc::clone(&b), 5).unwrap();
        let lr = lr_image(6, 6);
        let r1 = b.reduce(&dirac_kernel(5).unwrap()).unwrap();
        let r2 = b.reduce(&isotropic_gaussian(5, 3.2).unwrap()).unwrap();
        let a = dan.restorer_forward(&params, &lr, &r1).unwrap();
        let c = dan.restorer_forward(&params, &lr, &r2).unwrap();
        assert!(a.max_abs_diff(&c) > 0.0);
    }

    #[test]
    fn estimator_output_is_a_distribution_and_depends_on_sr() {
        let (dan, params) = Dan::new(tiny(2, Ablation::Dpcb), basis(5), 6).unwrap();
        let lr = lr_image(6, 6);
        let sr1 = lr_image(12, 12);
        let sr2 = ImagePlane::from_fn(12, 12, ColorSpace::Rgb, |y, x, c| sr1.get(y, x, c) * 0.5).unwrap();
        let k1 = dan.estimator_forward(&params, &lr, &sr1).unwrap();
        let k2 = dan.estimator_forward(&params, &lr, &sr2).unwrap();
        assert!((k1.sum() - 1.0).abs() < 1e-5 && k1.data().iter().all(|v| *v >= 0.0));
        assert_eq!(k1.size(), 5);
        assert!(k1.l1(&k2).unwrap() > 0.0);
        assert!(dan.estimator_forward(&params, &lr, &lr).is_err());
    }

    #[test]
    fn every_ablation_builds_and_runs() {
        for ab in Ablation::ALL {
            let (dan, params) = Dan::new(tiny(2, ab), basis(5), 7).unwrap();
            let (sr, k, _) = dan.dan_forward(&params, &lr_image(5, 5), 2).unwrap();
            assert_eq!(sr.shape(), (10, 10, 3));
            assert_eq!(k.size(), 5);
        }
    }

    #[test]
    fn analytic_macs_match_measured() {
        for ab in Ablation::ALL {
            for s in [1, 3, 4] {
                let (dan, params) = Dan::new(tiny(s, ab), basis(5), 8).unwrap();
                let mut g = Graph::inference(&params);
                let x = g.input(lr_image(5, 7).to_tensor());
                dan.forward_graph(&mut g, &x, 3).unwrap();
                assert_eq!(g.macs(), dan.analytic_macs(5, 7, 3), "{ab:?} ×{s}");
            }
        }
    }

    #[test]
    fn zero_iterations_rejected_and_mismatched_basis_rejected() {
        let (dan, params) = Dan::new(tiny(2, Ablation::Dpcb), basis(5), 9).unwrap();
        assert!(dan.dan_forward(&params, &lr_image(4, 4), 0).is_err());
        assert!(Dan::new(tiny(2, Ablation::Dpcb), basis(7), 9).is_err());
    }
}
