//! Losses, learning-rate schedule, Adam updates, and the training loop.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{DegradationSpec, PatchPool, TrainSample};
use crate::error::{DanError, Result};
use crate::graph::{Graph, Var};
use crate::imaging::ImagePlane;
use crate::kernels::{BlurKernel, PcaBasis};
use crate::network::Dan;
use crate::param::ParamStore;
use crate::tensor::Tensor;

/// Optimization hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    pub lr0: f64,
    pub halving_period: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Unrolled iterations during training.
    pub iterations: usize,
    pub seed: u64,
    /// Weight of the kernel term in the loss.
    pub lambda_kernel: f64,
    /// Global gradient-norm clip, if any.
    pub grad_clip: Option<f64>,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            total_steps: 400_000,
            lr0: 4e-4,
            halving_period: 200_000,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            iterations: 4,
            seed: 0,
            lambda_kernel: 1.0,
            grad_clip: None,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_steps == 0 || self.halving_period == 0 || self.iterations == 0 {
            return Err(DanError::Config("batch_size, total_steps, halving_period and iterations must be positive".into()));
        }
        if self.halving_period > self.total_steps {
            return Err(DanError::Config(format!(
                "halving_period {} exceeds total_steps {}",
                self.halving_period, self.total_steps
            )));
        }
        if !(self.lr0 > 0.0) || !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(DanError::Config("lr0 must be positive and Adam betas in [0,1)".into()));
        }
        if !(self.lambda_kernel >= 0.0) {
            return Err(DanError::Config(format!("lambda_kernel {} must be ≥ 0", self.lambda_kernel)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(DanError::Config(format!("grad_clip {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// Loss values of one evaluation of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub l1_image: f64,
    pub l1_kernel: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Image-level objective: mean absolute image error plus `λ` times mean
/// absolute complete-kernel error.
pub fn dan_loss(sr: &ImagePlane, hr: &ImagePlane, k: &BlurKernel, k_gt: &BlurKernel, lambda: f64) -> Result<LossReport> {
    if sr.shape() != hr.shape() {
        return Err(DanError::Shape(format!("SR {:?} vs HR {:?}", sr.shape(), hr.shape())));
    }
    if k.size() != k_gt.size() {
        return Err(DanError::Shape(format!("kernel {} vs {}", k.size(), k_gt.size())));
    }
    let mean_abs = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    let l1_image = mean_abs(sr.data(), hr.data());
    let l1_kernel = mean_abs(k.data(), k_gt.data());
    Ok(LossReport {
        step: 0,
        l1_image,
        l1_kernel,
        total: l1_image + lambda * l1_kernel,
        lambda,
    })
}

/// Step-decay schedule: `lr0 · 0.5^⌊step / halving_period⌋`.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> Result<f64> {
    if step >= cfg.total_steps {
        return Err(DanError::InvalidArgument(format!(
            "step {step} outside schedule of {} steps",
            cfg.total_steps
        )));
    }
    Ok(cfg.lr0 * 0.5f64.powi((step / cfg.halving_period) as i32))
}

/// First and second Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn update(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64, cfg: &TrainConfig, scale: f64) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j] * scale;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Diagnostics of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: LossReport,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Builds the batched loss graph; returns `(total, l1_image, l1_kernel)`.
///
/// Only the last iteration's outputs are supervised. Complete-kernel
/// Estimators are supervised in the complete space; reduced-kernel ones
/// (the ablation variants) on their PCA coordinates.
pub fn loss_graph(g: &mut Graph, dan: &Dan, batch: &[TrainSample], iterations: usize, lambda: f64) -> Result<(Var, Var, Var)> {
    if batch.is_empty() {
        return Err(DanError::InvalidArgument("empty batch".into()));
    }
    let lr = Tensor::stack(&batch.iter().map(|s| s.lr.to_tensor()).collect::<Vec<_>>())?;
    let hr = Tensor::stack(&batch.iter().map(|s| s.hr.to_tensor()).collect::<Vec<_>>())?;
    let x = g.input(lr);
    let out = dan.forward_graph(g, &x, iterations)?;
    let last = out.last();
    let y = g.input(hr);
    let l_img = g.l1(&last.sr, &y)?;
    let l_ker = if dan.config().ablation.softmax() {
        let k = Tensor::stack(&batch.iter().map(|s| s.kernel.to_tensor()).collect::<Vec<_>>())?;
        let k = g.input(k);
        g.l1(&last.kernel, &k)?
    } else {
        let r = Tensor::stack(&batch.iter().map(|s| s.reduced.to_tensor()).collect::<Vec<_>>())?;
        let r = g.input(r);
        g.l1(&last.reduced, &r)?
    };
    let weighted = g.scale(&l_ker, lambda);
    let total = g.add(&l_img, &weighted)?;
    Ok((total, l_img, l_ker))
}

/// One Adam step on the end-to-end gradient through all unrolled iterations.
pub fn train_step(
    dan: &Dan,
    params: &mut ParamStore,
    batch: &[TrainSample],
    cfg: &TrainConfig,
    state: &mut AdamState,
    step: u64,
) -> Result<StepStats> {
    let lr = lr_schedule(step, cfg)?;
    let (report, grads, grad_norm) = {
        let mut g = Graph::new(params);
        let (total, li, lk) = loss_graph(&mut g, dan, batch, cfg.iterations, cfg.lambda_kernel)?;
        let report = LossReport {
            step,
            l1_image: li.value().data()[0],
            l1_kernel: lk.value().data()[0],
            total: total.value().data()[0],
            lambda: cfg.lambda_kernel,
        };
        if !report.total.is_finite() {
            return Err(DanError::NonFinite {
                step,
                lr,
                grad_norm: f64::NAN,
                detail: format!("loss {report:?}"),
            });
        }
        let grads = g.backward(&total)?;
        let norm = grads.global_norm();
        (report, grads.into_params(), norm)
    };
    if !grad_norm.is_finite() {
        let worst = params
            .ids()
            .filter(|id| grads[id.index()].as_ref().is_some_and(|t| !t.all_finite()))
            .map(|id| params.name(id).to_string())
            .take(5)
            .collect::<Vec<_>>();
        return Err(DanError::NonFinite {
            step,
            lr,
            grad_norm,
            detail: format!("non-finite gradients in {}", worst.join(", ")),
        });
    }
    let scale = match cfg.grad_clip {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };
    state.update(params, &grads, lr, cfg, scale);
    Ok(StepStats {
        loss: report,
        lr,
        grad_norm,
    })
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub l1_image: f64,
    pub l1_kernel: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub elapsed_s: f64,
}

/// Owns the model, its parameters, and the optimizer state.
pub struct Trainer {
    pub dan: Dan,
    pub params: ParamStore,
    pub adam: AdamState,
    pub cfg: TrainConfig,
    pub spec: DegradationSpec,
    pub pool: PatchPool,
    /// Next step to run.
    pub step: u64,
}

impl Trainer {
    pub fn new(dan: Dan, params: ParamStore, cfg: TrainConfig, spec: DegradationSpec, pool: PatchPool) -> Result<Self> {
        cfg.validate()?;
        spec.validate()?;
        if spec.scale != dan.config().scale || spec.kernel_size() != dan.config().kernel_size {
            return Err(DanError::Config("degradation spec does not match the network's scale/kernel size".into()));
        }
        let adam = AdamState::new(&params);
        Ok(Trainer {
            dan,
            params,
            adam,
            cfg,
            spec,
            pool,
            step: 0,
        })
    }

    pub fn basis(&self) -> &Arc<PcaBasis> {
        self.dan.basis()
    }

    /// The batch used at `step`.
    pub fn batch(&self, step: u64) -> Result<Vec<TrainSample>> {
        self.pool.batch(&self.spec, self.dan.basis(), self.cfg.seed, step, self.cfg.batch_size)
    }

    pub fn step_once(&mut self) -> Result<StepStats> {
        let batch = self.batch(self.step)?;
        let stats = train_step(&self.dan, &mut self.params, &batch, &self.cfg, &mut self.adam, self.step)?;
        self.step += 1;
        Ok(stats)
    }

    /// Runs until `until` (exclusive, capped at `total_steps`), logging every
    /// `log_every` steps and the last one. `on_log` sees every record.
    pub fn run(&mut self, until: u64, mut log: Option<&mut dyn Write>, mut on_log: impl FnMut(&LogRecord)) -> Result<Vec<LogRecord>> {
        let until = until.min(self.cfg.total_steps);
        let start = Instant::now();
        let mut records = Vec::new();
        let (mut acc_img, mut acc_ker, mut acc_tot, mut acc_n) = (0.0, 0.0, 0.0, 0u64);
        while self.step < until {
            let stats = self.step_once()?;
            acc_img += stats.loss.l1_image;
            acc_ker += stats.loss.l1_kernel;
            acc_tot += stats.loss.total;
            acc_n += 1;
            if self.step.is_multiple_of(self.cfg.log_every.max(1)) || self.step == until {
                let n = acc_n as f64;
                let rec = LogRecord {
                    step: self.step,
                    l1_image: acc_img / n,
                    l1_kernel: acc_ker / n,
                    total: acc_tot / n,
                    lr: stats.lr,
                    grad_norm: stats.grad_norm,
                    elapsed_s: start.elapsed().as_secs_f64(),
                };
                if let Some(w) = log.as_deref_mut() {
                    let line = serde_json::to_string(&rec).expect("plain record");
                    writeln!(w, "{line}").map_err(|e| DanError::io("training log", e))?;
                }
                on_log(&rec);
                records.push(rec);
                (acc_img, acc_ker, acc_tot, acc_n) = (0.0, 0.0, 0.0, 0);
            }
        }
        Ok(records)
    }
}
