//! Flat key-value run configuration (TOML) with `key=value` overrides.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{sample_seed, DegradationSpec, EvalSet, PatchPool, HR_TILE, HR_TILE_STRIDE};
use crate::error::{DanError, Result};
use crate::kernels::{fit_family_basis, KernelFamilySpec, PcaBasis};
use crate::network::{Ablation, Dan, NetworkConfig};
use crate::training::{TrainConfig, Trainer};

/// Environment variable naming the PCA-basis cache directory.
pub const CACHE_ENV: &str = "DAN_CACHE";

/// Every knob of a run. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scale: usize,
    /// Kernel setting: 1 isotropic, 2 noisy anisotropic.
    pub setting: u8,
    /// Overrides the setting's kernel size when non-zero.
    pub kernel_size: usize,
    /// Overrides the setting's upper width bound when positive.
    pub sigma_max: f64,
    pub noise_sigma: f64,
    pub ablation: Ablation,
    pub iterations: usize,
    pub reduced_dim: usize,
    pub pca_samples: usize,
    pub restorer_groups: usize,
    pub restorer_blocks: usize,
    pub restorer_channels: usize,
    pub estimator_groups: usize,
    pub estimator_blocks: usize,
    pub estimator_channels: usize,
    pub batch_size: usize,
    pub total_steps: u64,
    pub lr0: f64,
    pub halving_period: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub lambda_kernel: f64,
    /// Global-norm gradient clip; 0 disables, negative picks the default
    /// (10 for the CRB ablation, off otherwise).
    pub grad_clip: f64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub lr_patch: usize,
    pub flip: bool,
    /// Directory of HR training PNGs; empty selects procedural patches.
    pub hr_dir: String,
    pub procedural_patches: usize,
    pub procedural_size: usize,
    pub shave: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            seed: 0,
            scale: 4,
            setting: 1,
            kernel_size: 0,
            sigma_max: 0.0,
            noise_sigma: 0.0,
            ablation: Ablation::Dpcb,
            iterations: t.iterations,
            reduced_dim: 10,
            pca_samples: 10_000,
            restorer_groups: 5,
            restorer_blocks: 10,
            restorer_channels: 64,
            estimator_groups: 1,
            estimator_blocks: 5,
            estimator_channels: 32,
            batch_size: t.batch_size,
            total_steps: t.total_steps,
            lr0: t.lr0,
            halving_period: t.halving_period,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            lambda_kernel: t.lambda_kernel,
            grad_clip: -1.0,
            log_every: t.log_every,
            checkpoint_every: 10_000,
            lr_patch: 64,
            flip: false,
            hr_dir: String::new(),
            procedural_patches: 200,
            procedural_size: 256,
            shave: 0,
        }
    }
}

impl RunConfig {
    /// The desk-scale ×2 configuration used by the toy acceptance run.
    pub fn toy() -> Self {
        RunConfig {
            scale: 2,
            kernel_size: 11,
            sigma_max: 2.0,
            restorer_groups: 1,
            restorer_blocks: 3,
            restorer_channels: 16,
            estimator_groups: 1,
            estimator_blocks: 2,
            estimator_channels: 8,
            batch_size: 8,
            total_steps: 5_000,
            halving_period: 2_500,
            log_every: 100,
            checkpoint_every: 1_000,
            lr_patch: 24,
            procedural_patches: 200,
            procedural_size: 96,
            ..RunConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DanError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DanError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| DanError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    /// Applies one `key=value` override; the value is parsed as TOML and
    /// falls back to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| DanError::Config(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let mut table: toml::Table = toml::from_str(&self.to_toml()).expect("own output parses");
        if !table.contains_key(&key) {
            return Err(DanError::Config(format!("unknown config key {key:?}")));
        }
        // integers given for float keys are accepted
        let parsed = match (&table[&key], parsed) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        table.insert(key.clone(), parsed);
        *self = toml::Table::try_into(table).map_err(|e| DanError::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.setting) {
            return Err(DanError::Config(format!("setting must be 1 or 2, got {}", self.setting)));
        }
        self.network()?.validate()?;
        self.train().validate()?;
        self.degradation()?.validate()
    }

    pub fn kernel_family(&self) -> Result<KernelFamilySpec> {
        let mut fam = match self.setting {
            1 => KernelFamilySpec::setting1(self.scale)?,
            2 => KernelFamilySpec::setting2(self.scale)?,
            s => return Err(DanError::Config(format!("setting must be 1 or 2, got {s}"))),
        };
        if self.kernel_size != 0 {
            fam.size = self.kernel_size;
        }
        if self.sigma_max > 0.0 {
            fam.width_range.1 = self.sigma_max;
        }
        fam.validate()?;
        Ok(fam)
    }

    pub fn network(&self) -> Result<NetworkConfig> {
        let cfg = NetworkConfig {
            scale: self.scale,
            image_channels: 3,
            kernel_size: self.kernel_family()?.size,
            reduced_dim: self.reduced_dim,
            restorer_groups: self.restorer_groups,
            restorer_blocks: self.restorer_blocks,
            restorer_channels: self.restorer_channels,
            restorer_cond_kernel: 1,
            estimator_groups: self.estimator_groups,
            estimator_blocks: self.estimator_blocks,
            estimator_channels: self.estimator_channels,
            ablation: self.ablation,
            iterations: self.iterations,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> TrainConfig {
        let grad_clip = if self.grad_clip > 0.0 {
            Some(self.grad_clip)
        } else if self.grad_clip < 0.0 && self.ablation.uses_crb() {
            Some(10.0)
        } else {
            None
        };
        TrainConfig {
            batch_size: self.batch_size,
            total_steps: self.total_steps,
            lr0: self.lr0,
            halving_period: self.halving_period,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: 1e-8,
            iterations: self.iterations,
            seed: self.seed,
            lambda_kernel: self.lambda_kernel,
            grad_clip,
            log_every: self.log_every,
        }
    }

    pub fn degradation(&self) -> Result<DegradationSpec> {
        Ok(DegradationSpec {
            scale: self.scale,
            kernels: self.kernel_family()?,
            noise_sigma: self.noise_sigma,
            lr_patch: self.lr_patch,
            flip: self.flip,
        })
    }

    /// Border shave for metrics: the configured value, or the scale if 0.
    pub fn effective_shave(&self) -> usize {
        if self.shave == 0 {
            self.scale
        } else {
            self.shave
        }
    }

    /// Fits the PCA basis of the configured kernel family, reusing a cached
    /// copy under `$DAN_CACHE` when present.
    pub fn basis(&self) -> Result<PcaBasis> {
        let fam = self.kernel_family()?;
        let fit = || fit_family_basis(&fam, self.pca_samples, self.reduced_dim, self.seed);
        let Some(dir) = std::env::var_os(CACHE_ENV).map(PathBuf::from) else {
            return fit();
        };
        let (lo, hi) = fam.width_range;
        let name = format!(
            "pca-{:?}-k{}-w{lo}-{hi}-n{}-m{}-d{}-c{}-s{}.pcab",
            fam.family, fam.size, fam.mult_noise_max, self.pca_samples, self.reduced_dim, fam.rotation_range.1, self.seed
        )
        .to_lowercase();
        let path = dir.join(name);
        if path.exists() {
            return PcaBasis::load(&path);
        }
        let basis = fit()?;
        std::fs::create_dir_all(&dir).map_err(|e| DanError::io(&dir, e))?;
        basis.save(&path)?;
        Ok(basis)
    }
}

impl RunConfig {
    /// The HR training patches: tiles of `hr_dir`, or procedural patches.
    pub fn patch_pool(&self) -> Result<PatchPool> {
        if self.hr_dir.is_empty() {
            PatchPool::procedural(self.procedural_patches, self.procedural_size, sample_seed(self.seed, 0x706f_6f6c))
        } else {
            PatchPool::from_dir(&self.hr_dir, HR_TILE, HR_TILE_STRIDE)
        }
    }

    /// A freshly initialized trainer for this configuration.
    pub fn trainer(&self) -> Result<Trainer> {
        self.validate()?;
        let basis = Arc::new(self.basis()?);
        let (dan, params) = Dan::new(self.network()?, basis, self.seed)?;
        Trainer::new(dan, params, self.train(), self.degradation()?, self.patch_pool()?)
    }

    /// Held-out synthetic pairs: `count` full-size procedural patches
    /// (disjoint seeds from training) degraded with kernels of the training
    /// family.
    pub fn held_out_set(&self, basis: &PcaBasis, count: usize) -> Result<EvalSet> {
        let pool = PatchPool::procedural(count, self.procedural_size, sample_seed(self.seed, 0x6865_6c64))?;
        let spec = DegradationSpec {
            lr_patch: self.procedural_size / self.scale,
            flip: false,
            ..self.degradation()?
        };
        EvalSet::synthetic(&pool, &spec, basis, count, sample_seed(self.seed, 0x6576_616c))
    }
}
