//! The `dan` command line: synth, train, infer, eval, sweep, kernels, bench.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Every error
//! line starts with `error[<kind>]:`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
use crate::config::RunConfig;
use crate::data::{build_eval_set, sample_seed, EvalSet, PatchPool};
use crate::error::{DanError, Result};
use crate::evaluation::{
    benchmark, dirac_baseline, evaluate_bicubic, iteration_sweep_reports, non_blind_eval, sweep_csv, write_text, SweepRow,
};
use crate::imaging::{save_png, ColorSpace, ImagePlane};
use crate::kernels::{gaussian8_sigmas, isotropic_gaussian, load_kernels, save_kernels, BlurKernel};
use crate::network::{Ablation, Dan};
use crate::param::ParamStore;
use crate::tensor::Tensor;
use crate::training::Trainer;

#[derive(Parser, Debug)]
#[command(name = "dan", version, about = "Blind super-resolution with a deep alternating network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build an evaluation set (and optionally procedural HR training images).
    Synth(SynthArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Super-resolve a directory of LR PNGs.
    Infer(InferArgs),
    /// PSNR/SSIM and kernel errors on an evaluation set.
    Eval(EvalArgs),
    /// Metrics as a function of the iteration count.
    Sweep(SweepArgs),
    /// Export or visualize blur kernels.
    Kernels(KernelsArgs),
    /// Parameter count, multiply-accumulates, and inference time.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Full,
    Toy,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting configuration before the file and overrides apply.
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
    /// Configuration override, `key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    scale: Option<u8>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    setting: Option<u8>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    iterations: Option<u32>,
    #[arg(long)]
    lambda_kernel: Option<f64>,
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
    #[arg(long)]
    shave: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AblationArg {
    Dpcb,
    Crb,
    NoSoftmax,
    NoLongskip,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Dpcb => Ablation::Dpcb,
            AblationArg::Crb => Ablation::Crb,
            AblationArg::NoSoftmax => Ablation::NoSoftmax,
            AblationArg::NoLongskip => Ablation::NoLongskip,
        }
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of HR PNGs to degrade.
    #[arg(long)]
    hr_dir: Option<PathBuf>,
    /// Random kernels to draw for setting 2 (setting 1 uses Gaussian8).
    #[arg(long, default_value_t = 1)]
    num_kernels: usize,
    /// Also write this many procedural HR training images to `<out>/train_hr`.
    #[arg(long, default_value_t = 0)]
    patches: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Resume from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Stop after this many steps in total (defaults to `total_steps`).
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of LR PNGs.
    #[arg(long)]
    input: PathBuf,
    /// Skip kernel heatmaps and the kernel container.
    #[arg(long)]
    no_kernels: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluation set written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Also run the non-blind (GT kernel) evaluation.
    #[arg(long)]
    non_blind: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 7)]
    max_iterations: usize,
}

#[derive(Args, Debug)]
struct KernelsArgs {
    #[command(flatten)]
    common: Common,
    /// Visualize an existing kernel container instead of exporting.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Random kernels to export for setting 2.
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Heatmap magnification.
    #[arg(long, default_value_t = 8)]
    zoom: usize,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Benchmark a trained model instead of a freshly initialized one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Declared LR input size for the multiply-accumulate count, `HxW`.
    #[arg(long, default_value = "64x64")]
    input_size: String,
    /// Random images of the declared size to time.
    #[arg(long, default_value_t = 1)]
    time_images: usize,
}

/// Usage problems detected after argument parsing.
struct Usage(String);

enum Failure {
    Usage(Usage),
    Runtime(DanError),
}

impl From<DanError> for Failure {
    fn from(e: DanError) -> Self {
        Failure::Runtime(e)
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            if code == 0 {
                let _ = e.print();
            } else {
                eprintln!("error[usage]: {}", e.kind());
                let _ = e.print();
            }
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(Usage(msg))) => {
            eprintln!("error[usage]: {msg}");
            eprintln!("\nFor more information, try '--help'.");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error[{}]: {e}", e.kind());
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Kernels(a) => kernels(a),
        Command::Bench(a) => bench(a),
    }
}

fn existing(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(Usage(format!("{what} {} does not exist", path.display()))))
    }
}

/// Resolves the configuration and writes `effective-config.toml`.
fn resolve(c: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match c.preset {
        Preset::Full => RunConfig::default(),
        Preset::Toy => RunConfig::toy(),
    };
    if let Some(path) = &c.config {
        existing(path, "config file")?;
        let text = fs::read_to_string(path).map_err(|e| DanError::io(path, e))?;
        // keys present in the file replace the preset's values
        let table: toml::Table = toml::from_str(&text).map_err(|e| DanError::Config(format!("{}: {e}", path.display())))?;
        for (k, v) in table {
            cfg.set(&format!("{k}={v}"))
                .map_err(|e| DanError::Config(format!("{}: {e}", path.display())))?;
        }
    }
    for o in &c.overrides {
        cfg.set(o)?;
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.scale {
        cfg.scale = v as usize;
    }
    if let Some(v) = c.setting {
        cfg.setting = v;
    }
    if let Some(v) = c.iterations {
        cfg.iterations = v as usize;
    }
    if let Some(v) = c.lambda_kernel {
        cfg.lambda_kernel = v;
    }
    if let Some(v) = c.ablation {
        cfg.ablation = v.into();
    }
    if let Some(v) = c.shave {
        cfg.shave = v;
    }
    cfg.validate()?;
    fs::create_dir_all(&c.out).map_err(|e| DanError::io(&c.out, e))?;
    write_text(&c.out.join("effective-config.toml"), &cfg.to_toml())?;
    Ok(cfg)
}

fn load_model(path: &Path, cfg: &RunConfig, common: &Common) -> Result<(Checkpoint, Dan, ParamStore), Failure> {
    existing(path, "checkpoint")?;
    let ck = Checkpoint::load(path)?;
    // architecture flags given explicitly must agree with the checkpoint
    if common.scale.is_some() || common.ablation.is_some() || common.config.is_some() || !common.overrides.is_empty() {
        let mut expected = cfg.network()?;
        expected.iterations = ck.meta.network.iterations;
        ck.check_compatible(&expected)?;
    }
    let (dan, params) = ck.model()?;
    Ok((ck, dan, params))
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    let cfg = resolve(&a.common)?;
    let out = &a.common.out;
    if a.hr_dir.is_none() && a.patches == 0 {
        return Err(Failure::Usage(Usage("synth needs --hr-dir and/or --patches".into())));
    }
    if a.patches > 0 {
        let dir = out.join("train_hr");
        fs::create_dir_all(&dir).map_err(|e| DanError::io(&dir, e))?;
        let pool = PatchPool::procedural(a.patches, cfg.procedural_size, cfg.seed)?;
        for (i, p) in pool.patches().iter().enumerate() {
            save_png(dir.join(format!("patch_{i:05}.png")), p)?;
        }
        eprintln!("wrote {} procedural HR images to {}", a.patches, dir.display());
    }
    if let Some(hr_dir) = &a.hr_dir {
        existing(hr_dir, "HR directory")?;
        let spec = cfg.degradation()?;
        let kernels = eval_kernels(&cfg, a.num_kernels)?;
        let records = build_eval_set(hr_dir, &spec, &kernels, out, cfg.seed)?;
        eprintln!("wrote {} LR images and {} kernels to {}", records.len(), kernels.len(), out.display());
    }
    Ok(())
}

/// Gaussian8 for setting 1, random draws for setting 2.
fn eval_kernels(cfg: &RunConfig, count: usize) -> Result<Vec<BlurKernel>> {
    let fam = cfg.kernel_family()?;
    if cfg.setting == 1 {
        gaussian8_sigmas(cfg.scale)?
            .iter()
            .map(|&s| isotropic_gaussian(fam.size, s))
            .collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, 0x6b65726e));
        (0..count.max(1)).map(|_| fam.sample(&mut rng).map(|(k, _)| k)).collect()
    }
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let cfg = resolve(&a.common)?;
    let out = a.common.out.clone();
    if !cfg.hr_dir.is_empty() {
        existing(Path::new(&cfg.hr_dir), "hr_dir")?;
    }
    let mut trainer = match &a.checkpoint {
        Some(path) => {
            existing(path, "checkpoint")?;
            let ck = Checkpoint::load(path)?;
            ck.check_compatible(&cfg.network()?)?;
            let (dan, params) = ck.model()?;
            let mut t = Trainer::new(dan, params, cfg.train(), cfg.degradation()?, cfg.patch_pool()?)?;
            if let Some(adam) = ck.adam {
                t.adam = adam;
            }
            t.step = ck.meta.step;
            eprintln!("resuming at step {}", t.step);
            t
        }
        None => cfg.trainer()?,
    };
    let until = a.steps.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    let log_path = out.join("log.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(a.checkpoint.is_some())
        .write(true)
        .truncate(a.checkpoint.is_none())
        .open(&log_path)
        .map_err(|e| DanError::io(&log_path, e))?;
    let ck_path = out.join("checkpoint.danc");
    let every = cfg.checkpoint_every.max(1);
    eprintln!(
        "training {} parameters for steps {}..{until} (batch {}, T={})",
        trainer.params.num_scalars(),
        trainer.step,
        cfg.batch_size,
        cfg.iterations
    );
    while trainer.step < until {
        let next = ((trainer.step / every + 1) * every).min(until);
        trainer.run(next, Some(&mut log), |r| {
            eprintln!(
                "step {:>7}  l1_image {:.5}  l1_kernel {:.6}  lr {:.2e}  |g| {:.3e}  {:.0}s",
                r.step, r.l1_image, r.l1_kernel, r.lr, r.grad_norm, r.elapsed_s
            )
        })?;
        save_trainer(&trainer, &ck_path)?;
    }
    if !ck_path.exists() {
        save_trainer(&trainer, &ck_path)?;
    }
    eprintln!("checkpoint: {}", ck_path.display());
    Ok(())
}

/// Snapshot of a trainer as a checkpoint.
pub fn trainer_checkpoint(t: &Trainer) -> Checkpoint {
    Checkpoint {
        meta: CheckpointMeta {
            version: CHECKPOINT_VERSION,
            network: t.dan.config().clone(),
            train: t.cfg.clone(),
            degradation: t.spec.clone(),
            step: t.step,
            seed: t.cfg.seed,
            num_params: t.params.num_scalars(),
            adam_t: Some(t.adam.t),
        },
        params: t.params.clone(),
        adam: Some(t.adam.clone()),
        basis: (**t.basis()).clone(),
    }
}

fn save_trainer(t: &Trainer, path: &Path) -> Result<()> {
    trainer_checkpoint(t).save(path)
}

fn infer(a: InferArgs) -> Result<(), Failure> {
    let cfg = resolve(&a.common)?;
    let (_, dan, params) = load_model(&a.checkpoint, &cfg, &a.common)?;
    existing(&a.input, "input directory")?;
    let images = EvalSet::lr_only(&a.input)?;
    let out = &a.common.out;
    let sr_dir = out.join("sr");
    fs::create_dir_all(&sr_dir).map_err(|e| DanError::io(&sr_dir, e))?;
    let t = cfg.iterations;
    let mut kernels = Vec::new();
    for (name, lr) in &images {
        let (sr, k, _) = dan.dan_forward(&params, lr, t)?;
        save_png(sr_dir.join(format!("{name}.png")), &sr)?;
        if !a.no_kernels {
            let kdir = out.join("kernels");
            fs::create_dir_all(&kdir).map_err(|e| DanError::io(&kdir, e))?;
            k.save_heatmap(kdir.join(format!("{name}.png")), 8)?;
            kernels.push(k);
        }
    }
    if !a.no_kernels && !kernels.is_empty() {
        save_kernels(out.join("kernels.bkrn"), &kernels)?;
    }
    eprintln!("super-resolved {} images with T={t} into {}", images.len(), sr_dir.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let cfg = resolve(&a.common)?;
    let (_, dan, params) = load_model(&a.checkpoint, &cfg, &a.common)?;
    existing(&a.data, "evaluation set")?;
    let set = EvalSet::load(&a.data)?;
    if set.scale != dan.config().scale {
        return Err(DanError::Config(format!("evaluation set is ×{}, model ×{}", set.scale, dan.config().scale)).into());
    }
    let shave = a.common.shave.unwrap_or(set.scale);
    let out = &a.common.out;
    let reports = iteration_sweep_reports(&dan, &params, &set, cfg.iterations, shave)?;
    let blind = reports.last().expect("iterations ≥ 1");
    blind.write(out, "dan")?;
    let bic = evaluate_bicubic(&set, shave)?;
    bic.write(out, "bicubic")?;
    let mut by_sigma = String::from("gt_sigma,kernel_l1_complete,kernel_l1_reduced\n");
    for (s, k) in blind.kernel_error_by_sigma() {
        by_sigma.push_str(&format!("{s:.4},{:.8},{:.8}\n", k.l1_complete, k.l1_reduced));
    }
    write_text(&out.join("kernel_error_by_sigma.csv"), &by_sigma)?;
    let dirac = dirac_baseline(&set, dan.basis())?;
    write_text(
        &out.join("dirac_baseline.json"),
        &serde_json::to_string_pretty(&dirac).expect("plain report"),
    )?;
    println!("dan (T={}): PSNR-Y {:.3} dB  SSIM-Y {:.4}", cfg.iterations, blind.mean_psnr_y, blind.mean_ssim_y);
    println!("bicubic:    PSNR-Y {:.3} dB  SSIM-Y {:.4}", bic.mean_psnr_y, bic.mean_ssim_y);
    if a.non_blind {
        let nb = non_blind_eval(&dan, &params, &set, shave)?;
        nb.write(out, "non_blind")?;
        println!("non-blind:  PSNR-Y {:.3} dB  SSIM-Y {:.4}", nb.mean_psnr_y, nb.mean_ssim_y);
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<(), Failure> {
    let cfg = resolve(&a.common)?;
    let (_, dan, params) = load_model(&a.checkpoint, &cfg, &a.common)?;
    existing(&a.data, "evaluation set")?;
    if a.max_iterations == 0 {
        return Err(Failure::Usage(Usage("--max-iterations must be ≥ 1".into())));
    }
    let set = EvalSet::load(&a.data)?;
    let shave = a.common.shave.unwrap_or(set.scale);
    let reports = iteration_sweep_reports(&dan, &params, &set, a.max_iterations, shave)?;
    let rows: Vec<SweepRow> = reports
        .iter()
        .enumerate()
        .map(|(i, r)| SweepRow {
            iterations: i + 1,
            psnr_y: r.mean_psnr_y,
            ssim_y: r.mean_ssim_y,
            kernel_l1_complete: r.mean_kernel_l1_complete,
        })
        .collect();
    let out = &a.common.out;
    write_text(&out.join("sweep.csv"), &sweep_csv(&rows))?;
    write_text(&out.join("sweep.json"), &serde_json::to_string_pretty(&rows).expect("plain rows"))?;
    print!("{}", sweep_csv(&rows));
    Ok(())
}

fn kernels(a: KernelsArgs) -> Result<(), Failure> {
    let cfg = resolve(&a.common)?;
    let out = &a.common.out;
    let ks = match &a.input {
        Some(path) => {
            existing(path, "kernel container")?;
            load_kernels(path)?
        }
        None => {
            let ks = eval_kernels(&cfg, a.count)?;
            save_kernels(out.join("kernels.bkrn"), &ks)?;
            cfg.basis()?.save(out.join("basis.pcab"))?;
            ks
        }
    };
    let dir = out.join("heatmaps");
    fs::create_dir_all(&dir).map_err(|e| DanError::io(&dir, e))?;
    for (i, k) in ks.iter().enumerate() {
        k.save_heatmap(dir.join(format!("kernel_{i:03}.png")), a.zoom)?;
    }
    eprintln!("{} kernels of size {} → {}", ks.len(), ks.first().map_or(0, |k| k.size()), dir.display());
    Ok(())
}

fn parse_size(s: &str) -> Option<(usize, usize)> {
    let (h, w) = s.split_once(['x', 'X'])?;
    let (h, w) = (h.trim().parse().ok()?, w.trim().parse().ok()?);
    (h > 0 && w > 0).then_some((h, w))
}

fn bench(a: BenchArgs) -> Result<(), Failure> {
    let cfg = resolve(&a.common)?;
    let Some(size) = parse_size(&a.input_size) else {
        return Err(Failure::Usage(Usage(format!("--input-size {:?} is not HxW", a.input_size))));
    };
    let (dan, params) = match &a.checkpoint {
        Some(path) => {
            let (_, d, p) = load_model(path, &cfg, &a.common)?;
            (d, p)
        }
        None => Dan::new(cfg.network()?, Arc::new(cfg.basis()?), cfg.seed)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let images = (0..a.time_images)
        .map(|_| {
            let t = Tensor::uniform([1, 3, size.0, size.1], 0.0, 1.0, &mut rng);
            ImagePlane::from_tensor(&t, 0, ColorSpace::Rgb)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = benchmark(&dan, &params, &images, size, cfg.iterations)?;
    write_text(
        &a.common.out.join("bench.json"),
        &serde_json::to_string_pretty(&report).expect("plain report"),
    )?;
    println!(
        "params {} ({:.3} M)  MACs {:.3} G  FLOPs {:.3} G  ({}x{} LR, T={})  {:.3} s/image",
        report.params,
        report.params as f64 / 1e6,
        report.macs as f64 / 1e9,
        report.flops as f64 / 1e9,
        size.0,
        size.1,
        report.iterations,
        report.sec_per_image
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sizes() {
        assert_eq!(parse_size("64x48"), Some((64, 48)));
        assert_eq!(parse_size("0x4"), None);
        assert_eq!(parse_size("64"), None);
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["dan"]), 2);
        assert_eq!(run(["dan", "frobnicate"]), 2);
        assert_eq!(run(["dan", "infer", "--scale", "5", "--checkpoint", "x", "--input", "y"]), 2);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let code = run([
            "dan",
            "infer",
            "--checkpoint",
            "/nonexistent/model.danc",
            "--input",
            ".",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn unknown_override_key_is_a_runtime_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let code = run([
            "dan",
            "kernels",
            "--set",
            "bogus=1",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code, 1);
    }
}
