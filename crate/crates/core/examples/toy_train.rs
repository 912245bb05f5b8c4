//! Trains the toy ×2 configuration and compares it against bicubic
//! upscaling and the constant-Dirac kernel predictor on held-out pairs.
//!
//! `cargo run --release --example toy_train -- [steps] [out_dir] [ablation]`

use dan::cli::trainer_checkpoint;
use dan::config::RunConfig;
use dan::evaluation::{dirac_baseline, evaluate_bicubic, iteration_sweep, sweep_csv};
use dan::network::Ablation;

fn main() -> dan::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(5_000);
    let out = std::path::PathBuf::from(args.next().unwrap_or_else(|| "out/toy".into()));
    let ablation: Ablation = args.next().map(|s| s.parse()).transpose()?.unwrap_or(Ablation::Dpcb);
    std::fs::create_dir_all(&out).expect("output directory");

    let cfg = RunConfig {
        ablation,
        total_steps: steps,
        halving_period: RunConfig::toy().halving_period.min(steps),
        ..RunConfig::toy()
    };
    let mut trainer = cfg.trainer()?;
    let held = cfg.held_out_set(trainer.basis(), 24)?;
    let shave = cfg.effective_shave();
    let bicubic = evaluate_bicubic(&held, shave)?;
    let dirac = dirac_baseline(&held, trainer.basis())?;
    println!("held-out: bicubic PSNR-Y {:.3} dB, Dirac kernel L1 {:.5}", bicubic.mean_psnr_y, dirac.l1_complete);

    let mut log = std::fs::File::create(out.join("log.jsonl")).expect("log file");
    trainer.run(steps, Some(&mut log), |r| {
        if r.step % 500 == 0 {
            println!("step {:>5}  l1_image {:.5}  l1_kernel {:.6}  lr {:.1e}", r.step, r.l1_image, r.l1_kernel, r.lr);
        }
    })?;
    trainer_checkpoint(&trainer).save(out.join("toy.danc"))?;

    let rows = iteration_sweep(&trainer.dan, &trainer.params, &held, 1..=7, shave)?;
    print!("{}", sweep_csv(&rows));
    let t4 = &rows[3];
    println!(
        "T=4: {:+.3} dB over bicubic, kernel L1 {:.5} (Dirac {:.5})",
        t4.psnr_y - bicubic.mean_psnr_y,
        t4.kernel_l1_complete.unwrap_or(f64::NAN),
        dirac.l1_complete
    );
    Ok(())
}
