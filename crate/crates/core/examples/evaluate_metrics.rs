//! Evaluates a checkpoint (or, without one, the bicubic and non-blind
//! baselines alone) on a synthetic Gaussian8 ×2 set.
//!
//! `cargo run --release --example evaluate_metrics -- [checkpoint.danc]`

use std::sync::Arc;

use dan::checkpoint::Checkpoint;
use dan::data::{EvalItem, EvalSet, PatchPool};
use dan::evaluation::{dirac_baseline, evaluate_bicubic, evaluate_blind, non_blind_eval};
use dan::imaging::degrade;
use dan::kernels::{fit_family_basis, gaussian8_sigmas, isotropic_gaussian, KernelFamilySpec};
use dan::network::{Dan, NetworkConfig};
use dan::NoiseSpec;

fn main() -> dan::Result<()> {
    let (model, params) = match std::env::args().nth(1) {
        Some(path) => Checkpoint::load(path)?.model()?,
        None => {
            let basis = fit_family_basis(&KernelFamilySpec::isotropic(21, 0.2, 2.0), 2000, 10, 0)?;
            Dan::new(NetworkConfig::toy(2, 21), Arc::new(basis), 0)?
        }
    };
    let scale = model.config().scale;
    let size = model.config().kernel_size;

    // Gaussian8 widths sampled at the model's kernel size
    let kernels = gaussian8_sigmas(scale)?
        .iter()
        .map(|&s| isotropic_gaussian(size, s))
        .collect::<dan::Result<Vec<_>>>()?;
    let pool = PatchPool::procedural(4, 96, 123)?;
    let mut items = Vec::new();
    for (p, hr) in pool.patches().iter().enumerate() {
        for (j, k) in kernels.iter().enumerate() {
            items.push(EvalItem {
                name: format!("img{p}_k{j}"),
                lr: degrade(hr, k, scale, &NoiseSpec::none())?,
                hr: hr.clone(),
                kernel: Some(k.clone()),
            });
        }
    }
    let set = EvalSet { scale, items };

    let bicubic = evaluate_bicubic(&set, scale)?;
    let blind = evaluate_blind(&model, &params, &set, model.config().iterations, scale)?;
    let non_blind = non_blind_eval(&model, &params, &set, scale)?;
    let dirac = dirac_baseline(&set, model.basis())?;
    for r in [&bicubic, &blind, &non_blind] {
        println!("{:<10} PSNR-Y {:.3} dB  SSIM-Y {:.4}", r.method, r.mean_psnr_y, r.mean_ssim_y);
    }
    println!(
        "kernel L1: blind {:.5}, Dirac {:.5}",
        blind.mean_kernel_l1_complete.unwrap_or(f64::NAN),
        dirac.l1_complete
    );
    for (sigma, e) in blind.kernel_error_by_sigma() {
        println!("  σ {sigma:.2}: L1 {:.5}", e.l1_complete);
    }
    Ok(())
}
