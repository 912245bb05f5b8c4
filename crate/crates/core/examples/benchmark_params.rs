//! Parameter counts and multiply-accumulates of the default networks and
//! the ablation variants, plus a timed toy forward pass.
//!
//! `cargo run --release --example benchmark_params`

use std::sync::Arc;

use dan::data::procedural_patch;
use dan::evaluation::benchmark;
use dan::imaging::downsample;
use dan::kernels::{fit_family_basis, KernelFamilySpec};
use dan::network::{Ablation, Dan, NetworkConfig};

fn main() -> dan::Result<()> {
    println!("{:<8} {:<12} {:>10} {:>14}", "scale", "ablation", "params", "GMACs 64×64");
    for scale in [2, 3, 4] {
        let family = KernelFamilySpec::setting1(scale)?;
        let basis = Arc::new(fit_family_basis(&family, 1000, 10, 0)?);
        for ablation in Ablation::ALL {
            let cfg = NetworkConfig {
                ablation,
                ..NetworkConfig::full(scale, family.size)
            };
            let (model, params) = Dan::new(cfg, Arc::clone(&basis), 0)?;
            println!(
                "×{scale:<7} {:<12} {:>10} {:>14.2}",
                ablation.as_str(),
                Dan::num_params(&params),
                model.analytic_macs(64, 64, 4) as f64 / 1e9
            );
        }
    }

    let basis = Arc::new(fit_family_basis(&KernelFamilySpec::isotropic(11, 0.2, 2.0), 1000, 10, 0)?);
    let (model, params) = Dan::new(NetworkConfig::toy(2, 11), basis, 0)?;
    let lr = downsample(&procedural_patch(96, 1)?, 2)?;
    let report = benchmark(&model, &params, &[lr], (48, 48), 4)?;
    println!(
        "toy ×2, 48×48 LR, T=4: {} params, {:.3} GMACs, {:.3} s/image",
        report.params,
        report.macs as f64 / 1e9,
        report.sec_per_image
    );
    Ok(())
}
