//! Samples both kernel families, fits PCA bases of several dimensions and
//! reports reconstruction errors; writes heatmaps of a few kernels.
//!
//! `cargo run --release --example kernel_zoo -- [out_dir]`

use dan::kernels::{fit_family_basis, gaussian8, KernelFamilySpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dan::Result<()> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/kernels".into()));
    std::fs::create_dir_all(&out).expect("output directory");

    for (name, family) in [("setting1-x4", KernelFamilySpec::setting1(4)?), ("setting2-x2", KernelFamilySpec::setting2(2)?)] {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let held: Vec<_> = (0..300).map(|_| family.sample(&mut rng).map(|(k, _)| k)).collect::<dan::Result<_>>()?;
        for (i, k) in held.iter().take(4).enumerate() {
            k.save_heatmap(out.join(format!("{name}-{i}.png")), 8)?;
        }
        print!("{name} ({}×{}): held-out PCA roundtrip L1", family.size, family.size);
        for d in [2, 5, 10, 15] {
            let basis = fit_family_basis(&family, 3000, d, 1)?;
            let mut err = 0.0;
            for k in &held {
                err += basis.expand(&basis.reduce(k)?)?.l1(k)?;
            }
            print!("  d={d}: {:.2e}", err / held.len() as f64);
        }
        println!();
    }

    for (i, k) in gaussian8(4)?.iter().enumerate() {
        k.save_heatmap(out.join(format!("gaussian8-x4-{i}.png")), 8)?;
    }
    println!("heatmaps written to {}", out.display());
    Ok(())
}
