//! Synthesizes an LR/HR pair with a random Setting-1 kernel and writes the
//! HR, LR, bicubic and kernel images.
//!
//! `cargo run --release --example degrade_image -- [out_dir] [scale]`

use dan::data::procedural_patch;
use dan::evaluation::{psnr_y, ssim_y};
use dan::imaging::{bicubic_upscale, degrade, save_png};
use dan::kernels::KernelFamilySpec;
use dan::NoiseSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dan::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = std::path::PathBuf::from(args.next().unwrap_or_else(|| "out/degrade".into()));
    let scale: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(4);
    std::fs::create_dir_all(&out).expect("output directory");

    let hr = procedural_patch(128, 7)?;
    let family = KernelFamilySpec::setting1(scale)?;
    let (kernel, params) = family.sample(&mut ChaCha8Rng::seed_from_u64(3))?;
    let lr = degrade(&hr, &kernel, scale, &NoiseSpec::none())?;
    let up = bicubic_upscale(&lr, scale)?;

    save_png(out.join("hr.png"), &hr)?;
    save_png(out.join("lr.png"), &lr)?;
    save_png(out.join("bicubic.png"), &up)?;
    kernel.save_heatmap(out.join("kernel.png"), 8)?;

    println!("kernel {:?} ({}×{})", params, kernel.size(), kernel.size());
    println!("HR {:?} → LR {:?}", hr.shape(), lr.shape());
    println!(
        "bicubic vs HR: PSNR-Y {:.2} dB, SSIM-Y {:.4}",
        psnr_y(&up, &hr, scale)?,
        ssim_y(&up, &hr, scale)?
    );
    println!("images written to {}", out.display());
    Ok(())
}
