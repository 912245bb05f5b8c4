//! Unrolls a randomly initialized toy network for T = 1..7 and prints how the
//! SR image and the kernel estimate move between iterations.
//!
//! `cargo run --release --example unfold_random`

use std::sync::Arc;

use dan::data::procedural_patch;
use dan::imaging::{degrade, downsample};
use dan::kernels::{fit_family_basis, isotropic_gaussian, KernelFamilySpec};
use dan::network::{Dan, NetworkConfig};
use dan::NoiseSpec;

fn main() -> dan::Result<()> {
    let family = KernelFamilySpec::isotropic(11, 0.2, 2.0);
    let basis = Arc::new(fit_family_basis(&family, 2000, 10, 1)?);
    let (model, params) = Dan::new(NetworkConfig::toy(2, 11), basis, 42)?;
    println!("toy ×2 network: {} parameters", Dan::num_params(&params));

    let hr = procedural_patch(48, 9)?;
    let lr = degrade(&hr, &isotropic_gaussian(11, 1.2)?, 2, &NoiseSpec::none())?;
    let (_, _, trace) = model.dan_forward(&params, &lr, 7)?;
    let mut prev: Option<&dan::network::DanState> = None;
    for st in &trace {
        let (dsr, dk) = match prev {
            Some(p) => (st.sr.max_abs_diff(&p.sr), st.kernel.l1(&p.kernel)?),
            None => (f64::NAN, f64::NAN),
        };
        println!(
            "T={}  SR {:?}  kernel sum {:.6}  |ΔSR|∞ {dsr:.2e}  ΔK L1 {dk:.2e}",
            st.iteration,
            st.sr.shape(),
            st.kernel.sum()
        );
        prev = Some(st);
    }
    let back = downsample(&trace.last().expect("T ≥ 1").sr, 2)?;
    println!("SR↓2 vs LR max abs difference (untrained): {:.3}", back.max_abs_diff(&lr));
    Ok(())
}
