//! Finite-difference check of the conditional blocks' backward passes.
//!
//! `cargo run --release --example gradient_check`

use dan::blocks::{BlockConfig, Crb, Dpcb, Dpcg};
use dan::gradcheck::check_params;
use dan::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn probe(shape: [usize; 4], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn readout(g: &mut Graph, v: &Var, seed: u64) -> dan::Result<Var> {
    let r = g.input(probe(v.shape(), seed));
    let p = g.mul(v, &r)?;
    Ok(g.sum(&p))
}

fn main() -> dan::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let basic = probe([1, 4, 6, 6], 1);
    let cond = probe([1, 4, 6, 6], 2);

    let mut store = ParamStore::new();
    let block = Dpcb::new(&mut store, &mut rng, "dpcb", BlockConfig::new(4, 3, 3))?;
    let report = check_params(
        &store,
        |g| {
            let (b, c) = (g.input(basic.clone()), g.input(cond.clone()));
            let (b, _) = block.forward(g, &b, &c)?;
            readout(g, &b, 3)
        },
        1e-6,
    )?;
    println!("DPCB: {} entries, max relative error {:.2e}", report.checked, report.max_rel_error);

    let mut store = ParamStore::new();
    let group = Dpcg::new(&mut store, &mut rng, "dpcg", BlockConfig::new(4, 3, 3), 2, true)?;
    let report = check_params(
        &store,
        |g| {
            let (b, c) = (g.input(basic.clone()), g.input(cond.clone()));
            let (b, _) = group.forward(g, &b, &c)?;
            readout(g, &b, 4)
        },
        1e-6,
    )?;
    println!("DPCG: {} entries, max relative error {:.2e}", report.checked, report.max_rel_error);

    let mut store = ParamStore::new();
    let cfg = BlockConfig {
        c_cond: 10,
        ..BlockConfig::new(4, 3, 3)
    };
    let crb = Crb::new(&mut store, &mut rng, "crb", cfg)?;
    let reduced = probe([1, 10, 1, 1], 5);
    let report = check_params(
        &store,
        |g| {
            let (b, c) = (g.input(basic.clone()), g.input(reduced.clone()));
            let out = crb.forward(g, &b, &c)?;
            readout(g, &out, 6)
        },
        1e-6,
    )?;
    println!("CRB:  {} entries, max relative error {:.2e}", report.checked, report.max_rel_error);
    Ok(())
}
