//! Two BSDEs with known solutions: `dY = Y dt` with `Y(1) = 1`, and the
//! martingale representation of `H^(1)(1)`, whose integrand is `Z^(1) ≡ 1`.
//!
//! ```bash
//! cargo run --release --example bsde
//! ```

use teugel_smp::bsde::{residual_check, solve_bsde, BsdeOptions, FeatureSpec, FnDriver, ZeroDriver};
use teugel_smp::config::ExperimentConfig;
use teugel_smp::pathsim::PathBundle;
use teugel_smp::{MultiIndex, Result};

fn main() -> Result<()> {
    let res = ExperimentConfig::example("lq-benchmark")?.resolve()?;
    let opts = BsdeOptions::default();

    let driver = FnDriver {
        dim: 1,
        lipschitz: 1.0,
        f: |_: &_, y: &[f64], _: &[f64], out: &mut [f64]| out[0] = -y[0],
    };
    println!("deterministic driver, Y(0) vs e^-1 = {:.6}", (-1f64).exp());
    for n in [25, 50, 100, 200, 400] {
        let bundle = PathBundle::sample(&res.model, &res.eval, 1.0, n, 200, 1)?;
        let sol = solve_bsde(&driver, &vec![1.0; bundle.len()], &bundle, &res.eval, None, &opts)?;
        let y0 = sol.mean_y(0, 0).mean;
        println!("  N_t = {n:>3}: Y(0) = {y0:.6}, error {:.2e}", (y0 - (-1f64).exp()).abs());
    }

    let bundle = PathBundle::sample(&res.model, &res.eval, 1.0, 25, 20_000, 5)?;
    let h1 = MultiIndex::new(vec![1]);
    let terminal: Vec<f64> = bundle
        .paths()
        .iter()
        .map(|p| res.eval.evaluate(p, &h1, 1.0))
        .collect::<Result<_>>()?;
    let features = FeatureSpec {
        jump_count: false,
        ..FeatureSpec::default()
    };
    let opts = BsdeOptions { features, ..opts };
    let sol = solve_bsde(&ZeroDriver(1), &terminal, &bundle, &res.eval, None, &opts)?;
    let mae: f64 = (0..sol.n_cells)
        .flat_map(|i| (0..sol.n_paths).map(move |p| (i, p)))
        .map(|(i, p)| (sol.z_at(i, p)[0] - 1.0).abs())
        .sum::<f64>()
        / (sol.n_cells * sol.n_paths) as f64;
    println!("martingale representation: mean |Z^(1) - 1| = {mae:.4}, Y(0) = {:.4}", sol.mean_y(0, 0).mean);
    let flagged = residual_check(&sol, &ZeroDriver(1), &bundle, None, features)?
        .iter()
        .filter(|r| r.flagged)
        .count();
    println!("residual check: {flagged} of {} steps flagged", sol.n_cells);
    Ok(())
}
