//! A problem loaded from JSON: polynomial coefficients, a density-driven
//! jump measure with a Gaussian part, and a terminal constraint
//! `E x(T) ∈ [0.5, 2]`. The checker searches the multipliers `(λ, μ)`.
//!
//! ```bash
//! cargo run --release --example constrained
//! ```

use std::path::Path;

use teugel_smp::config::ExperimentConfig;
use teugel_smp::pathsim::{integrate_bundle, Dynamics, PathBundle};
use teugel_smp::smp::maximum::{check_smp, scan_steps, SmpOptions};
use teugel_smp::Result;

fn main() -> Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/constrained-polynomial.json");
    let cfg = ExperimentConfig::load(&path)?;
    println!("config digest {}", cfg.digest());
    let res = cfg.resolve()?;
    println!("basis: {:?}", res.basis.indices());
    let dynamics = Dynamics::new(&res.spec, &res.eval)?;
    let mc = &cfg.monte_carlo;
    let bundle = PathBundle::sample(&res.model, &res.eval, res.spec.horizon, mc.grid, 5_000, mc.seed)?;
    let u = teugel_smp::cli::control(&cfg, &res)?;
    let states = integrate_bundle(&dynamics, &u, &bundle)?;
    let opts = SmpOptions {
        form: cfg.smp.form,
        steps: scan_steps(mc.grid, cfg.smp.time_points),
        controls: res.spec.domain.scan_points(cfg.smp.u_steps)?,
        allowance: cfg.smp.allowance,
        multipliers: cfg.smp.multipliers.clone(),
        bsde: cfg.bsde.options(),
    };
    let (report, _) = check_smp(&dynamics, &bundle, &states, &opts)?;
    println!("E G = {:?}", report.diagnostics.constraint_value.iter().map(|e| e.mean).collect::<Vec<_>>());
    println!("multipliers λ = {:.4}, μ = {:?}", report.lambda, report.mu);
    if let Some(t) = &report.transversality {
        println!("transversality: sup <μ, z - EG> = {:+.4} ({})", t.worst, t.holds);
    }
    let m = &report.maximum_condition;
    println!(
        "min gap {:+.4} ± {:.4} at t = {:.2}, v = {:?}: {}",
        m.min_gap.mean,
        m.min_gap.stderr,
        m.argmin_t,
        m.argmin_v,
        if m.pass { "no violation" } else { "violated" }
    );
    Ok(())
}
