//! First and second adjoints of the linear-quadratic benchmark against the
//! Riccati solution, plus the maximum-condition scan at the optimum.
//!
//! ```bash
//! cargo run --release --example lq_demo
//! ```

use teugel_smp::cli::lq_demo_report;
use teugel_smp::config::ExperimentConfig;
use teugel_smp::Result;

fn main() -> Result<()> {
    let mut cfg = ExperimentConfig::example("lq-benchmark")?;
    cfg.monte_carlo.paths = 20_000;
    cfg.monte_carlo.grid = 100;
    let r = lq_demo_report(&cfg)?;
    println!("Riccati P(0)        {:.5}", r.riccati_p0);
    println!(
        "J(u*) Monte Carlo   {:.5} ± {:.5}",
        r.monte_carlo_cost.total.mean, r.monte_carlo_cost.total.stderr
    );
    println!("p vs 2 P x          relative RMS {:.4} on [0, {}]", r.adjoints.p_relative_rms, r.adjoints.t_max);
    println!(
        "second adjoint P(0) {:.4} (ODE {:.4}), worst relative error {:.4}",
        r.adjoints.second_p0_mean, r.adjoints.second_p0_oracle, r.adjoints.second_max_relative
    );
    println!(
        "min gap             {:.5} at t = {:.2}, v = {:?} ({})",
        r.min_gap.mean,
        r.maximum_condition.argmin_t,
        r.maximum_condition.argmin_v,
        if r.maximum_condition.pass { "pass" } else { "fail" }
    );
    println!("\n  t     E p     2 P E x    E P     P_ode");
    for row in r.profile.iter().step_by(20) {
        println!(
            "  {:.2}  {:.4}  {:.4}    {:.4}  {:.4}",
            row.t, row.p, row.p_oracle, row.big_p, row.big_p_oracle
        );
    }
    Ok(())
}
