//! Controlled state paths for the linear-quadratic benchmark under the
//! Riccati feedback, and the Monte Carlo cost against `P(0) x0²`.
//!
//! ```bash
//! cargo run --release --example simulate
//! ```

use teugel_smp::config::ExperimentConfig;
use teugel_smp::pathsim::{control_distance, cost, integrate_bundle, Control, Dynamics, PathBundle};
use teugel_smp::Result;

fn main() -> Result<()> {
    let cfg = ExperimentConfig::example("lq-benchmark")?;
    let res = cfg.resolve()?;
    let lq = cfg.problem.scalar_lq(&res.eval).expect("scalar problem");
    let dynamics = Dynamics::new(&res.spec, &res.eval)?;
    let bundle = PathBundle::sample(&res.model, &res.eval, res.spec.horizon, 200, 20_000, 7)?;

    let optimal = lq.optimal_control();
    let states = integrate_bundle(&dynamics, &optimal, &bundle)?;
    let mean = states.mean_state(0);
    println!("  t      E x(t)");
    for i in (0..=200).step_by(40) {
        println!("  {:.2}   {:.4} ± {:.4}", states.grid_time(i), mean[i].mean, mean[i].stderr);
    }

    let j = cost(&res.spec, &states)?.total;
    println!("J(u*) = {:.4} ± {:.4}, Riccati P(0) x0² = {:.4}", j.mean, j.stderr, lq.optimal_cost());

    let zero = Control::constant(vec![0.0]);
    let j0 = cost(&res.spec, &integrate_bundle(&dynamics, &zero, &bundle)?)?.total;
    println!("J(0)  = {:.4} ± {:.4}", j0.mean, j0.stderr);
    println!("d̂(u*, 0) = {:.3}", control_distance(&optimal, &zero, &states));
    Ok(())
}
