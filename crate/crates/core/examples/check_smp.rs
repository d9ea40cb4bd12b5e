//! Maximum-condition check at the optimum and at `u ≡ 0`, followed by a
//! spike whose measured cost change confirms the sign of the worst gap.
//! The second part compares the two quadratic forms on a two-channel model
//! where they differ.
//!
//! ```bash
//! cargo run --release --example check_smp
//! ```

use teugel_smp::config::ExperimentConfig;
use teugel_smp::pathsim::{
    box_grid, cost, integrate_bundle, spike_control, Control, Dynamics, PathBundle,
};
use teugel_smp::smp::adjoint::solve_adjoints;
use teugel_smp::smp::maximum::{check_smp, compare_forms, scan_steps, Multipliers, QuadraticForm, SmpOptions};
use teugel_smp::Result;

fn main() -> Result<()> {
    let cfg = ExperimentConfig::example("lq-benchmark")?;
    let res = cfg.resolve()?;
    let lq = cfg.problem.scalar_lq(&res.eval).expect("scalar problem");
    let dynamics = Dynamics::new(&res.spec, &res.eval)?;
    let bundle = PathBundle::sample(&res.model, &res.eval, 1.0, 100, 10_000, 3)?;
    let opts = SmpOptions {
        form: QuadraticForm::Bracket,
        steps: scan_steps(100, 20),
        controls: box_grid(&[-2.0], &[2.0], 21),
        allowance: 0.02,
        multipliers: Multipliers::Search { steps: 33 },
        bsde: cfg.bsde.options(),
    };
    for (name, u) in [("u*", lq.optimal_control()), ("u = 0", Control::constant(vec![0.0]))] {
        let states = integrate_bundle(&dynamics, &u, &bundle)?;
        let (report, _) = check_smp(&dynamics, &bundle, &states, &opts)?;
        let m = &report.maximum_condition;
        println!(
            "{name:>6}: min gap {:+.4} ± {:.4} at t = {:.2}, v = {:+.2}; {}",
            m.min_gap.mean,
            m.min_gap.stderr,
            m.argmin_t,
            m.argmin_v[0],
            if m.pass { "pass" } else { "violated" }
        );
        if !m.pass {
            let rho = 0.05;
            let t0 = m.argmin_t.min(1.0 - rho);
            let frozen = Control::recorded(&states);
            let spiked = spike_control(&frozen, &Control::constant(m.argmin_v.clone()), t0, rho, 1.0)?;
            let base = cost(&res.spec, &states)?.total.mean;
            let moved = cost(&res.spec, &integrate_bundle(&dynamics, &spiked, &bundle)?)?.total.mean;
            println!("        spike of length {rho} there changes J by {:+.4}", moved - base);
        }
    }

    let cfg = ExperimentConfig::example("two-channel")?;
    let res = cfg.resolve()?;
    let dynamics = Dynamics::new(&res.spec, &res.eval)?;
    let bundle = PathBundle::sample(&res.model, &res.eval, 1.0, 40, 20_000, 9)?;
    let states = integrate_bundle(&dynamics, &Control::constant(vec![0.5]), &bundle)?;
    let adj = solve_adjoints(&dynamics, &bundle, &states, 1.0, &[], &cfg.bsde.options())?;
    let cmp = compare_forms(&dynamics, &bundle, &states, &adj, 0.5, &[1.0], &[0.1, 0.05, 0.025])?;
    println!("\ntwo-channel spike towards v = 1 at t = 0.5:");
    println!("   rho   measured          literal   bracket");
    for r in &cmp.rows {
        println!(
            "  {:.3}  {:+.5} ± {:.5}  {:+.5}  {:+.5}",
            r.rho, r.measured.mean, r.measured.stderr, r.predicted_literal, r.predicted_bracket
        );
    }
    println!("matching form: {:?}", cmp.matches);
    Ok(())
}
