//! Spike-variation expansion: log-log slopes of the moments of the first and
//! second variational processes and of the expansion remainder.
//!
//! ```bash
//! cargo run --release --example rates
//! ```

use teugel_smp::config::ExperimentConfig;
use teugel_smp::pathsim::{Control, Dynamics};
use teugel_smp::smp::variational::{expansion_rates, RateExperiment};
use teugel_smp::Result;

fn main() -> Result<()> {
    let cfg = ExperimentConfig::example("lq-controlled-jump")?;
    let res = cfg.resolve()?;
    let u = teugel_smp::cli::control(&cfg, &res)?;
    let dynamics = Dynamics::new(&res.spec, &res.eval)?;
    let exp = RateExperiment {
        t0: 0.3,
        rhos: vec![0.2, 0.1, 0.05, 0.025],
        n_paths: 20_000,
        n_cells: 200,
        seed: 7,
        eta: vec![0.0],
    };
    let report = expansion_rates(&dynamics, &res.model, &u, &Control::constant(vec![1.0]), &exp)?;
    for m in &report.moments {
        let values: Vec<String> = m.values.iter().map(|v| format!("{v:.3e}")).collect();
        let slope = m.slope.map_or("-".into(), |s| format!("{s:.2}"));
        println!("{:<12} slope {slope:>5} (expected {}{})  {}", m.name, m.expected, if m.strict_lower { "+" } else { "" }, values.join("  "));
        if let Some(n) = &m.note {
            println!("             {n}");
        }
    }
    Ok(())
}
