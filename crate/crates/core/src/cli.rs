//! The `teugel-smp` command line: one subcommand per pipeline stage.
//!
//! Every CSV starts with `#` comment lines carrying the tool version, the
//! digest of the resolved configuration and the configuration itself,
//! followed by a header row. JSON reports carry the same fields.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::bsde::{residual_check, solve_bsde, FeatureDegree, FnDriver};
use crate::config::{ControlConfig, DriverConfig, ExperimentConfig, Resolved, TerminalConfig};
use crate::error::{Error, Result};
use crate::lq::{adjoint_oracle_error, AdjointOracleError};
use crate::multiindex::MultiIndex;
use crate::pathsim::{box_grid, cost, integrate_bundle, Control, CostEstimate, Dynamics, PathBundle};
use crate::smp::adjoint::solve_adjoints;
use crate::smp::maximum::{
    check_smp, gap_moments, maximum_condition, scan_steps, GapCell, MaximumCondition, SmpOptions,
};
use crate::smp::variational::{expansion_rates, RateExperiment};
use crate::stats::Estimate;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "teugel-smp", version, about = "Teugel-martingale BSDEs and maximum-principle checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// JSON experiment configuration.
    #[arg(long, conflicts_with = "example")]
    pub config: Option<PathBuf>,
    /// Built-in configuration: lq-benchmark, lq-controlled-jump or two-channel.
    #[arg(long)]
    pub example: Option<String>,
    #[arg(long)]
    pub paths: Option<usize>,
    /// Number of grid cells `N_t`.
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Coefficient table, κ and degeneracy flags of the orthogonalized basis.
    Basis(Common),
    /// Controlled state paths on the simulation grid.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Also emit the basis increments of every cell.
        #[arg(long)]
        increments: bool,
    },
    /// Solves the configured scalar BSDE.
    SolveBsde {
        #[command(flatten)]
        common: Common,
        /// poly2 | poly3
        #[arg(long)]
        features: Option<String>,
    },
    /// Adjoints, Hamiltonian gap field and multiplier conditions for one control.
    CheckSmp {
        #[command(flatten)]
        common: Common,
        /// riccati | zero | file
        #[arg(long)]
        control: Option<String>,
        #[arg(long)]
        control_file: Option<PathBuf>,
        /// literal | bracket
        #[arg(long)]
        form: Option<String>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        umin: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        umax: Option<Vec<f64>>,
        #[arg(long)]
        usteps: Option<usize>,
        /// Gap-field CSV; defaults to `<out stem>_gap.csv` next to the report.
        #[arg(long)]
        gap_out: Option<PathBuf>,
    },
    /// Log-log slopes of the spike-variation moments.
    Rates {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        rhos: Option<Vec<f64>>,
    },
    /// Linear-quadratic benchmark against its Riccati oracle.
    LqDemo {
        #[command(flatten)]
        common: Common,
        /// Time profile of the adjoints and their oracles.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Basis(c) => basis(&c),
        Command::Simulate { common, increments } => simulate(&common, increments),
        Command::SolveBsde { common, features } => {
            let mut cfg = load(&common)?;
            if let Some(f) = features {
                cfg.bsde.features = f.parse::<FeatureDegree>()?;
            }
            solve(&common, cfg)
        }
        Command::CheckSmp {
            common,
            control,
            control_file,
            form,
            umin,
            umax,
            usteps,
            gap_out,
        } => {
            let mut cfg = load(&common)?;
            if let Some(kind) = control {
                cfg.control = match kind.as_str() {
                    "riccati" => ControlConfig::Riccati,
                    "zero" => ControlConfig::Zero,
                    "file" => {
                        let path = control_file
                            .as_ref()
                            .ok_or_else(|| Error::config("control-file", "--control file needs --control-file"))?;
                        ControlConfig::File {
                            path: path.display().to_string(),
                        }
                    }
                    other => {
                        return Err(Error::config(
                            "control",
                            format!("unknown control `{other}` (riccati | zero | file)"),
                        ))
                    }
                };
            } else if let Some(path) = control_file {
                cfg.control = ControlConfig::File {
                    path: path.display().to_string(),
                };
            }
            if let Some(f) = form {
                cfg.smp.form = f.parse()?;
            }
            if umin.is_some() {
                cfg.smp.u_min = umin;
            }
            if umax.is_some() {
                cfg.smp.u_max = umax;
            }
            if let Some(s) = usteps {
                cfg.smp.u_steps = s;
            }
            cfg.validate()?;
            smp(&common, cfg, gap_out)
        }
        Command::Rates { common, rhos } => {
            let mut cfg = load(&common)?;
            if let Some(r) = rhos {
                cfg.rates.rhos = r;
            }
            cfg.validate()?;
            rates(&common, cfg)
        }
        Command::LqDemo { common, csv } => lq_demo(&common, csv),
    }
}

/// Loads the configuration named by `common` and applies the size overrides.
pub fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match (&common.config, &common.example) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, Some(name)) => ExperimentConfig::example(name)?,
        (None, None) => ExperimentConfig::example("lq-benchmark")?,
    };
    if let Some(n) = common.paths {
        cfg.monte_carlo.paths = n;
    }
    if let Some(n) = common.grid {
        cfg.monte_carlo.grid = n;
    }
    if let Some(s) = common.seed {
        cfg.monte_carlo.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The control process described by `cfg.control`.
pub fn control(cfg: &ExperimentConfig, res: &Resolved) -> Result<Control> {
    let d = res.spec.control_dim;
    match &cfg.control {
        ControlConfig::Zero => Ok(Control::constant(vec![0.0; d])),
        ControlConfig::Constant { value } => {
            if value.len() != d {
                return Err(Error::config("control.value", format!("expected {d} entries")));
            }
            Ok(Control::constant(value.clone()))
        }
        ControlConfig::Riccati => cfg
            .problem
            .scalar_lq(&res.eval)
            .map(|lq| lq.optimal_control())
            .ok_or_else(|| Error::config("control.kind", "the Riccati control needs a scalar linear-quadratic problem")),
        ControlConfig::File { path } => control_from_csv(Path::new(path), d),
    }
}

/// Piecewise-constant deterministic control from rows `t, v0, v1, ...`
/// sorted by `t`; each row holds from its time until the next.
pub fn control_from_csv(path: &Path, d: usize) -> Result<Control> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::config("control.path", format!("{}: {e}", path.display())))?;
    let mut rows: Vec<(f64, Vec<f64>)> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::config("control.path", e.to_string()))?;
        let vals = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::config(format!("control.path[{i}]"), e.to_string()))?;
        if vals.len() != d + 1 {
            return Err(Error::config(
                format!("control.path[{i}]"),
                format!("expected t and {d} control values"),
            ));
        }
        if rows.last().is_some_and(|(t, _)| *t >= vals[0]) {
            return Err(Error::config(format!("control.path[{i}]"), "times must increase"));
        }
        rows.push((vals[0], vals[1..].to_vec()));
    }
    if rows.is_empty() {
        return Err(Error::config("control.path", "no control rows"));
    }
    Ok(Control::deterministic(d, move |t, out| {
        let i = rows.partition_point(|(s, _)| *s <= t + 1e-12).saturating_sub(1);
        out.copy_from_slice(&rows[i].1);
    }))
}

fn header_lines(cfg: &ExperimentConfig) -> String {
    format!(
        "# teugel-smp {VERSION}\n# config_digest: {}\n# config: {}\n",
        cfg.digest(),
        cfg.normalized()
    )
}

/// CSV sink that prefixes the configuration comments.
struct CsvOut {
    writer: csv::Writer<Vec<u8>>,
}

impl CsvOut {
    fn new(cfg: &ExperimentConfig, header: &[String]) -> Result<Self> {
        let buf = header_lines(cfg).into_bytes();
        let mut writer = csv::Writer::from_writer(buf);
        writer.write_record(header)?;
        Ok(CsvOut { writer })
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        self.writer.write_record(fields)?;
        Ok(())
    }

    fn finish(self, out: Option<&Path>) -> Result<()> {
        let bytes = self
            .writer
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        emit(&bytes, out)
    }
}

fn emit(bytes: &[u8], out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, bytes)?,
        None => std::io::stdout().lock().write_all(bytes)?,
    }
    Ok(())
}

#[derive(Serialize)]
struct JsonReport<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    config_digest: String,
    config: &'a ExperimentConfig,
    report: T,
}

fn emit_json<T: Serialize>(cfg: &ExperimentConfig, report: T, out: Option<&Path>) -> Result<()> {
    let doc = JsonReport {
        tool: "teugel-smp",
        version: VERSION,
        config_digest: cfg.digest(),
        config: cfg,
        report,
    };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    emit(text.as_bytes(), out)
}

/// Shortest round-trip representation, in exponent form for very small or large magnitudes.
fn f(x: f64) -> String {
    let a = x.abs();
    if a != 0.0 && a.is_finite() && !(1e-4..1e15).contains(&a) {
        format!("{x:e}")
    } else {
        format!("{x}")
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(f).unwrap_or_default()
}

fn sample(cfg: &ExperimentConfig, res: &Resolved) -> Result<PathBundle> {
    let mc = &cfg.monte_carlo;
    log::info!("sampling {} paths on {} cells (seed {})", mc.paths, mc.grid, mc.seed);
    PathBundle::sample(&res.model, &res.eval, res.spec.horizon, mc.grid, mc.paths, mc.seed)
}

fn basis(common: &Common) -> Result<()> {
    let cfg = load(common)?;
    let res = cfg.resolve()?;
    let b = &res.basis;
    let header = ["index", "degree", "coefficient-pairs", "kappa", "degenerate"].map(String::from);
    let mut out = CsvOut::new(&cfg, &header)?;
    for (pos, p) in b.indices().iter().enumerate() {
        let mut pairs = vec![format!("{p}=1")];
        pairs.extend(b.coefficients(pos).iter().map(|&(q, c)| format!("{}={c}", b.indices()[q])));
        out.row(&[
            p.to_string(),
            p.degree().to_string(),
            pairs.join(" "),
            f(b.kappa(pos)),
            b.is_degenerate(pos).to_string(),
        ])?;
    }
    out.finish(common.out.as_deref())
}

fn simulate(common: &Common, increments: bool) -> Result<()> {
    let cfg = load(common)?;
    let res = cfg.resolve()?;
    let dynamics = Dynamics::new(&res.spec, &res.eval)?;
    let bundle = sample(&cfg, &res)?;
    let states = integrate_bundle(&dynamics, &control(&cfg, &res)?, &bundle)?;
    states.check_finite()?;
    let (m, d, k) = (states.state_dim, states.control_dim, bundle.n_active());
    let mut header = vec!["path_id".to_string(), "t".to_string()];
    header.extend((0..m).map(|a| format!("x{a}")));
    header.extend((0..d).map(|a| format!("v{a}")));
    if increments {
        header.extend((0..k).map(|j| format!("dH{}", res.eval.active_index(j))));
    }
    let mut out = CsvOut::new(&cfg, &header)?;
    let mut row = Vec::with_capacity(header.len());
    for path in 0..states.len() {
        for i in 0..=states.n_cells {
            row.clear();
            row.push(path.to_string());
            row.push(f(states.grid_time(i)));
            row.extend(states.x(path, i).iter().map(|&x| f(x)));
            row.extend(states.v(path, i).iter().map(|&x| f(x)));
            if increments {
                if i < states.n_cells {
                    row.extend(bundle.cell_increments(path, i).iter().map(|&x| f(x)));
                } else {
                    row.extend((0..k).map(|_| String::new()));
                }
            }
            out.row(&row)?;
        }
    }
    out.finish(common.out.as_deref())
}

fn solve(common: &Common, cfg: ExperimentConfig) -> Result<()> {
    let res = cfg.resolve()?;
    let bundle = sample(&cfg, &res)?;
    let DriverConfig::Linear { a, b } = cfg.bsde.driver;
    let driver = FnDriver {
        dim: 1,
        lipschitz: a.abs(),
        f: move |_: &crate::bsde::DriverCtx, y: &[f64], _: &[f64], out: &mut [f64]| out[0] = a * y[0] + b,
    };
    let horizon = bundle.horizon();
    let terminal: Vec<f64> = match &cfg.bsde.terminal {
        TerminalConfig::Constant { value } => vec![*value; bundle.len()],
        TerminalConfig::Basis { index, scale } => {
            let p = MultiIndex::new(index.clone());
            bundle
                .paths()
                .iter()
                .map(|path| res.eval.evaluate(path, &p, horizon).map(|h| scale * h))
                .collect::<Result<_>>()
                .map_err(|e| Error::config("bsde.terminal.index", e.to_string()))?
        }
    };
    let opts = cfg.bsde.options();
    let sol = solve_bsde(&driver, &terminal, &bundle, &res.eval, None, &opts)?;
    let residuals = residual_check(&sol, &driver, &bundle, None, opts.features)?;
    let flagged = residuals.iter().filter(|r| r.flagged).count();
    if flagged > 0 {
        log::warn!("{flagged} steps exceed the residual threshold");
    }
    let k = sol.n_active();
    let mut header = vec!["t".to_string(), "y".to_string()];
    header.extend(sol.indices.iter().map(|p| format!("z{p}")));
    header.push("residual".into());
    let mut out = CsvOut::new(&cfg, &header)?;
    for i in 0..=sol.n_cells {
        let mut row = vec![f(sol.grid_time(i)), f(sol.mean_y(i, 0).mean)];
        if i < sol.n_cells {
            row.extend((0..k).map(|j| f(sol.mean_z(i, j, 0).mean)));
            row.push(f(residuals[i].norm));
        } else {
            row.extend((0..=k).map(|_| String::new()));
        }
        out.row(&row)?;
    }
    out.finish(common.out.as_deref())
}

fn scan_controls(cfg: &ExperimentConfig, res: &Resolved) -> Result<Vec<Vec<f64>>> {
    let d = res.spec.control_dim;
    match (&cfg.smp.u_min, &cfg.smp.u_max) {
        (Some(lo), Some(hi)) => {
            if lo.len() != d || hi.len() != d {
                return Err(Error::config("smp.u_min", format!("expected {d} entries")));
            }
            if lo.iter().zip(hi).any(|(a, b)| a > b) {
                return Err(Error::config("smp.u_min", "u_min must not exceed u_max"));
            }
            Ok(box_grid(lo, hi, cfg.smp.u_steps))
        }
        _ => res.spec.domain.scan_points(cfg.smp.u_steps),
    }
}

fn gap_csv(cfg: &ExperimentConfig, cells: &[GapCell], d: usize, out: Option<&Path>) -> Result<()> {
    let mut header = vec!["t".to_string()];
    if d == 1 {
        header.push("v".into());
    } else {
        header.extend((0..d).map(|a| format!("v{a}")));
    }
    header.extend(["gap".to_string(), "stderr".to_string()]);
    let mut csv = CsvOut::new(cfg, &header)?;
    for c in cells {
        let mut row = vec![f(c.t)];
        row.extend(c.v.iter().map(|&x| f(x)));
        row.extend([f(c.gap.mean), f(c.gap.stderr)]);
        csv.row(&row)?;
    }
    csv.finish(out)
}

fn smp(common: &Common, cfg: ExperimentConfig, gap_out: Option<PathBuf>) -> Result<()> {
    let res = cfg.resolve()?;
    let dynamics = Dynamics::new(&res.spec, &res.eval)?;
    let u = control(&cfg, &res)?;
    let controls = scan_controls(&cfg, &res)?;
    let bundle = sample(&cfg, &res)?;
    let states = integrate_bundle(&dynamics, &u, &bundle)?;
    let opts = SmpOptions {
        form: cfg.smp.form,
        steps: scan_steps(states.n_cells, cfg.smp.time_points),
        controls,
        allowance: cfg.smp.allowance,
        multipliers: cfg.smp.multipliers.clone(),
        bsde: cfg.bsde.options(),
    };
    let (report, cells) = check_smp(&dynamics, &bundle, &states, &opts)?;
    let gap_path = gap_out.or_else(|| {
        common.out.as_ref().map(|p| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            p.with_file_name(format!("{stem}_gap.csv"))
        })
    });
    if let Some(p) = &gap_path {
        gap_csv(&cfg, &cells, res.spec.control_dim, Some(p))?;
    }
    emit_json(&cfg, &report, common.out.as_deref())
}

fn rates(common: &Common, cfg: ExperimentConfig) -> Result<()> {
    let res = cfg.resolve()?;
    let dynamics = Dynamics::new(&res.spec, &res.eval)?;
    let (m, d) = (res.spec.state_dim, res.spec.control_dim);
    if cfg.rates.v.len() != d {
        return Err(Error::config("rates.v", format!("expected {d} entries")));
    }
    let eta = cfg.rates.eta.clone().unwrap_or_else(|| vec![0.0; m]);
    if eta.len() != m {
        return Err(Error::config("rates.eta", format!("expected {m} entries")));
    }
    let exp = RateExperiment {
        t0: cfg.rates.t0,
        rhos: cfg.rates.rhos.clone(),
        n_paths: cfg.monte_carlo.paths,
        n_cells: cfg.monte_carlo.grid,
        seed: cfg.monte_carlo.seed,
        eta,
    };
    let base = control(&cfg, &res)?;
    let v = Control::constant(cfg.rates.v.clone());
    let report = expansion_rates(&dynamics, &res.model, &base, &v, &exp).map_err(|e| match e {
        Error::IntervalOutOfRange { .. } => Error::config("rates.t0", e.to_string()),
        other => other,
    })?;
    let header = ["rho", "moment", "value", "slope", "stderr", "t_star"].map(String::from);
    let mut out = CsvOut::new(&cfg, &header)?;
    for s in &report.moments {
        if let Some(note) = &s.note {
            log::warn!("{}: {note}", s.name);
        }
        for (j, rho) in report.rhos.iter().enumerate() {
            out.row(&[
                f(*rho),
                s.name.to_string(),
                f(s.values[j]),
                opt(s.slope),
                f(s.stderr[j]),
                f(s.t_star[j]),
            ])?;
        }
    }
    out.finish(common.out.as_deref())
}

#[derive(Debug, Clone, Serialize)]
pub struct LqDemoReport {
    pub riccati_p0: f64,
    pub optimal_cost: f64,
    pub monte_carlo_cost: CostEstimate,
    pub adjoints: AdjointOracleError,
    pub min_gap: Estimate,
    pub maximum_condition: MaximumCondition,
    #[serde(skip)]
    pub profile: Vec<LqProfileRow>,
}

/// Monte Carlo means of the adjoints next to their Riccati counterparts.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LqProfileRow {
    pub t: f64,
    pub p: f64,
    pub p_oracle: f64,
    pub big_p: f64,
    pub big_p_oracle: f64,
}

/// Riccati oracle, Monte Carlo cost under `u*`, adjoint errors and the
/// maximum-condition scan, for a scalar linear-quadratic configuration.
pub fn lq_demo_report(cfg: &ExperimentConfig) -> Result<LqDemoReport> {
    let res = cfg.resolve()?;
    let lq = cfg
        .problem
        .scalar_lq(&res.eval)
        .ok_or_else(|| Error::config("problem.catalog", "lq-demo needs a scalar linear-quadratic problem"))?;
    let dynamics = Dynamics::new(&res.spec, &res.eval)?;
    let bundle = sample(cfg, &res)?;
    let states = integrate_bundle(&dynamics, &lq.optimal_control(), &bundle)?;
    let mc = cost(&res.spec, &states)?;
    let adj = solve_adjoints(&dynamics, &bundle, &states, 1.0, &[], &cfg.bsde.options())?;
    let adjoints = adjoint_oracle_error(&lq, &states, &adj, 0.9 * lq.horizon);
    let (ric, p2) = (lq.riccati(), lq.second_adjoint(1.0));
    let mean_x = states.mean_state(0);
    let profile = (0..=states.n_cells)
        .map(|i| {
            let t = states.grid_time(i);
            let ex = mean_x[i].mean;
            LqProfileRow {
                t,
                p: adj.first.mean_y(i, 0).mean,
                p_oracle: 2.0 * ric.at(t) * ex,
                big_p: adj.second.mean_y(i, 0).mean,
                big_p_oracle: p2.at(t),
            }
        })
        .collect();
    let steps = scan_steps(states.n_cells, cfg.smp.time_points);
    let controls = scan_controls(cfg, &res)?;
    let units = [adj];
    let moments = gap_moments(&dynamics, &states, &units, &steps, &controls, cfg.smp.form)?;
    let (maximum, _) = maximum_condition(&moments, &[1.0], cfg.smp.form, cfg.smp.allowance);
    Ok(LqDemoReport {
        riccati_p0: lq.riccati().at(0.0),
        optimal_cost: lq.optimal_cost(),
        monte_carlo_cost: mc,
        adjoints,
        min_gap: maximum.min_gap,
        maximum_condition: maximum,
        profile,
    })
}

fn lq_demo(common: &Common, csv_out: Option<PathBuf>) -> Result<()> {
    let cfg = load(common)?;
    let report = lq_demo_report(&cfg)?;
    if let Some(p) = csv_out {
        let header = ["t", "p", "p_oracle", "big_p", "big_p_oracle"].map(String::from);
        let mut out = CsvOut::new(&cfg, &header)?;
        for r in &report.profile {
            out.row(&[f(r.t), f(r.p), f(r.p_oracle), f(r.big_p), f(r.big_p_oracle)])?;
        }
        out.finish(Some(&p))?;
    }
    emit_json(&cfg, &report, common.out.as_deref())
}
