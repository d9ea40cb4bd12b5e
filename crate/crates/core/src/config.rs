//! JSON experiment configuration and the built-in problem catalog.
//!
//! A document has the sections `levy`, `basis`, `problem`, `monte_carlo`,
//! `control`, `bsde`, `smp` and `rates`; every section except `levy` and
//! `problem` may be omitted. Loading fills in defaults, so the normalized
//! form (and its SHA-256 digest) identifies a run completely.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::{BasisEvaluator, TeugelBasis};
use crate::bsde::{BsdeOptions, FeatureDegree, FeatureSpec};
use crate::error::{Error, Result};
use crate::levy::{Atom, LevyConfig, LevyModel, MomentTable, PolyTerm};
use crate::lq::ScalarLq;
use crate::multiindex::MultiIndex;
use crate::pathsim::{ControlDomain, DiffusionTerm, ProblemSpec, TerminalConstraint, DEFAULT_GRID, DEFAULT_PATHS};
use crate::poly::{Poly, SmoothFn, VecFn};
use crate::smp::geometry::ConstraintSet;
use crate::smp::maximum::{Multipliers, QuadraticForm, DEFAULT_ALLOWANCE, DEFAULT_ANGLE_STEPS, DEFAULT_TIME_POINTS};

/// Names accepted by [`ExperimentConfig::example`].
pub const EXAMPLES: [&str; 3] = ["lq-benchmark", "lq-controlled-jump", "two-channel"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub levy: LevyConfig,
    #[serde(default)]
    pub basis: BasisConfig,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub monte_carlo: MonteCarloConfig,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default)]
    pub bsde: BsdeConfig,
    #[serde(default)]
    pub smp: SmpConfig,
    #[serde(default)]
    pub rates: RatesConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisConfig {
    pub degree: u32,
    pub rank_tol: f64,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig {
            degree: 2,
            rank_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub paths: usize,
    pub grid: usize,
    pub seed: u64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        MonteCarloConfig {
            paths: DEFAULT_PATHS,
            grid: DEFAULT_GRID,
            seed: 1,
        }
    }
}

/// A polynomial given as `[{exp: [...], coef: c}, ...]`.
pub type PolyTable = Vec<PolyTerm>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionTable {
    pub index: Vec<u32>,
    /// One polynomial in `(x, v)` per state component.
    pub coef: Vec<PolyTable>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintTable {
    /// One polynomial in `(y, x)` per constraint component.
    pub g: Vec<PolyTable>,
    pub target: ConstraintSet,
}

/// User polynomial tables. `drift`, `diffusion` and `running_cost` are in the
/// variables `(x, v)`; `terminal_cost` and constraints in `(y, x)`, `y = x0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolynomialProblem {
    pub state_dim: usize,
    pub control_dim: usize,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub drift: Vec<PolyTable>,
    #[serde(default)]
    pub diffusion: Vec<DiffusionTable>,
    #[serde(default)]
    pub running_cost: PolyTable,
    #[serde(default)]
    pub terminal_cost: PolyTable,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraint: Option<ConstraintTable>,
    pub domain: ControlDomain,
}

/// Scalar problem `dx = (a x + b v) dt + c x dH^index`, `ℓ = q x² + r v²`, `h = s x²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearProblem {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub q: f64,
    pub r: f64,
    pub s: f64,
    pub horizon: f64,
    pub x0: f64,
    #[serde(default = "first_index")]
    pub index: Vec<u32>,
}

fn first_index() -> Vec<u32> {
    vec![1]
}

fn benchmark() -> LinearProblem {
    LinearProblem {
        a: 0.0,
        b: 1.0,
        c: 1.0,
        q: 1.0,
        r: 1.0,
        s: 1.0,
        horizon: 1.0,
        x0: 1.0,
        index: first_index(),
    }
}

fn controlled_jump() -> LinearProblem {
    LinearProblem { c: 0.2, ..benchmark() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "catalog", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemConfig {
    /// `dx = v dt + x dH^(1)`, `ℓ = x² + v²`, `h = x²`, `T = 1`, `x0 = 1`.
    LqBenchmark,
    /// `dx = v dt + (0.2 x + ½ v x) dH^(1)` with the benchmark costs: the
    /// jump coefficient depends on the control, and its state loading is
    /// small enough for eighth moments to stay moderate.
    LqControlledJump,
    /// Two-dimensional driver: `dx = v dH^(1,0) + v dH^(0,1)`, `ℓ = v²`,
    /// `h = x²`, `U = [-1, 1]`.
    TwoChannel,
    Linear(LinearProblem),
    Polynomial(PolynomialProblem),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlConfig {
    /// Riccati feedback of the scalar linear-quadratic part of the problem.
    #[default]
    Riccati,
    Zero,
    Constant {
        value: Vec<f64>,
    },
    /// Piecewise-constant deterministic control from a CSV file with columns `t, v0, v1, ...`.
    File {
        path: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriverConfig {
    /// `f(y, z) = a y + b`.
    Linear { a: f64, b: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalConfig {
    Constant { value: f64 },
    /// `scale · H^index(T)`.
    Basis { index: Vec<u32>, scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BsdeConfig {
    pub features: FeatureDegree,
    pub driver: DriverConfig,
    pub terminal: TerminalConfig,
    pub max_iterations: usize,
    pub tol: f64,
}

impl Default for BsdeConfig {
    fn default() -> Self {
        let o = BsdeOptions::default();
        BsdeConfig {
            features: FeatureDegree::Poly2,
            driver: DriverConfig::Linear { a: -1.0, b: 0.0 },
            terminal: TerminalConfig::Constant { value: 1.0 },
            max_iterations: o.max_iterations,
            tol: o.tol,
        }
    }
}

impl BsdeConfig {
    pub fn options(&self) -> BsdeOptions {
        BsdeOptions {
            features: FeatureSpec::with_degree(self.features),
            max_iterations: self.max_iterations,
            tol: self.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmpConfig {
    pub form: QuadraticForm,
    /// Scan box for `v`; when absent the problem's domain is scanned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_min: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_max: Option<Vec<f64>>,
    pub u_steps: usize,
    pub time_points: usize,
    pub allowance: f64,
    pub multipliers: Multipliers,
}

impl Default for SmpConfig {
    fn default() -> Self {
        SmpConfig {
            form: QuadraticForm::Bracket,
            u_min: None,
            u_max: None,
            u_steps: 21,
            time_points: DEFAULT_TIME_POINTS,
            allowance: DEFAULT_ALLOWANCE,
            multipliers: Multipliers::Search {
                steps: DEFAULT_ANGLE_STEPS,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatesConfig {
    pub t0: f64,
    pub rhos: Vec<f64>,
    /// Constant replacement value on the spike interval.
    pub v: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<Vec<f64>>,
}

impl Default for RatesConfig {
    fn default() -> Self {
        RatesConfig {
            t0: 0.3,
            rhos: vec![0.2, 0.1, 0.05, 0.025],
            v: vec![1.0],
            eta: None,
        }
    }
}

/// Everything built from a configuration that later stages borrow from.
pub struct Resolved {
    pub model: LevyModel,
    pub moments: MomentTable,
    pub basis: TeugelBasis,
    pub eval: BasisEvaluator,
    pub spec: ProblemSpec,
}

fn poly(table: &[PolyTerm], nvars: usize, path: &str) -> Result<Poly> {
    for (i, t) in table.iter().enumerate() {
        if t.exp.len() != nvars {
            return Err(Error::config(
                format!("{path}[{i}].exp"),
                format!("expected {nvars} exponents, got {}", t.exp.len()),
            ));
        }
    }
    let terms: Vec<(&[u32], f64)> = table.iter().map(|t| (t.exp.as_slice(), t.coef)).collect();
    let p = Poly::from_terms(nvars, &terms);
    p.check_vars(nvars, path)?;
    Ok(p)
}

fn term(exp: &[u32], coef: f64) -> PolyTerm {
    PolyTerm {
        exp: exp.to_vec(),
        coef,
    }
}

impl ProblemConfig {
    /// Polynomial tables of the problem.
    pub fn tables(&self) -> PolynomialProblem {
        match self {
            ProblemConfig::LqBenchmark => ProblemConfig::Linear(benchmark()).tables(),
            ProblemConfig::LqControlledJump => {
                let mut t = ProblemConfig::Linear(controlled_jump()).tables();
                t.diffusion[0].coef[0].push(term(&[1, 1], 0.5));
                t
            }
            ProblemConfig::TwoChannel => PolynomialProblem {
                state_dim: 1,
                control_dim: 1,
                horizon: 1.0,
                x0: vec![1.0],
                drift: vec![vec![]],
                diffusion: vec![
                    DiffusionTable {
                        index: vec![1, 0],
                        coef: vec![vec![term(&[0, 1], 1.0)]],
                    },
                    DiffusionTable {
                        index: vec![0, 1],
                        coef: vec![vec![term(&[0, 1], 1.0)]],
                    },
                ],
                running_cost: vec![term(&[0, 2], 1.0)],
                terminal_cost: vec![term(&[0, 2], 1.0)],
                constraint: None,
                domain: ControlDomain::Box {
                    lo: vec![-1.0],
                    hi: vec![1.0],
                },
            },
            ProblemConfig::Linear(p) => PolynomialProblem {
                state_dim: 1,
                control_dim: 1,
                horizon: p.horizon,
                x0: vec![p.x0],
                drift: vec![vec![term(&[1, 0], p.a), term(&[0, 1], p.b)]],
                diffusion: vec![DiffusionTable {
                    index: p.index.clone(),
                    coef: vec![vec![term(&[1, 0], p.c)]],
                }],
                running_cost: vec![term(&[2, 0], p.q), term(&[0, 2], p.r)],
                terminal_cost: vec![term(&[0, 2], p.s)],
                constraint: None,
                domain: ControlDomain::Whole { dim: 1 },
            },
            ProblemConfig::Polynomial(p) => p.clone(),
        }
    }

    /// Scalar linear-quadratic part, used for the Riccati control and oracles.
    /// For the controlled-jump problem this ignores the `½ v x` term.
    pub fn scalar_lq(&self, eval: &BasisEvaluator) -> Option<ScalarLq> {
        let lin = match self {
            ProblemConfig::LqBenchmark => benchmark(),
            ProblemConfig::LqControlledJump => controlled_jump(),
            ProblemConfig::Linear(p) => p.clone(),
            _ => return None,
        };
        let pos = eval.basis().position(&MultiIndex::new(lin.index.clone())).ok()?;
        let k = eval.active().iter().position(|&a| a == pos)?;
        Some(ScalarLq {
            a: lin.a,
            b: lin.b,
            c: lin.c,
            kappa: eval.active_kappa(k),
            q: lin.q,
            r: lin.r,
            s: lin.s,
            horizon: lin.horizon,
            x0: lin.x0,
        })
    }

    pub fn build(&self) -> Result<ProblemSpec> {
        let t = self.tables();
        let (m, d) = (t.state_dim, t.control_dim);
        if m == 0 {
            return Err(Error::config("problem.state_dim", "must be positive"));
        }
        let xv = m + d;
        let vec_fn = |rows: &[PolyTable], nvars: usize, start: usize, path: &str| -> Result<VecFn> {
            let polys = rows
                .iter()
                .enumerate()
                .map(|(i, r)| poly(r, nvars, &format!("{path}[{i}]")))
                .collect::<Result<Vec<_>>>()?;
            Ok(VecFn::new(polys, nvars, start, m))
        };
        if t.drift.len() != m {
            return Err(Error::config("problem.drift", format!("expected {m} components")));
        }
        let drift = vec_fn(&t.drift, xv, 0, "problem.drift")?;
        let diffusion = t
            .diffusion
            .iter()
            .enumerate()
            .map(|(j, dt)| {
                let path = format!("problem.diffusion[{j}]");
                if dt.coef.len() != m {
                    return Err(Error::config(format!("{path}.coef"), format!("expected {m} components")));
                }
                Ok(DiffusionTerm {
                    index: MultiIndex::new(dt.index.clone()),
                    coef: vec_fn(&dt.coef, xv, 0, &format!("{path}.coef"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let constraint = match &t.constraint {
            None => None,
            Some(c) => Some(TerminalConstraint {
                g: vec_fn(&c.g, 2 * m, m, "problem.constraint.g")?,
                target: c.target.clone(),
            }),
        };
        let spec = ProblemSpec {
            state_dim: m,
            control_dim: d,
            horizon: t.horizon,
            x0: t.x0.clone(),
            drift,
            diffusion,
            running_cost: SmoothFn::new(poly(&t.running_cost, xv, "problem.running_cost")?, xv, 0, m),
            terminal_cost: SmoothFn::new(poly(&t.terminal_cost, 2 * m, "problem.terminal_cost")?, 2 * m, m, m),
            constraint,
            domain: t.domain.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn model_b() -> LevyConfig {
    LevyConfig {
        dimension: 1,
        drift: None,
        covariance: None,
        atoms: Some(vec![
            Atom {
                point: vec![1.0],
                rate: 0.5,
            },
            Atom {
                point: vec![-1.0],
                rate: 0.5,
            },
        ]),
        density: None,
    }
}

fn model_c() -> LevyConfig {
    LevyConfig {
        dimension: 2,
        drift: None,
        covariance: None,
        atoms: Some(vec![
            Atom {
                point: vec![1.0, 0.0],
                rate: 1.0,
            },
            Atom {
                point: vec![0.0, 1.0],
                rate: 1.0,
            },
        ]),
        density: None,
    }
}

impl ExperimentConfig {
    /// Built-in configurations, see [`EXAMPLES`].
    pub fn example(name: &str) -> Result<Self> {
        let base = |levy, problem| ExperimentConfig {
            levy,
            basis: BasisConfig::default(),
            problem,
            monte_carlo: MonteCarloConfig::default(),
            control: ControlConfig::Riccati,
            bsde: BsdeConfig::default(),
            smp: SmpConfig {
                u_min: Some(vec![-2.0]),
                u_max: Some(vec![2.0]),
                ..SmpConfig::default()
            },
            rates: RatesConfig::default(),
        };
        match name {
            "lq-benchmark" => Ok(base(model_b(), ProblemConfig::LqBenchmark)),
            "lq-controlled-jump" => {
                // Under a state feedback the ½ v x term grows like x² and the
                // eighth moments are carried by a handful of paths.
                let mut c = base(model_b(), ProblemConfig::LqControlledJump);
                c.control = ControlConfig::Zero;
                Ok(c)
            }
            "two-channel" => {
                let mut c = base(model_c(), ProblemConfig::TwoChannel);
                c.basis.degree = 1;
                c.control = ControlConfig::Constant { value: vec![0.5] };
                c.smp.u_min = None;
                c.smp.u_max = None;
                c.rates.v = vec![1.0];
                Ok(c)
            }
            other => Err(Error::config(
                "example",
                format!("unknown example {other:?}; expected one of {}", EXAMPLES.join(", ")),
            )),
        }
    }

    /// Parses a document, reporting schema errors with their field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<root>".into() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), format!("cannot read: {e}")))?;
        Self::from_json(&text)
    }

    /// Checks value ranges that the schema cannot express.
    pub fn validate(&self) -> Result<()> {
        let mc = &self.monte_carlo;
        if mc.paths < 2 {
            return Err(Error::config("monte_carlo.paths", "must be at least 2"));
        }
        if mc.grid == 0 {
            return Err(Error::config("monte_carlo.grid", "must be positive"));
        }
        if !(self.basis.rank_tol > 0.0 && self.basis.rank_tol < 1.0) {
            return Err(Error::config("basis.rank_tol", "must lie in (0, 1)"));
        }
        if self.basis.degree == 0 {
            return Err(Error::config("basis.degree", "must be positive"));
        }
        if self.bsde.max_iterations == 0 {
            return Err(Error::config("bsde.max_iterations", "must be positive"));
        }
        if !(self.bsde.tol > 0.0) {
            return Err(Error::config("bsde.tol", "must be positive"));
        }
        let s = &self.smp;
        if s.u_min.is_some() != s.u_max.is_some() {
            return Err(Error::config("smp.u_min", "u_min and u_max must be given together"));
        }
        if s.u_steps == 0 || s.time_points == 0 {
            return Err(Error::config("smp.u_steps", "scan sizes must be positive"));
        }
        if !(s.allowance >= 0.0) {
            return Err(Error::config("smp.allowance", "must be nonnegative"));
        }
        if let Multipliers::Search { steps } = s.multipliers {
            if steps < 2 {
                return Err(Error::config("smp.multipliers.steps", "must be at least 2"));
            }
        }
        let r = &self.rates;
        if r.rhos.len() < 2 || r.rhos.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::config("rates.rhos", "need at least two positive spike lengths"));
        }
        Ok(())
    }

    /// Canonical JSON of the fully resolved document.
    pub fn normalized(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.normalized().as_bytes()))
    }

    /// Builds the model, basis and problem.
    pub fn resolve(&self) -> Result<Resolved> {
        let model = LevyModel::from_config(&self.levy, self.basis.degree)?;
        let moments = MomentTable::build(&model, 2 * self.basis.degree)?;
        let basis = TeugelBasis::build(&model, &moments, self.basis.degree, self.basis.rank_tol)?;
        let eval = BasisEvaluator::new(&basis, &moments)?;
        let spec = self.problem.build()?;
        Ok(Resolved {
            model,
            moments,
            basis,
            eval,
            spec,
        })
    }
}
