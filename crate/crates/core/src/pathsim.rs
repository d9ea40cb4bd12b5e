//! Path sampling, controls, the controlled forward equation
//! `dx = g(x-, v) dt + Σ_p γ^p(x-, v) dH^p`, and the cost / constraint functionals.

use std::fmt;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisEvaluator, JumpPath};
use crate::error::{Error, Result};
use crate::levy::{JumpSpec, LevyModel};
use crate::multiindex::MultiIndex;
use crate::poly::{SmoothFn, VecFn};
use crate::smp::geometry::ConstraintSet;
use crate::stats::{estimate, Estimate};

pub const DEFAULT_GRID: usize = 200;
pub const DEFAULT_PATHS: usize = 100_000;
pub const DEFAULT_SCAN_STEPS: usize = 21;

/// Per-path random stream: every path gets its own ChaCha stream under the
/// run seed, so results do not depend on thread scheduling or path subsets.
pub fn path_rng(seed: u64, path_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_id);
    rng
}

/// Compound-Poisson sampler for a fixed model.
#[derive(Debug, Clone)]
pub struct PathSampler {
    model: LevyModel,
    atoms: Option<(Vec<f64>, WeightedIndex<f64>)>,
}

impl PathSampler {
    pub fn new(model: &LevyModel) -> Result<Self> {
        let atoms = match model.jumps() {
            JumpSpec::Atoms(list) if !list.is_empty() => {
                let pts = list.iter().flat_map(|a| a.point.iter().copied()).collect();
                let w = WeightedIndex::new(list.iter().map(|a| a.rate))
                    .map_err(|e| Error::InvalidModel(format!("atom rates: {e}")))?;
                Some((pts, w))
            }
            _ => None,
        };
        Ok(PathSampler {
            model: model.clone(),
            atoms,
        })
    }

    pub fn model(&self) -> &LevyModel {
        &self.model
    }

    pub fn sample(&self, horizon: f64, n_cells: usize, seed: u64, path_id: u64) -> Result<JumpPath> {
        if !(horizon > 0.0) || n_cells == 0 {
            return Err(Error::InvalidArgument("horizon and grid size must be positive".into()));
        }
        let n = self.model.dim();
        let mut rng = path_rng(seed, path_id);
        let mean = self.model.intensity() * horizon;
        let count = if mean > 0.0 {
            let dist = Poisson::new(mean).map_err(|e| Error::InvalidModel(format!("jump intensity: {e}")))?;
            dist.sample(&mut rng) as usize
        } else {
            0
        };
        let mut times = Vec::with_capacity(count);
        let mut sizes = Vec::with_capacity(count * n);
        for _ in 0..count {
            // 1 - U with U in [0, 1) lands in (0, 1].
            times.push(horizon * (1.0 - rng.random::<f64>()));
            self.sample_size(&mut rng, &mut sizes);
        }
        let gaussian = if self.model.has_gaussian_part() {
            let root = self.model.cov_sqrt();
            let sd = (horizon / n_cells as f64).sqrt();
            let mut g = Vec::with_capacity(n_cells * n);
            let mut z = vec![0.0; n];
            for _ in 0..n_cells {
                for zi in z.iter_mut() {
                    *zi = rng.sample(StandardNormal);
                }
                for a in 0..n {
                    g.push(sd * (0..n).map(|b| root[a * n + b] * z[b]).sum::<f64>());
                }
            }
            Some(g)
        } else {
            None
        };
        JumpPath::with_gaussian(n, horizon, n_cells, times, sizes, gaussian)
    }

    fn sample_size(&self, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
        let n = self.model.dim();
        if let Some((pts, w)) = &self.atoms {
            let j = w.sample(rng);
            out.extend_from_slice(&pts[j * n..(j + 1) * n]);
            return;
        }
        let JumpSpec::Density(d) = self.model.jumps() else {
            unreachable!("sampler without atoms must carry a density")
        };
        let bound = d.upper_bound();
        let mut x = vec![0.0; n];
        loop {
            for (xi, b) in x.iter_mut().zip(&d.support) {
                *xi = b[0] + (b[1] - b[0]) * rng.random::<f64>();
            }
            if rng.random::<f64>() * bound <= d.density_at(&x) {
                break;
            }
        }
        out.extend_from_slice(&x);
    }
}

/// One path on `[0, T]` with `n_cells` uniform cells, deterministic in `(seed, path_id)`.
pub fn sample_path(model: &LevyModel, horizon: f64, n_cells: usize, seed: u64, path_id: u64) -> Result<JumpPath> {
    PathSampler::new(model)?.sample(horizon, n_cells, seed, path_id)
}

/// Sampled paths together with their Teugel increments, the Monte Carlo
/// substrate shared by the forward, backward and adjoint solvers.
#[derive(Debug, Clone)]
pub struct PathBundle {
    paths: Vec<JumpPath>,
    /// Per path, `n_cells x n_active`, cell-major.
    increments: Vec<Vec<f64>>,
    n_active: usize,
    horizon: f64,
    n_cells: usize,
    seed: u64,
}

impl PathBundle {
    pub fn sample(
        model: &LevyModel,
        eval: &BasisEvaluator,
        horizon: f64,
        n_cells: usize,
        n_paths: usize,
        seed: u64,
    ) -> Result<Self> {
        let sampler = PathSampler::new(model)?;
        let paths = (0..n_paths as u64)
            .into_par_iter()
            .map(|i| sampler.sample(horizon, n_cells, seed, i))
            .collect::<Result<Vec<_>>>()?;
        let mut bundle = Self::from_paths(paths, eval)?;
        bundle.seed = seed;
        Ok(bundle)
    }

    pub fn from_paths(paths: Vec<JumpPath>, eval: &BasisEvaluator) -> Result<Self> {
        let first = paths
            .first()
            .ok_or_else(|| Error::InvalidArgument("a path bundle needs at least one path".into()))?;
        let (horizon, n_cells) = (first.horizon(), first.n_cells());
        if paths.iter().any(|p| p.n_cells() != n_cells || p.horizon() != horizon) {
            return Err(Error::InvalidArgument("paths in a bundle must share one grid".into()));
        }
        let increments = paths.par_iter().map(|p| eval.path_increments(p)).collect();
        Ok(PathBundle {
            paths,
            increments,
            n_active: eval.n_active(),
            horizon,
            n_cells,
            seed: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn paths(&self) -> &[JumpPath] {
        &self.paths
    }

    pub fn path(&self, i: usize) -> &JumpPath {
        &self.paths[i]
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_cells as f64
    }

    pub fn grid_time(&self, i: usize) -> f64 {
        self.paths[0].grid_time(i)
    }

    pub fn n_active(&self) -> usize {
        self.n_active
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// All increments of path `i`, `n_cells x n_active`.
    pub fn increments(&self, i: usize) -> &[f64] {
        &self.increments[i]
    }

    pub fn cell_increments(&self, i: usize, cell: usize) -> &[f64] {
        let k = self.n_active;
        &self.increments[i][cell * k..(cell + 1) * k]
    }
}

/// What a control may look at when evaluated on cell `step` of path `path`.
#[derive(Debug, Clone, Copy)]
pub struct ControlCtx<'a> {
    pub t: f64,
    pub step: usize,
    pub path: usize,
    /// Left-limit state at the start of the cell.
    pub x: &'a [f64],
}

pub type TimeFn = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;
pub type FeedbackFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// A control process `v(t)`, piecewise constant on the simulation grid.
#[derive(Clone)]
pub enum Control {
    Constant(Vec<f64>),
    Deterministic { dim: usize, f: TimeFn },
    Feedback { dim: usize, f: FeedbackFn },
    /// Values recorded on a bundle, `(n_cells + 1) x dim` per path.
    Recorded(Arc<RecordedControl>),
    Spiked(Arc<Spike>),
}

#[derive(Debug, Clone)]
pub struct RecordedControl {
    pub dim: usize,
    pub n_points: usize,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Spike {
    pub base: Control,
    pub replacement: Control,
    pub start: f64,
    pub len: f64,
    /// Whether the interval reaches the horizon, in which case `T` is included.
    closed_right: bool,
    tol: f64,
}

impl Spike {
    pub fn contains(&self, t: f64) -> bool {
        let end = self.start + self.len;
        t >= self.start - self.tol && (t < end - self.tol || (self.closed_right && t <= end + self.tol))
    }
}

impl fmt::Debug for Control {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Control::Constant(c) => f.debug_tuple("Constant").field(c).finish(),
            Control::Deterministic { dim, .. } => write!(f, "Deterministic(dim={dim})"),
            Control::Feedback { dim, .. } => write!(f, "Feedback(dim={dim})"),
            Control::Recorded(r) => write!(f, "Recorded(dim={}, paths={})", r.dim, r.values.len()),
            Control::Spiked(s) => f
                .debug_struct("Spiked")
                .field("base", &s.base)
                .field("replacement", &s.replacement)
                .field("start", &s.start)
                .field("len", &s.len)
                .finish(),
        }
    }
}

impl Control {
    pub fn constant(v: Vec<f64>) -> Self {
        Control::Constant(v)
    }

    pub fn deterministic(dim: usize, f: impl Fn(f64, &mut [f64]) + Send + Sync + 'static) -> Self {
        Control::Deterministic { dim, f: Arc::new(f) }
    }

    pub fn feedback(dim: usize, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        Control::Feedback { dim, f: Arc::new(f) }
    }

    /// Freezes the control process realized on `states`, so that it can be
    /// spiked without re-evaluating a feedback law on perturbed states.
    pub fn recorded(states: &StateBundle) -> Self {
        Control::Recorded(Arc::new(RecordedControl {
            dim: states.control_dim,
            n_points: states.n_cells + 1,
            values: states.paths.iter().map(|p| p.v.clone()).collect(),
        }))
    }

    pub fn dim(&self) -> usize {
        match self {
            Control::Constant(c) => c.len(),
            Control::Deterministic { dim, .. } | Control::Feedback { dim, .. } => *dim,
            Control::Recorded(r) => r.dim,
            Control::Spiked(s) => s.base.dim(),
        }
    }

    pub fn eval(&self, ctx: &ControlCtx, out: &mut [f64]) {
        match self {
            Control::Constant(c) => out.copy_from_slice(c),
            Control::Deterministic { f, .. } => f(ctx.t, out),
            Control::Feedback { f, .. } => f(ctx.t, ctx.x, out),
            Control::Recorded(r) => {
                let d = r.dim;
                out.copy_from_slice(&r.values[ctx.path][ctx.step * d..(ctx.step + 1) * d]);
            }
            Control::Spiked(s) => {
                if s.contains(ctx.t) {
                    s.replacement.eval(ctx, out)
                } else {
                    s.base.eval(ctx, out)
                }
            }
        }
    }
}

/// `u^ρ = v` on `[t0, t0 + ρ)` and `u` elsewhere.
pub fn spike_control(u: &Control, v: &Control, t0: f64, rho: f64, horizon: f64) -> Result<Control> {
    let tol = 1e-9 * horizon.max(1.0);
    if !(rho > 0.0) || t0 < -tol || t0 + rho > horizon + tol {
        return Err(Error::IntervalOutOfRange {
            start: t0,
            end: t0 + rho,
            horizon,
        });
    }
    if u.dim() != v.dim() {
        return Err(Error::DimensionMismatch {
            expected: u.dim(),
            got: v.dim(),
        });
    }
    Ok(Control::Spiked(Arc::new(Spike {
        base: u.clone(),
        replacement: v.clone(),
        start: t0,
        len: rho,
        closed_right: t0 + rho >= horizon - tol,
        tol,
    })))
}

/// Grid estimate of `d̂(a, b) = |{t : E|a(t) - b(t)|² > 0}|`, evaluated along `states`.
pub fn control_distance(a: &Control, b: &Control, states: &StateBundle) -> f64 {
    let d = a.dim();
    let m = states.state_dim;
    let dt = states.dt();
    let mut va = vec![0.0; d];
    let mut vb = vec![0.0; d];
    let mut total = 0.0;
    for i in 0..states.n_cells {
        let t = states.grid_time(i);
        let differs = states.paths.iter().enumerate().any(|(path, sp)| {
            let ctx = ControlCtx {
                t,
                step: i,
                path,
                x: &sp.x[i * m..(i + 1) * m],
            };
            a.eval(&ctx, &mut va);
            b.eval(&ctx, &mut vb);
            va.iter().zip(&vb).any(|(x, y)| x != y)
        });
        if differs {
            total += dt;
        }
    }
    total
}

/// Control domain `U`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlDomain {
    Whole { dim: usize },
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Finite { points: Vec<Vec<f64>> },
}

impl ControlDomain {
    pub fn dim(&self) -> usize {
        match self {
            ControlDomain::Whole { dim } => *dim,
            ControlDomain::Box { lo, .. } => lo.len(),
            ControlDomain::Finite { points } => points.first().map_or(0, Vec::len),
        }
    }

    pub fn contains(&self, v: &[f64], tol: f64) -> bool {
        match self {
            ControlDomain::Whole { .. } => true,
            ControlDomain::Box { lo, hi } => v
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(&x, (&a, &b))| x >= a - tol && x <= b + tol),
            ControlDomain::Finite { points } => points
                .iter()
                .any(|p| p.iter().zip(v).all(|(a, b)| (a - b).abs() <= tol)),
        }
    }

    /// Points scanned by the maximum-condition check: the finite set itself or
    /// a tensor grid with `steps` points per axis.
    pub fn scan_points(&self, steps: usize) -> Result<Vec<Vec<f64>>> {
        match self {
            ControlDomain::Whole { .. } => Err(Error::config(
                "problem.domain",
                "an unbounded control domain needs explicit scan bounds",
            )),
            ControlDomain::Finite { points } => Ok(points.clone()),
            ControlDomain::Box { lo, hi } => Ok(box_grid(lo, hi, steps)),
        }
    }
}

pub fn box_grid(lo: &[f64], hi: &[f64], steps: usize) -> Vec<Vec<f64>> {
    let axes: Vec<Vec<f64>> = lo
        .iter()
        .zip(hi)
        .map(|(&a, &b)| {
            if steps <= 1 || a == b {
                vec![a]
            } else {
                (0..steps).map(|i| a + (b - a) * i as f64 / (steps - 1) as f64).collect()
            }
        })
        .collect();
    let mut out = vec![Vec::new()];
    for axis in &axes {
        out = out
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |&c| {
                    let mut q = p.clone();
                    q.push(c);
                    q
                })
            })
            .collect();
    }
    out
}

/// `γ^p` for one basis index.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionTerm {
    pub index: MultiIndex,
    pub coef: VecFn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalConstraint {
    /// `G(y, x) ∈ R^k` in variables `(y, x)`, differentiated in `x`.
    pub g: VecFn,
    pub target: ConstraintSet,
}

/// A controlled problem. Coefficients `g, γ^p, ℓ` are functions of `(x, v)`
/// differentiated in `x`; `h` and `G` are functions of `(y, x) = (x0, x(T))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub state_dim: usize,
    pub control_dim: usize,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub drift: VecFn,
    pub diffusion: Vec<DiffusionTerm>,
    pub running_cost: SmoothFn,
    pub terminal_cost: SmoothFn,
    pub constraint: Option<TerminalConstraint>,
    pub domain: ControlDomain,
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        let (m, d) = (self.state_dim, self.control_dim);
        if m == 0 {
            return Err(Error::config("problem.state_dim", "must be positive"));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::config("problem.horizon", "must be positive"));
        }
        if self.x0.len() != m {
            return Err(Error::config("problem.x0", format!("expected {m} entries")));
        }
        let check_xv = |f: &VecFn, path: &str| -> Result<()> {
            if f.len() != m || f.components.iter().any(|c| c.nvars() != m + d || c.diff_len() != m) {
                return Err(Error::config(path, "expected m components in variables (x, v)"));
            }
            Ok(())
        };
        check_xv(&self.drift, "problem.drift")?;
        for (j, term) in self.diffusion.iter().enumerate() {
            check_xv(&term.coef, &format!("problem.diffusion[{j}]"))?;
        }
        if self.running_cost.nvars() != m + d {
            return Err(Error::config("problem.running_cost", "expected variables (x, v)"));
        }
        if self.terminal_cost.nvars() != 2 * m {
            return Err(Error::config("problem.terminal_cost", "expected variables (y, x)"));
        }
        if let Some(c) = &self.constraint {
            if c.g.len() != c.target.dim() || c.g.components.iter().any(|f| f.nvars() != 2 * m) {
                return Err(Error::config(
                    "problem.constraint",
                    "G must have one component per target dimension in variables (y, x)",
                ));
            }
            c.target.validate("problem.constraint.target")?;
        }
        if self.domain.dim() != d {
            return Err(Error::config("problem.domain", format!("expected control dimension {d}")));
        }
        Ok(())
    }

    /// Number of terminal constraint components `k` (0 when unconstrained).
    pub fn constraint_dim(&self) -> usize {
        self.constraint.as_ref().map_or(0, |c| c.g.len())
    }

    /// True when there is no constraint or the target is all of `R^k`.
    pub fn is_unconstrained(&self) -> bool {
        self.constraint.as_ref().is_none_or(|c| c.target.is_unconstrained())
    }
}

/// A problem bound to a basis: `γ` looked up per active basis element.
#[derive(Debug, Clone)]
pub struct Dynamics<'a> {
    pub spec: &'a ProblemSpec,
    pub eval: &'a BasisEvaluator,
    gamma: Vec<Option<usize>>,
}

impl<'a> Dynamics<'a> {
    pub fn new(spec: &'a ProblemSpec, eval: &'a BasisEvaluator) -> Result<Self> {
        spec.validate()?;
        let mut gamma = vec![None; eval.n_active()];
        for (j, term) in spec.diffusion.iter().enumerate() {
            let pos = eval
                .basis()
                .position(&term.index)
                .map_err(|_| Error::config(format!("problem.diffusion[{j}].index"), "not in the basis"))?;
            match eval.active().iter().position(|&a| a == pos) {
                Some(k) => {
                    if gamma[k].is_some() {
                        return Err(Error::config(
                            format!("problem.diffusion[{j}].index"),
                            "index listed twice",
                        ));
                    }
                    gamma[k] = Some(j);
                }
                None => log::warn!(
                    "γ^{} multiplies a degenerate basis element and is dropped",
                    term.index
                ),
            }
        }
        Ok(Dynamics { spec, eval, gamma })
    }

    pub fn n_active(&self) -> usize {
        self.gamma.len()
    }

    pub fn state_dim(&self) -> usize {
        self.spec.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.spec.control_dim
    }

    /// `γ` attached to the `k`-th active basis element, if any.
    pub fn gamma(&self, k: usize) -> Option<&VecFn> {
        self.gamma[k].map(|j| &self.spec.diffusion[j].coef)
    }

    /// Active elements that carry a `γ`.
    pub fn gamma_terms(&self) -> impl Iterator<Item = (usize, &VecFn)> {
        self.gamma
            .iter()
            .enumerate()
            .filter_map(|(k, j)| j.map(|j| (k, &self.spec.diffusion[j].coef)))
    }

    /// One Euler step; `xv` holds `(x_i, v_i)`.
    pub fn step(&self, xv: &[f64], dt: f64, dh: &[f64], next: &mut [f64], scratch: &mut [f64]) {
        let m = self.spec.state_dim;
        next.copy_from_slice(&xv[..m]);
        self.spec.drift.eval(xv, scratch);
        for a in 0..m {
            next[a] += scratch[a] * dt;
        }
        for (k, f) in self.gamma_terms() {
            if dh[k] == 0.0 {
                continue;
            }
            f.eval(xv, scratch);
            for a in 0..m {
                next[a] += scratch[a] * dh[k];
            }
        }
    }
}

/// State and applied control along one path.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePath {
    /// `(n_cells + 1) x m`.
    pub x: Vec<f64>,
    /// `(n_cells + 1) x d`; entry `i` is applied on cell `i`, the last is the control at `T`.
    pub v: Vec<f64>,
    /// First step at which the state became non-finite.
    pub aborted: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateBundle {
    pub state_dim: usize,
    pub control_dim: usize,
    pub horizon: f64,
    pub n_cells: usize,
    pub paths: Vec<StatePath>,
}

impl StateBundle {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_cells as f64
    }

    pub fn grid_time(&self, i: usize) -> f64 {
        if i == self.n_cells {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }

    pub fn x(&self, path: usize, step: usize) -> &[f64] {
        let m = self.state_dim;
        &self.paths[path].x[step * m..(step + 1) * m]
    }

    pub fn v(&self, path: usize, step: usize) -> &[f64] {
        let d = self.control_dim;
        &self.paths[path].v[step * d..(step + 1) * d]
    }

    pub fn terminal(&self, path: usize) -> &[f64] {
        self.x(path, self.n_cells)
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.paths.iter().enumerate().find_map(|(i, p)| p.aborted.map(|s| (i, s))) {
            Some((path, step)) => Err(Error::NonFiniteState { path, step }),
            None => Ok(()),
        }
    }

    /// Monte Carlo mean of `x(t_i)` per grid time (first state component).
    pub fn mean_state(&self, component: usize) -> Vec<Estimate> {
        (0..=self.n_cells)
            .map(|i| estimate(self.paths.iter().map(|p| p.x[i * self.state_dim + component])))
            .collect()
    }
}

/// Euler scheme on one path, with the exact Teugel increment on each cell.
pub fn integrate_forward(
    dynamics: &Dynamics,
    control: &Control,
    path: &JumpPath,
    path_id: usize,
    increments: &[f64],
) -> Result<StatePath> {
    let spec = dynamics.spec;
    let (m, d) = (spec.state_dim, spec.control_dim);
    if control.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: control.dim(),
        });
    }
    let n = path.n_cells();
    let k = dynamics.n_active();
    if increments.len() != n * k {
        return Err(Error::DimensionMismatch {
            expected: n * k,
            got: increments.len(),
        });
    }
    let dt = path.dt();
    let mut x = vec![f64::NAN; (n + 1) * m];
    let mut v = vec![f64::NAN; (n + 1) * d];
    x[..m].copy_from_slice(&spec.x0);
    let mut xv = vec![0.0; m + d];
    let mut next = vec![0.0; m];
    let mut scratch = vec![0.0; m];
    let mut aborted = None;
    for i in 0..n {
        let ctx = ControlCtx {
            t: path.grid_time(i),
            step: i,
            path: path_id,
            x: &x[i * m..(i + 1) * m],
        };
        control.eval(&ctx, &mut v[i * d..(i + 1) * d]);
        xv[..m].copy_from_slice(&x[i * m..(i + 1) * m]);
        xv[m..].copy_from_slice(&v[i * d..(i + 1) * d]);
        dynamics.step(&xv, dt, &increments[i * k..(i + 1) * k], &mut next, &mut scratch);
        if next.iter().any(|c| !c.is_finite()) {
            aborted = Some(i);
            break;
        }
        x[(i + 1) * m..(i + 2) * m].copy_from_slice(&next);
    }
    if aborted.is_none() {
        let ctx = ControlCtx {
            t: path.horizon(),
            step: n,
            path: path_id,
            x: &x[n * m..(n + 1) * m],
        };
        control.eval(&ctx, &mut v[n * d..(n + 1) * d]);
    }
    Ok(StatePath { x, v, aborted })
}

/// [`integrate_forward`] over a bundle, in parallel over paths.
pub fn integrate_bundle(dynamics: &Dynamics, control: &Control, bundle: &PathBundle) -> Result<StateBundle> {
    if bundle.n_active() != dynamics.n_active() {
        return Err(Error::DimensionMismatch {
            expected: dynamics.n_active(),
            got: bundle.n_active(),
        });
    }
    let paths = (0..bundle.len())
        .into_par_iter()
        .map(|i| integrate_forward(dynamics, control, bundle.path(i), i, bundle.increments(i)))
        .collect::<Result<Vec<_>>>()?;
    for (i, p) in paths.iter().enumerate() {
        if let Some(step) = p.aborted {
            log::warn!("path {i}: state became non-finite at step {step}; integration aborted");
        }
    }
    Ok(StateBundle {
        state_dim: dynamics.spec.state_dim,
        control_dim: dynamics.spec.control_dim,
        horizon: bundle.horizon(),
        n_cells: bundle.n_cells(),
        paths,
    })
}

/// `sup_t (E|v(t)|^8)^{1/8}` over the grid, for the control realized on `states`.
pub fn admissibility_norm(states: &StateBundle) -> f64 {
    let d = states.control_dim;
    (0..=states.n_cells)
        .map(|i| {
            let n = states.paths.len() as f64;
            let m8: f64 = states
                .paths
                .iter()
                .map(|p| {
                    let s: f64 = p.v[i * d..(i + 1) * d].iter().map(|c| c * c).sum();
                    s.powi(4)
                })
                .sum::<f64>()
                / n;
            m8.powf(0.125)
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostEstimate {
    pub total: Estimate,
    pub running: Estimate,
    pub terminal: Estimate,
}

/// Trapezoidal running cost (control held at its cell value) and terminal cost of one path.
pub fn path_cost(spec: &ProblemSpec, states: &StateBundle, path: usize) -> (f64, f64) {
    let (m, d) = (states.state_dim, states.control_dim);
    let dt = states.dt();
    let mut xv = vec![0.0; m + d];
    let mut running = 0.0;
    for i in 0..states.n_cells {
        xv[m..].copy_from_slice(states.v(path, i));
        xv[..m].copy_from_slice(states.x(path, i));
        let a = spec.running_cost.eval(&xv);
        xv[..m].copy_from_slice(states.x(path, i + 1));
        let b = spec.running_cost.eval(&xv);
        running += 0.5 * (a + b) * dt;
    }
    let mut yx = vec![0.0; 2 * m];
    yx[..m].copy_from_slice(&spec.x0);
    yx[m..].copy_from_slice(states.terminal(path));
    (running, spec.terminal_cost.eval(&yx))
}

/// `J = E ∫ ℓ dt + E h(x0, x(T))` with standard errors.
pub fn cost(spec: &ProblemSpec, states: &StateBundle) -> Result<CostEstimate> {
    states.check_finite()?;
    let parts: Vec<(f64, f64)> = (0..states.len())
        .into_par_iter()
        .map(|i| path_cost(spec, states, i))
        .collect();
    Ok(CostEstimate {
        total: estimate(parts.iter().map(|(a, b)| a + b)),
        running: estimate(parts.iter().map(|p| p.0)),
        terminal: estimate(parts.iter().map(|p| p.1)),
    })
}

/// `E G(x0, x(T))` componentwise.
pub fn constraint_value(spec: &ProblemSpec, states: &StateBundle) -> Result<Vec<Estimate>> {
    states.check_finite()?;
    let Some(c) = &spec.constraint else {
        return Ok(Vec::new());
    };
    let m = states.state_dim;
    let k = c.g.len();
    let values: Vec<Vec<f64>> = (0..states.len())
        .map(|i| {
            let mut yx = vec![0.0; 2 * m];
            yx[..m].copy_from_slice(&spec.x0);
            yx[m..].copy_from_slice(states.terminal(i));
            let mut out = vec![0.0; k];
            c.g.eval(&yx, &mut out);
            out
        })
        .collect();
    Ok((0..k).map(|j| estimate(values.iter().map(|v| v[j]))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::TeugelBasis;
    use crate::levy::{Atom, MomentTable};
    use crate::poly::Poly;
    use proptest::prelude::*;

    fn symmetric() -> LevyModel {
        LevyModel::atoms(vec![
            Atom { point: vec![1.0], rate: 0.5 },
            Atom { point: vec![-1.0], rate: 0.5 },
        ])
        .unwrap()
    }

    fn evaluator(model: &LevyModel, degree: u32) -> BasisEvaluator {
        let moments = MomentTable::build(model, 2 * degree).unwrap();
        let basis = TeugelBasis::build(model, &moments, degree, 1e-10).unwrap();
        BasisEvaluator::new(&basis, &moments).unwrap()
    }

    /// Scalar problem in `(x, v)` with the given polynomial tables.
    fn scalar_spec(g: &[(&[u32], f64)], gamma1: &[(&[u32], f64)], ell: &[(&[u32], f64)], h: &[(&[u32], f64)]) -> ProblemSpec {
        ProblemSpec {
            state_dim: 1,
            control_dim: 1,
            horizon: 1.0,
            x0: vec![0.0],
            drift: VecFn::new(vec![Poly::from_terms(2, g)], 2, 0, 1),
            diffusion: vec![DiffusionTerm {
                index: MultiIndex::new(vec![1]),
                coef: VecFn::new(vec![Poly::from_terms(2, gamma1)], 2, 0, 1),
            }],
            running_cost: SmoothFn::new(Poly::from_terms(2, ell), 2, 0, 1),
            terminal_cost: SmoothFn::new(Poly::from_terms(2, h), 2, 1, 1),
            constraint: None,
            domain: ControlDomain::Whole { dim: 1 },
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let m = symmetric();
        let a = sample_path(&m, 1.0, 50, 7, 3).unwrap();
        let b = sample_path(&m, 1.0, 50, 7, 3).unwrap();
        assert_eq!(a, b);
        let differs = (0..20).any(|i| sample_path(&m, 1.0, 50, 7, i).unwrap() != a);
        assert!(differs);
    }

    #[test]
    fn poisson_jump_count() {
        let m = LevyModel::atoms(vec![Atom { point: vec![1.0], rate: 1.0 }]).unwrap();
        let s = PathSampler::new(&m).unwrap();
        let counts: Vec<f64> = (0..100_000)
            .into_par_iter()
            .map(|i| s.sample(1.0, 10, 11, i).unwrap().jump_count() as f64)
            .collect();
        let e = estimate(counts);
        assert!(e.within(1.0, 3.0), "{e:?}");
    }

    #[test]
    fn empty_measure_has_no_jumps() {
        let m = LevyModel::new(1, vec![0.0], vec![0.0], JumpSpec::Atoms(vec![])).unwrap();
        for i in 0..100 {
            assert_eq!(sample_path(&m, 1.0, 10, 1, i).unwrap().jump_count(), 0);
        }
    }

    #[test]
    fn density_sizes_stay_in_support() {
        let cfg: crate::levy::LevyConfig = serde_json::from_str(
            r#"{"dimension":1,"density":{"support":[[-1.0,2.0]],"kind":"polynomial","terms":[{"exp":[2],"coef":1.0}]}}"#,
        )
        .unwrap();
        let m = LevyModel::from_config(&cfg, 2).unwrap();
        let mut sizes = Vec::new();
        for i in 0..2000 {
            let p = sample_path(&m, 1.0, 10, 5, i).unwrap();
            sizes.extend((0..p.jump_count()).map(|j| p.jump_size(j)[0]));
        }
        assert!(sizes.iter().all(|&x| (-1.0..=2.0).contains(&x)));
        // ν/Λ has density 3x²/9 on [-1, 2], mean 5/4.
        let e = estimate(sizes.iter().copied());
        assert!(e.within(1.25, 4.0), "{e:?}");
    }

    #[test]
    fn gaussian_increments_have_the_right_variance() {
        let m = LevyModel::new(1, vec![0.0], vec![4.0], JumpSpec::Atoms(vec![])).unwrap();
        let e = estimate((0..20_000).map(|i| {
            let p = sample_path(&m, 1.0, 4, 2, i).unwrap();
            p.gaussian_increment(0).unwrap()[0].powi(2)
        }));
        assert!(e.within(1.0, 4.0), "{e:?}");
    }

    fn integrate_one(spec: &ProblemSpec, eval: &BasisEvaluator, control: &Control, n_paths: usize) -> (PathBundle, StateBundle) {
        let bundle = PathBundle::sample(&symmetric(), eval, spec.horizon, 100, n_paths, 9).unwrap();
        let dynamics = Dynamics::new(spec, eval).unwrap();
        let states = integrate_bundle(&dynamics, control, &bundle).unwrap();
        (bundle, states)
    }

    #[test]
    fn frozen_dynamics() {
        let eval = evaluator(&symmetric(), 2);
        let mut spec = scalar_spec(&[], &[], &[], &[(&[0, 2], 1.0)]);
        spec.x0 = vec![2.0];
        let (_, states) = integrate_one(&spec, &eval, &Control::constant(vec![0.0]), 50);
        assert!(states.paths.iter().all(|p| p.x.iter().all(|&x| x == 2.0)));
        let j = cost(&spec, &states).unwrap();
        assert_eq!(j.total.mean, 4.0);
    }

    #[test]
    fn additive_noise_reproduces_the_martingale() {
        let eval = evaluator(&symmetric(), 2);
        let spec = scalar_spec(&[], &[(&[0, 0], 1.0)], &[], &[]);
        let (bundle, states) = integrate_one(&spec, &eval, &Control::constant(vec![0.0]), 200);
        let h1 = MultiIndex::new(vec![1]);
        for (i, p) in bundle.paths().iter().enumerate() {
            for step in 0..=p.n_cells() {
                let h = eval.evaluate(p, &h1, p.grid_time(step)).unwrap();
                assert!((states.x(i, step)[0] - h).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_control_ode_is_exact() {
        let eval = evaluator(&symmetric(), 2);
        let spec = scalar_spec(&[(&[0, 1], 1.0)], &[], &[], &[]);
        let (_, states) = integrate_one(&spec, &eval, &Control::constant(vec![1.0]), 10);
        for i in 0..states.len() {
            assert!((states.terminal(i)[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn euler_weak_consistency() {
        // dx = -0.5 x dt + 0.3 dH: E x(T) = x0 e^{-T/2}.
        let eval = evaluator(&symmetric(), 2);
        let mut spec = scalar_spec(&[(&[1, 0], -0.5)], &[(&[0, 0], 0.3)], &[], &[]);
        spec.x0 = vec![1.0];
        let (_, states) = integrate_one(&spec, &eval, &Control::constant(vec![0.0]), 20_000);
        let e = estimate((0..states.len()).map(|i| states.terminal(i)[0]));
        let exact = (-0.5f64).exp();
        let euler_bias = (exact - (1.0 - 0.5 * 0.01f64).powi(100)).abs();
        assert!((e.mean - exact).abs() <= 3.0 * e.stderr + 2.0 * euler_bias + 1e-12, "{e:?}");
    }

    #[test]
    fn running_cost_and_constraint_examples() {
        let eval = evaluator(&symmetric(), 2);
        let mut spec = scalar_spec(&[], &[(&[0, 0], 1.0)], &[(&[0, 0], 1.0)], &[]);
        spec.constraint = Some(TerminalConstraint {
            g: VecFn::new(vec![Poly::from_terms(2, &[(&[0, 1], 1.0)])], 2, 1, 1),
            target: ConstraintSet::All { dim: 1 },
        });
        let (_, states) = integrate_one(&spec, &eval, &Control::constant(vec![0.0]), 5000);
        let j = cost(&spec, &states).unwrap();
        assert!((j.total.mean - 1.0).abs() < 1e-12);
        let eg = constraint_value(&spec, &states).unwrap();
        assert!(eg[0].within(0.0, 3.0), "{:?}", eg[0]);
    }

    #[test]
    fn spike_examples() {
        let u = Control::constant(vec![0.0]);
        let v = Control::constant(vec![1.0]);
        let eval = evaluator(&symmetric(), 2);
        let spec = scalar_spec(&[], &[], &[], &[]);
        let (_, states) = integrate_one(&spec, &eval, &u, 20);
        let s = spike_control(&u, &v, 0.3, 0.1, 1.0).unwrap();
        let at = |c: &Control, t: f64| {
            let mut out = [0.0];
            c.eval(&ControlCtx { t, step: 0, path: 0, x: &[0.0] }, &mut out);
            out[0]
        };
        assert_eq!(at(&s, 0.29), 0.0);
        assert_eq!(at(&s, 0.3), 1.0);
        assert_eq!(at(&s, 0.395), 1.0);
        assert_eq!(at(&s, 0.4), 0.0);
        assert!((control_distance(&s, &u, &states) - 0.1).abs() < 1e-12);
        let same = spike_control(&u, &u, 0.3, 0.1, 1.0).unwrap();
        assert_eq!(control_distance(&same, &u, &states), 0.0);
        let full = spike_control(&u, &v, 0.0, 1.0, 1.0).unwrap();
        assert!([0.0, 0.5, 1.0].iter().all(|&t| at(&full, t) == 1.0));
        assert!(spike_control(&u, &v, 0.95, 0.1, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn spike_is_idempotent_outside_the_interval(t0 in 0.0..0.8f64, rho in 0.01..0.2f64, t in 0.0..1.0f64) {
            let u = Control::deterministic(1, |t, out| out[0] = (3.0 * t).sin());
            let v = Control::constant(vec![5.0]);
            let s = spike_control(&u, &v, t0, rho, 1.0).unwrap();
            let ctx = ControlCtx { t, step: 0, path: 0, x: &[0.0] };
            let (mut a, mut b) = ([0.0], [0.0]);
            s.eval(&ctx, &mut a);
            u.eval(&ctx, &mut b);
            if t < t0 - 1e-9 || t >= t0 + rho {
                prop_assert_eq!(a[0], b[0]);
            } else if t >= t0 && t < t0 + rho - 1e-9 {
                prop_assert_eq!(a[0], 5.0);
            }
        }
    }

    #[test]
    fn admissibility_examples() {
        let eval = evaluator(&symmetric(), 2);
        let spec = scalar_spec(&[(&[0, 1], 1.0)], &[(&[1, 0], 0.5)], &[], &[]);
        let (_, s) = integrate_one(&spec, &eval, &Control::constant(vec![-1.5]), 20);
        assert!((admissibility_norm(&s) - 1.5).abs() < 1e-12);
        let (_, s) = integrate_one(&spec, &eval, &Control::deterministic(1, |t, o| o[0] = t), 20);
        assert!((admissibility_norm(&s) - 1.0).abs() < 1e-12);
        let mut spec = spec;
        spec.x0 = vec![1.0];
        let (_, s) = integrate_one(&spec, &eval, &Control::feedback(1, |_, x, o| o[0] = -x[0]), 2000);
        let n = admissibility_norm(&s);
        assert!(n.is_finite() && n >= 1.0, "{n}");
    }

    #[test]
    fn cost_is_monotone_and_paths_reproducible() {
        let eval = evaluator(&symmetric(), 2);
        let mut low = scalar_spec(&[(&[0, 1], 1.0)], &[(&[1, 0], 1.0)], &[(&[2, 0], 1.0)], &[]);
        low.x0 = vec![1.0];
        let mut high = low.clone();
        high.running_cost = SmoothFn::new(Poly::from_terms(2, &[(&[2, 0], 1.0), (&[0, 2], 1.0)]), 2, 0, 1);
        let u = Control::feedback(1, |_, x, o| o[0] = -0.5 * x[0]);
        let (_, s1) = integrate_one(&low, &eval, &u, 500);
        let (_, s2) = integrate_one(&high, &eval, &u, 500);
        assert_eq!(s1, s2);
        for i in 0..s1.len() {
            assert!(path_cost(&low, &s1, i).0 <= path_cost(&high, &s2, i).0);
        }
        assert!(cost(&low, &s1).unwrap().total.mean <= cost(&high, &s2).unwrap().total.mean);
    }

    #[test]
    fn blow_up_is_flagged() {
        let eval = evaluator(&symmetric(), 2);
        let mut spec = scalar_spec(&[(&[3, 0], 1e6)], &[], &[], &[]);
        spec.x0 = vec![10.0];
        let (_, s) = integrate_one(&spec, &eval, &Control::constant(vec![0.0]), 3);
        assert!(s.paths.iter().all(|p| p.aborted.is_some()));
        assert!(matches!(cost(&spec, &s), Err(Error::NonFiniteState { .. })));
    }

    #[test]
    fn box_scan_grid() {
        let d = ControlDomain::Box { lo: vec![-1.0, 0.0], hi: vec![1.0, 1.0] };
        let pts = d.scan_points(3).unwrap();
        assert_eq!(pts.len(), 9);
        assert_eq!(pts[0], vec![-1.0, 0.0]);
        assert_eq!(pts[8], vec![1.0, 1.0]);
        assert!(ControlDomain::Whole { dim: 1 }.scan_points(3).is_err());
    }
}
