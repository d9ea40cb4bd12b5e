//! Least-squares Monte Carlo solver for BSDEs driven by the truncated Teugel family,
//!
//! ```text
//! -dY(t) = f(t, Y(t-), Z(t)) dt - Σ_p Z^p(t) dH^p(t),    Y(T) = ξ,
//! ```
//!
//! discretized implicitly in `Y` and explicitly in `Z`:
//! `Z^p_i = E_i[(Y_{i+1} - E_i Y_{i+1}) ΔH^p_i] / (κ_p Δt)` and
//! `Y_i = E_i Y_{i+1} + f(t_i, Y_i, Z_i) Δt`. Conditional expectations are
//! global regressions on polynomial features of the time-`t_i` information.

use log::info;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisEvaluator, JumpPath};
use crate::error::{Error, Result};
use crate::multiindex::{enumerate_multiindices, MultiIndex};
use crate::pathsim::{PathBundle, StateBundle};
use crate::stats::{estimate, Estimate};

pub const MAX_FIXED_POINT_ITERATIONS: usize = 50;
pub const FIXED_POINT_TOL: f64 = 1e-10;
/// Features whose pivoted-Cholesky residual falls below this fraction of
/// their (standardized) variance are dropped from a step's regression.
pub const FEATURE_DROP_TOL: f64 = 1e-10;
/// Relative floor of the residual-check threshold.
pub const RESIDUAL_FLOOR: f64 = 1e-8;
const CHUNK: usize = 2048;

/// Where a driver is being evaluated.
#[derive(Debug, Clone, Copy)]
pub struct DriverCtx {
    pub t: f64,
    pub step: usize,
    pub path: usize,
}

/// Generator `f(t, y, z)`. `z` is laid out index-major: `z[k * dim + a]` is
/// component `a` of `Z` on the `k`-th active basis element.
pub trait Driver: Sync {
    fn dim(&self) -> usize;

    fn eval(&self, ctx: &DriverCtx, y: &[f64], z: &[f64], out: &mut [f64]);

    /// Lipschitz constant in `(y, z)`, used for damping and a-priori bounds.
    fn lipschitz(&self) -> f64;

    /// Lipschitz constant at one grid point; decides the fixed-point damping there.
    fn local_lipschitz(&self, _ctx: &DriverCtx) -> f64 {
        self.lipschitz()
    }

    /// For drivers affine in `y` at this point, `f = A y + b`: writes `A`
    /// (row-major `dim x dim`) and `b`, and returns true. The implicit step is
    /// then solved directly instead of by fixed-point iteration.
    fn affine(&self, _ctx: &DriverCtx, _z: &[f64], _a: &mut [f64], _b: &mut [f64]) -> bool {
        false
    }

    /// Hook applied to `(Y_i, Z_i)` after each step, e.g. symmetrization.
    fn post_step(&self, _y: &mut [f64], _z: &mut [f64]) {}
}

/// Driver given by a closure.
pub struct FnDriver<F> {
    pub dim: usize,
    pub lipschitz: f64,
    pub f: F,
}

impl<F> Driver for FnDriver<F>
where
    F: Fn(&DriverCtx, &[f64], &[f64], &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, ctx: &DriverCtx, y: &[f64], z: &[f64], out: &mut [f64]) {
        (self.f)(ctx, y, z, out)
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }
}

/// `f ≡ 0`.
pub struct ZeroDriver(pub usize);

impl Driver for ZeroDriver {
    fn dim(&self) -> usize {
        self.0
    }

    fn eval(&self, _: &DriverCtx, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }

    fn lipschitz(&self) -> f64 {
        0.0
    }

    fn affine(&self, _: &DriverCtx, _: &[f64], a: &mut [f64], b: &mut [f64]) -> bool {
        a.iter_mut().for_each(|v| *v = 0.0);
        b.iter_mut().for_each(|v| *v = 0.0);
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureDegree {
    Poly2,
    Poly3,
}

impl FeatureDegree {
    pub fn degree(self) -> u32 {
        match self {
            FeatureDegree::Poly2 => 2,
            FeatureDegree::Poly3 => 3,
        }
    }
}

impl std::str::FromStr for FeatureDegree {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poly2" => Ok(FeatureDegree::Poly2),
            "poly3" => Ok(FeatureDegree::Poly3),
            _ => Err(Error::config("features", format!("unknown feature set `{s}` (poly2 | poly3)"))),
        }
    }
}

/// Regression inputs at `t_i`: the controlled state, the driver levels
/// `X(t_i)` without drift, and the jump count `N(t_i)`. The features are all
/// monomials of the inputs up to the chosen degree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub degree: FeatureDegree,
    #[serde(default = "yes")]
    pub state: bool,
    #[serde(default = "yes")]
    pub levels: bool,
    #[serde(default = "yes")]
    pub jump_count: bool,
}

fn yes() -> bool {
    true
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            degree: FeatureDegree::Poly2,
            state: true,
            levels: true,
            jump_count: true,
        }
    }
}

impl FeatureSpec {
    pub fn with_degree(degree: FeatureDegree) -> Self {
        FeatureSpec {
            degree,
            ..Self::default()
        }
    }
}

/// Evaluates features for one bundle (and optional controlled states).
pub struct FeatureMap<'a> {
    bundle: &'a PathBundle,
    states: Option<&'a StateBundle>,
    spec: FeatureSpec,
    monomials: Vec<MultiIndex>,
    n_inputs: usize,
}

impl<'a> FeatureMap<'a> {
    pub fn new(spec: FeatureSpec, bundle: &'a PathBundle, states: Option<&'a StateBundle>) -> Result<Self> {
        if let Some(s) = states {
            if s.len() != bundle.len() || s.n_cells != bundle.n_cells() {
                return Err(Error::InvalidArgument("states do not match the path bundle".into()));
            }
        }
        let n = bundle.path(0).dim();
        let n_inputs = if spec.state { states.map_or(0, |s| s.state_dim) } else { 0 }
            + if spec.levels { n } else { 0 }
            + usize::from(spec.jump_count);
        let monomials = if n_inputs == 0 {
            Vec::new()
        } else {
            enumerate_multiindices(n_inputs, spec.degree.degree())
        };
        Ok(FeatureMap {
            bundle,
            states,
            spec,
            monomials,
            n_inputs,
        })
    }

    /// Number of non-constant features.
    pub fn len(&self) -> usize {
        self.monomials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.monomials.is_empty()
    }

    fn inputs(&self, path: usize, step: usize, out: &mut Vec<f64>) {
        out.clear();
        if self.spec.state {
            if let Some(s) = self.states {
                out.extend_from_slice(s.x(path, step));
            }
        }
        let p: &JumpPath = self.bundle.path(path);
        if self.spec.levels || self.spec.jump_count {
            let n = p.dim();
            let upto = if step >= p.n_cells() {
                p.jump_count()
            } else {
                p.jumps_in_cell(step).start
            };
            if self.spec.levels {
                let start = out.len();
                out.extend(std::iter::repeat_n(0.0, n));
                for j in 0..upto {
                    for (o, s) in out[start..].iter_mut().zip(p.jump_size(j)) {
                        *o += s;
                    }
                }
                for c in 0..step.min(p.n_cells()) {
                    if let Some(g) = p.gaussian_increment(c) {
                        for (o, s) in out[start..].iter_mut().zip(g) {
                            *o += s;
                        }
                    }
                }
            }
            if self.spec.jump_count {
                out.push(upto as f64);
            }
        }
        debug_assert_eq!(out.len(), self.n_inputs);
    }

    /// Feature matrix at `step`, `n_paths x len`, row-major.
    pub fn matrix(&self, step: usize) -> Vec<f64> {
        let f = self.len();
        let mut out = vec![0.0; self.bundle.len() * f];
        out.par_chunks_mut(f.max(1) * CHUNK)
            .enumerate()
            .for_each(|(c, rows)| {
                let mut inp = Vec::with_capacity(self.n_inputs);
                for (r, row) in rows.chunks_mut(f.max(1)).enumerate() {
                    if f == 0 {
                        break;
                    }
                    self.inputs(c * CHUNK + r, step, &mut inp);
                    for (o, q) in row.iter_mut().zip(&self.monomials) {
                        *o = q.monomial(&inp);
                    }
                }
            });
        out
    }
}

/// Least-squares projector onto `span{1, features}` for one grid time.
pub struct Projector {
    n: usize,
    f: usize,
    phi: Vec<f64>,
    means: Vec<f64>,
    keep: Vec<usize>,
    scale: Vec<f64>,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

/// Sum of per-chunk partial sums, combined in chunk order so that the result
/// does not depend on the thread count.
fn chunked_sum<F>(n: usize, len: usize, f: F) -> Vec<f64>
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) + Sync,
{
    let parts: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; len];
            f(c * CHUNK..((c + 1) * CHUNK).min(n), &mut acc);
            acc
        })
        .collect();
    let mut total = vec![0.0; len];
    for p in parts {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

fn column_means(data: &[f64], n: usize, cols: usize) -> Vec<f64> {
    let mut sums = chunked_sum(n, cols, |rows, acc| {
        for r in rows {
            for (a, v) in acc.iter_mut().zip(&data[r * cols..(r + 1) * cols]) {
                *a += v;
            }
        }
    });
    for (j, s) in sums.iter_mut().enumerate() {
        // Keep constant columns exact.
        if (0..n).all(|r| data[r * cols + j] == data[j]) {
            *s = data[j];
        } else {
            *s /= n as f64;
        }
    }
    sums
}

impl Projector {
    /// `phi` is `n x f` row-major (without the constant column).
    pub fn new(phi: Vec<f64>, n: usize, f: usize) -> Self {
        let means = if f > 0 { column_means(&phi, n, f) } else { Vec::new() };
        let mut p = Projector {
            n,
            f,
            phi,
            means,
            keep: Vec::new(),
            scale: Vec::new(),
            chol: None,
        };
        if f == 0 || n < 2 {
            return p;
        }
        let means = &p.means;
        let phi = &p.phi;
        let gram = chunked_sum(n, f * f, |rows, acc| {
            let mut c = vec![0.0; f];
            for r in rows {
                for j in 0..f {
                    c[j] = phi[r * f + j] - means[j];
                }
                for a in 0..f {
                    for b in a..f {
                        acc[a * f + b] += c[a] * c[b];
                    }
                }
            }
        });
        let scale: Vec<f64> = (0..f)
            .map(|j| {
                let d = gram[j * f + j];
                if d > 0.0 {
                    1.0 / d.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let corr = |a: usize, b: usize| {
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            gram[a * f + b] * scale[a] * scale[b]
        };
        // Greedy pivoted Cholesky on the standardized Gram matrix.
        let mut resid: Vec<f64> = (0..f).map(|j| if scale[j] > 0.0 { 1.0 } else { 0.0 }).collect();
        let mut cols: Vec<Vec<f64>> = Vec::new();
        let mut keep = Vec::new();
        loop {
            let (best, &val) = match resid
                .iter()
                .enumerate()
                .filter(|(j, _)| !keep.contains(j))
                .max_by(|a, b| a.1.total_cmp(b.1))
            {
                Some(x) => x,
                None => break,
            };
            if val <= FEATURE_DROP_TOL {
                break;
            }
            let piv = val.sqrt();
            let col: Vec<f64> = (0..f)
                .map(|j| {
                    let s: f64 = cols.iter().map(|c| c[best] * c[j]).sum();
                    (corr(best, j) - s) / piv
                })
                .collect();
            for j in 0..f {
                resid[j] -= col[j] * col[j];
            }
            keep.push(best);
            cols.push(col);
        }
        keep.sort_unstable();
        if !keep.is_empty() {
            let k = keep.len();
            let sub = DMatrix::from_fn(k, k, |a, b| corr(keep[a], keep[b]));
            p.chol = sub.cholesky();
            if p.chol.is_none() {
                keep.clear();
            }
        }
        p.keep = keep;
        p.scale = scale;
        p
    }

    pub fn n_features(&self) -> usize {
        self.f
    }

    pub fn n_dropped(&self) -> usize {
        self.f - self.keep.len()
    }

    /// Fitted values of each of the `cols` target columns (`n x cols`, row-major).
    pub fn fit(&self, target: &[f64], cols: usize) -> Vec<f64> {
        let n = self.n;
        let tmeans = column_means(target, n, cols);
        let mut fitted = vec![0.0; n * cols];
        for r in 0..n {
            fitted[r * cols..(r + 1) * cols].copy_from_slice(&tmeans);
        }
        let Some(chol) = &self.chol else { return fitted };
        let k = self.keep.len();
        let (phi, means, keep, scale, f) = (&self.phi, &self.means, &self.keep, &self.scale, self.f);
        let rhs = chunked_sum(n, k * cols, |rows, acc| {
            for r in rows {
                for (a, &j) in keep.iter().enumerate() {
                    let x = (phi[r * f + j] - means[j]) * scale[j];
                    for c in 0..cols {
                        acc[a * cols + c] += x * (target[r * cols + c] - tmeans[c]);
                    }
                }
            }
        });
        let mut beta = vec![0.0; k * cols];
        for c in 0..cols {
            let b = DVector::from_fn(k, |a, _| rhs[a * cols + c]);
            if b.iter().all(|&v| v == 0.0) {
                continue;
            }
            let s = chol.solve(&b);
            for a in 0..k {
                beta[a * cols + c] = s[a];
            }
        }
        if beta.iter().all(|&b| b == 0.0) {
            return fitted;
        }
        fitted.par_chunks_mut(cols).enumerate().for_each(|(r, out)| {
            for (a, &j) in keep.iter().enumerate() {
                let x = (phi[r * f + j] - means[j]) * scale[j];
                for c in 0..cols {
                    out[c] += x * beta[a * cols + c];
                }
            }
        });
        fitted
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BsdeOptions {
    pub features: FeatureSpec,
    pub max_iterations: usize,
    pub tol: f64,
}

impl Default for BsdeOptions {
    fn default() -> Self {
        BsdeOptions {
            features: FeatureSpec::default(),
            max_iterations: MAX_FIXED_POINT_ITERATIONS,
            tol: FIXED_POINT_TOL,
        }
    }
}

/// `Y` on every grid time and `Z` on every cell, per path.
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    pub dim: usize,
    pub n_paths: usize,
    pub n_cells: usize,
    pub dt: f64,
    /// Active basis indices, the rows of `Z`.
    pub indices: Vec<MultiIndex>,
    pub kappa: Vec<f64>,
    /// `y[i]` is `n_paths x dim` at `t_i`, `i = 0..=n_cells`.
    pub y: Vec<Vec<f64>>,
    /// `z[i]` is `n_paths x (n_active * dim)` on cell `i`.
    pub z: Vec<Vec<f64>>,
    /// RMS of `Y_{i+1} - E_i Y_{i+1}` per step.
    pub regression_residuals: Vec<f64>,
    /// Features dropped at each step by the rank-revealing factorization.
    pub dropped_features: Vec<usize>,
}

impl BsdeSolution {
    pub fn n_active(&self) -> usize {
        self.indices.len()
    }

    pub fn y_at(&self, step: usize, path: usize) -> &[f64] {
        &self.y[step][path * self.dim..(path + 1) * self.dim]
    }

    pub fn z_at(&self, step: usize, path: usize) -> &[f64] {
        let w = self.dim * self.n_active();
        &self.z[step][path * w..(path + 1) * w]
    }

    pub fn grid_time(&self, i: usize) -> f64 {
        if i == self.n_cells {
            self.dt * self.n_cells as f64
        } else {
            i as f64 * self.dt
        }
    }

    /// Monte Carlo mean of component `a` of `Y(t_i)`.
    pub fn mean_y(&self, step: usize, a: usize) -> Estimate {
        estimate((0..self.n_paths).map(|p| self.y_at(step, p)[a]))
    }

    /// Monte Carlo mean of component `a` of `Z^k` on cell `i`.
    pub fn mean_z(&self, step: usize, k: usize, a: usize) -> Estimate {
        estimate((0..self.n_paths).map(|p| self.z_at(step, p)[k * self.dim + a]))
    }
}

/// Backward induction for the BSDE with `driver` and per-path terminal values
/// `terminal` (`n_paths x dim`). Features see `states` when given.
pub fn solve_bsde(
    driver: &dyn Driver,
    terminal: &[f64],
    bundle: &PathBundle,
    eval: &BasisEvaluator,
    states: Option<&StateBundle>,
    opts: &BsdeOptions,
) -> Result<BsdeSolution> {
    let m = driver.dim();
    let n = bundle.len();
    let nc = bundle.n_cells();
    let k = bundle.n_active();
    if terminal.len() != n * m {
        return Err(Error::DimensionMismatch {
            expected: n * m,
            got: terminal.len(),
        });
    }
    if k != eval.n_active() {
        return Err(Error::DimensionMismatch {
            expected: eval.n_active(),
            got: k,
        });
    }
    let dt = bundle.dt();
    let kappa: Vec<f64> = (0..k).map(|j| eval.active_kappa(j)).collect();
    let features = FeatureMap::new(opts.features, bundle, states)?;

    let mut y = vec![Vec::new(); nc + 1];
    let mut z = vec![Vec::new(); nc];
    y[nc] = terminal.to_vec();
    let mut regression_residuals = vec![0.0; nc];
    let mut dropped_features = vec![0; nc];

    for i in (0..nc).rev() {
        let proj = Projector::new(features.matrix(i), n, features.len());
        dropped_features[i] = proj.n_dropped();
        let next = &y[i + 1];
        let cond = proj.fit(next, m);
        regression_residuals[i] = (next.iter().zip(&cond).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            / n as f64)
            .sqrt();

        let mut target = vec![0.0; n * k * m];
        target.par_chunks_mut(k * m).enumerate().for_each(|(p, row)| {
            let dh = bundle.cell_increments(p, i);
            for j in 0..k {
                for a in 0..m {
                    row[j * m + a] = (next[p * m + a] - cond[p * m + a]) * dh[j];
                }
            }
        });
        let mut zi = proj.fit(&target, k * m);
        zi.par_chunks_mut(k * m).for_each(|row| {
            for j in 0..k {
                for a in 0..m {
                    row[j * m + a] /= kappa[j] * dt;
                }
            }
        });

        let t = bundle.grid_time(i);
        let mut yi = vec![0.0; n * m];
        let failures: Vec<(usize, f64)> = yi
            .par_chunks_mut(m)
            .zip(zi.par_chunks_mut(k * m))
            .enumerate()
            .filter_map(|(p, (yp, zp))| {
                let ctx = DriverCtx { t, step: i, path: p };
                let base = &cond[p * m..(p + 1) * m];
                let mut converged = false;
                let mut last = 0.0;
                let mut a = vec![0.0; m * m];
                let mut fv = vec![0.0; m];
                if driver.affine(&ctx, zp, &mut a, &mut fv) {
                    // (I - Δt A) y = base + Δt b
                    let lhs = DMatrix::from_fn(m, m, |r, c| f64::from(r == c) - dt * a[r * m + c]);
                    let rhs = DVector::from_fn(m, |r, _| base[r] + dt * fv[r]);
                    if let Some(sol) = lhs.lu().solve(&rhs) {
                        yp.copy_from_slice(sol.as_slice());
                        converged = true;
                    }
                }
                if !converged {
                    let damping = if driver.local_lipschitz(&ctx) * dt >= 1.0 { 0.5 } else { 1.0 };
                    yp.copy_from_slice(base);
                    let mut cand = vec![0.0; m];
                    for _ in 0..opts.max_iterations {
                        driver.eval(&ctx, yp, zp, &mut fv);
                        for a in 0..m {
                            cand[a] = base[a] + fv[a] * dt;
                        }
                        let mut diff: f64 = 0.0;
                        let mut size: f64 = 1.0;
                        for a in 0..m {
                            let nv = damping * cand[a] + (1.0 - damping) * yp[a];
                            diff = diff.max((nv - yp[a]).abs());
                            size = size.max(nv.abs());
                            yp[a] = nv;
                        }
                        last = diff;
                        if diff <= opts.tol * size {
                            converged = true;
                            break;
                        }
                    }
                }
                driver.post_step(yp, zp);
                if !converged || yp.iter().any(|v| !v.is_finite()) {
                    Some((p, last))
                } else {
                    None
                }
            })
            .collect();
        if let Some(&(_, residual)) = failures.first() {
            return Err(Error::FixedPoint { step: i, residual });
        }
        y[i] = yi;
        z[i] = zi;
    }
    let reduced: Vec<usize> = (0..nc).filter(|&i| dropped_features[i] > 0).collect();
    if let Some(&last) = reduced.last() {
        // Step 0 sees constant features on every path; only report genuine losses.
        if reduced.iter().any(|&i| i > 0) {
            info!(
                "regression features were rank deficient at {} of {nc} steps (latest at step {last}); reduced",
                reduced.len()
            );
        }
    }
    Ok(BsdeSolution {
        dim: m,
        n_paths: n,
        n_cells: nc,
        dt,
        indices: (0..k).map(|j| eval.active_index(j).clone()).collect(),
        kappa,
        y,
        z,
        regression_residuals,
        dropped_features,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepResidual {
    pub t: f64,
    /// RMS norm of the projection of the one-step residual onto
    /// `span{φ} ⊕ span{φ ΔH^p}`, the latter scaled by `(κ_p Δt)^{-1/2}`.
    pub norm: f64,
    /// Three times the norm expected from the sampling error of projecting the
    /// martingale term `Σ_p Z^p ΔH^p` (and its products with `ΔH^p`).
    pub threshold: f64,
    pub flagged: bool,
}

/// Checks `Y_i - Y_{i+1} - f Δt + Σ_p Z^p_i ΔH^p_i ⟂ features` step by step.
pub fn residual_check(
    solution: &BsdeSolution,
    driver: &dyn Driver,
    bundle: &PathBundle,
    states: Option<&StateBundle>,
    features: FeatureSpec,
) -> Result<Vec<StepResidual>> {
    let m = solution.dim;
    let n = solution.n_paths;
    let k = solution.n_active();
    if n != bundle.len() || solution.n_cells != bundle.n_cells() {
        return Err(Error::InvalidArgument("solution and bundle differ".into()));
    }
    let fmap = FeatureMap::new(features, bundle, states)?;
    let dt = solution.dt;
    let mut out = Vec::with_capacity(solution.n_cells);
    for i in 0..solution.n_cells {
        let t = solution.grid_time(i);
        // Per path: the residual r and the martingale term M = Σ_p Z^p ΔH^p,
        // interleaved as [r_0..r_m, M_0..M_m].
        let rm: Vec<f64> = (0..n)
            .into_par_iter()
            .flat_map_iter(|p| {
                let ctx = DriverCtx { t, step: i, path: p };
                let yi = solution.y_at(i, p);
                let zi = solution.z_at(i, p);
                let mut fv = vec![0.0; m];
                driver.eval(&ctx, yi, zi, &mut fv);
                let dh = bundle.cell_increments(p, i);
                let y1 = solution.y_at(i + 1, p);
                let mart: Vec<f64> = (0..m).map(|a| (0..k).map(|j| zi[j * m + a] * dh[j]).sum()).collect();
                let res: Vec<f64> = (0..m).map(|a| yi[a] - y1[a] - fv[a] * dt + mart[a]).collect();
                res.into_iter().chain(mart)
            })
            .collect();
        let proj = Projector::new(fmap.matrix(i), n, fmap.len());
        let n_feat = (proj.n_features() - proj.n_dropped() + 1) as f64;
        // The in-sample residual inherits the sampling error of projecting the
        // martingale term, whose size is set by that term's scatter.
        let mut sq = 0.0;
        let mut noise = 0.0;
        let mut target = vec![0.0; n * m];
        let mut scatter = vec![0.0; n * m];
        for j in 0..=k {
            let (dh_of, weight): (Box<dyn Fn(usize) -> f64>, f64) = if j == 0 {
                (Box::new(|_| 1.0), 1.0)
            } else {
                (Box::new(|p| bundle.cell_increments(p, i)[j - 1]), 1.0 / (solution.kappa[j - 1] * dt))
            };
            for p in 0..n {
                let d = dh_of(p);
                for a in 0..m {
                    target[p * m + a] = rm[p * 2 * m + a] * d;
                    scatter[p * m + a] = rm[p * 2 * m + m + a] * d;
                }
            }
            let fit = proj.fit(&target, m);
            sq += weight * fit.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let sfit = proj.fit(&scatter, m);
            let var = scatter.iter().zip(&sfit).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64;
            noise += weight * var * n_feat / n as f64;
        }
        let norm = sq.sqrt();
        // Floor for round-off and the fixed-point tolerance when Z vanishes.
        let scale = ((0..n).map(|p| solution.y_at(i, p).iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / n as f64).sqrt();
        let threshold = (3.0 * noise.sqrt()).max(RESIDUAL_FLOOR * (1.0 + scale));
        out.push(StepResidual {
            t,
            norm,
            threshold,
            flagged: norm > threshold,
        });
    }
    Ok(out)
}
