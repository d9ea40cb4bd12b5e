//! First- and second-order adjoint BSDEs along a simulated state bundle.
//!
//! Martingale coefficients are reported absorbed: `J^k = κ_k Z^k` and
//! `R̃^k = κ_k R^k`, so that `H` pairs them with `γ^k` without weights.

use rayon::prelude::*;
use serde::Serialize;

use crate::bsde::{solve_bsde, BsdeOptions, BsdeSolution, Driver, DriverCtx};
use crate::error::{Error, Result};
use crate::pathsim::{Dynamics, PathBundle, StateBundle};
use crate::stats::{estimate, Estimate};

fn xv_at(states: &StateBundle, path: usize, step: usize, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(states.x(path, step));
    out.extend_from_slice(states.v(path, step));
}

/// `sup ‖g_x‖` and `sup ‖γ^k_x‖` over the bundle (max-row-sum norms).
fn first_order_bounds(dynamics: &Dynamics, states: &StateBundle) -> (f64, Vec<f64>) {
    let m = dynamics.state_dim();
    let k = dynamics.n_active();
    let norm = |jac: &[f64]| row_sum_norm(jac, m);
    let per_path: Vec<(f64, Vec<f64>)> = (0..states.len())
        .into_par_iter()
        .map(|p| {
            let mut xv = Vec::new();
            let mut jac = vec![0.0; m * m];
            let mut g: f64 = 0.0;
            let mut gam = vec![0.0f64; k];
            let last = states.paths[p].aborted.unwrap_or(states.n_cells);
            for i in 0..last {
                xv_at(states, p, i, &mut xv);
                dynamics.spec.drift.jacobian(&xv, &mut jac);
                g = g.max(norm(&jac));
                for (j, f) in dynamics.gamma_terms() {
                    f.jacobian(&xv, &mut jac);
                    gam[j] = gam[j].max(norm(&jac));
                }
            }
            (g, gam)
        })
        .collect();
    let mut g: f64 = 0.0;
    let mut gam = vec![0.0f64; k];
    for (a, b) in per_path {
        g = g.max(a);
        for j in 0..k {
            gam[j] = gam[j].max(b[j]);
        }
    }
    (g, gam)
}

/// `‖g_x‖` and `‖γ^k_x‖` at one grid point.
fn local_bounds(dynamics: &Dynamics, states: &StateBundle, path: usize, step: usize) -> (f64, Vec<f64>) {
    let m = dynamics.state_dim();
    let mut xv = Vec::new();
    xv_at(states, path, step, &mut xv);
    let mut jac = vec![0.0; m * m];
    dynamics.spec.drift.jacobian(&xv, &mut jac);
    let g = row_sum_norm(&jac, m);
    let mut gam = vec![0.0; dynamics.n_active()];
    for (k, f) in dynamics.gamma_terms() {
        f.jacobian(&xv, &mut jac);
        gam[k] = row_sum_norm(&jac, m);
    }
    (g, gam)
}

fn row_sum_norm(jac: &[f64], m: usize) -> f64 {
    (0..m)
        .map(|a| jac[a * m..(a + 1) * m].iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn first_lipschitz(g: f64, gam: &[f64], kappa: &[f64]) -> f64 {
    g + gam.iter().zip(kappa).map(|(c, w)| w * c).sum::<f64>()
}

fn second_lipschitz(g: f64, gam: &[f64], kappa: &[f64]) -> f64 {
    2.0 * g + gam.iter().zip(kappa).map(|(c, w)| w * (c * c + 2.0 * c)).sum::<f64>()
}

/// `f(p, Z) = g_xᵀ p + Σ_k γ^k_xᵀ (κ_k Z^k) + λ ℓ_x` along `states`.
pub struct FirstAdjointDriver<'a> {
    dynamics: &'a Dynamics<'a>,
    states: &'a StateBundle,
    lambda: f64,
    kappa: Vec<f64>,
    lipschitz: f64,
}

impl<'a> FirstAdjointDriver<'a> {
    pub fn new(dynamics: &'a Dynamics<'a>, states: &'a StateBundle, lambda: f64) -> Self {
        let kappa: Vec<f64> = (0..dynamics.n_active()).map(|k| dynamics.eval.active_kappa(k)).collect();
        let (g, gam) = first_order_bounds(dynamics, states);
        let lipschitz = first_lipschitz(g, &gam, &kappa);
        FirstAdjointDriver {
            dynamics,
            states,
            lambda,
            kappa,
            lipschitz,
        }
    }
}

impl Driver for FirstAdjointDriver<'_> {
    fn dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    fn eval(&self, ctx: &DriverCtx, y: &[f64], z: &[f64], out: &mut [f64]) {
        let m = self.dim();
        let mut xv = Vec::with_capacity(m + self.dynamics.control_dim());
        xv_at(self.states, ctx.path, ctx.step, &mut xv);
        let mut jac = vec![0.0; m * m];
        self.dynamics.spec.drift.jacobian(&xv, &mut jac);
        for b in 0..m {
            out[b] = (0..m).map(|a| jac[a * m + b] * y[a]).sum();
        }
        for (k, f) in self.dynamics.gamma_terms() {
            f.jacobian(&xv, &mut jac);
            let zk = &z[k * m..(k + 1) * m];
            for b in 0..m {
                out[b] += self.kappa[k] * (0..m).map(|a| jac[a * m + b] * zk[a]).sum::<f64>();
            }
        }
        if self.lambda != 0.0 {
            let mut lx = vec![0.0; m];
            self.dynamics.spec.running_cost.grad(&xv, &mut lx);
            for b in 0..m {
                out[b] += self.lambda * lx[b];
            }
        }
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    fn local_lipschitz(&self, ctx: &DriverCtx) -> f64 {
        let (g, gam) = local_bounds(self.dynamics, self.states, ctx.path, ctx.step);
        first_lipschitz(g, &gam, &self.kappa)
    }

    fn affine(&self, ctx: &DriverCtx, z: &[f64], a: &mut [f64], b: &mut [f64]) -> bool {
        let zero = vec![0.0; self.dim()];
        self.eval(ctx, &zero, z, b);
        let m = self.dim();
        let mut xv = Vec::with_capacity(m + self.dynamics.control_dim());
        xv_at(self.states, ctx.path, ctx.step, &mut xv);
        let mut jac = vec![0.0; m * m];
        self.dynamics.spec.drift.jacobian(&xv, &mut jac);
        // A = g_xᵀ
        for r in 0..m {
            for c in 0..m {
                a[r * m + c] = jac[c * m + r];
            }
        }
        true
    }
}

/// Second-order adjoint generator along a first adjoint. `Y = P` and each
/// `Z^k = R^k` are row-major `m x m`:
///
/// `f = g_xᵀP + P g_x + Σ_k κ_k (γ^k_xᵀ P γ^k_x + γ^k_xᵀ R^k + R^k γ^k_x) + H_xx`,
/// `H_xx = λ ℓ_xx + Σ_a p_a g^a_xx + Σ_k Σ_a J^k_a γ^{k,a}_xx`.
pub struct SecondAdjointDriver<'a> {
    dynamics: &'a Dynamics<'a>,
    states: &'a StateBundle,
    first: &'a BsdeSolution,
    lambda: f64,
    kappa: Vec<f64>,
    lipschitz: f64,
}

impl<'a> SecondAdjointDriver<'a> {
    pub fn new(dynamics: &'a Dynamics<'a>, states: &'a StateBundle, first: &'a BsdeSolution, lambda: f64) -> Self {
        let kappa: Vec<f64> = (0..dynamics.n_active()).map(|k| dynamics.eval.active_kappa(k)).collect();
        let (g, gam) = first_order_bounds(dynamics, states);
        let lipschitz = second_lipschitz(g, &gam, &kappa);
        SecondAdjointDriver {
            dynamics,
            states,
            first,
            lambda,
            kappa,
            lipschitz,
        }
    }

    /// `H_xx` at grid point `(path, step)`, row-major.
    fn hessian(&self, xv: &[f64], path: usize, step: usize, out: &mut [f64]) {
        let m = self.dynamics.state_dim();
        let mut buf = vec![0.0; m * m];
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut add = |f: &crate::poly::SmoothFn, w: f64| {
            if w != 0.0 && f.has_hessian() {
                f.hess(xv, &mut buf);
                for (o, h) in out.iter_mut().zip(&buf) {
                    *o += w * h;
                }
            }
        };
        add(&self.dynamics.spec.running_cost, self.lambda);
        let p = self.first.y_at(step, path);
        for (a, c) in self.dynamics.spec.drift.components.iter().enumerate() {
            add(c, p[a]);
        }
        let z = self.first.z_at(step, path);
        for (k, f) in self.dynamics.gamma_terms() {
            for (a, c) in f.components.iter().enumerate() {
                add(c, self.kappa[k] * z[k * m + a]);
            }
        }
    }
}

fn matmul_tn(a: &[f64], b: &[f64], m: usize, out: &mut [f64]) {
    // out = aᵀ b
    for i in 0..m {
        for j in 0..m {
            out[i * m + j] = (0..m).map(|l| a[l * m + i] * b[l * m + j]).sum();
        }
    }
}

fn matmul(a: &[f64], b: &[f64], m: usize, out: &mut [f64]) {
    for i in 0..m {
        for j in 0..m {
            out[i * m + j] = (0..m).map(|l| a[i * m + l] * b[l * m + j]).sum();
        }
    }
}

fn symmetrize(a: &mut [f64], m: usize) {
    for i in 0..m {
        for j in i + 1..m {
            let s = 0.5 * (a[i * m + j] + a[j * m + i]);
            a[i * m + j] = s;
            a[j * m + i] = s;
        }
    }
}

impl Driver for SecondAdjointDriver<'_> {
    fn dim(&self) -> usize {
        let m = self.dynamics.state_dim();
        m * m
    }

    fn eval(&self, ctx: &DriverCtx, y: &[f64], z: &[f64], out: &mut [f64]) {
        let m = self.dynamics.state_dim();
        let mm = m * m;
        let mut xv = Vec::with_capacity(m + self.dynamics.control_dim());
        xv_at(self.states, ctx.path, ctx.step, &mut xv);
        let mut jac = vec![0.0; mm];
        let mut t1 = vec![0.0; mm];
        let mut t2 = vec![0.0; mm];

        self.hessian(&xv, ctx.path, ctx.step, out);
        self.dynamics.spec.drift.jacobian(&xv, &mut jac);
        matmul_tn(&jac, y, m, &mut t1);
        matmul(y, &jac, m, &mut t2);
        for i in 0..mm {
            out[i] += t1[i] + t2[i];
        }
        for (k, f) in self.dynamics.gamma_terms() {
            f.jacobian(&xv, &mut jac);
            let w = self.kappa[k];
            // γ_xᵀ P γ_x
            matmul(y, &jac, m, &mut t1);
            matmul_tn(&jac, &t1, m, &mut t2);
            for i in 0..mm {
                out[i] += w * t2[i];
            }
            let rk = &z[k * mm..(k + 1) * mm];
            matmul_tn(&jac, rk, m, &mut t1);
            matmul(rk, &jac, m, &mut t2);
            for i in 0..mm {
                out[i] += w * (t1[i] + t2[i]);
            }
        }
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    fn local_lipschitz(&self, ctx: &DriverCtx) -> f64 {
        let (g, gam) = local_bounds(self.dynamics, self.states, ctx.path, ctx.step);
        second_lipschitz(g, &gam, &self.kappa)
    }

    fn affine(&self, ctx: &DriverCtx, z: &[f64], a: &mut [f64], b: &mut [f64]) -> bool {
        let m = self.dynamics.state_dim();
        let mm = m * m;
        let mut xv = Vec::with_capacity(m + self.dynamics.control_dim());
        xv_at(self.states, ctx.path, ctx.step, &mut xv);
        let mut drift = vec![0.0; mm];
        self.dynamics.spec.drift.jacobian(&xv, &mut drift);
        let mut gammas = Vec::new();
        for (k, f) in self.dynamics.gamma_terms() {
            let mut jac = vec![0.0; mm];
            f.jacobian(&xv, &mut jac);
            gammas.push((k, jac));
        }
        let mut t1 = vec![0.0; mm];
        let mut t2 = vec![0.0; mm];
        // b = H_xx + Σ_k κ_k (γ_xᵀ R^k + R^k γ_x)
        self.hessian(&xv, ctx.path, ctx.step, b);
        for (k, jac) in &gammas {
            let rk = &z[k * mm..(k + 1) * mm];
            matmul_tn(jac, rk, m, &mut t1);
            matmul(rk, jac, m, &mut t2);
            for i in 0..mm {
                b[i] += self.kappa[*k] * (t1[i] + t2[i]);
            }
        }
        // Column c of A is the linear part applied to the unit matrix E_c.
        let mut e = vec![0.0; mm];
        for c in 0..mm {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[c] = 1.0;
            let mut col = vec![0.0; mm];
            matmul_tn(&drift, &e, m, &mut t1);
            matmul(&e, &drift, m, &mut t2);
            for i in 0..mm {
                col[i] = t1[i] + t2[i];
            }
            for (k, jac) in &gammas {
                matmul(&e, jac, m, &mut t1);
                matmul_tn(jac, &t1, m, &mut t2);
                for i in 0..mm {
                    col[i] += self.kappa[*k] * t2[i];
                }
            }
            for r in 0..mm {
                a[r * mm + c] = col[r];
            }
        }
        true
    }

    fn post_step(&self, y: &mut [f64], z: &mut [f64]) {
        let m = self.dynamics.state_dim();
        symmetrize(y, m);
        for block in z.chunks_mut(m * m) {
            symmetrize(block, m);
        }
    }
}

/// Both adjoints for one multiplier `(λ, μ)`.
#[derive(Debug, Clone)]
pub struct AdjointPair {
    pub lambda: f64,
    pub mu: Vec<f64>,
    /// `p` and its raw martingale coefficients `Z^k`.
    pub first: BsdeSolution,
    /// `P` (flattened `m x m`) and raw `R^k`.
    pub second: BsdeSolution,
}

impl AdjointPair {
    pub fn state_dim(&self) -> usize {
        self.first.dim
    }

    pub fn p(&self, step: usize, path: usize) -> &[f64] {
        self.first.y_at(step, path)
    }

    /// Absorbed `J^k = κ_k Z^k` on cell `step`, index-major.
    pub fn j(&self, step: usize, path: usize) -> Vec<f64> {
        absorbed(&self.first, step, path)
    }

    pub fn big_p(&self, step: usize, path: usize) -> &[f64] {
        self.second.y_at(step, path)
    }

    /// Absorbed `R̃^k = κ_k R^k` on cell `step`, each `m x m`.
    pub fn r(&self, step: usize, path: usize) -> Vec<f64> {
        absorbed(&self.second, step, path)
    }

    /// Linear combination `λ · units[0] + Σ_j μ_j · units[1 + j]` of unit solutions.
    pub fn combine(units: &[AdjointPair], lambda: f64, mu: &[f64]) -> Result<AdjointPair> {
        if units.len() != mu.len() + 1 {
            return Err(Error::DimensionMismatch {
                expected: units.len() - 1,
                got: mu.len(),
            });
        }
        let weights: Vec<f64> = std::iter::once(lambda).chain(mu.iter().copied()).collect();
        let first: Vec<&BsdeSolution> = units.iter().map(|u| &u.first).collect();
        let second: Vec<&BsdeSolution> = units.iter().map(|u| &u.second).collect();
        Ok(AdjointPair {
            lambda,
            mu: mu.to_vec(),
            first: combine_solutions(&first, &weights),
            second: combine_solutions(&second, &weights),
        })
    }

    /// `p(0) + λ E h_y + Σ_j μ_j E G^j_y`, componentwise.
    pub fn initial_gap(&self, dynamics: &Dynamics, states: &StateBundle) -> Vec<InitialGap> {
        let spec = dynamics.spec;
        let m = spec.state_dim;
        let n = states.len();
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|p| {
                let mut yx = spec.x0.clone();
                yx.extend_from_slice(states.terminal(p));
                let mut total = vec![0.0; m];
                let mut buf = vec![0.0; m];
                spec.terminal_cost.lead_grad(&yx, &mut buf);
                for a in 0..m {
                    total[a] += self.lambda * buf[a];
                }
                if let Some(c) = &spec.constraint {
                    for (j, g) in c.g.components.iter().enumerate() {
                        g.lead_grad(&yx, &mut buf);
                        for a in 0..m {
                            total[a] += self.mu[j] * buf[a];
                        }
                    }
                }
                total
            })
            .collect();
        (0..m)
            .map(|a| {
                let p0 = self.first.mean_y(0, a);
                let boundary = estimate(rows.iter().map(|r| r[a]));
                InitialGap {
                    p0,
                    boundary,
                    gap: p0.mean + boundary.mean,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InitialGap {
    pub p0: Estimate,
    /// `λ E h_y + Σ μ_j E G^j_y`.
    pub boundary: Estimate,
    pub gap: f64,
}

fn absorbed(sol: &BsdeSolution, step: usize, path: usize) -> Vec<f64> {
    let d = sol.dim;
    let mut z = sol.z_at(step, path).to_vec();
    for (k, block) in z.chunks_mut(d).enumerate() {
        block.iter_mut().for_each(|v| *v *= sol.kappa[k]);
    }
    z
}

fn combine_solutions(parts: &[&BsdeSolution], weights: &[f64]) -> BsdeSolution {
    let base = parts[0];
    let mix = |pick: &dyn Fn(&BsdeSolution) -> &Vec<f64>| -> Vec<f64> {
        let mut out = vec![0.0; pick(base).len()];
        for (s, &w) in parts.iter().zip(weights) {
            if w != 0.0 {
                for (o, v) in out.iter_mut().zip(pick(s)) {
                    *o += w * v;
                }
            }
        }
        out
    };
    BsdeSolution {
        dim: base.dim,
        n_paths: base.n_paths,
        n_cells: base.n_cells,
        dt: base.dt,
        indices: base.indices.clone(),
        kappa: base.kappa.clone(),
        y: (0..base.y.len()).map(|i| mix(&|s| &s.y[i])).collect(),
        z: (0..base.z.len()).map(|i| mix(&|s| &s.z[i])).collect(),
        regression_residuals: base.regression_residuals.clone(),
        dropped_features: base.dropped_features.clone(),
    }
}

/// Terminal values `λ h_x + Σ μ_j G^j_x` and `λ h_xx + Σ μ_j G^j_xx`.
fn terminal_values(dynamics: &Dynamics, states: &StateBundle, lambda: f64, mu: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let spec = dynamics.spec;
    let m = spec.state_dim;
    let n = states.len();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|p| {
            let mut yx = spec.x0.clone();
            yx.extend_from_slice(states.terminal(p));
            let mut grad = vec![0.0; m];
            let mut hess = vec![0.0; m * m];
            let mut g = vec![0.0; m];
            let mut h = vec![0.0; m * m];
            let mut add = |f: &crate::poly::SmoothFn, w: f64| {
                if w == 0.0 {
                    return;
                }
                f.grad(&yx, &mut g);
                f.hess(&yx, &mut h);
                for a in 0..m {
                    grad[a] += w * g[a];
                }
                for a in 0..m * m {
                    hess[a] += w * h[a];
                }
            };
            add(&spec.terminal_cost, lambda);
            if let Some(c) = &spec.constraint {
                for (j, f) in c.g.components.iter().enumerate() {
                    add(f, mu[j]);
                }
            }
            (grad, hess)
        })
        .collect();
    let mut grad = Vec::with_capacity(n * m);
    let mut hess = Vec::with_capacity(n * m * m);
    for (g, h) in rows {
        grad.extend(g);
        hess.extend(h);
    }
    (grad, hess)
}

/// Solves both adjoints along `states` for the multiplier `(λ, μ)`.
pub fn solve_adjoints(
    dynamics: &Dynamics,
    bundle: &PathBundle,
    states: &StateBundle,
    lambda: f64,
    mu: &[f64],
    opts: &BsdeOptions,
) -> Result<AdjointPair> {
    states.check_finite()?;
    let k = dynamics.spec.constraint_dim();
    if mu.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: mu.len(),
        });
    }
    let (xi, xi2) = terminal_values(dynamics, states, lambda, mu);
    let d1 = FirstAdjointDriver::new(dynamics, states, lambda);
    let first = solve_bsde(&d1, &xi, bundle, dynamics.eval, Some(states), opts)?;
    let d2 = SecondAdjointDriver::new(dynamics, states, &first, lambda);
    let second = solve_bsde(&d2, &xi2, bundle, dynamics.eval, Some(states), opts)?;
    Ok(AdjointPair {
        lambda,
        mu: mu.to_vec(),
        first,
        second,
    })
}

/// Adjoints for the unit multipliers `(1, 0)` and `(0, e_j)`. Both equations
/// are linear in `(λ, μ)`, so [`AdjointPair::combine`] recovers any multiplier.
pub fn solve_unit_adjoints(
    dynamics: &Dynamics,
    bundle: &PathBundle,
    states: &StateBundle,
    opts: &BsdeOptions,
) -> Result<Vec<AdjointPair>> {
    let k = dynamics.spec.constraint_dim();
    let mut units = Vec::with_capacity(k + 1);
    units.push(solve_adjoints(dynamics, bundle, states, 1.0, &vec![0.0; k], opts)?);
    for j in 0..k {
        let mut mu = vec![0.0; k];
        mu[j] = 1.0;
        units.push(solve_adjoints(dynamics, bundle, states, 0.0, &mu, opts)?);
    }
    Ok(units)
}
