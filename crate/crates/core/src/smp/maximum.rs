//! Second-order Hamiltonian gap, the maximum-condition scan over `(t, v)`,
//! multiplier search on the unit hemisphere and the combined report.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::BsdeOptions;
use crate::error::{Error, Result};
use crate::pathsim::{
    constraint_value, cost, integrate_bundle, spike_control, Control, CostEstimate, Dynamics, PathBundle,
    StateBundle,
};
use crate::smp::adjoint::{solve_unit_adjoints, AdjointPair, InitialGap};
use crate::smp::geometry::{nontriviality, transversality, TransversalityVerdict};
use crate::smp::hamiltonian::hamiltonian;
use crate::stats::{estimate, Estimate};

/// Default slack below zero tolerated on top of three standard errors.
pub const DEFAULT_ALLOWANCE: f64 = 0.02;
/// Default number of scanned grid times.
pub const DEFAULT_TIME_POINTS: usize = 20;
/// Default points per angle of the multiplier search.
pub const DEFAULT_ANGLE_STEPS: usize = 33;
const TRANSVERSALITY_TOL: f64 = 1e-9;

/// Quadratic correction in the gap.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadraticForm {
    /// `½ Sᵀ (P + Σ_k R̃^kᵀ) S` with `S = Σ_k Δγ^k`.
    Literal,
    /// `½ Σ_k κ_k Δγ^kᵀ P Δγ^k + ½ Σ_k Δγ^kᵀ R̃^kᵀ Δγ^k`.
    #[default]
    Bracket,
}

impl FromStr for QuadraticForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(QuadraticForm::Literal),
            "bracket" => Ok(QuadraticForm::Bracket),
            _ => Err(Error::config("form", format!("expected literal or bracket, got {s:?}"))),
        }
    }
}

impl fmt::Display for QuadraticForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuadraticForm::Literal => "literal",
            QuadraticForm::Bracket => "bracket",
        })
    }
}

/// First-order gap `H(x, v) - H(x, u)` and the quadratic correction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaH {
    pub first_order: f64,
    pub second_order: f64,
}

impl DeltaH {
    pub fn value(&self) -> f64 {
        self.first_order + self.second_order
    }
}

/// Gap at grid time `t_step` on one path, for a replacement value `v`. Uses
/// `x(t_i)`, `u(t_i)`, `p(t_i)`, `P(t_i)` and the coefficients of cell `i`.
pub fn delta_h(
    dynamics: &Dynamics,
    states: &StateBundle,
    adjoints: &AdjointPair,
    step: usize,
    path: usize,
    v: &[f64],
    form: QuadraticForm,
) -> DeltaH {
    GapPoint::new(dynamics, states, adjoints, step, path).eval(dynamics, v, form)
}

/// Everything in `δH` that does not depend on the replacement value.
struct GapPoint {
    m: usize,
    lambda: f64,
    xv: Vec<f64>,
    h_u: f64,
    p: Vec<f64>,
    j: Vec<f64>,
    big_p: Vec<f64>,
    /// Transposed absorbed `R̃^k`, and their sum.
    r_t: Vec<f64>,
    r_sum: Vec<f64>,
    /// `γ^k(x, u)` per active term, index-major.
    gamma_u: Vec<f64>,
    buf: Vec<f64>,
    dg: Vec<f64>,
    sum: Vec<f64>,
}

impl GapPoint {
    fn new(dynamics: &Dynamics, states: &StateBundle, adjoints: &AdjointPair, step: usize, path: usize) -> Self {
        let m = dynamics.state_dim();
        let k = dynamics.n_active();
        let x = states.x(path, step);
        let u = states.v(path, step);
        let p = adjoints.p(step, path).to_vec();
        let j = adjoints.j(step, path);
        let h_u = hamiltonian(dynamics, x, u, adjoints.lambda, &p, &j);
        let mut xv = x.to_vec();
        xv.extend_from_slice(u);
        let mut gamma_u = vec![0.0; k * m];
        for (kk, f) in dynamics.gamma_terms() {
            f.eval(&xv, &mut gamma_u[kk * m..(kk + 1) * m]);
        }
        let r = adjoints.r(step, path);
        let mut r_t = vec![0.0; k * m * m];
        let mut r_sum = vec![0.0; m * m];
        for kk in 0..k {
            let block = &r[kk * m * m..(kk + 1) * m * m];
            for a in 0..m {
                for b in 0..m {
                    r_t[kk * m * m + b * m + a] = block[a * m + b];
                    r_sum[b * m + a] += block[a * m + b];
                }
            }
        }
        GapPoint {
            m,
            lambda: adjoints.lambda,
            xv,
            h_u,
            p,
            j,
            big_p: adjoints.big_p(step, path).to_vec(),
            r_t,
            r_sum,
            gamma_u,
            buf: vec![0.0; m],
            dg: vec![0.0; m],
            sum: vec![0.0; m],
        }
    }

    fn quad(m: usize, a: &[f64], mat: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..m {
            for l in 0..m {
                s += a[i] * mat[i * m + l] * b[l];
            }
        }
        s
    }

    fn eval(&mut self, dynamics: &Dynamics, v: &[f64], form: QuadraticForm) -> DeltaH {
        let m = self.m;
        self.xv[m..].copy_from_slice(v);
        let spec = dynamics.spec;
        let mut h_v = if self.lambda != 0.0 {
            self.lambda * spec.running_cost.eval(&self.xv)
        } else {
            0.0
        };
        spec.drift.eval(&self.xv, &mut self.buf);
        h_v += dot(&self.p, &self.buf);
        let mut second_order = 0.0;
        self.sum.iter_mut().for_each(|s| *s = 0.0);
        for (k, f) in dynamics.gamma_terms() {
            f.eval(&self.xv, &mut self.buf);
            h_v += dot(&self.j[k * m..(k + 1) * m], &self.buf);
            for a in 0..m {
                self.dg[a] = self.buf[a] - self.gamma_u[k * m + a];
            }
            match form {
                QuadraticForm::Bracket => {
                    let kappa = dynamics.eval.active_kappa(k);
                    let rk = &self.r_t[k * m * m..(k + 1) * m * m];
                    second_order += 0.5 * kappa * Self::quad(m, &self.dg, &self.big_p, &self.dg)
                        + 0.5 * Self::quad(m, &self.dg, rk, &self.dg);
                }
                QuadraticForm::Literal => {
                    for a in 0..m {
                        self.sum[a] += self.dg[a];
                    }
                }
            }
        }
        if form == QuadraticForm::Literal {
            second_order = 0.5 * Self::quad(m, &self.sum, &self.big_p, &self.sum)
                + 0.5 * Self::quad(m, &self.sum, &self.r_sum, &self.sum);
        }
        DeltaH {
            first_order: h_v - self.h_u,
            second_order,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One `(t, v)` cell of the gap field.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapCell {
    pub t: f64,
    pub step: usize,
    pub v: Vec<f64>,
    pub gap: Estimate,
}

/// Per-cell first and second moments of the gaps of several adjoint pairs,
/// so that any linear combination has an exact mean and standard error.
#[derive(Debug, Clone)]
pub struct GapMoments {
    pub t: f64,
    pub step: usize,
    pub v: Vec<f64>,
    n: usize,
    sum: Vec<f64>,
    /// Row-major `r x r` cross products.
    cross: Vec<f64>,
}

impl GapMoments {
    pub fn combine(&self, weights: &[f64]) -> Estimate {
        let r = self.sum.len();
        let n = self.n as f64;
        let mean: f64 = weights.iter().zip(&self.sum).map(|(w, s)| w * s).sum::<f64>() / n;
        let mut second = 0.0;
        for a in 0..r {
            for b in 0..r {
                second += weights[a] * weights[b] * self.cross[a * r + b];
            }
        }
        let var = ((second / n - mean * mean) * n / (n - 1.0).max(1.0)).max(0.0);
        Estimate {
            mean,
            stderr: (var / n).sqrt(),
        }
    }
}

/// Evenly spaced scan steps `0 <= i < n_cells`.
pub fn scan_steps(n_cells: usize, points: usize) -> Vec<usize> {
    let points = points.clamp(1, n_cells);
    let mut steps: Vec<usize> = (0..points).map(|j| j * n_cells / points).collect();
    steps.dedup();
    steps
}

/// Moments of `δH` over the `(t, v)` grid for each adjoint pair in `units`.
pub fn gap_moments(
    dynamics: &Dynamics,
    states: &StateBundle,
    units: &[AdjointPair],
    steps: &[usize],
    controls: &[Vec<f64>],
    form: QuadraticForm,
) -> Result<Vec<GapMoments>> {
    states.check_finite()?;
    if let Some(&bad) = steps.iter().find(|&&s| s >= states.n_cells) {
        return Err(Error::InvalidArgument(format!(
            "scan step {bad} is outside 0..{}",
            states.n_cells
        )));
    }
    if let Some(v) = controls.iter().find(|v| v.len() != dynamics.control_dim()) {
        return Err(Error::DimensionMismatch {
            expected: dynamics.control_dim(),
            got: v.len(),
        });
    }
    let r = units.len();
    let nv = controls.len();
    let per_step: Vec<Vec<GapMoments>> = steps
        .par_iter()
        .map(|&step| {
            let mut sum = vec![0.0; nv * r];
            let mut cross = vec![0.0; nv * r * r];
            let mut vals = vec![0.0; nv * r];
            for path in 0..states.len() {
                for (a, unit) in units.iter().enumerate() {
                    let mut point = GapPoint::new(dynamics, states, unit, step, path);
                    for (c, v) in controls.iter().enumerate() {
                        vals[c * r + a] = point.eval(dynamics, v, form).value();
                    }
                }
                for c in 0..nv {
                    let vals = &vals[c * r..(c + 1) * r];
                    for a in 0..r {
                        sum[c * r + a] += vals[a];
                        for b in 0..r {
                            cross[c * r * r + a * r + b] += vals[a] * vals[b];
                        }
                    }
                }
            }
            controls
                .iter()
                .enumerate()
                .map(|(c, v)| GapMoments {
                    t: states.grid_time(step),
                    step,
                    v: v.clone(),
                    n: states.len(),
                    sum: sum[c * r..(c + 1) * r].to_vec(),
                    cross: cross[c * r * r..(c + 1) * r * r].to_vec(),
                })
                .collect()
        })
        .collect();
    Ok(per_step.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaximumCondition {
    pub form: QuadraticForm,
    pub min_gap: Estimate,
    pub argmin_t: f64,
    pub argmin_v: Vec<f64>,
    pub allowance: f64,
    /// Cells whose gap is below `-(3 s.e. + allowance)`.
    pub violations: usize,
    pub pass: bool,
}

/// Evaluates the field for one multiplier `weights = (λ, μ)` applied to the unit moments.
pub fn maximum_condition(
    moments: &[GapMoments],
    weights: &[f64],
    form: QuadraticForm,
    allowance: f64,
) -> (MaximumCondition, Vec<GapCell>) {
    let cells: Vec<GapCell> = moments
        .iter()
        .map(|c| GapCell {
            t: c.t,
            step: c.step,
            v: c.v.clone(),
            gap: c.combine(weights),
        })
        .collect();
    let violations = cells
        .iter()
        .filter(|c| c.gap.mean < -(3.0 * c.gap.stderr + allowance))
        .count();
    let worst = cells
        .iter()
        .min_by(|a, b| a.gap.mean.total_cmp(&b.gap.mean))
        .expect("gap grid is empty");
    (
        MaximumCondition {
            form,
            min_gap: worst.gap,
            argmin_t: worst.t,
            argmin_v: worst.v.clone(),
            allowance,
            violations,
            pass: violations == 0,
        },
        cells,
    )
}

/// Margin of the worst cell: `min (gap + 3 s.e. + allowance)`; nonnegative iff the check passes.
fn margin(moments: &[GapMoments], weights: &[f64], allowance: f64) -> f64 {
    moments
        .iter()
        .map(|c| {
            let e = c.combine(weights);
            e.mean + 3.0 * e.stderr + allowance
        })
        .fold(f64::INFINITY, f64::min)
}

/// Unit vectors in `R^dim`: `±1` for `dim = 1`, else `(cos α, sin α · w)` with
/// `α` on `steps` points of `[0, π]` and `w` on the sphere one dimension down.
fn sphere_grid(dim: usize, steps: usize) -> Vec<Vec<f64>> {
    if dim == 1 {
        return vec![vec![1.0], vec![-1.0]];
    }
    let mut out = Vec::new();
    for i in 0..steps {
        let a = std::f64::consts::PI * i as f64 / (steps - 1) as f64;
        if i == 0 || i + 1 == steps {
            let mut p = vec![0.0; dim];
            p[0] = a.cos();
            out.push(p);
            continue;
        }
        for w in sphere_grid(dim - 1, steps) {
            let mut p = vec![a.cos()];
            p.extend(w.iter().map(|c| a.sin() * c));
            out.push(p);
        }
    }
    out
}

/// Candidate `(λ, μ)` on `{λ >= 0, λ² + |μ|² = 1}`: `λ = cos θ`, `θ` on `steps`
/// points of `[0, π/2]`, and `μ = sin θ · w` for `w` on the unit sphere of `R^k`.
pub fn hemisphere_grid(k: usize, steps: usize) -> Vec<(f64, Vec<f64>)> {
    if k == 0 {
        return vec![(1.0, Vec::new())];
    }
    let steps = steps.max(2);
    let mut out = vec![(1.0, vec![0.0; k])];
    let dirs = sphere_grid(k, steps);
    for i in 1..steps {
        let th = std::f64::consts::FRAC_PI_2 * i as f64 / (steps - 1) as f64;
        for w in &dirs {
            let lambda = if i + 1 == steps { 0.0 } else { th.cos() };
            out.push((lambda, w.iter().map(|c| th.sin() * c).collect()));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Multipliers {
    /// User-supplied `(λ, μ)`.
    Fixed { lambda: f64, mu: Vec<f64> },
    /// Best candidate on the hemisphere grid.
    Search { steps: usize },
}

#[derive(Debug, Clone)]
pub struct SmpOptions {
    pub form: QuadraticForm,
    pub steps: Vec<usize>,
    pub controls: Vec<Vec<f64>>,
    pub allowance: f64,
    pub multipliers: Multipliers,
    pub bsde: BsdeOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Nontriviality {
    pub holds: bool,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiplierSearch {
    pub candidates: usize,
    /// `min(maximum-condition margin, -transversality violation)` of the winner.
    pub best_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmpDiagnostics {
    pub n_paths: usize,
    pub n_cells: usize,
    pub scan_times: usize,
    pub scan_controls: usize,
    pub cost: CostEstimate,
    pub constraint_value: Vec<Estimate>,
    /// Largest number of regression features dropped at any step, per adjoint.
    pub dropped_features: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmpReport {
    pub lambda: f64,
    pub mu: Vec<f64>,
    pub nontriviality: Nontriviality,
    pub transversality: Option<TransversalityVerdict>,
    pub maximum_condition: MaximumCondition,
    /// `p(0) + λ E h_y + Σ μ_j E G^j_y` per component.
    pub initial_gap: Vec<InitialGap>,
    pub multiplier_search: Option<MultiplierSearch>,
    pub diagnostics: SmpDiagnostics,
}

/// Solves the adjoints along `states`, scans the gap over `(steps x controls)`
/// and evaluates the multiplier conditions.
pub fn check_smp(
    dynamics: &Dynamics,
    bundle: &PathBundle,
    states: &StateBundle,
    opts: &SmpOptions,
) -> Result<(SmpReport, Vec<GapCell>)> {
    let spec = dynamics.spec;
    let k = spec.constraint_dim();
    let units = solve_unit_adjoints(dynamics, bundle, states, &opts.bsde)?;
    let moments = gap_moments(dynamics, states, &units, &opts.steps, &opts.controls, opts.form)?;
    let eg = constraint_value(spec, states)?;
    let eg_mean: Vec<f64> = eg.iter().map(|e| e.mean).collect();

    let (lambda, mu, search, nontriv) = if spec.is_unconstrained() {
        (
            1.0,
            vec![0.0; k],
            None,
            Nontriviality {
                holds: true,
                note: Some("unconstrained problem: λ = 1 and μ = 0 are fixed; nontriviality is not tested".into()),
            },
        )
    } else {
        let target = &spec.constraint.as_ref().expect("constrained").target;
        let (lambda, mu, search) = match &opts.multipliers {
            Multipliers::Fixed { lambda, mu } => {
                if mu.len() != k {
                    return Err(Error::config("multipliers.mu", format!("expected {k} entries")));
                }
                (*lambda, mu.clone(), None)
            }
            Multipliers::Search { steps } => {
                let grid = hemisphere_grid(k, *steps);
                let scored: Vec<(f64, usize)> = grid
                    .par_iter()
                    .enumerate()
                    .map(|(i, (l, mu))| {
                        let mut w = vec![*l];
                        w.extend_from_slice(mu);
                        let tv = transversality(mu, &eg_mean, target, TRANSVERSALITY_TOL);
                        (margin(&moments, &w, opts.allowance).min(-tv.worst), i)
                    })
                    .collect();
                // First maximal candidate in grid order.
                let (best_score, best) = scored
                    .iter()
                    .fold((f64::NEG_INFINITY, 0), |acc, &(s, i)| if s > acc.0 { (s, i) } else { acc });
                let (l, mu) = grid[best].clone();
                (
                    l,
                    mu,
                    Some(MultiplierSearch {
                        candidates: grid.len(),
                        best_score,
                    }),
                )
            }
        };
        let holds = nontriviality(lambda, &mu);
        (lambda, mu, search, Nontriviality { holds, note: None })
    };

    let mut weights = vec![lambda];
    weights.extend_from_slice(&mu);
    let (maximum, cells) = maximum_condition(&moments, &weights, opts.form, opts.allowance);
    let transversality = spec
        .constraint
        .as_ref()
        .filter(|_| !spec.is_unconstrained())
        .map(|c| transversality(&mu, &eg_mean, &c.target, TRANSVERSALITY_TOL));
    let combined = AdjointPair::combine(&units, lambda, &mu)?;
    let initial_gap = combined.initial_gap(dynamics, states);
    let dropped = |f: &dyn Fn(&AdjointPair) -> &Vec<usize>| units.iter().flat_map(|u| f(u).iter().skip(1)).copied().max().unwrap_or(0);
    let diagnostics = SmpDiagnostics {
        n_paths: states.len(),
        n_cells: states.n_cells,
        scan_times: opts.steps.len(),
        scan_controls: opts.controls.len(),
        cost: cost(spec, states)?,
        constraint_value: eg,
        dropped_features: [
            dropped(&|u| &u.first.dropped_features),
            dropped(&|u| &u.second.dropped_features),
        ],
    };
    Ok((
        SmpReport {
            lambda,
            mu,
            nontriviality: nontriv,
            transversality,
            maximum_condition: maximum,
            initial_gap,
            multiplier_search: search,
            diagnostics,
        },
        cells,
    ))
}

/// Measured and predicted first-order cost change of one spike.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpikeRow {
    pub rho: f64,
    /// `J(u^ρ) - J(u)` under common random numbers.
    pub measured: Estimate,
    /// `Σ_{cells in I_ρ} E δH Δt` per form.
    pub predicted_literal: f64,
    pub predicted_bracket: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FormComparison {
    pub t0: f64,
    pub v: Vec<f64>,
    pub rows: Vec<SpikeRow>,
    /// Mean absolute deviation from the measured change, per form.
    pub error_literal: f64,
    pub error_bracket: f64,
    /// Whether the two forms produce different predictions at all.
    pub distinguishable: bool,
    pub matches: Option<QuadraticForm>,
}

/// Spikes `u` towards `v` on `[t0, t0 + ρ)` and compares the measured change
/// in cost with `∫_{I_ρ} E δH dt` for both quadratic forms.
pub fn compare_forms(
    dynamics: &Dynamics,
    bundle: &PathBundle,
    states: &StateBundle,
    adjoints: &AdjointPair,
    t0: f64,
    v: &[f64],
    rhos: &[f64],
) -> Result<FormComparison> {
    let spec = dynamics.spec;
    states.check_finite()?;
    let frozen = Control::recorded(states);
    let dt = states.dt();
    let base_parts: Vec<(f64, f64)> = (0..states.len())
        .map(|p| crate::pathsim::path_cost(spec, states, p))
        .collect();
    let mut rows = Vec::with_capacity(rhos.len());
    for &rho in rhos {
        let spiked = spike_control(&frozen, &Control::constant(v.to_vec()), t0, rho, spec.horizon)?;
        let pert = integrate_bundle(dynamics, &spiked, bundle)?;
        pert.check_finite()?;
        let measured = estimate((0..pert.len()).map(|p| {
            let (a, b) = crate::pathsim::path_cost(spec, &pert, p);
            a + b - base_parts[p].0 - base_parts[p].1
        }));
        let cells: Vec<usize> = (0..states.n_cells)
            .filter(|&i| {
                let t = states.grid_time(i);
                t >= t0 - 1e-9 && t < t0 + rho - 1e-9
            })
            .collect();
        let mut pred = [0.0; 2];
        for (f, form) in [QuadraticForm::Literal, QuadraticForm::Bracket].into_iter().enumerate() {
            for &i in &cells {
                let e = estimate((0..states.len()).map(|p| delta_h(dynamics, states, adjoints, i, p, v, form).value()));
                pred[f] += e.mean * dt;
            }
        }
        rows.push(SpikeRow {
            rho,
            measured,
            predicted_literal: pred[0],
            predicted_bracket: pred[1],
        });
    }
    let n = rows.len() as f64;
    let error_literal = rows.iter().map(|r| (r.predicted_literal - r.measured.mean).abs()).sum::<f64>() / n;
    let error_bracket = rows.iter().map(|r| (r.predicted_bracket - r.measured.mean).abs()).sum::<f64>() / n;
    let spread = rows
        .iter()
        .map(|r| (r.predicted_literal - r.predicted_bracket).abs())
        .fold(0.0, f64::max);
    let distinguishable = spread > 1e-12;
    let matches = distinguishable.then(|| {
        if error_bracket <= error_literal {
            QuadraticForm::Bracket
        } else {
            QuadraticForm::Literal
        }
    });
    Ok(FormComparison {
        t0,
        v: v.to_vec(),
        rows,
        error_literal,
        error_bracket,
        distinguishable,
        matches,
    })
}
