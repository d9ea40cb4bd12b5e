//! Scalar linear-quadratic problems `dx = (a x + b v) dt + c x dH`,
//! `ℓ = q x² + r v²`, `h = s x²`, and their Riccati equations.

use serde::Serialize;

use crate::pathsim::{Control, StateBundle};
use crate::smp::adjoint::AdjointPair;

/// Steps per unit time of the RK4 tables.
pub const RICCATI_STEPS_PER_UNIT: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalarLq {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// `κ` of the driving basis element.
    pub kappa: f64,
    pub q: f64,
    pub r: f64,
    pub s: f64,
    pub horizon: f64,
    pub x0: f64,
}

impl ScalarLq {
    /// `dx = v dt + x dH`, `ℓ = x² + v²`, `h = x²`, `T = 1`, `x0 = 1`, `κ = 1`.
    pub fn benchmark() -> Self {
        ScalarLq {
            a: 0.0,
            b: 1.0,
            c: 1.0,
            kappa: 1.0,
            q: 1.0,
            r: 1.0,
            s: 1.0,
            horizon: 1.0,
            x0: 1.0,
        }
    }

    /// Value function `V = P(t) x²`: `-P' = 2aP + κc²P + q - b²P²/r`, `P(T) = s`.
    pub fn riccati(&self) -> OdeTable {
        let me = *self;
        OdeTable::backward(self.horizon, self.s, self.steps(), move |_, p| {
            2.0 * me.a * p + me.kappa * me.c * me.c * p + me.q - me.b * me.b * p * p / me.r
        })
    }

    /// Second-order adjoint along any control for this problem:
    /// `-P₂' = 2aP₂ + κc²P₂ + 2λq`, `P₂(T) = 2λs`.
    pub fn second_adjoint(&self, lambda: f64) -> OdeTable {
        let me = *self;
        OdeTable::backward(self.horizon, 2.0 * lambda * self.s, self.steps(), move |_, p| {
            2.0 * me.a * p + me.kappa * me.c * me.c * p + 2.0 * lambda * me.q
        })
    }

    /// Optimal feedback `u*(t, x) = -(b / r) P(t) x`.
    pub fn optimal_control(&self) -> Control {
        let table = self.riccati();
        let gain = self.b / self.r;
        Control::feedback(1, move |t, x, out| out[0] = -gain * table.at(t) * x[0])
    }

    /// Optimal cost `P(0) x0²`.
    pub fn optimal_cost(&self) -> f64 {
        self.riccati().at(0.0) * self.x0 * self.x0
    }

    fn steps(&self) -> usize {
        ((self.horizon * RICCATI_STEPS_PER_UNIT as f64).ceil() as usize).max(100)
    }
}

/// Solution of a scalar terminal-value ODE on a uniform grid, linearly interpolated.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeTable {
    horizon: f64,
    values: Vec<f64>,
}

impl OdeTable {
    /// Classical RK4 for `-y' = f(t, y)` from `y(T) = terminal` back to 0.
    pub fn backward(horizon: f64, terminal: f64, steps: usize, f: impl Fn(f64, f64) -> f64) -> Self {
        let h = horizon / steps as f64;
        let mut values = vec![0.0; steps + 1];
        values[steps] = terminal;
        let mut y = terminal;
        // In reversed time τ = T - t the equation is dy/dτ = f(T - τ, y).
        for i in (0..steps).rev() {
            let t = (i + 1) as f64 * h;
            let k1 = f(t, y);
            let k2 = f(t - 0.5 * h, y + 0.5 * h * k1);
            let k3 = f(t - 0.5 * h, y + 0.5 * h * k2);
            let k4 = f(t - h, y + h * k3);
            y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            values[i] = y;
        }
        OdeTable { horizon, values }
    }

    pub fn at(&self, t: f64) -> f64 {
        let n = self.values.len() - 1;
        let u = (t / self.horizon).clamp(0.0, 1.0) * n as f64;
        let i = (u.floor() as usize).min(n - 1);
        let w = u - i as f64;
        (1.0 - w) * self.values[i] + w * self.values[i + 1]
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }
}

/// Adjoints of a scalar problem compared with their Riccati counterparts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdjointOracleError {
    pub t_max: f64,
    /// `(Σ (p - 2 P_ric x)²  /  Σ (2 P_ric x)²)^{1/2}` over paths and grid times `t ≤ t_max`.
    pub p_relative_rms: f64,
    /// `max |E P(t_i) - P₂(t_i)| / |P₂(t_i)|` over the same times.
    pub second_max_relative: f64,
    pub p0_mean: f64,
    pub second_p0_mean: f64,
    pub second_p0_oracle: f64,
}

/// Compares the first adjoint with `2 P_ric x` and the second with the
/// deterministic ODE, where `states` were generated under the Riccati control.
pub fn adjoint_oracle_error(lq: &ScalarLq, states: &StateBundle, adj: &AdjointPair, t_max: f64) -> AdjointOracleError {
    let ric = lq.riccati();
    let p2 = lq.second_adjoint(adj.lambda);
    let (mut ep, mut norm) = (0.0, 0.0);
    let mut second = 0.0f64;
    let tol = 1e-12 * lq.horizon;
    for i in 0..=states.n_cells {
        let t = states.grid_time(i);
        if t > t_max + tol {
            break;
        }
        let r = ric.at(t);
        for path in 0..states.len() {
            let want = 2.0 * adj.lambda * r * states.x(path, i)[0];
            ep += (adj.p(i, path)[0] - want).powi(2);
            norm += want * want;
        }
        let want = p2.at(t);
        second = second.max((adj.second.mean_y(i, 0).mean - want).abs() / want.abs());
    }
    AdjointOracleError {
        t_max,
        p_relative_rms: (ep / norm).sqrt(),
        second_max_relative: second,
        p0_mean: adj.first.mean_y(0, 0).mean,
        second_p0_mean: adj.second.mean_y(0, 0).mean,
        second_p0_oracle: p2.at(0.0),
    }
}
