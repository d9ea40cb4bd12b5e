//! Polynomial tables: the declarative form of every problem coefficient.
//!
//! A [`Poly`] is a list of `(exponent tuple, coefficient)` terms over a fixed
//! variable layout. [`SmoothFn`] caches first and second derivatives so the
//! adjoint and variational equations get exact `f_x`, `f_xx`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub exp: Vec<u32>,
    pub coef: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Poly {
    pub terms: Vec<Term>,
}

impl Poly {
    pub fn zero() -> Self {
        Poly { terms: Vec::new() }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        Poly::from_terms(nvars, &[(&vec![0; nvars], c)])
    }

    /// Builds from `(exponents, coefficient)` pairs, dropping zero coefficients.
    pub fn from_terms(nvars: usize, terms: &[(&[u32], f64)]) -> Self {
        let mut p = Poly {
            terms: terms
                .iter()
                .filter(|(_, c)| *c != 0.0)
                .map(|(e, c)| {
                    debug_assert_eq!(e.len(), nvars);
                    Term { exp: e.to_vec(), coef: *c }
                })
                .collect(),
        };
        p.normalize();
        p
    }

    /// Single monomial `c · vars[i]^k`.
    pub fn monomial(nvars: usize, var: usize, power: u32, c: f64) -> Self {
        let mut e = vec![0; nvars];
        e[var] = power;
        Poly::from_terms(nvars, &[(&e, c)])
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn check_vars(&self, nvars: usize, path: &str) -> Result<()> {
        for (i, t) in self.terms.iter().enumerate() {
            if t.exp.len() != nvars {
                return Err(Error::config(
                    format!("{path}[{i}].exp"),
                    format!("expected {nvars} exponents, got {}", t.exp.len()),
                ));
            }
            if !t.coef.is_finite() {
                return Err(Error::config(format!("{path}[{i}].coef"), "must be finite"));
            }
        }
        Ok(())
    }

    pub fn eval(&self, vars: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                t.coef
                    * t.exp
                        .iter()
                        .zip(vars)
                        .filter(|(&e, _)| e > 0)
                        .map(|(&e, &v)| match e {
                            1 => v,
                            2 => v * v,
                            _ => v.powi(e as i32),
                        })
                        .product::<f64>()
            })
            .sum()
    }

    pub fn derivative(&self, var: usize) -> Poly {
        let mut p = Poly {
            terms: self
                .terms
                .iter()
                .filter(|t| t.exp[var] > 0)
                .map(|t| {
                    let mut exp = t.exp.clone();
                    let k = exp[var];
                    exp[var] -= 1;
                    Term { exp, coef: t.coef * k as f64 }
                })
                .collect(),
        };
        p.normalize();
        p
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let mut p = Poly {
            terms: self.terms.iter().chain(&other.terms).cloned().collect(),
        };
        p.normalize();
        p
    }

    /// Does any term involve one of the variables in `vars`?
    pub fn depends_on(&self, vars: std::ops::Range<usize>) -> bool {
        self.terms.iter().any(|t| vars.clone().any(|v| t.exp[v] > 0))
    }

    fn normalize(&mut self) {
        self.terms.sort_by(|a, b| a.exp.cmp(&b.exp));
        let mut merged: Vec<Term> = Vec::with_capacity(self.terms.len());
        for t in self.terms.drain(..) {
            match merged.last_mut() {
                Some(last) if last.exp == t.exp => last.coef += t.coef,
                _ => merged.push(t),
            }
        }
        merged.retain(|t| t.coef != 0.0);
        self.terms = merged;
    }
}

/// A scalar polynomial with cached derivatives in the variables `diff_start..diff_start + diff_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothFn {
    value: Poly,
    nvars: usize,
    diff_start: usize,
    grad: Vec<Poly>,
    hess: Vec<Poly>,
    /// Derivatives in the remaining leading variables (used for `h_y`, `G_y`).
    lead_grad: Vec<Poly>,
}

impl SmoothFn {
    pub fn new(value: Poly, nvars: usize, diff_start: usize, diff_len: usize) -> Self {
        let grad: Vec<Poly> = (0..diff_len).map(|i| value.derivative(diff_start + i)).collect();
        let mut hess = Vec::with_capacity(diff_len * diff_len);
        for g in &grad {
            for j in 0..diff_len {
                hess.push(g.derivative(diff_start + j));
            }
        }
        let lead_grad = (0..diff_start).map(|i| value.derivative(i)).collect();
        SmoothFn {
            value,
            nvars,
            diff_start,
            grad,
            hess,
            lead_grad,
        }
    }

    pub fn zero(nvars: usize, diff_start: usize, diff_len: usize) -> Self {
        SmoothFn::new(Poly::zero(), nvars, diff_start, diff_len)
    }

    pub fn poly(&self) -> &Poly {
        &self.value
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn diff_len(&self) -> usize {
        self.grad.len()
    }

    pub fn is_zero(&self) -> bool {
        self.value.is_zero()
    }

    pub fn eval(&self, vars: &[f64]) -> f64 {
        self.value.eval(vars)
    }

    pub fn grad(&self, vars: &[f64], out: &mut [f64]) {
        for (o, g) in out.iter_mut().zip(&self.grad) {
            *o = g.eval(vars);
        }
    }

    /// Row-major Hessian in the differentiated variables.
    pub fn hess(&self, vars: &[f64], out: &mut [f64]) {
        for (o, h) in out.iter_mut().zip(&self.hess) {
            *o = h.eval(vars);
        }
    }

    pub fn lead_grad(&self, vars: &[f64], out: &mut [f64]) {
        for (o, g) in out.iter_mut().zip(&self.lead_grad) {
            *o = g.eval(vars);
        }
    }

    pub fn has_hessian(&self) -> bool {
        self.hess.iter().any(|h| !h.is_zero())
    }

    /// Does the value depend on variables outside the differentiated block's
    /// leading part, i.e. on indices `>= diff_start + diff_len`?
    pub fn depends_on_trailing(&self) -> bool {
        self.value.depends_on(self.diff_start + self.grad.len()..self.nvars)
    }
}

/// Vector of [`SmoothFn`]s sharing a variable layout, e.g. `g(x, v) ∈ R^m`.
#[derive(Debug, Clone, PartialEq)]
pub struct VecFn {
    pub components: Vec<SmoothFn>,
}

impl VecFn {
    pub fn new(polys: Vec<Poly>, nvars: usize, diff_start: usize, diff_len: usize) -> Self {
        VecFn {
            components: polys
                .into_iter()
                .map(|p| SmoothFn::new(p, nvars, diff_start, diff_len))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.components.iter().all(SmoothFn::is_zero)
    }

    pub fn eval(&self, vars: &[f64], out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.eval(vars);
        }
    }

    /// Jacobian `∂f_i/∂x_j`, row-major `len x diff_len`.
    pub fn jacobian(&self, vars: &[f64], out: &mut [f64]) {
        let d = self.components.first().map(SmoothFn::diff_len).unwrap_or(0);
        for (i, c) in self.components.iter().enumerate() {
            c.grad(vars, &mut out[i * d..(i + 1) * d]);
        }
    }

    pub fn depends_on_trailing(&self) -> bool {
        self.components.iter().any(SmoothFn::depends_on_trailing)
    }

    pub fn has_hessian(&self) -> bool {
        self.components.iter().any(SmoothFn::has_hessian)
    }
}
