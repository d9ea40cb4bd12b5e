//! Finite-activity Lévy models and moment functionals of their jump measure.
//!
//! A model is `X(t) = a t + Σ^{1/2} B(t) + Σ_{s <= t} ΔX(s)` where the jumps
//! form a compound Poisson process with (finite) Lévy measure `ν`. The drift
//! `a` is the continuous drift: jumps are not compensated inside it, so
//! `E X(1) = a + m_{e}` componentwise.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multiindex::{indices_of_degree, MultiIndex};
use crate::quadrature::{composite_on, gauss_legendre_on, tensor_rule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub point: Vec<f64>,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DensityKind {
    /// Constant density `intensity` on the support box.
    Uniform { intensity: f64 },
    /// Polynomial density `Σ coef · x^exp`, required to be nonnegative on the box.
    Polynomial { terms: Vec<PolyTerm> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyTerm {
    pub exp: Vec<u32>,
    pub coef: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensitySpec {
    pub support: Vec<[f64; 2]>,
    #[serde(flatten)]
    pub kind: DensityKind,
    /// Gauss-Legendre nodes per axis. When absent, chosen from the basis degree.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quad_order: Option<usize>,
}

impl DensitySpec {
    /// Per-axis polynomial degree of the density itself.
    fn axis_degrees(&self, dim: usize) -> Vec<u32> {
        match &self.kind {
            DensityKind::Uniform { .. } => vec![0; dim],
            DensityKind::Polynomial { terms } => (0..dim)
                .map(|a| terms.iter().map(|t| t.exp.get(a).copied().unwrap_or(0)).max().unwrap_or(0))
                .collect(),
        }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        match &self.kind {
            DensityKind::Uniform { intensity } => *intensity,
            DensityKind::Polynomial { terms } => terms
                .iter()
                .map(|t| t.coef * MultiIndex::new(t.exp.clone()).monomial(x))
                .sum(),
        }
    }

    /// Upper bound of the density on its support, used for rejection sampling.
    pub(crate) fn upper_bound(&self) -> f64 {
        match &self.kind {
            DensityKind::Uniform { intensity } => *intensity,
            DensityKind::Polynomial { terms } => terms
                .iter()
                .map(|t| {
                    let m: f64 = t
                        .exp
                        .iter()
                        .zip(&self.support)
                        .map(|(&e, b)| b[0].abs().max(b[1].abs()).powi(e as i32))
                        .product();
                    t.coef.abs() * m
                })
                .sum(),
        }
    }

    pub(crate) fn density_at(&self, x: &[f64]) -> f64 {
        self.eval(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum JumpSpec {
    Atoms(Vec<Atom>),
    Density(DensitySpec),
}

/// Declarative form of a model, as read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevyConfig {
    pub dimension: usize,
    #[serde(default)]
    pub drift: Option<Vec<f64>>,
    #[serde(default)]
    pub covariance: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atoms: Option<Vec<Atom>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<DensitySpec>,
}

#[derive(Debug, Clone)]
pub struct LevyModel {
    dim: usize,
    drift: Vec<f64>,
    /// Row-major `n x n`.
    covariance: Vec<f64>,
    /// Symmetric square root of the covariance, row-major.
    cov_sqrt: Vec<f64>,
    jumps: JumpSpec,
    /// Weighted points representing `ν`: the atoms themselves or the density quadrature.
    support_points: Vec<f64>,
    support_weights: Vec<f64>,
    /// Per-axis polynomial exactness of `support_*` (`u32::MAX` for atoms).
    exactness: Vec<u32>,
    density_degrees: Vec<u32>,
    intensity: f64,
}

impl LevyModel {
    /// Pure-jump model with the given atoms, zero drift and no Gaussian part.
    pub fn atoms(atoms: Vec<Atom>) -> Result<Self> {
        let dim = atoms
            .first()
            .map(|a| a.point.len())
            .ok_or_else(|| Error::InvalidModel("atom list is empty; use LevyModel::new".into()))?;
        Self::new(dim, vec![0.0; dim], vec![0.0; dim * dim], JumpSpec::Atoms(atoms))
    }

    pub fn new(dim: usize, drift: Vec<f64>, covariance: Vec<f64>, jumps: JumpSpec) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidModel("dimension must be positive".into()));
        }
        if drift.len() != dim {
            return Err(Error::InvalidModel(format!("drift has length {}, expected {dim}", drift.len())));
        }
        if drift.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("drift must be finite".into()));
        }
        if covariance.len() != dim * dim {
            return Err(Error::InvalidModel(format!("covariance must be {dim}x{dim}")));
        }
        let cov_sqrt = psd_sqrt(dim, &covariance)?;

        let (support_points, support_weights, exactness, density_degrees) = match &jumps {
            JumpSpec::Atoms(atoms) => {
                let mut pts = Vec::with_capacity(atoms.len() * dim);
                let mut wts = Vec::with_capacity(atoms.len());
                for (j, a) in atoms.iter().enumerate() {
                    if a.point.len() != dim {
                        return Err(Error::InvalidModel(format!("atoms[{j}].point has wrong dimension")));
                    }
                    if !(a.rate.is_finite() && a.rate > 0.0) {
                        return Err(Error::InvalidModel(format!("atoms[{j}].rate must be positive and finite")));
                    }
                    if a.point.iter().any(|v| !v.is_finite()) {
                        return Err(Error::InvalidModel(format!("atoms[{j}].point must be finite")));
                    }
                    if a.point.iter().all(|&v| v == 0.0) {
                        return Err(Error::InvalidModel(format!("atoms[{j}].point is the origin")));
                    }
                    pts.extend_from_slice(&a.point);
                    wts.push(a.rate);
                }
                (pts, wts, vec![u32::MAX; dim], vec![0; dim])
            }
            JumpSpec::Density(d) => {
                if d.support.len() != dim {
                    return Err(Error::InvalidModel("density.support has wrong dimension".into()));
                }
                for (a, b) in d.support.iter().enumerate() {
                    if !(b[0].is_finite() && b[1].is_finite() && b[0] < b[1]) {
                        return Err(Error::InvalidModel(format!(
                            "density.support[{a}] must be a bounded interval with lo < hi"
                        )));
                    }
                }
                match &d.kind {
                    DensityKind::Uniform { intensity } => {
                        if !(intensity.is_finite() && *intensity > 0.0) {
                            return Err(Error::InvalidModel("density.intensity must be positive".into()));
                        }
                    }
                    DensityKind::Polynomial { terms } => {
                        if terms.iter().any(|t| t.exp.len() != dim || !t.coef.is_finite()) {
                            return Err(Error::InvalidModel("density.terms malformed".into()));
                        }
                    }
                }
                let degrees = d.axis_degrees(dim);
                let order = d
                    .quad_order
                    .ok_or_else(|| Error::InvalidModel("density.quad_order must be set".into()))?;
                if order == 0 {
                    return Err(Error::InvalidModel("density.quad_order must be positive".into()));
                }
                let axes: Vec<_> = d.support.iter().map(|b| gauss_legendre_on(order, b[0], b[1])).collect();
                let (pts, w) = tensor_rule(&axes);
                let mut wts = Vec::with_capacity(w.len());
                for (x, wi) in pts.chunks(dim).zip(&w) {
                    let rho = d.eval(x);
                    if rho < 0.0 {
                        return Err(Error::InvalidModel(format!("density is negative at {x:?}")));
                    }
                    wts.push(wi * rho);
                }
                let exact = (2 * order - 1) as u32;
                (pts, wts, vec![exact; dim], degrees)
            }
        };
        let intensity = support_weights.iter().sum();
        Ok(LevyModel {
            dim,
            drift,
            covariance,
            cov_sqrt,
            jumps,
            support_points,
            support_weights,
            exactness,
            density_degrees,
            intensity,
        })
    }

    /// Builds a model from its JSON form. `degree_hint` is the basis degree `D`,
    /// used to pick a density quadrature exact to degree `2D + 2`.
    pub fn from_config(cfg: &LevyConfig, degree_hint: u32) -> Result<Self> {
        let n = cfg.dimension;
        if n == 0 {
            return Err(Error::config("levy.dimension", "must be positive"));
        }
        let drift = cfg.drift.clone().unwrap_or_else(|| vec![0.0; n]);
        if drift.len() != n {
            return Err(Error::config("levy.drift", format!("expected {n} entries")));
        }
        let covariance = match &cfg.covariance {
            None => vec![0.0; n * n],
            Some(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::config("levy.covariance", format!("expected a {n}x{n} matrix")));
                }
                rows.iter().flatten().copied().collect()
            }
        };
        let jumps = match (&cfg.atoms, &cfg.density) {
            (Some(atoms), None) => {
                for (j, a) in atoms.iter().enumerate() {
                    if !(a.rate.is_finite() && a.rate > 0.0) {
                        return Err(Error::config(format!("levy.atoms[{j}].rate"), "must be positive and finite"));
                    }
                    if a.point.len() != n {
                        return Err(Error::config(format!("levy.atoms[{j}].point"), format!("expected {n} entries")));
                    }
                }
                JumpSpec::Atoms(atoms.clone())
            }
            (None, Some(d)) => {
                let mut d = d.clone();
                if d.quad_order.is_none() {
                    let max_deg = d.axis_degrees(n).into_iter().max().unwrap_or(0);
                    let need = 2 * degree_hint + 2 + max_deg;
                    d.quad_order = Some((need as usize + 2) / 2);
                }
                JumpSpec::Density(d)
            }
            (None, None) => JumpSpec::Atoms(Vec::new()),
            (Some(_), Some(_)) => {
                return Err(Error::config("levy", "specify either `atoms` or `density`, not both"))
            }
        };
        LevyModel::new(n, drift, covariance, jumps).map_err(|e| match e {
            Error::InvalidModel(m) => Error::config("levy", m),
            other => other,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn drift(&self) -> &[f64] {
        &self.drift
    }

    /// Covariance entry `Σ_ij`.
    pub fn covariance(&self, i: usize, j: usize) -> f64 {
        self.covariance[i * self.dim + j]
    }

    pub fn has_gaussian_part(&self) -> bool {
        self.covariance.iter().any(|&c| c != 0.0)
    }

    pub(crate) fn cov_sqrt(&self) -> &[f64] {
        &self.cov_sqrt
    }

    pub fn jumps(&self) -> &JumpSpec {
        &self.jumps
    }

    /// Total jump intensity `Λ = ν(R^n)`.
    pub fn intensity(&self) -> f64 {
        self.intensity
    }

    /// `m_p = ∫ x^p ν(dx)`.
    pub fn moment(&self, p: &MultiIndex) -> Result<f64> {
        if p.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: p.dim(),
            });
        }
        for (axis, (&e, &exact)) in p.exponents().iter().zip(&self.exactness).enumerate() {
            let needed = e + self.density_degrees[axis];
            if needed > exact {
                return Err(Error::QuadratureExactness {
                    index: p.clone(),
                    degree: needed,
                    exact,
                });
            }
        }
        Ok(self
            .support_points
            .chunks(self.dim)
            .zip(&self.support_weights)
            .map(|(x, w)| w * p.monomial(x))
            .sum())
    }

    /// Evaluates `∫_{|x| >= ε} exp(λ |x|) ν(dx)`.
    ///
    /// Finite activity with bounded support makes the integral finite, but
    /// it can overflow; in that case the value is `+∞` and a warning is
    /// attached.
    pub fn validate_exponential_moment(&self, lambda: f64, eps: f64) -> Result<ExponentialMoment> {
        if !(lambda > 0.0 && eps > 0.0) {
            return Err(Error::InvalidArgument("lambda and eps must be positive".into()));
        }
        let integrand = |x: &[f64]| {
            let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if r >= eps {
                (lambda * r).exp()
            } else {
                0.0
            }
        };
        let value: f64 = match &self.jumps {
            JumpSpec::Atoms(atoms) => atoms.iter().map(|a| a.rate * integrand(&a.point)).sum(),
            JumpSpec::Density(d) => {
                let pieces = match self.dim {
                    1 => 16,
                    2 => 4,
                    3 => 2,
                    _ => 1,
                };
                let axes: Vec<_> = d
                    .support
                    .iter()
                    .map(|b| composite_on(b[0], b[1], &[-eps, 0.0, eps], pieces, 8))
                    .collect();
                let (pts, w) = tensor_rule(&axes);
                pts.chunks(self.dim)
                    .zip(&w)
                    .map(|(x, wi)| wi * d.eval(x) * integrand(x))
                    .sum()
            }
        };
        let mut warning = None;
        if value.is_infinite() {
            let msg = format!("exponential moment overflowed for lambda={lambda}, eps={eps}");
            warn!("{msg}");
            warning = Some(msg);
        }
        Ok(ExponentialMoment {
            finite: true,
            value,
            warning,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExponentialMoment {
    /// The integral is finite for every model this crate accepts.
    pub finite: bool,
    /// Computed value, `+∞` when it overflows `f64`.
    pub value: f64,
    pub warning: Option<String>,
}

fn psd_sqrt(dim: usize, cov: &[f64]) -> Result<Vec<f64>> {
    let m = DMatrix::from_row_slice(dim, dim, cov);
    let scale = cov.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    for i in 0..dim {
        for j in 0..dim {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale.max(1.0) {
                return Err(Error::InvalidModel("covariance is not symmetric".into()));
            }
            if !m[(i, j)].is_finite() {
                return Err(Error::InvalidModel("covariance must be finite".into()));
            }
        }
    }
    if scale == 0.0 {
        return Ok(vec![0.0; dim * dim]);
    }
    let eig = SymmetricEigen::new(m);
    if eig.eigenvalues.iter().any(|&l| l < -1e-12 * scale) {
        return Err(Error::InvalidModel("covariance has a negative eigenvalue".into()));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    let s = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    let mut out = Vec::with_capacity(dim * dim);
    for i in 0..dim {
        for j in 0..dim {
            out.push(s[(i, j)]);
        }
    }
    Ok(out)
}

/// Moments `m_p` for `0 <= |p| <= max_degree`, computed once and shared.
#[derive(Debug, Clone)]
pub struct MomentTable {
    dim: usize,
    max_degree: u32,
    values: BTreeMap<MultiIndex, f64>,
}

impl MomentTable {
    pub fn build(model: &LevyModel, max_degree: u32) -> Result<Self> {
        let mut values = BTreeMap::new();
        values.insert(MultiIndex::zero(model.dim()), model.intensity());
        for d in 1..=max_degree {
            for p in indices_of_degree(model.dim(), d) {
                let m = model.moment(&p)?;
                values.insert(p, m);
            }
        }
        Ok(MomentTable {
            dim: model.dim(),
            max_degree,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_degree(&self) -> u32 {
        self.max_degree
    }

    pub fn get(&self, p: &MultiIndex) -> Result<f64> {
        self.values.get(p).copied().ok_or_else(|| Error::MissingMoment(p.clone()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&MultiIndex, &f64)> {
        self.values.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn atom(p: &[f64], r: f64) -> Atom {
        Atom { point: p.to_vec(), rate: r }
    }

    fn uniform_1d() -> LevyModel {
        LevyModel::new(
            1,
            vec![0.0],
            vec![0.0],
            JumpSpec::Density(DensitySpec {
                support: vec![[-1.0, 1.0]],
                kind: DensityKind::Uniform { intensity: 1.0 },
                quad_order: Some(4),
            }),
        )
        .unwrap()
    }

    #[test]
    fn moment_examples() {
        let single = LevyModel::atoms(vec![atom(&[1.0], 1.0)]).unwrap();
        assert_eq!(single.moment(&MultiIndex::new(vec![3])).unwrap(), 1.0);
        let sym = LevyModel::atoms(vec![atom(&[1.0], 0.5), atom(&[-1.0], 0.5)]).unwrap();
        assert_eq!(sym.moment(&MultiIndex::new(vec![3])).unwrap(), 0.0);
        let m2 = uniform_1d().moment(&MultiIndex::new(vec![2])).unwrap();
        assert!((m2 - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn density_moment_beyond_exactness_is_an_error() {
        // 4 nodes are exact to degree 7
        let m = uniform_1d();
        assert!(m.moment(&MultiIndex::new(vec![7])).is_ok());
        assert!(matches!(
            m.moment(&MultiIndex::new(vec![8])),
            Err(Error::QuadratureExactness { degree: 8, exact: 7, .. })
        ));
    }

    #[test]
    fn polynomial_density_moments() {
        // density 3x^2 on [0,1]: total mass 1, mean 3/4
        let m = LevyModel::new(
            1,
            vec![0.0],
            vec![0.0],
            JumpSpec::Density(DensitySpec {
                support: vec![[0.0, 1.0]],
                kind: DensityKind::Polynomial { terms: vec![PolyTerm { exp: vec![2], coef: 3.0 }] },
                quad_order: Some(4),
            }),
        )
        .unwrap();
        assert!((m.intensity() - 1.0).abs() < 1e-14);
        assert!((m.moment(&MultiIndex::new(vec![1])).unwrap() - 0.75).abs() < 1e-14);
        // degree 6 needs 6 + 2 = 8 > 7
        assert!(m.moment(&MultiIndex::new(vec![6])).is_err());
    }

    #[test]
    fn moment_table_zero_entry_is_intensity() {
        let m = LevyModel::atoms(vec![atom(&[1.0, 0.0], 2.0), atom(&[0.0, -1.0], 0.5)]).unwrap();
        let t = MomentTable::build(&m, 4).unwrap();
        assert_eq!(t.get(&MultiIndex::zero(2)).unwrap(), 2.5);
        assert_eq!(t.get(&MultiIndex::new(vec![0, 3])).unwrap(), -0.5);
        assert!(t.get(&MultiIndex::new(vec![5, 0])).is_err());
    }

    #[test]
    fn rejects_bad_models() {
        assert!(LevyModel::atoms(vec![atom(&[1.0], -1.0)]).is_err());
        assert!(LevyModel::atoms(vec![atom(&[0.0], 1.0)]).is_err());
        assert!(LevyModel::new(2, vec![0.0; 2], vec![1.0, 2.0, 2.0, 1.0], JumpSpec::Atoms(vec![])).is_err());
        assert!(LevyModel::new(2, vec![0.0; 2], vec![1.0, 0.5, 0.0, 1.0], JumpSpec::Atoms(vec![])).is_err());
        assert!(LevyModel::new(2, vec![0.0; 2], vec![1.0, 0.5, 0.5, 1.0], JumpSpec::Atoms(vec![])).is_ok());
    }

    #[test]
    fn unbounded_density_rejected() {
        let r = LevyModel::new(
            1,
            vec![0.0],
            vec![0.0],
            JumpSpec::Density(DensitySpec {
                support: vec![[f64::NEG_INFINITY, 1.0]],
                kind: DensityKind::Uniform { intensity: 1.0 },
                quad_order: Some(4),
            }),
        );
        assert!(r.is_err());
    }

    #[test]
    fn config_errors_name_the_field() {
        let cfg: LevyConfig =
            serde_json::from_str(r#"{"dimension":1,"atoms":[{"point":[1.0],"rate":1.0},{"point":[2.0],"rate":-3.0}]}"#)
                .unwrap();
        let err = LevyModel::from_config(&cfg, 2).unwrap_err();
        assert!(err.to_string().contains("levy.atoms[1].rate"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn exponential_moment_examples() {
        let sym = LevyModel::atoms(vec![atom(&[1.0], 0.5), atom(&[-1.0], 0.5)]).unwrap();
        let r = sym.validate_exponential_moment(2.0, 0.1).unwrap();
        assert!(r.finite);
        assert!((r.value - 2f64.exp()).abs() < 1e-12);

        let u = uniform_1d().validate_exponential_moment(1.0, 0.5).unwrap();
        let exact = 2.0 * (1f64.exp() - 0.5f64.exp());
        assert!(u.finite);
        assert!((u.value - exact).abs() < 1e-10, "{} vs {exact}", u.value);

        let big = LevyModel::atoms(vec![atom(&[5.0], 1.0)]).unwrap();
        let r = big.validate_exponential_moment(10.0, 1.0).unwrap();
        assert!((r.value / 50f64.exp() - 1.0).abs() < 1e-12);
        assert!(r.warning.is_none());

        let huge = LevyModel::atoms(vec![atom(&[500.0], 1.0)]).unwrap();
        let r = huge.validate_exponential_moment(10.0, 1.0).unwrap();
        assert!(r.finite && r.value.is_infinite() && r.warning.is_some());
    }

    #[test]
    fn product_split_identity() {
        let atoms = vec![atom(&[0.7, -1.3], 0.4), atom(&[-2.0, 0.5], 1.1), atom(&[1.5, 1.5], 0.3)];
        let m = LevyModel::atoms(atoms.clone()).unwrap();
        let idx = crate::multiindex::enumerate_multiindices(2, 3);
        for p in &idx {
            for q in &idx {
                let direct = m.moment(&p.add(q)).unwrap();
                let split: f64 = atoms.iter().map(|a| a.rate * p.monomial(&a.point) * q.monomial(&a.point)).sum();
                assert!((direct - split).abs() <= 1e-12 * split.abs().max(1.0));
            }
        }
    }

    #[test]
    fn symmetric_pair_has_vanishing_odd_moments() {
        let m = LevyModel::atoms(vec![atom(&[1.7], 0.3), atom(&[-1.7], 0.3)]).unwrap();
        let t = MomentTable::build(&m, 9).unwrap();
        for d in (1..=9).step_by(2) {
            assert_eq!(t.get(&MultiIndex::new(vec![d])).unwrap(), 0.0);
        }
    }
}
