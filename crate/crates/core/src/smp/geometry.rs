//! Terminal-constraint geometry: distance function, its mollification, and
//! the transversality / nontriviality evaluators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{gauss_legendre, tensor_rule};

/// Closed convex target set `Q ⊂ R^k` for `E G(x0, x(T))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintSet {
    /// All of `R^k`: the unconstrained problem.
    All { dim: usize },
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
    Singleton { point: Vec<f64> },
}

impl ConstraintSet {
    pub fn dim(&self) -> usize {
        match self {
            ConstraintSet::All { dim } => *dim,
            ConstraintSet::Box { lo, .. } => lo.len(),
            ConstraintSet::Ball { center, .. } => center.len(),
            ConstraintSet::Singleton { point } => point.len(),
        }
    }

    pub fn is_unconstrained(&self) -> bool {
        matches!(self, ConstraintSet::All { .. })
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        match self {
            ConstraintSet::Box { lo, hi } => {
                if lo.len() != hi.len() {
                    return Err(Error::config(path, "box bounds differ in length"));
                }
                if lo.iter().zip(hi).any(|(a, b)| !(a <= b)) {
                    return Err(Error::config(path, "box requires lo <= hi"));
                }
            }
            ConstraintSet::Ball { radius, .. } => {
                if !(*radius >= 0.0 && radius.is_finite()) {
                    return Err(Error::config(format!("{path}.radius"), "must be nonnegative and finite"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Euclidean projection onto `Q`.
    pub fn project(&self, z: &[f64]) -> Vec<f64> {
        match self {
            ConstraintSet::All { .. } => z.to_vec(),
            ConstraintSet::Box { lo, hi } => z
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(&v, (&a, &b))| v.clamp(a, b))
                .collect(),
            ConstraintSet::Ball { center, radius } => {
                let d: Vec<f64> = z.iter().zip(center).map(|(a, c)| a - c).collect();
                let r = norm(&d);
                if r <= *radius {
                    z.to_vec()
                } else {
                    center.iter().zip(&d).map(|(c, di)| c + di * radius / r).collect()
                }
            }
            ConstraintSet::Singleton { point } => point.clone(),
        }
    }

    pub fn contains(&self, z: &[f64], tol: f64) -> bool {
        let p = self.project(z);
        norm(&z.iter().zip(&p).map(|(a, b)| a - b).collect::<Vec<_>>()) <= tol
    }

    /// Support function `sup_{z ∈ Q} <μ, z>` together with a maximizer when one exists.
    pub fn support(&self, mu: &[f64]) -> (f64, Option<Vec<f64>>) {
        match self {
            ConstraintSet::All { dim } => {
                if mu.iter().all(|&m| m == 0.0) {
                    (0.0, Some(vec![0.0; *dim]))
                } else {
                    (f64::INFINITY, None)
                }
            }
            ConstraintSet::Box { lo, hi } => {
                let z: Vec<f64> = mu
                    .iter()
                    .zip(lo.iter().zip(hi))
                    .map(|(&m, (&a, &b))| if m >= 0.0 { b } else { a })
                    .collect();
                (dot(mu, &z), Some(z))
            }
            ConstraintSet::Ball { center, radius } => {
                let r = norm(mu);
                let z: Vec<f64> = if r == 0.0 {
                    center.clone()
                } else {
                    center.iter().zip(mu).map(|(c, m)| c + radius * m / r).collect()
                };
                (dot(mu, center) + radius * r, Some(z))
            }
            ConstraintSet::Singleton { point } => (dot(mu, point), Some(point.clone())),
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhiValue {
    pub value: f64,
    /// `NaN` when `Φ = 0`, where the gradient is undefined.
    pub grad_s: f64,
    pub grad_z: Vec<f64>,
}

/// Distance from `(s, z)` to `(-∞, j_star - ε] × Q` and its gradient.
pub fn distance_phi(s: f64, z: &[f64], eps: f64, j_star: f64, q: &ConstraintSet) -> PhiValue {
    let s_proj = s.min(j_star - eps);
    let z_proj = q.project(z);
    let ds = s - s_proj;
    let dz: Vec<f64> = z.iter().zip(&z_proj).map(|(a, b)| a - b).collect();
    let value = (ds * ds + dot(&dz, &dz)).sqrt();
    if value > 0.0 {
        PhiValue {
            value,
            grad_s: ds / value,
            grad_z: dz.iter().map(|d| d / value).collect(),
        }
    } else {
        PhiValue {
            value,
            grad_s: f64::NAN,
            grad_z: vec![f64::NAN; z.len()],
        }
    }
}

pub const MIN_MOLLIFIER_ORDER: usize = 4;

/// Tensor Gauss-Legendre rule for the bump `α(t, z) = C exp(1 / (t² + |z|² - 1))`
/// on the unit ball of `R^{k+1}`, with `C` fixed so the discrete rule integrates
/// `α` to one.
#[derive(Debug, Clone)]
pub struct Mollifier {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
    normalizer: f64,
}

impl Mollifier {
    /// `k` is the constraint dimension; the rule lives in `R^{k+1}`.
    pub fn new(k: usize, order: usize) -> Result<Self> {
        if order < MIN_MOLLIFIER_ORDER {
            return Err(Error::InvalidArgument(format!(
                "mollifier quadrature order {order} is below the minimum {MIN_MOLLIFIER_ORDER}"
            )));
        }
        let dim = k + 1;
        let axis = gauss_legendre(order);
        let (pts, w) = tensor_rule(&vec![axis; dim]);
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for (x, wi) in pts.chunks(dim).zip(&w) {
            let r2: f64 = x.iter().map(|v| v * v).sum();
            if r2 < 1.0 {
                points.extend_from_slice(x);
                weights.push(wi * (1.0 / (r2 - 1.0)).exp());
            }
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidArgument("mollifier quadrature has no interior nodes".into()));
        }
        for w in &mut weights {
            *w /= total;
        }
        Ok(Mollifier {
            dim,
            points,
            weights,
            normalizer: 1.0 / total,
        })
    }

    /// The constant `C` making `∫ α = 1`.
    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    pub fn constraint_dim(&self) -> usize {
        self.dim - 1
    }
}

/// `Ψ(s, z; ε, δ) = ∫ Φ(s - s̄, z - z̄; ε) α_δ(s̄, z̄) ds̄ dz̄`.
pub fn mollify_psi(
    s: f64,
    z: &[f64],
    eps: f64,
    delta: f64,
    j_star: f64,
    q: &ConstraintSet,
    rule: &Mollifier,
) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument("delta must be positive".into()));
    }
    if rule.constraint_dim() != z.len() {
        return Err(Error::DimensionMismatch {
            expected: rule.constraint_dim(),
            got: z.len(),
        });
    }
    let mut shifted = vec![0.0; z.len()];
    let mut acc = 0.0;
    for (x, w) in rule.points.chunks(rule.dim).zip(&rule.weights) {
        for (i, zi) in z.iter().enumerate() {
            shifted[i] = zi - delta * x[i + 1];
        }
        acc += w * distance_phi(s - delta * x[0], &shifted, eps, j_star, q).value;
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransversalityVerdict {
    pub holds: bool,
    /// `sup_{z ∈ Q} <μ, z - EG>`; positive values are violations.
    pub worst: f64,
    pub worst_point: Option<Vec<f64>>,
}

/// `<μ, z - EG> <= tol` for all `z ∈ Q`, via the exact support function.
pub fn transversality(mu: &[f64], eg: &[f64], q: &ConstraintSet, tol: f64) -> TransversalityVerdict {
    let (sup, arg) = q.support(mu);
    let worst = sup - dot(mu, eg);
    TransversalityVerdict {
        holds: worst <= tol,
        worst,
        worst_point: arg,
    }
}

pub const NONTRIVIALITY_TOL: f64 = 1e-9;

/// `λ >= 0` and `|λ|² + |μ|² = 1`.
pub fn nontriviality(lambda: f64, mu: &[f64]) -> bool {
    lambda >= 0.0 && (lambda * lambda + dot(mu, mu) - 1.0).abs() <= NONTRIVIALITY_TOL
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn phi_examples() {
        let q = ConstraintSet::Singleton { point: vec![0.0] };
        let p = distance_phi(3.0, &[4.0], 1.0, 1.0, &q);
        assert!((p.value - 5.0).abs() < 1e-15);
        assert!((p.grad_s - 0.6).abs() < 1e-15);
        assert!((p.grad_z[0] - 0.8).abs() < 1e-15);

        let inside = distance_phi(-2.0, &[0.0], 1.0, 1.0, &q);
        assert_eq!(inside.value, 0.0);
        assert!(inside.grad_s.is_nan() && inside.grad_z[0].is_nan());
    }

    #[test]
    fn phi_identities_on_random_points() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let sets = [
            ConstraintSet::Box { lo: vec![-1.0, 0.0], hi: vec![1.0, 2.0] },
            ConstraintSet::Ball { center: vec![0.5, -0.5], radius: 1.5 },
            ConstraintSet::Singleton { point: vec![0.3, 0.1] },
        ];
        for q in &sets {
            for _ in 0..500 {
                let s = rng.random_range(-3.0..3.0);
                let z = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
                let p = distance_phi(s, &z, 0.1, 0.5, q);
                if p.value == 0.0 {
                    continue;
                }
                assert!(p.grad_s >= 0.0);
                assert!((p.grad_s * p.grad_s + dot(&p.grad_z, &p.grad_z) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mollifier_reproduces_affine_phi() {
        // Far to the right of the s-halfline with z inside Q, Φ = s - (J - ε).
        let q = ConstraintSet::Box { lo: vec![-10.0], hi: vec![10.0] };
        let rule = Mollifier::new(1, 16).unwrap();
        let psi = mollify_psi(5.0, &[0.0], 0.1, 0.2, 1.0, &q, &rule).unwrap();
        assert!((psi - (5.0 - 0.9)).abs() < 1e-12, "{psi}");
    }

    #[test]
    fn mollifier_bound_and_limit() {
        let q = ConstraintSet::Singleton { point: vec![0.25] };
        let rule = Mollifier::new(1, 16).unwrap();
        for &eps in &[0.1, 0.01] {
            for &delta in &[0.1, 0.01] {
                let psi = mollify_psi(2.0, &[0.25], eps, delta, 2.0, &q, &rule).unwrap();
                assert!(psi >= 0.0 && psi <= eps + 2f64.sqrt() * delta, "{eps} {delta} {psi}");
            }
        }
        let phi = distance_phi(1.0, &[1.0], 0.1, 0.5, &q).value;
        let errs: Vec<f64> = [0.1, 0.05, 0.025]
            .iter()
            .map(|&d| (mollify_psi(1.0, &[1.0], 0.1, d, 0.5, &q, &rule).unwrap() - phi).abs())
            .collect();
        assert!(errs[0] >= errs[1] && errs[1] >= errs[2], "{errs:?}");
    }

    #[test]
    fn low_order_mollifier_is_rejected() {
        assert!(Mollifier::new(1, 3).is_err());
    }

    #[test]
    fn transversality_examples() {
        let q = ConstraintSet::Box { lo: vec![-1.0, -1.0], hi: vec![1.0, 1.0] };
        let v = transversality(&[0.0, -1.0], &[0.0, -1.0], &q, 1e-12);
        assert!(v.holds);
        assert_eq!(v.worst, 0.0);
        let v = transversality(&[1.0, 0.0], &[0.0, 0.0], &q, 1e-12);
        assert!(!v.holds);
        assert_eq!(v.worst, 1.0);
        assert_eq!(v.worst_point.unwrap()[0], 1.0);
        let all = ConstraintSet::All { dim: 2 };
        assert!(transversality(&[0.0, 0.0], &[3.0, 1.0], &all, 1e-12).holds);
        assert!(!transversality(&[0.0, 1e-3], &[3.0, 1.0], &all, 1e-12).holds);
    }

    #[test]
    fn nontriviality_examples() {
        assert!(nontriviality(0.6, &[0.8, 0.0]));
        assert!(!nontriviality(0.0, &[0.0]));
        assert!(!nontriviality(-1.0, &[0.0]));
    }
}
