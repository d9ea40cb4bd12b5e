use crate::pathsim::Dynamics;

/// `H(x, v) = λ ℓ(x, v) + <p, g(x, v)> + Σ_k <J^k, γ^k(x, v)>`, summed over the
/// active (non-degenerate) basis elements. `j` is index-major, `j[k * m + a]`.
pub fn hamiltonian(dynamics: &Dynamics, x: &[f64], v: &[f64], lambda: f64, p: &[f64], j: &[f64]) -> f64 {
    let m = dynamics.state_dim();
    let mut xv = Vec::with_capacity(x.len() + v.len());
    xv.extend_from_slice(x);
    xv.extend_from_slice(v);
    let mut buf = vec![0.0; m];
    let mut h = if lambda != 0.0 {
        lambda * dynamics.spec.running_cost.eval(&xv)
    } else {
        0.0
    };
    dynamics.spec.drift.eval(&xv, &mut buf);
    h += dot(p, &buf);
    for (k, f) in dynamics.gamma_terms() {
        f.eval(&xv, &mut buf);
        h += dot(&j[k * m..(k + 1) * m], &buf);
    }
    h
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
