//! Gauss-Legendre rules and tensor products of them.

use std::f64::consts::PI;

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`.
///
/// Exact for polynomials of degree `2n - 1`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess, refined by Newton on P_n.
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Rule mapped to `[lo, hi]`.
pub fn gauss_legendre_on(n: usize, lo: f64, hi: f64) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(n);
    let half = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    (
        x.iter().map(|&t| mid + half * t).collect(),
        w.iter().map(|&wi| wi * half).collect(),
    )
}

/// Tensor product of 1D rules: returns flattened points (row-major, `dim` per point) and weights.
pub fn tensor_rule(axes: &[(Vec<f64>, Vec<f64>)]) -> (Vec<f64>, Vec<f64>) {
    let dim = axes.len();
    let total: usize = axes.iter().map(|(x, _)| x.len()).product();
    let mut points = Vec::with_capacity(total * dim);
    let mut weights = Vec::with_capacity(total);
    let mut idx = vec![0usize; dim];
    for _ in 0..total {
        let mut w = 1.0;
        for (a, &i) in idx.iter().enumerate() {
            points.push(axes[a].0[i]);
            w *= axes[a].1[i];
        }
        weights.push(w);
        for a in (0..dim).rev() {
            idx[a] += 1;
            if idx[a] < axes[a].0.len() {
                break;
            }
            idx[a] = 0;
        }
    }
    (points, weights)
}

/// Composite rule on `[lo, hi]` with forced break points, `pieces` panels between
/// consecutive breaks and `order` nodes per panel.
pub fn composite_on(lo: f64, hi: f64, breaks: &[f64], pieces: usize, order: usize) -> (Vec<f64>, Vec<f64>) {
    let mut cuts: Vec<f64> = std::iter::once(lo)
        .chain(breaks.iter().copied().filter(|&b| b > lo && b < hi))
        .chain(std::iter::once(hi))
        .collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut xs = Vec::new();
    let mut ws = Vec::new();
    for w in cuts.windows(2) {
        let h = (w[1] - w[0]) / pieces as f64;
        for k in 0..pieces {
            let a = w[0] + k as f64 * h;
            let (x, wt) = gauss_legendre_on(order, a, a + h);
            xs.extend(x);
            ws.extend(wt);
        }
    }
    (xs, ws)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrates_polynomials_exactly() {
        for n in 1..=12 {
            let (x, w) = gauss_legendre(n);
            for deg in 0..(2 * n) {
                let approx: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                assert!((approx - exact).abs() < 1e-13, "n={n} deg={deg}: {approx} vs {exact}");
            }
        }
    }

    #[test]
    fn tensor_rule_area() {
        let ax = gauss_legendre_on(3, 0.0, 2.0);
        let ay = gauss_legendre_on(4, -1.0, 1.0);
        let (p, w) = tensor_rule(&[ax, ay]);
        assert_eq!(p.len(), 24);
        let area: f64 = w.iter().sum();
        assert!((area - 4.0).abs() < 1e-14);
        // integral of x*y^2 over [0,2]x[-1,1] = 2 * 2/3
        let val: f64 = p.chunks(2).zip(&w).map(|(q, wi)| wi * q[0] * q[1] * q[1]).sum();
        assert!((val - 4.0 / 3.0).abs() < 1e-13);
    }
}
