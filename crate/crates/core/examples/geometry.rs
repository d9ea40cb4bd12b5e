//! Terminal-constraint geometry: the distance function to
//! `(-∞, J* - ε] × Q`, its mollification, and the support-function tests
//! for transversality and nontriviality.
//!
//! ```bash
//! cargo run --release --example geometry
//! ```

use teugel_smp::smp::geometry::{distance_phi, mollify_psi, nontriviality, transversality, ConstraintSet, Mollifier};
use teugel_smp::Result;

fn main() -> Result<()> {
    let q = ConstraintSet::Ball {
        center: vec![0.0, 0.0],
        radius: 1.0,
    };
    let (j_star, eps) = (1.0, 0.1);
    for (s, z) in [(1.5, [0.0, 0.0]), (0.5, [2.0, 0.0]), (2.0, [1.0, 1.0])] {
        let phi = distance_phi(s, &z, eps, j_star, &q);
        let g2 = phi.grad_s * phi.grad_s + phi.grad_z.iter().map(|g| g * g).sum::<f64>();
        println!("Φ({s}, {z:?}) = {:.4}, |∇Φ|² = {g2:.12}, Φ_s = {:.4}", phi.value, phi.grad_s);
    }

    let rule = Mollifier::new(2, 6)?;
    for delta in [0.1, 0.01] {
        let psi = mollify_psi(j_star - eps, &[0.0, 0.0], eps, delta, j_star, &q, &rule)?;
        println!("Ψ at a point of the target set, δ = {delta}: {psi:.5} (bound ε + √2 δ = {:.5})", eps + 2f64.sqrt() * delta);
    }

    let boxed = ConstraintSet::Box {
        lo: vec![0.0],
        hi: vec![1.0],
    };
    for (mu, eg) in [(-1.0, 0.0), (1.0, 1.0), (1.0, 0.5)] {
        let v = transversality(&[mu], &[eg], &boxed, 1e-12);
        println!("box [0, 1], μ = {mu:+}, EG = {eg}: sup <μ, z - EG> = {:+.2}, holds = {}", v.worst, v.holds);
    }
    let s = 0.5f64.sqrt();
    println!("nontriviality (√½, √½): {}, (0, 0): {}", nontriviality(s, &[s]), nontriviality(0.0, &[0.0]));
    Ok(())
}
