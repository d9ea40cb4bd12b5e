//! Orthogonalized Teugel basis for three small jump models, with a Monte
//! Carlo check that realized covariations match `δ_{pq} κ_p T`.
//!
//! ```bash
//! cargo run --release --example basis
//! ```

use teugel_smp::basis::realized_covariation;
use teugel_smp::levy::Atom;
use teugel_smp::pathsim::sample_path;
use teugel_smp::{BasisEvaluator, LevyModel, MomentTable, Result, TeugelBasis};

fn atoms(list: &[(&[f64], f64)]) -> Result<LevyModel> {
    LevyModel::atoms(
        list.iter()
            .map(|(p, r)| Atom {
                point: p.to_vec(),
                rate: *r,
            })
            .collect(),
    )
}

fn main() -> Result<()> {
    let models = [
        ("single atom", atoms(&[(&[1.0], 1.0)])?, 3),
        ("symmetric pair", atoms(&[(&[1.0], 0.5), (&[-1.0], 0.5)])?, 3),
        ("two axes", atoms(&[(&[1.0, 0.0], 1.0), (&[0.0, 1.0], 1.0)])?, 2),
    ];
    for (name, model, degree) in models {
        let moments = MomentTable::build(&model, 2 * degree)?;
        let basis = TeugelBasis::build(&model, &moments, degree, 1e-10)?;
        let eval = BasisEvaluator::new(&basis, &moments)?;
        println!("{name}: {} indices up to degree {degree}", basis.indices().len());
        for (pos, p) in basis.indices().iter().enumerate() {
            let lower: Vec<String> = basis
                .coefficients(pos)
                .iter()
                .map(|&(q, c)| format!("{c:+.4} Y{}", basis.indices()[q]))
                .collect();
            println!(
                "  H{p} = Y{p} {:<40} κ = {:.6}{}",
                lower.join(" "),
                basis.kappa(pos),
                if basis.is_degenerate(pos) { "  (degenerate)" } else { "" }
            );
        }

        let paths: Vec<_> = (0..20_000).map(|i| sample_path(&model, 1.0, 1, 42, i)).collect::<Result<_>>()?;
        let idx = basis.indices();
        let mut worst = 0.0f64;
        for (i, p) in idx.iter().enumerate() {
            for (j, q) in idx.iter().enumerate().skip(i) {
                let est = realized_covariation(&paths, &eval, p, q)?;
                let want = if i == j { basis.kappa(i) } else { 0.0 };
                if est.stderr > 0.0 {
                    worst = worst.max((est.mean - want).abs() / est.stderr);
                }
            }
        }
        println!("  largest covariation deviation: {worst:.2} s.e.\n");
    }
    Ok(())
}
