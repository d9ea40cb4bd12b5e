use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teugel_smp::basis::gram_matrix;
use teugel_smp::config::ExperimentConfig;
use teugel_smp::levy::Atom;
use teugel_smp::multiindex::enumerate_multiindices;
use teugel_smp::poly::{Poly, SmoothFn};
use teugel_smp::{LevyModel, MomentTable, TeugelBasis};

/// Random polynomial in 3 variables of degree <= 3, differentiated in the last two.
fn random_fn(rng: &mut ChaCha8Rng) -> SmoothFn {
    let mut terms: Vec<(Vec<u32>, f64)> = Vec::new();
    for p in enumerate_multiindices(3, 3).into_iter().chain(std::iter::once(teugel_smp::MultiIndex::zero(3))) {
        if rng.random_bool(0.6) {
            terms.push((p.exponents().to_vec(), rng.random_range(-2.0..2.0)));
        }
    }
    let refs: Vec<(&[u32], f64)> = terms.iter().map(|(e, c)| (e.as_slice(), *c)).collect();
    SmoothFn::new(Poly::from_terms(3, &refs), 3, 1, 2)
}

#[test]
fn cached_derivatives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let h = 1e-5;
    for _ in 0..20 {
        let f = random_fn(&mut rng);
        for _ in 0..100 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
            let mut g = [0.0; 2];
            let mut hs = [0.0; 4];
            f.grad(&x, &mut g);
            f.hess(&x, &mut hs);
            for i in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[1 + i] += h;
                xm[1 + i] -= h;
                let fd = (f.eval(&xp) - f.eval(&xm)) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-6 * (1.0 + g[i].abs()), "grad {i}: {fd} vs {}", g[i]);
                let mut gp = [0.0; 2];
                let mut gm = [0.0; 2];
                f.grad(&xp, &mut gp);
                f.grad(&xm, &mut gm);
                for j in 0..2 {
                    let fd = (gp[j] - gm[j]) / (2.0 * h);
                    let want = hs[j * 2 + i];
                    assert!((fd - want).abs() < 1e-6 * (1.0 + want.abs()), "hess {i}{j}: {fd} vs {want}");
                }
            }
        }
    }
}

fn atom_strategy(dim: usize) -> impl Strategy<Value = Vec<(Vec<f64>, f64)>> {
    prop::collection::vec(
        (prop::collection::vec(-2.0f64..2.0, dim), 0.1f64..2.0),
        1..5,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn orthogonalized_basis_is_diagonal_in_the_bracket(atoms in atom_strategy(2)) {
        let atoms: Vec<Atom> = atoms
            .into_iter()
            .filter(|(p, _)| p.iter().any(|v| v.abs() > 1e-3))
            .map(|(point, rate)| Atom { point, rate })
            .collect();
        prop_assume!(!atoms.is_empty());
        let model = LevyModel::atoms(atoms).unwrap();
        let moments = MomentTable::build(&model, 4).unwrap();
        let basis = TeugelBasis::build(&model, &moments, 2, 1e-10).unwrap();
        let idx = basis.indices().to_vec();
        let gram = gram_matrix(&moments, &model, &idx).unwrap();
        let scale = (0..idx.len()).map(|i| gram.get(i, i)).fold(0.0f64, f64::max);
        for a in 0..idx.len() {
            let ca = basis.dense_coefficients(a);
            for b in 0..idx.len() {
                let cb = basis.dense_coefficients(b);
                let mut v = 0.0;
                for i in 0..idx.len() {
                    for j in 0..idx.len() {
                        v += ca[i] * gram.get(i, j) * cb[j];
                    }
                }
                let want = if a == b && !basis.is_degenerate(a) { basis.kappa(a) } else { 0.0 };
                if basis.is_degenerate(a) || basis.is_degenerate(b) {
                    prop_assert!(v.abs() <= 1e-8 * scale.max(1.0), "{a} {b} {v}");
                } else {
                    prop_assert!((v - want).abs() <= 1e-8 * scale.max(1.0), "{a} {b} {v} {want}");
                }
            }
        }
    }

    #[test]
    fn config_normalization_is_a_fixed_point(paths in 2usize..100_000, grid in 1usize..400, seed in any::<u64>(), name in 0usize..3) {
        let mut cfg = ExperimentConfig::example(teugel_smp::config::EXAMPLES[name]).unwrap();
        cfg.monte_carlo.paths = paths;
        cfg.monte_carlo.grid = grid;
        cfg.monte_carlo.seed = seed;
        let text = cfg.normalized();
        let back = ExperimentConfig::from_json(&text).unwrap();
        prop_assert_eq!(&back.normalized(), &text);
        prop_assert_eq!(back.digest(), cfg.digest());
    }
}
