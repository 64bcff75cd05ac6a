use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use polyspline::checkpoint;
use polyspline::experiment::ExperimentSpec;
use polyspline::gating::{pou_values, GatingInit, GatingWeights};
use polyspline::knots::{eval_b1_basis, knots_from_logits};
use polyspline::model::{ModelConfig, PolySplineModel};
use polyspline::quadrature::{gauss_legendre_unit, integrate_closed_form, integrate_functional, Integrand};

fn model(dim: usize, n: usize, cells: usize, degree: usize, seed: u64, coeffs: &[f64]) -> PolySplineModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = ModelConfig::new(dim, n, cells, degree);
    cfg.knot_noise = 0.5;
    cfg.gating_init = GatingInit::Random { std: 1.0 };
    let mut m = PolySplineModel::new(&cfg, &mut rng).unwrap();
    let c: Vec<f64> = (0..m.n_coeffs()).map(|i| coeffs[i % coeffs.len()]).collect();
    m.set_coeffs(&c).unwrap();
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn knots_are_strictly_increasing(logits in prop::collection::vec(-6.0f64..6.0, 1..40), lo in -2.0f64..0.0, width in 0.5f64..3.0) {
        let hi = lo + width;
        let t = knots_from_logits(&logits, lo, hi).unwrap();
        prop_assert_eq!(t.len(), logits.len() + 1);
        prop_assert_eq!(t[0], lo);
        prop_assert_eq!(*t.last().unwrap(), hi);
        prop_assert!(t.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn hats_sum_to_one_and_slopes_to_zero(logits in prop::collection::vec(-2.0f64..2.0, 1..20), xs in prop::collection::vec(0.0f64..=1.0, 1..30)) {
        let t = knots_from_logits(&logits, 0.0, 1.0).unwrap();
        let ev = eval_b1_basis(&t, &xs).unwrap();
        for i in 0..xs.len() {
            prop_assert!((ev.values.row(i).sum() - 1.0).abs() <= 1e-14);
            let scale = ev.derivs.row(i).amax();
            prop_assert!(ev.derivs.row(i).sum().abs() <= 1e-14 * scale.max(1.0));
            prop_assert!(ev.values.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn gated_partition_of_unity(cells in 1usize..6, n in 2usize..10, seed in any::<u64>(), xs in prop::collection::vec(0.0f64..=1.0, 1..20)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = GatingWeights::init(cells, n + 1, None, GatingInit::Random { std: 2.0 }, &mut rng).unwrap();
        let t: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
        let ev = eval_b1_basis(&t, &xs).unwrap();
        let phi: DMatrix<f64> = pou_values(&g, &ev.values).unwrap();
        for i in 0..xs.len() {
            prop_assert!((phi.row(i).sum() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn gauss_rule_integrates_monomials_exactly(n in 1usize..16, k in 0usize..31) {
        prop_assume!(k < 2 * n);
        let (x, w) = gauss_legendre_unit(n);
        let got: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k as i32)).sum();
        prop_assert!((got - 1.0 / (k as f64 + 1.0)).abs() <= 1e-13);
    }

    #[test]
    fn closed_form_matches_quadrature(n in 1usize..8, cells in 1usize..5, degree in 0usize..7, seed in any::<u64>(),
                                      coeffs in prop::collection::vec(-1.0f64..1.0, 1..8)) {
        let m = model(1, n, cells, degree, seed, &coeffs);
        prop_assert!(integrate_closed_form(&model(2, n, cells, degree, seed, &coeffs), Integrand::Value).is_err());
        let which = |k: usize| match k {
            0 => Integrand::Value,
            1 => Integrand::Square,
            _ => Integrand::GradSquare,
        };
        for k in 0..3 {
            let exact = integrate_closed_form(&m, which(k)).unwrap();
            let quad = integrate_functional(&m, which(k), None).unwrap();
            let scale = exact.abs().max(quad.abs()).max(1e-3);
            prop_assert!((exact - quad).abs() <= 1e-11 * scale, "{exact} vs {quad}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(dim in 1usize..3, n in 1usize..7, cells in 1usize..5, degree in 0usize..4, seed in any::<u64>(),
                                          coeffs in prop::collection::vec(-1e6f64..1e6, 1..8)) {
        let m = model(dim, n, cells, degree, seed, &coeffs);
        let back = checkpoint::from_json(&checkpoint::to_json(&m).unwrap()).unwrap();
        let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
        prop_assert_eq!(bits(back.params()), bits(m.params()));
        prop_assert_eq!(bits(back.coeffs.clone()), bits(m.coeffs.clone()));
    }

    #[test]
    fn runs_never_exceed_cell_bound(splines in prop::collection::vec(1usize..40, 1..4), fixed in 1usize..50) {
        let text = format!(
            "problem = \"p1-sine\"\ndegrees = [0]\nsplines = {splines:?}\ncells = [\"pow2\", \"splines+1\", {fixed}]\nout = \"x\"\n"
        );
        let spec = ExperimentSpec::from_toml(&text).unwrap();
        for (_, n, c) in spec.runs().unwrap() {
            prop_assert!(c >= 1 && c <= n + 1);
        }
    }
}
