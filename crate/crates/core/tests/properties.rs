use insens_core::audit::{carleman_sides, draw_sample, SampleSettings};
use insens_core::cascade::{insensitivity_derivative_adjoint, sentinel_value, transposition_sides};
use insens_core::control::{control_weight, ControlMap, ControlSpec};
use insens_core::sampling::{stream_rng, ModeBasis};
use insens_core::weights::WeightParams;
use insens_core::{indicator_mask, l2_inner, l2_norm, Complex64, Grid, Propagator, ZeroSource};
use proptest::prelude::*;

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 16,
        ..ProptestConfig::default()
    }
}

fn grid_strategy() -> impl Strategy<Value = Grid> {
    (12usize..40, 8usize..48, 0.5f64..2.0, 0.2f64..1.5)
        .prop_map(|(n, m, l, t)| Grid::new(l, n, t, m).unwrap())
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn free_flow_is_unitary(g in grid_strategy(), seed in any::<u64>()) {
        let p = Propagator::new(&g).unwrap();
        let u0 = ModeBasis::new(&g).random_unit(&mut stream_rng(seed, 0));
        for n in p.solve_forward(&u0, &ZeroSource).unwrap().norms() {
            prop_assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_sweep_undoes_forward_sweep(g in grid_strategy(), seed in any::<u64>()) {
        let p = Propagator::new(&g).unwrap();
        let basis = ModeBasis::new(&g);
        let mut rng = stream_rng(seed, 1);
        let u0 = basis.random_unit(&mut rng);
        let f = basis.random_source(&mut rng, 1.0);
        let fwd = p.solve_forward(&u0, &f).unwrap();
        let back = p.solve_backward(fwd.last(), &f).unwrap();
        let diff: Vec<Complex64> = back.first().iter().zip(u0.iter()).map(|(a, b)| a - b).collect();
        prop_assert!(l2_norm(&g, &diff).unwrap() < 1e-10);
    }

    #[test]
    fn transposition_identity(g in grid_strategy(), seed in any::<u64>(), a in 0.05f64..0.45, w in 0.2f64..0.5) {
        let p = Propagator::new(&g).unwrap();
        let basis = ModeBasis::new(&g);
        let obs = indicator_mask(&g, a * g.length(), (a + w) * g.length()).unwrap();
        let mut rng = stream_rng(seed, 2);
        let (f0, f1, g1) = (basis.random_source(&mut rng, 1.0), basis.random_source(&mut rng, 1.0), basis.random_source(&mut rng, 1.0));
        let (l, r) = transposition_sides(&p, &f0, &f1, &g1, &obs).unwrap();
        prop_assert!((l - r).abs() <= 1e-9 * l.abs().max(r.abs()).max(1e-300));
    }

    #[test]
    fn control_map_adjoint_identity_and_support(g in grid_strategy(), seed in any::<u64>()) {
        let p = Propagator::new(&g).unwrap();
        let basis = ModeBasis::new(&g);
        let omega = indicator_mask(&g, 0.1 * g.length(), 0.5 * g.length()).unwrap();
        let obs = indicator_mask(&g, 0.3 * g.length(), 0.8 * g.length()).unwrap();
        let map = ControlMap::new(&p, &omega, &obs).unwrap();
        let mut rng = stream_rng(seed, 3);
        let h = basis.random_source(&mut rng, 1.0);
        let q = basis.random_unit(&mut rng);
        let star = map.adjoint(&q).unwrap();
        prop_assert!(star.supported_in(&omega));
        let lhs = l2_inner(&g, &map.apply(&h).unwrap(), &q).unwrap();
        prop_assert!((lhs - h.inner(&star)).norm() <= 1e-10 * h.norm());
    }

    #[test]
    fn gramian_is_coercive(g in grid_strategy(), seed in any::<u64>(), log_eps in -8.0f64..0.0) {
        let p = Propagator::new(&g).unwrap();
        let eps = 10f64.powf(log_eps);
        let omega = indicator_mask(&g, 0.1 * g.length(), 0.5 * g.length()).unwrap();
        let obs = indicator_mask(&g, 0.3 * g.length(), 0.8 * g.length()).unwrap();
        let map = ControlMap::new(&p, &omega, &obs).unwrap();
        let weight = control_weight(&g, &ControlSpec::plain(eps)).unwrap();
        let a = ModeBasis::new(&g).random_unit(&mut stream_rng(seed, 4));
        let la = map.gramian(&a, &weight, eps).unwrap();
        prop_assert!(l2_inner(&g, &la, &a).unwrap().re >= eps * (1.0 - 1e-10));
    }

    #[test]
    fn sentinel_is_quadratic(g in grid_strategy(), seed in any::<u64>(), re in -3.0f64..3.0, im in -3.0f64..3.0) {
        let p = Propagator::new(&g).unwrap();
        let obs = indicator_mask(&g, 0.2 * g.length(), 0.7 * g.length()).unwrap();
        let u = p.solve_forward(&ModeBasis::new(&g).random_unit(&mut stream_rng(seed, 5)), &ZeroSource).unwrap();
        let c = Complex64::new(re, im);
        let scaled = u.map_snapshots(|s| s.scaled(c));
        let (j, js) = (sentinel_value(&u, &obs), sentinel_value(&scaled, &obs));
        prop_assert!(j >= 0.0);
        prop_assert!((js - c.norm_sqr() * j).abs() <= 1e-12 * js.max(1e-300));
    }

    #[test]
    fn derivative_obeys_cauchy_schwarz(g in grid_strategy(), seed in any::<u64>()) {
        let basis = ModeBasis::new(&g);
        let mut rng = stream_rng(seed, 6);
        let v0 = basis.random_low_mode(&mut rng);
        let d = basis.random_unit(&mut rng);
        let dj = insensitivity_derivative_adjoint(&g, &d, &v0).unwrap();
        prop_assert!(dj.abs() <= l2_norm(&g, &v0).unwrap() * (1.0 + 1e-12));
    }

    #[test]
    fn carleman_ratio_is_scale_invariant(seed in any::<u64>(), re in -4.0f64..4.0, im in 0.1f64..4.0) {
        let g = Grid::new(1.0, 24, 1.0, 32).unwrap();
        let p = Propagator::new(&g).unwrap();
        let omega = indicator_mask(&g, 0.2, 0.5).unwrap();
        let obs = indicator_mask(&g, 0.35, 0.65).unwrap();
        let w = WeightParams::with_defaults(16.0, &g).unwrap();
        let settings = SampleSettings { samples: 1, seed, source_amplitude: 0.3 };
        let (sol, g0, g1) = draw_sample(&p, &ModeBasis::new(&g), &obs, &settings, 0).unwrap();
        let r = carleman_sides(&sol, &g0, &g1, &w, &omega).unwrap();
        let c = Complex64::new(re, im);
        let scaled = insens_core::cascade::AdjointSolution { psi: sol.psi.map_snapshots(|s| s.scaled(c)), phi: sol.phi.map_snapshots(|s| s.scaled(c)) };
        let s = carleman_sides(&scaled, &g0.scaled(c), &g1.scaled(c), &w, &omega).unwrap();
        prop_assert!(r.terms_are_valid() && s.terms_are_valid());
        prop_assert!((s.log_ratio - r.log_ratio).abs() <= 1e-12);
    }
}
