use drifter_uq::analysis::{norms, GridSpec, VarianceGrid};
use drifter_uq::drifter::{simulate_two_phase, ControlSpec, Schedule};
use drifter_uq::pcn::{accept_prob, propose};
use drifter_uq::spectral::{PriorParams, WhiteningMap};
use drifter_uq::torus_flow::{stream_function, velocity, FlowParams};
use drifter_uq::{Point2, Vec2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn coords(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, dim)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn whitening_round_trips(u in coords(PriorParams { n: 4, ..Default::default() }.dim())) {
        let prior = PriorParams { n: 4, ..Default::default() };
        let map = WhiteningMap::new(&prior).unwrap();
        let back = map.encode(&map.decode(&u).unwrap()).unwrap();
        for (a, b) in u.iter().zip(&back.0) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn decoded_fields_are_periodic_and_divergence_free(
        u in coords(PriorParams { n: 3, ..Default::default() }.dim()),
        x in 0.0f64..1.0,
        y in 0.0f64..1.0,
        shift in -3i32..3,
    ) {
        let prior = PriorParams { n: 3, ..Default::default() };
        let field = WhiteningMap::new(&prior).unwrap().decode(&u).unwrap();
        let p = Point2::new(x, y);
        let q = Point2::new(x + shift as f64, y - shift as f64);
        let (a, b) = (field.eval(p), field.eval(q));
        prop_assert!((a.psi - b.psi).abs() < 1e-12);
        prop_assert!((a.grad - b.grad).norm() < 1e-10);
        let h = 1e-5;
        let v = |q: Point2| field.eval_velocity(q);
        let div = (v(Point2::new(x + h, y)).x - v(Point2::new(x - h, y)).x
            + v(Point2::new(x, y + h)).y - v(Point2::new(x, y - h)).y) / (2.0 * h);
        prop_assert!(div.abs() < 1e-6);
    }

    #[test]
    fn truth_velocity_is_periodic(x in 0.0f64..1.0, y in 0.0f64..1.0, t in 0.0f64..4.0, kx in -2i32..2, ky in -2i32..2) {
        let params = FlowParams { eps: 0.1, ..Default::default() };
        let a = velocity(Point2::new(x, y), t, &params);
        let b = velocity(Point2::new(x + kx as f64, y + ky as f64), t + 2.0, &params);
        prop_assert!((a - b).norm() < 1e-11);
    }

    #[test]
    fn proposals_interpolate(u in coords(12), beta in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = propose(&u, beta, &mut rng);
        prop_assert_eq!(v.len(), u.len());
        prop_assert!(v.iter().all(|x| x.is_finite()));
        if beta == 0.0 {
            prop_assert_eq!(v, u);
        }
    }

    #[test]
    fn acceptance_is_a_probability(a in -1e3f64..1e3, b in -1e3f64..1e3) {
        let p = accept_prob(a, b);
        prop_assert!((0.0..=1.0).contains(&p));
        if b <= a {
            prop_assert_eq!(p, 1.0);
        }
    }

    #[test]
    fn norm_bounds_and_homogeneity(values in prop::collection::vec(0.0f64..5.0, 32), scale in 0.0f64..10.0) {
        let grid = GridSpec { nx: 8, ny: 4, ..Default::default() };
        let g = VarianceGrid { grid, values: values.clone() };
        let n = norms(&g);
        prop_assert!(n.l1 <= grid.area() * n.max + 1e-12);
        prop_assert!(n.l2 <= (n.max * n.l1).sqrt() + 1e-12);
        prop_assert!(n.min <= n.max);
        let scaled = norms(&VarianceGrid { grid, values: values.iter().map(|v| v * scale).collect() });
        prop_assert!((scaled.l2 - scale * n.l2).abs() <= 1e-9 * (1.0 + scale * n.l2));
        prop_assert!((scaled.max - scale * n.max).abs() <= 1e-12 * (1.0 + scale * n.max));
    }

    #[test]
    fn zonal_control_in_still_water_is_a_straight_line(zeta in 0.0f64..3.0, x in 0.0f64..1.0, y in 0.0f64..1.0) {
        let sched = Schedule::new(4, 0.25, 0.05).unwrap();
        let still = |_: Point2, _: f64| Vec2::ZERO;
        let x0 = Point2::new(x, y);
        let traj = simulate_two_phase(&still, &ControlSpec::zonal(zeta).unwrap(), x0, &sched);
        for (t, p) in traj.times.iter().zip(&traj.positions) {
            let moved = (t - sched.t_half()).max(0.0) * zeta;
            prop_assert!((p.x - x0.x - moved).abs() < 1e-12);
            prop_assert_eq!(p.y, x0.y);
        }
    }

    #[test]
    fn steady_orbits_keep_their_streamline(x in 0.2f64..0.3, y in 0.12f64..0.2) {
        let params = FlowParams::default();
        let flow = |p: Point2, t: f64| velocity(p, t, &params);
        let sched = Schedule::new(2, 0.5, 1e-3).unwrap();
        let x0 = Point2::new(x, y);
        let traj = simulate_two_phase(&flow, &ControlSpec::none(), x0, &sched);
        let psi0 = stream_function(x0, 0.0, &params);
        for p in &traj.positions {
            prop_assert!((stream_function(*p, 0.0, &params) - psi0).abs() < 1e-8);
        }
    }
}
