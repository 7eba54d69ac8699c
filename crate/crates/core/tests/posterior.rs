use drifter_uq::analysis::{posterior_mean_field, variance_grid, GridSpec};
use drifter_uq::pcn::{run_chain, Adaptation, ChainConfig, NoData, Potential, SampleStore};
use drifter_uq::spectral::{PriorParams, WhiteningMap};
use drifter_uq::Point2;
use std::f64::consts::PI;

fn prior_chain(prior: &PriorParams, seed: u64) -> SampleStore {
    let cfg = ChainConfig {
        n_steps: 30_000,
        burn_in: 5_000,
        thin: 5,
        seed,
        ..Default::default()
    };
    run_chain(&NoData { dim: prior.dim() }, &cfg).unwrap()
}

#[test]
fn prior_chain_variance_matches_closed_form() {
    let prior = PriorParams::default();
    let map = WhiteningMap::new(&prior).unwrap();
    let store = prior_chain(&prior, 11);
    let grid = GridSpec { nx: 4, ny: 4, ..Default::default() };
    let var = variance_grid(&store, &map, &grid).unwrap();
    let (expected, _) = prior.velocity_variance();
    for v in &var.values {
        assert!((v / expected - 1.0).abs() < 0.10, "{v} vs {expected}");
    }
}

#[test]
fn prior_chain_mean_is_near_zero() {
    let prior = PriorParams::default();
    let map = WhiteningMap::new(&prior).unwrap();
    let store = prior_chain(&prior, 12);
    let mean = map.encode(&posterior_mean_field(&store, &map).unwrap()).unwrap();
    // Prior samples are independent once the step size has adapted to 1.
    assert_eq!(store.beta_final, 1.0);
    let se = 1.0 / (store.n_kept() as f64).sqrt();
    for (i, m) in mean.0.iter().enumerate() {
        assert!(m.abs() <= 3.0 * se, "coordinate {i}: {m} vs 3 se {}", 3.0 * se);
    }
}

#[test]
fn variance_grid_ignores_sample_order() {
    let prior = PriorParams { n: 4, ..Default::default() };
    let map = WhiteningMap::new(&prior).unwrap();
    let store = prior_chain(&prior, 13);
    let mut reversed = store.clone();
    let dim = store.dim;
    reversed.samples = store.samples.chunks(dim).rev().flatten().copied().collect();
    let grid = GridSpec { nx: 8, ny: 4, ..Default::default() };
    let a = variance_grid(&store, &map, &grid).unwrap();
    let b = variance_grid(&reversed, &map, &grid).unwrap();
    for (x, y) in a.values.iter().zip(&b.values) {
        assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-30));
    }
}

#[test]
fn mean_field_commutes_with_velocity() {
    let prior = PriorParams { n: 4, ..Default::default() };
    let map = WhiteningMap::new(&prior).unwrap();
    let store = prior_chain(&prior, 14);
    let mean = posterior_mean_field(&store, &map).unwrap();
    for p in [Point2::new(0.1, 0.2), Point2::new(0.77, 0.41), Point2::new(0.5, 0.05)] {
        let n = store.n_kept() as f64;
        let (mut u, mut v) = (0.0, 0.0);
        for s in store.iter() {
            let w = map.decode(s).unwrap().eval_velocity(p);
            u += w.x / n;
            v += w.y / n;
        }
        let w = mean.eval_velocity(p);
        assert!((w.x - u).abs() < 1e-12 && (w.y - v).abs() < 1e-12);
    }
}

/// A bent two-dimensional target: `u0 + 0.5 u1^2` observed as 1 with noise 0.4.
struct Banana;

impl Potential for Banana {
    fn dim(&self) -> usize {
        2
    }
    fn potential(&self, u: &[f64]) -> f64 {
        (u[0] + 0.5 * u[1] * u[1] - 1.0).powi(2) / (2.0 * 0.4 * 0.4)
    }
}

#[test]
fn chain_matches_quadrature_in_total_variation() {
    let (lo, hi, bins) = (-4.0, 4.0, 20usize);
    let width = (hi - lo) / bins as f64;
    let bin = |x: f64| ((x - lo) / width).floor();

    // Reference: midpoint quadrature of exp(-Phi) times the standard normal
    // density, 10x10 sub-cells per histogram bin.
    let sub = 10;
    let h = width / sub as f64;
    let mut exact = vec![0.0; bins * bins];
    for i in 0..bins * sub {
        for j in 0..bins * sub {
            let u = [lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h];
            let w = (-Banana.potential(&u) - 0.5 * (u[0] * u[0] + u[1] * u[1])).exp() / (2.0 * PI);
            exact[(i / sub) * bins + j / sub] += w * h * h;
        }
    }
    let total: f64 = exact.iter().sum();
    exact.iter_mut().for_each(|p| *p /= total);

    let cfg = ChainConfig {
        n_steps: 1_000_000,
        burn_in: 10_000,
        thin: 1,
        beta: 0.6,
        adapt: Adaptation { enabled: false, ..Default::default() },
        seed: 99,
    };
    let store = run_chain(&Banana, &cfg).unwrap();
    let mut hist = vec![0.0; bins * bins];
    let mut inside = 0.0;
    for s in store.iter() {
        let (a, b) = (bin(s[0]), bin(s[1]));
        if (0.0..bins as f64).contains(&a) && (0.0..bins as f64).contains(&b) {
            hist[a as usize * bins + b as usize] += 1.0;
            inside += 1.0;
        }
    }
    let n = store.n_kept() as f64;
    let tv = 0.5
        * hist
            .iter()
            .zip(&exact)
            .map(|(c, p)| (c / n - p).abs())
            .sum::<f64>()
        + 0.5 * (n - inside) / n;
    assert!(tv <= 0.05, "total variation {tv}, acceptance {}", store.acceptance_rate());
}
