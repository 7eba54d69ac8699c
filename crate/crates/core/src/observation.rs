//! Forward operator, synthetic observations and the Gaussian misfit potential.
//!
//! A candidate initial velocity `v0` evolves under the known time dependence
//! `v(x, t) = v0(x) + eps (perp_grad psi1(x, t) - perp_grad psi1(x, 0))`; the
//! forward operator advects the drifter through it (with the same control as
//! the truth run) and returns the positions at the observation times.
use crate::drifter::{
    simulate_first_half, simulate_two_phase, two_phase_positions, ControlRecord, ControlSpec, Schedule,
    Trajectory,
};
use crate::geom::{Point2, Vec2};
use crate::pcn::Potential;
use crate::spectral::{SpectralField, WhiteningMap};
use crate::torus_flow::{self, FlowParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const OBSERVATION_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ObservationError {
    #[error("observation count mismatch: data has {data}, model produces {model}")]
    CountMismatch { data: usize, model: usize },
    #[error("noise level must be positive, got {0}")]
    BadSigma(f64),
    #[error("unsupported observation format version {0}")]
    Version(u32),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Everything the forward operator needs besides the candidate field.
#[derive(Debug, Clone)]
pub struct ForwardConfig {
    pub schedule: Schedule,
    pub control: ControlSpec,
    pub x0: Point2,
    pub eps: f64,
}

/// Which observations enter the potential.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Full,
    /// Only `y_1 .. y_{K/2}`, taken before the control switches on.
    FirstHalf,
}

/// Velocity of the model flow started from `v0`.
pub fn model_velocity(v0: &SpectralField, p: Point2, t: f64, eps: f64) -> Vec2 {
    let v = v0.eval_velocity(p);
    if eps == 0.0 || t == 0.0 {
        return v;
    }
    let w = torus_flow::perturbation_velocity(p, t) - torus_flow::perturbation_velocity(p, 0.0);
    Vec2::new(v.x + eps * w.x, v.y + eps * w.y)
}

/// Predicted positions at `t_1 .. t_K`.
pub fn forward(v0: &SpectralField, cfg: &ForwardConfig) -> Vec<Point2> {
    forward_window(v0, cfg, Window::Full)
}

pub fn forward_window(v0: &SpectralField, cfg: &ForwardConfig, window: Window) -> Vec<Point2> {
    let flow = |p: Point2, t: f64| model_velocity(v0, p, t, cfg.eps);
    let traj = match window {
        Window::Full => simulate_two_phase(&flow, &cfg.control, cfg.x0, &cfg.schedule),
        Window::FirstHalf => simulate_first_half(&flow, cfg.x0, &cfg.schedule),
    };
    traj.positions[1..].to_vec()
}

/// Seeds of the two independent noise realizations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSeeds {
    pub first: u64,
    pub second: u64,
}

impl NoiseSeeds {
    pub fn from_single(seed: u64) -> Self {
        Self {
            first: seed,
            second: crate::seeds::mix(seed, 0x5eed_2),
        }
    }
}

/// Noisy drifter positions plus the metadata that generated them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub format_version: u32,
    pub times: Vec<f64>,
    pub y: Vec<[f64; 2]>,
    pub sigma: f64,
    pub half_index: usize,
    pub control: ControlRecord,
    pub x0: [f64; 2],
    pub eps: f64,
    /// Seed of the noise on the uncontrolled half.
    pub seed: u64,
    /// Seed of the noise on the controlled half.
    pub seed_second: u64,
}

impl ObservationSet {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<(), ObservationError> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ObservationError> {
        let obs: ObservationSet = serde_json::from_slice(&std::fs::read(path)?)?;
        if obs.format_version != OBSERVATION_FORMAT_VERSION {
            return Err(ObservationError::Version(obs.format_version));
        }
        Ok(obs)
    }
}

fn noise(seed: u64, count: usize, sigma: f64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            [sigma * a, sigma * b]
        })
        .collect()
}

/// Identical-twin data: the truth drifter plus i.i.d. `N(0, sigma^2)` noise.
pub fn synthesize(
    truth: &FlowParams,
    cfg: &ForwardConfig,
    sigma: f64,
    seed: u64,
) -> Result<ObservationSet, ObservationError> {
    synthesize_with_truth(truth, cfg, sigma, NoiseSeeds::from_single(seed)).map(|(o, _)| o)
}

/// As [`synthesize`], with separate noise seeds per half, also returning the
/// noiseless truth trajectory (starting point included).
pub fn synthesize_with_truth(
    truth: &FlowParams,
    cfg: &ForwardConfig,
    sigma: f64,
    seeds: NoiseSeeds,
) -> Result<(ObservationSet, Trajectory), ObservationError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(ObservationError::BadSigma(sigma));
    }
    let flow = |p: Point2, t: f64| torus_flow::velocity(p, t, truth);
    let traj = simulate_two_phase(&flow, &cfg.control, cfg.x0, &cfg.schedule);
    let half = cfg.schedule.half_index();
    let k = cfg.schedule.k_obs();
    let mut eta = noise(seeds.first, half, sigma);
    eta.extend(noise(seeds.second, k - half, sigma));
    let y = traj.positions[1..]
        .iter()
        .zip(&eta)
        .map(|(p, e)| [p.x + e[0], p.y + e[1]])
        .collect();
    let obs = ObservationSet {
        format_version: OBSERVATION_FORMAT_VERSION,
        times: traj.times[1..].to_vec(),
        y,
        sigma,
        half_index: half,
        control: cfg.control.record(),
        x0: [cfg.x0.x, cfg.x0.y],
        eps: cfg.eps,
        seed: seeds.first,
        seed_second: seeds.second,
    };
    Ok((obs, traj))
}

/// `sum |G - y|^2 / (2 sigma^2)` over the window, on unwrapped coordinates.
pub fn misfit(predicted: &[Point2], obs: &ObservationSet, window: Window) -> Result<f64, ObservationError> {
    let used = match window {
        Window::Full => obs.len(),
        Window::FirstHalf => obs.half_index,
    };
    if predicted.len() != used || used > obs.len() {
        return Err(ObservationError::CountMismatch {
            data: used,
            model: predicted.len(),
        });
    }
    let ss: f64 = predicted
        .iter()
        .zip(&obs.y[..used])
        .map(|(p, y)| (p.x - y[0]).powi(2) + (p.y - y[1]).powi(2))
        .sum();
    Ok(ss / (2.0 * obs.sigma * obs.sigma))
}

/// Potential `Phi(v0)` on all observations.
pub fn potential(v0: &SpectralField, obs: &ObservationSet, cfg: &ForwardConfig) -> Result<f64, ObservationError> {
    potential_window(v0, obs, cfg, Window::Full)
}

pub fn potential_window(
    v0: &SpectralField,
    obs: &ObservationSet,
    cfg: &ForwardConfig,
    window: Window,
) -> Result<f64, ObservationError> {
    if obs.len() != cfg.schedule.k_obs() {
        return Err(ObservationError::CountMismatch {
            data: obs.len(),
            model: cfg.schedule.k_obs(),
        });
    }
    misfit(&forward_window(v0, cfg, window), obs, window)
}

/// The drifter-position potential as a function of whitened coordinates.
pub struct LagrangianPotential<'a> {
    map: WhiteningMap,
    obs: &'a ObservationSet,
    cfg: &'a ForwardConfig,
    window: Window,
}

impl<'a> LagrangianPotential<'a> {
    pub fn new(
        map: WhiteningMap,
        obs: &'a ObservationSet,
        cfg: &'a ForwardConfig,
        window: Window,
    ) -> Result<Self, ObservationError> {
        if obs.len() != cfg.schedule.k_obs() {
            return Err(ObservationError::CountMismatch {
                data: obs.len(),
                model: cfg.schedule.k_obs(),
            });
        }
        Ok(Self { map, obs, cfg, window })
    }
}

impl Potential for LagrangianPotential<'_> {
    fn dim(&self) -> usize {
        self.map.dim()
    }

    fn potential(&self, coords: &[f64]) -> f64 {
        self.potential_bounded(coords, f64::INFINITY)
    }

    fn potential_bounded(&self, coords: &[f64], bound: f64) -> f64 {
        let Ok(field) = self.map.decode(coords) else {
            return f64::INFINITY;
        };
        let used = match self.window {
            Window::Full => self.obs.len(),
            Window::FirstHalf => self.obs.half_index,
        };
        let flow = |p: Point2, t: f64| model_velocity(&field, p, t, self.cfg.eps);
        let denom = 2.0 * self.obs.sigma * self.obs.sigma;
        let stop = bound * denom;
        let mut ss = 0.0;
        let positions = two_phase_positions(&flow, &self.cfg.control, self.cfg.x0, &self.cfg.schedule);
        for (p, y) in positions.take(used).zip(&self.obs.y[..used]) {
            ss += (p.x - y[0]).powi(2) + (p.y - y[1]).powi(2);
            if !(ss < stop) {
                return f64::INFINITY;
            }
        }
        ss / denom
    }
}
