//! Preconditioned Crank-Nicolson Metropolis-Hastings in whitened coordinates.
//!
//! The target is `exp(-Phi(u))` against a standard-normal reference measure.
//! Proposals `u' = sqrt(1 - beta^2) u + beta w` leave the reference measure
//! invariant, so the acceptance ratio only involves the potential.
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const STORE_MAGIC: &[u8; 8] = b"PCNSTORE";
pub const STORE_FORMAT_VERSION: u32 = 1;

/// Negative log-likelihood as a function of whitened coordinates.
pub trait Potential {
    fn dim(&self) -> usize;
    fn potential(&self, coords: &[f64]) -> f64;

    /// Like [`Potential::potential`], but once the value is known to reach
    /// `bound` an implementation may stop early and return `f64::INFINITY`.
    fn potential_bounded(&self, coords: &[f64], bound: f64) -> f64 {
        let _ = bound;
        self.potential(coords)
    }
}

impl<P: Potential + ?Sized> Potential for &P {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn potential(&self, coords: &[f64]) -> f64 {
        (**self).potential(coords)
    }
    fn potential_bounded(&self, coords: &[f64], bound: f64) -> f64 {
        (**self).potential_bounded(coords, bound)
    }
}

/// `Phi = 0`: the chain samples the prior.
#[derive(Debug, Clone, Copy)]
pub struct NoData {
    pub dim: usize,
}

impl Potential for NoData {
    fn dim(&self) -> usize {
        self.dim
    }
    fn potential(&self, _coords: &[f64]) -> f64 {
        0.0
    }
}

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("invalid chain configuration: {0}")]
    Config(String),
    #[error("initial state has non-finite potential")]
    NonFiniteStart,
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("malformed sample store: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Adaptation {
    pub enabled: bool,
    /// Acceptance rate the step size is steered toward during burn-in.
    pub target: f64,
    /// Steps between step-size updates.
    pub window: usize,
}

impl Default for Adaptation {
    fn default() -> Self {
        Self {
            enabled: true,
            target: 0.23,
            window: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub n_steps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub beta: f64,
    pub adapt: Adaptation,
    pub seed: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n_steps: 100_000,
            burn_in: 20_000,
            thin: 10,
            beta: 0.1,
            adapt: Adaptation::default(),
            seed: 0,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<(), ChainError> {
        if self.burn_in >= self.n_steps {
            return Err(ChainError::Config(format!(
                "burn-in {} must be shorter than the chain ({} steps)",
                self.burn_in, self.n_steps
            )));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(ChainError::Config(format!("beta must lie in (0, 1], got {}", self.beta)));
        }
        if self.thin == 0 {
            return Err(ChainError::Config("thin must be at least 1".into()));
        }
        if self.adapt.enabled && (self.adapt.window == 0 || !(0.0..1.0).contains(&self.adapt.target)) {
            return Err(ChainError::Config("bad adaptation settings".into()));
        }
        Ok(())
    }

    pub fn kept_count(&self) -> usize {
        (self.n_steps - self.burn_in) / self.thin
    }
}

/// pCN proposal written into `out`.
pub fn propose_into<R: Rng + ?Sized>(u: &[f64], beta: f64, rng: &mut R, out: &mut [f64]) {
    let keep = (1.0 - beta * beta).sqrt();
    for (o, &x) in out.iter_mut().zip(u) {
        let w: f64 = rng.sample(StandardNormal);
        *o = keep * x + beta * w;
    }
}

pub fn propose<R: Rng + ?Sized>(u: &[f64], beta: f64, rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; u.len()];
    propose_into(u, beta, rng, &mut out);
    out
}

/// `min(1, exp(phi_current - phi_proposed))`; zero for a non-finite proposal.
pub fn accept_prob(phi_current: f64, phi_proposed: f64) -> f64 {
    if !phi_proposed.is_finite() {
        return 0.0;
    }
    (phi_current - phi_proposed).exp().min(1.0)
}

/// Kept samples and chain statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStore {
    pub dim: usize,
    /// Kept states, row-major `[n_kept][dim]`.
    pub samples: Vec<f64>,
    pub accepted_total: usize,
    pub accepted_post_burn: usize,
    pub phi_trace: Vec<f64>,
    pub beta_final: f64,
    pub config: ChainConfig,
    /// Caller-supplied configuration snapshot stored alongside the samples.
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct StoreHeader {
    format_version: u32,
    dim: usize,
    n_kept: usize,
    phi_len: usize,
    acceptance_rate: f64,
    accepted_total: usize,
    accepted_post_burn: usize,
    beta_final: f64,
    seed: u64,
    config: ChainConfig,
    metadata: serde_json::Value,
}

impl SampleStore {
    pub fn n_kept(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.samples.len() / self.dim
        }
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.samples.chunks_exact(self.dim.max(1))
    }

    /// Acceptance rate after burn-in.
    pub fn acceptance_rate(&self) -> f64 {
        let post = self.config.n_steps - self.config.burn_in;
        if post == 0 {
            0.0
        } else {
            self.accepted_post_burn as f64 / post as f64
        }
    }

    /// Coordinate-wise mean of the kept samples.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for s in self.iter() {
            m.iter_mut().zip(s).for_each(|(a, x)| *a += x);
        }
        let n = self.n_kept().max(1) as f64;
        m.iter_mut().for_each(|a| *a /= n);
        m
    }

    /// Coordinate-wise unbiased sample variance.
    pub fn variance(&self) -> Vec<f64> {
        let m = self.mean();
        let mut v = vec![0.0; self.dim];
        for s in self.iter() {
            v.iter_mut().zip(s).zip(&m).for_each(|((a, x), mu)| *a += (x - mu).powi(2));
        }
        let d = (self.n_kept().max(2) - 1) as f64;
        v.iter_mut().for_each(|a| *a /= d);
        v
    }

    /// Binary layout: magic, `u32` version, `u64` header length, JSON header,
    /// then the kept samples and the potential trace as little-endian `f64`.
    pub fn write_to<W: Write>(&self, w: W) -> Result<(), ChainError> {
        let mut w = BufWriter::new(w);
        let header = StoreHeader {
            format_version: STORE_FORMAT_VERSION,
            dim: self.dim,
            n_kept: self.n_kept(),
            phi_len: self.phi_trace.len(),
            acceptance_rate: self.acceptance_rate(),
            accepted_total: self.accepted_total,
            accepted_post_burn: self.accepted_post_burn,
            beta_final: self.beta_final,
            seed: self.config.seed,
            config: self.config,
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| ChainError::Format(e.to_string()))?;
        w.write_all(STORE_MAGIC)?;
        w.write_all(&STORE_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for v in self.samples.iter().chain(&self.phi_trace) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, ChainError> {
        let mut r = BufReader::new(r);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != STORE_MAGIC {
            return Err(ChainError::Format("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != STORE_FORMAT_VERSION {
            return Err(ChainError::Format(format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let len = u64::from_le_bytes(b8) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let h: StoreHeader =
            serde_json::from_slice(&json).map_err(|e| ChainError::Format(e.to_string()))?;
        let mut read_f64s = |n: usize| -> Result<Vec<f64>, ChainError> {
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut b8)?;
                out.push(f64::from_le_bytes(b8));
            }
            Ok(out)
        };
        let samples = read_f64s(h.n_kept * h.dim)?;
        let phi_trace = read_f64s(h.phi_len)?;
        Ok(Self {
            dim: h.dim,
            samples,
            accepted_total: h.accepted_total,
            accepted_post_burn: h.accepted_post_burn,
            phi_trace,
            beta_final: h.beta_final,
            config: h.config,
            metadata: h.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ChainError> {
        self.write_to(File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, ChainError> {
        Self::read_from(File::open(path)?)
    }
}

/// Run a chain from the prior mean (the zero vector).
pub fn run_chain<P: Potential + ?Sized>(potential: &P, cfg: &ChainConfig) -> Result<SampleStore, ChainError> {
    run_chain_from(potential, cfg, &vec![0.0; potential.dim()])
}

pub fn run_chain_from<P: Potential + ?Sized>(
    potential: &P,
    cfg: &ChainConfig,
    start: &[f64],
) -> Result<SampleStore, ChainError> {
    cfg.validate()?;
    let dim = potential.dim();
    if start.len() != dim {
        return Err(ChainError::Config(format!(
            "start has {} coordinates, potential expects {dim}",
            start.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut current = start.to_vec();
    let mut phi = potential.potential(&current);
    if !phi.is_finite() {
        return Err(ChainError::NonFiniteStart);
    }
    let mut proposal = vec![0.0; dim];
    let mut beta = cfg.beta;
    let mut samples = Vec::with_capacity(cfg.kept_count() * dim);
    let mut phi_trace = Vec::with_capacity(cfg.n_steps);
    let (mut accepted_total, mut accepted_post_burn, mut window_accepts) = (0, 0, 0);

    for step in 0..cfg.n_steps {
        propose_into(&current, beta, &mut rng, &mut proposal);
        let u: f64 = rng.random();
        // Any proposal with phi_new >= phi - ln(u) is rejected, so the
        // potential may give up as soon as it crosses that level.
        let phi_new = potential.potential_bounded(&proposal, phi - u.ln());
        if u < accept_prob(phi, phi_new) {
            std::mem::swap(&mut current, &mut proposal);
            phi = phi_new;
            accepted_total += 1;
            window_accepts += 1;
            if step >= cfg.burn_in {
                accepted_post_burn += 1;
            }
        }
        phi_trace.push(phi);

        if step < cfg.burn_in && cfg.adapt.enabled && (step + 1) % cfg.adapt.window == 0 {
            let rate = window_accepts as f64 / cfg.adapt.window as f64;
            beta = (beta * (rate - cfg.adapt.target).exp()).clamp(1e-4, 1.0);
            window_accepts = 0;
        }
        if step + 1 == cfg.burn_in {
            window_accepts = 0;
        }
        if step >= cfg.burn_in && (step + 1 - cfg.burn_in) % cfg.thin == 0 {
            samples.extend_from_slice(&current);
        }
    }

    Ok(SampleStore {
        dim,
        samples,
        accepted_total,
        accepted_post_burn,
        phi_trace,
        beta_final: beta,
        config: *cfg,
        metadata: serde_json::Value::Null,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proposal_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = vec![0.5, -1.0, 2.0];
        assert_eq!(propose(&u, 0.0, &mut rng), u);
        let mut a = ChaCha8Rng::seed_from_u64(2);
        let mut b = ChaCha8Rng::seed_from_u64(2);
        let w = propose(&u, 1.0, &mut a);
        let w2 = propose(&[9.0, 9.0, 9.0], 1.0, &mut b);
        assert_eq!(w, w2);
    }

    #[test]
    fn proposal_preserves_prior_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let beta = 0.3;
        let n = 100_000;
        let (mut s, mut ss) = (0.0, 0.0);
        for _ in 0..n {
            let u: f64 = rng.sample(StandardNormal);
            let v = propose(&[u], beta, &mut rng)[0];
            s += v;
            ss += v * v;
        }
        let var = ss / n as f64 - (s / n as f64).powi(2);
        assert!((var - 1.0).abs() < 0.03, "{var}");
    }

    #[test]
    fn acceptance_probabilities() {
        assert_eq!(accept_prob(1.3, 1.3), 1.0);
        assert!((accept_prob(1.0, 1.0 + 2f64.ln()) - 0.5).abs() < 1e-15);
        assert_eq!(accept_prob(4.0, 1.0), 1.0);
        assert_eq!(accept_prob(4.0, f64::NAN), 0.0);
        assert_eq!(accept_prob(4.0, f64::INFINITY), 0.0);
    }

    #[test]
    fn config_validation() {
        let ok = ChainConfig::default();
        assert!(ok.validate().is_ok());
        assert_eq!(ok.kept_count(), 8000);
        assert!(ChainConfig { burn_in: ok.n_steps, ..ok }.validate().is_err());
        assert!(ChainConfig { beta: 0.0, ..ok }.validate().is_err());
        assert!(ChainConfig { beta: 1.5, ..ok }.validate().is_err());
        assert!(ChainConfig { thin: 0, ..ok }.validate().is_err());
    }

    struct Quadratic;
    impl Potential for Quadratic {
        fn dim(&self) -> usize {
            2
        }
        fn potential(&self, u: &[f64]) -> f64 {
            if u[0] > 3.0 {
                return f64::NAN;
            }
            0.5 * ((u[0] - 1.0).powi(2) + u[1].powi(2)) / 0.25
        }
    }

    #[test]
    fn chain_bookkeeping_and_reproducibility() {
        let cfg = ChainConfig {
            n_steps: 5_003,
            burn_in: 1_000,
            thin: 7,
            beta: 0.5,
            seed: 9,
            ..Default::default()
        };
        let a = run_chain(&Quadratic, &cfg).unwrap();
        let b = run_chain(&Quadratic, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_kept(), (5_003 - 1_000) / 7);
        assert_eq!(a.phi_trace.len(), 5_003);
        assert!((0.0..=1.0).contains(&a.acceptance_rate()));
        assert!(a.phi_trace.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn store_round_trip() {
        let cfg = ChainConfig {
            n_steps: 600,
            burn_in: 100,
            thin: 5,
            seed: 4,
            ..Default::default()
        };
        let mut a = run_chain(&Quadratic, &cfg).unwrap();
        a.metadata = serde_json::json!({"zeta": 0.25});
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        let b = SampleStore::read_from(&buf[..]).unwrap();
        assert_eq!(a, b);
        assert!(SampleStore::read_from(&b"not a store"[..]).is_err());
    }
}
