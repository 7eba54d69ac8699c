//! Posterior diagnostics: pointwise variance of the horizontal velocity, its
//! norms, the posterior mean field and the mean flow magnitude along a path.
use crate::drifter::{Schedule, Trajectory};
use crate::geom::{Point2, Vec2};
use crate::pcn::SampleStore;
use crate::spectral::{SpectralError, SpectralField, WhiteningMap};
use serde::{Deserialize, Serialize};
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need at least {needed} kept samples, found {found}")]
    TooFewSamples { needed: usize, found: usize },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("trajectory does not cover the controlled half")]
    ShortTrajectory,
}

/// Rectangle and resolution of the diagnostic grid. Nodes sit at cell centres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            nx: 64,
            ny: 32,
            x_min: 0.0,
            x_max: 1.0,
            y_min: 0.0,
            y_max: 0.5,
        }
    }
}

impl GridSpec {
    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        (self.y_max - self.y_min) / self.ny as f64
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    /// Node `(i, j)`, row-major with `j` (the y index) outermost.
    pub fn node(&self, i: usize, j: usize) -> Point2 {
        Point2::new(
            self.x_min + (i as f64 + 0.5) * self.dx(),
            self.y_min + (j as f64 + 0.5) * self.dy(),
        )
    }

    pub fn nodes(&self) -> impl Iterator<Item = Point2> + '_ {
        (0..self.ny).flat_map(move |j| (0..self.nx).map(move |i| self.node(i, j)))
    }
}

/// Per-node sample variance of the horizontal velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceGrid {
    pub grid: GridSpec,
    /// Row-major, `values[j * nx + i]`.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Norms {
    pub max: f64,
    pub l1: f64,
    pub l2: f64,
    pub min: f64,
}

impl VarianceGrid {
    pub fn constant(grid: GridSpec, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.nx * grid.ny],
        }
    }

    /// CSV with header `x,y,var_u`, row-major.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "x,y,var_u")?;
        for (p, v) in self.grid.nodes().zip(&self.values) {
            writeln!(w, "{:.16e},{:.16e},{:.16e}", p.x, p.y, v)?;
        }
        Ok(())
    }
}

/// Max, Riemann-sum L1 and L2 norms (and the minimum) of a variance grid.
pub fn norms(g: &VarianceGrid) -> Norms {
    let cell = g.grid.dx() * g.grid.dy();
    let max = g.values.iter().copied().fold(0.0, f64::max);
    let min = g.values.iter().copied().fold(f64::INFINITY, f64::min);
    let l1 = cell * g.values.iter().sum::<f64>();
    let l2 = (cell * g.values.iter().map(|v| v * v).sum::<f64>()).sqrt();
    Norms {
        max,
        l1,
        l2,
        min: if min.is_finite() { min } else { 0.0 },
    }
}

/// Unbiased variance across kept samples of `u` at every grid node.
pub fn variance_grid(
    samples: &SampleStore,
    map: &WhiteningMap,
    grid: &GridSpec,
) -> Result<VarianceGrid, AnalysisError> {
    let n = samples.n_kept();
    if n < 2 {
        return Err(AnalysisError::TooFewSamples { needed: 2, found: n });
    }
    let nodes: Vec<Point2> = grid.nodes().collect();
    // Welford accumulation over samples, node-wise.
    let mut mean = vec![0.0; nodes.len()];
    let mut m2 = vec![0.0; nodes.len()];
    let mut field = SpectralField::zeros(map.prior().n);
    for (count, coords) in samples.iter().enumerate() {
        map.decode_into(coords, &mut field)?;
        let k = (count + 1) as f64;
        for ((p, m), s) in nodes.iter().zip(&mut mean).zip(&mut m2) {
            let u = field.eval_velocity(*p).x;
            let d = u - *m;
            *m += d / k;
            *s += d * (u - *m);
        }
    }
    Ok(VarianceGrid {
        grid: *grid,
        values: m2.iter().map(|s| (s / (n - 1) as f64).max(0.0)).collect(),
    })
}

/// Field whose whitened coordinates are the sample mean.
pub fn posterior_mean_field(samples: &SampleStore, map: &WhiteningMap) -> Result<SpectralField, AnalysisError> {
    let n = samples.n_kept();
    if n == 0 {
        return Err(AnalysisError::TooFewSamples { needed: 1, found: 0 });
    }
    Ok(map.decode(&samples.mean())?)
}

/// `(2/K) sum_{k > K/2} |v(z_k, t_k)|` over the controlled-half observations.
/// `traj` holds the starting point followed by the `K` observation points.
pub fn mean_flow_magnitude<F>(flow: &F, traj: &Trajectory, sched: &Schedule) -> Result<f64, AnalysisError>
where
    F: Fn(Point2, f64) -> Vec2 + ?Sized,
{
    let k = sched.k_obs();
    if traj.len() < k + 1 {
        return Err(AnalysisError::ShortTrajectory);
    }
    let half = sched.half_index();
    let sum: f64 = (half + 1..=k)
        .map(|i| flow(traj.positions[i], traj.times[i]).norm())
        .sum();
    Ok(2.0 * sum / k as f64)
}
