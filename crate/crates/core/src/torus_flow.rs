//! The analytic truth flow on the unit torus.
//!
//! The stream function is a steady jet-plus-eddies solution of the barotropic
//! vorticity equation with an optional travelling-wave perturbation:
//!
//! ```text
//! psi(x, y, t) = -c y + A sin(2 pi k x) sin(2 pi y) + eps sin(2 pi x - pi t) sin(4 pi y)
//! ```
//!
//! Velocities are the perpendicular gradient `(-d psi/dy, d psi/dx)`. All
//! derivatives are hand-differentiated closed forms.
use crate::geom::{wrap_unit, Point2, Vec2};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

const TAU: f64 = 2.0 * PI;

/// Grid resolution for Newton seeds in [`find_stagnation_points`].
pub const STAGNATION_SEED_GRID: usize = 64;
/// Two roots closer than this (torus metric) are the same point.
pub const STAGNATION_DEDUP_TOL: f64 = 1e-6;
/// Perturbation strength used by the time-dependent experiments.
pub const DEFAULT_TIME_DEPENDENT_EPS: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("invalid flow parameters: {0}")]
    InvalidParams(String),
    #[error("flow has no hyperbolic stagnation point")]
    NoHyperbolicPoint,
    #[error("flow has no elliptic stagnation point enclosing an eddy")]
    NoEddy,
}

/// Parameters `(c, A, k, eps)` of the truth flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowParams {
    /// Jet speed.
    pub c: f64,
    /// Eddy amplitude.
    #[serde(rename = "A", alias = "amplitude")]
    pub amplitude: f64,
    /// Zonal wavenumber of the eddy pattern.
    pub k: u32,
    /// Strength of the travelling-wave perturbation.
    pub eps: f64,
}

impl Default for FlowParams {
    /// `k = 1`, `A = 0.5`, `c = pi A`: the family whose stagnation points sit
    /// at (1/4, 1/6), (3/4, 1/3) and (7/12, 1/2).
    fn default() -> Self {
        Self {
            c: PI * 0.5,
            amplitude: 0.5,
            k: 1,
            eps: 0.0,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<(), FlowError> {
        if !(self.c.is_finite() && self.amplitude.is_finite() && self.eps.is_finite()) {
            return Err(FlowError::InvalidParams("non-finite parameter".into()));
        }
        if self.amplitude < 0.0 {
            return Err(FlowError::InvalidParams(format!(
                "amplitude must be non-negative, got {}",
                self.amplitude
            )));
        }
        if self.k == 0 {
            return Err(FlowError::InvalidParams("wavenumber k must be >= 1".into()));
        }
        if self.eps < 0.0 {
            return Err(FlowError::InvalidParams(format!(
                "eps must be non-negative, got {}",
                self.eps
            )));
        }
        Ok(())
    }

    /// The same flow without the time-dependent perturbation.
    pub fn steady(&self) -> Self {
        Self { eps: 0.0, ..*self }
    }

    /// Scale `A` and `c` together, which scales the stream function.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            c: self.c * factor,
            amplitude: self.amplitude * factor,
            ..*self
        }
    }
}

/// Stream function value at `p`, time `t`.
pub fn stream_function(p: Point2, t: f64, params: &FlowParams) -> f64 {
    let kx = TAU * params.k as f64 * p.x;
    let mut psi = -params.c * p.y + params.amplitude * kx.sin() * (TAU * p.y).sin();
    if params.eps != 0.0 {
        psi += params.eps * perturbation_stream(p, t);
    }
    psi
}

/// The unit-strength perturbation `sin(2 pi x - pi t) sin(4 pi y)`.
pub fn perturbation_stream(p: Point2, t: f64) -> f64 {
    (TAU * p.x - PI * t).sin() * (2.0 * TAU * p.y).sin()
}

/// Perpendicular gradient of the unit perturbation.
pub fn perturbation_velocity(p: Point2, t: f64) -> Vec2 {
    let (sa, ca) = (TAU * p.x - PI * t).sin_cos();
    let (s2, c2) = (2.0 * TAU * p.y).sin_cos();
    Vec2::new(-2.0 * TAU * sa * c2, TAU * ca * s2)
}

/// Velocity `(-d psi/dy, d psi/dx)`.
pub fn velocity(p: Point2, t: f64, params: &FlowParams) -> Vec2 {
    let kf = params.k as f64;
    let (skx, ckx) = (TAU * kf * p.x).sin_cos();
    let (sy, cy) = (TAU * p.y).sin_cos();
    let a = params.amplitude;
    let mut v = Vec2::new(params.c - TAU * a * skx * cy, TAU * kf * a * ckx * sy);
    if params.eps != 0.0 {
        let w = perturbation_velocity(p, t);
        v.x += params.eps * w.x;
        v.y += params.eps * w.y;
    }
    v
}

/// Velocity Jacobian `[[dvx/dx, dvx/dy], [dvy/dx, dvy/dy]]`.
pub fn velocity_jacobian(p: Point2, t: f64, params: &FlowParams) -> [[f64; 2]; 2] {
    let kf = params.k as f64;
    let a = params.amplitude;
    let (skx, ckx) = (TAU * kf * p.x).sin_cos();
    let (sy, cy) = (TAU * p.y).sin_cos();
    let w2 = TAU * TAU;
    let mut j = [
        [-w2 * kf * a * ckx * cy, w2 * a * skx * sy],
        [-w2 * kf * kf * a * skx * sy, w2 * kf * a * ckx * cy],
    ];
    if params.eps != 0.0 {
        let e = params.eps;
        let (sa, ca) = (TAU * p.x - PI * t).sin_cos();
        let (s2, c2) = (2.0 * TAU * p.y).sin_cos();
        j[0][0] -= e * 2.0 * w2 * ca * c2;
        j[0][1] += e * 4.0 * w2 * sa * s2;
        j[1][0] -= e * w2 * sa * s2;
        j[1][1] += e * 2.0 * w2 * ca * c2;
    }
    j
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StagnationKind {
    /// Complex-conjugate eigenvalues: a rotating eddy centre.
    Elliptic,
    /// Real eigenvalues of opposite sign: a saddle.
    Hyperbolic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StagnationPoint {
    pub location: Point2,
    pub kind: StagnationKind,
    pub jacobian: [[f64; 2]; 2],
}

impl StagnationPoint {
    /// True when the stream function has a local maximum here (clockwise eddy).
    pub fn is_stream_maximum(&self) -> bool {
        self.kind == StagnationKind::Elliptic && self.jacobian[0][1] > 0.0
    }
}

pub fn classify(jacobian: &[[f64; 2]; 2]) -> StagnationKind {
    let tr = jacobian[0][0] + jacobian[1][1];
    let det = jacobian[0][0] * jacobian[1][1] - jacobian[0][1] * jacobian[1][0];
    if tr * tr - 4.0 * det < 0.0 {
        StagnationKind::Elliptic
    } else {
        StagnationKind::Hyperbolic
    }
}

fn newton_polish(mut p: Point2, t: f64, params: &FlowParams) -> Option<Point2> {
    const MAX_ITER: usize = 60;
    for _ in 0..MAX_ITER {
        let v = velocity(p, t, params);
        if v.norm() < 1e-14 {
            return Some(p);
        }
        let j = velocity_jacobian(p, t, params);
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det.abs() < 1e-12 {
            return None;
        }
        let dx = (j[1][1] * v.x - j[0][1] * v.y) / det;
        let dy = (-j[1][0] * v.x + j[0][0] * v.y) / det;
        // Steps longer than a cell jump between basins; clip them.
        let step = dx.hypot(dy);
        let scale = if step > 0.25 { 0.25 / step } else { 1.0 };
        p = Point2::new(p.x - scale * dx, p.y - scale * dy);
        if !p.is_finite() {
            return None;
        }
    }
    (velocity(p, t, params).norm() < 1e-10).then_some(p)
}

/// All zeros of `velocity(., t)` in `[0, 1)²`, found by Newton iteration from a
/// regular seed grid. Seeds that fail to converge are dropped.
pub fn find_stagnation_points(params: &FlowParams, t: f64) -> Vec<StagnationPoint> {
    let n = STAGNATION_SEED_GRID;
    let mut found: Vec<StagnationPoint> = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let seed = Point2::new((i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64);
            let Some(root) = newton_polish(seed, t, params) else {
                continue;
            };
            let root = Point2::new(snap(wrap_unit(root.x)), snap(wrap_unit(root.y)));
            if found
                .iter()
                .any(|s| s.location.torus_distance(root) < STAGNATION_DEDUP_TOL)
            {
                continue;
            }
            let jacobian = velocity_jacobian(root, t, params);
            found.push(StagnationPoint {
                location: root,
                kind: classify(&jacobian),
                jacobian,
            });
        }
    }
    found.sort_by(|a, b| {
        (a.location.y, a.location.x)
            .partial_cmp(&(b.location.y, b.location.x))
            .expect("finite stagnation points")
    });
    found
}

/// Values within rounding of 1 belong to the `0` representative.
fn snap(v: f64) -> f64 {
    if 1.0 - v < 1e-12 || v.abs() < 1e-15 {
        0.0
    } else {
        v
    }
}

/// The lower-left recirculation regime of the steady flow: its centre and the
/// level of the separatrix through the nearest saddle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EddyBoundary {
    pub center: Point2,
    pub saddle: Point2,
    pub level: f64,
    /// `+1` when the stream function inside the eddy exceeds `level`.
    pub inside_sign: f64,
}

impl EddyBoundary {
    /// Whether `p` (any representative) lies inside the eddy.
    pub fn contains(&self, p: Point2, params: &FlowParams) -> bool {
        let psi = stream_function(p.wrapped(), 0.0, &params.steady());
        (psi - self.level) * self.inside_sign > 0.0
    }
}

pub fn eddy_boundary(params: &FlowParams) -> Result<EddyBoundary, FlowError> {
    let steady = params.steady();
    let points = find_stagnation_points(&steady, 0.0);
    let center = points
        .iter()
        .filter(|s| s.kind == StagnationKind::Elliptic)
        .min_by(|a, b| {
            let ka = (!a.is_stream_maximum(), a.location.x + a.location.y);
            let kb = (!b.is_stream_maximum(), b.location.x + b.location.y);
            ka.partial_cmp(&kb).expect("finite")
        })
        .ok_or(FlowError::NoEddy)?;
    let saddle = points
        .iter()
        .filter(|s| s.kind == StagnationKind::Hyperbolic)
        .min_by(|a, b| {
            let da = a.location.torus_distance(center.location);
            let db = b.location.torus_distance(center.location);
            (da, a.location.x)
                .partial_cmp(&(db, b.location.x))
                .expect("finite")
        })
        .ok_or(FlowError::NoHyperbolicPoint)?;
    let level = stream_function(saddle.location, 0.0, &steady);
    let inside = stream_function(center.location, 0.0, &steady);
    Ok(EddyBoundary {
        center: center.location,
        saddle: saddle.location,
        level,
        inside_sign: if inside >= level { 1.0 } else { -1.0 },
    })
}

/// Stream-function level of the separatrix bounding the lower-left eddy.
pub fn separatrix_level(params: &FlowParams) -> Result<f64, FlowError> {
    if params.amplitude == 0.0 {
        return Err(FlowError::NoHyperbolicPoint);
    }
    eddy_boundary(params).map(|b| b.level)
}
