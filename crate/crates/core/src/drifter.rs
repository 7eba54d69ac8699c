//! Drifter advection `dx/dt = v(x, t) + f(x)` with fixed-step RK4.
//!
//! Time is tracked as an integer step index so that a run split at the
//! control switch-on time is bit-identical to an unsplit run.
use crate::geom::{Point2, Vec2};
use crate::spectral::SpectralField;
use crate::torus_flow::{eddy_boundary, FlowError, FlowParams};
use serde::{Deserialize, Serialize};
use std::io::{self, Write};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DrifterError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid control: {0}")]
    InvalidControl(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    None,
    Zonal,
    Bidirectional,
    GradMean,
}

impl ControlKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ControlKind::None => "none",
            ControlKind::Zonal => "zonal",
            ControlKind::Bidirectional => "bidirectional",
            ControlKind::GradMean => "grad_mean",
        }
    }
}

impl std::fmt::Display for ControlKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ControlKind {
    type Err = DrifterError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(ControlKind::None),
            "zonal" => Ok(ControlKind::Zonal),
            "bidirectional" => Ok(ControlKind::Bidirectional),
            "grad_mean" => Ok(ControlKind::GradMean),
            other => Err(DrifterError::InvalidControl(format!("unknown control kind {other:?}"))),
        }
    }
}

/// Which control is applied and how strongly.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSpec {
    kind: ControlKind,
    zeta: f64,
    field: Option<Arc<SpectralField>>,
}

impl ControlSpec {
    pub fn none() -> Self {
        Self {
            kind: ControlKind::None,
            zeta: 0.0,
            field: None,
        }
    }

    pub fn zonal(zeta: f64) -> Result<Self, DrifterError> {
        Self::flow_independent(ControlKind::Zonal, zeta)
    }

    pub fn bidirectional(zeta: f64) -> Result<Self, DrifterError> {
        Self::flow_independent(ControlKind::Bidirectional, zeta)
    }

    /// `f(x) = -zeta * grad psi(x)` for the stream function of `field`.
    pub fn grad_mean(zeta: f64, field: Arc<SpectralField>) -> Result<Self, DrifterError> {
        check_zeta(zeta)?;
        Ok(Self {
            kind: ControlKind::GradMean,
            zeta,
            field: Some(field),
        })
    }

    /// Build from a kind; `grad_mean` requires `field`.
    pub fn new(
        kind: ControlKind,
        zeta: f64,
        field: Option<Arc<SpectralField>>,
    ) -> Result<Self, DrifterError> {
        match kind {
            ControlKind::None => Ok(Self::none()),
            ControlKind::Zonal | ControlKind::Bidirectional => Self::flow_independent(kind, zeta),
            ControlKind::GradMean => {
                let field = field.ok_or_else(|| {
                    DrifterError::InvalidControl("grad_mean control needs a mean field".into())
                })?;
                Self::grad_mean(zeta, field)
            }
        }
    }

    fn flow_independent(kind: ControlKind, zeta: f64) -> Result<Self, DrifterError> {
        check_zeta(zeta)?;
        Ok(Self {
            kind,
            zeta,
            field: None,
        })
    }

    pub fn kind(&self) -> ControlKind {
        self.kind
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    pub fn field(&self) -> Option<&Arc<SpectralField>> {
        self.field.as_ref()
    }

    /// True when the control contributes nothing anywhere.
    pub fn is_inactive(&self) -> bool {
        self.kind == ControlKind::None || self.zeta == 0.0
    }

    /// Control velocity at `p`.
    pub fn eval(&self, p: Point2) -> Vec2 {
        if self.is_inactive() {
            return Vec2::ZERO;
        }
        match self.kind {
            ControlKind::None => Vec2::ZERO,
            ControlKind::Zonal => Vec2::new(self.zeta, 0.0),
            ControlKind::Bidirectional => Vec2::new(self.zeta, self.zeta),
            ControlKind::GradMean => {
                let g = self
                    .field
                    .as_ref()
                    .expect("grad_mean carries a field")
                    .eval_grad_stream(p);
                Vec2::new(-self.zeta * g.x, -self.zeta * g.y)
            }
        }
    }

    pub fn record(&self) -> ControlRecord {
        ControlRecord {
            kind: self.kind,
            zeta: self.zeta,
            field_hash: self.field.as_ref().map(|f| f.content_hash()),
        }
    }
}

fn check_zeta(zeta: f64) -> Result<(), DrifterError> {
    if !(zeta >= 0.0 && zeta.is_finite()) {
        return Err(DrifterError::InvalidControl(format!(
            "control magnitude must be finite and non-negative, got {zeta}"
        )));
    }
    Ok(())
}

/// Serializable summary of a [`ControlSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRecord {
    pub kind: ControlKind,
    pub zeta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_hash: Option<String>,
}

/// `control_eval` from the operation catalogue.
pub fn control_eval(spec: &ControlSpec, p: Point2) -> Vec2 {
    spec.eval(p)
}

/// Observation timing: `K` observations `dt_obs` apart, the control switching
/// on after observation `K/2`, integrated with step `dt_int`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct Schedule {
    k_obs: usize,
    dt_obs: f64,
    dt_int: f64,
    steps_per_obs: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct ScheduleRepr {
    #[serde(rename = "K")]
    k: usize,
    dt_obs: f64,
    dt_int: f64,
}

impl Default for ScheduleRepr {
    fn default() -> Self {
        Self {
            k: 50,
            dt_obs: 0.2,
            dt_int: 1e-3,
        }
    }
}

impl TryFrom<ScheduleRepr> for Schedule {
    type Error = DrifterError;
    fn try_from(r: ScheduleRepr) -> Result<Self, Self::Error> {
        Schedule::new(r.k, r.dt_obs, r.dt_int)
    }
}

impl From<Schedule> for ScheduleRepr {
    fn from(s: Schedule) -> Self {
        Self {
            k: s.k_obs,
            dt_obs: s.dt_obs,
            dt_int: s.dt_int,
        }
    }
}

impl Default for Schedule {
    /// `K = 50`, `dt_obs = 0.2`, `dt_int = 1e-3`: control on at `t = 5`, end at `t = 10`.
    fn default() -> Self {
        Schedule::new(50, 0.2, 1e-3).expect("valid default schedule")
    }
}

impl Schedule {
    pub fn new(k_obs: usize, dt_obs: f64, dt_int: f64) -> Result<Self, DrifterError> {
        if k_obs == 0 || k_obs % 2 != 0 {
            return Err(DrifterError::InvalidSchedule(format!(
                "observation count must be even and positive, got {k_obs}"
            )));
        }
        if !(dt_obs > 0.0 && dt_int > 0.0 && dt_obs.is_finite()) {
            return Err(DrifterError::InvalidSchedule("time steps must be positive".into()));
        }
        let ratio = dt_obs / dt_int;
        let steps = ratio.round();
        if steps < 1.0 || (ratio - steps).abs() > 1e-9 * ratio {
            return Err(DrifterError::InvalidSchedule(format!(
                "integrator step {dt_int} does not divide observation spacing {dt_obs}"
            )));
        }
        Ok(Self {
            k_obs,
            dt_obs,
            dt_int,
            steps_per_obs: steps as u64,
        })
    }

    pub fn k_obs(&self) -> usize {
        self.k_obs
    }

    pub fn half_index(&self) -> usize {
        self.k_obs / 2
    }

    pub fn dt_obs(&self) -> f64 {
        self.dt_obs
    }

    pub fn dt_int(&self) -> f64 {
        self.dt_int
    }

    pub fn steps_per_obs(&self) -> u64 {
        self.steps_per_obs
    }

    pub fn t_half(&self) -> f64 {
        self.half_step() as f64 * self.dt_int
    }

    pub fn t_end(&self) -> f64 {
        self.end_step() as f64 * self.dt_int
    }

    fn half_step(&self) -> u64 {
        self.half_index() as u64 * self.steps_per_obs
    }

    fn end_step(&self) -> u64 {
        self.k_obs as u64 * self.steps_per_obs
    }

    /// Observation times `t_1, ..., t_K`.
    pub fn observation_times(&self) -> Vec<f64> {
        (1..=self.k_obs as u64)
            .map(|k| (k * self.steps_per_obs) as f64 * self.dt_int)
            .collect()
    }

    /// Same time span and integrator step, recording every `stride` integrator steps.
    pub fn refined(&self, stride: u64) -> Result<Self, DrifterError> {
        if stride == 0 || self.steps_per_obs % stride != 0 {
            return Err(DrifterError::InvalidSchedule(format!(
                "stride {stride} does not divide {} steps per observation",
                self.steps_per_obs
            )));
        }
        let factor = (self.steps_per_obs / stride) as usize;
        Ok(Self {
            k_obs: self.k_obs * factor,
            dt_obs: stride as f64 * self.dt_int,
            dt_int: self.dt_int,
            steps_per_obs: stride,
        })
    }
}

/// Time-stamped drifter positions, unwrapped in the plane. The first entry is
/// the starting point.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub positions: Vec<Point2>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<(f64, Point2)> {
        Some((*self.times.last()?, *self.positions.last()?))
    }

    /// CSV with header `t,x,y` and 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,x,y")?;
        for (t, p) in self.times.iter().zip(&self.positions) {
            writeln!(w, "{t:.16e},{:.16e},{:.16e}", p.x, p.y)?;
        }
        Ok(())
    }

    pub fn read_csv<R: io::BufRead>(r: R) -> io::Result<Self> {
        let bad = |m: String| io::Error::new(io::ErrorKind::InvalidData, m);
        let mut lines = r.lines();
        match lines.next() {
            Some(Ok(h)) if h.trim() == "t,x,y" => {}
            _ => return Err(bad("missing t,x,y header".into())),
        }
        let mut traj = Trajectory { times: vec![], positions: vec![] };
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| bad(format!("{line:?}: {e}")))?;
            if vals.len() != 3 {
                return Err(bad(format!("expected 3 columns in {line:?}")));
            }
            traj.times.push(vals[0]);
            traj.positions.push(Point2::new(vals[1], vals[2]));
        }
        Ok(traj)
    }
}

fn rk4_steps<F>(
    flow: &F,
    control: &ControlSpec,
    mut p: Point2,
    start_step: u64,
    end_step: u64,
    dt: f64,
    stride: u64,
    out: &mut Trajectory,
) -> Point2
where
    F: Fn(Point2, f64) -> Vec2 + ?Sized,
{
    let active = !control.is_inactive();
    let rhs = |q: Point2, t: f64| {
        if active {
            flow(q, t) + control.eval(q)
        } else {
            flow(q, t)
        }
    };
    let half = 0.5 * dt;
    let sixth = dt / 6.0;
    for step in start_step..end_step {
        let t = step as f64 * dt;
        let th = t + half;
        let k1 = rhs(p, t);
        let k2 = rhs(Point2::new(p.x + half * k1.x, p.y + half * k1.y), th);
        let k3 = rhs(Point2::new(p.x + half * k2.x, p.y + half * k2.y), th);
        let k4 = rhs(Point2::new(p.x + dt * k3.x, p.y + dt * k3.y), t + dt);
        p = Point2::new(
            p.x + sixth * (k1.x + 2.0 * k2.x + 2.0 * k3.x + k4.x),
            p.y + sixth * (k1.y + 2.0 * k2.y + 2.0 * k3.y + k4.y),
        );
        let done = step + 1;
        if (done - start_step) % stride == 0 || done == end_step {
            out.times.push(done as f64 * dt);
            out.positions.push(p);
        }
    }
    p
}

fn step_index(t: f64, dt: f64) -> u64 {
    let s = (t / dt).round();
    assert!(s >= 0.0, "negative start time");
    s as u64
}

/// Integrate from `t0` to `t1` with the schedule's integrator step, recording
/// the start and every `dt_obs`.
pub fn integrate<F>(
    flow: &F,
    spec: &ControlSpec,
    x0: Point2,
    t0: f64,
    t1: f64,
    sched: &Schedule,
) -> Trajectory
where
    F: Fn(Point2, f64) -> Vec2 + ?Sized,
{
    assert!(t1 > t0, "integration interval must be non-empty");
    let dt = sched.dt_int;
    let (s0, s1) = (step_index(t0, dt), step_index(t1, dt));
    let mut traj = Trajectory {
        times: vec![s0 as f64 * dt],
        positions: vec![x0],
    };
    rk4_steps(flow, spec, x0, s0, s1, dt, sched.steps_per_obs, &mut traj);
    traj
}

/// Uncontrolled on `(0, t_half]`, controlled on `(t_half, t_end]`, recorded at
/// `t = 0` and the `K` observation times.
pub fn simulate_two_phase<F>(flow: &F, spec: &ControlSpec, x0: Point2, sched: &Schedule) -> Trajectory
where
    F: Fn(Point2, f64) -> Vec2 + ?Sized,
{
    let mut traj = simulate_first_half(flow, x0, sched);
    let x_half = *traj.positions.last().expect("non-empty");
    rk4_steps(
        flow,
        spec,
        x_half,
        sched.half_step(),
        sched.end_step(),
        sched.dt_int,
        sched.steps_per_obs,
        &mut traj,
    );
    traj
}

/// Lazily yields the two-phase positions at `t_1 .. t_K`, one observation
/// interval at a time. Dropping the iterator early skips the remaining work;
/// the positions produced are bit-identical to [`simulate_two_phase`].
pub fn two_phase_positions<'a, F>(
    flow: &'a F,
    spec: &'a ControlSpec,
    x0: Point2,
    sched: &'a Schedule,
) -> impl Iterator<Item = Point2> + 'a
where
    F: Fn(Point2, f64) -> Vec2 + ?Sized,
{
    let idle = ControlSpec::none();
    let spo = sched.steps_per_obs;
    let half = sched.half_index();
    let mut p = x0;
    let mut scratch = Trajectory::default();
    (1..=sched.k_obs).map(move |i| {
        let control = if i <= half { &idle } else { spec };
        scratch.times.clear();
        scratch.positions.clear();
        p = rk4_steps(flow, control, p, (i as u64 - 1) * spo, i as u64 * spo, sched.dt_int, spo, &mut scratch);
        p
    })
}

/// The uncontrolled half `[0, t_half]` alone.
pub fn simulate_first_half<F>(flow: &F, x0: Point2, sched: &Schedule) -> Trajectory
where
    F: Fn(Point2, f64) -> Vec2 + ?Sized,
{
    let mut traj = Trajectory {
        times: vec![0.0],
        positions: vec![x0],
    };
    rk4_steps(
        flow,
        &ControlSpec::none(),
        x0,
        0,
        sched.half_step(),
        sched.dt_int,
        sched.steps_per_obs,
        &mut traj,
    );
    traj
}

/// Continue a trajectory from `t_half` under `spec` to `t_end`.
pub fn simulate_second_half<F>(
    flow: &F,
    spec: &ControlSpec,
    x_half: Point2,
    sched: &Schedule,
) -> Trajectory
where
    F: Fn(Point2, f64) -> Vec2 + ?Sized,
{
    let mut traj = Trajectory {
        times: vec![sched.t_half()],
        positions: vec![x_half],
    };
    rk4_steps(
        flow,
        spec,
        x_half,
        sched.half_step(),
        sched.end_step(),
        sched.dt_int,
        sched.steps_per_obs,
        &mut traj,
    );
    traj
}

/// First recorded time at which the drifter is outside the lower-left eddy of
/// the steady flow, i.e. its stream-function value has crossed the separatrix
/// level. A trajectory that starts outside escapes at its first time stamp.
pub fn escape_time(traj: &Trajectory, params: &FlowParams) -> Result<Option<f64>, FlowError> {
    if params.amplitude == 0.0 {
        return Err(FlowError::NoHyperbolicPoint);
    }
    let boundary = eddy_boundary(params)?;
    let steady = params.steady();
    Ok(traj
        .times
        .iter()
        .zip(&traj.positions)
        .find(|(_, p)| !boundary.contains(**p, &steady))
        .map(|(t, _)| *t))
}

/// Escape time of the two-phase truth drifter, checked at every integrator step.
pub fn escape_scan(
    params: &FlowParams,
    spec: &ControlSpec,
    x0: Point2,
    sched: &Schedule,
) -> Result<Option<f64>, FlowError> {
    let dense = sched.refined(1).expect("stride 1 always divides");
    let flow = |p: Point2, t: f64| crate::torus_flow::velocity(p, t, params);
    escape_time(&simulate_two_phase(&flow, spec, x0, &dense), params)
}
