//! Experiment driver: configuration, ζ sweeps, the two-stage a posteriori
//! protocol, and the run-directory layout consumed by the plotting scripts.
//!
//! A run directory looks like
//!
//! ```text
//! config.json        effective configuration (ζ grid resolved)
//! curve.csv          zeta,max,l1,l2,escaped,mean_flow_mag
//! stagnation.csv     stagnation points of the steady truth flow
//! streamlines.json   separatrix and contour levels of the steady stream function
//! psi_grid.csv       steady stream function on the unit square
//! stage1/            a posteriori runs only: the y¹-only posterior and its mean
//! zeta_000/ ...      one directory per grid value:
//!     observations.json samples.bin variance.csv path.csv cell.json DONE
//! ```
//!
//! A cell is complete once its `DONE` marker exists; rerunning a sweep skips
//! complete cells, so an interrupted run can simply be restarted.
use crate::analysis::{mean_flow_magnitude, norms, posterior_mean_field, variance_grid, AnalysisError, GridSpec};
use crate::drifter::{escape_scan, ControlKind, ControlRecord, ControlSpec, DrifterError, Schedule, Trajectory};
use crate::geom::Point2;
use crate::observation::{synthesize_with_truth, ForwardConfig, LagrangianPotential, NoiseSeeds, ObservationError, Window};
use crate::pcn::{run_chain, ChainConfig, ChainError, SampleStore};
use crate::seeds::{cell_seed, shared_seed};
use crate::spectral::{PriorParams, SpectralError, SpectralField, WhiteningMap};
use crate::torus_flow::{self, eddy_boundary, find_stagnation_points, FlowError, FlowParams, StagnationKind};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;
use thiserror::Error;

/// Environment variable holding the number of concurrent ζ cells.
pub const WORKERS_ENV: &str = "DRIFTER_UQ_WORKERS";
pub const DONE_MARKER: &str = "DONE";
pub const FAILED_MARKER: &str = "FAILED";
pub const CURVE_HEADER: &str = "zeta,max,l1,l2,escaped,mean_flow_mag";
/// Number of contour levels written to `streamlines.json`.
pub const STREAMLINE_LEVELS: usize = 15;
const PSI_GRID_POINTS: usize = 101;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0} holds a run with a different configuration")]
    ConfigMismatch(PathBuf),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Drifter(#[from] DrifterError),
    #[error(transparent)]
    Observation(#[from] ObservationError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("worker pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| ExperimentError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ExperimentError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| ExperimentError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>, ExperimentError> {
    fs::File::create(path).map(BufWriter::new).map_err(io_err(path))
}

/// Everything that defines an experiment. Every field is optional in the JSON
/// file; missing fields take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub flow: FlowParams,
    pub prior: PriorParams,
    pub schedule: Schedule,
    pub sigma: f64,
    pub x0: Point2,
    pub control: ControlKind,
    /// `None` selects the default grid for the control kind.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zeta_grid: Option<Vec<f64>>,
    /// Chain settings. The `seed` field is ignored: every chain gets a seed
    /// derived from `master_seed`.
    pub chain: ChainConfig,
    pub grid: GridSpec,
    pub output_dir: PathBuf,
    pub master_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            flow: FlowParams::default(),
            prior: PriorParams::default(),
            schedule: Schedule::default(),
            sigma: 0.02,
            x0: Point2::new(0.3, 0.2),
            control: ControlKind::Zonal,
            zeta_grid: None,
            chain: ChainConfig::default(),
            grid: GridSpec::default(),
            output_dir: PathBuf::from("run"),
            master_seed: 20_240_601,
        }
    }
}

/// `start, start + step, ...` for `count` values, exact to the third decimal.
fn milli_grid(start: u32, step: u32, count: u32) -> Vec<f64> {
    (0..count).map(|i| f64::from(start + i * step) / 1000.0).collect()
}

/// Default ζ grid for a control kind.
pub fn default_zeta_grid(kind: ControlKind, eps: f64) -> Vec<f64> {
    match kind {
        ControlKind::GradMean if eps != 0.0 => milli_grid(150, 30, 6),
        ControlKind::GradMean => milli_grid(300, 25, 11),
        _ => milli_grid(0, 250, 13),
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, ExperimentError> {
        read_json(path)
    }

    pub fn resolved_grid(&self) -> Vec<f64> {
        self.zeta_grid
            .clone()
            .unwrap_or_else(|| default_zeta_grid(self.control, self.flow.eps))
    }

    /// Copy with the ζ grid made explicit, as written to `config.json`.
    pub fn resolved(&self) -> Self {
        Self {
            zeta_grid: Some(self.resolved_grid()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        self.flow.validate()?;
        self.prior.validate()?;
        self.chain.validate()?;
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if !self.x0.is_finite() {
            return bad("x0 must be finite".into());
        }
        let g = &self.grid;
        if g.nx == 0 || g.ny == 0 || !(g.x_max > g.x_min) || !(g.y_max > g.y_min) {
            return bad("diagnostic grid must have positive size and extent".into());
        }
        let grid = self.resolved_grid();
        if grid.is_empty() {
            return bad("zeta grid is empty".into());
        }
        if grid.iter().any(|z| !(z.is_finite() && *z >= 0.0)) {
            return bad("zeta values must be finite and nonnegative".into());
        }
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return bad("zeta grid must be strictly increasing".into());
        }
        if self.control == ControlKind::GradMean && self.flow.eps != 0.0 && self.prior.n < 2 {
            return bad("the time-dependent truth needs a truncation of at least 2".into());
        }
        Ok(())
    }

    fn forward(&self, control: ControlSpec) -> ForwardConfig {
        ForwardConfig {
            schedule: self.schedule,
            control,
            x0: self.x0,
            eps: self.flow.eps,
        }
    }

    fn chain_with_seed(&self, seed: u64) -> ChainConfig {
        ChainConfig { seed, ..self.chain }
    }

    /// Seed of the y¹ noise, shared by every cell of a run.
    pub fn first_half_noise_seed(&self) -> u64 {
        shared_seed(self.master_seed, "noise/first-half")
    }

    /// Noise and chain seeds of grid cell `index`. Cells with ζ = 0 are keyed
    /// as uncontrolled whatever the control kind, so every ζ = 0 cell is the
    /// same experiment.
    pub fn cell_seeds(&self, index: usize, zeta: f64) -> (NoiseSeeds, u64) {
        let label = if zeta == 0.0 { ControlKind::None } else { self.control }.as_str();
        let noise = NoiseSeeds {
            first: self.first_half_noise_seed(),
            second: cell_seed(self.master_seed, label, index, "noise/second-half"),
        };
        (noise, cell_seed(self.master_seed, label, index, "chain"))
    }
}

/// One row of `curve.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub zeta: f64,
    pub max: f64,
    pub l1: f64,
    pub l2: f64,
    pub escaped: bool,
    pub mean_flow_mag: f64,
}

impl CurvePoint {
    fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{},{:e}",
            self.zeta, self.max, self.l1, self.l2, self.escaped, self.mean_flow_mag
        )
    }
}

pub fn write_curve_csv<W: Write>(mut w: W, points: &[CurvePoint]) -> std::io::Result<()> {
    writeln!(w, "{CURVE_HEADER}")?;
    for p in points {
        writeln!(w, "{}", p.csv_row())?;
    }
    Ok(())
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurvePoint>, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    if lines.next() != Some(CURVE_HEADER) {
        return Err(ExperimentError::Config(format!("{}: unexpected header", path.display())));
    }
    let bad = |line: &str| ExperimentError::Config(format!("{}: malformed row {line:?}", path.display()));
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(line));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
            Ok(CurvePoint {
                zeta: num(f[0])?,
                max: num(f[1])?,
                l1: num(f[2])?,
                l2: num(f[3])?,
                escaped: f[4].parse().map_err(|_| bad(line))?,
                mean_flow_mag: num(f[5])?,
            })
        })
        .collect()
}

/// Contents of a cell's `cell.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub index: usize,
    pub point: CurvePoint,
    pub min_variance: f64,
    /// First integrator step at which the truth drifter left the eddy.
    pub escape_time: Option<f64>,
    pub acceptance_rate: f64,
    pub beta_final: f64,
    pub noise_seeds: NoiseSeeds,
    pub chain_seed: u64,
    pub control: ControlRecord,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub index: usize,
    pub zeta: f64,
    pub message: String,
}

/// Which cells to run and how many at a time.
#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    /// Grid indices to run; `None` runs the whole grid.
    pub cells: Option<Vec<usize>>,
    /// Concurrent cells; `None` reads [`WORKERS_ENV`], then falls back to the
    /// number of available cores.
    pub workers: Option<usize>,
    /// Print one line per finished cell to stderr.
    pub progress: bool,
}

impl SweepOptions {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn cells(cells: Vec<usize>) -> Self {
        Self {
            cells: Some(cells),
            ..Self::default()
        }
    }
}

pub fn worker_count(requested: Option<usize>) -> usize {
    requested
        .or_else(|| std::env::var(WORKERS_ENV).ok().and_then(|v| v.trim().parse().ok()))
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Result of a sweep: one slot per grid value.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub run_dir: PathBuf,
    pub zeta_grid: Vec<f64>,
    pub cells: Vec<Option<CellSummary>>,
    pub failures: Vec<CellFailure>,
    /// Posterior mean of the first stage (a posteriori runs only).
    pub stage1_field: Option<Arc<SpectralField>>,
}

impl SweepOutcome {
    pub fn is_complete(&self) -> bool {
        self.cells.iter().all(Option::is_some)
    }

    /// Curve rows of the completed cells, in grid order.
    pub fn curve(&self) -> Vec<CurvePoint> {
        self.cells.iter().flatten().map(|c| c.point).collect()
    }

    /// Smallest ζ whose truth drifter escaped the eddy, among completed cells.
    pub fn critical_zeta(&self) -> Option<f64> {
        critical_zeta(&self.curve())
    }

    pub fn cell_dir(&self, index: usize) -> PathBuf {
        cell_dir(&self.run_dir, index)
    }
}

pub fn cell_dir(run_dir: &Path, index: usize) -> PathBuf {
    run_dir.join(format!("zeta_{index:03}"))
}

pub fn critical_zeta(points: &[CurvePoint]) -> Option<f64> {
    points.iter().find(|p| p.escaped).map(|p| p.zeta)
}

struct CellContext<'a> {
    cfg: &'a ExperimentConfig,
    map: WhiteningMap,
    grid: &'a [f64],
    field: Option<Arc<SpectralField>>,
    run_dir: &'a Path,
    progress: bool,
}

impl CellContext<'_> {
    fn control(&self, zeta: f64) -> Result<ControlSpec, ExperimentError> {
        Ok(ControlSpec::new(self.cfg.control, zeta, self.field.clone())?)
    }

    fn run(&self, index: usize) -> Result<CellSummary, ExperimentError> {
        let dir = cell_dir(self.run_dir, index);
        if dir.join(DONE_MARKER).exists() {
            return read_json(&dir.join("cell.json"));
        }
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let started = Instant::now();
        let cfg = self.cfg;
        let zeta = self.grid[index];
        let spec = self.control(zeta)?;
        let fwd = cfg.forward(spec.clone());
        let (noise, chain_seed) = cfg.cell_seeds(index, zeta);
        let (obs, truth) = synthesize_with_truth(&cfg.flow, &fwd, cfg.sigma, noise)?;

        let potential = LagrangianPotential::new(self.map.clone(), &obs, &fwd, Window::Full)?;
        let mut store = run_chain(&potential, &cfg.chain_with_seed(chain_seed))?;
        store.metadata = serde_json::json!({
            "index": index,
            "zeta": zeta,
            "control": spec.record(),
            "window": "full",
        });

        let var = variance_grid(&store, &self.map, &cfg.grid)?;
        let n = norms(&var);
        let escape_time = escape_scan(&cfg.flow, &spec, cfg.x0, &cfg.schedule)?;
        let flow = |p: Point2, t: f64| torus_flow::velocity(p, t, &cfg.flow);
        let summary = CellSummary {
            index,
            point: CurvePoint {
                zeta,
                max: n.max,
                l1: n.l1,
                l2: n.l2,
                escaped: escape_time.is_some(),
                mean_flow_mag: mean_flow_magnitude(&flow, &truth, &cfg.schedule)?,
            },
            min_variance: n.min,
            escape_time,
            acceptance_rate: store.acceptance_rate(),
            beta_final: store.beta_final,
            noise_seeds: noise,
            chain_seed,
            control: spec.record(),
            elapsed_seconds: started.elapsed().as_secs_f64(),
        };

        obs.save(&dir.join("observations.json"))?;
        store.save(&dir.join("samples.bin"))?;
        let path = dir.join("variance.csv");
        var.write_csv(create_file(&path)?).map_err(io_err(&path))?;
        let path = dir.join("path.csv");
        truth.write_csv(create_file(&path)?).map_err(io_err(&path))?;
        write_json(&dir.join("cell.json"), &summary)?;
        let done = dir.join(DONE_MARKER);
        fs::write(&done, b"").map_err(io_err(&done))?;
        let _ = fs::remove_file(dir.join(FAILED_MARKER));
        if self.progress {
            eprintln!(
                "cell {index} (zeta = {zeta}) finished in {:.1} s, acceptance {:.3}",
                summary.elapsed_seconds, summary.acceptance_rate
            );
        }
        Ok(summary)
    }
}

/// Write `config.json`, or check that an existing one describes the same run.
fn prepare_run_dir(cfg: &ExperimentConfig) -> Result<(), ExperimentError> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("config.json");
    let resolved = cfg.resolved();
    if path.exists() {
        let existing: ExperimentConfig = read_json(&path)?;
        let strip = |c: &ExperimentConfig| ExperimentConfig {
            output_dir: PathBuf::new(),
            ..c.clone()
        };
        if strip(&existing) != strip(&resolved) {
            return Err(ExperimentError::ConfigMismatch(dir.clone()));
        }
    } else {
        write_json(&path, &resolved)?;
    }
    write_truth_artifacts(&cfg.flow, dir).map(|_| ())
}

fn run_cells(
    cfg: &ExperimentConfig,
    field: Option<Arc<SpectralField>>,
    opts: &SweepOptions,
) -> Result<SweepOutcome, ExperimentError> {
    let grid = cfg.resolved_grid();
    let indices: Vec<usize> = match &opts.cells {
        Some(cells) => {
            if let Some(&bad) = cells.iter().find(|&&i| i >= grid.len()) {
                return Err(ExperimentError::Config(format!(
                    "cell {bad} is outside the {}-point grid",
                    grid.len()
                )));
            }
            let mut cells = cells.clone();
            cells.sort_unstable();
            cells.dedup();
            cells
        }
        None => (0..grid.len()).collect(),
    };
    let ctx = CellContext {
        cfg,
        map: WhiteningMap::new(&cfg.prior)?,
        grid: &grid,
        field: field.clone(),
        run_dir: &cfg.output_dir,
        progress: opts.progress,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count(opts.workers))
        .build()
        .map_err(|e| ExperimentError::Pool(e.to_string()))?;
    let results: Vec<(usize, Result<CellSummary, ExperimentError>)> =
        pool.install(|| indices.par_iter().map(|&i| (i, ctx.run(i))).collect());

    let mut cells: Vec<Option<CellSummary>> = vec![None; grid.len()];
    let mut failures = Vec::new();
    for (i, result) in results {
        match result {
            Ok(summary) => cells[i] = Some(summary),
            Err(e) => {
                let dir = cell_dir(&cfg.output_dir, i);
                let _ = fs::create_dir_all(&dir);
                let _ = fs::write(dir.join(FAILED_MARKER), e.to_string());
                failures.push(CellFailure {
                    index: i,
                    zeta: grid[i],
                    message: e.to_string(),
                });
            }
        }
    }
    // Cells outside the requested subset may have finished in earlier runs.
    for (i, slot) in cells.iter_mut().enumerate() {
        let dir = cell_dir(&cfg.output_dir, i);
        if slot.is_none() && dir.join(DONE_MARKER).exists() {
            *slot = Some(read_json(&dir.join("cell.json"))?);
        }
    }
    let outcome = SweepOutcome {
        run_dir: cfg.output_dir.clone(),
        zeta_grid: grid,
        cells,
        failures,
        stage1_field: field,
    };
    let path = cfg.output_dir.join("curve.csv");
    write_curve_csv(create_file(&path)?, &outcome.curve()).map_err(io_err(&path))?;
    Ok(outcome)
}

/// ζ sweep with a flow-independent control (zonal or bidirectional).
pub fn run_sweep(cfg: &ExperimentConfig, opts: &SweepOptions) -> Result<SweepOutcome, ExperimentError> {
    if !matches!(cfg.control, ControlKind::Zonal | ControlKind::Bidirectional) {
        return Err(ExperimentError::Config(format!(
            "a sweep needs a zonal or bidirectional control, got {}",
            cfg.control
        )));
    }
    cfg.validate()?;
    prepare_run_dir(cfg)?;
    run_cells(cfg, None, opts)
}

/// Summary of the first a posteriori stage, stored as `stage1/stage1.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Summary {
    pub field_hash: String,
    pub acceptance_rate: f64,
    pub beta_final: f64,
    pub noise_seeds: NoiseSeeds,
    pub chain_seed: u64,
    pub elapsed_seconds: f64,
}

/// Posterior mean of the initial field given the uncontrolled first half of
/// the observations. Cached in `stage1/` and reused on resume.
pub fn run_stage1(cfg: &ExperimentConfig, map: &WhiteningMap) -> Result<SpectralField, ExperimentError> {
    let dir = cfg.output_dir.join("stage1");
    let field_path = dir.join("mean_field.json");
    if dir.join(DONE_MARKER).exists() {
        return read_json(&field_path);
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let started = Instant::now();
    let fwd = cfg.forward(ControlSpec::none());
    // Only y¹ enters the stage-1 potential; the second half of this set is
    // never looked at.
    let noise = NoiseSeeds {
        first: cfg.first_half_noise_seed(),
        second: shared_seed(cfg.master_seed, "noise/stage1-unused"),
    };
    let (obs, _) = synthesize_with_truth(&cfg.flow, &fwd, cfg.sigma, noise)?;
    let chain_seed = shared_seed(cfg.master_seed, "chain/stage1");
    let potential = LagrangianPotential::new(map.clone(), &obs, &fwd, Window::FirstHalf)?;
    let mut store = run_chain(&potential, &cfg.chain_with_seed(chain_seed))?;
    store.metadata = serde_json::json!({ "stage": 1, "window": "first_half" });
    let mean = posterior_mean_field(&store, map)?;

    obs.save(&dir.join("observations.json"))?;
    store.save(&dir.join("samples.bin"))?;
    write_json(&field_path, &mean)?;
    write_json(
        &dir.join("stage1.json"),
        &Stage1Summary {
            field_hash: mean.content_hash(),
            acceptance_rate: store.acceptance_rate(),
            beta_final: store.beta_final,
            noise_seeds: noise,
            chain_seed,
            elapsed_seconds: started.elapsed().as_secs_f64(),
        },
    )?;
    let done = dir.join(DONE_MARKER);
    fs::write(&done, b"").map_err(io_err(&done))?;
    Ok(mean)
}

/// Two-stage protocol: condition on y¹ alone, then sweep ζ with the control
/// `-ζ ∇ψ̄` built from that posterior mean.
pub fn run_aposteriori(cfg: &ExperimentConfig, opts: &SweepOptions) -> Result<SweepOutcome, ExperimentError> {
    if cfg.control != ControlKind::GradMean {
        return Err(ExperimentError::Config(format!(
            "the a posteriori protocol needs the grad_mean control, got {}",
            cfg.control
        )));
    }
    cfg.validate()?;
    prepare_run_dir(cfg)?;
    let map = WhiteningMap::new(&cfg.prior)?;
    let field = Arc::new(run_stage1(cfg, &map)?);
    if opts.progress {
        eprintln!("stage 1 posterior mean ready ({})", field.content_hash());
    }
    run_cells(cfg, Some(field), opts)
}

/// Separatrix and contour levels for streamline plots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Streamlines {
    pub separatrix_level: Option<f64>,
    pub eddy_center: Option<Point2>,
    pub saddle: Option<Point2>,
    pub psi_min: f64,
    pub psi_max: f64,
    /// Evenly spaced, one of them the separatrix level when there is one.
    pub levels: Vec<f64>,
}

fn contour_levels(min: f64, max: f64, anchor: Option<f64>) -> Vec<f64> {
    let count = STREAMLINE_LEVELS;
    let h = (max - min) / (count - 1) as f64;
    let base = match anchor {
        Some(a) if h > 0.0 => a - ((a - min) / h).round() * h,
        _ => min,
    };
    (0..count).map(|j| base + j as f64 * h).collect()
}

/// Write the steady truth flow's stagnation points, stream-function grid and
/// streamline levels into `dir`.
pub fn write_truth_artifacts(flow: &FlowParams, dir: &Path) -> Result<Streamlines, ExperimentError> {
    let steady = flow.steady();
    let points = find_stagnation_points(&steady, 0.0);
    let path = dir.join("stagnation.csv");
    let mut w = create_file(&path)?;
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "x,y,kind,stream_max")?;
        for s in &points {
            let kind = match s.kind {
                StagnationKind::Elliptic => "elliptic",
                StagnationKind::Hyperbolic => "hyperbolic",
            };
            writeln!(
                w,
                "{:.16e},{:.16e},{kind},{}",
                s.location.x,
                s.location.y,
                s.is_stream_maximum()
            )?;
        }
        w.flush()
    };
    emit().map_err(io_err(&path))?;

    let path = dir.join("psi_grid.csv");
    let mut w = create_file(&path)?;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let step = 1.0 / (PSI_GRID_POINTS - 1) as f64;
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "x,y,psi")?;
        for j in 0..PSI_GRID_POINTS {
            for i in 0..PSI_GRID_POINTS {
                let p = Point2::new(i as f64 * step, j as f64 * step);
                let psi = torus_flow::stream_function(p, 0.0, &steady);
                lo = lo.min(psi);
                hi = hi.max(psi);
                writeln!(w, "{:.16e},{:.16e},{:.16e}", p.x, p.y, psi)?;
            }
        }
        w.flush()
    };
    emit().map_err(io_err(&path))?;

    let eddy = if steady.amplitude != 0.0 { eddy_boundary(&steady).ok() } else { None };
    let lines = Streamlines {
        separatrix_level: eddy.map(|e| e.level),
        eddy_center: eddy.map(|e| e.center),
        saddle: eddy.map(|e| e.saddle),
        psi_min: lo,
        psi_max: hi,
        levels: contour_levels(lo, hi, eddy.map(|e| e.level)),
    };
    write_json(&dir.join("streamlines.json"), &lines)?;
    Ok(lines)
}

/// The `truth` command: streamline data plus the uncontrolled truth path.
pub fn run_truth(cfg: &ExperimentConfig) -> Result<Trajectory, ExperimentError> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_truth_artifacts(&cfg.flow, dir)?;
    let flow = |p: Point2, t: f64| torus_flow::velocity(p, t, &cfg.flow);
    let traj = crate::drifter::simulate_two_phase(&flow, &ControlSpec::none(), cfg.x0, &cfg.schedule);
    let path = dir.join("truth_path.csv");
    traj.write_csv(create_file(&path)?).map_err(io_err(&path))?;
    Ok(traj)
}

/// One line of the consolidated report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub index: usize,
    pub zeta: f64,
    pub cell: Option<CellSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub control: ControlKind,
    pub rows: Vec<ReportRow>,
    pub critical_zeta: Option<f64>,
    pub argmin_max: Option<f64>,
    pub argmin_l1: Option<f64>,
    pub argmin_l2: Option<f64>,
    pub total_seconds: f64,
    /// Missing or unreadable cells.
    pub problems: Vec<String>,
}

impl Report {
    pub fn points(&self) -> Vec<CurvePoint> {
        self.rows.iter().filter_map(|r| r.cell.as_ref().map(|c| c.point)).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.problems.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "{CURVE_HEADER},min,escape_time,acceptance_rate,beta_final,elapsed_seconds"
        )?;
        for c in self.rows.iter().filter_map(|r| r.cell.as_ref()) {
            let escape = c.escape_time.map(|t| t.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{:e},{},{},{:e},{}",
                c.point.csv_row(),
                c.min_variance,
                escape,
                c.acceptance_rate,
                c.beta_final,
                c.elapsed_seconds
            )?;
        }
        Ok(())
    }
}

fn argmin_by(points: &[CurvePoint], key: impl Fn(&CurvePoint) -> f64) -> Option<f64> {
    points
        .iter()
        .fold(None, |best: Option<&CurvePoint>, p| match best {
            Some(b) if key(b) <= key(p) => Some(b),
            _ => Some(p),
        })
        .map(|p| p.zeta)
}

/// Read a run directory back and summarise it; also writes `report.csv`.
pub fn report(run_dir: &Path) -> Result<Report, ExperimentError> {
    let cfg: ExperimentConfig = read_json(&run_dir.join("config.json"))?;
    let grid = cfg.resolved_grid();
    let mut rows = Vec::with_capacity(grid.len());
    let mut problems = Vec::new();
    for (index, &zeta) in grid.iter().enumerate() {
        let dir = cell_dir(run_dir, index);
        let cell = if dir.join(DONE_MARKER).exists() {
            match read_json::<CellSummary>(&dir.join("cell.json")) {
                Ok(c) => Some(c),
                Err(e) => {
                    problems.push(format!("cell {index} (zeta = {zeta}): {e}"));
                    None
                }
            }
        } else {
            let reason = fs::read_to_string(dir.join(FAILED_MARKER))
                .map(|m| format!("failed: {m}"))
                .unwrap_or_else(|_| "not completed".into());
            problems.push(format!("cell {index} (zeta = {zeta}): {reason}"));
            None
        };
        rows.push(ReportRow { index, zeta, cell });
    }
    let points: Vec<CurvePoint> = rows.iter().filter_map(|r| r.cell.as_ref().map(|c| c.point)).collect();
    let total_seconds = rows
        .iter()
        .filter_map(|r| r.cell.as_ref().map(|c| c.elapsed_seconds))
        .sum::<f64>()
        + read_json::<Stage1Summary>(&run_dir.join("stage1").join("stage1.json"))
            .map(|s| s.elapsed_seconds)
            .unwrap_or(0.0);
    let report = Report {
        control: cfg.control,
        critical_zeta: critical_zeta(&points),
        argmin_max: argmin_by(&points, |p| p.max),
        argmin_l1: argmin_by(&points, |p| p.l1),
        argmin_l2: argmin_by(&points, |p| p.l2),
        rows,
        total_seconds,
        problems,
    };
    let path = run_dir.join("report.csv");
    report.write_csv(create_file(&path)?).map_err(io_err(&path))?;
    Ok(report)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |z| z.to_string())
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "control: {}", self.control)?;
        writeln!(
            f,
            "{:>8} {:>12} {:>12} {:>12} {:>8} {:>10} {:>9}",
            "zeta", "max", "l1", "l2", "escaped", "<|v|>", "seconds"
        )?;
        for row in &self.rows {
            match &row.cell {
                Some(c) => writeln!(
                    f,
                    "{:>8} {:>12.5e} {:>12.5e} {:>12.5e} {:>8} {:>10.4} {:>9.1}",
                    row.zeta,
                    c.point.max,
                    c.point.l1,
                    c.point.l2,
                    c.point.escaped,
                    c.point.mean_flow_mag,
                    c.elapsed_seconds
                )?,
                None => writeln!(f, "{:>8} {:>12}", row.zeta, "missing")?,
            }
        }
        writeln!(f, "critical zeta: {}", opt(self.critical_zeta))?;
        writeln!(
            f,
            "argmin zeta: max {}, l1 {}, l2 {}",
            opt(self.argmin_max),
            opt(self.argmin_l1),
            opt(self.argmin_l2)
        )?;
        writeln!(f, "total compute: {:.1} s", self.total_seconds)?;
        for p in &self.problems {
            writeln!(f, "problem: {p}")?;
        }
        Ok(())
    }
}

/// Load a cell's sample store.
pub fn load_cell_samples(run_dir: &Path, index: usize) -> Result<SampleStore, ExperimentError> {
    Ok(SampleStore::load(&cell_dir(run_dir, index).join("samples.bin"))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grids() {
        let zonal = default_zeta_grid(ControlKind::Zonal, 0.0);
        assert_eq!(zonal.len(), 13);
        assert_eq!((zonal[0], zonal[3], zonal[12]), (0.0, 0.75, 3.0));
        let grad = default_zeta_grid(ControlKind::GradMean, 0.0);
        assert_eq!((grad[0], grad[1], grad[10]), (0.3, 0.325, 0.55));
        let grad_t = default_zeta_grid(ControlKind::GradMean, 0.1);
        assert_eq!(grad_t, vec![0.15, 0.18, 0.21, 0.24, 0.27, 0.3]);
    }

    #[test]
    fn config_validation() {
        let ok = ExperimentConfig::default();
        ok.validate().unwrap();
        for grid in [vec![], vec![0.5, 0.25], vec![-0.1], vec![0.0, 0.0]] {
            let c = ExperimentConfig {
                zeta_grid: Some(grid),
                ..ok.clone()
            };
            assert!(c.validate().is_err());
        }
        let c = ExperimentConfig { sigma: 0.0, ..ok.clone() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_json_gives_defaults() {
        let c: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        let c: ExperimentConfig =
            serde_json::from_str(r#"{"control": "bidirectional", "schedule": {"K": 4}}"#).unwrap();
        assert_eq!(c.control, ControlKind::Bidirectional);
        assert_eq!(c.schedule.k_obs(), 4);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"zeta": [1]}"#).is_err());
    }

    #[test]
    fn zero_zeta_cells_share_seeds_across_kinds() {
        let zonal = ExperimentConfig::default();
        let grad = ExperimentConfig {
            control: ControlKind::GradMean,
            ..zonal.clone()
        };
        assert_eq!(zonal.cell_seeds(0, 0.0), grad.cell_seeds(0, 0.0));
        assert_ne!(zonal.cell_seeds(1, 0.25), grad.cell_seeds(1, 0.25));
        assert_eq!(zonal.cell_seeds(1, 0.25).0.first, zonal.cell_seeds(5, 1.25).0.first);
    }

    #[test]
    fn contour_levels_contain_anchor() {
        let levels = contour_levels(-2.0, 1.0, Some(0.1));
        assert_eq!(levels.len(), STREAMLINE_LEVELS);
        assert!(levels.iter().any(|l| (l - 0.1).abs() < 1e-12));
        let h = levels[1] - levels[0];
        assert!(levels.windows(2).all(|w| ((w[1] - w[0]) - h).abs() < 1e-12));
    }

    #[test]
    fn argmin_picks_first_minimum() {
        let p = |zeta, l2| CurvePoint {
            zeta,
            max: 1.0,
            l1: 1.0,
            l2,
            escaped: false,
            mean_flow_mag: 0.0,
        };
        let pts = [p(0.0, 3.0), p(0.5, 1.0), p(1.0, 1.0)];
        assert_eq!(argmin_by(&pts, |p| p.l2), Some(0.5));
        assert_eq!(argmin_by(&pts, |p| p.max), Some(0.0));
        assert_eq!(argmin_by(&[], |p| p.max), None);
    }

    #[test]
    fn curve_csv_round_trip() {
        let pts = vec![
            CurvePoint {
                zeta: 0.25,
                max: 1.5e-3,
                l1: 2.0e-4,
                l2: 3.0e-4,
                escaped: true,
                mean_flow_mag: 1.2,
            };
            2
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        write_curve_csv(fs::File::create(&path).unwrap(), &pts).unwrap();
        assert_eq!(read_curve_csv(&path).unwrap(), pts);
        assert!(fs::read_to_string(&path).unwrap().starts_with(CURVE_HEADER));
    }
}
