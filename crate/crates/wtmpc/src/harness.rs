//! Monte Carlo experiment driver: open-loop violation studies, closed-loop
//! cost/violation studies, tube cross-section export and the configuration
//! surface behind the `wtmpc` CLI.
//!
//! Seed discipline: every Monte Carlo cell derives its own stream from the
//! root seed via [`crate::lti::split_seed`]. Sample pools are keyed by
//! `(n, repeat)` and rollout noise by `repeat` alone, so different modes and
//! radii face identical data and disturbances (paired comparisons), and
//! parallel and serial execution produce identical tables.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ambiguity::{propagate_tube, AmbiguityError, WassersteinTube};
use crate::conic::{ConicError, SolveOptions};
use crate::drcvar::DrcvarError;
use crate::geometry::{GeomError, Polytope, DEFAULT_MEMBERSHIP_TOL};
use crate::lti::{
    error_stack, make_lqr_gain, simulate_closed_loop, split_seed, ErrorStack, LinearSystem,
    LtiError, NoiseDataset, RiccatiOptions, SamplingMode, SimError, UniformOnPolytope,
};
use crate::mpc::{
    compute_terminal_set, Mode, MpcConfig, MpcController, MpcError, TerminalChoice, TerminalSet,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("problem infeasible at the initial state ({0})")]
    InfeasibleAtStart(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Lti(#[from] LtiError),
    #[error(transparent)]
    Geometry(#[from] GeomError),
    #[error(transparent)]
    Ambiguity(#[from] AmbiguityError),
    #[error(transparent)]
    Drcvar(#[from] DrcvarError),
    #[error(transparent)]
    Conic(#[from] ConicError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
}

impl HarnessError {
    /// CLI exit code: 2 config, 4 infeasible at start, 3 anything solver-side.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::InfeasibleAtStart(_) => 4,
            _ => 3,
        }
    }
}

/// A polytope in config form: either axis bounds or explicit H-rep rows.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SetSpec {
    #[serde(rename = "box", skip_serializing_if = "Option::is_none", default)]
    pub box_bounds: Option<Vec<[f64; 2]>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub f: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub g: Option<Vec<f64>>,
}

impl SetSpec {
    pub fn from_box(bounds: &[[f64; 2]]) -> Self {
        SetSpec {
            box_bounds: Some(bounds.to_vec()),
            f: None,
            g: None,
        }
    }

    pub fn build(&self) -> Result<Polytope, HarnessError> {
        match (&self.box_bounds, &self.f, &self.g) {
            (Some(b), None, None) => {
                let lo: Vec<f64> = b.iter().map(|r| r[0]).collect();
                let hi: Vec<f64> = b.iter().map(|r| r[1]).collect();
                Ok(Polytope::hyper_box(&lo, &hi)?)
            }
            (None, Some(f), Some(g)) => {
                let m = to_matrix(f).map_err(HarnessError::Config)?;
                Ok(Polytope::from_hrep(m, DVector::from_vec(g.clone()))?)
            }
            _ => Err(HarnessError::Config(
                "set spec needs either `box` or both `f` and `g`".into(),
            )),
        }
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
    if rows.is_empty() {
        return Err("matrix must have at least one row".into());
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err("ragged matrix rows".into());
    }
    let mut m = DMatrix::zeros(rows.len(), cols);
    for (i, r) in rows.iter().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

/// Plant, constraint sets and initial state. Defaults are the benchmark
/// double integrator with box noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemSpec {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub x0: Vec<f64>,
    pub w: SetSpec,
    pub x_set: SetSpec,
    pub u_set: SetSpec,
    /// feedback gain rows; when absent the LQR gain for (Q, R) is used
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_gain: Option<Vec<Vec<f64>>>,
}

impl Default for SystemSpec {
    fn default() -> Self {
        SystemSpec {
            a: vec![vec![1.0, 1.0], vec![0.0, 1.0]],
            b: vec![vec![0.5], vec![1.0]],
            x0: vec![-5.0, -2.0],
            w: SetSpec::from_box(&[[-0.15, 0.15], [-0.15, 0.15]]),
            x_set: SetSpec::from_box(&[[-10.0, 2.0], [-2.0, 2.0]]),
            u_set: SetSpec::from_box(&[[-1.0, 1.0]]),
            k_gain: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcSpec {
    pub horizon: usize,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub gamma: f64,
    pub epsilon: f64,
    pub n_trajectories: usize,
    pub mode: String,
    /// pool size per repeat; defaults to `n_trajectories * horizon`
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool_size: Option<usize>,
}

impl Default for MpcSpec {
    fn default() -> Self {
        MpcSpec {
            horizon: 10,
            q: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            r: vec![vec![0.1]],
            gamma: 0.2,
            epsilon: 0.01,
            n_trajectories: 20,
            mode: "wt_simple".into(),
            pool_size: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub epsilons: Vec<f64>,
    pub sample_counts: Vec<usize>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            epsilons: vec![0.0, 0.01, 0.1, 1.0],
            sample_counts: vec![10, 20, 50],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpenLoopSpec {
    pub mc_realizations: usize,
    pub center_repeats: usize,
}

impl Default for OpenLoopSpec {
    fn default() -> Self {
        OpenLoopSpec {
            mc_realizations: 10_000,
            center_repeats: 500,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClosedLoopSpec {
    pub t_steps: usize,
    pub repeats: usize,
    pub modes: Vec<String>,
}

impl Default for ClosedLoopSpec {
    fn default() -> Self {
        ClosedLoopSpec {
            t_steps: 15,
            repeats: 100,
            modes: vec!["robust".into(), "wt_simple".into()],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TubePlotSpec {
    /// boundary directions per step for the DR-CVaR region
    pub directions: usize,
    pub bisect_iters: usize,
}

impl Default for TubePlotSpec {
    fn default() -> Self {
        TubePlotSpec {
            directions: 24,
            bisect_iters: 26,
        }
    }
}

/// Full experiment configuration; the TOML config file mirrors this
/// structure and every field has the benchmark default.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub root_seed: u64,
    pub output_dir: PathBuf,
    pub system: SystemSpec,
    pub mpc: MpcSpec,
    pub sweep: SweepSpec,
    pub open_loop: OpenLoopSpec,
    pub closed_loop: ClosedLoopSpec,
    pub tube_plot: TubePlotSpec,
}

impl ExperimentConfig {
    pub fn benchmark_default() -> Self {
        ExperimentConfig {
            root_seed: 7,
            output_dir: PathBuf::from("out"),
            ..Default::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        if cfg.output_dir.as_os_str().is_empty() {
            cfg.output_dir = PathBuf::from("out");
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn parse_mode(name: &str) -> Result<Mode, HarnessError> {
        match name {
            "wt_simple" => Ok(Mode::WtSimple),
            "wt_tightened" => Ok(Mode::WtTightened),
            "robust" => Ok(Mode::Robust),
            other => Err(HarnessError::Config(format!("unknown mode `{other}`"))),
        }
    }

    /// Build the shared pieces every experiment needs.
    pub fn resolve(&self) -> Result<ResolvedExperiment, HarnessError> {
        let a = to_matrix(&self.system.a).map_err(HarnessError::Config)?;
        let b = to_matrix(&self.system.b).map_err(HarnessError::Config)?;
        let q = to_matrix(&self.mpc.q).map_err(HarnessError::Config)?;
        let r = to_matrix(&self.mpc.r).map_err(HarnessError::Config)?;
        let w = self.system.w.build()?;
        let x_set = self.system.x_set.build()?;
        let u_set = self.system.u_set.build()?;
        let k = match &self.system.k_gain {
            Some(rows) => to_matrix(rows).map_err(HarnessError::Config)?,
            None => make_lqr_gain(&a, &b, &q, &r, RiccatiOptions::default())
                .map_err(|e| HarnessError::Config(format!("LQR gain: {e}")))?,
        };
        let sys = LinearSystem::new(a, b, k, w).map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.mpc.horizon == 0 {
            return Err(HarnessError::Config("horizon must be >= 1".into()));
        }
        let stack = error_stack(&sys, self.mpc.horizon)?;
        let terminal = compute_terminal_set(&sys, &stack, &x_set, &u_set)?;
        let x0 = DVector::from_vec(self.system.x0.clone());
        if x0.len() != sys.state_dim() {
            return Err(HarnessError::Config("x0 dimension mismatch".into()));
        }
        Ok(ResolvedExperiment {
            sys,
            stack,
            terminal,
            x_set,
            u_set,
            x0,
            q,
            r,
        })
    }

    fn mpc_config(&self, mode: Mode, eps: f64, n: usize, res: &ResolvedExperiment) -> MpcConfig {
        MpcConfig {
            n_horizon: self.mpc.horizon,
            q: res.q.clone(),
            r: res.r.clone(),
            gamma: self.mpc.gamma,
            eps,
            n_traj: n,
            mode,
            terminal: TerminalChoice::Given(res.terminal.zf.clone()),
            seed: self.root_seed,
        }
    }
}

/// Shared, mode-independent experiment state.
pub struct ResolvedExperiment {
    pub sys: LinearSystem,
    pub stack: ErrorStack,
    pub terminal: TerminalSet,
    pub x_set: Polytope,
    pub u_set: Polytope,
    pub x0: DVector<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl ResolvedExperiment {
    /// Fresh dataset for a `(n, repeat)` cell: a pool of `pool_size` uniform
    /// draws chunked into `n` horizon-length trajectories without
    /// replacement.
    pub fn dataset(
        &self,
        cfg: &ExperimentConfig,
        n: usize,
        repeat: usize,
    ) -> Result<NoiseDataset, HarnessError> {
        let horizon = cfg.mpc.horizon;
        let pool_size = cfg.mpc.pool_size.unwrap_or(n * horizon).max(n * horizon);
        let seed = split_seed(cfg.root_seed, 0x10, ((n as u64) << 32) | repeat as u64);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let sampler = UniformOnPolytope::new(&self.sys.w)?;
        let pool = sampler.sample_many(pool_size, &mut rng);
        Ok(NoiseDataset::from_pool(
            pool,
            n,
            horizon,
            split_seed(cfg.root_seed, 0x11, ((n as u64) << 32) | repeat as u64),
            SamplingMode::WithoutReplacement,
        )?)
    }

    pub fn tube(
        &self,
        data: &NoiseDataset,
        eps: f64,
        horizon: usize,
    ) -> Result<WassersteinTube, HarnessError> {
        Ok(propagate_tube(&self.stack, data, eps, horizon)?)
    }
}

/// One result row keyed by `(mode, epsilon, n, repeat)`.
#[derive(Debug, Clone)]
pub struct ResultRow {
    pub mode: String,
    pub epsilon: f64,
    pub n: usize,
    pub repeat: usize,
    pub violation_frequency: f64,
    pub closed_loop_cost: f64,
    pub infeasible_events: usize,
    pub mean_solve_time: f64,
}

// wall-clock timing is environment noise; determinism contracts compare
// everything else
impl PartialEq for ResultRow {
    fn eq(&self, other: &Self) -> bool {
        self.mode == other.mode
            && self.epsilon.total_cmp(&other.epsilon).is_eq()
            && self.n == other.n
            && self.repeat == other.repeat
            && self
                .violation_frequency
                .total_cmp(&other.violation_frequency)
                .is_eq()
            && self
                .closed_loop_cost
                .total_cmp(&other.closed_loop_cost)
                .is_eq()
            && self.infeasible_events == other.infeasible_events
    }
}

/// Per-step violation frequencies (open loop).
#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub mode: String,
    pub epsilon: f64,
    pub n: usize,
    pub repeat: usize,
    pub k: usize,
    pub frequency: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ResultTable {
    pub kind: String,
    pub rows: Vec<ResultRow>,
    pub per_step: Vec<StepRow>,
}

impl ResultTable {
    fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            (a.mode.as_str(), a.n, a.repeat)
                .cmp(&(b.mode.as_str(), b.n, b.repeat))
                .then(a.epsilon.total_cmp(&b.epsilon))
        });
        self.per_step.sort_by(|a, b| {
            (a.mode.as_str(), a.n, a.repeat, a.k)
                .cmp(&(b.mode.as_str(), b.n, b.repeat, b.k))
                .then(a.epsilon.total_cmp(&b.epsilon))
        });
    }

    /// Mean of a metric over rows selected by mode and (optionally) eps/n.
    pub fn mean_where(
        &self,
        mode: &str,
        eps: Option<f64>,
        n: Option<usize>,
        metric: impl Fn(&ResultRow) -> f64,
    ) -> Option<f64> {
        let selected: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| {
                r.mode == mode
                    && eps.map(|e| r.epsilon == e).unwrap_or(true)
                    && n.map(|k| r.n == k).unwrap_or(true)
            })
            .map(metric)
            .collect();
        if selected.is_empty() {
            None
        } else {
            Some(selected.iter().sum::<f64>() / selected.len() as f64)
        }
    }

    pub fn values_where(
        &self,
        mode: &str,
        eps: Option<f64>,
        n: Option<usize>,
        metric: impl Fn(&ResultRow) -> f64,
    ) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| {
                r.mode == mode
                    && eps.map(|e| r.epsilon == e).unwrap_or(true)
                    && n.map(|k| r.n == k).unwrap_or(true)
            })
            .map(metric)
            .collect()
    }
}

/// Open-loop study: per `(epsilon, n, repeat)` draw a fresh pool, solve one
/// plan at `x0`, roll it out under `mc_realizations` fresh noise
/// trajectories and record the fraction violating the state set at any step
/// `k in [1:N]`. The robust baseline runs once per repeat.
pub fn run_open_loop(cfg: &ExperimentConfig) -> Result<ResultTable, HarnessError> {
    let res = cfg.resolve()?;
    // cells: full sweep cross product for the Wasserstein mode + robust rows
    let mut cells: Vec<(Mode, f64, usize, usize)> = Vec::new();
    for repeat in 0..cfg.open_loop.center_repeats {
        for &eps in &cfg.sweep.epsilons {
            for &n in &cfg.sweep.sample_counts {
                cells.push((Mode::WtSimple, eps, n, repeat));
            }
        }
        cells.push((Mode::Robust, 0.0, 0, repeat));
    }
    let outcomes: Result<Vec<(ResultRow, Vec<StepRow>)>, HarnessError> = cells
        .par_iter()
        .map(|&(mode, eps, n, repeat)| open_loop_cell(cfg, &res, mode, eps, n, repeat))
        .collect();
    let mut table = ResultTable {
        kind: "open_loop".into(),
        ..Default::default()
    };
    for (row, steps) in outcomes? {
        table.rows.push(row);
        table.per_step.extend(steps);
    }
    table.sort();
    Ok(table)
}

fn open_loop_cell(
    cfg: &ExperimentConfig,
    res: &ResolvedExperiment,
    mode: Mode,
    eps: f64,
    n: usize,
    repeat: usize,
) -> Result<(ResultRow, Vec<StepRow>), HarnessError> {
    let n_horizon = cfg.mpc.horizon;
    let n_eff = if mode == Mode::Robust { 1 } else { n };
    let data = res.dataset(cfg, n_eff.max(1), repeat)?;
    let tube = res.tube(&data, eps, n_horizon)?;
    let mut ctrl = MpcController::new(
        &res.sys,
        &res.stack,
        &tube,
        &res.x_set,
        &res.u_set,
        cfg.mpc_config(mode, eps, n_eff.max(1), res),
    )?;
    let plan = ctrl.solve_open_loop(&res.x0).map_err(|e| match e {
        MpcError::Infeasible => HarnessError::InfeasibleAtStart(format!(
            "{} at eps={eps} n={n} repeat={repeat}",
            mode.as_str()
        )),
        other => HarnessError::Mpc(other),
    })?;
    // roll the open-loop plan: x_k = z_k* + e_k with e+ = A_K e + w
    let mc = cfg.open_loop.mc_realizations;
    let mut rng = ChaCha12Rng::seed_from_u64(split_seed(cfg.root_seed, 0x20, repeat as u64));
    let sampler = UniformOnPolytope::new(&res.sys.w)?;
    let mut any_violation = 0usize;
    let mut step_violations = vec![0usize; n_horizon];
    let a_k = res.sys.a_k().clone();
    for _ in 0..mc {
        let mut e = DVector::zeros(res.sys.state_dim());
        let mut violated = false;
        for k in 1..=n_horizon {
            let w = sampler.sample(&mut rng);
            e = &a_k * &e + &w;
            let x = &plan.z[k] + &e;
            if !res.x_set.contains(&x, DEFAULT_MEMBERSHIP_TOL)? {
                violated = true;
                step_violations[k - 1] += 1;
            }
        }
        if violated {
            any_violation += 1;
        }
    }
    let row = ResultRow {
        mode: mode.as_str().into(),
        epsilon: eps,
        n,
        repeat,
        violation_frequency: any_violation as f64 / mc as f64,
        closed_loop_cost: plan.objective,
        infeasible_events: 0,
        mean_solve_time: plan.solve_time,
    };
    let steps = (1..=n_horizon)
        .map(|k| StepRow {
            mode: mode.as_str().into(),
            epsilon: eps,
            n,
            repeat,
            k,
            frequency: step_violations[k - 1] as f64 / mc as f64,
        })
        .collect();
    Ok((row, steps))
}

/// Closed-loop study: per `(mode, epsilon, n, repeat)` simulate `t_steps`
/// receding-horizon steps under fresh uniform noise and record the realized
/// violation frequency over `t in [1:T]`, the accumulated realized stage
/// cost `sum_t x_t'Q x_t + u_t'R u_t` for `t in [0:T-1]`, fallback events
/// and solve times. Noise is keyed by `repeat` only, so modes and radii are
/// paired.
pub fn run_closed_loop(cfg: &ExperimentConfig) -> Result<ResultTable, HarnessError> {
    let res = cfg.resolve()?;
    let mut cells: Vec<(Mode, f64, usize, usize)> = Vec::new();
    for name in &cfg.closed_loop.modes {
        let mode = ExperimentConfig::parse_mode(name)?;
        for repeat in 0..cfg.closed_loop.repeats {
            match mode {
                Mode::Robust => cells.push((mode, 0.0, 0, repeat)),
                _ => {
                    for &eps in &cfg.sweep.epsilons {
                        for &n in &cfg.sweep.sample_counts {
                            cells.push((mode, eps, n, repeat));
                        }
                    }
                }
            }
        }
    }
    let outcomes: Result<Vec<ResultRow>, HarnessError> = cells
        .par_iter()
        .map(|&(mode, eps, n, repeat)| closed_loop_cell(cfg, &res, mode, eps, n, repeat))
        .collect();
    let mut table = ResultTable {
        kind: "closed_loop".into(),
        rows: outcomes?,
        per_step: Vec::new(),
    };
    table.sort();
    Ok(table)
}

fn closed_loop_cell(
    cfg: &ExperimentConfig,
    res: &ResolvedExperiment,
    mode: Mode,
    eps: f64,
    n: usize,
    repeat: usize,
) -> Result<ResultRow, HarnessError> {
    let t_steps = cfg.closed_loop.t_steps;
    let n_eff = if mode == Mode::Robust { 1 } else { n };
    let data = res.dataset(cfg, n_eff.max(1), repeat)?;
    let tube = res.tube(&data, eps, cfg.mpc.horizon)?;
    let mut ctrl = MpcController::new(
        &res.sys,
        &res.stack,
        &tube,
        &res.x_set,
        &res.u_set,
        cfg.mpc_config(mode, eps, n_eff.max(1), res),
    )?;
    let mut rng = ChaCha12Rng::seed_from_u64(split_seed(cfg.root_seed, 0x30, repeat as u64));
    let sampler = UniformOnPolytope::new(&res.sys.w)?;
    let noise = sampler.sample_many(t_steps, &mut rng);
    let sim = simulate_closed_loop(
        &res.sys, &mut ctrl, &res.x0, t_steps, &noise, &res.q, &res.r,
    );
    let (log, infeasible_events) = match sim {
        Ok(log) => {
            let fb = log.fallback_steps.len();
            (log, fb)
        }
        Err(SimError::ControllerInfeasible { .. }) => {
            // metrics undefined for a truncated run; the event count is the record
            return Ok(ResultRow {
                mode: mode.as_str().into(),
                epsilon: eps,
                n,
                repeat,
                violation_frequency: f64::NAN,
                closed_loop_cost: f64::NAN,
                infeasible_events: 1,
                mean_solve_time: 0.0,
            });
        }
        Err(e) => return Err(HarnessError::Config(format!("simulation failed: {e}"))),
    };
    let mut violations = 0usize;
    for x in log.states.iter().skip(1) {
        if !res.x_set.contains(x, DEFAULT_MEMBERSHIP_TOL)? {
            violations += 1;
        }
    }
    let cost: f64 = log.stage_costs.iter().sum();
    let mean_solve_time = if log.solve_times.is_empty() {
        0.0
    } else {
        log.solve_times.iter().sum::<f64>() / log.solve_times.len() as f64
    };
    Ok(ResultRow {
        mode: mode.as_str().into(),
        epsilon: eps,
        n,
        repeat,
        violation_frequency: violations as f64 / t_steps as f64,
        closed_loop_cost: cost,
        infeasible_events,
        mean_solve_time,
    })
}

/// Write `results.csv`, per-step violations, the trade-off summary and a
/// config echo. Deterministic ordering and shortest-roundtrip decimals, so
/// identical seeds give byte-identical files.
pub fn emit_outputs(
    table: &ResultTable,
    cfg: &ExperimentConfig,
    dir: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    // deterministic metrics only; wall-clock timings go to timings.csv
    let results = dir.join("results.csv");
    {
        let mut f = fs::File::create(&results)?;
        writeln!(
            f,
            "kind,mode,epsilon,n,repeat,violation_frequency,closed_loop_cost,infeasible_events"
        )?;
        for r in &table.rows {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{}",
                table.kind,
                r.mode,
                r.epsilon,
                r.n,
                r.repeat,
                r.violation_frequency,
                r.closed_loop_cost,
                r.infeasible_events
            )?;
        }
    }
    written.push(results);

    let timings = dir.join("timings.csv");
    {
        let mut f = fs::File::create(&timings)?;
        writeln!(f, "kind,mode,epsilon,n,repeat,mean_solve_time_s")?;
        for r in &table.rows {
            writeln!(
                f,
                "{},{},{},{},{},{}",
                table.kind, r.mode, r.epsilon, r.n, r.repeat, r.mean_solve_time
            )?;
        }
    }
    written.push(timings);

    if !table.per_step.is_empty() {
        let path = dir.join("violations_by_step.csv");
        let mut f = fs::File::create(&path)?;
        writeln!(f, "mode,epsilon,n,repeat,k,frequency")?;
        for s in &table.per_step {
            writeln!(
                f,
                "{},{},{},{},{},{}",
                s.mode, s.epsilon, s.n, s.repeat, s.k, s.frequency
            )?;
        }
        written.push(path);
    }

    // long-format per-(mode, eps, n) summary: the safety/performance trade-off
    let tradeoff = dir.join("tradeoff.csv");
    {
        let mut f = fs::File::create(&tradeoff)?;
        writeln!(
            f,
            "kind,mode,epsilon,n,mean_violation_frequency,mean_cost,total_infeasible_events"
        )?;
        let mut keys: Vec<(String, f64, usize)> = table
            .rows
            .iter()
            .map(|r| (r.mode.clone(), r.epsilon, r.n))
            .collect();
        keys.sort_by(|a, b| {
            (a.0.as_str(), a.2)
                .cmp(&(b.0.as_str(), b.2))
                .then(a.1.total_cmp(&b.1))
        });
        keys.dedup();
        for (mode, eps, n) in keys {
            let sel: Vec<&ResultRow> = table
                .rows
                .iter()
                .filter(|r| r.mode == mode && r.epsilon == eps && r.n == n)
                .collect();
            let finite: Vec<&&ResultRow> = sel
                .iter()
                .filter(|r| r.violation_frequency.is_finite())
                .collect();
            let mv = finite.iter().map(|r| r.violation_frequency).sum::<f64>()
                / finite.len().max(1) as f64;
            let mc =
                finite.iter().map(|r| r.closed_loop_cost).sum::<f64>() / finite.len().max(1) as f64;
            let inf: usize = sel.iter().map(|r| r.infeasible_events).sum();
            writeln!(
                f,
                "{},{},{},{},{},{},{}",
                table.kind, mode, eps, n, mv, mc, inf
            )?;
        }
    }
    written.push(tradeoff);

    let echo = dir.join("config_echo.toml");
    fs::write(&echo, cfg.to_toml_string())?;
    written.push(echo);
    Ok(written)
}

/// Tube cross-section export: robust tube vertices `E_k`, terminal set
/// vertices, the nominal plans of both controllers, and boundary samples of
/// the DR-CVaR regions found by bisection along rays from the origin.
pub fn run_tube_sections(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let res = cfg.resolve()?;
    if res.sys.state_dim() != 2 {
        return Err(HarnessError::Config(
            "tube sections are a planar (d = 2) visualization".into(),
        ));
    }
    let n_horizon = cfg.mpc.horizon;
    let n = cfg.mpc.n_trajectories;
    let data = res.dataset(cfg, n, 0)?;
    let tube = res.tube(&data, cfg.mpc.epsilon, n_horizon)?;
    let loss = crate::drcvar::PwaLoss::from_state_set(&res.x_set)?;
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let path = dir.join("tube_sections.csv");
    {
        let mut f = fs::File::create(&path)?;
        writeln!(f, "set,k,idx,x1,x2")?;
        for k in 1..=n_horizon {
            for (i, v) in res.stack.support(k).vertices()?.iter().enumerate() {
                writeln!(f, "robust_tube,{},{},{},{}", k, i, v[0], v[1])?;
            }
        }
        for (i, v) in res.terminal.zf.vertices()?.iter().enumerate() {
            writeln!(f, "terminal,{},{},{},{}", n_horizon, i, v[0], v[1])?;
        }
        // DR-CVaR region boundary per step, by bisection from the origin
        let dirs = cfg.tube_plot.directions;
        for k in 1..=n_horizon {
            let block = crate::drcvar::build_gamma_block(
                tube.step(k),
                &loss,
                cfg.mpc.gamma,
                None,
                Default::default(),
                Default::default(),
            )?;
            let opts = SolveOptions::default();
            // boundary probes can terminate ambiguously right on the region
            // edge; for drawing purposes an undecided probe counts as outside
            let probe = |z: &DVector<f64>| block.feasible_at(z, opts).unwrap_or(false);
            for i in 0..dirs {
                let th = 2.0 * std::f64::consts::PI * i as f64 / dirs as f64;
                let dir_v = DVector::from_vec(vec![th.cos(), th.sin()]);
                let mut lo = 0.0;
                let mut hi = 30.0;
                if !probe(&DVector::zeros(2)) {
                    break; // origin outside: skip this step's boundary
                }
                for _ in 0..cfg.tube_plot.bisect_iters {
                    let mid = 0.5 * (lo + hi);
                    if probe(&(&dir_v * mid)) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let b = &dir_v * lo;
                writeln!(f, "cvar_region,{},{},{},{}", k, i, b[0], b[1])?;
            }
        }
    }
    written.push(path);

    // center atoms and the ball manifest
    let centers = dir.join("tube_centers.csv");
    {
        let mut f = fs::File::create(&centers)?;
        tube.write_centers_csv(&mut f)?;
    }
    written.push(centers);
    let manifest = dir.join("tube_manifest.csv");
    {
        let mut f = fs::File::create(&manifest)?;
        tube.write_manifest_csv(&mut f)?;
    }
    written.push(manifest);

    // nominal plans of both controllers for overlay
    let plans = dir.join("nominal_plans.csv");
    {
        let mut f = fs::File::create(&plans)?;
        writeln!(f, "mode,k,x1,x2")?;
        for (mode, eps) in [(Mode::Robust, 0.0), (Mode::WtSimple, cfg.mpc.epsilon)] {
            let mut ctrl = MpcController::new(
                &res.sys,
                &res.stack,
                &tube,
                &res.x_set,
                &res.u_set,
                cfg.mpc_config(mode, eps, n, &res),
            )?;
            let plan = ctrl.solve_open_loop(&res.x0).map_err(|e| match e {
                MpcError::Infeasible => HarnessError::InfeasibleAtStart(mode.as_str().to_string()),
                other => HarnessError::Mpc(other),
            })?;
            for (k, z) in plan.z.iter().enumerate() {
                writeln!(f, "{},{},{},{}", mode.as_str(), k, z[0], z[1])?;
            }
        }
    }
    written.push(plans);
    Ok(written)
}

/// `dump-gamma`: describe the nominal constraint blocks of the configured
/// controller at one step.
pub fn dump_gamma(cfg: &ExperimentConfig, step: usize) -> Result<String, HarnessError> {
    let res = cfg.resolve()?;
    if step == 0 || step >= cfg.mpc.horizon.max(1) {
        return Err(HarnessError::Config(format!(
            "step must lie in [1, {}]",
            cfg.mpc.horizon.saturating_sub(1)
        )));
    }
    let mode = ExperimentConfig::parse_mode(&cfg.mpc.mode)?;
    let n = cfg.mpc.n_trajectories;
    let data = res.dataset(cfg, n, 0)?;
    let tube = res.tube(&data, cfg.mpc.epsilon, cfg.mpc.horizon)?;
    let ctrl = MpcController::new(
        &res.sys,
        &res.stack,
        &tube,
        &res.x_set,
        &res.u_set,
        cfg.mpc_config(mode, cfg.mpc.epsilon, n, &res),
    )?;
    let all = ctrl.describe_state_sets();
    let filtered: String = all
        .lines()
        .filter(|l| l.starts_with(&format!("k={step} ")))
        .map(|l| format!("{l}\n"))
        .collect();
    Ok(filtered)
}
