//! Receding-horizon controllers: the Wasserstein tube MPC and the robust
//! tube MPC baseline, plus the terminal invariant set.
//!
//! Over a horizon `N` the program decides nominal states `z_k`, inputs
//! `v_k = K z_k + c_k` and feedforwards `c_k`, minimizing
//! `sum_{k<N} z_k'Q z_k + v_k'R v_k` subject to
//!
//! * `z_{k+1} = A z_k + B v_k`, `z_0 = x_t` (the measured state),
//! * `v_k` in `U (-) K E_k` for `k < N`,
//! * `z_k` in `Z_k` for `1 <= k <= N-1`, and
//! * `z_N` in the terminal set.
//!
//! The three modes differ only in `Z_k`: the robust baseline uses
//! `X (-) E_k`, the plain Wasserstein mode uses the DR-CVaR region, and the
//! tightened mode intersects per-`p` offset blocks, which buys recursive
//! feasibility. The applied input is `u_t = K x_t + c_0*`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::ambiguity::{AmbiguityError, WassersteinTube};
use crate::conic::{ConicError, ConicProgram, SolveOptions, SolveStatus, SparseRow};
use crate::drcvar::{
    build_gamma_block, build_tightened_spec, BudgetScaling, ConeForm, DrcvarError, GammaBlock,
    PwaLoss, TightenedSetSpec,
};
use crate::geometry::{GeomError, Polytope};
use crate::lti::{ControlStep, ControllerError, ErrorStack, FeedbackController, LinearSystem};

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("no robust invariant terminal set within {iterations} iterations")]
    NoInvariantSet { iterations: usize },
    #[error("tightened set is empty: {0}")]
    InfeasibleTightening(String),
    #[error("problem infeasible at the measured state")]
    Infeasible,
    #[error(transparent)]
    Geometry(#[from] GeomError),
    #[error(transparent)]
    Conic(#[from] ConicError),
    #[error(transparent)]
    Drcvar(#[from] DrcvarError),
    #[error(transparent)]
    Ambiguity(#[from] AmbiguityError),
}

/// Which nominal constraint sets the controller enforces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// `Z_k = Gamma_k` (the benchmark study's setting).
    WtSimple,
    /// `Z_k` per the recursive-feasibility tightening.
    WtTightened,
    /// `Z_k = X (-) E_k`.
    Robust,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::WtSimple => "wt_simple",
            Mode::WtTightened => "wt_tightened",
            Mode::Robust => "robust",
        }
    }
}

#[derive(Debug, Clone)]
pub enum TerminalChoice {
    /// Compute a robust positively invariant set.
    Auto,
    /// Use the given set (validated against the terminal conditions).
    Given(Polytope),
}

/// Controller configuration; `n_traj` and `eps` only matter in the
/// Wasserstein modes.
#[derive(Debug, Clone)]
pub struct MpcConfig {
    pub n_horizon: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub gamma: f64,
    pub eps: f64,
    pub n_traj: usize,
    pub mode: Mode,
    pub terminal: TerminalChoice,
    pub seed: u64,
}

impl MpcConfig {
    fn validate(&self, sys: &LinearSystem) -> Result<(), MpcError> {
        let d = sys.state_dim();
        let m = sys.input_dim();
        if self.n_horizon == 0 {
            return Err(MpcError::ConfigInvalid("horizon must be >= 1".into()));
        }
        if self.q.nrows() != d || self.q.ncols() != d {
            return Err(MpcError::ConfigInvalid("Q must be d x d".into()));
        }
        if self.r.nrows() != m || self.r.ncols() != m {
            return Err(MpcError::ConfigInvalid("R must be m x m".into()));
        }
        if matches!(self.mode, Mode::WtSimple | Mode::WtTightened) {
            if !(crate::drcvar::MIN_GAMMA..1.0).contains(&self.gamma) {
                return Err(MpcError::ConfigInvalid(format!(
                    "gamma = {} outside [{}, 1)",
                    self.gamma,
                    crate::drcvar::MIN_GAMMA
                )));
            }
            if self.eps < 0.0 {
                return Err(MpcError::ConfigInvalid("eps must be >= 0".into()));
            }
            if self.n_traj == 0 {
                return Err(MpcError::ConfigInvalid("n_traj must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Margins of the three terminal-set conditions; all nonnegative when the
/// set is valid.
#[derive(Debug, Clone, Copy)]
pub struct TerminalCertificate {
    /// `K Zf` inside the tightened input set.
    pub input_margin: f64,
    /// `A_K Zf (+) A_K^N W` inside `Zf`.
    pub invariance_margin: f64,
    /// `Zf` inside `X (-) E_N`.
    pub state_margin: f64,
}

impl TerminalCertificate {
    pub fn satisfied(&self, tol: f64) -> bool {
        self.input_margin >= -tol && self.invariance_margin >= -tol && self.state_margin >= -tol
    }
}

#[derive(Debug, Clone)]
pub struct TerminalSet {
    pub zf: Polytope,
    pub certificate: TerminalCertificate,
    pub iterations: usize,
}

const TERMINAL_ITER_CAP: usize = 200;

/// Robust positively invariant terminal set: the fixed point of
/// `Omega <- Omega and pre(Omega)` starting from
/// `(X (-) E_N) and {z : K z in U (-) K E_N}`, where
/// `pre(Omega) = {z : A_K z + A_K^N w in Omega for all w in W}`.
pub fn compute_terminal_set(
    sys: &LinearSystem,
    stack: &ErrorStack,
    x_set: &Polytope,
    u_set: &Polytope,
) -> Result<TerminalSet, MpcError> {
    let n = stack.horizon;
    let e_n = stack.support(n);
    let x_tight = x_set.pontryagin_diff(e_n)?;
    if x_tight.is_empty()? {
        return Err(MpcError::InfeasibleTightening(
            "X (-) E_N is empty; shorten the horizon or enlarge X".into(),
        ));
    }
    let ke_n = e_n.linear_image(&sys.k)?;
    let u_tight = u_set.pontryagin_diff(&ke_n)?;
    if u_tight.is_empty()? {
        return Err(MpcError::InfeasibleTightening(
            "U (-) K E_N is empty; shorten the horizon or enlarge U".into(),
        ));
    }
    // seed: state tightening plus the input rows pulled back through K
    let hx = x_tight.hrep()?;
    let hu = u_tight.hrep()?;
    let d = sys.state_dim();
    let fu_k = &hu.f * &sys.k;
    let rows = hx.f.nrows() + fu_k.nrows();
    let mut f = DMatrix::zeros(rows, d);
    let mut g = DVector::zeros(rows);
    f.view_mut((0, 0), (hx.f.nrows(), d)).copy_from(&hx.f);
    g.rows_mut(0, hx.g.len()).copy_from(&hx.g);
    f.view_mut((hx.f.nrows(), 0), (fu_k.nrows(), d))
        .copy_from(&fu_k);
    g.rows_mut(hx.g.len(), hu.g.len()).copy_from(&hu.g);
    let mut omega = Polytope::from_hrep(f, g)?.normalized()?;
    if omega.is_empty()? {
        return Err(MpcError::InfeasibleTightening(
            "terminal seed set is empty".into(),
        ));
    }

    let a_k = sys.a_k();
    let a_k_n = stack.a_k_power(n);
    let mut iterations = 0;
    loop {
        iterations += 1;
        if iterations > TERMINAL_ITER_CAP {
            return Err(MpcError::NoInvariantSet {
                iterations: TERMINAL_ITER_CAP,
            });
        }
        let h = omega.hrep()?.clone();
        let mut fresh: Vec<(DVector<f64>, f64)> = Vec::new();
        for i in 0..h.f.nrows() {
            let row = h.f.row(i).transpose();
            let shift = sys.w.support(&(a_k_n.transpose() * &row))?;
            let pre_normal = a_k.transpose() * &row;
            let pre_rhs = h.g[i] - shift;
            // redundant against the current iterate?
            if omega.support(&pre_normal)? <= pre_rhs + 1e-10 {
                continue;
            }
            fresh.push((pre_normal, pre_rhs));
        }
        if fresh.is_empty() {
            break;
        }
        let total = h.f.nrows() + fresh.len();
        let mut f2 = DMatrix::zeros(total, d);
        let mut g2 = DVector::zeros(total);
        f2.view_mut((0, 0), (h.f.nrows(), d)).copy_from(&h.f);
        g2.rows_mut(0, h.g.len()).copy_from(&h.g);
        for (j, (normal, rhs)) in fresh.iter().enumerate() {
            f2.row_mut(h.f.nrows() + j).copy_from(&normal.transpose());
            g2[h.g.len() + j] = *rhs;
        }
        omega = Polytope::from_hrep(f2, g2)?.normalized()?;
        if omega.is_empty()? {
            return Err(MpcError::InfeasibleTightening(
                "invariant iteration emptied the terminal set".into(),
            ));
        }
    }

    let certificate = terminal_certificate(sys, stack, &omega, &x_tight, &u_tight)?;
    Ok(TerminalSet {
        zf: omega,
        certificate,
        iterations,
    })
}

fn terminal_certificate(
    sys: &LinearSystem,
    stack: &ErrorStack,
    zf: &Polytope,
    x_tight: &Polytope,
    u_tight: &Polytope,
) -> Result<TerminalCertificate, MpcError> {
    let n = stack.horizon;
    let a_k = sys.a_k();
    let a_k_n = stack.a_k_power(n);
    let hu = u_tight.hrep()?;
    let mut input_margin = f64::INFINITY;
    for i in 0..hu.f.nrows() {
        let row = hu.f.row(i).transpose();
        input_margin = input_margin.min(hu.g[i] - zf.support(&(sys.k.transpose() * &row))?);
    }
    let hz = zf.hrep()?;
    let mut invariance_margin = f64::INFINITY;
    for i in 0..hz.f.nrows() {
        let row = hz.f.row(i).transpose();
        let reach =
            zf.support(&(a_k.transpose() * &row))? + sys.w.support(&(a_k_n.transpose() * &row))?;
        invariance_margin = invariance_margin.min(hz.g[i] - reach);
    }
    let hx = x_tight.hrep()?;
    let mut state_margin = f64::INFINITY;
    for i in 0..hx.f.nrows() {
        let row = hx.f.row(i).transpose();
        state_margin = state_margin.min(hx.g[i] - zf.support(&row)?);
    }
    Ok(TerminalCertificate {
        input_margin,
        invariance_margin,
        state_margin,
    })
}

/// Per-step nominal constraint data, kept for membership re-checks.
#[derive(Debug, Clone)]
enum StateSets {
    Robust(Vec<Polytope>),
    Simple(Vec<GammaBlock>),
    Tightened(Vec<TightenedSetSpec>),
}

/// Variable layout of the assembled program.
#[derive(Debug, Clone)]
struct Layout {
    d: usize,
    m: usize,
    n: usize,
    /// first equality row of the `z_0 = x_t` block
    x0_row: usize,
}

impl Layout {
    fn z_var(&self, k: usize, i: usize) -> usize {
        k * self.d + i
    }
    fn v_var(&self, k: usize, i: usize) -> usize {
        (self.n + 1) * self.d + k * self.m + i
    }
    fn c_var(&self, k: usize, i: usize) -> usize {
        (self.n + 1) * self.d + self.n * self.m + k * self.m + i
    }
}

/// One solved open-loop plan.
#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub z: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
    pub c: Vec<DVector<f64>>,
    pub objective: f64,
    pub solve_time: f64,
    /// solver reached its iteration cap but the iterate was usable
    pub reduced_accuracy: bool,
}

/// The receding-horizon controller. The conic program is assembled once;
/// each step only rewrites the right-hand side of the `z_0 = x_t` rows.
pub struct MpcController {
    sys: LinearSystem,
    pub cfg: MpcConfig,
    input_sets: Vec<Polytope>,
    state_sets: StateSets,
    pub terminal: TerminalSet,
    prog: ConicProgram,
    layout: Layout,
    solve_opts: SolveOptions,
    /// steps where the plain-feedback fallback was applied
    pub fallback_count: usize,
}

impl MpcController {
    /// Build the controller. `tube` is required by the Wasserstein modes and
    /// must cover the horizon; the robust baseline ignores radius and atoms.
    pub fn new(
        sys: &LinearSystem,
        stack: &ErrorStack,
        tube: &WassersteinTube,
        x_set: &Polytope,
        u_set: &Polytope,
        cfg: MpcConfig,
    ) -> Result<Self, MpcError> {
        cfg.validate(sys)?;
        let n = cfg.n_horizon;
        if stack.horizon < n || tube.horizon() < n {
            return Err(MpcError::ConfigInvalid(
                "error stack and tube must cover the horizon".into(),
            ));
        }
        // input sets U (-) K E_k, with E_0 = {0}
        let mut input_sets = Vec::with_capacity(n);
        input_sets.push(u_set.clone().normalized()?);
        for k in 1..n {
            let ke = stack.support(k).linear_image(&sys.k)?;
            let tight = u_set.pontryagin_diff(&ke)?;
            if tight.is_empty()? {
                return Err(MpcError::InfeasibleTightening(format!(
                    "U (-) K E_{k} is empty"
                )));
            }
            input_sets.push(tight);
        }
        let loss = PwaLoss::from_state_set(x_set)?;
        let state_sets = match cfg.mode {
            Mode::Robust => {
                let mut sets = Vec::new();
                for k in 1..n {
                    let tight = x_set.pontryagin_diff(stack.support(k))?;
                    if tight.is_empty()? {
                        return Err(MpcError::InfeasibleTightening(format!(
                            "X (-) E_{k} is empty"
                        )));
                    }
                    sets.push(tight);
                }
                StateSets::Robust(sets)
            }
            Mode::WtSimple => {
                let mut blocks = Vec::new();
                for k in 1..n {
                    blocks.push(build_gamma_block(
                        tube.step(k),
                        &loss,
                        cfg.gamma,
                        None,
                        ConeForm::default(),
                        BudgetScaling::default(),
                    )?);
                }
                StateSets::Simple(blocks)
            }
            Mode::WtTightened => {
                let mut specs = Vec::new();
                for k in 1..n {
                    specs.push(build_tightened_spec(
                        stack,
                        tube,
                        &loss,
                        cfg.gamma,
                        k,
                        ConeForm::default(),
                    )?);
                }
                StateSets::Tightened(specs)
            }
        };
        let terminal = match &cfg.terminal {
            TerminalChoice::Auto => compute_terminal_set(sys, stack, x_set, u_set)?,
            TerminalChoice::Given(zf) => {
                let e_n = stack.support(n);
                let x_tight = x_set.pontryagin_diff(e_n)?;
                let u_tight = u_set.pontryagin_diff(&e_n.linear_image(&sys.k)?)?;
                let certificate = terminal_certificate(sys, stack, zf, &x_tight, &u_tight)?;
                if !certificate.satisfied(1e-7) {
                    return Err(MpcError::ConfigInvalid(format!(
                        "given terminal set violates the invariance conditions: {certificate:?}"
                    )));
                }
                TerminalSet {
                    zf: zf.clone(),
                    certificate,
                    iterations: 0,
                }
            }
        };

        let (prog, layout) = assemble(sys, &cfg, &input_sets, &state_sets, &terminal)?;
        Ok(MpcController {
            sys: sys.clone(),
            cfg,
            input_sets,
            state_sets,
            terminal,
            prog,
            layout,
            solve_opts: SolveOptions::default(),
            fallback_count: 0,
        })
    }

    pub fn input_set(&self, k: usize) -> &Polytope {
        &self.input_sets[k]
    }

    /// Dump the assembled conic program in the text triplet format.
    pub fn dump_program(&self) -> String {
        self.prog.dump()
    }

    /// Block dimensions and offsets of the nominal state sets, one line per
    /// block, for the `dump-gamma` CLI mode.
    pub fn describe_state_sets(&self) -> String {
        let mut out = String::new();
        match &self.state_sets {
            StateSets::Robust(sets) => {
                for (i, p) in sets.iter().enumerate() {
                    let rows = p.hrep().map(|h| h.f.nrows()).unwrap_or(0);
                    out.push_str(&format!("k={} robust rows={}\n", i + 1, rows));
                }
            }
            StateSets::Simple(blocks) => {
                for b in blocks {
                    out.push_str(&format!(
                        "k={} gamma-block n={} pieces={} q={} cone_dim={} affine_rows={} cones={} offsets={:?}\n",
                        b.step,
                        b.n,
                        b.pieces,
                        b.q_rows,
                        b.cone_dim() + 1,
                        b.affine_row_count(),
                        b.cone_count(),
                        b.offsets()
                    ));
                }
            }
            StateSets::Tightened(specs) => {
                for spec in specs {
                    for (p, b) in spec.blocks.iter().enumerate() {
                        out.push_str(&format!(
                            "k={} p={} gamma-block n={} pieces={} q={} cone_dim={} affine_rows={} cones={} offsets={:?}\n",
                            spec.step,
                            p + 1,
                            b.n,
                            b.pieces,
                            b.q_rows,
                            b.cone_dim() + 1,
                            b.affine_row_count(),
                            b.cone_count(),
                            b.offsets()
                        ));
                    }
                }
            }
        }
        out
    }

    /// Solve the open-loop problem at the measured state.
    pub fn solve_open_loop(&mut self, x: &DVector<f64>) -> Result<PlanOutcome, MpcError> {
        let d = self.layout.d;
        if x.len() != d {
            return Err(MpcError::ConfigInvalid("state dimension mismatch".into()));
        }
        for i in 0..d {
            self.prog.set_eq_rhs(self.layout.x0_row + i, x[i]);
        }
        let start = Instant::now();
        let res = self.prog.solve(self.solve_opts)?;
        let elapsed = start.elapsed().as_secs_f64();
        let (xvec, reduced) = match res.status {
            SolveStatus::Optimal => (res.primal.unwrap(), false),
            SolveStatus::Infeasible => return Err(MpcError::Infeasible),
            SolveStatus::IterationLimit => match res.approx {
                Some((x, r)) if r <= 1e-6 => (x, true),
                _ => return Err(MpcError::Conic(ConicError::SolverFailure(res.status))),
            },
            s => return Err(MpcError::Conic(ConicError::SolverFailure(s))),
        };
        let n = self.layout.n;
        let m = self.layout.m;
        let take = |base: &dyn Fn(usize, usize) -> usize, k: usize, len: usize| {
            DVector::from_fn(len, |i, _| xvec[base(k, i)])
        };
        let zf = |k: usize, i: usize| self.layout.z_var(k, i);
        let vf = |k: usize, i: usize| self.layout.v_var(k, i);
        let cf = |k: usize, i: usize| self.layout.c_var(k, i);
        let plan = PlanOutcome {
            z: (0..=n).map(|k| take(&zf, k, d)).collect(),
            v: (0..n).map(|k| take(&vf, k, m)).collect(),
            c: (0..n).map(|k| take(&cf, k, m)).collect(),
            objective: self.prog.objective_at(&xvec),
            solve_time: elapsed,
            reduced_accuracy: reduced,
        };
        Ok(plan)
    }

    /// Optimal objective at a state, or `None` when infeasible.
    pub fn optimal_cost(&mut self, x: &DVector<f64>) -> Result<Option<f64>, MpcError> {
        match self.solve_open_loop(x) {
            Ok(p) => Ok(Some(p.objective)),
            Err(MpcError::Infeasible) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Verify the shifted-policy certificate at a solved plan for one
    /// disturbance realization: the policy `(c_1*, ..., c_{N-1}*, 0)` must be
    /// feasible from `x+ = z_1* + w`.
    pub fn verify_shifted_policy(
        &self,
        plan: &PlanOutcome,
        w: &DVector<f64>,
        opts: SolveOptions,
    ) -> Result<bool, MpcError> {
        let n = self.layout.n;
        let m = self.layout.m;
        let tol = 1e-7;
        let mut z = &plan.z[1] + w;
        // arithmetic checks run inline; all conic membership checks are
        // batched into one feasibility solve over the auxiliary variables
        let mut prog = ConicProgram::new();
        let mut needs_solve = false;
        for k in 0..n {
            let c_next = if k + 1 < n {
                plan.c[k + 1].clone()
            } else {
                DVector::zeros(m)
            };
            let v = &self.sys.k * &z + &c_next;
            if !self.input_sets[k].contains(&v, tol)? {
                return Ok(false);
            }
            let z_next = &self.sys.a * &z + &self.sys.b * &v;
            if k + 1 < n {
                match &self.state_sets {
                    StateSets::Robust(sets) => {
                        if !sets[k].contains(&z_next, tol)? {
                            return Ok(false);
                        }
                    }
                    StateSets::Simple(blocks) => {
                        blocks[k].append_membership_fixed(&mut prog, &z_next);
                        needs_solve = true;
                    }
                    StateSets::Tightened(specs) => {
                        specs[k].append_membership_fixed(&mut prog, &z_next);
                        needs_solve = true;
                    }
                }
            }
            z = z_next;
        }
        if !self.terminal.zf.contains(&z, tol)? {
            return Ok(false);
        }
        if needs_solve {
            Ok(prog.feasibility(opts)?)
        } else {
            Ok(true)
        }
    }
}

fn assemble(
    sys: &LinearSystem,
    cfg: &MpcConfig,
    input_sets: &[Polytope],
    state_sets: &StateSets,
    terminal: &TerminalSet,
) -> Result<(ConicProgram, Layout), MpcError> {
    let d = sys.state_dim();
    let m = sys.input_dim();
    let n = cfg.n_horizon;
    let mut prog = ConicProgram::new();
    let z0 = prog.add_vars((n + 1) * d);
    let _v0 = prog.add_vars(n * m);
    let _c0 = prog.add_vars(n * m);
    debug_assert_eq!(z0, 0);
    let layout = Layout {
        d,
        m,
        n,
        x0_row: (n * d) + (n * m), // set below; placeholder recomputed
    };
    // stage cost on z_0..z_{N-1} and v_0..v_{N-1} (0.5 x'Px with P = 2Q, 2R)
    for k in 0..n {
        for i in 0..d {
            for j in i..d {
                let v = cfg.q[(i, j)];
                if v != 0.0 {
                    prog.add_quad_cost(layout.z_var(k, i), layout.z_var(k, j), 2.0 * v);
                }
            }
        }
        for i in 0..m {
            for j in i..m {
                let v = cfg.r[(i, j)];
                if v != 0.0 {
                    prog.add_quad_cost(layout.v_var(k, i), layout.v_var(k, j), 2.0 * v);
                }
            }
        }
    }
    // dynamics: z_{k+1} - A z_k - B v_k = 0
    for k in 0..n {
        for i in 0..d {
            let mut row: SparseRow = vec![(layout.z_var(k + 1, i), 1.0)];
            for j in 0..d {
                if sys.a[(i, j)] != 0.0 {
                    row.push((layout.z_var(k, j), -sys.a[(i, j)]));
                }
            }
            for j in 0..m {
                if sys.b[(i, j)] != 0.0 {
                    row.push((layout.v_var(k, j), -sys.b[(i, j)]));
                }
            }
            prog.add_eq(row, 0.0);
        }
    }
    // feedback split: v_k - K z_k - c_k = 0
    for k in 0..n {
        for i in 0..m {
            let mut row: SparseRow = vec![(layout.v_var(k, i), 1.0), (layout.c_var(k, i), -1.0)];
            for j in 0..d {
                if sys.k[(i, j)] != 0.0 {
                    row.push((layout.z_var(k, j), -sys.k[(i, j)]));
                }
            }
            prog.add_eq(row, 0.0);
        }
    }
    // initial condition rows, rewritten each step
    let x0_row = prog.num_eq_rows();
    for i in 0..d {
        prog.add_eq(vec![(layout.z_var(0, i), 1.0)], 0.0);
    }
    let layout = Layout { x0_row, ..layout };
    // input rows
    for (k, set) in input_sets.iter().enumerate() {
        let h = set.hrep()?;
        let mut rows: Vec<(SparseRow, f64)> = Vec::with_capacity(h.f.nrows());
        for r in 0..h.f.nrows() {
            let mut row: SparseRow = Vec::new();
            for j in 0..m {
                if h.f[(r, j)] != 0.0 {
                    row.push((layout.v_var(k, j), h.f[(r, j)]));
                }
            }
            rows.push((row, h.g[r]));
        }
        prog.add_nonneg_block(rows);
    }
    // nominal state rows for k in [1 : N-1]
    let z_vars_at = |k: usize| -> Vec<usize> { (0..d).map(|i| layout.z_var(k, i)).collect() };
    match state_sets {
        StateSets::Robust(sets) => {
            for (idx, set) in sets.iter().enumerate() {
                let k = idx + 1;
                let h = set.hrep()?;
                let mut rows: Vec<(SparseRow, f64)> = Vec::with_capacity(h.f.nrows());
                for r in 0..h.f.nrows() {
                    let mut row: SparseRow = Vec::new();
                    for j in 0..d {
                        if h.f[(r, j)] != 0.0 {
                            row.push((layout.z_var(k, j), h.f[(r, j)]));
                        }
                    }
                    rows.push((row, h.g[r]));
                }
                prog.add_nonneg_block(rows);
            }
        }
        StateSets::Simple(blocks) => {
            for (idx, block) in blocks.iter().enumerate() {
                block.append_membership(&mut prog, &z_vars_at(idx + 1));
            }
        }
        StateSets::Tightened(specs) => {
            for (idx, spec) in specs.iter().enumerate() {
                spec.append_membership(&mut prog, &z_vars_at(idx + 1));
            }
        }
    }
    // terminal rows on z_N
    let h = terminal.zf.hrep()?;
    let mut rows: Vec<(SparseRow, f64)> = Vec::with_capacity(h.f.nrows());
    for r in 0..h.f.nrows() {
        let mut row: SparseRow = Vec::new();
        for j in 0..d {
            if h.f[(r, j)] != 0.0 {
                row.push((layout.z_var(n, j), h.f[(r, j)]));
            }
        }
        rows.push((row, h.g[r]));
    }
    prog.add_nonneg_block(rows);
    Ok((prog, layout))
}

/// Stream a closed-loop log as controller diagnostics CSV. One row per step:
/// `t,status,objective,solve_time,c_star_0,plan_snapshot_id`; multi-input
/// feedforwards are `;`-joined, and the snapshot id is the step index of the
/// open-loop plan the controller committed to.
pub fn write_diagnostics_csv(
    log: &crate::lti::TrajectoryLog,
    out: &mut impl std::io::Write,
) -> std::io::Result<()> {
    writeln!(
        out,
        "t,status,objective,solve_time,c_star_0,plan_snapshot_id"
    )?;
    for t in 0..log.inputs.len() {
        let status = if log.fallback_steps.contains(&t) {
            "fallback"
        } else {
            "optimal"
        };
        let obj = log.objectives[t]
            .map(|v| format!("{v}"))
            .unwrap_or_else(|| "nan".into());
        let c: Vec<String> = log.feedforwards[t].iter().map(|x| format!("{x}")).collect();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            t,
            status,
            obj,
            log.solve_times[t],
            c.join(";"),
            t
        )?;
    }
    Ok(())
}

impl FeedbackController for MpcController {
    /// One receding-horizon step: `u = K x + c_0*`. In the plain Wasserstein
    /// mode an infeasible program falls back to pure feedback `u = K x` and
    /// the event is counted; the other modes surface infeasibility.
    fn control(&mut self, _step: usize, x: &DVector<f64>) -> Result<ControlStep, ControllerError> {
        match self.solve_open_loop(x) {
            Ok(plan) => Ok(ControlStep {
                u: &self.sys.k * x + &plan.c[0],
                c: plan.c[0].clone(),
                objective: Some(plan.objective),
                solve_time: plan.solve_time,
                fallback: false,
            }),
            Err(MpcError::Infeasible) => match self.cfg.mode {
                Mode::WtSimple => {
                    self.fallback_count += 1;
                    Ok(ControlStep {
                        u: &self.sys.k * x,
                        c: DVector::zeros(self.sys.input_dim()),
                        objective: None,
                        solve_time: 0.0,
                        fallback: true,
                    })
                }
                _ => Err(ControllerError::Infeasible),
            },
            Err(e) => Err(ControllerError::Solver(e.to_string())),
        }
    }
}
