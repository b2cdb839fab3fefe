//! CVaR and the exact convex reformulation of the worst-case CVaR constraint.
//!
//! For a piecewise-affine loss `max_j a_j'x + b_j` and the step-`t` ambiguity
//! ball, the constraint "worst-case CVaR at level `1-gamma` is nonpositive"
//! is equivalent to a finite block of affine rows plus second-order cones in
//! auxiliary variables `tau, lambda >= 0, s_i, zeta_ij >= 0`:
//!
//! ```text
//! lambda eps n + sum_i s_i <= 0
//! alpha_j'(z + e_i) + beta_j(tau) + zeta_ij'(g_t - F_t e_i) <= s_i - offset_j
//! || G (F_t' zeta_ij - alpha_j) ||_2 <= lambda
//! ```
//!
//! with `alpha_j = a_j/gamma`, `beta_j(tau) = (b_j + gamma tau - tau)/gamma`
//! for the `J` loss pieces and `alpha_{J+1} = 0`, `beta_{J+1} = tau`. The
//! cone matrix `G` is the dual-norm matrix `D'` (see [`crate::ambiguity`]).
//! A [`GammaBlock`] holds one such block; `offset_j` realizes the
//! recursive-feasibility tightening, where block `p` of the step-`k` set is
//! offset by the support value `h_p(alpha_j)` of the accumulated disturbance
//! sets.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::ambiguity::{dual_norm_matrix, dual_norm_matrix_literal, AmbiguityError, TubeStep};
use crate::conic::{ConicError, ConicProgram, SolveOptions, SolveStatus, SparseRow};
use crate::geometry::{GeomError, Polytope};
use crate::lti::ErrorStack;

/// Smallest admissible risk level; `alpha_j = a_j/gamma` blows up below it.
pub const MIN_GAMMA: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum DrcvarError {
    #[error("empty input")]
    EmptyInput,
    #[error("risk level gamma = {0} outside [{MIN_GAMMA}, 1)")]
    GammaOutOfRange(f64),
    #[error("tube center atom {atom} violates its support H-rep by {violation}")]
    CenterOutsideSupport { atom: usize, violation: f64 },
    #[error("offsets must provide one value per loss piece: expected {expected}, got {got}")]
    OffsetShape { expected: usize, got: usize },
    #[error(transparent)]
    Conic(#[from] ConicError),
    #[error(transparent)]
    Ambiguity(#[from] AmbiguityError),
    #[error(transparent)]
    Geometry(#[from] GeomError),
}

/// Convex piecewise-affine loss `x -> max_j a_j'x + b_j`; the state set is
/// its zero sublevel set.
#[derive(Debug, Clone)]
pub struct PwaLoss {
    pub pieces: Vec<(DVector<f64>, f64)>,
}

impl PwaLoss {
    pub fn new(pieces: Vec<(DVector<f64>, f64)>) -> Result<Self, DrcvarError> {
        if pieces.is_empty() {
            return Err(DrcvarError::EmptyInput);
        }
        Ok(PwaLoss { pieces })
    }

    /// Loss whose zero sublevel set is the polytope `{F x <= g}`:
    /// pieces `(F_row_j, -g_j)`.
    pub fn from_state_set(x: &Polytope) -> Result<Self, DrcvarError> {
        let h = x.hrep()?;
        let pieces = (0..h.f.nrows())
            .map(|j| (h.f.row(j).transpose(), -h.g[j]))
            .collect();
        PwaLoss::new(pieces)
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        self.pieces
            .iter()
            .map(|(a, b)| a.dot(x) + b)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// All pieces scaled by `c > 0`; scales the loss (and its CVaR) by `c`
    /// without changing the zero sublevel set.
    pub fn scaled(&self, c: f64) -> PwaLoss {
        PwaLoss {
            pieces: self.pieces.iter().map(|(a, b)| (a * c, b * c)).collect(),
        }
    }

    /// Uniformly shift the loss by `delta` (each intercept moves by `delta`).
    pub fn shifted(&self, delta: f64) -> PwaLoss {
        PwaLoss {
            pieces: self
                .pieces
                .iter()
                .map(|(a, b)| (a.clone(), b + delta))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }
}

/// Exact CVaR of an empirical distribution at level `1-gamma`: the mean of
/// the worst `gamma` probability mass, computed by sorting.
pub fn cvar_empirical(values: &[f64], gamma: f64) -> Result<f64, DrcvarError> {
    if values.is_empty() {
        return Err(DrcvarError::EmptyInput);
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(DrcvarError::GammaOutOfRange(gamma));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mass = gamma * values.len() as f64;
    let full = (mass + 1e-12).floor().min(values.len() as f64);
    let frac = (mass - full).max(0.0);
    let mut acc: f64 = sorted.iter().take(full as usize).sum();
    if frac > 0.0 && (full as usize) < sorted.len() {
        acc += frac * sorted[full as usize];
    }
    Ok(acc / mass)
}

/// Which budget-row scaling a block carries. The two differ by a positive
/// factor `n` and have identical feasible sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BudgetScaling {
    /// `lambda eps n + sum_i s_i <= 0`
    #[default]
    Prop2,
    /// `lambda eps + (1/n) sum_i s_i <= 0`
    Normalized,
}

/// Which cone matrix to use: the simplified dual-norm matrix `D'` or the
/// literal pseudoinverse composition (kept for cross-validation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConeForm {
    #[default]
    Simplified,
    Literal,
}

/// One worst-case CVaR constraint block for a tube step, ready to be
/// appended to a conic program.
#[derive(Debug, Clone)]
pub struct GammaBlock {
    /// Tube step `t` this block constrains.
    pub step: usize,
    pub n: usize,
    /// Number of loss pieces `J` (the block carries `J+1` extended pieces).
    pub pieces: usize,
    /// Support H-rep row count `q_t`; the per-(i,j) multiplier dimension.
    pub q_rows: usize,
    pub eps: f64,
    pub gamma: f64,
    pub scaling: BudgetScaling,
    atoms: Vec<DVector<f64>>,
    /// `g_t - F_t e_i` per atom.
    support_slack: Vec<DVector<f64>>,
    /// `alpha_j` for `j in [1:J+1]` (`alpha_{J+1} = 0`).
    alphas: Vec<DVector<f64>>,
    /// coefficient of `tau` in row `j`
    tau_coefs: Vec<f64>,
    /// constant part of `beta_j`
    consts: Vec<f64>,
    /// per-piece tightening offsets `h(alpha_j)`, zero in the plain block
    offsets: Vec<f64>,
    /// cone matrix `G` (the dual-norm matrix, `D'` in the simplified form)
    cone_mat: DMatrix<f64>,
    /// exact row compression of `G`: the d x d factor `R` with
    /// `||R y|| = ||G y||` (R'R = G'G), which keeps solver cones small
    cone_rows: DMatrix<f64>,
    /// cached `R F_t'`
    cone_f: DMatrix<f64>,
}

/// Aux-variable indices of one appended block, for diagnostics.
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub tau: usize,
    pub lambda: usize,
    pub s0: usize,
    pub zeta0: usize,
}

impl GammaBlock {
    pub fn state_dim(&self) -> usize {
        self.alphas[0].len()
    }

    /// `n (J+1)` affine rows.
    pub fn affine_row_count(&self) -> usize {
        self.n * (self.pieces + 1)
    }

    /// `n (J+1)` cones, each of dimension `cone_dim() + 1`.
    pub fn cone_count(&self) -> usize {
        self.n * (self.pieces + 1)
    }

    /// Dimension of the solver cone vector (radius entry excluded).
    pub fn cone_dim(&self) -> usize {
        self.cone_rows.nrows()
    }

    /// The dual-norm cone matrix `G` the block represents.
    pub fn cone_matrix(&self) -> &DMatrix<f64> {
        &self.cone_mat
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    fn zeta_index(&self, zeta0: usize, i: usize, j: usize, r: usize) -> usize {
        zeta0 + (i * (self.pieces + 1) + j) * self.q_rows + r
    }

    /// Append the block with the nominal state as decision variables
    /// `z = x[z_vars]`. Returns the aux-variable layout.
    pub fn append_membership(&self, prog: &mut ConicProgram, z_vars: &[usize]) -> BlockVars {
        assert_eq!(z_vars.len(), self.state_dim());
        self.append_inner(prog, Some(z_vars), None)
    }

    /// Append the block with the nominal state fixed to `z`.
    pub fn append_membership_fixed(&self, prog: &mut ConicProgram, z: &DVector<f64>) -> BlockVars {
        assert_eq!(z.len(), self.state_dim());
        self.append_inner(prog, None, Some(z))
    }

    fn append_inner(
        &self,
        prog: &mut ConicProgram,
        z_vars: Option<&[usize]>,
        z_fixed: Option<&DVector<f64>>,
    ) -> BlockVars {
        let jn = self.pieces + 1;
        let tau = prog.add_vars(1);
        let lambda = prog.add_vars(1);
        let s0 = prog.add_vars(self.n);
        let zeta0 = prog.add_vars(self.n * jn * self.q_rows);
        let vars = BlockVars {
            tau,
            lambda,
            s0,
            zeta0,
        };

        // sign constraints: lambda >= 0, zeta >= 0
        let mut nn: Vec<(SparseRow, f64)> = Vec::with_capacity(1 + self.n * jn * self.q_rows);
        nn.push((vec![(lambda, -1.0)], 0.0));
        for idx in 0..self.n * jn * self.q_rows {
            nn.push((vec![(zeta0 + idx, -1.0)], 0.0));
        }
        prog.add_nonneg_block(nn);

        // budget row
        let budget: (SparseRow, f64) = match self.scaling {
            BudgetScaling::Prop2 => {
                let mut row: SparseRow = vec![(lambda, self.eps * self.n as f64)];
                row.extend((0..self.n).map(|i| (s0 + i, 1.0)));
                (row, 0.0)
            }
            BudgetScaling::Normalized => {
                let mut row: SparseRow = vec![(lambda, self.eps)];
                row.extend((0..self.n).map(|i| (s0 + i, 1.0 / self.n as f64)));
                (row, 0.0)
            }
        };
        prog.add_nonneg_block(vec![budget]);

        // affine rows
        let mut affine: Vec<(SparseRow, f64)> = Vec::with_capacity(self.n * jn);
        for i in 0..self.n {
            for j in 0..jn {
                let alpha = &self.alphas[j];
                let mut row: SparseRow = Vec::new();
                let mut rhs = -self.consts[j] - alpha.dot(&self.atoms[i]) - self.offsets[j];
                match (z_vars, z_fixed) {
                    (Some(zv), _) => {
                        for (c, &v) in zv.iter().enumerate() {
                            if alpha[c] != 0.0 {
                                row.push((v, alpha[c]));
                            }
                        }
                    }
                    (None, Some(z)) => rhs -= alpha.dot(z),
                    _ => unreachable!(),
                }
                if self.tau_coefs[j] != 0.0 {
                    row.push((tau, self.tau_coefs[j]));
                }
                let slack = &self.support_slack[i];
                for r in 0..self.q_rows {
                    if slack[r] != 0.0 {
                        row.push((self.zeta_index(zeta0, i, j, r), slack[r]));
                    }
                }
                row.push((s0 + i, -1.0));
                affine.push((row, rhs));
            }
        }
        prog.add_nonneg_block(affine);

        // cones: [lambda; G F_t' zeta_ij - G alpha_j] in SOC
        let td = self.cone_dim();
        for i in 0..self.n {
            for j in 0..jn {
                let g_alpha = &self.cone_rows * &self.alphas[j];
                let mut rows: Vec<(SparseRow, f64)> = Vec::with_capacity(td + 1);
                rows.push((vec![(lambda, -1.0)], 0.0));
                for r in 0..td {
                    let mut row: SparseRow = Vec::with_capacity(self.q_rows);
                    for c in 0..self.q_rows {
                        let v = self.cone_f[(r, c)];
                        if v != 0.0 {
                            row.push((self.zeta_index(zeta0, i, j, c), -v));
                        }
                    }
                    rows.push((row, -g_alpha[r]));
                }
                prog.add_soc_block(rows);
            }
        }
        vars
    }

    /// Conic feasibility of membership `z in Gamma_t`.
    pub fn feasible_at(&self, z: &DVector<f64>, opts: SolveOptions) -> Result<bool, DrcvarError> {
        let mut prog = ConicProgram::new();
        self.append_membership_fixed(&mut prog, z);
        Ok(prog.feasibility(opts)?)
    }
}

/// Build the constraint block for one tube step. `offsets`, when given, must
/// provide `h(alpha_j)` per loss piece (the extended zero piece always has
/// offset zero).
pub fn build_gamma_block(
    step: &TubeStep,
    loss: &PwaLoss,
    gamma: f64,
    offsets: Option<&[f64]>,
    cone_form: ConeForm,
    scaling: BudgetScaling,
) -> Result<GammaBlock, DrcvarError> {
    if !(MIN_GAMMA..1.0).contains(&gamma) {
        return Err(DrcvarError::GammaOutOfRange(gamma));
    }
    let j_count = loss.len();
    if let Some(o) = offsets {
        if o.len() != j_count {
            return Err(DrcvarError::OffsetShape {
                expected: j_count,
                got: o.len(),
            });
        }
    }
    let hrep = step.support.hrep()?;
    let (f_t, g_t) = (hrep.f.clone(), hrep.g.clone());
    let d_mat = step.cost.matrix().ok_or(DrcvarError::EmptyInput)?.clone();
    let cone_mat = match cone_form {
        ConeForm::Simplified => dual_norm_matrix(&d_mat)?,
        ConeForm::Literal => dual_norm_matrix_literal(&d_mat)?,
    };
    // exact compression R'R = G'G; keeps every solver cone at d+1 entries
    let gram = cone_mat.transpose() * &cone_mat;
    let cone_rows = gram
        .cholesky()
        .ok_or(AmbiguityError::RankDeficient { ratio: 0.0 })?
        .l()
        .transpose();
    let mut support_slack = Vec::with_capacity(step.n());
    for (idx, atom) in step.center.atoms.iter().enumerate() {
        let slack = &g_t - &f_t * atom;
        let worst = slack.min();
        if worst < -1e-7 {
            return Err(DrcvarError::CenterOutsideSupport {
                atom: idx,
                violation: -worst,
            });
        }
        support_slack.push(slack.map(|v| v.max(0.0)));
    }
    let d = step.center.atoms[0].len();
    let mut alphas: Vec<DVector<f64>> = Vec::with_capacity(j_count + 1);
    let mut tau_coefs = Vec::with_capacity(j_count + 1);
    let mut consts = Vec::with_capacity(j_count + 1);
    let mut offs = Vec::with_capacity(j_count + 1);
    for (j, (a, b)) in loss.pieces.iter().enumerate() {
        alphas.push(a / gamma);
        tau_coefs.push((gamma - 1.0) / gamma);
        consts.push(b / gamma);
        offs.push(offsets.map(|o| o[j]).unwrap_or(0.0));
    }
    alphas.push(DVector::zeros(d));
    tau_coefs.push(1.0);
    consts.push(0.0);
    offs.push(0.0);
    let cone_f = &cone_rows * f_t.transpose();
    Ok(GammaBlock {
        step: step.t,
        n: step.n(),
        pieces: j_count,
        q_rows: f_t.nrows(),
        eps: step.radius,
        gamma,
        scaling,
        atoms: step.center.atoms.clone(),
        support_slack,
        alphas,
        tau_coefs,
        consts,
        offsets: offs,
        cone_mat,
        cone_rows,
        cone_f,
    })
}

/// Worst-case CVaR of the loss over the step's ambiguity ball at a fixed
/// nominal state, via the dual minimization
/// `min lambda eps + (1/n) sum_i s_i` over the block's affine and cone rows.
/// Nonpositive exactly when `z` lies in the block's feasible region.
pub fn worst_case_cvar(
    step: &TubeStep,
    loss: &PwaLoss,
    gamma: f64,
    z: &DVector<f64>,
    opts: SolveOptions,
) -> Result<f64, DrcvarError> {
    let block = build_gamma_block(
        step,
        loss,
        gamma,
        None,
        ConeForm::default(),
        BudgetScaling::default(),
    )?;
    let mut prog = ConicProgram::new();
    let jn = block.pieces + 1;
    let tau = prog.add_vars(1);
    let lambda = prog.add_vars(1);
    let s0 = prog.add_vars(block.n);
    let zeta0 = prog.add_vars(block.n * jn * block.q_rows);
    prog.add_lin_cost(lambda, block.eps);
    for i in 0..block.n {
        prog.add_lin_cost(s0 + i, 1.0 / block.n as f64);
    }
    // sign constraints
    let mut nn: Vec<(SparseRow, f64)> = vec![(vec![(lambda, -1.0)], 0.0)];
    for idx in 0..block.n * jn * block.q_rows {
        nn.push((vec![(zeta0 + idx, -1.0)], 0.0));
    }
    prog.add_nonneg_block(nn);
    // affine rows with z folded into the rhs
    let mut affine: Vec<(SparseRow, f64)> = Vec::new();
    for i in 0..block.n {
        for j in 0..jn {
            let alpha = &block.alphas[j];
            let rhs = -block.consts[j] - alpha.dot(&block.atoms[i]) - alpha.dot(z);
            let mut row: SparseRow = vec![(s0 + i, -1.0)];
            if block.tau_coefs[j] != 0.0 {
                row.push((tau, block.tau_coefs[j]));
            }
            for r in 0..block.q_rows {
                let v = block.support_slack[i][r];
                if v != 0.0 {
                    row.push((block.zeta_index(zeta0, i, j, r), v));
                }
            }
            affine.push((row, rhs));
        }
    }
    prog.add_nonneg_block(affine);
    let td = block.cone_dim();
    for i in 0..block.n {
        for j in 0..jn {
            let g_alpha = &block.cone_rows * &block.alphas[j];
            let mut rows: Vec<(SparseRow, f64)> = Vec::with_capacity(td + 1);
            rows.push((vec![(lambda, -1.0)], 0.0));
            for r in 0..td {
                let mut row: SparseRow = Vec::with_capacity(block.q_rows);
                for c in 0..block.q_rows {
                    let v = block.cone_f[(r, c)];
                    if v != 0.0 {
                        row.push((block.zeta_index(zeta0, i, j, c), -v));
                    }
                }
                rows.push((row, -g_alpha[r]));
            }
            prog.add_soc_block(rows);
        }
    }
    let res = prog.solve(opts)?;
    match res.status {
        SolveStatus::Optimal => Ok(res.objective_value),
        SolveStatus::IterationLimit
            if res
                .approx
                .as_ref()
                .map(|(_, r)| *r <= 1e-6)
                .unwrap_or(false) =>
        {
            Ok(res.objective_value)
        }
        s => Err(DrcvarError::Conic(ConicError::SolverFailure(s))),
    }
}

/// The step-`k` tightened nominal set: one block per `p in [1:k]`, where
/// block `p` carries offsets `h_p(alpha_j) = sup { alpha_j' xi }` over the
/// Minkowski sum of `A_K^r W` for `r in [p:k-1]` (empty sum at `p = k`).
#[derive(Debug, Clone)]
pub struct TightenedSetSpec {
    pub step: usize,
    pub blocks: Vec<GammaBlock>,
}

impl TightenedSetSpec {
    /// Append all blocks, each with its own auxiliary variables.
    pub fn append_membership(&self, prog: &mut ConicProgram, z_vars: &[usize]) -> Vec<BlockVars> {
        self.blocks
            .iter()
            .map(|b| b.append_membership(prog, z_vars))
            .collect()
    }

    pub fn append_membership_fixed(
        &self,
        prog: &mut ConicProgram,
        z: &DVector<f64>,
    ) -> Vec<BlockVars> {
        self.blocks
            .iter()
            .map(|b| b.append_membership_fixed(prog, z))
            .collect()
    }

    /// Conic feasibility of membership `z in Z_k`.
    pub fn feasible_at(&self, z: &DVector<f64>, opts: SolveOptions) -> Result<bool, DrcvarError> {
        let mut prog = ConicProgram::new();
        self.append_membership_fixed(&mut prog, z);
        Ok(prog.feasibility(opts)?)
    }
}

/// Build the tightened set spec for step `k`. The offsets are computed once
/// per `(p, j)` from support additivity over the Minkowski sum:
/// `h_p(alpha_j) = sum_{r=p}^{k-1} sup_{w in W} alpha_j' A_K^r w`.
pub fn build_tightened_spec(
    stack: &ErrorStack,
    tube: &crate::ambiguity::WassersteinTube,
    loss: &PwaLoss,
    gamma: f64,
    k: usize,
    cone_form: ConeForm,
) -> Result<TightenedSetSpec, DrcvarError> {
    assert!(k >= 1 && k <= tube.horizon());
    if !(MIN_GAMMA..1.0).contains(&gamma) {
        return Err(DrcvarError::GammaOutOfRange(gamma));
    }
    // E_1 = W: the noise support with the recursion's normalization.
    let w = stack.support(1);
    let mut blocks = Vec::with_capacity(k);
    for p in 1..=k {
        let mut offsets = Vec::with_capacity(loss.len());
        for (a, _) in &loss.pieces {
            let alpha = a / gamma;
            let mut h = 0.0;
            for r in p..k {
                let dir = stack.a_k_power(r).transpose() * &alpha;
                h += w.support(&dir)?;
            }
            offsets.push(h);
        }
        blocks.push(build_gamma_block(
            tube.step(p),
            loss,
            gamma,
            Some(&offsets),
            cone_form,
            BudgetScaling::default(),
        )?);
    }
    Ok(TightenedSetSpec { step: k, blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ambiguity::{diameter_under_cost, propagate_tube, WassersteinTube};
    use crate::testutil::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dvector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn tube_fixture(n: usize, horizon: usize, eps: f64, seed: u64) -> WassersteinTube {
        let (sys, stack) = benchmark_stack(horizon);
        let data = benchmark_dataset(&sys, n, horizon, seed);
        propagate_tube(&stack, &data, eps, horizon).unwrap()
    }

    fn state_loss() -> PwaLoss {
        PwaLoss::from_state_set(&state_set()).unwrap()
    }

    #[test]
    fn cvar_constant_values() {
        let v = vec![3.5; 17];
        for gamma in [0.05, 0.2, 0.7, 1.0] {
            assert_abs_diff_eq!(cvar_empirical(&v, gamma).unwrap(), 3.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn cvar_level_one_is_mean() {
        let v = vec![1.0, 2.0, 3.0, 10.0];
        assert_abs_diff_eq!(cvar_empirical(&v, 1.0).unwrap(), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn cvar_two_point_half() {
        // grid oracle: minimize tau + 2 * mean(max(0, v - tau)); minimum 1
        let v: Vec<f64> = vec![0.0, 1.0];
        let mut best = f64::INFINITY;
        let mut tau = -1.0;
        while tau <= 2.0 {
            let pen: f64 = v.iter().map(|x| (x - tau).max(0.0)).sum::<f64>() / v.len() as f64;
            best = best.min(tau + pen / 0.5);
            tau += 1e-4;
        }
        assert_abs_diff_eq!(best, 1.0, epsilon = 1e-3);
        assert_abs_diff_eq!(cvar_empirical(&v, 0.5).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cvar_matches_grid_minimization() {
        let mut rng = ChaCha12Rng::seed_from_u64(40);
        for _ in 0..20 {
            let n = rng.gen_range(3..25);
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let gamma = rng.gen_range(0.05..1.0);
            let exact = cvar_empirical(&v, gamma).unwrap();
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min) - 0.5;
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 0.5;
            let mut best = f64::INFINITY;
            let steps = 40_000;
            for s in 0..=steps {
                let tau = lo + (hi - lo) * s as f64 / steps as f64;
                let pen: f64 = v.iter().map(|x| (x - tau).max(0.0)).sum::<f64>() / n as f64;
                best = best.min(tau + pen / gamma);
            }
            assert_abs_diff_eq!(exact, best, epsilon = 1e-3);
        }
    }

    #[test]
    fn cvar_rejects_bad_inputs() {
        assert!(matches!(
            cvar_empirical(&[], 0.5),
            Err(DrcvarError::EmptyInput)
        ));
        assert!(matches!(
            cvar_empirical(&[1.0], 0.0),
            Err(DrcvarError::GammaOutOfRange(_))
        ));
        assert!(matches!(
            cvar_empirical(&[1.0], 1.5),
            Err(DrcvarError::GammaOutOfRange(_))
        ));
    }

    #[test]
    fn single_atom_block_reduces_to_halfspace() {
        // eps = 0, n = 1, atom at origin, J = 1: z feasible iff a'z + b <= 0
        let (sys, stack) = benchmark_stack(1);
        let pool = vec![dvector![0.0, 0.0]];
        let data = crate::lti::NoiseDataset::from_pool(
            pool,
            1,
            1,
            0,
            crate::lti::SamplingMode::WithReplacement,
        )
        .unwrap();
        let _ = &sys;
        let tube = propagate_tube(&stack, &data, 0.0, 1).unwrap();
        let loss = PwaLoss::new(vec![(dvector![1.0, 0.5], -1.0)]).unwrap();
        let block = build_gamma_block(
            tube.step(1),
            &loss,
            0.2,
            None,
            ConeForm::default(),
            BudgetScaling::default(),
        )
        .unwrap();
        assert_eq!(block.affine_row_count(), 2);
        assert_eq!(block.cone_count(), 2);
        for xs in [-2.0, -1.0, 0.0, 0.5, 0.9, 1.1, 2.0] {
            for ys in [-1.0, 0.0, 1.0] {
                let z = dvector![xs, ys];
                let sign = loss.eval(&z);
                if sign.abs() < 1e-6 {
                    continue;
                }
                let feas = block.feasible_at(&z, SolveOptions::default()).unwrap();
                assert_eq!(feas, sign <= 0.0, "z = ({xs},{ys}), loss = {sign}");
            }
        }
    }

    #[test]
    fn state_independent_satisfied_loss_always_feasible() {
        let tube = tube_fixture(5, 2, 0.1, 1);
        let loss =
            PwaLoss::new(vec![(dvector![0.0, 0.0], -1.0), (dvector![0.0, 0.0], -1.0)]).unwrap();
        let block = build_gamma_block(
            tube.step(2),
            &loss,
            0.2,
            None,
            ConeForm::default(),
            BudgetScaling::default(),
        )
        .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..10 {
            let z = dvector![rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0)];
            assert!(block.feasible_at(&z, SolveOptions::default()).unwrap());
        }
    }

    #[test]
    fn robust_tightening_is_inside_gamma_region() {
        // points of X (-) E_1 are block-feasible at step 1
        let tube = tube_fixture(10, 1, 0.01, 7);
        let block = build_gamma_block(
            tube.step(1),
            &state_loss(),
            0.2,
            None,
            ConeForm::default(),
            BudgetScaling::default(),
        )
        .unwrap();
        let x = state_set();
        let shrunk = x.pontryagin_diff(&tube.step(1).support).unwrap();
        let (lo, hi) = shrunk.bounding_box().unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let mut checked = 0;
        while checked < 200 {
            let z = dvector![rng.gen_range(lo[0]..hi[0]), rng.gen_range(lo[1]..hi[1])];
            if !shrunk.contains(&z, 0.0).unwrap() {
                continue;
            }
            checked += 1;
            assert!(
                block.feasible_at(&z, SolveOptions::default()).unwrap(),
                "z = {z:?} in X (-) E_1 must satisfy the DR-CVaR block"
            );
        }
    }

    #[test]
    fn worst_case_at_zero_radius_is_empirical_cvar() {
        let tube = tube_fixture(12, 3, 0.0, 11);
        let loss = state_loss();
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        for t in [1usize, 3] {
            let step = tube.step(t);
            for _ in 0..5 {
                let z = dvector![rng.gen_range(-6.0..1.0), rng.gen_range(-1.5..1.5)];
                let wc = worst_case_cvar(step, &loss, 0.2, &z, SolveOptions::default()).unwrap();
                let values: Vec<f64> = step
                    .center
                    .atoms
                    .iter()
                    .map(|e| loss.eval(&(&z + e)))
                    .collect();
                let saa = cvar_empirical(&values, 0.2).unwrap();
                assert_abs_diff_eq!(wc, saa, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn worst_case_beyond_diameter_is_vertex_max() {
        // J = 1 and a ball covering the whole support: worst case is the
        // robust maximum over the support vertices
        let tube0 = tube_fixture(6, 2, 0.0, 21);
        let step0 = tube0.step(2);
        let diam = diameter_under_cost(&step0.support, &step0.cost).unwrap();
        let tube = tube_fixture(6, 2, diam * 1.5, 21);
        let step = tube.step(2);
        let loss = PwaLoss::new(vec![(dvector![1.0, 0.0], -2.0)]).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        for _ in 0..5 {
            let z = dvector![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let wc = worst_case_cvar(step, &loss, 0.2, &z, SolveOptions::default()).unwrap();
            let vmax = step
                .support
                .vertices()
                .unwrap()
                .iter()
                .map(|e| loss.eval(&(&z + e)))
                .fold(f64::NEG_INFINITY, f64::max);
            assert_abs_diff_eq!(wc, vmax, epsilon = 1e-4);
        }
    }

    #[test]
    fn worst_case_monotone_in_radius() {
        let loss = state_loss();
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let radii = [0.0, 0.01, 0.1, 1.0];
        for _ in 0..4 {
            let z = dvector![rng.gen_range(-6.0..1.0), rng.gen_range(-1.5..1.5)];
            let mut prev = f64::NEG_INFINITY;
            for &eps in &radii {
                let tube = tube_fixture(8, 2, eps, 77);
                let wc =
                    worst_case_cvar(tube.step(2), &loss, 0.2, &z, SolveOptions::default()).unwrap();
                assert!(
                    wc >= prev - 1e-6,
                    "ball nesting violated: {wc} < {prev} at eps {eps}"
                );
                prev = wc;
            }
        }
    }

    #[test]
    fn worst_case_dominates_empirical_mean() {
        let tube = tube_fixture(10, 2, 0.05, 41);
        let loss = state_loss();
        let step = tube.step(2);
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for _ in 0..5 {
            let z = dvector![rng.gen_range(-6.0..1.0), rng.gen_range(-1.5..1.5)];
            let wc = worst_case_cvar(step, &loss, 0.2, &z, SolveOptions::default()).unwrap();
            let mean: f64 = step
                .center
                .atoms
                .iter()
                .map(|e| loss.eval(&(&z + e)))
                .sum::<f64>()
                / step.n() as f64;
            assert!(wc >= mean - 1e-6);
        }
    }

    #[test]
    fn equivalence_feasibility_matches_sign() {
        let tube = tube_fixture(8, 3, 0.05, 51);
        let loss = state_loss();
        let mut rng = ChaCha12Rng::seed_from_u64(52);
        for t in [1usize, 3] {
            let step = tube.step(t);
            let block = build_gamma_block(
                step,
                &loss,
                0.2,
                None,
                ConeForm::default(),
                BudgetScaling::default(),
            )
            .unwrap();
            let mut tested = 0;
            while tested < 60 {
                let z = dvector![rng.gen_range(-11.0..3.0), rng.gen_range(-3.0..3.0)];
                let wc = worst_case_cvar(step, &loss, 0.2, &z, SolveOptions::default()).unwrap();
                if wc.abs() <= 1e-6 {
                    continue;
                }
                tested += 1;
                let feas = block.feasible_at(&z, SolveOptions::default()).unwrap();
                assert_eq!(feas, wc <= 0.0, "t={t}, z={z:?}, wc={wc}");
            }
        }
    }

    #[test]
    fn budget_scalings_identical_feasible_sets() {
        let tube = tube_fixture(6, 2, 0.1, 61);
        let loss = state_loss();
        let step = tube.step(2);
        let b1 = build_gamma_block(
            step,
            &loss,
            0.2,
            None,
            ConeForm::default(),
            BudgetScaling::Prop2,
        )
        .unwrap();
        let b2 = build_gamma_block(
            step,
            &loss,
            0.2,
            None,
            ConeForm::default(),
            BudgetScaling::Normalized,
        )
        .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(62);
        for _ in 0..40 {
            let z = dvector![rng.gen_range(-11.0..3.0), rng.gen_range(-3.0..3.0)];
            let wc = worst_case_cvar(step, &loss, 0.2, &z, SolveOptions::default()).unwrap();
            if wc.abs() <= 1e-6 {
                continue;
            }
            assert_eq!(
                b1.feasible_at(&z, SolveOptions::default()).unwrap(),
                b2.feasible_at(&z, SolveOptions::default()).unwrap()
            );
        }
    }

    #[test]
    fn literal_cone_form_same_feasible_set() {
        let tube = tube_fixture(6, 2, 0.05, 63);
        let loss = state_loss();
        let step = tube.step(2);
        let simp = build_gamma_block(
            step,
            &loss,
            0.2,
            None,
            ConeForm::Simplified,
            BudgetScaling::Prop2,
        )
        .unwrap();
        let lit = build_gamma_block(
            step,
            &loss,
            0.2,
            None,
            ConeForm::Literal,
            BudgetScaling::Prop2,
        )
        .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(64);
        for _ in 0..30 {
            let z = dvector![rng.gen_range(-11.0..3.0), rng.gen_range(-3.0..3.0)];
            let wc = worst_case_cvar(step, &loss, 0.2, &z, SolveOptions::default()).unwrap();
            if wc.abs() <= 1e-6 {
                continue;
            }
            assert_eq!(
                simp.feasible_at(&z, SolveOptions::default()).unwrap(),
                lit.feasible_at(&z, SolveOptions::default()).unwrap()
            );
        }
    }

    #[test]
    fn loss_scaling_preserves_feasibility_and_scales_value() {
        let tube = tube_fixture(6, 2, 0.05, 71);
        let loss = state_loss();
        let step = tube.step(2);
        let c = 3.7;
        let scaled = loss.scaled(c);
        let mut rng = ChaCha12Rng::seed_from_u64(72);
        for _ in 0..8 {
            let z = dvector![rng.gen_range(-11.0..3.0), rng.gen_range(-3.0..3.0)];
            let wc = worst_case_cvar(step, &loss, 0.2, &z, SolveOptions::default()).unwrap();
            let wcs = worst_case_cvar(step, &scaled, 0.2, &z, SolveOptions::default()).unwrap();
            assert_abs_diff_eq!(wcs, c * wc, epsilon = 1e-4);
        }
    }

    #[test]
    fn dr_cvar_implies_chance_constraint() {
        // at a block-feasible z, violation frequency under in-ball empirical
        // perturbations stays within gamma plus binomial slack
        let gamma = 0.2;
        let eps = 0.05;
        let tube = tube_fixture(10, 2, eps, 81);
        let step = tube.step(2);
        let loss = state_loss();
        let block = build_gamma_block(
            step,
            &loss,
            gamma,
            None,
            ConeForm::default(),
            BudgetScaling::default(),
        )
        .unwrap();
        let z = dvector![-4.0, 0.0];
        assert!(block.feasible_at(&z, SolveOptions::default()).unwrap());
        let mut rng = ChaCha12Rng::seed_from_u64(82);
        let trials = 4000;
        let mut violations = 0usize;
        for _ in 0..trials {
            // random in-ball perturbation: shift each atom, budget (1/n) sum cost <= eps
            let shifted: Vec<DVector<f64>> = step
                .center
                .atoms
                .iter()
                .map(|a| {
                    let dir = dvector![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                    let cost = step.cost.eval(&dir).unwrap().max(1e-12);
                    let scale = rng.gen_range(0.0..eps) / cost;
                    let cand = a + dir * scale;
                    if step.support.contains(&cand, 0.0).unwrap() {
                        cand
                    } else {
                        a.clone()
                    }
                })
                .collect();
            let atom = &shifted[rng.gen_range(0..shifted.len())];
            if loss.eval(&(&z + atom)) > 0.0 {
                violations += 1;
            }
        }
        let freq = violations as f64 / trials as f64;
        let sigma = (gamma * (1.0 - gamma) / trials as f64).sqrt();
        assert!(
            freq <= gamma + 3.0 * sigma,
            "violation frequency {freq} exceeds {gamma} + 3 sigma"
        );
    }

    #[test]
    fn tightened_k1_equals_plain_block() {
        let (sys, stack) = benchmark_stack(3);
        let data = benchmark_dataset(&sys, 6, 3, 91);
        let tube = propagate_tube(&stack, &data, 0.05, 3).unwrap();
        let loss = state_loss();
        let spec = build_tightened_spec(&stack, &tube, &loss, 0.2, 1, ConeForm::default()).unwrap();
        assert_eq!(spec.blocks.len(), 1);
        for off in spec.blocks[0].offsets() {
            assert_eq!(*off, 0.0);
        }
        let plain = build_gamma_block(
            tube.step(1),
            &loss,
            0.2,
            None,
            ConeForm::default(),
            BudgetScaling::default(),
        )
        .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(92);
        for _ in 0..20 {
            let z = dvector![rng.gen_range(-11.0..3.0), rng.gen_range(-3.0..3.0)];
            assert_eq!(
                spec.feasible_at(&z, SolveOptions::default()).unwrap(),
                plain.feasible_at(&z, SolveOptions::default()).unwrap()
            );
        }
    }

    #[test]
    fn tightened_offsets_zero_for_point_noise() {
        // with W = {0} every Minkowski accumulation is {0}
        let (a, b) = benchmark_ab();
        let w = Polytope::singleton(dvector![0.0, 0.0]).unwrap();
        let sys = crate::lti::LinearSystem::new(a, b, benchmark_gain(), w).unwrap();
        let stack = crate::lti::error_stack(&sys, 3).unwrap();
        let pool = vec![dvector![0.0, 0.0]];
        let data = crate::lti::NoiseDataset::from_pool(
            pool,
            4,
            3,
            0,
            crate::lti::SamplingMode::WithReplacement,
        )
        .unwrap();
        let tube = propagate_tube(&stack, &data, 0.1, 3).unwrap();
        let spec = build_tightened_spec(&stack, &tube, &state_loss(), 0.2, 3, ConeForm::default())
            .unwrap();
        for block in &spec.blocks {
            for off in block.offsets() {
                assert!(off.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tightening_offsets_match_minkowski_oracle() {
        // k = 3, p = 1: h_1(alpha_j) = support(A_K W (+) A_K^2 W, a_j/gamma)
        let gamma = 0.2;
        let (sys, stack) = benchmark_stack(3);
        let data = benchmark_dataset(&sys, 5, 3, 93);
        let tube = propagate_tube(&stack, &data, 0.05, 3).unwrap();
        let loss = state_loss();
        let spec =
            build_tightened_spec(&stack, &tube, &loss, gamma, 3, ConeForm::default()).unwrap();
        let akw = sys.w.linear_image(sys.a_k()).unwrap();
        let ak2w = sys.w.linear_image(&(sys.a_k() * sys.a_k())).unwrap();
        let sum = akw.minkowski_sum(&ak2w).unwrap();
        for (j, (a, _)) in loss.pieces.iter().enumerate() {
            let alpha = a / gamma;
            let oracle = sum.support(&alpha).unwrap();
            assert_abs_diff_eq!(spec.blocks[0].offsets()[j], oracle, epsilon = 1e-9);
        }
        // p = k block has no offsets
        for off in spec.blocks[2].offsets() {
            assert_eq!(*off, 0.0);
        }
    }

    #[test]
    fn nesting_tightened_inside_plain_and_robust_inside_tightened() {
        let gamma = 0.2;
        let k = 3;
        let (sys, stack) = benchmark_stack(k);
        let data = benchmark_dataset(&sys, 8, k, 95);
        let tube = propagate_tube(&stack, &data, 0.05, k).unwrap();
        let loss = state_loss();
        let spec =
            build_tightened_spec(&stack, &tube, &loss, gamma, k, ConeForm::default()).unwrap();
        let plain = build_gamma_block(
            tube.step(k),
            &loss,
            gamma,
            None,
            ConeForm::default(),
            BudgetScaling::default(),
        )
        .unwrap();
        let x = state_set();
        let robust = x.pontryagin_diff(stack.support(k)).unwrap();
        let (lo, hi) = x.bounding_box().unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(96);
        let mut z_in_tightened = 0;
        let mut robust_checked = 0;
        for _ in 0..400 {
            let z = dvector![rng.gen_range(lo[0]..hi[0]), rng.gen_range(lo[1]..hi[1])];
            if spec.feasible_at(&z, SolveOptions::default()).unwrap() {
                z_in_tightened += 1;
                assert!(
                    plain.feasible_at(&z, SolveOptions::default()).unwrap(),
                    "Z_k must sit inside Gamma_k: z = {z:?}"
                );
            }
            if robust_checked < 60 && robust.contains(&z, -1e-9).unwrap() {
                robust_checked += 1;
                assert!(
                    spec.feasible_at(&z, SolveOptions::default()).unwrap(),
                    "X (-) E_k must sit inside Z_k: z = {z:?}"
                );
            }
        }
        assert!(z_in_tightened > 10, "sampling never hit the tightened set");
        assert!(robust_checked > 10, "sampling never hit the robust set");
    }

    #[test]
    fn cone_row_compression_is_exact() {
        // the compressed rows R satisfy ||R y|| = ||G y|| for the stored G
        let tube = tube_fixture(5, 4, 0.05, 65);
        let block = build_gamma_block(
            tube.step(4),
            &state_loss(),
            0.2,
            None,
            ConeForm::default(),
            BudgetScaling::default(),
        )
        .unwrap();
        assert_eq!(block.cone_dim(), 2);
        assert_eq!(block.cone_matrix().nrows(), 8); // t d = 4 * 2
        let gram = block.cone_matrix().transpose() * block.cone_matrix();
        let mut rng = ChaCha12Rng::seed_from_u64(66);
        for _ in 0..200 {
            let y: DVector<f64> = dvector![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let full = (block.cone_matrix() * &y).norm();
            let compressed = (y.transpose() * &gram * &y)[(0, 0)].sqrt();
            assert_abs_diff_eq!(full, compressed, epsilon = 1e-10);
        }
    }

    #[test]
    fn center_outside_support_detected() {
        let tube = tube_fixture(4, 1, 0.0, 97);
        let mut step = tube.step(1).clone();
        step.center.atoms[0] = dvector![10.0, 10.0];
        let err = build_gamma_block(
            &step,
            &state_loss(),
            0.2,
            None,
            ConeForm::default(),
            BudgetScaling::default(),
        );
        assert!(matches!(err, Err(DrcvarError::CenterOutsideSupport { .. })));
    }

    #[test]
    fn gamma_bounds_enforced() {
        let tube = tube_fixture(4, 1, 0.0, 98);
        for g in [0.0, 1e-4, 1.0, 1.3] {
            let err = build_gamma_block(
                tube.step(1),
                &state_loss(),
                g,
                None,
                ConeForm::default(),
                BudgetScaling::default(),
            );
            assert!(
                matches!(err, Err(DrcvarError::GammaOutOfRange(_))),
                "gamma {g}"
            );
        }
    }
}
