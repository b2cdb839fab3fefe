//! Solver-agnostic conic programs and the interior-point adapter.
//!
//! A [`ConicProgram`] is `min 0.5 x'Px + q'x` subject to equality rows
//! `a'x = b`, and cone rows grouped into nonnegative blocks (`a'x <= b`) and
//! second-order cone blocks (the slack vector `b - Ax` lies in the cone, with
//! its first entry the radius). Optional variable bounds are lowered to
//! nonnegative rows at assembly time.
//!
//! The concrete backend is Clarabel. The quadratic objective is passed
//! natively by default; an epigraph second-order-cone reformulation is kept
//! behind [`QuadObjMode::Epigraph`] and both paths are tested for equal
//! optima.

use std::fmt::Write as _;
use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConicError {
    #[error("malformed program: {0}")]
    Malformed(String),
    #[error("solver failure: terminated with status {0:?}")]
    SolverFailure(SolveStatus),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Cone block attached to a run of inequality rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConeSpec {
    NonNeg(usize),
    Soc(usize),
}

impl ConeSpec {
    pub fn len(&self) -> usize {
        match *self {
            ConeSpec::NonNeg(k) | ConeSpec::Soc(k) => k,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub type SparseRow = Vec<(usize, f64)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalError,
    IterationLimit,
}

/// Outcome of a solve. `primal` is present exactly when the status is
/// `Optimal`; reduced-accuracy terminations keep their iterate in `approx`
/// together with the primal residual so callers can decide whether to use it.
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub primal: Option<Vec<f64>>,
    pub objective_value: f64,
    pub solve_time: f64,
    pub approx: Option<(Vec<f64>, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadObjMode {
    Native,
    Epigraph,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub tol: f64,
    pub quad_mode: QuadObjMode,
    pub max_iter: u32,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-8,
            quad_mode: QuadObjMode::Native,
            max_iter: 200,
        }
    }
}

/// Standard-form conic program; see the module docs for the convention.
#[derive(Debug, Clone, Default)]
pub struct ConicProgram {
    num_vars: usize,
    lin_obj: Vec<f64>,
    /// entries of P (for 0.5 x'Px), stored with i <= j
    quad_obj: Vec<(usize, usize, f64)>,
    eq_rows: Vec<(SparseRow, f64)>,
    ineq_rows: Vec<(SparseRow, f64)>,
    cone_spec: Vec<ConeSpec>,
    var_bounds: Option<Vec<(Option<f64>, Option<f64>)>>,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn num_eq_rows(&self) -> usize {
        self.eq_rows.len()
    }

    pub fn num_ineq_rows(&self) -> usize {
        self.ineq_rows.len()
    }

    pub fn cone_spec(&self) -> &[ConeSpec] {
        &self.cone_spec
    }

    /// Append `count` fresh variables; returns the index of the first.
    pub fn add_vars(&mut self, count: usize) -> usize {
        let first = self.num_vars;
        self.num_vars += count;
        self.lin_obj.resize(self.num_vars, 0.0);
        first
    }

    pub fn add_lin_cost(&mut self, var: usize, coef: f64) {
        self.lin_obj[var] += coef;
    }

    /// Add `coef` to `P[i,j]` (and symmetrically) of the `0.5 x'Px` term.
    pub fn add_quad_cost(&mut self, i: usize, j: usize, coef: f64) {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        self.quad_obj.push((a, b, coef));
    }

    pub fn add_eq(&mut self, row: SparseRow, rhs: f64) {
        self.eq_rows.push((row, rhs));
    }

    /// Overwrite the right-hand side of an existing equality row; lets a
    /// receding-horizon caller rebuild only the measured-state rows.
    pub fn set_eq_rhs(&mut self, row: usize, rhs: f64) {
        self.eq_rows[row].1 = rhs;
    }

    /// Add rows `a'x <= b` as one nonnegative cone block.
    pub fn add_nonneg_block(&mut self, rows: Vec<(SparseRow, f64)>) {
        if rows.is_empty() {
            return;
        }
        let k = rows.len();
        self.ineq_rows.extend(rows);
        self.cone_spec.push(ConeSpec::NonNeg(k));
    }

    /// Add a second-order cone block: the slack vector `b - Ax` over these
    /// rows must satisfy `s_0 >= ||s_1..||_2`.
    pub fn add_soc_block(&mut self, rows: Vec<(SparseRow, f64)>) {
        assert!(rows.len() >= 2, "SOC blocks need size >= 2");
        let k = rows.len();
        self.ineq_rows.extend(rows);
        self.cone_spec.push(ConeSpec::Soc(k));
    }

    pub fn set_var_bounds(&mut self, bounds: Vec<(Option<f64>, Option<f64>)>) {
        assert_eq!(bounds.len(), self.num_vars);
        self.var_bounds = Some(bounds);
    }

    fn validate(&self) -> Result<(), ConicError> {
        let total: usize = self.cone_spec.iter().map(|c| c.len()).sum();
        if total != self.ineq_rows.len() {
            return Err(ConicError::Malformed(format!(
                "cone sizes sum to {total} but {} inequality rows exist",
                self.ineq_rows.len()
            )));
        }
        let check_row =
            |row: &SparseRow| row.iter().all(|&(i, v)| i < self.num_vars && v.is_finite());
        for (row, rhs) in self.eq_rows.iter().chain(self.ineq_rows.iter()) {
            if !check_row(row) || !rhs.is_finite() {
                return Err(ConicError::Malformed(
                    "row with bad index or non-finite value".into(),
                ));
            }
        }
        for &(i, j, v) in &self.quad_obj {
            if i >= self.num_vars || j >= self.num_vars || !v.is_finite() {
                return Err(ConicError::Malformed(
                    "bad quadratic objective entry".into(),
                ));
            }
        }
        Ok(())
    }

    /// Zero-objective copy for feasibility testing.
    fn feasibility_copy(&self) -> ConicProgram {
        let mut p = self.clone();
        p.lin_obj.iter_mut().for_each(|v| *v = 0.0);
        p.quad_obj.clear();
        p
    }

    /// Solve and report `true` iff a feasible point was found. Reduced
    /// accuracy terminations count as feasible when the primal residual is
    /// below `1e-6`.
    pub fn feasibility(&self, opts: SolveOptions) -> Result<bool, ConicError> {
        let res = self.feasibility_copy().solve(opts)?;
        match res.status {
            SolveStatus::Optimal => Ok(true),
            SolveStatus::Infeasible => Ok(false),
            SolveStatus::IterationLimit => match res.approx {
                Some((_, r_prim)) if r_prim <= 1e-6 => Ok(true),
                _ => Err(ConicError::SolverFailure(res.status)),
            },
            s => Err(ConicError::SolverFailure(s)),
        }
    }

    pub fn solve(&self, opts: SolveOptions) -> Result<SolveResult, ConicError> {
        self.validate()?;
        match opts.quad_mode {
            QuadObjMode::Native => self.solve_assembled(opts, None),
            QuadObjMode::Epigraph => {
                if self.quad_obj.is_empty() {
                    return self.solve_assembled(opts, None);
                }
                let factor = self.quad_factor()?;
                self.solve_assembled(opts, Some(factor))
            }
        }
    }

    /// Factor `P = L'L` (rows of L returned); eigendecomposition handles the
    /// positive semidefinite case.
    fn quad_factor(&self) -> Result<DMatrix<f64>, ConicError> {
        let n = self.num_vars;
        let mut p: DMatrix<f64> = DMatrix::zeros(n, n);
        for &(i, j, v) in &self.quad_obj {
            p[(i, j)] += v;
            if i != j {
                p[(j, i)] += v;
            }
        }
        let eig = p.symmetric_eigen();
        let mut rows: Vec<nalgebra::RowDVector<f64>> = Vec::new();
        for (idx, &lam) in eig.eigenvalues.iter().enumerate() {
            if lam < -1e-9 {
                return Err(ConicError::Malformed(
                    "quadratic objective is not positive semidefinite".into(),
                ));
            }
            if lam > 1e-12 {
                rows.push(eig.eigenvectors.column(idx).transpose() * lam.sqrt());
            }
        }
        let mut l = DMatrix::zeros(rows.len(), n);
        for (r, row) in rows.iter().enumerate() {
            l.row_mut(r).copy_from(row);
        }
        Ok(l)
    }

    fn solve_assembled(
        &self,
        opts: SolveOptions,
        epigraph: Option<DMatrix<f64>>,
    ) -> Result<SolveResult, ConicError> {
        // Variable count grows by one (the epigraph variable) when the
        // quadratic term is reformulated.
        let extra = usize::from(epigraph.is_some());
        let n = self.num_vars + extra;
        let epi_var = self.num_vars;

        let mut q = self.lin_obj.clone();
        q.resize(n, 0.0);
        if epigraph.is_some() {
            q[epi_var] = 1.0;
        }

        // objective quadratic part (native path only)
        let p_triplets: Vec<(usize, usize, f64)> = if epigraph.is_some() {
            vec![]
        } else {
            self.quad_obj.clone()
        };

        // rows: equalities, declared cones, bounds, epigraph cone
        let mut rows: Vec<(SparseRow, f64)> = Vec::new();
        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
        for (row, rhs) in &self.eq_rows {
            rows.push((row.clone(), *rhs));
        }
        cones.push(SupportedConeT::ZeroConeT(self.eq_rows.len()));
        let mut cursor = 0usize;
        for spec in &self.cone_spec {
            for k in 0..spec.len() {
                let (row, rhs) = &self.ineq_rows[cursor + k];
                rows.push((row.clone(), *rhs));
            }
            cursor += spec.len();
            cones.push(match spec {
                ConeSpec::NonNeg(k) => SupportedConeT::NonnegativeConeT(*k),
                ConeSpec::Soc(k) => SupportedConeT::SecondOrderConeT(*k),
            });
        }
        if let Some(bounds) = &self.var_bounds {
            let mut count = 0;
            for (i, (lo, hi)) in bounds.iter().enumerate() {
                if let Some(lo) = lo {
                    rows.push((vec![(i, -1.0)], -lo));
                    count += 1;
                }
                if let Some(hi) = hi {
                    rows.push((vec![(i, 1.0)], *hi));
                    count += 1;
                }
            }
            if count > 0 {
                cones.push(SupportedConeT::NonnegativeConeT(count));
            }
        }
        if let Some(l) = &epigraph {
            // t >= 0.5 ||Lx||^2  <=>  || [sqrt(2) Lx ; t-1] || <= t+1
            let mut block: Vec<(SparseRow, f64)> = Vec::with_capacity(l.nrows() + 2);
            block.push((vec![(epi_var, -1.0)], 1.0));
            let s2 = std::f64::consts::SQRT_2;
            for r in 0..l.nrows() {
                let mut row: SparseRow = Vec::new();
                for c in 0..l.ncols() {
                    let v = l[(r, c)];
                    if v != 0.0 {
                        row.push((c, -s2 * v));
                    }
                }
                block.push((row, 0.0));
            }
            block.push((vec![(epi_var, -1.0)], -1.0));
            let k = block.len();
            rows.extend(block);
            cones.push(SupportedConeT::SecondOrderConeT(k));
        }

        let m = rows.len();
        let mut a_triplets: Vec<(usize, usize, f64)> = Vec::new();
        let mut b = vec![0.0; m];
        for (r, (row, rhs)) in rows.iter().enumerate() {
            b[r] = *rhs;
            for &(c, v) in row {
                if v != 0.0 {
                    a_triplets.push((r, c, v));
                }
            }
        }
        let a = csc_from_triplets(m, n, &a_triplets);
        let p = csc_from_triplets_upper(n, &p_triplets);

        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(opts.max_iter)
            .tol_feas(opts.tol)
            .tol_gap_abs(opts.tol)
            .tol_gap_rel(opts.tol)
            .build()
            .map_err(|e| ConicError::Malformed(format!("settings: {e:?}")))?;
        let start = Instant::now();
        let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings);
        solver.solve();
        let elapsed = start.elapsed().as_secs_f64();
        let sol = &solver.solution;
        let take_x = || sol.x[..self.num_vars].to_vec();
        let (status, primal, approx) = match sol.status {
            SolverStatus::Solved => (SolveStatus::Optimal, Some(take_x()), None),
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                (SolveStatus::Infeasible, None, None)
            }
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
                (SolveStatus::Unbounded, None, None)
            }
            SolverStatus::AlmostSolved | SolverStatus::MaxIterations | SolverStatus::MaxTime => (
                SolveStatus::IterationLimit,
                None,
                Some((take_x(), sol.r_prim)),
            ),
            _ => (SolveStatus::NumericalError, None, None),
        };
        let objective_value = match status {
            // report the original objective (the epigraph variable is internal)
            SolveStatus::Optimal => self.objective_at(primal.as_ref().unwrap()),
            SolveStatus::IterationLimit => approx
                .as_ref()
                .map(|(x, _)| self.objective_at(x))
                .unwrap_or(f64::NAN),
            _ => f64::NAN,
        };
        Ok(SolveResult {
            status,
            primal,
            objective_value,
            solve_time: elapsed,
            approx,
        })
    }

    /// Evaluate `0.5 x'Px + q'x`.
    pub fn objective_at(&self, x: &[f64]) -> f64 {
        let mut val = 0.0;
        for (i, &c) in self.lin_obj.iter().enumerate() {
            val += c * x[i];
        }
        for &(i, j, v) in &self.quad_obj {
            let term = 0.5 * v * x[i] * x[j];
            val += if i == j { term } else { 2.0 * term };
        }
        val
    }

    /// Text dump in a line-oriented sparse triplet format; `parse` reads it
    /// back. Used for debugging constraint assembly.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        writeln!(s, "conic v1").unwrap();
        writeln!(s, "vars {}", self.num_vars).unwrap();
        for (i, &v) in self.lin_obj.iter().enumerate() {
            if v != 0.0 {
                writeln!(s, "lin {i} {v}").unwrap();
            }
        }
        for &(i, j, v) in &self.quad_obj {
            writeln!(s, "quad {i} {j} {v}").unwrap();
        }
        let fmt_row = |row: &SparseRow, rhs: f64| {
            let mut line = format!("{rhs} {}", row.len());
            for &(i, v) in row {
                line.push_str(&format!(" {i} {v}"));
            }
            line
        };
        for (row, rhs) in &self.eq_rows {
            writeln!(s, "eq {}", fmt_row(row, *rhs)).unwrap();
        }
        for (row, rhs) in &self.ineq_rows {
            writeln!(s, "row {}", fmt_row(row, *rhs)).unwrap();
        }
        for spec in &self.cone_spec {
            match spec {
                ConeSpec::NonNeg(k) => writeln!(s, "cone nonneg {k}").unwrap(),
                ConeSpec::Soc(k) => writeln!(s, "cone soc {k}").unwrap(),
            }
        }
        if let Some(bounds) = &self.var_bounds {
            for (i, (lo, hi)) in bounds.iter().enumerate() {
                let lo = lo.map(|v| v.to_string()).unwrap_or_else(|| "-inf".into());
                let hi = hi.map(|v| v.to_string()).unwrap_or_else(|| "inf".into());
                writeln!(s, "bound {i} {lo} {hi}").unwrap();
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<ConicProgram, ConicError> {
        let mut prog = ConicProgram::new();
        let mut bounds: Vec<(Option<f64>, Option<f64>)> = Vec::new();
        let mut ineq_buf: Vec<(SparseRow, f64)> = Vec::new();
        let mut cone_buf: Vec<ConeSpec> = Vec::new();
        let err = |line: usize, msg: &str| ConicError::Parse {
            line,
            msg: msg.to_string(),
        };
        let parse_row = |tokens: &[&str], line: usize| -> Result<(SparseRow, f64), ConicError> {
            let rhs: f64 = tokens
                .first()
                .ok_or_else(|| err(line, "missing rhs"))?
                .parse()
                .map_err(|_| err(line, "bad rhs"))?;
            let k: usize = tokens
                .get(1)
                .ok_or_else(|| err(line, "missing nnz count"))?
                .parse()
                .map_err(|_| err(line, "bad nnz count"))?;
            let mut row = Vec::with_capacity(k);
            for e in 0..k {
                let i: usize = tokens
                    .get(2 + 2 * e)
                    .ok_or_else(|| err(line, "missing index"))?
                    .parse()
                    .map_err(|_| err(line, "bad index"))?;
                let v: f64 = tokens
                    .get(3 + 2 * e)
                    .ok_or_else(|| err(line, "missing value"))?
                    .parse()
                    .map_err(|_| err(line, "bad value"))?;
                row.push((i, v));
            }
            Ok((row, rhs))
        };
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line == "conic v1" {
                continue;
            }
            let tok: Vec<&str> = line.split_whitespace().collect();
            match tok[0] {
                "vars" => {
                    let n: usize = tok[1].parse().map_err(|_| err(ln, "bad vars"))?;
                    prog.add_vars(n);
                }
                "lin" => {
                    let i: usize = tok[1].parse().map_err(|_| err(ln, "bad idx"))?;
                    let v: f64 = tok[2].parse().map_err(|_| err(ln, "bad val"))?;
                    prog.add_lin_cost(i, v);
                }
                "quad" => {
                    let i: usize = tok[1].parse().map_err(|_| err(ln, "bad idx"))?;
                    let j: usize = tok[2].parse().map_err(|_| err(ln, "bad idx"))?;
                    let v: f64 = tok[3].parse().map_err(|_| err(ln, "bad val"))?;
                    prog.add_quad_cost(i, j, v);
                }
                "eq" => {
                    let (row, rhs) = parse_row(&tok[1..], ln)?;
                    prog.add_eq(row, rhs);
                }
                "row" => {
                    ineq_buf.push(parse_row(&tok[1..], ln)?);
                }
                "cone" => {
                    let k: usize = tok[2].parse().map_err(|_| err(ln, "bad cone size"))?;
                    cone_buf.push(match tok[1] {
                        "nonneg" => ConeSpec::NonNeg(k),
                        "soc" => ConeSpec::Soc(k),
                        _ => return Err(err(ln, "unknown cone kind")),
                    });
                }
                "bound" => {
                    let i: usize = tok[1].parse().map_err(|_| err(ln, "bad idx"))?;
                    bounds.resize(bounds.len().max(i + 1), (None, None));
                    let lo = (tok[2] != "-inf")
                        .then(|| tok[2].parse::<f64>())
                        .transpose()
                        .map_err(|_| err(ln, "bad lo"))?;
                    let hi = (tok[3] != "inf")
                        .then(|| tok[3].parse::<f64>())
                        .transpose()
                        .map_err(|_| err(ln, "bad hi"))?;
                    bounds[i] = (lo, hi);
                }
                other => return Err(err(ln, &format!("unknown directive {other}"))),
            }
        }
        prog.ineq_rows = ineq_buf;
        prog.cone_spec = cone_buf;
        if !bounds.is_empty() {
            bounds.resize(prog.num_vars, (None, None));
            prog.var_bounds = Some(bounds);
        }
        prog.validate()?;
        Ok(prog)
    }
}

fn csc_from_triplets(m: usize, n: usize, triplets: &[(usize, usize, f64)]) -> CscMatrix<f64> {
    let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for &(r, c, v) in triplets {
        cols[c].push((r, v));
    }
    let mut colptr = Vec::with_capacity(n + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for col in cols.iter_mut() {
        col.sort_by_key(|&(r, _)| r);
        // merge duplicates
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(col.len());
        for &(r, v) in col.iter() {
            if let Some(last) = merged.last_mut() {
                if last.0 == r {
                    last.1 += v;
                    continue;
                }
            }
            merged.push((r, v));
        }
        for (r, v) in merged {
            rowval.push(r);
            nzval.push(v);
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}

fn csc_from_triplets_upper(n: usize, triplets: &[(usize, usize, f64)]) -> CscMatrix<f64> {
    // keep upper triangle as Clarabel expects
    let upper: Vec<(usize, usize, f64)> = triplets
        .iter()
        .map(|&(i, j, v)| if i <= j { (i, j, v) } else { (j, i, v) })
        .collect();
    csc_from_triplets(n, n, &upper)
}
