//! Wasserstein ambiguity sets over noise and state.
//!
//! The distributional uncertainty of the noise trajectory is a Wasserstein
//! ball around the empirical distribution of stacked sample trajectories.
//! Pushing that ball through the stacked error map `D_{t-1}` yields, exactly,
//! a ball around the propagated empirical distribution with transport cost
//! `xi -> ||pinv(D_{t-1}) xi||_2` and support `E_t`; those per-step balls are
//! the [`WassersteinTube`].
//!
//! The dual norm of that cost is `y -> ||D' y||_2`: for full row-rank `D`
//! the literal expression `pinv(D) (pinv(D)' pinv(D))^{-1}` collapses to
//! `D'`, which is what the constraint blocks use. The literal composition
//! stays available for cross-validation.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::geometry::{GeomError, Polytope};
use crate::lti::{ErrorStack, NoiseDataset};

#[derive(Debug, Error)]
pub enum AmbiguityError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is rank deficient (sigma_min/sigma_max = {ratio})")]
    RankDeficient { ratio: f64 },
    #[error("ambiguity radius must be nonnegative, got {0}")]
    NegativeRadius(f64),
    #[error("noise dataset horizon {have} shorter than requested horizon {need}")]
    HorizonTooShort { have: usize, need: usize },
    #[error("empirical distribution needs at least one atom")]
    NoAtoms,
    #[error(transparent)]
    Geometry(#[from] GeomError),
}

/// Uniformly weighted empirical distribution on its atoms.
#[derive(Debug, Clone)]
pub struct EmpiricalDistribution {
    pub atoms: Vec<DVector<f64>>,
}

impl EmpiricalDistribution {
    pub fn new(atoms: Vec<DVector<f64>>) -> Result<Self, AmbiguityError> {
        if atoms.is_empty() {
            return Err(AmbiguityError::NoAtoms);
        }
        Ok(EmpiricalDistribution { atoms })
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }
}

/// Pushforward through `x -> M x`: an empirical distribution stays empirical,
/// supported on the mapped atoms.
pub fn pushforward_empirical(
    p: &EmpiricalDistribution,
    m: &DMatrix<f64>,
) -> Result<EmpiricalDistribution, AmbiguityError> {
    let dim = p.atoms[0].len();
    if m.ncols() != dim {
        return Err(AmbiguityError::DimensionMismatch {
            expected: dim,
            got: m.ncols(),
        });
    }
    Ok(EmpiricalDistribution {
        atoms: p.atoms.iter().map(|a| m * a).collect(),
    })
}

/// Ground transportation cost of the ambiguity ball.
#[derive(Debug, Clone)]
pub enum TransportCost {
    /// Plain Euclidean distance.
    Euclidean,
    /// `xi -> ||pinv(D) xi||_2` for a full row-rank `D`; the SVD is cached so
    /// evaluation uses the singular form `sqrt(sum_i |u_i' xi|^2 / sigma_i^2)`.
    PinvWeighted {
        d: DMatrix<f64>,
        u: DMatrix<f64>,
        sigma: DVector<f64>,
    },
}

const RANK_RATIO_TOL: f64 = 1e-10;

/// `(U, sigma, V^T)` of a full row-rank matrix.
type SvdParts = (DMatrix<f64>, DVector<f64>, DMatrix<f64>);

fn checked_svd(d: &DMatrix<f64>) -> Result<SvdParts, AmbiguityError> {
    let svd = d.clone().svd(true, true);
    let sigma = svd.singular_values;
    let smax = sigma.amax();
    let smin = sigma.iter().cloned().fold(f64::INFINITY, f64::min);
    if sigma.len() < d.nrows() || smin < RANK_RATIO_TOL * smax {
        return Err(AmbiguityError::RankDeficient {
            ratio: if smax > 0.0 { smin / smax } else { 0.0 },
        });
    }
    Ok((svd.u.expect("svd u"), sigma, svd.v_t.expect("svd vt")))
}

impl TransportCost {
    pub fn pinv_weighted(d: &DMatrix<f64>) -> Result<Self, AmbiguityError> {
        let (u, sigma, _) = checked_svd(d)?;
        Ok(TransportCost::PinvWeighted {
            d: d.clone(),
            u,
            sigma,
        })
    }

    /// Evaluate the cost at a displacement `xi`.
    pub fn eval(&self, xi: &DVector<f64>) -> Result<f64, AmbiguityError> {
        match self {
            TransportCost::Euclidean => Ok(xi.norm()),
            TransportCost::PinvWeighted { d, u, sigma } => {
                if xi.len() != d.nrows() {
                    return Err(AmbiguityError::DimensionMismatch {
                        expected: d.nrows(),
                        got: xi.len(),
                    });
                }
                let mut acc = 0.0;
                for i in 0..sigma.len() {
                    let proj = u.column(i).dot(xi);
                    acc += (proj / sigma[i]).powi(2);
                }
                Ok(acc.sqrt())
            }
        }
    }

    /// The matrix behind the cost, when one exists.
    pub fn matrix(&self) -> Option<&DMatrix<f64>> {
        match self {
            TransportCost::Euclidean => None,
            TransportCost::PinvWeighted { d, .. } => Some(d),
        }
    }
}

/// Dual-norm matrix `G` with dual norm `y -> ||G y||_2` for the primal cost
/// `xi -> ||pinv(D) xi||_2`. For full row-rank `D` the algebraic identity
/// `pinv(D) (pinv(D)' pinv(D))^{-1} = D'` applies, so this returns `D'`.
pub fn dual_norm_matrix(d: &DMatrix<f64>) -> Result<DMatrix<f64>, AmbiguityError> {
    checked_svd(d)?;
    Ok(d.transpose())
}

/// The literal dual-norm matrix `pinv(D) (pinv(D)' pinv(D))^{-1}`, kept for
/// cross-validating the simplified form.
pub fn dual_norm_matrix_literal(d: &DMatrix<f64>) -> Result<DMatrix<f64>, AmbiguityError> {
    let (u, sigma, vt) = checked_svd(d)?;
    // pinv(D) = V diag(1/sigma) U'
    let k = sigma.len();
    let mut sinv = DMatrix::zeros(k, k);
    for i in 0..k {
        sinv[(i, i)] = 1.0 / sigma[i];
    }
    let pinv = vt.transpose() * &sinv * u.transpose();
    let gram = pinv.transpose() * &pinv;
    let gram_inv = gram
        .try_inverse()
        .ok_or(AmbiguityError::RankDeficient { ratio: 0.0 })?;
    Ok(pinv * gram_inv)
}

/// One step of the Wasserstein tube: the ambiguity ball for the error state
/// at time `t`.
#[derive(Debug, Clone)]
pub struct TubeStep {
    pub t: usize,
    /// Empirical center on the propagated samples `e_t^(i) = D_{t-1} w^(i)`.
    pub center: EmpiricalDistribution,
    pub radius: f64,
    pub cost: TransportCost,
    /// `E_t`, carrying the H-rep `(F_t, g_t)` used by the constraint blocks.
    pub support: Polytope,
}

impl TubeStep {
    pub fn n(&self) -> usize {
        self.center.len()
    }

    /// Row count `q_t` of the support H-rep.
    pub fn support_rows(&self) -> Result<usize, AmbiguityError> {
        Ok(self.support.hrep()?.f.nrows())
    }
}

/// Per-step ambiguity sets for `t = 1..=N`; the distributional uncertainty
/// of the error state along the horizon.
#[derive(Debug, Clone)]
pub struct WassersteinTube {
    pub steps: Vec<TubeStep>,
}

impl WassersteinTube {
    /// Step for time `t`, `1 <= t <= N`.
    pub fn step(&self, t: usize) -> &TubeStep {
        &self.steps[t - 1]
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Center atoms per step, one CSV row per atom: `t,atom,coords...`.
    pub fn write_centers_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        let dim = self.steps[0].center.atoms[0].len();
        let coord_cols: Vec<String> = (1..=dim).map(|i| format!("e{i}")).collect();
        writeln!(out, "t,atom,{}", coord_cols.join(","))?;
        for step in &self.steps {
            for (i, a) in step.center.atoms.iter().enumerate() {
                let coords: Vec<String> = a.iter().map(|x| format!("{x}")).collect();
                writeln!(out, "{},{},{}", step.t, i, coords.join(","))?;
            }
        }
        Ok(())
    }

    /// Manifest rows `t,epsilon,q_t,sigma_1,...` describing each step's ball.
    pub fn write_manifest_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        let d = match &self.steps[0].cost {
            TransportCost::PinvWeighted { sigma, .. } => sigma.len(),
            TransportCost::Euclidean => 0,
        };
        let sig_cols: Vec<String> = (1..=d).map(|i| format!("sigma{i}")).collect();
        writeln!(out, "t,epsilon,q_t,{}", sig_cols.join(","))?;
        for step in &self.steps {
            let q = step
                .support_rows()
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
            let sigmas = match &step.cost {
                TransportCost::PinvWeighted { sigma, .. } => {
                    sigma.iter().map(|s| format!("{s}")).collect::<Vec<_>>()
                }
                TransportCost::Euclidean => vec![],
            };
            writeln!(out, "{},{},{},{}", step.t, step.radius, q, sigmas.join(","))?;
        }
        Ok(())
    }
}

/// Propagate the noise-trajectory ambiguity ball through the error dynamics:
/// for each `t`, the center is the pushforward of the stacked empirical
/// distribution by `D_{t-1}`, the cost is pinv-weighted by `D_{t-1}`, the
/// support is `E_t` and the radius is inherited unchanged.
pub fn propagate_tube(
    stack: &ErrorStack,
    data: &NoiseDataset,
    radius: f64,
    horizon: usize,
) -> Result<WassersteinTube, AmbiguityError> {
    if radius < 0.0 {
        return Err(AmbiguityError::NegativeRadius(radius));
    }
    if data.horizon() < horizon || stack.horizon < horizon {
        return Err(AmbiguityError::HorizonTooShort {
            have: data.horizon().min(stack.horizon),
            need: horizon,
        });
    }
    let mut steps = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let d_t = stack.d_prefix(t);
        let stacked = EmpiricalDistribution::new(data.stacked_all(t))?;
        let center = pushforward_empirical(&stacked, &d_t)?;
        let cost = TransportCost::pinv_weighted(&d_t)?;
        let support = stack.support(t).clone();
        support.hrep()?; // materialize (F_t, g_t)
        steps.push(TubeStep {
            t,
            center,
            radius,
            cost,
            support,
        });
    }
    Ok(WassersteinTube { steps })
}

/// Diameter of a support polytope under a transport cost: the maximum of the
/// (convex) cost over vertex pairs.
pub fn diameter_under_cost(
    support: &Polytope,
    cost: &TransportCost,
) -> Result<f64, AmbiguityError> {
    let verts = support.vertices()?;
    let mut best = 0.0f64;
    for (i, a) in verts.iter().enumerate() {
        for b in verts.iter().skip(i + 1) {
            best = best.max(cost.eval(&(a - b))?);
        }
    }
    Ok(best)
}
