//! Compact convex polytopes in dimension `d <= 3` with exact arithmetic.
//!
//! A [`Polytope`] carries an H-representation `{x : F x <= g}`, a
//! V-representation (the extreme points), or both; the missing one is
//! computed on demand and cached. All operations are pure; a constructed
//! polytope is immutable and can be shared across threads.
//!
//! These sets back the noise support, state/input constraint sets, tube
//! cross-sections and every tightening in the MPC layers, so the arithmetic
//! here is deliberately exact-at-vertices rather than approximate: Minkowski
//! sums go through vertex sums with hull pruning, Pontryagin differences
//! offset H-rep rows by support values, and facet enumeration is limited to
//! `d <= 3` where it can be done deterministically.

mod hull;

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance for geometric coincidence (vertex dedup, facet fits).
pub const COINCIDENCE_TOL: f64 = 1e-9;

/// Default tolerance for membership tests.
pub const DEFAULT_MEMBERSHIP_TOL: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("support is unbounded in the requested direction (non-compact input)")]
    UnboundedDirection,
    #[error("operation not supported in dimension {0} (limit is 3)")]
    UnsupportedDimension(usize),
    #[error("polytope has no representation or is empty where a point set is required")]
    EmptySet,
    #[error("degenerate input: points do not determine the requested structure")]
    DegenerateInput,
    #[error("non-finite entry in input data")]
    NonFinite,
}

/// Halfspace representation `{x : F x <= g}`.
#[derive(Debug, Clone)]
pub struct HRep {
    pub f: DMatrix<f64>,
    pub g: DVector<f64>,
}

/// Compact convex polytope with lazily completed dual representations.
#[derive(Debug, Default)]
pub struct Polytope {
    dim: usize,
    hrep: OnceLock<HRep>,
    vrep: OnceLock<Vec<DVector<f64>>>,
}

impl Clone for Polytope {
    fn clone(&self) -> Self {
        let p = Polytope {
            dim: self.dim,
            hrep: OnceLock::new(),
            vrep: OnceLock::new(),
        };
        if let Some(h) = self.hrep.get() {
            let _ = p.hrep.set(h.clone());
        }
        if let Some(v) = self.vrep.get() {
            let _ = p.vrep.set(v.clone());
        }
        p
    }
}

impl Polytope {
    /// Polytope from `{x : F x <= g}`. The set must be bounded; boundedness
    /// is verified lazily when vertices are first required.
    pub fn from_hrep(f: DMatrix<f64>, g: DVector<f64>) -> Result<Self, GeomError> {
        if f.nrows() != g.len() {
            return Err(GeomError::DimensionMismatch {
                expected: f.nrows(),
                got: g.len(),
            });
        }
        if f.iter().any(|x| !x.is_finite()) || g.iter().any(|x| !x.is_finite()) {
            return Err(GeomError::NonFinite);
        }
        let p = Polytope {
            dim: f.ncols(),
            hrep: OnceLock::new(),
            vrep: OnceLock::new(),
        };
        let _ = p.hrep.set(HRep { f, g });
        Ok(p)
    }

    /// Polytope as the convex hull of a point set. The stored V-rep is the
    /// extreme-point subset, pruned deterministically.
    pub fn from_vertices(points: &[DVector<f64>]) -> Result<Self, GeomError> {
        if points.is_empty() {
            return Err(GeomError::EmptySet);
        }
        let dim = points[0].len();
        if points.iter().any(|p| p.len() != dim) {
            return Err(GeomError::DimensionMismatch {
                expected: dim,
                got: points.iter().map(|p| p.len()).find(|&l| l != dim).unwrap(),
            });
        }
        if points.iter().any(|p| p.iter().any(|x| !x.is_finite())) {
            return Err(GeomError::NonFinite);
        }
        let verts = hull::convex_hull(points)?;
        let p = Polytope {
            dim,
            hrep: OnceLock::new(),
            vrep: OnceLock::new(),
        };
        let _ = p.vrep.set(verts);
        Ok(p)
    }

    /// Axis-aligned box `prod_i [lo_i, hi_i]`.
    pub fn hyper_box(lo: &[f64], hi: &[f64]) -> Result<Self, GeomError> {
        if lo.len() != hi.len() {
            return Err(GeomError::DimensionMismatch {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        let d = lo.len();
        let mut f = DMatrix::zeros(2 * d, d);
        let mut g = DVector::zeros(2 * d);
        for i in 0..d {
            f[(2 * i, i)] = 1.0;
            g[2 * i] = hi[i];
            f[(2 * i + 1, i)] = -1.0;
            g[2 * i + 1] = -lo[i];
        }
        let p = Self::from_hrep(f, g)?;
        // boxes are cheap to vertex-enumerate directly
        let mut verts = Vec::with_capacity(1 << d);
        for mask in 0..(1usize << d) {
            let mut v = DVector::zeros(d);
            for i in 0..d {
                v[i] = if mask & (1 << i) != 0 { hi[i] } else { lo[i] };
            }
            verts.push(v);
        }
        let _ = p.vrep.set(hull::convex_hull(&verts)?);
        Ok(p)
    }

    /// The single point `{p}`.
    pub fn singleton(point: DVector<f64>) -> Result<Self, GeomError> {
        Self::from_vertices(std::slice::from_ref(&point))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn has_hrep(&self) -> bool {
        self.hrep.get().is_some()
    }

    pub fn has_vrep(&self) -> bool {
        self.vrep.get().is_some()
    }

    /// H-representation, computing it by facet enumeration if absent
    /// (`d <= 3` only).
    pub fn hrep(&self) -> Result<&HRep, GeomError> {
        if let Some(h) = self.hrep.get() {
            return Ok(h);
        }
        let verts = self.vrep.get().ok_or(GeomError::EmptySet)?;
        let h = hull::facet_hrep(verts)?;
        Ok(self.hrep.get_or_init(|| h))
    }

    /// Extreme points, enumerating them from the H-rep if absent
    /// (`d <= 3` only). An empty slice means the H-rep is infeasible.
    pub fn vertices(&self) -> Result<&[DVector<f64>], GeomError> {
        if let Some(v) = self.vrep.get() {
            return Ok(v);
        }
        let h = self.hrep.get().ok_or(GeomError::EmptySet)?;
        let v = vertices_from_hrep(h)?;
        Ok(self.vrep.get_or_init(|| v))
    }

    /// True if the feasible set is empty (possible after a Pontryagin
    /// difference that over-tightens).
    pub fn is_empty(&self) -> Result<bool, GeomError> {
        Ok(self.vertices()?.is_empty())
    }

    /// Support function `sup_{x in P} <a, x>`, exact at a vertex.
    pub fn support(&self, a: &DVector<f64>) -> Result<f64, GeomError> {
        if a.len() != self.dim {
            return Err(GeomError::DimensionMismatch {
                expected: self.dim,
                got: a.len(),
            });
        }
        if a.iter().any(|x| !x.is_finite()) {
            return Err(GeomError::NonFinite);
        }
        let verts = self.vertices()?;
        verts
            .iter()
            .map(|v| a.dot(v))
            .fold(None, |acc: Option<f64>, x| {
                Some(acc.map_or(x, |m| m.max(x)))
            })
            .ok_or(GeomError::EmptySet)
    }

    /// Minkowski sum `P (+) Q` via vertex sums with hull pruning.
    pub fn minkowski_sum(&self, other: &Polytope) -> Result<Polytope, GeomError> {
        if other.dim != self.dim {
            return Err(GeomError::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        let vp = self.vertices()?;
        let vq = other.vertices()?;
        if vp.is_empty() || vq.is_empty() {
            return Err(GeomError::EmptySet);
        }
        let mut sums = Vec::with_capacity(vp.len() * vq.len());
        for p in vp {
            for q in vq {
                sums.push(p + q);
            }
        }
        Polytope::from_vertices(&sums)
    }

    /// Pontryagin difference `P (-) Q`: each H-rep row of `P` is offset by
    /// the support of `Q` in that row's normal direction. The result may be
    /// empty; that is a legal value, detected by [`Polytope::is_empty`].
    pub fn pontryagin_diff(&self, other: &Polytope) -> Result<Polytope, GeomError> {
        if other.dim != self.dim {
            return Err(GeomError::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        let h = self.hrep()?;
        let mut g = h.g.clone();
        for i in 0..h.f.nrows() {
            let row = h.f.row(i).transpose();
            g[i] -= other.support(&row)?;
        }
        Polytope::from_hrep(h.f.clone(), g)
    }

    /// Image `{M x : x in P}` as the hull of mapped vertices.
    pub fn linear_image(&self, m: &DMatrix<f64>) -> Result<Polytope, GeomError> {
        if m.ncols() != self.dim {
            return Err(GeomError::DimensionMismatch {
                expected: self.dim,
                got: m.ncols(),
            });
        }
        let verts = self.vertices()?;
        if verts.is_empty() {
            return Err(GeomError::EmptySet);
        }
        let mapped: Vec<DVector<f64>> = verts.iter().map(|v| m * v).collect();
        Polytope::from_vertices(&mapped)
    }

    /// Translate by `v`.
    pub fn translate(&self, v: &DVector<f64>) -> Result<Polytope, GeomError> {
        if v.len() != self.dim {
            return Err(GeomError::DimensionMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        let p = Polytope {
            dim: self.dim,
            hrep: OnceLock::new(),
            vrep: OnceLock::new(),
        };
        if let Some(verts) = self.vrep.get() {
            let _ = p.vrep.set(verts.iter().map(|w| w + v).collect());
        }
        if let Some(h) = self.hrep.get() {
            let _ = p.hrep.set(HRep {
                f: h.f.clone(),
                g: &h.g + &h.f * v,
            });
        }
        if p.hrep.get().is_none() && p.vrep.get().is_none() {
            return Err(GeomError::EmptySet);
        }
        Ok(p)
    }

    /// Intersection via concatenated H-rep rows, pruned to the minimal
    /// facet description.
    pub fn intersect(&self, other: &Polytope) -> Result<Polytope, GeomError> {
        if other.dim != self.dim {
            return Err(GeomError::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        let (ha, hb) = (self.hrep()?, other.hrep()?);
        let rows = ha.f.nrows() + hb.f.nrows();
        let mut f = DMatrix::zeros(rows, self.dim);
        let mut g = DVector::zeros(rows);
        f.view_mut((0, 0), (ha.f.nrows(), self.dim))
            .copy_from(&ha.f);
        g.rows_mut(0, ha.g.len()).copy_from(&ha.g);
        f.view_mut((ha.f.nrows(), 0), (hb.f.nrows(), self.dim))
            .copy_from(&hb.f);
        g.rows_mut(ha.g.len(), hb.g.len()).copy_from(&hb.g);
        let raw = Polytope::from_hrep(f, g)?;
        raw.normalized()
    }

    /// Rebuild the minimal representation (prune redundant rows/vertices).
    /// Empty sets are passed through unchanged.
    pub fn normalized(&self) -> Result<Polytope, GeomError> {
        let verts = self.vertices()?;
        if verts.is_empty() {
            return Ok(self.clone());
        }
        Polytope::from_vertices(verts)
    }

    /// Componentwise membership `F x <= g + tol`.
    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> Result<bool, GeomError> {
        if x.len() != self.dim {
            return Err(GeomError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        let h = self.hrep()?;
        let lhs = &h.f * x;
        Ok((0..h.g.len()).all(|i| lhs[i] <= h.g[i] + tol))
    }

    /// Componentwise bounding box from the vertex set.
    pub fn bounding_box(&self) -> Result<(DVector<f64>, DVector<f64>), GeomError> {
        let verts = self.vertices()?;
        if verts.is_empty() {
            return Err(GeomError::EmptySet);
        }
        let mut lo = verts[0].clone();
        let mut hi = verts[0].clone();
        for v in verts {
            for i in 0..self.dim {
                lo[i] = lo[i].min(v[i]);
                hi[i] = hi[i].max(v[i]);
            }
        }
        Ok((lo, hi))
    }

    /// Centroid of the extreme points; an interior point for full-dimensional
    /// sets.
    pub fn vertex_centroid(&self) -> Result<DVector<f64>, GeomError> {
        let verts = self.vertices()?;
        if verts.is_empty() {
            return Err(GeomError::EmptySet);
        }
        let mut c = DVector::zeros(self.dim);
        for v in verts {
            c += v;
        }
        Ok(c / verts.len() as f64)
    }

    /// Cross-check that both representations describe the same set: every
    /// vertex satisfies the H-rep, and the vertex centroid (a surrogate for
    /// the H-rep analytic center) lies in the facet hull of the vertices.
    pub fn check_consistent(&self, tol: f64) -> Result<bool, GeomError> {
        let verts = self.vertices()?.to_vec();
        let h = self.hrep()?;
        for v in &verts {
            let lhs = &h.f * v;
            if (0..h.g.len()).any(|i| lhs[i] > h.g[i] + tol) {
                return Ok(false);
            }
        }
        let facet = hull::facet_hrep(&verts)?;
        let c = self.vertex_centroid()?;
        let lhs = &facet.f * &c;
        Ok((0..facet.g.len()).all(|i| lhs[i] <= facet.g[i] + tol))
    }
}

/// Tabulated support-function values `values[i] = sup_{x in P} <directions[i], x>`.
#[derive(Debug, Clone)]
pub struct SupportFunctionTable {
    pub directions: Vec<DVector<f64>>,
    pub values: Vec<f64>,
}

impl SupportFunctionTable {
    pub fn compute(p: &Polytope, directions: &[DVector<f64>]) -> Result<Self, GeomError> {
        let values = directions
            .iter()
            .map(|a| p.support(a))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SupportFunctionTable {
            directions: directions.to_vec(),
            values,
        })
    }
}

/// Vertex enumeration for a bounded `{F x <= g}` with `d <= 3`.
///
/// Basic feasible solutions are taken from all `d`-row subsets with
/// well-conditioned normals. Returns an empty list when the H-rep is
/// infeasible and `UnboundedDirection` when the row normals fail to
/// positively span `R^d` (the set is then non-compact).
fn vertices_from_hrep(h: &HRep) -> Result<Vec<DVector<f64>>, GeomError> {
    let d = h.f.ncols();
    if d == 0 || d > 3 {
        return Err(GeomError::UnsupportedDimension(d));
    }
    let q = h.f.nrows();
    // normalize rows; a zero row is either vacuous or makes the set empty
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::with_capacity(q);
    for i in 0..q {
        let n = h.f.row(i).transpose();
        let nn = n.norm();
        if nn <= COINCIDENCE_TOL {
            if h.g[i] < -COINCIDENCE_TOL {
                return Ok(vec![]); // 0 <= negative: empty
            }
            continue;
        }
        rows.push((n / nn, h.g[i] / nn));
    }
    if !positively_spans(&rows, d)? {
        return Err(GeomError::UnboundedDirection);
    }
    let scale = 1.0 + rows.iter().map(|(_, c)| c.abs()).fold(0.0, f64::max);
    let feas_tol = 1e-9 * scale;
    let m = rows.len();
    let mut candidates: Vec<DVector<f64>> = Vec::new();
    let mut subset = vec![0usize; d];
    enumerate_subsets(m, d, &mut subset, 0, 0, &mut |sel: &[usize]| {
        let mut a = DMatrix::zeros(d, d);
        let mut b = DVector::zeros(d);
        for (r, &i) in sel.iter().enumerate() {
            a.row_mut(r).copy_from(&rows[i].0.transpose());
            b[r] = rows[i].1;
        }
        let lu = a.clone().full_piv_lu();
        if let Some(x) = lu.solve(&b) {
            if lu.determinant().abs() > 1e-9 && x.iter().all(|v| v.is_finite()) {
                let ok = rows.iter().all(|(n, c)| n.dot(&x) <= c + feas_tol);
                if ok {
                    candidates.push(x);
                }
            }
        }
    });
    if candidates.is_empty() {
        return Ok(vec![]);
    }
    hull::convex_hull(&candidates)
}

fn enumerate_subsets(
    m: usize,
    d: usize,
    buf: &mut Vec<usize>,
    depth: usize,
    start: usize,
    f: &mut impl FnMut(&[usize]),
) {
    if depth == d {
        f(buf);
        return;
    }
    for i in start..m {
        buf[depth] = i;
        enumerate_subsets(m, d, buf, depth + 1, i + 1, f);
    }
}

/// True iff the unit normals positively span `R^d`, i.e. the recession cone
/// of `{F x <= g}` is `{0}` and the set is bounded.
fn positively_spans(rows: &[(DVector<f64>, f64)], d: usize) -> Result<bool, GeomError> {
    match d {
        1 => {
            let has_pos = rows.iter().any(|(n, _)| n[0] > COINCIDENCE_TOL);
            let has_neg = rows.iter().any(|(n, _)| n[0] < -COINCIDENCE_TOL);
            Ok(has_pos && has_neg)
        }
        2 => {
            if rows.len() < 3 {
                return Ok(false);
            }
            let mut angles: Vec<f64> = rows.iter().map(|(n, _)| n[1].atan2(n[0])).collect();
            angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut max_gap: f64 = 0.0;
            for i in 1..angles.len() {
                max_gap = max_gap.max(angles[i] - angles[i - 1]);
            }
            max_gap =
                max_gap.max(angles[0] + 2.0 * std::f64::consts::PI - angles[angles.len() - 1]);
            Ok(max_gap < std::f64::consts::PI - 1e-9)
        }
        3 => {
            // bounded iff the origin lies strictly inside the hull of the
            // unit normals
            if rows.len() < 4 {
                return Ok(false);
            }
            let pts: Vec<DVector<f64>> = rows.iter().map(|(n, _)| n.clone()).collect();
            let facet = match hull::facet_hrep(&pts) {
                Ok(f) => f,
                Err(_) => return Ok(false),
            };
            // strictly positive offsets in every facet row, and a
            // full-dimensional normal hull (no off-span equality rows with
            // |offset| near zero on both sides)
            for i in 0..facet.g.len() {
                if facet.g[i] <= 1e-9 {
                    return Ok(false);
                }
            }
            Ok(true)
        }
        other => Err(GeomError::UnsupportedDimension(other)),
    }
}

#[derive(Serialize, Deserialize)]
struct PolytopeRepr {
    dim: usize,
    #[serde(rename = "F", skip_serializing_if = "Option::is_none", default)]
    f: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    g: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    vertices: Option<Vec<Vec<f64>>>,
}

impl Serialize for Polytope {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let repr = PolytopeRepr {
            dim: self.dim,
            f: self.hrep.get().map(|h| {
                (0..h.f.nrows())
                    .map(|i| h.f.row(i).iter().copied().collect())
                    .collect()
            }),
            g: self.hrep.get().map(|h| h.g.iter().copied().collect()),
            vertices: self
                .vrep
                .get()
                .map(|vs| vs.iter().map(|v| v.iter().copied().collect()).collect()),
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Polytope {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let repr = PolytopeRepr::deserialize(d)?;
        let p = Polytope {
            dim: repr.dim,
            hrep: OnceLock::new(),
            vrep: OnceLock::new(),
        };
        match (&repr.f, &repr.g) {
            (Some(f), Some(g)) => {
                let rows = f.len();
                let mut fm = DMatrix::zeros(rows, repr.dim);
                for (i, row) in f.iter().enumerate() {
                    if row.len() != repr.dim {
                        return Err(D::Error::custom("F row length != dim"));
                    }
                    for (j, &x) in row.iter().enumerate() {
                        fm[(i, j)] = x;
                    }
                }
                let _ = p.hrep.set(HRep {
                    f: fm,
                    g: DVector::from_vec(g.clone()),
                });
            }
            (None, None) => {}
            _ => return Err(D::Error::custom("F and g must be given together")),
        }
        if let Some(vs) = &repr.vertices {
            let verts: Vec<DVector<f64>> =
                vs.iter().map(|v| DVector::from_vec(v.clone())).collect();
            if verts.iter().any(|v| v.len() != repr.dim) {
                return Err(D::Error::custom("vertex length != dim"));
            }
            let _ = p.vrep.set(verts);
        }
        if p.hrep.get().is_none() && p.vrep.get().is_none() {
            return Err(D::Error::custom("polytope needs F/g or vertices"));
        }
        Ok(p)
    }
}
