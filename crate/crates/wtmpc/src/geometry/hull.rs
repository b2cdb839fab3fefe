//! Convex hulls and facet enumeration for dimensions 1..=3.
//!
//! All routines are deterministic: inputs are sorted lexicographically and
//! ties are broken lexicographically, so repeated runs produce identical
//! vertex orderings.

use nalgebra::{DMatrix, DVector};

use super::{GeomError, HRep, COINCIDENCE_TOL};

/// Sort points lexicographically and drop near-duplicates (inf-norm tol).
pub(crate) fn dedup_lex(points: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let mut pts: Vec<DVector<f64>> = points.to_vec();
    pts.sort_by(lex_cmp);
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(pts.len());
    for p in pts {
        let dup = out
            .last()
            .map(|q| (&p - q).amax() <= COINCIDENCE_TOL)
            .unwrap_or(false);
        if !dup {
            out.push(p);
        }
    }
    out
}

fn lex_cmp(a: &DVector<f64>, b: &DVector<f64>) -> std::cmp::Ordering {
    for i in 0..a.len() {
        match a[i].partial_cmp(&b[i]) {
            Some(std::cmp::Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    std::cmp::Ordering::Equal
}

/// Orthonormal basis of the affine span of a point set, with its dimension.
///
/// Returns `(centroid, span_basis, null_basis)` where the span basis has one
/// column per affine dimension and the null basis completes it to `R^d`.
fn affine_frame(points: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let d = points[0].len();
    let n = points.len();
    let mut c = DVector::zeros(d);
    for p in points {
        c += p;
    }
    c /= n as f64;
    let mut m = DMatrix::zeros(d, n);
    for (j, p) in points.iter().enumerate() {
        m.set_column(j, &(p - &c));
    }
    let scale = 1.0 + points.iter().map(|p| p.amax()).fold(0.0, f64::max);
    let svd = m.svd(true, false);
    let u = svd.u.expect("svd with u");
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > COINCIDENCE_TOL * scale)
        .count();
    let span = u.columns(0, rank).into_owned();
    // complete the span to an orthonormal basis of R^d (the thin SVD may
    // carry fewer columns than d when there are few points)
    let mut null = DMatrix::zeros(d, d - rank);
    let mut filled = 0;
    for i in 0..d {
        if filled == d - rank {
            break;
        }
        let mut v = DVector::zeros(d);
        v[i] = 1.0;
        v -= &span * (span.transpose() * &v);
        for j in 0..filled {
            let col = null.column(j).into_owned();
            let proj = col.dot(&v);
            v -= col * proj;
        }
        let nv = v.norm();
        if nv > 1e-7 {
            null.set_column(filled, &(v / nv));
            filled += 1;
        }
    }
    debug_assert_eq!(filled, d - rank);
    (c, span, null)
}

/// Extreme points of a finite point set, in deterministic order.
///
/// Degenerate (lower-dimensional) inputs are handled by projecting onto the
/// affine span and recursing; the returned points are always members of the
/// input set.
pub(crate) fn convex_hull(points: &[DVector<f64>]) -> Result<Vec<DVector<f64>>, GeomError> {
    let pts = dedup_lex(points);
    if pts.is_empty() {
        return Ok(vec![]);
    }
    let d = pts[0].len();
    if pts.len() == 1 || d == 0 {
        return Ok(vec![pts[0].clone()]);
    }
    let (c, span, _) = affine_frame(&pts);
    let r = span.ncols();
    if r == 0 {
        return Ok(vec![pts[0].clone()]);
    }
    // Coordinates in the affine span; hull index set is intrinsic to the span.
    let proj: Vec<DVector<f64>> = pts.iter().map(|p| span.transpose() * (p - &c)).collect();
    let idx = match r {
        1 => hull_indices_1d(&proj),
        2 => hull_indices_2d(&proj),
        3 => hull_indices_3d(&proj)?.0,
        _ => return Err(GeomError::UnsupportedDimension(d)),
    };
    let mut out: Vec<DVector<f64>> = idx.into_iter().map(|i| pts[i].clone()).collect();
    out.sort_by(lex_cmp);
    Ok(out)
}

/// Facet H-representation of the convex hull of a point set.
///
/// Lower-dimensional hulls get a pair of opposing rows per missing dimension,
/// so the H-rep always describes the set exactly.
pub(crate) fn facet_hrep(points: &[DVector<f64>]) -> Result<HRep, GeomError> {
    let pts = dedup_lex(points);
    if pts.is_empty() {
        return Err(GeomError::EmptySet);
    }
    let d = pts[0].len();
    if d > 3 {
        return Err(GeomError::UnsupportedDimension(d));
    }
    let (c, span, null) = affine_frame(&pts);
    let r = span.ncols();
    let proj: Vec<DVector<f64>> = pts.iter().map(|p| span.transpose() * (p - &c)).collect();
    // Facet rows inside the span, expressed as (normal in R^r, offset).
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    match r {
        0 => {}
        1 => {
            let lo = proj.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
            let hi = proj.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
            rows.push((DVector::from_vec(vec![1.0]), hi));
            rows.push((DVector::from_vec(vec![-1.0]), -lo));
        }
        2 => {
            let idx = hull_indices_2d(&proj);
            let hull: Vec<&DVector<f64>> = idx.iter().map(|&i| &proj[i]).collect();
            for k in 0..hull.len() {
                let p = hull[k];
                let q = hull[(k + 1) % hull.len()];
                // CCW polygon: outward normal is the edge direction rotated -90deg.
                let e = q - p;
                let mut n = DVector::from_vec(vec![e[1], -e[0]]);
                let nn = n.norm();
                if nn <= COINCIDENCE_TOL {
                    continue;
                }
                n /= nn;
                rows.push((n.clone(), n.dot(p)));
            }
        }
        3 => {
            let (_, planes) = hull_indices_3d(&proj)?;
            rows = planes;
        }
        _ => unreachable!(),
    }
    // Lift rows back to R^d and append the off-span equality rows.
    let total = rows.len() + 2 * null.ncols();
    let mut f = DMatrix::zeros(total, d);
    let mut g = DVector::zeros(total);
    for (i, (n, off)) in rows.iter().enumerate() {
        let lifted = &span * n;
        f.row_mut(i).copy_from(&lifted.transpose());
        g[i] = off + lifted.dot(&c);
    }
    for j in 0..null.ncols() {
        let n = null.column(j).into_owned();
        let base = rows.len() + 2 * j;
        f.row_mut(base).copy_from(&n.transpose());
        g[base] = n.dot(&c);
        f.row_mut(base + 1).copy_from(&(-&n).transpose());
        g[base + 1] = -n.dot(&c);
    }
    Ok(HRep { f, g })
}

fn hull_indices_1d(proj: &[DVector<f64>]) -> Vec<usize> {
    let mut lo = 0;
    let mut hi = 0;
    for (i, p) in proj.iter().enumerate() {
        if p[0] < proj[lo][0] {
            lo = i;
        }
        if p[0] > proj[hi][0] {
            hi = i;
        }
    }
    if lo == hi {
        vec![lo]
    } else {
        vec![lo, hi]
    }
}

/// Andrew's monotone chain on 2D points; returns indices in CCW order.
/// Collinear intermediate points are dropped, so the result is the extreme
/// point set.
fn hull_indices_2d(proj: &[DVector<f64>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..proj.len()).collect();
    order.sort_by(|&i, &j| lex_cmp(&proj[i], &proj[j]));
    let cross = |o: usize, a: usize, b: usize| -> f64 {
        let (po, pa, pb) = (&proj[o], &proj[a], &proj[b]);
        (pa[0] - po[0]) * (pb[1] - po[1]) - (pa[1] - po[1]) * (pb[0] - po[0])
    };
    let mut lower: Vec<usize> = Vec::new();
    for &i in &order {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], i) <= 1e-12
        {
            lower.pop();
        }
        lower.push(i);
    }
    let mut upper: Vec<usize> = Vec::new();
    for &i in order.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], i) <= 1e-12
        {
            upper.pop();
        }
        upper.push(i);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    if lower.is_empty() {
        // All points coincide numerically after projection.
        lower.push(order[0]);
    }
    lower
}

/// Hull of full-dimensional 3D points by supporting-plane enumeration.
///
/// Every unordered triple defines a candidate plane; a plane supported by the
/// whole set is a facet plane. A point is extreme iff its active facet
/// normals span R^3. Quadratic-to-quartic in the point count, which is fine
/// at the set sizes this crate works with, and free of the degeneracy traps
/// incremental hulls have on coplanar inputs such as box sums.
#[allow(clippy::type_complexity)]
fn hull_indices_3d(
    proj: &[DVector<f64>],
) -> Result<(Vec<usize>, Vec<(DVector<f64>, f64)>), GeomError> {
    let n = proj.len();
    let scale = 1.0 + proj.iter().map(|p| p.amax()).fold(0.0, f64::max);
    let tol = COINCIDENCE_TOL * scale;
    let mut planes: Vec<(DVector<f64>, f64)> = Vec::new();
    let mut push_plane = |n_hat: DVector<f64>, c: f64| {
        let dup = planes
            .iter()
            .any(|(m, cm)| (&n_hat - m).amax() <= 1e-7 && (c - cm).abs() <= 1e-7 * scale);
        if !dup {
            planes.push((n_hat, c));
        }
    };
    for i in 0..n {
        for j in (i + 1)..n {
            for k in (j + 1)..n {
                let e1 = &proj[j] - &proj[i];
                let e2 = &proj[k] - &proj[i];
                let mut nv = DVector::from_vec(vec![
                    e1[1] * e2[2] - e1[2] * e2[1],
                    e1[2] * e2[0] - e1[0] * e2[2],
                    e1[0] * e2[1] - e1[1] * e2[0],
                ]);
                let nn = nv.norm();
                if nn <= tol * tol {
                    continue; // collinear triple
                }
                nv /= nn;
                let c0 = nv.dot(&proj[i]);
                let mut smax = f64::NEG_INFINITY;
                let mut smin = f64::INFINITY;
                for p in proj {
                    let s = nv.dot(p);
                    smax = smax.max(s);
                    smin = smin.min(s);
                }
                if smax <= c0 + tol {
                    push_plane(nv.clone(), smax);
                }
                if smin >= c0 - tol {
                    push_plane(-nv, -smin);
                }
            }
        }
    }
    if planes.is_empty() {
        return Err(GeomError::DegenerateInput);
    }
    // Extreme points: active facet normals must span R^3.
    let mut idx = Vec::new();
    for (i, p) in proj.iter().enumerate() {
        let active: Vec<&DVector<f64>> = planes
            .iter()
            .filter(|(nrm, c)| (nrm.dot(p) - c).abs() <= 1e-7 * scale)
            .map(|(nrm, _)| nrm)
            .collect();
        if active.len() < 3 {
            continue;
        }
        let mut m = DMatrix::zeros(active.len(), 3);
        for (r, nrm) in active.iter().enumerate() {
            m.row_mut(r).copy_from(&nrm.transpose());
        }
        let sv = m.svd(false, false).singular_values;
        if sv.len() >= 3 && sv[2] > 1e-7 {
            idx.push(i);
        }
    }
    Ok((idx, planes))
}
