//! Joint stationary point of the region coefficients and random effects.
//!
//! For the identity link this is Henderson's mixed-model equations with a
//! block-diagonal (by region) fixed-effect design:
//!
//! ```text
//! [ X'X   X'Z          ] [beta]   [X'y]
//! [ Z'X   Z'Z + lambda I ] [ b  ] = [Z'y],     lambda = sigma_eps2 / sigma_b2
//! ```
//!
//! whose solution is simultaneously the per-region least-squares fit to
//! `y - Z b` and the BLUP of `b` given `beta`. Other links use penalized
//! Fisher scoring on the quasi-likelihood.

use nalgebra::{DMatrix, DVector};

use super::{fixed_part, LinkFamily, QuasiState, VarianceComponents};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::tree::RegionAssignment;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointOptions {
    pub max_iter: usize,
    /// Convergence threshold on the largest relative parameter change.
    pub tol: f64,
}

impl Default for JointOptions {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-12 }
    }
}

/// `[X_m' diag(w) X_m]` blocks, `X_m' diag(w) Z` coupling and
/// `Z' diag(w) Z + diag_b I`; the `b` block is dropped when `diag_b` is `None`.
fn assemble(d: &Dataset, r: &RegionAssignment, n_regions: usize, w: &DVector<f64>, diag_b: Option<f64>) -> DMatrix<f64> {
    let (p, q) = (d.p(), d.q());
    let dim = p * n_regions + if diag_b.is_some() { q } else { 0 };
    let mut c = DMatrix::zeros(dim, dim);
    let off = p * n_regions;
    for i in 0..d.n() {
        let base = r.region[i] * p;
        let x = d.x().row(i);
        let wi = w[i];
        for a in 0..p {
            let xa = wi * x[a];
            for b in 0..p {
                c[(base + a, base + b)] += xa * x[b];
            }
            if diag_b.is_some() {
                for g in 0..q {
                    let zg = d.z()[(i, g)];
                    if zg != 0.0 {
                        c[(base + a, off + g)] += xa * zg;
                        c[(off + g, base + a)] += xa * zg;
                    }
                }
            }
        }
        if diag_b.is_some() {
            for g in 0..q {
                let zg = wi * d.z()[(i, g)];
                if zg != 0.0 {
                    for h in 0..q {
                        c[(off + g, off + h)] += zg * d.z()[(i, h)];
                    }
                }
            }
        }
    }
    if let Some(lambda) = diag_b {
        for g in 0..q {
            c[(off + g, off + g)] += lambda;
        }
    }
    c
}

/// `[X_m' v_m ; Z' v]`.
fn project(d: &Dataset, r: &RegionAssignment, n_regions: usize, v: &DVector<f64>, with_b: bool) -> DVector<f64> {
    let (p, q) = (d.p(), d.q());
    let mut out = DVector::zeros(p * n_regions + if with_b { q } else { 0 });
    for i in 0..d.n() {
        let base = r.region[i] * p;
        for a in 0..p {
            out[base + a] += d.x()[(i, a)] * v[i];
        }
        if with_b {
            for g in 0..q {
                out[p * n_regions + g] += d.z()[(i, g)] * v[i];
            }
        }
    }
    out
}

fn unpack(theta: &DVector<f64>, p: usize, n_regions: usize, q: usize, with_b: bool) -> (DMatrix<f64>, DVector<f64>) {
    let beta = DMatrix::from_fn(p, n_regions, |j, m| theta[m * p + j]);
    let b = if with_b { DVector::from_fn(q, |g, _| theta[p * n_regions + g]) } else { DVector::zeros(q) };
    (beta, b)
}

fn max_rel_change(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs() / (1.0 + y.abs())).fold(0.0, f64::max)
}

/// Jointly stationary `(beta_star, b)` for fixed variance components.
///
/// `start` seeds the iteration for non-identity links (ignored for the
/// identity link, which is solved directly).
pub fn joint_mode(
    d: &Dataset,
    r: &RegionAssignment,
    vc: VarianceComponents,
    family: &LinkFamily,
    start: Option<(&DMatrix<f64>, &DVector<f64>)>,
    opts: JointOptions,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n_regions = r.n_regions();
    let (p, q) = (d.p(), d.q());
    if let Some(m) = r.counts.iter().position(|&c| c < p) {
        return Err(Error::IllPosedRegion { region: m + 1, count: r.counts[m], needed: p });
    }
    if !(vc.sigma_eps2 > 0.0) || !(vc.sigma_b2 >= 0.0) {
        return Err(Error::InvalidArgument("variance components out of range".into()));
    }
    let with_b = vc.sigma_b2 > 0.0;

    if family.is_identity() {
        let w = DVector::from_element(d.n(), 1.0);
        let c = assemble(d, r, n_regions, &w, with_b.then(|| vc.sigma_eps2 / vc.sigma_b2));
        let rhs = project(d, r, n_regions, d.y(), with_b);
        let theta = linalg::solve_spd(&c, &rhs, "mixed-model equations")?;
        return Ok(unpack(&theta, p, n_regions, q, with_b));
    }

    let (mut beta, mut b) = match start {
        Some((beta, b)) => (beta.clone(), b.clone()),
        None => (DMatrix::zeros(p, n_regions), DVector::zeros(q)),
    };
    if !with_b {
        b.fill(0.0);
    }
    let objective = |beta: &DMatrix<f64>, b: &DVector<f64>| -> Result<f64> {
        QuasiState::evaluate(beta, b, if with_b { vc.sigma_b2 } else { 1.0 }, family, d, r).map(|s| s.quasi_loglik)
    };
    let mut current = objective(&beta, &b)?;
    for _ in 0..opts.max_iter {
        let s = QuasiState::evaluate(&beta, &b, if with_b { vc.sigma_b2 } else { 1.0 }, family, d, r)?;
        let score = DVector::from_fn(d.n(), |i, _| family.score_factor(d.y()[i], s.mu[i], i));
        let c = assemble(d, r, n_regions, &s.weight, with_b.then(|| 1.0 / vc.sigma_b2));
        let mut rhs = project(d, r, n_regions, &score, with_b);
        if with_b {
            for g in 0..q {
                rhs[p * n_regions + g] -= b[g] / vc.sigma_b2;
            }
        }
        let step = linalg::solve_spd(&c, &rhs, "penalized scoring")?;
        let old = pack(&beta, &b, with_b);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &old + &step * t;
            let (nb, nr) = unpack(&cand, p, n_regions, q, with_b);
            if let Ok(val) = objective(&nb, &nr) {
                if val.is_finite() && val >= current - 1e-12 * current.abs() {
                    beta = nb;
                    b = nr;
                    current = val;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        if max_rel_change(&pack(&beta, &b, with_b), &old) < opts.tol {
            break;
        }
    }
    if beta.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Singular("penalized scoring produced non-finite coefficients".into()));
    }
    Ok((beta, b))
}

fn pack(beta: &DMatrix<f64>, b: &DVector<f64>, with_b: bool) -> DVector<f64> {
    let (p, m) = beta.shape();
    let mut out = DVector::zeros(p * m + if with_b { b.len() } else { 0 });
    for k in 0..m {
        for j in 0..p {
            out[k * p + j] = beta[(j, k)];
        }
    }
    if with_b {
        for g in 0..b.len() {
            out[p * m + g] = b[g];
        }
    }
    out
}

/// Per-region least squares of `y - offset` on `X` (ridge-damped if singular).
pub fn region_least_squares(d: &Dataset, r: &RegionAssignment, offset: &DVector<f64>) -> Result<DMatrix<f64>> {
    let p = d.p();
    let mut beta = DMatrix::zeros(p, r.n_regions());
    for (m, rows) in r.members().iter().enumerate() {
        if rows.len() < p {
            return Err(Error::IllPosedRegion { region: m + 1, count: rows.len(), needed: p });
        }
        let x = linalg::select_rows(d.x(), rows);
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| d.y()[i] - offset[i]));
        beta.set_column(m, &linalg::least_squares(&x, &y)?);
    }
    Ok(beta)
}

/// Residual vector `y - fixed part` (identity scale).
pub fn fixed_residual(beta_star: &DMatrix<f64>, d: &Dataset, r: &RegionAssignment) -> DVector<f64> {
    d.y() - fixed_part(beta_star, d.x(), &r.region)
}

/// Result of alternating [`joint_mode`] with variance-component updates.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPoint {
    pub beta_star: DMatrix<f64>,
    pub b_hat: DVector<f64>,
    pub vc: VarianceComponents,
    pub iterations: usize,
    pub converged: bool,
}

/// Alternates the joint solve with [`super::update_variance_components`] until
/// coefficients and variance components stop moving (relative change below
/// `tol`) or `max_iter` rounds have run.
pub fn alternate(
    d: &Dataset,
    r: &RegionAssignment,
    family: &LinkFamily,
    vc0: VarianceComponents,
    start: Option<(&DMatrix<f64>, &DVector<f64>)>,
    max_iter: usize,
    tol: f64,
) -> Result<FixedPoint> {
    let mut vc = vc0;
    let (mut beta, mut b) = match start {
        Some((beta, b)) => (beta.clone(), b.clone()),
        None => (DMatrix::zeros(d.p(), r.n_regions()), DVector::zeros(d.q())),
    };
    let opts = JointOptions::default();
    for it in 1..=max_iter {
        let (nb, nr) = joint_mode(d, r, vc, family, Some((&beta, &b)), opts)?;
        let nvc = super::update_variance_components(d, r, &nb, &nr, vc, family)?;
        let moved = max_rel_change(&pack(&nb, &nr, true), &pack(&beta, &b, true))
            .max((nvc.sigma_b2 - vc.sigma_b2).abs() / (1.0 + vc.sigma_b2))
            .max((nvc.sigma_eps2 - vc.sigma_eps2).abs() / (1.0 + vc.sigma_eps2));
        beta = nb;
        b = nr;
        vc = nvc;
        if moved < tol {
            return Ok(FixedPoint { beta_star: beta, b_hat: b, vc, iterations: it, converged: true });
        }
    }
    // Coefficients must match the final variance components.
    let (nb, nr) = joint_mode(d, r, vc, family, Some((&beta, &b)), opts)?;
    Ok(FixedPoint { beta_star: nb, b_hat: nr, vc, iterations: max_iter, converged: false })
}
