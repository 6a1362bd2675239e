//! The GTIMM likelihood machinery: linear predictor, Laplace-approximated
//! quasi-likelihood and its gradient in the region coefficients, closed-form
//! BLUP of the random effects, and variance-component updates.
//!
//! Coefficients are stored as a `p x M` matrix `beta_star` whose column `m`
//! is region `m`'s fixed effect. The quasi-likelihood is
//!
//! ```text
//! ql = (1/phi) sum_i int_{y_i}^{mu_i} (y_i - u) / (alpha_i v(u)) du  -  b'b / (2 sigma_b2)
//! ```
//!
//! with `mu_i = h(x_i' beta^(m_i) + z_i' b)`.

pub mod family;
pub mod mme;

use nalgebra::{DMatrix, DVector};

pub use family::{FamilyKind, LinkFamily};
pub use mme::{alternate, joint_mode, FixedPoint, JointOptions};

use crate::dataset::{Dataset, DesignInfo, StandardizationParams};
use crate::error::{Error, Result};
use crate::linalg::{self, pairwise_sum};
use crate::tree::{RegionAssignment, RegressionTree};

/// Lower bound applied to the residual variance estimate.
pub const SIGMA_EPS2_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceComponents {
    pub sigma_b2: f64,
    pub sigma_eps2: f64,
}

/// A fitted tree-informed mixed model.
#[derive(Debug, Clone, PartialEq)]
pub struct GtimmModel {
    /// `p x M`; column `m` holds region `m`'s coefficients, intercept first.
    pub beta_star: DMatrix<f64>,
    pub b_hat: DVector<f64>,
    pub sigma_b2: f64,
    pub sigma_eps2: f64,
    pub tree: RegressionTree,
    pub family: LinkFamily,
    pub design: DesignInfo,
    /// Set when the model was fitted on standardized data; prediction then
    /// accepts raw predictors and returns responses on the raw scale.
    pub standardization: Option<StandardizationParams>,
}

impl GtimmModel {
    pub fn p(&self) -> usize {
        self.beta_star.nrows()
    }

    pub fn q(&self) -> usize {
        self.b_hat.len()
    }

    pub fn n_regions(&self) -> usize {
        self.beta_star.ncols()
    }

    pub fn variance(&self) -> VarianceComponents {
        VarianceComponents { sigma_b2: self.sigma_b2, sigma_eps2: self.sigma_eps2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_regions() != self.tree.leaf_count() {
            return Err(Error::Structure(format!(
                "beta_star has {} columns but the tree has {} leaves",
                self.n_regions(),
                self.tree.leaf_count()
            )));
        }
        if self.design.p() != self.p() || self.design.q() != self.q() {
            return Err(Error::Structure("design names do not match coefficient dimensions".into()));
        }
        if self.tree.max_feature() >= self.p() {
            return Err(Error::Structure("tree splits on a column outside the design".into()));
        }
        if self.beta_star.iter().chain(self.b_hat.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite model coefficient".into()));
        }
        if !(self.sigma_b2 >= 0.0) || !(self.sigma_eps2 > 0.0) {
            return Err(Error::Data("variance components out of range".into()));
        }
        if let Some(s) = &self.standardization {
            if s.x.len() + 1 != self.p() {
                return Err(Error::Structure("standardization does not match the design".into()));
            }
        }
        Ok(())
    }

    pub fn check_data(&self, d: &Dataset, r: &RegionAssignment) -> Result<()> {
        check_dims(&self.beta_star, &self.b_hat, d, r)
    }
}

fn check_dims(beta_star: &DMatrix<f64>, b_hat: &DVector<f64>, d: &Dataset, r: &RegionAssignment) -> Result<()> {
    if beta_star.nrows() != d.p() || b_hat.len() != d.q() {
        return Err(Error::InvalidArgument(format!(
            "model is {}x{} with q={} but data have p={}, q={}",
            beta_star.nrows(),
            beta_star.ncols(),
            b_hat.len(),
            d.p(),
            d.q()
        )));
    }
    if r.len() != d.n() || r.n_regions() != beta_star.ncols() {
        return Err(Error::InvalidArgument(format!(
            "region assignment covers {} rows / {} regions; expected {} / {}",
            r.len(),
            r.n_regions(),
            d.n(),
            beta_star.ncols()
        )));
    }
    Ok(())
}

/// `x' beta^(region) + z' b_hat` for one observation.
pub fn linear_predictor(m: &GtimmModel, x: &[f64], region: usize, z: &[f64]) -> Result<f64> {
    if x.len() != m.p() || z.len() != m.q() {
        return Err(Error::InvalidArgument(format!(
            "expected x of length {} and z of length {}, got {} and {}",
            m.p(),
            m.q(),
            x.len(),
            z.len()
        )));
    }
    if region >= m.n_regions() {
        return Err(Error::InvalidArgument(format!("region {region} out of range 0..{}", m.n_regions())));
    }
    let fixed: f64 = x.iter().zip(m.beta_star.column(region).iter()).map(|(a, b)| a * b).sum();
    let random: f64 = z.iter().zip(m.b_hat.iter()).map(|(a, b)| a * b).sum();
    Ok(fixed + random)
}

/// Fixed part `x_i' beta^(m_i)` for every row.
pub fn fixed_part(beta_star: &DMatrix<f64>, x: &DMatrix<f64>, region: &[usize]) -> DVector<f64> {
    DVector::from_fn(x.nrows(), |i, _| x.row(i).dot(&beta_star.column(region[i]).transpose()))
}

/// Per-observation quantities at the current parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QuasiState {
    pub eta: DVector<f64>,
    pub mu: DVector<f64>,
    pub residual: DVector<f64>,
    /// GLM weights `1 / (phi alpha v(mu) g'(mu)^2)`, the diagonal of `W`.
    pub weight: DVector<f64>,
    pub quasi_loglik: f64,
}

impl QuasiState {
    pub fn evaluate(
        beta_star: &DMatrix<f64>,
        b_hat: &DVector<f64>,
        sigma_b2: f64,
        family: &LinkFamily,
        d: &Dataset,
        r: &RegionAssignment,
    ) -> Result<Self> {
        check_dims(beta_star, b_hat, d, r)?;
        family.check(d.n())?;
        let eta = fixed_part(beta_star, d.x(), &r.region) + d.z() * b_hat;
        let mu = eta.map(|e| family.inverse(e));
        let residual = d.y() - &mu;
        let weight = DVector::from_fn(d.n(), |i, _| family.working_weight(mu[i], i));
        let terms: Vec<f64> = (0..d.n())
            .map(|i| family.quasi_integral(d.y()[i], mu[i]) / family.alpha(i))
            .collect();
        let ql = pairwise_sum(&terms) / family.dispersion - penalty(b_hat, sigma_b2)?;
        Ok(Self { eta, mu, residual, weight, quasi_loglik: ql })
    }
}

/// `b'b / (2 sigma_b2)`, defined as 0 when both vanish.
fn penalty(b_hat: &DVector<f64>, sigma_b2: f64) -> Result<f64> {
    let ss = b_hat.norm_squared();
    if sigma_b2 > 0.0 {
        Ok(0.5 * ss / sigma_b2)
    } else if ss == 0.0 {
        Ok(0.0)
    } else {
        Err(Error::PenaltyUndefined)
    }
}

/// Quasi-likelihood of explicit parameters.
pub fn quasi_loglik_at(
    beta_star: &DMatrix<f64>,
    b_hat: &DVector<f64>,
    sigma_b2: f64,
    family: &LinkFamily,
    d: &Dataset,
    r: &RegionAssignment,
) -> Result<f64> {
    Ok(QuasiState::evaluate(beta_star, b_hat, sigma_b2, family, d, r)?.quasi_loglik)
}

/// Laplace-approximated quasi-likelihood of a fitted model on `d`.
pub fn quasi_loglik(m: &GtimmModel, d: &Dataset, r: &RegionAssignment) -> Result<f64> {
    quasi_loglik_at(&m.beta_star, &m.b_hat, m.sigma_b2, &m.family, d, r)
}

/// Score of the quasi-likelihood in `beta^(region)` over the rows of `batch`
/// that lie in `region` (other rows are ignored).
pub fn gradient_at(
    beta_star: &DMatrix<f64>,
    b_hat: &DVector<f64>,
    family: &LinkFamily,
    d: &Dataset,
    r: &RegionAssignment,
    region: usize,
    batch: &[usize],
) -> Result<DVector<f64>> {
    check_dims(beta_star, b_hat, d, r)?;
    if region >= beta_star.ncols() {
        return Err(Error::InvalidArgument(format!("region {region} out of range")));
    }
    let beta = beta_star.column(region);
    let mut g = DVector::zeros(d.p());
    for &i in batch.iter().filter(|&&i| r.region[i] == region) {
        let x = d.x().row(i);
        let eta = x.dot(&beta.transpose()) + d.z().row(i).dot(&b_hat.transpose());
        let mu = family.inverse(eta);
        g.axpy(family.score_factor(d.y()[i], mu, i), &x.transpose(), 1.0);
    }
    Ok(g)
}

pub fn ql_gradient_beta(
    m: &GtimmModel,
    d: &Dataset,
    r: &RegionAssignment,
    region: usize,
    batch: &[usize],
) -> Result<DVector<f64>> {
    gradient_at(&m.beta_star, &m.b_hat, &m.family, d, r, region, batch)
}

/// Solves `(Z' W Z + I / sigma_b2) b = Z' W e` with `W = diag(w)`, the q x q
/// form of `Sigma_b Z' (Sigma_eps + Z Sigma_b Z')^{-1} e`. Returns zero when
/// `sigma_b2 = 0`.
pub fn blup_weighted(z: &DMatrix<f64>, e: &DVector<f64>, w: &DVector<f64>, sigma_b2: f64) -> Result<DVector<f64>> {
    if z.nrows() != e.len() || w.len() != e.len() {
        return Err(Error::InvalidArgument("BLUP dimension mismatch".into()));
    }
    if !(sigma_b2 >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_b2 must be >= 0, got {sigma_b2}")));
    }
    if sigma_b2 == 0.0 {
        return Ok(DVector::zeros(z.ncols()));
    }
    let wz = DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| w[i] * z[(i, j)]);
    let mut lhs = z.tr_mul(&wz);
    for g in 0..lhs.nrows() {
        lhs[(g, g)] += 1.0 / sigma_b2;
    }
    let rhs = wz.tr_mul(e);
    linalg::solve_spd(&lhs, &rhs, "BLUP")
}

/// Homoscedastic BLUP of `b` from the residual `e = y - fixed part`.
pub fn blup_from_residuals(z: &DMatrix<f64>, e: &DVector<f64>, sigma_b2: f64, sigma_eps2: f64) -> Result<DVector<f64>> {
    if !(sigma_eps2 > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_eps2 must be > 0, got {sigma_eps2}")));
    }
    blup_weighted(z, e, &DVector::from_element(e.len(), 1.0 / sigma_eps2), sigma_b2)
}

/// BLUP of the random effects given the region coefficients (identity link).
pub fn blup(
    beta_star: &DMatrix<f64>,
    d: &Dataset,
    r: &RegionAssignment,
    sigma_b2: f64,
    sigma_eps2: f64,
) -> Result<DVector<f64>> {
    check_dims(beta_star, &DVector::zeros(d.q()), d, r)?;
    let e = d.y() - fixed_part(beta_star, d.x(), &r.region);
    blup_from_residuals(d.z(), &e, sigma_b2, sigma_eps2)
}

/// BLUP refresh for any family. The identity link uses [`blup`]; other links
/// take one penalized step on the working residuals `(y - mu) g'(mu)` at the
/// current `b`, weighted by the GLM weights, so repeated refreshes converge to
/// the mode of the penalized quasi-likelihood in `b`.
pub fn blup_family(
    beta_star: &DMatrix<f64>,
    b_current: &DVector<f64>,
    family: &LinkFamily,
    d: &Dataset,
    r: &RegionAssignment,
    vc: VarianceComponents,
) -> Result<DVector<f64>> {
    if family.is_identity() {
        return blup(beta_star, d, r, vc.sigma_b2, vc.sigma_eps2);
    }
    let s = QuasiState::evaluate(beta_star, b_current, vc.sigma_b2.max(f64::MIN_POSITIVE), family, d, r)?;
    let zb = d.z() * b_current;
    let work = DVector::from_fn(d.n(), |i, _| zb[i] + s.residual[i] * family.link_deriv(s.mu[i]));
    blup_weighted(d.z(), &work, &s.weight, vc.sigma_b2)
}

/// `-||e - Z b||^2 / (2 sigma_eps2) - b'b / (2 sigma_b2)`: the joint
/// log-density in `b` (up to constants) that the BLUP maximizes.
pub fn penalized_objective_b(z: &DMatrix<f64>, e: &DVector<f64>, b: &DVector<f64>, sigma_b2: f64, sigma_eps2: f64) -> f64 {
    -0.5 * (e - z * b).norm_squared() / sigma_eps2 - 0.5 * b.norm_squared() / sigma_b2
}

/// Method-of-moments update of `(sigma_b2, sigma_eps2)`.
///
/// `sigma_eps2` is the residual sum of squares over `N - pM`. `sigma_b2` is the
/// mean squared BLUP over groups with data, re-inflated by the average inverse
/// shrinkage factor `(sigma_eps2 + n_g sigma_b2) / (n_g sigma_b2)` evaluated at
/// `prev`. A zero `prev.sigma_b2` stays zero.
pub fn update_variance_components(
    d: &Dataset,
    r: &RegionAssignment,
    beta_star: &DMatrix<f64>,
    b_hat: &DVector<f64>,
    prev: VarianceComponents,
    family: &LinkFamily,
) -> Result<VarianceComponents> {
    let params = d.p() * beta_star.ncols();
    if d.n() <= params {
        return Err(Error::DegreesOfFreedom { n: d.n(), params });
    }
    let s = QuasiState::evaluate(beta_star, b_hat, prev.sigma_b2.max(f64::MIN_POSITIVE), family, d, r)?;
    let sq: Vec<f64> = s.residual.iter().map(|e| e * e).collect();
    let sigma_eps2 = (pairwise_sum(&sq) / (d.n() - params) as f64).max(SIGMA_EPS2_FLOOR);

    if !(prev.sigma_b2 > 0.0) {
        return Ok(VarianceComponents { sigma_b2: 0.0, sigma_eps2 });
    }
    // Precision carried by each random-effect column: n_g / sigma_eps2 for the
    // identity link, sum of GLM weights otherwise.
    let (mut sum_b2, mut sum_inv_shrink, mut groups) = (0.0, 0.0, 0usize);
    for g in 0..d.q() {
        let col = d.z().column(g);
        let info: f64 = (0..d.n())
            .map(|i| {
                let w = if family.is_identity() { 1.0 / prev.sigma_eps2 } else { s.weight[i] };
                w * col[i] * col[i]
            })
            .sum();
        if info == 0.0 {
            continue;
        }
        groups += 1;
        sum_b2 += b_hat[g] * b_hat[g];
        sum_inv_shrink += (1.0 + info * prev.sigma_b2) / (info * prev.sigma_b2);
    }
    if groups == 0 {
        return Ok(VarianceComponents { sigma_b2: 0.0, sigma_eps2 });
    }
    let sigma_b2 = (sum_b2 / groups as f64 * sum_inv_shrink / groups as f64).max(0.0);
    Ok(VarianceComponents { sigma_b2, sigma_eps2 })
}
