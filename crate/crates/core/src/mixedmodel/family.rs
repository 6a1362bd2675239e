//! Link and variance functions of the built-in quasi-likelihood families.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Fitted means are kept this far inside the boundary of `(0, 1)` or `(0, inf)`.
const MU_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FamilyKind {
    /// Identity link, `v(mu) = 1`.
    Gaussian,
    /// Log link, `v(mu) = mu`.
    Poisson,
    /// Logit link, `v(mu) = mu (1 - mu)`.
    Bernoulli,
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FamilyKind::Gaussian => "gaussian",
            FamilyKind::Poisson => "poisson",
            FamilyKind::Bernoulli => "bernoulli",
        })
    }
}

impl FromStr for FamilyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(FamilyKind::Gaussian),
            "poisson" => Ok(FamilyKind::Poisson),
            "bernoulli" | "binomial" | "logistic" => Ok(FamilyKind::Bernoulli),
            other => Err(Error::InvalidArgument(format!("unknown family '{other}'"))),
        }
    }
}

/// A quasi-likelihood family: link `g`, inverse link `h`, variance function
/// `v`, dispersion `phi` and optional per-observation prior weights `alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkFamily {
    pub kind: FamilyKind,
    pub dispersion: f64,
    /// `None` means every weight is 1.
    pub prior_weights: Option<Vec<f64>>,
}

impl Default for LinkFamily {
    fn default() -> Self {
        Self::gaussian()
    }
}

impl LinkFamily {
    pub fn new(kind: FamilyKind) -> Self {
        Self { kind, dispersion: 1.0, prior_weights: None }
    }

    pub fn gaussian() -> Self {
        Self::new(FamilyKind::Gaussian)
    }

    pub fn poisson() -> Self {
        Self::new(FamilyKind::Poisson)
    }

    pub fn bernoulli() -> Self {
        Self::new(FamilyKind::Bernoulli)
    }

    pub fn with_prior_weights(mut self, w: Vec<f64>) -> Result<Self> {
        if w.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::InvalidArgument("prior weights must be positive and finite".into()));
        }
        self.prior_weights = Some(w);
        Ok(self)
    }

    pub fn is_identity(&self) -> bool {
        self.kind == FamilyKind::Gaussian
    }

    /// Prior weight of observation `i`.
    pub fn alpha(&self, i: usize) -> f64 {
        self.prior_weights.as_ref().map_or(1.0, |w| w[i])
    }

    pub fn check(&self, n: usize) -> Result<()> {
        if !(self.dispersion > 0.0 && self.dispersion.is_finite()) {
            return Err(Error::InvalidArgument("dispersion must be positive".into()));
        }
        if let Some(w) = &self.prior_weights {
            if w.len() != n {
                return Err(Error::InvalidArgument(format!("{} prior weights for {n} observations", w.len())));
            }
        }
        Ok(())
    }

    /// `g(mu)`.
    pub fn link(&self, mu: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => mu,
            FamilyKind::Poisson => mu.ln(),
            FamilyKind::Bernoulli => (mu / (1.0 - mu)).ln(),
        }
    }

    /// `h(eta) = g^{-1}(eta)`, clamped to the open mean range.
    pub fn inverse(&self, eta: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => eta,
            FamilyKind::Poisson => eta.exp().max(MU_EPS),
            FamilyKind::Bernoulli => {
                let mu = if eta >= 0.0 {
                    1.0 / (1.0 + (-eta).exp())
                } else {
                    let e = eta.exp();
                    e / (1.0 + e)
                };
                mu.clamp(MU_EPS, 1.0 - MU_EPS)
            }
        }
    }

    /// `g'(mu)`.
    pub fn link_deriv(&self, mu: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => 1.0,
            FamilyKind::Poisson => 1.0 / mu,
            FamilyKind::Bernoulli => 1.0 / (mu * (1.0 - mu)),
        }
    }

    /// `v(mu)`.
    pub fn variance(&self, mu: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => 1.0,
            FamilyKind::Poisson => mu,
            FamilyKind::Bernoulli => mu * (1.0 - mu),
        }
    }

    /// Whether `y` is a legal response for this family.
    pub fn valid_response(&self, y: f64) -> bool {
        match self.kind {
            FamilyKind::Gaussian => y.is_finite(),
            FamilyKind::Poisson => y >= 0.0 && y.is_finite(),
            FamilyKind::Bernoulli => (0.0..=1.0).contains(&y),
        }
    }

    /// `int_y^mu (y - u) / v(u) du` in closed form (`0 ln 0 = 0`).
    pub fn quasi_integral(&self, y: f64, mu: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => -0.5 * (y - mu) * (y - mu),
            FamilyKind::Poisson => xlogy(y, mu / y) - mu + y,
            FamilyKind::Bernoulli => xlogy(y, mu / y) + xlogy(1.0 - y, (1.0 - mu) / (1.0 - y)),
        }
    }

    /// Diagonal GLM weight `1 / (phi alpha v(mu) g'(mu)^2)`.
    pub fn working_weight(&self, mu: f64, i: usize) -> f64 {
        let gp = self.link_deriv(mu);
        1.0 / (self.dispersion * self.alpha(i) * self.variance(mu) * gp * gp)
    }

    /// Factor multiplying `x_i` in the score: `(y - mu) / (phi alpha v g')`.
    pub fn score_factor(&self, y: f64, mu: f64, i: usize) -> f64 {
        (y - mu) / (self.dispersion * self.alpha(i) * self.variance(mu) * self.link_deriv(mu))
    }
}

/// `a ln(b)` with the convention `0 ln(anything) = 0`.
fn xlogy(a: f64, b: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        a * b.ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn families() -> [LinkFamily; 3] {
        [LinkFamily::gaussian(), LinkFamily::poisson(), LinkFamily::bernoulli()]
    }

    #[test]
    fn inverse_link_round_trips() {
        for f in families() {
            for mu in [0.01, 0.2, 0.5, 0.77, 0.99] {
                let mu = if f.kind == FamilyKind::Poisson { mu * 40.0 } else { mu };
                assert!((f.inverse(f.link(mu)) - mu).abs() < 1e-10, "{} at {mu}", f.kind);
                assert!(f.variance(mu) > 0.0);
            }
        }
    }

    #[test]
    fn link_derivative_matches_finite_difference() {
        for f in families() {
            for mu in [0.1, 0.4, 0.8] {
                let h = 1e-6;
                let fd = (f.link(mu + h) - f.link(mu - h)) / (2.0 * h);
                assert!((fd - f.link_deriv(mu)).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    /// Composite Simpson quadrature of `(y - u) / v(u)` from `y` to `mu`.
    fn simpson(f: &LinkFamily, y: f64, mu: f64) -> f64 {
        let n = 20_000;
        let h = (mu - y) / n as f64;
        let g = |u: f64| (y - u) / f.variance(u);
        let mut s = g(y) + g(mu);
        for k in 1..n {
            s += g(y + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn closed_form_integrals_match_quadrature() {
        let cases = [
            (LinkFamily::gaussian(), 1.3, -0.4),
            (LinkFamily::poisson(), 3.0, 1.7),
            (LinkFamily::poisson(), 2.0, 6.5),
            (LinkFamily::bernoulli(), 0.3, 0.8),
        ];
        for (f, y, mu) in cases {
            let q = simpson(&f, y, mu);
            assert!((q - f.quasi_integral(y, mu)).abs() < 1e-9, "{} y={y} mu={mu}", f.kind);
        }
    }

    #[test]
    fn boundary_responses_use_zero_log_zero() {
        let p = LinkFamily::poisson();
        assert_eq!(p.quasi_integral(0.0, 2.5), -2.5);
        let b = LinkFamily::bernoulli();
        assert!((b.quasi_integral(1.0, 0.8) - 0.8f64.ln()).abs() < 1e-15);
        assert!((b.quasi_integral(0.0, 0.8) - 0.2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn family_names_parse() {
        for f in families() {
            assert_eq!(f.kind.to_string().parse::<FamilyKind>().unwrap(), f.kind);
        }
        assert!("gamma".parse::<FamilyKind>().is_err());
    }
}
