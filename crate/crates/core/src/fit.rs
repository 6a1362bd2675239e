//! End-to-end GTIMM training and prediction.
//!
//! Pipeline: choose the leaf count (cross-validation or fixed) → grow the tree
//! on the raw response → merge tiny regions → per-region least-squares start →
//! mini-batch stochastic gradient ascent on the quasi-likelihood, with the
//! random effects refreshed by closed-form BLUP and the variance components by
//! moments after each epoch → optional exact refinement of the stationary
//! point.
//!
//! The random effects are never moved by gradient steps: every refresh solves
//! their subproblem exactly.
//!
//! SGD runs in per-region standardized coordinates: within region `m` the
//! non-intercept columns are centred and scaled by that region's training
//! statistics, and the step for a touched region is `learning_rate` times the
//! mean score over the batch rows in that region. The reparametrization leaves
//! the fitted function unchanged and makes a fixed learning rate usable across
//! predictor scales.
//!
//! A constant learning rate leaves the iterates jittering around the optimum
//! at a scale proportional to the rate. When `refine` is on, training ends by
//! solving the stationarity conditions of the SGD/BLUP/moment alternation
//! directly (see [`crate::mixedmodel::mme`]), starting from the best SGD
//! iterate; that solution is kept when its quasi-likelihood is at least that
//! of the least-squares start, otherwise the best SGD iterate is returned.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use crate::dataset::{Dataset, DesignInfo};
use crate::error::{Error, Result};
use crate::mixedmodel::mme::{alternate, region_least_squares};
use crate::mixedmodel::{
    blup_family, quasi_loglik_at, update_variance_components, FamilyKind, GtimmModel, LinkFamily, VarianceComponents,
    SIGMA_EPS2_FLOOR,
};
use crate::rng;
use crate::tree::{assign_regions, cross_validate_leaves, grow_tree, CvSelection, RegionAssignment, RegressionTree, TreeParams};

const SGD_SALT: u64 = 0x5347_445f_4550_4f43;

/// Consecutive low-improvement epochs before stopping.
pub const PATIENCE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafSpec {
    /// Cross-validate over `FitConfig::cv_candidates`.
    Cv,
    Fixed(usize),
}

impl fmt::Display for LeafSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LeafSpec::Cv => f.write_str("cv"),
            LeafSpec::Fixed(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for LeafSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("cv") {
            return Ok(LeafSpec::Cv);
        }
        match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(LeafSpec::Fixed(n)),
            _ => Err(Error::InvalidArgument(format!("max_leaves must be 'cv' or a positive integer, got '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Relative change of the full-data quasi-likelihood counted as no progress.
    pub rel_tol: f64,
    pub blup_refresh_every: usize,
    pub max_leaves: LeafSpec,
    pub cv_folds: usize,
    pub cv_candidates: Vec<usize>,
    pub seed: u64,
    /// Regions smaller than this fraction of `N` are merged into their sibling.
    pub min_region_fraction: f64,
    pub min_leaf: usize,
    pub family: FamilyKind,
    /// Solve for the exact stationary point after SGD.
    pub refine: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 32,
            max_epochs: 500,
            rel_tol: 1e-6,
            blup_refresh_every: 1,
            max_leaves: LeafSpec::Cv,
            cv_folds: 5,
            cv_candidates: (1..=8).collect(),
            seed: 0,
            min_region_fraction: 0.05,
            min_leaf: crate::tree::DEFAULT_MIN_LEAF,
            family: FamilyKind::Gaussian,
            refine: true,
        }
    }
}

impl FitConfig {
    pub fn with_leaves(mut self, leaves: usize) -> Self {
        self.max_leaves = LeafSpec::Fixed(leaves);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.rel_tol >= 0.0) {
            return bad("rel_tol must be >= 0");
        }
        if self.blup_refresh_every == 0 {
            return bad("blup_refresh_every must be positive");
        }
        if let LeafSpec::Fixed(0) = self.max_leaves {
            return bad("max_leaves must be positive");
        }
        if self.max_leaves == LeafSpec::Cv {
            if self.cv_folds < 2 {
                return bad("cv_folds must be at least 2");
            }
            if self.cv_candidates.is_empty() || self.cv_candidates.contains(&0) {
                return bad("cv candidates must be positive");
            }
        }
        if !(self.min_region_fraction > 0.0 && self.min_region_fraction <= 0.5) {
            return bad("min_region_fraction must lie in (0, 0.5]");
        }
        if self.min_leaf == 0 {
            return bad("min_leaf must be positive");
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub quasi_loglik: f64,
    pub sigma_b2: f64,
    pub sigma_eps2: f64,
}

/// Everything training produced besides the model.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub model: GtimmModel,
    pub log: Vec<EpochRecord>,
    pub cv: Option<CvSelection>,
    /// Training-row regions of the returned tree.
    pub assignment: RegionAssignment,
    /// Leaves removed by the small-region merge.
    pub merged: usize,
    pub initial_quasi_loglik: f64,
    pub final_quasi_loglik: f64,
    /// Whether the refined stationary point was returned.
    pub refined: bool,
}

// ---------------------------------------------------------------------------
// Region merging
// ---------------------------------------------------------------------------

/// Collapses the smallest region below `needed` observations into its sibling
/// until none remain (or a single region is left), then refreshes leaf stats.
pub fn merge_small_regions(
    tree: RegressionTree,
    d: &Dataset,
    needed: usize,
) -> Result<(RegressionTree, RegionAssignment, usize)> {
    let mut tree = tree;
    let mut merged = 0;
    loop {
        let a = assign_regions(&tree, d.x())?;
        let small = (0..a.n_regions()).filter(|&m| a.counts[m] < needed).min_by_key(|&m| (a.counts[m], m));
        match small {
            Some(m) if tree.leaf_count() > 1 => {
                tree = tree.collapse_leaf(m)?;
                merged += 1;
            }
            _ => {
                tree.refresh_leaves(d.x(), d.y())?;
                if let Some(m) = a.counts.iter().position(|&c| c < d.p()) {
                    return Err(Error::IllPosedRegion { region: m + 1, count: a.counts[m], needed: d.p() });
                }
                return Ok((tree, a, merged));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// SGD
// ---------------------------------------------------------------------------

/// Per-region centring and scaling of the non-intercept columns.
#[derive(Debug, Clone, PartialEq)]
struct RegionCoords {
    center: Vec<f64>,
    scale: Vec<f64>,
}

impl RegionCoords {
    fn fit(d: &Dataset, rows: &[usize]) -> Self {
        let p = d.p();
        let mut center = vec![0.0; p];
        let mut scale = vec![1.0; p];
        let n = rows.len() as f64;
        for j in 1..p {
            let mean = rows.iter().map(|&i| d.x()[(i, j)]).sum::<f64>() / n;
            let var = rows.iter().map(|&i| (d.x()[(i, j)] - mean).powi(2)).sum::<f64>() / n;
            center[j] = mean;
            if var.sqrt() > 1e-12 * (1.0 + mean.abs()) {
                scale[j] = var.sqrt();
            }
        }
        Self { center, scale }
    }

    fn to_std(&self, beta: &[f64]) -> Vec<f64> {
        let mut theta = beta.to_vec();
        for j in 1..beta.len() {
            theta[j] = beta[j] * self.scale[j];
            theta[0] += beta[j] * self.center[j];
        }
        theta
    }

    fn to_raw(&self, theta: &[f64]) -> Vec<f64> {
        let mut beta = theta.to_vec();
        for j in 1..theta.len() {
            beta[j] = theta[j] / self.scale[j];
            beta[0] -= beta[j] * self.center[j];
        }
        beta
    }

    fn feature(&self, x: f64, j: usize) -> f64 {
        if j == 0 {
            x
        } else {
            (x - self.center[j]) / self.scale[j]
        }
    }
}

/// Parameters carried between SGD epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub beta_star: DMatrix<f64>,
    pub b_hat: DVector<f64>,
    pub vc: VarianceComponents,
    /// Epochs completed so far; seeds the next epoch's shuffle.
    pub epoch: usize,
    theta: DMatrix<f64>,
    coords: Vec<RegionCoords>,
}

impl SgdState {
    pub fn new(beta_star: DMatrix<f64>, b_hat: DVector<f64>, vc: VarianceComponents, d: &Dataset, r: &RegionAssignment) -> Self {
        let coords: Vec<RegionCoords> = r.members().iter().map(|rows| RegionCoords::fit(d, rows)).collect();
        let mut theta = DMatrix::zeros(beta_star.nrows(), beta_star.ncols());
        let mut beta = beta_star.clone();
        for (m, c) in coords.iter().enumerate() {
            let t = c.to_std(beta_star.column(m).as_slice());
            theta.set_column(m, &DVector::from_vec(t.clone()));
            // Keep beta_star an exact function of theta.
            beta.set_column(m, &DVector::from_vec(c.to_raw(&t)));
        }
        Self { beta_star: beta, b_hat, vc, epoch: 0, theta, coords }
    }
}

fn run_epoch(state: &SgdState, d: &Dataset, r: &RegionAssignment, cfg: &FitConfig, family: &LinkFamily, lr: f64) -> Option<SgdState> {
    let (n, p) = (d.n(), d.p());
    let n_regions = state.beta_star.ncols();
    let mut rng = rng::stream(rng::mix(cfg.seed, SGD_SALT), state.epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let zb = d.z() * &state.b_hat;
    let mut theta = state.theta.clone();
    let mut beta = state.beta_star.clone();
    let mut grad = DMatrix::zeros(p, n_regions);
    let mut counts = vec![0usize; n_regions];
    for batch in order.chunks(cfg.batch_size) {
        grad.fill(0.0);
        counts.fill(0);
        for &i in batch {
            let m = r.region[i];
            let c = &state.coords[m];
            let x = d.x().row(i);
            let eta = x.dot(&beta.column(m).transpose()) + zb[i];
            let s = family.score_factor(d.y()[i], family.inverse(eta), i);
            for j in 0..p {
                grad[(j, m)] += s * c.feature(x[j], j);
            }
            counts[m] += 1;
        }
        for m in (0..n_regions).filter(|&m| counts[m] > 0) {
            let step = grad.column(m) * (lr / counts[m] as f64);
            if step.iter().any(|v| !v.is_finite()) {
                return None;
            }
            let updated = theta.column(m) + step;
            if updated.iter().any(|v| !v.is_finite()) {
                return None;
            }
            theta.set_column(m, &updated);
            beta.set_column(m, &DVector::from_vec(state.coords[m].to_raw(updated.as_slice())));
        }
    }
    Some(SgdState { beta_star: beta, b_hat: state.b_hat.clone(), vc: state.vc, epoch: state.epoch + 1, theta, coords: state.coords.clone() })
}

/// One shuffled pass of mini-batch gradient ascent on the region coefficients.
/// The random effects are left untouched. A non-finite step retries the epoch
/// once at half the learning rate; a second failure is a divergence error.
pub fn sgd_epoch(state: &SgdState, d: &Dataset, r: &RegionAssignment, cfg: &FitConfig) -> Result<SgdState> {
    let family = LinkFamily::new(cfg.family);
    if let Some(s) = run_epoch(state, d, r, cfg, &family, cfg.learning_rate) {
        return Ok(s);
    }
    log::warn!("non-finite gradient in epoch {}; retrying at half the learning rate", state.epoch + 1);
    run_epoch(state, d, r, cfg, &family, 0.5 * cfg.learning_rate).ok_or(Error::Divergence(state.epoch + 1))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Response mapped to the linear-predictor scale for the least-squares start.
fn link_scale_response(d: &Dataset, family: &LinkFamily) -> Result<Dataset> {
    match family.kind {
        FamilyKind::Gaussian => Ok(d.clone()),
        FamilyKind::Poisson => d.with_response(d.y().map(|y| (y + 0.5).ln())),
        FamilyKind::Bernoulli => d.with_response(d.y().map(|y| family.link((y + 0.5) / 2.0))),
    }
}

fn check_responses(d: &Dataset, family: &LinkFamily) -> Result<()> {
    match d.y().iter().position(|&y| !family.valid_response(y)) {
        Some(i) => Err(Error::Data(format!("response {} on row {} is invalid for the {} family", d.y()[i], i + 1, family.kind))),
        None => Ok(()),
    }
}

struct Iterate {
    beta_star: DMatrix<f64>,
    b_hat: DVector<f64>,
    vc: VarianceComponents,
    ql: f64,
}

/// Fits the model and returns it with the training log and diagnostics.
pub fn train(d: &Dataset, cfg: &FitConfig) -> Result<FitReport> {
    cfg.validate()?;
    let family = LinkFamily::new(cfg.family);
    check_responses(d, &family)?;

    let (n_leaves, cv) = match cfg.max_leaves {
        LeafSpec::Fixed(k) => (k, None),
        LeafSpec::Cv => {
            let sel = cross_validate_leaves(d, cfg.cv_folds, &cfg.cv_candidates, cfg.min_leaf, cfg.seed)?;
            log::info!("cross-validation selected {} leaves", sel.selected);
            (sel.selected, Some(sel))
        }
    };
    let (tree, _) = grow_tree(d.x(), d.y(), TreeParams::new(n_leaves, cfg.min_leaf), None)?;
    let needed = d.p().max((cfg.min_region_fraction * d.n() as f64).ceil() as usize);
    let (tree, a, merged) = merge_small_regions(tree, d, needed)?;
    if merged > 0 {
        log::info!("merged {merged} region(s) smaller than {needed} observations");
    }
    let n_regions = tree.leaf_count();
    if d.n() <= d.p() * n_regions {
        return Err(Error::DegreesOfFreedom { n: d.n(), params: d.p() * n_regions });
    }

    // Least-squares start.
    let beta0 = region_least_squares(&link_scale_response(d, &family)?, &a, &DVector::zeros(d.n()))?;
    let b0 = DVector::zeros(d.q());
    let fitted = crate::mixedmodel::fixed_part(&beta0, d.x(), &a.region).map(|e| family.inverse(e));
    let sse: f64 = (d.y() - fitted).norm_squared();
    let vc0 = VarianceComponents { sigma_b2: 1.0, sigma_eps2: (sse / (d.n() - 1).max(1) as f64).max(SIGMA_EPS2_FLOOR) };
    let ql0 = quasi_loglik_at(&beta0, &b0, vc0.sigma_b2, &family, d, &a)?;

    let finish = |it: Iterate, log: Vec<EpochRecord>, refined: bool| FitReport {
        model: GtimmModel {
            beta_star: it.beta_star,
            b_hat: it.b_hat,
            sigma_b2: it.vc.sigma_b2,
            sigma_eps2: it.vc.sigma_eps2,
            tree: tree.clone(),
            family: family.clone(),
            design: DesignInfo::of(d),
            standardization: None,
        },
        log,
        cv: cv.clone(),
        assignment: a.clone(),
        merged,
        initial_quasi_loglik: ql0,
        final_quasi_loglik: it.ql,
        refined,
    };
    let init = Iterate { beta_star: beta0.clone(), b_hat: b0.clone(), vc: vc0, ql: ql0 };
    if cfg.max_epochs == 0 {
        return Ok(finish(init, Vec::new(), false));
    }

    let mut state = SgdState::new(beta0, b0, vc0, d, &a);
    let mut best = init;
    let mut log_rows = Vec::new();
    let mut prev = ql0;
    let mut stall = 0;
    for epoch in 1..=cfg.max_epochs {
        state = sgd_epoch(&state, d, &a, cfg)?;
        if epoch % cfg.blup_refresh_every == 0 {
            state.b_hat = blup_family(&state.beta_star, &state.b_hat, &family, d, &a, state.vc)?;
        }
        state.vc = update_variance_components(d, &a, &state.beta_star, &state.b_hat, state.vc, &family)?;
        if state.vc.sigma_b2 == 0.0 {
            state.b_hat.fill(0.0);
        }
        let ql = quasi_loglik_at(&state.beta_star, &state.b_hat, state.vc.sigma_b2, &family, d, &a)?;
        if !ql.is_finite() {
            return Err(Error::Divergence(epoch));
        }
        log_rows.push(EpochRecord { epoch, quasi_loglik: ql, sigma_b2: state.vc.sigma_b2, sigma_eps2: state.vc.sigma_eps2 });
        if ql > best.ql {
            best = Iterate { beta_star: state.beta_star.clone(), b_hat: state.b_hat.clone(), vc: state.vc, ql };
        }
        let rel = (ql - prev) / prev.abs().max(f64::MIN_POSITIVE);
        stall = if rel < cfg.rel_tol { stall + 1 } else { 0 };
        prev = ql;
        if stall >= PATIENCE {
            break;
        }
    }

    if cfg.refine {
        let vc_start = VarianceComponents { sigma_b2: best.vc.sigma_b2, sigma_eps2: best.vc.sigma_eps2 };
        match alternate(d, &a, &family, vc_start, Some((&best.beta_star, &best.b_hat)), 1000, 1e-12) {
            Ok(fp) => {
                if !fp.converged {
                    log::warn!("refinement stopped after {} rounds without converging", fp.iterations);
                }
                let b = if fp.vc.sigma_b2 == 0.0 { DVector::zeros(d.q()) } else { fp.b_hat };
                let ql = quasi_loglik_at(&fp.beta_star, &b, fp.vc.sigma_b2, &family, d, &a)?;
                if ql >= ql0 {
                    return Ok(finish(Iterate { beta_star: fp.beta_star, b_hat: b, vc: fp.vc, ql }, log_rows, true));
                }
                log::warn!("refined solution has lower quasi-likelihood than the start; keeping the best SGD iterate");
            }
            Err(e) => log::warn!("refinement failed ({e}); keeping the best SGD iterate"),
        }
    }
    Ok(finish(best, log_rows, false))
}

/// Fits a GTIMM to `d`.
pub fn fit_gtimm(d: &Dataset, cfg: &FitConfig) -> Result<GtimmModel> {
    Ok(train(d, cfg)?.model)
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub values: DVector<f64>,
    pub regions: Vec<usize>,
    /// Rows whose random-effect design is all zero (unseen groups).
    pub unseen_rows: Vec<usize>,
}

/// Predictions `h(x' beta^(region) + z' b)` on the response scale. `x` holds
/// raw predictors with the intercept column; when the model carries
/// standardization parameters they are applied on the way in and out.
pub fn predict_detailed(m: &GtimmModel, x: &DMatrix<f64>, z: &DMatrix<f64>, include_random: bool) -> Result<Prediction> {
    if x.ncols() != m.p() {
        return Err(Error::InvalidArgument(format!("X has {} columns, model expects {}", x.ncols(), m.p())));
    }
    if include_random && (z.ncols() != m.q() || z.nrows() != x.nrows()) {
        return Err(Error::InvalidArgument(format!(
            "Z is {}x{}, model expects {}x{}",
            z.nrows(),
            z.ncols(),
            x.nrows(),
            m.q()
        )));
    }
    let xs = match &m.standardization {
        Some(s) => s.transform_x(x)?,
        None => x.clone(),
    };
    let a = assign_regions(&m.tree, &xs)?;
    let mut unseen_rows = Vec::new();
    let values = DVector::from_fn(x.nrows(), |i, _| {
        let mut eta = xs.row(i).dot(&m.beta_star.column(a.region[i]).transpose());
        if include_random {
            let z_row = z.row(i);
            if z_row.iter().all(|&v| v == 0.0) {
                unseen_rows.push(i);
            }
            eta += z_row.dot(&m.b_hat.transpose());
        }
        let mu = m.family.inverse(eta);
        match &m.standardization {
            Some(s) => s.y.inverse(mu),
            None => mu,
        }
    });
    if !unseen_rows.is_empty() {
        log::warn!("{} row(s) have no random-effect group; their random term is 0", unseen_rows.len());
    }
    Ok(Prediction { values, regions: a.region, unseen_rows })
}

pub fn predict(m: &GtimmModel, x: &DMatrix<f64>, z: &DMatrix<f64>, include_random: bool) -> Result<DVector<f64>> {
    Ok(predict_detailed(m, x, z, include_random)?.values)
}
