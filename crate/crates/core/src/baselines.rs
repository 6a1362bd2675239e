//! Comparison models: a global linear mixed model, a single regression tree
//! and a bagged forest of regression trees.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dataset::{Dataset, DesignInfo};
use crate::error::{Error, Result};
use crate::fit;
use crate::linalg;
use crate::mixedmodel::mme::{alternate, region_least_squares};
use crate::mixedmodel::{GtimmModel, LinkFamily, VarianceComponents, SIGMA_EPS2_FLOOR};
use crate::rng;
use crate::tree::{fit_tree, grow_tree, RegionAssignment, RegressionTree, TreeParams};

const FOREST_SALT: u64 = 0x464f_5245_5354_0001;

/// Anything that predicts a response from `(X, Z)`.
pub trait Predictor {
    fn predict(&self, x: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<DVector<f64>>;
}

pub fn predict_baseline(model: &dyn Predictor, x: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<DVector<f64>> {
    model.predict(x, z)
}

impl Predictor for GtimmModel {
    fn predict(&self, x: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<DVector<f64>> {
        fit::predict(self, x, z, true)
    }
}

// ---------------------------------------------------------------------------
// Linear mixed model
// ---------------------------------------------------------------------------

/// `y = X beta + Z b + e` with a single coefficient vector for all rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LmmModel {
    pub beta: DVector<f64>,
    pub b_tilde: DVector<f64>,
    pub sigma_b2: f64,
    pub sigma_eps2: f64,
    pub design: DesignInfo,
}

/// Fits the linear mixed model.
///
/// Starts from ordinary least squares and alternates the mixed-model
/// equations (generalized least squares for `beta`, BLUP for `b`) with the
/// moment updates of the variance components until they agree; this is the
/// same stationary point a one-region GTIMM reaches.
pub fn fit_lmm(d: &Dataset) -> Result<LmmModel> {
    let r = RegionAssignment::from_regions(vec![0; d.n()], 1)?;
    if d.n() <= d.p() {
        return Err(Error::DegreesOfFreedom { n: d.n(), params: d.p() });
    }
    let beta0 = region_least_squares(d, &r, &DVector::zeros(d.n()))?;
    let resid = d.y() - d.x() * beta0.column(0);
    let vc0 = VarianceComponents {
        sigma_b2: 1.0,
        sigma_eps2: (resid.norm_squared() / (d.n() - 1) as f64).max(SIGMA_EPS2_FLOOR),
    };
    let b0 = DVector::zeros(d.q());
    let fp = alternate(d, &r, &LinkFamily::gaussian(), vc0, Some((&beta0, &b0)), 1000, 1e-12)?;
    if !fp.converged {
        log::warn!("linear mixed model variance components did not converge");
    }
    let b_tilde = if fp.vc.sigma_b2 == 0.0 { DVector::zeros(d.q()) } else { fp.b_hat };
    Ok(LmmModel {
        beta: fp.beta_star.column(0).into_owned(),
        b_tilde,
        sigma_b2: fp.vc.sigma_b2,
        sigma_eps2: fp.vc.sigma_eps2,
        design: DesignInfo::of(d),
    })
}

impl Predictor for LmmModel {
    fn predict(&self, x: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x.ncols() != self.beta.len() || z.ncols() != self.b_tilde.len() || z.nrows() != x.nrows() {
            return Err(Error::InvalidArgument(format!(
                "LMM expects X with {} and Z with {} columns on the same rows",
                self.beta.len(),
                self.b_tilde.len()
            )));
        }
        Ok(x * &self.beta + z * &self.b_tilde)
    }
}

// ---------------------------------------------------------------------------
// Trees and forests
// ---------------------------------------------------------------------------

/// Defaults of the single-tree comparator.
pub const TREE_MAX_LEAVES: usize = 32;
pub const TREE_MIN_LEAF: usize = 10;

/// The single decision-tree comparator.
pub fn fit_single_tree(d: &Dataset) -> Result<RegressionTree> {
    fit_tree(d, TREE_MAX_LEAVES, TREE_MIN_LEAF)
}

impl Predictor for RegressionTree {
    fn predict(&self, x: &DMatrix<f64>, _z: &DMatrix<f64>) -> Result<DVector<f64>> {
        RegressionTree::predict(self, x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_leaves: usize,
    pub min_leaf: usize,
    /// Split candidates per split; `None` means `ceil(sqrt(#features))`.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self { n_trees: 200, max_leaves: 32, min_leaf: 5, max_features: None, bootstrap: true, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub trees: Vec<RegressionTree>,
    pub n_trees: usize,
    /// Fraction of the features offered at each split.
    pub feature_subsample: f64,
    pub bootstrap: bool,
}

/// Bagged regression trees. Tree `t` draws its bootstrap sample and feature
/// subsets from its own random stream, so the forest does not depend on the
/// number of worker threads.
pub fn fit_forest(d: &Dataset, cfg: &ForestConfig) -> Result<ForestModel> {
    if cfg.n_trees == 0 {
        return Err(Error::InvalidArgument("a forest needs at least one tree".into()));
    }
    let k = d.p() - 1;
    let max_features = cfg.max_features.unwrap_or_else(|| (k as f64).sqrt().ceil() as usize).clamp(1, k.max(1));
    let params = TreeParams { max_leaves: cfg.max_leaves, min_leaf: cfg.min_leaf, max_features: Some(max_features) };
    let base = rng::mix(cfg.seed, FOREST_SALT);
    let trees = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::stream(base, t as u64);
            let (x, y) = if cfg.bootstrap {
                use rand::Rng;
                let rows: Vec<usize> = (0..d.n()).map(|_| rng.random_range(0..d.n())).collect();
                (linalg::select_rows(d.x(), &rows), DVector::from_iterator(rows.len(), rows.iter().map(|&i| d.y()[i])))
            } else {
                (d.x().clone(), d.y().clone())
            };
            grow_tree(&x, &y, params, Some(&mut rng)).map(|(tree, _)| tree)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ForestModel {
        n_trees: trees.len(),
        trees,
        feature_subsample: if k == 0 { 1.0 } else { max_features as f64 / k as f64 },
        bootstrap: cfg.bootstrap,
    })
}

impl Predictor for ForestModel {
    fn predict(&self, x: &DMatrix<f64>, _z: &DMatrix<f64>) -> Result<DVector<f64>> {
        let mut sum = DVector::zeros(x.nrows());
        for t in &self.trees {
            sum += t.predict(x)?;
        }
        Ok(sum / self.trees.len() as f64)
    }
}
