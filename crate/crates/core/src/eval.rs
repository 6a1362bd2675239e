//! Prediction-error evaluation: MSPE, train/test benchmarks, the MSPE-gap
//! scaling experiment and region cross-tabulations.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::baselines::{fit_forest, fit_lmm, fit_single_tree, ForestConfig, Predictor};
use crate::dataset::{simulate_split, stratified_split, Dataset, SimConfig};
use crate::error::{Error, Result};
use crate::fit::{fit_gtimm, FitConfig};
use crate::linalg::pairwise_sum;
use crate::rng;
use crate::tree::RegionAssignment;

const FOREST_SEED_SALT: u64 = 0x5246_0000_0000_0001;
const GAP_SALT: u64 = 0x4741_5000_0000_0001;

/// Mean squared difference between `y_true` and `y_pred`.
pub fn mspe(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(Error::InvalidArgument(format!(
            "mspe needs equal lengths, got {} and {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::InvalidArgument("mspe of an empty vector".into()));
    }
    let sq: Vec<f64> = y_true.iter().zip(y_pred).map(|(a, b)| (a - b) * (a - b)).collect();
    Ok(pairwise_sum(&sq) / sq.len() as f64)
}

// ---------------------------------------------------------------------------
// Benchmark
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct MspeReport {
    /// `(model name, test MSPE)` in a fixed order.
    pub entries: Vec<(String, f64)>,
    pub train_fraction: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
}

impl MspeReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    /// CSV with columns `model,mspe`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["model", "mspe"])?;
        for (name, v) in &self.entries {
            w.write_record([name.as_str(), &v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub const GTIMM: &str = "GTIMM";
pub const LMM: &str = "LMM";
pub const TREE: &str = "Tree";
pub const FOREST: &str = "RF";

/// Fits GTIMM, LMM, a single tree and a forest on a group-stratified training
/// split and reports each model's test MSPE (random effects included).
pub fn benchmark(d: &Dataset, cfg: &FitConfig, train_fraction: f64, seed: u64) -> Result<MspeReport> {
    let (train_rows, test_rows) = stratified_split(d, train_fraction, seed)?;
    let train = d.subset(&train_rows);
    let test = d.subset(&test_rows);
    let y = test.y().as_slice();

    let gtimm = fit_gtimm(&train, cfg)?;
    let lmm = fit_lmm(&train)?;
    let tree = fit_single_tree(&train)?;
    let forest = fit_forest(&train, &ForestConfig { seed: rng::mix(seed, FOREST_SEED_SALT), ..ForestConfig::default() })?;

    let models: [(&str, &dyn Predictor); 4] = [(GTIMM, &gtimm), (LMM, &lmm), (TREE, &tree), (FOREST, &forest)];
    let entries = models
        .iter()
        .map(|(name, m)| {
            let pred = m.predict(test.x(), test.z())?;
            Ok((name.to_string(), mspe(y, pred.as_slice())?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MspeReport { entries, train_fraction, seed, n_train: train.n(), n_test: test.n() })
}

// ---------------------------------------------------------------------------
// MSPE-gap scaling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapPoint {
    pub n: usize,
    pub m: usize,
    pub gap_mean: f64,
    pub gap_std: f64,
    /// Replications excluded after a fit failure.
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapCurve {
    pub points: Vec<GapPoint>,
}

impl GapCurve {
    /// Least-squares slope of `ln(gap_mean)` on `ln(N)`; `None` when fewer than
    /// two points have a positive gap.
    pub fn log_log_slope(&self) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .points
            .iter()
            .filter(|p| p.gap_mean > 0.0)
            .map(|p| ((p.n as f64).ln(), p.gap_mean.ln()))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let k = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        Some(sxy / sxx)
    }

    /// CSV with columns `N,M,gap_mean,gap_std`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["N", "M", "gap_mean", "gap_std"])?;
        for p in &self.points {
            w.write_record([p.n.to_string(), p.m.to_string(), p.gap_mean.to_string(), p.gap_std.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapOptions {
    /// Size of each replication's held-out set (shares the training draws of `b`).
    pub n_test: usize,
    /// Template for the GTIMM fits; leaves and seed are set per cell.
    pub fit: FitConfig,
    /// Largest tolerated share of failed replications at any `N`.
    pub max_failure_rate: f64,
}

impl Default for GapOptions {
    fn default() -> Self {
        Self { n_test: 4000, fit: FitConfig::default(), max_failure_rate: 0.2 }
    }
}

pub fn gap_experiment(n_grid: &[usize], m: usize, replications: usize, seed: u64) -> Result<GapCurve> {
    gap_experiment_with(n_grid, m, replications, seed, &GapOptions::default())
}

/// `|MSPE_GTIMM - MSPE_LMM|` on held-out data from a common-coefficient
/// design, for every training size in `n_grid`, averaged over replications.
///
/// Both models are correctly specified for this design, so the gap measures
/// only the estimation cost of fitting `M` separate regions.
pub fn gap_experiment_with(
    n_grid: &[usize],
    m: usize,
    replications: usize,
    seed: u64,
    opts: &GapOptions,
) -> Result<GapCurve> {
    if n_grid.is_empty() || n_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("N grid must be non-empty and strictly increasing".into()));
    }
    if let Some(n) = n_grid.iter().find(|&&n| n == 0 || n % 4 != 0) {
        return Err(Error::InvalidArgument(format!("every N must be a positive multiple of 4, got {n}")));
    }
    if replications < 5 {
        return Err(Error::InvalidArgument(format!("need at least 5 replications, got {replications}")));
    }
    if m == 0 || opts.n_test == 0 || opts.n_test % 4 != 0 {
        return Err(Error::InvalidArgument("M must be positive and the test size a positive multiple of 4".into()));
    }

    let base = rng::mix(seed, GAP_SALT);
    let cells: Vec<(usize, usize)> = n_grid.iter().flat_map(|&n| (0..replications).map(move |r| (n, r))).collect();
    let gaps: Vec<Result<f64>> = cells
        .par_iter()
        .map(|&(n, r)| {
            let cell_seed = rng::mix(base, (n as u64) << 32 | r as u64);
            gap_cell(n, m, cell_seed, opts)
        })
        .collect();

    let mut points = Vec::with_capacity(n_grid.len());
    for (k, &n) in n_grid.iter().enumerate() {
        let chunk = &gaps[k * replications..(k + 1) * replications];
        let ok: Vec<f64> = chunk.iter().filter_map(|g| g.as_ref().ok().copied()).collect();
        let failures = chunk.len() - ok.len();
        for (r, g) in chunk.iter().enumerate() {
            if let Err(e) = g {
                log::warn!("gap experiment N={n} replication {r} failed: {e}");
            }
        }
        if failures as f64 > opts.max_failure_rate * replications as f64 || ok.len() < 2 {
            return Err(Error::Experiment(format!("{failures} of {replications} replications failed at N={n}")));
        }
        let mean = ok.iter().sum::<f64>() / ok.len() as f64;
        let var = ok.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (ok.len() - 1) as f64;
        points.push(GapPoint { n, m, gap_mean: mean, gap_std: var.sqrt(), failures });
    }
    Ok(GapCurve { points })
}

fn gap_cell(n: usize, m: usize, seed: u64, opts: &GapOptions) -> Result<f64> {
    let sim = SimConfig { n_total: n, ..SimConfig::default() }.common_coefficients();
    let (train, test, _) = simulate_split(&sim, n, opts.n_test, seed)?;
    let cfg = FitConfig { seed, ..opts.fit.clone().with_leaves(m) };
    let gtimm = fit_gtimm(&train, &cfg)?;
    let lmm = fit_lmm(&train)?;
    let y = test.y().as_slice();
    let a = mspe(y, gtimm.predict(test.x(), test.z())?.as_slice())?;
    let b = mspe(y, lmm.predict(test.x(), test.z())?.as_slice())?;
    Ok((a - b).abs())
}

// ---------------------------------------------------------------------------
// Region tables
// ---------------------------------------------------------------------------

/// `M x n_groups` counts of observations by region and group label.
pub fn crosstab_regions(assign: &RegionAssignment, groups: &[usize], n_groups: usize) -> Result<DMatrix<usize>> {
    if assign.len() != groups.len() {
        return Err(Error::InvalidArgument(format!(
            "crosstab needs equal lengths, got {} regions and {} labels",
            assign.len(),
            groups.len()
        )));
    }
    if let Some(&g) = groups.iter().find(|&&g| g >= n_groups) {
        return Err(Error::InvalidArgument(format!("group label {g} out of range 0..{n_groups}")));
    }
    let mut t = DMatrix::zeros(assign.n_regions(), n_groups);
    for (&r, &g) in assign.region.iter().zip(groups) {
        t[(r, g)] += 1;
    }
    Ok(t)
}

/// Best one-to-one relabelling of `predicted` onto `truth` (maximising
/// agreement); entry `k` is the truth label for predicted label `k`, or
/// `None` when it is left unmatched.
pub fn best_relabelling(predicted: &[usize], truth: &[usize]) -> Result<Vec<Option<usize>>> {
    if predicted.len() != truth.len() {
        return Err(Error::InvalidArgument("label vectors differ in length".into()));
    }
    let kp = predicted.iter().max().map_or(0, |&v| v + 1);
    let kt = truth.iter().max().map_or(0, |&v| v + 1);
    if kt > 16 {
        return Err(Error::InvalidArgument(format!("at most 16 truth labels supported, got {kt}")));
    }
    let mut agree = vec![vec![0usize; kt]; kp];
    for (&p, &t) in predicted.iter().zip(truth) {
        agree[p][t] += 1;
    }
    // dp[row][mask]: best agreement using predicted labels >= row with truth
    // labels in `mask` already taken.
    let full = 1usize << kt;
    let mut dp = vec![vec![0usize; full]; kp + 1];
    for row in (0..kp).rev() {
        for mask in 0..full {
            let mut best = dp[row + 1][mask];
            for t in 0..kt {
                if mask & (1 << t) == 0 {
                    best = best.max(agree[row][t] + dp[row + 1][mask | (1 << t)]);
                }
            }
            dp[row][mask] = best;
        }
    }
    let mut map = vec![None; kp];
    let mut mask = 0;
    for row in 0..kp {
        if dp[row][mask] == dp[row + 1][mask] {
            continue;
        }
        let t = (0..kt)
            .find(|&t| mask & (1 << t) == 0 && dp[row][mask] == agree[row][t] + dp[row + 1][mask | (1 << t)])
            .expect("dp backtrack");
        map[row] = Some(t);
        mask |= 1 << t;
    }
    Ok(map)
}

/// Rows whose predicted region disagrees with `truth` under the best
/// relabelling of the predicted regions.
pub fn region_mismatches(predicted: &[usize], truth: &[usize]) -> Result<usize> {
    let map = best_relabelling(predicted, truth)?;
    Ok(predicted.iter().zip(truth).filter(|&(&p, &t)| map[p] != Some(t)).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::simulate_gtimm;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    #[test]
    fn mspe_examples() {
        assert_eq!(mspe(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mspe(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 5.0);
        assert!(mspe(&[0.0], &[1.0, 3.0]).is_err());
        assert!(mspe(&[], &[]).is_err());
    }

    #[test]
    fn mspe_matches_reverse_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        use rand::Rng;
        let a: Vec<f64> = (0..1001).map(|_| rng.random::<f64>() * 100.0).collect();
        let b: Vec<f64> = (0..1001).map(|_| rng.random::<f64>() * 100.0).collect();
        let mut rev = 0.0;
        for i in (0..a.len()).rev() {
            rev += (a[i] - b[i]).powi(2);
        }
        let got = mspe(&a, &b).unwrap();
        assert!((got - rev / a.len() as f64).abs() <= 1e-12 * got);
    }

    proptest! {
        #[test]
        fn mspe_is_permutation_invariant(pairs in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..60), seed in 0u64..1000) {
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let split = |v: &[(f64, f64)]| -> (Vec<f64>, Vec<f64>) { v.iter().copied().unzip() };
            let (a, b) = split(&pairs);
            let (c, d) = split(&shuffled);
            let x = mspe(&a, &b).unwrap();
            let y = mspe(&c, &d).unwrap();
            prop_assert!(x >= 0.0);
            prop_assert!((x - y).abs() <= 1e-12 * x.max(1.0));
        }

        #[test]
        fn crosstab_matches_hash_map_tally(rows in proptest::collection::vec((0usize..4, 0usize..6), 1..200)) {
            let region: Vec<usize> = rows.iter().map(|r| r.0).collect();
            let groups: Vec<usize> = rows.iter().map(|r| r.1).collect();
            let a = RegionAssignment::from_regions(region.clone(), 4).unwrap();
            let t = crosstab_regions(&a, &groups, 6).unwrap();
            let mut tally: HashMap<(usize, usize), usize> = HashMap::new();
            for r in &rows {
                *tally.entry(*r).or_default() += 1;
            }
            for m in 0..4 {
                for g in 0..6 {
                    prop_assert_eq!(t[(m, g)], tally.get(&(m, g)).copied().unwrap_or(0));
                }
                prop_assert_eq!(t.row(m).sum(), a.counts[m]);
            }
            prop_assert_eq!(t.sum(), rows.len());
        }

        #[test]
        fn relabelled_regions_have_no_mismatches(labels in proptest::collection::vec(0usize..5, 1..100), seed in 0u64..1000) {
            let mut perm: Vec<usize> = (0..5).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let renamed: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
            prop_assert_eq!(region_mismatches(&renamed, &labels).unwrap(), 0);
        }
    }

    #[test]
    fn crosstab_single_region_is_group_counts() {
        let groups = vec![0, 1, 1, 2, 2, 2];
        let a = RegionAssignment::from_regions(vec![0; 6], 1).unwrap();
        let t = crosstab_regions(&a, &groups, 3).unwrap();
        assert_eq!(t, DMatrix::from_row_slice(1, 3, &[1, 2, 3]));
        assert!(crosstab_regions(&a, &groups[..5], 3).is_err());
    }

    #[test]
    fn mismatches_count_the_minority() {
        // Predicted 0 covers truth 1 except one row.
        assert_eq!(region_mismatches(&[0, 0, 0, 1, 1], &[1, 1, 0, 0, 0]).unwrap(), 1);
        assert_eq!(best_relabelling(&[0, 0, 0, 1, 1], &[1, 1, 0, 0, 0]).unwrap(), vec![Some(1), Some(0)]);
        // More predicted labels than truth labels: one stays unmatched.
        assert_eq!(region_mismatches(&[0, 1, 2], &[0, 0, 0]).unwrap(), 2);
    }

    #[test]
    fn noiseless_benchmark() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        use rand_distr::{Distribution, StandardNormal};
        let n = 400;
        let feats: DMatrix<f64> = DMatrix::from_fn(n, 2, |_, _| StandardNormal.sample(&mut rng));
        let y: Vec<f64> = (0..n).map(|i| 1.0 + 0.5 * feats[(i, 0)] - 0.3 * feats[(i, 1)]).collect();
        let d = Dataset::from_groups(y, feats, (0..n).map(|i| i % 5).collect(), 5).unwrap();
        let r = benchmark(&d, &FitConfig::default(), 0.8, 3).unwrap();
        for (name, v) in &r.entries {
            assert!(*v < 0.1, "{name}: {v}");
        }
        assert!(r.get(GTIMM).unwrap() < 1e-4, "{:?}", r);
        assert!(r.get(LMM).unwrap() < 1e-4, "{:?}", r);
        assert_eq!(r.n_train + r.n_test, n);
    }

    #[test]
    fn benchmark_is_deterministic_and_handles_tiny_tests() {
        let (d, _) = simulate_gtimm(400, 2, 2.0, 1.0).unwrap();
        let cfg = FitConfig { seed: 2, ..FitConfig::default() };
        let a = benchmark(&d, &cfg, 0.8, 9).unwrap();
        assert_eq!(a, benchmark(&d, &cfg, 0.8, 9).unwrap());
        let names: Vec<&str> = a.entries.iter().map(|e| e.0.as_str()).collect();
        assert_eq!(names, [GTIMM, LMM, TREE, FOREST]);
        let tiny = benchmark(&d, &cfg, 0.95, 9).unwrap();
        assert!(tiny.entries.iter().all(|e| e.1.is_finite() && e.1 >= 0.0));
    }

    #[test]
    fn gap_arguments_are_checked() {
        assert!(gap_experiment(&[500, 502], 4, 5, 0).is_err());
        assert!(gap_experiment(&[1000, 500], 4, 5, 0).is_err());
        assert!(gap_experiment(&[500], 4, 4, 0).is_err());
    }

    #[test]
    fn single_region_gap_vanishes() {
        let opts = GapOptions { n_test: 400, ..GapOptions::default() };
        let curve = gap_experiment_with(&[200, 400], 1, 5, 1, &opts).unwrap();
        for p in &curve.points {
            assert!(p.gap_mean < 1e-3 && p.gap_std >= 0.0, "{p:?}");
        }
        let mut buf = Vec::new();
        curve.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("N,M,gap_mean,gap_std\n"));
    }

    #[test]
    fn log_log_slope_of_exact_power_law() {
        let points = [100usize, 200, 400]
            .iter()
            .map(|&n| GapPoint { n, m: 4, gap_mean: 3.0 / n as f64, gap_std: 0.0, failures: 0 })
            .collect();
        let s = GapCurve { points }.log_log_slope().unwrap();
        assert!((s + 1.0).abs() < 1e-12);
    }
}
