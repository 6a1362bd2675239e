//! CART regression trees grown best-first on the within-leaf sum of squared
//! errors, and cross-validated choice of the number of leaves.
//!
//! Feature indices refer to columns of the design matrix `X`; column 0 is the
//! intercept and is never split on. Routing sends `x[feature] <= threshold`
//! to the left child. Leaves are numbered `0..M` left to right.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{kfold_assignment, Dataset};
use crate::error::{Error, Result};
use crate::linalg;

pub const DEFAULT_MIN_LEAF: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        region: usize,
        mean: f64,
        count: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    /// Node 0 is the root.
    nodes: Vec<Node>,
    n_regions: usize,
}

/// Region index (0-based) of every observation, with per-region counts.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionAssignment {
    pub region: Vec<usize>,
    pub counts: Vec<usize>,
}

impl RegionAssignment {
    pub fn from_regions(region: Vec<usize>, n_regions: usize) -> Result<Self> {
        let mut counts = vec![0; n_regions];
        for &m in &region {
            *counts
                .get_mut(m)
                .ok_or_else(|| Error::InvalidArgument(format!("region {m} out of range 0..{n_regions}")))? += 1;
        }
        Ok(Self { region, counts })
    }

    pub fn n_regions(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.region.len()
    }

    pub fn is_empty(&self) -> bool {
        self.region.is_empty()
    }

    /// Observation indices of every region.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_regions()];
        for (i, &m) in self.region.iter().enumerate() {
            out[m].push(i);
        }
        out
    }

    pub fn subset(&self, rows: &[usize]) -> RegionAssignment {
        let region: Vec<usize> = rows.iter().map(|&i| self.region[i]).collect();
        Self::from_regions(region, self.n_regions()).expect("regions already validated")
    }
}

impl RegressionTree {
    pub fn single_leaf(mean: f64, count: usize) -> Self {
        Self { nodes: vec![Node::Leaf { region: 0, mean, count }], n_regions: 1 }
    }

    /// Rebuilds a tree from its node table, checking that it is a proper binary
    /// tree rooted at node 0 whose leaves number `0..M` left to right.
    pub fn from_nodes(nodes: Vec<Node>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Structure("tree has no nodes".into()));
        }
        let mut visited = vec![false; nodes.len()];
        let mut next_region = 0;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            if std::mem::replace(&mut visited[id], true) {
                return Err(Error::Structure(format!("node {id} reachable twice")));
            }
            match &nodes[id] {
                Node::Split { feature, threshold, left, right } => {
                    if *feature == 0 || !threshold.is_finite() {
                        return Err(Error::Structure(format!("node {id}: invalid split")));
                    }
                    if *left >= nodes.len() || *right >= nodes.len() {
                        return Err(Error::Structure(format!("node {id}: child out of range")));
                    }
                    stack.push(*right);
                    stack.push(*left);
                }
                Node::Leaf { region, mean, .. } => {
                    if *region != next_region || !mean.is_finite() {
                        return Err(Error::Structure(format!(
                            "leaf {id} has region {region}, expected {next_region} (in-order numbering)"
                        )));
                    }
                    next_region += 1;
                }
            }
        }
        if let Some(id) = visited.iter().position(|v| !v) {
            return Err(Error::Structure(format!("node {id} is unreachable")));
        }
        Ok(Self { nodes, n_regions: next_region })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Number of leaves `M`.
    pub fn leaf_count(&self) -> usize {
        self.n_regions
    }

    /// Largest design column referenced by a split (0 for a single leaf).
    pub fn max_feature(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .max()
            .unwrap_or(0)
    }

    fn leaf_of(&self, row: impl Fn(usize) -> f64) -> (usize, usize) {
        let mut id = 0;
        loop {
            match &self.nodes[id] {
                Node::Split { feature, threshold, left, right } => {
                    id = if row(*feature) <= *threshold { *left } else { *right };
                }
                Node::Leaf { region, .. } => return (id, *region),
            }
        }
    }

    /// Region of a single design row (caller guarantees the width).
    pub fn route(&self, x: &DMatrix<f64>, i: usize) -> usize {
        self.leaf_of(|j| x[(i, j)]).1
    }

    /// Leaf-mean prediction for every row of `x`.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_width(x)?;
        Ok(DVector::from_fn(x.nrows(), |i, _| match &self.nodes[self.leaf_of(|j| x[(i, j)]).0] {
            Node::Leaf { mean, .. } => *mean,
            Node::Split { .. } => unreachable!(),
        }))
    }

    fn check_width(&self, x: &DMatrix<f64>) -> Result<()> {
        if self.max_feature() >= x.ncols() {
            return Err(Error::Structure(format!(
                "tree splits on column {} but the design has only {} columns",
                self.max_feature(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Removes leaf `region` by replacing its parent with the leaf's sibling
    /// subtree; observations of the removed leaf then route into the sibling.
    /// Leaf statistics are stale until [`RegressionTree::refresh_leaves`].
    pub fn collapse_leaf(&self, region: usize) -> Result<RegressionTree> {
        let leaf = self
            .nodes
            .iter()
            .position(|n| matches!(n, Node::Leaf { region: r, .. } if *r == region))
            .ok_or_else(|| Error::InvalidArgument(format!("no leaf with region {region}")))?;
        let (parent, sibling) = self
            .nodes
            .iter()
            .enumerate()
            .find_map(|(id, n)| match n {
                Node::Split { left, right, .. } if *left == leaf => Some((id, *right)),
                Node::Split { left, right, .. } if *right == leaf => Some((id, *left)),
                _ => None,
            })
            .ok_or_else(|| Error::Structure("cannot collapse the root leaf".into()))?;
        let mut out = Vec::new();
        let mut next_region = 0;
        let root = self.copy_subtree(0, parent, sibling, &mut out, &mut next_region);
        debug_assert_eq!(root, 0);
        Ok(Self { nodes: out, n_regions: next_region })
    }

    /// Copies the subtree at `id` in pre-order, substituting `with` for `replace`.
    fn copy_subtree(&self, id: usize, replace: usize, with: usize, out: &mut Vec<Node>, next_region: &mut usize) -> usize {
        let id = if id == replace { with } else { id };
        let slot = out.len();
        match &self.nodes[id] {
            Node::Leaf { mean, count, .. } => {
                out.push(Node::Leaf { region: *next_region, mean: *mean, count: *count });
                *next_region += 1;
            }
            Node::Split { feature, threshold, left, right } => {
                out.push(Node::Leaf { region: 0, mean: 0.0, count: 0 });
                let l = self.copy_subtree(*left, replace, with, out, next_region);
                let r = self.copy_subtree(*right, replace, with, out, next_region);
                out[slot] = Node::Split { feature: *feature, threshold: *threshold, left: l, right: r };
            }
        }
        slot
    }

    /// Recomputes leaf means and counts from training data. Empty leaves keep
    /// their previous mean.
    pub fn refresh_leaves(&mut self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
        let a = assign_regions(self, x)?;
        let mut sums = vec![0.0; self.n_regions];
        for (i, &m) in a.region.iter().enumerate() {
            sums[m] += y[i];
        }
        for node in &mut self.nodes {
            if let Node::Leaf { region, mean, count } = node {
                *count = a.counts[*region];
                if *count > 0 {
                    *mean = sums[*region] / *count as f64;
                }
            }
        }
        Ok(())
    }
}

/// Routes every row of `x` to its leaf.
pub fn assign_regions(t: &RegressionTree, x: &DMatrix<f64>) -> Result<RegionAssignment> {
    t.check_width(x)?;
    let region = (0..x.nrows()).map(|i| t.route(x, i)).collect();
    RegionAssignment::from_regions(region, t.leaf_count())
}

// ---------------------------------------------------------------------------
// Growing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeParams {
    pub max_leaves: usize,
    pub min_leaf: usize,
    /// Features drawn (without replacement) as split candidates at each
    /// split; `None` uses every feature.
    pub max_features: Option<usize>,
}

impl TreeParams {
    pub fn new(max_leaves: usize, min_leaf: usize) -> Self {
        Self { max_leaves, min_leaf, max_features: None }
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    feature: usize,
    threshold: f64,
    gain: f64,
}

struct Grower<'a> {
    x: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    params: TreeParams,
    min_gain: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl Grower<'_> {
    fn features(&mut self) -> Vec<usize> {
        let k = self.x.ncols() - 1;
        match (self.params.max_features, self.rng.as_deref_mut()) {
            (Some(f), Some(rng)) if f < k => {
                let mut v: Vec<usize> = sample(rng, k, f.max(1)).into_iter().map(|j| j + 1).collect();
                v.sort_unstable();
                v
            }
            _ => (1..=k).collect(),
        }
    }

    /// Best split of `rows` by `n_l n_r / n (mean_l - mean_r)^2`, which equals
    /// the drop in SSE. Ties keep the lowest feature, then smallest threshold.
    fn best_split(&mut self, rows: &[usize]) -> Option<Candidate> {
        let n = rows.len();
        let min_leaf = self.params.min_leaf;
        if n < 2 * min_leaf || rows.iter().all(|&i| self.y[i] == self.y[rows[0]]) {
            return None;
        }
        let total: f64 = rows.iter().map(|&i| self.y[i]).sum();
        let mut best: Option<Candidate> = None;
        let mut order = rows.to_vec();
        for feature in self.features() {
            let col = self.x.column(feature);
            order.sort_by(|&a, &b| col[a].total_cmp(&col[b]));
            let mut left_sum = 0.0;
            for k in 0..n - 1 {
                left_sum += self.y[order[k]];
                let n_l = k + 1;
                let n_r = n - n_l;
                let (lo, hi) = (col[order[k]], col[order[k + 1]]);
                if lo == hi || n_l < min_leaf || n_r < min_leaf {
                    continue;
                }
                let diff = left_sum / n_l as f64 - (total - left_sum) / n_r as f64;
                let gain = (n_l * n_r) as f64 / n as f64 * diff * diff;
                if gain > self.min_gain && best.is_none_or(|b| gain > b.gain) {
                    let mid = lo + (hi - lo) / 2.0;
                    let threshold = if mid < hi { mid } else { lo };
                    best = Some(Candidate { feature, threshold, gain });
                }
            }
        }
        best
    }

    fn grow(mut self) -> (RegressionTree, Vec<usize>) {
        let n = self.y.len();
        // Work list of open leaves: (node id, rows, best split).
        let mut nodes = vec![Node::Leaf { region: 0, mean: 0.0, count: 0 }];
        let all: Vec<usize> = (0..n).collect();
        let root_split = self.best_split(&all);
        let mut open = vec![(0usize, all, root_split)];
        let mut closed: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut leaves = 1;
        while leaves < self.params.max_leaves {
            // Highest gain; first-created wins ties.
            let pick = open
                .iter()
                .enumerate()
                .filter_map(|(k, (_, _, c))| c.map(|c| (k, c.gain)))
                .fold(None, |acc: Option<(usize, f64)>, (k, g)| match acc {
                    Some((_, bg)) if bg >= g => acc,
                    _ => Some((k, g)),
                });
            let Some((k, _)) = pick else { break };
            let (id, rows, split) = open.remove(k);
            let split = split.expect("picked leaf has a split");
            let (l_rows, r_rows): (Vec<usize>, Vec<usize>) =
                rows.iter().partition(|&&i| self.x[(i, split.feature)] <= split.threshold);
            let (l, r) = (nodes.len(), nodes.len() + 1);
            nodes.push(Node::Leaf { region: 0, mean: 0.0, count: 0 });
            nodes.push(Node::Leaf { region: 0, mean: 0.0, count: 0 });
            nodes[id] = Node::Split { feature: split.feature, threshold: split.threshold, left: l, right: r };
            let ls = self.best_split(&l_rows);
            open.push((l, l_rows, ls));
            let rs = self.best_split(&r_rows);
            open.push((r, r_rows, rs));
            leaves += 1;
        }
        closed.extend(open.into_iter().map(|(id, rows, _)| (id, rows)));
        for (id, rows) in &closed {
            let mean = rows.iter().map(|&i| self.y[i]).sum::<f64>() / rows.len() as f64;
            nodes[*id] = Node::Leaf { region: 0, mean, count: rows.len() };
        }
        // Renumber in-order, compacting the table in pre-order.
        let raw = RegressionTree { nodes, n_regions: leaves };
        let mut out = Vec::new();
        let mut next = 0;
        raw.copy_subtree(0, usize::MAX, usize::MAX, &mut out, &mut next);
        let tree = RegressionTree { nodes: out, n_regions: next };
        let mut region = vec![0; n];
        for (id, rows) in &closed {
            let old_leaf_region = raw_region(&raw, &tree, *id);
            for &i in rows {
                region[i] = old_leaf_region;
            }
        }
        (tree, region)
    }
}

/// Region number that leaf `id` of the uncompacted tree received in `tree`.
fn raw_region(raw: &RegressionTree, tree: &RegressionTree, id: usize) -> usize {
    // Walk the raw tree to collect the path to `id`, then replay it on `tree`.
    fn path(nodes: &[Node], at: usize, target: usize, out: &mut Vec<bool>) -> bool {
        if at == target {
            return true;
        }
        if let Node::Split { left, right, .. } = &nodes[at] {
            out.push(false);
            if path(nodes, *left, target, out) {
                return true;
            }
            out.pop();
            out.push(true);
            if path(nodes, *right, target, out) {
                return true;
            }
            out.pop();
        }
        false
    }
    let mut steps = Vec::new();
    path(&raw.nodes, 0, id, &mut steps);
    let mut at = 0;
    for go_right in steps {
        if let Node::Split { left, right, .. } = &tree.nodes[at] {
            at = if go_right { *right } else { *left };
        }
    }
    match &tree.nodes[at] {
        Node::Leaf { region, .. } => *region,
        Node::Split { .. } => unreachable!("path ends at a leaf"),
    }
}

fn validate_params(n_cols: usize, params: &TreeParams) -> Result<()> {
    if params.max_leaves < 1 {
        return Err(Error::InvalidArgument("max_leaves must be at least 1".into()));
    }
    if params.min_leaf < 1 {
        return Err(Error::InvalidArgument("min_leaf must be at least 1".into()));
    }
    if n_cols == 0 {
        return Err(Error::InvalidArgument("design has no columns".into()));
    }
    Ok(())
}

/// Grows a tree on `(x, y)` and also returns the training assignment recorded
/// while growing. `rng` drives per-split feature subsampling.
pub fn grow_tree(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    params: TreeParams,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(RegressionTree, RegionAssignment)> {
    validate_params(x.ncols(), &params)?;
    if y.is_empty() || x.nrows() != y.len() {
        return Err(Error::InvalidArgument("tree needs a non-empty design matching y".into()));
    }
    let scale: f64 = y.iter().map(|v| v * v).sum();
    let grower = Grower { x, y, params, min_gain: 1e-12 * scale, rng };
    let (tree, region) = grower.grow();
    let a = RegionAssignment::from_regions(region, tree.leaf_count())?;
    Ok((tree, a))
}

/// Best-first CART on the response of `d`, splitting only the non-intercept
/// columns of `X`.
pub fn fit_tree(d: &Dataset, max_leaves: usize, min_leaf: usize) -> Result<RegressionTree> {
    Ok(grow_tree(d.x(), d.y(), TreeParams::new(max_leaves, min_leaf), None)?.0)
}

// ---------------------------------------------------------------------------
// Cross-validated leaf count
// ---------------------------------------------------------------------------

/// Out-of-fold error of every candidate leaf count.
#[derive(Debug, Clone, PartialEq)]
pub struct CvSelection {
    pub selected: usize,
    pub candidates: Vec<usize>,
    /// Mean out-of-fold SSE per candidate.
    pub mean_sse: Vec<f64>,
    /// Standard error of that mean over folds.
    pub se_sse: Vec<f64>,
    pub stratified: bool,
}

/// Per-region least-squares predictions for `test` rows from a tree grown on
/// `train` rows. Regions with fewer training rows than coefficients fall back
/// to the leaf mean.
fn region_ols_sse(d: &Dataset, train: &[usize], test: &[usize], params: TreeParams) -> Result<f64> {
    let x_tr = linalg::select_rows(d.x(), train);
    let y_tr = DVector::from_iterator(train.len(), train.iter().map(|&i| d.y()[i]));
    let (tree, a) = grow_tree(&x_tr, &y_tr, params, None)?;
    let coefs = a
        .members()
        .iter()
        .map(|rows| {
            if rows.len() < d.p() {
                return Ok(None);
            }
            let xm = linalg::select_rows(&x_tr, rows);
            let ym = DVector::from_iterator(rows.len(), rows.iter().map(|&i| y_tr[i]));
            linalg::least_squares(&xm, &ym).map(Some)
        })
        .collect::<Result<Vec<_>>>()?;
    let leaf_mean = tree.predict(d.x())?;
    let sq: Vec<f64> = test
        .iter()
        .map(|&i| {
            let m = tree.route(d.x(), i);
            let pred = match &coefs[m] {
                Some(beta) => d.x().row(i).dot(&beta.transpose()),
                None => leaf_mean[i],
            };
            (d.y()[i] - pred).powi(2)
        })
        .collect();
    Ok(linalg::pairwise_sum(&sq))
}

/// K-fold cross-validation of the leaf count.
///
/// Each candidate is scored by the out-of-fold SSE of the region-wise linear
/// fit it induces (tree grown on the training folds, one least-squares fit per
/// leaf). The selected count is the smallest candidate whose mean SSE lies
/// within one standard error of the best mean. Folds are stratified by group.
pub fn cross_validate_leaves(
    d: &Dataset,
    folds: usize,
    candidates: &[usize],
    min_leaf: usize,
    seed: u64,
) -> Result<CvSelection> {
    if folds < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {folds}")));
    }
    let mut cands = candidates.to_vec();
    cands.sort_unstable();
    cands.dedup();
    if cands.is_empty() || cands[0] < 1 {
        return Err(Error::InvalidArgument("leaf candidates must be non-empty and >= 1".into()));
    }
    let (fold_of, stratified) = kfold_assignment(d, folds, seed)?;
    let splits: Vec<(Vec<usize>, Vec<usize>)> = (0..folds)
        .map(|f| (0..d.n()).partition(|&i| fold_of[i] != f))
        .collect();
    let jobs: Vec<(usize, usize)> = (0..cands.len()).flat_map(|c| (0..folds).map(move |f| (c, f))).collect();
    let sse = jobs
        .par_iter()
        .map(|&(c, f)| region_ols_sse(d, &splits[f].0, &splits[f].1, TreeParams::new(cands[c], min_leaf)))
        .collect::<Result<Vec<f64>>>()?;
    let k = folds as f64;
    let (mut mean_sse, mut se_sse) = (Vec::new(), Vec::new());
    for c in 0..cands.len() {
        let s = &sse[c * folds..(c + 1) * folds];
        let mean = s.iter().sum::<f64>() / k;
        let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
        mean_sse.push(mean);
        se_sse.push((var / k).sqrt());
    }
    let best = (0..cands.len()).fold(0, |b, c| if mean_sse[c] < mean_sse[b] { c } else { b });
    let bound = mean_sse[best] + se_sse[best];
    let pick = (0..cands.len()).find(|&c| mean_sse[c] <= bound).unwrap_or(best);
    Ok(CvSelection { selected: cands[pick], candidates: cands, mean_sse, se_sse, stratified })
}

/// Number of leaves chosen by `folds`-fold cross-validation over `candidates`
/// (see [`cross_validate_leaves`]); a single candidate is returned as is.
pub fn select_leaves_cv(d: &Dataset, folds: usize, candidates: &[usize], seed: u64) -> Result<usize> {
    if candidates.len() == 1 && candidates[0] >= 1 {
        return Ok(candidates[0]);
    }
    Ok(cross_validate_leaves(d, folds, candidates, DEFAULT_MIN_LEAF, seed)?.selected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{simulate_gtimm, with_intercept};
    use proptest::prelude::*;

    fn dataset(features: Vec<f64>, k: usize, y: Vec<f64>) -> Dataset {
        let n = y.len();
        let groups: Vec<usize> = (0..n).map(|i| i % 2).collect();
        Dataset::from_groups(y, DMatrix::from_row_slice(n, k, &features), groups, 2).unwrap()
    }

    fn sse_of(t: &RegressionTree, d: &Dataset) -> f64 {
        let p = t.predict(d.x()).unwrap();
        (d.y() - p).norm_squared()
    }

    /// Brute force: every feature, every threshold between sorted neighbours,
    /// SSE recomputed from scratch.
    fn exhaustive_best(d: &Dataset, min_leaf: usize) -> (usize, f64, f64) {
        let mut best = (0, f64::NAN, f64::INFINITY);
        for j in 1..d.p() {
            let mut vals: Vec<f64> = d.x().column(j).iter().copied().collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            for w in vals.windows(2) {
                let t = (w[0] + w[1]) / 2.0;
                let (l, r): (Vec<f64>, Vec<f64>) = (0..d.n()).map(|i| (d.x()[(i, j)], d.y()[i])).fold(
                    (Vec::new(), Vec::new()),
                    |(mut l, mut r), (x, y)| {
                        if x <= t { l.push(y) } else { r.push(y) }
                        (l, r)
                    },
                );
                if l.len() < min_leaf || r.len() < min_leaf {
                    continue;
                }
                let sse = |v: &[f64]| {
                    let m = v.iter().sum::<f64>() / v.len() as f64;
                    v.iter().map(|y| (y - m).powi(2)).sum::<f64>()
                };
                let total = sse(&l) + sse(&r);
                if total < best.2 - 1e-9 {
                    best = (j, t, total);
                }
            }
        }
        best
    }

    #[test]
    fn step_function_matches_exhaustive_search() {
        let mut feats = Vec::new();
        let mut y = Vec::new();
        for i in 0..100 {
            let x1 = if i < 50 { -5.0 + 0.09 * i as f64 } else { 0.03 + 0.07 * (i - 50) as f64 };
            let x2 = ((i * 37) % 100) as f64 / 10.0;
            feats.extend([x1, x2]);
            y.push(if x1 < 0.0 { 0.0 } else { 10.0 });
        }
        let d = dataset(feats, 2, y);
        let t = fit_tree(&d, 2, 1).unwrap();
        assert_eq!(t.leaf_count(), 2);
        let (j, thr, _) = exhaustive_best(&d, 1);
        match &t.nodes()[0] {
            Node::Split { feature, threshold, .. } => {
                assert_eq!(*feature, 1);
                assert_eq!(j, 1);
                assert!((threshold - thr).abs() < 1e-12);
                assert!(*threshold > 0.5 * (-5.0 + 0.09 * 49.0) && *threshold < 0.03);
            }
            other => panic!("root should split, got {other:?}"),
        }
    }

    #[test]
    fn random_data_root_split_matches_exhaustive_search() {
        use rand::{Rng, SeedableRng};
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 40;
            let feats: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y: Vec<f64> = (0..n).map(|i| feats[2 * i].sin() + rng.random_range(-0.5..0.5)).collect();
            let d = dataset(feats, 2, y);
            let t = fit_tree(&d, 2, 3).unwrap();
            let (_, _, best_sse) = exhaustive_best(&d, 3);
            assert!((sse_of(&t, &d) - best_sse).abs() < 1e-9 * (1.0 + best_sse));
        }
    }

    #[test]
    fn constant_response_gives_single_leaf() {
        let d = dataset((0..60).map(|v| v as f64).collect(), 2, vec![0.1; 30]);
        let t = fit_tree(&d, 8, 1).unwrap();
        assert_eq!(t.leaf_count(), 1);
    }

    #[test]
    fn too_few_rows_gives_single_leaf() {
        let d = dataset((0..30).map(|v| v as f64).collect(), 1, (0..30).map(|v| v as f64).collect());
        assert_eq!(fit_tree(&d, 4, 16).unwrap().leaf_count(), 1);
        assert!(matches!(fit_tree(&d, 0, 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn leaves_respect_min_leaf_and_max_leaves() {
        let (d, _) = simulate_gtimm(400, 1, 2.0, 1.0).unwrap();
        for max_leaves in [1, 3, 8, 20] {
            let (t, a) = grow_tree(d.x(), d.y(), TreeParams::new(max_leaves, 10), None).unwrap();
            assert!(t.leaf_count() <= max_leaves);
            assert!(a.counts.iter().all(|&c| c >= 10));
            assert_eq!(a.counts.iter().sum::<usize>(), 400);
        }
    }

    #[test]
    fn single_leaf_routes_everything_to_region_zero() {
        let t = RegressionTree::single_leaf(1.0, 3);
        let x = with_intercept(&DMatrix::from_row_slice(3, 1, &[1.0, -4.0, 9.0]));
        let a = assign_regions(&t, &x).unwrap();
        assert_eq!(a.region, vec![0, 0, 0]);
        assert_eq!(a.counts, vec![3]);
    }

    #[test]
    fn threshold_ties_route_left() {
        let t = RegressionTree::from_nodes(vec![
            Node::Split { feature: 1, threshold: 0.5, left: 1, right: 2 },
            Node::Leaf { region: 0, mean: -1.0, count: 1 },
            Node::Leaf { region: 1, mean: 1.0, count: 1 },
        ])
        .unwrap();
        let x = with_intercept(&DMatrix::from_row_slice(3, 1, &[0.5, 0.5000001, 0.4]));
        assert_eq!(assign_regions(&t, &x).unwrap().region, vec![0, 1, 0]);
        let narrow = DMatrix::from_element(2, 1, 1.0);
        assert!(matches!(assign_regions(&t, &narrow), Err(Error::Structure(_))));
    }

    #[test]
    fn malformed_node_tables_are_rejected() {
        let bad = vec![
            Node::Split { feature: 1, threshold: 0.0, left: 1, right: 1 },
            Node::Leaf { region: 0, mean: 0.0, count: 1 },
        ];
        assert!(matches!(RegressionTree::from_nodes(bad), Err(Error::Structure(_))));
        let misnumbered = vec![
            Node::Split { feature: 1, threshold: 0.0, left: 1, right: 2 },
            Node::Leaf { region: 1, mean: 0.0, count: 1 },
            Node::Leaf { region: 0, mean: 0.0, count: 1 },
        ];
        assert!(RegressionTree::from_nodes(misnumbered).is_err());
    }

    #[test]
    fn four_leaves_recover_the_simulated_clusters() {
        let (d, truth) = simulate_gtimm(2000, 3, 2.0, 1.0).unwrap();
        let (t, a) = grow_tree(d.x(), d.y(), TreeParams::new(4, 10), None).unwrap();
        assert_eq!(t.leaf_count(), 4);
        // Majority label per leaf must be distinct and cover nearly everything.
        let mut table = [[0usize; 4]; 4];
        for i in 0..d.n() {
            table[a.region[i]][truth.region_true[i]] += 1;
        }
        let agree: usize = table.iter().map(|row| *row.iter().max().unwrap()).sum();
        assert!(agree >= 1980, "agreement {agree}");
    }

    #[test]
    fn collapse_leaf_merges_into_sibling() {
        let t = RegressionTree::from_nodes(vec![
            Node::Split { feature: 1, threshold: 0.0, left: 1, right: 2 },
            Node::Leaf { region: 0, mean: -1.0, count: 5 },
            Node::Split { feature: 1, threshold: 1.0, left: 3, right: 4 },
            Node::Leaf { region: 1, mean: 0.5, count: 5 },
            Node::Leaf { region: 2, mean: 2.0, count: 5 },
        ])
        .unwrap();
        let c = t.collapse_leaf(1).unwrap();
        assert_eq!(c.leaf_count(), 2);
        let x = with_intercept(&DMatrix::from_row_slice(3, 1, &[-1.0, 0.5, 2.0]));
        assert_eq!(assign_regions(&c, &x).unwrap().region, vec![0, 1, 1]);
        let root = t.collapse_leaf(0).unwrap();
        assert_eq!(root.leaf_count(), 2);
        assert_eq!(assign_regions(&root, &x).unwrap().region, vec![0, 0, 1]);
        assert!(RegressionTree::single_leaf(0.0, 1).collapse_leaf(0).is_err());
    }

    #[test]
    fn refresh_recomputes_leaf_means() {
        let (d, _) = simulate_gtimm(400, 2, 2.0, 1.0).unwrap();
        let t = fit_tree(&d, 4, 10).unwrap();
        let mut c = t.collapse_leaf(0).unwrap();
        c.refresh_leaves(d.x(), d.y()).unwrap();
        let a = assign_regions(&c, d.x()).unwrap();
        let pred = c.predict(d.x()).unwrap();
        for (m, rows) in a.members().iter().enumerate() {
            let mean = rows.iter().map(|&i| d.y()[i]).sum::<f64>() / rows.len() as f64;
            assert!((pred[rows[0]] - mean).abs() < 1e-12, "region {m}");
        }
    }

    #[test]
    fn singleton_candidate_is_returned() {
        let (d, _) = simulate_gtimm(200, 0, 2.0, 1.0).unwrap();
        assert_eq!(select_leaves_cv(&d, 5, &[3], 0).unwrap(), 3);
        assert!(select_leaves_cv(&d, 1, &[1, 2], 0).is_err());
        assert!(select_leaves_cv(&d, 5, &[0, 2], 0).is_err());
    }

    #[test]
    fn cv_picks_four_leaves_on_simulated_data() {
        let (d, _) = simulate_gtimm(2000, 4, 2.0, 1.0).unwrap();
        let sel = cross_validate_leaves(&d, 5, &(1..=8).collect::<Vec<_>>(), 10, 4).unwrap();
        assert!(sel.stratified);
        assert_eq!(sel.selected, 4, "{sel:?}");
    }

    #[test]
    fn cv_prefers_one_leaf_on_noise() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut ones = 0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 200;
            let feats: Vec<f64> = (0..2 * n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let y: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let groups = (0..n).map(|i| i % 10).collect();
            let d = Dataset::from_groups(y, DMatrix::from_row_slice(n, 2, &feats), groups, 10).unwrap();
            ones += usize::from(select_leaves_cv(&d, 5, &[1, 2, 4], seed).unwrap() == 1);
        }
        assert!(ones > 10, "selected 1 leaf in {ones}/20 seeds");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn recorded_assignment_equals_rerouting(seed in 0u64..500, leaves in 1usize..12) {
            let (d, _) = simulate_gtimm(200, seed, 2.0, 1.0).unwrap();
            let (t, recorded) = grow_tree(d.x(), d.y(), TreeParams::new(leaves, 5), None).unwrap();
            prop_assert_eq!(assign_regions(&t, d.x()).unwrap(), recorded);
        }

        #[test]
        fn training_sse_is_non_increasing_in_leaves(seed in 0u64..500) {
            let (d, _) = simulate_gtimm(200, seed, 2.0, 1.0).unwrap();
            let mut prev = f64::INFINITY;
            for leaves in 1..10 {
                let sse = sse_of(&fit_tree(&d, leaves, 5).unwrap(), &d);
                prop_assert!(sse <= prev * (1.0 + 1e-12));
                prev = sse;
            }
        }

        #[test]
        fn routing_is_total(seed in 0u64..500, x1 in -1e6f64..1e6, x2 in -1e6f64..1e6) {
            let (d, _) = simulate_gtimm(200, seed, 2.0, 1.0).unwrap();
            let t = fit_tree(&d, 8, 5).unwrap();
            let x = with_intercept(&DMatrix::from_row_slice(1, 2, &[x1, x2]));
            let a = assign_regions(&t, &x).unwrap();
            prop_assert!(a.region[0] < t.leaf_count());
        }
    }
}
