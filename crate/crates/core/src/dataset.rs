//! Clustered regression data: response, fixed-effect design, random-effect
//! design and optional group labels.
//!
//! The fixed-effect design always carries an explicit leading intercept column
//! so that region-specific intercepts live inside each region's coefficient
//! vector. Grouped data are one-hot expanded into the random-effect design.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;

pub const INTERCEPT: &str = "(Intercept)";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DVector<f64>,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    groups: Option<Vec<usize>>,
    y_name: String,
    x_names: Vec<String>,
    z_names: Vec<String>,
    group_name: Option<String>,
}

impl Dataset {
    /// Builds a dataset from explicit designs. `x` must already contain the
    /// intercept column; `groups`, when given, must agree with a one-hot `z`.
    pub fn new(
        y: DVector<f64>,
        x: DMatrix<f64>,
        z: DMatrix<f64>,
        groups: Option<Vec<usize>>,
    ) -> Result<Self> {
        let x_names = std::iter::once(INTERCEPT.to_string())
            .chain((1..x.ncols()).map(|j| format!("x{j}")))
            .collect();
        let (z_names, group_name) = match &groups {
            Some(_) => ((1..=z.ncols()).map(|g| g.to_string()).collect(), Some("group".to_string())),
            None => ((1..=z.ncols()).map(|j| format!("z{j}")).collect(), None),
        };
        let d = Self {
            y,
            x,
            z,
            groups,
            y_name: "y".to_string(),
            x_names,
            z_names,
            group_name,
        };
        d.validate()?;
        Ok(d)
    }

    /// Builds a grouped dataset from the non-intercept predictors and 0-based
    /// group indices in `0..n_groups`.
    pub fn from_groups(
        y: Vec<f64>,
        features: DMatrix<f64>,
        groups: Vec<usize>,
        n_groups: usize,
    ) -> Result<Self> {
        let n = y.len();
        if features.nrows() != n || groups.len() != n {
            return Err(Error::InvalidArgument(format!(
                "length mismatch: y has {n} rows, features {}, groups {}",
                features.nrows(),
                groups.len()
            )));
        }
        if let Some(&g) = groups.iter().find(|&&g| g >= n_groups) {
            return Err(Error::InvalidArgument(format!("group index {g} >= n_groups {n_groups}")));
        }
        let x = with_intercept(&features);
        let z = one_hot(&groups, n_groups);
        Self::new(DVector::from_vec(y), x, z, Some(groups))
    }

    /// Replaces column names. `x_names` excludes the intercept; `z_names` are
    /// the group labels (grouped data) or random-effect column names.
    pub fn with_names(
        mut self,
        y_name: &str,
        x_names: &[String],
        group_name: Option<&str>,
        z_names: &[String],
    ) -> Result<Self> {
        if x_names.len() + 1 != self.p() || z_names.len() != self.q() {
            return Err(Error::InvalidArgument("name count does not match design dimensions".into()));
        }
        self.y_name = y_name.to_string();
        self.x_names = std::iter::once(INTERCEPT.to_string()).chain(x_names.iter().cloned()).collect();
        self.z_names = z_names.to_vec();
        if self.groups.is_some() {
            self.group_name = Some(group_name.unwrap_or("group").to_string());
        }
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if n == 0 {
            return Err(Error::Data("dataset has no observations".into()));
        }
        if self.x.nrows() != n || self.z.nrows() != n {
            return Err(Error::InvalidArgument(format!(
                "row mismatch: y {n}, X {}, Z {}",
                self.x.nrows(),
                self.z.nrows()
            )));
        }
        if self.x.ncols() == 0 {
            return Err(Error::InvalidArgument("X needs at least the intercept column".into()));
        }
        if self.z.ncols() == 0 {
            return Err(Error::InvalidArgument("Z needs at least one column".into()));
        }
        if self.y.iter().chain(self.x.iter()).chain(self.z.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite entry in y, X or Z".into()));
        }
        if self.x.column(0).iter().any(|&v| v != 1.0) {
            return Err(Error::InvalidArgument("column 0 of X must be the intercept (all ones)".into()));
        }
        if let Some(groups) = &self.groups {
            if groups.len() != n {
                return Err(Error::InvalidArgument("group label length mismatch".into()));
            }
            for (i, &g) in groups.iter().enumerate() {
                let row = self.z.row(i);
                let ok = g < self.z.ncols()
                    && row.iter().enumerate().all(|(j, &v)| v == if j == g { 1.0 } else { 0.0 });
                if !ok {
                    return Err(Error::InvalidArgument(format!("row {i} of Z is not one-hot on group {g}")));
                }
            }
        }
        Ok(())
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }
    /// 0-based group index per observation, when the data are grouped.
    pub fn groups(&self) -> Option<&[usize]> {
        self.groups.as_deref()
    }
    pub fn n(&self) -> usize {
        self.y.len()
    }
    pub fn p(&self) -> usize {
        self.x.ncols()
    }
    pub fn q(&self) -> usize {
        self.z.ncols()
    }
    pub fn y_name(&self) -> &str {
        &self.y_name
    }
    /// Names of the X columns, intercept first.
    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }
    pub fn z_names(&self) -> &[String] {
        &self.z_names
    }
    pub fn group_name(&self) -> Option<&str> {
        self.group_name.as_deref()
    }

    /// Number of observations loading on each random-effect column.
    pub fn group_sizes(&self) -> Vec<usize> {
        (0..self.q())
            .map(|j| self.z.column(j).iter().filter(|&&v| v != 0.0).count())
            .collect()
    }

    /// The rows `rows` (duplicates allowed), keeping every Z column and name.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            y: DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i])),
            x: crate::linalg::select_rows(&self.x, rows),
            z: crate::linalg::select_rows(&self.z, rows),
            groups: self.groups.as_ref().map(|g| rows.iter().map(|&i| g[i]).collect()),
            y_name: self.y_name.clone(),
            x_names: self.x_names.clone(),
            z_names: self.z_names.clone(),
            group_name: self.group_name.clone(),
        }
    }

    /// Same designs with a different response vector.
    pub fn with_response(&self, y: DVector<f64>) -> Result<Dataset> {
        let mut d = self.clone();
        d.y = y;
        d.validate()?;
        Ok(d)
    }

    /// The column roles that re-read this dataset from its own CSV output.
    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            y_col: self.y_name.clone(),
            x_cols: self.x_names[1..].to_vec(),
            random: match &self.group_name {
                Some(g) => RandomSpec::Group(g.clone()),
                None => RandomSpec::Columns(self.z_names.clone()),
            },
        }
    }
}

/// Column names and group levels a model needs to read new data the way its
/// training data were read.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignInfo {
    pub y_name: String,
    /// Intercept first.
    pub x_names: Vec<String>,
    /// Name of the group column, or `None` for explicit Z columns.
    pub group_name: Option<String>,
    /// Group levels (grouped data) or Z column names.
    pub z_names: Vec<String>,
}

impl DesignInfo {
    pub fn of(d: &Dataset) -> Self {
        Self {
            y_name: d.y_name.clone(),
            x_names: d.x_names.clone(),
            group_name: d.group_name.clone(),
            z_names: d.z_names.clone(),
        }
    }

    pub fn p(&self) -> usize {
        self.x_names.len()
    }

    pub fn q(&self) -> usize {
        self.z_names.len()
    }
}

/// Prepends a column of ones.
pub fn with_intercept(features: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = features.shape();
    DMatrix::from_fn(n, k + 1, |i, j| if j == 0 { 1.0 } else { features[(i, j - 1)] })
}

pub fn one_hot(groups: &[usize], n_groups: usize) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(groups.len(), n_groups);
    for (i, &g) in groups.iter().enumerate() {
        z[(i, g)] = 1.0;
    }
    z
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Column roles for CSV ingestion.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub y_col: String,
    pub x_cols: Vec<String>,
    pub random: RandomSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RandomSpec {
    /// A categorical column, one-hot expanded into Z.
    Group(String),
    /// Numeric columns copied into Z as-is.
    Columns(Vec<String>),
}

/// A parsed CSV file: header plus raw string cells.
#[derive(Debug, Clone)]
pub struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            rows.push(rec?.iter().map(|c| c.trim().to_string()).collect());
        }
        Ok(Self { headers, rows })
    }

    pub fn open(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
        Self::read(f)
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn headers(&self) -> &[String] {
        &self.headers
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.headers.iter().any(|h| h == name)
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
    }

    pub fn text(&self, name: &str) -> Result<Vec<String>> {
        let j = self.column_index(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| match r.get(j) {
                Some(c) if !c.is_empty() => Ok(c.clone()),
                _ => Err(Error::Parse { row: i + 1, column: name.to_string(), message: "missing value".into() }),
            })
            .collect()
    }

    pub fn numeric(&self, name: &str) -> Result<Vec<f64>> {
        let cells = self.text(name)?;
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let err = |message: &str| Error::Parse { row: i + 1, column: name.to_string(), message: message.into() };
                let v: f64 = c.parse().map_err(|_| err(&format!("'{c}' is not a number")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(err(&format!("non-finite value '{c}'")))
                }
            })
            .collect()
    }
}

/// Densely re-indexes labels in order of first appearance.
pub fn index_labels(labels: &[String]) -> (Vec<usize>, Vec<String>) {
    let mut levels: Vec<String> = Vec::new();
    let mut lookup: HashMap<&str, usize> = HashMap::new();
    let idx = labels
        .iter()
        .map(|l| {
            *lookup.entry(l.as_str()).or_insert_with(|| {
                levels.push(l.clone());
                levels.len() - 1
            })
        })
        .collect();
    (idx, levels)
}

fn numeric_matrix(table: &Table, cols: &[String]) -> Result<DMatrix<f64>> {
    let columns = cols.iter().map(|c| table.numeric(c)).collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_fn(table.n_rows(), cols.len(), |i, j| columns[j][i]))
}

pub fn dataset_from_table(table: &Table, schema: &CsvSchema) -> Result<Dataset> {
    if schema.x_cols.is_empty() {
        return Err(Error::Schema("at least one predictor column is required".into()));
    }
    // Resolve every column before parsing so schema errors win over parse errors.
    table.column_index(&schema.y_col)?;
    for c in &schema.x_cols {
        table.column_index(c)?;
    }
    match &schema.random {
        RandomSpec::Group(g) => {
            table.column_index(g)?;
        }
        RandomSpec::Columns(cs) => {
            if cs.is_empty() {
                return Err(Error::Schema("at least one random-effect column is required".into()));
            }
            for c in cs {
                table.column_index(c)?;
            }
        }
    }
    if table.n_rows() == 0 {
        return Err(Error::Data("file has no data rows".into()));
    }
    let y = DVector::from_vec(table.numeric(&schema.y_col)?);
    let x = with_intercept(&numeric_matrix(table, &schema.x_cols)?);
    let d = match &schema.random {
        RandomSpec::Group(g) => {
            let (idx, levels) = index_labels(&table.text(g)?);
            if levels.len() < 2 {
                return Err(Error::Data(format!("group column '{g}' has fewer than 2 distinct groups")));
            }
            let z = one_hot(&idx, levels.len());
            Dataset::new(y, x, z, Some(idx))?.with_names(&schema.y_col, &schema.x_cols, Some(g), &levels)?
        }
        RandomSpec::Columns(cs) => {
            let z = numeric_matrix(table, cs)?;
            Dataset::new(y, x, z, None)?.with_names(&schema.y_col, &schema.x_cols, None, cs)?
        }
    };
    Ok(d)
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    dataset_from_table(&Table::read(reader)?, schema)
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    dataset_from_table(&Table::open(path)?, schema)
}

/// Writes the dataset so that [`load_csv`] with [`Dataset::schema`] rebuilds
/// it exactly (floats use shortest round-trip formatting).
pub fn write_csv_to<W: Write>(d: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![d.y_name.clone()];
    header.extend(d.x_names[1..].iter().cloned());
    match (&d.group_name, &d.groups) {
        (Some(g), Some(_)) => header.push(g.clone()),
        _ => header.extend(d.z_names.iter().cloned()),
    }
    w.write_record(&header)?;
    for i in 0..d.n() {
        let mut rec = vec![d.y[i].to_string()];
        rec.extend((1..d.p()).map(|j| d.x[(i, j)].to_string()));
        match &d.groups {
            Some(g) => rec.push(d.z_names[g[i]].clone()),
            None => rec.extend((0..d.q()).map(|j| d.z[(i, j)].to_string())),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv(d: &Dataset, path: &Path) -> Result<()> {
    write_csv_to(d, std::fs::File::create(path)?)
}

// ---------------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnScale {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

impl ColumnScale {
    fn fit(name: &str, values: impl Iterator<Item = f64> + Clone) -> Result<Self> {
        let n = values.clone().count();
        if n < 2 {
            return Err(Error::ZeroVariance(name.to_string()));
        }
        let mean = values.clone().sum::<f64>() / n as f64;
        let ss: f64 = values.map(|v| (v - mean).powi(2)).sum();
        let sd = (ss / (n - 1) as f64).sqrt();
        if !(sd > 0.0) || !sd.is_finite() {
            return Err(Error::ZeroVariance(name.to_string()));
        }
        Ok(Self { name: name.to_string(), mean, sd })
    }

    pub fn forward(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }

    pub fn inverse(&self, v: f64) -> f64 {
        v * self.sd + self.mean
    }
}

/// Per-column centring and scaling of the non-intercept X columns and y.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizationParams {
    /// One entry per non-intercept X column, in X order (X column `j + 1`).
    pub x: Vec<ColumnScale>,
    pub y: ColumnScale,
}

impl StandardizationParams {
    /// Applies the stored transform to a design whose column 0 is the intercept.
    pub fn transform_x(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.x.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "design has {} columns, standardization expects {}",
                x.ncols(),
                self.x.len() + 1
            )));
        }
        let mut out = x.clone();
        for (k, s) in self.x.iter().enumerate() {
            out.column_mut(k + 1).apply(|v| *v = s.forward(*v));
        }
        Ok(out)
    }

    /// Applies the stored transform to a new dataset (e.g. a test split).
    pub fn apply(&self, d: &Dataset) -> Result<Dataset> {
        let mut out = d.clone();
        out.x = self.transform_x(&d.x)?;
        out.y.apply(|v| *v = self.y.forward(*v));
        Ok(out)
    }

    /// Maps standardized responses back to the original scale.
    pub fn restore_y(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| self.y.inverse(v)).collect()
    }
}

/// Standardizes y and every non-intercept X column to sample mean 0 and
/// sample standard deviation 1 (denominator `N - 1`).
pub fn standardize(d: &Dataset) -> Result<(Dataset, StandardizationParams)> {
    let x = (1..d.p())
        .map(|j| ColumnScale::fit(&d.x_names[j], d.x.column(j).iter().copied()))
        .collect::<Result<Vec<_>>>()?;
    let y = ColumnScale::fit(&d.y_name, d.y.iter().copied())?;
    let params = StandardizationParams { x, y };
    Ok((params.apply(d)?, params))
}

pub fn destandardize(d: &Dataset, params: &StandardizationParams) -> Result<Dataset> {
    if d.p() != params.x.len() + 1 {
        return Err(Error::InvalidArgument("standardization does not match dataset".into()));
    }
    let mut out = d.clone();
    for (k, s) in params.x.iter().enumerate() {
        out.x.column_mut(k + 1).apply(|v| *v = s.inverse(*v));
    }
    out.y.apply(|v| *v = params.y.inverse(*v));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

/// Region-wise (intercept, x1 slope, x2 slope) of the simulation study.
pub const SIM_COEFFICIENTS: [[f64; 3]; 4] = [
    [2.0, 1.5, 0.5],
    [-1.0, 2.5, -0.5],
    [1.0, -2.0, 1.0],
    [-2.0, -1.5, -1.0],
];

/// Cluster centres of the four regions (quadrants I, II, III, IV).
pub const SIM_CENTERS: [[f64; 2]; 4] = [[5.0, 5.0], [-5.0, 5.0], [-5.0, -5.0], [5.0, -5.0]];

/// Mean response of region `region` (0-based) at `(x1, x2)`.
pub fn regional_mean(x1: f64, x2: f64, region: usize) -> Result<f64> {
    let c = SIM_COEFFICIENTS
        .get(region)
        .ok_or_else(|| Error::InvalidArgument(format!("region {region} out of range 0..4")))?;
    Ok(c[0] + c[1] * x1 + c[2] * x2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_total: usize,
    pub n_groups: usize,
    /// Variance of the group random effects.
    pub sigma_b2: f64,
    /// Variance of the observation noise.
    pub sigma_eps2: f64,
    pub centers: [[f64; 2]; 4],
    pub cluster_sd: f64,
    pub coefficients: [[f64; 3]; 4],
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_total: 2000,
            n_groups: 10,
            sigma_b2: 2.0,
            sigma_eps2: 1.0,
            centers: SIM_CENTERS,
            cluster_sd: 1.0,
            coefficients: SIM_COEFFICIENTS,
        }
    }
}

impl SimConfig {
    /// Every region shares region 1's coefficients.
    pub fn common_coefficients(mut self) -> Self {
        self.coefficients = [SIM_COEFFICIENTS[0]; 4];
        self
    }

    fn check(&self, n: usize) -> Result<()> {
        if n == 0 || n % 4 != 0 {
            return Err(Error::InvalidArgument(format!("n_total must be a positive multiple of 4, got {n}")));
        }
        if self.n_groups == 0 {
            return Err(Error::InvalidArgument("n_groups must be at least 1".into()));
        }
        if !(self.sigma_b2 >= 0.0) || !(self.sigma_eps2 >= 0.0) || !(self.cluster_sd >= 0.0) {
            return Err(Error::InvalidArgument("variances must be non-negative".into()));
        }
        Ok(())
    }
}

/// Ground truth behind a simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    /// `p x M`; column `m` holds region `m`'s coefficients.
    pub beta_star_true: DMatrix<f64>,
    pub b_true: DVector<f64>,
    /// 0-based generating cluster of each observation.
    pub region_true: Vec<usize>,
    pub sigma_b2: f64,
    pub sigma_eps2: f64,
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn draw<R: Rng>(cfg: &SimConfig, b: &DVector<f64>, n: usize, rng: &mut R) -> Result<(Dataset, Vec<usize>)> {
    let per = n / 4;
    let mut features = DMatrix::zeros(n, 2);
    let mut region = Vec::with_capacity(n);
    for m in 0..4 {
        for k in 0..per {
            let i = m * per + k;
            features[(i, 0)] = cfg.centers[m][0] + cfg.cluster_sd * normal(rng);
            features[(i, 1)] = cfg.centers[m][1] + cfg.cluster_sd * normal(rng);
            region.push(m);
        }
    }
    let groups: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.n_groups)).collect();
    let noise_sd = cfg.sigma_eps2.sqrt();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let c = cfg.coefficients[region[i]];
            let mean = c[0] + c[1] * features[(i, 0)] + c[2] * features[(i, 1)];
            mean + b[groups[i]] + noise_sd * normal(rng)
        })
        .collect();
    let names = ["x1".to_string(), "x2".to_string()];
    let levels: Vec<String> = (1..=cfg.n_groups).map(|g| g.to_string()).collect();
    let d = Dataset::from_groups(y, features, groups, cfg.n_groups)?.with_names("y", &names, Some("group"), &levels)?;
    Ok((d, region))
}

fn truth(cfg: &SimConfig, b: DVector<f64>, region_true: Vec<usize>) -> SimTruth {
    SimTruth {
        beta_star_true: DMatrix::from_fn(3, 4, |j, m| cfg.coefficients[m][j]),
        b_true: b,
        region_true,
        sigma_b2: cfg.sigma_b2,
        sigma_eps2: cfg.sigma_eps2,
    }
}

/// Draws `cfg.n_total` observations, a quarter from each cluster, with rows
/// ordered by generating cluster.
pub fn simulate(cfg: &SimConfig, seed: u64) -> Result<(Dataset, SimTruth)> {
    cfg.check(cfg.n_total)?;
    let mut rng = rng::stream(seed, 0);
    let b_sd = cfg.sigma_b2.sqrt();
    let b = DVector::from_fn(cfg.n_groups, |_, _| b_sd * normal(&mut rng));
    let (d, region) = draw(cfg, &b, cfg.n_total, &mut rng)?;
    Ok((d, truth(cfg, b, region)))
}

/// A training set of `n_train` and an independent test set of `n_test` rows
/// that share the same random-effect draws.
pub fn simulate_split(
    cfg: &SimConfig,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Dataset, Dataset, SimTruth)> {
    cfg.check(n_train)?;
    cfg.check(n_test)?;
    let mut rng = rng::stream(seed, 0);
    let b_sd = cfg.sigma_b2.sqrt();
    let b = DVector::from_fn(cfg.n_groups, |_, _| b_sd * normal(&mut rng));
    let (train, region) = draw(cfg, &b, n_train, &mut rng)?;
    let (test, _) = draw(cfg, &b, n_test, &mut rng)?;
    Ok((train, test, truth(cfg, b, region)))
}

/// The four-cluster simulation with the study's coefficients and 10 groups.
pub fn simulate_gtimm(n_total: usize, seed: u64, sigma_b2: f64, sigma_eps2: f64) -> Result<(Dataset, SimTruth)> {
    let cfg = SimConfig { n_total, sigma_b2, sigma_eps2, ..SimConfig::default() };
    simulate(&cfg, seed)
}

/// Writes the simulation CSV: `y,x1,x2,group,region_true` (1-based labels).
pub fn write_sim_csv<W: Write>(d: &Dataset, truth: &SimTruth, writer: W) -> Result<()> {
    let groups = d.groups().ok_or_else(|| Error::InvalidArgument("simulated data must be grouped".into()))?;
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["y", "x1", "x2", "group", "region_true"])?;
    for i in 0..d.n() {
        w.write_record([
            d.y()[i].to_string(),
            d.x()[(i, 1)].to_string(),
            d.x()[(i, 2)].to_string(),
            d.z_names()[groups[i]].clone(),
            (truth.region_true[i] + 1).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format truth sidecar: `parameter,region,index,value`.
pub fn write_truth_csv<W: Write>(truth: &SimTruth, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["parameter", "region", "index", "value"])?;
    for m in 0..truth.beta_star_true.ncols() {
        for j in 0..truth.beta_star_true.nrows() {
            w.write_record(["beta", &(m + 1).to_string(), &j.to_string(), &truth.beta_star_true[(j, m)].to_string()])?;
        }
    }
    for (g, b) in truth.b_true.iter().enumerate() {
        w.write_record(["b", "", &(g + 1).to_string(), &b.to_string()])?;
    }
    w.write_record(["sigma_b2", "", "", &truth.sigma_b2.to_string()])?;
    w.write_record(["sigma_eps2", "", "", &truth.sigma_eps2.to_string()])?;
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Splits and folds
// ---------------------------------------------------------------------------

/// Train/test split that keeps every group represented in the training rows.
/// Within each group `floor(train_fraction * n_g)` rows (at least one) train.
pub fn stratified_split(d: &Dataset, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("train_fraction must lie in (0, 1), got {train_fraction}")));
    }
    let mut rng = rng::stream(seed, 1);
    let strata: Vec<Vec<usize>> = match d.groups() {
        Some(g) => {
            let mut s = vec![Vec::new(); d.q()];
            for (i, &gi) in g.iter().enumerate() {
                s[gi].push(i);
            }
            s
        }
        None => vec![(0..d.n()).collect()],
    };
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut rows in strata.into_iter().filter(|s| !s.is_empty()) {
        rows.shuffle(&mut rng);
        let k = ((train_fraction * rows.len() as f64).floor() as usize).max(1);
        train.extend_from_slice(&rows[..k]);
        test.extend_from_slice(&rows[k..]);
    }
    if d.groups().is_some() {
        let sizes = d.group_sizes();
        let mut seen = vec![false; d.q()];
        for &i in &train {
            seen[d.groups().unwrap()[i]] = true;
        }
        if let Some(g) = (0..d.q()).find(|&g| sizes[g] > 0 && !seen[g]) {
            return Err(Error::Stratification(format!("group '{}' absent from training split", d.z_names()[g])));
        }
    }
    if test.is_empty() {
        return Err(Error::Stratification("test split is empty".into()));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Fold id in `0..k` for every row. Grouped data are stratified so every
/// non-empty group lands in every fold; when some group has fewer than `k`
/// members the assignment falls back to plain shuffled folds and the second
/// return value is `false`.
pub fn kfold_assignment(d: &Dataset, k: usize, seed: u64) -> Result<(Vec<usize>, bool)> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    if d.n() < k {
        return Err(Error::InvalidArgument(format!("{} rows cannot fill {k} folds", d.n())));
    }
    let mut rng = rng::stream(seed, 2);
    let mut folds = vec![0usize; d.n()];
    if let Some(groups) = d.groups() {
        let sizes = d.group_sizes();
        if sizes.iter().all(|&s| s == 0 || s >= k) {
            let mut offset = 0;
            for g in 0..d.q() {
                let mut rows: Vec<usize> = (0..d.n()).filter(|&i| groups[i] == g).collect();
                rows.shuffle(&mut rng);
                for (j, &i) in rows.iter().enumerate() {
                    folds[i] = (offset + j) % k;
                }
                offset += rows.len();
            }
            return Ok((folds, true));
        }
        log::warn!("a group has fewer than {k} members; using unstratified folds");
    }
    let mut rows: Vec<usize> = (0..d.n()).collect();
    rows.shuffle(&mut rng);
    for (j, &i) in rows.iter().enumerate() {
        folds[i] = j % k;
    }
    Ok((folds, d.groups().is_none()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const THREE_ROWS: &str = "y,x1,group\n1.5,0.25,A\n-2,1,B\n3,-0.5,A\n";

    fn grouped_schema() -> CsvSchema {
        CsvSchema { y_col: "y".into(), x_cols: vec!["x1".into()], random: RandomSpec::Group("group".into()) }
    }

    #[test]
    fn loads_grouped_csv() {
        let d = read_csv(THREE_ROWS.as_bytes(), &grouped_schema()).unwrap();
        assert_eq!((d.n(), d.p(), d.q()), (3, 2, 2));
        assert_eq!(d.groups().unwrap(), &[0, 1, 0]);
        assert_eq!(d.z_names(), &["A".to_string(), "B".to_string()]);
        for i in 0..3 {
            assert_eq!(d.z().row(i).sum(), 1.0);
            assert_eq!(d.x()[(i, 0)], 1.0);
        }
        assert_eq!(d.x()[(2, 1)], -0.5);
    }

    #[test]
    fn nan_response_is_a_parse_error_naming_the_row() {
        let text = "y,x1,group\n1,0,A\nNaN,1,B\n";
        match read_csv(text.as_bytes(), &grouped_schema()) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "y");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_and_non_numeric_cells() {
        let missing = "y,x1,group\n1,,A\n2,1,B\n";
        assert!(matches!(read_csv(missing.as_bytes(), &grouped_schema()), Err(Error::Parse { row: 1, .. })));
        let text = "y,x1,group\n1,abc,A\n2,1,B\n";
        assert!(matches!(read_csv(text.as_bytes(), &grouped_schema()), Err(Error::Parse { row: 1, .. })));
    }

    #[test]
    fn missing_column_is_a_schema_error() {
        let mut s = grouped_schema();
        s.x_cols.push("x9".into());
        assert!(matches!(read_csv(THREE_ROWS.as_bytes(), &s), Err(Error::Schema(_))));
    }

    #[test]
    fn single_group_is_a_data_error() {
        let text = "y,x1,group\n1,0,A\n2,1,A\n";
        assert!(matches!(read_csv(text.as_bytes(), &grouped_schema()), Err(Error::Data(_))));
    }

    #[test]
    fn explicit_z_columns() {
        let text = "y,x1,z1,z2\n1,0,1,0.5\n2,1,0,2\n";
        let schema = CsvSchema {
            y_col: "y".into(),
            x_cols: vec!["x1".into()],
            random: RandomSpec::Columns(vec!["z1".into(), "z2".into()]),
        };
        let d = read_csv(text.as_bytes(), &schema).unwrap();
        assert!(d.groups().is_none());
        assert_eq!(d.z()[(1, 1)], 2.0);
    }

    #[test]
    fn standardize_hand_example() {
        let d = Dataset::from_groups(vec![1.0, 2.0, 3.0], DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]), vec![0, 1, 0], 2)
            .unwrap();
        let (s, params) = standardize(&d).unwrap();
        for (got, want) in s.x().column(1).iter().zip([-1.0, 0.0, 1.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert_eq!(params.x[0].sd, 1.0);
        assert_eq!(s.z(), d.z());
        assert!(s.x().column(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn standardize_is_idempotent() {
        let (d, _) = simulate_gtimm(400, 3, 2.0, 1.0).unwrap();
        let (once, _) = standardize(&d).unwrap();
        let (twice, _) = standardize(&once).unwrap();
        for (a, b) in once.x().iter().zip(twice.x().iter()).chain(once.y().iter().zip(twice.y().iter())) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_variance_column_is_named() {
        let d = Dataset::from_groups(vec![1.0, 2.0, 3.0], DMatrix::from_column_slice(3, 1, &[4.0, 4.0, 4.0]), vec![0, 1, 0], 2)
            .unwrap()
            .with_names("y", &["flat".to_string()], Some("g"), &["a".to_string(), "b".to_string()])
            .unwrap();
        match standardize(&d) {
            Err(Error::ZeroVariance(c)) => assert_eq!(c, "flat"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn regional_mean_values() {
        assert_eq!(regional_mean(0.0, 0.0, 0).unwrap(), 2.0);
        assert_eq!(regional_mean(1.0, 1.0, 2).unwrap(), 0.0);
        assert_eq!(regional_mean(0.0, 0.0, 3).unwrap(), -2.0);
        assert!(matches!(regional_mean(0.0, 0.0, 4), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn simulation_counts_and_shape() {
        let (d, t) = simulate_gtimm(2000, 11, 2.0, 1.0).unwrap();
        assert_eq!((d.n(), d.p(), d.q()), (2000, 3, 10));
        let mut counts = [0; 4];
        for &r in &t.region_true {
            counts[r] += 1;
        }
        assert_eq!(counts, [500; 4]);
        assert!(matches!(simulate_gtimm(2002, 1, 2.0, 1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn noiseless_simulation_matches_regional_mean() {
        let (d, t) = simulate_gtimm(400, 5, 0.0, 0.0).unwrap();
        for i in 0..d.n() {
            let want = regional_mean(d.x()[(i, 1)], d.x()[(i, 2)], t.region_true[i]).unwrap();
            assert!((d.y()[i] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let (a, _) = simulate_gtimm(400, 9, 2.0, 1.0).unwrap();
        let (b, _) = simulate_gtimm(400, 9, 2.0, 1.0).unwrap();
        assert!(a.y().iter().zip(b.y().iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
        assert_eq!(a, b);
    }

    #[test]
    fn cluster_means_are_near_centres() {
        for seed in 0..5 {
            let (d, t) = simulate_gtimm(2000, seed, 2.0, 1.0).unwrap();
            for m in 0..4 {
                let rows: Vec<usize> = (0..d.n()).filter(|&i| t.region_true[i] == m).collect();
                for k in 0..2 {
                    let mean = rows.iter().map(|&i| d.x()[(i, k + 1)]).sum::<f64>() / rows.len() as f64;
                    assert!((mean - SIM_CENTERS[m][k]).abs() < 0.2);
                }
            }
        }
    }

    #[test]
    fn split_keeps_every_group_in_training() {
        let (d, _) = simulate_gtimm(2000, 2, 2.0, 1.0).unwrap();
        let (train, test) = stratified_split(&d, 0.999, 4).unwrap();
        assert_eq!(train.len() + test.len(), 2000);
        assert!(!test.is_empty());
        let g = d.groups().unwrap();
        for grp in 0..10 {
            assert!(train.iter().any(|&i| g[i] == grp));
        }
    }

    #[test]
    fn stratified_folds_cover_every_group() {
        let (d, _) = simulate_gtimm(400, 2, 2.0, 1.0).unwrap();
        let (folds, stratified) = kfold_assignment(&d, 5, 1).unwrap();
        assert!(stratified);
        let g = d.groups().unwrap();
        for f in 0..5 {
            for grp in 0..10 {
                assert!((0..d.n()).any(|i| folds[i] == f && g[i] == grp));
            }
        }
    }

    #[test]
    fn sparse_group_falls_back_to_unstratified_folds() {
        let d = Dataset::from_groups(
            (0..12).map(|v| v as f64).collect(),
            DMatrix::from_fn(12, 1, |i, _| i as f64),
            (0..12).map(|i| usize::from(i == 0)).collect(),
            2,
        )
        .unwrap();
        let (folds, stratified) = kfold_assignment(&d, 3, 0).unwrap();
        assert!(!stratified);
        assert_eq!(folds.iter().filter(|&&f| f == 0).count(), 4);
    }

    fn small_table() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<usize>)> {
        (2usize..12).prop_flat_map(|n| {
            (
                proptest::collection::vec(-1e6f64..1e6, n),
                proptest::collection::vec(prop_oneof![-1e3f64..1e3, Just(0.0), Just(-0.0), 1e-300f64..1e-290], n),
                proptest::collection::vec(0usize..3, n),
            )
        })
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_bitwise((y, x, g) in small_table()) {
            prop_assume!(g.iter().any(|&v| v != g[0]));
            let n = y.len();
            let labels: Vec<String> = g.iter().map(|v| format!("g{v}")).collect();
            let (idx, levels) = index_labels(&labels);
            let d = Dataset::from_groups(y, DMatrix::from_vec(n, 1, x), idx, levels.len())
                .unwrap()
                .with_names("resp", &["feat".to_string()], Some("cluster"), &levels)
                .unwrap();
            let mut buf = Vec::new();
            write_csv_to(&d, &mut buf).unwrap();
            let back = read_csv(buf.as_slice(), &d.schema()).unwrap();
            prop_assert_eq!(&back, &d);
            for (a, b) in back.x().iter().chain(back.y().iter()).zip(d.x().iter().chain(d.y().iter())) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn destandardize_inverts_standardize(
            seed in 0u64..1000,
            shift in -100.0f64..100.0,
            scale in 0.01f64..100.0,
        ) {
            let (d, _) = simulate_gtimm(40, seed, 2.0, 1.0).unwrap();
            let y = d.y().map(|v| v * scale + shift);
            let d = d.with_response(y).unwrap();
            let (s, params) = standardize(&d).unwrap();
            for j in 1..s.p() {
                let col = s.x().column(j);
                let mean = col.sum() / col.len() as f64;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
                prop_assert!(mean.abs() < 1e-12 && (var.sqrt() - 1.0).abs() < 1e-12);
            }
            let back = destandardize(&s, &params).unwrap();
            for (a, b) in back.x().iter().chain(back.y().iter()).zip(d.x().iter().chain(d.y().iter())) {
                prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
        }
    }
}
