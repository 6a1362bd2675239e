//! Command-line front end.
//!
//! Every subcommand reads CSV/text inputs, writes CSV/text outputs into
//! `--out`, and draws all randomness from `--seed`. A TOML file given with
//! `--config` supplies defaults: top-level keys set global flags and a table
//! named after the subcommand sets its flags (`x_cols = ["x1", "x2"]` becomes
//! `--x-cols x1,x2`). Flags given on the command line win.

use std::ffi::OsString;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;

use crate::dataset::{
    load_csv, simulate, standardize, with_intercept, write_sim_csv, write_truth_csv, CsvSchema,
    Dataset, DesignInfo, RandomSpec, SimConfig, Table,
};
use crate::error::{Error, Result};
use crate::eval::{benchmark, best_relabelling, crosstab_regions, gap_experiment_with, GapOptions};
use crate::fit::{predict_detailed, train, FitConfig, LeafSpec};
use crate::mixedmodel::FamilyKind;
use crate::modelfile::SavedModel;
use crate::tree::{assign_regions, cross_validate_leaves, RegressionTree};

#[derive(Debug, Parser)]
#[command(name = "gtimm", version, about = "Tree-informed mixed models for clustered data")]
pub struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// TOML file with default flag values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Only report errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw the four-cluster simulation (sim.csv and sim_truth.csv).
    Simulate(SimulateArgs),
    /// Fit a GTIMM (model.txt, train_log.csv, cv_leaves.csv with --max-leaves cv).
    Fit(FitCmd),
    /// Predict from a saved model (pred.csv, or the file named by --out).
    Predict(PredictArgs),
    /// Train/test MSPE of GTIMM, LMM, tree and forest (benchmark.csv).
    Benchmark(BenchmarkArgs),
    /// Cross-validated leaf-count selection (cv_leaves.csv).
    CvLeaves(CvArgs),
    /// MSPE gap between GTIMM and LMM across training sizes (gap.csv).
    GapScaling(GapArgs),
    /// Observations per tree region and group (crosstab.csv).
    Crosstab(CrosstabArgs),
    /// Tidy CSVs for external plotting (plot_<kind>.csv).
    PlotData(PlotArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Number of observations (multiple of 4).
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Number of random-effect groups.
    #[arg(long, default_value_t = 10)]
    pub groups: usize,
    #[arg(long, default_value_t = 2.0)]
    pub sigma_b2: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma_eps2: f64,
    /// Give every cluster the first cluster's coefficients.
    #[arg(long)]
    pub common_coefficients: bool,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Input CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Response column.
    #[arg(long, default_value = "y")]
    pub y_col: String,
    /// Comma-separated fixed-effect predictor columns.
    #[arg(long, value_delimiter = ',', default_value = "x1,x2")]
    pub x_cols: Vec<String>,
    /// Categorical group column (one random intercept per level).
    #[arg(long, default_value = "group")]
    pub group_col: String,
    /// Comma-separated numeric random-effect columns, used instead of --group-col.
    #[arg(long, value_delimiter = ',')]
    pub z_cols: Vec<String>,
    /// Standardize y and the predictors before fitting.
    #[arg(long)]
    pub standardize: bool,
}

impl DataArgs {
    fn schema(&self) -> CsvSchema {
        CsvSchema {
            y_col: self.y_col.clone(),
            x_cols: self.x_cols.clone(),
            random: if self.z_cols.is_empty() {
                RandomSpec::Group(self.group_col.clone())
            } else {
                RandomSpec::Columns(self.z_cols.clone())
            },
        }
    }

    fn load(&self) -> Result<Dataset> {
        let path = self.data.as_ref().ok_or_else(|| Error::InvalidArgument("--data is required".into()))?;
        load_csv(path, &self.schema())
    }
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// Leaf count, or `cv` to choose it by cross-validation.
    #[arg(long, default_value = "cv")]
    pub max_leaves: LeafSpec,
    /// Largest leaf count tried by cross-validation (candidates 1..=this).
    #[arg(long, default_value_t = 8)]
    pub cv_max_leaves: usize,
    #[arg(long, default_value_t = 5)]
    pub cv_folds: usize,
    #[arg(long, default_value_t = 0.01)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 500)]
    pub max_epochs: usize,
    /// Relative quasi-likelihood change treated as no progress.
    #[arg(long, default_value_t = 1e-6)]
    pub rel_tol: f64,
    /// Epochs between BLUP refreshes.
    #[arg(long, default_value_t = 1)]
    pub blup_refresh_every: usize,
    /// Regions below this share of the rows are merged into their sibling.
    #[arg(long, default_value_t = 0.05)]
    pub min_region_fraction: f64,
    /// Smallest tree leaf.
    #[arg(long, default_value_t = 10)]
    pub min_leaf: usize,
    /// Response family: gaussian, poisson or bernoulli.
    #[arg(long, default_value = "gaussian")]
    pub family: FamilyKind,
    /// Return the best SGD iterate without the final exact solve.
    #[arg(long)]
    pub no_refine: bool,
}

impl FitArgs {
    fn config(&self, seed: u64) -> FitConfig {
        FitConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            rel_tol: self.rel_tol,
            blup_refresh_every: self.blup_refresh_every,
            max_leaves: self.max_leaves,
            cv_folds: self.cv_folds,
            cv_candidates: (1..=self.cv_max_leaves).collect(),
            seed,
            min_region_fraction: self.min_region_fraction,
            min_leaf: self.min_leaf,
            family: self.family,
            refine: !self.no_refine,
        }
    }
}

#[derive(Debug, Args)]
pub struct FitCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub fit: FitArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Saved model file.
    #[arg(long)]
    pub model: PathBuf,
    /// CSV holding the model's predictor (and group) columns.
    #[arg(long)]
    pub data: PathBuf,
    /// Leave out the random effects.
    #[arg(long)]
    pub fixed_only: bool,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    /// Share of each group's rows used for training.
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    /// Simulated sample size when no --data is given.
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Candidates are 1..=this.
    #[arg(long, default_value_t = 8)]
    pub max_leaves: usize,
    #[arg(long, default_value_t = 10)]
    pub min_leaf: usize,
}

#[derive(Debug, Args)]
pub struct GapArgs {
    /// Comma-separated training sizes (multiples of 4, increasing).
    #[arg(long, value_delimiter = ',', default_value = "500,1000,2000,4000,8000")]
    pub grid: Vec<usize>,
    /// Leaves of the GTIMM tree.
    #[arg(long, default_value_t = 4)]
    pub leaves: usize,
    #[arg(long, default_value_t = 20)]
    pub replications: usize,
    /// Held-out observations per replication.
    #[arg(long, default_value_t = 4000)]
    pub n_test: usize,
}

#[derive(Debug, Args)]
pub struct CrosstabArgs {
    /// Saved GTIMM or tree model.
    #[arg(long)]
    pub model: PathBuf,
    /// CSV with the model's predictors and group column.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    /// x1, x2, true and fitted region per row (needs --model and --data).
    Regions,
    /// Gap curve (needs --input, a gap-scaling CSV).
    Gap,
    /// Long-format region x group counts (needs --model and --data).
    Crosstab,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long, value_enum)]
    pub kind: PlotKind,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Column with the generating cluster (1-based).
    #[arg(long, default_value = "region_true")]
    pub truth_col: String,
    /// Gap-scaling CSV for `--kind gap`.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

/// Parses `argv` (program name first), runs the command and returns the exit
/// status: 0 success, 1 usage error, 2 data error, 3 numerical failure.
pub fn run(argv: Vec<OsString>) -> i32 {
    let argv = match apply_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let level = if cli.quiet { "error" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("GTIMM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("GTIMM_THREADS must be a positive integer, got '{v}'")))?;
    // A pool may already exist when run() is called twice in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

const GLOBAL_VALUE_FLAGS: [&str; 3] = ["--seed", "--config", "--out"];

/// Appends flags from the `--config` file that the command line does not set.
fn apply_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut config = None;
    let mut subcommand = None;
    let mut k = 1;
    while k < args.len() {
        let a = &args[k];
        if let Some(v) = a.strip_prefix("--config=") {
            config = Some(v.to_string());
        } else if a == "--config" {
            config = args.get(k + 1).cloned();
            k += 1;
        } else if GLOBAL_VALUE_FLAGS.contains(&a.as_str()) {
            k += 1;
        } else if subcommand.is_none() && !a.starts_with('-') {
            subcommand = Some(a.clone());
        }
        k += 1;
    }
    let Some(path) = config else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("cannot read config {path}: {e}")))?;
    let table: toml::Table =
        text.parse().map_err(|e| Error::InvalidArgument(format!("config {path} is not valid TOML: {e}")))?;

    let mut out = argv;
    let mut add = |key: &str, value: &toml::Value| -> Result<()> {
        let flag = format!("--{}", key.replace('_', "-"));
        let present = args.iter().any(|a| a == &flag || a.starts_with(&format!("{flag}=")));
        if present {
            return Ok(());
        }
        let text = match value {
            toml::Value::Boolean(true) => {
                out.push(flag.into());
                return Ok(());
            }
            toml::Value::Boolean(false) => return Ok(()),
            toml::Value::String(s) => s.clone(),
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => f.to_string(),
            toml::Value::Array(items) => items
                .iter()
                .map(|v| match v {
                    toml::Value::String(s) => Ok(s.clone()),
                    toml::Value::Integer(i) => Ok(i.to_string()),
                    toml::Value::Float(f) => Ok(f.to_string()),
                    _ => Err(Error::InvalidArgument(format!("config key '{key}' holds an unsupported list item"))),
                })
                .collect::<Result<Vec<_>>>()?
                .join(","),
            _ => return Err(Error::InvalidArgument(format!("config key '{key}' has an unsupported type"))),
        };
        out.push(format!("{flag}={text}").into());
        Ok(())
    };
    for (key, value) in &table {
        match value {
            toml::Value::Table(section) => {
                if subcommand.as_deref() == Some(key.as_str()) {
                    for (k, v) in section {
                        add(k, v)?;
                    }
                }
            }
            v => add(key, v)?,
        }
    }
    Ok(out)
}

pub fn execute(cli: &Cli) -> Result<()> {
    // For predict, --out may name the output file itself.
    if !matches!(cli.command, Command::Predict(_)) {
        fs::create_dir_all(&cli.out)?;
    }
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(cli, a),
        Command::Fit(a) => cmd_fit(cli, a),
        Command::Predict(a) => cmd_predict(cli, a),
        Command::Benchmark(a) => cmd_benchmark(cli, a),
        Command::CvLeaves(a) => cmd_cv(cli, a),
        Command::GapScaling(a) => cmd_gap(cli, a),
        Command::Crosstab(a) => {
            let rows = crosstab_rows(&a.model, &a.data)?;
            write_rows(&cli.out.join("crosstab.csv"), &["node", "group", "count"], &rows)
        }
        Command::PlotData(a) => cmd_plot(cli, a),
    }
}

fn say(cli: &Cli, msg: impl AsRef<str>) {
    if !cli.quiet {
        println!("{}", msg.as_ref());
    }
}

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_simulate(cli: &Cli, a: &SimulateArgs) -> Result<()> {
    let mut cfg = SimConfig { n_total: a.n, n_groups: a.groups, sigma_b2: a.sigma_b2, sigma_eps2: a.sigma_eps2, ..SimConfig::default() };
    if a.common_coefficients {
        cfg = cfg.common_coefficients();
    }
    let (d, truth) = simulate(&cfg, cli.seed)?;
    write_sim_csv(&d, &truth, File::create(cli.out.join("sim.csv"))?)?;
    write_truth_csv(&truth, File::create(cli.out.join("sim_truth.csv"))?)?;
    say(cli, format!("wrote {} rows to {}", d.n(), cli.out.join("sim.csv").display()));
    Ok(())
}

fn cmd_fit(cli: &Cli, a: &FitCmd) -> Result<()> {
    let cfg = a.fit.config(cli.seed);
    cfg.validate()?;
    let raw = a.data.load()?;
    let (d, params) = if a.data.standardize {
        let (d, p) = standardize(&raw)?;
        (d, Some(p))
    } else {
        (raw, None)
    };
    let mut report = train(&d, &cfg)?;
    report.model.standardization = params;
    let m = &report.model;
    SavedModel::Gtimm(m.clone()).save(&cli.out.join("model.txt"))?;

    let regions = m.n_regions().to_string();
    let rows: Vec<Vec<String>> = report
        .log
        .iter()
        .map(|r| {
            vec![
                r.epoch.to_string(),
                r.quasi_loglik.to_string(),
                r.sigma_b2.to_string(),
                r.sigma_eps2.to_string(),
                regions.clone(),
            ]
        })
        .collect();
    write_rows(&cli.out.join("train_log.csv"), &["epoch", "quasi_loglik", "sigma_b2", "sigma_eps2", "n_regions"], &rows)?;
    if let Some(cv) = &report.cv {
        write_rows(&cli.out.join("cv_leaves.csv"), &["leaves", "mean_sse", "se_sse", "selected"], &cv_rows(cv))?;
        say(cli, format!("cross-validation selected {} leaves", cv.selected));
    }
    say(
        cli,
        format!(
            "fitted {} regions in {} epochs (refined: {}); sigma_b2 = {}, sigma_eps2 = {}",
            m.n_regions(),
            report.log.len(),
            report.refined,
            m.sigma_b2,
            m.sigma_eps2
        ),
    );
    Ok(())
}

fn cv_rows(cv: &crate::tree::CvSelection) -> Vec<Vec<String>> {
    cv.candidates
        .iter()
        .enumerate()
        .map(|(k, c)| {
            vec![
                c.to_string(),
                cv.mean_sse[k].to_string(),
                cv.se_sse[k].to_string(),
                u8::from(*c == cv.selected).to_string(),
            ]
        })
        .collect()
}

/// The design of `table` laid out as the model expects: `X` with intercept and
/// `Z` by group level or column name. Rows whose group was not seen in
/// training get an all-zero `Z` row. Also returns each row's group index.
pub fn design_from_table(table: &Table, design: &DesignInfo) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<Option<usize>>)> {
    let n = table.n_rows();
    let feats = design.x_names[1..].iter().map(|c| table.numeric(c)).collect::<Result<Vec<_>>>()?;
    let x = with_intercept(&DMatrix::from_fn(n, feats.len(), |i, j| feats[j][i]));
    match &design.group_name {
        Some(g) => {
            let labels = table.text(g)?;
            let idx: Vec<Option<usize>> = labels.iter().map(|l| design.z_names.iter().position(|z| z == l)).collect();
            let unseen = idx.iter().filter(|v| v.is_none()).count();
            if unseen > 0 {
                log::warn!("{unseen} row(s) belong to groups absent from training; their random effect is 0");
            }
            let z = DMatrix::from_fn(n, design.q(), |i, j| f64::from(idx[i] == Some(j)));
            Ok((x, z, idx))
        }
        None => {
            let cols = design.z_names.iter().map(|c| table.numeric(c)).collect::<Result<Vec<_>>>()?;
            let z = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
            Ok((x, z, vec![None; n]))
        }
    }
}

fn predict_path(out: &Path) -> PathBuf {
    if out.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        out.to_path_buf()
    } else {
        out.join("pred.csv")
    }
}

fn cmd_predict(cli: &Cli, a: &PredictArgs) -> Result<()> {
    let model = SavedModel::load(&a.model)?;
    let table = Table::open(&a.data)?;
    let design = model.design();
    let (x, mut z, _) = design_from_table(&table, design)?;
    if a.fixed_only {
        z.fill(0.0);
    }
    let (values, regions) = match &model {
        SavedModel::Gtimm(m) => {
            let p = predict_detailed(m, &x, &z, !a.fixed_only)?;
            (p.values, Some(p.regions))
        }
        other => (other.predictor().predict(&x, &z)?, None),
    };
    let y = if table.has_column(&design.y_name) { Some(table.text(&design.y_name)?) } else { None };
    let mut header = vec!["row"];
    if y.is_some() {
        header.push(design.y_name.as_str());
    }
    header.push("prediction");
    if regions.is_some() {
        header.push("region");
    }
    let rows: Vec<Vec<String>> = (0..values.len())
        .map(|i| {
            let mut r = vec![(i + 1).to_string()];
            if let Some(y) = &y {
                r.push(y[i].clone());
            }
            r.push(values[i].to_string());
            if let Some(reg) = &regions {
                r.push((reg[i] + 1).to_string());
            }
            r
        })
        .collect();
    let path = predict_path(&cli.out);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    write_rows(&path, &header, &rows)?;
    say(cli, format!("wrote {} predictions to {}", values.len(), path.display()));
    Ok(())
}

fn cmd_benchmark(cli: &Cli, a: &BenchmarkArgs) -> Result<()> {
    let cfg = a.fit.config(cli.seed);
    cfg.validate()?;
    let d = match &a.data.data {
        Some(_) => a.data.load()?,
        None => simulate(&SimConfig { n_total: a.n, ..SimConfig::default() }, cli.seed)?.0,
    };
    let d = if a.data.standardize { standardize(&d)?.0 } else { d };
    let report = benchmark(&d, &cfg, a.train_fraction, cli.seed)?;
    report.write_csv(File::create(cli.out.join("benchmark.csv"))?)?;
    for (name, v) in &report.entries {
        say(cli, format!("{name}\t{v}"));
    }
    Ok(())
}

fn cmd_cv(cli: &Cli, a: &CvArgs) -> Result<()> {
    let d = a.data.load()?;
    let d = if a.data.standardize { standardize(&d)?.0 } else { d };
    let candidates: Vec<usize> = (1..=a.max_leaves).collect();
    let cv = cross_validate_leaves(&d, a.folds, &candidates, a.min_leaf, cli.seed)?;
    write_rows(&cli.out.join("cv_leaves.csv"), &["leaves", "mean_sse", "se_sse", "selected"], &cv_rows(&cv))?;
    say(cli, format!("selected {} leaves", cv.selected));
    Ok(())
}

fn cmd_gap(cli: &Cli, a: &GapArgs) -> Result<()> {
    let opts = GapOptions { n_test: a.n_test, ..GapOptions::default() };
    let curve = gap_experiment_with(&a.grid, a.leaves, a.replications, cli.seed, &opts)?;
    curve.write_csv(File::create(cli.out.join("gap.csv"))?)?;
    if let Some(s) = curve.log_log_slope() {
        say(cli, format!("log-log slope {s}"));
    }
    Ok(())
}

/// The model's tree and the (possibly standardized) design it routes.
fn routing(model: &SavedModel, x: &DMatrix<f64>) -> Result<(RegressionTree, DMatrix<f64>)> {
    match model {
        SavedModel::Gtimm(m) => {
            let xs = match &m.standardization {
                Some(s) => s.transform_x(x)?,
                None => x.clone(),
            };
            Ok((m.tree.clone(), xs))
        }
        SavedModel::Tree { tree, .. } => Ok((tree.clone(), x.clone())),
        other => Err(Error::InvalidArgument(format!("a {} model has no single set of regions", other.kind()))),
    }
}

fn crosstab_rows(model_path: &Path, data_path: &Path) -> Result<Vec<Vec<String>>> {
    let model = SavedModel::load(model_path)?;
    let table = Table::open(data_path)?;
    let design = model.design();
    let g = design
        .group_name
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("crosstab needs a model fitted with a group column".into()))?;
    let (x, _, _) = design_from_table(&table, design)?;
    let (tree, xs) = routing(&model, &x)?;
    let assign = assign_regions(&tree, &xs)?;
    let (idx, levels) = crate::dataset::index_labels(&table.text(g)?);
    let t = crosstab_regions(&assign, &idx, levels.len())?;
    let mut rows = Vec::new();
    for m in 0..t.nrows() {
        for (k, level) in levels.iter().enumerate() {
            rows.push(vec![(m + 1).to_string(), level.clone(), t[(m, k)].to_string()]);
        }
    }
    Ok(rows)
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    v.as_ref().ok_or_else(|| Error::InvalidArgument(format!("{flag} is required for this plot kind")))
}

fn cmd_plot(cli: &Cli, a: &PlotArgs) -> Result<()> {
    match a.kind {
        PlotKind::Regions => {
            let model = SavedModel::load(required(&a.model, "--model")?)?;
            let table = Table::open(required(&a.data, "--data")?)?;
            let design = model.design();
            if design.p() < 3 {
                return Err(Error::InvalidArgument("region plots need two predictors".into()));
            }
            let (x, _, _) = design_from_table(&table, design)?;
            let (tree, xs) = routing(&model, &x)?;
            let fitted = assign_regions(&tree, &xs)?.region;
            let truth: Vec<usize> = table
                .numeric(&a.truth_col)?
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    if v >= 1.0 && v.fract() == 0.0 {
                        Ok(v as usize - 1)
                    } else {
                        Err(Error::Parse { row: i + 1, column: a.truth_col.clone(), message: "expected a 1-based region".into() })
                    }
                })
                .collect::<Result<_>>()?;
            let map = best_relabelling(&fitted, &truth)?;
            let wrong = fitted.iter().zip(&truth).filter(|&(&f, &t)| map[f] != Some(t)).count();
            let rows: Vec<Vec<String>> = (0..table.n_rows())
                .map(|i| {
                    vec![
                        x[(i, 1)].to_string(),
                        x[(i, 2)].to_string(),
                        (truth[i] + 1).to_string(),
                        (fitted[i] + 1).to_string(),
                    ]
                })
                .collect();
            let header = [design.x_names[1].as_str(), design.x_names[2].as_str(), "region_true", "region_tree"];
            write_rows(&cli.out.join("plot_regions.csv"), &header, &rows)?;
            say(cli, format!("{wrong} of {} rows fall in a region other than their best-matching cluster", rows.len()));
        }
        PlotKind::Gap => {
            let table = Table::open(required(&a.input, "--input")?)?;
            let header = ["N", "M", "gap_mean", "gap_std"];
            if table.headers() != header {
                return Err(Error::Schema(format!("gap CSV must have columns {}", header.join(","))));
            }
            let cols = header.iter().map(|c| table.numeric(c)).collect::<Result<Vec<_>>>()?;
            let rows: Vec<Vec<String>> = (0..table.n_rows()).map(|i| cols.iter().map(|c| c[i].to_string()).collect()).collect();
            write_rows(&cli.out.join("plot_gap.csv"), &header, &rows)?;
        }
        PlotKind::Crosstab => {
            let rows = crosstab_rows(required(&a.model, "--model")?, required(&a.data, "--data")?)?;
            write_rows(&cli.out.join("plot_crosstab.csv"), &["node", "group", "count"], &rows)?;
        }
    }
    Ok(())
}
