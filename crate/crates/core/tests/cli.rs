use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_gtimm");

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/worldbank_like.csv")
}

fn gtimm(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("RUST_LOG").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = gtimm(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv_column(path: &Path, name: &str) -> Vec<f64> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let j = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[j].parse().unwrap()).collect()
}

#[test]
fn simulate_fit_predict_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["simulate", "--n", "2000", "--seed", "7", "--out", s(d)]);
    let sim = d.join("sim.csv");
    assert_eq!(csv_column(&sim, "y").len(), 2000);
    assert!(d.join("sim_truth.csv").exists());

    let out = ok(&[
        "fit", "--data", s(&sim), "--y-col", "y", "--x-cols", "x1,x2", "--group-col", "group", "--max-leaves", "cv",
        "--out", s(d), "--seed", "7",
    ]);
    assert!(out.contains("selected 4 leaves"), "{out}");
    assert!(csv_column(&d.join("train_log.csv"), "n_regions").iter().all(|&m| m == 4.0));
    assert!(d.join("model.txt").exists() && d.join("cv_leaves.csv").exists());

    let pred = d.join("pred.csv");
    ok(&["predict", "--model", s(&d.join("model.txt")), "--data", s(&sim), "--out", s(&pred)]);
    let y = csv_column(&pred, "y");
    let p = csv_column(&pred, "prediction");
    let mspe = gtimm::eval::mspe(&y, &p).unwrap();
    assert!(mspe.is_finite() && mspe >= 0.0 && mspe < 2.0, "{mspe}");

    ok(&["plot-data", "--kind", "regions", "--model", s(&d.join("model.txt")), "--data", s(&sim), "--out", s(d)]);
    assert_eq!(csv_column(&d.join("plot_regions.csv"), "region_tree").len(), 2000);
    let header = fs::read_to_string(d.join("plot_regions.csv")).unwrap();
    assert!(header.starts_with("x1,x2,region_true,region_tree\n"));
}

#[test]
fn fixture_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let f = fixture();
    let data = [
        "--data", s(&f), "--y-col", "gdp", "--x-cols", "fdi_outflows,fdi_inflows,trade,unemployment,inflation", "--group-col",
        "region", "--standardize",
    ];
    let with = |head: &[&str], tail: &[&str]| -> Vec<String> {
        head.iter().chain(data.iter()).chain(tail).map(|a| a.to_string()).collect()
    };
    let run = |v: Vec<String>| ok(&v.iter().map(String::as_str).collect::<Vec<_>>());

    run(with(&["cv-leaves"], &["--folds", "5", "--out", s(d)]));
    assert_eq!(csv_column(&d.join("cv_leaves.csv"), "selected").iter().sum::<f64>(), 1.0);
    run(with(&["fit"], &["--max-leaves", "4", "--out", s(d)]));
    let model = d.join("model.txt");
    let text = fs::read_to_string(&model).unwrap();
    assert!(text.contains("[standardization]") && text.contains("Europe and Central Asia"));

    ok(&["crosstab", "--model", s(&model), "--data", s(&f), "--out", s(d)]);
    let counts = csv_column(&d.join("crosstab.csv"), "count");
    assert_eq!(counts.iter().sum::<f64>(), 97.0);

    run(with(&["benchmark"], &["--max-leaves", "4", "--out", s(d)]));
    let mspe = csv_column(&d.join("benchmark.csv"), "mspe");
    assert_eq!(mspe.len(), 4);
    assert!(mspe.iter().all(|v| v.is_finite() && *v >= 0.0));

    ok(&["predict", "--model", s(&model), "--data", s(&f), "--out", s(d)]);
    let pred = csv_column(&d.join("pred.csv"), "prediction");
    assert_eq!(pred.len(), 97);
    // Predictions come back on the raw GDP scale.
    let gdp = csv_column(&f, "gdp");
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!((mean(&pred) - mean(&gdp)).abs() < 0.5 * mean(&gdp));
}

#[test]
fn unseen_groups_predict_with_zero_random_effect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["simulate", "--n", "400", "--out", s(d)]);
    let sim = d.join("sim.csv");
    ok(&["fit", "--data", s(&sim), "--max-leaves", "4", "--out", s(d)]);
    let text = fs::read_to_string(&sim).unwrap();
    let mut lines: Vec<String> = text.lines().take(3).map(String::from).collect();
    // Relabel the second data row's group to one never seen in training.
    let mut cells: Vec<String> = lines[2].split(',').map(String::from).collect();
    cells[3] = "999".into();
    lines[2] = cells.join(",");
    let new = d.join("new.csv");
    fs::write(&new, lines.join("\n") + "\n").unwrap();
    let o = gtimm(&["predict", "--model", s(&d.join("model.txt")), "--data", s(&new), "--out", s(d)]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent from training"));
    let fixed = d.join("fixed.csv");
    ok(&["predict", "--fixed-only", "--model", s(&d.join("model.txt")), "--data", s(&new), "--out", s(&fixed)]);
    let a = csv_column(&d.join("pred.csv"), "prediction");
    let b = csv_column(&fixed, "prediction");
    assert_eq!(a[1], b[1]);
}

#[test]
fn gap_scaling_and_plot_schema() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gap-scaling", "--grid", "200,400", "--leaves", "1", "--replications", "5", "--n-test", "400", "--out", s(d)]);
    let gap = d.join("gap.csv");
    assert!(fs::read_to_string(&gap).unwrap().starts_with("N,M,gap_mean,gap_std\n"));
    assert!(csv_column(&gap, "gap_mean").iter().all(|&g| (0.0..1e-3).contains(&g)));
    ok(&["plot-data", "--kind", "gap", "--input", s(&gap), "--out", s(d)]);
    assert!(fs::read_to_string(d.join("plot_gap.csv")).unwrap().starts_with("N,M,gap_mean,gap_std\n"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(gtimm(&["fit", "--bogus"]).status.code(), Some(1));
    assert_eq!(gtimm(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(gtimm(&["simulate", "--n", "7", "--out", s(d)]).status.code(), Some(1));
    assert_eq!(gtimm(&["fit", "--data", "/nonexistent.csv", "--out", s(d)]).status.code(), Some(2));
    assert_eq!(gtimm(&["plot-data", "--kind", "gap", "--input", "/nonexistent.csv", "--out", s(d)]).status.code(), Some(2));
    fs::write(d.join("bad.csv"), "y,x1,x2,group\n1,NaN,2,a\n2,1,1,b\n").unwrap();
    let o = gtimm(&["fit", "--data", s(&d.join("bad.csv")), "--out", s(d)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("row 1"));
    // Too many leaves for the data: a numerical failure.
    ok(&["simulate", "--n", "40", "--out", s(d)]);
    let o = gtimm(&["fit", "--data", s(&d.join("sim.csv")), "--max-leaves", "2", "--min-region-fraction", "0.5", "--min-leaf", "1", "--out", s(d)]);
    assert!(matches!(o.status.code(), Some(0) | Some(3)), "{o:?}");
    assert_eq!(gtimm(&["gap-scaling", "--grid", "400", "--replications", "2", "--out", s(d)]).status.code(), Some(1));
}

#[test]
fn help_lists_every_flag_with_defaults() {
    for sub in ["simulate", "fit", "predict", "benchmark", "cv-leaves", "gap-scaling", "crosstab", "plot-data"] {
        let o = gtimm(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        let text = String::from_utf8(o.stdout).unwrap();
        for flag in ["--seed", "--out", "--config", "--quiet"] {
            assert!(text.contains(flag), "{sub} help lacks {flag}");
        }
        assert!(text.contains("[default: 0]"), "{sub}");
    }
    let fit = String::from_utf8(gtimm(&["fit", "--help"]).stdout).unwrap();
    for s in ["[default: cv]", "[default: 0.01]", "[default: 32]", "[default: 500]", "[default: gaussian]"] {
        assert!(fit.contains(s), "fit help lacks {s}");
    }
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("run.toml");
    fs::write(&cfg, "seed = 3\n[simulate]\nn = 40\ngroups = 3\n").unwrap();
    ok(&["--config", s(&cfg), "simulate", "--out", s(d)]);
    assert_eq!(csv_column(&d.join("sim.csv"), "y").len(), 40);
    let first = fs::read(d.join("sim.csv")).unwrap();
    ok(&["--config", s(&cfg), "simulate", "--n", "80", "--out", s(d)]);
    assert_eq!(csv_column(&d.join("sim.csv"), "y").len(), 80);
    ok(&["simulate", "--n", "40", "--groups", "3", "--seed", "3", "--out", s(d)]);
    assert_eq!(fs::read(d.join("sim.csv")).unwrap(), first);
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["simulate", "--n", "400", "--out", s(d)]);
    let sim = d.join("sim.csv");
    let mut outs = Vec::new();
    for threads in ["1", "4"] {
        let o = Command::new(BIN)
            .args(["benchmark", "--data", s(&sim), "--out", s(d), "--quiet"])
            .env("GTIMM_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success());
        outs.push(fs::read(d.join("benchmark.csv")).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
    let o = Command::new(BIN).args(["simulate", "--out", s(d)]).env("GTIMM_THREADS", "zero").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}
