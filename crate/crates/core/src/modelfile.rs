//! Plain-text model container shared by GTIMM and the baselines.
//!
//! A file is a sequence of `[section]` headers, each followed by one entry per
//! line. Numbers are written in shortest round-trip exponent form, so a
//! save/load cycle reproduces every coefficient bit for bit. Names occupy the
//! rest of their line and may contain spaces.
//!
//! ```text
//! [kind]
//! gtimm
//! [family]
//! gaussian 1e0
//! [variance]
//! 2.1e0 9.8e-1
//! [response]
//! y
//! [features]
//! (Intercept)
//! x1
//! [group_column]
//! group
//! [groups]
//! A
//! [tree]
//! split 1 3.5e0 1 2
//! leaf 0 1.2e0 40
//! leaf 1 -3e-1 60
//! [beta_star]
//! 1e0 2e0
//! ...
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::baselines::{ForestModel, LmmModel, Predictor};
use crate::dataset::{ColumnScale, DesignInfo, StandardizationParams};
use crate::error::{Error, Result};
use crate::mixedmodel::{FamilyKind, GtimmModel, LinkFamily};
use crate::tree::{Node, RegressionTree};

/// Any model the command-line tools can save and reload.
#[derive(Debug, Clone, PartialEq)]
pub enum SavedModel {
    Gtimm(GtimmModel),
    Lmm(LmmModel),
    Tree { tree: RegressionTree, design: DesignInfo },
    Forest { forest: ForestModel, design: DesignInfo },
}

impl SavedModel {
    pub fn kind(&self) -> &'static str {
        match self {
            SavedModel::Gtimm(_) => "gtimm",
            SavedModel::Lmm(_) => "lmm",
            SavedModel::Tree { .. } => "tree",
            SavedModel::Forest { .. } => "forest",
        }
    }

    pub fn design(&self) -> &DesignInfo {
        match self {
            SavedModel::Gtimm(m) => &m.design,
            SavedModel::Lmm(m) => &m.design,
            SavedModel::Tree { design, .. } | SavedModel::Forest { design, .. } => design,
        }
    }

    pub fn predictor(&self) -> &dyn Predictor {
        match self {
            SavedModel::Gtimm(m) => m,
            SavedModel::Lmm(m) => m,
            SavedModel::Tree { tree, .. } => tree,
            SavedModel::Forest { forest, .. } => forest,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, to_string(self))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        from_str(&fs::read_to_string(path)?)
    }
}

// ---------------------------------------------------------------------------
// Writing
// ---------------------------------------------------------------------------

fn num(v: f64) -> String {
    format!("{v:e}")
}

fn section(out: &mut String, name: &str) {
    let _ = writeln!(out, "[{name}]");
}

fn write_design(out: &mut String, d: &DesignInfo) {
    section(out, "response");
    let _ = writeln!(out, "{}", d.y_name);
    section(out, "features");
    for n in &d.x_names {
        let _ = writeln!(out, "{n}");
    }
    if let Some(g) = &d.group_name {
        section(out, "group_column");
        let _ = writeln!(out, "{g}");
    }
    section(out, "groups");
    for n in &d.z_names {
        let _ = writeln!(out, "{n}");
    }
}

fn write_tree(out: &mut String, t: &RegressionTree) {
    section(out, "tree");
    for node in t.nodes() {
        let _ = match node {
            Node::Split { feature, threshold, left, right } => {
                writeln!(out, "split {feature} {} {left} {right}", num(*threshold))
            }
            Node::Leaf { region, mean, count } => writeln!(out, "leaf {region} {} {count}", num(*mean)),
        };
    }
}

fn write_matrix(out: &mut String, name: &str, m: &DMatrix<f64>) {
    section(out, name);
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|&v| num(v)).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
}

fn write_vector(out: &mut String, name: &str, v: &DVector<f64>) {
    section(out, name);
    for &x in v.iter() {
        let _ = writeln!(out, "{}", num(x));
    }
}

fn write_variance(out: &mut String, sigma_b2: f64, sigma_eps2: f64) {
    section(out, "variance");
    let _ = writeln!(out, "{} {}", num(sigma_b2), num(sigma_eps2));
}

pub fn to_string(model: &SavedModel) -> String {
    let mut out = String::new();
    section(&mut out, "kind");
    let _ = writeln!(out, "{}", model.kind());
    match model {
        SavedModel::Gtimm(m) => {
            section(&mut out, "family");
            let _ = writeln!(out, "{} {}", m.family.kind, num(m.family.dispersion));
            write_variance(&mut out, m.sigma_b2, m.sigma_eps2);
            write_design(&mut out, &m.design);
            write_tree(&mut out, &m.tree);
            write_matrix(&mut out, "beta_star", &m.beta_star);
            write_vector(&mut out, "b_hat", &m.b_hat);
            if let Some(s) = &m.standardization {
                section(&mut out, "standardization");
                for c in std::iter::once(&s.y).chain(&s.x) {
                    let _ = writeln!(out, "{} {} {}", num(c.mean), num(c.sd), c.name);
                }
            }
        }
        SavedModel::Lmm(m) => {
            write_variance(&mut out, m.sigma_b2, m.sigma_eps2);
            write_design(&mut out, &m.design);
            write_vector(&mut out, "beta", &m.beta);
            write_vector(&mut out, "b_tilde", &m.b_tilde);
        }
        SavedModel::Tree { tree, design } => {
            write_design(&mut out, design);
            write_tree(&mut out, tree);
        }
        SavedModel::Forest { forest, design } => {
            section(&mut out, "forest");
            let _ = writeln!(out, "{} {}", num(forest.feature_subsample), forest.bootstrap);
            write_design(&mut out, design);
            for t in &forest.trees {
                write_tree(&mut out, t);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Reading
// ---------------------------------------------------------------------------

struct Section<'a> {
    name: &'a str,
    header_line: usize,
    /// `(1-based line number, text)`.
    lines: Vec<(usize, &'a str)>,
}

fn bad(line: usize, message: impl Into<String>) -> Error {
    Error::ModelFormat { line, message: message.into() }
}

fn parse<T: FromStr>(line: usize, s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| bad(line, format!("cannot parse {what} from '{s}'")))
}

fn split_sections(text: &str) -> Result<Vec<Section<'_>>> {
    let mut out: Vec<Section> = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        if let Some(name) = raw.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            out.push(Section { name, header_line: line, lines: Vec::new() });
        } else if raw.trim().is_empty() {
            continue;
        } else if let Some(s) = out.last_mut() {
            s.lines.push((line, raw));
        } else {
            return Err(bad(line, "content before the first section"));
        }
    }
    Ok(out)
}

struct Reader<'a> {
    sections: Vec<Section<'a>>,
    pos: usize,
}

impl<'a> Reader<'a> {
    fn last_line(&self) -> usize {
        self.sections.last().map_or(0, |s| s.lines.last().map_or(s.header_line, |l| l.0))
    }

    fn peek(&self) -> Option<&str> {
        self.sections.get(self.pos).map(|s| s.name)
    }

    fn next(&mut self, name: &str) -> Result<&Section<'a>> {
        let line = self.last_line();
        match self.sections.get(self.pos) {
            Some(s) if s.name == name => {
                self.pos += 1;
                Ok(&self.sections[self.pos - 1])
            }
            Some(s) => Err(bad(s.header_line, format!("expected section [{name}], found [{}]", s.name))),
            None => Err(bad(line, format!("missing section [{name}]"))),
        }
    }

    fn optional(&mut self, name: &str) -> Option<&Section<'a>> {
        if self.peek() == Some(name) {
            self.pos += 1;
            Some(&self.sections[self.pos - 1])
        } else {
            None
        }
    }

    fn single(&mut self, name: &str) -> Result<(usize, &'a str)> {
        let s = self.next(name)?;
        match s.lines.as_slice() {
            [one] => Ok(*one),
            _ => Err(bad(s.header_line, format!("section [{name}] must hold exactly one line"))),
        }
    }

    fn finish(&self) -> Result<()> {
        match self.sections.get(self.pos) {
            Some(s) => Err(bad(s.header_line, format!("unexpected section [{}]", s.name))),
            None => Ok(()),
        }
    }
}

fn numbers(line: usize, s: &str, expected: usize) -> Result<Vec<f64>> {
    let v = s.split_whitespace().map(|t| parse::<f64>(line, t, "a number")).collect::<Result<Vec<_>>>()?;
    if v.len() != expected {
        return Err(bad(line, format!("expected {expected} numbers, found {}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(bad(line, "non-finite number"));
    }
    Ok(v)
}

fn read_variance(r: &mut Reader) -> Result<(f64, f64)> {
    let (line, s) = r.single("variance")?;
    let v = numbers(line, s, 2)?;
    if !(v[0] >= 0.0 && v[1] > 0.0) {
        return Err(bad(line, "variance components out of range"));
    }
    Ok((v[0], v[1]))
}

fn read_design(r: &mut Reader) -> Result<DesignInfo> {
    let y_name = r.single("response")?.1.to_string();
    let x_names: Vec<String> = r.next("features")?.lines.iter().map(|l| l.1.to_string()).collect();
    if x_names.is_empty() {
        return Err(bad(r.last_line(), "no feature names"));
    }
    let group_name = match r.optional("group_column") {
        Some(s) => match s.lines.as_slice() {
            [one] => Some(one.1.to_string()),
            _ => return Err(bad(s.header_line, "section [group_column] must hold exactly one line")),
        },
        None => None,
    };
    let z_names = r.next("groups")?.lines.iter().map(|l| l.1.to_string()).collect();
    Ok(DesignInfo { y_name, x_names, group_name, z_names })
}

fn read_tree(r: &mut Reader) -> Result<RegressionTree> {
    let s = r.next("tree")?;
    let header = s.header_line;
    let mut nodes = Vec::with_capacity(s.lines.len());
    for &(line, text) in &s.lines {
        let t: Vec<&str> = text.split_whitespace().collect();
        let node = match t.as_slice() {
            ["split", f, th, l, rr] => Node::Split {
                feature: parse(line, f, "a feature index")?,
                threshold: parse(line, th, "a threshold")?,
                left: parse(line, l, "a child index")?,
                right: parse(line, rr, "a child index")?,
            },
            ["leaf", reg, mean, count] => Node::Leaf {
                region: parse(line, reg, "a region")?,
                mean: parse(line, mean, "a leaf mean")?,
                count: parse(line, count, "a leaf count")?,
            },
            _ => return Err(bad(line, format!("malformed tree node '{text}'"))),
        };
        nodes.push(node);
    }
    RegressionTree::from_nodes(nodes).map_err(|e| bad(header, e.to_string()))
}

fn read_vector(r: &mut Reader, name: &str, len: usize) -> Result<DVector<f64>> {
    let s = r.next(name)?;
    if s.lines.len() != len {
        return Err(bad(s.header_line, format!("[{name}] needs {len} entries, found {}", s.lines.len())));
    }
    let v = s.lines.iter().map(|&(line, t)| Ok(numbers(line, t, 1)?[0])).collect::<Result<Vec<_>>>()?;
    Ok(DVector::from_vec(v))
}

fn read_gtimm(r: &mut Reader) -> Result<GtimmModel> {
    let (line, fam) = r.single("family")?;
    let (kind, dispersion) = fam.split_once(' ').ok_or_else(|| bad(line, "family needs a name and a dispersion"))?;
    let kind: FamilyKind = parse(line, kind, "a family")?;
    let dispersion = numbers(line, dispersion, 1)?[0];
    let (sigma_b2, sigma_eps2) = read_variance(r)?;
    let design = read_design(r)?;
    let tree = read_tree(r)?;
    let (p, m) = (design.p(), tree.leaf_count());
    let s = r.next("beta_star")?;
    if s.lines.len() != p {
        return Err(bad(s.header_line, format!("[beta_star] needs {p} rows, found {}", s.lines.len())));
    }
    let mut beta_star = DMatrix::zeros(p, m);
    for (j, &(line, t)) in s.lines.iter().enumerate() {
        for (k, v) in numbers(line, t, m)?.into_iter().enumerate() {
            beta_star[(j, k)] = v;
        }
    }
    let b_hat = read_vector(r, "b_hat", design.q())?;
    let standardization = match r.optional("standardization") {
        Some(s) => {
            let cols = s
                .lines
                .iter()
                .map(|&(line, t)| {
                    let mut parts = t.splitn(3, ' ');
                    let (Some(mean), Some(sd), Some(name)) = (parts.next(), parts.next(), parts.next()) else {
                        return Err(bad(line, "standardization entries are 'mean sd name'"));
                    };
                    let (mean, sd) = (parse::<f64>(line, mean, "a mean")?, parse::<f64>(line, sd, "a standard deviation")?);
                    if !(sd > 0.0) || !mean.is_finite() || !sd.is_finite() {
                        return Err(bad(line, "standardization needs a finite mean and positive sd"));
                    }
                    Ok(ColumnScale { name: name.to_string(), mean, sd })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut it = cols.into_iter();
            let y = it.next().ok_or_else(|| bad(s.header_line, "empty standardization"))?;
            Some(StandardizationParams { x: it.collect(), y })
        }
        None => None,
    };
    let model = GtimmModel {
        beta_star,
        b_hat,
        sigma_b2,
        sigma_eps2,
        tree,
        family: LinkFamily { dispersion, ..LinkFamily::new(kind) },
        design,
        standardization,
    };
    model.validate().map_err(|e| bad(line, e.to_string()))?;
    Ok(model)
}

fn check_tree(tree: &RegressionTree, design: &DesignInfo) -> Result<()> {
    if tree.max_feature() >= design.p() {
        return Err(Error::Structure("tree splits on a column outside the design".into()));
    }
    Ok(())
}

/// Parses a model written by [`to_string`].
pub fn from_str(text: &str) -> Result<SavedModel> {
    let mut r = Reader { sections: split_sections(text)?, pos: 0 };
    let (line, kind) = r.single("kind")?;
    let model = match kind.trim() {
        "gtimm" => SavedModel::Gtimm(read_gtimm(&mut r)?),
        "lmm" => {
            let (sigma_b2, sigma_eps2) = read_variance(&mut r)?;
            let design = read_design(&mut r)?;
            let beta = read_vector(&mut r, "beta", design.p())?;
            let b_tilde = read_vector(&mut r, "b_tilde", design.q())?;
            SavedModel::Lmm(LmmModel { beta, b_tilde, sigma_b2, sigma_eps2, design })
        }
        "tree" => {
            let design = read_design(&mut r)?;
            let tree = read_tree(&mut r)?;
            check_tree(&tree, &design)?;
            SavedModel::Tree { tree, design }
        }
        "forest" => {
            let (fl, f) = r.single("forest")?;
            let mut parts = f.split_whitespace();
            let frac = parse::<f64>(fl, parts.next().unwrap_or(""), "a feature fraction")?;
            let bootstrap = parse::<bool>(fl, parts.next().unwrap_or(""), "the bootstrap flag")?;
            let design = read_design(&mut r)?;
            let mut trees = Vec::new();
            while r.peek() == Some("tree") {
                let t = read_tree(&mut r)?;
                check_tree(&t, &design)?;
                trees.push(t);
            }
            if trees.is_empty() {
                return Err(bad(fl, "forest has no trees"));
            }
            SavedModel::Forest {
                forest: ForestModel { n_trees: trees.len(), trees, feature_subsample: frac, bootstrap },
                design,
            }
        }
        other => return Err(bad(line, format!("unknown model kind '{other}'"))),
    };
    r.finish()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{fit_forest, fit_lmm, ForestConfig};
    use crate::dataset::{simulate_gtimm, standardize};
    use crate::fit::{fit_gtimm, FitConfig};
    use crate::tree::fit_tree;
    use proptest::prelude::*;

    fn round_trip(m: &SavedModel) {
        let text = to_string(m);
        let back = from_str(&text).unwrap();
        assert_eq!(&back, m);
        assert_eq!(to_string(&back), text);
    }

    #[test]
    fn every_kind_round_trips_exactly() {
        let (d, _) = simulate_gtimm(400, 1, 2.0, 1.0).unwrap();
        let g = fit_gtimm(&d, &FitConfig { seed: 1, ..FitConfig::default().with_leaves(4) }).unwrap();
        round_trip(&SavedModel::Gtimm(g));
        let (ds, params) = standardize(&d).unwrap();
        let mut g = fit_gtimm(&ds, &FitConfig { seed: 1, ..FitConfig::default().with_leaves(2) }).unwrap();
        g.standardization = Some(params);
        round_trip(&SavedModel::Gtimm(g));
        round_trip(&SavedModel::Lmm(fit_lmm(&d).unwrap()));
        let design = DesignInfo::of(&d);
        round_trip(&SavedModel::Tree { tree: fit_tree(&d, 8, 10).unwrap(), design: design.clone() });
        let forest = fit_forest(&d, &ForestConfig { n_trees: 3, ..ForestConfig::default() }).unwrap();
        round_trip(&SavedModel::Forest { forest, design });
    }

    #[test]
    fn errors_name_the_line() {
        let (d, _) = simulate_gtimm(200, 1, 2.0, 1.0).unwrap();
        let text = to_string(&SavedModel::Lmm(fit_lmm(&d).unwrap()));
        let broken = text.replacen("[beta]\n", "[beta]\nnot-a-number\n", 1);
        assert!(matches!(from_str(&broken), Err(Error::ModelFormat { .. })));
        assert!(matches!(from_str("[kind]\nbogus\n"), Err(Error::ModelFormat { line: 2, .. })));
        assert!(matches!(from_str("junk\n"), Err(Error::ModelFormat { line: 1, .. })));
        let truncated: String = text.lines().take(6).map(|l| format!("{l}\n")).collect();
        assert!(from_str(&truncated).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn lmm_coefficients_survive_bitwise(
            beta in proptest::collection::vec(-1e300f64..1e300, 1..5),
            b in proptest::collection::vec(-1e-300f64..1e-300, 1..5),
            sb in 0.0f64..1e6,
            se in 1e-12f64..1e6,
        ) {
            let design = DesignInfo {
                y_name: "resp onse".into(),
                x_names: (0..beta.len()).map(|j| format!("x {j}")).collect(),
                group_name: None,
                z_names: (0..b.len()).map(|g| format!("z{g}")).collect(),
            };
            let m = SavedModel::Lmm(LmmModel {
                beta: DVector::from_vec(beta),
                b_tilde: DVector::from_vec(b),
                sigma_b2: sb,
                sigma_eps2: se,
                design,
            });
            prop_assert_eq!(from_str(&to_string(&m)).unwrap(), m);
        }
    }
}
