//! Panel containers, role tagging and wide-format CSV ingestion.
//!
//! Every panel is stored per variable as an `N × (K+1)` matrix (persons in
//! rows, occasions in columns). Whenever several variables are stacked into a
//! single vector the ordering is variable-major, time-minor: the stacked index
//! of `(variable position p, time k)` is `p * (K + 1) + k`. All covariance
//! matrices in the crate follow this ordering.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Outcome,
    Treatment,
    Confounder,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Outcome => "outcome",
            Role::Treatment => "treatment",
            Role::Confounder => "confounder",
        })
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "outcome" => Ok(Role::Outcome),
            "treatment" => Ok(Role::Treatment),
            "confounder" => Ok(Role::Confounder),
            other => Err(Error::Schema(format!("unknown role `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub role: Role,
}

impl VariableSpec {
    pub fn new(name: impl Into<String>, role: Role) -> Self {
        Self {
            name: name.into(),
            role,
        }
    }
}

/// The default `Y` / `A` / `L` schema used by the simulator.
pub fn default_schema() -> Vec<VariableSpec> {
    vec![
        VariableSpec::new("Y", Role::Outcome),
        VariableSpec::new("A", Role::Treatment),
        VariableSpec::new("L", Role::Confounder),
    ]
}

/// Positions of the outcome, the treatment and the confounders in a variable list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Roles {
    pub outcome: usize,
    pub treatment: usize,
    pub confounders: Vec<usize>,
}

impl Roles {
    pub fn resolve(variables: &[VariableSpec]) -> Result<Self> {
        let mut seen = HashSet::new();
        for v in variables {
            if !seen.insert(v.name.as_str()) {
                return Err(Error::Schema(format!("duplicate variable name `{}`", v.name)));
            }
            if v.name.is_empty() {
                return Err(Error::Schema("empty variable name".into()));
            }
        }
        let pick = |role: Role| -> Result<usize> {
            let hits: Vec<usize> = variables
                .iter()
                .enumerate()
                .filter(|(_, v)| v.role == role)
                .map(|(i, _)| i)
                .collect();
            match hits.as_slice() {
                [one] => Ok(*one),
                [] => Err(Error::Schema(format!("no variable has role {role}"))),
                _ => Err(Error::Schema(format!("more than one variable has role {role}"))),
            }
        };
        let outcome = pick(Role::Outcome)?;
        let treatment = pick(Role::Treatment)?;
        let confounders = variables
            .iter()
            .enumerate()
            .filter(|(_, v)| v.role == Role::Confounder)
            .map(|(i, _)| i)
            .collect();
        Ok(Self {
            outcome,
            treatment,
            confounders,
        })
    }
}

/// Complete-case panel: `N` persons observed at `K + 1` occasions on a set of
/// role-tagged variables.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    variables: Vec<VariableSpec>,
    roles: Roles,
    values: Vec<DMatrix<f64>>,
    time_labels: Vec<String>,
}

impl PanelDataset {
    /// Builds a panel from one `N × (K+1)` matrix per variable.
    pub fn new(variables: Vec<VariableSpec>, values: Vec<DMatrix<f64>>) -> Result<Self> {
        let roles = Roles::resolve(&variables)?;
        if values.len() != variables.len() {
            return Err(Error::Schema(format!(
                "{} variables declared but {} value blocks given",
                variables.len(),
                values.len()
            )));
        }
        let (n, t) = values[0].shape();
        if let Some((j, m)) = values.iter().enumerate().find(|(_, m)| m.shape() != (n, t)) {
            return Err(Error::Schema(format!(
                "variable `{}` has shape {:?}, expected {:?}",
                variables[j].name,
                m.shape(),
                (n, t)
            )));
        }
        if t < 3 {
            return Err(Error::Identification(format!(
                "{t} occasions given; at least 3 (K >= 2) are required"
            )));
        }
        for (v, m) in variables.iter().zip(&values) {
            for i in 0..n {
                for k in 0..t {
                    if !m[(i, k)].is_finite() {
                        return Err(Error::MissingCell {
                            row: i + 1,
                            column: format!("{}_{k}", v.name),
                        });
                    }
                }
            }
        }
        Ok(Self {
            variables,
            roles,
            values,
            time_labels: (0..t).map(|k| k.to_string()).collect(),
        })
    }

    pub fn n_persons(&self) -> usize {
        self.values[0].nrows()
    }

    pub fn n_times(&self) -> usize {
        self.values[0].ncols()
    }

    /// `K`, the index of the last occasion.
    pub fn k(&self) -> usize {
        self.n_times() - 1
    }

    pub fn variables(&self) -> &[VariableSpec] {
        &self.variables
    }

    pub fn roles(&self) -> &Roles {
        &self.roles
    }

    pub fn time_labels(&self) -> &[String] {
        &self.time_labels
    }

    /// The `N × (K+1)` block of variable `v`.
    pub fn series(&self, v: usize) -> &DMatrix<f64> {
        &self.values[v]
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.values
    }

    pub fn value(&self, person: usize, time: usize, variable: usize) -> f64 {
        self.values[variable][(person, time)]
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }
}

/// Method used to strip stable between-person differences from the measurements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Centering {
    TrueScores,
    Proposed,
    ObservedMean,
    None,
    TraitPredictor,
}

impl Centering {
    pub const ALL: [Centering; 5] = [
        Centering::TrueScores,
        Centering::Proposed,
        Centering::ObservedMean,
        Centering::None,
        Centering::TraitPredictor,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Centering::TrueScores => "true_scores",
            Centering::Proposed => "proposed",
            Centering::ObservedMean => "observed_mean",
            Centering::None => "none",
            Centering::TraitPredictor => "trait_predictor",
        }
    }

    /// Whether the arm depends on a fitted step-1 measurement model.
    pub fn needs_step1(&self) -> bool {
        matches!(self, Centering::Proposed | Centering::TraitPredictor)
    }
}

impl fmt::Display for Centering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Centering {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Centering::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown centering `{s}`")))
    }
}

/// Within-person scores for every person, occasion and variable, together
/// with whatever trait predictions and means produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    variables: Vec<VariableSpec>,
    roles: Roles,
    within: Vec<DMatrix<f64>>,
    traits: Option<DMatrix<f64>>,
    centering: Centering,
    source_means: Option<DMatrix<f64>>,
    warnings: Vec<String>,
}

impl ScoreSet {
    pub fn new(
        variables: Vec<VariableSpec>,
        within: Vec<DMatrix<f64>>,
        centering: Centering,
    ) -> Result<Self> {
        let roles = Roles::resolve(&variables)?;
        if within.len() != variables.len() {
            return Err(Error::Schema("score blocks do not match variables".into()));
        }
        let shape = within[0].shape();
        if within.iter().any(|m| m.shape() != shape) {
            return Err(Error::Schema("score blocks differ in shape".into()));
        }
        if shape.1 < 2 {
            return Err(Error::Schema("scores need at least two occasions".into()));
        }
        Ok(Self {
            variables,
            roles,
            within,
            traits: None,
            centering,
            source_means: None,
            warnings: Vec::new(),
        })
    }

    pub fn with_traits(mut self, traits: DMatrix<f64>) -> Self {
        self.traits = Some(traits);
        self
    }

    pub fn with_source_means(mut self, means: DMatrix<f64>) -> Self {
        self.source_means = Some(means);
        self
    }

    pub fn with_warning(mut self, warning: impl Into<String>) -> Self {
        self.warnings.push(warning.into());
        self
    }

    pub fn variables(&self) -> &[VariableSpec] {
        &self.variables
    }

    pub fn roles(&self) -> &Roles {
        &self.roles
    }

    pub fn centering(&self) -> Centering {
        self.centering
    }

    pub fn n_persons(&self) -> usize {
        self.within[0].nrows()
    }

    pub fn n_times(&self) -> usize {
        self.within[0].ncols()
    }

    pub fn k(&self) -> usize {
        self.n_times() - 1
    }

    pub fn block(&self, v: usize) -> &DMatrix<f64> {
        &self.within[v]
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.within
    }

    pub fn outcome(&self) -> &DMatrix<f64> {
        &self.within[self.roles.outcome]
    }

    pub fn treatment(&self) -> &DMatrix<f64> {
        &self.within[self.roles.treatment]
    }

    /// Trait predictions, `N × V`, when the centering produced them.
    pub fn traits(&self) -> Option<&DMatrix<f64>> {
        self.traits.as_ref()
    }

    /// Means subtracted before weighting, `(K+1) × V`.
    pub fn source_means(&self) -> Option<&DMatrix<f64>> {
        self.source_means.as_ref()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Reinterprets the scores as a panel (e.g. to export them).
    pub fn to_panel(&self) -> Result<PanelDataset> {
        PanelDataset::new(self.variables.clone(), self.within.clone())
    }
}

/// Sample mean and unbiased covariance of the stacked vector of
/// `variable_subset`, ordered variable-major then time.
pub fn stacked_moments(
    data: &PanelDataset,
    variable_subset: &[usize],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if variable_subset.is_empty() {
        return Err(Error::Invalid("empty variable subset".into()));
    }
    if let Some(&bad) = variable_subset.iter().find(|&&v| v >= data.variables().len()) {
        return Err(Error::Invalid(format!("variable index {bad} out of range")));
    }
    let blocks: Vec<&DMatrix<f64>> = variable_subset.iter().map(|&v| data.series(v)).collect();
    moments_of_blocks(&blocks)
}

pub(crate) fn stack_blocks(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n = blocks[0].nrows();
    let t = blocks[0].ncols();
    let mut x = DMatrix::zeros(n, t * blocks.len());
    for (p, b) in blocks.iter().enumerate() {
        x.columns_mut(p * t, t).copy_from(b);
    }
    x
}

pub(crate) fn moments_of_blocks(blocks: &[&DMatrix<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let x = stack_blocks(blocks);
    column_moments(&x)
}

/// Column means and unbiased covariance of the rows of `x`.
pub(crate) fn column_moments(x: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::Invalid(format!("{n} persons; at least 2 are required")));
    }
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    let mut cov = centered.tr_mul(&centered) / (n as f64 - 1.0);
    cov.fill_lower_triangle_with_upper_triangle();
    Ok((mean, cov))
}

fn parse_column(name: &str) -> Option<(&str, usize)> {
    let (var, k) = name.rsplit_once('_')?;
    if var.is_empty() {
        return None;
    }
    Some((var, k.parse().ok()?))
}

/// Splits off leading `#` metadata lines; returns them (without the `#`) and the remaining text.
fn split_comment_header(text: &str) -> (Vec<&str>, &str) {
    let mut meta = Vec::new();
    let mut rest = text;
    while let Some(line) = rest.strip_prefix('#') {
        let (head, tail) = match line.find('\n') {
            Some(pos) => (&line[..pos], &line[pos + 1..]),
            None => (line, ""),
        };
        meta.push(head.trim_end_matches('\r').trim());
        rest = tail;
    }
    (meta, rest)
}

/// Reads a wide panel (`<var>_<k>` columns, one row per person).
///
/// Leading lines starting with `#` are treated as metadata and skipped.
/// Rows are numbered from 1 (first data row) in error messages.
pub fn load_panel_csv(path: impl AsRef<Path>, schema: &[VariableSpec]) -> Result<PanelDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (_, body) = split_comment_header(&text);
    parse_panel(body, schema)
}

fn parse_panel(body: &str, schema: &[VariableSpec]) -> Result<PanelDataset> {
    Roles::resolve(schema)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(body.as_bytes());
    let headers = reader.headers()?.clone();

    let index: HashMap<&str, usize> = schema
        .iter()
        .enumerate()
        .map(|(i, v)| (v.name.as_str(), i))
        .collect();
    let mut seen = HashSet::new();
    let mut placement = Vec::with_capacity(headers.len());
    let mut times: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); schema.len()];
    for (col, name) in headers.iter().enumerate() {
        let name = name.trim();
        if !seen.insert(name.to_string()) {
            return Err(Error::Schema(format!("duplicate column `{name}`")));
        }
        let (var, k) = parse_column(name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` is not of the form <var>_<k>")))?;
        let &v = index
            .get(var)
            .ok_or_else(|| Error::Schema(format!("column `{name}` names undeclared variable `{var}`")))?;
        times[v].insert(k, col);
        placement.push((v, k));
    }
    let n_times = times.iter().map(BTreeMap::len).max().unwrap_or(0);
    for (v, ts) in times.iter().enumerate() {
        if ts.len() != n_times || ts.keys().copied().ne(0..n_times) {
            return Err(Error::Schema(format!(
                "variable `{}` must have columns {}_0..{}_{}",
                schema[v].name,
                schema[v].name,
                schema[v].name,
                n_times.saturating_sub(1)
            )));
        }
    }
    if n_times < 3 {
        return Err(Error::Identification(format!(
            "{n_times} occasions in file; at least 3 (K >= 2) are required"
        )));
    }

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        for (col, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan") {
                return Err(Error::MissingCell {
                    row: r + 1,
                    column: headers[col].to_string(),
                });
            }
            let value: f64 = cell.parse().map_err(|_| Error::NonNumeric {
                row: r + 1,
                column: headers[col].to_string(),
                value: cell.to_string(),
            })?;
            columns[col].push(value);
        }
    }
    let n = columns.first().map(Vec::len).unwrap_or(0);
    let mut values = vec![DMatrix::zeros(n, n_times); schema.len()];
    for (col, &(v, k)) in placement.iter().enumerate() {
        for (i, &x) in columns[col].iter().enumerate() {
            values[v][(i, k)] = x;
        }
    }
    PanelDataset::new(schema.to_vec(), values)
}

fn write_wide<W: Write>(out: &mut W, variables: &[VariableSpec], blocks: &[DMatrix<f64>]) -> std::io::Result<()> {
    let t = blocks[0].ncols();
    let header: Vec<String> = variables
        .iter()
        .flat_map(|v| (0..t).map(move |k| format!("{}_{k}", v.name)))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    let mut line = String::new();
    for i in 0..blocks[0].nrows() {
        line.clear();
        for (p, b) in blocks.iter().enumerate() {
            for k in 0..t {
                if p + k > 0 {
                    line.push(',');
                }
                // `Display` for f64 is the shortest representation that round-trips.
                line.push_str(&b[(i, k)].to_string());
            }
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn write_panel_csv(path: impl AsRef<Path>, data: &PanelDataset) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_wide(&mut buf, data.variables(), data.blocks()).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Writes scores in the panel format preceded by a `# centering=<method>` line.
pub fn write_scores_csv(path: impl AsRef<Path>, scores: &ScoreSet) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    let io = |e| Error::io(path, e);
    writeln!(buf, "# centering={}", scores.centering()).map_err(io)?;
    for w in scores.warnings() {
        writeln!(buf, "# warning={w}").map_err(io)?;
    }
    write_wide(&mut buf, scores.variables(), scores.blocks()).map_err(io)?;
    fs::write(path, buf).map_err(io)
}

pub fn load_scores_csv(path: impl AsRef<Path>, schema: &[VariableSpec]) -> Result<ScoreSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (meta, body) = split_comment_header(&text);
    let centering = meta
        .iter()
        .find_map(|m| m.strip_prefix("centering="))
        .ok_or_else(|| Error::Schema("score file lacks a `# centering=` header".into()))?
        .parse()?;
    let panel = parse_panel(body, schema)?;
    let mut scores = ScoreSet::new(panel.variables().to_vec(), panel.blocks().to_vec(), centering)?;
    for w in meta.iter().filter_map(|m| m.strip_prefix("warning=")) {
        scores = scores.with_warning(w);
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_three_person_file() {
        let f = write_tmp(
            "Y_0,Y_1,Y_2,A_0,A_1,A_2,L_0,L_1,L_2\n\
             1,2,3,4,5,6,7,8,9\n\
             0,0,0,0,0,0,0,0,0\n\
             -1,-2.5,3e2,1,1,1,1,1,1\n",
        );
        let panel = load_panel_csv(f.path(), &default_schema()).unwrap();
        assert_eq!(panel.n_persons(), 3);
        assert_eq!(panel.n_times(), 3);
        assert_eq!(panel.value(0, 2, 1), 6.0);
        assert_eq!(panel.value(2, 2, 0), 300.0);
    }

    #[test]
    fn column_order_in_file_is_irrelevant() {
        let f = write_tmp("L_0,L_1,L_2,Y_2,Y_1,Y_0,A_0,A_1,A_2\n1,2,3,4,5,6,7,8,9\n");
        let panel = load_panel_csv(f.path(), &default_schema()).unwrap();
        assert_eq!(panel.series(0).row(0).iter().copied().collect::<Vec<_>>(), vec![6.0, 5.0, 4.0]);
        assert_eq!(panel.variables()[2].name, "L");
    }

    #[test]
    fn empty_cell_names_the_cell() {
        let f = write_tmp("Y_0,Y_1,Y_2,A_0,A_1,A_2,L_0,L_1,L_2\n1,2,3,4,5,6,7,8,9\n1,2,3,4,,6,7,8,9\n");
        match load_panel_csv(f.path(), &default_schema()) {
            Err(Error::MissingCell { row, column }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "A_1");
            }
            other => panic!("expected missing cell error, got {other:?}"),
        }
    }

    #[test]
    fn two_occasions_is_an_identification_error() {
        let f = write_tmp("Y_0,Y_1,A_0,A_1,L_0,L_1\n1,2,3,4,5,6\n");
        assert!(matches!(
            load_panel_csv(f.path(), &default_schema()),
            Err(Error::Identification(_))
        ));
    }

    #[test]
    fn duplicate_column_is_a_schema_error() {
        let f = write_tmp("Y_0,Y_1,Y_2,Y_2,A_0,A_1,A_2,L_0,L_1,L_2\n1,2,3,3,4,5,6,7,8,9\n");
        assert!(matches!(load_panel_csv(f.path(), &default_schema()), Err(Error::Schema(_))));
    }

    #[test]
    fn schema_needs_exactly_one_outcome_and_treatment() {
        let schema = vec![
            VariableSpec::new("Y", Role::Outcome),
            VariableSpec::new("A", Role::Outcome),
        ];
        assert!(matches!(Roles::resolve(&schema), Err(Error::Schema(_))));
        let schema = vec![VariableSpec::new("Y", Role::Outcome), VariableSpec::new("Y", Role::Treatment)];
        assert!(matches!(Roles::resolve(&schema), Err(Error::Schema(_))));
    }

    #[test]
    fn stacked_moments_two_person_example() {
        let schema = default_schema();
        let y = DMatrix::from_row_slice(2, 3, &[0.0, 0.0, 0.0, 2.0, 2.0, 2.0]);
        let panel = PanelDataset::new(schema, vec![y.clone(), y.clone(), y]).unwrap();
        let (mean, cov) = stacked_moments(&panel, &[0]).unwrap();
        assert_eq!(mean.as_slice(), &[1.0, 1.0, 1.0]);
        assert!(cov.iter().all(|&c| c == 2.0));
    }

    #[test]
    fn stacked_moments_identical_persons_give_zero_covariance() {
        let block = DMatrix::from_fn(5, 3, |_, k| k as f64 + 0.5);
        let panel = PanelDataset::new(default_schema(), vec![block.clone(), block.clone(), block]).unwrap();
        let (_, cov) = stacked_moments(&panel, &[0, 1, 2]).unwrap();
        assert_eq!(cov.shape(), (9, 9));
        assert!(cov.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn stacked_ordering_is_variable_major() {
        let y = DMatrix::from_fn(4, 3, |i, k| (i * 10 + k) as f64);
        let a = DMatrix::from_fn(4, 3, |i, k| 100.0 + (i * 7 + k) as f64);
        let panel = PanelDataset::new(default_schema(), vec![y, a, DMatrix::zeros(4, 3)]).unwrap();
        let (mean, _) = stacked_moments(&panel, &[1, 0]).unwrap();
        assert_eq!(mean[0], 100.0 + 10.5);
        assert_eq!(mean[3], 15.0);
    }

    #[test]
    fn scores_csv_keeps_centering_header() {
        let block = DMatrix::from_fn(3, 3, |i, k| (i as f64) - (k as f64) * 0.25);
        let scores = ScoreSet::new(default_schema(), vec![block.clone(), block.clone(), block], Centering::ObservedMean)
            .unwrap()
            .with_warning("demo");
        let f = tempfile::NamedTempFile::new().unwrap();
        write_scores_csv(f.path(), &scores).unwrap();
        let back = load_scores_csv(f.path(), &default_schema()).unwrap();
        assert_eq!(back.centering(), Centering::ObservedMean);
        assert_eq!(back.blocks(), scores.blocks());
        assert_eq!(back.warnings(), ["demo".to_string()]);
    }
}
