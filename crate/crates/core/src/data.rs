//! Tabular ingestion, standardization and support/query task sampling.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ColumnData {
    Numeric(Vec<Option<f64>>),
    Categorical(Vec<Option<String>>),
}

impl ColumnData {
    pub fn len(&self) -> usize {
        match self {
            ColumnData::Numeric(v) => v.len(),
            ColumnData::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> ColumnKind {
        match self {
            ColumnData::Numeric(_) => ColumnKind::Numeric,
            ColumnData::Categorical(_) => ColumnKind::Categorical,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Column {
    pub name: String,
    pub data: ColumnData,
}

impl Column {
    pub fn numeric(name: impl Into<String>, values: Vec<Option<f64>>) -> Self {
        Self {
            name: name.into(),
            data: ColumnData::Numeric(values),
        }
    }

    pub fn categorical<S: Into<String>>(name: impl Into<String>, values: Vec<Option<S>>) -> Self {
        Self {
            name: name.into(),
            data: ColumnData::Categorical(values.into_iter().map(|v| v.map(Into::into)).collect()),
        }
    }
}

/// Typed columns plus integer labels. `labels` is empty for unlabeled data.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    columns: Vec<Column>,
    labels: Vec<usize>,
    n_rows: usize,
}

impl RawDataset {
    pub fn new(columns: Vec<Column>, labels: Vec<usize>) -> Result<Self> {
        let n_rows = columns
            .first()
            .map(|c| c.data.len())
            .unwrap_or(labels.len());
        if let Some(c) = columns.iter().find(|c| c.data.len() != n_rows) {
            return Err(Error::Shape(format!(
                "column `{}` has {} rows, expected {n_rows}",
                c.name,
                c.data.len()
            )));
        }
        if !labels.is_empty() && labels.len() != n_rows {
            return Err(Error::Shape(format!(
                "{} labels for {n_rows} rows",
                labels.len()
            )));
        }
        Ok(Self {
            columns,
            labels,
            n_rows,
        })
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ColumnState {
    Numeric {
        name: String,
        impute: f64,
        mean: f64,
        std: f64,
    },
    Categorical {
        name: String,
        impute: String,
        vocabulary: Vec<String>,
    },
}

impl ColumnState {
    pub fn name(&self) -> &str {
        match self {
            ColumnState::Numeric { name, .. } | ColumnState::Categorical { name, .. } => name,
        }
    }

    pub fn kind(&self) -> ColumnKind {
        match self {
            ColumnState::Numeric { .. } => ColumnKind::Numeric,
            ColumnState::Categorical { .. } => ColumnKind::Categorical,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            ColumnState::Numeric { .. } => 1,
            ColumnState::Categorical { vocabulary, .. } => vocabulary.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StandardizerState {
    pub columns: Vec<ColumnState>,
}

impl StandardizerState {
    /// Width of the design matrix after one-hot expansion.
    pub fn d_in(&self) -> usize {
        self.columns.iter().map(ColumnState::width).sum()
    }

    /// A state that leaves already-standardized numeric columns untouched.
    pub fn identity(names: &[&str]) -> Self {
        Self {
            columns: names
                .iter()
                .map(|n| ColumnState::Numeric {
                    name: n.to_string(),
                    impute: 0.0,
                    mean: 0.0,
                    std: 1.0,
                })
                .collect(),
        }
    }
}

/// Dense standardized features and labels (`y` empty when unlabeled).
#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrix {
    pub x: Matrix<f64>,
    pub y: Vec<usize>,
}

impl DesignMatrix {
    pub fn new(x: Matrix<f64>, y: Vec<usize>) -> Result<Self> {
        if !y.is_empty() && y.len() != x.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} rows",
                y.len(),
                x.rows()
            )));
        }
        if !x.all_finite() {
            return Err(Error::Shape("design matrix has non-finite entries".into()));
        }
        Ok(Self { x, y })
    }

    pub fn n_rows(&self) -> usize {
        self.x.rows()
    }

    pub fn d_in(&self) -> usize {
        self.x.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.y.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            y: if self.y.is_empty() {
                Vec::new()
            } else {
                idx.iter().map(|&i| self.y[i]).collect()
            },
        }
    }

    pub fn select_cols(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_cols(idx),
            y: self.y.clone(),
        }
    }

    /// Population standard deviation of each column.
    pub fn column_stds(&self) -> Vec<f64> {
        let means = self.x.col_means();
        let n = self.n_rows().max(1) as f64;
        let mut var = vec![0.0; self.d_in()];
        for i in 0..self.n_rows() {
            for (j, v) in self.x.row(i).iter().enumerate() {
                var[j] += (v - means[j]).powi(2);
            }
        }
        var.into_iter().map(|v| (v / n).sqrt()).collect()
    }
}

// Order-independent summation: sorting first makes the result bit-identical
// under any row permutation.
fn sorted_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn fit_standardizer(train: &RawDataset) -> Result<StandardizerState> {
    if train.n_rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let columns = train
        .columns()
        .iter()
        .map(|col| match &col.data {
            ColumnData::Numeric(values) => {
                let mut observed: Vec<f64> = values.iter().flatten().copied().collect();
                if observed.is_empty() {
                    return Err(Error::FullyMissingColumn(col.name.clone()));
                }
                let impute = sorted_mean(&mut observed);
                let mut filled: Vec<f64> = values.iter().map(|v| v.unwrap_or(impute)).collect();
                let mean = sorted_mean(&mut filled);
                let mut sq: Vec<f64> = filled.iter().map(|v| (v - mean).powi(2)).collect();
                let std = sorted_mean(&mut sq).sqrt();
                Ok(ColumnState::Numeric {
                    name: col.name.clone(),
                    impute,
                    mean,
                    std,
                })
            }
            ColumnData::Categorical(values) => {
                let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
                for v in values.iter().flatten() {
                    *counts.entry(v.as_str()).or_default() += 1;
                }
                // Highest count wins; ties go to the smallest category.
                let impute = counts
                    .iter()
                    .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                    .map(|(k, _)| k.to_string())
                    .ok_or_else(|| Error::FullyMissingColumn(col.name.clone()))?;
                Ok(ColumnState::Categorical {
                    name: col.name.clone(),
                    impute,
                    vocabulary: counts.keys().map(|k| k.to_string()).collect(),
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StandardizerState { columns })
}

pub fn apply_standardizer(state: &StandardizerState, raw: &RawDataset) -> Result<DesignMatrix> {
    if state.columns.len() != raw.n_cols() {
        return Err(Error::Schema(format!(
            "expected {} columns, found {}",
            state.columns.len(),
            raw.n_cols()
        )));
    }
    let n = raw.n_rows();
    let d_in = state.d_in();
    let mut x = Matrix::zeros(n, d_in);
    let mut offset = 0;
    for (cs, col) in state.columns.iter().zip(raw.columns()) {
        if cs.name() != col.name || cs.kind() != col.data.kind() {
            return Err(Error::Schema(format!(
                "column `{}` ({:?}) does not match fitted column `{}` ({:?})",
                col.name,
                col.data.kind(),
                cs.name(),
                cs.kind()
            )));
        }
        match (cs, &col.data) {
            (ColumnState::Numeric { impute, mean, std, .. }, ColumnData::Numeric(values)) => {
                let scale = if *std > 0.0 { *std } else { 1.0 };
                for (i, v) in values.iter().enumerate() {
                    x.set(i, offset, (v.unwrap_or(*impute) - mean) / scale);
                }
            }
            (
                ColumnState::Categorical {
                    impute, vocabulary, ..
                },
                ColumnData::Categorical(values),
            ) => {
                for (i, v) in values.iter().enumerate() {
                    let v = v.as_deref().unwrap_or(impute);
                    if let Ok(k) = vocabulary.binary_search_by(|c| c.as_str().cmp(v)) {
                        x.set(i, offset + k, 1.0);
                    }
                }
            }
            _ => unreachable!("kinds checked above"),
        }
        offset += cs.width();
    }
    DesignMatrix::new(x, raw.labels().to_vec())
}

/// One meta-learning task: a labeled support set and a query set.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSample {
    pub support_x: Matrix<f64>,
    pub support_y: Vec<usize>,
    pub query_x: Matrix<f64>,
    pub query_y: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct TaskSpec {
    pub max_support: usize,
    pub max_query: usize,
    pub min_per_class: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            max_support: 2048,
            max_query: 2048,
            min_per_class: 2,
        }
    }
}

/// Stratified draw without replacement: `min_per_class` rows from every class
/// that has that many, then a uniform fill up to `max_rows`. Returns sorted
/// row indices.
pub fn stratified_indices<R: Rng + ?Sized>(
    y: &[usize],
    max_rows: usize,
    min_per_class: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in y.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    by_class.retain(|_, rows| rows.len() >= min_per_class.max(1));
    if by_class.is_empty() {
        return Err(Error::NoEligibleClass { min_per_class });
    }
    let eligible: usize = by_class.values().map(Vec::len).sum();
    if eligible <= max_rows {
        let mut all: Vec<usize> = by_class.into_values().flatten().collect();
        all.sort_unstable();
        return Ok(all);
    }
    let mut per_class = min_per_class.max(1);
    while per_class > 1 && per_class * by_class.len() > max_rows {
        per_class -= 1;
    }
    if by_class.len() > max_rows {
        return Err(Error::Config(format!(
            "{} classes cannot fit into a support of {max_rows} rows",
            by_class.len()
        )));
    }
    let mut chosen = Vec::with_capacity(max_rows);
    let mut rest = Vec::new();
    for rows in by_class.values_mut() {
        rows.shuffle(rng);
        chosen.extend_from_slice(&rows[..per_class]);
        rest.extend_from_slice(&rows[per_class..]);
    }
    rest.shuffle(rng);
    let fill = max_rows - chosen.len();
    chosen.extend_from_slice(&rest[..fill]);
    chosen.sort_unstable();
    Ok(chosen)
}

pub fn sample_task<R: Rng + ?Sized>(
    train: &DesignMatrix,
    test: &DesignMatrix,
    spec: &TaskSpec,
    rng: &mut R,
) -> Result<TaskSample> {
    let support = stratified_indices(&train.y, spec.max_support, spec.min_per_class, rng)?;
    let support_y: Vec<usize> = support.iter().map(|&i| train.y[i]).collect();
    let classes: BTreeSet<usize> = support_y.iter().copied().collect();

    let mut query: Vec<usize> = (0..test.n_rows())
        .filter(|&i| classes.contains(&test.y[i]))
        .collect();
    if query.len() > spec.max_query {
        query.shuffle(rng);
        query.truncate(spec.max_query);
        query.sort_unstable();
    }
    Ok(TaskSample {
        support_x: train.x.select_rows(&support),
        support_y,
        query_x: test.x.select_rows(&query),
        query_y: query.iter().map(|&i| test.y[i]).collect(),
    })
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

pub fn is_missing(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty()
        || t.eq_ignore_ascii_case("na")
        || t.eq_ignore_ascii_case("nan")
        || t == "?"
}

/// Header plus string cells, as read from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn read<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .from_reader(reader);
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::Csv(e.to_string()))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let rows = rdr
            .records()
            .map(|r| {
                r.map(|rec| rec.iter().map(str::to_string).collect())
                    .map_err(|e| Error::Csv(e.to_string()))
            })
            .collect::<Result<Vec<Vec<String>>>>()?;
        Ok(Self { header, rows })
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
        Self::read(std::io::BufReader::new(file))
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not found")))
    }

    pub fn column(&self, name: &str) -> Result<Vec<&str>> {
        let j = self.column_index(name)?;
        Ok(self.rows.iter().map(|r| r[j].as_str()).collect())
    }

    /// Feature columns (everything except `label`) with inferred kinds: a
    /// column is categorical iff a non-missing cell fails to parse as a number,
    /// or its name is listed in `categorical`.
    pub fn infer_schema(&self, label: Option<&str>, categorical: &[String]) -> Vec<(String, ColumnKind)> {
        self.header
            .iter()
            .enumerate()
            .filter(|(_, h)| Some(h.as_str()) != label)
            .map(|(j, h)| {
                let forced = categorical.iter().any(|c| c == h);
                let numeric = self
                    .rows
                    .iter()
                    .map(|r| r[j].as_str())
                    .filter(|c| !is_missing(c))
                    .all(|c| c.trim().parse::<f64>().is_ok());
                let kind = if forced || !numeric {
                    ColumnKind::Categorical
                } else {
                    ColumnKind::Numeric
                };
                (h.clone(), kind)
            })
            .collect()
    }

    pub fn feature_columns(&self, schema: &[(String, ColumnKind)]) -> Result<Vec<Column>> {
        schema
            .iter()
            .map(|(name, kind)| {
                let cells = self.column(name)?;
                let data = match kind {
                    ColumnKind::Numeric => ColumnData::Numeric(
                        cells
                            .iter()
                            .enumerate()
                            .map(|(i, c)| {
                                if is_missing(c) {
                                    return Ok(None);
                                }
                                c.trim().parse::<f64>().map(Some).map_err(|_| {
                                    Error::Schema(format!(
                                        "row {i}: `{c}` in numeric column `{name}`"
                                    ))
                                })
                            })
                            .collect::<Result<_>>()?,
                    ),
                    ColumnKind::Categorical => ColumnData::Categorical(
                        cells
                            .iter()
                            .map(|c| (!is_missing(c)).then(|| c.trim().to_string()))
                            .collect(),
                    ),
                };
                Ok(Column {
                    name: name.clone(),
                    data,
                })
            })
            .collect()
    }
}

/// Mapping between label strings and integer classes. Labels sort
/// numerically when every label parses as a number, lexicographically
/// otherwise.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVocab {
    names: Vec<String>,
}

impl LabelVocab {
    pub fn from_names<'a>(cells: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for c in cells {
            if is_missing(c) {
                return Err(Error::Csv("missing label".into()));
            }
            set.insert(c.trim().to_string());
        }
        let mut names: Vec<String> = set.into_iter().collect();
        if names.iter().all(|n| n.parse::<f64>().is_ok()) {
            names.sort_by(|a, b| {
                a.parse::<f64>()
                    .unwrap()
                    .total_cmp(&b.parse::<f64>().unwrap())
                    .then(a.cmp(b))
            });
        }
        Ok(Self { names })
    }

    pub fn new(names: Vec<String>) -> Self {
        Self { names }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn encode(&self, label: &str) -> Result<usize> {
        let l = label.trim();
        self.names
            .iter()
            .position(|n| n == l)
            .ok_or_else(|| Error::Schema(format!("unknown label `{l}`")))
    }
}
