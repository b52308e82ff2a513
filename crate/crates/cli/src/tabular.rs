//! Turning CSV files into standardized design matrices.

use std::path::Path;

use hyperfast::data::{
    apply_standardizer, fit_standardizer, ColumnKind, CsvTable, DesignMatrix, LabelVocab, RawDataset,
    StandardizerState,
};
use hyperfast::{Error, Result};

/// Optional identifier column; never used as a feature.
pub const ROW_ID: &str = "row_id";

pub fn read_csv(path: &Path) -> Result<CsvTable> {
    CsvTable::from_path(path)
}

/// The named label column, or the last non-`row_id` column.
pub fn label_column(table: &CsvTable, requested: Option<&str>) -> Result<String> {
    match requested {
        Some(name) => {
            table.column_index(name)?;
            Ok(name.to_string())
        }
        None => table
            .header
            .iter()
            .rev()
            .find(|h| h.as_str() != ROW_ID)
            .cloned()
            .ok_or_else(|| Error::Csv("table has no columns".into())),
    }
}

pub fn feature_schema(table: &CsvTable, label: Option<&str>, categorical: &[String]) -> Vec<(String, ColumnKind)> {
    table
        .infer_schema(label, categorical)
        .into_iter()
        .filter(|(name, _)| name != ROW_ID)
        .collect()
}

/// Schema of the columns a fitted standardizer expects.
pub fn fitted_schema(state: &StandardizerState) -> Vec<(String, ColumnKind)> {
    state.columns.iter().map(|c| (c.name().to_string(), c.kind())).collect()
}

pub fn encode_labels(table: &CsvTable, label: &str, vocab: &LabelVocab) -> Result<Vec<usize>> {
    table.column(label)?.into_iter().map(|c| vocab.encode(c)).collect()
}

/// Row identifiers: the `row_id` column when present, else 0-based indices.
pub fn row_ids(table: &CsvTable) -> Vec<String> {
    match table.column(ROW_ID) {
        Ok(ids) => ids.into_iter().map(|s| s.trim().to_string()).collect(),
        Err(_) => (0..table.rows.len()).map(|i| i.to_string()).collect(),
    }
}

/// A labeled training table, standardized with its own statistics.
pub struct TrainingTable {
    pub data: DesignMatrix,
    pub standardizer: StandardizerState,
    pub labels: LabelVocab,
    pub label_column: String,
}

pub fn load_training(table: &CsvTable, label: Option<&str>, categorical: &[String]) -> Result<TrainingTable> {
    let label_column = label_column(table, label)?;
    let labels = LabelVocab::from_names(table.column(&label_column)?)?;
    let schema = feature_schema(table, Some(&label_column), categorical);
    if schema.is_empty() {
        return Err(Error::Schema("no feature columns".into()));
    }
    let raw = RawDataset::new(table.feature_columns(&schema)?, encode_labels(table, &label_column, &labels)?)?;
    let standardizer = fit_standardizer(&raw)?;
    Ok(TrainingTable {
        data: apply_standardizer(&standardizer, &raw)?,
        standardizer,
        labels,
        label_column,
    })
}

/// Standardize `table` with a fitted state; labels are encoded when a
/// vocabulary is given.
pub fn apply_fitted(
    table: &CsvTable,
    state: &StandardizerState,
    labels: Option<(&str, &LabelVocab)>,
) -> Result<DesignMatrix> {
    let columns = table.feature_columns(&fitted_schema(state))?;
    let y = match labels {
        Some((column, vocab)) => encode_labels(table, column, vocab)?,
        None => Vec::new(),
    };
    if columns.is_empty() {
        return Err(Error::Schema("no feature columns".into()));
    }
    apply_standardizer(state, &RawDataset::new(columns, y)?)
}
