//! CSV ingestion and emission for domain-labeled tabular data.

use super::{DataError, DomainDataset};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Column roles, declared by header name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub feature_columns: Vec<String>,
    pub label_column: String,
    pub domain_column: String,
}

impl CsvSchema {
    /// Default column names `x0..x{dim-1}`, `label`, `domain`.
    pub fn default_for_dim(dim: usize) -> Self {
        CsvSchema {
            feature_columns: (0..dim).map(|j| format!("x{j}")).collect(),
            label_column: "label".into(),
            domain_column: "domain".into(),
        }
    }
}

fn csv_err(path: &Path, source: ::csv::Error) -> DataError {
    DataError::Csv {
        path: path.display().to_string(),
        source,
    }
}

/// Loads a header-full CSV into a dataset. Rows with missing or
/// non-numeric cells are rejected with their line number and column name.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<DomainDataset, DataError> {
    let mut reader = ::csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;

    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let feature_idx: Vec<usize> = schema
        .feature_columns
        .iter()
        .map(|c| col(c))
        .collect::<Result<_, _>>()?;
    let label_idx = col(&schema.label_column)?;
    let domain_idx = col(&schema.domain_column)?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut domains = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let cell = |idx: usize, column: &str| -> Result<&str, DataError> {
            match record.get(idx) {
                Some(v) if !v.trim().is_empty() => Ok(v.trim()),
                _ => Err(DataError::MissingCell {
                    line,
                    column: column.to_string(),
                }),
            }
        };
        let mut row = Vec::with_capacity(feature_idx.len());
        for (j, &idx) in feature_idx.iter().enumerate() {
            let column = &schema.feature_columns[j];
            let raw = cell(idx, column)?;
            let value: f64 = raw.parse().map_err(|_| DataError::ParseCell {
                line,
                column: column.clone(),
                value: raw.to_string(),
            })?;
            if !value.is_finite() {
                return Err(DataError::ParseCell {
                    line,
                    column: column.clone(),
                    value: raw.to_string(),
                });
            }
            row.push(value);
        }
        let parse_id = |raw: &str, column: &str| -> Result<usize, DataError> {
            raw.parse().map_err(|_| DataError::ParseCell {
                line,
                column: column.to_string(),
                value: raw.to_string(),
            })
        };
        labels.push(parse_id(
            cell(label_idx, &schema.label_column)?,
            &schema.label_column,
        )?);
        domains.push(parse_id(
            cell(domain_idx, &schema.domain_column)?,
            &schema.domain_column,
        )?);
        rows.push(row);
    }

    if rows.is_empty() {
        return Err(DataError::Empty);
    }
    let dim = feature_idx.len();
    let mut features = Array2::zeros((rows.len(), dim));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            features[(i, j)] = v;
        }
    }
    let num_classes = labels.iter().max().copied().unwrap_or(0) + 1;
    let num_domains = domains.iter().max().copied().unwrap_or(0) + 1;
    DomainDataset::new(features, labels, domains, num_classes, num_domains)
}

/// Writes a dataset with the schema's column names as the header row.
pub fn write_csv(
    path: &Path,
    dataset: &DomainDataset,
    schema: &CsvSchema,
) -> Result<(), DataError> {
    let mut writer = ::csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header: Vec<String> = schema.feature_columns.clone();
    header.push(schema.label_column.clone());
    header.push(schema.domain_column.clone());
    writer.write_record(&header).map_err(|e| csv_err(path, e))?;
    for i in 0..dataset.len() {
        let mut record: Vec<String> = (0..dataset.dim())
            .map(|j| dataset.features()[(i, j)].to_string())
            .collect();
        record.push(dataset.labels()[i].to_string());
        record.push(dataset.domains()[i].to_string());
        writer.write_record(&record).map_err(|e| csv_err(path, e))?;
    }
    writer.flush().map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_a_small_file() {
        let f = write_file("x0,x1,label,domain\n1.0,2.0,0,0\n3.0,4.0,1,1\n5.0,6.0,1,0\n");
        let ds = load_csv(f.path(), &CsvSchema::default_for_dim(2)).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.labels(), &[0, 1, 1]);
        assert_eq!(ds.domain_sizes(), vec![2, 1]);
    }

    #[test]
    fn names_row_and_column_on_parse_error() {
        let f = write_file("x0,label,domain\n1.0,0,0\nnope,1,0\n");
        let err = load_csv(f.path(), &CsvSchema::default_for_dim(1)).unwrap_err();
        match err {
            DataError::ParseCell {
                line,
                column,
                value,
            } => {
                assert_eq!(line, 3);
                assert_eq!(column, "x0");
                assert_eq!(value, "nope");
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn missing_value_is_rejected_with_line() {
        let f = write_file("x0,label,domain\n1.0,0,0\n,1,0\n");
        let err = load_csv(f.path(), &CsvSchema::default_for_dim(1)).unwrap_err();
        assert!(matches!(err, DataError::MissingCell { line: 3, .. }));
    }

    #[test]
    fn missing_column_is_rejected() {
        let f = write_file("x0,label\n1.0,0\n");
        let err = load_csv(f.path(), &CsvSchema::default_for_dim(1)).unwrap_err();
        assert!(matches!(err, DataError::MissingColumn(c) if c == "domain"));
    }

    #[test]
    fn round_trip_preserves_numeric_content() {
        let f = write_file("x0,x1,label,domain\n1.5,-2.25,0,0\n0.125,4.0,1,1\n");
        let schema = CsvSchema::default_for_dim(2);
        let ds = load_csv(f.path(), &schema).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_csv(out.path(), &ds, &schema).unwrap();
        let again = load_csv(out.path(), &schema).unwrap();
        assert_eq!(again, ds);
    }
}
