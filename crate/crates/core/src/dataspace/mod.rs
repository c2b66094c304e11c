//! Multi-domain datasets: synthetic generation, CSV ingestion and the
//! train/validation/test domain-split bookkeeping.

mod csv_io;
mod split;
mod synthetic;

pub use csv_io::{load_csv, write_csv, CsvSchema};
pub use split::{apply_split, SplitManifest, SplitOutput, SplitSpec};
pub use synthetic::{generate_synthetic, ShiftKind, ShiftRecipe};

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset has no samples")]
    Empty,
    #[error("feature matrix has {rows} rows but {labels} labels and {domains} domain ids")]
    LengthMismatch {
        rows: usize,
        labels: usize,
        domains: usize,
    },
    #[error("non-finite feature value at row {row}, column {column}")]
    NonFiniteFeature { row: usize, column: usize },
    #[error("label {label} at row {row} exceeds {classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("domain {domain} at row {row} exceeds {domains} domains")]
    DomainOutOfRange {
        row: usize,
        domain: usize,
        domains: usize,
    },
    #[error("domain {0} has no samples")]
    EmptyDomain(usize),
    #[error("invalid generator arguments: {0}")]
    InvalidRecipe(String),
    #[error("split domain sets overlap on domain {0}")]
    OverlappingSplit(usize),
    #[error("split fractions must lie in (0, 1) and sum below 1")]
    InvalidFractions,
    #[error("split references domain {0}, which is absent from the data")]
    SplitDomainAbsent(usize),
    #[error("domain {0} is not covered by any split set")]
    UncoveredDomain(usize),
    #[error("datasets disagree on dimensions and cannot be combined")]
    IncompatibleDatasets,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error on {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: ::csv::Error,
    },
    #[error("missing column '{0}' in csv header")]
    MissingColumn(String),
    #[error("line {line}, column '{column}': cannot parse '{value}'")]
    ParseCell {
        line: u64,
        column: String,
        value: String,
    },
    #[error("line {line}, column '{column}': missing value")]
    MissingCell { line: u64, column: String },
}

/// Samples tagged with domain identifiers. Rows are samples; `labels` are
/// class ids below `num_classes` and `domains` are domain ids below
/// `num_domains`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    domains: Vec<usize>,
    num_classes: usize,
    num_domains: usize,
}

impl DomainDataset {
    /// Validating constructor for source datasets: at least one sample,
    /// finite features, ids in range, and no empty domain below
    /// `num_domains`.
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        domains: Vec<usize>,
        num_classes: usize,
        num_domains: usize,
    ) -> Result<Self, DataError> {
        let ds = DomainDataset::from_parts(features, labels, domains, num_classes, num_domains)?;
        if ds.is_empty() {
            return Err(DataError::Empty);
        }
        let sizes = ds.domain_sizes();
        if let Some(d) = sizes.iter().position(|&n| n == 0) {
            return Err(DataError::EmptyDomain(d));
        }
        Ok(ds)
    }

    /// Structural constructor used for derived subsets; permits empty
    /// datasets and empty domains (a split may own none of some domain).
    pub(crate) fn from_parts(
        features: Array2<f64>,
        labels: Vec<usize>,
        domains: Vec<usize>,
        num_classes: usize,
        num_domains: usize,
    ) -> Result<Self, DataError> {
        let rows = features.nrows();
        if labels.len() != rows || domains.len() != rows {
            return Err(DataError::LengthMismatch {
                rows,
                labels: labels.len(),
                domains: domains.len(),
            });
        }
        for (row, r) in features.rows().into_iter().enumerate() {
            if let Some(column) = r.iter().position(|v| !v.is_finite()) {
                return Err(DataError::NonFiniteFeature { row, column });
            }
        }
        for (row, &label) in labels.iter().enumerate() {
            if label >= num_classes {
                return Err(DataError::LabelOutOfRange {
                    row,
                    label,
                    classes: num_classes,
                });
            }
        }
        for (row, &domain) in domains.iter().enumerate() {
            if domain >= num_domains {
                return Err(DataError::DomainOutOfRange {
                    row,
                    domain,
                    domains: num_domains,
                });
            }
        }
        Ok(DomainDataset {
            features,
            labels,
            domains,
            num_classes,
            num_domains,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_domains(&self) -> usize {
        self.num_domains
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn domains(&self) -> &[usize] {
        &self.domains
    }

    /// Sample count per domain id `0..num_domains`.
    pub fn domain_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.num_domains];
        for &d in &self.domains {
            sizes[d] += 1;
        }
        sizes
    }

    /// Domain ids that actually occur, ascending.
    pub fn present_domains(&self) -> Vec<usize> {
        self.domain_sizes()
            .iter()
            .enumerate()
            .filter(|&(_, &n)| n > 0)
            .map(|(d, _)| d)
            .collect()
    }

    /// Row indices of one domain, in dataset order.
    pub fn domain_indices(&self, domain: usize) -> Vec<usize> {
        self.domains
            .iter()
            .enumerate()
            .filter(|&(_, &d)| d == domain)
            .map(|(i, _)| i)
            .collect()
    }

    /// New dataset holding the given rows (in the given order). Class and
    /// domain vocabularies are preserved.
    pub fn subset(&self, indices: &[usize]) -> DomainDataset {
        let mut features = Array2::zeros((indices.len(), self.dim()));
        let mut labels = Vec::with_capacity(indices.len());
        let mut domains = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            features.row_mut(row).assign(&self.features.row(i));
            labels.push(self.labels[i]);
            domains.push(self.domains[i]);
        }
        DomainDataset {
            features,
            labels,
            domains,
            num_classes: self.num_classes,
            num_domains: self.num_domains,
        }
    }

    /// Concatenation with the same dimensions and vocabularies.
    pub fn concat(&self, other: &DomainDataset) -> Result<DomainDataset, DataError> {
        if self.dim() != other.dim()
            || self.num_classes != other.num_classes
            || self.num_domains != other.num_domains
        {
            return Err(DataError::IncompatibleDatasets);
        }
        let n = self.len() + other.len();
        let mut features = Array2::zeros((n, self.dim()));
        for (row, r) in self
            .features
            .rows()
            .into_iter()
            .chain(other.features.rows())
            .enumerate()
        {
            features.row_mut(row).assign(&r);
        }
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let mut domains = self.domains.clone();
        domains.extend_from_slice(&other.domains);
        Ok(DomainDataset {
            features,
            labels,
            domains,
            num_classes: self.num_classes,
            num_domains: self.num_domains,
        })
    }

    /// Content digest over dimensions, features, labels and domain ids.
    pub fn digest(&self) -> String {
        let mut h = crate::util::Fnv1a::new();
        h.update_u64(self.len() as u64);
        h.update_u64(self.dim() as u64);
        h.update_u64(self.num_classes as u64);
        h.update_u64(self.num_domains as u64);
        for &v in self.features.iter() {
            h.update_f64(v);
        }
        for &l in &self.labels {
            h.update_u64(l as u64);
        }
        for &d in &self.domains {
            h.update_u64(d as u64);
        }
        h.finish_hex()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn new_rejects_empty_and_out_of_range() {
        let err = DomainDataset::new(Array2::zeros((0, 2)), vec![], vec![], 2, 1).unwrap_err();
        assert!(matches!(err, DataError::Empty));
        let err = DomainDataset::new(array![[0.0, 1.0]], vec![5], vec![0], 2, 1).unwrap_err();
        assert!(matches!(err, DataError::LabelOutOfRange { .. }));
        let err = DomainDataset::new(array![[0.0, f64::NAN]], vec![0], vec![0], 2, 1).unwrap_err();
        assert!(matches!(
            err,
            DataError::NonFiniteFeature { row: 0, column: 1 }
        ));
    }

    #[test]
    fn new_rejects_gap_domains() {
        // num_domains = 2 but only domain 0 is populated
        let err = DomainDataset::new(array![[1.0]], vec![0], vec![0], 1, 2).unwrap_err();
        assert!(matches!(err, DataError::EmptyDomain(1)));
    }

    #[test]
    fn subset_and_concat_round_trip() {
        let ds = DomainDataset::new(
            array![[1.0], [2.0], [3.0]],
            vec![0, 1, 0],
            vec![0, 0, 1],
            2,
            2,
        )
        .unwrap();
        let a = ds.subset(&[0, 2]);
        let b = ds.subset(&[1]);
        let joined = a.concat(&b).unwrap();
        assert_eq!(joined.len(), 3);
        assert_eq!(joined.labels(), &[0, 0, 1]);
        assert_eq!(ds.domain_sizes(), vec![2, 1]);
    }
}
