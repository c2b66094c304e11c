//! Train/validation/test domain-split bookkeeping.

use super::{DataError, DomainDataset};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Which domains feed training, held-out validation and DG testing, plus
/// the in-domain validation/test fractions carved out of the training
/// domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_domains: BTreeSet<usize>,
    #[serde(default)]
    pub heldout_validation_domains: BTreeSet<usize>,
    pub test_domains: BTreeSet<usize>,
    pub in_domain_val_fraction: f64,
    pub in_domain_test_fraction: f64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        for d in &self.train_domains {
            if self.heldout_validation_domains.contains(d) || self.test_domains.contains(d) {
                return Err(DataError::OverlappingSplit(*d));
            }
        }
        for d in &self.heldout_validation_domains {
            if self.test_domains.contains(d) {
                return Err(DataError::OverlappingSplit(*d));
            }
        }
        let (v, t) = (self.in_domain_val_fraction, self.in_domain_test_fraction);
        if !(v > 0.0 && v < 1.0 && t > 0.0 && t < 1.0 && v + t < 1.0) {
            return Err(DataError::InvalidFractions);
        }
        Ok(())
    }
}

/// Row indices (into the source dataset) per split, for auditability.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<usize>,
    pub in_domain_val: Vec<usize>,
    pub in_domain_test: Vec<usize>,
    pub heldout_val: Vec<usize>,
    pub dg_test: Vec<usize>,
    pub dg_test_eval: Vec<usize>,
    pub dg_test_pool: Vec<usize>,
}

/// The five benchmark splits plus the 20/80 partition of the DG test set
/// (the small part is the evaluation holdout, the large one the
/// cheat-training pool).
#[derive(Debug, Clone)]
pub struct SplitOutput {
    pub train: DomainDataset,
    pub in_domain_val: DomainDataset,
    pub in_domain_test: DomainDataset,
    pub heldout_val: DomainDataset,
    pub dg_test: DomainDataset,
    pub dg_test_eval: DomainDataset,
    pub dg_test_pool: DomainDataset,
    pub manifest: SplitManifest,
}

const DG_TEST_EVAL_FRACTION: f64 = 0.2;

/// Splits training-domain samples per-domain into train / in-domain-val /
/// in-domain-test by a seeded shuffle; held-out and test domains pass
/// through whole, with the test domains additionally carved 20/80.
pub fn apply_split(
    dataset: &DomainDataset,
    spec: &SplitSpec,
    seed: u64,
) -> Result<SplitOutput, DataError> {
    spec.validate()?;
    let present: BTreeSet<usize> = dataset.present_domains().into_iter().collect();
    for set in [
        &spec.train_domains,
        &spec.heldout_validation_domains,
        &spec.test_domains,
    ] {
        if let Some(&d) = set.iter().find(|d| !present.contains(d)) {
            return Err(DataError::SplitDomainAbsent(d));
        }
    }
    for &d in &present {
        if !spec.train_domains.contains(&d)
            && !spec.heldout_validation_domains.contains(&d)
            && !spec.test_domains.contains(&d)
        {
            return Err(DataError::UncoveredDomain(d));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = SplitManifest {
        train: Vec::new(),
        in_domain_val: Vec::new(),
        in_domain_test: Vec::new(),
        heldout_val: Vec::new(),
        dg_test: Vec::new(),
        dg_test_eval: Vec::new(),
        dg_test_pool: Vec::new(),
    };

    for &d in &spec.train_domains {
        let mut idx = dataset.domain_indices(d);
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_val = (spec.in_domain_val_fraction * n as f64).floor() as usize;
        let n_test = (spec.in_domain_test_fraction * n as f64).floor() as usize;
        manifest.in_domain_val.extend_from_slice(&idx[..n_val]);
        manifest
            .in_domain_test
            .extend_from_slice(&idx[n_val..n_val + n_test]);
        manifest.train.extend_from_slice(&idx[n_val + n_test..]);
    }
    for &d in &spec.heldout_validation_domains {
        manifest.heldout_val.extend(dataset.domain_indices(d));
    }
    for &d in &spec.test_domains {
        let mut idx = dataset.domain_indices(d);
        manifest.dg_test.extend_from_slice(&idx);
        idx.shuffle(&mut rng);
        let n_eval = (DG_TEST_EVAL_FRACTION * idx.len() as f64).floor() as usize;
        manifest.dg_test_eval.extend_from_slice(&idx[..n_eval]);
        manifest.dg_test_pool.extend_from_slice(&idx[n_eval..]);
    }

    Ok(SplitOutput {
        train: dataset.subset(&manifest.train),
        in_domain_val: dataset.subset(&manifest.in_domain_val),
        in_domain_test: dataset.subset(&manifest.in_domain_test),
        heldout_val: dataset.subset(&manifest.heldout_val),
        dg_test: dataset.subset(&manifest.dg_test),
        dg_test_eval: dataset.subset(&manifest.dg_test_eval),
        dg_test_pool: dataset.subset(&manifest.dg_test_pool),
        manifest,
    })
}
