//! Synthetic multi-domain generators with controllable domain shift.

use super::{DataError, DomainDataset};
use crate::util::largest_remainder;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// How the per-domain shift is realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShiftKind {
    /// Adds a per-domain offset to all class means.
    #[serde(rename = "mean-shift")]
    MeanShift,
    /// Rotates the first two feature coordinates by a per-domain angle.
    #[serde(rename = "rotation")]
    Rotation,
    /// Tilts the class priors per domain (subpopulation shift).
    #[serde(rename = "label-flip-subpopulation")]
    LabelFlipSubpopulation,
}

/// Recipe for a multi-domain Gaussian-cluster dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRecipe {
    pub kind: ShiftKind,
    /// Shift magnitude per domain (offset length, angle in radians, or
    /// prior tilt, depending on `kind`).
    pub magnitudes: Vec<f64>,
    pub class_separation: f64,
    pub noise_scale: f64,
}

impl ShiftRecipe {
    fn validate(&self, domains: usize, dim: usize) -> Result<(), DataError> {
        if self.magnitudes.len() != domains {
            return Err(DataError::InvalidRecipe(format!(
                "recipe lists {} magnitudes for {} domains",
                self.magnitudes.len(),
                domains
            )));
        }
        if self.magnitudes.iter().any(|m| !m.is_finite()) {
            return Err(DataError::InvalidRecipe("magnitudes must be finite".into()));
        }
        if self.noise_scale <= 0.0 || self.noise_scale.is_nan() {
            return Err(DataError::InvalidRecipe(
                "noise scale must be positive".into(),
            ));
        }
        if !self.class_separation.is_finite() {
            return Err(DataError::InvalidRecipe(
                "class separation must be finite".into(),
            ));
        }
        if self.kind == ShiftKind::Rotation && dim < 2 {
            return Err(DataError::InvalidRecipe(
                "rotation needs at least 2 feature dimensions".into(),
            ));
        }
        Ok(())
    }
}

fn standard_normal_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v = standard_normal_vec(rng, dim);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

/// Gaussian class clusters per domain. Class means and shift directions are
/// drawn from a structure stream shared by all domains; each domain's
/// samples come from an independent stream keyed by its index, so the shift
/// magnitude is the only thing distinguishing domain distributions.
pub fn generate_synthetic(
    recipe: &ShiftRecipe,
    domains: usize,
    classes: usize,
    n_per_domain: usize,
    dim: usize,
    seed: u64,
) -> Result<DomainDataset, DataError> {
    if domains == 0 || classes == 0 || n_per_domain == 0 || dim == 0 {
        return Err(DataError::InvalidRecipe(
            "domains, classes, samples per domain and dim must be >= 1".into(),
        ));
    }
    recipe.validate(domains, dim)?;

    // shared structure: class means and the shift axis; domains differ
    // only in how far along the axis their clusters sit
    let mut structure = ChaCha8Rng::seed_from_u64(seed);
    structure.set_stream(u64::MAX);
    let class_means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            unit_vec(&mut structure, dim)
                .into_iter()
                .map(|x| x * recipe.class_separation)
                .collect()
        })
        .collect();
    let shift_axis = unit_vec(&mut structure, dim);

    let total = domains * n_per_domain;
    let mut features = Array2::zeros((total, dim));
    let mut labels = Vec::with_capacity(total);
    let mut domain_ids = Vec::with_capacity(total);

    let mut row = 0;
    for d in 0..domains {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(d as u64);
        let magnitude = recipe.magnitudes[d];

        // class counts for this domain
        let weights: Vec<f64> = (0..classes)
            .map(|k| {
                if recipe.kind == ShiftKind::LabelFlipSubpopulation && k == d % classes {
                    1.0 + magnitude.abs()
                } else {
                    1.0
                }
            })
            .collect();
        let wsum: f64 = weights.iter().sum();
        let shares: Vec<f64> = weights
            .iter()
            .map(|w| w / wsum * n_per_domain as f64)
            .collect();
        let counts = largest_remainder(&shares, n_per_domain);

        for (k, &count) in counts.iter().enumerate() {
            for _ in 0..count {
                let mut x = standard_normal_vec(&mut rng, dim);
                for (j, v) in x.iter_mut().enumerate() {
                    *v = class_means[k][j] + recipe.noise_scale * *v;
                }
                match recipe.kind {
                    ShiftKind::MeanShift => {
                        for (j, v) in x.iter_mut().enumerate() {
                            *v += magnitude * shift_axis[j];
                        }
                    }
                    ShiftKind::Rotation => {
                        let (sin, cos) = magnitude.sin_cos();
                        let (a, b) = (x[0], x[1]);
                        x[0] = cos * a - sin * b;
                        x[1] = sin * a + cos * b;
                    }
                    ShiftKind::LabelFlipSubpopulation => {}
                }
                for (j, &v) in x.iter().enumerate() {
                    features[(row, j)] = v;
                }
                labels.push(k);
                domain_ids.push(d);
                row += 1;
            }
        }
    }

    DomainDataset::new(features, labels, domain_ids, classes, domains)
}
