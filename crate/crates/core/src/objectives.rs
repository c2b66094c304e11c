//! Local training objectives and penalties, each a pure computation over
//! batches grouped by domain.
//!
//! Every penalty comes in a value-only and a value-plus-gradient form; the
//! gradients are analytic and are exercised against finite differences in
//! the test suite. Representation-space penalties (CORAL, MMD, FedSR)
//! return gradients with respect to the representations, which callers
//! chain through [`crate::model::backward_from_representation`].

use crate::model::{
    backward_from_logits, forward, loss_value, softmax, LossKind, ModelError, ModelSpec,
    ParamVector, Targets,
};
use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use thiserror::Error;

/// Penalty value with per-domain representation gradients.
pub type PenaltyWithReprGrads = (f64, Vec<Array2<f64>>);

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("no domain batches supplied")]
    NoDomains,
    #[error("penalty needs at least 2 domains, got {0}")]
    TooFewDomains(usize),
    #[error("domain {domain} has {n} samples, need at least {required}")]
    TooFewSamples {
        domain: usize,
        n: usize,
        required: usize,
    },
    #[error("representation batches disagree on width")]
    WidthMismatch,
    #[error("batch shapes do not match")]
    ShapeMismatch,
    #[error("bandwidth must be positive, got {0}")]
    InvalidBandwidth(f64),
    #[error("mixup alpha must be positive, got {0}")]
    InvalidAlpha(f64),
    #[error("empty input")]
    EmptyInput,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Feature/label batch for a single domain present on one client.
#[derive(Debug, Clone)]
pub struct DomainBatch {
    pub domain: usize,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

/// Groups a mixed batch by domain id, ascending.
pub fn group_by_domain(
    features: ArrayView2<f64>,
    labels: &[usize],
    domains: &[usize],
) -> Vec<DomainBatch> {
    let mut present: Vec<usize> = domains.to_vec();
    present.sort_unstable();
    present.dedup();
    present
        .into_iter()
        .map(|d| {
            let rows: Vec<usize> = domains
                .iter()
                .enumerate()
                .filter(|&(_, &dd)| dd == d)
                .map(|(i, _)| i)
                .collect();
            let mut sub = Array2::zeros((rows.len(), features.ncols()));
            let mut sub_labels = Vec::with_capacity(rows.len());
            for (r, &i) in rows.iter().enumerate() {
                sub.row_mut(r).assign(&features.row(i));
                sub_labels.push(labels[i]);
            }
            DomainBatch {
                domain: d,
                features: sub,
                labels: sub_labels,
            }
        })
        .collect()
}

/// Mean per-sample loss over a batch.
pub fn erm_loss(
    spec: &ModelSpec,
    params: &ParamVector,
    features: ArrayView2<f64>,
    labels: &[usize],
    loss: LossKind,
) -> Result<f64, ObjectiveError> {
    Ok(loss_value(
        spec,
        params,
        features,
        Targets::Hard(labels),
        loss,
    )?)
}

fn one_hot(labels: &[usize], k: usize) -> Array2<f64> {
    let mut t = Array2::zeros((labels.len(), k));
    for (i, &y) in labels.iter().enumerate() {
        if k == 1 {
            t[(i, 0)] = y as f64;
        } else {
            t[(i, y)] = 1.0;
        }
    }
    t
}

/// Risk slope through a scalar dummy classifier at 1, plus its gradient
/// with respect to the logits.
fn irm_risk_slope(
    spec: &ModelSpec,
    logits: &Array2<f64>,
    labels: &[usize],
    loss: LossKind,
) -> Result<(f64, Array2<f64>), ObjectiveError> {
    let n = logits.nrows() as f64;
    let k = spec.output_dim();
    let t = one_hot(labels, k);
    match loss {
        LossKind::CrossEntropy => {
            if k < 2 {
                return Err(ObjectiveError::Model(ModelError::CrossEntropyNeedsClasses));
            }
            let p = softmax(logits);
            let mut slope = 0.0;
            for i in 0..logits.nrows() {
                for j in 0..k {
                    slope += (p[(i, j)] - t[(i, j)]) * logits[(i, j)];
                }
            }
            slope /= n;
            let mut grad = Array2::zeros(logits.raw_dim());
            for i in 0..logits.nrows() {
                let z_bar: f64 = (0..k).map(|j| p[(i, j)] * logits[(i, j)]).sum();
                for j in 0..k {
                    grad[(i, j)] =
                        ((p[(i, j)] - t[(i, j)]) + p[(i, j)] * (logits[(i, j)] - z_bar)) / n;
                }
            }
            Ok((slope, grad))
        }
        LossKind::Squared => {
            let mut slope = 0.0;
            for i in 0..logits.nrows() {
                for j in 0..k {
                    slope += 2.0 * (logits[(i, j)] - t[(i, j)]) * logits[(i, j)];
                }
            }
            slope /= n;
            let grad = logits.mapv(|z| 2.0 * 2.0 * z) - &t.mapv(|v| 2.0 * v);
            Ok((slope, grad / n))
        }
    }
}

/// IRMv1 penalty: mean over domains of the squared risk gradient through a
/// scalar dummy classifier fixed at 1.
pub fn irm_penalty(
    spec: &ModelSpec,
    params: &ParamVector,
    batches: &[DomainBatch],
    loss: LossKind,
) -> Result<f64, ObjectiveError> {
    irm_penalty_impl(spec, params, batches, loss, false).map(|(v, _)| v)
}

/// IRM penalty plus its gradient with respect to the parameters.
pub fn irm_penalty_and_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    batches: &[DomainBatch],
    loss: LossKind,
) -> Result<(f64, ParamVector), ObjectiveError> {
    let (v, g) = irm_penalty_impl(spec, params, batches, loss, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn irm_penalty_impl(
    spec: &ModelSpec,
    params: &ParamVector,
    batches: &[DomainBatch],
    loss: LossKind,
    with_grad: bool,
) -> Result<(f64, Option<ParamVector>), ObjectiveError> {
    if batches.is_empty() {
        return Err(ObjectiveError::NoDomains);
    }
    let d = batches.len() as f64;
    let mut penalty = 0.0;
    let mut grad = with_grad.then(|| ParamVector::zeros(spec.layout()));
    for batch in batches {
        let pass = forward(spec, params, batch.features.view())?;
        let (slope, slope_grad) = irm_risk_slope(spec, &pass.logits, &batch.labels, loss)?;
        penalty += slope * slope / d;
        if let Some(total) = grad.as_mut() {
            let contribution =
                backward_from_logits(spec, params, batch.features.view(), slope_grad.view())?;
            total.add_scaled(&contribution, 2.0 * slope / d)?;
        }
    }
    Ok((penalty, grad))
}

fn column_mean(z: &ArrayView2<f64>) -> Vec<f64> {
    let n = z.nrows() as f64;
    z.sum_axis(Axis(0)).iter().map(|s| s / n).collect()
}

/// Population covariance of the rows.
fn covariance(z: &ArrayView2<f64>, mean: &[f64]) -> Array2<f64> {
    let (n, p) = (z.nrows() as f64, z.ncols());
    let mut cov = Array2::zeros((p, p));
    for row in z.rows() {
        for a in 0..p {
            let da = row[a] - mean[a];
            for b in 0..p {
                cov[(a, b)] += da * (row[b] - mean[b]) / n;
            }
        }
    }
    cov
}

fn check_repr_group(reprs: &[Array2<f64>], min_samples: usize) -> Result<usize, ObjectiveError> {
    if reprs.len() < 2 {
        return Err(ObjectiveError::TooFewDomains(reprs.len()));
    }
    let width = reprs[0].ncols();
    for (d, z) in reprs.iter().enumerate() {
        if z.ncols() != width {
            return Err(ObjectiveError::WidthMismatch);
        }
        if z.nrows() < min_samples {
            return Err(ObjectiveError::TooFewSamples {
                domain: d,
                n: z.nrows(),
                required: min_samples,
            });
        }
    }
    Ok(width)
}

/// Mean over domain pairs of the squared mean distance plus the squared
/// Frobenius distance of population covariances.
pub fn coral_penalty(reprs: &[Array2<f64>]) -> Result<f64, ObjectiveError> {
    coral_impl(reprs, false).map(|(v, _)| v)
}

pub fn coral_penalty_and_grad(
    reprs: &[Array2<f64>],
) -> Result<PenaltyWithReprGrads, ObjectiveError> {
    let (v, g) = coral_impl(reprs, true)?;
    Ok((v, g.expect("gradient requested")))
}

type PenaltyAndOptionalGrads = (f64, Option<Vec<Array2<f64>>>);

fn coral_impl(
    reprs: &[Array2<f64>],
    with_grad: bool,
) -> Result<PenaltyAndOptionalGrads, ObjectiveError> {
    check_repr_group(reprs, 2)?;
    let means: Vec<Vec<f64>> = reprs.iter().map(|z| column_mean(&z.view())).collect();
    let covs: Vec<Array2<f64>> = reprs
        .iter()
        .zip(&means)
        .map(|(z, m)| covariance(&z.view(), m))
        .collect();
    let num_pairs = reprs.len() * (reprs.len() - 1) / 2;
    let scale = 1.0 / num_pairs as f64;

    let mut penalty = 0.0;
    let mut grads = with_grad.then(|| {
        reprs
            .iter()
            .map(|z| Array2::zeros(z.raw_dim()))
            .collect::<Vec<_>>()
    });
    for a in 0..reprs.len() {
        for b in (a + 1)..reprs.len() {
            let mean_diff: Vec<f64> = means[a]
                .iter()
                .zip(&means[b])
                .map(|(&x, &y)| x - y)
                .collect();
            let cov_diff = &covs[a] - &covs[b];
            penalty += scale
                * (mean_diff.iter().map(|d| d * d).sum::<f64>()
                    + cov_diff.iter().map(|d| d * d).sum::<f64>());
            if let Some(gs) = grads.as_mut() {
                for (side, sign) in [(a, 1.0), (b, -1.0)] {
                    let n = reprs[side].nrows() as f64;
                    let centered_dot = reprs[side].rows().into_iter().enumerate();
                    for (i, row) in centered_dot {
                        for j in 0..row.len() {
                            // mean term
                            gs[side][(i, j)] += scale * sign * 2.0 / n * mean_diff[j];
                            // covariance term: 4/n * (C_side - C_other) z_tilde
                            let mut acc = 0.0;
                            for l in 0..row.len() {
                                acc += cov_diff[(j, l)] * (row[l] - means[side][l]);
                            }
                            gs[side][(i, j)] += scale * sign * 4.0 / n * acc;
                        }
                    }
                }
            }
        }
    }
    Ok((penalty, grads))
}

/// Median of the pooled pairwise Euclidean distances; 1.0 when degenerate.
pub fn median_bandwidth(reprs: &[Array2<f64>]) -> f64 {
    let mut rows: Vec<_> = Vec::new();
    for z in reprs {
        for row in z.rows() {
            rows.push(row.to_owned());
        }
    }
    let mut distances = Vec::new();
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            let d2: f64 = rows[i]
                .iter()
                .zip(rows[j].iter())
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum();
            distances.push(d2.sqrt());
        }
    }
    if distances.is_empty() {
        return 1.0;
    }
    distances.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let median = distances[distances.len() / 2];
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

/// Mean over domain pairs of the biased (V-statistic) squared MMD with a
/// Gaussian kernel `exp(-|u - v|^2 / (2 sigma^2))`. `bandwidth = None`
/// selects the median heuristic over the pooled batch; gradients treat the
/// bandwidth as a constant.
pub fn mmd_penalty(reprs: &[Array2<f64>], bandwidth: Option<f64>) -> Result<f64, ObjectiveError> {
    mmd_impl(reprs, bandwidth, false).map(|(v, _)| v)
}

pub fn mmd_penalty_and_grad(
    reprs: &[Array2<f64>],
    bandwidth: Option<f64>,
) -> Result<PenaltyWithReprGrads, ObjectiveError> {
    let (v, g) = mmd_impl(reprs, bandwidth, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn gaussian_kernel(u: &[f64], v: &[f64], sigma2: f64) -> f64 {
    let d2: f64 = u.iter().zip(v).map(|(&a, &b)| (a - b) * (a - b)).sum();
    (-d2 / (2.0 * sigma2)).exp()
}

fn mmd_impl(
    reprs: &[Array2<f64>],
    bandwidth: Option<f64>,
    with_grad: bool,
) -> Result<PenaltyAndOptionalGrads, ObjectiveError> {
    check_repr_group(reprs, 1)?;
    let sigma = match bandwidth {
        Some(s) if s > 0.0 => s,
        Some(s) => return Err(ObjectiveError::InvalidBandwidth(s)),
        None => median_bandwidth(reprs),
    };
    let sigma2 = sigma * sigma;
    let num_pairs = reprs.len() * (reprs.len() - 1) / 2;
    let scale = 1.0 / num_pairs as f64;

    let row = |z: &Array2<f64>, i: usize| z.row(i).to_owned();
    let mut penalty = 0.0;
    let mut grads = with_grad.then(|| {
        reprs
            .iter()
            .map(|z| Array2::zeros(z.raw_dim()))
            .collect::<Vec<_>>()
    });
    for a in 0..reprs.len() {
        for b in (a + 1)..reprs.len() {
            let (za, zb) = (&reprs[a], &reprs[b]);
            let (na, nb) = (za.nrows() as f64, zb.nrows() as f64);
            let mut within_a = 0.0;
            for i in 0..za.nrows() {
                for j in 0..za.nrows() {
                    within_a += gaussian_kernel(
                        row(za, i).as_slice().unwrap(),
                        row(za, j).as_slice().unwrap(),
                        sigma2,
                    );
                }
            }
            let mut within_b = 0.0;
            for i in 0..zb.nrows() {
                for j in 0..zb.nrows() {
                    within_b += gaussian_kernel(
                        row(zb, i).as_slice().unwrap(),
                        row(zb, j).as_slice().unwrap(),
                        sigma2,
                    );
                }
            }
            let mut cross = 0.0;
            for i in 0..za.nrows() {
                for j in 0..zb.nrows() {
                    cross += gaussian_kernel(
                        row(za, i).as_slice().unwrap(),
                        row(zb, j).as_slice().unwrap(),
                        sigma2,
                    );
                }
            }
            penalty +=
                scale * (within_a / (na * na) + within_b / (nb * nb) - 2.0 * cross / (na * nb));

            if let Some(gs) = grads.as_mut() {
                let width = za.ncols();
                for i in 0..za.nrows() {
                    let zi = row(za, i);
                    for j in 0..za.nrows() {
                        let zj = row(za, j);
                        let k =
                            gaussian_kernel(zi.as_slice().unwrap(), zj.as_slice().unwrap(), sigma2);
                        for l in 0..width {
                            gs[a][(i, l)] += scale * 2.0 / (na * na) * k * (zj[l] - zi[l]) / sigma2;
                        }
                    }
                    for j in 0..zb.nrows() {
                        let zj = row(zb, j);
                        let k =
                            gaussian_kernel(zi.as_slice().unwrap(), zj.as_slice().unwrap(), sigma2);
                        for l in 0..width {
                            gs[a][(i, l)] -= scale * 2.0 / (na * nb) * k * (zj[l] - zi[l]) / sigma2;
                        }
                    }
                }
                for i in 0..zb.nrows() {
                    let zi = row(zb, i);
                    for j in 0..zb.nrows() {
                        let zj = row(zb, j);
                        let k =
                            gaussian_kernel(zi.as_slice().unwrap(), zj.as_slice().unwrap(), sigma2);
                        for l in 0..width {
                            gs[b][(i, l)] += scale * 2.0 / (nb * nb) * k * (zj[l] - zi[l]) / sigma2;
                        }
                    }
                    for j in 0..za.nrows() {
                        let zj = row(za, j);
                        let k =
                            gaussian_kernel(zi.as_slice().unwrap(), zj.as_slice().unwrap(), sigma2);
                        for l in 0..width {
                            gs[b][(i, l)] -= scale * 2.0 / (na * nb) * k * (zj[l] - zi[l]) / sigma2;
                        }
                    }
                }
            }
        }
    }
    Ok((penalty, grads))
}

/// Exponentiated-gradient weights over tracked domains.
#[derive(Debug, Clone, PartialEq)]
pub struct DroWeights {
    domains: Vec<usize>,
    q: Vec<f64>,
    group_lr: f64,
}

impl DroWeights {
    /// Uniform weights over the tracked domains.
    pub fn new(domains: Vec<usize>, group_lr: f64) -> Result<Self, ObjectiveError> {
        if domains.is_empty() {
            return Err(ObjectiveError::EmptyInput);
        }
        let q = vec![1.0 / domains.len() as f64; domains.len()];
        Ok(DroWeights {
            domains,
            q,
            group_lr,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.q
    }

    pub fn domains(&self) -> &[usize] {
        &self.domains
    }

    pub fn weight_of(&self, domain: usize) -> Option<f64> {
        self.domains
            .iter()
            .position(|&d| d == domain)
            .map(|i| self.q[i])
    }

    /// Multiplies each reported domain's weight by `exp(group_lr * loss)`,
    /// renormalizes, and returns the reweighted loss under the updated
    /// weights. Domains without a reported loss keep their weight.
    pub fn update(&mut self, losses: &[(usize, f64)]) -> f64 {
        for &(domain, loss) in losses {
            if let Some(i) = self.domains.iter().position(|&d| d == domain) {
                self.q[i] *= (self.group_lr * loss).exp();
            }
        }
        let sum: f64 = self.q.iter().sum();
        assert!(sum > 0.0 && sum.is_finite(), "weights left the simplex");
        for w in &mut self.q {
            *w /= sum;
        }
        losses
            .iter()
            .filter_map(|&(domain, loss)| self.weight_of(domain).map(|w| w * loss))
            .sum()
    }
}

/// Convex combination of two equally-shaped batches; labels are mixed as
/// one-hot rows.
pub fn mixup_with_coefficient(
    x1: ArrayView2<f64>,
    t1: ArrayView2<f64>,
    x2: ArrayView2<f64>,
    t2: ArrayView2<f64>,
    m: f64,
) -> Result<(Array2<f64>, Array2<f64>), ObjectiveError> {
    if x1.dim() != x2.dim() || t1.dim() != t2.dim() || x1.nrows() != t1.nrows() {
        return Err(ObjectiveError::ShapeMismatch);
    }
    let x = &x1.mapv(|v| v * m) + &x2.mapv(|v| v * (1.0 - m));
    let t = &t1.mapv(|v| v * m) + &t2.mapv(|v| v * (1.0 - m));
    Ok((x, t))
}

/// Draws `m ~ Beta(alpha, alpha)` from the seed and mixes the two batches.
pub fn mixup_batch(
    x1: ArrayView2<f64>,
    y1: &[usize],
    x2: ArrayView2<f64>,
    y2: &[usize],
    classes: usize,
    alpha: f64,
    seed: u64,
) -> Result<(Array2<f64>, Array2<f64>), ObjectiveError> {
    if alpha <= 0.0 || alpha.is_nan() {
        return Err(ObjectiveError::InvalidAlpha(alpha));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = Beta::new(alpha, alpha).map_err(|_| ObjectiveError::InvalidAlpha(alpha))?;
    let m = beta.sample(&mut rng);
    mixup_with_coefficient(
        x1,
        one_hot(y1, classes).view(),
        x2,
        one_hot(y2, classes).view(),
        m,
    )
}

/// Reptile-style outer step toward the inner-trajectory result.
pub fn fish_meta_step(
    params: &ParamVector,
    inner_result: &ParamVector,
    meta_lr: f64,
) -> Result<ParamVector, ObjectiveError> {
    let mut out = params.clone();
    let delta = inner_result.sub(params)?;
    out.add_scaled(&delta, meta_lr)?;
    Ok(out)
}

/// FedProx proximal term `(mu / 2) * |params - global|^2`.
pub fn prox_term(
    params: &ParamVector,
    global: &ParamVector,
    mu: f64,
) -> Result<f64, ObjectiveError> {
    let diff = params.sub(global)?;
    Ok(0.5 * mu * diff.values().iter().map(|v| v * v).sum::<f64>())
}

/// Gradient of the proximal term: `mu * (params - global)`.
pub fn prox_grad(
    params: &ParamVector,
    global: &ParamVector,
    mu: f64,
) -> Result<ParamVector, ObjectiveError> {
    let mut diff = params.sub(global)?;
    diff.scale(mu);
    Ok(diff)
}

/// FedSR regularizers: an L2 term on the representations plus a
/// within-class variance surrogate for the conditional term
/// (class-frequency weighted trace of the per-class population covariance).
pub fn fedsr_penalty(
    reprs: ArrayView2<f64>,
    labels: &[usize],
    l2_coeff: f64,
    cmi_coeff: f64,
) -> Result<f64, ObjectiveError> {
    fedsr_impl(reprs, labels, l2_coeff, cmi_coeff, false).map(|(v, _)| v)
}

pub fn fedsr_penalty_and_grad(
    reprs: ArrayView2<f64>,
    labels: &[usize],
    l2_coeff: f64,
    cmi_coeff: f64,
) -> Result<(f64, Array2<f64>), ObjectiveError> {
    let (v, g) = fedsr_impl(reprs, labels, l2_coeff, cmi_coeff, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn fedsr_impl(
    reprs: ArrayView2<f64>,
    labels: &[usize],
    l2_coeff: f64,
    cmi_coeff: f64,
    with_grad: bool,
) -> Result<(f64, Option<Array2<f64>>), ObjectiveError> {
    let n = reprs.nrows();
    if n == 0 || labels.len() != n {
        return Err(ObjectiveError::EmptyInput);
    }
    let width = reprs.ncols();
    let classes: Vec<usize> = {
        let mut c = labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    // class means
    let mut class_mean = std::collections::BTreeMap::new();
    for &k in &classes {
        let rows: Vec<usize> = (0..n).filter(|&i| labels[i] == k).collect();
        let mut mean = vec![0.0; width];
        for &i in &rows {
            for j in 0..width {
                mean[j] += reprs[(i, j)] / rows.len() as f64;
            }
        }
        class_mean.insert(k, mean);
    }

    let nf = n as f64;
    let mut l2 = 0.0;
    let mut cmi = 0.0;
    for i in 0..n {
        let mean = &class_mean[&labels[i]];
        for j in 0..width {
            let z = reprs[(i, j)];
            l2 += z * z / nf;
            let centered = z - mean[j];
            cmi += centered * centered / nf;
        }
    }
    let penalty = l2_coeff * l2 + cmi_coeff * cmi;
    let grad = with_grad.then(|| {
        let mut g = Array2::zeros((n, width));
        for i in 0..n {
            let mean = &class_mean[&labels[i]];
            for j in 0..width {
                let z = reprs[(i, j)];
                g[(i, j)] = l2_coeff * 2.0 * z / nf + cmi_coeff * 2.0 * (z - mean[j]) / nf;
            }
        }
        g
    });
    Ok((penalty, grad))
}
