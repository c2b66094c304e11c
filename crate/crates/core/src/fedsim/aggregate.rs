//! Server-side aggregation: weighted averaging, sign-agreement masking and
//! the simplex projection used by the AFL weight update.

use super::SimError;
use crate::model::ParamVector;

/// Weighted average of client parameters, folded in the given (ascending
/// client id) order.
pub fn aggregate_fedavg(contributions: &[(&ParamVector, f64)]) -> Result<ParamVector, SimError> {
    if contributions.is_empty() {
        return Err(SimError::NoClients);
    }
    let total: f64 = contributions.iter().map(|&(_, w)| w).sum();
    if total <= 0.0 || total.is_nan() {
        return Err(SimError::ZeroWeight);
    }
    let mut out = ParamVector::zeros(contributions[0].0.layout().clone());
    for &(params, w) in contributions {
        out.add_scaled(params, w / total)?;
    }
    Ok(out)
}

/// Weighted mean of the update vectors, component-wise, in input order.
fn weighted_mean_update(
    base: &ParamVector,
    updates: &[(&ParamVector, f64)],
) -> Result<Vec<f64>, SimError> {
    if updates.is_empty() {
        return Err(SimError::NoClients);
    }
    let total: f64 = updates.iter().map(|&(_, w)| w).sum();
    if total <= 0.0 || total.is_nan() {
        return Err(SimError::ZeroWeight);
    }
    let mut mean = vec![0.0; base.len()];
    for &(delta, w) in updates {
        if delta.layout() != base.layout() {
            return Err(SimError::Model(crate::model::ModelError::LayoutMismatch));
        }
        for (j, &v) in delta.values().iter().enumerate() {
            mean[j] += v * w / total;
        }
    }
    Ok(mean)
}

/// The weighted-average aggregation in update form:
/// `base + sum_c (n_c / n) (theta_c - base)`, algebraically identical to
/// [`aggregate_fedavg`] of the client parameters. The round loop uses this
/// form so that Scaffold's server step and the unmasked FedGMA update are
/// the same expression bit for bit.
pub fn aggregate_mean_update(
    base: &ParamVector,
    updates: &[(&ParamVector, f64)],
) -> Result<ParamVector, SimError> {
    let mean = weighted_mean_update(base, updates)?;
    let mut out = base.clone();
    for (v, m) in out.values_mut().iter_mut().zip(mean) {
        *v += m;
    }
    Ok(out)
}

/// Gradient-masked aggregation: per component, clients vote with the sign
/// of their update; components whose agreement fraction reaches `tau` pass
/// through, others are scaled by the fraction itself. `tau = 0` therefore
/// reduces exactly to the plain weighted-average update.
pub fn aggregate_fedgma(
    base: &ParamVector,
    updates: &[(&ParamVector, f64)],
    tau: f64,
    server_lr: f64,
) -> Result<ParamVector, SimError> {
    if !(0.0..=1.0).contains(&tau) || tau.is_nan() {
        return Err(SimError::InvalidThreshold(tau));
    }
    let mean = weighted_mean_update(base, updates)?;
    let clients = updates.len() as f64;
    let dim = base.len();
    let mut pos = vec![0usize; dim];
    let mut neg = vec![0usize; dim];
    for &(delta, _) in updates {
        for (j, &v) in delta.values().iter().enumerate() {
            if v > 0.0 {
                pos[j] += 1;
            } else if v < 0.0 {
                neg[j] += 1;
            }
        }
    }
    let mut out = base.clone();
    for (j, v) in out.values_mut().iter_mut().enumerate() {
        let agreement = pos[j].max(neg[j]) as f64 / clients;
        let mask = if agreement >= tau { 1.0 } else { agreement };
        *v += server_lr * mask * mean[j];
    }
    Ok(out)
}

/// Euclidean projection onto the probability simplex by sort and threshold.
pub fn project_simplex(v: &[f64]) -> Result<Vec<f64>, SimError> {
    if v.is_empty() {
        return Err(SimError::EmptyVector);
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumulative = 0.0;
    let mut threshold = 0.0;
    let mut support = 0;
    for (i, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - 1.0) / (i as f64 + 1.0);
        if u - candidate > 0.0 {
            threshold = candidate;
            support = i + 1;
        }
    }
    debug_assert!(support > 0);
    Ok(v.iter().map(|&x| (x - threshold).max(0.0)).collect())
}
