//! Shards and Dirichlet baseline partitioners.

use super::{DomainSizes, PartitionError, PartitionPlan};
use crate::util::largest_remainder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

/// Concentrations at or above this are treated as the exact-prior limit:
/// every client draws the global domain distribution itself.
pub const DIRICHLET_EXACT_PRIOR_CAP: f64 = 1e6;

/// Shards partitioning: samples are ordered by domain label, cut into
/// `shards_per_client * clients` contiguous shards, and each client receives
/// `shards_per_client` shards chosen by a seeded permutation.
pub fn partition_shards(
    sizes: &DomainSizes,
    clients: usize,
    shards_per_client: usize,
    seed: u64,
) -> Result<PartitionPlan, PartitionError> {
    if clients == 0 {
        return Err(PartitionError::NoClients);
    }
    if shards_per_client == 0 {
        return Err(PartitionError::NoShards);
    }
    let total = sizes.total();
    let num_shards = shards_per_client * clients;
    if num_shards > total {
        return Err(PartitionError::ShardsExceedSamples {
            shards: num_shards,
            total,
        });
    }

    // domain-major sample order: domain d occupies [starts[d], starts[d+1])
    let domains = sizes.len();
    let mut starts = Vec::with_capacity(domains + 1);
    starts.push(0usize);
    for d in 0..domains {
        starts.push(starts[d] + sizes.get(d));
    }

    // shard k covers [k*total/S, (k+1)*total/S)
    let shard_bounds: Vec<usize> = (0..=num_shards).map(|k| k * total / num_shards).collect();

    let mut shard_ids: Vec<usize> = (0..num_shards).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shard_ids.shuffle(&mut rng);

    let mut counts = vec![vec![0usize; clients]; domains];
    for (slot, &shard) in shard_ids.iter().enumerate() {
        let client = slot / shards_per_client;
        let (lo, hi) = (shard_bounds[shard], shard_bounds[shard + 1]);
        for (d, row) in counts.iter_mut().enumerate() {
            let overlap = hi.min(starts[d + 1]).saturating_sub(lo.max(starts[d]));
            row[client] += overlap;
        }
    }
    Ok(PartitionPlan::new(counts, None, seed))
}

/// Dirichlet partitioning: each client draws domain proportions from
/// `Dir(alpha * p)` with `p` the global domain prior, then demands an equal
/// share of the total (largest-remainder in both directions). Sampling is
/// without replacement, so the draw is infeasible whenever the cumulative
/// demand for any domain exceeds its supply; that failure is surfaced as an
/// error rather than repaired.
pub fn partition_dirichlet(
    sizes: &DomainSizes,
    clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<PartitionPlan, PartitionError> {
    if clients == 0 {
        return Err(PartitionError::NoClients);
    }
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(PartitionError::InvalidAlpha(alpha));
    }
    let domains = sizes.len();
    let total = sizes.total();
    if total < clients {
        return Err(PartitionError::TooFewSamples { total, clients });
    }

    // The single-client true partition is the whole dataset.
    if clients == 1 {
        let counts = (0..domains).map(|d| vec![sizes.get(d)]).collect();
        return Ok(PartitionPlan::new(counts, None, seed));
    }

    let prior: Vec<f64> = (0..domains)
        .map(|d| sizes.get(d) as f64 / total as f64)
        .collect();
    let client_totals = largest_remainder(&vec![total as f64 / clients as f64; clients], total);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![vec![0usize; clients]; domains];
    for (c, &t_c) in client_totals.iter().enumerate() {
        let q = if alpha >= DIRICHLET_EXACT_PRIOR_CAP {
            prior.clone()
        } else {
            let concentration: Vec<f64> = prior.iter().map(|&p| alpha * p).collect();
            sample_dirichlet(&mut rng, &concentration)
        };
        let shares: Vec<f64> = q.iter().map(|&qd| qd * t_c as f64).collect();
        let demand = largest_remainder(&shares, t_c);
        for (row, &units) in counts.iter_mut().zip(&demand) {
            row[c] += units;
        }
    }

    for (d, row) in counts.iter().enumerate() {
        let demanded: usize = row.iter().sum();
        if demanded > sizes.get(d) {
            return Err(PartitionError::InfeasibleDemand {
                domain: d,
                demand: demanded,
                supply: sizes.get(d),
            });
        }
    }
    // Client totals sum to the full dataset, so no domain over-demanded
    // implies every domain is met exactly.
    debug_assert!(counts
        .iter()
        .enumerate()
        .all(|(d, row)| row.iter().sum::<usize>() == sizes.get(d)));
    Ok(PartitionPlan::new(counts, None, seed))
}

/// Draws from a Dirichlet distribution in log space, so that very small
/// concentrations (where plain Gamma draws underflow to zero) still yield a
/// well-defined point on the simplex: X_a = Gamma(a+1) * U^(1/a).
fn sample_dirichlet(rng: &mut ChaCha8Rng, concentration: &[f64]) -> Vec<f64> {
    let logs: Vec<f64> = concentration
        .iter()
        .map(|&a| {
            let boosted = Gamma::new(a + 1.0, 1.0).expect("positive shape");
            let g: f64 = boosted.sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / a
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / sum).collect()
}
