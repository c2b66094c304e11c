//! The lambda-controlled heterogeneous partitioner.

use super::{DomainAssignment, DomainSizes, PartitionError, PartitionPlan};
use crate::util::largest_remainder;

/// Sum of squared part sizes when `n` samples are split into `h` balanced
/// integer parts. Discretely convex in `h`, which makes the greedy split
/// below an exact minimizer of the squared-total sum.
fn balanced_square_sum(n: usize, h: usize) -> u128 {
    let q = (n / h) as u128;
    let r = (n % h) as u128;
    r * (q + 1) * (q + 1) + (h as u128 - r) * q * q
}

/// Divides domain indices across clients.
///
/// With `clients <= domains`, domains are sorted by size descending (stable
/// by index) and each is assigned to the client with the smallest current
/// total, so no domain is shared. With `clients > domains`, clients `1..=D`
/// take domains `1..=D` and each additional client joins the domain whose
/// further split most reduces the spread of client totals; all holders of a
/// shared domain receive equal integer shares.
pub fn assign_domains(
    sizes: &DomainSizes,
    clients: usize,
) -> Result<DomainAssignment, PartitionError> {
    if clients == 0 {
        return Err(PartitionError::NoClients);
    }
    let domains = sizes.len();
    let total = sizes.total();
    if total < clients {
        return Err(PartitionError::TooFewSamples { total, clients });
    }

    let client_domains = if clients <= domains {
        // Greedy multiway number partitioning: largest domain first, each to
        // the currently lightest client. Ties on the load go to the highest
        // client index, which reproduces the reference allocation on the
        // worked examples.
        let mut order: Vec<usize> = (0..domains).collect();
        order.sort_by(|&a, &b| sizes.get(b).cmp(&sizes.get(a)).then(a.cmp(&b)));
        let mut totals = vec![0usize; clients];
        let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); clients];
        for d in order {
            let mut best = 0;
            for c in 1..clients {
                if totals[c] <= totals[best] {
                    best = c;
                }
            }
            assigned[best].push(d);
            totals[best] += sizes.get(d);
        }
        for a in &mut assigned {
            a.sort_unstable();
        }
        assigned
    } else {
        // One domain per client. Start with a bijection on the first D
        // clients, then let every extra client join the domain where an
        // additional holder shrinks the sum of squared client totals the
        // most (ties to the lowest domain index). Since the per-domain
        // square sum is convex in the holder count, this greedy attains the
        // minimum-variance holder distribution.
        let mut holder_counts = vec![1usize; domains];
        for _ in domains..clients {
            let mut best = 0;
            let mut best_gain = 0u128;
            for (d, &holders) in holder_counts.iter().enumerate() {
                let gain = balanced_square_sum(sizes.get(d), holders)
                    - balanced_square_sum(sizes.get(d), holders + 1);
                if gain > best_gain {
                    best = d;
                    best_gain = gain;
                }
            }
            holder_counts[best] += 1;
        }
        let mut assigned: Vec<Vec<usize>> = (0..domains).map(|d| vec![d]).collect();
        let mut next = domains;
        for (d, &h) in holder_counts.iter().enumerate() {
            for _ in 1..h {
                assigned.push(vec![d]);
                next += 1;
            }
        }
        debug_assert_eq!(next, clients);
        assigned
    };

    Ok(DomainAssignment::from_client_domains(
        client_domains,
        domains,
    ))
}

/// Computes integer per-client counts for every domain by interpolating
/// between the homogeneous share `n_d / C` and the complete-heterogeneity
/// share `n_d / #holders(d)`, then rounding with the largest-remainder
/// method per domain so that column sums are exact.
pub fn interpolate_counts(
    assignment: &DomainAssignment,
    sizes: &DomainSizes,
    lambda: f64,
    seed: u64,
) -> Result<PartitionPlan, PartitionError> {
    if !(0.0..=1.0).contains(&lambda) || lambda.is_nan() {
        return Err(PartitionError::InvalidLambda(lambda));
    }
    let clients = assignment.num_clients();
    let domains = sizes.len();
    let total = sizes.total();
    if total < clients {
        return Err(PartitionError::TooFewSamples { total, clients });
    }

    let mut counts = vec![vec![0usize; clients]; domains];
    for (d, row) in counts.iter_mut().enumerate() {
        let n_d = sizes.get(d) as f64;
        let holders = assignment.holders(d);
        let shares: Vec<f64> = (0..clients)
            .map(|c| {
                let hetero = if holders.contains(&c) {
                    n_d / holders.len() as f64
                } else {
                    0.0
                };
                lambda * n_d / clients as f64 + (1.0 - lambda) * hetero
            })
            .collect();
        *row = largest_remainder(&shares, sizes.get(d));
    }

    enforce_non_empty_clients(&mut counts, assignment, lambda);
    Ok(PartitionPlan::new(counts, Some(lambda), seed))
}

/// Rounding can strand a client at zero samples for tiny domains at
/// intermediate lambda. Move one sample from the currently largest client
/// within a domain the empty client is eligible for (any domain when
/// lambda > 0, its assigned domains at lambda = 0).
fn enforce_non_empty_clients(
    counts: &mut [Vec<usize>],
    assignment: &DomainAssignment,
    lambda: f64,
) {
    let clients = assignment.num_clients();
    let domains = counts.len();
    loop {
        let totals: Vec<usize> = (0..clients)
            .map(|c| counts.iter().map(|row| row[c]).sum())
            .collect();
        let Some(receiver) = totals.iter().position(|&t| t == 0) else {
            return;
        };
        let donor = (0..clients)
            .max_by(|&a, &b| totals[a].cmp(&totals[b]).then(b.cmp(&a)))
            .expect("at least one client");
        debug_assert!(
            totals[donor] >= 2,
            "total samples >= clients guarantees a donor"
        );
        let eligible = (0..domains).find(|&d| {
            counts[d][donor] > 0
                && (lambda > 0.0 || assignment.client_domains(receiver).contains(&d))
        });
        let Some(d) = eligible else {
            // No transferable domain; leave the plan as rounded.
            return;
        };
        counts[d][donor] -= 1;
        counts[d][receiver] += 1;
    }
}

/// Full pipeline: domain assignment followed by count interpolation. The
/// seed is recorded for sample materialization and does not affect counts.
pub fn partition_heterogeneous(
    sizes: &DomainSizes,
    clients: usize,
    lambda: f64,
    seed: u64,
) -> Result<PartitionPlan, PartitionError> {
    if !(0.0..=1.0).contains(&lambda) || lambda.is_nan() {
        return Err(PartitionError::InvalidLambda(lambda));
    }
    let assignment = assign_domains(sizes, clients)?;
    interpolate_counts(&assignment, sizes, lambda, seed)
}
