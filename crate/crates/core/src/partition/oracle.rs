//! Exhaustive-search reference for the minimum-variance partition.

use super::{variance_of_totals, DomainSizes, PartitionError};

const MAX_DOMAINS: usize = 6;
const MAX_CLIENTS: usize = 6;

/// Exact minimum of the client-total sample variance over every partition
/// satisfying complete heterogeneity and true partition at `lambda = 0`,
/// using the same equal-share integer rounding as the partitioner.
///
/// Small instances only (`D <= 6`, `C <= 6`): with more clients than
/// domains every feasible assignment is determined by how many holders each
/// domain gets, so holder-count compositions are enumerated; otherwise all
/// client-to-domain groupings with no empty client are enumerated.
pub fn brute_force_optimal_variance(
    sizes: &DomainSizes,
    clients: usize,
) -> Result<f64, PartitionError> {
    if clients == 0 {
        return Err(PartitionError::NoClients);
    }
    let domains = sizes.len();
    if domains > MAX_DOMAINS || clients > MAX_CLIENTS {
        return Err(PartitionError::InstanceTooLarge {
            domains,
            clients,
            max_domains: MAX_DOMAINS,
            max_clients: MAX_CLIENTS,
        });
    }
    let total = sizes.total();
    if total < clients {
        return Err(PartitionError::TooFewSamples { total, clients });
    }

    let mut best: Option<f64> = None;
    if clients > domains {
        // holder counts h_d >= 1 summing to C; h_d <= n_d keeps clients non-empty
        let mut holder_counts = vec![1usize; domains];
        enumerate_compositions(&mut holder_counts, 0, clients - domains, &mut |h| {
            if h.iter().zip(sizes.as_slice()).any(|(&hd, &nd)| hd > nd) {
                return;
            }
            let mut totals = Vec::with_capacity(clients);
            for (d, &hd) in h.iter().enumerate() {
                let n = sizes.get(d);
                let base = n / hd;
                let rem = n % hd;
                for i in 0..hd {
                    totals.push(base + usize::from(i < rem));
                }
            }
            let v = variance_of_totals(&totals);
            if best.is_none_or(|b| v < b) {
                best = Some(v);
            }
        });
    } else {
        // group domains into exactly C non-empty client sets; the variance is
        // label-symmetric, so plain functions with full range suffice
        let mut assignment = vec![0usize; domains];
        enumerate_functions(&mut assignment, 0, clients, &mut |f| {
            let mut totals = vec![0usize; clients];
            for (d, &c) in f.iter().enumerate() {
                totals[c] += sizes.get(d);
            }
            if totals.contains(&0) {
                return;
            }
            let v = variance_of_totals(&totals);
            if best.is_none_or(|b| v < b) {
                best = Some(v);
            }
        });
    }
    Ok(best.expect("feasible assignment exists when total >= clients"))
}

/// Distributes `remaining` extra units over `counts[from..]`, invoking the
/// callback for every composition.
fn enumerate_compositions(
    counts: &mut Vec<usize>,
    from: usize,
    remaining: usize,
    visit: &mut impl FnMut(&[usize]),
) {
    if from == counts.len() {
        if remaining == 0 {
            visit(counts);
        }
        return;
    }
    for extra in 0..=remaining {
        counts[from] += extra;
        enumerate_compositions(counts, from + 1, remaining - extra, visit);
        counts[from] -= extra;
    }
}

fn enumerate_functions(
    assignment: &mut Vec<usize>,
    from: usize,
    clients: usize,
    visit: &mut impl FnMut(&[usize]),
) {
    if from == assignment.len() {
        visit(assignment);
        return;
    }
    for c in 0..clients {
        assignment[from] = c;
        enumerate_functions(assignment, from + 1, clients, visit);
    }
}
