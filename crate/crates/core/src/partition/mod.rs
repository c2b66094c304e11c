//! Heterogeneity-controlled partitioning of multi-domain data across clients.
//!
//! The central entry point is [`partition_heterogeneous`], which interpolates
//! between homogeneous clients (`lambda = 1`) and complete heterogeneity
//! (`lambda = 0`) while always producing a true set partition. The shards and
//! Dirichlet baselines are provided for comparison, along with constraint
//! verifiers and an exhaustive-search optimality oracle for small instances.

mod baselines;
mod heterogeneous;
mod oracle;

pub use baselines::{partition_dirichlet, partition_shards, DIRICHLET_EXACT_PRIOR_CAP};
pub use heterogeneous::{assign_domains, interpolate_counts, partition_heterogeneous};
pub use oracle::brute_force_optimal_variance;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PartitionError {
    #[error("domain list is empty")]
    NoDomains,
    #[error("domain {0} has no samples")]
    EmptyDomain(usize),
    #[error("client count must be at least 1")]
    NoClients,
    #[error("lambda must lie in [0, 1], got {0}")]
    InvalidLambda(f64),
    #[error("cannot give each of {clients} clients a sample: only {total} samples exist")]
    TooFewSamples { total: usize, clients: usize },
    #[error("plan expects {expected} samples in domain {domain}, dataset has {found}")]
    SizeMismatch {
        domain: usize,
        expected: usize,
        found: usize,
    },
    #[error("{shards} shards exceed the {total} available samples")]
    ShardsExceedSamples { shards: usize, total: usize },
    #[error("shards per client must be at least 1")]
    NoShards,
    #[error("dirichlet concentration must be positive and finite, got {0}")]
    InvalidAlpha(f64),
    #[error("demand {demand} for domain {domain} exceeds its supply {supply}")]
    InfeasibleDemand {
        domain: usize,
        demand: usize,
        supply: usize,
    },
    #[error("instance too large for exhaustive search: D={domains} (max {max_domains}), C={clients} (max {max_clients})")]
    InstanceTooLarge {
        domains: usize,
        clients: usize,
        max_domains: usize,
        max_clients: usize,
    },
}

/// Per-domain sample counts `n_d`; every domain must hold at least one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSizes(Vec<usize>);

impl DomainSizes {
    pub fn new(sizes: Vec<usize>) -> Result<Self, PartitionError> {
        if sizes.is_empty() {
            return Err(PartitionError::NoDomains);
        }
        if let Some(d) = sizes.iter().position(|&n| n == 0) {
            return Err(PartitionError::EmptyDomain(d));
        }
        Ok(DomainSizes(sizes))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, d: usize) -> usize {
        self.0[d]
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// Domain sets per client produced by the assignment step, before any
/// interpolation: `client_domains[c]` lists the domains client `c` holds and
/// `holders[d]` the clients holding domain `d` (both ascending).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainAssignment {
    client_domains: Vec<Vec<usize>>,
    holders: Vec<Vec<usize>>,
}

impl DomainAssignment {
    pub(crate) fn from_client_domains(client_domains: Vec<Vec<usize>>, domains: usize) -> Self {
        let mut holders = vec![Vec::new(); domains];
        for (c, ds) in client_domains.iter().enumerate() {
            for &d in ds {
                holders[d].push(c);
            }
        }
        DomainAssignment {
            client_domains,
            holders,
        }
    }

    pub fn num_clients(&self) -> usize {
        self.client_domains.len()
    }

    pub fn num_domains(&self) -> usize {
        self.holders.len()
    }

    pub fn client_domains(&self, c: usize) -> &[usize] {
        &self.client_domains[c]
    }

    pub fn holders(&self, d: usize) -> &[usize] {
        &self.holders[d]
    }

    /// Provisional integer share of domain `d` for client `c`: the domain is
    /// split equally among its holders, remainder one sample at a time to
    /// holders in ascending client index.
    pub fn provisional_share(&self, sizes: &DomainSizes, d: usize, c: usize) -> usize {
        let holders = &self.holders[d];
        match holders.iter().position(|&h| h == c) {
            None => 0,
            Some(rank) => {
                let n = sizes.get(d);
                let base = n / holders.len();
                let rem = n % holders.len();
                base + usize::from(rank < rem)
            }
        }
    }
}

/// Per-client, per-domain sample counts: the output of any partitioner.
///
/// `counts` is indexed `[domain][client]`. Column sums reproduce the domain
/// sizes exactly for every partitioner in this module (True Partition).
/// `lambda` is recorded only for plans produced by the heterogeneous
/// partitioner; baselines leave it unset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    lambda: Option<f64>,
    seed: u64,
    counts: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub(crate) fn new(counts: Vec<Vec<usize>>, lambda: Option<f64>, seed: u64) -> Self {
        PartitionPlan {
            lambda,
            seed,
            counts,
        }
    }

    pub fn num_domains(&self) -> usize {
        self.counts.len()
    }

    pub fn num_clients(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    pub fn count(&self, d: usize, c: usize) -> usize {
        self.counts[d][c]
    }

    pub fn counts(&self) -> &[Vec<usize>] {
        &self.counts
    }

    pub fn lambda(&self) -> Option<f64> {
        self.lambda
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Sample counts per client for one client (all domains).
    pub fn client_counts(&self, c: usize) -> Vec<usize> {
        self.counts.iter().map(|row| row[c]).collect()
    }

    /// Total samples held by client `c`.
    pub fn client_total(&self, c: usize) -> usize {
        self.counts.iter().map(|row| row[c]).sum()
    }

    /// Total samples of domain `d` across clients (column sum).
    pub fn domain_total(&self, d: usize) -> usize {
        self.counts[d].iter().sum()
    }

    /// Domains from which client `c` holds at least one sample.
    pub fn client_domains(&self, c: usize) -> Vec<usize> {
        (0..self.num_domains())
            .filter(|&d| self.counts[d][c] > 0)
            .collect()
    }

    /// Sample variance of client totals; 0 when there is a single client.
    pub fn client_total_variance(&self) -> f64 {
        variance_of_totals(
            &(0..self.num_clients())
                .map(|c| self.client_total(c))
                .collect::<Vec<_>>(),
        )
    }

    /// Content digest over counts, lambda and seed.
    pub fn digest(&self) -> String {
        let mut h = crate::util::Fnv1a::new();
        h.update_u64(self.seed);
        h.update_f64(self.lambda.unwrap_or(f64::NEG_INFINITY));
        for row in &self.counts {
            for &v in row {
                h.update_u64(v as u64);
            }
        }
        h.finish_hex()
    }
}

/// Sample variance `1/(C-1) * sum (n_c - mean)^2`; 0 for fewer than 2 values.
pub(crate) fn variance_of_totals(totals: &[usize]) -> f64 {
    if totals.len() <= 1 {
        return 0.0;
    }
    let c = totals.len() as f64;
    let mean = totals.iter().sum::<usize>() as f64 / c;
    totals
        .iter()
        .map(|&t| (t as f64 - mean).powi(2))
        .sum::<f64>()
        / (c - 1.0)
}

/// Report produced by [`check_constraints`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub c1_holds: bool,
    pub c2_holds: bool,
    pub variance: f64,
}

/// Evaluates the complete-heterogeneity predicate (C1), the true-partition
/// predicate (C2) and the sample variance of client totals for a plan
/// against the expected domain sizes.
pub fn check_constraints(plan: &PartitionPlan, sizes: &DomainSizes) -> ConstraintReport {
    let clients = plan.num_clients();
    let domains = plan.num_domains();

    let column_sums_ok =
        domains == sizes.len() && (0..domains).all(|d| plan.domain_total(d) == sizes.get(d));
    let non_empty = clients > 0 && (0..clients).all(|c| plan.client_total(c) >= 1);
    let c2_holds = column_sums_ok && non_empty;

    let client_domains: Vec<Vec<usize>> = (0..clients).map(|c| plan.client_domains(c)).collect();
    let c1_holds = if clients > domains {
        client_domains.iter().all(|ds| ds.len() == 1)
    } else {
        // pairwise disjoint domain sets
        let mut seen = vec![false; domains];
        client_domains.iter().all(|ds| {
            ds.iter().all(|&d| {
                let fresh = !seen[d];
                seen[d] = true;
                fresh
            })
        })
    };

    ConstraintReport {
        c1_holds,
        c2_holds,
        variance: plan.client_total_variance(),
    }
}

/// Concrete per-client sample assignment: `clients[c]` lists
/// `(sample index, domain id)` pairs drawn without replacement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientAssignment {
    clients: Vec<Vec<(usize, usize)>>,
}

impl ClientAssignment {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client(&self, c: usize) -> &[(usize, usize)] {
        &self.clients[c]
    }

    pub fn client_indices(&self, c: usize) -> Vec<usize> {
        self.clients[c].iter().map(|&(i, _)| i).collect()
    }
}

/// Materializes a plan against per-sample domain ids: each domain's sample
/// indices are shuffled with the seed and split contiguously according to
/// the plan's per-client counts, so disjointness and exhaustiveness hold by
/// construction.
pub fn materialize(
    plan: &PartitionPlan,
    sample_domains: &[usize],
    seed: u64,
) -> Result<ClientAssignment, PartitionError> {
    let domains = plan.num_domains();
    let clients = plan.num_clients();

    let mut by_domain: Vec<Vec<usize>> = vec![Vec::new(); domains];
    for (i, &d) in sample_domains.iter().enumerate() {
        if d >= domains {
            return Err(PartitionError::SizeMismatch {
                domain: d,
                expected: 0,
                found: 1,
            });
        }
        by_domain[d].push(i);
    }
    for (d, samples) in by_domain.iter().enumerate() {
        let expected = plan.domain_total(d);
        if samples.len() != expected {
            return Err(PartitionError::SizeMismatch {
                domain: d,
                expected,
                found: samples.len(),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Vec::new(); clients];
    for (d, samples) in by_domain.iter_mut().enumerate() {
        samples.shuffle(&mut rng);
        let mut cursor = 0;
        for (c, client) in out.iter_mut().enumerate() {
            let take = plan.count(d, c);
            for &idx in &samples[cursor..cursor + take] {
                client.push((idx, d));
            }
            cursor += take;
        }
    }
    Ok(ClientAssignment { clients: out })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sizes(v: &[usize]) -> DomainSizes {
        DomainSizes::new(v.to_vec()).unwrap()
    }

    #[test]
    fn rejects_empty_and_zero_domains() {
        assert_eq!(DomainSizes::new(vec![]), Err(PartitionError::NoDomains));
        assert_eq!(
            DomainSizes::new(vec![3, 0]),
            Err(PartitionError::EmptyDomain(1))
        );
    }

    #[test]
    fn plan_json_schema_round_trip() {
        let plan = partition_heterogeneous(&sizes(&[10, 20]), 2, 0.5, 9).unwrap();
        let json = serde_json::to_string(&plan).unwrap();
        assert!(json.starts_with("{\"lambda\":0.5,\"seed\":9,\"counts\":"));
        let back: PartitionPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, plan);
    }

    #[test]
    fn check_constraints_example_one() {
        let plan = partition_heterogeneous(&sizes(&[10, 20, 30, 40, 100]), 2, 0.0, 0).unwrap();
        let report = check_constraints(&plan, &sizes(&[10, 20, 30, 40, 100]));
        assert!(report.c1_holds);
        assert!(report.c2_holds);
        assert_eq!(report.variance, 0.0);
    }

    #[test]
    fn check_constraints_homogeneous_two_domains() {
        let plan = partition_heterogeneous(&sizes(&[10, 20]), 2, 1.0, 0).unwrap();
        let report = check_constraints(&plan, &sizes(&[10, 20]));
        assert!(report.c2_holds);
        assert_eq!(report.variance, 0.0);
    }

    #[test]
    fn check_constraints_flags_empty_client() {
        // hand-built plan with client 1 empty
        let plan = PartitionPlan::new(vec![vec![10, 0], vec![20, 0]], None, 0);
        let report = check_constraints(&plan, &sizes(&[10, 20]));
        assert!(!report.c2_holds);
    }

    #[test]
    fn materialize_single_client_single_domain() {
        let plan = partition_heterogeneous(&sizes(&[7]), 1, 0.0, 3).unwrap();
        let domains = vec![0usize; 7];
        let assignment = materialize(&plan, &domains, 3).unwrap();
        let mut idx = assignment.client_indices(0);
        idx.sort_unstable();
        assert_eq!(idx, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn materialize_is_a_true_partition() {
        let plan = partition_heterogeneous(&sizes(&[5, 9, 4]), 3, 0.4, 11).unwrap();
        let mut domains = Vec::new();
        for (d, &n) in [5usize, 9, 4].iter().enumerate() {
            domains.extend(std::iter::repeat_n(d, n));
        }
        let assignment = materialize(&plan, &domains, 11).unwrap();
        let mut all: Vec<usize> = (0..3).flat_map(|c| assignment.client_indices(c)).collect();
        all.sort_unstable();
        assert_eq!(all, (0..18).collect::<Vec<_>>());
        // per-client per-domain cardinalities match the plan
        for c in 0..3 {
            for d in 0..3 {
                let n = assignment
                    .client(c)
                    .iter()
                    .filter(|&&(_, dd)| dd == d)
                    .count();
                assert_eq!(n, plan.count(d, c));
            }
        }
    }

    #[test]
    fn materialize_example_one_largest_domain_goes_whole() {
        let plan = partition_heterogeneous(&sizes(&[10, 20, 30, 40, 100]), 2, 0.0, 5).unwrap();
        let mut domains = Vec::new();
        for (d, &n) in [10usize, 20, 30, 40, 100].iter().enumerate() {
            domains.extend(std::iter::repeat_n(d, n));
        }
        let assignment = materialize(&plan, &domains, 5).unwrap();
        // client 2 receives exactly the 100 samples of domain 5
        let expect: std::collections::BTreeSet<usize> = (100..200).collect();
        let got: std::collections::BTreeSet<usize> =
            assignment.client_indices(1).into_iter().collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn materialize_rejects_size_mismatch() {
        let plan = partition_heterogeneous(&sizes(&[4]), 2, 1.0, 0).unwrap();
        let err = materialize(&plan, &[0, 0, 0], 0).unwrap_err();
        assert!(matches!(err, PartitionError::SizeMismatch { .. }));
    }
}
