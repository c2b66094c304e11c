//! Deterministic federated domain-generalization simulation toolkit.
//!
//! The crate is organized around the lifecycle of a desk-scale federated
//! experiment on multi-domain data:
//!
//! * [`dataspace`] — synthetic multi-domain generators, CSV ingestion and
//!   train/validation/test domain-split bookkeeping.
//! * [`partition`] — heterogeneity-controlled partitioning of domain data
//!   across clients, the shards and Dirichlet baselines, constraint
//!   verifiers and an exhaustive optimality oracle for small instances.
//! * [`model`] — small differentiable models over flat parameter vectors
//!   with analytic gradients and SGD/Adam optimizers.
//! * [`objectives`] — the catalog of local training objectives and
//!   penalties (IRM, CORAL, MMD, GroupDRO, Mixup, Fish, FedProx, FedSR).
//! * [`fedsim`] — the client/server round loop, aggregation protocols
//!   (weighted averaging, Scaffold, AFL, FedGMA) and experiment execution.
//! * [`metrics`] — accuracy evaluation, dataset-difficulty ratios and
//!   held-out-domain model selection.
//!
//! Every operation is a pure function of its inputs plus an explicit seed;
//! identical configurations produce bit-identical results.

pub mod config;
pub mod dataspace;
pub mod fedsim;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod partition;
pub(crate) mod util;
