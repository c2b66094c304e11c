//! Accuracy evaluation, dataset-difficulty ratios and model selection.

use crate::dataspace::{DataError, DomainDataset};
use crate::fedsim::{
    run_round, ClientState, MethodConfig, RoundPlan, RunRecord, ServerState, SimError,
};
use crate::model::{forward, LossKind, ModelError, ModelSpec, OptimizerConfig, ParamVector};
use crate::partition::{materialize, partition_heterogeneous, DomainSizes, PartitionError};
use crate::util::derive_seed;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("denominator performance is zero")]
    ZeroDenominator,
    #[error("no '{split}' rows found in the run records")]
    NoSelectionRows { split: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
}

/// Fraction of samples whose argmax logit equals the label; ties broken to
/// the lowest class id.
pub fn evaluate(
    spec: &ModelSpec,
    params: &ParamVector,
    dataset: &DomainDataset,
) -> Result<f64, MetricsError> {
    if dataset.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    Ok(accuracy(spec, params, dataset)?)
}

/// Accuracy on a non-empty dataset; shared with the experiment runner.
pub(crate) fn accuracy(
    spec: &ModelSpec,
    params: &ParamVector,
    dataset: &DomainDataset,
) -> Result<f64, ModelError> {
    let pass = forward(spec, params, dataset.features())?;
    let mut hits = 0usize;
    for (i, &label) in dataset.labels().iter().enumerate() {
        let row = pass.logits.row(i);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / dataset.len() as f64)
}

/// Ratio with an explicit zero-denominator error; the arithmetic behind
/// both difficulty metrics.
pub fn performance_ratio(numerator: f64, denominator: f64) -> Result<f64, MetricsError> {
    if denominator == 0.0 {
        return Err(MetricsError::ZeroDenominator);
    }
    Ok(numerator / denominator)
}

/// Step-budgeted centralized training procedure shared by the difficulty
/// metrics: shuffled mini-batch passes until exactly `steps` updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainProcedure {
    pub model: ModelSpec,
    pub optimizer: OptimizerConfig,
    pub loss: LossKind,
    pub rounds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainProcedure {
    fn steps_for(&self, n: usize) -> usize {
        self.rounds * self.epochs * n.div_ceil(self.batch_size)
    }
}

fn centralized_train_steps(
    dataset: &DomainDataset,
    proc: &TrainProcedure,
    steps: usize,
) -> Result<ParamVector, MetricsError> {
    use crate::model::{loss_and_grad, OptimizerState, Targets};
    if dataset.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let mut params = proc.model.init_params(derive_seed(proc.seed, &[0x1217]));
    let mut optimizer = OptimizerState::new(proc.optimizer, params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(proc.seed, &[0x5eed]));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut taken = 0usize;
    'outer: loop {
        order.shuffle(&mut rng);
        for chunk in order.chunks(proc.batch_size) {
            if taken == steps {
                break 'outer;
            }
            let sub = dataset.subset(chunk);
            let (_, grad) = loss_and_grad(
                &proc.model,
                &params,
                sub.features(),
                Targets::Hard(sub.labels()),
                proc.loss,
            )?;
            optimizer.step(&mut params, &grad)?;
            taken += 1;
        }
        if steps == 0 {
            break;
        }
    }
    Ok(params)
}

/// DG-difficulty components: the same evaluation holdout scored with and
/// without access to the cheat-training pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdgReport {
    pub ratio: f64,
    pub no_cheat_accuracy: f64,
    pub cheat_accuracy: f64,
    /// Step budget shared by both trainings, recorded for auditability.
    pub steps: usize,
}

/// Ratio of ERM performance on the DG-test evaluation holdout without and
/// with the cheat-training pool mixed into training. Both sides consume
/// the same number of optimizer steps.
pub fn compute_r_dg(
    train: &DomainDataset,
    dg_test_eval: &DomainDataset,
    dg_test_pool: &DomainDataset,
    proc: &TrainProcedure,
) -> Result<RdgReport, MetricsError> {
    if dg_test_eval.is_empty() || dg_test_pool.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let steps = proc.steps_for(train.len());
    let honest = centralized_train_steps(train, proc, steps)?;
    let no_cheat_accuracy = evaluate(&proc.model, &honest, dg_test_eval)?;
    let pooled = train.concat(dg_test_pool)?;
    let cheater = centralized_train_steps(&pooled, proc, steps)?;
    let cheat_accuracy = evaluate(&proc.model, &cheater, dg_test_eval)?;
    Ok(RdgReport {
        ratio: performance_ratio(no_cheat_accuracy, cheat_accuracy)?,
        no_cheat_accuracy,
        cheat_accuracy,
        steps,
    })
}

/// Remaps domain ids to a contiguous range over the present domains.
fn compact_domains(dataset: &DomainDataset) -> DomainDataset {
    let present = dataset.present_domains();
    let map: std::collections::BTreeMap<usize, usize> =
        present.iter().enumerate().map(|(i, &d)| (d, i)).collect();
    let domains: Vec<usize> = dataset.domains().iter().map(|d| map[d]).collect();
    DomainDataset::from_parts(
        dataset.features().to_owned(),
        dataset.labels().to_vec(),
        domains,
        dataset.num_classes(),
        present.len(),
    )
    .expect("remapping preserves validity")
}

/// ERM-based FedAvg under the given heterogeneity, returning the final
/// global parameters. Used by the FL-difficulty metric with `clients = 1`
/// as the centralized reference.
pub fn federated_erm_train(
    train: &DomainDataset,
    lambda: f64,
    clients: usize,
    partition_seed: u64,
    proc: &TrainProcedure,
) -> Result<ParamVector, MetricsError> {
    let fed_view = compact_domains(train);
    let sizes = DomainSizes::new(fed_view.domain_sizes())?;
    let plan = partition_heterogeneous(&sizes, clients, lambda, partition_seed)?;
    let assignment = materialize(&plan, fed_view.domains(), partition_seed)?;
    let init = proc.model.init_params(derive_seed(proc.seed, &[0x1217]));
    let method = MethodConfig::Erm;
    let mut client_states = Vec::with_capacity(clients);
    for c in 0..clients {
        let data = fed_view.subset(&assignment.client_indices(c));
        client_states.push(ClientState::new(
            c,
            data,
            &proc.model,
            proc.optimizer,
            &method,
            &init,
        )?);
    }
    let mut server = ServerState::new(init, &method, sizes.len(), Some(proc.rounds));
    for _ in 0..proc.rounds {
        let plan = RoundPlan {
            epochs: proc.epochs,
            batch_size: proc.batch_size,
            seed: derive_seed(proc.seed, &[0xba7c]),
            participants: None,
        };
        run_round(
            &mut server,
            &mut client_states,
            &proc.model,
            &method,
            &plan,
            proc.loss,
        )?;
    }
    Ok(server.params)
}

/// FL-difficulty components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RflReport {
    pub ratio: f64,
    pub federated_accuracy: f64,
    pub centralized_accuracy: f64,
}

/// Ratio of ERM-based FedAvg at the given client heterogeneity over the
/// centralized reference (the same procedure with a single client) on
/// in-domain test samples. A single-client federation is its own
/// reference, so the ratio is exactly 1 there.
pub fn compute_r_fl(
    train: &DomainDataset,
    in_domain_test: &DomainDataset,
    lambda: f64,
    clients: usize,
    partition_seed: u64,
    proc: &TrainProcedure,
) -> Result<RflReport, MetricsError> {
    let federated = federated_erm_train(train, lambda, clients, partition_seed, proc)?;
    let federated_accuracy = evaluate(&proc.model, &federated, in_domain_test)?;
    let centralized_accuracy = if clients == 1 {
        federated_accuracy
    } else {
        let centralized = federated_erm_train(train, lambda, 1, partition_seed, proc)?;
        evaluate(&proc.model, &centralized, in_domain_test)?
    };
    Ok(RflReport {
        ratio: performance_ratio(federated_accuracy, centralized_accuracy)?,
        federated_accuracy,
        centralized_accuracy,
    })
}

/// Combined difficulty report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyReport {
    pub r_dg: RdgReport,
    pub r_fl: Vec<RflPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RflPoint {
    pub lambda: f64,
    #[serde(flatten)]
    pub report: RflReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValidationSplit {
    #[serde(rename = "heldout-val")]
    HeldoutVal,
    #[serde(rename = "in-domain-val")]
    InDomainVal,
}

impl ValidationSplit {
    pub fn split_name(&self) -> &'static str {
        match self {
            ValidationSplit::HeldoutVal => "heldout-val",
            ValidationSplit::InDomainVal => "in-domain-val",
        }
    }
}

/// Model-selection policy: which validation split drives early stopping
/// and how many runs participate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub validation_split: ValidationSplit,
    pub runs: usize,
}

/// The chosen checkpoint: best validation accuracy across all rounds of
/// all runs, ties to the earliest round and then the lowest run id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub run_id: usize,
    pub round: usize,
    pub value: f64,
    pub split: String,
}

pub fn select_model(
    records: &[RunRecord],
    policy: &SelectionPolicy,
) -> Result<Selection, MetricsError> {
    let split = policy.validation_split.split_name();
    let mut best: Option<Selection> = None;
    for record in records {
        for row in &record.rows {
            if row.split != split || row.metric != "accuracy" {
                continue;
            }
            let candidate = Selection {
                run_id: record.run_id,
                round: row.round,
                value: row.value,
                split: split.to_string(),
            };
            let better = match &best {
                None => true,
                Some(b) => {
                    candidate.value > b.value
                        || (candidate.value == b.value
                            && (candidate.round < b.round
                                || (candidate.round == b.round && candidate.run_id < b.run_id)))
                }
            };
            if better {
                best = Some(candidate);
            }
        }
    }
    best.ok_or_else(|| MetricsError::NoSelectionRows {
        split: split.to_string(),
    })
}
