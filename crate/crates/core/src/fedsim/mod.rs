//! Federated simulation engine: client/server state machines, the
//! optimize/aggregate round loop, and deterministic orchestration.
//!
//! Concurrency contract: local updates of distinct clients depend only on
//! the broadcast snapshot and may execute concurrently; aggregation is a
//! sequential fold over client results in ascending client-id order, and
//! server state is mutated by exactly one agent between broadcasts. The
//! reference implementation runs clients sequentially in that same order,
//! so results never depend on interleaving.

mod aggregate;
mod experiment;
mod local;

pub use aggregate::{aggregate_fedavg, aggregate_fedgma, aggregate_mean_update, project_simplex};
pub use experiment::{
    materialize_splits, run_experiment, write_metrics_csv, MetricRow, RunRecord, SPLIT_NAMES,
};
pub use local::{local_update, LocalContext, LocalOutcome};

use crate::config::ConfigError;
use crate::dataspace::{DataError, DomainDataset};
use crate::model::{
    ModelError, ModelSpec, OptimizerConfig, OptimizerKind, OptimizerState, ParamVector,
};
use crate::objectives::{DroWeights, ObjectiveError};
use crate::partition::PartitionError;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("client {0} has an empty dataset")]
    EmptyClient(usize),
    #[error("no clients to aggregate")]
    NoClients,
    #[error("aggregation weights sum to zero")]
    ZeroWeight,
    #[error("mask threshold must lie in [0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("cannot project an empty vector")]
    EmptyVector,
    #[error("non-finite loss at round {round} on client {client}")]
    NonFiniteLoss { round: usize, client: usize },
    #[error("communication budget of {budget} rounds exhausted")]
    BudgetExceeded { budget: usize },
    #[error("scaffold requires the sgd local optimizer")]
    ScaffoldNeedsSgd,
    #[error("round plan needs epochs >= 1 and batch size >= 1")]
    InvalidRoundPlan,
}

/// Local objective / aggregation protocol selector with its
/// hyperparameters. Serialized ids and field names follow the evaluation
/// catalog (lowercase, hyphenated).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "lowercase")]
pub enum MethodConfig {
    Erm,
    Irm {
        #[serde(rename = "penalty-weight")]
        penalty_weight: f64,
    },
    GroupDro {
        #[serde(rename = "group-lr")]
        group_lr: f64,
    },
    Coral {
        #[serde(rename = "penalty-weight")]
        penalty_weight: f64,
    },
    Mmd {
        #[serde(rename = "penalty-weight")]
        penalty_weight: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bandwidth: Option<f64>,
    },
    Mixup {
        alpha: f64,
    },
    Fish {
        #[serde(rename = "meta-lr")]
        meta_lr: f64,
    },
    FedProx {
        mu: f64,
    },
    Scaffold,
    Afl {
        #[serde(rename = "beta-step")]
        beta_step: f64,
    },
    FedSr {
        #[serde(rename = "l2-regularizer")]
        l2_regularizer: f64,
        #[serde(rename = "cmi-regularizer")]
        cmi_regularizer: f64,
    },
    FedGma {
        #[serde(rename = "mask-threshold")]
        mask_threshold: f64,
        #[serde(rename = "server-lr", default = "default_server_lr")]
        server_lr: f64,
    },
}

fn default_server_lr() -> f64 {
    1.0
}

impl MethodConfig {
    pub fn id(&self) -> &'static str {
        match self {
            MethodConfig::Erm => "erm",
            MethodConfig::Irm { .. } => "irm",
            MethodConfig::GroupDro { .. } => "groupdro",
            MethodConfig::Coral { .. } => "coral",
            MethodConfig::Mmd { .. } => "mmd",
            MethodConfig::Mixup { .. } => "mixup",
            MethodConfig::Fish { .. } => "fish",
            MethodConfig::FedProx { .. } => "fedprox",
            MethodConfig::Scaffold => "scaffold",
            MethodConfig::Afl { .. } => "afl",
            MethodConfig::FedSr { .. } => "fedsr",
            MethodConfig::FedGma { .. } => "fedgma",
        }
    }
}

/// Per-round execution parameters. `participants = None` means full
/// participation.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub participants: Option<Vec<usize>>,
}

impl RoundPlan {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(SimError::InvalidRoundPlan);
        }
        Ok(())
    }
}

/// One client: its local data, parameters, optimizer and per-method state.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    data: DomainDataset,
    pub params: ParamVector,
    optimizer: OptimizerState,
    control_variate: Option<ParamVector>,
    dro: Option<DroWeights>,
    /// Per-domain mean loss at the latest broadcast parameters.
    pub domain_losses: BTreeMap<usize, f64>,
}

impl ClientState {
    pub fn new(
        id: usize,
        data: DomainDataset,
        _model: &ModelSpec,
        optimizer: OptimizerConfig,
        method: &MethodConfig,
        init: &ParamVector,
    ) -> Result<Self, SimError> {
        if data.is_empty() {
            return Err(SimError::EmptyClient(id));
        }
        if matches!(method, MethodConfig::Scaffold) && optimizer.kind != OptimizerKind::Sgd {
            return Err(SimError::ScaffoldNeedsSgd);
        }
        let dim = init.len();
        let control_variate = matches!(method, MethodConfig::Scaffold)
            .then(|| ParamVector::zeros(init.layout().clone()));
        let dro = match method {
            MethodConfig::GroupDro { group_lr } => Some(
                DroWeights::new(data.present_domains(), *group_lr)
                    .expect("client data is non-empty"),
            ),
            _ => None,
        };
        Ok(ClientState {
            id,
            data,
            params: init.clone(),
            optimizer: OptimizerState::new(optimizer, dim),
            control_variate,
            dro,
            domain_losses: BTreeMap::new(),
        })
    }

    pub fn data(&self) -> &DomainDataset {
        &self.data
    }

    pub fn sample_count(&self) -> usize {
        self.data.len()
    }

    pub fn local_domains(&self) -> Vec<usize> {
        self.data.present_domains()
    }

    pub fn control_variate(&self) -> Option<&ParamVector> {
        self.control_variate.as_ref()
    }

    #[cfg(test)]
    pub(crate) fn set_control_variate(&mut self, v: ParamVector) {
        self.control_variate = Some(v);
    }
}

/// Communication accounting: one entry per executed round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub rounds_used: usize,
    pub epochs_log: Vec<usize>,
    pub budget: Option<usize>,
}

impl CommLedger {
    pub fn new(budget: Option<usize>) -> Self {
        CommLedger {
            rounds_used: 0,
            epochs_log: Vec::new(),
            budget,
        }
    }

    fn charge(&mut self, epochs: usize) -> Result<(), SimError> {
        if let Some(budget) = self.budget {
            if self.rounds_used >= budget {
                return Err(SimError::BudgetExceeded { budget });
            }
        }
        self.rounds_used += 1;
        self.epochs_log.push(epochs);
        Ok(())
    }
}

/// Server state: global parameters, AFL mixing weights, the Scaffold
/// server variate and the communication ledger.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub params: ParamVector,
    pub round: usize,
    afl_beta: Option<Vec<f64>>,
    afl_beta_step: f64,
    scaffold_variate: Option<ParamVector>,
    pub ledger: CommLedger,
}

impl ServerState {
    pub fn new(
        init: ParamVector,
        method: &MethodConfig,
        num_domains: usize,
        budget: Option<usize>,
    ) -> Self {
        let (afl_beta, afl_beta_step) = match method {
            MethodConfig::Afl { beta_step } => (
                Some(vec![1.0 / num_domains as f64; num_domains]),
                *beta_step,
            ),
            _ => (None, 0.0),
        };
        let scaffold_variate = matches!(method, MethodConfig::Scaffold)
            .then(|| ParamVector::zeros(init.layout().clone()));
        ServerState {
            params: init,
            round: 0,
            afl_beta,
            afl_beta_step,
            scaffold_variate,
            ledger: CommLedger::new(budget),
        }
    }

    pub fn afl_beta(&self) -> Option<&[f64]> {
        self.afl_beta.as_deref()
    }

    pub fn scaffold_variate(&self) -> Option<&ParamVector> {
        self.scaffold_variate.as_ref()
    }
}

/// Outcome of one communication round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundSummary {
    pub round: usize,
    pub mean_local_loss: f64,
    pub participants: Vec<usize>,
}

/// Runs one communication round: broadcast, local updates in ascending
/// client-id order, method-specific aggregation, ledger charge.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    model: &ModelSpec,
    method: &MethodConfig,
    plan: &RoundPlan,
    loss: crate::model::LossKind,
) -> Result<RoundSummary, SimError> {
    plan.validate()?;
    if clients.is_empty() {
        return Err(SimError::NoClients);
    }
    let participants: Vec<usize> = match &plan.participants {
        Some(ids) => {
            let mut ids = ids.clone();
            ids.sort_unstable();
            ids
        }
        None => (0..clients.len()).collect(),
    };

    let global = server.params.clone();
    let mut outcomes = Vec::with_capacity(participants.len());
    for &c in &participants {
        let ctx = LocalContext {
            model,
            method,
            loss,
            plan,
            round: server.round,
            global: &global,
            scaffold_server_variate: server.scaffold_variate.as_ref(),
            afl_beta: server.afl_beta.as_deref(),
        };
        outcomes.push(local_update(&mut clients[c], &ctx)?);
    }

    let updates: Vec<(&ParamVector, f64)> =
        outcomes.iter().map(|o| (&o.update, o.weight)).collect();
    server.params = match method {
        MethodConfig::FedGma {
            mask_threshold,
            server_lr,
        } => aggregate_fedgma(&global, &updates, *mask_threshold, *server_lr)?,
        // theta + sum_c (n_c / n) (theta_c - theta); equal to the weighted
        // average of client parameters and shared bit for bit with the
        // Scaffold server step and the unmasked FedGMA update
        _ => aggregate_mean_update(&global, &updates)?,
    };

    if let Some(server_c) = server.scaffold_variate.as_mut() {
        // c += |participants| / C * mean(c_i^+ - c_i)
        let scale = participants.len() as f64 / clients.len() as f64;
        let mut mean_delta = ParamVector::zeros(server_c.layout().clone());
        for outcome in &outcomes {
            let delta = outcome
                .variate_delta
                .as_ref()
                .expect("scaffold outcome carries a variate delta");
            mean_delta.add_scaled(delta, 1.0 / participants.len() as f64)?;
        }
        server_c.add_scaled(&mean_delta, scale)?;
    }

    if let Some(beta) = server.afl_beta.as_mut() {
        // phase 2: clients report per-domain losses at the new parameters;
        // the server ascends and projects back onto the simplex
        let mut gradient = vec![0.0; beta.len()];
        for &c in &participants {
            let client = &mut clients[c];
            client.domain_losses.clear();
            for d in client.data.present_domains() {
                let idx = client.data.domain_indices(d);
                let sub = client.data.subset(&idx);
                let value = crate::objectives::erm_loss(
                    model,
                    &server.params,
                    sub.features(),
                    sub.labels(),
                    loss,
                )?;
                client.domain_losses.insert(d, value);
                gradient[d] += value;
            }
        }
        let shifted: Vec<f64> = beta
            .iter()
            .zip(&gradient)
            .map(|(&b, &g)| b + server.afl_beta_step * g)
            .collect();
        *beta = project_simplex(&shifted)?;
    }

    let total_weight: f64 = outcomes.iter().map(|o| o.weight).sum();
    let mean_local_loss =
        outcomes.iter().map(|o| o.mean_loss * o.weight).sum::<f64>() / total_weight;

    server.round += 1;
    server.ledger.charge(plan.epochs)?;
    Ok(RoundSummary {
        round: server.round,
        mean_local_loss,
        participants,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataspace::DomainDataset;
    use crate::model::{Architecture, LossKind};
    use ndarray::Array2;

    fn tiny_dataset(values: &[(f64, usize, usize)]) -> DomainDataset {
        let features =
            Array2::from_shape_vec((values.len(), 1), values.iter().map(|v| v.0).collect())
                .unwrap();
        let labels: Vec<usize> = values.iter().map(|v| v.1).collect();
        let domains: Vec<usize> = values.iter().map(|v| v.2).collect();
        let classes = labels.iter().max().unwrap() + 1;
        let num_domains = domains.iter().max().unwrap() + 1;
        DomainDataset::new(features, labels, domains, classes.max(2), num_domains).unwrap()
    }

    fn linear_spec() -> ModelSpec {
        ModelSpec {
            architecture: Architecture::Linear,
            input_dim: 1,
            classes: 1,
            hidden: 16,
        }
    }

    #[test]
    fn zero_rounds_keep_initialization() {
        let spec = linear_spec();
        let init = spec.init_params(3);
        let server = ServerState::new(init.clone(), &MethodConfig::Erm, 1, Some(0));
        assert_eq!(server.params, init);
        assert_eq!(server.ledger.rounds_used, 0);
    }

    #[test]
    fn budget_is_enforced() {
        let spec = linear_spec();
        let init = spec.init_params(0);
        let mut server = ServerState::new(init.clone(), &MethodConfig::Erm, 1, Some(1));
        let data = tiny_dataset(&[(1.0, 1, 0), (2.0, 0, 0)]);
        let mut clients = vec![ClientState::new(
            0,
            data,
            &spec,
            OptimizerConfig::sgd(0.1),
            &MethodConfig::Erm,
            &init,
        )
        .unwrap()];
        let plan = RoundPlan {
            epochs: 1,
            batch_size: 8,
            seed: 0,
            participants: None,
        };
        run_round(
            &mut server,
            &mut clients,
            &spec,
            &MethodConfig::Erm,
            &plan,
            LossKind::Squared,
        )
        .unwrap();
        let err = run_round(
            &mut server,
            &mut clients,
            &spec,
            &MethodConfig::Erm,
            &plan,
            LossKind::Squared,
        )
        .unwrap_err();
        assert!(matches!(err, SimError::BudgetExceeded { budget: 1 }));
    }

    #[test]
    fn scaffold_rejects_adam() {
        let spec = linear_spec();
        let init = spec.init_params(0);
        let data = tiny_dataset(&[(1.0, 1, 0)]);
        let err = ClientState::new(
            0,
            data,
            &spec,
            OptimizerConfig::adam(0.1),
            &MethodConfig::Scaffold,
            &init,
        )
        .unwrap_err();
        assert!(matches!(err, SimError::ScaffoldNeedsSgd));
    }

    #[test]
    fn method_ids_serialize_hyphenated() {
        let m = MethodConfig::FedSr {
            l2_regularizer: 0.01,
            cmi_regularizer: 0.001,
        };
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(
            json,
            "{\"id\":\"fedsr\",\"l2-regularizer\":0.01,\"cmi-regularizer\":0.001}"
        );
        let gma: MethodConfig =
            serde_json::from_str("{\"id\":\"fedgma\",\"mask-threshold\":0.4}").unwrap();
        assert_eq!(
            gma,
            MethodConfig::FedGma {
                mask_threshold: 0.4,
                server_lr: 1.0
            }
        );
    }
}
