//! End-to-end experiment execution: data, split, partition, clients,
//! rounds and the per-round metric log.

use super::{run_round, ClientState, CommLedger, RoundPlan, ServerState, SimError};
use crate::config::{DataConfig, ExperimentConfig, PartitionMethod};
use crate::dataspace::{apply_split, generate_synthetic, load_csv, DomainDataset, SplitOutput};
use crate::fedsim::local::sample_participants;
use crate::metrics::accuracy;
use crate::model::ParamVector;
use crate::partition::{
    materialize, partition_dirichlet, partition_heterogeneous, partition_shards, DomainSizes,
    PartitionPlan,
};
use crate::util::derive_seed;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Evaluation splits recorded each round, in log order.
pub const SPLIT_NAMES: [&str; 5] = [
    "train",
    "in-domain-val",
    "in-domain-test",
    "heldout-val",
    "dg-test",
];

/// One metric observation; the row of the experiment CSV log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub round: usize,
    pub method: String,
    pub lambda: Option<f64>,
    pub clients: usize,
    pub epochs: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

/// Everything one execution of an experiment produced.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub run_id: usize,
    /// Effective run seed (derived from the config seed and the run id).
    pub seed: u64,
    pub rows: Vec<MetricRow>,
    pub dataset_digest: String,
    pub plan_digest: String,
    pub init_params_digest: String,
    /// Server parameters per round; index 0 is the initialization.
    pub checkpoints: Vec<ParamVector>,
    pub ledger: CommLedger,
}

const DATA_TAG: u64 = 0xda7a;
const SPLIT_TAG: u64 = 0x5b17;
const INIT_TAG: u64 = 0x1217;
const BATCH_TAG: u64 = 0xba7c;

pub(crate) fn build_dataset(
    config: &ExperimentConfig,
    run_seed: u64,
) -> Result<DomainDataset, SimError> {
    match &config.data {
        DataConfig::Synthetic {
            recipe,
            domains,
            classes,
            n_per_domain,
            dim,
        } => Ok(generate_synthetic(
            recipe,
            *domains,
            *classes,
            *n_per_domain,
            *dim,
            derive_seed(run_seed, &[DATA_TAG]),
        )?),
        DataConfig::Csv { path, schema } => Ok(load_csv(Path::new(path), schema)?),
    }
}

/// Remaps the training split's domain ids onto a contiguous range so the
/// partitioner sees dense domain indices.
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

pub(crate) fn build_plan(
    config: &ExperimentConfig,
    sizes: &DomainSizes,
) -> Result<PartitionPlan, SimError> {
    let p = &config.partition;
    let plan = match p.method {
        PartitionMethod::Heterogeneous { lambda } => {
            partition_heterogeneous(sizes, p.clients, lambda, p.seed)?
        }
        PartitionMethod::Shards { shards_per_client } => {
            partition_shards(sizes, p.clients, shards_per_client, p.seed)?
        }
        PartitionMethod::Dirichlet { alpha } => {
            partition_dirichlet(sizes, p.clients, alpha, p.seed)?
        }
    };
    Ok(plan)
}

/// Builds the dataset and splits exactly as `run_experiment` would for the
/// given run, without training anything. The difficulty metrics use this
/// to score the same data a run sees.
pub fn materialize_splits(
    config: &ExperimentConfig,
    run_id: usize,
) -> Result<SplitOutput, SimError> {
    let run_seed = derive_seed(config.seed, &[run_id as u64]);
    let dataset = build_dataset(config, run_seed)?;
    Ok(apply_split(
        &dataset,
        &config.split,
        derive_seed(run_seed, &[SPLIT_TAG]),
    )?)
}

/// Builds data, partition and clients from the config, runs the configured
/// number of rounds and records accuracy on every split per round
/// (round 0 is the initial evaluation).
pub fn run_experiment(config: &ExperimentConfig, run_id: usize) -> Result<RunRecord, SimError> {
    config.validate()?;
    let run_seed = derive_seed(config.seed, &[run_id as u64]);

    let dataset = build_dataset(config, run_seed)?;
    let dataset_digest = dataset.digest();
    let split: SplitOutput =
        apply_split(&dataset, &config.split, derive_seed(run_seed, &[SPLIT_TAG]))?;

    let fed_view = compact_domains(&split.train);
    let sizes = DomainSizes::new(fed_view.domain_sizes())?;
    let plan = build_plan(config, &sizes)?;
    let plan_digest = plan.digest();
    let assignment = materialize(&plan, fed_view.domains(), config.partition.seed)?;

    let init = config.model.init_params(derive_seed(run_seed, &[INIT_TAG]));
    let init_params_digest = init.digest();
    let clients_n = config.partition.clients;
    let mut clients = Vec::with_capacity(clients_n);
    for c in 0..clients_n {
        let data = fed_view.subset(&assignment.client_indices(c));
        clients.push(ClientState::new(
            c,
            data,
            &config.model,
            config.optimizer,
            &config.method,
            &init,
        )?);
    }
    let mut server = ServerState::new(init, &config.method, sizes.len(), Some(config.rounds));

    let eval_splits: [(&str, &DomainDataset); 5] = [
        ("train", &split.train),
        ("in-domain-val", &split.in_domain_val),
        ("in-domain-test", &split.in_domain_test),
        ("heldout-val", &split.heldout_val),
        ("dg-test", &split.dg_test),
    ];
    let mut rows = Vec::new();
    let mut checkpoints = Vec::with_capacity(config.rounds + 1);
    let record_round =
        |round: usize, params: &ParamVector, rows: &mut Vec<MetricRow>| -> Result<(), SimError> {
            for (name, ds) in &eval_splits {
                if ds.is_empty() {
                    continue;
                }
                let value = accuracy(&config.model, params, ds)?;
                rows.push(MetricRow {
                    round,
                    method: config.method.id().to_string(),
                    lambda: config.partition.lambda(),
                    clients: clients_n,
                    epochs: config.local_epochs,
                    split: name.to_string(),
                    metric: "accuracy".to_string(),
                    value,
                    seed: run_seed,
                });
            }
            Ok(())
        };

    record_round(0, &server.params, &mut rows)?;
    checkpoints.push(server.params.clone());
    let batch_seed = derive_seed(run_seed, &[BATCH_TAG]);
    for round in 0..config.rounds {
        let participants = config
            .participation
            .map(|f| sample_participants(clients_n, f, batch_seed, round));
        let plan = RoundPlan {
            epochs: config.local_epochs,
            batch_size: config.batch_size,
            seed: batch_seed,
            participants,
        };
        run_round(
            &mut server,
            &mut clients,
            &config.model,
            &config.method,
            &plan,
            config.loss,
        )?;
        record_round(round + 1, &server.params, &mut rows)?;
        checkpoints.push(server.params.clone());
    }
    debug_assert!(server.ledger.rounds_used <= config.rounds);

    Ok(RunRecord {
        run_id,
        seed: run_seed,
        rows,
        dataset_digest,
        plan_digest,
        init_params_digest,
        checkpoints,
        ledger: server.ledger,
    })
}

/// Writes metric rows as CSV with the fixed column schema
/// `round,method,lambda,C,E,split,metric,value,seed`, plus one optional
/// trailing constant column (the CLI appends the config hash).
pub fn write_metrics_csv<W: Write>(
    rows: &[MetricRow],
    writer: W,
    extra_column: Option<(&str, &str)>,
) -> Result<(), std::io::Error> {
    let mut w = writer;
    let mut header = "round,method,lambda,C,E,split,metric,value,seed".to_string();
    if let Some((name, _)) = extra_column {
        header.push(',');
        header.push_str(name);
    }
    writeln!(w, "{header}")?;
    for row in rows {
        let lambda = row.lambda.map(|l| l.to_string()).unwrap_or_default();
        let mut line = format!(
            "{},{},{},{},{},{},{},{},{}",
            row.round,
            row.method,
            lambda,
            row.clients,
            row.epochs,
            row.split,
            row.metric,
            row.value,
            row.seed
        );
        if let Some((_, value)) = extra_column {
            line.push(',');
            line.push_str(value);
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}
