//! Experiment configuration: a single JSON document describing data,
//! split, partition, model, method, optimization and selection.

use crate::dataspace::{CsvSchema, ShiftRecipe, SplitSpec};
use crate::fedsim::MethodConfig;
use crate::metrics::SelectionPolicy;
use crate::model::{LossKind, ModelSpec, OptimizerConfig, OptimizerKind};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Validation failure naming the offending field.
#[derive(Debug, Error, PartialEq)]
#[error("field '{field}': {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataConfig {
    Synthetic {
        recipe: ShiftRecipe,
        domains: usize,
        classes: usize,
        n_per_domain: usize,
        dim: usize,
    },
    Csv {
        path: String,
        schema: CsvSchema,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PartitionMethod {
    Heterogeneous { lambda: f64 },
    Shards { shards_per_client: usize },
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    #[serde(flatten)]
    pub method: PartitionMethod,
    pub clients: usize,
    pub seed: u64,
}

impl PartitionConfig {
    /// The heterogeneity level, when the method has one.
    pub fn lambda(&self) -> Option<f64> {
        match self.method {
            PartitionMethod::Heterogeneous { lambda } => Some(lambda),
            _ => None,
        }
    }
}

/// Full experiment description; the unit a run record refers back to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub split: SplitSpec,
    pub partition: PartitionConfig,
    pub model: ModelSpec,
    pub method: MethodConfig,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    pub selection: SelectionPolicy,
    pub seed: u64,
    /// Optional per-round client sampling fraction; full participation
    /// when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub participation: Option<f64>,
}

fn default_loss() -> LossKind {
    LossKind::CrossEntropy
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        match &self.data {
            DataConfig::Synthetic {
                recipe,
                domains,
                classes,
                n_per_domain,
                dim,
            } => {
                if *domains == 0 || *classes == 0 || *n_per_domain == 0 || *dim == 0 {
                    return Err(invalid("data", "synthetic dimensions must be >= 1"));
                }
                if recipe.magnitudes.len() != *domains {
                    return Err(invalid(
                        "data.recipe.magnitudes",
                        format!("expected {domains} entries"),
                    ));
                }
                if recipe.noise_scale <= 0.0 || recipe.noise_scale.is_nan() {
                    return Err(invalid("data.recipe.noise_scale", "must be positive"));
                }
            }
            DataConfig::Csv { path, schema } => {
                if path.is_empty() {
                    return Err(invalid("data.path", "must not be empty"));
                }
                if schema.feature_columns.is_empty() {
                    return Err(invalid("data.schema.feature_columns", "must not be empty"));
                }
            }
        }
        self.split
            .validate()
            .map_err(|e| invalid("split", e.to_string()))?;
        if let PartitionMethod::Heterogeneous { lambda } = self.partition.method {
            if !(0.0..=1.0).contains(&lambda) || lambda.is_nan() {
                return Err(invalid(
                    "partition.lambda",
                    format!("must lie in [0, 1], got {lambda}"),
                ));
            }
        }
        if let PartitionMethod::Dirichlet { alpha } = self.partition.method {
            if alpha <= 0.0 || alpha.is_nan() {
                return Err(invalid("partition.alpha", "must be positive"));
            }
        }
        if let PartitionMethod::Shards { shards_per_client } = self.partition.method {
            if shards_per_client == 0 {
                return Err(invalid("partition.shards_per_client", "must be >= 1"));
            }
        }
        if self.partition.clients == 0 {
            return Err(invalid("partition.clients", "must be >= 1"));
        }
        self.model
            .validate()
            .map_err(|e| invalid("model", e.to_string()))?;
        if self.local_epochs == 0 {
            return Err(invalid("local_epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be >= 1"));
        }
        self.optimizer
            .validate()
            .map_err(|e| invalid("optimizer.learning_rate", e.to_string()))?;
        if matches!(self.method, MethodConfig::Scaffold)
            && self.optimizer.kind != OptimizerKind::Sgd
        {
            return Err(invalid("optimizer.kind", "scaffold requires sgd"));
        }
        if self.selection.runs == 0 {
            return Err(invalid("selection.runs", "must be >= 1"));
        }
        if let Some(f) = self.participation {
            if f.is_nan() || f <= 0.0 || f > 1.0 {
                return Err(invalid("participation", "must lie in (0, 1]"));
            }
        }
        validate_method(&self.method)?;
        Ok(())
    }
}

fn validate_method(method: &MethodConfig) -> Result<(), ConfigError> {
    let non_negative = |field: &str, v: f64| {
        if !v.is_finite() || v < 0.0 {
            Err(invalid(field, "must be non-negative and finite"))
        } else {
            Ok(())
        }
    };
    match method {
        MethodConfig::Erm | MethodConfig::Scaffold => Ok(()),
        MethodConfig::Irm { penalty_weight } => {
            non_negative("method.penalty-weight", *penalty_weight)
        }
        MethodConfig::Coral { penalty_weight } => {
            non_negative("method.penalty-weight", *penalty_weight)
        }
        MethodConfig::Mmd {
            penalty_weight,
            bandwidth,
        } => {
            non_negative("method.penalty-weight", *penalty_weight)?;
            if let Some(b) = bandwidth {
                if *b <= 0.0 || b.is_nan() {
                    return Err(invalid("method.bandwidth", "must be positive"));
                }
            }
            Ok(())
        }
        MethodConfig::GroupDro { group_lr } => non_negative("method.group-lr", *group_lr),
        MethodConfig::Mixup { alpha } => {
            if *alpha <= 0.0 || alpha.is_nan() {
                Err(invalid("method.alpha", "must be positive"))
            } else {
                Ok(())
            }
        }
        MethodConfig::Fish { meta_lr } => non_negative("method.meta-lr", *meta_lr),
        MethodConfig::FedProx { mu } => non_negative("method.mu", *mu),
        MethodConfig::Afl { beta_step } => non_negative("method.beta-step", *beta_step),
        MethodConfig::FedSr {
            l2_regularizer,
            cmi_regularizer,
        } => {
            non_negative("method.l2-regularizer", *l2_regularizer)?;
            non_negative("method.cmi-regularizer", *cmi_regularizer)
        }
        MethodConfig::FedGma {
            mask_threshold,
            server_lr,
        } => {
            if !(0.0..=1.0).contains(mask_threshold) {
                return Err(invalid("method.mask-threshold", "must lie in [0, 1]"));
            }
            non_negative("method.server-lr", *server_lr)
        }
    }
}
