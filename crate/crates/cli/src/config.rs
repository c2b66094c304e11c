//! CLI-level configuration: the experiment description plus output,
//! sweep and difficulty sections.

use fedshift::config::{ConfigError, ExperimentConfig, PartitionMethod};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Lambda,
    Clients,
    Communication,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::Clients => "clients",
            SweepAxis::Communication => "communication",
        }
    }
}

/// One swept axis with its values. On the communication axis the
/// fixed-total-computation flag rescales the local epochs so that
/// `rounds * epochs` stays constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    #[serde(rename = "fixed-total-computation", default)]
    pub fixed_total_computation: bool,
}

fn default_difficulty_lambdas() -> Vec<f64> {
    vec![0.0, 0.1, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultySection {
    #[serde(default = "default_difficulty_lambdas")]
    pub lambdas: Vec<f64>,
}

impl Default for DifficultySection {
    fn default() -> Self {
        DifficultySection {
            lambdas: default_difficulty_lambdas(),
        }
    }
}

/// The single JSON config document the CLI consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CliConfig {
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<DifficultySection>,
    #[serde(default)]
    pub write_checkpoints: bool,
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        field: field.to_string(),
        message: message.into(),
    }
}

impl CliConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.experiment.validate()?;
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(invalid("sweep.values", "must not be empty"));
            }
            match sweep.axis {
                SweepAxis::Lambda => {
                    if !matches!(
                        self.experiment.partition.method,
                        PartitionMethod::Heterogeneous { .. }
                    ) {
                        return Err(invalid(
                            "sweep.axis",
                            "lambda sweeps need the heterogeneous partition method",
                        ));
                    }
                    if sweep
                        .values
                        .iter()
                        .any(|&v| v.is_nan() || !(0.0..=1.0).contains(&v))
                    {
                        return Err(invalid("sweep.values", "lambda values must lie in [0, 1]"));
                    }
                }
                SweepAxis::Clients | SweepAxis::Communication => {
                    if sweep
                        .values
                        .iter()
                        .any(|&v| v < 1.0 || v.fract() != 0.0 || !v.is_finite())
                    {
                        return Err(invalid(
                            "sweep.values",
                            "values on this axis must be positive integers",
                        ));
                    }
                }
            }
            if sweep.axis == SweepAxis::Communication && sweep.fixed_total_computation {
                let budget = self.experiment.rounds * self.experiment.local_epochs;
                for &v in &sweep.values {
                    let rounds = v as usize;
                    if !budget.is_multiple_of(rounds) {
                        return Err(invalid(
                            "sweep.values",
                            format!(
                                "rounds {rounds} does not divide the computation budget {budget}"
                            ),
                        ));
                    }
                }
            }
        }
        if let Some(difficulty) = &self.difficulty {
            if difficulty
                .lambdas
                .iter()
                .any(|&l| !(0.0..=1.0).contains(&l) || l.is_nan())
            {
                return Err(invalid("difficulty.lambdas", "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// The experiment for one sweep point; the axis value replaces the
    /// corresponding field and everything else (seeds included) is shared.
    pub fn sweep_point(&self, sweep: &SweepSpec, value: f64) -> ExperimentConfig {
        let mut experiment = self.experiment.clone();
        match sweep.axis {
            SweepAxis::Lambda => {
                experiment.partition.method = PartitionMethod::Heterogeneous { lambda: value };
            }
            SweepAxis::Clients => {
                experiment.partition.clients = value as usize;
            }
            SweepAxis::Communication => {
                let rounds = value as usize;
                if sweep.fixed_total_computation {
                    let budget = self.experiment.rounds * self.experiment.local_epochs;
                    experiment.local_epochs = budget / rounds;
                }
                experiment.rounds = rounds;
            }
        }
        experiment
    }
}
