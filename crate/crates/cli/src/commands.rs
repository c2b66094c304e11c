//! Implementations of the run, sweep, report, verify-plan and difficulty
//! subcommands.

use crate::config::{CliConfig, SweepSpec};
use crate::CliError;
use fedshift::dataspace::SplitOutput;
use fedshift::fedsim::{
    materialize_splits, run_experiment, write_metrics_csv, MetricRow, RunRecord,
};
use fedshift::metrics::{
    compute_r_dg, compute_r_fl, select_model, DifficultyReport, RflPoint, Selection, TrainProcedure,
};
use fedshift::partition::{check_constraints, DomainSizes, PartitionPlan};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

pub fn read_config(path: &Path, seed_override: Option<u64>) -> Result<CliConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut config: CliConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
    if let Some(seed) = seed_override {
        config.experiment.seed = seed;
    }
    config
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(config)
}

/// Short content hash of the effective config; recorded in every CSV row.
pub fn config_hash(config: &CliConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(16);
    for b in digest.iter().take(8) {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

pub fn resolve_out_dir(flag: Option<PathBuf>, config: &CliConfig) -> Result<PathBuf, CliError> {
    flag.or_else(|| std::env::var("FEDSHIFT_OUT").ok().map(PathBuf::from))
        .or_else(|| config.output_dir.clone().map(PathBuf::from))
        .ok_or_else(|| {
            CliError::Config(
                "no output directory: set --out, FEDSHIFT_OUT or output_dir".to_string(),
            )
        })
}

fn io_err(context: &str, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{context}: {e}"))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| io_err(&path.display().to_string(), e))
}

/// Executes every run of the experiment and returns the records.
pub fn execute_runs(config: &CliConfig) -> Result<Vec<RunRecord>, CliError> {
    let runs = config.experiment.selection.runs;
    let mut records = Vec::with_capacity(runs);
    for run_id in 0..runs {
        let record = run_experiment(&config.experiment, run_id)
            .map_err(|e| CliError::Runtime(format!("run {run_id}: {e}")))?;
        records.push(record);
    }
    Ok(records)
}

/// Writes metrics.csv, selection.json, config.json and optional artifacts
/// into the output directory.
pub fn write_run_artifacts(
    out_dir: &Path,
    config: &CliConfig,
    records: &[RunRecord],
) -> Result<Selection, CliError> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(&out_dir.display().to_string(), e))?;
    write_json(&out_dir.join("config.json"), config)?;

    let selection = select_model(records, &config.experiment.selection)
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let hash = config_hash(config);
    let mut rows: Vec<MetricRow> = records.iter().flat_map(|r| r.rows.clone()).collect();
    rows.push(MetricRow {
        round: selection.round,
        method: config.experiment.method.id().to_string(),
        lambda: config.experiment.partition.lambda(),
        clients: config.experiment.partition.clients,
        epochs: config.experiment.local_epochs,
        split: "selection".to_string(),
        metric: format!("best-{}", selection.split),
        value: selection.value,
        seed: records[selection.run_id].seed,
    });
    let file =
        fs::File::create(out_dir.join("metrics.csv")).map_err(|e| io_err("metrics.csv", e))?;
    write_metrics_csv(&rows, file, Some(("config_hash", &hash)))
        .map_err(|e| io_err("metrics.csv", e))?;

    write_json(&out_dir.join("selection.json"), &selection)?;

    if config.write_checkpoints {
        for record in records {
            let dir = out_dir.join(format!("checkpoints/run-{}", record.run_id));
            fs::create_dir_all(&dir).map_err(|e| io_err(&dir.display().to_string(), e))?;
            for (round, params) in record.checkpoints.iter().enumerate() {
                write_json(&dir.join(format!("round-{round:04}.json")), params)?;
            }
        }
    }
    Ok(selection)
}

pub fn cmd_run(config: &CliConfig, out_dir: &Path) -> Result<(), CliError> {
    let records = execute_runs(config)?;
    write_run_artifacts(out_dir, config, &records)?;

    // split manifests for auditability: sample indices per split per run
    let split_dir = out_dir.join("splits");
    fs::create_dir_all(&split_dir).map_err(|e| io_err(&split_dir.display().to_string(), e))?;
    for record in &records {
        let splits = materialize_splits(&config.experiment, record.run_id)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        write_json(
            &split_dir.join(format!("run-{}.json", record.run_id)),
            &splits.manifest,
        )?;
    }

    if config.difficulty.is_some() {
        let report = difficulty_report(config)?;
        write_json(&out_dir.join("difficulty.json"), &report)?;
    }
    println!(
        "wrote {} (runs: {})",
        out_dir.join("metrics.csv").display(),
        records.len()
    );
    Ok(())
}

/// Per-point summary line of a sweep.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SweepPointSummary {
    pub axis: String,
    pub value: f64,
    pub runs: usize,
    /// Mean over runs of the per-run best DG-test accuracy.
    pub dg_test_best_mean: f64,
    pub dg_test_best_std: f64,
    pub epochs: usize,
    pub rounds: usize,
}

fn best_dg_test(record: &RunRecord) -> Option<f64> {
    record
        .rows
        .iter()
        .filter(|r| r.split == "dg-test" && r.metric == "accuracy")
        .map(|r| r.value)
        .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, std)
}

pub fn cmd_sweep(config: &CliConfig, out_dir: &Path, jobs: usize) -> Result<(), CliError> {
    let sweep: &SweepSpec = config
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Config("config has no sweep section".to_string()))?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(&out_dir.display().to_string(), e))?;

    let points: Vec<(usize, f64)> = sweep.values.iter().copied().enumerate().collect();
    let results: Mutex<Vec<Option<Result<SweepPointSummary, CliError>>>> =
        Mutex::new((0..points.len()).map(|_| None).collect());
    let next = Mutex::new(0usize);
    let workers = jobs.max(1).min(points.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = {
                    let mut cursor = next.lock().unwrap();
                    if *cursor == points.len() {
                        return;
                    }
                    let i = *cursor;
                    *cursor += 1;
                    i
                };
                let (_, value) = points[index];
                let result = run_sweep_point(config, sweep, value, out_dir);
                results.lock().unwrap()[index] = Some(result);
            });
        }
    });

    let mut summaries = Vec::with_capacity(points.len());
    for slot in results.into_inner().unwrap() {
        summaries.push(slot.expect("worker filled every slot")?);
    }

    let path = out_dir.join("summary.csv");
    let mut file = fs::File::create(&path).map_err(|e| io_err("summary.csv", e))?;
    writeln!(
        file,
        "axis,value,runs,dg_test_best_mean,dg_test_best_std,rounds,epochs"
    )
    .map_err(|e| io_err("summary.csv", e))?;
    for s in &summaries {
        writeln!(
            file,
            "{},{},{},{},{},{},{}",
            s.axis, s.value, s.runs, s.dg_test_best_mean, s.dg_test_best_std, s.rounds, s.epochs
        )
        .map_err(|e| io_err("summary.csv", e))?;
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn run_sweep_point(
    config: &CliConfig,
    sweep: &SweepSpec,
    value: f64,
    out_dir: &Path,
) -> Result<SweepPointSummary, CliError> {
    let experiment = config.sweep_point(sweep, value);
    experiment
        .validate()
        .map_err(|e| CliError::Config(format!("sweep point {value}: {e}")))?;
    let point_config = CliConfig {
        experiment,
        output_dir: None,
        sweep: None,
        difficulty: None,
        write_checkpoints: false,
    };
    let records = execute_runs(&point_config)?;
    let dir = out_dir.join(format!("point-{}-{}", sweep.axis.name(), value));
    write_run_artifacts(&dir, &point_config, &records)?;
    let best: Vec<f64> = records
        .iter()
        .map(|r| {
            best_dg_test(r)
                .ok_or_else(|| CliError::Runtime("no dg-test rows in a sweep sub-run".to_string()))
        })
        .collect::<Result<_, _>>()?;
    let (mean, std) = mean_and_std(&best);
    Ok(SweepPointSummary {
        axis: sweep.axis.name().to_string(),
        value,
        runs: records.len(),
        dg_test_best_mean: mean,
        dg_test_best_std: std,
        epochs: point_config.experiment.local_epochs,
        rounds: point_config.experiment.rounds,
    })
}

const REPORT_KEY_COLUMNS: [&str; 7] = ["method", "lambda", "C", "E", "round", "split", "metric"];

/// Aggregates one or more metrics CSVs into mean and sample standard
/// deviation per (method, lambda, C, E, round, split, metric) group.
pub fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    if inputs.is_empty() {
        return Err(CliError::Config("no metrics files given".to_string()));
    }
    let mut groups: BTreeMap<Vec<String>, Vec<f64>> = BTreeMap::new();
    for path in inputs {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            .clone();
        let position = |name: &str| -> Result<usize, CliError> {
            headers.iter().position(|h| h == name).ok_or_else(|| {
                CliError::Config(format!(
                    "{}: missing column '{name}' in metrics schema",
                    path.display()
                ))
            })
        };
        let key_idx: Vec<usize> = REPORT_KEY_COLUMNS
            .iter()
            .map(|c| position(c))
            .collect::<Result<_, _>>()?;
        let value_idx = position("value")?;
        for record in reader.records() {
            let record =
                record.map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            let key: Vec<String> = key_idx
                .iter()
                .map(|&i| record.get(i).unwrap_or("").to_string())
                .collect();
            let value: f64 =
                record.get(value_idx).unwrap_or("").parse().map_err(|_| {
                    CliError::Runtime(format!("{}: bad value cell", path.display()))
                })?;
            groups.entry(key).or_default().push(value);
        }
    }

    let mut file = fs::File::create(out).map_err(|e| io_err(&out.display().to_string(), e))?;
    writeln!(file, "method,lambda,C,E,round,split,metric,n,mean,std")
        .map_err(|e| io_err("report", e))?;
    for (key, values) in &groups {
        let (mean, std) = mean_and_std(values);
        writeln!(file, "{},{},{},{}", key.join(","), values.len(), mean, std)
            .map_err(|e| io_err("report", e))?;
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn cmd_verify_plan(plan_path: &Path, sizes: &[usize]) -> Result<(), CliError> {
    let text = fs::read_to_string(plan_path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", plan_path.display())))?;
    let plan: PartitionPlan =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("invalid plan: {e}")))?;
    let sizes = DomainSizes::new(sizes.to_vec())
        .map_err(|e| CliError::Config(format!("invalid sizes: {e}")))?;
    let report = check_constraints(&plan, &sizes);
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("serializable")
    );
    Ok(())
}

/// Computes the difficulty report for the config's data and procedure.
pub fn difficulty_report(config: &CliConfig) -> Result<DifficultyReport, CliError> {
    let experiment = &config.experiment;
    let section = config.difficulty.clone().unwrap_or_default();
    let splits: SplitOutput =
        materialize_splits(experiment, 0).map_err(|e| CliError::Runtime(e.to_string()))?;
    let proc = TrainProcedure {
        model: experiment.model,
        optimizer: experiment.optimizer,
        loss: experiment.loss,
        rounds: experiment.rounds,
        epochs: experiment.local_epochs,
        batch_size: experiment.batch_size,
        seed: experiment.seed,
    };
    let r_dg = compute_r_dg(
        &splits.train,
        &splits.dg_test_eval,
        &splits.dg_test_pool,
        &proc,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut r_fl = Vec::new();
    for &lambda in &section.lambdas {
        let report = compute_r_fl(
            &splits.train,
            &splits.in_domain_test,
            lambda,
            experiment.partition.clients,
            experiment.partition.seed,
            &proc,
        )
        .map_err(|e| CliError::Runtime(e.to_string()))?;
        r_fl.push(RflPoint { lambda, report });
    }
    Ok(DifficultyReport { r_dg, r_fl })
}

pub fn cmd_difficulty(config: &CliConfig, out_dir: &Path) -> Result<(), CliError> {
    let report = difficulty_report(config)?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(&out_dir.display().to_string(), e))?;
    write_json(&out_dir.join("difficulty.json"), &report)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("serializable")
    );
    Ok(())
}
