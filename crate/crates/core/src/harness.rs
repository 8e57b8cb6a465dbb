//! Experiment harness: scenario files, repeated runs, metrics and CSV output.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::PipelineConfig;
use crate::semantics::inference::{from_config, RemoteConfig};
use crate::semantics::{check_resource_match, EvalConfig};
use crate::sim::{Policy, SimConfig, SimError, SimOutcome, SimTrace, Simulator, TraceEvent};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// Process exit code: 1 for configuration problems, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Sim(SimError::ConfigInvalid(_)) => 1,
            _ => 2,
        }
    }
}

/// A scenario file: simulator, evaluator and pipeline settings, the policy
/// and the number of repetitions (seeds `seed`, `seed + 1`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub policy: Policy,
    pub repetitions: usize,
    pub parallel: bool,
    pub sim: SimConfig,
    pub eval: EvalConfig,
    pub pipeline: PipelineConfig,
    pub remote: Option<RemoteConfig>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "scenario".into(),
            policy: Policy::SemanticChain,
            repetitions: 1,
            parallel: true,
            sim: SimConfig::default(),
            eval: EvalConfig::default(),
            pipeline: PipelineConfig::default(),
            remote: None,
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.repetitions == 0 {
            return Err(HarnessError::Config("repetitions must be positive".into()));
        }
        self.sim
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.eval
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn seed_of(&self, repetition: usize) -> u64 {
        self.sim.seed.wrapping_add(repetition as u64)
    }
}

/// Metrics of one run, or their mean over runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: String,
    pub policy: Policy,
    /// repetition index, or `mean`
    pub repetition: String,
    pub seed: Option<u64>,
    pub idle_slots: f64,
    pub triggered_in_idle: f64,
    pub triggered_in_busy: f64,
    pub idle_utilization: f64,
    pub hist_evals: f64,
    pub avg_hist_evals_per_device: f64,
    pub tasks: f64,
    pub resource_evals: f64,
    pub avg_resource_evals_per_task: f64,
    pub selected: f64,
    pub selected_matching: f64,
    /// empty when no collaborator was selected
    pub matching_rate: Option<f64>,
}

/// Compute the metrics of one trace.
pub fn compute_metrics(trace: &SimTrace, scenario: &str, repetition: usize) -> MetricsRow {
    let meta = &trace.meta;
    let mut idle_slots = 0usize;
    let mut triggered_in_idle = 0usize;
    let mut triggered_in_busy = 0usize;
    let mut hist_evals = 0usize;
    let mut tasks = 0usize;
    let mut resource_evals = 0usize;
    let mut selected = 0usize;
    let mut selected_matching = 0usize;
    for e in &trace.events {
        match &e.event {
            TraceEvent::SlotObserved {
                truly_idle,
                cycle_started,
                ..
            } => {
                if *truly_idle {
                    idle_slots += 1;
                    triggered_in_idle += usize::from(*cycle_started);
                } else {
                    triggered_in_busy += usize::from(*cycle_started);
                }
            }
            TraceEvent::HistoricalStarted { subjects, .. } => hist_evals += subjects.len(),
            TraceEvent::TaskArrived { .. } => tasks += 1,
            TraceEvent::ResourceCycle {
                task,
                queried,
                selected_snapshots,
                ..
            } => {
                resource_evals += queried.len();
                selected += selected_snapshots.len();
                selected_matching += selected_snapshots
                    .iter()
                    .filter(|s| check_resource_match(task, s, &meta.eval).matched)
                    .count();
            }
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    MetricsRow {
        scenario: scenario.to_string(),
        policy: meta.policy,
        repetition: repetition.to_string(),
        seed: Some(meta.seed),
        idle_slots: idle_slots as f64,
        triggered_in_idle: triggered_in_idle as f64,
        triggered_in_busy: triggered_in_busy as f64,
        // no idle slot means nothing was missed
        idle_utilization: if idle_slots == 0 {
            1.0
        } else {
            ratio(triggered_in_idle, idle_slots)
        },
        hist_evals: hist_evals as f64,
        avg_hist_evals_per_device: ratio(hist_evals, meta.n_devices),
        tasks: tasks as f64,
        resource_evals: resource_evals as f64,
        avg_resource_evals_per_task: ratio(resource_evals, tasks),
        selected: selected as f64,
        selected_matching: selected_matching as f64,
        matching_rate: (selected > 0).then(|| ratio(selected_matching, selected)),
    }
}

/// Column-wise mean of `rows`. `matching_rate` averages the runs that have one.
pub fn mean_row(rows: &[MetricsRow]) -> MetricsRow {
    let n = rows.len().max(1) as f64;
    let avg = |f: fn(&MetricsRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let rates: Vec<f64> = rows.iter().filter_map(|r| r.matching_rate).collect();
    MetricsRow {
        scenario: rows.first().map(|r| r.scenario.clone()).unwrap_or_default(),
        policy: rows.first().map(|r| r.policy).unwrap_or_default(),
        repetition: "mean".into(),
        seed: None,
        idle_slots: avg(|r| r.idle_slots),
        triggered_in_idle: avg(|r| r.triggered_in_idle),
        triggered_in_busy: avg(|r| r.triggered_in_busy),
        idle_utilization: avg(|r| r.idle_utilization),
        hist_evals: avg(|r| r.hist_evals),
        avg_hist_evals_per_device: avg(|r| r.avg_hist_evals_per_device),
        tasks: avg(|r| r.tasks),
        resource_evals: avg(|r| r.resource_evals),
        avg_resource_evals_per_task: avg(|r| r.avg_resource_evals_per_task),
        selected: avg(|r| r.selected),
        selected_matching: avg(|r| r.selected_matching),
        matching_rate: (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64),
    }
}

pub struct ScenarioResult {
    pub rows: Vec<MetricsRow>,
    pub mean: MetricsRow,
    pub runs: Vec<SimOutcome>,
}

pub fn run_once(cfg: &ScenarioConfig, repetition: usize) -> Result<SimOutcome, HarnessError> {
    let sim = SimConfig {
        seed: cfg.seed_of(repetition),
        ..cfg.sim.clone()
    };
    let mut s = Simulator::new(sim, cfg.eval.clone(), cfg.pipeline.clone(), cfg.policy)?;
    if let Some(remote) = &cfg.remote {
        s = s.with_inference(from_config(remote));
    }
    Ok(s.run()?)
}

/// Run every repetition. Runs are independent, so they may execute in
/// parallel; results are folded in repetition order.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioResult, HarnessError> {
    cfg.validate()?;
    let runs: Vec<SimOutcome> = if cfg.parallel && cfg.remote.is_none() {
        (0..cfg.repetitions)
            .into_par_iter()
            .map(|i| run_once(cfg, i))
            .collect::<Result<_, _>>()?
    } else {
        (0..cfg.repetitions)
            .map(|i| run_once(cfg, i))
            .collect::<Result<_, _>>()?
    };
    let rows: Vec<MetricsRow> = runs
        .iter()
        .enumerate()
        .map(|(i, r)| compute_metrics(&r.trace, &cfg.name, i))
        .collect();
    let mean = mean_row(&rows);
    Ok(ScenarioResult { rows, mean, runs })
}

pub const CSV_HEADER: [&str; 16] = [
    "scenario",
    "policy",
    "repetition",
    "seed",
    "idle_slots",
    "triggered_in_idle",
    "triggered_in_busy",
    "idle_utilization",
    "hist_evals",
    "avg_hist_evals_per_device",
    "tasks",
    "resource_evals",
    "avg_resource_evals_per_task",
    "selected",
    "selected_matching",
    "matching_rate",
];

/// Write rows with a header line; an empty slice gives a header-only file.
pub fn write_csv(rows: &[MetricsRow], out: impl Write) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string(rows: &[MetricsRow]) -> String {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("csv is utf-8")
}

pub fn read_csv(input: impl Read) -> Result<Vec<MetricsRow>, HarnessError> {
    csv::Reader::from_reader(input)
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(HarnessError::from)
}

/// Write metrics, traces, final hypergraphs and record stores under `dir`:
///
/// ```text
/// metrics.csv
/// rep-00/trace.jsonl
/// rep-00/snapshots/<device>.json
/// rep-00/devices/<device>/records.jsonl
/// ```
pub fn write_outputs(result: &ScenarioResult, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut rows = result.rows.clone();
    rows.push(result.mean.clone());
    let metrics = dir.join("metrics.csv");
    write_csv(&rows, fs::File::create(&metrics)?)?;
    written.push(metrics);
    for (i, run) in result.runs.iter().enumerate() {
        let rep = dir.join(format!("rep-{i:02}"));
        let snaps = rep.join("snapshots");
        fs::create_dir_all(&snaps)?;
        let trace = rep.join("trace.jsonl");
        run.trace
            .write_jsonl(std::io::BufWriter::new(fs::File::create(&trace)?))?;
        written.push(trace);
        for d in &run.devices {
            let snap = snaps.join(format!("{}.json", d.id));
            fs::write(&snap, d.agents.graph().to_canonical())?;
            written.push(snap);
            written.push(d.store.persist(&rep.join("devices"), &d.id)?);
        }
    }
    Ok(written)
}
