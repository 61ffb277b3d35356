//! Running configured experiments and serializing their results.
//!
//! Per-round CSV schema (one header row, one row per round):
//!
//! | column | meaning |
//! |---|---|
//! | `round` | 1-based round index |
//! | `distributed_accuracy` | mean of per-server test accuracies |
//! | `global_objective` | sample-weighted training loss over all clients |
//! | `comm_bytes_client_edge` | client-edge bytes spent in the round |
//! | `active_clusters` | nonempty clusters after the round |
//! | `cumulative_reassignments` | server moves so far |
//! | `acc_s{m}` / `loss_s{m}` | server `m` test accuracy / mean loss |
//! | `cluster_s{m}` | server `m` cluster after the round |
//! | `selected_s{m}` | clients server `m` trained this round |
//!
//! Floats are written in shortest round-trip form, so equal runs give equal
//! bytes. All files are written to a temporary sibling and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{self, FairnessStats, RoundMetrics};
use crate::orchestrator::{Experiment, Method};

pub const SCHEMA_VERSION: u32 = 1;

pub fn csv_header(num_servers: usize) -> Vec<String> {
    let mut cols: Vec<String> = [
        "round",
        "distributed_accuracy",
        "global_objective",
        "comm_bytes_client_edge",
        "active_clusters",
        "cumulative_reassignments",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for prefix in ["acc", "loss", "cluster", "selected"] {
        cols.extend((0..num_servers).map(|m| format!("{prefix}_s{m}")));
    }
    cols
}

pub fn metrics_csv(log: &[RoundMetrics]) -> Result<Vec<u8>> {
    let servers = log.first().map_or(0, |r| r.per_server_accuracy.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Internal(format!("csv encoding failed: {e}"));
    w.write_record(csv_header(servers)).map_err(io)?;
    for r in log {
        let mut row = vec![
            r.round.to_string(),
            r.distributed_accuracy.to_string(),
            r.global_objective.to_string(),
            r.comm_bytes_client_edge.to_string(),
            r.active_clusters.to_string(),
            r.cumulative_reassignments.to_string(),
        ];
        row.extend(r.per_server_accuracy.iter().map(f64::to_string));
        row.extend(r.per_server_loss.iter().map(f64::to_string));
        row.extend(r.assignment.iter().map(usize::to_string));
        row.extend(r.selected_counts.iter().map(usize::to_string));
        w.write_record(&row).map_err(io)?;
    }
    w.into_inner()
        .map_err(|e| Error::Internal(format!("csv encoding failed: {e}")))
}

/// Write `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::input(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_vec_pretty(value).map_err(|e| Error::Internal(format!("json encoding failed: {e}")))?;
    text.push(b'\n');
    write_atomic(path, &text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceEntry {
    pub target: f64,
    /// First 1-based round reaching the target, if any.
    pub round: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub method: Method,
    pub seed: u64,
    pub rounds: usize,
    pub final_distributed_accuracy: f64,
    /// Mean distributed accuracy over the fairness window.
    pub window_distributed_accuracy: f64,
    /// Per-server accuracy over the fairness window, in percentage points.
    pub fairness_pp: FairnessStats,
    pub convergence: Vec<ConvergenceEntry>,
    pub total_comm_bytes: u64,
    pub final_active_clusters: usize,
    pub total_reassignments: usize,
    pub global_params: usize,
    pub cluster_params: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_unix: Option<u64>,
    pub config: ExperimentConfig,
}

/// Metrics and summary of one seeded run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: Vec<RoundMetrics>,
    pub summary: RunSummary,
}

/// Build the partition for `seed`, run the configured method and summarize.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<RunOutput> {
    config.validate()?;
    let partition = config.build_partition(seed)?;
    let method = config.method_config()?;
    let exp = Experiment::new(
        method,
        &partition,
        &config.learner_config(),
        config.sgd_hyperparams(),
        config.rounds,
        seed,
    )?
    .with_bytes_per_param(config.metrics.bytes_per_param);
    let (d_g, d_k) = exp.learner().sizes();
    let log = exp.run()?;
    let summary = summarize(config, seed, &log, (d_g, d_k))?;
    Ok(RunOutput { log, summary })
}

pub fn summarize(
    config: &ExperimentConfig,
    seed: u64,
    log: &[RoundMetrics],
    sizes: (usize, usize),
) -> Result<RunSummary> {
    let last = log.last().ok_or_else(|| Error::input("empty metrics log"))?;
    let window = config.metrics.fairness_window;
    let trace: Vec<f64> = log.iter().map(|r| r.distributed_accuracy).collect();
    let tail = &trace[trace.len().saturating_sub(window)..];
    Ok(RunSummary {
        schema_version: SCHEMA_VERSION,
        method: config.method.name,
        seed,
        rounds: log.len(),
        final_distributed_accuracy: last.distributed_accuracy,
        window_distributed_accuracy: tail.iter().sum::<f64>() / tail.len() as f64,
        fairness_pp: metrics::fairness_stats(&metrics::accuracy_traces_pp(log), window),
        convergence: config
            .metrics
            .convergence_targets
            .iter()
            .map(|&target| ConvergenceEntry {
                target,
                round: metrics::convergence_round(&trace, target),
            })
            .collect(),
        total_comm_bytes: log.iter().map(|r| r.comm_bytes_client_edge).sum(),
        final_active_clusters: last.active_clusters,
        total_reassignments: last.cumulative_reassignments,
        global_params: sizes.0,
        cluster_params: sizes.1,
        timestamp_unix: None,
        config: config.clone(),
    })
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Output file stem: `{method}_seed{seed}`.
pub fn run_stem(method: Method, seed: u64) -> String {
    format!("{}_seed{seed}", method.name())
}

/// Write `{stem}.csv` and `{stem}.json` under `dir`; returns both paths.
pub fn write_run(dir: &Path, stem: &str, out: &RunOutput) -> Result<(PathBuf, PathBuf)> {
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));
    write_atomic(&csv_path, &metrics_csv(&out.log)?)?;
    write_json(&json_path, &out.summary)?;
    Ok((csv_path, json_path))
}

/// Mean and sample standard deviation across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedStats {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl SeedStats {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}

impl std::fmt::Display for SeedStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub method: Method,
    /// Window-mean distributed accuracy, percentage points.
    pub accuracy_pp: SeedStats,
    pub fairness_sigma_pp: SeedStats,
    pub total_comm_bytes: SeedStats,
}

impl MethodAggregate {
    pub fn from_runs(method: Method, runs: &[RunSummary]) -> Self {
        let pick = |f: &dyn Fn(&RunSummary) -> f64| SeedStats::from_values(&runs.iter().map(f).collect::<Vec<_>>());
        Self {
            method,
            accuracy_pp: pick(&|r| 100.0 * r.window_distributed_accuracy),
            fairness_sigma_pp: pick(&|r| r.fairness_pp.sigma),
            total_comm_bytes: pick(&|r| r.total_comm_bytes as f64),
        }
    }
}

/// Three-method comparison with per-seed paired deltas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodAggregate>,
    /// Fed-BAC minus HierFAVG, percentage points.
    pub delta_h_pp: SeedStats,
    /// Fed-BAC minus IFCA, percentage points.
    pub delta_i_pp: SeedStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_unix: Option<u64>,
    pub config: ExperimentConfig,
}

impl ComparisonSummary {
    /// `runs[j]` holds the per-seed summaries of `Method::ALL[j]`, in seed order.
    pub fn build(config: &ExperimentConfig, seeds: &[u64], runs: &[Vec<RunSummary>; 3]) -> Self {
        let acc = |j: usize, s: usize| 100.0 * runs[j][s].window_distributed_accuracy;
        let idx = |m: Method| Method::ALL.iter().position(|&x| x == m).expect("listed");
        let (f, h, i) = (idx(Method::FedBac), idx(Method::HierFavg), idx(Method::Ifca));
        let delta = |other: usize| {
            SeedStats::from_values(&(0..seeds.len()).map(|s| acc(f, s) - acc(other, s)).collect::<Vec<_>>())
        };
        Self {
            schema_version: SCHEMA_VERSION,
            seeds: seeds.to_vec(),
            methods: Method::ALL
                .iter()
                .zip(runs)
                .map(|(&m, r)| MethodAggregate::from_runs(m, r))
                .collect(),
            delta_h_pp: delta(h),
            delta_i_pp: delta(i),
            timestamp_unix: None,
            config: config.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub result: MethodAggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub schema_version: u32,
    pub axis: String,
    pub seeds: Vec<u64>,
    pub points: Vec<SweepPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_unix: Option<u64>,
    pub config: ExperimentConfig,
}

impl SweepSummary {
    /// Plain-text table: one row per swept value.
    pub fn table(&self) -> String {
        let mut s = format!("{:>12}  {:>16}  {:>16}\n", self.axis, "accuracy (pp)", "sigma (pp)");
        for p in &self.points {
            s.push_str(&format!(
                "{:>12}  {:>16}  {:>16}\n",
                p.value,
                p.result.accuracy_pp.to_string(),
                p.result.fairness_sigma_pp.to_string()
            ));
        }
        s
    }
}
