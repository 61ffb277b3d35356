//! Evaluation quantities: distributed accuracy, fairness, the joint objective,
//! communication accounting, convergence speed and cluster dynamics.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::data::Partition;
use crate::error::Result;
use crate::model::AdditiveLearner;
use crate::orchestrator::RoundState;

/// Bytes per transmitted parameter (32-bit floats).
pub const DEFAULT_BYTES_PER_PARAM: u64 = 4;
pub const DEFAULT_FAIRNESS_WINDOW: usize = 10;

/// Everything recorded after one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub per_server_accuracy: Vec<f64>,
    pub distributed_accuracy: f64,
    pub per_server_loss: Vec<f64>,
    pub global_objective: f64,
    pub comm_bytes_client_edge: u64,
    pub active_clusters: usize,
    pub cumulative_reassignments: usize,
    /// Cluster of each server after this round's reassignment (if any).
    pub assignment: Vec<usize>,
    pub selected_counts: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairnessStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub sigma: f64,
}

/// Unweighted mean over servers.
pub fn distributed_accuracy(per_server: &[f64]) -> f64 {
    per_server.iter().sum::<f64>() / per_server.len() as f64
}

/// Per-server values are first averaged over the last `window` rounds, then
/// summarized across servers with the population standard deviation.
/// `traces[m]` is server `m`'s series; output keeps the input units.
pub fn fairness_stats(traces: &[Vec<f64>], window: usize) -> FairnessStats {
    let window = window.max(1);
    let per_server: Vec<f64> = traces
        .iter()
        .map(|t| {
            let tail = &t[t.len().saturating_sub(window)..];
            tail.iter().sum::<f64>() / tail.len() as f64
        })
        .collect();
    let mean = per_server.iter().sum::<f64>() / per_server.len() as f64;
    let var = per_server.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per_server.len() as f64;
    FairnessStats {
        mean,
        min: per_server.iter().copied().fold(f64::INFINITY, f64::min),
        max: per_server.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        sigma: var.sqrt(),
    }
}

/// Per-server accuracy traces (in percentage points) from a metrics log.
pub fn accuracy_traces_pp(log: &[RoundMetrics]) -> Vec<Vec<f64>> {
    let servers = log.first().map_or(0, |r| r.per_server_accuracy.len());
    (0..servers)
        .map(|m| log.iter().map(|r| 100.0 * r.per_server_accuracy[m]).collect())
        .collect()
}

/// `sum_k sum_{m in C_k} (n_m / n) F_m(global, cluster_k)` where `F_m` is the
/// sample-weighted mean training loss over server `m`'s clients.
pub fn global_objective(learner: &AdditiveLearner, state: &RoundState, partition: &Partition) -> Result<f64> {
    let n = partition.total_train() as f64;
    let mut total = 0.0;
    for (m, server) in partition.servers.iter().enumerate() {
        let model = state.server_model(m);
        let mut server_loss = 0.0;
        for &c in &server.clients {
            let data = &partition.clients[c].train;
            let (_, loss) = learner.evaluate(&model, data)?;
            server_loss += data.len() as f64 * loss;
        }
        // (n_m / n) * (server_loss / n_m)
        total += server_loss / n;
    }
    Ok(total)
}

/// Client-to-edge bytes for one round: every selected client downloads and
/// uploads both networks.
pub fn comm_cost_round(selected_total: u64, d_g: u64, d_k: u64, bytes_per_param: u64) -> u64 {
    2 * (d_g + d_k) * selected_total * bytes_per_param
}

/// First 1-based round whose accuracy reaches `target`.
pub fn convergence_round(trace: &[f64], target: f64) -> Option<usize> {
    trace.iter().position(|&a| a >= target).map(|i| i + 1)
}

/// `T_a / T_b` for the first rounds reaching `target`; `None` if either trace
/// never gets there.
pub fn convergence_ratio(trace_a: &[f64], trace_b: &[f64], target: f64) -> Option<f64> {
    let a = convergence_round(trace_a, target)?;
    let b = convergence_round(trace_b, target)?;
    Some(a as f64 / b as f64)
}

/// Total bytes to reach a target, expressed in rounds of a reference per-round
/// cost: `rounds * cost / reference_cost`, exactly.
pub fn round_equivalents(rounds: u64, per_round_cost: u64, reference_cost: u64) -> Ratio<u64> {
    Ratio::new(rounds * per_round_cost, reference_cost)
}

/// Active-cluster counts and cumulative server moves per round.
///
/// `initial` is the assignment before round 1; `history[t]` the assignment
/// after round `t + 1`. A move is a server whose cluster differs from the
/// previous round's.
pub fn cluster_dynamics(initial: &[usize], history: &[Vec<usize>]) -> (Vec<usize>, Vec<usize>) {
    let mut active = Vec::with_capacity(history.len());
    let mut cumulative = Vec::with_capacity(history.len());
    let mut prev = initial;
    let mut moves = 0;
    for pi in history {
        moves += pi.iter().zip(prev).filter(|(a, b)| a != b).count();
        cumulative.push(moves);
        active.push(active_clusters(pi));
        prev = pi;
    }
    (active, cumulative)
}

/// Number of distinct clusters holding at least one server.
pub fn active_clusters(assignment: &[usize]) -> usize {
    let mut seen: Vec<usize> = assignment.to_vec();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}
