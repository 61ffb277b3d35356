//! Synchronous round loop for Fed-BAC and the HierFAVG / IFCA baselines.
//!
//! One round: every edge server selects clients, trains them from the
//! broadcast model, edge-aggregates and scores the aggregate on its test
//! split; the cloud then aggregates. Fed-BAC aggregates the global network
//! over all servers and each cluster residual over its members, and every
//! `reassign_period` rounds lets each server's LinUCB bandit pick its next
//! cluster. IFCA keeps isolated per-cluster models and moves servers on loss
//! with hysteresis. HierFAVG trains one model with full participation.
//!
//! Servers and clients are processed in parallel; all reductions run in a
//! fixed order so results are identical regardless of scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{cluster_aggregate, edge_aggregate, global_aggregate};
use crate::bandits::{
    compute_reward, extract_features, random_subset, ts_select, ts_update, LinUcbBank, ServerContext,
    TsState, DEFAULT_ALPHA_UCB, DEFAULT_EPSILON,
};
use crate::data::Partition;
use crate::error::{Error, Result};
use crate::metrics::{self, RoundMetrics, DEFAULT_BYTES_PER_PARAM};
use crate::model::{AdditiveLearner, AdditiveModel, LearnerConfig, ParamVector, SgdHyperparams};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    FedBac,
    HierFavg,
    Ifca,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::FedBac, Method::HierFavg, Method::Ifca];

    pub fn name(self) -> &'static str {
        match self {
            Method::FedBac => "fedbac",
            Method::HierFavg => "hierfavg",
            Method::Ifca => "ifca",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "fedbac" => Some(Method::FedBac),
            "hierfavg" => Some(Method::HierFavg),
            "ifca" => Some(Method::Ifca),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitAssignment {
    /// Server `m` starts in cluster `m mod K`.
    #[default]
    RoundRobin,
    /// Every server starts in cluster 0.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientSelection {
    #[default]
    Thompson,
    /// Uniform random subsets every round (selection ablation).
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: Method,
    /// `K_max` for Fed-BAC, the fixed `K` for IFCA, 1 for HierFAVG.
    pub k_max: usize,
    pub participation: f64,
    pub reassign_period: usize,
    pub ts_warmup: usize,
    pub ifca_threshold: f64,
    pub init_assignment: InitAssignment,
    pub client_selection: ClientSelection,
    pub alpha_ucb: f64,
    pub epsilon: f64,
    /// HierFAVG only: train the additive two-network model with one cluster.
    pub additive_baseline: bool,
}

impl MethodConfig {
    pub fn fedbac(num_servers: usize) -> Self {
        Self {
            method: Method::FedBac,
            k_max: num_servers,
            participation: 0.8,
            reassign_period: 20,
            ts_warmup: 10,
            ifca_threshold: 0.95,
            init_assignment: InitAssignment::RoundRobin,
            client_selection: ClientSelection::Thompson,
            alpha_ucb: DEFAULT_ALPHA_UCB,
            epsilon: DEFAULT_EPSILON,
            additive_baseline: false,
        }
    }

    pub fn hierfavg() -> Self {
        Self {
            method: Method::HierFavg,
            k_max: 1,
            participation: 1.0,
            ..Self::fedbac(1)
        }
    }

    pub fn ifca(k: usize) -> Self {
        Self {
            method: Method::Ifca,
            k_max: k,
            participation: 1.0,
            ..Self::fedbac(1)
        }
    }

    pub fn validate(&self, num_servers: usize) -> Result<()> {
        if self.k_max == 0 {
            return Err(Error::config("at least one cluster is required"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::config("participation must lie in (0, 1]"));
        }
        if self.reassign_period == 0 {
            return Err(Error::config("reassign_period must be at least 1"));
        }
        if !(self.alpha_ucb >= 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::config("alpha_ucb must be >= 0 and epsilon > 0"));
        }
        match self.method {
            Method::FedBac if self.k_max > num_servers => Err(Error::config(format!(
                "k_max = {} exceeds the {num_servers} edge servers",
                self.k_max
            ))),
            Method::HierFavg if self.k_max != 1 || self.participation != 1.0 => Err(Error::config(
                "hierfavg runs a single model with full participation (k_max = 1, participation = 1.0)",
            )),
            _ => Ok(()),
        }
    }

    /// Learner shape per method: Fed-BAC (and the additive HierFAVG variant)
    /// use two networks; the others a single one.
    pub fn learner(&self, config: &LearnerConfig) -> Result<AdditiveLearner> {
        match self.method {
            Method::FedBac => AdditiveLearner::additive(config.clone()),
            Method::HierFavg if self.additive_baseline => AdditiveLearner::additive(config.clone()),
            Method::HierFavg | Method::Ifca => AdditiveLearner::single(config.clone()),
        }
    }
}

/// Server-to-cluster map with per-server tenure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub pi: Vec<usize>,
    pub tenure: Vec<usize>,
    pub k_max: usize,
}

impl ClusterAssignment {
    pub fn new(num_servers: usize, k_max: usize, init: InitAssignment) -> Self {
        let pi = match init {
            InitAssignment::RoundRobin => (0..num_servers).map(|m| m % k_max).collect(),
            InitAssignment::Uniform => vec![0; num_servers],
        };
        Self {
            pi,
            tenure: vec![0; num_servers],
            k_max,
        }
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k_max];
        for &k in &self.pi {
            sizes[k] += 1;
        }
        sizes
    }

    pub fn members(&self, k: usize) -> Vec<usize> {
        (0..self.pi.len()).filter(|&m| self.pi[m] == k).collect()
    }

    pub fn active_clusters(&self) -> usize {
        self.cluster_sizes().iter().filter(|&&s| s > 0).count()
    }

    /// Apply a full new map at once; returns the number of servers moved.
    fn apply(&mut self, next: &[usize]) -> usize {
        let mut moves = 0;
        for (m, &k) in next.iter().enumerate() {
            if self.pi[m] != k {
                self.pi[m] = k;
                self.tenure[m] = 0;
                moves += 1;
            }
        }
        moves
    }
}

/// Cloud-side state between rounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundState {
    /// Completed rounds.
    pub round: usize,
    pub horizon: usize,
    /// Shared network; absent for IFCA.
    pub global: Option<ParamVector>,
    /// Fed-BAC residuals, IFCA's standalone models, or HierFAVG's single
    /// additive residual. Empty for plain HierFAVG.
    pub clusters: Vec<ParamVector>,
    pub assignment: ClusterAssignment,
    pub bandit_bank: LinUcbBank,
    pub ts_states: Vec<TsState>,
    pub cumulative_reassignments: usize,
}

impl RoundState {
    /// The predictor server `m` receives.
    pub fn server_model(&self, m: usize) -> AdditiveModel {
        let k = self.assignment.pi[m];
        match &self.global {
            Some(g) if self.clusters.is_empty() => AdditiveModel::single(g.clone()),
            Some(g) => AdditiveModel::new(g.clone(), self.clusters[k].clone()),
            None => AdditiveModel::single(self.clusters[k].clone()),
        }
    }

    /// Predictor of server-agnostic cluster `k`.
    pub fn cluster_model(&self, k: usize) -> AdditiveModel {
        match &self.global {
            Some(g) if self.clusters.is_empty() => AdditiveModel::single(g.clone()),
            Some(g) => AdditiveModel::new(g.clone(), self.clusters[k].clone()),
            None => AdditiveModel::single(self.clusters[k].clone()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.global.as_ref().is_none_or(ParamVector::is_finite) && self.clusters.iter().all(ParamVector::is_finite)
    }
}

/// What one edge server hands back to the cloud.
#[derive(Debug, Clone)]
pub struct EdgeOutcome {
    pub aggregate: AdditiveModel,
    pub accuracy: f64,
    /// Local client positions within the server, ascending.
    pub selected: Vec<usize>,
    pub ts_state: TsState,
}

/// Immutable inputs shared by every step of a run.
pub struct RoundContext<'a> {
    pub method: &'a MethodConfig,
    pub partition: &'a Partition,
    pub learner: &'a AdditiveLearner,
    pub hp: &'a SgdHyperparams,
    pub rng: &'a RngStream,
}

/// One edge server's part of round `state.round + 1`.
pub fn edge_round(ctx: &RoundContext<'_>, state: &RoundState, server: usize) -> Result<EdgeOutcome> {
    let t = state.round + 1;
    let ts = &state.ts_states[server];
    let server_data = &ctx.partition.servers[server];
    let mut select_rng = ctx.rng.child(format!("select/{t}/server/{server}"));
    let selected = match ctx.method.client_selection {
        ClientSelection::Thompson => ts_select(ts, t, &mut select_rng),
        ClientSelection::Random => random_subset(ts.num_clients(), ts.budget, &mut select_rng),
    };
    let broadcast = state.server_model(server);
    let trained: Vec<(AdditiveModel, usize)> = selected
        .par_iter()
        .map(|&local| {
            let client = server_data.clients[local];
            let data = &ctx.partition.clients[client].train;
            let mut rng = ctx.rng.child(format!("train/{t}/client/{client}"));
            let model = ctx.learner.local_sgd(&broadcast, data, ctx.hp, t - 1, &mut rng)?;
            Ok((model, data.len()))
        })
        .collect::<Result<_>>()?;
    let aggregate = edge_aggregate(&trained)?;
    let (accuracy, _) = ctx.learner.evaluate(&aggregate, &server_data.test)?;
    let r_ts = accuracy - ts.prev_accuracy;
    let mut ts_state = ts_update(ts, &selected, r_ts);
    ts_state.prev_accuracy = accuracy;
    Ok(EdgeOutcome {
        aggregate,
        accuracy,
        selected,
        ts_state,
    })
}

/// Drives a single method through its rounds and records metrics.
pub struct Experiment<'a> {
    method: MethodConfig,
    partition: &'a Partition,
    learner: AdditiveLearner,
    hp: SgdHyperparams,
    rng: RngStream,
    bytes_per_param: u64,
    state: RoundState,
}

impl<'a> Experiment<'a> {
    pub fn new(
        method: MethodConfig,
        partition: &'a Partition,
        learner_config: &LearnerConfig,
        hp: SgdHyperparams,
        horizon: usize,
        seed: u64,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::config("at least one round is required"));
        }
        let num_servers = partition.num_servers();
        method.validate(num_servers)?;
        hp.validate()?;
        let learner = method.learner(learner_config)?;
        if learner.num_classes() < partition.num_classes {
            return Err(Error::config(format!(
                "learner predicts {} classes but the data has {}",
                learner.num_classes(),
                partition.num_classes
            )));
        }
        let rng = RngStream::root(seed);
        // Network j is drawn from `init/net/{j}`: the shared network is always
        // net 0 so every method starts from the same global weights.
        let init = |j: usize, net: &crate::model::Mlp| net.init(&mut rng.child(format!("init/net/{j}")));
        let (global, clusters) = match method.method {
            Method::FedBac => {
                let g = init(0, learner.global_net());
                let cnet = learner.cluster_net().expect("additive learner");
                (Some(g), (0..method.k_max).map(|k| init(k + 1, cnet)).collect())
            }
            Method::HierFavg => {
                let g = init(0, learner.global_net());
                let c = learner.cluster_net().map(|net| vec![init(1, net)]).unwrap_or_default();
                (Some(g), c)
            }
            Method::Ifca => (None, (0..method.k_max).map(|k| init(k, learner.global_net())).collect()),
        };
        let ts_states = partition
            .servers
            .iter()
            .map(|s| TsState::new(s.clients.len(), method.participation, method.ts_warmup))
            .collect::<Result<_>>()?;
        let state = RoundState {
            round: 0,
            horizon,
            global,
            clusters,
            assignment: ClusterAssignment::new(num_servers, method.k_max, method.init_assignment),
            bandit_bank: LinUcbBank::new(num_servers, method.k_max, method.alpha_ucb, method.epsilon),
            ts_states,
            cumulative_reassignments: 0,
        };
        Ok(Self {
            method,
            partition,
            learner,
            hp,
            rng,
            bytes_per_param: DEFAULT_BYTES_PER_PARAM,
            state,
        })
    }

    pub fn with_bytes_per_param(mut self, bytes: u64) -> Self {
        self.bytes_per_param = bytes;
        self
    }

    pub fn state(&self) -> &RoundState {
        &self.state
    }

    pub fn learner(&self) -> &AdditiveLearner {
        &self.learner
    }

    pub fn method(&self) -> &MethodConfig {
        &self.method
    }

    pub fn is_done(&self) -> bool {
        self.state.round >= self.state.horizon
    }

    fn context(&self) -> RoundContext<'_> {
        RoundContext {
            method: &self.method,
            partition: self.partition,
            learner: &self.learner,
            hp: &self.hp,
            rng: &self.rng,
        }
    }

    /// Run one full round and return its metrics.
    pub fn step(&mut self) -> Result<RoundMetrics> {
        if self.is_done() {
            return Err(Error::Protocol("experiment already reached its horizon".into()));
        }
        let t = self.state.round + 1;
        let num_servers = self.partition.num_servers();
        let outcomes: Vec<EdgeOutcome> = {
            let ctx = self.context();
            let state = &self.state;
            (0..num_servers)
                .into_par_iter()
                .map(|m| edge_round(&ctx, state, m))
                .collect::<Result<_>>()?
        };
        self.aggregate(&outcomes)?;
        for (ts, out) in self.state.ts_states.iter_mut().zip(&outcomes) {
            *ts = out.ts_state.clone();
        }
        for tenure in &mut self.state.assignment.tenure {
            *tenure += 1;
        }
        self.state.round = t;

        let evals = self.evaluate_servers()?;
        let global_objective = metrics::global_objective(&self.learner, &self.state, self.partition)?;
        if t.is_multiple_of(self.method.reassign_period) {
            match self.method.method {
                Method::FedBac => self.reassign_linucb(t)?,
                Method::Ifca => self.reassign_ifca()?,
                Method::HierFavg => {}
            }
        }
        if !self.state.is_finite() {
            return Err(Error::Internal(format!("non-finite parameters after round {t}")));
        }

        let selected_counts: Vec<usize> = outcomes.iter().map(|o| o.selected.len()).collect();
        let (d_g, d_k) = self.learner.sizes();
        let per_server_accuracy: Vec<f64> = evals.iter().map(|e| e.0).collect();
        Ok(RoundMetrics {
            round: t,
            distributed_accuracy: metrics::distributed_accuracy(&per_server_accuracy),
            per_server_accuracy,
            per_server_loss: evals.iter().map(|e| e.1).collect(),
            global_objective,
            comm_bytes_client_edge: metrics::comm_cost_round(
                selected_counts.iter().sum::<usize>() as u64,
                d_g as u64,
                d_k as u64,
                self.bytes_per_param,
            ),
            active_clusters: self.state.assignment.active_clusters(),
            cumulative_reassignments: self.state.cumulative_reassignments,
            assignment: self.state.assignment.pi.clone(),
            selected_counts,
        })
    }

    pub fn run(mut self) -> Result<Vec<RoundMetrics>> {
        let mut log = Vec::with_capacity(self.state.horizon);
        while !self.is_done() {
            log.push(self.step()?);
        }
        Ok(log)
    }

    fn aggregate(&mut self, outcomes: &[EdgeOutcome]) -> Result<()> {
        let sizes = self.partition.server_train_sizes();
        let num_servers = sizes.len();
        let pi = self.state.assignment.pi.clone();
        if let Some(global) = self.state.global.as_mut() {
            let parts: Vec<(&[f64], usize)> = outcomes
                .iter()
                .zip(&sizes)
                .map(|(o, &n)| (&o.aggregate.global[..], n))
                .collect();
            *global = global_aggregate(&parts, num_servers)?;
        }
        let residual_of = |o: &'_ EdgeOutcome| -> Result<ParamVector> {
            match (&o.aggregate.cluster, self.state.global.is_some()) {
                (Some(c), true) => Ok(c.clone()),
                (None, false) => Ok(o.aggregate.global.clone()),
                _ => Err(Error::Internal("edge aggregate shape does not match the method".into())),
            }
        };
        let mut next = Vec::with_capacity(self.state.clusters.len());
        for (k, previous) in self.state.clusters.iter().enumerate() {
            let owned: Vec<(ParamVector, usize)> = (0..num_servers)
                .filter(|&m| pi[m] == k)
                .map(|m| Ok((residual_of(&outcomes[m])?, sizes[m])))
                .collect::<Result<_>>()?;
            let members: Vec<(&[f64], usize)> = owned.iter().map(|(p, n)| (&p[..], *n)).collect();
            next.push(cluster_aggregate(&members, previous)?);
        }
        self.state.clusters = next;
        Ok(())
    }

    /// (accuracy, mean loss) of each server's current model on its test split.
    fn evaluate_servers(&self) -> Result<Vec<(f64, f64)>> {
        (0..self.partition.num_servers())
            .into_par_iter()
            .map(|m| {
                self.learner
                    .evaluate(&self.state.server_model(m), &self.partition.servers[m].test)
            })
            .collect()
    }

    /// Test loss of every cluster model on every server: `losses[m][k]`.
    fn cluster_losses(&self) -> Result<Vec<Vec<f64>>> {
        let k_max = self.state.clusters.len();
        (0..self.partition.num_servers())
            .into_par_iter()
            .map(|m| {
                (0..k_max)
                    .map(|k| {
                        let (_, loss) = self
                            .learner
                            .evaluate(&self.state.cluster_model(k), &self.partition.servers[m].test)?;
                        Ok(loss)
                    })
                    .collect()
            })
            .collect()
    }

    /// Every server updates the arm of its current cluster with the observed
    /// reward, then picks the UCB argmax; all moves land simultaneously.
    fn reassign_linucb(&mut self, t: usize) -> Result<()> {
        let losses = self.cluster_losses()?;
        let sizes = self.state.assignment.cluster_sizes();
        let eps = self.method.epsilon;
        let mut next = self.state.assignment.pi.clone();
        for (m, row) in losses.iter().enumerate() {
            let current = self.state.assignment.pi[m];
            let alt = (0..row.len())
                .filter(|&k| k != current)
                .min_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap_or(current);
            let ctx = ServerContext {
                loss_current: row[current],
                loss_best_alt: row[alt],
                best_alt_cluster: alt,
                size_current: sizes[current],
                size_alt: sizes[alt],
                tenure: self.state.assignment.tenure[m],
                round: t,
                horizon: self.state.horizon,
                reassign_period: self.method.reassign_period,
            };
            let x = extract_features(&ctx, eps);
            let reward = compute_reward(ctx.loss_current, ctx.loss_best_alt, eps);
            self.state.bandit_bank.update(m, current, &x, reward);
            next[m] = self.state.bandit_bank.select_cluster(m, &x)?;
        }
        self.state.cumulative_reassignments += self.state.assignment.apply(&next);
        Ok(())
    }

    /// Move to the lowest-loss cluster only when it beats the current one by
    /// the hysteresis factor: `L_new < threshold * L_current`.
    fn reassign_ifca(&mut self) -> Result<()> {
        let losses = self.cluster_losses()?;
        let threshold = self.method.ifca_threshold;
        let next: Vec<usize> = losses
            .iter()
            .enumerate()
            .map(|(m, row)| {
                let current = self.state.assignment.pi[m];
                let best = (0..row.len())
                    .min_by(|&a, &b| row[a].total_cmp(&row[b]))
                    .unwrap_or(current);
                if best != current && row[best] < threshold * row[current] {
                    best
                } else {
                    current
                }
            })
            .collect();
        self.state.cumulative_reassignments += self.state.assignment.apply(&next);
        Ok(())
    }
}

/// Initialize, run `horizon` rounds and return the per-round metrics.
pub fn run_experiment(
    method: &MethodConfig,
    partition: &Partition,
    learner: &LearnerConfig,
    hp: &SgdHyperparams,
    horizon: usize,
    seed: u64,
) -> Result<Vec<RoundMetrics>> {
    Experiment::new(method.clone(), partition, learner, hp.clone(), horizon, seed)?.run()
}
