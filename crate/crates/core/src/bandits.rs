//! Cluster assignment and client selection learners.
//!
//! The cloud keeps an independent LinUCB arm grid per edge server, one arm
//! per cluster, over a 4-dimensional context. Each edge server runs budgeted
//! Thompson sampling over its clients with Beta posteriors that all selected
//! clients update with the same collective reward.

use rand::seq::index;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const CONTEXT_DIM: usize = 4;
pub type Context = [f64; CONTEXT_DIM];
type Mat4 = [[f64; CONTEXT_DIM]; CONTEXT_DIM];

pub const DEFAULT_ALPHA_UCB: f64 = 0.3;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Everything the context features are computed from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerContext {
    pub loss_current: f64,
    pub loss_best_alt: f64,
    pub best_alt_cluster: usize,
    pub size_current: usize,
    pub size_alt: usize,
    pub tenure: usize,
    pub round: usize,
    pub horizon: usize,
    pub reassign_period: usize,
}

/// `[ln((L_cur+eps)/(L_alt+eps)), size balance, min(tenure/(2 tau_re), 1), t/T]`.
pub fn extract_features(ctx: &ServerContext, epsilon: f64) -> Context {
    let fit = ((ctx.loss_current + epsilon) / (ctx.loss_best_alt + epsilon)).ln();
    let total = ctx.size_current + ctx.size_alt;
    let balance = if total == 0 {
        0.0
    } else {
        (ctx.size_current as f64 - ctx.size_alt as f64) / total as f64
    };
    let stability = if ctx.reassign_period == 0 {
        1.0
    } else {
        (ctx.tenure as f64 / (2 * ctx.reassign_period) as f64).min(1.0)
    };
    let phase = if ctx.horizon == 0 {
        0.0
    } else {
        ctx.round as f64 / ctx.horizon as f64
    };
    [fit, balance, stability, phase]
}

/// Normalized loss ratio `(L_alt - L_cur) / (L_alt + L_cur + eps)`.
pub fn compute_reward(loss_current: f64, loss_best_alt: f64, epsilon: f64) -> f64 {
    (loss_best_alt - loss_current) / (loss_best_alt + loss_current + epsilon)
}

/// Ridge design matrix and response vector for one (server, cluster) arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinUcbArm {
    pub a: Mat4,
    pub b: Context,
}

impl Default for LinUcbArm {
    fn default() -> Self {
        let mut a = [[0.0; CONTEXT_DIM]; CONTEXT_DIM];
        for (i, row) in a.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self {
            a,
            b: [0.0; CONTEXT_DIM],
        }
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
fn cholesky(a: &Mat4) -> Result<Mat4> {
    let mut l = [[0.0; CONTEXT_DIM]; CONTEXT_DIM];
    for i in 0..CONTEXT_DIM {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if !(d > 0.0) {
                    return Err(Error::Internal("design matrix is not positive definite".into()));
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    // diag(L)^2 bounds the eigenvalue spread from inside.
    let diag: Vec<f64> = (0..CONTEXT_DIM).map(|i| l[i][i] * l[i][i]).collect();
    let hi = diag.iter().copied().fold(0.0, f64::max);
    let lo = diag.iter().copied().fold(f64::INFINITY, f64::min);
    if hi / lo > 1e12 {
        return Err(Error::Internal("design matrix is numerically singular".into()));
    }
    Ok(l)
}

/// Solve `L L^T z = v`.
fn cholesky_solve(l: &Mat4, v: &Context) -> Context {
    let mut y = [0.0; CONTEXT_DIM];
    for i in 0..CONTEXT_DIM {
        let s: f64 = (0..i).map(|k| l[i][k] * y[k]).sum();
        y[i] = (v[i] - s) / l[i][i];
    }
    let mut z = [0.0; CONTEXT_DIM];
    for i in (0..CONTEXT_DIM).rev() {
        let s: f64 = (i + 1..CONTEXT_DIM).map(|k| l[k][i] * z[k]).sum();
        z[i] = (y[i] - s) / l[i][i];
    }
    z
}

fn dot(a: &Context, b: &Context) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl LinUcbArm {
    /// Ridge estimate `A^-1 b`.
    pub fn theta(&self) -> Result<Context> {
        Ok(cholesky_solve(&cholesky(&self.a)?, &self.b))
    }

    /// `theta^T x + alpha * sqrt(x^T A^-1 x)`.
    pub fn score(&self, x: &Context, alpha_ucb: f64) -> Result<f64> {
        let l = cholesky(&self.a)?;
        let theta = cholesky_solve(&l, &self.b);
        let ainv_x = cholesky_solve(&l, x);
        Ok(dot(&theta, x) + alpha_ucb * dot(x, &ainv_x).max(0.0).sqrt())
    }

    /// `A += x x^T`, `b += r x`.
    pub fn update(&mut self, x: &Context, reward: f64) {
        for i in 0..CONTEXT_DIM {
            for j in 0..CONTEXT_DIM {
                self.a[i][j] += x[i] * x[j];
            }
            self.b[i] += reward * x[i];
        }
    }
}

pub fn ucb_score(arm: &LinUcbArm, x: &Context, alpha_ucb: f64) -> Result<f64> {
    arm.score(x, alpha_ucb)
}

pub fn linucb_update(arm: &LinUcbArm, x: &Context, reward: f64) -> LinUcbArm {
    let mut next = arm.clone();
    next.update(x, reward);
    next
}

/// Independent arm grids, one row of `k_max` arms per server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinUcbBank {
    pub arms: Vec<Vec<LinUcbArm>>,
    pub alpha_ucb: f64,
    pub epsilon: f64,
}

impl LinUcbBank {
    pub fn new(num_servers: usize, k_max: usize, alpha_ucb: f64, epsilon: f64) -> Self {
        Self {
            arms: vec![vec![LinUcbArm::default(); k_max]; num_servers],
            alpha_ucb,
            epsilon,
        }
    }

    pub fn k_max(&self) -> usize {
        self.arms.first().map_or(0, Vec::len)
    }

    pub fn arm(&self, server: usize, cluster: usize) -> &LinUcbArm {
        &self.arms[server][cluster]
    }

    pub fn update(&mut self, server: usize, cluster: usize, x: &Context, reward: f64) {
        self.arms[server][cluster].update(x, reward);
    }

    /// Argmax of the UCB score over this server's arms; lowest index on ties.
    pub fn select_cluster(&self, server: usize, x: &Context) -> Result<usize> {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (k, arm) in self.arms[server].iter().enumerate() {
            let s = arm.score(x, self.alpha_ucb)?;
            if s > best_score {
                best = k;
                best_score = s;
            }
        }
        Ok(best)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaPosterior {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for BetaPosterior {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }
}

/// One edge server's Thompson-sampling selector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsState {
    pub posteriors: Vec<BetaPosterior>,
    pub warmup: usize,
    pub budget: usize,
    pub prev_accuracy: f64,
}

impl TsState {
    /// Budget `floor(p * N_m)`.
    pub fn new(num_clients: usize, participation: f64, warmup: usize) -> Result<Self> {
        if !(participation > 0.0 && participation <= 1.0) {
            return Err(Error::config(format!("participation must lie in (0, 1], got {participation}")));
        }
        // The small nudge keeps products like 0.7 * 10 = 6.999.. from flooring down.
        let budget = ((participation * num_clients as f64) + 1e-9).floor() as usize;
        Self::with_budget(num_clients, budget, warmup)
    }

    pub fn with_budget(num_clients: usize, budget: usize, warmup: usize) -> Result<Self> {
        if budget == 0 || budget > num_clients {
            return Err(Error::config(format!(
                "selection budget {budget} must lie in 1..={num_clients}"
            )));
        }
        Ok(Self {
            posteriors: vec![BetaPosterior::default(); num_clients],
            warmup,
            budget,
            prev_accuracy: 0.0,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.posteriors.len()
    }
}

/// Uniformly random `budget`-subset of `0..n`, ascending.
pub fn random_subset(n: usize, budget: usize, rng: &mut RngStream) -> Vec<usize> {
    if budget >= n {
        return (0..n).collect();
    }
    let mut picked = index::sample(rng, n, budget).into_vec();
    picked.sort_unstable();
    picked
}

/// Client positions (ascending) for a 1-based `round`: uniform during the
/// warmup rounds, Beta-sampled top-`budget` afterwards.
pub fn ts_select(state: &TsState, round: usize, rng: &mut RngStream) -> Vec<usize> {
    let n = state.num_clients();
    if state.budget >= n {
        return (0..n).collect();
    }
    if round <= state.warmup {
        return random_subset(n, state.budget, rng);
    }
    let samples: Vec<f64> = state
        .posteriors
        .iter()
        .map(|p| {
            Beta::new(p.alpha, p.beta)
                .expect("posterior pseudo-counts stay >= 1")
                .sample(rng)
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps the lower client index first on equal samples.
    order.sort_by(|&a, &b| samples[b].total_cmp(&samples[a]));
    let mut picked = order[..state.budget].to_vec();
    picked.sort_unstable();
    picked
}

/// Soft collective update with magnitude `min(10 |r|, 2)`; `r <= 0` goes to beta.
pub fn ts_update(state: &TsState, selected: &[usize], r_ts: f64) -> TsState {
    let mut next = state.clone();
    let delta = (10.0 * r_ts.abs()).min(2.0);
    for &i in selected {
        let post = &mut next.posteriors[i];
        if r_ts > 0.0 {
            post.alpha += delta;
        } else {
            post.beta += delta;
        }
    }
    next
}

/// Serializable view of all bandit state for checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditSnapshot {
    pub linucb: LinUcbBank,
    pub thompson: Vec<TsState>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn ctx() -> ServerContext {
        ServerContext {
            loss_current: 1.0,
            loss_best_alt: 1.0,
            best_alt_cluster: 1,
            size_current: 2,
            size_alt: 2,
            tenure: 0,
            round: 0,
            horizon: 100,
            reassign_period: 20,
        }
    }

    #[test]
    fn symmetric_state_gives_zero_features() {
        assert_eq!(extract_features(&ctx(), DEFAULT_EPSILON), [0.0; 4]);
    }

    #[test]
    fn stability_saturates() {
        for tenure in [40, 41, 1000] {
            let c = ServerContext { tenure, ..ctx() };
            assert_eq!(extract_features(&c, DEFAULT_EPSILON)[2], 1.0);
        }
        let c = ServerContext { tenure: 39, ..ctx() };
        assert!(extract_features(&c, DEFAULT_EPSILON)[2] < 1.0);
    }

    #[test]
    fn feature_fixture() {
        let c = ServerContext {
            loss_current: 0.5,
            loss_best_alt: 1.0,
            size_current: 3,
            size_alt: 1,
            tenure: 10,
            round: 50,
            horizon: 200,
            ..ctx()
        };
        let x = extract_features(&c, 1e-8);
        assert!((x[0] - (-0.6931471705599452)).abs() < 1e-15);
        assert_eq!(x[1], 0.5);
        assert_eq!(x[2], 0.25);
        assert_eq!(x[3], 0.25);
    }

    #[test]
    fn empty_cluster_pair_balance_is_zero() {
        let c = ServerContext { size_current: 0, size_alt: 0, ..ctx() };
        assert_eq!(extract_features(&c, DEFAULT_EPSILON)[1], 0.0);
    }

    #[test]
    fn reward_fixtures() {
        assert_eq!(compute_reward(0.7, 0.7, 1e-8), 0.0);
        assert!((compute_reward(0.5, 1.0, 1e-8) - 0.33333333111111113).abs() < 1e-16);
        assert_eq!(compute_reward(0.0, 0.0, 1e-8), 0.0);
    }

    #[test]
    fn fresh_arm_scores() {
        let arm = LinUcbArm::default();
        assert!((ucb_score(&arm, &[1.0, 0.0, 0.0, 0.0], 0.3).unwrap() - 0.3).abs() < 1e-15);
        assert!((ucb_score(&arm, &[1.0; 4], 0.3).unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn one_update_fixture() {
        let x = [1.0, 0.0, 0.0, 0.0];
        let arm = linucb_update(&LinUcbArm::default(), &x, 1.0);
        let mut expect = LinUcbArm::default();
        expect.a[0][0] = 2.0;
        expect.b[0] = 1.0;
        assert_eq!(arm, expect);
        assert!((ucb_score(&arm, &x, 0.3).unwrap() - 0.7121320343559643).abs() < 1e-12);
    }

    #[test]
    fn zero_context_update_is_noop() {
        let arm = linucb_update(&LinUcbArm::default(), &[0.0; 4], 5.0);
        assert_eq!(arm, LinUcbArm::default());
    }

    #[test]
    fn updates_commute_in_design_matrix() {
        let x = [0.3, -1.0, 0.5, 0.2];
        let y = [1.0, 0.1, -0.4, 0.9];
        let ab = linucb_update(&linucb_update(&LinUcbArm::default(), &x, 0.2), &y, -0.7);
        let ba = linucb_update(&linucb_update(&LinUcbArm::default(), &y, -0.7), &x, 0.2);
        for i in 0..4 {
            for j in 0..4 {
                assert!((ab.a[i][j] - ba.a[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn selection_ties_and_learning() {
        let mut bank = LinUcbBank::new(2, 3, 0.3, 1e-8);
        let x = [0.5, 0.2, 1.0, 0.1];
        assert_eq!(bank.select_cluster(0, &x).unwrap(), 0);
        bank.update(1, 2, &x, 1.0);
        bank.update(1, 2, &x, 1.0);
        // Brute-force the argmax over all arms.
        let scores: Vec<f64> = (0..3).map(|k| bank.arm(1, k).score(&x, 0.3).unwrap()).collect();
        assert!(scores[2] > scores[0] && scores[0] == scores[1]);
        assert_eq!(bank.select_cluster(1, &x).unwrap(), 2);
        // Other server untouched.
        assert_eq!(bank.select_cluster(0, &x).unwrap(), 0);
        let single = LinUcbBank::new(1, 1, 0.3, 1e-8);
        assert_eq!(single.select_cluster(0, &x).unwrap(), 0);
    }

    /// Independent oracle: Gaussian elimination on the 4x4 system.
    fn solve_gauss(a: &Mat4, b: &Context) -> Context {
        let mut m = [[0.0; 5]; 4];
        for i in 0..4 {
            m[i][..4].copy_from_slice(&a[i]);
            m[i][4] = b[i];
        }
        for c in 0..4 {
            let p = (c..4).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
            m.swap(c, p);
            for r in 0..4 {
                if r != c {
                    let f = m[r][c] / m[c][c];
                    for k in c..5 {
                        m[r][k] -= f * m[c][k];
                    }
                }
            }
        }
        [m[0][4] / m[0][0], m[1][4] / m[1][1], m[2][4] / m[2][2], m[3][4] / m[3][3]]
    }

    #[test]
    fn zero_exploration_equals_ridge_prediction() {
        let mut rng = RngStream::root(21);
        for _ in 0..50 {
            let mut arm = LinUcbArm::default();
            for _ in 0..rng.random_range(0..20) {
                let x: Context = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                arm.update(&x, rng.random_range(-1.0..1.0));
            }
            let x: Context = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let theta = solve_gauss(&arm.a, &arm.b);
            let oracle = dot(&theta, &x);
            assert!((ucb_score(&arm, &x, 0.0).unwrap() - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn ts_update_fixtures() {
        let s = TsState::with_budget(4, 2, 10).unwrap();
        let up = ts_update(&s, &[1, 3], 0.05);
        assert_eq!(up.posteriors[1], BetaPosterior { alpha: 1.5, beta: 1.0 });
        assert_eq!(up.posteriors[3], BetaPosterior { alpha: 1.5, beta: 1.0 });
        assert_eq!(up.posteriors[0], BetaPosterior::default());
        let down = ts_update(&s, &[0], -0.5);
        assert_eq!(down.posteriors[0], BetaPosterior { alpha: 1.0, beta: 3.0 });
        let zero = ts_update(&s, &[0, 1, 2], 0.0);
        assert_eq!(zero, s);
    }

    #[test]
    fn budget_from_participation() {
        assert_eq!(TsState::new(10, 0.8, 10).unwrap().budget, 8);
        assert_eq!(TsState::new(10, 0.7, 10).unwrap().budget, 7);
        assert_eq!(TsState::new(5, 0.8, 10).unwrap().budget, 4);
        assert!(TsState::new(3, 0.2, 10).is_err());
        assert!(TsState::new(3, 0.0, 10).is_err());
    }

    #[test]
    fn full_budget_selects_everyone() {
        let mut s = TsState::with_budget(5, 5, 0).unwrap();
        s.posteriors[2].beta = 50.0;
        assert_eq!(ts_select(&s, 100, &mut RngStream::root(1)), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn warmup_is_uniform_over_subsets() {
        // 5 choose 2 = 10 subsets; chi-square critical value at p = 0.01 with 9 dof.
        let s = TsState::with_budget(5, 2, 10).unwrap();
        let root = RngStream::root(77);
        let mut counts = std::collections::BTreeMap::new();
        let trials = 10_000;
        for t in 0..trials {
            let sel = ts_select(&s, 1, &mut root.child(t.to_string()));
            *counts.entry(sel).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 10);
        let expected = trials as f64 / 10.0;
        let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 21.665994333461924, "chi2 = {chi2}");
    }

    #[test]
    fn posterior_drives_selection() {
        let mut s = TsState::with_budget(6, 1, 10).unwrap();
        for _ in 0..30 {
            s = ts_update(&s, &[4], 0.2);
        }
        let root = RngStream::root(5);
        let hits = (0..1000)
            .filter(|t| ts_select(&s, 11, &mut root.child(t.to_string())) == vec![4])
            .count();
        assert!(hits > 900, "{hits}");
    }

    #[test]
    fn snapshot_round_trips_through_json() {
        let mut bank = LinUcbBank::new(2, 2, 0.3, 1e-8);
        bank.update(0, 1, &[0.1, 0.2, 0.3, 0.4], 0.5);
        let snap = BanditSnapshot {
            linucb: bank,
            thompson: vec![ts_update(&TsState::with_budget(3, 2, 10).unwrap(), &[0], 0.1)],
        };
        let json = serde_json::to_string(&snap).unwrap();
        assert_eq!(serde_json::from_str::<BanditSnapshot>(&json).unwrap(), snap);
    }

    proptest! {
        #[test]
        fn reward_is_bounded(cur in 0.0f64..1e6, alt in 0.0f64..1e6) {
            let r = compute_reward(cur, alt, DEFAULT_EPSILON);
            prop_assert!((-1.0..=1.0).contains(&r));
        }

        #[test]
        fn feature_ranges(cur in 0.0f64..10.0, alt in 0.0f64..10.0, sc in 0usize..10, sa in 0usize..10,
                          tenure in 0usize..200, t in 0usize..100) {
            let c = ServerContext { loss_current: cur, loss_best_alt: alt, best_alt_cluster: 0,
                size_current: sc, size_alt: sa, tenure, round: t, horizon: 100, reassign_period: 20 };
            let x = extract_features(&c, DEFAULT_EPSILON);
            prop_assert!((-1.0..=1.0).contains(&x[1]));
            prop_assert!((0.0..=1.0).contains(&x[2]));
            prop_assert!((0.0..=1.0).contains(&x[3]));
            prop_assert_eq!(x[0] < 0.0, cur < alt);
        }

        #[test]
        fn design_matrix_tracks_outer_products(xs in prop::collection::vec(prop::array::uniform4(-2.0f64..2.0), 0..10)) {
            let mut arm = LinUcbArm::default();
            let mut sum = [[0.0; 4]; 4];
            for x in &xs {
                arm.update(x, 0.1);
                for i in 0..4 { for j in 0..4 { sum[i][j] += x[i] * x[j]; } }
            }
            for i in 0..4 {
                for j in 0..4 {
                    let id = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((arm.a[i][j] - id - sum[i][j]).abs() < 1e-12);
                }
            }
            // A = I + PSD, so x^T A x >= |x|^2 for any x.
            let v = [0.5, -0.5, 0.25, 1.0];
            let av: f64 = (0..4).map(|i| v[i] * (0..4).map(|j| arm.a[i][j] * v[j]).sum::<f64>()).sum();
            prop_assert!(av >= dot(&v, &v) - 1e-12);
        }
    }
}
