//! Synthetic classification tasks and two-level Dirichlet non-IID partitioning.
//!
//! A [`Partition`] splits a labeled pool over `M` edge servers and `N_m`
//! clients per server. For every class, the class's samples are spread across
//! servers by a multinomial draw whose probabilities come from the servers'
//! Dirichlet proportions for that class (normalized across servers). Each
//! server then sets aside a stratified test split and repeats the same scheme
//! over its clients.

use rand::seq::SliceRandom;
use rand_distr::{Binomial, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Labeled examples stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn from_parts(dim: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::config(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("non-finite feature value"));
        }
        Ok(Self {
            dim,
            features,
            labels,
        })
    }

    pub fn push(&mut self, features: &[f64], label: usize) {
        debug_assert_eq!(features.len(), self.dim);
        self.features.extend_from_slice(features);
        self.labels.push(label);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Number of distinct classes implied by the largest label.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn class_histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut hist = vec![0; num_classes];
        for &y in &self.labels {
            hist[y] += 1;
        }
        hist
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::new(self.dim);
        for &i in indices {
            out.push(self.features(i), self.label(i));
        }
        out
    }
}

/// Draw a point from `Dir(alpha * 1_C)` by normalizing independent
/// `Gamma(alpha, 1)` draws.
pub fn sample_dirichlet(alpha: f64, num_classes: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::input(format!("dirichlet concentration must be > 0, got {alpha}")));
    }
    if num_classes < 2 {
        return Err(Error::input("dirichlet needs at least two categories"));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::input(e.to_string()))?;
    loop {
        let draws: Vec<f64> = (0..num_classes).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        // All-zero draws only happen through underflow at tiny alpha.
        if total > 0.0 && total.is_finite() {
            return Ok(draws.into_iter().map(|g| g / total).collect());
        }
    }
}

/// Multinomial draw of `n` items over `probs` via sequential conditional
/// binomials. `probs` need not be normalized.
fn multinomial(n: usize, probs: &[f64], rng: &mut RngStream) -> Vec<usize> {
    let mut counts = vec![0; probs.len()];
    let mut remaining = n as u64;
    let mut mass: f64 = probs.iter().sum();
    for (k, &p) in probs.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if k + 1 == probs.len() || mass <= 0.0 {
            counts[k] = remaining as usize;
            break;
        }
        let q = (p / mass).clamp(0.0, 1.0);
        let c = Binomial::new(remaining, q)
            .expect("probability clamped to [0, 1]")
            .sample(rng);
        counts[k] = c as usize;
        remaining -= c;
        mass -= p;
    }
    counts
}

/// Isotropic Gaussian clusters, one per class, with means of norm
/// `class_separation` along seeded random directions and unit covariance.
pub fn synth_mixture(
    num_classes: usize,
    input_dim: usize,
    samples_per_class: usize,
    class_separation: f64,
    rng: &mut RngStream,
) -> Result<Dataset> {
    if num_classes < 2 || input_dim < 2 {
        return Err(Error::input("mixture needs at least 2 classes and 2 input dims"));
    }
    let mut means_rng = rng.child("means");
    let mut sample_rng = rng.child("samples");
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let dir: Vec<f64> = (0..input_dim)
                .map(|_| StandardNormal.sample(&mut means_rng))
                .collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            dir.into_iter().map(|v| class_separation * v / norm).collect()
        })
        .collect();

    let mut data = Dataset::new(input_dim);
    let mut row = vec![0.0; input_dim];
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..samples_per_class {
            for (r, m) in row.iter_mut().zip(mean) {
                let z: f64 = StandardNormal.sample(&mut sample_rng);
                *r = m + z;
            }
            data.push(&row, label);
        }
    }
    Ok(data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub num_servers: usize,
    pub clients_per_server: usize,
    pub alpha_server: f64,
    pub alpha_client: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_test_fraction() -> f64 {
    0.2
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_servers == 0 || self.clients_per_server == 0 {
            return Err(Error::config("need at least one server and one client per server"));
        }
        if !(self.alpha_server > 0.0) || !(self.alpha_client > 0.0) {
            return Err(Error::config("dirichlet concentrations must be > 0"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("test_fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// One client's private training data.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub server: usize,
    pub train: Dataset,
    /// Positions of the samples in the source pool.
    pub pool_indices: Vec<usize>,
}

impl ClientData {
    pub fn num_samples(&self) -> usize {
        self.train.len()
    }
}

#[derive(Debug, Clone)]
pub struct ServerData {
    /// Global client ids owned by this server, ascending.
    pub clients: Vec<usize>,
    pub test: Dataset,
    pub test_pool_indices: Vec<usize>,
    /// Total training samples over the server's clients (`n_m`).
    pub num_train: usize,
}

#[derive(Debug, Clone)]
pub struct Partition {
    pub num_classes: usize,
    pub clients: Vec<ClientData>,
    pub servers: Vec<ServerData>,
}

impl Partition {
    /// Assemble a partition from explicit data: `servers[m]` is
    /// `(client train sets, server test set)`. Pool indices are left empty.
    pub fn from_datasets(num_classes: usize, servers: Vec<(Vec<Dataset>, Dataset)>) -> Result<Self> {
        if servers.is_empty() {
            return Err(Error::input("a partition needs at least one server"));
        }
        let dim = servers[0].1.dim();
        let mut clients = Vec::new();
        let mut out = Vec::with_capacity(servers.len());
        for (m, (train_sets, test)) in servers.into_iter().enumerate() {
            if train_sets.is_empty() || train_sets.iter().any(Dataset::is_empty) || test.is_empty() {
                return Err(Error::input(format!("server {m} needs nonempty clients and test data")));
            }
            let all = train_sets.iter().chain(std::iter::once(&test));
            if let Some(d) = all.clone().find(|d| d.dim() != dim) {
                return Err(Error::config(format!("feature dim {} vs {dim} on server {m}", d.dim())));
            }
            if all.flat_map(|d| d.labels()).any(|&l| l >= num_classes) {
                return Err(Error::input(format!("label out of range on server {m}")));
            }
            let ids: Vec<usize> = (clients.len()..clients.len() + train_sets.len()).collect();
            let num_train = train_sets.iter().map(Dataset::len).sum();
            clients.extend(train_sets.into_iter().map(|train| ClientData {
                server: m,
                train,
                pool_indices: Vec::new(),
            }));
            out.push(ServerData {
                clients: ids,
                test,
                test_pool_indices: Vec::new(),
                num_train,
            });
        }
        Ok(Self {
            num_classes,
            clients,
            servers: out,
        })
    }

    pub fn num_servers(&self) -> usize {
        self.servers.len()
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// `n`: training samples over all clients.
    pub fn total_train(&self) -> usize {
        self.servers.iter().map(|s| s.num_train).sum()
    }

    pub fn server_train_sizes(&self) -> Vec<usize> {
        self.servers.iter().map(|s| s.num_train).collect()
    }

    /// All of a server's client training data concatenated in client order.
    pub fn server_train(&self, server: usize) -> Dataset {
        let dim = self.servers[server].test.dim();
        let mut out = Dataset::new(dim);
        for &c in &self.servers[server].clients {
            let d = &self.clients[c].train;
            for i in 0..d.len() {
                out.push(d.features(i), d.label(i));
            }
        }
        out
    }

    pub fn manifest(&self) -> PartitionManifest {
        PartitionManifest {
            num_classes: self.num_classes,
            total_train: self.total_train(),
            servers: self
                .servers
                .iter()
                .enumerate()
                .map(|(m, s)| ServerManifest {
                    server: m,
                    num_train: s.num_train,
                    test_histogram: s.test.class_histogram(self.num_classes),
                    clients: s
                        .clients
                        .iter()
                        .map(|&c| ClientManifest {
                            client: c,
                            num_train: self.clients[c].num_samples(),
                            histogram: self.clients[c].train.class_histogram(self.num_classes),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

/// Inspection document for a partition: per-client class histograms and counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub num_classes: usize,
    pub total_train: usize,
    pub servers: Vec<ServerManifest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerManifest {
    pub server: usize,
    pub num_train: usize,
    pub test_histogram: Vec<usize>,
    pub clients: Vec<ClientManifest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientManifest {
    pub client: usize,
    pub num_train: usize,
    pub histogram: Vec<usize>,
}

/// Split per-class index lists over `groups` owners using one Dirichlet draw
/// per owner and a per-class multinomial with column-normalized proportions.
fn dirichlet_split(
    by_class: &[Vec<usize>],
    groups: usize,
    alpha: f64,
    rng: &mut RngStream,
) -> Result<Vec<Vec<Vec<usize>>>> {
    let num_classes = by_class.len();
    let props: Vec<Vec<f64>> = (0..groups)
        .map(|_| sample_dirichlet(alpha, num_classes, rng))
        .collect::<Result<_>>()?;
    // out[group][class] = indices
    let mut out = vec![vec![Vec::new(); num_classes]; groups];
    for (c, members) in by_class.iter().enumerate() {
        let mut members = members.clone();
        members.shuffle(rng);
        let column: Vec<f64> = props.iter().map(|p| p[c]).collect();
        let column = if column.iter().sum::<f64>() > 0.0 {
            column
        } else {
            vec![1.0; groups]
        };
        let counts = multinomial(members.len(), &column, rng);
        let mut start = 0;
        for (g, &n) in counts.iter().enumerate() {
            out[g][c] = members[start..start + n].to_vec();
            start += n;
        }
    }
    Ok(out)
}

fn total(per_class: &[Vec<usize>]) -> usize {
    per_class.iter().map(Vec::len).sum()
}

/// Move one sample from the fullest class of `from` into `to`.
fn move_one(groups: &mut [Vec<Vec<usize>>], from: usize, to: usize) {
    let class = (0..groups[from].len())
        .max_by_key(|&c| (groups[from][c].len(), std::cmp::Reverse(c)))
        .expect("at least one class");
    let idx = groups[from][class].pop().expect("donor group is nonempty");
    groups[to][class].push(idx);
}

/// Ensure each group holds at least `min` samples by moving single samples
/// from the currently largest group.
fn fill_minimum(groups: &mut [Vec<Vec<usize>>], min: usize) -> Result<()> {
    loop {
        let Some(needy) = (0..groups.len()).find(|&g| total(&groups[g]) < min) else {
            return Ok(());
        };
        let donor = (0..groups.len())
            .max_by_key(|&g| (total(&groups[g]), std::cmp::Reverse(g)))
            .expect("nonempty");
        if total(&groups[donor]) <= min {
            return Err(Error::input("pool too small to give every group its minimum"));
        }
        move_one(groups, donor, needy);
    }
}

/// Two-level Dirichlet partition of `pool` into servers, their test splits,
/// and their clients.
pub fn partition_two_level(
    pool: &Dataset,
    cfg: &PartitionConfig,
    rng: &mut RngStream,
) -> Result<Partition> {
    cfg.validate()?;
    let num_classes = pool.num_classes();
    if num_classes < 2 {
        return Err(Error::input("pool must contain at least two classes"));
    }
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &y) in pool.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::input(format!("class {c} is absent from the pool")));
    }
    let m = cfg.num_servers;
    let n_m = cfg.clients_per_server;
    if pool.len() < num_classes * m || pool.len() < m * (n_m + 1) {
        return Err(Error::input(format!(
            "pool of {} samples is too small for {m} servers x {n_m} clients",
            pool.len()
        )));
    }

    let mut server_rng = rng.child("servers");
    let mut servers = dirichlet_split(&by_class, m, cfg.alpha_server, &mut server_rng)?;
    // Each server needs one test sample and one training sample per client.
    fill_minimum(&mut servers, n_m + 1)?;

    let mut clients = Vec::with_capacity(m * n_m);
    let mut server_data = Vec::with_capacity(m);
    for (s, per_class) in servers.into_iter().enumerate() {
        let mut train_by_class = Vec::with_capacity(num_classes);
        let mut test_idx = Vec::new();
        for members in per_class {
            let n_test = ((cfg.test_fraction * members.len() as f64) + 0.5).floor() as usize;
            let n_test = n_test.min(members.len());
            test_idx.extend_from_slice(&members[..n_test]);
            train_by_class.push(members[n_test..].to_vec());
        }
        if test_idx.is_empty() {
            let c = (0..num_classes)
                .max_by_key(|&c| (train_by_class[c].len(), std::cmp::Reverse(c)))
                .expect("classes");
            test_idx.push(train_by_class[c].pop().expect("server holds samples"));
        }
        let train_total = total(&train_by_class);
        if train_total < n_m {
            // Rounding can eat into the training share of tiny servers.
            while total(&train_by_class) < n_m && test_idx.len() > 1 {
                let idx = test_idx.pop().expect("len > 1");
                train_by_class[pool.label(idx)].push(idx);
            }
        }

        let mut client_rng = rng.child(format!("clients/{s}"));
        let mut groups = dirichlet_split(&train_by_class, n_m, cfg.alpha_client, &mut client_rng)?;
        fill_minimum(&mut groups, 1)?;

        let first = clients.len();
        let mut num_train = 0;
        for group in groups {
            let mut idx: Vec<usize> = group.into_iter().flatten().collect();
            idx.sort_unstable();
            num_train += idx.len();
            clients.push(ClientData {
                server: s,
                train: pool.subset(&idx),
                pool_indices: idx,
            });
        }
        test_idx.sort_unstable();
        server_data.push(ServerData {
            clients: (first..first + n_m).collect(),
            test: pool.subset(&test_idx),
            test_pool_indices: test_idx,
            num_train,
        });
    }

    Ok(Partition {
        num_classes,
        clients,
        servers: server_data,
    })
}
