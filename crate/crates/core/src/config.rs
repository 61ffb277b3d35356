//! Experiment configuration (TOML, format version 1).
//!
//! ```toml
//! version = 1
//! seed = 0
//! seeds = 3
//! rounds = 60
//!
//! [task]
//! num_classes = 8
//! input_dim = 16
//! samples_per_class = 250
//! class_separation = 2.5
//!
//! [partition]
//! num_servers = 4
//! clients_per_server = 5
//! alpha_server = 0.1
//! alpha_client = 0.5
//! test_fraction = 0.2
//!
//! [learner]
//! hidden_dims = [64]
//!
//! [sgd]
//! lr = 0.01
//!
//! [method]
//! name = "fedbac"       # fedbac | hierfavg | ifca
//! participation = 0.8   # optional, per-method default otherwise
//!
//! [metrics]
//! convergence_targets = [0.5, 0.6]
//!
//! [output]
//! dir = "results"
//! ```
//!
//! Every section except `[task]` and `[partition]` may be omitted. Unknown
//! keys are rejected. Validation messages carry the line of the offending key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{partition_two_level, synth_mixture, Partition, PartitionConfig};
use crate::error::{Error, Result};
use crate::metrics::{DEFAULT_BYTES_PER_PARAM, DEFAULT_FAIRNESS_WINDOW};
use crate::model::{LearnerConfig, SgdHyperparams};
use crate::orchestrator::{ClientSelection, InitAssignment, Method, MethodConfig};
use crate::rng::RngStream;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    /// Number of consecutive seeds (`seed`, `seed + 1`, ...) per run.
    #[serde(default = "one")]
    pub seeds: usize,
    pub rounds: usize,
    pub task: TaskConfig,
    pub partition: PartitionConfig,
    #[serde(default)]
    pub learner: LearnerSection,
    #[serde(default)]
    pub sgd: SgdSection,
    #[serde(default)]
    pub method: MethodSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub num_classes: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    pub class_separation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerSection {
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    /// Multiplies every hidden width (capacity-matched baselines).
    #[serde(default = "one")]
    pub width_factor: usize,
}

/// `[sgd]`; any omitted field takes the library default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdSection {
    pub lr: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub local_epochs: usize,
    pub cluster_l2: f64,
    pub batch_size: usize,
}

impl Default for SgdSection {
    fn default() -> Self {
        let d = SgdHyperparams::default();
        Self {
            lr: d.lr,
            lr_decay: d.lr_decay,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            clip_norm: d.clip_norm,
            local_epochs: d.local_epochs,
            cluster_l2: d.cluster_l2,
            batch_size: d.batch_size,
        }
    }
}

impl From<&SgdSection> for SgdHyperparams {
    fn from(s: &SgdSection) -> Self {
        SgdHyperparams {
            lr: s.lr,
            lr_decay: s.lr_decay,
            momentum: s.momentum,
            weight_decay: s.weight_decay,
            clip_norm: s.clip_norm,
            local_epochs: s.local_epochs,
            cluster_l2: s.cluster_l2,
            batch_size: s.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodSection {
    pub name: Method,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_max: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub participation: Option<f64>,
    /// IFCA cluster count when `k_max` is not given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ifca_k: Option<usize>,
    pub reassign_period: usize,
    pub ts_warmup: usize,
    pub ifca_threshold: f64,
    pub init_assignment: InitAssignment,
    pub client_selection: ClientSelection,
    pub alpha_ucb: f64,
    pub epsilon: f64,
    pub additive: bool,
}

impl Default for MethodSection {
    fn default() -> Self {
        let d = MethodConfig::fedbac(1);
        Self {
            name: Method::FedBac,
            k_max: None,
            participation: None,
            ifca_k: None,
            reassign_period: d.reassign_period,
            ts_warmup: d.ts_warmup,
            ifca_threshold: d.ifca_threshold,
            init_assignment: d.init_assignment,
            client_selection: d.client_selection,
            alpha_ucb: d.alpha_ucb,
            epsilon: d.epsilon,
            additive: false,
        }
    }
}

pub const IFCA_DEFAULT_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub fairness_window: usize,
    pub convergence_targets: Vec<f64>,
    pub bytes_per_param: u64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            fairness_window: DEFAULT_FAIRNESS_WINDOW,
            convergence_targets: Vec::new(),
            bytes_per_param: DEFAULT_BYTES_PER_PARAM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("results") }
    }
}

impl Default for LearnerSection {
    fn default() -> Self {
        Self {
            hidden_dims: Vec::new(),
            width_factor: 1,
        }
    }
}

fn one() -> usize {
    1
}

/// A rejected field: `section` is "" for top-level keys.
struct FieldError {
    section: &'static str,
    key: &'static str,
    message: String,
}

fn check(errors: &mut Vec<FieldError>, ok: bool, section: &'static str, key: &'static str, message: &str) {
    if !ok {
        errors.push(FieldError {
            section,
            key,
            message: message.to_string(),
        });
    }
}

/// Numeric fields accepted by [`ExperimentConfig::set_axis`].
pub const SWEEP_AXES: &[&str] = &[
    "seed",
    "rounds",
    "num_classes",
    "input_dim",
    "samples_per_class",
    "class_separation",
    "num_servers",
    "clients_per_server",
    "alpha_server",
    "alpha_client",
    "test_fraction",
    "width_factor",
    "lr",
    "lr_decay",
    "momentum",
    "weight_decay",
    "clip_norm",
    "local_epochs",
    "cluster_l2",
    "batch_size",
    "k_max",
    "participation",
    "reassign_period",
    "ts_warmup",
    "ifca_threshold",
    "ifca_k",
    "alpha_ucb",
];

impl ExperimentConfig {
    /// A small runnable configuration for `method`.
    pub fn example(method: Method) -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            seeds: 1,
            rounds: 30,
            task: TaskConfig {
                num_classes: 8,
                input_dim: 16,
                samples_per_class: 250,
                class_separation: 2.5,
            },
            partition: PartitionConfig {
                num_servers: 4,
                clients_per_server: 5,
                alpha_server: 0.1,
                alpha_client: 0.5,
                test_fraction: 0.2,
            },
            learner: LearnerSection {
                hidden_dims: vec![64],
                width_factor: 1,
            },
            sgd: SgdSection::default(),
            method: MethodSection {
                name: method,
                ..Default::default()
            },
            metrics: MetricsSection::default(),
            output: OutputSection::default(),
        }
    }

    /// Parse and validate. Errors name the offending line when one exists.
    pub fn from_toml_str(src: &str) -> Result<Self> {
        let cfg = Self::parse_unchecked(src)?;
        cfg.validate_against(src)?;
        Ok(cfg)
    }

    /// Parse without semantic validation, e.g. to apply overrides first and
    /// then call [`validate_against`](Self::validate_against).
    pub fn parse_unchecked(src: &str) -> Result<Self> {
        toml::from_str(src).map_err(|e| {
            let line = e.span().map(|s| line_of_offset(src, s.start));
            let msg = e.message().to_string();
            Error::Config(match line {
                Some(l) => format!("line {l}: {msg}"),
                None => msg,
            })
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path)?;
        Self::from_toml_str(&src).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(format!("config serialization failed: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with_source(None)
    }

    /// Validate, locating offending keys in `src` for the message.
    pub fn validate_against(&self, src: &str) -> Result<()> {
        self.validate_with_source(Some(src))
    }

    fn validate_with_source(&self, src: Option<&str>) -> Result<()> {
        let errors = self.field_errors();
        if let Some(first) = errors.first() {
            let located = src.and_then(|s| key_line(s, first.section, first.key));
            let name = if first.section.is_empty() {
                first.key.to_string()
            } else {
                format!("{}.{}", first.section, first.key)
            };
            return Err(Error::Config(match located {
                Some(l) => format!("line {l}: {name}: {}", first.message),
                None => format!("{name}: {}", first.message),
            }));
        }
        // Structural checks that span several fields.
        self.learner_config().validate()?;
        self.sgd_hyperparams().validate()?;
        self.partition.validate()?;
        let method = self.method_config()?;
        method.validate(self.partition.num_servers).map_err(|e| {
            let line = src.and_then(|s| key_line(s, "method", "name"));
            match (e, line) {
                (Error::Config(msg), Some(l)) => Error::Config(format!("line {l}: method: {msg}")),
                (e, _) => e,
            }
        })
    }

    fn field_errors(&self) -> Vec<FieldError> {
        let mut e = Vec::new();
        check(
            &mut e,
            self.version == CONFIG_VERSION,
            "",
            "version",
            &format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version),
        );
        check(&mut e, self.seeds >= 1, "", "seeds", "must be at least 1");
        check(&mut e, self.rounds >= 1, "", "rounds", "must be at least 1");

        let t = &self.task;
        check(&mut e, t.num_classes >= 2, "task", "num_classes", "must be at least 2");
        check(&mut e, t.input_dim >= 2, "task", "input_dim", "must be at least 2");
        check(&mut e, t.samples_per_class >= 1, "task", "samples_per_class", "must be at least 1");
        check(
            &mut e,
            t.class_separation.is_finite() && t.class_separation >= 0.0,
            "task",
            "class_separation",
            "must be a finite value >= 0",
        );

        let p = &self.partition;
        check(&mut e, p.num_servers >= 1, "partition", "num_servers", "must be at least 1");
        check(&mut e, p.clients_per_server >= 1, "partition", "clients_per_server", "must be at least 1");
        check(&mut e, p.alpha_server > 0.0, "partition", "alpha_server", "must be > 0");
        check(&mut e, p.alpha_client > 0.0, "partition", "alpha_client", "must be > 0");
        check(
            &mut e,
            p.test_fraction > 0.0 && p.test_fraction < 1.0,
            "partition",
            "test_fraction",
            "must lie in (0, 1)",
        );

        let l = &self.learner;
        check(&mut e, l.hidden_dims.iter().all(|&h| h >= 1), "learner", "hidden_dims", "widths must be >= 1");
        check(&mut e, l.width_factor >= 1, "learner", "width_factor", "must be at least 1");

        let s = &self.sgd;
        check(&mut e, s.lr >= 0.0, "sgd", "lr", "must be >= 0");
        check(&mut e, s.lr_decay > 0.0 && s.lr_decay <= 1.0, "sgd", "lr_decay", "must lie in (0, 1]");
        check(&mut e, (0.0..1.0).contains(&s.momentum), "sgd", "momentum", "must lie in [0, 1)");
        check(&mut e, s.weight_decay >= 0.0, "sgd", "weight_decay", "must be >= 0");
        check(&mut e, s.clip_norm > 0.0, "sgd", "clip_norm", "must be > 0");
        check(&mut e, s.local_epochs >= 1, "sgd", "local_epochs", "must be at least 1");
        check(&mut e, s.cluster_l2 >= 0.0, "sgd", "cluster_l2", "must be >= 0");
        check(&mut e, s.batch_size >= 1, "sgd", "batch_size", "must be at least 1");

        let m = &self.method;
        check(&mut e, m.k_max.is_none_or(|k| k >= 1), "method", "k_max", "must be at least 1");
        if let Some(k) = m.k_max {
            check(
                &mut e,
                m.name != Method::FedBac || k <= p.num_servers,
                "method",
                "k_max",
                "must not exceed partition.num_servers",
            );
            check(&mut e, m.name != Method::HierFavg || k == 1, "method", "k_max", "hierfavg requires k_max = 1");
        }
        if let Some(q) = m.participation {
            check(&mut e, q > 0.0 && q <= 1.0, "method", "participation", "must lie in (0, 1]");
            check(
                &mut e,
                m.name != Method::HierFavg || q == 1.0,
                "method",
                "participation",
                "hierfavg requires full participation (1.0)",
            );
            check(
                &mut e,
                ((q * p.clients_per_server as f64) + 1e-9).floor() >= 1.0,
                "method",
                "participation",
                "selects no client at this clients_per_server",
            );
        }
        check(&mut e, m.ifca_k.is_none_or(|k| k >= 1), "method", "ifca_k", "must be at least 1");
        check(&mut e, m.reassign_period >= 1, "method", "reassign_period", "must be at least 1");
        check(&mut e, m.ifca_threshold >= 0.0, "method", "ifca_threshold", "must be >= 0");
        check(&mut e, m.alpha_ucb >= 0.0, "method", "alpha_ucb", "must be >= 0");
        check(&mut e, m.epsilon > 0.0, "method", "epsilon", "must be > 0");
        check(
            &mut e,
            !m.additive || m.name == Method::HierFavg,
            "method",
            "additive",
            "only applies to hierfavg",
        );

        let mt = &self.metrics;
        check(&mut e, mt.fairness_window >= 1, "metrics", "fairness_window", "must be at least 1");
        check(&mut e, mt.bytes_per_param >= 1, "metrics", "bytes_per_param", "must be at least 1");
        check(
            &mut e,
            mt.convergence_targets.iter().all(|v| (0.0..=1.0).contains(v)),
            "metrics",
            "convergence_targets",
            "accuracy targets must lie in [0, 1]",
        );
        e
    }

    pub fn learner_config(&self) -> LearnerConfig {
        let base = LearnerConfig::mlp(self.task.input_dim, &self.learner.hidden_dims, self.task.num_classes);
        base.widened(self.learner.width_factor)
    }

    pub fn sgd_hyperparams(&self) -> SgdHyperparams {
        SgdHyperparams::from(&self.sgd)
    }

    /// Resolve per-method defaults: Fed-BAC `K_max = M`, `p = 0.8`; IFCA
    /// `K = 5`, `p = 1`; HierFAVG `K = 1`, `p = 1`.
    pub fn method_config(&self) -> Result<MethodConfig> {
        let m = &self.method;
        let (k_default, p_default) = match m.name {
            Method::FedBac => (self.partition.num_servers, 0.8),
            Method::HierFavg => (1, 1.0),
            Method::Ifca => (m.ifca_k.unwrap_or(IFCA_DEFAULT_K), 1.0),
        };
        Ok(MethodConfig {
            method: m.name,
            k_max: m.k_max.unwrap_or(k_default),
            participation: m.participation.unwrap_or(p_default),
            reassign_period: m.reassign_period,
            ts_warmup: m.ts_warmup,
            ifca_threshold: m.ifca_threshold,
            init_assignment: m.init_assignment,
            client_selection: m.client_selection,
            alpha_ucb: m.alpha_ucb,
            epsilon: m.epsilon,
            additive_baseline: m.additive,
        })
    }

    /// This configuration with `method` swapped in. Switching to another
    /// method drops the explicit `k_max`, `participation` and `additive`
    /// settings so the new method's defaults apply.
    pub fn for_method(&self, method: Method) -> Self {
        let mut cfg = self.clone();
        if method != self.method.name {
            cfg.method.name = method;
            cfg.method.k_max = None;
            cfg.method.participation = None;
            cfg.method.additive = false;
        }
        cfg
    }

    /// The seeds a run covers.
    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed + i).collect()
    }

    /// Pool and partition for one seed, from the `data/...` streams.
    pub fn build_partition(&self, seed: u64) -> Result<Partition> {
        let root = RngStream::root(seed);
        let t = &self.task;
        let pool = synth_mixture(
            t.num_classes,
            t.input_dim,
            t.samples_per_class,
            t.class_separation,
            &mut root.child("data/pool"),
        )?;
        partition_two_level(&pool, &self.partition, &mut root.child("data/partition"))
    }

    /// Set a numeric field by its key name (optionally `section.key`).
    pub fn set_axis(&mut self, axis: &str, value: f64) -> Result<()> {
        let key = axis.rsplit('.').next().unwrap_or(axis);
        let int = || -> Result<usize> {
            if value.fract() == 0.0 && value >= 0.0 && value <= usize::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(Error::config(format!("axis {axis} takes non-negative integers, got {value}")))
            }
        };
        match key {
            "seed" => self.seed = int()? as u64,
            "rounds" => self.rounds = int()?,
            "num_classes" => self.task.num_classes = int()?,
            "input_dim" => self.task.input_dim = int()?,
            "samples_per_class" => self.task.samples_per_class = int()?,
            "class_separation" => self.task.class_separation = value,
            "num_servers" => self.partition.num_servers = int()?,
            "clients_per_server" => self.partition.clients_per_server = int()?,
            "alpha_server" => self.partition.alpha_server = value,
            "alpha_client" => self.partition.alpha_client = value,
            "test_fraction" => self.partition.test_fraction = value,
            "width_factor" => self.learner.width_factor = int()?,
            "lr" => self.sgd.lr = value,
            "lr_decay" => self.sgd.lr_decay = value,
            "momentum" => self.sgd.momentum = value,
            "weight_decay" => self.sgd.weight_decay = value,
            "clip_norm" => self.sgd.clip_norm = value,
            "local_epochs" => self.sgd.local_epochs = int()?,
            "cluster_l2" => self.sgd.cluster_l2 = value,
            "batch_size" => self.sgd.batch_size = int()?,
            "k_max" => self.method.k_max = Some(int()?),
            "participation" => self.method.participation = Some(value),
            "reassign_period" => self.method.reassign_period = int()?,
            "ts_warmup" => self.method.ts_warmup = int()?,
            "ifca_threshold" => self.method.ifca_threshold = value,
            "ifca_k" => self.method.ifca_k = Some(int()?),
            "alpha_ucb" => self.method.alpha_ucb = value,
            _ => {
                return Err(Error::config(format!(
                    "unknown sweep axis {axis:?}; expected one of: {}",
                    SWEEP_AXES.join(", ")
                )))
            }
        }
        Ok(())
    }
}

fn line_of_offset(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

/// 1-based line of `key` inside `[section]` (top level when `section` is "").
fn key_line(src: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if let Some(rest) = line.strip_prefix('[') {
            current = rest.split(']').next().unwrap_or("").trim().to_string();
            continue;
        }
        if current != section {
            continue;
        }
        if let Some((k, _)) = line.split_once('=') {
            if k.trim().trim_matches('"') == key {
                return Some(i + 1);
            }
        }
    }
    None
}
