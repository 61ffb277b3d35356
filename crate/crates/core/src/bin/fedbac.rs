use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use fedbac::config::ExperimentConfig;
use fedbac::orchestrator::Method;
use fedbac::report::{self, ComparisonSummary, MethodAggregate, RunOutput, SweepPoint, SweepSummary};
use fedbac::Error;

#[derive(Parser)]
#[command(name = "fedbac", version, about = "Hierarchical federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method over the configured seeds.
    Run(Common),
    /// Run one method for each value of a numeric config field.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Config key to vary, e.g. `alpha_server` or `participation`.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
    },
    /// Run Fed-BAC, HierFAVG and IFCA on the same seeds and partitions.
    Compare(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// First seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of consecutive seeds (overrides the config).
    #[arg(long)]
    seeds: Option<usize>,
    /// fedbac, hierfavg or ifca (overrides the config).
    #[arg(long)]
    method: Option<String>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Omit timestamps so repeated runs produce identical files.
    #[arg(long)]
    deterministic: bool,
}

impl Common {
    fn load(&self) -> fedbac::Result<ExperimentConfig> {
        let src = std::fs::read_to_string(&self.config)?;
        let located = |e: Error| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", self.config.display())),
            other => other,
        };
        let mut cfg = ExperimentConfig::parse_unchecked(&src).map_err(located)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(n) = self.seeds {
            cfg.seeds = n;
        }
        if let Some(name) = &self.method {
            cfg.method.name =
                Method::parse(name).ok_or_else(|| Error::Config(format!("--method: unknown method {name:?}")))?;
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        cfg.validate_against(&src).map_err(located)?;
        Ok(cfg)
    }

    fn stamp(&self) -> Option<u64> {
        (!self.deterministic).then(report::unix_now)
    }
}

fn run_all(cfg: &ExperimentConfig, stamp: Option<u64>) -> fedbac::Result<Vec<RunOutput>> {
    let seeds = cfg.seed_list();
    let mut outs: Vec<RunOutput> = seeds
        .par_iter()
        .map(|&s| report::run_seed(cfg, s))
        .collect::<fedbac::Result<_>>()?;
    for o in &mut outs {
        o.summary.timestamp_unix = stamp;
    }
    Ok(outs)
}

fn cmd_run(common: &Common) -> fedbac::Result<()> {
    let cfg = common.load()?;
    for out in run_all(&cfg, common.stamp())? {
        let stem = report::run_stem(cfg.method.name, out.summary.seed);
        let (csv, _) = report::write_run(&cfg.output.dir, &stem, &out)?;
        let s = &out.summary;
        println!(
            "{} seed {}: final {:.2}%, window {:.2}%, sigma {:.2}pp, {} bytes -> {}",
            s.method.name(),
            s.seed,
            100.0 * s.final_distributed_accuracy,
            100.0 * s.window_distributed_accuracy,
            s.fairness_pp.sigma,
            s.total_comm_bytes,
            csv.display()
        );
    }
    Ok(())
}

fn cmd_sweep(common: &Common, axis: &str, values: &[f64]) -> fedbac::Result<()> {
    let base = common.load()?;
    if values.is_empty() {
        return Err(Error::Config("--values: at least one value is required".into()));
    }
    let mut variants = Vec::with_capacity(values.len());
    for &v in values {
        let mut cfg = base.clone();
        cfg.set_axis(axis, v)?;
        cfg.validate()?;
        variants.push((v, cfg));
    }
    let stamp = common.stamp();
    let results: Vec<Vec<RunOutput>> = variants
        .par_iter()
        .map(|(_, cfg)| run_all(cfg, stamp))
        .collect::<fedbac::Result<_>>()?;
    let key = axis.rsplit('.').next().unwrap_or(axis);
    let mut points = Vec::new();
    for ((v, cfg), outs) in variants.iter().zip(&results) {
        for out in outs {
            let stem = format!("{key}={v}_{}", report::run_stem(cfg.method.name, out.summary.seed));
            report::write_run(&base.output.dir, &stem, out)?;
        }
        let summaries: Vec<_> = outs.iter().map(|o| o.summary.clone()).collect();
        points.push(SweepPoint {
            value: *v,
            result: MethodAggregate::from_runs(cfg.method.name, &summaries),
        });
    }
    let summary = SweepSummary {
        schema_version: report::SCHEMA_VERSION,
        axis: key.to_string(),
        seeds: base.seed_list(),
        points,
        timestamp_unix: stamp,
        config: base.clone(),
    };
    report::write_json(&base.output.dir.join(format!("sweep_{key}.json")), &summary)?;
    print!("{}", summary.table());
    Ok(())
}

fn cmd_compare(common: &Common) -> fedbac::Result<()> {
    let base = common.load()?;
    let configs: Vec<ExperimentConfig> = Method::ALL.iter().map(|&m| base.for_method(m)).collect();
    for cfg in &configs {
        cfg.validate()?;
    }
    let stamp = common.stamp();
    let outs: Vec<Vec<RunOutput>> = configs
        .par_iter()
        .map(|cfg| run_all(cfg, stamp))
        .collect::<fedbac::Result<_>>()?;
    for (cfg, runs) in configs.iter().zip(&outs) {
        for out in runs {
            report::write_run(&base.output.dir, &report::run_stem(cfg.method.name, out.summary.seed), out)?;
        }
    }
    let summaries: Vec<Vec<_>> = outs
        .iter()
        .map(|runs| runs.iter().map(|o| o.summary.clone()).collect())
        .collect();
    let runs: [Vec<_>; 3] = summaries.try_into().expect("three methods");
    let mut summary = ComparisonSummary::build(&base, &base.seed_list(), &runs);
    summary.timestamp_unix = stamp;
    report::write_json(&base.output.dir.join("comparison.json"), &summary)?;
    for m in &summary.methods {
        println!(
            "{:>9}: accuracy {} pp, sigma {} pp",
            m.method.name(),
            m.accuracy_pp,
            m.fairness_sigma_pp
        );
    }
    println!("  delta_H: {} pp", summary.delta_h_pp);
    println!("  delta_I: {} pp", summary.delta_i_pp);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(c) => cmd_run(c),
        Command::Sweep { common, axis, values } => cmd_sweep(common, axis, values),
        Command::Compare(c) => cmd_compare(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedbac: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
