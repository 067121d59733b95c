//! `fnas`: command-line driver for the federated architecture search
//! simulator.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fnas_core::config::{EvalMode, ExperimentConfig};
use fnas_core::experiment::{self, with_threads};
use fnas_core::fedcore::Aggregator;

#[derive(Parser)]
#[command(name = "fnas", version, about = "Resource-aware federated one-shot architecture search simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate data, partition it across clients and assign tiers.
    Partition(RunArgs),
    /// Stage 1: federated supernet training.
    TrainSupernet(RunArgs),
    /// Stage 2: per-tier search over a trained supernet in the run directory.
    Search(RunArgs),
    /// Stage 3: fine-tune the searched models of the run directory.
    Finetune(RunArgs),
    /// All three stages.
    E2e(RunArgs),
    /// Aggregate finished runs into mean and std per tier.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Run directory. Falls back to the config's `out_dir`, then to
    /// `$FEDORAS_SIM_OUT/seed-<seed>`, then to `runs/seed-<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_aggregator)]
    aggregator: Option<Aggregator>,
    /// Communication budget as a fraction of the searchable supernet.
    #[arg(long)]
    bcomm_frac: Option<f64>,
    #[arg(long, value_parser = parse_eval)]
    eval: Option<EvalMode>,
    #[arg(long)]
    fe_rounds: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories, typically one per seed.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_aggregator(s: &str) -> Result<Aggregator, String> {
    s.parse().map_err(|e: fnas_core::Error| e.to_string())
}

fn parse_eval(s: &str) -> Result<EvalMode, String> {
    s.parse().map_err(|e: fnas_core::Error| e.to_string())
}

impl RunArgs {
    fn resolve(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(a) = self.aggregator {
            cfg.aggregator = a;
        }
        if let Some(f) = self.bcomm_frac {
            cfg.stage1.bcomm_fraction = f;
        }
        if let Some(e) = self.eval {
            cfg.stage2.eval = e;
        }
        if let Some(r) = self.fe_rounds {
            cfg.stage2.fe_rounds = r;
        }
        if self.threads == 0 {
            anyhow::bail!("--threads must be >= 1");
        }
        let out = self
            .out
            .clone()
            .or_else(|| cfg.out_dir.clone())
            .unwrap_or_else(|| {
                let base = std::env::var_os("FEDORAS_SIM_OUT").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
                base.join(format!("seed-{}", cfg.seed))
            });
        cfg.out_dir = Some(out.clone());
        Ok((cfg.validate()?, out))
    }
}

fn run(cli: Cli) -> Result<()> {
    let (args, stage) = match cli.command {
        Command::Report(r) => {
            let rows = experiment::report(&r.runs)?;
            let table = experiment::report_csv(&rows);
            print!("{table}");
            if let Some(p) = r.out {
                std::fs::write(&p, table).with_context(|| format!("writing {}", p.display()))?;
            }
            return Ok(());
        }
        Command::Partition(a) => (a, "partition"),
        Command::TrainSupernet(a) => (a, "train-supernet"),
        Command::Search(a) => (a, "search"),
        Command::Finetune(a) => (a, "finetune"),
        Command::E2e(a) => (a, "e2e"),
    };
    let (cfg, out) = args.resolve()?;
    log::info!("{stage}: seed {} into {}", cfg.seed, out.display());
    with_threads(args.threads, || -> Result<()> {
        match stage {
            "partition" => {
                let prep = experiment::cmd_partition(&cfg, &out)?;
                println!("{} clients, tier boundaries {:?}", prep.clients.len(), prep.tiers.boundaries);
            }
            "train-supernet" => {
                let run = experiment::cmd_train_supernet(&cfg, &out)?;
                if let Some(p) = run.history.iter().rev().find_map(|r| r.probe.as_ref()) {
                    println!("final probe accuracy per tier: {}", fmt_list(p));
                }
            }
            "search" => {
                for s in experiment::cmd_search(&cfg, &out)? {
                    println!("tier {}: {} ({} FLOPs, val {:?})", s.tier, s.path, s.flops, s.val_metric);
                }
            }
            "finetune" => {
                for m in experiment::cmd_finetune(&cfg, &out)? {
                    println!("tier {} {}: test {:.4}", m.tier, m.provenance, m.test_accuracy);
                }
            }
            _ => {
                let s = experiment::run_e2e(&cfg, &out)?;
                for m in &s.models {
                    println!(
                        "tier {} {}: {} params, {:.4} MFLOPs, test {:.4}",
                        m.tier, m.provenance, m.params, m.mflops, m.test_accuracy
                    );
                }
            }
        }
        Ok(())
    })??;
    println!("artifacts in {}", out.display());
    Ok(())
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
