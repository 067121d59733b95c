//! Stage drivers and run-directory artifacts.
//!
//! A run directory holds everything needed to reconstruct a run:
//!
//! | file | content |
//! |------|---------|
//! | `config.toml` | normalized config |
//! | `seed` | master seed |
//! | `partition.csv`, `tiers.json` | client shards and tier boundaries |
//! | `stage1_rounds.csv`, `stage1_probe.csv` | supernet training metrics |
//! | `supernet.bin`, `supernet.json` | supernet weights |
//! | `stage2_trace.csv`, `stage2_front.csv`, `selection.json` | search results |
//! | `stage3_rounds.csv` | fine-tuning metrics |
//! | `models/tier<t>-<provenance>.{bin,json}` | per-tier models |
//! | `summary.json` | final per-tier summary |
//! | `FAILED` | present only if a stage failed |
//!
//! Every CSV starts with a `#fnas-metrics v1 <name>` line followed by a
//! header row. Parameter files are little-endian `f64` values of every
//! tensor, in manifest order, with no header; the JSON manifest carries
//! the SHA-256 of the space config, the path and the tensor shapes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path as FsPath, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{EvalMode, ExperimentConfig};
use crate::data::{
    assign_tiers, class_histogram, gen_synthetic, holdout_split, lda_partition, load_tensor_dir,
    stratified_subsample, Dataset,
};
use crate::error::{Error, Result};
use crate::fedcore::{train_supernet, ClientData, SupernetTraining};
use crate::finetune::{
    finetune_tier, mean_std, rand_init_baseline, summarize, Finetuned, Provenance, TierModel, TierSummary,
};
use crate::nn::Tensor;
use crate::rng::{rng_from, tag};
use crate::sampling::{comm_budget_from_fraction, tier_boundaries, TierSpec};
use crate::search::{evaluate_centralized_batch, evaluate_federated, nsga2_search, BatchScores, TierSearch};
use crate::space::{build_space, Path, SearchSpace, SpaceConfig};
use crate::supernet::{ParamKey, ParamMap, Supernet};

/// Everything derived from the config before training starts.
pub struct Prepared {
    pub space: Arc<SearchSpace>,
    pub tiers: TierSpec,
    pub clients: Vec<ClientData>,
    /// Union of the clients' validation shards.
    pub val: Dataset,
    pub test: Dataset,
    /// Nearest-template accuracy on the synthetic set, if synthetic.
    pub template_accuracy: Option<f64>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let space = Arc::new(build_space(&cfg.space)?);
    let (dataset, template_accuracy) = match &cfg.data.import_dir {
        Some(dir) => (load_tensor_dir(dir)?, None),
        None => {
            let syn = gen_synthetic(&cfg.data.synthetic, &mut rng_from(cfg.seed, &[tag::DATA]))?;
            (syn.dataset, Some(syn.template_accuracy))
        }
    };
    if dataset.sample_shape() != space.input_shape().as_slice() || dataset.classes() != space.classes() {
        return Err(Error::Data(format!(
            "dataset of {:?} samples with {} classes does not fit the space ({:?}, {} classes)",
            dataset.sample_shape(),
            dataset.classes(),
            space.input_shape(),
            space.classes()
        )));
    }
    let split = holdout_split(
        &dataset,
        cfg.data.val_fraction,
        cfg.data.test_fraction,
        &mut rng_from(cfg.seed, &[tag::SPLIT]),
    )?;
    let n = cfg.partition.num_clients;
    let classes = dataset.classes();
    let mut prng = rng_from(cfg.seed, &[tag::PARTITION]);
    let mut shards = lda_partition(split.train.labels(), classes, n, cfg.partition.alpha, &mut prng)?;
    let val_shards = lda_partition(split.val.labels(), classes, n, cfg.partition.alpha, &mut prng)
        .map_err(|e| Error::Data(format!("validation split: {e}")))?;

    let table = space.cost_table();
    let fractions = cfg.tiers.fractions.clone();
    let tiers = tier_boundaries(
        &table,
        cfg.tiers.count,
        cfg.tiers.rho_low,
        cfg.tiers.rho_high,
        cfg.tiers.samples,
        fractions.clone(),
        &mut rng_from(cfg.seed, &[tag::TIER_BOUNDS]),
    )?;
    assign_tiers(&mut shards, &tiers.client_fractions, &mut rng_from(cfg.seed, &[tag::TIERS]))?;

    let clients = shards
        .iter()
        .zip(&val_shards)
        .map(|(s, v)| ClientData {
            id: s.client_id,
            tier: s.tier,
            train: split.train.subset(&s.indices),
            val: split.val.subset(&v.indices),
        })
        .collect();
    Ok(Prepared {
        space,
        tiers,
        clients,
        val: split.val,
        test: split.test,
        template_accuracy,
    })
}

pub fn run_stage1(cfg: &ExperimentConfig, prep: &Prepared) -> Result<SupernetTraining> {
    train_supernet(prep.space.clone(), &prep.clients, &prep.val, &prep.tiers, &cfg.stage1, cfg.seed)
}

/// NSGA-II for every tier with the configured evaluation mode.
pub fn run_stage2(cfg: &ExperimentConfig, prep: &Prepared, supernet: &Supernet) -> Result<Vec<TierSearch>> {
    let s2 = &cfg.stage2;
    let table = prep.space.cost_table();
    let val = stratified_subsample(&prep.val, s2.val_subsample, &mut rng_from(cfg.seed, &[tag::SEARCH, u64::MAX]));
    (0..prep.tiers.num_tiers())
        .map(|tier| {
            let eval = |iteration: usize, paths: &[Path]| -> Result<BatchScores> {
                match s2.eval {
                    EvalMode::Central => Ok(BatchScores {
                        metrics: evaluate_centralized_batch(supernet, paths, &val),
                        comm_cost: 0,
                    }),
                    EvalMode::Federated => {
                        let mut r = rng_from(cfg.seed, &[tag::FED_EVAL, tier as u64, iteration as u64]);
                        let tiers = vec![tier; paths.len()];
                        let fe = evaluate_federated(supernet, paths, &tiers, &prep.clients, s2.fe_rounds, s2.fe_clients, &mut r)?;
                        Ok(BatchScores {
                            metrics: fe.metrics,
                            comm_cost: fe.comm_cost,
                        })
                    }
                }
            };
            let mut rng = rng_from(cfg.seed, &[tag::SEARCH, tier as u64]);
            let outcome = nsga2_search(&table, &prep.tiers, tier, &s2.search(), eval, &mut rng)?;
            log::info!(
                "tier {tier}: best {} metric {:?} ({} FLOPs)",
                outcome.best.path,
                outcome.best.metric,
                outcome.best.flops
            );
            Ok(TierSearch { tier, outcome })
        })
        .collect()
}

/// Architecture picked for one tier by the search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub tier: usize,
    pub path: Path,
    pub flops: u64,
    pub val_metric: Option<f64>,
}

pub fn selections(searches: &[TierSearch]) -> Vec<Selection> {
    searches
        .iter()
        .map(|s| Selection {
            tier: s.tier,
            path: s.outcome.best.path.clone(),
            flops: s.outcome.best.flops,
            val_metric: s.outcome.best.metric,
        })
        .collect()
}

/// Fine-tune every selected path from the supernet's weights, and from
/// scratch too when `stage3.rand_init` is set.
pub fn run_stage3(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    supernet: &Supernet,
    selected: &[Selection],
) -> Result<Vec<Finetuned>> {
    let ft = cfg.stage3.finetune();
    let mut out = Vec::new();
    for sel in selected {
        let model = TierModel::from_supernet(supernet, sel.tier, &sel.path)?;
        out.push(finetune_tier(&prep.space, model, &prep.clients, &ft, cfg.seed, &[tag::FINETUNE, sel.tier as u64])?);
    }
    if cfg.stage3.rand_init {
        let ri = cfg.stage3.rand_init();
        for sel in selected {
            out.push(rand_init_baseline(&prep.space, &sel.path, sel.tier, &prep.clients, &ri, cfg.seed)?);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// CSV

struct Csv {
    buf: String,
}

impl Csv {
    fn new(name: &str, columns: &[&str]) -> Self {
        let mut buf = format!("#fnas-metrics v1 {name}\n");
        buf.push_str(&columns.join(","));
        buf.push('\n');
        Self { buf }
    }

    fn row(&mut self, fields: &[String]) {
        self.buf.push_str(&fields.join(","));
        self.buf.push('\n');
    }

    fn save(&self, path: &FsPath) -> Result<()> {
        Ok(fs::write(path, &self.buf)?)
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn ids(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

// ---------------------------------------------------------------------
// Parameter files

const PARAMS_FORMAT: &str = "fnas-params v1";

pub fn space_hash(cfg: &SpaceConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("space config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn key_name(k: ParamKey) -> String {
    match k {
        ParamKey::Fixed(i) => format!("fixed.{i}"),
        ParamKey::Op { layer, candidate } => format!("op.{layer}.{candidate}"),
    }
}

fn parse_key(s: &str) -> Result<ParamKey> {
    let parts: Vec<&str> = s.split('.').collect();
    let num = |x: &str| x.parse::<usize>().map_err(|_| Error::Data(format!("bad parameter key '{s}'")));
    match parts.as_slice() {
        ["fixed", i] => Ok(ParamKey::Fixed(num(i)?)),
        ["op", l, c] => Ok(ParamKey::Op {
            layer: num(l)?,
            candidate: num(c)?,
        }),
        _ => Err(Error::Data(format!("bad parameter key '{s}'"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub key: String,
    pub shapes: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamManifest {
    pub format: String,
    pub space_sha256: String,
    /// Set for single-architecture models; absent for a whole supernet.
    pub path: Option<Path>,
    pub tier: Option<usize>,
    pub provenance: Option<Provenance>,
    pub groups: Vec<ParamGroup>,
}

/// Write `params` to `<stem>.bin` and its manifest to `<stem>.json`.
pub fn save_params(
    stem: &FsPath,
    space: &SpaceConfig,
    params: &ParamMap<Tensor>,
    path: Option<&Path>,
    tier: Option<usize>,
    provenance: Option<Provenance>,
) -> Result<()> {
    let mut bytes = Vec::new();
    let mut groups = Vec::new();
    for (k, ts) in params {
        for t in ts {
            bytes.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
        }
        groups.push(ParamGroup {
            key: key_name(*k),
            shapes: ts.iter().map(|t| t.shape().to_vec()).collect(),
        });
    }
    let manifest = ParamManifest {
        format: PARAMS_FORMAT.into(),
        space_sha256: space_hash(space),
        path: path.cloned(),
        tier,
        provenance,
        groups,
    };
    fs::write(stem.with_extension("bin"), bytes)?;
    fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Read parameters written by [`save_params`]; the manifest must match
/// `space`.
pub fn load_params(stem: &FsPath, space: &SpaceConfig) -> Result<(ParamManifest, ParamMap<Tensor>)> {
    let manifest: ParamManifest = serde_json::from_slice(&fs::read(stem.with_extension("json"))?)?;
    if manifest.format != PARAMS_FORMAT {
        return Err(Error::Data(format!("unsupported parameter format '{}'", manifest.format)));
    }
    if manifest.space_sha256 != space_hash(space) {
        return Err(Error::Data(format!("{} was written for a different space", stem.display())));
    }
    let bytes = fs::read(stem.with_extension("bin"))?;
    let expected: usize = manifest.groups.iter().flat_map(|g| &g.shapes).map(|s| s.iter().product::<usize>()).sum();
    if bytes.len() != expected * 8 {
        return Err(Error::Data(format!(
            "{}: expected {} bytes, found {}",
            stem.display(),
            expected * 8,
            bytes.len()
        )));
    }
    let mut values = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()));
    let mut params = ParamMap::new();
    for g in &manifest.groups {
        let ts = g
            .shapes
            .iter()
            .map(|s| Tensor::new(s.clone(), values.by_ref().take(s.iter().product()).collect()))
            .collect::<Result<_>>()?;
        params.insert(parse_key(&g.key)?, ts);
    }
    Ok((manifest, params))
}

// ---------------------------------------------------------------------
// Run directory

/// Final per-run summary written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub aggregator: String,
    pub bcomm_fraction: f64,
    pub b_comm: u64,
    pub eval: EvalMode,
    pub template_accuracy: Option<f64>,
    pub tiers: TierSpec,
    pub supernet_params: u64,
    pub stage1_train_flops: u64,
    pub stage1_down_params: u64,
    pub stage1_up_params: u64,
    pub final_probe: Option<Vec<f64>>,
    pub search_comm_cost: u64,
    pub selections: Vec<Selection>,
    pub stage3_train_flops: u64,
    pub models: Vec<TierSummary>,
}

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &FsPath) -> Result<Self> {
        fs::create_dir_all(root.join("models"))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Echo the normalized config and seed, and clear a stale failure
    /// marker.
    pub fn write_config(&self, cfg: &ExperimentConfig) -> Result<()> {
        let _ = fs::remove_file(self.file("FAILED"));
        fs::write(self.file("config.toml"), cfg.to_toml())?;
        fs::write(self.file("seed"), format!("{}\n", cfg.seed))?;
        Ok(())
    }

    pub fn mark_failed(&self, err: &Error) {
        if let Err(e) = fs::write(self.file("FAILED"), format!("{err}\n")) {
            log::error!("could not write failure marker: {e}");
        }
    }

    pub fn write_partition(&self, prep: &Prepared) -> Result<()> {
        let classes = prep.space.classes();
        let mut csv = Csv::new("partition", &["client", "tier", "train_samples", "val_samples", "train_class_counts"]);
        for c in &prep.clients {
            let hist = class_histogram(c.train.labels(), classes, None);
            csv.row(&[
                c.id.to_string(),
                c.tier.to_string(),
                c.train.len().to_string(),
                c.val.len().to_string(),
                ids(&hist),
            ]);
        }
        csv.save(&self.file("partition.csv"))?;
        fs::write(self.file("tiers.json"), serde_json::to_string_pretty(&prep.tiers)?)?;
        Ok(())
    }

    pub fn write_stage1(&self, space: &SpaceConfig, run: &SupernetTraining) -> Result<()> {
        let mut rounds = Csv::new(
            "stage1_rounds",
            &["round", "participants", "failed", "down_params", "up_params", "down_bytes", "up_bytes", "max_subspace_params", "mean_loss", "train_flops"],
        );
        let mut probe = Csv::new("stage1_probe", &["round", "tier", "probe_accuracy"]);
        if let Some(p) = &run.initial_probe {
            for (t, a) in p.iter().enumerate() {
                probe.row(&["0".into(), t.to_string(), a.to_string()]);
            }
        }
        for r in &run.history {
            rounds.row(&[
                (r.round + 1).to_string(),
                ids(&r.participants),
                ids(&r.failed),
                r.down_params.to_string(),
                r.up_params.to_string(),
                (r.down_params * 8).to_string(),
                (r.up_params * 8).to_string(),
                r.max_subspace_params.to_string(),
                r.mean_loss.to_string(),
                r.train_flops.to_string(),
            ]);
            if let Some(p) = &r.probe {
                for (t, a) in p.iter().enumerate() {
                    probe.row(&[(r.round + 1).to_string(), t.to_string(), a.to_string()]);
                }
            }
        }
        rounds.save(&self.file("stage1_rounds.csv"))?;
        probe.save(&self.file("stage1_probe.csv"))?;
        save_params(&self.file("supernet"), space, &run.supernet.params, None, None, None)
    }

    pub fn load_supernet(&self, space: Arc<SearchSpace>) -> Result<Supernet> {
        let stem = self.file("supernet");
        if !stem.with_extension("json").exists() {
            return Err(Error::Invalid(format!(
                "{} has no trained supernet; run train-supernet first",
                self.root.display()
            )));
        }
        let (_, params) = load_params(&stem, &space.config)?;
        Ok(Supernet { space, params })
    }

    pub fn write_stage2(&self, space: &SearchSpace, searches: &[TierSearch]) -> Result<()> {
        let table = space.cost_table();
        let mut trace = Csv::new(
            "stage2_trace",
            &["tier", "iteration", "best_metric", "front_size", "union_params", "cumulative_comm", "evaluated"],
        );
        let mut front = Csv::new("stage2_front", &["tier", "path", "flops", "params", "metric"]);
        for s in searches {
            for r in &s.outcome.trace {
                trace.row(&[
                    s.tier.to_string(),
                    r.iteration.to_string(),
                    r.best_metric.to_string(),
                    r.front_size.to_string(),
                    r.union_params.to_string(),
                    r.cumulative_comm.to_string(),
                    r.evaluated.to_string(),
                ]);
            }
            for m in &s.outcome.front.members {
                front.row(&[
                    s.tier.to_string(),
                    m.path.to_string(),
                    m.flops.to_string(),
                    table.path_cost(&m.path).params.to_string(),
                    opt(m.metric),
                ]);
            }
        }
        trace.save(&self.file("stage2_trace.csv"))?;
        front.save(&self.file("stage2_front.csv"))?;
        fs::write(self.file("selection.json"), serde_json::to_string_pretty(&selections(searches))?)?;
        Ok(())
    }

    pub fn load_selection(&self) -> Result<Vec<Selection>> {
        let p = self.file("selection.json");
        if !p.exists() {
            return Err(Error::Invalid(format!("{} has no search results; run search first", self.root.display())));
        }
        Ok(serde_json::from_slice(&fs::read(p)?)?)
    }

    pub fn write_stage3(&self, space: &SearchSpace, runs: &[Finetuned], test: &Dataset) -> Result<Vec<TierSummary>> {
        let mut csv = Csv::new("stage3_rounds", &["tier", "provenance", "round", "participants", "lr", "mean_loss", "train_flops"]);
        let mut summaries = Vec::new();
        for f in runs {
            let m = &f.model;
            for r in &f.history {
                csv.row(&[
                    m.tier.to_string(),
                    m.provenance.to_string(),
                    (r.round + 1).to_string(),
                    ids(&r.participants),
                    r.lr.to_string(),
                    r.mean_loss.to_string(),
                    r.train_flops.to_string(),
                ]);
            }
            let stem = self.file(&format!("models/tier{}-{}", m.tier, m.provenance));
            save_params(&stem, &space.config, &m.params, Some(&m.path), Some(m.tier), Some(m.provenance))?;
            summaries.push(summarize(space, m, test)?);
        }
        csv.save(&self.file("stage3_rounds.csv"))?;
        Ok(summaries)
    }

    pub fn write_summary(&self, summary: &RunSummary) -> Result<()> {
        fs::write(self.file("summary.json"), serde_json::to_string_pretty(summary)?)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------
// Commands

fn with_marker<T>(dir: &RunDir, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().inspect_err(|e| dir.mark_failed(e))
}

fn open_run(cfg: &ExperimentConfig, out: &FsPath) -> Result<(RunDir, Prepared)> {
    let dir = RunDir::create(out)?;
    dir.write_config(cfg)?;
    let prep = with_marker(&dir, || prepare(cfg))?;
    Ok((dir, prep))
}

pub fn cmd_partition(cfg: &ExperimentConfig, out: &FsPath) -> Result<Prepared> {
    let (dir, prep) = open_run(cfg, out)?;
    with_marker(&dir, || dir.write_partition(&prep))?;
    Ok(prep)
}

pub fn cmd_train_supernet(cfg: &ExperimentConfig, out: &FsPath) -> Result<SupernetTraining> {
    let (dir, prep) = open_run(cfg, out)?;
    with_marker(&dir, || {
        dir.write_partition(&prep)?;
        let run = run_stage1(cfg, &prep)?;
        dir.write_stage1(&cfg.space, &run)?;
        Ok(run)
    })
}

pub fn cmd_search(cfg: &ExperimentConfig, out: &FsPath) -> Result<Vec<Selection>> {
    let (dir, prep) = open_run(cfg, out)?;
    with_marker(&dir, || {
        let supernet = dir.load_supernet(prep.space.clone())?;
        let searches = run_stage2(cfg, &prep, &supernet)?;
        dir.write_stage2(&prep.space, &searches)?;
        Ok(selections(&searches))
    })
}

pub fn cmd_finetune(cfg: &ExperimentConfig, out: &FsPath) -> Result<Vec<TierSummary>> {
    let (dir, prep) = open_run(cfg, out)?;
    with_marker(&dir, || {
        let supernet = dir.load_supernet(prep.space.clone())?;
        let selected = dir.load_selection()?;
        let runs = run_stage3(cfg, &prep, &supernet, &selected)?;
        dir.write_stage3(&prep.space, &runs, &prep.test)
    })
}

/// All three stages, writing every artifact into `out`.
pub fn run_e2e(cfg: &ExperimentConfig, out: &FsPath) -> Result<RunSummary> {
    let (dir, prep) = open_run(cfg, out)?;
    with_marker(&dir, || {
        dir.write_partition(&prep)?;
        log::info!("stage 1: {} rounds", cfg.stage1.rounds);
        let s1 = run_stage1(cfg, &prep)?;
        dir.write_stage1(&cfg.space, &s1)?;
        log::info!("stage 2: {:?} search", cfg.stage2.eval);
        let searches = run_stage2(cfg, &prep, &s1.supernet)?;
        dir.write_stage2(&prep.space, &searches)?;
        let selected = selections(&searches);
        log::info!("stage 3: fine-tuning {} models", selected.len());
        let runs = run_stage3(cfg, &prep, &s1.supernet, &selected)?;
        let models = dir.write_stage3(&prep.space, &runs, &prep.test)?;

        let table = prep.space.cost_table();
        let summary = RunSummary {
            seed: cfg.seed,
            aggregator: format!("{:?}", cfg.aggregator).to_lowercase(),
            bcomm_fraction: cfg.stage1.bcomm_fraction,
            b_comm: comm_budget_from_fraction(&table, cfg.stage1.bcomm_fraction),
            eval: cfg.stage2.eval,
            template_accuracy: prep.template_accuracy,
            tiers: prep.tiers.clone(),
            supernet_params: s1.supernet.total_param_count(),
            stage1_train_flops: s1.history.iter().map(|r| r.train_flops).sum(),
            stage1_down_params: s1.history.iter().map(|r| r.down_params).sum(),
            stage1_up_params: s1.history.iter().map(|r| r.up_params).sum(),
            final_probe: s1.history.iter().rev().find_map(|r| r.probe.clone()),
            search_comm_cost: searches
                .iter()
                .filter_map(|s| s.outcome.trace.last())
                .map(|r| r.cumulative_comm)
                .sum(),
            selections: selected,
            stage3_train_flops: runs.iter().map(|r| r.train_flops).sum(),
            models,
        };
        dir.write_summary(&summary)?;
        Ok(summary)
    })
}

/// Run `f` on a dedicated pool of `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

// ---------------------------------------------------------------------
// Report

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub tier: usize,
    pub provenance: Provenance,
    pub runs: usize,
    pub test_accuracy_mean: f64,
    pub test_accuracy_std: f64,
    pub params_mean: f64,
    pub mflops_mean: f64,
}

/// Mean and standard deviation per (tier, provenance) over run
/// directories.
pub fn report(dirs: &[PathBuf]) -> Result<Vec<ReportRow>> {
    if dirs.is_empty() {
        return Err(Error::Invalid("report needs at least one run directory".into()));
    }
    let mut groups: BTreeMap<(usize, String), (Provenance, Vec<&TierSummary>)> = BTreeMap::new();
    let summaries: Vec<RunSummary> = dirs
        .iter()
        .map(|d| {
            let p = d.join("summary.json");
            let bytes = fs::read(&p).map_err(|e| Error::Invalid(format!("{}: {e}", p.display())))?;
            Ok(serde_json::from_slice(&bytes)?)
        })
        .collect::<Result<_>>()?;
    for s in &summaries {
        for m in &s.models {
            groups
                .entry((m.tier, m.provenance.to_string()))
                .or_insert_with(|| (m.provenance, Vec::new()))
                .1
                .push(m);
        }
    }
    Ok(groups
        .into_iter()
        .map(|((tier, _), (provenance, rows))| {
            let acc: Vec<f64> = rows.iter().map(|r| r.test_accuracy).collect();
            let (m, s) = mean_std(&acc);
            let n = rows.len() as f64;
            ReportRow {
                tier,
                provenance,
                runs: rows.len(),
                test_accuracy_mean: m,
                test_accuracy_std: s,
                params_mean: rows.iter().map(|r| r.params as f64).sum::<f64>() / n,
                mflops_mean: rows.iter().map(|r| r.mflops).sum::<f64>() / n,
            }
        })
        .collect())
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("#fnas-metrics v1 report\n");
    out.push_str("tier,provenance,runs,test_accuracy_mean,test_accuracy_std,params_mean,mflops_mean\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{:.4},{:.1},{:.4}",
            r.tier, r.provenance, r.runs, r.test_accuracy_mean, r.test_accuracy_std, r.params_mean, r.mflops_mean
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use crate::supernet::Supernet;

    #[test]
    fn params_roundtrip_and_hash_check() {
        let cfg = SpaceConfig::default();
        let space = Arc::new(build_space(&cfg).unwrap());
        let net = Supernet::init(space, &mut rng_from(2, &[])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("net");
        save_params(&stem, &cfg, &net.params, None, None, None).unwrap();
        let (_, back) = load_params(&stem, &cfg).unwrap();
        assert_eq!(back, net.params);

        let other = SpaceConfig {
            stem_channels: cfg.stem_channels + 1,
            ..cfg.clone()
        };
        assert!(load_params(&stem, &other).is_err());
    }

    #[test]
    fn key_names_parse_back() {
        for k in [ParamKey::Fixed(3), ParamKey::Op { layer: 2, candidate: 5 }] {
            assert_eq!(parse_key(&key_name(k)).unwrap(), k);
        }
        assert!(parse_key("op.1").is_err());
    }
}
