//! Federated supernet training: client sampling, subspace dispatch,
//! budgeted local training and per-operator aggregation.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Parameter, SgdConfig, Tensor};
use crate::rng::{rng_from, tag};
use crate::sampling::{comm_budget_from_fraction, sample_path_greedy, sample_subspace, Subspace, TierSpec};
use crate::space::{CostTable, SearchSpace};
use crate::supernet::{self, path_keys, subspace_keys, ParamKey, ParamMap, Supernet};

/// A simulated device: its local data and its compute tier.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub id: usize,
    pub tier: usize,
    pub train: Dataset,
    pub val: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Opa,
    FedAvg,
}

impl std::str::FromStr for Aggregator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "opa" => Ok(Aggregator::Opa),
            "fedavg" => Ok(Aggregator::FedAvg),
            _ => Err(Error::Config(format!("unknown aggregator '{s}', expected opa or fedavg"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from the base rate down to a tenth of it.
    Cosine,
    /// Divide by ten at half and at three quarters of the span.
    Step,
}

impl LrSchedule {
    pub fn rate(self, base: f64, round: usize, total: usize) -> f64 {
        let frac = if total <= 1 { 0.0 } else { round as f64 / (total - 1) as f64 };
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let floor = base / 10.0;
                floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
            LrSchedule::Step => {
                if frac >= 0.75 {
                    base / 100.0
                } else if frac >= 0.5 {
                    base / 10.0
                } else {
                    base
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 16,
            lr: 0.1,
            // 0.9 makes the shared weights collapse on strongly skewed
            // shards of ~100 samples.
            momentum: 0.5,
            clip_norm: Some(5.0),
        }
    }
}

impl LocalConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            clip_norm: self.clip_norm,
        }
    }
}

/// What a client sends back after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// Values of every received parameter group, trained or not.
    pub params: ParamMap<Tensor>,
    /// Samples that passed through each received group.
    pub histogram: BTreeMap<ParamKey, u64>,
    pub total_samples: u64,
    pub losses: Vec<f64>,
    /// Training FLOPs spent: path FLOPs x samples x 3 (forward + backward).
    pub train_flops: u64,
}

impl ClientUpdate {
    pub fn param_count(&self) -> u64 {
        self.params.values().flatten().map(|t| t.numel() as u64).sum()
    }
}

/// Train the received parameters on a client's shard. Every batch uses a
/// freshly sampled path that respects `tier_budget`, and takes exactly one
/// optimizer step.
#[allow(clippy::too_many_arguments)]
pub fn client_local_train<R: Rng + ?Sized>(
    space: &SearchSpace,
    table: &CostTable,
    subspace: &Subspace,
    mut params: ParamMap<Parameter>,
    client: &ClientData,
    tier_budget: u64,
    local: &LocalConfig,
    lr: f64,
    rng: &mut R,
) -> Result<ClientUpdate> {
    if client.train.is_empty() {
        return Err(Error::Data(format!("client {} has no training data", client.id)));
    }
    let mut histogram: BTreeMap<ParamKey, u64> = params.keys().map(|&k| (k, 0)).collect();
    let sgd = local.sgd();
    let mut order: Vec<usize> = (0..client.train.len()).collect();
    let mut losses = Vec::new();
    let mut seen = 0u64;
    let mut train_flops = 0u64;
    for _ in 0..local.epochs {
        order.shuffle(rng);
        for batch in order.chunks(local.batch_size.max(1)) {
            let path = sample_path_greedy(table, Some(subspace), tier_budget, rng)?;
            let (x, y) = client.train.batch(batch);
            let loss = supernet::train_step(space, &mut params, &path, &x, &y, &sgd, lr)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("client {} loss", client.id)));
            }
            losses.push(loss);
            for key in path_keys(space, &path) {
                *histogram
                    .get_mut(&key)
                    .ok_or_else(|| Error::Invalid(format!("path uses {key:?} outside the subspace")))? +=
                    batch.len() as u64;
            }
            seen += batch.len() as u64;
            train_flops += 3 * table.path_cost(&path).flops * batch.len() as u64;
        }
    }
    Ok(ClientUpdate {
        client_id: client.id,
        params: params
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().map(|p| p.value).collect()))
            .collect(),
        histogram,
        total_samples: seen,
        losses,
        train_flops,
    })
}

/// `sum_i w_i * x_i / sum_i w_i`, accumulated in the given order.
fn weighted_mean(entries: &[(u64, &[Tensor])]) -> Vec<Tensor> {
    let total: u64 = entries.iter().map(|(w, _)| w).sum();
    let mut acc: Vec<Tensor> = entries[0].1.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for (w, ts) in entries {
        for (a, t) in acc.iter_mut().zip(ts.iter()) {
            for (x, y) in a.data_mut().iter_mut().zip(t.data()) {
                *x += *w as f64 * y;
            }
        }
    }
    for a in acc.iter_mut() {
        a.data_mut().iter_mut().for_each(|x| *x /= total as f64);
    }
    acc
}

fn check_update(supernet: &Supernet, u: &ClientUpdate) -> Result<()> {
    for key in u.histogram.keys() {
        if !u.params.contains_key(key) {
            return Err(Error::Aggregation {
                client: u.client_id,
                detail: format!("histogram entry {key:?} without parameters"),
            });
        }
    }
    for (key, ts) in &u.params {
        let global = supernet.params.get(key).ok_or_else(|| Error::Aggregation {
            client: u.client_id,
            detail: format!("unknown parameter group {key:?}"),
        })?;
        if global.len() != ts.len() || global.iter().zip(ts).any(|(g, t)| g.shape() != t.shape()) {
            return Err(Error::Aggregation {
                client: u.client_id,
                detail: format!("shape mismatch in {key:?}"),
            });
        }
    }
    Ok(())
}

fn sorted(updates: &[ClientUpdate]) -> Vec<&ClientUpdate> {
    let mut v: Vec<&ClientUpdate> = updates.iter().collect();
    v.sort_by_key(|u| u.client_id);
    v
}

/// Per-operator aggregation: each group is averaged over the clients that
/// actually trained it, weighted by how many samples passed through it.
/// Groups trained by at most one client keep their global value.
pub fn opa_aggregate(supernet: &mut Supernet, updates: &[ClientUpdate]) -> Result<()> {
    if updates.is_empty() {
        return Err(Error::Round("no updates to aggregate".into()));
    }
    let updates = sorted(updates);
    for u in &updates {
        check_update(supernet, u)?;
    }
    let keys: Vec<ParamKey> = supernet.params.keys().copied().collect();
    for key in keys {
        let contributors: Vec<(u64, &[Tensor])> = updates
            .iter()
            .filter_map(|u| {
                let n = u.histogram.get(&key).copied().unwrap_or(0);
                (n > 0).then(|| (n, u.params[&key].as_slice()))
            })
            .collect();
        if contributors.len() > 1 && !contributors[0].1.is_empty() {
            supernet.params.insert(key, weighted_mean(&contributors));
        }
    }
    Ok(())
}

/// Whole-update aggregation weighted by each client's sample count,
/// regardless of which groups the client trained.
pub fn fedavg_aggregate(supernet: &mut Supernet, updates: &[ClientUpdate]) -> Result<()> {
    if updates.is_empty() {
        return Err(Error::Round("no updates to aggregate".into()));
    }
    let updates = sorted(updates);
    for u in &updates {
        check_update(supernet, u)?;
    }
    let keys: Vec<ParamKey> = supernet.params.keys().copied().collect();
    for key in keys {
        let contributors: Vec<(u64, &[Tensor])> = updates
            .iter()
            .filter_map(|u| u.params.get(&key).map(|p| (u.total_samples, p.as_slice())))
            .collect();
        if contributors.is_empty() || contributors[0].1.is_empty() {
            continue;
        }
        if contributors.iter().all(|(w, _)| *w == 0) {
            continue;
        }
        supernet.params.insert(key, weighted_mean(&contributors));
    }
    Ok(())
}

pub fn aggregate(kind: Aggregator, supernet: &mut Supernet, updates: &[ClientUpdate]) -> Result<()> {
    match kind {
        Aggregator::Opa => opa_aggregate(supernet, updates),
        Aggregator::FedAvg => fedavg_aggregate(supernet, updates),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub participants: Vec<usize>,
    pub failed: Vec<usize>,
    /// Parameters sent to clients (sum over participants).
    pub down_params: u64,
    /// Parameters returned by clients.
    pub up_params: u64,
    /// Largest per-client searchable payload this round.
    pub max_subspace_params: u64,
    pub client_losses: Vec<(usize, Vec<f64>)>,
    pub mean_loss: f64,
    pub train_flops: u64,
    /// Per-tier mean accuracy of sampled paths, when probed.
    pub probe: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundConfig {
    pub k: usize,
    pub b_comm: u64,
    pub per_client_subspace: bool,
    pub local: LocalConfig,
    pub lr: f64,
    pub aggregator: Aggregator,
}

/// Uniformly sample `k` of the `clients` without replacement; returned
/// in ascending order.
pub fn sample_clients<R: Rng + ?Sized>(clients: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    let mut picked: Vec<usize> = clients.choose_multiple(rng, k.min(clients.len())).copied().collect();
    picked.sort_unstable();
    picked
}

/// One communication round. Client training runs on the current rayon
/// pool; results are reduced in client-id order so the outcome does not
/// depend on the thread count.
pub fn run_round(
    supernet: &mut Supernet,
    clients: &[ClientData],
    tiers: &TierSpec,
    cfg: &RoundConfig,
    round: usize,
    seed: u64,
) -> Result<RoundReport> {
    if cfg.k == 0 || cfg.k > clients.len() {
        return Err(Error::Round(format!("k = {} with {} clients", cfg.k, clients.len())));
    }
    if let Some(c) = clients.iter().find(|c| c.tier >= tiers.num_tiers()) {
        return Err(Error::Round(format!("client {} has tier {} without a budget", c.id, c.tier)));
    }
    let space = supernet.space.clone();
    let table = space.cost_table();
    let mut rng = rng_from(seed, &[tag::ROUND, round as u64]);
    let ids: Vec<usize> = (0..clients.len()).collect();
    let picked = sample_clients(&ids, cfg.k, &mut rng);
    let shared = sample_subspace(&table, cfg.b_comm, &mut rng)?;
    let fixed_params = space.fixed_cost().params;

    let jobs: Vec<(usize, Subspace)> = picked
        .iter()
        .map(|&i| {
            let sub = if cfg.per_client_subspace {
                let mut r = rng_from(seed, &[tag::ROUND, round as u64, clients[i].id as u64]);
                sample_subspace(&table, cfg.b_comm, &mut r)
            } else {
                Ok(shared.clone())
            };
            sub.map(|s| (i, s))
        })
        .collect::<Result<_>>()?;

    let snapshot: &Supernet = supernet;
    let results: Vec<(usize, u64, Result<ClientUpdate>)> = jobs
        .par_iter()
        .map(|(i, sub)| {
            let client = &clients[*i];
            let mut crng = rng_from(seed, &[tag::CLIENT, round as u64, client.id as u64]);
            let res = snapshot
                .checkout(&subspace_keys(&space, sub))
                .and_then(|params| {
                    client_local_train(
                        &space,
                        &table,
                        sub,
                        params,
                        client,
                        tiers.budget(client.tier),
                        &cfg.local,
                        cfg.lr,
                        &mut crng,
                    )
                });
            (client.id, sub.param_size, res)
        })
        .collect();

    let mut updates = Vec::new();
    let mut failed = Vec::new();
    let mut down = 0;
    let mut max_sub = 0;
    for (id, sub_params, res) in results {
        down += sub_params + fixed_params;
        max_sub = max_sub.max(sub_params);
        match res {
            Ok(u) => updates.push(u),
            Err(e) => {
                log::warn!("round {round}: client {id} failed: {e}");
                failed.push(id);
            }
        }
    }
    if updates.is_empty() {
        return Err(Error::Round(format!("round {round}: all {} clients failed", failed.len())));
    }
    aggregate(cfg.aggregator, supernet, &updates)?;

    let up = updates.iter().map(ClientUpdate::param_count).sum();
    let train_flops = updates.iter().map(|u| u.train_flops).sum();
    let all_losses: Vec<f64> = updates.iter().flat_map(|u| u.losses.iter().copied()).collect();
    let mean_loss = all_losses.iter().sum::<f64>() / all_losses.len().max(1) as f64;
    Ok(RoundReport {
        round,
        participants: updates.iter().map(|u| u.client_id).collect(),
        failed,
        down_params: down,
        up_params: up,
        max_subspace_params: max_sub,
        client_losses: updates.into_iter().map(|u| (u.client_id, u.losses)).collect(),
        mean_loss,
        train_flops,
        probe: None,
    })
}

/// Mean validation accuracy of `num_paths` budget-respecting random paths
/// per tier, evaluated with the supernet's shared weights.
pub fn probe_validation<R: Rng + ?Sized>(
    supernet: &Supernet,
    val: &Dataset,
    tiers: &TierSpec,
    num_paths: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if num_paths == 0 {
        return Ok(Vec::new());
    }
    if val.is_empty() {
        return Err(Error::Data("probe on an empty validation set".into()));
    }
    let table = supernet.space.cost_table();
    (0..tiers.num_tiers())
        .map(|t| {
            let mut sum = 0.0;
            for _ in 0..num_paths {
                let path = sample_path_greedy(&table, None, tiers.budget(t), rng)?;
                sum += supernet.accuracy(&path, val)?;
            }
            Ok(sum / num_paths as f64)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub rounds: usize,
    pub clients_per_round: usize,
    /// Communication budget as a fraction of the searchable supernet size.
    pub bcomm_fraction: f64,
    pub local: LocalConfig,
    pub lr_schedule: LrSchedule,
    pub aggregator: Aggregator,
    pub per_client_subspace: bool,
    /// Probe every this many rounds; 0 disables probing.
    pub probe_interval: usize,
    pub probe_paths: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            rounds: 60,
            clients_per_round: 8,
            bcomm_fraction: 0.5,
            local: LocalConfig::default(),
            lr_schedule: LrSchedule::Constant,
            aggregator: Aggregator::Opa,
            per_client_subspace: false,
            probe_interval: 10,
            probe_paths: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SupernetTraining {
    pub supernet: Supernet,
    pub history: Vec<RoundReport>,
    /// Probe before the first round, if probing is enabled.
    pub initial_probe: Option<Vec<f64>>,
}

/// Run the full supernet-training stage.
pub fn train_supernet(
    space: Arc<SearchSpace>,
    clients: &[ClientData],
    val: &Dataset,
    tiers: &TierSpec,
    cfg: &Stage1Config,
    seed: u64,
) -> Result<SupernetTraining> {
    let supernet = Supernet::init(space, &mut rng_from(seed, &[tag::INIT]))?;
    train_supernet_from(supernet, clients, val, tiers, cfg, seed)
}

pub fn train_supernet_from(
    mut supernet: Supernet,
    clients: &[ClientData],
    val: &Dataset,
    tiers: &TierSpec,
    cfg: &Stage1Config,
    seed: u64,
) -> Result<SupernetTraining> {
    let table = supernet.space.cost_table();
    let b_comm = comm_budget_from_fraction(&table, cfg.bcomm_fraction);
    let probe = |net: &Supernet, round: u64| -> Result<Vec<f64>> {
        let mut r = rng_from(seed, &[tag::PROBE, round]);
        probe_validation(net, val, tiers, cfg.probe_paths, &mut r)
    };
    let initial_probe = if cfg.probe_interval > 0 && cfg.probe_paths > 0 && cfg.rounds > 0 {
        Some(probe(&supernet, 0)?)
    } else {
        None
    };
    let mut history = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        let round_cfg = RoundConfig {
            k: cfg.clients_per_round,
            b_comm,
            per_client_subspace: cfg.per_client_subspace,
            local: cfg.local,
            lr: cfg.lr_schedule.rate(cfg.local.lr, t, cfg.rounds),
            aggregator: cfg.aggregator,
        };
        let mut report = run_round(&mut supernet, clients, tiers, &round_cfg, t, seed)?;
        let due = cfg.probe_interval > 0 && ((t + 1) % cfg.probe_interval == 0 || t + 1 == cfg.rounds);
        if due && cfg.probe_paths > 0 {
            report.probe = Some(probe(&supernet, t as u64 + 1)?);
        }
        log::debug!("round {t}: loss {:.4} probe {:?}", report.mean_loss, report.probe);
        history.push(report);
    }
    Ok(SupernetTraining {
        supernet,
        history,
        initial_probe,
    })
}
