//! Tier-aware federated fine-tuning of searched architectures, and the
//! rand-init and random-search baselines.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fedcore::{fedavg_aggregate, sample_clients, ClientData, ClientUpdate, LocalConfig, LrSchedule};
use crate::nn::Tensor;
use crate::rng::{derive_seed, rng_from, tag};
use crate::sampling::{sample_path_uniform, TierSpec};
use crate::space::{Path, SearchSpace};
use crate::supernet::{self, init_keys, path_keys, ParamMap, Supernet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    SupernetInit,
    RandInit,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Provenance::SupernetInit => "supernet-init",
            Provenance::RandInit => "rand-init",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TierModel {
    pub tier: usize,
    pub path: Path,
    pub params: ParamMap<Tensor>,
    pub provenance: Provenance,
}

impl TierModel {
    /// Copy the path's weights out of a trained supernet.
    pub fn from_supernet(supernet: &Supernet, tier: usize, path: &Path) -> Result<Self> {
        let model = supernet.extract(path)?;
        Ok(Self {
            tier,
            path: path.clone(),
            params: model.values(),
            provenance: Provenance::SupernetInit,
        })
    }

    /// He fan-in initialization, zero biases and shifts, unit scales.
    pub fn fresh<R: Rng + ?Sized>(space: &SearchSpace, tier: usize, path: &Path, rng: &mut R) -> Result<Self> {
        space.validate_path(path)?;
        let params = init_keys(space, &path_keys(space, path), rng)?
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().map(|p| p.value).collect()))
            .collect();
        Ok(Self {
            tier,
            path: path.clone(),
            params,
            provenance: Provenance::RandInit,
        })
    }

    pub fn accuracy(&self, space: &SearchSpace, data: &Dataset) -> Result<f64> {
        supernet::accuracy(space, &self.params, &self.path, data)
    }

    pub fn param_count(&self) -> u64 {
        self.params.values().flatten().map(|t| t.numel() as u64).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub rounds: usize,
    pub clients_per_round: usize,
    pub local: LocalConfig,
    pub lr_schedule: LrSchedule,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            rounds: 20,
            clients_per_round: 6,
            local: LocalConfig {
                epochs: 1,
                batch_size: 16,
                lr: 0.05,
                ..LocalConfig::default()
            },
            lr_schedule: LrSchedule::Cosine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRound {
    pub round: usize,
    pub participants: Vec<usize>,
    pub lr: f64,
    pub mean_loss: f64,
    pub train_flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Finetuned {
    pub model: TierModel,
    pub history: Vec<FinetuneRound>,
    pub train_flops: u64,
}

/// Indices of clients allowed to train a model of `tier`.
pub fn eligible_clients(clients: &[ClientData], tier: usize) -> Vec<usize> {
    (0..clients.len()).filter(|&i| clients[i].tier >= tier).collect()
}

fn local_train(
    space: &SearchSpace,
    params: &ParamMap<Tensor>,
    path: &Path,
    client: &ClientData,
    local: &LocalConfig,
    lr: f64,
    rng: &mut crate::rng::Rng,
) -> Result<ClientUpdate> {
    use rand::seq::SliceRandom;
    if client.train.is_empty() {
        return Err(Error::Data(format!("client {} has no training data", client.id)));
    }
    let mut trainable: ParamMap<crate::nn::Parameter> = params
        .iter()
        .map(|(k, v)| (*k, v.iter().cloned().map(crate::nn::Parameter::new).collect()))
        .collect();
    let sgd = local.sgd();
    let flops = space.cost_of_path(path)?.flops;
    let mut order: Vec<usize> = (0..client.train.len()).collect();
    let mut losses = Vec::new();
    let mut seen = 0u64;
    for _ in 0..local.epochs {
        order.shuffle(rng);
        for batch in order.chunks(local.batch_size.max(1)) {
            let (x, y) = client.train.batch(batch);
            let loss = supernet::train_step(space, &mut trainable, path, &x, &y, &sgd, lr)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("client {} loss", client.id)));
            }
            losses.push(loss);
            seen += batch.len() as u64;
        }
    }
    Ok(ClientUpdate {
        client_id: client.id,
        histogram: trainable.keys().map(|&k| (k, seen)).collect(),
        params: trainable
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().map(|p| p.value).collect()))
            .collect(),
        total_samples: seen,
        losses,
        train_flops: 3 * flops * seen,
    })
}

/// FedAvg over the clients whose tier is at least the model's tier.
/// `stream` separates the random streams of independent jobs.
pub fn finetune_tier(
    space: &Arc<SearchSpace>,
    model: TierModel,
    clients: &[ClientData],
    cfg: &FinetuneConfig,
    seed: u64,
    stream: &[u64],
) -> Result<Finetuned> {
    space.validate_path(&model.path)?;
    let eligible = eligible_clients(clients, model.tier);
    if eligible.is_empty() {
        return Err(Error::Invalid(format!("no client is eligible for tier {}", model.tier)));
    }
    let k = cfg.clients_per_round.clamp(1, eligible.len());
    let tier = model.tier;
    let path = model.path.clone();
    let provenance = model.provenance;
    // The shared FedAvg implementation works on any parameter store.
    let mut store = Supernet {
        space: space.clone(),
        params: model.params,
    };
    let mut history = Vec::with_capacity(cfg.rounds);
    let mut total_flops = 0;
    let base = derive_seed(seed, stream);
    for t in 0..cfg.rounds {
        let lr = cfg.lr_schedule.rate(cfg.local.lr, t, cfg.rounds);
        let mut rng = rng_from(base, &[tag::ROUND, t as u64]);
        let picked = sample_clients(&eligible, k, &mut rng);
        if let Some(&bad) = picked.iter().find(|&&i| clients[i].tier < tier) {
            return Err(Error::Invalid(format!(
                "client {} of tier {} selected for a tier-{tier} model",
                clients[bad].id, clients[bad].tier
            )));
        }
        let results: Vec<Result<ClientUpdate>> = picked
            .par_iter()
            .map(|&i| {
                let client = &clients[i];
                let mut crng = rng_from(base, &[tag::CLIENT, t as u64, client.id as u64]);
                local_train(space, &store.params, &path, client, &cfg.local, lr, &mut crng)
            })
            .collect();
        let mut updates = Vec::new();
        for (res, &i) in results.into_iter().zip(&picked) {
            match res {
                Ok(u) => updates.push(u),
                Err(e) => log::warn!("fine-tune round {t}: client {} failed: {e}", clients[i].id),
            }
        }
        if updates.is_empty() {
            return Err(Error::Round(format!("fine-tune round {t}: all clients failed")));
        }
        fedavg_aggregate(&mut store, &updates)?;
        let losses: Vec<f64> = updates.iter().flat_map(|u| u.losses.iter().copied()).collect();
        let flops: u64 = updates.iter().map(|u| u.train_flops).sum();
        total_flops += flops;
        history.push(FinetuneRound {
            round: t,
            participants: updates.iter().map(|u| u.client_id).collect(),
            lr,
            mean_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
            train_flops: flops,
        });
    }
    Ok(Finetuned {
        model: TierModel {
            tier,
            path,
            params: store.params,
            provenance,
        },
        history,
        train_flops: total_flops,
    })
}

/// Train `path` from scratch with tier-aware FedAvg.
pub fn rand_init_baseline(
    space: &Arc<SearchSpace>,
    path: &Path,
    tier: usize,
    clients: &[ClientData],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<Finetuned> {
    let mut rng = rng_from(seed, &[tag::RANDINIT, tier as u64]);
    let model = TierModel::fresh(space, tier, path, &mut rng)?;
    finetune_tier(space, model, clients, cfg, seed, &[tag::RANDINIT, tier as u64])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomSearchTrial {
    pub path: Path,
    pub tier: usize,
    pub val_metric: f64,
    pub train_flops: u64,
    pub cumulative_flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomSearch {
    /// Best model per tier, by validation metric; `None` if the tier was
    /// never sampled.
    pub best: Vec<Option<TierModel>>,
    pub trials: Vec<RandomSearchTrial>,
    pub total_flops: u64,
}

/// Train uniformly sampled paths from scratch until the cumulative
/// training cost (FLOPs) reaches `budget`; keep the best per tier.
#[allow(clippy::too_many_arguments)]
pub fn random_search_baseline(
    space: &Arc<SearchSpace>,
    tiers: &TierSpec,
    clients: &[ClientData],
    val: &Dataset,
    cfg: &FinetuneConfig,
    budget: u64,
    seed: u64,
) -> Result<RandomSearch> {
    if budget == 0 {
        return Err(Error::Invalid("random search needs a positive budget".into()));
    }
    let table = space.cost_table();
    let mut rng = rng_from(seed, &[tag::RANDOM_SEARCH]);
    let mut best: Vec<Option<(f64, TierModel)>> = vec![None; tiers.num_tiers()];
    let mut trials = Vec::new();
    let mut spent = 0u64;
    let mut n = 0u64;
    while spent < budget {
        let path = sample_path_uniform(&table, None, &mut rng);
        let flops = table.path_cost(&path).flops;
        let tier = tiers
            .tier_of(flops)
            .ok_or_else(|| Error::Invalid(format!("path {path} ({flops} FLOPs) outside every tier")))?;
        let mut init_rng = rng_from(seed, &[tag::RANDOM_SEARCH, n, 0]);
        let model = TierModel::fresh(space, tier, &path, &mut init_rng)?;
        let trained = finetune_tier(space, model, clients, cfg, seed, &[tag::RANDOM_SEARCH, n, 1])?;
        spent += trained.train_flops;
        let metric = trained.model.accuracy(space, val)?;
        trials.push(RandomSearchTrial {
            path,
            tier,
            val_metric: metric,
            train_flops: trained.train_flops,
            cumulative_flops: spent,
        });
        if best[tier].as_ref().is_none_or(|(m, _)| metric > *m) {
            best[tier] = Some((metric, trained.model));
        }
        n += 1;
    }
    Ok(RandomSearch {
        best: best.into_iter().map(|b| b.map(|(_, m)| m)).collect(),
        trials,
        total_flops: spent,
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    (m, v.sqrt())
}

/// Per-tier summary row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierSummary {
    pub tier: usize,
    pub provenance: Provenance,
    pub path: String,
    pub params: u64,
    pub mflops: f64,
    pub test_accuracy: f64,
}

pub fn summarize(space: &SearchSpace, model: &TierModel, test: &Dataset) -> Result<TierSummary> {
    Ok(TierSummary {
        tier: model.tier,
        provenance: model.provenance,
        path: model.path.to_string(),
        params: model.param_count(),
        mflops: space.cost_of_path(&model.path)?.flops as f64 / 1e6,
        test_accuracy: model.accuracy(space, test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::space::{build_space, SpaceConfig};

    fn setup() -> (Arc<SearchSpace>, Vec<ClientData>) {
        let space = Arc::new(build_space(&SpaceConfig::default()).unwrap());
        let mut r = rng_from(1, &[]);
        let clients = (0..8)
            .map(|id| {
                let inputs: Vec<f64> = (0..8 * 64).map(|_| r.random_range(-1.0..1.0)).collect();
                let labels: Vec<usize> = (0..8).map(|i| (i + id) % 4).collect();
                let train = Dataset::new(vec![1, 8, 8], inputs, labels, 4).unwrap();
                ClientData { id, tier: id % 4, val: train.clone(), train }
            })
            .collect();
        (space, clients)
    }

    #[test]
    fn eligibility_counts() {
        let (_, clients) = setup();
        assert_eq!(eligible_clients(&clients, 0).len(), 8);
        assert_eq!(eligible_clients(&clients, 3).len(), 2);
    }

    #[test]
    fn only_eligible_clients_participate() {
        let (space, clients) = setup();
        let path = Path::new(vec![1, 0, 0, 1]);
        let model = TierModel::fresh(&space, 2, &path, &mut rng_from(2, &[])).unwrap();
        let cfg = FinetuneConfig { rounds: 3, clients_per_round: 8, ..Default::default() };
        let out = finetune_tier(&space, model, &clients, &cfg, 5, &[1]).unwrap();
        for r in &out.history {
            assert!(r.participants.iter().all(|&id| clients[id].tier >= 2));
            assert_eq!(r.participants.len(), 4);
        }
        assert_eq!(out.model.provenance, Provenance::RandInit);
    }

    #[test]
    fn zero_rounds_keeps_weights() {
        let (space, clients) = setup();
        let path = Path::new(vec![2, 1, 0, 3]);
        let model = TierModel::fresh(&space, 0, &path, &mut rng_from(2, &[])).unwrap();
        let cfg = FinetuneConfig { rounds: 0, ..Default::default() };
        let out = finetune_tier(&space, model.clone(), &clients, &cfg, 5, &[1]).unwrap();
        assert_eq!(out.model, model);
        assert_eq!(out.train_flops, 0);
    }

    #[test]
    fn no_eligible_clients_is_an_error() {
        let (space, mut clients) = setup();
        clients.iter_mut().for_each(|c| c.tier = 0);
        let path = Path::new(vec![0, 0, 0, 0]);
        let model = TierModel::fresh(&space, 1, &path, &mut rng_from(2, &[])).unwrap();
        assert!(finetune_tier(&space, model, &clients, &FinetuneConfig::default(), 1, &[]).is_err());
    }

    #[test]
    fn mean_std_basic() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
