//! Budgeted sampling: communication-limited subspaces, compute-limited
//! paths, and FLOPs tiers.
//!
//! All samplers work on a [`CostTable`] so they can be exercised on
//! synthetic spaces as well as real ones. Budgets are strict upper bounds:
//! a subspace must satisfy `params < b_comm` and a path `flops < budget`.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{CostTable, Path};

pub const DEFAULT_REJECTION_CAP: usize = 10_000;
pub const DEFAULT_TIER_SAMPLES: usize = 100_000;

/// Per-layer selection mask of candidates sent to clients in one round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subspace {
    pub selected: Vec<Vec<bool>>,
    pub param_size: u64,
}

impl Subspace {
    pub fn full(table: &CostTable) -> Self {
        Self {
            selected: table.layers.iter().map(|l| vec![true; l.len()]).collect(),
            param_size: table.searchable_params(),
        }
    }

    pub fn from_mask(table: &CostTable, selected: Vec<Vec<bool>>) -> Self {
        let param_size = selected
            .iter()
            .zip(&table.layers)
            .flat_map(|(m, l)| m.iter().zip(l).filter(|(s, _)| **s).map(|(_, c)| c.params))
            .sum();
        Self { selected, param_size }
    }

    pub fn contains(&self, layer: usize, candidate: usize) -> bool {
        self.selected[layer][candidate]
    }

    pub fn candidates(&self, layer: usize) -> impl Iterator<Item = usize> + '_ {
        self.selected[layer]
            .iter()
            .enumerate()
            .filter(|(_, s)| **s)
            .map(|(i, _)| i)
    }

    pub fn contains_path(&self, path: &Path) -> bool {
        path.choices.iter().enumerate().all(|(l, &c)| self.selected[l][c])
    }

    pub fn num_selected(&self) -> usize {
        self.selected.iter().flatten().filter(|s| **s).count()
    }
}

/// Smallest `b_comm` for which [`sample_subspace`] succeeds.
pub fn min_feasible_comm_budget(table: &CostTable) -> u64 {
    table
        .layers
        .iter()
        .filter(|l| !l.iter().any(|c| c.params == 0))
        .map(|l| l.iter().map(|c| c.params).min().unwrap_or(0))
        .sum::<u64>()
        + 1
}

/// Convert a fraction of the searchable supernet size into a strict
/// budget, such that a subspace of at most `fraction * size` parameters
/// is admissible.
pub fn comm_budget_from_fraction(table: &CostTable, fraction: f64) -> u64 {
    (fraction * table.searchable_params() as f64).floor() as u64 + 1
}

/// Sample a subspace whose searchable parameter total stays below
/// `b_comm`.
///
/// Non-parametric candidates are always included. Layers without one
/// first receive a single parametric candidate, chosen uniformly among
/// those that leave room for the remaining such layers. Every other
/// parametric candidate is then visited in uniformly random order and
/// kept if it still fits.
pub fn sample_subspace<R: Rng + ?Sized>(table: &CostTable, b_comm: u64, rng: &mut R) -> Result<Subspace> {
    let min_budget = min_feasible_comm_budget(table);
    if b_comm < min_budget {
        return Err(Error::Budget(format!(
            "communication budget {b_comm} is infeasible; minimum feasible budget is {min_budget}"
        )));
    }
    let mut selected: Vec<Vec<bool>> = table
        .layers
        .iter()
        .map(|l| l.iter().map(|c| c.params == 0).collect())
        .collect();
    let mut total = 0u64;

    let mut forced: Vec<usize> = (0..table.num_layers())
        .filter(|&l| !selected[l].iter().any(|&s| s))
        .collect();
    forced.shuffle(rng);
    let min_params = |l: usize| table.layers[l].iter().map(|c| c.params).min().unwrap_or(0);
    let mut reserve: u64 = forced.iter().map(|&l| min_params(l)).sum();
    for &l in &forced {
        reserve -= min_params(l);
        let eligible: Vec<usize> = (0..table.layers[l].len())
            .filter(|&c| total + table.layers[l][c].params + reserve < b_comm)
            .collect();
        let &pick = eligible
            .choose(rng)
            .expect("min feasible budget guarantees the cheapest option fits");
        selected[l][pick] = true;
        total += table.layers[l][pick].params;
    }

    let mut pool: Vec<(usize, usize)> = table
        .layers
        .iter()
        .enumerate()
        .flat_map(|(l, cands)| (0..cands.len()).map(move |c| (l, c)))
        .filter(|&(l, c)| !selected[l][c])
        .collect();
    pool.shuffle(rng);
    for (l, c) in pool {
        let p = table.layers[l][c].params;
        if total + p < b_comm {
            selected[l][c] = true;
            total += p;
        }
    }
    Ok(Subspace {
        selected,
        param_size: total,
    })
}

fn options(table: &CostTable, subspace: Option<&Subspace>) -> Vec<Vec<(usize, u64)>> {
    table
        .layers
        .iter()
        .enumerate()
        .map(|(l, cands)| {
            cands
                .iter()
                .enumerate()
                .filter(|(c, _)| subspace.is_none_or(|s| s.contains(l, *c)))
                .map(|(c, cost)| (c, cost.flops))
                .collect()
        })
        .collect()
}

/// A path drawn uniformly over every candidate of every layer, ignoring
/// budgets.
pub fn sample_path_uniform<R: Rng + ?Sized>(table: &CostTable, subspace: Option<&Subspace>, rng: &mut R) -> Path {
    let opts = options(table, subspace);
    Path::new(
        opts.iter()
            .map(|o| o.choose(rng).expect("layers are non-empty").0)
            .collect(),
    )
}

/// Uniform over feasible paths by per-layer uniform draws plus rejection.
/// Used as the distributional reference for the greedy sampler.
pub fn sample_path_rejection<R: Rng + ?Sized>(
    table: &CostTable,
    subspace: Option<&Subspace>,
    budget: u64,
    cap: usize,
    rng: &mut R,
) -> Result<Path> {
    let opts = options(table, subspace);
    for _ in 0..cap {
        let mut flops = table.fixed.flops;
        let choices: Vec<usize> = opts
            .iter()
            .map(|o| {
                let &(c, f) = o.choose(rng).expect("layers are non-empty");
                flops += f;
                c
            })
            .collect();
        if flops < budget {
            return Ok(Path::new(choices));
        }
    }
    Err(Error::Sampling(format!(
        "no path under budget {budget} after {cap} rejections: budget infeasible or pathological"
    )))
}

/// Sequential budget-aware path sampling.
///
/// Layers are visited in a random order with layers lacking a zero-cost
/// option first. At each layer a candidate is drawn uniformly among those
/// for which the running cost plus the cheapest completion of the
/// remaining layers stays under `budget`, so every returned path is
/// feasible and every feasible path is reachable.
pub fn sample_path_greedy<R: Rng + ?Sized>(
    table: &CostTable,
    subspace: Option<&Subspace>,
    budget: u64,
    rng: &mut R,
) -> Result<Path> {
    let opts = options(table, subspace);
    let mins: Vec<u64> = opts
        .iter()
        .map(|o| o.iter().map(|&(_, f)| f).min().unwrap_or(0))
        .collect();
    if opts.iter().any(|o| o.is_empty()) {
        return Err(Error::Sampling("subspace has an empty layer".into()));
    }
    let mut rest: u64 = mins.iter().sum();
    if table.fixed.flops + rest >= budget {
        return Err(Error::Budget(format!(
            "cheapest path costs {} FLOPs, budget is {budget}",
            table.fixed.flops + rest
        )));
    }

    let (mut order, mut free): (Vec<usize>, Vec<usize>) = (0..opts.len()).partition(|&l| mins[l] > 0);
    order.shuffle(rng);
    free.shuffle(rng);
    order.extend(free);

    let mut choices = vec![0; opts.len()];
    let mut running = table.fixed.flops;
    let mut eligible = Vec::new();
    for l in order {
        rest -= mins[l];
        eligible.clear();
        eligible.extend(opts[l].iter().filter(|&&(_, f)| running + f + rest < budget));
        let &(c, f) = eligible.choose(rng).expect("cheapest option always fits");
        choices[l] = c;
        running += f;
    }
    Ok(Path::new(choices))
}

/// Every path of the (sub)space, in lexicographic order.
pub fn enumerate_paths(table: &CostTable, subspace: Option<&Subspace>) -> Vec<Path> {
    let opts = options(table, subspace);
    let mut out = vec![Vec::new()];
    for o in &opts {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                o.iter().map(move |&(c, _)| {
                    let mut p = prefix.clone();
                    p.push(c);
                    p
                })
            })
            .collect();
    }
    out.into_iter().map(Path::new).collect()
}

/// FLOPs tiers: tier `t` covers `(boundaries[t - 1], boundaries[t]]`, the
/// first tier starts at `min_flops` inclusive and the last ends at
/// `max_flops`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierSpec {
    pub min_flops: u64,
    pub boundaries: Vec<u64>,
    pub max_flops: u64,
    pub client_fractions: Vec<f64>,
}

impl TierSpec {
    pub fn new(min_flops: u64, boundaries: Vec<u64>, max_flops: u64, client_fractions: Vec<f64>) -> Result<Self> {
        let spec = Self {
            min_flops,
            boundaries,
            max_flops,
            client_fractions,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let mut edges = vec![self.min_flops];
        edges.extend(&self.boundaries);
        if edges.windows(2).any(|w| w[1] < w[0])
            || self.boundaries.windows(2).any(|w| w[1] <= w[0])
            || self.boundaries.last().is_some_and(|&b| b >= self.max_flops)
        {
            return Err(Error::Invalid(format!(
                "tier boundaries must be strictly increasing within [{}, {}], got {:?}",
                self.min_flops, self.max_flops, self.boundaries
            )));
        }
        if self.client_fractions.len() != self.num_tiers() {
            return Err(Error::Invalid(format!(
                "{} client fractions for {} tiers",
                self.client_fractions.len(),
                self.num_tiers()
            )));
        }
        let sum: f64 = self.client_fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.client_fractions.iter().any(|&f| f < 0.0) {
            return Err(Error::Invalid(format!("client fractions must sum to 1, got {sum}")));
        }
        Ok(())
    }

    pub fn num_tiers(&self) -> usize {
        self.boundaries.len() + 1
    }

    /// `(exclusive lower bound, inclusive upper bound)`; the first tier has
    /// no exclusive lower bound.
    pub fn interval(&self, tier: usize) -> (Option<u64>, u64) {
        let lo = tier.checked_sub(1).map(|t| self.boundaries[t]);
        let hi = self.boundaries.get(tier).copied().unwrap_or(self.max_flops);
        (lo, hi)
    }

    pub fn contains(&self, tier: usize, flops: u64) -> bool {
        let (lo, hi) = self.interval(tier);
        flops <= hi && lo.is_none_or(|lo| flops > lo) && flops >= self.min_flops
    }

    pub fn tier_of(&self, flops: u64) -> Option<usize> {
        (0..self.num_tiers()).find(|&t| self.contains(t, flops))
    }

    /// Strict training budget of tier `t`: any path in the tier or below
    /// costs less than this.
    pub fn budget(&self, tier: usize) -> u64 {
        self.interval(tier).1 + 1
    }
}

/// Lower empirical quantile: the largest value among the first
/// `floor(rho * n)` sorted samples (the smallest sample if that is empty).
pub fn lower_quantile(sorted: &[u64], rho: f64) -> u64 {
    let k = ((rho * sorted.len() as f64).floor() as usize).clamp(1, sorted.len());
    sorted[k - 1]
}

/// Tier boundaries from a sample of path FLOPs.
pub fn tier_boundaries_from_samples(
    mut samples: Vec<u64>,
    num_tiers: usize,
    rho_low: f64,
    rho_high: f64,
    min_flops: u64,
    max_flops: u64,
) -> Result<Vec<u64>> {
    if num_tiers < 2 {
        return Err(Error::Invalid("need at least 2 tiers".into()));
    }
    if !(0.0..1.0).contains(&rho_low) || rho_low >= rho_high || rho_high > 1.0 {
        return Err(Error::Invalid(format!(
            "require 0 <= rho_low < rho_high <= 1, got [{rho_low}, {rho_high}]"
        )));
    }
    if rho_high >= 1.0 {
        return Err(Error::Invalid("rho_high must be < 1 for multi-tier".into()));
    }
    if samples.is_empty() {
        return Err(Error::Invalid("no FLOPs samples".into()));
    }
    samples.sort_unstable();
    if samples[0] == *samples.last().unwrap() || min_flops == max_flops {
        return Err(Error::Invalid("space has no FLOPs spread".into()));
    }
    let high = lower_quantile(&samples, rho_high) as f64;
    let (low, segments, first) = if rho_low > 0.0 && num_tiers > 2 {
        (lower_quantile(&samples, rho_low) as f64, num_tiers - 2, 0)
    } else {
        (samples[0] as f64, num_tiers - 1, 1)
    };
    let bounds: Vec<u64> = (first..=segments)
        .map(|j| (low + (high - low) * j as f64 / segments as f64).floor() as u64)
        .collect();
    if bounds.windows(2).any(|w| w[1] <= w[0])
        || bounds[0] < min_flops
        || *bounds.last().unwrap() >= max_flops
    {
        return Err(Error::Invalid(format!("space has no FLOPs spread for {num_tiers} tiers: {bounds:?}")));
    }
    Ok(bounds)
}

/// Split the FLOPs range of a space into `num_tiers` tiers by sampling
/// `n` uniform random paths.
pub fn tier_boundaries<R: Rng + ?Sized>(
    table: &CostTable,
    num_tiers: usize,
    rho_low: f64,
    rho_high: f64,
    n: usize,
    client_fractions: Option<Vec<f64>>,
    rng: &mut R,
) -> Result<TierSpec> {
    if n < 1000 {
        return Err(Error::Invalid(format!("need at least 1000 samples, got {n}")));
    }
    let samples: Vec<u64> = (0..n)
        .map(|_| table.path_cost(&sample_path_uniform(table, None, rng)).flops)
        .collect();
    let (min, max) = (table.min_path_flops(), table.max_path_flops());
    let boundaries = tier_boundaries_from_samples(samples, num_tiers, rho_low, rho_high, min, max)?;
    let fractions = client_fractions.unwrap_or_else(|| vec![1.0 / num_tiers as f64; num_tiers]);
    TierSpec::new(min, boundaries, max, fractions)
}
