//! Per-tier multi-objective architecture search over a trained supernet.
//!
//! NSGA-II maximizes a validation metric and minimizes FLOPs inside one
//! tier's FLOPs interval. Candidates are scored either centrally or on
//! clients' local validation shards.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fedcore::ClientData;
use crate::sampling::{enumerate_paths, sample_path_greedy, Subspace, TierSpec};
use crate::space::{CostTable, Path};
use crate::supernet::{count_correct, Supernet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub path: Path,
    /// Validation metric, higher is better. `None` if evaluation failed.
    pub metric: Option<f64>,
    pub flops: u64,
    pub tier: usize,
}

impl Individual {
    fn score(&self) -> f64 {
        self.metric.unwrap_or(f64::NEG_INFINITY)
    }
}

/// `a` dominates `b`: at least as accurate and at most as expensive, and
/// strictly better in one of the two.
pub fn dominates(a: (f64, u64), b: (f64, u64)) -> bool {
    a.0 >= b.0 && a.1 <= b.1 && (a.0 > b.0 || a.1 < b.1)
}

/// Fast non-dominated sort over `(metric, flops)` points. Returns fronts
/// of indices; front 0 is the Pareto set.
pub fn nondominated_sort(points: &[(f64, u64)]) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut dominated_by = vec![0usize; n];
    let mut dominating: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            if dominates(points[i], points[j]) {
                dominating[i].push(j);
                dominated_by[j] += 1;
            } else if dominates(points[j], points[i]) {
                dominating[j].push(i);
                dominated_by[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| dominated_by[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominating[i] {
                dominated_by[j] -= 1;
                if dominated_by[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    fronts
}

/// Crowding distance of each member of `front` (same order). Boundary
/// points get infinity.
pub fn crowding_distance(points: &[(f64, u64)], front: &[usize]) -> Vec<f64> {
    let m = front.len();
    let mut dist = vec![0.0; m];
    if m <= 2 {
        return vec![f64::INFINITY; m];
    }
    let objectives: [Box<dyn Fn(usize) -> f64>; 2] = [
        Box::new(|i| points[i].0),
        Box::new(|i| points[i].1 as f64),
    ];
    for obj in &objectives {
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| obj(front[a]).total_cmp(&obj(front[b])).then(a.cmp(&b)));
        let lo = obj(front[order[0]]);
        let hi = obj(front[order[m - 1]]);
        dist[order[0]] = f64::INFINITY;
        dist[order[m - 1]] = f64::INFINITY;
        let span = hi - lo;
        if !(span > 0.0) || !span.is_finite() {
            continue;
        }
        for w in 1..m - 1 {
            let gap = obj(front[order[w + 1]]) - obj(front[order[w - 1]]);
            dist[order[w]] += gap / span;
        }
    }
    dist
}

/// Non-dominated individuals, sorted by FLOPs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoFront {
    pub members: Vec<Individual>,
}

impl ParetoFront {
    pub fn from_population(pop: &[Individual]) -> Self {
        let points: Vec<(f64, u64)> = pop.iter().map(|i| (i.score(), i.flops)).collect();
        let mut members: Vec<Individual> = nondominated_sort(&points)
            .first()
            .map(|f| f.iter().map(|&i| pop[i].clone()).collect())
            .unwrap_or_default();
        members.sort_by(|a, b| a.flops.cmp(&b.flops).then_with(|| a.path.choices.cmp(&b.path.choices)));
        members.dedup_by(|a, b| a.path == b.path);
        Self { members }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub iterations: usize,
    pub population: usize,
    /// Parents selected (and children produced) per generation.
    pub sample: usize,
    /// Resampling attempts for a child outside the tier interval.
    pub repair_cap: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            population: 128,
            sample: 64,
            repair_cap: 100,
        }
    }
}

/// Scores for one batch of paths.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchScores {
    /// One entry per path; `None` marks a failed or unevaluated path.
    pub metrics: Vec<Option<f64>>,
    /// Communication spent on this batch, in parameters.
    pub comm_cost: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub best_metric: f64,
    pub front_size: usize,
    /// Searchable parameters of the minimal supernet holding the paths
    /// evaluated in this iteration (0 if nothing new was evaluated).
    pub union_params: u64,
    pub cumulative_comm: u64,
    pub evaluated: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: Individual,
    pub front: ParetoFront,
    pub population: Vec<Individual>,
    pub trace: Vec<TraceRow>,
}

const ENUMERATION_LIMIT: u128 = 200_000;

fn tier_paths(table: &CostTable, tiers: &TierSpec, tier: usize) -> Option<Vec<Path>> {
    (table.num_paths() <= ENUMERATION_LIMIT).then(|| {
        enumerate_paths(table, None)
            .into_iter()
            .filter(|p| tiers.contains(tier, table.path_cost(p).flops))
            .collect()
    })
}

fn sample_in_tier<R: Rng + ?Sized>(
    table: &CostTable,
    tiers: &TierSpec,
    tier: usize,
    attempts: usize,
    rng: &mut R,
) -> Option<Path> {
    for _ in 0..attempts {
        let p = sample_path_greedy(table, None, tiers.budget(tier), rng).ok()?;
        if tiers.contains(tier, table.path_cost(&p).flops) {
            return Some(p);
        }
    }
    None
}

/// Push a too-expensive path into the tier by switching random layers to
/// their cheapest candidate.
fn mutate_toward_identity<R: Rng + ?Sized>(table: &CostTable, path: &Path, rng: &mut R) -> Path {
    let mut choices = path.choices.clone();
    let mut layers: Vec<usize> = (0..choices.len()).collect();
    layers.shuffle(rng);
    let hi_cost = |c: &[usize]| table.path_cost(&Path::new(c.to_vec())).flops;
    let before = hi_cost(&choices);
    for l in layers {
        let cheapest = (0..table.layers[l].len())
            .min_by_key(|&c| (table.layers[l][c].flops, c))
            .expect("non-empty layer");
        choices[l] = cheapest;
        if hi_cost(&choices) < before {
            break;
        }
    }
    Path::new(choices)
}

fn crossover<R: Rng + ?Sized>(a: &Path, b: &Path, rng: &mut R) -> (Path, Path) {
    let n = a.choices.len();
    if n < 2 {
        return (a.clone(), b.clone());
    }
    let cut = rng.random_range(1..n);
    let mut x = a.choices[..cut].to_vec();
    x.extend_from_slice(&b.choices[cut..]);
    let mut y = b.choices[..cut].to_vec();
    y.extend_from_slice(&a.choices[cut..]);
    (Path::new(x), Path::new(y))
}

fn mutate<R: Rng + ?Sized>(table: &CostTable, path: &mut Path, rng: &mut R) {
    let n = path.choices.len();
    let rate = 1.0 / n.max(1) as f64;
    for (l, c) in path.choices.iter_mut().enumerate() {
        let k = table.layers[l].len();
        if k > 1 && rng.random::<f64>() < rate {
            let mut new = rng.random_range(0..k - 1);
            if new >= *c {
                new += 1;
            }
            *c = new;
        }
    }
}

/// Rank and crowding distance of every individual.
fn rank_population(pop: &[Individual]) -> (Vec<usize>, Vec<f64>) {
    let points: Vec<(f64, u64)> = pop.iter().map(|i| (i.score(), i.flops)).collect();
    let mut rank = vec![0; pop.len()];
    let mut crowd = vec![0.0; pop.len()];
    for (r, front) in nondominated_sort(&points).iter().enumerate() {
        let d = crowding_distance(&points, front);
        for (&i, &di) in front.iter().zip(&d) {
            rank[i] = r;
            crowd[i] = di;
        }
    }
    (rank, crowd)
}

fn better(rank: &[usize], crowd: &[f64], a: usize, b: usize) -> bool {
    rank[a] < rank[b] || (rank[a] == rank[b] && crowd[a] > crowd[b])
}

/// Keep the best `n` by (rank, crowding), ties broken by position.
fn environmental_selection(pop: Vec<Individual>, n: usize) -> Vec<Individual> {
    let (rank, crowd) = rank_population(&pop);
    let mut order: Vec<usize> = (0..pop.len()).collect();
    order.sort_by(|&a, &b| {
        rank[a]
            .cmp(&rank[b])
            .then(crowd[b].total_cmp(&crowd[a]))
            .then(a.cmp(&b))
    });
    let keep: BTreeSet<usize> = order.into_iter().take(n).collect();
    pop.into_iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, x)| x)
        .collect()
}

fn best_of(pop: &[Individual]) -> Individual {
    pop.iter()
        .max_by(|a, b| {
            a.score()
                .total_cmp(&b.score())
                .then(b.flops.cmp(&a.flops))
                .then(b.path.choices.cmp(&a.path.choices))
        })
        .cloned()
        .expect("non-empty population")
}

/// NSGA-II within `tier`. `eval` scores a batch of new paths; it is
/// called once per generation (and once for the initial population), and
/// never sees a path twice.
pub fn nsga2_search<R, F>(
    table: &CostTable,
    tiers: &TierSpec,
    tier: usize,
    cfg: &SearchConfig,
    mut eval: F,
    rng: &mut R,
) -> Result<SearchOutcome>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &[Path]) -> Result<BatchScores>,
{
    if tier >= tiers.num_tiers() {
        return Err(Error::Search(format!("tier {tier} does not exist")));
    }
    if cfg.population == 0 {
        return Err(Error::Search("population must be positive".into()));
    }
    let enumerated = tier_paths(table, tiers, tier);
    let mut population_size = cfg.population;
    if let Some(all) = &enumerated {
        if all.is_empty() {
            return Err(Error::Search(format!("tier {tier} contains no path")));
        }
        if all.len() < population_size {
            log::warn!(
                "tier {tier} admits {} distinct paths, shrinking population from {population_size}",
                all.len()
            );
            population_size = all.len();
        }
    }

    let mut seen: BTreeSet<Path> = BTreeSet::new();
    let mut init = Vec::with_capacity(population_size);
    let mut misses = 0;
    while init.len() < population_size && misses < population_size * 50 {
        match sample_in_tier(table, tiers, tier, cfg.repair_cap.max(1), rng) {
            Some(p) if seen.insert(p.clone()) => init.push(p),
            _ => misses += 1,
        }
    }
    if init.len() < population_size {
        if let Some(all) = &enumerated {
            let mut rest: Vec<&Path> = all.iter().filter(|p| !seen.contains(*p)).collect();
            rest.shuffle(rng);
            for p in rest.into_iter().take(population_size - init.len()) {
                seen.insert(p.clone());
                init.push(p.clone());
            }
        }
    }
    if init.is_empty() {
        return Err(Error::Search(format!("could not sample any path in tier {tier}")));
    }
    if init.len() < population_size {
        log::warn!("tier {tier}: only {} distinct paths found, shrinking population", init.len());
        population_size = init.len();
    }

    let mut cumulative_comm = 0;
    let mut evaluated = 0;
    let mut score = |iteration: usize, paths: Vec<Path>, cumulative_comm: &mut u64| -> Result<Vec<Individual>> {
        let scores = eval(iteration, &paths)?;
        if scores.metrics.len() != paths.len() {
            return Err(Error::Search(format!(
                "evaluator returned {} scores for {} paths",
                scores.metrics.len(),
                paths.len()
            )));
        }
        *cumulative_comm += scores.comm_cost;
        Ok(paths
            .into_iter()
            .zip(scores.metrics)
            .map(|(path, metric)| Individual {
                flops: table.path_cost(&path).flops,
                path,
                metric: metric.filter(|m| m.is_finite()),
                tier,
            })
            .collect())
    };

    evaluated += init.len();
    let batch = init.clone();
    let mut pop = score(0, init, &mut cumulative_comm)?;
    let mut trace = vec![trace_row(table, 0, &pop, &batch, cumulative_comm, evaluated)];

    for it in 1..=cfg.iterations {
        let (rank, crowd) = rank_population(&pop);
        let parents: Vec<usize> = (0..cfg.sample.max(2))
            .map(|_| {
                let a = rng.random_range(0..pop.len());
                let b = rng.random_range(0..pop.len());
                if better(&rank, &crowd, b, a) {
                    b
                } else {
                    a
                }
            })
            .collect();
        let mut children = Vec::new();
        for pair in parents.chunks(2) {
            let (pa, pb) = (&pop[pair[0]].path, &pop[pair[pair.len() - 1]].path);
            let (mut x, mut y) = crossover(pa, pb, rng);
            mutate(table, &mut x, rng);
            mutate(table, &mut y, rng);
            for child in [x, y] {
                let child = repair(table, tiers, tier, cfg.repair_cap, child, pa, rng);
                if seen.insert(child.clone()) {
                    children.push(child);
                }
            }
        }
        evaluated += children.len();
        let batch = children.clone();
        let mut union = pop;
        if !children.is_empty() {
            union.extend(score(it, children, &mut cumulative_comm)?);
        }
        pop = environmental_selection(union, population_size);
        trace.push(trace_row(table, it, &pop, &batch, cumulative_comm, evaluated));
    }

    Ok(SearchOutcome {
        best: best_of(&pop),
        front: ParetoFront::from_population(&pop),
        population: pop,
        trace,
    })
}

fn repair<R: Rng + ?Sized>(
    table: &CostTable,
    tiers: &TierSpec,
    tier: usize,
    cap: usize,
    child: Path,
    parent: &Path,
    rng: &mut R,
) -> Path {
    let inside = |p: &Path| tiers.contains(tier, table.path_cost(p).flops);
    if inside(&child) {
        return child;
    }
    if let Some(p) = sample_in_tier(table, tiers, tier, cap, rng) {
        return p;
    }
    let mut p = child;
    for _ in 0..p.choices.len() {
        p = mutate_toward_identity(table, &p, rng);
        if inside(&p) {
            return p;
        }
    }
    parent.clone()
}

fn trace_row(table: &CostTable, iteration: usize, pop: &[Individual], batch: &[Path], comm: u64, evaluated: usize) -> TraceRow {
    TraceRow {
        iteration,
        best_metric: best_of(pop).metric.unwrap_or(f64::NAN),
        front_size: ParetoFront::from_population(pop).members.len(),
        union_params: minimal_supernet(table, batch).map(|s| s.param_size).unwrap_or(0),
        cumulative_comm: comm,
        evaluated,
    }
}

/// Accuracy of `path` with supernet weights on a central validation set.
pub fn evaluate_centralized(supernet: &Supernet, path: &Path, val: &Dataset) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Data("empty validation set".into()));
    }
    supernet.accuracy(path, val)
}

/// Evaluate a batch centrally, in parallel.
pub fn evaluate_centralized_batch(supernet: &Supernet, paths: &[Path], val: &Dataset) -> Vec<Option<f64>> {
    paths
        .par_iter()
        .map(|p| evaluate_centralized(supernet, p, val).ok())
        .collect()
}

/// Per-layer union of the paths' candidates.
pub fn minimal_supernet(table: &CostTable, paths: &[Path]) -> Result<Subspace> {
    let first = paths
        .first()
        .ok_or_else(|| Error::Invalid("minimal supernet of no paths".into()))?;
    let mut mask: Vec<Vec<bool>> = table.layers.iter().map(|l| vec![false; l.len()]).collect();
    for p in paths {
        if p.choices.len() != first.choices.len() || p.choices.len() != mask.len() {
            return Err(Error::Invalid("paths of different lengths".into()));
        }
        for (l, &c) in p.choices.iter().enumerate() {
            *mask[l]
                .get_mut(c)
                .ok_or_else(|| Error::Invalid(format!("layer {l} has no candidate {c}")))? = true;
        }
    }
    Ok(Subspace::from_mask(table, mask))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedEval {
    /// Pooled accuracy per path; `None` if no eligible client scored it.
    pub metrics: Vec<Option<f64>>,
    pub correct: Vec<u64>,
    pub totals: Vec<u64>,
    /// Minimal-supernet size times client deliveries.
    pub comm_cost: u64,
    pub clients_used: Vec<usize>,
    pub deliveries: usize,
}

/// Federated evaluation. Each FE round samples `k` clients not used by
/// an earlier round of the same call (stopping once all are used); every
/// chosen client scores each path whose tier does not exceed its own on
/// its local validation shard. Per-path results pool correct predictions
/// and sample counts over all contributions.
pub fn evaluate_federated<R: Rng + ?Sized>(
    supernet: &Supernet,
    paths: &[Path],
    path_tiers: &[usize],
    clients: &[ClientData],
    fe_rounds: usize,
    k: usize,
    rng: &mut R,
) -> Result<FedEval> {
    if fe_rounds == 0 || k == 0 {
        return Err(Error::Invalid("fe_rounds and k must be >= 1".into()));
    }
    if path_tiers.len() != paths.len() {
        return Err(Error::Invalid("one tier per path required".into()));
    }
    let table = supernet.space.cost_table();
    let union_size = if paths.is_empty() { 0 } else { minimal_supernet(&table, paths)?.param_size };
    let mut unused: Vec<usize> = (0..clients.len()).collect();
    let mut correct = vec![0u64; paths.len()];
    let mut totals = vec![0u64; paths.len()];
    let mut used = Vec::new();
    let mut deliveries = 0;
    for _ in 0..fe_rounds {
        if unused.is_empty() {
            break;
        }
        let mut picked: Vec<usize> = unused.choose_multiple(rng, k.min(unused.len())).copied().collect();
        picked.sort_unstable();
        unused.retain(|i| !picked.contains(i));
        let per_client: Vec<Vec<(usize, usize, usize)>> = picked
            .par_iter()
            .map(|&ci| {
                let client = &clients[ci];
                let mut out = Vec::new();
                if client.val.is_empty() {
                    return Ok(out);
                }
                for (pi, path) in paths.iter().enumerate() {
                    if path_tiers[pi] <= client.tier {
                        let (c, n) = count_correct(&supernet.space, &supernet.params, path, &client.val, None)?;
                        out.push((pi, c, n));
                    }
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        for (&ci, scores) in picked.iter().zip(per_client) {
            if scores.is_empty() {
                continue;
            }
            deliveries += 1;
            used.push(clients[ci].id);
            for (pi, c, n) in scores {
                correct[pi] += c as u64;
                totals[pi] += n as u64;
            }
        }
    }
    let metrics = correct
        .iter()
        .zip(&totals)
        .map(|(&c, &n)| (n > 0).then(|| c as f64 / n as f64))
        .collect();
    Ok(FedEval {
        metrics,
        correct,
        totals,
        comm_cost: union_size * deliveries as u64,
        clients_used: used,
        deliveries,
    })
}

/// Kendall rank correlation (tau-a): tied pairs count as neither
/// concordant nor discordant.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!("rankings of length {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Invalid("kendall tau needs at least 2 items".into()));
    }
    let mut score: i64 = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            let s = (a[i] - a[j]).signum() * (b[i] - b[j]).signum();
            if a[i] != a[j] && b[i] != b[j] {
                score += s as i64;
            }
        }
    }
    Ok(score as f64 / (n * (n - 1) / 2) as f64)
}

/// Search result for every tier.
#[derive(Debug, Clone, PartialEq)]
pub struct TierSearch {
    pub tier: usize,
    pub outcome: SearchOutcome,
}

/// Group evaluated individuals by tier, for reporting.
pub fn fronts_by_tier(results: &[TierSearch]) -> BTreeMap<usize, ParetoFront> {
    results.iter().map(|r| (r.tier, r.outcome.front.clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn worked_front_example() {
        let pts = [(0.9, 10), (0.8, 5), (0.7, 20)];
        let fronts = nondominated_sort(&pts);
        assert_eq!(fronts[0], vec![0, 1]);
        assert_eq!(fronts[1], vec![2]);
    }

    #[test]
    fn single_point_one_front() {
        assert_eq!(nondominated_sort(&[(0.5, 1)]), vec![vec![0]]);
    }

    #[test]
    fn tau_examples() {
        assert_eq!(kendall_tau(&[1., 2., 3., 4.], &[1., 2., 3., 4.]).unwrap(), 1.0);
        assert_eq!(kendall_tau(&[1., 2., 3., 4.], &[4., 3., 2., 1.]).unwrap(), -1.0);
        let t = kendall_tau(&[1., 2., 3., 4.], &[1., 2., 4., 3.]).unwrap();
        assert!((t - 4.0 / 6.0).abs() < 1e-15);
        assert!(kendall_tau(&[1.], &[1.]).is_err());
    }

    #[test]
    fn minimal_supernet_union() {
        let mut table = CostTable::from_flops(0, &[&[0, 1, 2], &[0, 1]]);
        table.layers[0][1].params = 10;
        table.layers[0][2].params = 20;
        table.layers[1][1].params = 5;
        let one = minimal_supernet(&table, &[Path::new(vec![1, 1])]).unwrap();
        assert_eq!(one.param_size, 15);
        let two = minimal_supernet(&table, &[Path::new(vec![1, 1]), Path::new(vec![2, 1])]).unwrap();
        assert_eq!(two.param_size, 35);
        let same = minimal_supernet(&table, &[Path::new(vec![1, 1]), Path::new(vec![1, 1])]).unwrap();
        assert_eq!(same.param_size, 15);
    }

    #[test]
    fn negative_flops_finds_cheapest_in_tier() {
        let table = CostTable::from_flops(10, &[&[0, 3, 7], &[0, 2, 5], &[0, 4, 9]]);
        let tiers = TierSpec::new(10, vec![15, 20], 31, vec![0.4, 0.3, 0.3]).unwrap();
        let cfg = SearchConfig { iterations: 5, population: 8, sample: 8, repair_cap: 100 };
        for tier in 0..3 {
            let out = nsga2_search(
                &table,
                &tiers,
                tier,
                &cfg,
                |_, paths| {
                    Ok(BatchScores {
                        metrics: paths.iter().map(|p| Some(-(table.path_cost(p).flops as f64))).collect(),
                        comm_cost: 0,
                    })
                },
                &mut rng_from(tier as u64, &[]),
            )
            .unwrap();
            let cheapest = enumerate_paths(&table, None)
                .into_iter()
                .map(|p| table.path_cost(&p).flops)
                .filter(|&f| tiers.contains(tier, f))
                .min()
                .unwrap();
            assert_eq!(out.best.flops, cheapest, "tier {tier}");
            assert!(out.population.iter().all(|i| tiers.contains(tier, i.flops)));
        }
    }

    #[test]
    fn zero_iterations_returns_initial_best() {
        let table = CostTable::from_flops(0, &[&[0, 1, 2], &[0, 1, 2]]);
        let tiers = TierSpec::new(0, vec![], 4, vec![1.0]).unwrap();
        let cfg = SearchConfig { iterations: 0, population: 4, sample: 4, repair_cap: 10 };
        let mut calls = 0;
        let out = nsga2_search(
            &table,
            &tiers,
            0,
            &cfg,
            |_, paths| {
                calls += 1;
                Ok(BatchScores { metrics: paths.iter().map(|p| Some(p.choices[0] as f64)).collect(), comm_cost: 0 })
            },
            &mut rng_from(3, &[]),
        )
        .unwrap();
        assert_eq!(calls, 1);
        let max = out.population.iter().map(|i| i.metric.unwrap()).fold(f64::MIN, f64::max);
        assert_eq!(out.best.metric, Some(max));
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn failed_evaluations_rank_last() {
        let table = CostTable::from_flops(0, &[&[0, 1], &[0, 1]]);
        let tiers = TierSpec::new(0, vec![], 2, vec![1.0]).unwrap();
        let cfg = SearchConfig { iterations: 2, population: 4, sample: 4, repair_cap: 10 };
        let out = nsga2_search(
            &table,
            &tiers,
            0,
            &cfg,
            |_, paths| Ok(BatchScores { metrics: paths.iter().map(|p| (p.choices[0] == 1).then_some(0.5)).collect(), comm_cost: 0 }),
            &mut rng_from(1, &[]),
        )
        .unwrap();
        assert_eq!(out.best.metric, Some(0.5));
    }
}
