use std::collections::{BTreeMap, BTreeSet};

use fnas_core::nn::Cost;
use fnas_core::rng::rng_from;
use fnas_core::sampling::{
    comm_budget_from_fraction, enumerate_paths, min_feasible_comm_budget, sample_path_greedy, sample_path_rejection,
    sample_subspace, tier_boundaries_from_samples, Subspace,
};
use fnas_core::space::{build_space, CostTable, Path, SpaceConfig};
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn chi_square_ok(counts: &[u64], expected: &[f64]) -> bool {
    let stat: f64 = counts
        .iter()
        .zip(expected)
        .map(|(&o, &e)| (o as f64 - e).powi(2) / e)
        .sum();
    let dof = (counts.len() - 1) as f64;
    stat < ChiSquared::new(dof).unwrap().inverse_cdf(0.999)
}

fn random_table(rng: &mut impl Rng, layers: usize, max_cands: usize, zero_prob: f64) -> CostTable {
    CostTable {
        fixed: Cost {
            params: rng.random_range(0..5),
            flops: rng.random_range(0..5),
        },
        layers: (0..layers)
            .map(|_| {
                let n = rng.random_range(2..=max_cands);
                (0..n)
                    .map(|_| {
                        if rng.random_bool(zero_prob) {
                            Cost::default()
                        } else {
                            Cost {
                                params: rng.random_range(1..40),
                                flops: rng.random_range(1..40),
                            }
                        }
                    })
                    .collect()
            })
            .collect(),
    }
}

fn feasible(table: &CostTable, sub: Option<&Subspace>, budget: u64) -> BTreeSet<Path> {
    enumerate_paths(table, sub)
        .into_iter()
        .filter(|p| table.path_cost(p).flops < budget)
        .collect()
}

#[test]
fn worked_two_layer_example() {
    let table = CostTable::from_flops(0, &[&[0, 1, 3], &[0, 2, 5]]);
    let expected = feasible(&table, None, 4);
    assert_eq!(expected.len(), 5);
    let mut rng = rng_from(11, &[]);
    let mut seen: BTreeMap<Path, u64> = BTreeMap::new();
    for _ in 0..100_000 {
        let p = sample_path_greedy(&table, None, 4, &mut rng).unwrap();
        assert!(table.path_cost(&p).flops < 4);
        *seen.entry(p).or_default() += 1;
    }
    assert_eq!(seen.keys().cloned().collect::<BTreeSet<_>>(), expected);

    let mut counts: BTreeMap<Path, u64> = BTreeMap::new();
    for _ in 0..30_000 {
        *counts.entry(sample_path_rejection(&table, None, 4, 10_000, &mut rng).unwrap()).or_default() += 1;
    }
    let c: Vec<u64> = counts.values().copied().collect();
    assert_eq!(c.len(), 5);
    assert!(chi_square_ok(&c, &[6000.0; 5]), "{counts:?}");
}

#[test]
fn rejection_is_uniform_when_budget_never_binds() {
    let table = CostTable::from_flops(1, &[&[0, 4, 9], &[2, 3, 7]]);
    let mut rng = rng_from(5, &[]);
    let mut counts: BTreeMap<Path, u64> = BTreeMap::new();
    for _ in 0..30_000 {
        *counts.entry(sample_path_rejection(&table, None, 1000, 10_000, &mut rng).unwrap()).or_default() += 1;
    }
    let c: Vec<u64> = counts.values().copied().collect();
    assert_eq!(c.len(), 9);
    assert!(chi_square_ok(&c, &[30_000.0 / 9.0; 9]));
    assert!(sample_path_rejection(&table, None, 3, 500, &mut rng).is_err());
}

#[test]
fn greedy_marginals_uniform_without_binding_budget() {
    let table = CostTable::from_flops(0, &[&[0, 3, 5, 8], &[1, 2, 9], &[0, 4]]);
    let mut rng = rng_from(8, &[]);
    let mut counts: Vec<Vec<u64>> = table.layers.iter().map(|l| vec![0; l.len()]).collect();
    for _ in 0..30_000 {
        let p = sample_path_greedy(&table, None, table.max_path_flops() + 1, &mut rng).unwrap();
        for (l, &c) in p.choices.iter().enumerate() {
            counts[l][c] += 1;
        }
    }
    for c in &counts {
        let e = 30_000.0 / c.len() as f64;
        assert!(chi_square_ok(c, &vec![e; c.len()]), "{c:?}");
    }
}

#[test]
fn greedy_support_equals_brute_force() {
    let mut meta = rng_from(21, &[]);
    for case in 0..40 {
        let layers = meta.random_range(1..=4);
        let table = random_table(&mut meta, layers, 4, 0.3);
        let sub = if case % 2 == 0 {
            None
        } else {
            let b = comm_budget_from_fraction(&table, 0.6).max(min_feasible_comm_budget(&table));
            Some(sample_subspace(&table, b, &mut meta).unwrap())
        };
        let costs: Vec<u64> = enumerate_paths(&table, sub.as_ref()).iter().map(|p| table.path_cost(p).flops).collect();
        let (lo, hi) = (*costs.iter().min().unwrap(), *costs.iter().max().unwrap());
        let budget = meta.random_range(lo + 1..=hi + 2);
        let expected = feasible(&table, sub.as_ref(), budget);
        let mut rng = rng_from(case, &[1]);
        let mut seen = BTreeSet::new();
        for _ in 0..(40 * expected.len()).max(2000) {
            let p = sample_path_greedy(&table, sub.as_ref(), budget, &mut rng).unwrap();
            assert!(table.path_cost(&p).flops < budget);
            seen.insert(p);
        }
        assert_eq!(seen, expected, "case {case}");
    }
}

#[test]
fn greedy_never_violates_budget_on_real_space() {
    let space = build_space(&SpaceConfig::default()).unwrap();
    let table = space.cost_table();
    let mut rng = rng_from(3, &[]);
    let b = comm_budget_from_fraction(&table, 0.5);
    let lo = table.min_path_flops();
    let hi = table.max_path_flops();
    for k in 0..10u64 {
        let sub = sample_subspace(&table, b, &mut rng).unwrap();
        let budget = lo + 1 + (hi - lo) * k / 10;
        for _ in 0..2000 {
            let p = sample_path_greedy(&table, Some(&sub), budget, &mut rng).unwrap();
            assert!(sub.contains_path(&p));
            assert!(table.path_cost(&p).flops < budget);
        }
    }
}

#[test]
fn subspace_frequencies_uniform_on_equal_costs() {
    // With equal candidate sizes the budget admits the same number of
    // candidates every draw, so each one is kept equally often.
    let table = CostTable::from_flops(0, &[&[0, 5, 5, 5], &[5, 5, 5], &[0, 5, 5, 5, 5]]);
    let b = comm_budget_from_fraction(&table, 0.5);
    let mut rng = rng_from(4, &[]);
    let mut counts = [0u64; 10];
    for _ in 0..10_000 {
        let s = sample_subspace(&table, b, &mut rng).unwrap();
        let mut i = 0;
        for (l, layer) in table.layers.iter().enumerate() {
            for (c, cost) in layer.iter().enumerate() {
                if cost.params > 0 {
                    counts[i] += s.contains(l, c) as u64;
                    i += 1;
                }
            }
        }
    }
    // Layer 1 has no free candidate and gets one forced pick, which
    // breaks symmetry between layers but not within a layer.
    for range in [0..3, 3..6, 6..10] {
        let c = &counts[range];
        let e = c.iter().sum::<u64>() as f64 / c.len() as f64;
        assert!(chi_square_ok(c, &vec![e; c.len()]), "{c:?}");
    }
}

#[test]
fn every_candidate_reachable_at_half_budget() {
    let space = build_space(&SpaceConfig::default()).unwrap();
    let table = space.cost_table();
    let b = comm_budget_from_fraction(&table, 0.5);
    let mut rng = rng_from(6, &[]);
    let mut counts: Vec<Vec<u64>> = table.layers.iter().map(|l| vec![0; l.len()]).collect();
    for _ in 0..10_000 {
        let s = sample_subspace(&table, b, &mut rng).unwrap();
        assert!(s.param_size < b);
        for (l, row) in counts.iter_mut().enumerate() {
            for (c, n) in row.iter_mut().enumerate() {
                *n += s.contains(l, c) as u64;
            }
        }
    }
    assert!(counts.iter().flatten().all(|&n| n > 0), "{counts:?}");
}

#[test]
fn tier_boundaries_on_uniform_flops() {
    // Path FLOPs uniform on 1..=100: layer a picks tens, layer b units.
    let tens: Vec<u64> = (0..10).map(|i| i * 10).collect();
    let units: Vec<u64> = (0..10).collect();
    let table = CostTable::from_flops(1, &[&tens, &units]);
    let all: Vec<u64> = enumerate_paths(&table, None).iter().map(|p| table.path_cost(p).flops).collect();
    assert_eq!(all.iter().min(), Some(&1));
    assert_eq!(all.iter().max(), Some(&100));
    for seed in 0..5 {
        let mut rng = rng_from(seed, &[]);
        let samples: Vec<u64> = (0..20_000)
            .map(|_| all[rng.random_range(0..all.len())])
            .collect();
        let b = tier_boundaries_from_samples(samples, 4, 0.0, 0.9, 1, 100).unwrap();
        for (got, want) in b.iter().zip([30, 60, 90]) {
            assert!((*got as i64 - want).abs() <= 2, "{b:?}");
        }
    }
}

#[test]
fn samplers_are_pure_functions_of_the_seed() {
    let space = build_space(&SpaceConfig::default()).unwrap();
    let table = space.cost_table();
    let b = comm_budget_from_fraction(&table, 0.5);
    let draw = || {
        let mut rng = rng_from(77, &[]);
        let s = sample_subspace(&table, b, &mut rng).unwrap();
        let p = sample_path_greedy(&table, Some(&s), table.max_path_flops(), &mut rng).unwrap();
        (s, p)
    };
    assert_eq!(draw(), draw());
}
