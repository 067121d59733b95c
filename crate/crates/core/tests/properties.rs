use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, OnceLock};

use fnas_core::data::{largest_remainder, lda_partition};
use fnas_core::fedcore::{opa_aggregate, ClientUpdate};
use fnas_core::nn::{op_cost, Cost, Tensor};
use fnas_core::rng::rng_from;
use fnas_core::sampling::{min_feasible_comm_budget, sample_path_greedy, sample_subspace, tier_boundaries_from_samples, TierSpec};
use fnas_core::space::{build_space, CostTable, Path, SearchSpace, SpaceConfig};
use fnas_core::supernet::{ParamKey, Supernet};
use proptest::prelude::*;

fn space() -> Arc<SearchSpace> {
    static S: OnceLock<Arc<SearchSpace>> = OnceLock::new();
    S.get_or_init(|| Arc::new(build_space(&SpaceConfig::default()).unwrap())).clone()
}

fn cost_table() -> impl Strategy<Value = CostTable> {
    let cand = prop_oneof![1 => Just((0u64, 0u64)), 3 => (1u64..50, 1u64..50)];
    (0u64..10, prop::collection::vec(prop::collection::vec(cand, 2..5), 1..6)).prop_map(|(fixed, layers)| CostTable {
        fixed: Cost { params: fixed, flops: fixed },
        layers: layers
            .into_iter()
            .map(|l| l.into_iter().map(|(p, f)| Cost { params: p, flops: f }).collect())
            .collect(),
    })
}

fn random_path(space: &SearchSpace, picks: &[usize]) -> Path {
    Path::new(space.layers.iter().zip(picks).map(|(l, &p)| p % l.candidates.len()).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn greedy_paths_stay_under_budget(table in cost_table(), slack in 1u64..200, seed in any::<u64>()) {
        let budget = table.min_path_flops() + slack;
        let mut rng = rng_from(seed, &[]);
        for _ in 0..50 {
            let p = sample_path_greedy(&table, None, budget, &mut rng).unwrap();
            prop_assert!(table.path_cost(&p).flops < budget);
        }
    }

    #[test]
    fn subspaces_respect_comm_budget(table in cost_table(), extra in 0u64..300, seed in any::<u64>()) {
        let b = min_feasible_comm_budget(&table) + extra;
        let s = sample_subspace(&table, b, &mut rng_from(seed, &[])).unwrap();
        prop_assert!(s.param_size < b);
        for (l, layer) in table.layers.iter().enumerate() {
            prop_assert!(s.candidates(l).next().is_some());
            for (c, cost) in layer.iter().enumerate() {
                if cost.params == 0 {
                    prop_assert!(s.contains(l, c));
                }
            }
        }
        prop_assert!(sample_subspace(&table, min_feasible_comm_budget(&table) - 1, &mut rng_from(seed, &[])).is_err());
    }

    #[test]
    fn tiers_partition_the_range(mut samples in prop::collection::vec(100u64..10_000, 1000..1500), tiers in 2usize..6) {
        samples.push(100);
        samples.push(9_999);
        let lo = 100;
        let hi = 10_000;
        if let Ok(b) = tier_boundaries_from_samples(samples, tiers, 0.0, 0.9, lo, hi) {
            let spec = TierSpec::new(lo, b, hi, vec![1.0 / tiers as f64; tiers]).unwrap();
            for f in (lo..=hi).step_by(37).chain([hi]) {
                let owners: Vec<usize> = (0..tiers).filter(|&t| spec.contains(t, f)).collect();
                prop_assert_eq!(owners.len(), 1, "{} FLOPs", f);
                prop_assert!(f < spec.budget(owners[0]));
            }
        }
    }

    #[test]
    fn path_cost_is_per_layer_sum(picks in prop::collection::vec(0usize..100, 4)) {
        let space = space();
        let path = random_path(&space, &picks);
        let mut want = space.fixed_cost();
        for (l, &c) in path.choices.iter().enumerate() {
            let cand = &space.layers[l].candidates[c];
            let mut s = space.layers[l].in_shape.clone();
            for (op, _) in &cand.chain.ops {
                want += op_cost(*op, &s).unwrap();
                s = op.output_shape(&s).unwrap();
            }
        }
        prop_assert_eq!(space.cost_of_path(&path).unwrap(), want);
    }

    #[test]
    fn extract_forward_is_bitwise_supernet_forward(picks in prop::collection::vec(0usize..100, 4), seed in 0u64..1000) {
        let space = space();
        let path = random_path(&space, &picks);
        let net = Supernet::init(space.clone(), &mut rng_from(seed, &[])).unwrap();
        let mut rng = rng_from(seed, &[1]);
        let data: Vec<f64> = (0..3 * 64).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let x = Tensor::new(vec![3, 1, 8, 8], data).unwrap();
        let a = net.forward(&path, &x).unwrap();
        let b = net.forward(&path, &x).unwrap();
        let m = net.extract(&path).unwrap();
        let c = m.forward(&x).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(&a, &c);
    }

    #[test]
    fn opa_stays_within_client_range(seed in 0u64..10_000, n in 2usize..5) {
        let space = space();
        let net = Supernet::init(space, &mut rng_from(seed, &[])).unwrap();
        let key = ParamKey::Fixed(0);
        let mut rng = rng_from(seed, &[2]);
        let updates: Vec<ClientUpdate> = (0..n)
            .map(|id| {
                let ts: Vec<Tensor> = net.params[&key]
                    .iter()
                    .map(|t| Tensor::full(t.shape(), rand::Rng::random_range(&mut rng, -3.0..3.0)))
                    .collect();
                ClientUpdate {
                    client_id: id,
                    params: BTreeMap::from([(key, ts)]),
                    histogram: BTreeMap::from([(key, rand::Rng::random_range(&mut rng, 0..20))]),
                    total_samples: 20,
                    losses: vec![],
                    train_flops: 0,
                }
            })
            .collect();
        let mut agg = net.clone();
        opa_aggregate(&mut agg, &updates).unwrap();
        let trained: Vec<f64> = updates.iter().filter(|u| u.histogram[&key] > 0).map(|u| u.params[&key][0].data()[0]).collect();
        let v = agg.params[&key][0].data()[0];
        if trained.len() > 1 {
            let lo = trained.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = trained.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        } else {
            prop_assert_eq!(&agg.params[&key], &net.params[&key]);
        }
    }

    #[test]
    fn lda_is_a_partition(n in 200usize..600, clients in 2usize..20, alpha in 0.05f64..100.0, seed in any::<u64>()) {
        let labels: Vec<usize> = (0..n).map(|i| (i * 7) % 5).collect();
        let shards = lda_partition(&labels, 5, clients, alpha, &mut rng_from(seed, &[])).unwrap();
        let all: Vec<usize> = shards.iter().flat_map(|s| s.indices.iter().copied()).collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(all.iter().collect::<BTreeSet<_>>().len(), n);
        prop_assert!(shards.iter().all(|s| !s.indices.is_empty()));
    }

    #[test]
    fn largest_remainder_is_exact(raw in prop::collection::vec(0.01f64..1.0, 1..8), total in 1usize..500) {
        let sum: f64 = raw.iter().sum();
        let f: Vec<f64> = raw.iter().map(|x| x / sum).collect();
        let counts = largest_remainder(&f, total);
        prop_assert_eq!(counts.iter().sum::<usize>(), total);
        for (c, q) in counts.iter().zip(&f) {
            prop_assert!((*c as f64 - q * total as f64).abs() < 1.0 + 1e-9);
        }
    }
}
