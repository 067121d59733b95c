use std::collections::BTreeMap;
use std::sync::Arc;

use fnas_core::data::{gen_synthetic, SyntheticConfig};
use fnas_core::experiment::with_threads;
use fnas_core::fedcore::{
    client_local_train, fedavg_aggregate, opa_aggregate, run_round, Aggregator, ClientData, ClientUpdate, LocalConfig,
    RoundConfig,
};
use fnas_core::nn::Tensor;
use fnas_core::rng::rng_from;
use fnas_core::sampling::{comm_budget_from_fraction, Subspace, TierSpec};
use fnas_core::space::{build_space, SearchSpace, SpaceConfig};
use fnas_core::supernet::{subspace_keys, ParamKey, Supernet};
use rand::Rng;

fn space() -> Arc<SearchSpace> {
    Arc::new(build_space(&SpaceConfig::default()).unwrap())
}

fn perturbed(net: &Supernet, rng: &mut impl Rng) -> BTreeMap<ParamKey, Vec<Tensor>> {
    net.params
        .iter()
        .map(|(k, ts)| {
            let ts = ts
                .iter()
                .map(|t| {
                    let data = t.data().iter().map(|v| v + rng.random_range(-1.0..1.0)).collect();
                    Tensor::new(t.shape().to_vec(), data).unwrap()
                })
                .collect();
            (*k, ts)
        })
        .collect()
}

fn constant_like(ts: &[Tensor], v: f64) -> Vec<Tensor> {
    ts.iter().map(|t| Tensor::full(t.shape(), v)).collect()
}

fn update(id: usize, params: BTreeMap<ParamKey, Vec<Tensor>>, histogram: BTreeMap<ParamKey, u64>, total: u64) -> ClientUpdate {
    ClientUpdate {
        client_id: id,
        params,
        histogram,
        total_samples: total,
        losses: vec![],
        train_flops: 0,
    }
}

#[test]
fn opa_equals_fedavg_on_full_histograms() {
    let space = space();
    let mut worst: f64 = 0.0;
    for inst in 0..1000u64 {
        let mut rng = rng_from(inst, &[]);
        let net = Supernet::init(space.clone(), &mut rng).unwrap();
        let n = rng.random_range(2..6);
        let updates: Vec<ClientUpdate> = (0..n)
            .map(|id| {
                let total = rng.random_range(1..200);
                let hist = net.params.keys().map(|&k| (k, total)).collect();
                update(id, perturbed(&net, &mut rng), hist, total)
            })
            .collect();
        let (mut a, mut b) = (net.clone(), net);
        opa_aggregate(&mut a, &updates).unwrap();
        fedavg_aggregate(&mut b, &updates).unwrap();
        for (k, ts) in &a.params {
            for (x, y) in ts.iter().zip(&b.params[k]) {
                for (u, v) in x.data().iter().zip(y.data()) {
                    worst = worst.max((u - v).abs());
                }
            }
        }
    }
    assert!(worst <= 1e-12, "max deviation {worst}");
}

#[test]
fn single_client_operators_bitwise_unchanged() {
    let space = space();
    let mut rng = rng_from(9, &[]);
    let net = Supernet::init(space, &mut rng).unwrap();
    let keys: Vec<ParamKey> = net.params.keys().copied().collect();
    let (solo, shared) = (keys[keys.len() / 2], keys[0]);
    let updates: Vec<ClientUpdate> = (0..3)
        .map(|id| {
            let mut hist: BTreeMap<ParamKey, u64> = keys.iter().map(|&k| (k, 0)).collect();
            hist.insert(shared, 10);
            if id == 1 {
                hist.insert(solo, 10);
            }
            update(id, perturbed(&net, &mut rng), hist, 10)
        })
        .collect();
    let mut agg = net.clone();
    opa_aggregate(&mut agg, &updates).unwrap();
    for k in &keys {
        if *k == shared {
            assert_ne!(agg.params[k], net.params[k]);
        } else {
            let before: Vec<u64> = net.params[k].iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect();
            let after: Vec<u64> = agg.params[k].iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect();
            assert_eq!(before, after, "{k:?}");
        }
    }
}

#[test]
fn three_client_worked_example() {
    let space = space();
    let net = Supernet::init(space, &mut rng_from(1, &[])).unwrap();
    let key = *net.params.keys().find(|k| matches!(k, ParamKey::Op { .. }) && !net.params[k].is_empty()).unwrap();
    let updates: Vec<ClientUpdate> = [(2u64, 1.0), (3, 2.0), (5, 4.0)]
        .iter()
        .enumerate()
        .map(|(id, &(n, v))| {
            let params = BTreeMap::from([(key, constant_like(&net.params[&key], v))]);
            update(id, params, BTreeMap::from([(key, n)]), n)
        })
        .collect();
    let mut agg = net.clone();
    opa_aggregate(&mut agg, &updates).unwrap();
    assert!(agg.params[&key].iter().flat_map(|t| t.data()).all(|&v| v == 2.8));
    for (k, ts) in &net.params {
        if *k != key {
            assert_eq!(&agg.params[k], ts);
        }
    }
}

#[test]
fn fedavg_weights_by_sample_count() {
    let space = space();
    let net = Supernet::init(space, &mut rng_from(1, &[])).unwrap();
    let key = ParamKey::Fixed(0);
    let updates: Vec<ClientUpdate> = [(1u64, 0.0), (3, 4.0)]
        .iter()
        .enumerate()
        .map(|(id, &(n, v))| {
            let params = BTreeMap::from([(key, constant_like(&net.params[&key], v))]);
            update(id, params, BTreeMap::new(), n)
        })
        .collect();
    let mut agg = net.clone();
    fedavg_aggregate(&mut agg, &updates).unwrap();
    assert!(agg.params[&key].iter().flat_map(|t| t.data()).all(|&v| v == 3.0));

    // One client with all the data: its values win outright.
    let mut solo = net.clone();
    let only = update(0, perturbed(&net, &mut rng_from(2, &[])), BTreeMap::new(), 50);
    fedavg_aggregate(&mut solo, std::slice::from_ref(&only)).unwrap();
    for (k, ts) in &only.params {
        for (x, y) in ts.iter().zip(&solo.params[k]) {
            assert!(x.data().iter().zip(y.data()).all(|(u, v)| (u - v).abs() <= 1e-12));
        }
    }
}

#[test]
fn histogram_key_mismatch_is_an_error() {
    let space = space();
    let net = Supernet::init(space, &mut rng_from(1, &[])).unwrap();
    let key = ParamKey::Fixed(0);
    let bad = update(7, BTreeMap::new(), BTreeMap::from([(key, 3)]), 3);
    let err = opa_aggregate(&mut net.clone(), &[bad]).unwrap_err();
    assert!(err.to_string().contains("client 7"), "{err}");
}

fn toy_client(id: usize, tier: usize, n: usize, seed: u64) -> ClientData {
    let cfg = SyntheticConfig {
        samples: n.max(4),
        ..SyntheticConfig::default()
    };
    let ds = gen_synthetic(&cfg, &mut rng_from(seed, &[id as u64])).unwrap().dataset;
    let idx: Vec<usize> = (0..n).collect();
    ClientData {
        id,
        tier,
        train: ds.subset(&idx),
        val: ds.subset(&idx),
    }
}

#[test]
fn histograms_conserve_samples_per_layer() {
    let space = space();
    let table = space.cost_table();
    let net = Supernet::init(space.clone(), &mut rng_from(3, &[])).unwrap();
    let full = Subspace::full(&table);
    let local = LocalConfig {
        epochs: 2,
        batch_size: 7,
        ..LocalConfig::default()
    };
    let client = toy_client(0, 0, 30, 1);
    let params = net.checkout(&subspace_keys(&space, &full)).unwrap();
    let u = client_local_train(&space, &table, &full, params, &client, table.max_path_flops() + 1, &local, 0.05, &mut rng_from(4, &[]))
        .unwrap();
    assert_eq!(u.total_samples, 60);
    for (l, layer) in space.layers.iter().enumerate() {
        let s: u64 = (0..layer.candidates.len())
            .map(|c| u.histogram[&ParamKey::Op { layer: l, candidate: c }])
            .sum();
        assert_eq!(s, 60, "layer {l}");
    }
    for i in 0..space.fixed.len() {
        assert_eq!(u.histogram[&ParamKey::Fixed(i)], 60);
    }
    assert!(u.histogram.keys().all(|k| u.params.contains_key(k)));
}

#[test]
fn histograms_uniform_without_binding_budget() {
    let space = space();
    let table = space.cost_table();
    let net = Supernet::init(space.clone(), &mut rng_from(3, &[])).unwrap();
    let full = Subspace::full(&table);
    let keys = subspace_keys(&space, &full);
    let local = LocalConfig {
        epochs: 1,
        batch_size: 1,
        ..LocalConfig::default()
    };
    let client = toy_client(0, 0, 4, 2);
    let mut counts: Vec<Vec<u64>> = space.layers.iter().map(|l| vec![0; l.candidates.len()]).collect();
    for sim in 0..1000u64 {
        let params = net.checkout(&keys).unwrap();
        let u = client_local_train(&space, &table, &full, params, &client, u64::MAX, &local, 0.01, &mut rng_from(sim, &[5]))
            .unwrap();
        for (l, row) in counts.iter_mut().enumerate() {
            for (c, n) in row.iter_mut().enumerate() {
                *n += u.histogram[&ParamKey::Op { layer: l, candidate: c }];
            }
        }
    }
    for row in &counts {
        let e = row.iter().sum::<u64>() as f64 / row.len() as f64;
        for &n in row {
            // 3 sigma of a binomial count
            let p = 1.0 / row.len() as f64;
            let sd = (4000.0 * p * (1.0 - p)).sqrt();
            assert!((n as f64 - e).abs() < 3.0 * sd, "{row:?}");
        }
    }
}

fn round_setup() -> (Supernet, Vec<ClientData>, TierSpec, RoundConfig) {
    let space = space();
    let table = space.cost_table();
    let net = Supernet::init(space, &mut rng_from(3, &[])).unwrap();
    let clients: Vec<ClientData> = (0..6).map(|i| toy_client(i, i % 2, 24, 7)).collect();
    let (lo, hi) = (table.min_path_flops(), table.max_path_flops());
    let tiers = TierSpec::new(lo, vec![(lo + hi) / 2], hi, vec![0.5, 0.5]).unwrap();
    let cfg = RoundConfig {
        k: 4,
        b_comm: comm_budget_from_fraction(&table, 0.5),
        per_client_subspace: false,
        local: LocalConfig::default(),
        lr: 0.05,
        aggregator: Aggregator::Opa,
    };
    (net, clients, tiers, cfg)
}

#[test]
fn rounds_respect_comm_budget_and_thread_count() {
    let (net, clients, tiers, cfg) = round_setup();
    let go = |threads: usize, per_client: bool| {
        with_threads(threads, || {
            let mut n = net.clone();
            let cfg = RoundConfig {
                per_client_subspace: per_client,
                ..cfg
            };
            let reports: Vec<_> = (0..3).map(|t| run_round(&mut n, &clients, &tiers, &cfg, t, 11).unwrap()).collect();
            (n, reports)
        })
        .unwrap()
    };
    for per_client in [false, true] {
        let (a, ra) = go(1, per_client);
        let (b, rb) = go(4, per_client);
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        for r in &ra {
            assert_eq!(r.participants.len(), cfg.k);
            assert!(r.max_subspace_params < cfg.b_comm);
        }
    }
}

#[test]
fn failed_round_leaves_supernet_unchanged() {
    let (net, mut clients, tiers, cfg) = round_setup();
    for c in clients.iter_mut() {
        c.train = c.train.subset(&[]);
    }
    let mut n = net.clone();
    assert!(run_round(&mut n, &clients, &tiers, &cfg, 0, 1).is_err());
    assert_eq!(n, net);
}

#[test]
fn identical_clients_average_to_single_update() {
    let (net, clients, tiers, cfg) = round_setup();
    let twin = |id| ClientData { id, ..clients[0].clone() };
    let cfg = RoundConfig {
        k: 1,
        aggregator: Aggregator::FedAvg,
        ..cfg
    };
    // With k = 1 the round trains one client; FedAvg of one update is
    // that update. Two identical updates average to the same values.
    let mut single = net.clone();
    run_round(&mut single, &[twin(0)], &tiers, &cfg, 0, 5).unwrap();
    let table = net.space.cost_table();
    let sub = Subspace::full(&table);
    let params = net.checkout(&subspace_keys(&net.space, &sub)).unwrap();
    let u = client_local_train(&net.space, &table, &sub, params, &twin(0), tiers.budget(0), &cfg.local, cfg.lr, &mut rng_from(1, &[]))
        .unwrap();
    let mut two = net.clone();
    let mut u2 = u.clone();
    u2.client_id = 1;
    fedavg_aggregate(&mut two, &[u.clone(), u2]).unwrap();
    let mut one = net.clone();
    fedavg_aggregate(&mut one, &[u]).unwrap();
    assert_eq!(one, two);
    assert_ne!(single, net);
}
