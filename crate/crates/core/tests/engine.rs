//! Data-parallel engine: gradient-average equivalence against single-tower
//! training, weighted loss reporting, replica synchronization, and the
//! no-torn-read guarantee.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};

use akid::blocks::{
    ConvConfig, ConvolutionLayer, InnerProductLayer, IpConfig, LossConfig,
    SoftmaxWithLossLayer,
};
use akid::brain::{Brain, InputRef, SYSTEM_IN};
use akid::engine::{split_batch, Engine, EngineConfig};
use akid::kongfu::{KongFu, LrScheme};
use akid::{Pcg32, Tensor};

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// conv → ip → loss: deterministic in inference and training (no dropout,
/// no batch-norm), so towers and a single pass must agree.
fn small_brain(init_seed: u64) -> Brain<f64> {
    let mut brain = Brain::new("net");
    let conv_cfg: ConvConfig =
        serde_json::from_value(serde_json::json!({"ksize": [3, 3], "out_channel_num": 4}))
            .unwrap();
    brain
        .attach(Box::new(ConvolutionLayer::new("conv", &conv_cfg).unwrap()), None)
        .unwrap();
    let ip_cfg: IpConfig =
        serde_json::from_value(serde_json::json!({"out_channel_num": 5})).unwrap();
    brain
        .attach(Box::new(InnerProductLayer::new("ip", &ip_cfg).unwrap()), None)
        .unwrap();
    brain
        .attach(
            Box::new(SoftmaxWithLossLayer::new("loss", &LossConfig { class_num: 5 }).unwrap()),
            Some(vec![
                InputRef::new("ip", vec![0]),
                InputRef::new(SYSTEM_IN, vec![1]),
            ]),
        )
        .unwrap();
    let mut rng = Pcg32::new(init_seed, 0);
    let x = Tensor::zeros(vec![2, 6, 6, 1]);
    let y = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
    brain.setup(&[x, y], &mut rng).unwrap();
    brain
}

fn batch(b: usize, data_seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = Pcg32::new(data_seed, 99);
    let x = Tensor::rand_uniform(vec![b, 6, 6, 1], 1.0, &mut rng);
    let labels: Vec<f64> = (0..b).map(|i| (i % 5) as f64).collect();
    (x, Tensor::new(vec![b], labels).unwrap())
}

fn engine_of(towers: usize, master: &Brain<f64>) -> Engine<f64> {
    let config = EngineConfig {
        name: "data_parallel".into(),
        num_towers: Some(towers),
    };
    Engine::new(&config, master, 7).unwrap()
}

fn train(towers: usize, steps: usize, b: usize) -> BTreeMap<String, Tensor<f64>> {
    let master = small_brain(11);
    let mut engine = engine_of(towers, &master);
    let mut opt = KongFu::new(0.9, LrScheme::Constant { lr: 0.05 }).unwrap();
    for step in 0..steps {
        let (x, y) = batch(b, step as u64);
        engine.step(&master, &mut opt, &x, &y, step as u64).unwrap();
    }
    master
        .param_map()
        .into_iter()
        .map(|(name, p)| (name, p.value()))
        .collect()
}

#[test]
fn tower_counts_agree_within_tolerance() {
    for b in [8, 10, 12] {
        let reference = train(1, 4, b);
        for k in [2, 3] {
            let parallel = train(k, 4, b);
            for (name, want) in &reference {
                let got = &parallel[name];
                for (w, g) in want.data().iter().zip(got.data()) {
                    assert!(
                        rel_err(*w, *g) < 1e-6,
                        "B={b} k={k}: {name} diverged ({w} vs {g})"
                    );
                }
            }
        }
    }
}

#[test]
fn reported_loss_is_the_full_batch_loss() {
    let master = small_brain(3);
    let probe = master.clone_replica().unwrap();
    let mut engine = engine_of(3, &master);
    let mut opt = KongFu::new(0.0, LrScheme::Constant { lr: 0.01 }).unwrap();
    let (x, y) = batch(10, 42);
    // Full-batch loss with the pre-step parameters, computed independently.
    let mut probe = probe;
    let expected = probe
        .forward_backward(&[x.clone(), y.clone()], Pcg32::new(0, 0))
        .unwrap();
    let outcome = engine.step(&master, &mut opt, &x, &y, 0).unwrap();
    assert!(
        rel_err(outcome.loss, expected.loss) < 1e-9,
        "weighted tower loss {} vs full-batch {}",
        outcome.loss,
        expected.loss
    );
    assert!(rel_err(outcome.total_loss, expected.total_loss) < 1e-9);
}

#[test]
fn towers_match_master_after_every_step() {
    let master = small_brain(5);
    let mut engine = engine_of(2, &master);
    let mut opt = KongFu::new(0.9, LrScheme::Constant { lr: 0.1 }).unwrap();
    for step in 0..3 {
        let (x, y) = batch(6, step);
        engine.step(&master, &mut opt, &x, &y, step).unwrap();
        for tower in engine.towers() {
            for param in master.params() {
                let replica = tower.param_map()[param.name()].value();
                assert_eq!(replica.data(), param.value().data(), "{}", param.name());
            }
        }
    }
}

#[test]
fn mutating_master_after_sync_leaves_towers_alone() {
    let master = small_brain(6);
    let mut engine = engine_of(2, &master);
    engine.sync_replicas(&master).unwrap();
    let watched = &master.params()[0];
    let before = engine.towers()[0].param_map()[watched.name()].value();
    watched.update_with(|t| t.data_mut()[0] += 100.0);
    let after = engine.towers()[0].param_map()[watched.name()].value();
    assert_eq!(before.data(), after.data(), "tower changed without a sync");
    engine.sync_replicas(&master).unwrap();
    let resynced = engine.towers()[0].param_map()[watched.name()].value();
    assert_eq!(resynced.data()[0], before.data()[0] + 100.0);
}

#[test]
fn single_engine_behaves_like_one_tower() {
    let config = EngineConfig::default();
    let master = small_brain(8);
    let mut engine = Engine::new(&config, &master, 7).unwrap();
    assert_eq!(engine.num_towers(), 1);
    let mut opt = KongFu::new(0.0, LrScheme::Constant { lr: 0.05 }).unwrap();
    let (x, y) = batch(4, 1);
    let outcome = engine.step(&master, &mut opt, &x, &y, 0).unwrap();
    assert!(outcome.loss.is_finite());
    assert!(outcome.eval.is_some());
}

#[test]
fn labels_split_with_their_examples() {
    let (x, y) = batch(10, 2);
    let parts = split_batch(&x, &y, 3).unwrap();
    let mut offset = 0;
    for (data, labels) in &parts {
        let size = data.shape()[0];
        let per_example = data.len() / size;
        for i in 0..size {
            let global = offset + i;
            assert_eq!(labels.data()[i], (global % 5) as f64);
            assert_eq!(
                data.data()[i * per_example],
                x.data()[global * per_example],
                "example {global} not contiguous with its label"
            );
        }
        offset += size;
    }
}

#[test]
fn readers_never_observe_a_torn_parameter() {
    // A watcher thread hammers one master parameter with atomic
    // (value, generation) snapshots while the engine trains. Every observed
    // generation must map to exactly the value the coordinator recorded for
    // that generation — a mixed (torn) state would break the pairing.
    let master = small_brain(13);
    let watched = master.params()[0].clone();
    let mut ledger: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    let (value, generation) = watched.value_and_generation();
    ledger.insert(generation, value.data().to_vec());

    let stop = AtomicBool::new(false);
    let observations = std::thread::scope(|scope| {
        let watcher_param = watched.clone();
        let stop_flag = &stop;
        let watcher = scope.spawn(move || {
            let mut seen = Vec::new();
            while !stop_flag.load(Ordering::Relaxed) {
                let (value, generation) = watcher_param.value_and_generation();
                seen.push((generation, value.data().to_vec()));
            }
            seen
        });

        let mut engine = engine_of(2, &master);
        let mut opt = KongFu::new(0.9, LrScheme::Constant { lr: 0.1 }).unwrap();
        for step in 0..20 {
            let (x, y) = batch(6, step);
            engine.step(&master, &mut opt, &x, &y, step).unwrap();
            let (value, generation) = watched.value_and_generation();
            ledger.insert(generation, value.data().to_vec());
        }
        stop.store(true, Ordering::Relaxed);
        watcher.join().unwrap()
    });

    assert!(!observations.is_empty());
    for (generation, value) in observations {
        let expected = ledger
            .get(&generation)
            .unwrap_or_else(|| panic!("reader saw unrecorded generation {generation}"));
        assert_eq!(&value, expected, "torn read at generation {generation}");
    }
}
