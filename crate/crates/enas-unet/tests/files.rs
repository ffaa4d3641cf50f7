use std::collections::BTreeMap;
use std::path::Path;

use enas_unet::checkpoint::{load_controller, load_network, save_controller, save_network};
use enas_unet::core::controller::{Controller, ControllerConfig};
use enas_unet::core::datagen::{generate, GenConfig, SplitSpec};
use enas_unet::core::search::{init_model, Architecture};
use enas_unet::core::search_space::{BlockDesign, SearchSpaceSpec};
use enas_unet::core::supernet::{Network, SupernetSpec};
use enas_unet::core::{rng, Tensor};
use enas_unet::{dataset, dten};
use rand::Rng;

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn small_gen(rank: usize) -> GenConfig {
    GenConfig {
        seed: 4,
        rank,
        depth: 16,
        width: 16,
        split: SplitSpec {
            n_train: 3,
            n_reward: 2,
            n_val: 1,
            n_test: 2,
        },
        ..GenConfig::default()
    }
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn dten_round_trips_bit_exactly() {
    let mut r = rng::stream(1, "test");
    for ndim in 0..5 {
        let shape: Vec<usize> = (0..ndim).map(|_| r.random_range(1..5)).collect();
        let n = shape.iter().product();
        let mut data: Vec<f32> = (0..n).map(|_| f32::from_bits(r.random())).collect();
        data[0] = -0.0;
        let t = Tensor::new(shape, data).unwrap();
        let back = dten::decode(&dten::encode(&t)).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(bits(&back), bits(&t));
    }
}

#[test]
fn network_checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SupernetSpec {
        n_stages: 2,
        base_channels: 4,
        ..SupernetSpec::default()
    };
    let sup = Network::supernet(spec.with_rank(2), 3).unwrap();
    save_network(&dir.path().join("sup"), &sup, None, serde_json::Value::Null).unwrap();
    let (back, m) = load_network(&dir.path().join("sup")).unwrap();
    assert_eq!(m.params.len(), sup.store.len());
    for (a, b) in sup.store.entries().iter().zip(back.store.entries()) {
        assert_eq!((&a.name, a.kind), (&b.name, b.kind));
        assert_eq!(bits(&a.value), bits(&b.value));
    }

    let design = BlockDesign::Shared(SearchSpaceSpec::default().enumerate()[2024].clone());
    for arch in [Architecture::Searched(design), Architecture::BaselineResnet] {
        let mut net = init_model(spec, &arch, 8).unwrap();
        // values that differ from a fresh init, so loading must overwrite
        for id in net.store.ids().collect::<Vec<_>>() {
            net.store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = *v * 1.5 + 0.25);
        }
        let p = dir.path().join("model");
        save_network(&p, &net, Some(&arch), serde_json::json!({"note": 1})).unwrap();
        let (back, m) = load_network(&p).unwrap();
        assert_eq!(back, net);
        assert_eq!(m.architecture.as_ref(), Some(&arch));
        assert_eq!(m.provenance["note"], 1);
        std::fs::remove_dir_all(&p).unwrap();
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m");
    let spec = SupernetSpec {
        n_stages: 2,
        base_channels: 4,
        ..SupernetSpec::default()
    };
    let net = init_model(spec, &Architecture::BaselineResnet, 1).unwrap();
    save_network(&p, &net, Some(&Architecture::BaselineResnet), serde_json::Value::Null).unwrap();

    let victim = p.join("head.weight.dten");
    let good = std::fs::read(&victim).unwrap();
    std::fs::write(&victim, &good[..good.len() - 2]).unwrap();
    assert!(load_network(&p).is_err());
    // well-formed file of the wrong shape
    dten::write(&victim, &Tensor::zeros(&[1, 2, 3])).unwrap();
    assert!(load_network(&p).is_err());
    std::fs::write(&victim, &good).unwrap();
    assert!(load_network(&p).is_ok());

    std::fs::remove_file(p.join("stem.bias.dten")).unwrap();
    assert!(load_network(&p).is_err());
    assert!(load_network(dir.path()).is_err());
}

#[test]
fn controller_checkpoint_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut ctrl = Controller::<f32>::new(SearchSpaceSpec::default(), ControllerConfig::default(), 5).unwrap();
    let mut r = rng::stream(5, "test");
    for _ in 0..10 {
        let s = ctrl.sample(&mut r);
        let reward = if s.genome().cells[0].subcells[0].op.id() == 1 { 1.0 } else { 0.2 };
        ctrl.reinforce_step(&[(s, reward)]).unwrap();
    }
    save_controller(dir.path(), &ctrl, 5, serde_json::Value::Null).unwrap();
    let (back, _) = load_controller(dir.path()).unwrap();
    assert_eq!(back.store(), ctrl.store());
    assert_eq!(back.baseline().to_bits(), ctrl.baseline().to_bits());
    assert_eq!(back.argmax_genome(), ctrl.argmax_genome());
}

#[test]
fn dataset_directories_round_trip_and_reproduce_bytes() {
    for rank in [1, 2] {
        let cfg = small_gen(rank);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let (m, data) = dataset::generate_to(a.path(), &cfg).unwrap();
        assert_eq!(data, generate(&cfg).unwrap());
        let per = if rank == 1 { 16 } else { 1 };
        assert_eq!(m.counts, [3 * per, 2 * per, per, 2 * per]);
        let (m2, back) = dataset::load(a.path()).unwrap();
        assert_eq!((m2, back), (m, data));
        dataset::generate_to(b.path(), &cfg).unwrap();
        assert_eq!(tree(a.path()), tree(b.path()));
    }
}

#[test]
fn rank_1_volumes_are_columns_of_the_rank_2_scans() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let (_, one) = dataset::generate_to(d1.path(), &small_gen(1)).unwrap();
    let (_, two) = dataset::generate_to(d2.path(), &small_gen(2)).unwrap();
    assert_eq!(two.to_rank1().unwrap(), one);
    let (_, meta) = dataset::read_volume(&d1.path().join("val").join("00005")).unwrap();
    assert_eq!((meta.scan, meta.column), (5, Some(5)));
}
