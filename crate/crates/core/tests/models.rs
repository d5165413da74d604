use bicr_core::baseline::{train_stage_embedder, BaselineConfig, Embedder, EmbedderConfig};
use bicr_core::bict::{BiCTNetwork, BictConfig, Direction};
use bicr_core::evaltheory::{evaluate_stage, QuerySet};
use bicr_core::gallery::GalleryStore;
use bicr_core::lifelong::{compute_epsilon, EpsilonScale};
use bicr_core::numkernel::{ParamSet, Rng};
use bicr_core::synthdata::{make_stream, StageData, StreamConfig};

fn stage_map(model: &Embedder, data: &StageData) -> f64 {
    let mut store = GalleryStore::new(model.dim(), 1).unwrap();
    store.append_features(&model.forward(&data.gallery.x).unwrap(), &data.gallery.y, 1).unwrap();
    let qs = [QuerySet {
        dataset: data.stage,
        data: &data.query,
    }];
    evaluate_stage(model, &store, &qs, 1).unwrap().datasets[0].map
}

fn trained_on(data: &StageData, init: &Embedder, epochs: usize, seed: u64) -> Embedder {
    let mut m = init.clone();
    train_stage_embedder(&mut m, &data.train, &BaselineConfig::default(), epochs, &mut Rng::new(seed)).unwrap();
    m
}

#[test]
fn transfer_network_is_small_next_to_deep_backbone() {
    let bict = BiCTNetwork::new(&BictConfig::default(), Direction::Forward, 1, 2, &mut Rng::new(0));
    let deep = Embedder::new(&EmbedderConfig::deep(48, 32), &mut Rng::new(0));
    let small = Embedder::new(&EmbedderConfig::default(), &mut Rng::new(0));
    let ratio = bict.num_params() as f64 / deep.num_params() as f64;
    println!(
        "transfer {} params: {:.1}% of deep ({}), {:.1}% of default ({})",
        bict.num_params(),
        100.0 * ratio,
        deep.num_params(),
        100.0 * bict.num_params() as f64 / small.num_params() as f64,
        small.num_params()
    );
    assert!(ratio < 0.05);
}

#[test]
fn stage_training_improves_own_stage_map() {
    let cfg = StreamConfig::default();
    for seed in 0..2 {
        let stream = make_stream(&cfg, &Rng::new(seed)).unwrap();
        let init = Embedder::new(&EmbedderConfig::default(), &mut Rng::new(seed + 100));
        let trained = trained_on(&stream[0], &init, BaselineConfig::default().epochs_first, seed);
        let (before, after) = (stage_map(&init, &stream[0]), stage_map(&trained, &stream[0]));
        println!("seed {seed}: mAP {before:.4} -> {after:.4}");
        assert!(after - before >= 0.05);
    }
}

#[test]
fn later_domains_are_harder_for_an_old_model() {
    let cfg = StreamConfig {
        stages: 2,
        ..StreamConfig::default()
    };
    let mut drops = Vec::new();
    for seed in 0..3 {
        let stream = make_stream(&cfg, &Rng::new(seed)).unwrap();
        let init = Embedder::new(&EmbedderConfig::default(), &mut Rng::new(seed + 100));
        let m = trained_on(&stream[0], &init, BaselineConfig::default().epochs_first, seed);
        drops.push(stage_map(&m, &stream[0]) - stage_map(&m, &stream[1]));
    }
    let mean = drops.iter().sum::<f64>() / drops.len() as f64;
    println!("cross-domain mAP drop per seed {drops:?}, mean {mean:.4}");
    assert!(mean > 0.0);
}

#[test]
fn fused_parameters_lie_between_endpoints() {
    let cfg = EmbedderConfig::default();
    let old = Embedder::new(&cfg, &mut Rng::new(1));
    let new = Embedder::new(&cfg, &mut Rng::new(2));
    for eps in [0.0, 0.13, 0.5, 0.87, 1.0] {
        let fused = Embedder::fuse(&old, &new, eps).unwrap();
        for ((f, a), b) in fused.params().iter().zip(old.params()).zip(new.params()) {
            for ((&v, &x), &y) in f.value.data().iter().zip(a.value.data()).zip(b.value.data()) {
                assert!(v >= x.min(y) && v <= x.max(y), "eps {eps}: {v} outside [{x}, {y}]");
            }
        }
    }
}

#[test]
fn knowledge_change_grows_with_severity() {
    let severities = [0.25, 1.0, 2.0];
    let mut means = Vec::new();
    for &severity in &severities {
        let cfg = StreamConfig {
            stages: 2,
            severity,
            ..StreamConfig::default()
        };
        let mut total = 0.0;
        for seed in 0..5 {
            let stream = make_stream(&cfg, &Rng::new(seed)).unwrap();
            let init = Embedder::new(&EmbedderConfig::default(), &mut Rng::new(seed + 100));
            let old = trained_on(&stream[0], &init, 20, seed);
            let new = trained_on(&stream[1], &old, 15, seed + 1);
            total += compute_epsilon(Some(&old), &new, &stream[1].train.x, 64, EpsilonScale::Clamp)
                .unwrap()
                .raw;
        }
        means.push(total / 5.0);
    }
    println!("mean raw epsilon by severity {severities:?}: {means:?}");
    assert!(means.windows(2).all(|w| w[0] < w[1]));
}
