//! Shared fixtures for the criterion benches.

use bicr_core::baseline::{Embedder, EmbedderConfig};
use bicr_core::bict::{BiCTNetwork, BictConfig, Direction};
use bicr_core::gallery::GalleryStore;
use bicr_core::numkernel::{Matrix, Mode, Rng};

pub const RAW_DIM: usize = 48;
pub const DIM: usize = 32;

/// Deep embedder, an eval-mode forward transfer network, `n` raw rows and a
/// gallery holding their embeddings.
pub struct Fixture {
    pub embedder: Embedder,
    pub transfer: BiCTNetwork,
    pub raw: Matrix,
    pub store: GalleryStore,
}

impl Fixture {
    pub fn new(n: usize, seed: u64) -> Self {
        let root = Rng::new(seed);
        let embedder = Embedder::new(&EmbedderConfig::deep(RAW_DIM, DIM), &mut root.split_named("embedder"));
        let mut transfer = BiCTNetwork::new(
            &BictConfig { dim: DIM, ..BictConfig::default() },
            Direction::Forward,
            1,
            2,
            &mut root.split_named("transfer"),
        );
        transfer.set_mode(Mode::Eval);
        let raw = root.split_named("raw").normal_matrix(n, RAW_DIM, 1.0);
        let mut store = GalleryStore::new(DIM, 1).expect("positive width");
        let z = embedder.forward(&raw).expect("shapes match");
        store.append_features(&z, &vec![0; n], 1).expect("fresh store");
        Self {
            embedder,
            transfer,
            raw,
            store,
        }
    }
}
