//! Fixtures shared by the criterion benches.

use multipath::multipath::{MultiPathParams, SublayerKind};
use multipath::{MultiPathConfig, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One registered multi-path sublayer and an input batch for it.
pub struct SublayerFixture {
    pub store: ParamStore,
    pub params: MultiPathParams,
    pub config: MultiPathConfig,
    pub input: Tensor,
    pub lengths: Vec<usize>,
}

impl SublayerFixture {
    /// `batch` sequences of `seq_len` positions at width `d`, four heads.
    pub fn new(kind: SublayerKind, n_paths: usize, d: usize, seq_len: usize, batch: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut config = MultiPathConfig::full(n_paths);
        config.use_more_features = false;
        let mut store = ParamStore::new();
        let params =
            MultiPathParams::register(&mut store, "bench", kind, d, 4, &config, 1e-5, &mut rng).expect("valid fixture");
        let rows = seq_len * batch;
        let data = (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        SublayerFixture {
            store,
            params,
            config,
            input: Tensor::new(vec![rows, d], data).expect("shape matches"),
            lengths: vec![seq_len; batch],
        }
    }
}
