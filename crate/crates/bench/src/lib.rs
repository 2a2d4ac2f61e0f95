//! Fixtures shared by the benchmarks: models with nonzero weights at a
//! chosen sequence length.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use flowar_core::{ArModel, Flow, StudentFlow, TrainConfig};

pub struct Fixture {
    pub cfg: TrainConfig,
    pub flow: Flow<f32>,
    pub student: StudentFlow<f32>,
    pub ar: ArModel<f32>,
}

/// Default architecture on `size x size` RGB images with 4x4 patches, so
/// the sequence has `(size / 4)^2` tokens.
pub fn fixture(size: usize) -> Fixture {
    let mut cfg = TrainConfig::default();
    cfg.image_size = size;
    cfg.validate().expect("valid bench config");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut flow = Flow::new(cfg.flow_config().unwrap(), &mut rng).unwrap();
    // Small nonzero heads so inversion does real arithmetic.
    for (i, v) in flow.store_mut().values_mut().iter_mut().enumerate() {
        for (j, x) in v.data_mut().iter_mut().enumerate() {
            *x += 1e-3 * (((i * 31 + j * 17) % 13) as f32 - 6.0);
        }
    }
    let student = StudentFlow::from_teacher(&flow);
    let ar = ArModel::new(cfg.ar_config().unwrap(), &mut rng).unwrap();
    Fixture { cfg, flow, student, ar }
}
