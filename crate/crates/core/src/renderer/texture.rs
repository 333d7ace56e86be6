use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::grid::Grid;

/// The two random scatterer fields: brightness noise `t0 ~ N(0, 1)` and
/// density draw `t1 ~ U[0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterTextures {
    pub t0: Grid,
    pub t1: Grid,
}

impl ScatterTextures {
    pub fn generate(height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = height * width;
        let t0 = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let t1 = (0..n).map(|_| rng.random::<f64>()).collect();
        Self {
            t0: Grid::new(height, width, t0),
            t1: Grid::new(height, width, t1),
        }
    }
}
