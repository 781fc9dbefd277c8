use rand::Rng as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Rng;

/// I.i.d. samples from `U[-sqrt(3 / fan_in), +sqrt(3 / fan_in)]`, i.e.
/// zero mean and variance `1 / fan_in`.
pub fn xavier_init(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(Error::InvalidArgument("fan_in must be at least 1".into()));
    }
    let bound = (3.0 / fan_in as f64).sqrt() as f32;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data)
}
