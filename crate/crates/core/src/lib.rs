//! Learned iterative refinement of coarse pixelwise classification maps.
//!
//! A coarse classifier (or a synthetic degrader standing in for one) produces
//! fuzzy per-class heat maps. A recurrent enhancer repeatedly convolves each
//! heat map and the input image with learned filter banks, feeds the
//! responses through a per-class perceptron and adds the predicted update to
//! the heat map. Hand-designed diffusion processes (heat flow, edge-stopped
//! diffusion, tensor-driven diffusion, geodesic active contours) are provided
//! as baselines.

pub mod autodiff;
pub mod coarse;
pub mod enhancer;
pub mod error;
pub mod experiments;
mod gemm;
pub mod maps;
pub mod metrics;
pub mod netpbm;
pub mod ops;
pub mod pde;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use maps::{LabelMap, ScoreStack};
pub use tensor::{GridShape, Tensor};

/// Seedable generator used everywhere randomness is needed (ChaCha with 8
/// rounds, seeded from a `u64`).
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
