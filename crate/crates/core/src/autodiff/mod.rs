//! A small dense-array engine with reverse-mode differentiation, limited to
//! the operators the segmentation network uses.

mod adam;
mod conv;
mod init;
mod loss;
mod pool;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use conv::{
    conv2d_backward, conv2d_forward, conv_out_dim, transposed_conv2d_backward, transposed_conv2d_forward,
    ConvGrads, ConvSpec,
};
pub use init::he_normal;
pub use loss::{softmax, softmax_cross_entropy, CrossEntropy};
pub use pool::{maxpool2d_backward, maxpool2d_forward, PoolSpec, Pooled};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor4};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("operation produces an empty output: {0}")]
    EmptyOutput(String),
    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[cfg(test)]
pub(crate) mod gradcheck {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn rel_err(a: f64, b: f64) -> f64 {
        let d = (a - b).abs();
        if d == 0.0 {
            0.0
        } else {
            d / a.abs().max(b.abs()).max(1e-6)
        }
    }

    /// Worst relative error between `analytic` and central differences of
    /// `f` over `probes` random coordinates of `x`.
    pub fn probe(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], probes: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = x.to_vec();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..probes {
            let i = rng.random_range(0..x.len());
            let orig = xs[i];
            xs[i] = orig + h;
            let up = f(&xs);
            xs[i] = orig - h;
            let down = f(&xs);
            xs[i] = orig;
            worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * h)));
        }
        worst
    }

    pub fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }
}
