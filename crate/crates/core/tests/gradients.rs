//! Reverse-mode gradients of the training losses against central finite
//! differences, in f64 on tiny networks.

use calid::nn::Dims;
use common::{elbo_fd, generative_loss_fd};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;

#[test]
fn generative_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for dims in [Dims::Planar, Dims::Volumetric] {
        let worst = generative_loss_fd(dims, 12, &mut rng);
        assert!(worst < 1e-3, "{dims:?}: relative error {worst}");
    }
}

#[test]
fn elbo_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for dims in [Dims::Planar, Dims::Volumetric] {
        let worst = elbo_fd(dims, 12, &mut rng);
        assert!(worst < 1e-3, "{dims:?}: relative error {worst}");
    }
}
