//! Seeded fixtures shared by the benches.

use orat_core::rng::seeded;
use orat_core::{Dataset, LossVector, Mlp, Tensor};
use rand::Rng;

/// `n` cross-entropy-like losses in `[0, 5)`.
pub fn losses(n: usize, seed: u64) -> LossVector {
    let mut rng = seeded(seed);
    LossVector::new((0..n).map(|_| 5.0 * rng.gen::<f64>()).collect()).unwrap()
}

/// An MNIST-shaped batch: `n` rows of 784 pixels in `[0, 1]`, 10 classes.
pub fn mnist_batch(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = seeded(seed);
    let x = Tensor::matrix(n, 784, (0..n * 784).map(|_| rng.gen::<f64>()).collect()).unwrap();
    (x, (0..n).map(|_| rng.gen_range(0..10)).collect())
}

/// The desk-scale 784-128-10 network.
pub fn mnist_mlp(seed: u64) -> Mlp {
    Mlp::init(&[784, 128, 10], &mut seeded(seed)).unwrap()
}

pub fn mnist_like_dataset(n: usize, seed: u64) -> Dataset {
    let (x, y) = mnist_batch(n, seed);
    Dataset::new(x, y, 10).unwrap()
}
