//! Parameter initializers. He initialization is the default (the usual
//! reading of "improved Xavier" for ReLU networks); plain Xavier is available
//! behind a config switch.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{AutodiffError, Scalar, Tensor};

fn normal_init<T: Scalar>(shape: &[usize], std: f64, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::from_f64(z * std)
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

fn fan_in(shape: &[usize]) -> usize {
    // kernel layout kH x kW x Cin x Cout: fan-in is everything but Cout
    shape[..shape.len() - 1].iter().product::<usize>().max(1)
}

/// Normal(0, sqrt(2 / fan_in)); draws are in f64 so f32 and f64 engines see
/// the same values up to rounding.
pub fn he_init<T: Scalar>(shape: &[usize], seed: u64) -> Result<Tensor<T>, AutodiffError> {
    if shape.is_empty() {
        return Err(AutodiffError::EmptyShape);
    }
    let std = (2.0 / fan_in(shape) as f64).sqrt();
    Ok(normal_init(shape, std, seed))
}

/// Normal(0, sqrt(2 / (fan_in + fan_out))).
pub fn xavier_init<T: Scalar>(shape: &[usize], seed: u64) -> Result<Tensor<T>, AutodiffError> {
    if shape.is_empty() {
        return Err(AutodiffError::EmptyShape);
    }
    let fan_out = *shape.last().unwrap();
    let std = (2.0 / (fan_in(shape) + fan_out) as f64).sqrt();
    Ok(normal_init(shape, std, seed))
}

/// Zero tensor, used for biases and batch-norm beta.
pub fn zeros<T: Scalar>(shape: &[usize]) -> Result<Tensor<T>, AutodiffError> {
    if shape.is_empty() {
        return Err(AutodiffError::EmptyShape);
    }
    Ok(Tensor::zeros(shape.to_vec()))
}
