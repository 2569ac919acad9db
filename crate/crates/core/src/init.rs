//! Weight initialization: truncated normal with fan-in scaling, zero biases.

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;

/// Draw from N(0, std^2) truncated at two standard deviations.
pub fn truncated_normal<E: Scalar, R: Rng + ?Sized>(rng: &mut R, std: E) -> E {
    let two = E::from_f64(2.0);
    loop {
        let x = E::std_normal(rng);
        if x.abs() <= two {
            return x * std;
        }
    }
}

/// Truncated-normal tensor with std = sqrt(scale / fan_in).
pub fn fan_in_tensor<E: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    shape: Vec<usize>,
    fan_in: usize,
    scale: f64,
) -> Tensor<E> {
    let std = E::from_f64((scale / fan_in as f64).sqrt());
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| truncated_normal(rng, std)).collect();
    Tensor::new(shape, data).expect("init shape")
}
