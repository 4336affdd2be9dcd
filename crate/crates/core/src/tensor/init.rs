use super::{Scalar, Tensor};
use crate::rng::Rng;

/// Glorot-uniform initialisation.
///
/// Matrices `[fan_in, fan_out]` use their two dims; convolution kernels
/// `[kh, kw, c_in, c_out]` scale both fans by the receptive field.
pub fn glorot_uniform<T: Scalar>(shape: &[usize], rng: &mut Rng) -> Tensor<T> {
    let (fan_in, fan_out) = match shape {
        [i, o] => (*i, *o),
        [kh, kw, i, o] => (kh * kw * i, kh * kw * o),
        _ => {
            let n: usize = shape.iter().product();
            (n, n)
        }
    };
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy((2.0 * rng.next_f64() - 1.0) * limit))
}
