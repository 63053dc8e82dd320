use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

use super::Mode;

/// Per-sample multipliers for stochastic depth: each sample is kept with
/// probability `1 - rate` and scaled by `1 / (1 - rate)`, otherwise zeroed.
/// Returns `None` when the op is the identity (eval mode or `rate == 0`),
/// in which case no randomness is consumed.
pub fn drop_path_mask<T: Element>(batch: usize, rate: f64, mode: Mode, rng: &mut Rng) -> Result<Option<Vec<T>>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Contract(format!("drop-path rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(None);
    }
    let keep = 1.0 - rate;
    let scale = T::from_f64(1.0 / keep);
    Ok(Some((0..batch).map(|_| if rng.bernoulli(keep) { scale } else { T::zero() }).collect()))
}

pub fn apply_sample_scale<T: Element>(x: &Tensor<T>, scale: &[T]) -> Tensor<T> {
    let per_sample = x.len() / x.dims()[0].max(1);
    let mut data = x.data().to_vec();
    if per_sample > 0 {
        for (chunk, &k) in data.chunks_mut(per_sample).zip(scale) {
            chunk.iter_mut().for_each(|v| *v = *v * k);
        }
    }
    Tensor::from_parts(x.shape(), data)
}

pub fn drop_path<T: Element>(x: &Tensor<T>, rate: f64, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
    Ok(match drop_path_mask(x.dims()[0], rate, mode, rng)? {
        None => x.clone(),
        Some(mask) => apply_sample_scale(x, &mask),
    })
}
