use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Glorot-uniform draw: `U(-a, a)` with `a = gain * sqrt(6 / (fan_in + fan_out))`.
///
/// For a 2-D shape `[fan_in, fan_out]`; a 1-D shape uses its length for both
/// fans; higher ranks fold the leading axes into `fan_in`.
pub fn init_uniform(shape: &[usize], gain: f64, rng: &mut Rng) -> Result<Tensor> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "init_uniform needs positive dimensions".into(),
        });
    }
    let (fan_in, fan_out) = match shape {
        [n] => (*n, *n),
        _ => {
            let out = *shape.last().unwrap();
            (shape.iter().product::<usize>() / out, out)
        }
    };
    let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel = shape.iter().product();
    let values = (0..numel).map(|_| rng.uniform(-bound, bound)).collect();
    Ok(Tensor::new(shape.to_vec(), values)?.trainable())
}
