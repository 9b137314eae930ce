//! Gradient magnitude used to balance two losses against each other.

use crate::error::{Result, TensorError};
use crate::real::Real;

/// Mean absolute value over all elements of the given gradient pieces,
/// treated as one flattened tensor.
pub fn grad_scale<F: Real>(pieces: &[&[F]]) -> Result<f64> {
    let n: usize = pieces.iter().map(|p| p.len()).sum();
    if n == 0 {
        return Err(TensorError::EmptyGradient);
    }
    let total: f64 = pieces.iter().flat_map(|p| p.iter()).map(|g| g.as_f64().abs()).sum();
    Ok(total / n as f64)
}

/// Average of per-mini-batch scales.
pub fn mean_scale(per_batch: &[f64]) -> Result<f64> {
    if per_batch.is_empty() {
        return Err(TensorError::EmptyGradient);
    }
    Ok(per_batch.iter().sum::<f64>() / per_batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_of_absolute_values() {
        let g = [1.0f32, -3.0, 2.0, -2.0];
        assert_eq!(grad_scale(&[&g[..]]).unwrap(), 2.0);
        assert_eq!(grad_scale(&[&g[..2], &g[2..]]).unwrap(), 2.0);
        assert_eq!(grad_scale(&[&[0.0f32; 5][..]]).unwrap(), 0.0);
    }

    #[test]
    fn averages_batches() {
        assert_eq!(mean_scale(&[1.0, 3.0]).unwrap(), 2.0);
    }

    #[test]
    fn empty_is_an_error() {
        assert_eq!(grad_scale::<f32>(&[]), Err(TensorError::EmptyGradient));
        assert_eq!(mean_scale(&[]), Err(TensorError::EmptyGradient));
    }
}
