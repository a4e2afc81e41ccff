use crate::error::{NnError, Result};

/// Transformer-style sinusoidal embedding of a scalar step.
///
/// Component `j` is `sin(t / 10000^(j/d))` for even `j` and
/// `cos(t / 10000^((j-1)/d))` for odd `j`.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(NnError::EmbeddingDim(dim));
    }
    let d = dim as f64;
    Ok((0..dim)
        .map(|j| {
            let even = j - j % 2;
            let arg = t / 10000f64.powf(even as f64 / d);
            if j % 2 == 0 {
                arg.sin()
            } else {
                arg.cos()
            }
        })
        .collect())
}
