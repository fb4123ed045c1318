//! Fourier-feature positional encoding.
//!
//! Layout for an input `v ∈ Rᵏ` and `L` levels: for each frequency `2^f`,
//! `f = 0..L` ascending, the `k` sines `sin(2^f v)` followed by the `k`
//! cosines `cos(2^f v)`. The output has `2·L·k` components and no identity
//! term. Checkpoints depend on this order.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};

/// Default number of frequency levels for positions.
pub const POSITION_LEVELS: usize = 10;
/// Default number of frequency levels for view directions.
pub const DIRECTION_LEVELS: usize = 4;

pub fn encoded_dim(input_dim: usize, levels: usize) -> usize {
    2 * levels * input_dim
}

pub fn positional_encode(v: &[f64], levels: usize) -> Result<Vec<f64>> {
    if levels == 0 {
        return Err(Error::validation("positional encoding needs at least one level"));
    }
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::validation(format!("positional encoding input must be finite, got {bad}")));
    }
    let mut out = Vec::with_capacity(encoded_dim(v.len(), levels));
    for level in 0..levels {
        let freq = (1u64 << level) as f64;
        out.extend(v.iter().map(|x| (freq * x).sin()));
        out.extend(v.iter().map(|x| (freq * x).cos()));
    }
    Ok(out)
}

/// Batched form over the last dimension of `input` (`[..., k]` → `[..., 2·L·k]`),
/// with the same layout as [`positional_encode`].
pub fn positional_encode_tensor(input: &Tensor, levels: usize) -> Result<Tensor> {
    if levels == 0 {
        return Err(Error::validation("positional encoding needs at least one level"));
    }
    let mut parts = Vec::with_capacity(2 * levels);
    for level in 0..levels {
        let scaled = (input * (1u64 << level) as f64)?;
        parts.push(scaled.sin()?);
        parts.push(scaled.cos()?);
    }
    Ok(Tensor::cat(&parts, D::Minus1)?)
}
