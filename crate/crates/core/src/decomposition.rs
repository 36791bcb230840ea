//! Trend/seasonality split of an embedding sequence by a centred moving average.

use crate::error::{bail, Result};
use crate::numerics::{moving_average, Tape, Tensor, Var};

/// `n×d` sequence of frame embeddings, one row per time step.
pub type EmbeddingSequence = Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionResult {
    /// Long-range component: the moving average of the input.
    pub trend: EmbeddingSequence,
    /// Short-range residual: input minus trend.
    pub seasonality: EmbeddingSequence,
    pub window: usize,
}

/// Splits `z` into `trend = MA_k(z)` and `seasonality = z - trend`.
pub fn decompose(z: &EmbeddingSequence, k: usize) -> Result<DecompositionResult> {
    let (n, _) = z.dims2()?;
    if n == 0 {
        bail!(Input, "empty sequence");
    }
    let trend = moving_average(z, k)?;
    let seasonality = z.sub(&trend)?;
    Ok(DecompositionResult {
        trend,
        seasonality,
        window: k,
    })
}

/// Tape version returning `(trend, seasonality)`.
pub fn decompose_on_tape(tape: &mut Tape, z: Var, k: usize) -> Result<(Var, Var)> {
    let trend = tape.moving_average(z, k)?;
    let seasonality = tape.sub(z, trend)?;
    Ok((trend, seasonality))
}
