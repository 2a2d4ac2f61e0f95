use crate::error::{Error, Result};

/// `ln Σ exp(v)`, max-shifted so it never overflows for finite input.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("logsumexp of an empty slice"));
    }
    Ok(crate::graph::lse(values))
}

/// Normalizes log-weights in place so that `Σ exp(v) = 1`.
pub fn log_softmax_in_place(values: &mut [f64]) -> Result<()> {
    let z = logsumexp(values)?;
    for v in values.iter_mut() {
        *v -= z;
    }
    Ok(())
}

/// Draws an index from the categorical distribution with the given
/// normalized log-probabilities using one uniform variate.
pub fn sample_categorical(log_probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver above the cumulative sum; take the last
    // index with non-zero mass.
    log_probs
        .iter()
        .rposition(|&lp| lp > f64::NEG_INFINITY)
        .unwrap_or(log_probs.len() - 1)
}
