use crate::SegNetError;

/// Polynomial decay `lr0 · (1 − t/T)^exponent` for `0 <= t <= T`.
pub fn poly_lr(t: usize, total: usize, lr0: f64, exponent: f64) -> Result<f64, SegNetError> {
    if t > total || total == 0 {
        return Err(SegNetError::EpochOutOfRange { epoch: t, total });
    }
    Ok(lr0 * (1.0 - t as f64 / total as f64).powf(exponent))
}
