//! Bounded cross-entropy and zero-one error.

use crate::ndcore::{NdError, Tensor, Var};

/// `ln(1 / p_min)`, the clipping level of the bounded cross-entropy.
pub fn clip_level(p_min: f64) -> f64 {
    -p_min.ln()
}

/// Mean over rows of `min(-log p_true, ln(1/p_min)) / ln(1/p_min)`.
pub fn bounded_ce_loss(log_probs: &Tensor, labels: &[usize], p_min: f64) -> Result<f64, NdError> {
    let picked = log_probs.pick_rows(labels)?;
    let cap = clip_level(p_min);
    let total: f64 = picked.data().iter().map(|&lp| (-lp).clamp(0.0, cap) / cap).sum();
    Ok(total / labels.len() as f64)
}

/// Tape version of [`bounded_ce_loss`].
pub fn bounded_ce_loss_var<'t>(log_probs: Var<'t>, labels: &[usize], p_min: f64) -> Result<Var<'t>, NdError> {
    let cap = clip_level(p_min);
    Ok(log_probs.pick(labels)?.scale(-1.0).clamp(0.0, cap).scale(1.0 / cap).mean())
}

/// Fraction of rows whose arg-max differs from the label. Ties go to the
/// lowest class index.
pub fn zero_one_error(log_probs: &Tensor, labels: &[usize]) -> Result<f64, NdError> {
    if log_probs.shape().len() != 2 || log_probs.rows() != labels.len() {
        return Err(NdError::Shape {
            op: "zero_one_error",
            left: log_probs.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let c = log_probs.cols();
    let wrong = log_probs
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) != label)
        .count();
    Ok(wrong as f64 / labels.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
