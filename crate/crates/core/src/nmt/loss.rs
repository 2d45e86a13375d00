//! Cross-entropy objectives over next-token distributions.
//!
//! The weighted loss is `-sum_t w_t * log p(y_t)`: positions whose reference
//! token belongs to a constraint carry weight `alpha >= 1`, ordinary tokens
//! weight 1, padding weight 0. With all-ones weights it reduces to the
//! standard cross-entropy.

use ndarray::Array2;

use super::{NmtError, Real};

/// Probabilities below this floor are clamped inside the log so the loss
/// stays finite.
pub const PROB_FLOOR: f64 = 1e-12;

fn check_shapes<F: Real>(
    distributions: &Array2<F>,
    target_ids: &[u32],
    weights: Option<&[F]>,
) -> Result<(), NmtError> {
    if distributions.nrows() != target_ids.len() {
        return Err(NmtError::ShapeMismatch(format!(
            "{} distributions for {} targets",
            distributions.nrows(),
            target_ids.len()
        )));
    }
    if let Some(w) = weights {
        if w.len() != target_ids.len() {
            return Err(NmtError::ShapeMismatch(format!(
                "{} weights for {} targets",
                w.len(),
                target_ids.len()
            )));
        }
        if w.iter().any(|&x| x < F::zero()) {
            return Err(NmtError::InvalidConfig("loss weights must be >= 0".into()));
        }
    }
    for &id in target_ids {
        if id as usize >= distributions.ncols() {
            return Err(NmtError::IdOutOfRange {
                id,
                vocab_size: distributions.ncols(),
            });
        }
    }
    Ok(())
}

/// Weighted cross-entropy over per-position probability distributions:
/// `-sum_t w_t * log p_t(y_t)`. Zero-weight positions contribute nothing,
/// including their (possibly degenerate) distributions.
pub fn wce_loss<F: Real>(
    distributions: &Array2<F>,
    target_ids: &[u32],
    weights: &[F],
) -> Result<F, NmtError> {
    check_shapes(distributions, target_ids, Some(weights))?;
    let floor = F::from_f64(PROB_FLOOR);
    let mut loss = F::zero();
    for (t, (&id, &w)) in target_ids.iter().zip(weights).enumerate() {
        if w == F::zero() {
            continue;
        }
        let p = distributions[[t, id as usize]].max(floor);
        loss -= w * p.ln();
    }
    Ok(loss)
}

/// Unweighted cross-entropy `-sum_t log p_t(y_t)`, kept as an independent
/// implementation of the textbook objective.
pub fn cross_entropy<F: Real>(
    distributions: &Array2<F>,
    target_ids: &[u32],
) -> Result<F, NmtError> {
    check_shapes(distributions, target_ids, None)?;
    let floor = F::from_f64(PROB_FLOOR);
    let mut loss = F::zero();
    for (t, &id) in target_ids.iter().enumerate() {
        loss -= distributions[[t, id as usize]].max(floor).ln();
    }
    Ok(loss)
}

/// Fused log-softmax weighted cross-entropy on raw logits. Returns the loss
/// and its gradient with respect to the logits, `w * (softmax - onehot)` per
/// row. Numerically stable for any finite logits.
pub fn wce_from_logits<F: Real>(
    logits: &Array2<F>,
    target_ids: &[u32],
    weights: &[F],
) -> Result<(F, Array2<F>), NmtError> {
    check_shapes(logits, target_ids, Some(weights))?;
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let mut loss = F::zero();
    for (t, (&id, &w)) in target_ids.iter().zip(weights).enumerate() {
        if w == F::zero() {
            continue; // padded position: no loss, zero gradient row
        }
        let row = logits.row(t);
        let mut max = F::from_f64(f64::NEG_INFINITY);
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = F::zero();
        for &v in row.iter() {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        loss += w * (lse - row[id as usize]);
        let mut drow = dlogits.row_mut(t);
        for (c, &v) in row.iter().enumerate() {
            drow[c] = w * (v - lse).exp();
        }
        drow[id as usize] -= w;
    }
    Ok((loss, dlogits))
}
