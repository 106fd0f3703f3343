use crate::error::{Error, Result};
use crate::noiselab::TransitionMatrix;

/// Gold loss correction estimate from a noisily trained model's predictions
/// on trusted samples: row `i` is the mean predicted distribution over the
/// trusted samples of true class `i`, renormalized.
///
/// Classes without any trusted sample get an identity row; their indices are
/// returned alongside the matrix.
pub fn glc_from_predictions(
    probs: &[Vec<f64>],
    true_labels: &[usize],
    n_classes: usize,
) -> Result<(TransitionMatrix, Vec<usize>)> {
    if probs.len() != true_labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", probs.len(), true_labels.len())));
    }
    let mut rows = vec![vec![0.0; n_classes]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (p, &y) in probs.iter().zip(true_labels) {
        if p.len() != n_classes || y >= n_classes {
            return Err(Error::Shape(format!("prediction of width {} or label {y} for {n_classes} classes", p.len())));
        }
        rows[y].iter_mut().zip(p).for_each(|(r, v)| *r += v);
        counts[y] += 1;
    }
    let mut missing = Vec::new();
    for (i, row) in rows.iter_mut().enumerate() {
        let s: f64 = row.iter().sum();
        if counts[i] == 0 || s <= 0.0 || !s.is_finite() {
            missing.push(i);
            row.iter_mut().enumerate().for_each(|(j, v)| *v = if i == j { 1.0 } else { 0.0 });
        } else {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    Ok((TransitionMatrix::from_rows(rows)?, missing))
}
