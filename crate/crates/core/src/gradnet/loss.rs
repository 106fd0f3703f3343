//! Building blocks shared by every loss in the crate.

use super::{Real, Tape, Var};
use crate::error::{Error, Result};

/// Per-row cross-entropy `-log softmax(logits)[target]`, shape `[B]`.
pub fn cross_entropy_rows<T: Real>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Var {
    let ls = tape.log_softmax(logits);
    let picked = tape.pick(ls, targets);
    tape.scale(picked, -T::one())
}

/// Summed cross-entropy over the batch.
pub fn cross_entropy_sum<T: Real>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Var {
    let rows = cross_entropy_rows(tape, logits, targets);
    tape.sum(rows)
}

pub fn cross_entropy_mean<T: Real>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Var {
    let s = cross_entropy_sum(tape, logits, targets);
    tape.scale(s, T::of(1.0 / targets.len().max(1) as f64))
}

/// Pairwise cosine similarities of the rows of `a: [B, F]` and `b: [K, F]`, shape `[B, K]`.
pub fn cosine_rows<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Var {
    let an = tape.normalize_rows(a);
    let bn = tape.normalize_rows(b);
    tape.matmul_bt(an, bn)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector);
    }
    let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    Ok(c.clamp(-1.0, 1.0))
}

/// Numerically stable softmax of a slice.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_edge_cases() {
        assert!((cosine_similarity(&[0.3, -2.0, 1.0], &[0.3, -2.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::DegenerateVector)));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax(&[1000.0, 999.0, -5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[0] > p[1] && p[1] > p[2]);
    }
}
