use crate::gradnet::{Real, Tape, Tensor, Var};
use crate::noiselab::TransitionMatrix;

/// Probability floor inside the forward-corrected log.
pub const CORRECTION_FLOOR: f64 = 1e-12;

/// Per-row smoothed CE: `(1 − ε)·ce(target) + ε/N · Σ_c ce(c)`, shape `[B]`.
pub fn smoothed_ce_rows<T: Real>(tape: &mut Tape<T>, logits: Var, targets: &[usize], epsilon: f64) -> Var {
    let n = tape.value(logits).shape()[1];
    let ls = tape.log_softmax(logits);
    let picked = tape.pick(ls, targets);
    let all = tape.sum_rows(ls);
    let a = tape.scale(picked, T::of(-(1.0 - epsilon)));
    let b = tape.scale(all, T::of(-epsilon / n as f64));
    tape.add(a, b)
}

/// Per-row forward-corrected CE `−log Σ_j C[j][k] p_j`, shape `[B]`, plus
/// the number of rows whose composed probability hit the floor.
pub fn forward_corrected_rows<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[usize],
    c: &TransitionMatrix,
) -> (Var, usize) {
    let n = c.n();
    let p = tape.softmax(logits);
    let cm = tape.constant(Tensor::new(vec![n, n], c.as_slice().iter().map(|&v| T::of(v)).collect()).unwrap());
    let q = tape.matmul(p, cm);
    let picked = tape.pick(q, targets);
    let floor = T::of(CORRECTION_FLOOR);
    let clamped = tape.value(picked).data().iter().filter(|&&v| v < floor).count();
    let safe = tape.clamp_min(picked, floor);
    let logq = tape.log(safe);
    (tape.scale(logq, -T::one()), clamped)
}

/// Per-row `Σ_c |softmax_c − onehot_c|`, shape `[B]`.
pub fn mae_rows<T: Real>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Var {
    let (b, n) = {
        let s = tape.value(logits).shape();
        (s[0], s[1])
    };
    let mut onehot = vec![T::zero(); b * n];
    for (i, &k) in targets.iter().enumerate() {
        onehot[i * n + k] = T::one();
    }
    let y = tape.constant(Tensor::new(vec![b, n], onehot).unwrap());
    let p = tape.softmax(logits);
    let d = tape.sub(p, y);
    let a = tape.abs(d);
    tape.sum_rows(a)
}

/// Per-row generalized CE `(1 − p_k^q)/q`, shape `[B]`.
pub fn gce_rows<T: Real>(tape: &mut Tape<T>, logits: Var, targets: &[usize], q: f64) -> Var {
    let p = tape.softmax(logits);
    let pk = tape.pick(p, targets);
    let pk = tape.clamp_min(pk, T::of(CORRECTION_FLOOR));
    let pq = tape.powf(pk, T::of(q));
    let neg = tape.scale(pq, T::of(-1.0 / q));
    tape.add_scalar(neg, T::of(1.0 / q))
}

/// One term of the divide-and-conquer objective: a per-set loss summed over
/// a minibatch of `batch` rows drawn from a set of `set_size` samples.
#[derive(Clone, Copy, Debug)]
pub struct SetTerm {
    pub sum: Var,
    pub batch: usize,
    pub set_size: usize,
}

/// `Σ_s (|D_s| / b_s)·L_s / Σ_s |D_s|`. With full-set batches this is the
/// plain sum of the three set losses over the pool size. Empty sets drop out.
pub fn phase2_loss<T: Real>(tape: &mut Tape<T>, terms: &[SetTerm]) -> Var {
    let total: usize = terms.iter().filter(|t| t.batch > 0).map(|t| t.set_size).sum();
    let mut acc: Option<Var> = None;
    for t in terms.iter().filter(|t| t.batch > 0 && t.set_size > 0) {
        let w = t.set_size as f64 / t.batch as f64 / total as f64;
        let s = tape.scale(t.sum, T::of(w));
        acc = Some(match acc {
            Some(a) => tape.add(a, s),
            None => s,
        });
    }
    acc.unwrap_or_else(|| tape.constant(Tensor::scalar(T::zero())))
}
