//! The student side: partition the untrusted pool by teacher confidence,
//! estimate the noise channel from trusted data, and train with one loss per
//! partition. [`train_tshn`] runs both phases end to end.

mod glc;
mod losses;
mod train;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

pub use glc::glc_from_predictions;
pub use losses::{
    forward_corrected_rows, gce_rows, mae_rows, phase2_loss, smoothed_ce_rows, SetTerm, CORRECTION_FLOOR,
};
pub(crate) use train::{fit_supervised, write_checkpoint};
pub use train::{
    accuracy, estimate_glc, infer_all, run_student, stack_records, train_probe, train_tshn, ArchPreset, GlcProbe,
    MetricsRecord, MetricsSink, TrainConfig, TrainWarnings, TrainingData, TshnOutcome,
};

use crate::error::{Error, Result};
use crate::gradnet::loss::cross_entropy_rows;
use crate::gradnet::{Tape, Tensor};
use crate::noiselab::TransitionMatrix;
use crate::protomind::ConfidenceState;

/// Trusted, purified and residual ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub d_t: Vec<u64>,
    pub d_p: Vec<u64>,
    pub d_u: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub epsilon: f64,
    pub delta: f64,
    /// Fixed channel for the residual set; estimated from trusted data when absent.
    #[serde(skip)]
    pub transition: Option<TransitionMatrix>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { epsilon: 0.5, delta: 0.5, transition: None }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidArgument(format!("smoothing {} must be in (0, 1)", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidArgument(format!("threshold {} must be in (0, 1)", self.delta)));
        }
        if let Some(c) = &self.transition {
            if !c.is_row_stochastic() {
                return Err(Error::InvalidArgument("transition matrix is not row-stochastic".into()));
            }
        }
        Ok(())
    }
}

/// `d_p` holds untrusted ids with confidence above `delta`, `d_u` the rest.
pub fn partition(untrusted_ids: &[u64], state: &ConfidenceState, delta: f64, trusted_ids: &[u64]) -> Result<Partition> {
    let mut out = Partition { d_t: trusted_ids.to_vec(), ..Default::default() };
    for &id in untrusted_ids {
        if state.confidence(id)? > delta {
            out.d_p.push(id);
        } else {
            out.d_u.push(id);
        }
    }
    Ok(out)
}

/// Fraction of `ids` whose observed label equals the true label.
pub fn clean_fraction(ids: &[u64], true_label: impl Fn(u64) -> usize, observed: impl Fn(u64) -> usize) -> Option<f64> {
    if ids.is_empty() {
        return None;
    }
    let ok = ids.iter().filter(|&&id| true_label(id) == observed(id)).count();
    Some(ok as f64 / ids.len() as f64)
}

/// Disjointness and cover check against the untrusted pool.
pub fn check_partition(p: &Partition, untrusted_ids: &[u64]) -> bool {
    let dp: HashSet<u64> = p.d_p.iter().copied().collect();
    let du: HashSet<u64> = p.d_u.iter().copied().collect();
    let dt: HashSet<u64> = p.d_t.iter().copied().collect();
    let pool: HashSet<u64> = untrusted_ids.iter().copied().collect();
    dp.is_disjoint(&du) && dt.is_disjoint(&dp) && dt.is_disjoint(&du) && dp.union(&du).copied().collect::<HashSet<_>>() == pool
}

fn eval_rows(logits: &[f64], f: impl FnOnce(&mut Tape<f64>, crate::gradnet::Var) -> crate::gradnet::Var) -> f64 {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::new(vec![1, logits.len()], logits.to_vec()).unwrap());
    let v = f(&mut tape, l);
    tape.value(v).data()[0]
}

/// Scalar cross-entropy of one logit row.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    eval_rows(logits, |t, l| cross_entropy_rows(t, l, &[target]))
}

/// Scalar label-smoothed CE of one logit row.
pub fn smoothed_ce(logits: &[f64], target: usize, epsilon: f64) -> f64 {
    eval_rows(logits, |t, l| smoothed_ce_rows(t, l, &[target], epsilon))
}

/// Scalar forward-corrected CE of one logit row.
pub fn forward_corrected_ce(logits: &[f64], observed: usize, c: &TransitionMatrix) -> f64 {
    eval_rows(logits, |t, l| forward_corrected_rows(t, l, &[observed], c).0)
}
