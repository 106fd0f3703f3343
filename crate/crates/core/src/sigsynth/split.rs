use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::SignalRecord;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    /// 6:2:2
    fn default() -> Self {
        Self { train: 0.6, val: 0.2, test: 0.2 }
    }
}

impl SplitRatios {
    fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("split ratios {parts:?} must be non-negative and sum to 1")));
        }
        Ok(())
    }
}

/// How the trusted subset is carved out of the training portion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrustedSelection {
    /// `floor(fraction · n_train)` per (class, SNR) stratum.
    Fraction(f64),
    /// Exactly `k` per class, spread round-robin over the class's SNR strata.
    PerClass(usize),
}

impl Default for TrustedSelection {
    fn default() -> Self {
        TrustedSelection::Fraction(0.01)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub trusted: Vec<SignalRecord>,
    pub untrusted: Vec<SignalRecord>,
    pub val: Vec<SignalRecord>,
    pub test: Vec<SignalRecord>,
}

impl Splits {
    pub fn train_len(&self) -> usize {
        self.trusted.len() + self.untrusted.len()
    }
}

/// Stratified split by (class, SNR). Each stratum is shuffled, then cut into
/// `round(n·train)`, `round(n·val)` and the remainder for test; the trusted
/// set is drawn from the training portion only.
pub fn split_dataset(
    records: &[SignalRecord],
    class_names: &[String],
    ratios: SplitRatios,
    trusted: TrustedSelection,
    seed: u64,
) -> Result<Splits> {
    ratios.validate()?;
    if let TrustedSelection::Fraction(f) = trusted {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::InvalidArgument(format!("trusted fraction {f} must be in (0, 1]")));
        }
    }
    let mut strata: BTreeMap<(u16, i16), Vec<&SignalRecord>> = BTreeMap::new();
    for r in records {
        strata.entry((r.label, r.snr_db)).or_default().push(r);
    }
    let mut rng = rng::child(seed, rng::stream::SPLIT);
    let mut out = Splits::default();
    // per class: list of per-stratum shuffled training records
    let mut train_by_class: BTreeMap<u16, Vec<Vec<&SignalRecord>>> = BTreeMap::new();
    for ((label, _), mut members) in strata {
        members.shuffle(&mut rng);
        let n = members.len();
        let n_train = ((n as f64 * ratios.train).round() as usize).min(n);
        let n_val = ((n as f64 * ratios.val).round() as usize).min(n - n_train);
        let (train, rest) = members.split_at(n_train);
        let (val, test) = rest.split_at(n_val);
        out.val.extend(val.iter().map(|&r| r.clone()));
        out.test.extend(test.iter().map(|&r| r.clone()));
        train_by_class.entry(label).or_default().push(train.to_vec());
    }

    let mut short = Vec::new();
    for (label, strata) in &train_by_class {
        let picked: Vec<(usize, usize)> = match trusted {
            TrustedSelection::Fraction(f) => strata
                .iter()
                .enumerate()
                .flat_map(|(s, recs)| {
                    let k = ((recs.len() as f64 * f) + 1e-9).floor() as usize;
                    (0..k.min(recs.len())).map(move |i| (s, i))
                })
                .collect(),
            TrustedSelection::PerClass(k) => {
                let mut picked = Vec::with_capacity(k);
                let mut depth = 0;
                while picked.len() < k && strata.iter().any(|r| r.len() > depth) {
                    for (s, recs) in strata.iter().enumerate() {
                        if picked.len() < k && depth < recs.len() {
                            picked.push((s, depth));
                        }
                    }
                    depth += 1;
                }
                if picked.len() < k {
                    short.push(usize::from(*label));
                }
                picked
            }
        };
        if picked.is_empty() {
            short.push(usize::from(*label));
        }
        for (s, recs) in strata.iter().enumerate() {
            for (i, r) in recs.iter().enumerate() {
                if picked.contains(&(s, i)) {
                    out.trusted.push((*r).clone());
                } else {
                    out.untrusted.push((*r).clone());
                }
            }
        }
    }
    // classes with no training records at all are short too
    for label in 0..class_names.len() {
        if !train_by_class.contains_key(&(label as u16)) && ratios.train > 0.0 {
            short.push(label);
        }
    }
    if !short.is_empty() && ratios.train > 0.0 {
        short.sort_unstable();
        short.dedup();
        return Err(Error::InsufficientTrusted {
            classes: short.into_iter().map(|l| class_names.get(l).cloned().unwrap_or_else(|| l.to_string())).collect(),
        });
    }
    Ok(out)
}
