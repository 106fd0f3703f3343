//! The prototype teacher.
//!
//! Episodes are sampled from the trusted pool (plus a batch of untrusted
//! samples). Class prototypes are means of support features, refreshed with
//! an exponential moving average every few episodes once a warmup has passed.
//! Each untrusted sample gets a soft label from its cosine similarity to the
//! prototypes, and a persistent confidence that tracks how much that soft
//! label agrees with its observed label. Samples whose confidence clears the
//! threshold join the classification loss, weighted by their confidence.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradnet::loss::{cosine_similarity, cross_entropy_rows};
use crate::gradnet::{Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSpec {
    /// J: classes per episode (clipped to the classes present in the trusted pool).
    pub ways: usize,
    /// I: support samples per class.
    pub shots: usize,
    /// H: trusted query samples per class.
    pub query: usize,
    /// W: untrusted query samples per episode.
    pub untrusted: usize,
}

impl Default for EpisodeSpec {
    /// 11-way 5-shot, H = 15, W = 64.
    fn default() -> Self {
        Self { ways: 11, shots: 5, query: 15, untrusted: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EpisodeWarning {
    ShotsReduced { class: usize, shots: usize },
}

/// Indices into the trusted and untrusted pools.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Episode {
    pub support: Vec<usize>,
    pub trusted_query: Vec<usize>,
    pub untrusted_query: Vec<usize>,
    pub warnings: Vec<EpisodeWarning>,
}

/// Draw one episode.
///
/// When a class has fewer than `shots + query` trusted samples, it keeps
/// `min(shots, n - 1)` (at least one) for support and puts the rest in the
/// query, with a warning if support ended up below `shots`.
pub fn sample_episode<R: Rng + ?Sized>(
    trusted_labels: &[usize],
    n_untrusted: usize,
    spec: &EpisodeSpec,
    rng: &mut R,
) -> Result<Episode> {
    if spec.ways < 2 {
        return Err(Error::NeedTwoClasses);
    }
    if spec.shots == 0 || spec.query == 0 {
        return Err(Error::InvalidArgument("episode needs at least one shot and one query".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in trusted_labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::NeedTwoClasses);
    }
    let mut classes: Vec<usize> = by_class.keys().copied().collect();
    classes.shuffle(rng);
    classes.truncate(spec.ways);
    classes.sort_unstable();

    let mut ep = Episode::default();
    for c in classes {
        let mut members = by_class[&c].clone();
        members.shuffle(rng);
        let n = members.len();
        let (s, q) = if n >= spec.shots + spec.query {
            (spec.shots, spec.query)
        } else {
            let s = spec.shots.min(n.saturating_sub(1)).max(1);
            (s, (n - s).min(spec.query))
        };
        if s < spec.shots {
            ep.warnings.push(EpisodeWarning::ShotsReduced { class: c, shots: s });
        }
        ep.support.extend_from_slice(&members[..s]);
        ep.trusted_query.extend_from_slice(&members[s..s + q]);
    }
    let w = spec.untrusted.min(n_untrusted);
    ep.untrusted_query = index::sample(rng, n_untrusted, w).into_vec();
    Ok(ep)
}

/// Per-class mean of the given feature vectors.
pub fn compute_prototypes(features_by_class: &BTreeMap<usize, Vec<Vec<f64>>>) -> Result<Vec<(usize, Vec<f64>)>> {
    features_by_class
        .iter()
        .map(|(&c, feats)| {
            let first = feats.first().ok_or(Error::MissingClass(c))?;
            let mut mean = vec![0.0; first.len()];
            for f in feats {
                if f.len() != mean.len() {
                    return Err(Error::Shape(format!("class {c} features have mixed dimensions")));
                }
                mean.iter_mut().zip(f).for_each(|(m, v)| *m += v);
            }
            let k = feats.len() as f64;
            mean.iter_mut().for_each(|m| *m /= k);
            Ok((c, mean))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    protos: Vec<Option<Vec<f64>>>,
    pub xi: f64,
    pub update_interval: usize,
    pub warmup_episodes: usize,
}

impl PrototypeBank {
    pub fn new(n_classes: usize, xi: f64, update_interval: usize, warmup_episodes: usize) -> Result<Self> {
        if !(xi > 0.0 && xi <= 1.0) || update_interval == 0 {
            return Err(Error::InvalidArgument("prototype step must be in (0, 1] and interval >= 1".into()));
        }
        Ok(Self { protos: vec![None; n_classes], xi, update_interval, warmup_episodes })
    }

    pub fn n_classes(&self) -> usize {
        self.protos.len()
    }

    /// Whether prototypes should be refreshed after episode `episode` (0-based).
    pub fn due(&self, episode: usize) -> bool {
        episode >= self.warmup_episodes && (episode - self.warmup_episodes) % self.update_interval == 0
    }

    pub fn is_ready(&self) -> bool {
        self.protos.iter().any(Option::is_some)
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.protos.get(class).and_then(|p| p.as_deref())
    }

    /// `P ← ξ·P_new + (1 − ξ)·P`; a class seen for the first time takes `P_new` directly.
    pub fn ema_update(&mut self, new_protos: &[(usize, Vec<f64>)]) -> Result<()> {
        for (c, new) in new_protos {
            let slot = self.protos.get_mut(*c).ok_or(Error::MissingClass(*c))?;
            match slot {
                None => *slot = Some(new.clone()),
                Some(old) => {
                    if old.len() != new.len() {
                        return Err(Error::Shape(format!("prototype {c}: {} vs {}", old.len(), new.len())));
                    }
                    old.iter_mut().zip(new).for_each(|(o, n)| *o = self.xi * n + (1.0 - self.xi) * *o);
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// `dist = −cos`: the soft label is a softmax over cosine similarities.
    #[default]
    NegCosine,
    /// `dist = 1 − cos`; differs from `NegCosine` only by a constant shift.
    OneMinusCosine,
}

/// Metric for soft labels: `p_c ∝ exp(−scale · dist(f, P_c))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Similarity {
    pub distance: Distance,
    pub scale: f64,
}

impl Default for Similarity {
    fn default() -> Self {
        Self { distance: Distance::NegCosine, scale: 1.0 }
    }
}

/// Probability vector over classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftLabel {
    pub p: Vec<f64>,
}

impl SoftLabel {
    pub fn argmax(&self) -> usize {
        self.p.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0
    }
}

/// Soft label of `feature` against the bank. Classes without a prototype get
/// probability zero; a zero prototype counts as cosine 0.
pub fn soft_label(feature: &[f64], bank: &PrototypeBank, sim: &Similarity) -> Result<SoftLabel> {
    if !bank.is_ready() {
        return Err(Error::NotWarmedUp);
    }
    if feature.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateVector);
    }
    let mut logits = vec![f64::NEG_INFINITY; bank.n_classes()];
    for (c, slot) in logits.iter_mut().enumerate() {
        if let Some(p) = bank.get(c) {
            let cos = match cosine_similarity(feature, p) {
                Ok(v) => v,
                Err(Error::DegenerateVector) => 0.0,
                Err(e) => return Err(e),
            };
            let dist = match sim.distance {
                Distance::NegCosine => -cos,
                Distance::OneMinusCosine => 1.0 - cos,
            };
            *slot = -sim.scale * dist;
        }
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| if l.is_finite() { (l - m).exp() } else { 0.0 }).collect();
    let s: f64 = e.iter().sum();
    Ok(SoftLabel { p: e.into_iter().map(|v| v / s).collect() })
}

/// Persistent per-sample label confidence for the untrusted pool.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceState {
    ids: Vec<u64>,
    index: HashMap<u64, usize>,
    c: Vec<f64>,
    last_argmax: Vec<Option<usize>>,
    pub mu: f64,
    pub delta: f64,
}

impl ConfidenceState {
    /// Every sample starts at confidence 0.
    pub fn new(ids: &[u64], mu: f64, delta: f64) -> Result<Self> {
        if !(mu > 0.0 && mu < 1.0) || !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidArgument("confidence step and threshold must be in (0, 1)".into()));
        }
        let index = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect::<HashMap<_, _>>();
        if index.len() != ids.len() {
            return Err(Error::InvalidArgument("duplicate sample id".into()));
        }
        Ok(Self { ids: ids.to_vec(), index, c: vec![0.0; ids.len()], last_argmax: vec![None; ids.len()], mu, delta })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn confidence(&self, id: u64) -> Result<f64> {
        self.index.get(&id).map(|&i| self.c[i]).ok_or(Error::UnknownSample(id))
    }

    pub fn values(&self) -> &[f64] {
        &self.c
    }

    pub fn set(&mut self, id: u64, c: f64) -> Result<()> {
        let i = *self.index.get(&id).ok_or(Error::UnknownSample(id))?;
        self.c[i] = c.clamp(0.0, 1.0);
        Ok(())
    }

    /// `c ← μ·c + (1 − μ)·pᵀy` with `y` the one-hot observed label.
    pub fn update(&mut self, id: u64, soft: &SoftLabel, observed: usize) -> Result<f64> {
        let i = *self.index.get(&id).ok_or(Error::UnknownSample(id))?;
        let agree = *soft.p.get(observed).ok_or_else(|| Error::InvalidArgument(format!("label {observed} out of range")))?;
        let c = (self.mu * self.c[i] + (1.0 - self.mu) * agree).clamp(0.0, 1.0);
        self.c[i] = c;
        self.last_argmax[i] = Some(soft.argmax());
        Ok(c)
    }

    /// Mask weight `η = c` if `c > δ`, else 0.
    pub fn mask_weight(&self, id: u64) -> Result<f64> {
        self.confidence(id).map(|c| mask(c, self.delta))
    }

    /// `η_i` for every tracked sample, in registration order.
    pub fn mask_weights(&self) -> Vec<f64> {
        self.c.iter().map(|&c| mask(c, self.delta)).collect()
    }

    /// Number of samples with a nonzero mask weight.
    pub fn retained(&self) -> usize {
        self.c.iter().filter(|&&c| c > self.delta).count()
    }

    /// CSV `id,confidence,soft_label_argmax` (argmax empty until first update).
    pub fn write_snapshot_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["id", "confidence", "soft_label_argmax"])?;
        for i in 0..self.ids.len() {
            out.write_record([
                self.ids[i].to_string(),
                format!("{:.6}", self.c[i]),
                self.last_argmax[i].map(|a| a.to_string()).unwrap_or_default(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn mask(c: f64, delta: f64) -> f64 {
    if c > delta {
        c
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TeacherLosses {
    /// Summed CE over trusted support and query.
    pub trusted: Var,
    /// Mask-weighted CE sum over the untrusted query.
    pub untrusted: Var,
    /// `(L_t + L_ur) / (U + V + W′)`.
    pub total: Var,
    pub retained: usize,
}

/// Teacher classification loss for one episode.
///
/// `L_t` and `L_ur` are raw sums; the single normalization is by the number
/// of trusted samples plus the number of untrusted samples with a nonzero mask.
pub fn teacher_losses<T: Real>(
    tape: &mut Tape<T>,
    trusted_logits: Var,
    trusted_labels: &[usize],
    untrusted: Option<(Var, &[usize], &[f64])>,
) -> TeacherLosses {
    let ce_t = cross_entropy_rows(tape, trusted_logits, trusted_labels);
    let l_t = tape.sum(ce_t);
    let (l_ur, retained) = match untrusted {
        Some((logits, labels, weights)) if !labels.is_empty() => {
            let ce_u = cross_entropy_rows(tape, logits, labels);
            let w = tape.mul_const(ce_u, weights.iter().map(|&v| T::of(v)).collect());
            (tape.sum(w), weights.iter().filter(|&&v| v != 0.0).count())
        }
        _ => (tape.constant(crate::gradnet::Tensor::scalar(T::zero())), 0),
    };
    let both = tape.add(l_t, l_ur);
    let total = tape.scale(both, T::of(1.0 / (trusted_labels.len() + retained) as f64));
    TeacherLosses { trusted: l_t, untrusted: l_ur, total, retained }
}
