//! Multi-view signal augmentation: cut a record into segments at random
//! boundaries, shuffle the segments and splice them back together. I and Q
//! rows share the same cuts and permutation; label and SNR tag carry over.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::sigsynth::{Provenance, SignalRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MvsConfig {
    pub n_segments: usize,
    pub views_per_sample: usize,
    pub min_segment_len: usize,
    /// Draw the segment count uniformly from `2..=n_segments` for each view.
    pub resample_segments: bool,
    pub seed: u64,
}

impl Default for MvsConfig {
    fn default() -> Self {
        Self { n_segments: 4, views_per_sample: 20, min_segment_len: 8, resample_segments: false, seed: 0 }
    }
}

impl MvsConfig {
    pub fn validate(&self, len: usize) -> Result<()> {
        if self.n_segments == 0 || self.min_segment_len == 0 {
            return Err(Error::Segmentation("segment count and minimum length must be positive".into()));
        }
        if self.n_segments * self.min_segment_len > len {
            return Err(Error::Segmentation(format!(
                "{} segments of at least {} samples do not fit in {len}",
                self.n_segments, self.min_segment_len
            )));
        }
        Ok(())
    }
}

/// Segment lengths of a uniformly random composition of `len` into `n`
/// parts of at least `min` each.
pub fn random_segments<R: Rng + ?Sized>(len: usize, n: usize, min: usize, rng: &mut R) -> Vec<usize> {
    let free = len - n * min;
    let mut bars = index::sample(rng, free + n - 1, n - 1).into_vec();
    bars.sort_unstable();
    let mut out = Vec::with_capacity(n);
    let mut prev: isize = -1;
    for &b in bars.iter().chain(std::iter::once(&(free + n - 1))) {
        out.push(min + (b as isize - prev - 1) as usize);
        prev = b as isize;
    }
    out
}

/// Splice `row` segments (given by `lens`) in `order`.
fn splice(row: &[f32], lens: &[usize], order: &[usize]) -> Vec<f32> {
    let mut starts = Vec::with_capacity(lens.len());
    let mut at = 0;
    for &l in lens {
        starts.push(at);
        at += l;
    }
    order.iter().flat_map(|&k| &row[starts[k]..starts[k] + lens[k]]).copied().collect()
}

/// One augmented view with the same id, label and SNR tag as `record`.
pub fn mvs_view<R: Rng + ?Sized>(record: &SignalRecord, config: &MvsConfig, rng: &mut R) -> Result<SignalRecord> {
    let len = record.len();
    config.validate(len)?;
    let n = if config.resample_segments && config.n_segments > 2 {
        rng.random_range(2..=config.n_segments)
    } else {
        config.n_segments
    };
    let lens = random_segments(len, n, config.min_segment_len, rng);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut iq = splice(record.i_row(), &lens, &order);
    iq.extend(splice(record.q_row(), &lens, &order));
    Ok(SignalRecord { iq, ..record.clone() })
}

/// Originals followed by `views_per_sample` views of each, with fresh ids
/// starting at `next_id` and a provenance link per view.
pub fn expand_trusted(
    records: &[SignalRecord],
    config: &MvsConfig,
    next_id: u64,
) -> Result<(Vec<SignalRecord>, Vec<Provenance>)> {
    let mut rng = rng::child(config.seed, rng::stream::MVS);
    let mut out = records.to_vec();
    let mut prov = Vec::with_capacity(records.len() * config.views_per_sample);
    let mut id = next_id;
    for r in records {
        for _ in 0..config.views_per_sample {
            let mut v = mvs_view(r, config, &mut rng)?;
            v.id = id;
            prov.push(Provenance { id, source_id: r.id });
            out.push(v);
            id += 1;
        }
    }
    Ok((out, prov))
}
