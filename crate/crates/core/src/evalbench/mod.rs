//! Baselines, evaluation and noise-rate sweeps.

mod sweep;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use sweep::{
    format_table1, prepare, run_experiment, sweep, tshn_gain, ExperimentConfig, Method, Purity, RunRecord, RunReport,
    SweepOutcome, SweepSpec,
};

use crate::distiller::{
    estimate_glc, fit_supervised, infer_all, run_student, train_probe, write_checkpoint, LossConfig, MetricsRecord,
    MetricsSink, Partition, TrainConfig, TrainWarnings, TrainingData,
};
use crate::error::{Error, Result};
use crate::gradnet::loss::cross_entropy_rows;
use crate::gradnet::{EmbeddingNetwork, Optimizer, Tape, Var};
use crate::noiselab::TransitionMatrix;
use crate::rng::{self, stream};
use crate::sigsynth::{SignalRecord, NOISELESS_SNR_TAG};

/// Reference method trained on all training labels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum BaselineSpec {
    Ce,
    Mae,
    Gce { q: f64 },
    Glc,
}

impl BaselineSpec {
    /// GCE with `q = 0.7`.
    pub fn gce() -> Self {
        BaselineSpec::Gce { q: 0.7 }
    }

    pub fn validate(&self) -> Result<()> {
        if let BaselineSpec::Gce { q } = self {
            if !(*q > 0.0 && *q <= 1.0) {
                return Err(Error::InvalidArgument(format!("GCE q = {q} must be in (0, 1]")));
            }
        }
        Ok(())
    }
}

fn mean_rows(tape: &mut Tape<f32>, rows: Var, n: usize) -> Var {
    let s = tape.sum(rows);
    tape.scale(s, 1.0 / n as f32)
}

pub struct BaselineOutcome {
    pub net: EmbeddingNetwork<f32>,
    pub metrics: Vec<MetricsRecord>,
    pub transition: Option<TransitionMatrix>,
    pub warnings: TrainWarnings,
}

/// Train a baseline for `cfg.epochs` epochs. With `out_dir`, writes
/// `metrics.jsonl` and `ckpt/final.ckpt` there.
pub fn train_baseline(
    data: &TrainingData,
    spec: BaselineSpec,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<BaselineOutcome> {
    spec.validate()?;
    cfg.validate()?;
    data.validate()?;
    let mut sink = match out_dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            MetricsSink::to_file(&d.join("metrics.jsonl"))?
        }
        None => MetricsSink::default(),
    };
    let arch = cfg.architecture(data.n_classes, data.sample_len);
    let seed = rng::derive_seed(cfg.seed, stream::INIT);
    let mut net = EmbeddingNetwork::new(arch, seed)?;
    let mut warnings = TrainWarnings::default();
    let mut transition = None;
    let samples: Vec<(&SignalRecord, usize)> = data
        .trusted
        .iter()
        .map(|r| (r, usize::from(r.label)))
        .chain(data.untrusted.iter().zip(data.observed.iter().copied()))
        .collect();
    let fit = |net: &mut EmbeddingNetwork<f32>, sink: &mut MetricsSink, loss: &dyn Fn(&mut Tape<f32>, Var, &[usize]) -> Var| {
        fit_supervised(net, &samples, cfg, cfg.epochs, "baseline", seed, &data.val, sink, loss)
    };
    match spec {
        BaselineSpec::Ce => fit(&mut net, &mut sink, &|t, l, y| {
            let r = cross_entropy_rows(t, l, y);
            mean_rows(t, r, y.len())
        })?,
        BaselineSpec::Mae => fit(&mut net, &mut sink, &|t, l, y| {
            let r = crate::distiller::mae_rows(t, l, y);
            mean_rows(t, r, y.len())
        })?,
        BaselineSpec::Gce { q } => fit(&mut net, &mut sink, &|t, l, y| {
            let r = crate::distiller::gce_rows(t, l, y, q);
            mean_rows(t, r, y.len())
        })?,
        BaselineSpec::Glc => {
            let c = if data.untrusted.is_empty() {
                TransitionMatrix::identity(data.n_classes)
            } else {
                let probe = train_probe(data, cfg, &mut sink)?;
                let (c, missing) = estimate_glc(&probe, &data.trusted, data.n_classes)?;
                warnings.glc_missing_classes = missing;
                c
            };
            let part = Partition { d_t: data.trusted_ids(), d_p: Vec::new(), d_u: data.untrusted_ids() };
            let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, net.params());
            run_student(
                &mut net,
                &mut opt,
                data,
                &part,
                &c,
                cfg,
                &LossConfig::default(),
                0..cfg.epochs,
                "baseline",
                &mut sink,
                &mut warnings,
            )?;
            transition = Some(c);
        }
    }
    if let Some(d) = out_dir {
        let opt = Optimizer::new(cfg.optimizer, cfg.lr, net.params());
        write_checkpoint(d, "final.ckpt", &net, &opt)?;
    }
    Ok(BaselineOutcome { net, metrics: sink.records, transition, warnings })
}

/// Anything that maps records to class indices.
pub trait Classifier {
    fn predict(&self, records: &[SignalRecord]) -> Result<Vec<usize>>;
}

impl Classifier for EmbeddingNetwork<f32> {
    fn predict(&self, records: &[SignalRecord]) -> Result<Vec<usize>> {
        let (_, probs) = infer_all(self, records)?;
        Ok(probs
            .iter()
            .map(|p| p.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0)
            .collect())
    }
}

impl<F: Fn(&SignalRecord) -> usize> Classifier for F {
    fn predict(&self, records: &[SignalRecord]) -> Result<Vec<usize>> {
        Ok(records.iter().map(self).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrAccuracy {
    pub snr_db: i16,
    pub count: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Majority-class frequency of the test split.
    pub chance: f64,
    /// Empty unless the test split carries at least two SNR tags.
    pub per_snr: Vec<SnrAccuracy>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate(clf: &dyn Classifier, test: &[SignalRecord], n_classes: usize) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::EmptySplit);
    }
    let pred = clf.predict(test)?;
    if pred.len() != test.len() {
        return Err(Error::Shape(format!("{} predictions for {} records", pred.len(), test.len())));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    let mut by_snr: BTreeMap<i16, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (r, &p) in test.iter().zip(&pred) {
        let y = usize::from(r.label);
        if y >= n_classes || p >= n_classes {
            return Err(Error::InvalidArgument(format!("label {y} or prediction {p} out of range")));
        }
        confusion[y][p] += 1;
        let e = by_snr.entry(r.snr_db).or_default();
        e.0 += 1;
        if y == p {
            correct += 1;
            e.1 += 1;
        }
    }
    let per_snr = if by_snr.len() >= 2 {
        by_snr
            .into_iter()
            .map(|(snr_db, (n, ok))| SnrAccuracy { snr_db, count: n, accuracy: ok as f64 / n as f64 })
            .collect()
    } else {
        Vec::new()
    };
    let majority = confusion.iter().map(|r| r.iter().sum::<usize>()).max().unwrap_or(0);
    Ok(Evaluation {
        accuracy: correct as f64 / test.len() as f64,
        chance: majority as f64 / test.len() as f64,
        per_snr,
        confusion,
    })
}

/// Label used for the SNR column of long-format reports.
pub fn snr_label(snr: i16) -> String {
    if snr == NOISELESS_SNR_TAG {
        "clean".into()
    } else {
        snr.to_string()
    }
}
