use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::losses::{forward_corrected_rows, phase2_loss, smoothed_ce_rows, SetTerm};
use super::{glc_from_predictions, partition, LossConfig, Partition};
use crate::error::{Error, Result};
use crate::gradnet::loss::{cross_entropy_rows, cross_entropy_mean};
use crate::gradnet::{
    save_checkpoint, Architecture, Checkpoint, EmbeddingNetwork, Mode, Optimizer, OptimizerKind, Tape, Tensor, Var,
};
use crate::noiselab::TransitionMatrix;
use crate::protomind::{
    compute_prototypes, sample_episode, soft_label, teacher_losses, ConfidenceState, EpisodeSpec, PrototypeBank,
    Similarity,
};
use crate::rng::{self, stream, Rng};
use crate::sigsynth::SignalRecord;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchPreset {
    #[default]
    Desk,
    Full,
}

impl ArchPreset {
    pub fn build(self, n_classes: usize, sample_len: usize, dropout: f64) -> Architecture {
        let a = match self {
            ArchPreset::Desk => Architecture::desk(n_classes, sample_len),
            ArchPreset::Full => Architecture::full_size(n_classes, sample_len),
        };
        Architecture { dropout, ..a }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlcProbe {
    /// A fresh network trained with plain CE on the untrusted observed labels.
    #[default]
    Separate,
    /// The shared network as it stands after the teacher phase.
    Teacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: ArchPreset,
    pub dropout: f64,
    /// G: teacher episodes.
    pub episodes: usize,
    pub warmup_episodes: usize,
    /// I_b: episodes between prototype refreshes.
    pub proto_interval: usize,
    pub xi: f64,
    pub mu: f64,
    pub episode: EpisodeSpec,
    pub similarity: Similarity,
    /// Student epochs after the partition.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Network whose trusted-set predictions give the channel estimate.
    pub glc_probe: GlcProbe,
    /// Epochs of plain CE on the untrusted pool for the separate probe.
    pub probe_epochs: usize,
    /// Refresh confidences and repartition every this many student epochs (0 = never).
    pub repartition_every: usize,
    /// Teacher episodes per metrics record.
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchPreset::Desk,
            dropout: 0.5,
            episodes: 2000,
            warmup_episodes: 50,
            proto_interval: 5,
            xi: 0.3,
            mu: 0.6,
            episode: EpisodeSpec::default(),
            similarity: Similarity { scale: 20.0, ..Default::default() },
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            optimizer: OptimizerKind::adam(),
            glc_probe: GlcProbe::Separate,
            probe_epochs: 5,
            repartition_every: 0,
            log_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.episodes == 0 || self.epochs == 0 || self.batch_size == 0 || self.log_every == 0 {
            return bad("episode, epoch, batch and logging counts must be at least 1".into());
        }
        if self.proto_interval == 0 {
            return bad("prototype interval must be at least 1".into());
        }
        if !(self.xi > 0.0 && self.xi <= 1.0) || !(self.mu > 0.0 && self.mu < 1.0) {
            return bad(format!("xi {} must be in (0, 1] and mu {} in (0, 1)", self.xi, self.mu));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return bad("learning rate must be positive and dropout in [0, 1)".into());
        }
        if !(self.similarity.scale > 0.0) {
            return bad("similarity scale must be positive".into());
        }
        if self.episode.ways < 2 {
            return Err(Error::NeedTwoClasses);
        }
        if self.episode.shots == 0 || self.episode.query == 0 {
            return bad("episode shots and query must be at least 1".into());
        }
        Ok(())
    }

    pub fn architecture(&self, n_classes: usize, sample_len: usize) -> Architecture {
        self.arch.build(n_classes, sample_len, self.dropout)
    }
}

/// Training pools. Untrusted records keep their true labels for evaluation
/// only; training reads `observed`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingData {
    pub n_classes: usize,
    pub sample_len: usize,
    pub trusted: Vec<SignalRecord>,
    pub untrusted: Vec<SignalRecord>,
    pub observed: Vec<usize>,
    pub val: Vec<SignalRecord>,
    /// Extra labeled views that join the trusted pool in teacher episodes only.
    pub views: Vec<SignalRecord>,
}

impl TrainingData {
    pub fn validate(&self) -> Result<()> {
        if self.untrusted.len() != self.observed.len() {
            return Err(Error::Shape("one observed label per untrusted record".into()));
        }
        if self.trusted.is_empty() {
            return Err(Error::InsufficientTrusted { classes: vec!["all".into()] });
        }
        for r in self.trusted.iter().chain(&self.untrusted).chain(&self.val).chain(&self.views) {
            r.validate(self.n_classes)?;
            if r.len() != self.sample_len {
                return Err(Error::Shape(format!("record {} has length {}", r.id, r.len())));
            }
        }
        if let Some(&o) = self.observed.iter().find(|&&o| o >= self.n_classes) {
            return Err(Error::InvalidArgument(format!("observed label {o} out of range")));
        }
        Ok(())
    }

    pub fn untrusted_ids(&self) -> Vec<u64> {
        self.untrusted.iter().map(|r| r.id).collect()
    }

    pub fn trusted_ids(&self) -> Vec<u64> {
        self.trusted.iter().map(|r| r.id).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub phase: String,
    pub epoch: usize,
    pub losses: BTreeMap<String, f64>,
    pub d_p: usize,
    pub d_u: usize,
    pub val_accuracy: Option<f64>,
}

/// Collects metrics records and mirrors them to a JSON-lines file if one is open.
#[derive(Default)]
pub struct MetricsSink {
    pub records: Vec<MetricsRecord>,
    file: Option<BufWriter<File>>,
}

impl MetricsSink {
    pub fn to_file(path: &Path) -> Result<Self> {
        Ok(Self { records: Vec::new(), file: Some(BufWriter::new(File::create(path)?)) })
    }

    pub fn push(&mut self, r: MetricsRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            serde_json::to_writer(&mut *f, &r)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        self.records.push(r);
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainWarnings {
    /// Episodes in which some class had fewer trusted samples than requested shots.
    pub shots_reduced_episodes: usize,
    /// Rows whose forward-corrected probability hit the floor.
    pub correction_floor_hits: usize,
    /// Classes whose channel row fell back to identity.
    pub glc_missing_classes: Vec<usize>,
}

pub struct TshnOutcome {
    pub net: EmbeddingNetwork<f32>,
    pub partition: Partition,
    pub transition: TransitionMatrix,
    pub confidence: ConfidenceState,
    pub metrics: Vec<MetricsRecord>,
    pub warnings: TrainWarnings,
}

/// Stack records into a `[B, 2, L]` batch.
pub fn stack_records<'a>(records: impl IntoIterator<Item = &'a SignalRecord>, sample_len: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut b = 0;
    for r in records {
        if r.iq.len() != 2 * sample_len {
            return Err(Error::Shape(format!("record {} has length {}", r.id, r.len())));
        }
        data.extend_from_slice(&r.iq);
        b += 1;
    }
    Tensor::new(vec![b, 2, sample_len], data)
}

const EVAL_BATCH: usize = 256;

/// Eval-mode features and class probabilities for every record, in order.
pub fn infer_all(net: &EmbeddingNetwork<f32>, records: &[SignalRecord]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let len = net.arch().sample_len;
    let mut feats = Vec::with_capacity(records.len());
    let mut probs = Vec::with_capacity(records.len());
    for chunk in records.chunks(EVAL_BATCH) {
        let (f, p) = net.infer(&stack_records(chunk, len)?)?;
        for i in 0..chunk.len() {
            feats.push(f.row(i).iter().map(|&v| f64::from(v)).collect());
            probs.push(p.row(i).iter().map(|&v| f64::from(v)).collect());
        }
    }
    Ok((feats, probs))
}

fn argmax(p: &[f64]) -> usize {
    p.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0
}

/// Accuracy against the records' true labels; `None` for an empty set.
pub fn accuracy(net: &EmbeddingNetwork<f32>, records: &[SignalRecord]) -> Result<Option<f64>> {
    if records.is_empty() {
        return Ok(None);
    }
    let (_, probs) = infer_all(net, records)?;
    let ok = probs.iter().zip(records).filter(|(p, r)| argmax(p) == usize::from(r.label)).count();
    Ok(Some(ok as f64 / records.len() as f64))
}

fn fault(phase: &str, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{phase} step {step}: {m}")),
        other => other,
    }
}

/// Cyclic shuffled index stream over one set.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize, rng: &mut Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn take(&mut self, k: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k && !self.order.is_empty() {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Split `batch` over sets in proportion to their sizes, at least one row per nonempty set.
fn batch_shares(sizes: &[usize], batch: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    sizes
        .iter()
        .map(|&n| if n == 0 { 0 } else { ((batch as f64 * n as f64 / total as f64).round() as usize).clamp(1, n) })
        .collect()
}

/// Minibatch training on `(record, label)` pairs with a mean loss built by `loss`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fit_supervised(
    net: &mut EmbeddingNetwork<f32>,
    samples: &[(&SignalRecord, usize)],
    cfg: &TrainConfig,
    epochs: usize,
    phase: &str,
    seed: u64,
    val: &[SignalRecord],
    sink: &mut MetricsSink,
    loss: impl Fn(&mut Tape<f32>, Var, &[usize]) -> Var,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptySplit);
    }
    let len = net.arch().sample_len;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, net.params());
    let mut batch_rng = rng::child(seed, stream::BATCHES);
    let mut drop_rng = rng::child(seed, stream::DROPOUT);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    for epoch in 0..epochs {
        order.shuffle(&mut batch_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = stack_records(chunk.iter().map(|&i| samples[i].0), len)?;
            let y: Vec<usize> = chunk.iter().map(|&i| samples[i].1).collect();
            let mut tape = Tape::new();
            let out = net.forward(&mut tape, &x, Mode::Train, &mut drop_rng)?;
            let l = loss(&mut tape, out.logits, &y);
            total += f64::from(tape.value(l).item().unwrap_or(f32::NAN)) * chunk.len() as f64;
            let g = tape.backward(l, net.params()).map_err(|e| fault(phase, step, e))?;
            opt.step(net.params_mut(), &g).map_err(|e| fault(phase, step, e))?;
            step += 1;
        }
        let mut losses = BTreeMap::new();
        losses.insert("loss".to_string(), total / samples.len() as f64);
        sink.push(MetricsRecord {
            phase: phase.into(),
            epoch,
            losses,
            d_p: 0,
            d_u: 0,
            val_accuracy: accuracy(net, val)?,
        })?;
    }
    Ok(())
}

/// A network trained with plain CE on the untrusted pool's observed labels.
pub fn train_probe(data: &TrainingData, cfg: &TrainConfig, sink: &mut MetricsSink) -> Result<EmbeddingNetwork<f32>> {
    let arch = cfg.architecture(data.n_classes, data.sample_len);
    let seed = rng::derive_seed(cfg.seed, stream::PROBE);
    let mut net = EmbeddingNetwork::new(arch, seed)?;
    let samples: Vec<(&SignalRecord, usize)> = data.untrusted.iter().zip(data.observed.iter().copied()).collect();
    fit_supervised(&mut net, &samples, cfg, cfg.probe_epochs.max(1), "probe", seed, &data.val, sink, |t, l, y| {
        cross_entropy_mean(t, l, y)
    })?;
    Ok(net)
}

/// Channel estimate from `probe` predictions on the trusted records.
pub fn estimate_glc(
    probe: &EmbeddingNetwork<f32>,
    trusted: &[SignalRecord],
    n_classes: usize,
) -> Result<(TransitionMatrix, Vec<usize>)> {
    let (_, probs) = infer_all(probe, trusted)?;
    let labels: Vec<usize> = trusted.iter().map(|r| usize::from(r.label)).collect();
    glc_from_predictions(&probs, &labels, n_classes)
}

struct Teacher {
    bank: PrototypeBank,
    confidence: ConfidenceState,
}

fn feature_row(t: &Tensor<f32>, i: usize) -> Vec<f64> {
    t.row(i).iter().map(|&v| f64::from(v)).collect()
}

fn update_confidence(
    teacher: &mut Teacher,
    sim: &Similarity,
    id: u64,
    feature: &[f64],
    observed: usize,
) -> Result<()> {
    match soft_label(feature, &teacher.bank, sim) {
        Ok(p) => teacher.confidence.update(id, &p, observed).map(|_| ()),
        // a dead feature vector carries no similarity information
        Err(Error::DegenerateVector) => Ok(()),
        Err(e) => Err(e),
    }
}

fn run_teacher(
    net: &mut EmbeddingNetwork<f32>,
    opt: &mut Optimizer<f32>,
    data: &TrainingData,
    cfg: &TrainConfig,
    loss: &LossConfig,
    sink: &mut MetricsSink,
    warnings: &mut TrainWarnings,
) -> Result<Teacher> {
    let len = data.sample_len;
    let mut teacher = Teacher {
        bank: PrototypeBank::new(data.n_classes, cfg.xi, cfg.proto_interval, cfg.warmup_episodes)?,
        confidence: ConfidenceState::new(&data.untrusted_ids(), cfg.mu, loss.delta)?,
    };
    let pool: Vec<&SignalRecord> = data.trusted.iter().chain(&data.views).collect();
    let trusted_labels: Vec<usize> = pool.iter().map(|r| usize::from(r.label)).collect();
    let mut ep_rng = rng::child(cfg.seed, stream::EPISODES);
    let mut drop_rng = rng::child(cfg.seed, stream::DROPOUT);
    let (mut sum_t, mut sum_ur, mut sum_cls, mut n_logged) = (0.0, 0.0, 0.0, 0usize);

    for g in 0..cfg.episodes {
        let ep = sample_episode(&trusted_labels, data.untrusted.len(), &cfg.episode, &mut ep_rng)?;
        if !ep.warnings.is_empty() {
            warnings.shots_reduced_episodes += 1;
        }
        let trusted_idx: Vec<usize> = ep.support.iter().chain(&ep.trusted_query).copied().collect();
        let n_t = trusted_idx.len();
        let x = stack_records(
            trusted_idx.iter().map(|&i| pool[i]).chain(ep.untrusted_query.iter().map(|&i| &data.untrusted[i])),
            len,
        )?;
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &x, Mode::Train, &mut drop_rng)?;
        let feats = tape.value(out.features).clone();

        if teacher.bank.is_ready() {
            for (j, &u) in ep.untrusted_query.iter().enumerate() {
                let f = feature_row(&feats, n_t + j);
                update_confidence(&mut teacher, &cfg.similarity, data.untrusted[u].id, &f, data.observed[u])?;
            }
        }
        let t_labels: Vec<usize> = trusted_idx.iter().map(|&i| trusted_labels[i]).collect();
        let u_labels: Vec<usize> = ep.untrusted_query.iter().map(|&i| data.observed[i]).collect();
        let weights = ep
            .untrusted_query
            .iter()
            .map(|&i| teacher.confidence.mask_weight(data.untrusted[i].id))
            .collect::<Result<Vec<f64>>>()?;
        let tl = tape.slice_rows(out.logits, 0, n_t);
        let untrusted = if u_labels.is_empty() {
            None
        } else {
            let ul = tape.slice_rows(out.logits, n_t, n_t + u_labels.len());
            Some((ul, &u_labels[..], &weights[..]))
        };
        let l = teacher_losses(&mut tape, tl, &t_labels, untrusted);
        sum_t += f64::from(tape.value(l.trusted).item().unwrap_or(f32::NAN));
        sum_ur += f64::from(tape.value(l.untrusted).item().unwrap_or(f32::NAN));
        sum_cls += f64::from(tape.value(l.total).item().unwrap_or(f32::NAN));
        n_logged += 1;
        let grads = tape.backward(l.total, net.params()).map_err(|e| fault("teacher", g, e))?;
        opt.step(net.params_mut(), &grads).map_err(|e| fault("teacher", g, e))?;

        if teacher.bank.due(g) {
            let mut by_class: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
            for (j, &s) in ep.support.iter().enumerate() {
                by_class.entry(trusted_labels[s]).or_default().push(feature_row(&feats, j));
            }
            teacher.bank.ema_update(&compute_prototypes(&by_class)?)?;
        }

        if (g + 1) % cfg.log_every == 0 || g + 1 == cfg.episodes {
            let k = n_logged as f64;
            let losses = BTreeMap::from([
                ("l_t".to_string(), sum_t / k),
                ("l_ur".to_string(), sum_ur / k),
                ("l_cls".to_string(), sum_cls / k),
            ]);
            let retained = teacher.confidence.retained();
            sink.push(MetricsRecord {
                phase: "teacher".into(),
                epoch: g + 1,
                losses,
                d_p: retained,
                d_u: teacher.confidence.len() - retained,
                val_accuracy: accuracy(net, &data.val)?,
            })?;
            (sum_t, sum_ur, sum_cls, n_logged) = (0.0, 0.0, 0.0, 0);
        }
    }
    Ok(teacher)
}

/// Prototypes from the whole trusted pool, then one confidence update per untrusted sample.
fn refresh_confidence(
    net: &EmbeddingNetwork<f32>,
    data: &TrainingData,
    cfg: &TrainConfig,
    teacher: &mut Teacher,
) -> Result<()> {
    let (tf, _) = infer_all(net, &data.trusted)?;
    let mut by_class: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for (f, r) in tf.into_iter().zip(&data.trusted) {
        by_class.entry(usize::from(r.label)).or_default().push(f);
    }
    teacher.bank.ema_update(&compute_prototypes(&by_class)?)?;
    let (uf, _) = infer_all(net, &data.untrusted)?;
    for ((f, r), &o) in uf.iter().zip(&data.untrusted).zip(&data.observed) {
        update_confidence(teacher, &cfg.similarity, r.id, f, o)?;
    }
    Ok(())
}

/// Divide-and-conquer epochs: CE on `D_t`, smoothed CE on `D_p`, forward-corrected
/// CE on `D_u`, each set sampled in proportion to its size.
#[allow(clippy::too_many_arguments)]
pub fn run_student(
    net: &mut EmbeddingNetwork<f32>,
    opt: &mut Optimizer<f32>,
    data: &TrainingData,
    part: &Partition,
    transition: &TransitionMatrix,
    cfg: &TrainConfig,
    loss: &LossConfig,
    epochs: std::ops::Range<usize>,
    phase: &str,
    sink: &mut MetricsSink,
    warnings: &mut TrainWarnings,
) -> Result<()> {
    let len = data.sample_len;
    let by_id: HashMap<u64, (&SignalRecord, usize)> = data
        .trusted
        .iter()
        .map(|r| (r.id, (r, usize::from(r.label))))
        .chain(data.untrusted.iter().zip(&data.observed).map(|(r, &o)| (r.id, (r, o))))
        .collect();
    let lookup = |ids: &[u64]| -> Result<Vec<(&SignalRecord, usize)>> {
        ids.iter().map(|id| by_id.get(id).copied().ok_or(Error::UnknownSample(*id))).collect()
    };
    let sets = [lookup(&part.d_t)?, lookup(&part.d_p)?, lookup(&part.d_u)?];
    let sizes: Vec<usize> = sets.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::EmptySplit);
    }
    let shares = batch_shares(&sizes, cfg.batch_size);
    let steps = total.div_ceil(cfg.batch_size);
    let mut batch_rng = rng::child(rng::derive_seed(cfg.seed, epochs.start as u64), stream::BATCHES);
    let mut drop_rng = rng::child(rng::derive_seed(cfg.seed, epochs.start as u64 + 1), stream::DROPOUT);
    let mut cyclers: Vec<Cycler> = sizes.iter().map(|&n| Cycler::new(n, &mut batch_rng)).collect();

    for epoch in epochs {
        let mut sums = [0.0f64; 4];
        for step in 0..steps {
            let picks: Vec<Vec<usize>> =
                cyclers.iter_mut().zip(&shares).map(|(c, &k)| c.take(k, &mut batch_rng)).collect();
            let rows = picks.iter().zip(&sets).flat_map(|(p, s)| p.iter().map(move |&i| s[i].0));
            let x = stack_records(rows, len)?;
            let mut tape = Tape::new();
            let out = net.forward(&mut tape, &x, Mode::Train, &mut drop_rng)?;
            let mut start = 0;
            let mut terms = Vec::with_capacity(3);
            for (k, (p, s)) in picks.iter().zip(&sets).enumerate() {
                let y: Vec<usize> = p.iter().map(|&i| s[i].1).collect();
                let sum = if y.is_empty() {
                    tape.constant(Tensor::scalar(0.0))
                } else {
                    let l = tape.slice_rows(out.logits, start, start + y.len());
                    let rows = match k {
                        0 => cross_entropy_rows(&mut tape, l, &y),
                        1 => smoothed_ce_rows(&mut tape, l, &y, loss.epsilon),
                        _ => {
                            let (r, hits) = forward_corrected_rows(&mut tape, l, &y, transition);
                            warnings.correction_floor_hits += hits;
                            r
                        }
                    };
                    tape.sum(rows)
                };
                sums[k] += f64::from(tape.value(sum).item().unwrap_or(f32::NAN));
                start += y.len();
                terms.push(SetTerm { sum, batch: y.len(), set_size: sizes[k] });
            }
            let l = phase2_loss(&mut tape, &terms);
            sums[3] += f64::from(tape.value(l).item().unwrap_or(f32::NAN));
            let g = tape.backward(l, net.params()).map_err(|e| fault(phase, step, e))?;
            opt.step(net.params_mut(), &g).map_err(|e| fault(phase, step, e))?;
        }
        let per = |k: usize| if shares[k] == 0 { 0.0 } else { sums[k] / (steps * shares[k]) as f64 };
        let losses = BTreeMap::from([
            ("l_trusted".to_string(), per(0)),
            ("l_purified".to_string(), per(1)),
            ("l_untrusted".to_string(), per(2)),
            ("total".to_string(), sums[3] / steps as f64),
        ]);
        sink.push(MetricsRecord {
            phase: phase.into(),
            epoch,
            losses,
            d_p: sizes[1],
            d_u: sizes[2],
            val_accuracy: accuracy(net, &data.val)?,
        })?;
    }
    Ok(())
}

pub(crate) fn write_checkpoint(dir: &Path, name: &str, net: &EmbeddingNetwork<f32>, opt: &Optimizer<f32>) -> Result<()> {
    let ckpt = dir.join("ckpt");
    fs::create_dir_all(&ckpt)?;
    let mut w = BufWriter::new(File::create(ckpt.join(name))?);
    save_checkpoint(&mut w, &Checkpoint { net: net.clone(), optimizer: Some(opt.clone()) })?;
    w.flush()?;
    Ok(())
}

/// Two-phase training. With `out_dir`, writes `metrics.jsonl`, `ckpt/teacher.ckpt`,
/// `ckpt/final.ckpt`, `transition.csv` and `confidence.csv` there.
pub fn train_tshn(data: &TrainingData, cfg: &TrainConfig, loss: &LossConfig, out_dir: Option<&Path>) -> Result<TshnOutcome> {
    cfg.validate()?;
    loss.validate()?;
    data.validate()?;
    let mut sink = match out_dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            MetricsSink::to_file(&d.join("metrics.jsonl"))?
        }
        None => MetricsSink::default(),
    };
    let mut warnings = TrainWarnings::default();
    let arch = cfg.architecture(data.n_classes, data.sample_len);
    let mut net = EmbeddingNetwork::new(arch, rng::derive_seed(cfg.seed, stream::INIT))?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, net.params());

    let mut teacher = run_teacher(&mut net, &mut opt, data, cfg, loss, &mut sink, &mut warnings)?;
    if let Some(d) = out_dir {
        write_checkpoint(d, "teacher.ckpt", &net, &opt)?;
    }

    let untrusted_ids = data.untrusted_ids();
    let trusted_ids = data.trusted_ids();
    let mut part = partition(&untrusted_ids, &teacher.confidence, loss.delta, &trusted_ids)?;
    let transition = match (&loss.transition, part.d_u.is_empty()) {
        (Some(c), _) => c.clone(),
        (None, true) => TransitionMatrix::identity(data.n_classes),
        (None, false) => {
            let (c, missing) = match cfg.glc_probe {
                GlcProbe::Separate => estimate_glc(&train_probe(data, cfg, &mut sink)?, &data.trusted, data.n_classes)?,
                GlcProbe::Teacher => estimate_glc(&net, &data.trusted, data.n_classes)?,
            };
            warnings.glc_missing_classes = missing;
            c
        }
    };

    let block = if cfg.repartition_every == 0 { cfg.epochs } else { cfg.repartition_every };
    let mut e = 0;
    while e < cfg.epochs {
        let end = (e + block).min(cfg.epochs);
        run_student(&mut net, &mut opt, data, &part, &transition, cfg, loss, e..end, "student", &mut sink, &mut warnings)?;
        e = end;
        if e < cfg.epochs {
            refresh_confidence(&net, data, cfg, &mut teacher)?;
            part = partition(&untrusted_ids, &teacher.confidence, loss.delta, &trusted_ids)?;
        }
    }

    if let Some(d) = out_dir {
        write_checkpoint(d, "final.ckpt", &net, &opt)?;
        transition.write_csv(File::create(d.join("transition.csv"))?)?;
        teacher.confidence.write_snapshot_csv(File::create(d.join("confidence.csv"))?)?;
    }
    Ok(TshnOutcome {
        net,
        partition: part,
        transition,
        confidence: teacher.confidence,
        metrics: sink.records,
        warnings,
    })
}
