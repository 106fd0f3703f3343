//! Checks shared by the integration tests and the acceptance runner. Each
//! returns the measured quantity so callers can apply their own threshold.
#![allow(dead_code)]

pub mod gradcheck;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tshn_core::distiller::{estimate_glc, train_probe, MetricsSink, TrainConfig, TrainingData};
use tshn_core::mvs::{mvs_view, MvsConfig};
use tshn_core::noiselab::{corrupt, empirical_transition, spec_to_matrix, NoiseKind, NoiseSpec, TransitionMatrix};
use tshn_core::sigsynth::SignalRecord;

/// ℓ∞ gap between the empirical and nominal transition at `n` labels.
pub fn noise_gap(kind: NoiseKind, rate: f64, n_classes: usize, n: usize, seed: u64) -> f64 {
    let spec = NoiseSpec { kind, rate, seed };
    let labels: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
    let ids: Vec<u64> = (0..n as u64).collect();
    let (obs, _) = corrupt(&labels, &ids, &spec, n_classes).unwrap();
    let emp = empirical_transition(&labels, &obs, n_classes).unwrap();
    emp.linf_distance(&spec_to_matrix(&spec, n_classes).unwrap())
}

/// Boundary rates: η = 0 leaves every label alone, η = 1 changes every label
/// that has somewhere to go. Returns the number of violating labels.
pub fn noise_boundary_violations(kind: NoiseKind, n_classes: usize, n: usize, seed: u64) -> usize {
    let labels: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
    let ids: Vec<u64> = (0..n as u64).collect();
    let mut bad = 0;
    for rate in [0.0, 1.0] {
        let spec = NoiseSpec { kind: kind.clone(), rate, seed };
        let c = spec_to_matrix(&spec, n_classes).unwrap();
        let (obs, _) = corrupt(&labels, &ids, &spec, n_classes).unwrap();
        for (&y, &o) in labels.iter().zip(&obs) {
            let movable = c.get(y, y) < 1.0;
            let ok = if rate == 0.0 { o == y } else { (o != y) == movable && c.get(y, o) > 0.0 };
            bad += usize::from(!ok);
        }
    }
    bad
}

/// Random record whose columns are all distinct, so each output column can
/// be traced back to its source index.
fn traceable_record(rng: &mut ChaCha8Rng, len: usize) -> SignalRecord {
    let mut iq: Vec<f32> = (0..len).map(|t| t as f32 + rng.random_range(0.0..0.5)).collect();
    iq.extend((0..len).map(|_| rng.random_range(-1.0f32..1.0)));
    SignalRecord { id: rng.random_range(0..1000), label: rng.random_range(0..8), snr_db: 10, iq }
}

/// Randomized segment-permute-splice trials. A view violates the invariants
/// if it changes length, label or SNR tag, breaks an (I, Q) column pair,
/// loses or duplicates a column, or has more than `n - 1` splice points.
pub fn mvs_violations(trials: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..trials {
        let n = rng.random_range(1..=6);
        let min = rng.random_range(1..=8);
        let len = n * min + rng.random_range(0..64);
        let rec = traceable_record(&mut rng, len);
        let cfg = MvsConfig { n_segments: n, min_segment_len: min, ..Default::default() };
        let v = mvs_view(&rec, &cfg, &mut rng).unwrap();
        if v.len() != len || v.label != rec.label || v.snr_db != rec.snr_db || v.iq.len() != rec.iq.len() {
            bad += 1;
            continue;
        }
        let src: Vec<Option<usize>> = v.i_row().iter().map(|x| rec.i_row().iter().position(|y| y == x)).collect();
        let mut seen = vec![false; len];
        let mut ok = true;
        for (t, s) in src.iter().enumerate() {
            match s {
                Some(s) if !seen[*s] && v.q_row()[t] == rec.q_row()[*s] => seen[*s] = true,
                _ => ok = false,
            }
        }
        if ok {
            let splices = src.windows(2).filter(|w| w[1].unwrap() != w[0].unwrap() + 1).count();
            ok = splices < n;
        }
        bad += usize::from(!ok);
    }
    bad
}

pub fn toy_transition() -> TransitionMatrix {
    TransitionMatrix::from_rows(vec![
        vec![0.7, 0.2, 0.1, 0.0],
        vec![0.1, 0.6, 0.3, 0.0],
        vec![0.0, 0.0, 0.8, 0.2],
        vec![0.25, 0.0, 0.0, 0.75],
    ])
    .unwrap()
}

/// Four classes that differ by a constant I/Q offset: trivially separable.
fn toy_record(rng: &mut ChaCha8Rng, id: u64, label: usize, len: usize) -> SignalRecord {
    let level = label as f32 - 1.5;
    let mut iq: Vec<f32> = (0..len).map(|_| level + rng.random_range(-0.1f32..0.1)).collect();
    iq.extend((0..len).map(|_| -level + rng.random_range(-0.1f32..0.1)));
    SignalRecord { id, label: label as u16, snr_db: 18, iq }
}

/// GLC on the separable toy problem: train the probe on labels corrupted by
/// [`toy_transition`] and return ℓ∞(Ĉ, C*).
pub fn glc_toy_error(seed: u64) -> f64 {
    let c_star = toy_transition();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = 32;
    let mut id = 0u64;
    let mut make = |count: usize, rng: &mut ChaCha8Rng| {
        (0..count)
            .map(|i| {
                id += 1;
                toy_record(rng, id, i % 4, len)
            })
            .collect::<Vec<_>>()
    };
    let untrusted = make(1600, &mut rng);
    let trusted = make(80, &mut rng);
    // Sample observed labels directly from the rows of C*.
    let observed: Vec<usize> = untrusted
        .iter()
        .map(|r| {
            let row = c_star.row(usize::from(r.label));
            let u: f64 = rng.random();
            let mut acc = 0.0;
            row.iter().position(|&p| {
                acc += p;
                u < acc
            })
            .unwrap_or(3)
        })
        .collect();
    let data = TrainingData { n_classes: 4, sample_len: len, trusted, untrusted, observed, val: Vec::new(), views: Vec::new() };
    let cfg = TrainConfig { seed, probe_epochs: 6, dropout: 0.0, ..Default::default() };
    let probe = train_probe(&data, &cfg, &mut MetricsSink::default()).unwrap();
    let (c_hat, missing) = estimate_glc(&probe, &data.trusted, 4).unwrap();
    assert!(missing.is_empty());
    c_hat.linf_distance(&c_star)
}

/// Small but complete TSHN and GLC runs, each executed twice into separate
/// directories. Returns the artifact files that differ between the two.
pub fn determinism_mismatches() -> Vec<String> {
    use tshn_core::evalbench::{run_experiment, ExperimentConfig, Method};
    use tshn_core::sigsynth::{generate_dataset, Dataset, DatasetRequest, Modulation, TrustedSelection};

    let req = DatasetRequest::new(Modulation::DIGITAL[..4].to_vec(), 15, vec![10, 18], 3);
    let (m, records) = generate_dataset(&req).unwrap();
    let ds = Dataset { class_names: m.class_names, sample_len: m.sample_len, records };
    let mut bad = Vec::new();
    for method in [Method::Tshn, Method::Glc] {
        let mut exp = ExperimentConfig::new(method, "sym:0.5".parse().unwrap());
        exp.trusted = TrustedSelection::PerClass(3);
        exp.train.episodes = 8;
        exp.train.warmup_episodes = 2;
        exp.train.epochs = 2;
        exp.train.probe_epochs = 1;
        exp.train.log_every = 2;
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for d in &dirs {
            run_experiment(&ds, &exp, 4, Some(d.path())).unwrap();
        }
        for f in ["metrics.jsonl", "noise_ledger.csv", "confidence.csv", "transition.csv", "ckpt/final.ckpt"] {
            let a = std::fs::read(dirs[0].path().join(f)).ok();
            let b = std::fs::read(dirs[1].path().join(f)).ok();
            if a != b || (f == "metrics.jsonl" && a.as_ref().is_none_or(|v| v.is_empty())) {
                bad.push(format!("{method}/{f}"));
            }
        }
    }
    bad
}
