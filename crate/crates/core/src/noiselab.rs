//! Label-noise models: symmetric, flip-one and mixed corruption through a
//! row-stochastic transition matrix `C[i][j] = P(observed = j | true = i)`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

const ROW_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Uniform flips to every other class.
    Symmetric,
    /// Each listed pair swaps labels (both directions); other classes stay clean.
    FlipOne { pairs: Vec<(usize, usize)> },
    /// Pairs as in `FlipOne`, symmetric noise at the same rate on every other class.
    Mixed { pairs: Vec<(usize, usize)> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn symmetric(rate: f64, seed: u64) -> Self {
        Self { kind: NoiseKind::Symmetric, rate, seed }
    }

    pub fn clean() -> Self {
        Self::symmetric(0.0, 0)
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::InvalidArgument(format!("noise rate {} outside [0, 1]", self.rate)));
        }
        if n_classes < 2 {
            return Err(Error::InvalidArgument("noise model needs at least two classes".into()));
        }
        if let NoiseKind::FlipOne { pairs } | NoiseKind::Mixed { pairs } = &self.kind {
            let mut used = vec![false; n_classes];
            for &(a, b) in pairs {
                if a >= n_classes || b >= n_classes || a == b || used[a] || used[b] {
                    return Err(Error::InvalidPair { a, b, n_classes });
                }
                used[a] = true;
                used[b] = true;
            }
        }
        Ok(())
    }
}

/// Row-stochastic `N × N` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    n: usize,
    data: Vec<f64>,
}

impl TransitionMatrix {
    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        (0..n).for_each(|i| data[i * n + i] = 1.0);
        Self { n, data }
    }

    /// Validate rows as probability vectors.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("transition matrix must be square".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.iter().any(|v| !(0.0..=1.0).contains(v)) || (r.iter().sum::<f64>() - 1.0).abs() > ROW_TOL {
                return Err(Error::InvalidArgument(format!("row {i} is not a probability vector")));
            }
        }
        Ok(Self { n, data: rows.into_iter().flatten().collect() })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.n).map(<[f64]>::to_vec).collect()
    }

    pub fn is_row_stochastic(&self) -> bool {
        self.data.chunks(self.n).all(|r| {
            r.iter().all(|v| (0.0..=1.0).contains(v)) && (r.iter().sum::<f64>() - 1.0).abs() <= ROW_TOL
        })
    }

    /// Largest absolute entrywise difference.
    pub fn linf_distance(&self, other: &TransitionMatrix) -> f64 {
        assert_eq!(self.n, other.n);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in self.data.chunks(self.n) {
            out.write_record(r.iter().map(|v| format!("{v:.17}")))?;
        }
        out.flush()?;
        Ok(())
    }
}

fn symmetric_row(i: usize, n: usize, rate: f64) -> Vec<f64> {
    (0..n).map(|j| if j == i { 1.0 - rate } else { rate / (n - 1) as f64 }).collect()
}

pub fn spec_to_matrix(spec: &NoiseSpec, n_classes: usize) -> Result<TransitionMatrix> {
    spec.validate(n_classes)?;
    let n = n_classes;
    let eta = spec.rate;
    let mut partner = vec![None; n];
    if let NoiseKind::FlipOne { pairs } | NoiseKind::Mixed { pairs } = &spec.kind {
        for &(a, b) in pairs {
            partner[a] = Some(b);
            partner[b] = Some(a);
        }
    }
    let rows = (0..n)
        .map(|i| match (&spec.kind, partner[i]) {
            (NoiseKind::Symmetric, _) => symmetric_row(i, n, eta),
            (_, Some(p)) => (0..n).map(|j| if j == i { 1.0 - eta } else if j == p { eta } else { 0.0 }).collect(),
            (NoiseKind::FlipOne { .. }, None) => (0..n).map(|j| if j == i { 1.0 } else { 0.0 }).collect(),
            (NoiseKind::Mixed { .. }, None) => symmetric_row(i, n, eta),
        })
        .collect();
    TransitionMatrix::from_rows(rows)
}

/// One corrupted label, kept for evaluation only.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub id: u64,
    pub true_label: usize,
    pub observed_label: usize,
}

impl CorruptionRecord {
    pub fn flipped(&self) -> bool {
        self.true_label != self.observed_label
    }
}

/// Inverse-CDF draw from a probability row; zero-probability entries are never chosen.
fn draw(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (j, &p) in row.iter().enumerate() {
        acc += p;
        if p > 0.0 && u < acc {
            return j;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Resample every label independently from its transition row.
///
/// `ids` pairs each label with its record id for the ledger.
pub fn corrupt(
    labels: &[usize],
    ids: &[u64],
    spec: &NoiseSpec,
    n_classes: usize,
) -> Result<(Vec<usize>, Vec<CorruptionRecord>)> {
    if labels.len() != ids.len() {
        return Err(Error::Shape("labels and ids differ in length".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range")));
    }
    let c = spec_to_matrix(spec, n_classes)?;
    let mut rng = rng::child(spec.seed, rng::stream::NOISE);
    let mut observed = Vec::with_capacity(labels.len());
    let mut ledger = Vec::with_capacity(labels.len());
    for (&y, &id) in labels.iter().zip(ids) {
        let o = draw(c.row(y), rng.random::<f64>());
        observed.push(o);
        ledger.push(CorruptionRecord { id, true_label: y, observed_label: o });
    }
    Ok((observed, ledger))
}

/// Row-normalized confusion counts of observed given true labels.
pub fn empirical_transition(true_labels: &[usize], observed: &[usize], n_classes: usize) -> Result<TransitionMatrix> {
    if true_labels.len() != observed.len() {
        return Err(Error::Shape("label lists differ in length".into()));
    }
    let mut counts = vec![0usize; n_classes * n_classes];
    for (&t, &o) in true_labels.iter().zip(observed) {
        if t >= n_classes || o >= n_classes {
            return Err(Error::InvalidArgument(format!("label pair ({t}, {o}) out of range")));
        }
        counts[t * n_classes + o] += 1;
    }
    let mut rows = Vec::with_capacity(n_classes);
    for i in 0..n_classes {
        let r = &counts[i * n_classes..(i + 1) * n_classes];
        let total: usize = r.iter().sum();
        if total == 0 {
            return Err(Error::UndefinedRow(i));
        }
        rows.push(r.iter().map(|&c| c as f64 / total as f64).collect());
    }
    TransitionMatrix::from_rows(rows)
}

pub fn write_ledger_csv(w: impl Write, ledger: &[CorruptionRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in ledger {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Command-line noise syntax:
/// `sym:0.8`, `flip:QAM16-QAM64,QPSK-8PSK:0.6`, `mixed:0.6` (mixed defaults to the
/// hard pairs QAM16↔QAM64 and QPSK↔8PSK), or `mixed:A-B,C-D:0.6`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseArg {
    pub kind: String,
    pub pairs: Vec<(String, String)>,
    pub rate: f64,
}

pub const HARD_PAIRS: [(&str, &str); 2] = [("QAM16", "QAM64"), ("QPSK", "8PSK")];

impl FromStr for NoiseArg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("cannot parse noise spec `{s}`"));
        let parts: Vec<&str> = s.split(':').collect();
        let (kind, pairs, rate) = match parts.as_slice() {
            [k, r] => (*k, None, *r),
            [k, p, r] => (*k, Some(*p), *r),
            _ => return Err(bad()),
        };
        let rate: f64 = rate.trim().parse().map_err(|_| bad())?;
        let kind = match kind.trim().to_ascii_lowercase().as_str() {
            "sym" | "symmetric" => "sym",
            "flip" | "flipone" | "aln" => "flip",
            "mixed" => "mixed",
            _ => return Err(bad()),
        };
        let pairs: Vec<(String, String)> = match pairs {
            Some(p) => p
                .split(',')
                .map(|pair| {
                    let (a, b) = pair.split_once('-').ok_or_else(bad)?;
                    Ok((a.trim().to_string(), b.trim().to_string()))
                })
                .collect::<Result<_>>()?,
            None if kind == "sym" => Vec::new(),
            None => HARD_PAIRS.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
        };
        if kind == "sym" && !pairs.is_empty() {
            return Err(bad());
        }
        Ok(NoiseArg { kind: kind.to_string(), pairs, rate })
    }
}

impl fmt::Display for NoiseArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.pairs.is_empty() {
            write!(f, "{}:{}", self.kind, self.rate)
        } else {
            let p: Vec<String> = self.pairs.iter().map(|(a, b)| format!("{a}-{b}")).collect();
            write!(f, "{}:{}:{}", self.kind, p.join(","), self.rate)
        }
    }
}

impl NoiseArg {
    /// Resolve class names against `class_names` (case-insensitive).
    pub fn resolve(&self, class_names: &[String], seed: u64) -> Result<NoiseSpec> {
        let find = |name: &str| {
            let key: Option<crate::sigsynth::Modulation> = name.parse().ok();
            class_names
                .iter()
                .position(|c| c.eq_ignore_ascii_case(name) || (key.is_some() && c.parse().ok() == key))
                .ok_or_else(|| Error::InvalidArgument(format!("unknown class `{name}` in noise spec")))
        };
        let pairs = self.pairs.iter().map(|(a, b)| Ok((find(a)?, find(b)?))).collect::<Result<Vec<_>>>()?;
        let kind = match self.kind.as_str() {
            "sym" => NoiseKind::Symmetric,
            "flip" => NoiseKind::FlipOne { pairs },
            _ => NoiseKind::Mixed { pairs },
        };
        let spec = NoiseSpec { kind, rate: self.rate, seed };
        spec.validate(class_names.len())?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_is_identity_for_every_kind() {
        let kinds = [
            NoiseKind::Symmetric,
            NoiseKind::FlipOne { pairs: vec![(0, 1)] },
            NoiseKind::Mixed { pairs: vec![(2, 3)] },
        ];
        for kind in kinds {
            let c = spec_to_matrix(&NoiseSpec { kind, rate: 0.0, seed: 0 }, 5).unwrap();
            assert_eq!(c, TransitionMatrix::identity(5));
        }
    }

    #[test]
    fn symmetric_eleven_half() {
        let c = spec_to_matrix(&NoiseSpec::symmetric(0.5, 0), 11).unwrap();
        for i in 0..11 {
            for j in 0..11 {
                let want = if i == j { 0.5 } else { 0.05 };
                assert!((c.get(i, j) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn flip_one_hard_pairs() {
        // DIGITAL order: BPSK QPSK 8PSK QAM16 QAM64 PAM4 CPFSK BFSK
        let spec = NoiseSpec { kind: NoiseKind::FlipOne { pairs: vec![(3, 4), (1, 2)] }, rate: 0.6, seed: 0 };
        let c = spec_to_matrix(&spec, 8).unwrap();
        assert!((c.get(3, 4) - 0.6).abs() < 1e-15);
        assert!((c.get(3, 3) - 0.4).abs() < 1e-15);
        assert!((c.get(4, 3) - 0.6).abs() < 1e-15);
        assert_eq!(c.row(0), TransitionMatrix::identity(8).row(0));
    }

    #[test]
    fn mixed_rows_combine_flip_and_symmetric() {
        let pairs = vec![(3, 4), (1, 2)];
        let mixed = spec_to_matrix(&NoiseSpec { kind: NoiseKind::Mixed { pairs: pairs.clone() }, rate: 0.7, seed: 0 }, 8).unwrap();
        let flip = spec_to_matrix(&NoiseSpec { kind: NoiseKind::FlipOne { pairs }, rate: 0.7, seed: 0 }, 8).unwrap();
        let sym = spec_to_matrix(&NoiseSpec::symmetric(0.7, 0), 8).unwrap();
        for i in 0..8 {
            let want = if (1..=4).contains(&i) { flip.row(i) } else { sym.row(i) };
            assert_eq!(mixed.row(i), want);
        }
    }

    #[test]
    fn invalid_pairs() {
        for pairs in [vec![(0, 9)], vec![(1, 1)], vec![(0, 1), (1, 2)]] {
            let spec = NoiseSpec { kind: NoiseKind::FlipOne { pairs }, rate: 0.5, seed: 0 };
            assert!(matches!(spec_to_matrix(&spec, 4), Err(Error::InvalidPair { .. })));
        }
    }

    #[test]
    fn corrupt_boundaries() {
        let labels: Vec<usize> = (0..1000).map(|i| i % 4).collect();
        let ids: Vec<u64> = (0..1000).collect();
        let (same, ledger) = corrupt(&labels, &ids, &NoiseSpec::symmetric(0.0, 3), 4).unwrap();
        assert_eq!(same, labels);
        assert!(ledger.iter().all(|r| !r.flipped()));
        let (all, _) = corrupt(&labels, &ids, &NoiseSpec::symmetric(1.0, 3), 4).unwrap();
        assert!(all.iter().zip(&labels).all(|(o, t)| o != t));
    }

    #[test]
    fn flip_fraction_within_three_sigma() {
        let n = 10_000;
        let labels: Vec<usize> = (0..n).map(|i| i % 8).collect();
        let ids: Vec<u64> = (0..n as u64).collect();
        let (_, ledger) = corrupt(&labels, &ids, &NoiseSpec::symmetric(0.55, 9), 8).unwrap();
        let flips = ledger.iter().filter(|r| r.flipped()).count() as f64;
        let sd = (n as f64 * 0.55 * 0.45).sqrt();
        assert!((flips - 0.55 * n as f64).abs() < 3.0 * sd, "{flips}");
    }

    #[test]
    fn empirical_transition_cases() {
        let t = [0, 1, 2, 1];
        assert_eq!(empirical_transition(&t, &t, 3).unwrap(), TransitionMatrix::identity(3));
        let anti = empirical_transition(&[0, 1, 0], &[1, 0, 1], 2).unwrap();
        assert_eq!(anti.rows(), vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert!(matches!(empirical_transition(&[0, 0], &[0, 1], 3), Err(Error::UndefinedRow(1))));
    }

    #[test]
    fn parse_noise_args() {
        let names: Vec<String> = crate::sigsynth::Modulation::DIGITAL.iter().map(|m| m.name().to_string()).collect();
        let a: NoiseArg = "sym:0.8".parse().unwrap();
        assert_eq!(a.resolve(&names, 1).unwrap(), NoiseSpec::symmetric(0.8, 1));
        let f: NoiseArg = "flip:QAM16-QAM64,QPSK-8PSK:0.6".parse().unwrap();
        assert_eq!(
            f.resolve(&names, 1).unwrap().kind,
            NoiseKind::FlipOne { pairs: vec![(3, 4), (1, 2)] }
        );
        let m: NoiseArg = "mixed:0.6".parse().unwrap();
        assert_eq!(m.resolve(&names, 1).unwrap().kind, NoiseKind::Mixed { pairs: vec![(3, 4), (1, 2)] });
        assert_eq!(m.to_string().parse::<NoiseArg>().unwrap(), m);
        assert!("sym".parse::<NoiseArg>().is_err());
        assert!("flip:QAM16-FOO:0.3".parse::<NoiseArg>().unwrap().resolve(&names, 0).is_err());
    }
}
