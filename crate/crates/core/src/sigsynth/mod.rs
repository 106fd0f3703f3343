//! Synthetic IQ modulation records.
//!
//! A record is the received baseband waveform `r = C(s) + n`: a clean
//! modulated signal `s` normalized to unit average power, passed through
//! optional sample-rate offset, carrier frequency offset and phase rotation,
//! plus complex AWGN at the requested SNR. SNR is measured as average signal
//! power over average noise power across the whole record.
//!
//! Pulses are rectangular. When the record length is not a multiple of the
//! samples-per-symbol, the last symbol is truncated.

mod dataset;
mod split;

use std::f64::consts::{FRAC_PI_4, PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use dataset::{
    generate_dataset, read_dataset, read_records, write_dataset, write_records, Dataset, DatasetManifest,
    DatasetRequest, Impairments, Provenance, StratumCount, DATASET_FILE, FORMAT_VERSION, MANIFEST_FILE,
};
pub use split::{split_dataset, SplitRatios, Splits, TrustedSelection};

pub const DEFAULT_SAMPLE_LEN: usize = 128;
pub const DEFAULT_SAMPLES_PER_SYMBOL: usize = 8;
pub const MIN_SAMPLE_LEN: usize = 16;
/// SNR tag stored on records synthesized without noise.
pub const NOISELESS_SNR_TAG: i16 = i16::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modulation {
    Bpsk,
    Qpsk,
    Psk8,
    Qam16,
    Qam64,
    Pam4,
    Cpfsk,
    Bfsk,
    AmDsb,
    AmSsb,
    Wbfm,
}

impl Modulation {
    /// Default eight-class digital set.
    pub const DIGITAL: [Modulation; 8] = [
        Modulation::Bpsk,
        Modulation::Qpsk,
        Modulation::Psk8,
        Modulation::Qam16,
        Modulation::Qam64,
        Modulation::Pam4,
        Modulation::Cpfsk,
        Modulation::Bfsk,
    ];

    /// Eleven classes: the digital set plus three analog schemes.
    pub const ELEVEN: [Modulation; 11] = [
        Modulation::Bpsk,
        Modulation::Qpsk,
        Modulation::Psk8,
        Modulation::Qam16,
        Modulation::Qam64,
        Modulation::Pam4,
        Modulation::Cpfsk,
        Modulation::Bfsk,
        Modulation::AmDsb,
        Modulation::AmSsb,
        Modulation::Wbfm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modulation::Bpsk => "BPSK",
            Modulation::Qpsk => "QPSK",
            Modulation::Psk8 => "8PSK",
            Modulation::Qam16 => "QAM16",
            Modulation::Qam64 => "QAM64",
            Modulation::Pam4 => "PAM4",
            Modulation::Cpfsk => "CPFSK",
            Modulation::Bfsk => "BFSK",
            Modulation::AmDsb => "AM-DSB",
            Modulation::AmSsb => "AM-SSB",
            Modulation::Wbfm => "WBFM",
        }
    }

    pub fn is_analog(self) -> bool {
        matches!(self, Modulation::AmDsb | Modulation::AmSsb | Modulation::Wbfm)
    }

    /// Default class list with `n` classes (8 or 11).
    pub fn default_set(n: usize) -> Result<Vec<Modulation>> {
        match n {
            8 => Ok(Self::DIGITAL.to_vec()),
            11 => Ok(Self::ELEVEN.to_vec()),
            2..=7 => Ok(Self::DIGITAL[..n].to_vec()),
            _ => Err(Error::InvalidArgument(format!("no default class list with {n} classes"))),
        }
    }
}

impl fmt::Display for Modulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_uppercase();
        let m = match key.as_str() {
            "BPSK" => Modulation::Bpsk,
            "QPSK" => Modulation::Qpsk,
            "8PSK" | "PSK8" => Modulation::Psk8,
            "QAM16" | "16QAM" => Modulation::Qam16,
            "QAM64" | "64QAM" => Modulation::Qam64,
            "PAM4" => Modulation::Pam4,
            "CPFSK" => Modulation::Cpfsk,
            "BFSK" => Modulation::Bfsk,
            "AMDSB" => Modulation::AmDsb,
            "AMSSB" => Modulation::AmSsb,
            "WBFM" => Modulation::Wbfm,
            _ => return Err(Error::UnsupportedModulation(s.to_string())),
        };
        Ok(m)
    }
}

/// Channel impairments for one record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    /// `None` means noiseless.
    pub snr_db: Option<f64>,
    /// Carrier frequency offset in cycles per sample.
    pub cfo_normalized: f64,
    /// Radians.
    pub phase_offset: f64,
    /// Sample-rate offset ratio; the receiver samples at `n * (1 + sro)`.
    pub sro: f64,
}

impl ChannelSpec {
    pub fn awgn(snr_db: f64) -> Self {
        Self { snr_db: Some(snr_db), ..Self::clean() }
    }

    pub fn clean() -> Self {
        Self { snr_db: None, cfo_normalized: 0.0, phase_offset: 0.0, sro: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.snr_db {
            if !(-20.0..=30.0).contains(&s) {
                return Err(Error::InvalidArgument(format!("snr_db {s} outside [-20, 30]")));
            }
        }
        if !(self.cfo_normalized.abs() < 0.5) {
            return Err(Error::InvalidArgument("|cfo_normalized| must be < 0.5".into()));
        }
        if !self.phase_offset.is_finite() || !(self.sro.abs() < 0.5) {
            return Err(Error::InvalidArgument("phase offset must be finite and |sro| < 0.5".into()));
        }
        Ok(())
    }

    pub fn snr_tag(&self) -> i16 {
        self.snr_db.map_or(NOISELESS_SNR_TAG, |s| s.round() as i16)
    }
}

/// One labeled IQ sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalRecord {
    pub id: u64,
    pub label: u16,
    pub snr_db: i16,
    /// `2 * L` values: the I row followed by the Q row.
    pub iq: Vec<f32>,
}

impl SignalRecord {
    pub fn len(&self) -> usize {
        self.iq.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.iq.is_empty()
    }

    pub fn i_row(&self) -> &[f32] {
        &self.iq[..self.len()]
    }

    pub fn q_row(&self) -> &[f32] {
        &self.iq[self.len()..]
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.iq.len() % 2 != 0 || self.len() < MIN_SAMPLE_LEN {
            return Err(Error::Format(format!("record {} has bad length {}", self.id, self.iq.len())));
        }
        if usize::from(self.label) >= n_classes {
            return Err(Error::Format(format!("record {} label {} out of range", self.id, self.label)));
        }
        if self.iq.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("record {} has non-finite samples", self.id)));
        }
        Ok(())
    }
}

type Cplx = (f64, f64);

fn psk(k: usize, m: usize, offset: f64) -> Cplx {
    let a = offset + TAU * k as f64 / m as f64;
    (a.cos(), a.sin())
}

/// Odd-integer grid `{-(m-1), .., m-1}` used by PAM/QAM.
fn level(k: usize, m: usize) -> f64 {
    2.0 * k as f64 - (m as f64 - 1.0)
}

fn linear_symbol<R: Rng>(scheme: Modulation, rng: &mut R) -> Cplx {
    match scheme {
        Modulation::Bpsk => (if rng.random::<bool>() { 1.0 } else { -1.0 }, 0.0),
        Modulation::Qpsk => psk(rng.random_range(0..4), 4, FRAC_PI_4),
        Modulation::Psk8 => psk(rng.random_range(0..8), 8, 0.0),
        Modulation::Qam16 => (level(rng.random_range(0..4), 4), level(rng.random_range(0..4), 4)),
        Modulation::Qam64 => (level(rng.random_range(0..8), 8), level(rng.random_range(0..8), 8)),
        Modulation::Pam4 => (level(rng.random_range(0..4), 4), 0.0),
        _ => unreachable!("not a linear scheme"),
    }
}

/// Smooth real message for the analog schemes: three random tones, peak-normalized.
fn message<R: Rng>(n: usize, rng: &mut R) -> (Vec<f64>, Vec<(f64, f64, f64)>) {
    let tones: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.random_range(0.3..1.0), rng.random_range(0.005..0.04), rng.random_range(0.0..TAU)))
        .collect();
    let m: Vec<f64> = (0..n)
        .map(|t| tones.iter().map(|&(a, f, p)| a * (TAU * f * t as f64 + p).cos()).sum())
        .collect();
    let peak = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1e-12);
    (m.into_iter().map(|v| v / peak).collect(), tones)
}

fn clean_baseband<R: Rng>(scheme: Modulation, n: usize, sps: usize, rng: &mut R) -> Vec<Cplx> {
    let n_sym = n.div_ceil(sps);
    match scheme {
        Modulation::Bpsk
        | Modulation::Qpsk
        | Modulation::Psk8
        | Modulation::Qam16
        | Modulation::Qam64
        | Modulation::Pam4 => (0..n_sym)
            .flat_map(|_| {
                let s = linear_symbol(scheme, rng);
                std::iter::repeat_n(s, sps)
            })
            .take(n)
            .collect(),
        Modulation::Cpfsk => {
            // h = 0.5, continuous phase
            let step = PI * 0.5 / sps as f64;
            let mut phase = 0.0f64;
            let mut out = Vec::with_capacity(n);
            for _ in 0..n_sym {
                let d = if rng.random::<bool>() { 1.0 } else { -1.0 };
                for _ in 0..sps {
                    out.push((phase.cos(), phase.sin()));
                    phase += d * step;
                }
            }
            out.truncate(n);
            out
        }
        Modulation::Bfsk => {
            // h = 1, each symbol restarts at a random phase
            let df = 1.0 / (2.0 * sps as f64);
            let mut out = Vec::with_capacity(n);
            for _ in 0..n_sym {
                let d = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let p0 = rng.random_range(0.0..TAU);
                for t in 0..sps {
                    let a = p0 + TAU * d * df * t as f64;
                    out.push((a.cos(), a.sin()));
                }
            }
            out.truncate(n);
            out
        }
        Modulation::AmDsb => {
            let (m, _) = message(n, rng);
            m.into_iter().map(|v| (1.0 + 0.5 * v, 0.0)).collect()
        }
        Modulation::AmSsb => {
            // upper sideband: analytic signal of the multi-tone message
            let (_, tones) = message(n, rng);
            (0..n)
                .map(|t| {
                    tones.iter().fold((0.0, 0.0), |(re, im), &(a, f, p)| {
                        let ang = TAU * f * t as f64 + p;
                        (re + a * ang.cos(), im + a * ang.sin())
                    })
                })
                .collect()
        }
        Modulation::Wbfm => {
            let (m, _) = message(n, rng);
            let kf = 0.08;
            let mut phase = 0.0f64;
            m.into_iter()
                .map(|v| {
                    phase += TAU * kf * v;
                    (phase.cos(), phase.sin())
                })
                .collect()
        }
    }
}

fn normalize_power(x: &mut [Cplx]) {
    let p = x.iter().map(|(a, b)| a * a + b * b).sum::<f64>() / x.len() as f64;
    if p > 0.0 {
        let s = p.sqrt().recip();
        x.iter_mut().for_each(|(a, b)| {
            *a *= s;
            *b *= s;
        });
    }
}

/// Synthesize the `2 × len` waveform (I row then Q row) for one record.
///
/// Signal and noise come from independent streams of `seed`, so the clean
/// component is the same for every SNR at a fixed seed.
pub fn synthesize_iq(
    scheme: Modulation,
    chan: &ChannelSpec,
    samples_per_symbol: usize,
    len: usize,
    seed: u64,
) -> Result<Vec<f32>> {
    if len < MIN_SAMPLE_LEN {
        return Err(Error::InvalidArgument(format!("sample length {len} < {MIN_SAMPLE_LEN}")));
    }
    if samples_per_symbol == 0 {
        return Err(Error::InvalidArgument("samples_per_symbol must be >= 1".into()));
    }
    chan.validate()?;
    let mut sig_rng = rng::child(seed, 0);
    let mut noise_rng = rng::child(seed, 1);

    let span = if chan.sro != 0.0 { (len as f64 * (1.0 + chan.sro.abs())).ceil() as usize + 2 } else { len };
    let raw = clean_baseband(scheme, span, samples_per_symbol, &mut sig_rng);
    let mut x: Vec<Cplx> = if chan.sro != 0.0 {
        (0..len)
            .map(|n| {
                let t = n as f64 * (1.0 + chan.sro);
                let k = (t.floor() as usize).min(raw.len() - 2);
                let fr = t - k as f64;
                let (a, b) = (raw[k], raw[k + 1]);
                (a.0 + fr * (b.0 - a.0), a.1 + fr * (b.1 - a.1))
            })
            .collect()
    } else {
        raw
    };
    normalize_power(&mut x);

    if chan.phase_offset != 0.0 || chan.cfo_normalized != 0.0 {
        for (n, s) in x.iter_mut().enumerate() {
            let a = chan.phase_offset + TAU * chan.cfo_normalized * n as f64;
            let (c, si) = (a.cos(), a.sin());
            *s = (s.0 * c - s.1 * si, s.0 * si + s.1 * c);
        }
    }

    if let Some(snr_db) = chan.snr_db {
        let sigma = (0.5 / 10f64.powf(snr_db / 10.0)).sqrt();
        for s in &mut x {
            let ni: f64 = StandardNormal.sample(&mut noise_rng);
            let nq: f64 = StandardNormal.sample(&mut noise_rng);
            s.0 += sigma * ni;
            s.1 += sigma * nq;
        }
    }

    let mut iq = Vec::with_capacity(2 * len);
    iq.extend(x.iter().map(|s| s.0 as f32));
    iq.extend(x.iter().map(|s| s.1 as f32));
    Ok(iq)
}

/// Synthesize one labeled record.
pub fn synthesize(
    id: u64,
    scheme: Modulation,
    label: u16,
    chan: &ChannelSpec,
    samples_per_symbol: usize,
    len: usize,
    seed: u64,
) -> Result<SignalRecord> {
    let iq = synthesize_iq(scheme, chan, samples_per_symbol, len, seed)?;
    Ok(SignalRecord { id, label, snr_db: chan.snr_tag(), iq })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_bpsk_is_antipodal_on_i() {
        let r = synthesize(0, Modulation::Bpsk, 0, &ChannelSpec::clean(), 8, 128, 3).unwrap();
        assert!(r.i_row().iter().all(|&v| v == 1.0 || v == -1.0));
        assert!(r.q_row().iter().all(|&v| v == 0.0));
        // constant within each symbol
        for sym in r.i_row().chunks(8) {
            assert!(sym.iter().all(|&v| v == sym[0]));
        }
        assert_eq!(r.snr_db, NOISELESS_SNR_TAG);
    }

    #[test]
    fn quarter_turn_maps_qpsk_onto_itself() {
        let rot = ChannelSpec { phase_offset: PI / 2.0, ..ChannelSpec::clean() };
        let r = synthesize(0, Modulation::Qpsk, 0, &rot, 8, 256, 11).unwrap();
        let h = std::f32::consts::FRAC_1_SQRT_2;
        for (&i, &q) in r.i_row().iter().zip(r.q_row()) {
            assert!((i.abs() - h).abs() < 1e-5 && (q.abs() - h).abs() < 1e-5, "({i}, {q})");
        }
    }

    #[test]
    fn truncates_partial_symbols() {
        let r = synthesize(0, Modulation::Qam16, 0, &ChannelSpec::clean(), 8, 20, 1).unwrap();
        assert_eq!(r.len(), 20);
    }

    #[test]
    fn every_scheme_has_unit_clean_power() {
        for m in Modulation::ELEVEN {
            let iq = synthesize_iq(m, &ChannelSpec::clean(), 8, 128, 5).unwrap();
            let p: f64 = iq.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / 128.0;
            assert!((p - 1.0).abs() < 1e-5, "{m}: {p}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!("OFDM".parse::<Modulation>(), Err(Error::UnsupportedModulation(_))));
        assert!(synthesize_iq(Modulation::Bpsk, &ChannelSpec::clean(), 8, 8, 0).is_err());
        assert!(synthesize_iq(Modulation::Bpsk, &ChannelSpec::awgn(40.0), 8, 128, 0).is_err());
        let bad = ChannelSpec { cfo_normalized: 0.5, ..ChannelSpec::clean() };
        assert!(synthesize_iq(Modulation::Bpsk, &bad, 8, 128, 0).is_err());
    }

    #[test]
    fn names_round_trip() {
        for m in Modulation::ELEVEN {
            assert_eq!(m.name().parse::<Modulation>().unwrap(), m);
        }
        assert_eq!("16qam".parse::<Modulation>().unwrap(), Modulation::Qam16);
    }

    #[test]
    fn same_seed_same_waveform() {
        let c = ChannelSpec::awgn(5.0);
        let a = synthesize_iq(Modulation::Cpfsk, &c, 8, 128, 77).unwrap();
        let b = synthesize_iq(Modulation::Cpfsk, &c, 8, 128, 77).unwrap();
        assert_eq!(a, b);
    }
}
