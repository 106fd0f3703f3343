//! TOML run configuration. Every section is optional; missing keys take the
//! defaults below and unknown keys are rejected.
//!
//! ```toml
//! name = "sym08"
//! seed = 1
//! noise = "sym:0.8"
//!
//! [data]
//! classes = ["BPSK", "QPSK", "8PSK", "QAM16", "QAM64", "PAM4", "CPFSK", "BFSK"]
//! per_class = 200
//! snrs = [0, 10, 18]
//!
//! [train]
//! episodes = 2000
//! epochs = 30
//!
//! [mvs]          # presence enables augmentation of the trusted pool
//! n_segments = 4
//! views_per_sample = 20
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distiller::{LossConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::evalbench::{ExperimentConfig, Method, SweepSpec};
use crate::mvs::MvsConfig;
use crate::noiselab::NoiseArg;
use crate::sigsynth::{DatasetRequest, Impairments, Modulation, SplitRatios, TrustedSelection};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Read an existing dataset instead of synthesizing one.
    pub dir: Option<PathBuf>,
    /// Synthesis seed, kept apart from the run seed so every run sees the same records.
    pub seed: u64,
    pub classes: Vec<String>,
    /// Records per (class, SNR) stratum.
    pub per_class: usize,
    pub snrs: Vec<i16>,
    pub sample_len: usize,
    pub samples_per_symbol: usize,
    pub impairments: Impairments,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            seed: 7,
            classes: Modulation::DIGITAL.iter().map(|m| m.name().to_string()).collect(),
            per_class: 200,
            snrs: vec![0, 10, 18],
            sample_len: crate::sigsynth::DEFAULT_SAMPLE_LEN,
            samples_per_symbol: crate::sigsynth::DEFAULT_SAMPLES_PER_SYMBOL,
            impairments: Impairments::default(),
        }
    }
}

impl DataConfig {
    pub fn request(&self) -> Result<DatasetRequest> {
        let classes = self.classes.iter().map(|c| c.parse()).collect::<Result<Vec<Modulation>>>()?;
        Ok(DatasetRequest {
            classes,
            per_class: self.per_class,
            snrs: self.snrs.clone(),
            sample_len: self.sample_len,
            samples_per_symbol: self.samples_per_symbol,
            seed: self.seed,
            impairments: self.impairments,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub trusted_fraction: f64,
    /// Overrides `trusted_fraction` with a fixed count per class.
    pub trusted_per_class: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train: 0.6, val: 0.2, test: 0.2, trusted_fraction: 0.01, trusted_per_class: None }
    }
}

impl SplitConfig {
    pub fn ratios(&self) -> SplitRatios {
        SplitRatios { train: self.train, val: self.val, test: self.test }
    }

    pub fn selection(&self) -> TrustedSelection {
        match self.trusted_per_class {
            Some(k) => TrustedSelection::PerClass(k),
            None => TrustedSelection::Fraction(self.trusted_fraction),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Method for single runs.
    pub method: Method,
    /// Grid for sweeps.
    pub methods: Vec<Method>,
    pub rates: Vec<f64>,
    pub seeds: Vec<u64>,
    pub gce_q: f64,
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            method: Method::Tshn,
            methods: vec![Method::Tshn, Method::Ce],
            rates: (0..=10).map(|i| f64::from(i) / 10.0).collect(),
            seeds: vec![1, 2, 3],
            gce_q: 0.7,
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub out_dir: PathBuf,
    /// Falls back to `TSHN_SEED`, then 0.
    pub seed: Option<u64>,
    pub noise: String,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub mvs: Option<MvsConfig>,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            out_dir: PathBuf::from("runs"),
            seed: None,
            noise: "sym:0.8".into(),
            data: DataConfig::default(),
            split: SplitConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            mvs: None,
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn noise_arg(&self) -> Result<NoiseArg> {
        self.noise.parse()
    }

    /// Checks everything that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        self.noise_arg()?;
        self.data.request()?;
        self.train.validate()?;
        self.loss.validate()?;
        if let Some(m) = &self.mvs {
            m.validate(self.data.sample_len)?;
        }
        if !(self.eval.gce_q > 0.0 && self.eval.gce_q <= 1.0) {
            return Err(Error::InvalidArgument(format!("GCE q = {} must be in (0, 1]", self.eval.gce_q)));
        }
        let s = &self.split;
        if s.trusted_per_class == Some(0) || !(s.trusted_fraction > 0.0 && s.trusted_fraction <= 1.0) {
            return Err(Error::InvalidArgument("trusted selection must be positive".into()));
        }
        Ok(())
    }

    pub fn experiment(&self, method: Method) -> Result<ExperimentConfig> {
        Ok(ExperimentConfig {
            method,
            noise: self.noise_arg()?,
            split: self.split.ratios(),
            trusted: self.split.selection(),
            train: self.train.clone(),
            loss: self.loss.clone(),
            mvs: self.mvs.clone(),
            gce_q: self.eval.gce_q,
        })
    }

    pub fn sweep_spec(&self) -> SweepSpec {
        SweepSpec { rates: self.eval.rates.clone(), methods: self.eval.methods.clone(), seeds: self.eval.seeds.clone() }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.name)
    }
}
