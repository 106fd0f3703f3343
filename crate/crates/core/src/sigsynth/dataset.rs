//! On-disk dataset: `dataset.sig` (binary records) plus `manifest.json`.
//!
//! Binary layout, all little-endian:
//!
//! ```text
//! "SIG1" | version u16 | N u16 | L u32 | N × (len u16, UTF-8 class name)
//! records until EOF: id u64 | label u16 | snr_db i16 | 2·L f32 (I row, then Q row)
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{synthesize, ChannelSpec, Modulation, SignalRecord, MIN_SAMPLE_LEN};
use crate::error::{Error, Result};
use crate::rng;

pub const FORMAT_VERSION: u16 = 1;
pub const DATASET_FILE: &str = "dataset.sig";
pub const MANIFEST_FILE: &str = "manifest.json";
const MAGIC: &[u8; 4] = b"SIG1";

/// Per-record random impairments applied on top of AWGN.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Impairments {
    /// Draw the carrier phase uniformly from `[0, 2π)`.
    pub random_phase: bool,
    /// CFO drawn uniformly from `[-max_cfo, max_cfo]` cycles/sample.
    pub max_cfo: f64,
    /// SRO drawn uniformly from `[-max_sro, max_sro]`.
    pub max_sro: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRequest {
    pub classes: Vec<Modulation>,
    /// Records per (class, SNR) stratum.
    pub per_class: usize,
    pub snrs: Vec<i16>,
    pub sample_len: usize,
    pub samples_per_symbol: usize,
    pub seed: u64,
    pub impairments: Impairments,
}

impl DatasetRequest {
    pub fn new(classes: Vec<Modulation>, per_class: usize, snrs: Vec<i16>, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            snrs,
            sample_len: super::DEFAULT_SAMPLE_LEN,
            samples_per_symbol: super::DEFAULT_SAMPLES_PER_SYMBOL,
            seed,
            impairments: Impairments::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 || self.classes.len() > usize::from(u16::MAX) {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        let mut seen = self.classes.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.classes.len() {
            return Err(Error::InvalidArgument("duplicate class in class list".into()));
        }
        if self.per_class == 0 || self.snrs.is_empty() {
            return Err(Error::InvalidCounts("per-class count and SNR grid must be nonempty".into()));
        }
        if let Some(s) = self.snrs.iter().find(|s| !(-20..=30).contains(*s)) {
            return Err(Error::InvalidArgument(format!("SNR {s} dB outside [-20, 30]")));
        }
        if self.sample_len < MIN_SAMPLE_LEN || self.samples_per_symbol == 0 {
            return Err(Error::InvalidArgument("bad sample length or samples per symbol".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratumCount {
    pub class: String,
    pub snr_db: i16,
    pub count: usize,
}

/// Links an augmented record back to the record it was derived from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub id: u64,
    pub source_id: u64,
}

/// JSON sidecar mirroring the binary header, plus counts and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u16,
    pub class_names: Vec<String>,
    pub sample_len: usize,
    pub samples_per_symbol: usize,
    pub seed: u64,
    pub impairments: Impairments,
    pub counts: Vec<StratumCount>,
    pub total_records: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub provenance: Vec<Provenance>,
}

impl DatasetManifest {
    /// Recount strata from `records`.
    pub fn count(class_names: &[String], records: &[SignalRecord]) -> Vec<StratumCount> {
        let mut map: BTreeMap<(u16, i16), usize> = BTreeMap::new();
        for r in records {
            *map.entry((r.label, r.snr_db)).or_default() += 1;
        }
        map.into_iter()
            .map(|((label, snr_db), count)| StratumCount {
                class: class_names[usize::from(label)].clone(),
                snr_db,
                count,
            })
            .collect()
    }
}

/// Records in memory together with their class list.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub sample_len: usize,
    pub records: Vec<SignalRecord>,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// Synthesize `per_class` records for every (class, SNR) pair.
///
/// Record `k` (in class-major, SNR-minor order) gets id `k` and its own
/// seed derived from the request seed, so output is independent of how the
/// work is scheduled.
pub fn generate_dataset(req: &DatasetRequest) -> Result<(DatasetManifest, Vec<SignalRecord>)> {
    req.validate()?;
    let mut records = Vec::with_capacity(req.classes.len() * req.snrs.len() * req.per_class);
    let mut idx = 0u64;
    for (label, &scheme) in req.classes.iter().enumerate() {
        for &snr in &req.snrs {
            for _ in 0..req.per_class {
                let seed = rng::derive_seed(req.seed, idx);
                let mut imp = rng::child(seed, 2);
                let im = &req.impairments;
                let chan = ChannelSpec {
                    snr_db: Some(f64::from(snr)),
                    phase_offset: if im.random_phase { imp.random_range(0.0..std::f64::consts::TAU) } else { 0.0 },
                    cfo_normalized: if im.max_cfo > 0.0 { imp.random_range(-im.max_cfo..=im.max_cfo) } else { 0.0 },
                    sro: if im.max_sro > 0.0 { imp.random_range(-im.max_sro..=im.max_sro) } else { 0.0 },
                };
                records.push(synthesize(
                    idx,
                    scheme,
                    label as u16,
                    &chan,
                    req.samples_per_symbol,
                    req.sample_len,
                    seed,
                )?);
                idx += 1;
            }
        }
    }
    let class_names: Vec<String> = req.classes.iter().map(|m| m.name().to_string()).collect();
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        counts: DatasetManifest::count(&class_names, &records),
        class_names,
        sample_len: req.sample_len,
        samples_per_symbol: req.samples_per_symbol,
        seed: req.seed,
        impairments: req.impairments,
        total_records: records.len(),
        provenance: Vec::new(),
    };
    Ok((manifest, records))
}

pub fn write_records(w: &mut impl Write, class_names: &[String], sample_len: usize, records: &[SignalRecord]) -> Result<()> {
    let n = u16::try_from(class_names.len()).map_err(|_| Error::InvalidArgument("too many classes".into()))?;
    let l = u32::try_from(sample_len).map_err(|_| Error::InvalidArgument("sample length too large".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&n.to_le_bytes())?;
    w.write_all(&l.to_le_bytes())?;
    for name in class_names {
        let b = name.as_bytes();
        let len = u16::try_from(b.len()).map_err(|_| Error::InvalidArgument("class name too long".into()))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(b)?;
    }
    let mut buf = Vec::with_capacity(12 + 8 * sample_len);
    for r in records {
        if r.len() != sample_len || r.iq.len() != 2 * sample_len {
            return Err(Error::Shape(format!("record {} has length {}, expected {sample_len}", r.id, r.len())));
        }
        buf.clear();
        buf.extend_from_slice(&r.id.to_le_bytes());
        buf.extend_from_slice(&r.label.to_le_bytes());
        buf.extend_from_slice(&r.snr_db.to_le_bytes());
        for v in &r.iq {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_records(r: &mut impl Read) -> Result<Dataset> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(at..at + n).ok_or_else(|| Error::Format("truncated dataset header".into()))?;
        at += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let n = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
    let sample_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut class_names = Vec::with_capacity(n);
    for _ in 0..n {
        let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(len)?).map_err(|_| Error::Format("class name is not UTF-8".into()))?;
        class_names.push(name.to_string());
    }
    let rec_size = 12 + 8 * sample_len;
    let body = &bytes[at..];
    if body.len() % rec_size != 0 {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    let records = body
        .chunks_exact(rec_size)
        .map(|c| {
            let rec = SignalRecord {
                id: u64::from_le_bytes(c[0..8].try_into().unwrap()),
                label: u16::from_le_bytes(c[8..10].try_into().unwrap()),
                snr_db: i16::from_le_bytes(c[10..12].try_into().unwrap()),
                iq: c[12..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect(),
            };
            rec.validate(n).map(|_| rec)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { class_names, sample_len, records })
}

/// Write `dataset.sig` and `manifest.json` into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, manifest: &DatasetManifest, records: &[SignalRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(DATASET_FILE))?);
    write_records(&mut w, &manifest.class_names, manifest.sample_len, records)?;
    w.flush()?;
    let mut m = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    serde_json::to_writer_pretty(&mut m, manifest)?;
    m.write_all(b"\n")?;
    m.flush()?;
    Ok(())
}

/// Read a dataset directory and check the manifest agrees with the records.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Dataset)> {
    let manifest: DatasetManifest = serde_json::from_reader(BufReader::new(File::open(dir.join(MANIFEST_FILE))?))?;
    let ds = read_records(&mut BufReader::new(File::open(dir.join(DATASET_FILE))?))?;
    if manifest.class_names != ds.class_names || manifest.sample_len != ds.sample_len {
        return Err(Error::Format("manifest header disagrees with dataset file".into()));
    }
    if manifest.total_records != ds.records.len() || manifest.counts != DatasetManifest::count(&ds.class_names, &ds.records) {
        return Err(Error::InvalidCounts("manifest counts disagree with dataset file".into()));
    }
    Ok((manifest, ds))
}
