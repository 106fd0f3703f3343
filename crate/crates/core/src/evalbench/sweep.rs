use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{evaluate, snr_label, train_baseline, BaselineSpec, SnrAccuracy};
use crate::distiller::{clean_fraction, train_tshn, LossConfig, TrainConfig, TrainingData};
use crate::error::{Error, Result};
use crate::mvs::{expand_trusted, MvsConfig};
use crate::noiselab::{corrupt, write_ledger_csv, CorruptionRecord, NoiseArg, NoiseSpec};
use crate::rng::{self, stream};
use crate::sigsynth::{split_dataset, Dataset, SignalRecord, SplitRatios, TrustedSelection};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Tshn,
    Ce,
    Mae,
    Gce,
    Glc,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Tshn, Method::Ce, Method::Mae, Method::Gce, Method::Glc];

    pub fn name(self) -> &'static str {
        match self {
            Method::Tshn => "tshn",
            Method::Ce => "ce",
            Method::Mae => "mae",
            Method::Gce => "gce",
            Method::Glc => "glc",
        }
    }

    fn table_name(self) -> &'static str {
        match self {
            Method::Tshn => "TSHN",
            Method::Ce => "CE",
            Method::Mae => "MAE",
            Method::Gce => "GCE",
            Method::Glc => "GLC",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .or_else(|| s.trim().eq_ignore_ascii_case("cnn2").then_some(Method::Ce))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}`")))
    }
}

/// Everything needed to turn a dataset and a seed into one trained and evaluated run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub noise: NoiseArg,
    pub split: SplitRatios,
    pub trusted: TrustedSelection,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub mvs: Option<MvsConfig>,
    pub gce_q: f64,
}

impl ExperimentConfig {
    pub fn new(method: Method, noise: NoiseArg) -> Self {
        Self {
            method,
            noise,
            split: SplitRatios::default(),
            trusted: TrustedSelection::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            mvs: None,
            gce_q: 0.7,
        }
    }

    /// File-safe run key, e.g. `tshn_sym0.80_s1` or `tshn-mvs_flip0.60_s2`.
    pub fn key(&self, seed: u64) -> String {
        let m = if self.mvs.is_some() { format!("{}-mvs", self.method) } else { self.method.to_string() };
        format!("{m}_{}{:.2}_s{seed}", self.noise.kind, self.noise.rate)
    }
}

/// Label purity of the untrusted pool and of the purified set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Purity {
    pub pool_size: usize,
    pub pool_clean: f64,
    pub dp_size: usize,
    pub dp_clean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub key: String,
    pub method: Method,
    pub mvs: bool,
    pub noise: String,
    pub rate: f64,
    pub seed: u64,
    pub trusted: usize,
    pub accuracy: f64,
    pub chance: f64,
    pub per_snr: Vec<SnrAccuracy>,
    pub confusion: Vec<Vec<usize>>,
    pub purity: Option<Purity>,
    pub wall_clock_s: f64,
}

/// Splits, corrupted labels and optional views for one seed.
pub struct Prepared {
    pub data: TrainingData,
    pub test: Vec<SignalRecord>,
    pub ledger: Vec<CorruptionRecord>,
    pub noise: NoiseSpec,
}

pub fn prepare(dataset: &Dataset, exp: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let splits = split_dataset(&dataset.records, &dataset.class_names, exp.split, exp.trusted, seed)?;
    let n = dataset.n_classes();
    let noise = exp.noise.resolve(&dataset.class_names, rng::derive_seed(seed, stream::NOISE))?;
    let labels: Vec<usize> = splits.untrusted.iter().map(|r| usize::from(r.label)).collect();
    let ids: Vec<u64> = splits.untrusted.iter().map(|r| r.id).collect();
    let (observed, ledger) = corrupt(&labels, &ids, &noise, n)?;
    let views = match &exp.mvs {
        Some(m) => {
            let next = dataset.records.iter().map(|r| r.id).max().map_or(0, |m| m + 1);
            let cfg = MvsConfig { seed: rng::derive_seed(seed, stream::MVS), ..m.clone() };
            let (all, _) = expand_trusted(&splits.trusted, &cfg, next)?;
            all[splits.trusted.len()..].to_vec()
        }
        None => Vec::new(),
    };
    let data = TrainingData {
        n_classes: n,
        sample_len: dataset.sample_len,
        trusted: splits.trusted,
        untrusted: splits.untrusted,
        observed,
        val: splits.val,
        views,
    };
    Ok(Prepared { data, test: splits.test, ledger, noise })
}

/// Train and evaluate one run. With `out_dir`, the trainer's artifacts plus
/// `noise_ledger.csv` and `report.json` are written there.
pub fn run_experiment(dataset: &Dataset, exp: &ExperimentConfig, seed: u64, out_dir: Option<&Path>) -> Result<RunRecord> {
    let start = Instant::now();
    let prep = prepare(dataset, exp, seed)?;
    let train = TrainConfig { seed, ..exp.train.clone() };
    let n = dataset.n_classes();
    let (net, purity) = match exp.method {
        Method::Tshn => {
            let out = train_tshn(&prep.data, &train, &exp.loss, out_dir)?;
            let truth: HashMap<u64, (usize, usize)> =
                prep.ledger.iter().map(|c| (c.id, (c.true_label, c.observed_label))).collect();
            let pool: Vec<u64> = prep.ledger.iter().map(|c| c.id).collect();
            let t = |id: u64| truth[&id].0;
            let o = |id: u64| truth[&id].1;
            let purity = Purity {
                pool_size: pool.len(),
                pool_clean: clean_fraction(&pool, t, o).unwrap_or(0.0),
                dp_size: out.partition.d_p.len(),
                dp_clean: clean_fraction(&out.partition.d_p, t, o),
            };
            (out.net, Some(purity))
        }
        m => {
            let spec = match m {
                Method::Ce => BaselineSpec::Ce,
                Method::Mae => BaselineSpec::Mae,
                Method::Gce => BaselineSpec::Gce { q: exp.gce_q },
                _ => BaselineSpec::Glc,
            };
            (train_baseline(&prep.data, spec, &train, out_dir)?.net, None)
        }
    };
    let eval = evaluate(&net, &prep.test, n)?;
    let record = RunRecord {
        key: exp.key(seed),
        method: exp.method,
        mvs: exp.mvs.is_some(),
        noise: exp.noise.to_string(),
        rate: exp.noise.rate,
        seed,
        trusted: prep.data.trusted.len(),
        accuracy: eval.accuracy,
        chance: eval.chance,
        per_snr: eval.per_snr,
        confusion: eval.confusion,
        purity,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    if let Some(d) = out_dir {
        fs::create_dir_all(d)?;
        write_ledger_csv(File::create(d.join("noise_ledger.csv"))?, &prep.ledger)?;
        serde_json::to_writer_pretty(File::create(d.join("report.json"))?, &record)?;
    }
    Ok(record)
}

/// Cross product of noise rates, methods and seeds around a base experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub rates: Vec<f64>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
}

/// Seed-averaged result for one (method, rate) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub mvs: bool,
    pub noise: String,
    pub rate: f64,
    pub trusted: usize,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub per_snr: Vec<SnrAccuracy>,
    pub confusion: Vec<Vec<usize>>,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub key: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub records: Vec<RunRecord>,
    pub reports: Vec<RunReport>,
    /// TSHN mean minus CE mean in accuracy points, keyed by rate.
    pub tshn_gain: Vec<(f64, f64)>,
    pub failures: Vec<RunFailure>,
    pub note: String,
}

fn aggregate(records: &[RunRecord]) -> Vec<RunReport> {
    let mut cells: BTreeMap<(Method, bool, String), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        cells.entry((r.method, r.mvs, r.noise.clone())).or_default().push(r);
    }
    let mut out: Vec<RunReport> = cells
        .into_values()
        .map(|rs| {
            let k = rs.len() as f64;
            let per_seed: Vec<f64> = rs.iter().map(|r| r.accuracy).collect();
            let mean = per_seed.iter().sum::<f64>() / k;
            let std = (per_seed.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / k).sqrt();
            let mut snr: BTreeMap<i16, (usize, f64, usize)> = BTreeMap::new();
            for s in rs.iter().flat_map(|r| &r.per_snr) {
                let e = snr.entry(s.snr_db).or_default();
                e.0 += s.count;
                e.1 += s.accuracy;
                e.2 += 1;
            }
            let n = rs[0].confusion.len();
            let mut confusion = vec![vec![0; n]; n];
            for r in &rs {
                for (i, row) in r.confusion.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        confusion[i][j] += v;
                    }
                }
            }
            RunReport {
                method: rs[0].method,
                mvs: rs[0].mvs,
                noise: rs[0].noise.clone(),
                rate: rs[0].rate,
                trusted: rs[0].trusted,
                seeds: rs.iter().map(|r| r.seed).collect(),
                per_seed,
                mean,
                std,
                per_snr: snr
                    .into_iter()
                    .map(|(snr_db, (count, acc, m))| SnrAccuracy { snr_db, count, accuracy: acc / m as f64 })
                    .collect(),
                confusion,
                wall_clock_s: rs.iter().map(|r| r.wall_clock_s).sum(),
            }
        })
        .collect();
    out.sort_by(|a, b| (a.method, a.mvs).cmp(&(b.method, b.mvs)).then(a.rate.total_cmp(&b.rate)));
    out
}

/// TSHN mean minus CE mean, in accuracy points, for every rate that has both.
pub fn tshn_gain(reports: &[RunReport]) -> Vec<(f64, f64)> {
    let find = |m: Method, rate: f64| reports.iter().find(|r| r.method == m && !r.mvs && r.rate == rate);
    let mut rates: Vec<f64> = reports.iter().map(|r| r.rate).collect();
    rates.sort_by(f64::total_cmp);
    rates.dedup();
    rates
        .into_iter()
        .filter_map(|rate| Some((rate, 100.0 * (find(Method::Tshn, rate)?.mean - find(Method::Ce, rate)?.mean))))
        .collect()
}

/// Accuracy (%) table with one row per method, one column per rate, and a `TSHN(↑)` row.
pub fn format_table1(reports: &[RunReport]) -> String {
    let mut rates: Vec<f64> = reports.iter().map(|r| r.rate).collect();
    rates.sort_by(f64::total_cmp);
    rates.dedup();
    let mut s = format!("{:<10}", "Method");
    for r in &rates {
        s += &format!(" {r:>7.1}");
    }
    s.push('\n');
    let mut rows: Vec<(Method, bool)> = reports.iter().map(|r| (r.method, r.mvs)).collect();
    rows.sort();
    rows.dedup();
    for (m, mvs) in rows {
        let name = if mvs { format!("{}+MVS", m.table_name()) } else { m.table_name().to_string() };
        s += &format!("{name:<10}");
        for &rate in &rates {
            match reports.iter().find(|r| r.method == m && r.mvs == mvs && r.rate == rate) {
                Some(r) => s += &format!(" {:>7.2}", 100.0 * r.mean),
                None => s += &format!(" {:>7}", "-"),
            }
        }
        s.push('\n');
    }
    let gain = tshn_gain(reports);
    if !gain.is_empty() {
        s += &format!("{:<10}", "TSHN(↑)");
        for &rate in &rates {
            match gain.iter().find(|g| g.0 == rate) {
                Some((_, g)) => s += &format!(" {g:>7.2}"),
                None => s += &format!(" {:>7}", "-"),
            }
        }
        s.push('\n');
    }
    s
}

const NOTE: &str = "accuracy over every SNR tag present in the test split; chance = majority-class frequency";

fn write_reports(dir: &Path, outcome: &SweepOutcome) -> Result<()> {
    let mut csv = csv::Writer::from_path(dir.join("report.csv"))?;
    csv.write_record(["method", "noise", "rate", "seed", "accuracy"])?;
    for r in &outcome.records {
        let m = if r.mvs { format!("{}+mvs", r.method) } else { r.method.to_string() };
        csv.write_record([m, r.noise.clone(), r.rate.to_string(), r.seed.to_string(), format!("{:.6}", r.accuracy)])?;
    }
    csv.flush()?;
    serde_json::to_writer_pretty(File::create(dir.join("report.json"))?, outcome)?;
    let mut snr = csv::Writer::from_path(dir.join("snr_accuracy.csv"))?;
    snr.write_record(["method", "noise", "rate", "seed", "snr_db", "count", "accuracy"])?;
    for r in &outcome.records {
        write_confusion(&dir.join(format!("confusion_{}.csv", r.key)), &r.confusion)?;
        for s in &r.per_snr {
            snr.write_record([
                r.method.to_string(),
                r.noise.clone(),
                r.rate.to_string(),
                r.seed.to_string(),
                snr_label(s.snr_db),
                s.count.to_string(),
                format!("{:.6}", s.accuracy),
            ])?;
        }
    }
    snr.flush()?;
    Ok(())
}

fn write_confusion(path: &Path, m: &[Vec<usize>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in m {
        w.write_record(row.iter().map(usize::to_string))?;
    }
    w.flush()?;
    Ok(())
}

/// Run every (rate, method, seed) cell, `jobs` at a time. Each finished run is
/// stored as `runs/<key>.json`; existing files are loaded instead of rerun,
/// so an interrupted sweep resumes where it stopped. Failed runs are
/// recorded and the sweep continues.
pub fn sweep(
    dataset: &Dataset,
    base: &ExperimentConfig,
    spec: &SweepSpec,
    out_dir: &Path,
    jobs: usize,
) -> Result<SweepOutcome> {
    if spec.rates.is_empty() || spec.methods.is_empty() || spec.seeds.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one rate, method and seed".into()));
    }
    let runs_dir = out_dir.join("runs");
    fs::create_dir_all(&runs_dir)?;
    let mut cells = Vec::new();
    for &rate in &spec.rates {
        for &method in &spec.methods {
            for &seed in &spec.seeds {
                let exp = ExperimentConfig { method, noise: NoiseArg { rate, ..base.noise.clone() }, ..base.clone() };
                cells.push((exp, seed));
            }
        }
    }
    let results: Mutex<Vec<Option<std::result::Result<RunRecord, String>>>> = Mutex::new(vec![None; cells.len()]);
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some((exp, seed)) = cells.get(i) else { break };
        let key = exp.key(*seed);
        let path = runs_dir.join(format!("{key}.json"));
        let done = fs::read(&path).ok().and_then(|b| serde_json::from_slice::<RunRecord>(&b).ok());
        let res = match done {
            Some(r) => Ok(r),
            None => run_experiment(dataset, exp, *seed, None).map_err(|e| e.to_string()).and_then(|r| {
                let tmp = path.with_extension("json.tmp");
                serde_json::to_vec_pretty(&r)
                    .map_err(|e| e.to_string())
                    .and_then(|b| fs::write(&tmp, b).and_then(|_| fs::rename(&tmp, &path)).map_err(|e| e.to_string()))
                    .map(|_| r)
            }),
        };
        results.lock().expect("sweep results lock")[i] = Some(res);
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1) {
            s.spawn(worker);
        }
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for ((exp, seed), res) in cells.iter().zip(results.into_inner().expect("sweep results lock")) {
        match res {
            Some(Ok(r)) => records.push(r),
            Some(Err(e)) => failures.push(RunFailure { key: exp.key(*seed), error: e }),
            None => failures.push(RunFailure { key: exp.key(*seed), error: "not run".into() }),
        }
    }
    let reports = aggregate(&records);
    let outcome = SweepOutcome { tshn_gain: tshn_gain(&reports), reports, records, failures, note: NOTE.into() };
    write_reports(out_dir, &outcome)?;
    Ok(outcome)
}
