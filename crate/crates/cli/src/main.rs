use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tshn_core::config::RunConfig;
use tshn_core::evalbench::{evaluate, format_table1, prepare, run_experiment, sweep, Method};
use tshn_core::gradnet::load_checkpoint;
use tshn_core::mvs::MvsConfig;
use tshn_core::sigsynth::{generate_dataset, read_dataset, write_dataset, Dataset, Modulation};
use tshn_core::Error;

#[derive(Parser)]
#[command(name = "tshn", version, about = "Label-noise distillation for modulation classification")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a labeled IQ dataset.
    Synth(SynthArgs),
    /// Train one model and evaluate it on the test split.
    Train(TrainArgs),
    /// Run a rate x method x seed grid and write aggregate reports.
    Sweep(SweepArgs),
    /// Re-evaluate a finished run from its checkpoint.
    Eval(EvalArgs),
}

#[derive(Args, Default)]
struct DataArgs {
    /// Class count (first N of the default list) or comma-separated names.
    #[arg(long)]
    classes: Option<String>,
    #[arg(long)]
    per_class: Option<usize>,
    /// Comma-separated SNRs in dB.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    snrs: Option<Vec<i16>>,
    #[arg(long)]
    sample_len: Option<usize>,
    /// Synthesis seed.
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Same as --data-seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Run name; artifacts go to <out-dir>/<name>.
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Read this dataset directory instead of synthesizing.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run seed. Falls back to the config, then TSHN_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// sym:0.8, flip:QAM16-QAM64,QPSK-8PSK:0.6 or mixed:0.6
    #[arg(long)]
    noise: Option<String>,
    #[arg(long)]
    trusted_frac: Option<f64>,
    #[arg(long)]
    trusted_per_class: Option<usize>,
    /// N=4,views=20[,min=8], or `off`.
    #[arg(long)]
    mvs: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    synth: DataArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// tshn, ce (alias cnn2), mae, gce or glc.
    #[arg(long)]
    method: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    rates: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Print the accuracy table with the improvement row.
    #[arg(long)]
    emit_table1: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    run: PathBuf,
    #[arg(long, default_value = "final.ckpt")]
    checkpoint: String,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidArgument(msg.into()).into()
}

fn parse_mvs(s: &str) -> Result<Option<MvsConfig>> {
    if matches!(s, "off" | "none") {
        return Ok(None);
    }
    let mut cfg = MvsConfig::default();
    for kv in s.split(',').filter(|t| !t.is_empty()) {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("bad --mvs item `{kv}`")))?;
        let v: usize = v.trim().parse().map_err(|_| usage(format!("bad --mvs value `{kv}`")))?;
        match k.trim() {
            "N" | "n" | "segments" => cfg.n_segments = v,
            "views" | "V" => cfg.views_per_sample = v,
            "min" => cfg.min_segment_len = v,
            _ => return Err(usage(format!("unknown --mvs key `{k}`"))),
        }
    }
    Ok(Some(cfg))
}

fn parse_classes(s: &str) -> Result<Vec<String>> {
    if let Ok(n) = s.trim().parse::<usize>() {
        return Ok(Modulation::default_set(n)?.iter().map(|m| m.name().to_string()).collect());
    }
    let names: Vec<String> = s.split(',').map(|t| t.trim().to_string()).collect();
    for n in &names {
        n.parse::<Modulation>()?;
    }
    Ok(names)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?),
        None => Ok(RunConfig::default()),
    }
}

fn apply_data(cfg: &mut RunConfig, a: &DataArgs) -> Result<()> {
    if let Some(c) = &a.classes {
        cfg.data.classes = parse_classes(c)?;
    }
    if let Some(v) = a.per_class {
        cfg.data.per_class = v;
    }
    if let Some(v) = &a.snrs {
        cfg.data.snrs = v.clone();
    }
    if let Some(v) = a.sample_len {
        cfg.data.sample_len = v;
    }
    if let Some(v) = a.data_seed {
        cfg.data.seed = v;
    }
    Ok(())
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("TSHN_SEED") {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| usage(format!("TSHN_SEED=`{s}` is not an integer"))),
        Err(_) => Ok(None),
    }
}

/// Config file, then flags on top. The resolved seed is written back so the
/// snapshot alone reproduces the run.
fn build_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = load_config(a.config.as_deref())?;
    apply_data(&mut cfg, &a.synth)?;
    if let Some(v) = &a.name {
        cfg.name = v.clone();
    }
    if let Some(v) = &a.out_dir {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = &a.data {
        cfg.data.dir = Some(v.clone());
    }
    if let Some(v) = &a.noise {
        cfg.noise = v.clone();
    }
    if let Some(v) = a.trusted_frac {
        cfg.split.trusted_fraction = v;
        cfg.split.trusted_per_class = None;
    }
    if let Some(v) = a.trusted_per_class {
        cfg.split.trusted_per_class = Some(v);
    }
    if let Some(v) = &a.mvs {
        cfg.mvs = parse_mvs(v)?;
    }
    if let Some(v) = a.episodes {
        cfg.train.episodes = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    cfg.seed = Some(match a.seed.or(cfg.seed) {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    });
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.dir {
        Some(dir) => {
            let (_, ds) = read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
            Ok(ds)
        }
        None => {
            let req = cfg.data.request()?;
            let (manifest, records) = generate_dataset(&req)?;
            Ok(Dataset { class_names: manifest.class_names, sample_len: manifest.sample_len, records })
        }
    }
}

fn prepare_run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(dir)
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    apply_data(&mut cfg, &a.data)?;
    if let Some(s) = a.seed {
        cfg.data.seed = s;
    }
    let req = cfg.data.request()?;
    let (manifest, records) = generate_dataset(&req)?;
    fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    write_dataset(&a.output, &manifest, &records)?;
    println!("{}", serde_json::to_string_pretty(&manifest)?);
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = build_config(&a.run)?;
    if let Some(m) = &a.method {
        cfg.eval.method = m.parse()?;
    }
    let exp = cfg.experiment(cfg.eval.method)?;
    let seed = cfg.seed.unwrap_or(0);
    let dataset = load_dataset(&cfg)?;
    // Surfaces split and noise errors before anything is written.
    prepare(&dataset, &exp, seed)?;
    let dir = prepare_run_dir(&cfg)?;
    let record = run_experiment(&dataset, &exp, seed, Some(&dir))?;
    eprintln!("run written to {}", dir.display());
    println!("{}", serde_json::to_string_pretty(&record)?);
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let mut cfg = build_config(&a.run)?;
    if let Some(ms) = &a.methods {
        cfg.eval.methods = ms.iter().map(|m| m.parse()).collect::<tshn_core::Result<Vec<Method>>>()?;
    }
    if let Some(r) = &a.rates {
        cfg.eval.rates = r.clone();
    }
    if let Some(s) = &a.seeds {
        cfg.eval.seeds = s.clone();
    }
    if let Some(j) = a.jobs {
        cfg.eval.jobs = j;
    }
    if cfg.eval.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let base = cfg.experiment(cfg.eval.method)?;
    let dataset = load_dataset(&cfg)?;
    let dir = prepare_run_dir(&cfg)?;
    let out = sweep(&dataset, &base, &cfg.sweep_spec(), &dir, cfg.eval.jobs)?;
    for f in &out.failures {
        eprintln!("run {} failed: {}", f.key, f.error);
    }
    if out.records.is_empty() {
        bail!("all {} runs failed", out.failures.len());
    }
    if !out.note.is_empty() {
        eprintln!("{}", out.note);
    }
    let mut stdout = std::io::stdout().lock();
    if a.emit_table1 {
        let table = format_table1(&out.reports);
        fs::write(dir.join("table1.txt"), &table)?;
        writeln!(stdout, "{table}")?;
    } else {
        for r in &out.reports {
            writeln!(
                stdout,
                "{:<10} {:<28} mean {:.4} std {:.4} (n={})",
                r.method.to_string() + if r.mvs { "+mvs" } else { "" },
                r.noise,
                r.mean,
                r.std,
                r.per_seed.len()
            )?;
        }
    }
    eprintln!("reports written to {}", dir.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.run.join("config.toml")).context("run directory has no readable config.toml")?;
    let seed = cfg.seed.unwrap_or(0);
    let exp = cfg.experiment(cfg.eval.method)?;
    let dataset = load_dataset(&cfg)?;
    let prep = prepare(&dataset, &exp, seed)?;
    let path = a.run.join("ckpt").join(&a.checkpoint);
    let mut r = std::io::BufReader::new(fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?);
    let ckpt = load_checkpoint(&mut r)?;
    let eval = evaluate(&ckpt.net, &prep.test, dataset.n_classes())?;
    fs::write(a.run.join("eval.json"), serde_json::to_string_pretty(&eval)?)?;
    println!("{}", serde_json::to_string_pretty(&eval)?);
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|e| e.downcast_ref::<Error>().is_some_and(Error::is_usage));
    if usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
