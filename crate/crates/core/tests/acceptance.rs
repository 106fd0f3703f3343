//! Acceptance runner: one PASS/FAIL line per criterion.
//!
//! The property criteria always run. The desk-set training criteria run only
//! with `TSHN_ACCEPTANCE=full`; otherwise they print SKIP. Finished runs are
//! cached under `target/acceptance-runs`, so an interrupted full pass resumes.

mod common;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use tshn_core::config::DataConfig;
use tshn_core::distiller::{forward_corrected_ce, smoothed_ce};
use tshn_core::evalbench::{sweep, ExperimentConfig, Method, RunRecord, SweepSpec};
use tshn_core::mvs::MvsConfig;
use tshn_core::noiselab::{NoiseKind, TransitionMatrix};
use tshn_core::protomind::{soft_label, Distance, PrototypeBank, Similarity};
use tshn_core::sigsynth::{generate_dataset, Dataset, TrustedSelection};

const SEEDS: [u64; 3] = [1, 2, 3];

#[derive(Default)]
struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, id: &str, pass: bool, detail: String, start: Instant) {
        let tag = if pass { "PASS" } else { "FAIL" };
        self.failed += usize::from(!pass);
        println!("{tag} [{id}] {detail} ({:.1}s)", start.elapsed().as_secs_f64());
    }

    fn skip(&self, id: &str, what: &str) {
        println!("SKIP [{id}] {what} (set TSHN_ACCEPTANCE=full)");
    }
}

fn gradients(r: &mut Report) {
    let t = Instant::now();
    let worst = common::gradcheck::ALL
        .iter()
        .map(|(name, f)| (*name, f()))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let secs = t.elapsed().as_secs_f64();
    let pass = worst.1 < common::gradcheck::TOL && secs < 120.0;
    r.line("1", pass, format!("gradients: worst relative error {:.2e} ({})", worst.1, worst.0), t);
}

fn noise_fidelity(r: &mut Report) {
    let t = Instant::now();
    let pairs = vec![(3, 4), (1, 2)];
    let kinds = [NoiseKind::Symmetric, NoiseKind::FlipOne { pairs: pairs.clone() }, NoiseKind::Mixed { pairs }];
    let mut worst = 0.0f64;
    let mut boundary = 0;
    for (k, kind) in kinds.iter().enumerate() {
        for step in 1..=9u64 {
            let rate = step as f64 / 10.0;
            worst = worst.max(common::noise_gap(kind.clone(), rate, 8, 100_000, 100 * k as u64 + step));
        }
        boundary += common::noise_boundary_violations(kind.clone(), 8, 100_000, 5);
    }
    let pass = worst <= 0.03 && boundary == 0 && t.elapsed().as_secs_f64() < 60.0;
    r.line("2", pass, format!("noise fidelity: worst ℓ∞ {worst:.4}, boundary violations {boundary}"), t);
}

fn analytic_losses(r: &mut Report) {
    let t = Instant::now();
    // Direct formulas, written out independently of the library.
    let ln = f64::ln;
    let smooth_ref = 0.5 * -ln(0.9) + 0.25 * (-ln(0.9) - ln(0.1));
    let fwd_ref = -ln(0.8 * 0.6 + 0.3 * 0.4);
    let e = std::f64::consts::E;
    let soft_ref = [e / (e + 1.0 / e), (1.0 / e) / (e + 1.0 / e)];

    let smooth = smoothed_ce(&[ln(0.9), ln(0.1)], 0, 0.5);
    let c = TransitionMatrix::from_rows(vec![vec![0.8, 0.2], vec![0.3, 0.7]]).unwrap();
    let fwd = forward_corrected_ce(&[ln(0.6), ln(0.4)], 0, &c);
    let mut bank = PrototypeBank::new(2, 1.0, 1, 0).unwrap();
    bank.ema_update(&[(0, vec![1.0, 0.0]), (1, vec![-1.0, 0.0])]).unwrap();
    let soft = soft_label(&[1.0, 0.0], &bank, &Similarity { distance: Distance::NegCosine, scale: 1.0 }).unwrap().p;

    let errs = [(smooth - smooth_ref).abs(), (fwd - fwd_ref).abs(), (soft[0] - soft_ref[0]).abs(), (soft[1] - soft_ref[1]).abs()];
    let worst = errs.iter().copied().fold(0.0, f64::max);
    r.line(
        "3",
        worst <= 1e-4,
        format!("analytic losses: smoothed {smooth:.6}, forward {fwd:.6}, soft [{:.4}, {:.4}], worst gap {worst:.1e}", soft[0], soft[1]),
        t,
    );
}

fn glc_toy(r: &mut Report) {
    let t = Instant::now();
    let err = common::glc_toy_error(5);
    r.line("9", err <= 0.15, format!("GLC toy: ℓ∞(Ĉ, C*) {err:.4}"), t);
}

fn mvs_invariants(r: &mut Report) {
    let t = Instant::now();
    let bad = common::mvs_violations(10_000, 2024);
    r.line("10", bad == 0, format!("MVS invariants: {bad} violations in 10^4 trials"), t);
}

fn determinism(r: &mut Report) {
    let t = Instant::now();
    let bad = common::determinism_mismatches();
    r.line("11", bad.is_empty(), format!("determinism: mismatched artifacts {bad:?}"), t);
}

/// Desk set: 8 digital classes × {0, 10, 18} dB × 200, L = 128.
fn desk_set() -> Dataset {
    let (m, records) = generate_dataset(&DataConfig::default().request().unwrap()).unwrap();
    Dataset { class_names: m.class_names, sample_len: m.sample_len, records }
}

struct Desk {
    data: Dataset,
    root: PathBuf,
}

impl Desk {
    /// Runs (or loads) every (rate, method, seed) cell of one experiment group.
    fn runs(&self, base: &ExperimentConfig, methods: &[Method], rates: &[f64]) -> Vec<RunRecord> {
        let mut h = DefaultHasher::new();
        serde_json::to_string(base).unwrap().hash(&mut h);
        let dir = self.root.join(format!("{}_{:016x}", base.noise.kind, h.finish()));
        let spec = SweepSpec { rates: rates.to_vec(), methods: methods.to_vec(), seeds: SEEDS.to_vec() };
        let out = sweep(&self.data, base, &spec, &dir, 1).expect("sweep");
        for f in &out.failures {
            eprintln!("run {} failed: {}", f.key, f.error);
        }
        out.records
    }
}

fn pick<'a>(runs: &'a [RunRecord], method: Method, mvs: bool, rate: f64) -> Vec<&'a RunRecord> {
    runs.iter().filter(|r| r.method == method && r.mvs == mvs && (r.rate - rate).abs() < 1e-9).collect()
}

fn mean(runs: &[&RunRecord]) -> f64 {
    if runs.is_empty() {
        return f64::NAN;
    }
    runs.iter().map(|r| r.accuracy).sum::<f64>() / runs.len() as f64
}

fn desk_criteria(r: &mut Report) {
    let t = Instant::now();
    let desk = Desk {
        data: desk_set(),
        root: PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance-runs"),
    };

    let sym = ExperimentConfig::new(Method::Tshn, "sym:0".parse().unwrap());
    let mut runs = desk.runs(&sym, &[Method::Tshn], &[0.0, 0.3, 0.5, 0.8, 1.0]);
    runs.extend(desk.runs(&sym, &[Method::Ce], &[0.0, 0.8, 1.0]));

    let t4 = Instant::now();
    let mut margins = Vec::new();
    for rate in [0.3, 0.5, 0.8] {
        for run in pick(&runs, Method::Tshn, false, rate) {
            let p = run.purity.as_ref().and_then(|p| p.dp_clean).unwrap_or(f64::NAN);
            margins.push((rate, run.seed, p - (1.0 - rate)));
        }
    }
    let worst = margins.iter().copied().min_by(|a, b| a.2.total_cmp(&b.2));
    let pass = margins.len() == 9 && margins.iter().all(|m| m.2 >= 0.05);
    let detail = match worst {
        Some((rate, seed, m)) => format!("purification: worst D_p clean-fraction margin {m:+.3} (η={rate}, seed {seed}) over {} runs", margins.len()),
        None => "purification: no runs".into(),
    };
    r.line("4", pass, detail, t4);

    let t5 = Instant::now();
    let acc = |m: Method, rate: f64| mean(&pick(&runs, m, false, rate));
    let gain08 = 100.0 * (acc(Method::Tshn, 0.8) - acc(Method::Ce, 0.8));
    let gain10 = 100.0 * (acc(Method::Tshn, 1.0) - acc(Method::Ce, 1.0));
    let drop_tshn = acc(Method::Tshn, 0.0) - acc(Method::Tshn, 0.8);
    let drop_ce = acc(Method::Ce, 0.0) - acc(Method::Ce, 0.8);
    let gains_ok = gain08 >= 15.0 && gain10 >= 15.0;
    let drop_ok = drop_tshn <= drop_ce / 3.0;
    r.line(
        "5",
        gains_ok && drop_ok,
        format!(
            "robustness: TSHN−CE {gain08:+.2} pts at η=0.8, {gain10:+.2} pts at η=1.0 (need ≥15: {}); drop TSHN {:.2} vs CE {:.2} pts (need ≤ 1/3: {})",
            ok(gains_ok),
            100.0 * drop_tshn,
            100.0 * drop_ce,
            ok(drop_ok)
        ),
        t5,
    );

    let t6 = Instant::now();
    let gap = 100.0 * (acc(Method::Tshn, 0.0) - acc(Method::Ce, 0.0));
    r.line(
        "6",
        gap.abs() <= 3.0,
        format!("clean labels: TSHN {:.2}% vs CE {:.2}%, gap {gap:+.2} pts", 100.0 * acc(Method::Tshn, 0.0), 100.0 * acc(Method::Ce, 0.0)),
        t6,
    );

    let t7 = Instant::now();
    let mixed = ExperimentConfig::new(Method::Tshn, "mixed:0.8".parse().unwrap());
    let runs = desk.runs(&mixed, &[Method::Tshn, Method::Ce], &[0.8]);
    let (a, b) = (mean(&pick(&runs, Method::Tshn, false, 0.8)), mean(&pick(&runs, Method::Ce, false, 0.8)));
    let gain = 100.0 * (a - b);
    r.line("7", gain >= 15.0, format!("mixed noise η=0.8: TSHN {:.2}% vs CE {:.2}%, gain {gain:+.2} pts", 100.0 * a, 100.0 * b), t7);

    let t8 = Instant::now();
    let mut hard = ExperimentConfig::new(Method::Tshn, "flip:0.4".parse().unwrap());
    hard.trusted = TrustedSelection::PerClass(5);
    let plain = desk.runs(&hard, &[Method::Tshn], &[0.4]);
    hard.mvs = Some(MvsConfig { views_per_sample: 20, ..Default::default() });
    let views = desk.runs(&hard, &[Method::Tshn], &[0.4]);
    let (a, b) = (mean(&pick(&views, Method::Tshn, true, 0.4)), mean(&pick(&plain, Method::Tshn, false, 0.4)));
    let diff = 100.0 * (a - b);
    r.line("8", diff >= -1.0, format!("MVS on hard pairs: TSHN+MVS {:.2}% vs TSHN {:.2}%, diff {diff:+.2} pts", 100.0 * a, 100.0 * b), t8);

    println!("desk-set criteria finished in {:.1} min", t.elapsed().as_secs_f64() / 60.0);
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "no"
    }
}

fn main() -> ExitCode {
    // Ignore libtest flags such as `--nocapture` or a name filter.
    let full = std::env::var("TSHN_ACCEPTANCE").is_ok_and(|v| v == "full");
    let mut r = Report::default();
    gradients(&mut r);
    noise_fidelity(&mut r);
    analytic_losses(&mut r);
    glc_toy(&mut r);
    mvs_invariants(&mut r);
    determinism(&mut r);
    if full {
        desk_criteria(&mut r);
    } else {
        for (id, what) in [
            ("4", "purification on the desk set"),
            ("5", "robustness trend on the desk set"),
            ("6", "no harm on clean labels"),
            ("7", "mixed-noise trend"),
            ("8", "MVS benefit on hard pairs"),
        ] {
            r.skip(id, what);
        }
    }
    if r.failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{} criteria failed", r.failed);
        ExitCode::FAILURE
    }
}
