//! Reverse-mode gradients against central finite differences, in f64, for
//! every tape op, every loss and the full embedding network. Each check
//! returns the worst relative error over `SEEDS` random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tshn_core::distiller::{forward_corrected_rows, gce_rows, mae_rows, phase2_loss, smoothed_ce_rows, SetTerm};
use tshn_core::gradnet::loss::{cosine_rows, cross_entropy_rows, cross_entropy_sum};
use tshn_core::gradnet::{Architecture, EmbeddingNetwork, Mode, ParamStore, Tape, Tensor, Var};
use tshn_core::noiselab::TransitionMatrix;
use tshn_core::protomind::teacher_losses;

pub const SEEDS: u64 = 20;
pub const TOL: f64 = 1e-4;
const H: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values away from zero so ReLU/abs kinks are never within `H`.
fn rand_signed(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = rand_tensor(rng, shape, 0.05, 1.0);
    t.data_mut().iter_mut().for_each(|v| {
        if rng.random::<bool>() {
            *v = -*v
        }
    });
    t
}

fn eval(store: &ParamStore<f64>, f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) -> (Tape<f64>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = (0..store.len()).map(|i| tape.param(store, i)).collect();
    let out = f(&mut tape, &vars);
    (tape, out)
}

/// Largest relative error between analytic and numeric gradients.
fn max_rel_error(store: &ParamStore<f64>, f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let (tape, out) = eval(store, f);
    assert_eq!(tape.value(out).len(), 1, "objective must be scalar");
    let grads = tape.backward(out, store).unwrap();
    let mut worst = 0.0f64;
    for id in 0..store.len() {
        for k in 0..store.get(id).value.len() {
            let at = |delta: f64| {
                let mut s = store.clone();
                s.get_mut(id).value.data_mut()[k] += delta;
                let (t, o) = eval(&s, f);
                t.value(o).data()[0]
            };
            let numeric = (at(H) - at(-H)) / (2.0 * H);
            let analytic = grads.get(id).data()[k];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    worst
}

type Case = (ParamStore<f64>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>);

/// Worst error of `case` over `SEEDS` random instances.
fn check(case: impl Fn(&mut ChaCha8Rng) -> Case) -> f64 {
    (0..SEEDS)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 13);
            let (store, f) = case(&mut rng);
            max_rel_error(&store, f.as_ref())
        })
        .fold(0.0, f64::max)
}

fn store(tensors: Vec<Tensor<f64>>) -> ParamStore<f64> {
    let mut s = ParamStore::default();
    for (i, t) in tensors.into_iter().enumerate() {
        s.push(&format!("p{i}"), t);
    }
    s
}

/// Reduces any tensor to a scalar with fixed random weights, so every
/// output element gets a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Var {
    let n = tape.value(x).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = tape.mul_const(x, w);
    tape.sum(y)
}

fn labels(rng: &mut ChaCha8Rng, b: usize, n: usize) -> Vec<usize> {
    (0..b).map(|_| rng.random_range(0..n)).collect()
}

pub fn conv2d() -> f64 {
    check(|rng| {
        let (b, c, h, w) = (2, rng.random_range(1..3), rng.random_range(2..4), rng.random_range(5..8));
        let (f, kh, kw) = (rng.random_range(1..4), rng.random_range(1..=h), 3);
        let s = store(vec![
            rand_signed(rng, &[b, c, h, w]),
            rand_signed(rng, &[f, c, kh, kw]),
            rand_signed(rng, &[f]),
        ]);
        (s, Box::new(|t: &mut Tape<f64>, v: &[Var]| {
            let y = t.conv2d(v[0], v[1], v[2]);
            weighted_sum(t, y, 1)
        }))
    })
}

pub fn linear_relu_dropout() -> f64 {
    check(|rng| {
        let (b, d, o) = (rng.random_range(1..4), rng.random_range(2..6), rng.random_range(2..5));
        let mask: Vec<f64> = (0..b * o).map(|_| if rng.random::<bool>() { 2.0 } else { 0.0 }).collect();
        let s = store(vec![rand_signed(rng, &[b, d]), rand_signed(rng, &[o, d]), rand_signed(rng, &[o])]);
        (s, Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.linear(v[0], v[1], v[2]);
            let y = t.dropout(y, mask.clone());
            // Evaluate ReLU on the input too, where values are bounded away from 0.
            let r = t.relu(v[0]);
            let a = weighted_sum(t, y, 2);
            let c = weighted_sum(t, r, 3);
            t.add(a, c)
        }))
    })
}

pub fn shape_ops() -> f64 {
    check(|rng| {
        let (b, n) = (rng.random_range(2..5), rng.random_range(2..5));
        let idx = labels(rng, b, n);
        let s = store(vec![rand_signed(rng, &[b, n])]);
        (s, Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let r = t.reshape(v[0], &[b * n]);
            let r = t.reshape(r, &[b, n]);
            let top = t.slice_rows(r, 1, b);
            let sr = t.sum_rows(top);
            let pk = t.pick(v[0], &idx);
            let a = weighted_sum(t, sr, 4);
            let c = weighted_sum(t, pk, 5);
            t.add(a, c)
        }))
    })
}

pub fn softmax_family() -> f64 {
    check(|rng| {
        let (b, n) = (rng.random_range(1..4), rng.random_range(2..6));
        let s = store(vec![rand_tensor(rng, &[b, n], -3.0, 3.0)]);
        (s, Box::new(|t: &mut Tape<f64>, v: &[Var]| {
            let p = t.softmax(v[0]);
            let l = t.log_softmax(v[0]);
            let a = weighted_sum(t, p, 6);
            let c = weighted_sum(t, l, 7);
            t.add(a, c)
        }))
    })
}

pub fn matmuls_and_normalize() -> f64 {
    check(|rng| {
        let (m, k, n) = (rng.random_range(1..4), rng.random_range(2..5), rng.random_range(1..4));
        let s = store(vec![rand_signed(rng, &[m, k]), rand_signed(rng, &[k, n]), rand_signed(rng, &[n, k])]);
        (s, Box::new(|t: &mut Tape<f64>, v: &[Var]| {
            let ab = t.matmul(v[0], v[1]);
            let abt = t.matmul_bt(v[0], v[2]);
            let na = t.normalize_rows(v[0]);
            let cos = cosine_rows(t, v[0], v[2]);
            let parts = [weighted_sum(t, ab, 8), weighted_sum(t, abt, 9), weighted_sum(t, na, 10), weighted_sum(t, cos, 11)];
            let x = t.add(parts[0], parts[1]);
            let y = t.add(parts[2], parts[3]);
            t.add(x, y)
        }))
    })
}

pub fn elementwise() -> f64 {
    check(|rng| {
        let n = rng.random_range(2..7);
        let s = store(vec![rand_tensor(rng, &[n], 0.2, 2.0), rand_signed(rng, &[n])]);
        (s, Box::new(|t: &mut Tape<f64>, v: &[Var]| {
            let a = t.add(v[0], v[1]);
            let d = t.sub(v[0], v[1]);
            let m = t.mul(a, d);
            let sc = t.scale(m, 0.7);
            let sh = t.add_scalar(sc, 3.0);
            let lg = t.log(v[0]);
            let cl = t.clamp_min(v[0], 0.01);
            let ab = t.abs(v[1]);
            let pw = t.powf(v[0], 0.7);
            let parts = [sh, lg, cl, ab, pw].map(|x| weighted_sum(t, x, 12));
            parts[1..].iter().fold(parts[0], |acc, &x| t.add(acc, x))
        }))
    })
}

fn logits_case(rng: &mut ChaCha8Rng) -> (usize, usize, Vec<usize>, ParamStore<f64>) {
    let (b, n) = (rng.random_range(1..5), rng.random_range(2..6));
    let y = labels(rng, b, n);
    (b, n, y, store(vec![rand_tensor(rng, &[b, n], -2.0, 2.0)]))
}

pub fn cross_entropy() -> f64 {
    check(|rng| {
        let (_, _, y, s) = logits_case(rng);
        (s, Box::new(move |t: &mut Tape<f64>, v: &[Var]| cross_entropy_sum(t, v[0], &y)))
    })
}

pub fn smoothed_cross_entropy() -> f64 {
    check(|rng| {
        let (_, _, y, s) = logits_case(rng);
        let eps = rng.random_range(0.05..0.95);
        (s, Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let r = smoothed_ce_rows(t, v[0], &y, eps);
            t.sum(r)
        }))
    })
}

fn random_stochastic(rng: &mut ChaCha8Rng, n: usize) -> TransitionMatrix {
    let rows = (0..n)
        .map(|_| {
            let r: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = r.iter().sum();
            r.into_iter().map(|v| v / s).collect()
        })
        .collect();
    TransitionMatrix::from_rows(rows).unwrap()
}

pub fn forward_corrected_cross_entropy() -> f64 {
    check(|rng| {
        let (_, n, y, s) = logits_case(rng);
        let c = random_stochastic(rng, n);
        (s, Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let (r, clamped) = forward_corrected_rows(t, v[0], &y, &c);
            assert_eq!(clamped, 0);
            t.sum(r)
        }))
    })
}

pub fn mae_and_gce() -> f64 {
    check(|rng| {
        let (_, _, y, s) = logits_case(rng);
        let q = rng.random_range(0.1..1.0);
        (s, Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let m = mae_rows(t, v[0], &y);
            let g = gce_rows(t, v[0], &y, q);
            let a = t.sum(m);
            let b = t.sum(g);
            t.add(a, b)
        }))
    })
}

pub fn masked_teacher_loss() -> f64 {
    check(|rng| {
        let (bt, bu, n) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(2..5));
        let yt = labels(rng, bt, n);
        let yu = labels(rng, bu, n);
        // Mixed mask with at least one retained row.
        let mut mask: Vec<f64> = (0..bu).map(|_| f64::from(u8::from(rng.random::<bool>()))).collect();
        mask[0] = 1.0;
        let s = store(vec![rand_tensor(rng, &[bt, n], -2.0, 2.0), rand_tensor(rng, &[bu, n], -2.0, 2.0)]);
        (s, Box::new(move |t: &mut Tape<f64>, v: &[Var]| teacher_losses(t, v[0], &yt, Some((v[1], &yu, &mask))).total))
    })
}

pub fn divide_and_conquer_objective() -> f64 {
    check(|rng| {
        let n = rng.random_range(2..5);
        let sizes = [rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4)];
        let ys: Vec<Vec<usize>> = sizes.iter().map(|&b| labels(rng, b, n)).collect();
        let c = random_stochastic(rng, n);
        let s = store(sizes.iter().map(|&b| rand_tensor(rng, &[b, n], -2.0, 2.0)).collect());
        (s, Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let lt = cross_entropy_rows(t, v[0], &ys[0]);
            let lp = smoothed_ce_rows(t, v[1], &ys[1], 0.5);
            let (lu, _) = forward_corrected_rows(t, v[2], &ys[2], &c);
            let terms: Vec<SetTerm> = [lt, lp, lu]
                .iter()
                .zip(&ys)
                .enumerate()
                .map(|(i, (&r, y))| SetTerm { sum: t.sum(r), batch: y.len(), set_size: y.len() * (i + 2) })
                .collect();
            phase2_loss(t, &terms)
        }))
    })
}

pub fn embedding_network() -> f64 {
    let mut overall = 0.0f64;
    for seed in 0..SEEDS {
        let arch = Architecture {
            n_classes: 3,
            sample_len: 12,
            conv1_filters: 2,
            conv1_kernel: 3,
            conv2_filters: 2,
            conv2_kernel: 3,
            feature_dim: 4,
            dropout: 0.5,
        };
        let net = EmbeddingNetwork::<f64>::new(arch, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_signed(&mut rng, &[2, 2, 12]);
        let y = labels(&mut rng, 2, 3);
        let objective = |params: &ParamStore<f64>| {
            let net = EmbeddingNetwork::from_params(net.arch().clone(), params.clone()).unwrap();
            let mut tape = Tape::new();
            // Same dropout mask for every evaluation.
            let out = net.forward(&mut tape, &x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
            let l = cross_entropy_sum(&mut tape, out.logits, &y);
            let f = weighted_sum(&mut tape, out.features, 5);
            let total = tape.add(l, f);
            (tape, total)
        };
        let (tape, total) = objective(net.params());
        let grads = tape.backward(total, net.params()).unwrap();
        let mut worst = 0.0f64;
        for id in 0..net.params().len() {
            for k in 0..net.params().get(id).value.len() {
                let at = |d: f64| {
                    let mut p = net.params().clone();
                    p.get_mut(id).value.data_mut()[k] += d;
                    let (t, o) = objective(&p);
                    t.value(o).data()[0]
                };
                let numeric = (at(H) - at(-H)) / (2.0 * H);
                let analytic = grads.get(id).data()[k];
                worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3));
            }
        }
        overall = overall.max(worst);
    }
    overall
}

pub const ALL: &[(&str, fn() -> f64)] = &[
    ("conv2d", conv2d),
    ("linear/relu/dropout", linear_relu_dropout),
    ("reshape/slice_rows/sum_rows/pick", shape_ops),
    ("softmax/log_softmax", softmax_family),
    ("matmul/matmul_bt/normalize_rows/cosine", matmuls_and_normalize),
    ("elementwise ops", elementwise),
    ("cross entropy", cross_entropy),
    ("smoothed CE", smoothed_cross_entropy),
    ("forward-corrected CE", forward_corrected_cross_entropy),
    ("MAE/GCE", mae_and_gce),
    ("masked teacher loss", masked_teacher_loss),
    ("phase-2 objective", divide_and_conquer_objective),
    ("embedding network", embedding_network),
];
