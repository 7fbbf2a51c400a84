//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.
//!
//! Every oracle here is written independently of the library internals: naive
//! loops over unpacked bits, full sorts, and scalar re-evaluations.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xmhash_core::autodiff::{analytic_gradients, numeric_gradients, Activation, Tape, Var};
use xmhash_core::dataset::generate_synthetic;
use xmhash_core::eval::{evaluate, EvalInput};
use xmhash_core::experiment::{evaluate_both, run_training, write_eval_artifacts, TIMINGS_FILE};
use xmhash_core::losses::{
    adversarial_discriminator_loss, adversarial_generator_loss, bit_balance_loss,
    contrastive_total, inter_modal_contrastive, intra_modal_contrastive, quantization_loss,
    total_loss, BatchCodes, ObjectiveOptions, Phase,
};
use xmhash_core::models::{DiscVars, HashVars};
use xmhash_core::retrieval::{binarize_and_pack, hamming, top_k};
use xmhash_core::trainer::train;
use xmhash_core::{
    AblationSwitch, BatchNormState, DiscriminatorNet, EvalConfig, HashNetwork, LossWeights, Matrix,
    Mode, RetrievalIndex, SyntheticConfig, TrainConfig,
};

type Outcome = Result<String, String>;

const FD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 20;

/// `-ln(e / (e + 2))`, evaluated separately in double precision.
const ORTHONORMAL_PAIR_LOSS: f64 = 0.5514447139320511;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

fn random_signs(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(
        rows,
        cols,
        |_, _| if rng.random_bool(0.5) { 1.0 } else { -1.0 },
    )
}

/// `‖out - target‖²` with a random target, so every output entry carries gradient.
fn reduce(tape: &mut Tape, out: Var, rng_seed: u64) -> xmhash_core::Result<Var> {
    let (r, c) = tape.value(out).shape();
    let target = random_matrix(&mut ChaCha8Rng::seed_from_u64(rng_seed), r, c, 1.0);
    tape.sq_dist_sum(out, &target)
}

/// Finite differences carry about `2^-52 · |L| / h` of rounding noise. Entries
/// where both gradients sit below this floor are exact zeros on the analytic
/// side (for example a bias cancelled by batch norm) and are counted separately.
const NOISE_FLOOR: f64 = 1e-9;

/// Relu inputs closer than this to the kink are resampled before a check.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Default)]
struct GradAudit {
    worst: f64,
    worst_name: String,
    checks: usize,
    entries: usize,
    at_floor: usize,
}

impl GradAudit {
    fn check(
        &mut self,
        name: &str,
        params: &[Matrix],
        loss: impl Fn(&mut Tape, &[Var]) -> xmhash_core::Result<Var>,
    ) -> Result<(), String> {
        let fail = |e: xmhash_core::Error| format!("{name}: {e}");
        let analytic = analytic_gradients(params, &loss).map_err(fail)?;
        let numeric = numeric_gradients(params, FD_STEP, &loss).map_err(fail)?;
        for (a, n) in analytic.iter().zip(&numeric) {
            for (&a, &n) in a.as_slice().iter().zip(n.as_slice()) {
                self.entries += 1;
                let scale = a.abs().max(n.abs());
                if scale < NOISE_FLOOR {
                    self.at_floor += 1;
                    continue;
                }
                let err = (a - n).abs() / scale;
                if err > self.worst {
                    self.worst = err;
                    self.worst_name = name.to_string();
                }
                if err > GRAD_TOL {
                    return Err(format!("{name}: analytic {a:e} vs numeric {n:e}"));
                }
            }
        }
        self.checks += 1;
        Ok(())
    }
}

fn away_from_kink(m: Matrix) -> Matrix {
    m.map(|v| {
        if v.abs() < KINK_MARGIN {
            v + 10.0 * KINK_MARGIN
        } else {
            v
        }
    })
}

fn min_abs(m: &Matrix) -> f64 {
    m.as_slice()
        .iter()
        .fold(f64::INFINITY, |a, v| a.min(v.abs()))
}

fn add_row(m: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |r, c| m.get(r, c) + b.get(0, c))
}

/// Smallest |relu input| of the discriminator over `streams`.
fn disc_margin(d: &[Matrix], streams: &[Matrix]) -> f64 {
    streams
        .iter()
        .map(|x| min_abs(&add_row(&x.matmul(&d[0]).unwrap(), &d[1])))
        .fold(f64::INFINITY, f64::min)
}

/// Smallest |relu input| of a hash network in train mode, recomputed by hand.
/// `p` is `[w1, b1, w2, b2, gamma, beta, w3, b3]`.
fn hash_margin(p: &[Matrix], batch: &Matrix) -> f64 {
    let h1 = add_row(&batch.matmul(&p[0]).unwrap(), &p[1]);
    let a1 = h1.map(|v| v.max(0.0));
    let h2 = add_row(&a1.matmul(&p[2]).unwrap(), &p[3]);
    let m = h2.rows() as f64;
    let z = Matrix::from_fn(h2.rows(), h2.cols(), |r, c| {
        let mean = (0..h2.rows()).map(|i| h2.get(i, c)).sum::<f64>() / m;
        let var = (0..h2.rows())
            .map(|i| (h2.get(i, c) - mean).powi(2))
            .sum::<f64>()
            / m;
        p[4].get(0, c) * (h2.get(r, c) - mean) / (var + 1e-5).sqrt() + p[5].get(0, c)
    });
    min_abs(&h1).min(min_abs(&z))
}

fn gradient_correctness() -> Outcome {
    let mut audit = GradAudit::default();
    for seed in 0..GRAD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(&mut rng, 5, 4, 1.0);
        let w = random_matrix(&mut rng, 4, 3, 1.0);
        let b = random_matrix(&mut rng, 1, 3, 1.0);
        audit.check("linear", &[x, w, b], |t, v| {
            let y = t.linear(v[0], v[1], v[2])?;
            reduce(t, y, seed)
        })?;
        for (name, kind) in [
            ("relu", Activation::Relu),
            ("tanh", Activation::Tanh),
            ("sigmoid", Activation::Sigmoid),
        ] {
            let z = away_from_kink(random_matrix(&mut rng, 4, 5, 2.0));
            audit.check(name, &[z], |t, v| {
                let y = t.activation(v[0], kind)?;
                reduce(t, y, seed + 1)
            })?;
        }
        let bn_in = vec![
            random_matrix(&mut rng, 8, 4, 2.0),
            random_matrix(&mut rng, 1, 4, 1.5),
            random_matrix(&mut rng, 1, 4, 1.0),
        ];
        audit.check("batchnorm/train", &bn_in, |t, v| {
            let mut st = BatchNormState::new(4);
            let y = t.batchnorm(v[0], v[1], v[2], &mut st)?;
            reduce(t, y, seed + 2)
        })?;
        let mut frozen = BatchNormState::new(4);
        frozen.mode = Mode::Eval;
        frozen.running_mean = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        frozen.running_var = (0..4).map(|_| rng.random_range(0.1..2.0)).collect();
        audit.check("batchnorm/eval", &bn_in, |t, v| {
            let mut st = frozen.clone();
            let y = t.batchnorm(v[0], v[1], v[2], &mut st)?;
            reduce(t, y, seed + 3)
        })?;
        let rows = random_matrix(&mut rng, 5, 8, 1.0);
        audit.check("row_l2_normalize", &[rows], |t, v| {
            let y = t.row_l2_normalize(v[0])?;
            reduce(t, y, seed + 4)
        })?;
        let pair = [
            random_matrix(&mut rng, 3, 4, 1.0),
            random_matrix(&mut rng, 5, 4, 1.0),
        ];
        audit.check("vstack/matmul_t", &pair, |t, v| {
            let s = t.vstack(&[v[0], v[1]])?;
            let y = t.matmul_t(s, v[1])?;
            reduce(t, y, seed + 5)
        })?;

        // losses over four code streams
        let h: Vec<Matrix> = (0..4).map(|_| random_matrix(&mut rng, 4, 8, 1.0)).collect();
        let target = random_signs(&mut rng, 4, 8);
        let d = loop {
            let d = DiscriminatorNet::new(8, 6, &mut rng);
            let p: Vec<Matrix> = d.params().iter().map(|p| p.value.clone()).collect();
            if disc_margin(&p, &h) > KINK_MARGIN {
                break d;
            }
        };
        let w = LossWeights::default();
        let codes = |v: &[Var]| BatchCodes {
            hi: v[0],
            hi_aug: v[1],
            ht: v[2],
            ht_aug: v[3],
            b_target: target.clone(),
        };
        audit.check("inter_modal_contrastive", &h, |t, v| {
            inter_modal_contrastive(t, v[0], v[2], w.tau)
        })?;
        audit.check("intra_modal_contrastive", &h, |t, v| {
            intra_modal_contrastive(t, v[0], v[1], w.tau)
        })?;
        audit.check("contrastive_total", &h, |t, v| {
            contrastive_total(t, &codes(v), &w)
        })?;
        audit.check("quantization", &h, |t, v| quantization_loss(t, &codes(v)))?;
        audit.check("bit_balance", &h, |t, v| bit_balance_loss(t, &codes(v)))?;
        audit.check("adversarial_generator", &h, |t, v| {
            let dv = d.bind(t);
            let image = t.vstack(&[v[0], v[1]])?;
            adversarial_generator_loss(t, &d, &dv, image)
        })?;
        let dparams: Vec<Matrix> = d.params().iter().map(|p| p.value.clone()).collect();
        let fixed = h.clone();
        audit.check("adversarial_discriminator", &dparams, |t, v| {
            let dv = DiscVars::from_slice(v);
            let streams: Vec<Var> = fixed.iter().map(|m| t.leaf(m.clone())).collect();
            adversarial_discriminator_loss(t, &d, &dv, &codes(&streams))
        })?;
        audit.check("total/generator", &h, |t, v| {
            let dv = d.bind(t);
            let opts = ObjectiveOptions::default();
            Ok(total_loss(t, &codes(v), &d, &dv, &w, Phase::Generator, opts)?.0)
        })?;
        audit.check("total/discriminator", &dparams, |t, v| {
            let dv = DiscVars::from_slice(v);
            let streams: Vec<Var> = fixed.iter().map(|m| t.leaf(m.clone())).collect();
            let opts = ObjectiveOptions::default();
            Ok(total_loss(t, &codes(&streams), &d, &dv, &w, Phase::Discriminator, opts)?.0)
        })?;

        // every hash-network parameter through the composite objective on a 4-sample batch
        let (params, inputs) = loop {
            let net = HashNetwork::new(5, 12, 8, &mut rng);
            let mut p: Vec<Matrix> = net.params().iter().map(|p| p.value.clone()).collect();
            p[1] = random_matrix(&mut rng, 1, 12, 0.5);
            p[3] = random_matrix(&mut rng, 1, 12, 0.5);
            p[7] = random_matrix(&mut rng, 1, 8, 0.5);
            let inputs = [
                random_matrix(&mut rng, 4, 5, 1.0),
                random_matrix(&mut rng, 4, 5, 1.0),
            ];
            if inputs.iter().all(|x| hash_margin(&p, x) > KINK_MARGIN) {
                break (p, inputs);
            }
        };
        let net = HashNetwork::new(5, 12, 8, &mut rng);
        let txt = [
            random_matrix(&mut rng, 4, 8, 1.0),
            random_matrix(&mut rng, 4, 8, 1.0),
        ];
        let d_codes: Vec<Matrix> = txt.to_vec();
        let d = loop {
            let d = DiscriminatorNet::new(8, 6, &mut rng);
            let p: Vec<Matrix> = d.params().iter().map(|p| p.value.clone()).collect();
            if disc_margin(&p, &d_codes) > KINK_MARGIN {
                break d;
            }
        };
        audit.check("hash_network/composite", &params, |t, v| {
            let vars = HashVars::from_slice(v);
            let mut f = net.clone();
            let x0 = t.leaf(inputs[0].clone());
            let x1 = t.leaf(inputs[1].clone());
            let hi = f.forward_with(t, &vars, x0, Mode::Train)?;
            let hi_aug = f.forward_with(t, &vars, x1, Mode::Train)?;
            let c = BatchCodes {
                hi,
                hi_aug,
                ht: t.leaf(txt[0].clone()),
                ht_aug: t.leaf(txt[1].clone()),
                b_target: target.clone(),
            };
            let dv = d.bind(t);
            Ok(total_loss(
                t,
                &c,
                &d,
                &dv,
                &w,
                Phase::Generator,
                ObjectiveOptions::default(),
            )?
            .0)
        })?;
    }
    Ok(format!(
        "{} checks over {GRAD_SEEDS} seeds, worst relative error {:.2e} ({}); {}/{} entries exactly zero within noise",
        audit.checks, audit.worst, audit.worst_name, audit.at_floor, audit.entries
    ))
}

fn leaf_codes(t: &mut Tape, h: [&Matrix; 4], target: Matrix) -> BatchCodes {
    BatchCodes {
        hi: t.leaf(h[0].clone()),
        hi_aug: t.leaf(h[1].clone()),
        ht: t.leaf(h[2].clone()),
        ht_aug: t.leaf(h[3].clone()),
        b_target: target,
    }
}

fn loss_oracles() -> Outcome {
    let mut t = Tape::new();
    let a = t.leaf(Matrix::from_rows(&[[0.4, -1.0, 2.5]]));
    let b = t.leaf(Matrix::from_rows(&[[-3.0, 0.1, 0.2]]));
    let single = inter_modal_contrastive(&mut t, a, b, 0.5).map_err(|e| e.to_string())?;
    if t.scalar(single) != 0.0 {
        return Err(format!("M=1 gives {}", t.scalar(single)));
    }
    let eye = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
    let a = t.leaf(eye.clone());
    let b = t.leaf(eye);
    let pair = inter_modal_contrastive(&mut t, a, b, 1.0).map_err(|e| e.to_string())?;
    let pair = t.scalar(pair);
    if (pair - ORTHONORMAL_PAIR_LOSS).abs() > 1e-9 {
        return Err(format!("orthonormal pair gives {pair}"));
    }
    let z = Matrix::zeros(1, 2);
    let c = leaf_codes(&mut t, [&z, &z, &z, &z], Matrix::from_rows(&[[1.0, -1.0]]));
    let q = quantization_loss(&mut t, &c).map_err(|e| e.to_string())?;
    let q = t.scalar(q);
    if (q - 4.0).abs() > 1e-12 {
        return Err(format!("quantization example gives {q}"));
    }
    let ones = Matrix::filled(2, 1, 1.0);
    let z2 = Matrix::zeros(2, 1);
    let c = leaf_codes(&mut t, [&ones, &z2, &z2, &z2], Matrix::filled(2, 1, 1.0));
    let bb = bit_balance_loss(&mut t, &c).map_err(|e| e.to_string())?;
    let bb = t.scalar(bb);
    if (bb - 2.0).abs() > 1e-12 {
        return Err(format!("bit balance example gives {bb}"));
    }
    Ok(format!(
        "M=1 -> 0, pair -> {pair:.12}, quantization -> {q}, balance -> {bb}"
    ))
}

fn unpack_bit(words: &[u64], j: usize) -> bool {
    words[j / 64] >> (j % 64) & 1 == 1
}

fn retrieval_equivalence() -> Outcome {
    let start = Instant::now();
    let mut compared = 0usize;
    for (s, bits) in [16usize, 32, 64, 128].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + s as u64);
        let a = random_signs(&mut rng, 1000, bits);
        let b = random_signs(&mut rng, 1000, bits);
        let (pa, pb) = (binarize_and_pack(&a), binarize_and_pack(&b));
        for i in 0..1000 {
            let naive = (0..bits).filter(|&j| a.get(i, j) != b.get(i, j)).count() as u32;
            let bitwise = (0..bits)
                .filter(|&j| unpack_bit(pa.code(i), j) != unpack_bit(pb.code(i), j))
                .count() as u32;
            let fast = hamming(pa.code(i), pb.code(i)).map_err(|e| e.to_string())?;
            if fast != naive || fast != bitwise {
                return Err(format!("B={bits} pair {i}: {fast} vs naive {naive}"));
            }
        }

        let codes = random_signs(&mut rng, 200, bits);
        let mut ids: Vec<u64> = (0..200).map(|i| 10_000 + 13 * i).collect();
        for i in (1..ids.len()).rev() {
            ids.swap(i, rng.random_range(0..=i));
        }
        let packed = binarize_and_pack(&codes);
        let index = RetrievalIndex::new(packed, ids.clone()).map_err(|e| e.to_string())?;
        let queries = random_signs(&mut rng, 50, bits);
        let pq = binarize_and_pack(&queries);
        for qi in 0..50 {
            let mut oracle: Vec<(u32, u64)> = (0..200)
                .map(|r| {
                    let d = (0..bits)
                        .filter(|&j| queries.get(qi, j) != codes.get(r, j))
                        .count();
                    (d as u32, ids[r])
                })
                .collect();
            oracle.sort();
            for k in [1usize, 20, 200, 500] {
                let got = top_k(pq.code(qi), &index, k).map_err(|e| e.to_string())?;
                let want: Vec<(u64, u32)> = oracle.iter().take(k).map(|&(d, id)| (id, d)).collect();
                if got != want {
                    return Err(format!("B={bits} query {qi} k={k}: ranking differs"));
                }
            }
            compared += 1;
        }
    }
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(10) {
        return Err(format!("took {elapsed:?}"));
    }
    Ok(format!(
        "4000 distance pairs, {compared} rankings x 4 depths exact in {:.2}s",
        elapsed.as_secs_f64()
    ))
}

/// Brute-force mAP@K and P@K from unpacked codes with ranking by (distance, id).
fn brute_force_metrics(
    q: &Matrix,
    ql: &[u32],
    r: &Matrix,
    rl: &[u32],
    ids: &[u64],
    map_k: usize,
    pk_max: usize,
) -> (f64, Vec<f64>) {
    let mut ap_sum = 0.0;
    let mut prec = vec![0.0; pk_max];
    for i in 0..q.rows() {
        let mut order: Vec<(usize, u64, usize)> = (0..r.rows())
            .map(|j| {
                let d = (0..q.cols())
                    .filter(|&c| q.get(i, c) != r.get(j, c))
                    .count();
                (d, ids[j], j)
            })
            .collect();
        order.sort();
        let rel: Vec<bool> = order.iter().map(|&(_, _, j)| rl[j] == ql[i]).collect();
        let total = rel.iter().filter(|&&x| x).count();
        let mut hits = 0;
        let mut ap = 0.0;
        for (pos, &flag) in rel.iter().take(map_k).enumerate() {
            if flag {
                hits += 1;
                ap += hits as f64 / (pos + 1) as f64;
            }
        }
        if total > 0 {
            ap_sum += ap / total.min(map_k) as f64;
        }
        for (k, p) in prec.iter_mut().enumerate() {
            let h = rel[..=k].iter().filter(|&&x| x).count();
            *p += h as f64 / (k + 1) as f64;
        }
    }
    let nq = q.rows() as f64;
    (ap_sum / nq, prec.into_iter().map(|p| p / nq).collect())
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let q = random_signs(&mut rng, 50, 16);
    let r = random_signs(&mut rng, 200, 16);
    let ql: Vec<u32> = (0..50).map(|_| rng.random_range(0..4)).collect();
    let rl: Vec<u32> = (0..200).map(|_| rng.random_range(0..4)).collect();
    let ids: Vec<u64> = (0..200).map(|i| 5 * i + 1).collect();
    let index =
        RetrievalIndex::new(binarize_and_pack(&r), ids.clone()).map_err(|e| e.to_string())?;
    let pq = binarize_and_pack(&q);
    let input = EvalInput {
        queries: &pq,
        query_labels: &ql,
        index: &index,
        index_labels: &rl,
    };
    let rep = evaluate(&input, &EvalConfig::default()).map_err(|e| e.to_string())?;
    let (map, prec) = brute_force_metrics(&q, &ql, &r, &rl, &ids, 20, 100);
    if (rep.map_at_k - map).abs() > 1e-12 {
        return Err(format!("mAP@20 {} vs brute force {map}", rep.map_at_k));
    }
    let worst_p = rep
        .precision
        .iter()
        .zip(&prec)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if rep.precision.len() != 100 || worst_p > 1e-12 {
        return Err(format!("P@K deviates by {worst_p:.3e}"));
    }

    // Random codes over two balanced classes, scored over the full ranking
    // (min(R, K) = R), where AP tends to the class prior.
    let mut maps = Vec::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let q = random_signs(&mut rng, 100, 64);
        let r = random_signs(&mut rng, 400, 64);
        let ql: Vec<u32> = (0..100).map(|i| i % 2).collect();
        let rl: Vec<u32> = (0..400).map(|i| i % 2).collect();
        let index = RetrievalIndex::with_positions(binarize_and_pack(&r));
        let pq = binarize_and_pack(&q);
        let input = EvalInput {
            queries: &pq,
            query_labels: &ql,
            index: &index,
            index_labels: &rl,
        };
        let cfg = EvalConfig {
            map_k: 400,
            ..Default::default()
        };
        let m = evaluate(&input, &cfg).map_err(|e| e.to_string())?.map_at_k;
        if (m - 0.5).abs() > 0.05 {
            return Err(format!("random codes seed {seed}: mAP {m:.4}"));
        }
        maps.push(m);
    }
    let lo = maps.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = maps.iter().copied().fold(0.0, f64::max);
    Ok(format!(
        "mAP@20 {:.6} and 100 P@K values exact; random full-depth mAP in [{lo:.4}, {hi:.4}]",
        rep.map_at_k
    ))
}

fn benchmark_config(seed: u64) -> TrainConfig {
    TrainConfig {
        code_bits: 16,
        epochs: 30,
        seed,
        ..Default::default()
    }
}

struct BenchRun {
    i2t: f64,
    t2i: f64,
    seconds: f64,
}

impl BenchRun {
    fn mean(&self) -> f64 {
        0.5 * (self.i2t + self.t2i)
    }
}

fn bench_run(cfg: &TrainConfig) -> Result<BenchRun, String> {
    let ds = generate_synthetic(&SyntheticConfig::default()).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let (bundle, _) = train(&ds.training_data(), cfg).map_err(|e| e.to_string())?;
    let seconds = start.elapsed().as_secs_f64();
    let (i2t, t2i) =
        evaluate_both(&bundle, &ds, &EvalConfig::default()).map_err(|e| e.to_string())?;
    Ok(BenchRun {
        i2t: i2t.map_at_k,
        t2i: t2i.map_at_k,
        seconds,
    })
}

fn end_to_end(run: &BenchRun) -> Outcome {
    let detail = format!(
        "I->T {:.4}, T->I {:.4}, training {:.1}s",
        run.i2t, run.t2i, run.seconds
    );
    if run.i2t >= 0.95 && run.t2i >= 0.95 && run.seconds < 300.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn median3(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[1]
}

fn ablation_direction(full: Vec<BenchRun>) -> Outcome {
    let mut cl = Vec::new();
    for seed in 0..3 {
        let mut cfg = benchmark_config(seed);
        cfg.ablation.insert(AblationSwitch::NoIntraImg);
        cfg.ablation.insert(AblationSwitch::NoIntraTxt);
        cl.push(bench_run(&cfg)?);
    }
    let med = |runs: &[BenchRun], f: fn(&BenchRun) -> f64| median3(runs.iter().map(f).collect());
    let (fm, cm) = (med(&full, BenchRun::mean), med(&cl, BenchRun::mean));
    let detail = format!(
        "median mean-mAP@20 full {fm:.4} (I->T {:.4}, T->I {:.4}) vs CL {cm:.4} (I->T {:.4}, T->I {:.4})",
        med(&full, |r| r.i2t),
        med(&full, |r| r.t2i),
        med(&cl, |r| r.i2t),
        med(&cl, |r| r.t2i),
    );
    if fm >= cm {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn files_in(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != TIMINGS_FILE)
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

fn determinism() -> Outcome {
    let ds = generate_synthetic(&SyntheticConfig {
        n_pairs: 400,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        code_bits: 16,
        hidden_dim: 64,
        disc_hidden_dim: 32,
        batch_size: 16,
        epochs: 3,
        seed: 11,
        ..Default::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let out = run_training(&ds, &cfg, d.path()).map_err(|e| e.to_string())?;
        write_eval_artifacts(&out.bundle, &ds, &EvalConfig::default(), d.path())
            .map_err(|e| e.to_string())?;
    }
    let (a, b) = (files_in(dirs[0].path()), files_in(dirs[1].path()));
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    for required in [
        "train_report.jsonl",
        "checkpoint.bin",
        "query_image.codes",
        "retrieval_text.codes",
        "eval_img_to_txt.toml",
        "eval_txt_to_img.toml",
    ] {
        if !names.contains(&required) {
            return Err(format!("{required} was not written"));
        }
    }
    if a.len() != b.len() {
        return Err("runs wrote different file sets".into());
    }
    for ((na, ba), (_, bb)) in a.iter().zip(&b) {
        if ba != bb {
            return Err(format!("{na} differs between runs"));
        }
    }
    Ok(format!(
        "{} artifacts byte-identical across two runs",
        a.len()
    ))
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failures += 1;
                println!("FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    };

    report("gradient correctness", &mut || {
        let start = Instant::now();
        let r = gradient_correctness()?;
        if start.elapsed() > Duration::from_secs(60) {
            return Err(format!("took {:?}", start.elapsed()));
        }
        Ok(r)
    });
    report("loss oracles", &mut loss_oracles);
    report("retrieval equivalence", &mut retrieval_equivalence);
    report("metric oracle", &mut metric_oracle);

    let mut full_runs = Vec::new();
    let mut setup_error = None;
    for seed in 0..3 {
        match bench_run(&benchmark_config(seed)) {
            Ok(r) => full_runs.push(r),
            Err(e) => {
                setup_error = Some(e);
                break;
            }
        }
    }
    report(
        "end-to-end synthetic",
        &mut || match (&setup_error, full_runs.first()) {
            (Some(e), _) => Err(e.clone()),
            (None, Some(run)) => end_to_end(run),
            (None, None) => Err("no run".into()),
        },
    );
    let mut full_runs = Some(full_runs);
    report("ablation direction", &mut || match &setup_error {
        Some(e) => Err(e.clone()),
        None => ablation_direction(full_runs.take().unwrap_or_default()),
    });
    report("determinism", &mut determinism);

    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
