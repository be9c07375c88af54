//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test -p tqs-core --test acceptance` runs everything; numeric
//! arguments (`-- 1 4 9`) restrict the run to those criteria.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tqs_core::ablation::{mean_over, score_family, train_family, variant_configs, DayScore, Sampling, Variant};
use tqs_core::autodiff::Real;
use tqs_core::backbone::NoiseConfig;
use tqs_core::checkpoint::Checkpoint;
use tqs_core::ensemble::noise_scale_sweep;
use tqs_core::grid::{
    latitude_weights, read_gridded, synth_dataset, write_gridded, DayIndex, GridSpec, GriddedData, Splits, SynthConfig,
    VariableCatalog,
};
use tqs_core::metrics::{acc, continuity_stats, crps, r2_mae_bias, rmse, rqe, sme, CONTINUITY_WINDOWS};
use tqs_core::model::{Model, ModelConfig, ModelInput};
use tqs_core::train::{forecast_range, standard_leads, tiling, weighted_mse, Dataset, ModelFamily, ReadKind, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Criterion = fn(&mut Shared) -> Outcome;

/// Families trained once and reused by criteria 5, 6, 7 and 10.
#[derive(Default)]
struct Shared {
    ablation: Option<AblationRuns>,
}

fn main() {
    tqs_core::parallel::init_from_env().expect("thread pool");
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(&str, Criterion); 10] = [
        ("gradient integrity", c1_gradients),
        ("metric oracles", c2_metric_oracles),
        ("noise-free reduction", c3_noise_free),
        ("latitude weights", c4_latitude_weights),
        ("climatology direction", c5_climatology),
        ("ensemble direction", c6_ensemble),
        ("layer noise vs IC perturbation", c7_layer_vs_ic),
        ("lead tiling and continuity", c8_tiling),
        ("determinism and persistence", c9_determinism),
        ("noise scale sweep", c10_sweep),
    ];
    let mut shared = Shared::default();
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(|| run(&mut shared)))
            .unwrap_or_else(|e| outcome(false, format!("panicked: {}", panic_text(&e))));
        let tag = if out.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {tag} {name}: {} [{:.1?}]", out.detail, t0.elapsed());
        if !out.pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

fn panic_text(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
}

// ---------------------------------------------------------------- 1

struct GradCase<T> {
    model: Model<T>,
    input: ModelInput<T>,
    target: Vec<T>,
    weights: Arc<[T]>,
}

fn grad_case() -> GradCase<f64> {
    let grid = GridSpec::uniform(4, 8, 4).unwrap();
    let cat = VariableCatalog::small();
    assert_eq!(cat.k(), 6);
    let cfg = ModelConfig { dim: 8, depth: 2, heads: 2, mlp_ratio: 2, fusion_rank: 4, ..ModelConfig::desk() };
    let model = Model::<f64>::new(&cfg, &grid, &cat, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (k, n) = (cat.k(), grid.cells());
    let mut draw = |len: usize| (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let history = draw(cfg.history * k * n);
    let climatology = draw(k * n);
    let target = draw(cfg.segment * k * n);
    let weights: Arc<[f64]> = grid.latitude_weights().into();
    GradCase { model, input: ModelInput { history, climatology, init_day: 12000, lead: 20 }, target, weights }
}

fn cast_case<S: Real, U: Real>(c: &GradCase<S>) -> GradCase<U> {
    let cv = |v: &[S]| v.iter().map(|&x| U::lit(x.to_f64_lossy())).collect::<Vec<U>>();
    GradCase {
        model: c.model.cast(),
        input: ModelInput {
            history: cv(&c.input.history),
            climatology: cv(&c.input.climatology),
            init_day: c.input.init_day,
            lead: c.input.lead,
        },
        target: cv(&c.target),
        weights: cv(&c.weights).into(),
    }
}

/// Fourth-order central differences of the loss, per parameter tensor.
fn finite_differences(c: &GradCase<f64>, noise: &NoiseConfig, h: f64) -> Vec<Vec<f64>> {
    let params = &c.model.params;
    (0..params.len())
        .map(|id| {
            (0..params.spec(id).numel())
                .map(|i| {
                    let at = |d: f64| {
                        let mut p = params.clone();
                        p.get_mut(id)[i] += d;
                        c.model.with_params(p).unwrap().loss(&c.input, &c.target, &c.weights, noise).unwrap()
                    };
                    (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h)
                })
                .collect()
        })
        .collect()
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let den = na.max(nb);
    if den == 0.0 {
        0.0
    } else {
        diff / den
    }
}

fn c1_gradients(_: &mut Shared) -> Outcome {
    let t0 = Instant::now();
    let noise = NoiseConfig::deterministic(1.0);
    let case64 = grad_case();
    let (_, g) = case64.model.loss_and_grads(&case64.input, &case64.target, &case64.weights, &noise).unwrap();
    let analytic = case64.model.params.dense_grads(&g);
    let fd = finite_differences(&case64, &noise, 1e-3);
    let names: Vec<String> = case64.model.params.specs().iter().map(|s| s.name.clone()).collect();
    let worst = |errs: &[f64]| {
        let (i, e) = errs.iter().enumerate().fold((0, 0.0f64), |acc, (i, &e)| if e > acc.1 { (i, e) } else { acc });
        (names[i].clone(), e)
    };
    let err64: Vec<f64> = analytic.iter().zip(&fd).map(|(a, f)| relative_error(a, f)).collect();

    // f32 gradients against differences of the f64 loss at the f32-rounded point.
    let case32 = cast_case::<f64, f32>(&case64);
    let (_, g32) = case32.model.loss_and_grads(&case32.input, &case32.target, &case32.weights, &noise).unwrap();
    let analytic32: Vec<Vec<f64>> =
        case32.model.params.dense_grads(&g32).iter().map(|v| v.iter().map(|&x| x as f64).collect()).collect();
    let rounded = cast_case::<f32, f64>(&case32);
    let fd32 = finite_differences(&rounded, &noise, 1e-3);
    let err32: Vec<f64> = analytic32.iter().zip(&fd32).map(|(a, f)| relative_error(a, f)).collect();

    let covered = ["embed", "fusion", "pos", "time", "lead", "attn", "noise", "decoder"]
        .iter()
        .all(|k| names.iter().any(|n| n.contains(k)));
    let (w64n, w64) = worst(&err64);
    let (w32n, w32) = worst(&err32);
    let elapsed = t0.elapsed();
    outcome(
        w64 < 1e-6 && w32 < 1e-3 && covered && elapsed < Duration::from_secs(120),
        format!(
            "{} tensors, worst f64 {w64:.2e} ({w64n}), worst f32 {w32:.2e} ({w32n}), groups covered {covered}, {elapsed:.1?}",
            names.len()
        ),
    )
}

// ---------------------------------------------------------------- 2

mod oracle {
    pub fn rmse(p: &[f64], t: &[f64], l: &[f64], h: usize, w: usize) -> f64 {
        let n = p.len() / (h * w);
        let mut per_sample = Vec::new();
        for s in 0..n {
            let mut sum = 0.0;
            for i in 0..h {
                for j in 0..w {
                    let idx = s * h * w + i * w + j;
                    sum += l[i] * (p[idx] - t[idx]) * (p[idx] - t[idx]);
                }
            }
            per_sample.push((sum / (h * w) as f64).sqrt());
        }
        per_sample.iter().sum::<f64>() / n as f64
    }

    pub fn acc(p: &[f64], t: &[f64], c: &[f64], l: &[f64], h: usize, w: usize) -> f64 {
        let a: Vec<f64> = p.iter().enumerate().map(|(i, v)| v - c[i % (h * w)]).collect();
        let b: Vec<f64> = t.iter().enumerate().map(|(i, v)| v - c[i % (h * w)]).collect();
        let lw: Vec<f64> = (0..p.len()).map(|i| l[(i / w) % h]).collect();
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).zip(&lw).map(|((x, y), w)| w * x * y).sum::<f64>();
        dot(&a, &b) / (dot(&a, &a) * dot(&b, &b)).sqrt()
    }

    pub fn r2(p: &[f64], t: &[f64]) -> f64 {
        let mean = t.iter().sum::<f64>() / t.len() as f64;
        let res: f64 = p.iter().zip(t).map(|(a, b)| (b - a).powi(2)).sum();
        let tot: f64 = t.iter().map(|b| (b - mean).powi(2)).sum();
        1.0 - res / tot
    }

    pub fn mae(p: &[f64], t: &[f64]) -> f64 {
        p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64
    }

    pub fn bias(p: &[f64], t: &[f64]) -> f64 {
        p.iter().zip(t).map(|(a, b)| a - b).sum::<f64>() / p.len() as f64
    }

    pub fn crps(x: &[f64], y: f64) -> f64 {
        let m = x.len() as f64;
        let skill = x.iter().map(|v| (v - y).abs()).sum::<f64>() / m;
        let mut pairs = 0.0;
        for a in x {
            for b in x {
                pairs += (a - b).abs();
            }
        }
        skill - pairs / (2.0 * m * m)
    }

    pub fn sme(cases: &[Vec<f64>], ys: &[f64]) -> f64 {
        let mut total = 0.0;
        for (x, y) in cases.iter().zip(ys) {
            let m = x.len() as f64;
            let mu = x.iter().sum::<f64>() / m;
            let sd = (x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m).sqrt();
            total += sd - (y - mu).abs();
        }
        total / ys.len() as f64
    }

    pub fn rqe(q: &[f64], w: &[f64], y: f64) -> f64 {
        q.iter().zip(w).map(|(q, w)| w * (q - y).abs() / y.abs()).sum()
    }
}

fn c2_metric_oracles(_: &mut Shared) -> Outcome {
    let mut worst = 0.0f64;
    let mut note = |a: f64, b: f64| worst = worst.max((a - b).abs());
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let examples = close(crps(&[1.0, 3.0], 2.0), 0.5)
        && close(sme(&[vec![1.0, 3.0]], &[2.0]).unwrap(), 1.0)
        && close(rqe(&[4.0, 6.0], &[0.5, 0.5], 5.0, 1e-9).unwrap().unwrap(), 0.2);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (h, w, n) = (4, 8, 3);
    for _ in 0..200 {
        let mut draw = |len: usize, s: f64| (0..len).map(|_| rng.gen_range(-s..s)).collect::<Vec<f64>>();
        let p = draw(n * h * w, 3.0);
        let t = draw(n * h * w, 3.0);
        let c = draw(h * w, 1.0);
        let mut lats = draw(h, 89.0);
        lats.sort_by(|a, b| b.total_cmp(a));
        let l = latitude_weights(&lats).unwrap();
        note(rmse(&p, &t, &l, h, w).unwrap(), oracle::rmse(&p, &t, &l, h, w));
        note(acc(&p, &t, &c, &l, h, w).unwrap(), oracle::acc(&p, &t, &c, &l, h, w));
        let (r2, mae, bias) = r2_mae_bias(&p, &t).unwrap();
        note(r2, oracle::r2(&p, &t));
        note(mae, oracle::mae(&p, &t));
        note(bias, oracle::bias(&p, &t));
        let members = 2 + rng.gen_range(0..14);
        let cases: Vec<Vec<f64>> = (0..5).map(|_| (0..members).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let ys: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        for (x, &y) in cases.iter().zip(&ys) {
            note(crps(x, y), oracle::crps(x, y));
        }
        note(sme(&cases, &ys).unwrap(), oracle::sme(&cases, &ys));
        let nq = 1 + rng.gen_range(0..11);
        let raw: Vec<f64> = (0..nq).map(|_| rng.gen_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let qw: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let q: Vec<f64> = (0..nq).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y = rng.gen_range(0.05..3.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        note(rqe(&q, &qw, y, 1e-9).unwrap().unwrap(), oracle::rqe(&q, &qw, y));
    }
    outcome(examples && worst <= 1e-9, format!("worked examples {examples}, worst deviation over 200 cases {worst:.2e}"))
}

// ---------------------------------------------------------------- 3

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let d = g.len();
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for j in 0..d {
            o[j] = (row[j] - mean) * inv * g[j] + b[j];
        }
    }
    out
}

/// `x · W + b` with `W` stored `[in, out]`.
fn dense(x: &[f64], w: &[f64], b: Option<&[f64]>, din: usize) -> Vec<f64> {
    let dout = w.len() / din;
    let mut out = Vec::with_capacity(x.len() / din * dout);
    for row in x.chunks(din) {
        for j in 0..dout {
            let mut s = b.map_or(0.0, |b| b[j]);
            for i in 0..din {
                s += row[i] * w[i * dout + j];
            }
            out.push(s);
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Plain pre-norm transformer over `[levels·L, D]` tokens, attention within
/// each level, followed by the final layer norm.
fn reference_encoder(model: &Model<f64>, tokens: &[f64]) -> Vec<f64> {
    let p = |name: &str| model.params.by_name(name).unwrap_or_else(|| panic!("missing {name}"));
    let d = model.config.dim;
    let heads = model.config.heads;
    let dh = d / heads;
    let l = model.tokens();
    let levels = model.levels();
    let mut e = tokens.to_vec();
    for blk in 0..model.config.depth {
        let q = |s: &str| format!("blocks.{blk}.{s}");
        let x = layer_norm(&e, p(&q("ln1.g")), p(&q("ln1.b")));
        let qm = dense(&x, p(&q("attn.wq")), None, d);
        let km = dense(&x, p(&q("attn.wk")), None, d);
        let vm = dense(&x, p(&q("attn.wv")), None, d);
        let mut ctx = vec![0.0; e.len()];
        for lev in 0..levels {
            for hd in 0..heads {
                for t in 0..l {
                    let row_t = (lev * l + t) * d + hd * dh;
                    let scores: Vec<f64> = (0..l)
                        .map(|s| {
                            let row_s = (lev * l + s) * d + hd * dh;
                            (0..dh).map(|c| qm[row_t + c] * km[row_s + c]).sum::<f64>() / (dh as f64).sqrt()
                        })
                        .collect();
                    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let ex: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
                    let z: f64 = ex.iter().sum();
                    for c in 0..dh {
                        ctx[row_t + c] = (0..l).map(|s| ex[s] / z * vm[(lev * l + s) * d + hd * dh + c]).sum();
                    }
                }
            }
        }
        let att = dense(&ctx, p(&q("attn.wo")), Some(p(&q("attn.bo"))), d);
        let h: Vec<f64> = e.iter().zip(&att).map(|(a, b)| a + b).collect();
        let y = layer_norm(&h, p(&q("ln2.g")), p(&q("ln2.b")));
        let hidden = p(&q("mlp.b1")).len();
        let y: Vec<f64> = dense(&y, p(&q("mlp.w1")), Some(p(&q("mlp.b1"))), d).into_iter().map(gelu).collect();
        let y = dense(&y, p(&q("mlp.w2")), Some(p(&q("mlp.b2"))), hidden);
        e = h.iter().zip(&y).map(|(a, b)| a + b).collect();
    }
    layer_norm(&e, p("final_ln.g"), p("final_ln.b"))
}

fn c3_noise_free(_: &mut Shared) -> Outcome {
    let base = grad_case();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = base.model.params.clone();
    for id in 0..params.len() {
        if params.spec(id).name.starts_with("blocks.") || params.spec(id).name.starts_with("final_ln") {
            for v in params.get_mut(id) {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
    }
    let model = base.model.with_params(params).unwrap();
    let input = &base.input;
    let predict = |n: &NoiseConfig| model.predict(input, n).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let off = bits(&predict(&NoiseConfig::off()));
    let zero_gain = |mut n: NoiseConfig| {
        n.fixed_scale = Some(0.0);
        n
    };
    let stochastic = NoiseConfig::stochastic(1.0, 17);
    let deterministic = NoiseConfig::deterministic(1.0);
    let noisy_differs = bits(&predict(&stochastic)) != bits(&predict(&deterministic));
    let g_zero = bits(&predict(&zero_gain(stochastic.clone()))) == bits(&predict(&zero_gain(deterministic.clone())))
        && bits(&predict(&zero_gain(stochastic.clone()))) == off;
    let sigma_zero = bits(&predict(&NoiseConfig::stochastic(0.0, 17))) == bits(&predict(&NoiseConfig::deterministic(0.0)))
        && bits(&predict(&NoiseConfig::stochastic(0.0, 17))) == off;

    let max_dev = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let trace = model.trace(input, &NoiseConfig::stochastic(0.0, 3)).unwrap();
    let dev_model = max_dev(&trace.encoded, &reference_encoder(&model, &trace.tokens));
    let tokens: Vec<f64> = (0..trace.tokens.len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let dev_random = max_dev(&model.encode_tokens(&tokens, &zero_gain(stochastic)).unwrap(), &reference_encoder(&model, &tokens));
    let dev = dev_model.max(dev_random);
    outcome(
        noisy_differs && g_zero && sigma_zero && dev <= 1e-12,
        format!("g=0 identical {g_zero}, sigma=0 identical {sigma_zero}, noise active otherwise {noisy_differs}, reference deviation {dev:.2e}"),
    )
}

// ---------------------------------------------------------------- 4

fn c4_latitude_weights(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let patch = rng.gen_range(1..=4);
        let h = patch * rng.gen_range(1..=8);
        let w = patch * rng.gen_range(1..=8);
        let mut lats: Vec<f64> = (0..h).map(|_| rng.gen_range(-90.0..=90.0)).collect();
        lats.sort_by(|a, b| b.total_cmp(a));
        lats.dedup();
        if lats.len() != h {
            continue;
        }
        let lons: Vec<f64> = (0..w).map(|j| -180.0 + 360.0 * j as f64 / w as f64).collect();
        let grid = GridSpec::new(lats, lons, patch).expect("valid grid");
        let l = grid.latitude_weights();
        worst = worst.max((l.iter().sum::<f64>() / l.len() as f64 - 1.0).abs());
    }
    let mut mse_dev = 0.0f64;
    for _ in 0..100 {
        let (h, w) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let lat = rng.gen_range(-89.0..89.0);
        let l = latitude_weights(&vec![lat; h]).unwrap();
        let n = rng.gen_range(1..4) * h * w;
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let plain = p.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64;
        mse_dev = mse_dev.max((weighted_mse(&p, &t, &l, w).unwrap() - plain).abs() / plain.max(1e-300));
    }
    outcome(
        worst <= 1e-12 && mse_dev <= 1e-12,
        format!("max |mean(L)-1| {worst:.2e} over 1000 grids, equal-latitude weighted vs plain MSE {mse_dev:.2e}"),
    )
}

// ---------------------------------------------------------------- 5, 6, 7, 10

const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const ABLATION_LEADS: [u32; 3] = [35, 40, 45];
const MEMBERS: usize = 16;
const BASE_SEED: u64 = 100;

struct SeedRun {
    default_family: ModelFamily,
    default_scores: Vec<DayScore>,
    no_clim_scores: Vec<DayScore>,
    ic_scores: Vec<DayScore>,
}

struct AblationRuns {
    data: Dataset,
    anchors: Vec<DayIndex>,
    seeds: Vec<SeedRun>,
}

fn ablation_runs(shared: &mut Shared) -> &AblationRuns {
    shared.ablation.get_or_insert_with(|| {
        let t0 = Instant::now();
        let grid = GridSpec::desk();
        let cat = VariableCatalog::desk();
        let states = synth_dataset(&grid, &cat, &SynthConfig { years: 8, seed: 1, ..SynthConfig::default() }).unwrap();
        let splits = Splits::by_years(1979, 8).unwrap();
        let data = Dataset::new(&states, &grid, &cat, splits).unwrap();
        let anchors: Vec<DayIndex> = data.anchors(splits.test, 45).into_iter().step_by(5).collect();
        let steps = 400;
        let model = ModelConfig { dim: 32, depth: 2, heads: 2, mlp_ratio: 2, ..ModelConfig::desk() };
        let leads = ABLATION_LEADS.to_vec();
        let seeds = ABLATION_SEEDS
            .iter()
            .map(|&seed| {
                let train = TrainConfig {
                    warmup_steps: steps / 10,
                    total_steps: steps,
                    lead_times: leads.clone(),
                    seed,
                    ..TrainConfig::desk()
                };
                let ens = |v: &Variant| Sampling::for_variant(v, MEMBERS, 1.0, BASE_SEED).remove(0).1;
                let (t, m) = variant_configs(&Variant::Default, &train, &model);
                let (default_family, _) = train_family(&data, &t, &m).unwrap();
                let default_scores = score_family(&default_family, &data, &anchors, &leads, &ens(&Variant::Default)).unwrap();
                let ic_scores = score_family(&default_family, &data, &anchors, &leads, &ens(&Variant::IcPerturb)).unwrap();
                let (t, m) = variant_configs(&Variant::NoClim, &train, &model);
                let (no_clim, _) = train_family(&data, &t, &m).unwrap();
                let no_clim_scores = score_family(&no_clim, &data, &anchors, &leads, &ens(&Variant::NoClim)).unwrap();
                eprintln!("  seed {seed} trained and scored after {:.1?}", t0.elapsed());
                SeedRun { default_family, default_scores, no_clim_scores, ic_scores }
            })
            .collect();
        AblationRuns { data, anchors, seeds }
    })
}

fn window(scores: &[DayScore], pick: impl Fn(&DayScore) -> f64) -> f64 {
    mean_over(scores, 35..=45, pick)
}

fn c5_climatology(shared: &mut Shared) -> Outcome {
    let runs = ablation_runs(shared);
    let mut wins = 0;
    let mut parts = Vec::new();
    for (seed, r) in ABLATION_SEEDS.iter().zip(&runs.seeds) {
        let (d, n) = (window(&r.default_scores, |s| s.rmse), window(&r.no_clim_scores, |s| s.rmse));
        wins += usize::from(d < n);
        parts.push(format!("seed {seed}: {d:.6} vs {n:.6}"));
    }
    outcome(wins >= 2, format!("default beats no_clim in {wins}/3 ({})", parts.join("; ")))
}

fn c6_ensemble(shared: &mut Shared) -> Outcome {
    let runs = ablation_runs(shared);
    let mut wins = 0;
    let mut parts = Vec::new();
    let mut jensen_checked = 0;
    let mut jensen_ok = true;
    for (seed, r) in ABLATION_SEEDS.iter().zip(&runs.seeds) {
        let (e, d) = (window(&r.default_scores, |s| s.rmse), window(&r.default_scores, |s| s.rmse_deterministic));
        wins += usize::from(e < d);
        parts.push(format!("seed {seed}: {e:.6} vs {d:.6}"));
        for s in r.default_scores.iter().chain(&r.no_clim_scores).chain(&r.ic_scores) {
            jensen_checked += 1;
            jensen_ok &= s.rmse <= s.rmse_member_mean;
        }
    }
    outcome(
        wins >= 2 && jensen_ok,
        format!(
            "ensemble mean beats deterministic in {wins}/3 ({}); mean <= member RMSE on {jensen_checked} evaluations: {jensen_ok}",
            parts.join("; ")
        ),
    )
}

fn median3(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn c7_layer_vs_ic(shared: &mut Shared) -> Outcome {
    let runs = ablation_runs(shared);
    let ln: Vec<f64> = runs.seeds.iter().map(|r| mean_over(&r.default_scores, 45..=45, |s| s.rmse)).collect();
    let ic: Vec<f64> = runs.seeds.iter().map(|r| mean_over(&r.ic_scores, 45..=45, |s| s.rmse)).collect();
    let (ml, mi) = (median3(ln.clone()), median3(ic.clone()));
    outcome(ml <= mi, format!("lead 45 median layer noise {ml:.6} vs IC {mi:.6} (per seed {ln:.6?} vs {ic:.6?})"))
}

fn c10_sweep(shared: &mut Shared) -> Outcome {
    let runs = ablation_runs(shared);
    let sigmas = [0.0, 0.5, 1.0, 1.5, 2.0];
    let table = noise_scale_sweep(&runs.seeds[0].default_family, &runs.data, &runs.anchors, &sigmas, MEMBERS, BASE_SEED).unwrap();
    let argmin = table.argmin_per_lead();
    let complete = table.summary.len() == sigmas.len() * ABLATION_LEADS.len()
        && argmin.len() == ABLATION_LEADS.len()
        && table.summary.iter().all(|s| s.2.is_finite());
    for &(lead, s) in &argmin {
        let direction = if (s - 1.0).abs() < 1e-12 { "matches" } else { "differs from" };
        println!("  lead {lead}: argmin sigma {s} ({direction} the expected optimum near 1)");
    }
    outcome(complete, format!("{} summary rows, argmin per lead {argmin:?}", table.summary.len()))
}

// ---------------------------------------------------------------- 8

fn c8_tiling(_: &mut Shared) -> Outcome {
    let grid = GridSpec::uniform(8, 16, 4).unwrap();
    let cat = VariableCatalog::desk();
    let states = synth_dataset(&grid, &cat, &SynthConfig { years: 4, seed: 8, ..SynthConfig::default() }).unwrap();
    let splits = Splits::by_years(1979, 4).unwrap();
    let data = Dataset::new(&states, &grid, &cat, splits).unwrap().instrumented();
    let cfg = ModelConfig { dim: 8, depth: 1, heads: 2, mlp_ratio: 2, ..ModelConfig::desk() };
    let leads = standard_leads();
    let mut family = ModelFamily::new();
    for &k in &leads {
        family.insert(k, Model::<f32>::new(&cfg, &grid, &cat, k as u64).unwrap());
    }
    let init = data.anchors(splits.test, 45)[10];
    data.clear_reads();
    let r = forecast_range(&family, &data, init, &NoiseConfig::off()).unwrap();
    let days_ok = r.days == (15..=45).collect::<Vec<u32>>();
    let expected = tiling(&leads, 5, 15, 45).unwrap();
    let owners_ok = r.owners.iter().zip(&expected).all(|(o, e)| *o == e.1)
        && r.days
            .iter()
            .zip(&r.owners)
            .all(|(&d, &k)| k >= d && k <= d + 4 && leads.iter().filter(|&&j| j >= d && j <= d + 4).min() == Some(&k));
    let reads = data.reads();
    let frame = cat.k() * grid.cells();
    let mut per_lead_ok = true;
    let mut slices_ok = true;
    for &k in &leads {
        let mine: Vec<_> = reads.iter().filter(|x| x.lead == k).collect();
        let hist: Vec<DayIndex> = mine.iter().filter(|x| x.kind == ReadKind::History).map(|x| x.day).collect();
        per_lead_ok &= hist == (init - 4..=init).collect::<Vec<_>>()
            && mine.iter().filter(|x| x.kind == ReadKind::Climatology).count() == 1
            && mine.iter().all(|x| x.anchor == init && x.kind != ReadKind::Target);
        let out = family.get(k).unwrap().predict(&data.input(init, k).unwrap(), &NoiseConfig::off()).unwrap();
        for (i, (&d, &o)) in r.days.iter().zip(&r.owners).enumerate() {
            if o == k {
                let j = (d + 4 - k) as usize;
                slices_ok &= out[j * frame..(j + 1) * frame] == r.standardized[i][..];
            }
        }
    }
    let reads_ok = per_lead_ok && reads.iter().all(|x| leads.contains(&x.lead));
    let names = cat.channel_names();
    let rows = continuity_stats(&r.frames, &r.days, &names, grid.cells()).unwrap();
    let shape_ok = rows.len() == names.len() * CONTINUITY_WINDOWS.len()
        && names.iter().all(|n| {
            let mine: Vec<_> = rows.iter().filter(|x| &x.variable == n).collect();
            mine.len() == 6
                && mine.iter().zip(CONTINUITY_WINDOWS).all(|(x, (a, b))| x.window == format!("{a}-{b}"))
                && mine.iter().all(|x| x.mean.is_finite() && x.std.is_finite() && x.max.is_finite())
        });
    let t2m: Vec<_> = rows.iter().filter(|x| x.variable == "t2m").collect();
    println!("  t2m continuity (window: mean std max)");
    for x in &t2m {
        println!("    {:>5}: {:.4} {:.4} {:.4}", x.window, x.mean, x.std, x.max);
    }
    outcome(
        days_ok && owners_ok && reads_ok && slices_ok && shape_ok,
        format!(
            "days 15-45 {days_ok}, owners match tiling {owners_ok}, reads confined to history {reads_ok}, frames from their owner {slices_ok}, 3x6 report per variable {shape_ok}"
        ),
    )
}

// ---------------------------------------------------------------- 9

fn c9_determinism(_: &mut Shared) -> Outcome {
    let grid = GridSpec::uniform(8, 16, 4).unwrap();
    let cat = VariableCatalog::desk();
    let states = synth_dataset(&grid, &cat, &SynthConfig { years: 4, seed: 9, ..SynthConfig::default() }).unwrap();
    let splits = Splits::by_years(1979, 4).unwrap();
    let data = Dataset::new(&states, &grid, &cat, splits).unwrap();
    let model = ModelConfig { dim: 16, depth: 1, heads: 2, mlp_ratio: 2, ..ModelConfig::desk() };
    let train = TrainConfig { warmup_steps: 2, total_steps: 12, batch_size: 2, seed: 4, ..TrainConfig::desk() };
    let init = data.anchors(splits.test, 45)[3];
    let noise = NoiseConfig::stochastic(1.0, 77);
    let run = || {
        let (family, trainers) = train_family(&data, &train, &model).unwrap();
        (forecast_range(&family, &data, init, &noise).unwrap(), trainers)
    };
    let (a, trainers) = run();
    let (b, _) = run();
    let dev =
        a.frames.iter().flatten().zip(b.frames.iter().flatten()).map(|(x, y)| (*x as f64 - *y as f64).abs()).fold(0.0, f64::max);
    let same_runs = dev <= 1e-12 && a.frames.len() == b.frames.len();

    let dir = tempfile::tempdir().unwrap();
    let mut ckpt_ok = true;
    let mut family = ModelFamily::new();
    for t in &trainers {
        let ck = Checkpoint {
            lead: t.lead,
            train: t.config.clone(),
            norm: data.norm.clone(),
            model: t.model.clone(),
            optimizer: Some(t.optimizer.clone()),
            curve: t.curve.clone(),
        };
        let path = dir.path().join(format!("pm_{:02}.tqck", t.lead));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let opt = back.optimizer.as_ref().unwrap();
        ckpt_ok &= back.model.params == t.model.params
            && back.model.config == t.model.config
            && opt.m == t.optimizer.m
            && opt.v == t.optimizer.v
            && opt.step == t.optimizer.step
            && back.curve == t.curve
            && back.norm == data.norm
            && back.to_bytes().unwrap() == std::fs::read(&path).unwrap();
        family.insert(back.lead, back.model);
    }
    let c = forecast_range(&family, &data, init, &noise).unwrap();
    let reloaded_same = a.frames.iter().flatten().zip(c.frames.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits());

    let path = dir.path().join("states.tqs");
    let mut gridded = GriddedData::from_states(&states[..40], cat.k(), &grid);
    gridded.flags = 15;
    write_gridded(&path, &gridded).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let back = read_gridded(&path).unwrap();
    let path2 = dir.path().join("again.tqs");
    write_gridded(&path2, &back).unwrap();
    let gridded_ok = back.frames.iter().flatten().zip(gridded.frames.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits())
        && back == gridded
        && std::fs::read(&path2).unwrap() == bytes;
    outcome(
        same_runs && ckpt_ok && reloaded_same && gridded_ok,
        format!(
            "repeat-run max deviation {dev:.1e}, checkpoint round-trip exact {ckpt_ok}, reloaded forecasts bit-identical {reloaded_same}, TQS1 round-trip bit-exact {gridded_ok}"
        ),
    )
}
