//! Acceptance run: every criterion at its stated tolerance, one PASS/FAIL
//! line each. Runs without the libtest harness so the lines always show and
//! the timings are not skewed by concurrently running tests.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use tavce_core::checkpoint::Checkpoint;
use tavce_core::encoders::cerl_fuse;
use tavce_core::evaluation::{retrieval_accuracy, run_ablation, separation_stats, AblationGrid};
use tavce_core::exec::Executor;
use tavce_core::gradsuite::{format_outcome, CaseOutcome, run_suite, SUITE_EPS, SUITE_SEEDS, SUITE_TOLERANCE};
use tavce_core::metric::{car_loss, covariance, flat_cosine, tavc_objective, tavc_triplet_loss};
use tavce_core::synthdata::{decode_dataset, encode_dataset, generate_dataset, split_by_id, GeneratorConfig};
use tavce_core::optim::{adam_step, AdamState};
use tavce_core::training::{train_stage1, TrainConfig};
use tavce_core::{Component, Dims, Graph64, ModelParams32, SeededRng, Tensor32, Tensor64};

#[path = "../../core/tests/common/oracle.rs"]
mod oracle;

const ORACLE_TOL: f64 = 1e-12;
const ORACLE_CASES: usize = 100;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Run {
    results: Vec<(u32, &'static str, bool)>,
}

impl Run {
    fn criterion(&mut self, n: u32, name: &'static str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let mut o = f();
        let took = start.elapsed();
        if let Some(limit) = limit {
            if took > limit {
                o.pass = false;
                o.detail += &format!("; over the {}s budget", limit.as_secs());
            }
        }
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} [{n}] {name} ({:.1}s): {}", took.as_secs_f64(), o.detail);
        self.results.push((n, name, o.pass));
    }
}

// ---- oracle helpers ----

fn vec_t(v: &[f64]) -> Tensor64 {
    Tensor64::from_f64(&[v.len()], v).unwrap()
}

fn mat_t(d: usize, v: &[f64]) -> Tensor64 {
    Tensor64::from_f64(&[d, d], v).unwrap()
}

fn random(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(-5.0, 5.0)).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn oracle_equivalence() -> Outcome {
    let mut rng = SeededRng::new(2024);
    let mut worst = [0.0f64; 5];
    for case in 0..ORACLE_CASES {
        let d = 2 + case % 5;
        let dd = d * d;

        let (fi, fj) = (random(&mut rng, d), random(&mut rng, d));
        let mut g = Graph64::new();
        let (a, b) = (g.constant(vec_t(&fi)), g.constant(vec_t(&fj)));
        let c = covariance(&mut g, a, b).unwrap();
        worst[0] = worst[0].max(max_diff(g.value(c).data(), &oracle::covariance(&fi, &fj)));

        let (x, y) = (random(&mut rng, dd), random(&mut rng, dd));
        let mut g = Graph64::new();
        let (a, b) = (g.constant(mat_t(d, &x)), g.constant(mat_t(d, &y)));
        let cos = flat_cosine(&mut g, a, b).unwrap();
        worst[1] = worst[1].max((g.scalar_value(cos.value) - oracle::flat_cosine(&x, &y)).abs());

        let (ca, p, n) = (random(&mut rng, dd), random(&mut rng, dd), random(&mut rng, dd));
        let mut g = Graph64::new();
        let vars = (g.constant(mat_t(d, &ca)), g.constant(mat_t(d, &p)), g.constant(mat_t(d, &n)));
        let l = tavc_triplet_loss(&mut g, vars.0, vars.1, vars.2).unwrap();
        worst[2] = worst[2].max((g.scalar_value(l.value) - oracle::triplet(&ca, &p, &n)).abs());

        let size = 1 + case % 5;
        let batch: Vec<_> = (0..size)
            .map(|_| (random(&mut rng, dd), random(&mut rng, dd), random(&mut rng, dd)))
            .collect();
        let mut g = Graph64::new();
        let vars: Vec<_> = batch
            .iter()
            .map(|(a, p, n)| (g.constant(mat_t(d, a)), g.constant(mat_t(d, p)), g.constant(mat_t(d, n))))
            .collect();
        let l = tavc_objective(&mut g, &vars).unwrap();
        worst[3] = worst[3].max((g.scalar_value(l.value) - oracle::objective(&batch)).abs());

        let pairs: Vec<_> = (0..size).map(|_| (random(&mut rng, dd), random(&mut rng, dd))).collect();
        let mut g = Graph64::new();
        let vars: Vec<_> = pairs
            .iter()
            .map(|(a, v)| (g.constant(mat_t(d, a)), g.constant(mat_t(d, v))))
            .collect();
        let l = car_loss(&mut g, &vars).unwrap();
        worst[4] = worst[4].max((g.scalar_value(l.value) - oracle::car(&pairs)).abs());
    }
    let names = ["covariance", "flat_cosine", "triplet", "objective", "car"];
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        worst.iter().all(|&w| w <= ORACLE_TOL),
        format!("max |impl − oracle| over {ORACLE_CASES} cases each: {detail} (tol {ORACLE_TOL:.0e})"),
    )
}

fn analytic_anchors() -> Outcome {
    let mut rng = SeededRng::new(7);
    let mut failures = Vec::new();
    for case in 0..ORACLE_CASES {
        let d = 2 + case % 5;
        let c = random(&mut rng, d * d);
        let neg: Vec<f64> = c.iter().map(|x| -x).collect();
        let other = random(&mut rng, d * d);

        let mut g = Graph64::new();
        let (a, p, n, o) = (
            g.constant(mat_t(d, &c)),
            g.constant(mat_t(d, &c)),
            g.constant(mat_t(d, &neg)),
            g.constant(mat_t(d, &other)),
        );
        let optimal = tavc_triplet_loss(&mut g, a, p, n).unwrap();
        if g.scalar_value(optimal.value) != 0.0 {
            failures.push(format!("triplet(optimal)={}", g.scalar_value(optimal.value)));
        }
        let equal = tavc_triplet_loss(&mut g, a, o, o).unwrap();
        if g.scalar_value(equal.value) != 2.0 {
            failures.push(format!("triplet(pos=neg)={}", g.scalar_value(equal.value)));
        }
        let car = car_loss(&mut g, &[(a, p), (o, o)]).unwrap();
        if g.scalar_value(car.value) != 0.0 {
            failures.push(format!("car(c,c)={}", g.scalar_value(car.value)));
        }

        let k = rng.uniform(-5.0, 5.0);
        let mut g = Graph64::new();
        let (x, y) = (g.constant(vec_t(&vec![k; d])), g.constant(vec_t(&random(&mut rng, d))));
        for (l, r) in [(x, y), (y, x), (x, x)] {
            let cov = covariance(&mut g, l, r).unwrap();
            if g.value(cov).data().iter().any(|&v| v != 0.0) {
                failures.push(format!("covariance of constant {k} not zero"));
            }
        }
    }

    let dims = Dims::default();
    let params = ModelParams32::init(3, dims).unwrap();
    let m = dims.map_side();
    let f = Tensor32::uniform(&[dims.c, m, m], -3.0, 3.0, &mut rng);
    let mut g = tavce_core::Graph32::new();
    let net = params.bind(&mut g, |_| true);
    let fv = g.constant(f.clone());
    let zero = g.constant(Tensor32::zeros(&[dims.d, dims.d]));
    let fused = cerl_fuse(&mut g, &net, fv, zero).unwrap();
    if !g.value(fused).bit_eq(&f) {
        failures.push("cerl_fuse(f, 0) != f".into());
    }

    if failures.is_empty() {
        outcome(
            true,
            format!("triplet(optimal)=0, triplet(pos=neg)=2, car(c,c)=0, constant covariance=0 exactly over {ORACLE_CASES} cases; cerl_fuse(f,0)==f bitwise"),
        )
    } else {
        outcome(false, failures.join("; "))
    }
}

fn stage1_report(gamma: f32, metric: &Checkpoint) -> (f64, f64, f64, f64) {
    let data = generate_dataset(&GeneratorConfig { gamma, ..GeneratorConfig::default() }).unwrap();
    let (_, held) = split_by_id(&data).unwrap();
    let sep = separation_stats(&held, &metric.params, metric.config.tau as usize).unwrap();
    let (top1, chance) = retrieval_accuracy(&held, &metric.params).unwrap();
    let n = held.iter().map(|s| s.len() - 1).sum::<usize>() as f64;
    let se = (chance * (1.0 - chance) / n).sqrt();
    (sep.separation, top1, chance, se)
}

fn train_default_metric(gamma: f32) -> Checkpoint {
    let data = generate_dataset(&GeneratorConfig { gamma, ..GeneratorConfig::default() }).unwrap();
    train_stage1(&data, &TrainConfig::stage1()).unwrap().checkpoint
}

fn ablation_direction(grid: &AblationGrid) -> Outcome {
    let tc = |cerl, car| grid.cell(cerl, car).report.temporal_consistency;
    let mse = |cerl, car| grid.cell(cerl, car).report.mse;
    let tc_on_cerl = tc(true, true) > tc(true, false);
    let tc_off_cerl = tc(false, true) > tc(false, false);
    let mse_ok = mse(true, true) <= mse(false, false);
    let rows = grid
        .cells
        .iter()
        .map(|c| {
            let first = c.log.first().map_or(f64::NAN, |r| r.render);
            let last = c.log.last().map_or(f64::NAN, |r| r.render);
            format!(
                "{}: tc {:.4} mse {:.5} render {:.4}→{:.4}",
                c.label(),
                c.report.temporal_consistency,
                c.report.mse,
                first,
                last
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    outcome(
        tc_on_cerl && tc_off_cerl && mse_ok,
        format!(
            "tc(CAR on)>tc(CAR off) with CERL on: {tc_on_cerl}, with CERL off: {tc_off_cerl}; mse(on,on)≤mse(off,off): {mse_ok} [{rows}]"
        ),
    )
}

fn tavce(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_tavce"))
        .current_dir(dir)
        .args(args)
        .env("TAVCE_THREADS", "1")
        .output()
        .expect("spawn tavce");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

const PIPELINE_FILES: [&str; 7] = ["d.tvds", "m.tvce", "m.tvce.log", "g.tvce", "g.tvce.log", "r.txt", "r.txt.bin"];

fn full_pipeline(dir: &Path) {
    tavce(dir, &["gen-data", "--data", "d.tvds"]);
    tavce(dir, &["train-metric", "--data", "d.tvds", "--metric", "m.tvce"]);
    tavce(dir, &["train-gen", "--data", "d.tvds", "--metric", "m.tvce", "--model", "g.tvce"]);
    tavce(dir, &["eval", "--data", "d.tvds", "--model", "g.tvce", "--report", "r.txt"]);
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    full_pipeline(a.path());
    full_pipeline(b.path());
    let mut differing = Vec::new();
    let mut bytes = 0;
    for name in PIPELINE_FILES {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        bytes += x.len();
        if x != y {
            differing.push(name);
        }
    }
    if differing.is_empty() {
        outcome(true, format!("two default CLI pipelines, {} files / {bytes} bytes identical", PIPELINE_FILES.len()))
    } else {
        outcome(false, format!("differing files: {}", differing.join(", ")))
    }
}

const MASKS: [u8; 3] = [0x01, 0x80, 0xFF];

/// Corrupts each listed byte with every mask; returns (tried, undetected).
fn corruptions(bytes: &[u8], positions: impl Iterator<Item = usize>, decodes: impl Fn(&[u8]) -> bool) -> (usize, usize) {
    let mut buf = bytes.to_vec();
    let (mut tried, mut missed) = (0, 0);
    for i in positions {
        for mask in MASKS {
            buf[i] ^= mask;
            tried += 1;
            missed += decodes(&buf) as usize;
            buf[i] ^= mask;
        }
    }
    (tried, missed)
}

/// For large files: every byte of the first and last 4 KiB (headers,
/// trailing CRC) and a prime stride through the payload between.
fn sampled(len: usize) -> impl Iterator<Item = usize> {
    const EDGE: usize = 4096;
    let edge = EDGE.min(len / 2);
    (0..edge).chain((edge..len - edge).step_by(997)).chain(len - edge..len)
}

/// Files small enough to corrupt at every byte. The checkpoint uses 8×8
/// frames: the layout is the same at any size.
fn small_fixtures() -> (Vec<u8>, Vec<u8>) {
    let dims = Dims { a_dim: 4, d: 2, c: 2, frame: 8 };
    let config = TrainConfig { dims, ..TrainConfig::stage2() };
    let mut params = ModelParams32::init(5, dims).unwrap();
    let mut adam = AdamState::new(&params);
    let grads = params.map(|_, t| Some(t.map(|x| 0.25 * x - 0.1)));
    adam_step(&mut params, &grads, &mut adam, 1e-3, |c| config.stage2_trainable(c)).unwrap();
    let ckpt = Checkpoint { config, params, adam };
    let cfg = GeneratorConfig { num_sequences: 1, t: 2, a_dim: 3, k: 2, ..GeneratorConfig::default() };
    let data = encode_dataset(&generate_dataset(&cfg).unwrap(), &cfg).unwrap();
    (ckpt.to_bytes(), data)
}

fn persistence(ckpt: &Checkpoint) -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.tvce");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::<f32>::load(&path).unwrap();
    let same = back.bit_eq(ckpt) && back.to_bytes() == std::fs::read(&path).unwrap();
    pass &= same;
    notes.push(format!("checkpoint round trip bitwise: {same}"));

    let cfg = GeneratorConfig::default();
    let data = generate_dataset(&cfg).unwrap();
    let encoded = encode_dataset(&data, &cfg).unwrap();
    let (decoded, back_cfg) = decode_dataset(&encoded).unwrap();
    let same = back_cfg == cfg
        && decoded.len() == data.len()
        && decoded.iter().zip(&data).all(|(a, b)| a.bit_eq(b))
        && encode_dataset(&decoded, &back_cfg).unwrap() == encoded;
    pass &= same;
    notes.push(format!("dataset round trip bitwise: {same}"));

    let ckpt_ok = |b: &[u8]| Checkpoint::<f32>::from_bytes(b).is_ok();
    let data_ok = |b: &[u8]| decode_dataset(b).is_ok();
    let (small_ckpt, small_data) = small_fixtures();
    let ckpt_bytes = ckpt.to_bytes();
    type Decodes<'a> = &'a dyn Fn(&[u8]) -> bool;
    let cases: [(&str, &[u8], Decodes, bool); 4] = [
        ("small checkpoint", &small_ckpt, &ckpt_ok, true),
        ("small dataset", &small_data, &data_ok, true),
        ("default checkpoint", &ckpt_bytes, &ckpt_ok, false),
        ("default dataset", &encoded, &data_ok, false),
    ];
    for (what, bytes, decodes, every) in cases {
        let (tried, missed) = if every {
            corruptions(bytes, 0..bytes.len(), decodes)
        } else {
            corruptions(bytes, sampled(bytes.len()), decodes)
        };
        pass &= missed == 0;
        let coverage = if every { "every byte" } else { "edges + stride 997" };
        notes.push(format!("{what} ({} B, {coverage}): {missed}/{tried} corruptions undetected", bytes.len()));
    }

    outcome(pass, notes.join("; "))
}

fn frozen_metric(metric: &Checkpoint, grid: &AblationGrid) -> Outcome {
    let encoder = |c: Component| matches!(c, Component::Audio | Component::Visual);
    let mut changed = Vec::new();
    let mut compared = 0;
    for cell in &grid.cells {
        for ((name, before), (_, after)) in metric.params.entries().into_iter().zip(cell.checkpoint.params.entries()) {
            if encoder(Component::of(name)) {
                compared += 1;
                if !before.bit_eq(after) {
                    changed.push(format!("{} in {}", name, cell.label()));
                }
            }
        }
    }
    if changed.is_empty() {
        outcome(true, format!("{compared} E_a/E_v tensors across 4 stage-2 checkpoints bitwise equal to stage 1"))
    } else {
        outcome(false, format!("changed: {}", changed.join(", ")))
    }
}

fn main() {
    let mut run = Run { results: Vec::new() };
    let total = Instant::now();

    run.criterion(1, "gradient suite", Some(Duration::from_secs(30)), || {
        let outcomes = run_suite(SUITE_SEEDS, SUITE_EPS);
        // held to the suite tolerance whatever a case registers
        let err = |o: &CaseOutcome| o.report.as_ref().map_or(f64::INFINITY, |r| r.max_rel_error);
        let failed: Vec<String> = outcomes
            .iter()
            .filter(|o| !o.pass() || err(o) > SUITE_TOLERANCE)
            .map(format_outcome)
            .collect();
        let worst = outcomes.iter().map(err).fold(0.0, f64::max);
        if failed.is_empty() {
            outcome(
                true,
                format!("{} cases × {SUITE_SEEDS} seeds, worst error {worst:.2e} (tol {SUITE_TOLERANCE:.0e})", outcomes.len()),
            )
        } else {
            outcome(false, failed.join(" | "))
        }
    });

    run.criterion(2, "oracle equivalence", None, oracle_equivalence);
    run.criterion(3, "analytic anchors", None, analytic_anchors);

    let mut metric = None;
    run.criterion(4, "stage-1 learning (γ=1)", Some(Duration::from_secs(180)), || {
        let m = train_default_metric(1.0);
        let (sep, top1, chance, _) = stage1_report(1.0, &m);
        metric = Some(m);
        outcome(
            sep >= 0.3 && top1 >= 5.0 * chance,
            format!("separation {sep:.4} (≥ 0.3), retrieval top-1 {top1:.4} (≥ {:.4} = 5× chance)", 5.0 * chance),
        )
    });
    let metric = metric.expect("criterion 4 trains the metric");

    run.criterion(5, "negative control (γ=0)", Some(Duration::from_secs(180)), || {
        let m = train_default_metric(0.0);
        let (sep, top1, chance, se) = stage1_report(0.0, &m);
        outcome(
            sep.abs() <= 0.1 && (top1 - chance).abs() <= 3.0 * se,
            format!(
                "|separation| {:.4} (≤ 0.1), retrieval top-1 {top1:.4} vs chance {chance:.4} ± {:.4} (3 SE)",
                sep.abs(),
                3.0 * se
            ),
        )
    });

    let mut grid = None;
    run.criterion(6, "stage-2 ablation direction", Some(Duration::from_secs(480)), || {
        let data = generate_dataset(&GeneratorConfig::default()).unwrap();
        let (_, held) = split_by_id(&data).unwrap();
        let g = run_ablation(&data, &held, &metric, &TrainConfig::stage2(), &Executor::serial()).unwrap();
        let o = ablation_direction(&g);
        grid = Some(g);
        o
    });
    let grid = grid.expect("criterion 6 runs the grid");

    run.criterion(7, "determinism", None, determinism);
    run.criterion(8, "persistence", None, || persistence(&grid.cell(true, true).checkpoint));
    run.criterion(9, "frozen metric", None, || frozen_metric(&metric, &grid));

    let failed: Vec<String> = run
        .results
        .iter()
        .filter(|r| !r.2)
        .map(|r| format!("[{}] {}", r.0, r.1))
        .collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.1}s",
        run.results.len() - failed.len(),
        run.results.len(),
        total.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
