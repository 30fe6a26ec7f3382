//! Every differentiable function the system relies on, registered for
//! finite-difference checking: the primitive ops, each network component,
//! the correlation losses and the complete stage-2 objective.
//!
//! Composite cases run at tiny dimensions (A_dim 8, D 4, C 8, 16×16 frames
//! for the pipeline). Tensors a case does not check are fixed constants drawn
//! from a private seed, so every case is a pure function of its inputs.

use std::sync::OnceLock;

use crate::encoders::{
    audio_encode, cerl_fuse, extract_feature_map, render_frame, visual_encode, Dims, ModelParams, Network,
};
use crate::error::Error;
use crate::gradcheck::{op_cases, probe_sum, GradCase, GradReport};
use crate::graph::{Graph, Var};
use crate::metric::{car_loss, covariance, flat_cosine, make_triplet_indices, tavc_objective, tavc_triplet_loss};
use crate::rng::SeededRng;
use crate::synthdata::SequenceSample;
use crate::tensor::{Tensor, TensorError, TensorResult};
use crate::training::{stage2_sample_loss, Stage2Sample, TrainConfig};

pub const SUITE_TOLERANCE: f64 = 1e-4;
pub const SUITE_EPS: f64 = 1e-5;
pub const SUITE_SEEDS: u64 = 5;

const FIXED_SEED: u64 = 0xF1_7ED;

pub const ENCODER_DIMS: Dims = Dims { a_dim: 8, d: 4, c: 8, frame: 8 };
pub const PIPELINE_DIMS: Dims = Dims { a_dim: 8, d: 4, c: 8, frame: 16 };

fn lower(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::Invalid {
            op: "gradient case",
            msg: other.to_string(),
        },
    }
}

/// Network whose tensors named in `names` are the given vars and whose
/// remaining tensors are fixed constants.
fn partial_net(g: &mut Graph<f64>, dims: Dims, names: &[&str], vars: &[Var]) -> Network<Var> {
    static ENCODER: OnceLock<ModelParams<f64>> = OnceLock::new();
    static PIPELINE: OnceLock<ModelParams<f64>> = OnceLock::new();
    let cell = if dims == ENCODER_DIMS { &ENCODER } else { &PIPELINE };
    let fixed = cell.get_or_init(|| ModelParams::init(FIXED_SEED, dims).expect("valid dims"));
    fixed.map(|name, t| match names.iter().position(|n| *n == name) {
        Some(k) => vars[k],
        None => g.constant(t.clone()),
    })
}

/// Input shapes and sampling half-widths of a case.
#[derive(Clone, Default)]
struct Inputs {
    shapes: Vec<Vec<usize>>,
    ranges: Vec<f64>,
}

impl Inputs {
    /// Named parameters at He-uniform scale (`√(6/fan_in)`); biases in
    /// `[−0.1, 0.1]`. Saturating the output sigmoid with unit-range weights
    /// would leave gradients too small to difference reliably.
    fn params(dims: Dims, names: &[&str]) -> Self {
        let spec = Network::spec(dims);
        let mut out = Self::default();
        for n in names {
            let (_, p) = spec.entries().into_iter().find(|(m, _)| m == n).expect("known tensor");
            out.shapes.push(p.shape.clone());
            out.ranges.push(p.fan_in.map_or(0.1, |f| (6.0 / f as f64).sqrt()));
        }
        out
    }

    /// Data input in `[−1, 1]`.
    fn and(mut self, shape: &[usize]) -> Self {
        self.shapes.push(shape.to_vec());
        self.ranges.push(1.0);
        self
    }

    fn data(shapes: &[&[usize]]) -> Self {
        shapes.iter().fold(Self::default(), |acc, s| acc.and(s))
    }
}

fn case(name: &'static str, inputs: Inputs, build: fn(&mut Graph<f64>, &[Var]) -> TensorResult<Var>) -> GradCase {
    GradCase {
        name,
        shapes: inputs.shapes,
        ranges: inputs.ranges,
        build,
        tol: SUITE_TOLERANCE,
    }
}

const AUDIO: [&str; 4] = ["audio_enc.fc1.weight", "audio_enc.fc1.bias", "audio_enc.fc2.weight", "audio_enc.fc2.bias"];
const VISUAL: [&str; 4] = ["visual_enc.fc1.weight", "visual_enc.fc1.bias", "visual_enc.fc2.weight", "visual_enc.fc2.bias"];
const FEATURE: [&str; 4] = ["feature.conv1.weight", "feature.conv1.bias", "feature.conv2.weight", "feature.conv2.bias"];
const CERL: [&str; 2] = ["cerl.reduce.weight", "cerl.expand.weight"];
const GENERATOR: [&str; 6] = [
    "generator.fuse.weight",
    "generator.fuse.bias",
    "generator.up1.weight",
    "generator.up1.bias",
    "generator.up2.weight",
    "generator.up2.bias",
];

/// Network components, each checked with respect to its parameters and input.
pub fn component_cases() -> Vec<GradCase> {
    let d = ENCODER_DIMS;
    let side = d.map_side();
    vec![
        case("audio_encode", Inputs::params(d, &AUDIO).and(&[d.a_dim]), |g, v| {
            let net = partial_net(g, ENCODER_DIMS, &AUDIO, v);
            let y = audio_encode(g, &net, v[4]).map_err(lower)?;
            probe_sum(g, y)
        }),
        case("visual_encode", Inputs::params(d, &VISUAL).and(&[1, d.frame, d.frame]), |g, v| {
            let net = partial_net(g, ENCODER_DIMS, &VISUAL, v);
            let y = visual_encode(g, &net, v[4]).map_err(lower)?;
            probe_sum(g, y)
        }),
        case("extract_feature_map", Inputs::params(d, &FEATURE).and(&[1, d.frame, d.frame]), |g, v| {
            let net = partial_net(g, ENCODER_DIMS, &FEATURE, v);
            let y = extract_feature_map(g, &net, v[4]).map_err(lower)?;
            probe_sum(g, y)
        }),
        case(
            "cerl_fuse",
            Inputs::params(d, &CERL).and(&[d.c, side, side]).and(&[d.d, d.d]),
            |g, v| {
                let net = partial_net(g, ENCODER_DIMS, &CERL, v);
                let y = cerl_fuse(g, &net, v[2], v[3]).map_err(lower)?;
                probe_sum(g, y)
            },
        ),
        case(
            "render_frame",
            Inputs::params(d, &GENERATOR).and(&[d.c, side, side]).and(&[d.d]),
            |g, v| {
                let net = partial_net(g, ENCODER_DIMS, &GENERATOR, v);
                let y = render_frame(g, &net, v[6], v[7]).map_err(lower)?;
                probe_sum(g, y)
            },
        ),
    ]
}

/// The correlation primitives and both correlation losses.
pub fn loss_cases() -> Vec<GradCase> {
    let d = ENCODER_DIMS.d;
    let m: &[usize] = &[d, d];
    vec![
        case("covariance", Inputs::data(&[&[d], &[d]]), |g, v| {
            let c = covariance(g, v[0], v[1]).map_err(lower)?;
            probe_sum(g, c)
        }),
        case("flat_cosine", Inputs::data(&[m, m]), |g, v| {
            Ok(flat_cosine(g, v[0], v[1]).map_err(lower)?.value)
        }),
        case("tavc_triplet_loss", Inputs::data(&[m, m, m]), |g, v| {
            Ok(tavc_triplet_loss(g, v[0], v[1], v[2]).map_err(lower)?.value)
        }),
        // Summed triplet objective over a 6-frame sequence of embeddings.
        case("L_tavc", Inputs::data(&[&[6, d], &[6, d]]), |g, v| {
            let mut rng = SeededRng::new(FIXED_SEED);
            let triplets = make_triplet_indices(6, 1, &mut rng).map_err(lower)?;
            let rows = |g: &mut Graph<f64>, x: Var| (0..6).map(|i| g.index(x, i)).collect::<TensorResult<Vec<_>>>();
            let fa = rows(g, v[0])?;
            let fv = rows(g, v[1])?;
            let mut batch = Vec::new();
            for t in &triplets {
                let (p0, p1) = t.positive_pair();
                let (n0, n1) = t.negative_pair();
                let ca = covariance(g, fa[p0], fa[p1]).map_err(lower)?;
                let cp = covariance(g, fv[p0], fv[p1]).map_err(lower)?;
                let cn = covariance(g, fv[n0], fv[n1]).map_err(lower)?;
                batch.push((ca, cp, cn));
            }
            Ok(tavc_objective(g, &batch).map_err(lower)?.value)
        }),
        case("L_reg", Inputs::data(&[m; 6]), |g, v| {
            let pairs = [(v[0], v[1]), (v[2], v[3]), (v[4], v[5])];
            Ok(car_loss(g, &pairs).map_err(lower)?.value)
        }),
    ]
}

/// A fixed 6-frame sequence at pipeline dimensions.
fn pipeline_sequence() -> SequenceSample {
    let d = PIPELINE_DIMS;
    let mut rng = SeededRng::new(FIXED_SEED).fork(1);
    let audio = Tensor::<f64>::randn(&[6, d.a_dim], 1.0, &mut rng).cast();
    let frames = Tensor::<f64>::uniform(&[6, 1, d.frame, d.frame], 0.0, 1.0, &mut rng).cast();
    SequenceSample {
        id: 0,
        audio,
        frames,
        latent: Tensor::zeros(&[6, 1]),
        coupling: 1.0,
    }
}

const STAGE2: [&str; 12] = [
    FEATURE[0], FEATURE[1], FEATURE[2], FEATURE[3], CERL[0], CERL[1], GENERATOR[0], GENERATOR[1], GENERATOR[2],
    GENERATOR[3], GENERATOR[4], GENERATOR[5],
];

/// `L_render + λ·L_reg` for one sample, with respect to every stage-2
/// trainable tensor.
pub fn pipeline_case() -> GradCase {
    case("stage2_composite", Inputs::params(PIPELINE_DIMS, &STAGE2), |g, v| {
        let net = partial_net(g, PIPELINE_DIMS, &STAGE2, v);
        let seq = pipeline_sequence();
        let cfg = TrainConfig {
            dims: PIPELINE_DIMS,
            ..TrainConfig::stage2()
        };
        let sample = Stage2Sample { seq: 0, anchor: 3, identity: 0 };
        let (loss, _) = stage2_sample_loss(g, &net, &seq, &sample, &cfg, 1.0, cfg.lambda_reg).map_err(lower)?;
        Ok(loss)
    })
}

/// The full registry, in report order.
pub fn registry() -> Vec<GradCase> {
    let mut all = op_cases();
    all.extend(component_cases());
    all.extend(loss_cases());
    all.push(pipeline_case());
    all
}

/// Outcome of one case over all seeds; `report` is the worst seed.
#[derive(Debug, Clone)]
pub struct CaseOutcome {
    pub name: &'static str,
    pub tol: f64,
    pub report: Result<GradReport, TensorError>,
    pub worst_seed: u64,
}

impl CaseOutcome {
    pub fn pass(&self) -> bool {
        matches!(&self.report, Ok(r) if r.pass)
    }
}

pub fn run_case(case: &GradCase, seeds: u64, eps: f64) -> CaseOutcome {
    let mut worst: Option<(u64, GradReport)> = None;
    for seed in 0..seeds {
        match case.run(seed, eps) {
            Err(e) => {
                return CaseOutcome {
                    name: case.name,
                    tol: case.tol,
                    report: Err(e),
                    worst_seed: seed,
                }
            }
            Ok(r) => {
                if worst.as_ref().is_none_or(|(_, w)| r.max_rel_error > w.max_rel_error) {
                    worst = Some((seed, r));
                }
            }
        }
    }
    let (worst_seed, report) = worst.expect("at least one seed");
    CaseOutcome {
        name: case.name,
        tol: case.tol,
        report: Ok(report),
        worst_seed,
    }
}

pub fn run_suite(seeds: u64, eps: f64) -> Vec<CaseOutcome> {
    registry().iter().map(|c| run_case(c, seeds, eps)).collect()
}

/// One line per case: `PASS|FAIL <name> max_rel_error=… tol=… seed=…`.
pub fn format_outcome(o: &CaseOutcome) -> String {
    let verdict = if o.pass() { "PASS" } else { "FAIL" };
    match &o.report {
        Ok(r) => format!(
            "{verdict} {} max_rel_error={:.3e} tol={:.0e} coords={} worst_seed={}",
            o.name, r.max_rel_error, o.tol, r.coordinates, o.worst_seed
        ),
        Err(e) => format!("{verdict} {} error=\"{e}\" seed={}", o.name, o.worst_seed),
    }
}
