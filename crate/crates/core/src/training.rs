//! Two-stage training.
//!
//! Stage 1 fits the audio and visual encoders so that the relationship
//! between adjacent audio embeddings matches the one between the matching
//! frames. Stage 2 freezes both encoders and trains the feature extractor,
//! the fusion block and the generator to reconstruct frames, optionally
//! regularized so the generated frame keeps the audio relationship.
//!
//! Both stages train on the training split (all but the last fifth of
//! sequence ids). Within a step every sequence (stage 1) or sample (stage 2)
//! gets its own tape; per-item gradients are summed in item order, so the
//! single-threaded and parallel [`Executor`] modes agree bitwise.

use std::fmt::Write as _;

use crate::checkpoint::Checkpoint;
use crate::encoders::{
    audio_encode, cerl_fuse, extract_feature_map, render_frame, visual_encode, Component, Dims, ModelParams,
    Network,
};
use crate::error::{invalid, Error, Result};
use crate::exec::Executor;
use crate::graph::{Graph, Var};
use crate::metric::{car_loss, covariance, make_triplet_indices, min_sequence_len, tavc_objective, TripletIndex};
use crate::optim::{adam_step, AdamState, Grads};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::synthdata::{split_by_id, SequenceSample};
use crate::tensor::{Tensor, TensorError};

const STAGE1_STREAM: u64 = 0x5741_4745_0001;
const STAGE2_STREAM: u64 = 0x5741_4745_0002;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub stage: u8,
    pub iterations: u32,
    pub learning_rate: f64,
    pub batch_sequences: u32,
    pub tau: u32,
    pub lambda_reg: f64,
    pub use_cerl: bool,
    pub use_car: bool,
    pub seed: u64,
    pub dims: Dims,
}

impl TrainConfig {
    pub fn stage1() -> Self {
        Self {
            stage: 1,
            iterations: 2000,
            learning_rate: 1e-4,
            batch_sequences: 4,
            tau: 2,
            lambda_reg: 1.0,
            use_cerl: true,
            use_car: true,
            seed: 0,
            dims: Dims::default(),
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: 2,
            iterations: 1500,
            learning_rate: 2e-4,
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(invalid("train config", msg));
        if !matches!(self.stage, 1 | 2) {
            return bad(format!("stage {} (expected 1 or 2)", self.stage));
        }
        if self.iterations == 0 || self.batch_sequences == 0 {
            return bad("iterations and batch_sequences must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return bad(format!("lambda_reg {} must be ≥ 0", self.lambda_reg));
        }
        self.dims.validate()
    }

    /// Components stage 2 updates.
    pub fn stage2_trainable(&self, c: Component) -> bool {
        match c {
            Component::Feature | Component::Generator => true,
            Component::Cerl => self.use_cerl,
            Component::Audio | Component::Visual => false,
        }
    }
}

pub fn stage1_trainable(c: Component) -> bool {
    matches!(c, Component::Audio | Component::Visual)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iter: u32,
    pub total: f64,
    pub render: f64,
    pub reg: f64,
}

/// One `iter<TAB>total<TAB>render<TAB>reg` line per record.
pub fn format_loss_log(log: &[LossRecord]) -> String {
    let mut out = String::new();
    for r in log {
        writeln!(out, "{}\t{}\t{}\t{}", r.iter, r.total, r.render, r.reg).expect("string write");
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint<f32>,
    pub log: Vec<LossRecord>,
}

/// Shapes of the data must agree with the model and leave room for triplets.
fn check_data(data: &[SequenceSample], cfg: &TrainConfig) -> Result<()> {
    if data.is_empty() {
        return Err(invalid("dataset", "no sequences"));
    }
    let need = min_sequence_len(cfg.tau as usize);
    let Dims { a_dim, frame, .. } = cfg.dims;
    for s in data {
        if s.len() < need {
            return Err(invalid(
                "dataset",
                format!("sequence {} has {} frames; tau {} needs at least {need}", s.id, s.len(), cfg.tau),
            ));
        }
        if s.audio.shape()[1] != a_dim {
            return Err(Error::DimMismatch {
                name: format!("sequence {} audio", s.id),
                expected: vec![s.len(), a_dim],
                found: s.audio.shape().to_vec(),
            });
        }
        if s.frames.shape()[1..] != [1, frame, frame] {
            return Err(Error::DimMismatch {
                name: format!("sequence {} frames", s.id),
                expected: vec![s.len(), 1, frame, frame],
                found: s.frames.shape().to_vec(),
            });
        }
    }
    Ok(())
}

fn diverged(iteration: u32) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Tensor(source @ TensorError::NonFinite { .. }) => Error::Diverged {
            iteration: iteration as usize,
            source,
        },
        other => other,
    }
}

fn collect_grads(
    g: Graph<f32>,
    loss: Var,
    net: &Network<Var>,
    trainable: impl Fn(Component) -> bool,
) -> Result<Grads<f32>> {
    if !g.requires_grad(loss) {
        // Every path to the trainable leaves was cut (e.g. all cosines
        // degenerate): a zero gradient, not an error.
        return Ok(net.map(|name, &v| trainable(Component::of(name)).then(|| Tensor::zeros(g.shape(v)))));
    }
    let mut grads = g.backward(loss)?;
    Ok(net.map(|name, &v| if trainable(Component::of(name)) { grads.take(v) } else { None }))
}

/// Sums per-item gradients in item order.
fn reduce_grads(items: Vec<Grads<f32>>) -> Grads<f32> {
    let mut iter = items.into_iter();
    let mut acc = iter.next().expect("at least one item");
    for g in iter {
        for ((_, a), (_, b)) in acc.entries_mut().into_iter().zip(g.entries()) {
            match (a, b) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += *y;
                    }
                }
                (a @ None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }
    acc
}

/// `count` distinct indices below `n`, in draw order.
fn sample_distinct(rng: &mut SeededRng, n: usize, count: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for k in 0..count {
        let pick = k + rng.below(n - k);
        pool.swap(k, pick);
    }
    pool.truncate(count);
    pool
}

/// Summed triplet objective of one sequence, scaled by `weight`.
pub fn stage1_sequence_loss(
    g: &mut Graph<f32>,
    net: &Network<Var>,
    seq: &SequenceSample,
    triplets: &[TripletIndex],
    weight: f64,
) -> Result<(Var, usize)> {
    let audio = g.constant(seq.audio.clone());
    let frames = g.constant(seq.frames.clone());
    let fa = audio_encode(g, net, audio)?;
    let fv = visual_encode(g, net, frames)?;
    let t = seq.len();
    let mut rows_a = Vec::with_capacity(t);
    let mut rows_v = Vec::with_capacity(t);
    for i in 0..t {
        rows_a.push(g.index(fa, i)?);
        rows_v.push(g.index(fv, i)?);
    }
    let mut batch = Vec::with_capacity(triplets.len());
    for tr in triplets {
        let (p0, p1) = tr.positive_pair();
        let (n0, n1) = tr.negative_pair();
        let c_a = covariance(g, rows_a[p0], rows_a[p1])?;
        let c_pos = covariance(g, rows_v[p0], rows_v[p1])?;
        let c_neg = covariance(g, rows_v[n0], rows_v[n1])?;
        batch.push((c_a, c_pos, c_neg));
    }
    let term = tavc_objective(g, &batch)?;
    Ok((g.scale(term.value, weight)?, term.degenerate))
}

/// Pre-trains the correlation metric.
pub fn train_stage1(data: &[SequenceSample], cfg: &TrainConfig) -> Result<TrainOutput> {
    train_stage1_with(data, cfg, &Executor::serial())
}

pub fn train_stage1_with(data: &[SequenceSample], cfg: &TrainConfig, exec: &Executor) -> Result<TrainOutput> {
    cfg.validate()?;
    if cfg.stage != 1 {
        return Err(invalid("train config", format!("stage 1 training given a stage {} config", cfg.stage)));
    }
    check_data(data, cfg)?;
    let (train, _) = split_by_id(data)?;
    let batch = cfg.batch_sequences as usize;
    if batch > train.len() {
        return Err(invalid(
            "train config",
            format!("batch_sequences {batch} exceeds the {} training sequences", train.len()),
        ));
    }

    let mut params = ModelParams::<f32>::init(cfg.seed, cfg.dims)?;
    let mut adam = AdamState::new(&params);
    let mut rng = SeededRng::new(cfg.seed).fork(STAGE1_STREAM);
    let weight = 1.0 / batch as f64;
    let mut log = Vec::with_capacity(cfg.iterations as usize);

    for iter in 0..cfg.iterations {
        let mut jobs = Vec::with_capacity(batch);
        for s in sample_distinct(&mut rng, train.len(), batch) {
            let triplets = make_triplet_indices(train[s].len(), cfg.tau as usize, &mut rng)?;
            jobs.push((s, triplets));
        }
        let results = exec.map(&jobs, |(s, triplets)| -> Result<(f64, Grads<f32>)> {
            let mut g = Graph::new();
            let net = params.bind(&mut g, stage1_trainable);
            let (loss, _) = stage1_sequence_loss(&mut g, &net, &train[*s], triplets, weight)?;
            let value = g.scalar_value(loss) as f64;
            Ok((value, collect_grads(g, loss, &net, stage1_trainable)?))
        });
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(batch);
        for r in results {
            let (v, gr) = r.map_err(diverged(iter))?;
            total += v;
            grads.push(gr);
        }
        if !total.is_finite() {
            return Err(Error::Diverged {
                iteration: iter as usize,
                source: TensorError::NonFinite { op: "loss" },
            });
        }
        adam_step(&mut params, &reduce_grads(grads), &mut adam, cfg.learning_rate, stage1_trainable)?;
        log.push(LossRecord { iter, total, render: 0.0, reg: 0.0 });
    }
    Ok(TrainOutput {
        checkpoint: Checkpoint { config: *cfg, params, adam },
        log,
    })
}

/// One stage-2 draw: predict frame `anchor` of sequence `seq` from identity
/// frame `identity ≠ anchor`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage2Sample {
    pub seq: usize,
    pub anchor: usize,
    pub identity: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Terms {
    pub render: f64,
    /// `None` when the regularizer is switched off and never evaluated.
    pub reg: Option<f64>,
    pub degenerate: usize,
}

/// Generated frame for `anchor` together with the audio relationship that
/// conditioned it.
pub struct Generated {
    pub frame: Var,
    pub c_audio: Var,
}

/// The stage-2 forward path: audio relationship of `(anchor−1, anchor)`,
/// identity features, optional fusion, rendering.
pub fn generate_frame<T: Scalar>(
    g: &mut Graph<T>,
    net: &Network<Var>,
    seq: &SequenceSample,
    anchor: usize,
    identity: usize,
    use_cerl: bool,
) -> Result<Generated> {
    let a_prev = g.constant(seq.clip(anchor - 1).cast());
    let a_cur = g.constant(seq.clip(anchor).cast());
    let fa_prev = audio_encode(g, net, a_prev)?;
    let fa_cur = audio_encode(g, net, a_cur)?;
    let c_audio = covariance(g, fa_prev, fa_cur)?;
    let source = g.constant(seq.frame(identity).cast());
    let f = extract_feature_map(g, net, source)?;
    let fused = if use_cerl { cerl_fuse(g, net, f, c_audio)? } else { f };
    let frame = render_frame(g, net, fused, fa_cur)?;
    Ok(Generated { frame, c_audio })
}

/// Loss of one sample: `render_weight·MSE + reg_weight·(1 − cos)`; the
/// regularizer is only built when `use_car`.
pub fn stage2_sample_loss<T: Scalar>(
    g: &mut Graph<T>,
    net: &Network<Var>,
    seq: &SequenceSample,
    s: &Stage2Sample,
    cfg: &TrainConfig,
    render_weight: f64,
    reg_weight: f64,
) -> Result<(Var, Stage2Terms)> {
    let gen = generate_frame(g, net, seq, s.anchor, s.identity, cfg.use_cerl)?;
    let target = g.constant(seq.frame(s.anchor).cast());
    let mse = g.mse(gen.frame, target)?;
    let mut terms = Stage2Terms {
        render: g.scalar_value(mse).as_f64(),
        reg: None,
        degenerate: 0,
    };
    let mut loss = g.scale(mse, render_weight)?;
    if cfg.use_car {
        let prev = g.constant(seq.frame(s.anchor - 1).cast());
        let fv_prev = visual_encode(g, net, prev)?;
        let fv_gen = visual_encode(g, net, gen.frame)?;
        let c_gen = covariance(g, fv_prev, fv_gen)?;
        let reg = car_loss(g, &[(gen.c_audio, c_gen)])?;
        terms.reg = Some(g.scalar_value(reg.value).as_f64());
        terms.degenerate = reg.degenerate;
        let weighted = g.scale(reg.value, reg_weight)?;
        loss = g.add(loss, weighted)?;
    }
    Ok((loss, terms))
}

/// Batch-mean stage-2 losses and their gradients with respect to the
/// stage-2 trainable tensors. The weights multiply the batch-mean render and
/// regularizer terms; training uses `(1, λ)`.
pub fn stage2_gradients(
    train: &[SequenceSample],
    params: &ModelParams<f32>,
    samples: &[Stage2Sample],
    cfg: &TrainConfig,
    weights: (f64, f64),
    exec: &Executor,
) -> Result<(Stage2Terms, Grads<f32>)> {
    if samples.is_empty() {
        return Err(invalid("stage 2 batch", "no samples"));
    }
    let n = samples.len() as f64;
    let trainable = |c| cfg.stage2_trainable(c);
    let results = exec.map(samples, |s| -> Result<(Stage2Terms, Grads<f32>)> {
        let mut g = Graph::new();
        let net = params.bind(&mut g, trainable);
        let (loss, terms) = stage2_sample_loss(&mut g, &net, &train[s.seq], s, cfg, weights.0 / n, weights.1 / n)?;
        Ok((terms, collect_grads(g, loss, &net, trainable)?))
    });
    let mut sum = Stage2Terms {
        render: 0.0,
        reg: cfg.use_car.then_some(0.0),
        degenerate: 0,
    };
    let mut grads = Vec::with_capacity(samples.len());
    for r in results {
        let (t, gr) = r?;
        sum.render += t.render / n;
        if let (Some(acc), Some(v)) = (sum.reg.as_mut(), t.reg) {
            *acc += v / n;
        }
        sum.degenerate += t.degenerate;
        grads.push(gr);
    }
    Ok((sum, reduce_grads(grads)))
}

/// Fails with a dim-mismatch naming the first metric tensor whose shape
/// disagrees with `dims`.
fn check_metric_dims(metric: &ModelParams<f32>, dims: Dims) -> Result<()> {
    let spec = Network::spec(dims);
    for ((name, t), (_, s)) in metric.entries().into_iter().zip(spec.entries()) {
        if stage1_trainable(Component::of(name)) && t.shape() != s.shape.as_slice() {
            return Err(Error::DimMismatch {
                name: name.to_string(),
                expected: s.shape.clone(),
                found: t.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Stage-2 starting point: fresh generation networks from `cfg.seed`, the
/// metric encoders copied from the stage-1 checkpoint.
pub fn stage2_initial_params(metric: &Checkpoint<f32>, cfg: &TrainConfig) -> Result<ModelParams<f32>> {
    check_metric_dims(&metric.params, cfg.dims)?;
    let mut params = ModelParams::<f32>::init(cfg.seed, cfg.dims)?;
    params.audio = metric.params.audio.clone();
    params.visual = metric.params.visual.clone();
    Ok(params)
}

/// Trains the generation networks against a frozen stage-1 metric.
pub fn train_stage2(data: &[SequenceSample], metric: &Checkpoint<f32>, cfg: &TrainConfig) -> Result<TrainOutput> {
    train_stage2_with(data, metric, cfg, &Executor::serial())
}

pub fn train_stage2_with(
    data: &[SequenceSample],
    metric: &Checkpoint<f32>,
    cfg: &TrainConfig,
    exec: &Executor,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if cfg.stage != 2 {
        return Err(invalid("train config", format!("stage 2 training given a stage {} config", cfg.stage)));
    }
    if metric.stage() != 1 {
        return Err(invalid("metric checkpoint", format!("stage {} checkpoint, expected stage 1", metric.stage())));
    }
    let mut params = stage2_initial_params(metric, cfg)?;
    check_data(data, cfg)?;
    let (train, _) = split_by_id(data)?;

    let mut adam = AdamState::new(&params);
    let mut rng = SeededRng::new(cfg.seed).fork(STAGE2_STREAM);
    let trainable = |c| cfg.stage2_trainable(c);
    let mut log = Vec::with_capacity(cfg.iterations as usize);

    for iter in 0..cfg.iterations {
        let samples: Vec<Stage2Sample> = (0..cfg.batch_sequences)
            .map(|_| {
                let seq = rng.below(train.len());
                let t = train[seq].len();
                let anchor = 1 + rng.below(t - 1);
                let j = rng.below(t - 1);
                let identity = if j >= anchor { j + 1 } else { j };
                Stage2Sample { seq, anchor, identity }
            })
            .collect();
        let (terms, grads) = stage2_gradients(&train, &params, &samples, cfg, (1.0, cfg.lambda_reg), exec)
            .map_err(diverged(iter))?;
        let reg = terms.reg.unwrap_or(0.0);
        let total = if cfg.use_car { terms.render + cfg.lambda_reg * reg } else { terms.render };
        if !total.is_finite() {
            return Err(Error::Diverged {
                iteration: iter as usize,
                source: TensorError::NonFinite { op: "loss" },
            });
        }
        adam_step(&mut params, &grads, &mut adam, cfg.learning_rate, trainable)?;
        log.push(LossRecord { iter, total, render: terms.render, reg });
    }
    Ok(TrainOutput {
        checkpoint: Checkpoint { config: *cfg, params, adam },
        log,
    })
}
