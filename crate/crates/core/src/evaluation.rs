//! Held-out evaluation: correlation separation, adjacent-frame retrieval,
//! reconstruction quality and the CERL × CAR ablation grid.
//!
//! Sequences are always visited in id order and merged in that order, so
//! reports do not depend on dataset order or on the executor.

use std::fmt::Write as _;

use crate::binio::{expect_magic, finish_crc, FormatError, Writer};
use crate::checkpoint::Checkpoint;
use crate::encoders::{audio_encode, visual_encode, ModelParams};
use crate::error::{invalid, Error, Result};
use crate::exec::Executor;
use crate::graph::Graph;
use crate::metric::{covariance_of, flat_cosine_of, negatives_for};
use crate::synthdata::SequenceSample;
use crate::tensor::Tensor;
use crate::training::{generate_frame, train_stage2_with, LossRecord, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparationReport {
    pub mean_pos_cosine: f64,
    pub mean_neg_cosine: f64,
    pub separation: f64,
    pub num_pos: u64,
    pub num_neg: u64,
    pub degenerate_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reconstruction {
    pub mse: f64,
    pub psnr: f64,
    pub temporal_consistency: f64,
    pub degenerate_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub separation: SeparationReport,
    pub retrieval_top1: f64,
    pub chance_level: f64,
    pub mse: f64,
    pub psnr: f64,
    pub temporal_consistency: f64,
    pub config: TrainConfig,
}

/// Per-frame audio and visual embeddings of one sequence, as `f64` rows.
struct Embedded {
    audio: Vec<Tensor<f64>>,
    visual: Vec<Tensor<f64>>,
}

fn rows(t: &Tensor<f32>) -> Vec<Tensor<f64>> {
    (0..t.shape()[0]).map(|i| t.index(i).cast()).collect()
}

fn embed_visual(params: &ModelParams<f32>, frames: Tensor<f32>) -> Result<Vec<Tensor<f64>>> {
    let mut g = Graph::new();
    let net = params.bind(&mut g, |_| false);
    let x = g.constant(frames);
    let fv = visual_encode(&mut g, &net, x)?;
    Ok(rows(g.value(fv)))
}

fn embed(params: &ModelParams<f32>, seq: &SequenceSample) -> Result<Embedded> {
    let mut g = Graph::new();
    let net = params.bind(&mut g, |_| false);
    let a = g.constant(seq.audio.clone());
    let fa = audio_encode(&mut g, &net, a)?;
    Ok(Embedded {
        audio: rows(g.value(fa)),
        visual: embed_visual(params, seq.frames.clone())?,
    })
}

fn sorted_by_id(data: &[SequenceSample]) -> Result<Vec<&SequenceSample>> {
    if data.is_empty() {
        return Err(invalid("dataset", "no sequences to evaluate"));
    }
    let mut v: Vec<&SequenceSample> = data.iter().collect();
    v.sort_by_key(|s| s.id);
    Ok(v)
}

fn check_dims(params: &ModelParams<f32>, data: &[SequenceSample]) -> Result<()> {
    let dims = params.dims();
    for s in data {
        let want = [1, dims.frame, dims.frame];
        if s.audio.shape()[1] != dims.a_dim || s.frames.shape()[1..] != want {
            return Err(Error::DimMismatch {
                name: format!("sequence {}", s.id),
                expected: vec![dims.a_dim, 1, dims.frame, dims.frame],
                found: [&s.audio.shape()[1..], &s.frames.shape()[1..]].concat(),
            });
        }
    }
    Ok(())
}

#[derive(Default)]
struct SepAcc {
    pos: f64,
    neg: f64,
    num_pos: u64,
    num_neg: u64,
    degenerate: u64,
}

fn cosine(a: &Tensor<f64>, b: &Tensor<f64>, degenerate: &mut u64) -> Result<f64> {
    let (c, deg) = flat_cosine_of(a, b)?;
    *degenerate += deg as u64;
    Ok(c)
}

/// Mean audio–visual cosine for adjacent pairs against every legal
/// non-adjacent pair.
pub fn separation_stats(data: &[SequenceSample], params: &ModelParams<f32>, tau: usize) -> Result<SeparationReport> {
    separation_stats_with(data, params, tau, &Executor::serial())
}

pub fn separation_stats_with(
    data: &[SequenceSample],
    params: &ModelParams<f32>,
    tau: usize,
    exec: &Executor,
) -> Result<SeparationReport> {
    let seqs = sorted_by_id(data)?;
    check_dims(params, data)?;
    let parts = exec.map(&seqs, |seq| -> Result<SepAcc> {
        let e = embed(params, seq)?;
        let t = seq.len();
        let mut acc = SepAcc::default();
        for i in 1..t {
            let c_a = covariance_of(&e.audio[i - 1], &e.audio[i])?;
            let c_pos = covariance_of(&e.visual[i - 1], &e.visual[i])?;
            acc.pos += cosine(&c_a, &c_pos, &mut acc.degenerate)?;
            acc.num_pos += 1;
            for j in negatives_for(i, tau, t) {
                let c_neg = covariance_of(&e.visual[i - 1], &e.visual[j])?;
                acc.neg += cosine(&c_a, &c_neg, &mut acc.degenerate)?;
                acc.num_neg += 1;
            }
        }
        Ok(acc)
    });
    let mut total = SepAcc::default();
    for p in parts {
        let p = p?;
        total.pos += p.pos;
        total.neg += p.neg;
        total.num_pos += p.num_pos;
        total.num_neg += p.num_neg;
        total.degenerate += p.degenerate;
    }
    if total.num_pos == 0 || total.num_neg == 0 {
        return Err(invalid("dataset", "sequences too short for positive and negative pairs"));
    }
    let mean_pos_cosine = total.pos / total.num_pos as f64;
    let mean_neg_cosine = total.neg / total.num_neg as f64;
    Ok(SeparationReport {
        mean_pos_cosine,
        mean_neg_cosine,
        separation: mean_pos_cosine - mean_neg_cosine,
        num_pos: total.num_pos,
        num_neg: total.num_neg,
        degenerate_count: total.degenerate,
    })
}

/// Fraction of anchors `i` whose audio relationship `(i−1, i)` ranks the
/// visual pair `(i−1, i)` first among all `(i−1, j)`, `j ≠ i−1`; ties go to
/// the lower `j`. Returns `(top1, chance)` with chance `1/(T−1)`.
pub fn retrieval_accuracy(data: &[SequenceSample], params: &ModelParams<f32>) -> Result<(f64, f64)> {
    retrieval_accuracy_with(data, params, &Executor::serial())
}

pub fn retrieval_accuracy_with(
    data: &[SequenceSample],
    params: &ModelParams<f32>,
    exec: &Executor,
) -> Result<(f64, f64)> {
    let seqs = sorted_by_id(data)?;
    check_dims(params, data)?;
    let t = seqs[0].len();
    if t < 3 || seqs.iter().any(|s| s.len() != t) {
        return Err(invalid("dataset", "retrieval needs sequences of one common length ≥ 3"));
    }
    let parts = exec.map(&seqs, |seq| -> Result<(u64, u64)> {
        let e = embed(params, seq)?;
        let mut hits = 0;
        let mut ignored = 0;
        for i in 1..t {
            let c_a = covariance_of(&e.audio[i - 1], &e.audio[i])?;
            let mut best: Option<(usize, f64)> = None;
            for j in (0..t).filter(|&j| j != i - 1) {
                let c_v = covariance_of(&e.visual[i - 1], &e.visual[j])?;
                let c = cosine(&c_a, &c_v, &mut ignored)?;
                if best.is_none_or(|(_, b)| c > b) {
                    best = Some((j, c));
                }
            }
            hits += (best.map(|(j, _)| j) == Some(i)) as u64;
        }
        Ok((hits, (t - 1) as u64))
    });
    let (mut hits, mut total) = (0, 0);
    for p in parts {
        let (h, n) = p?;
        hits += h;
        total += n;
    }
    Ok((hits as f64 / total as f64, 1.0 / (t - 1) as f64))
}

/// Scores supplied frames: `generated[s][i−1]` stands for frame `i ≥ 1` of
/// the `s`-th sequence in id order.
pub fn score_frames(
    data: &[SequenceSample],
    params: &ModelParams<f32>,
    generated: &[Vec<Tensor<f32>>],
) -> Result<Reconstruction> {
    let seqs = sorted_by_id(data)?;
    check_dims(params, data)?;
    if generated.len() != seqs.len() {
        return Err(invalid("generated frames", format!("{} sequences, expected {}", generated.len(), seqs.len())));
    }
    let (mut sq, mut pixels, mut tc, mut count, mut degenerate) = (0.0, 0u64, 0.0, 0u64, 0u64);
    for (seq, frames) in seqs.iter().zip(generated) {
        let t = seq.len();
        if frames.len() != t - 1 {
            return Err(invalid("generated frames", format!("sequence {}: {} frames, expected {}", seq.id, frames.len(), t - 1)));
        }
        let e = embed(params, seq)?;
        let gen = embed_visual(params, Tensor::stack(frames)?)?;
        for i in 1..t {
            let truth = seq.frame(i);
            let fake = &frames[i - 1];
            if fake.shape() != truth.shape() {
                return Err(Error::DimMismatch {
                    name: format!("generated frame {i} of sequence {}", seq.id),
                    expected: truth.shape().to_vec(),
                    found: fake.shape().to_vec(),
                });
            }
            for (a, b) in fake.data().iter().zip(truth.data()) {
                let d = *a as f64 - *b as f64;
                sq += d * d;
            }
            pixels += truth.len() as u64;
            let c_a = covariance_of(&e.audio[i - 1], &e.audio[i])?;
            let c_gen = covariance_of(&e.visual[i - 1], &gen[i - 1])?;
            tc += cosine(&c_a, &c_gen, &mut degenerate)?;
            count += 1;
        }
    }
    let mse = sq / pixels as f64;
    Ok(Reconstruction {
        mse,
        psnr: 10.0 * (1.0 / mse).log10(),
        temporal_consistency: tc / count as f64,
        degenerate_count: degenerate,
    })
}

/// Frames `1..T` of every sequence (id order) regenerated from frame 0.
pub fn generate_frames(data: &[SequenceSample], ckpt: &Checkpoint<f32>, exec: &Executor) -> Result<Vec<Vec<Tensor<f32>>>> {
    let seqs = sorted_by_id(data)?;
    check_dims(&ckpt.params, data)?;
    exec.map(&seqs, |seq| {
        (1..seq.len())
            .map(|i| {
                let mut g = Graph::new();
                let net = ckpt.params.bind(&mut g, |_| false);
                let out = generate_frame(&mut g, &net, seq, i, 0, ckpt.config.use_cerl)?;
                Ok(g.value(out.frame).clone())
            })
            .collect()
    })
    .into_iter()
    .collect()
}

/// Reconstruction quality of a stage-2 checkpoint, identity frame 0.
pub fn reconstruction_metrics(data: &[SequenceSample], ckpt: &Checkpoint<f32>) -> Result<Reconstruction> {
    reconstruction_metrics_with(data, ckpt, &Executor::serial())
}

pub fn reconstruction_metrics_with(data: &[SequenceSample], ckpt: &Checkpoint<f32>, exec: &Executor) -> Result<Reconstruction> {
    if ckpt.stage() != 2 {
        return Err(invalid("checkpoint", format!("stage {} checkpoint, expected stage 2", ckpt.stage())));
    }
    let frames = generate_frames(data, ckpt, exec)?;
    score_frames(data, &ckpt.params, &frames)
}

/// Full report for a stage-2 checkpoint (its metric encoders are the frozen
/// stage-1 ones).
pub fn evaluate(heldout: &[SequenceSample], ckpt: &Checkpoint<f32>, exec: &Executor) -> Result<EvalReport> {
    let tau = ckpt.config.tau as usize;
    let separation = separation_stats_with(heldout, &ckpt.params, tau, exec)?;
    let (retrieval_top1, chance_level) = retrieval_accuracy_with(heldout, &ckpt.params, exec)?;
    let rec = reconstruction_metrics_with(heldout, ckpt, exec)?;
    Ok(EvalReport {
        separation,
        retrieval_top1,
        chance_level,
        mse: rec.mse,
        psnr: rec.psnr,
        temporal_consistency: rec.temporal_consistency,
        config: ckpt.config,
    })
}

pub const TVER_MAGIC: &[u8; 4] = b"TVER";
pub const TVER_VERSION: u32 = 1;

impl EvalReport {
    fn fields(&self) -> Vec<(&'static str, String)> {
        let c = &self.config;
        let s = &self.separation;
        vec![
            ("config.stage", c.stage.to_string()),
            ("config.iterations", c.iterations.to_string()),
            ("config.learning_rate", c.learning_rate.to_string()),
            ("config.batch_sequences", c.batch_sequences.to_string()),
            ("config.tau", c.tau.to_string()),
            ("config.lambda_reg", c.lambda_reg.to_string()),
            ("config.use_cerl", c.use_cerl.to_string()),
            ("config.use_car", c.use_car.to_string()),
            ("config.seed", c.seed.to_string()),
            ("config.a_dim", c.dims.a_dim.to_string()),
            ("config.d", c.dims.d.to_string()),
            ("config.c", c.dims.c.to_string()),
            ("config.frame", c.dims.frame.to_string()),
            ("separation.mean_pos_cosine", s.mean_pos_cosine.to_string()),
            ("separation.mean_neg_cosine", s.mean_neg_cosine.to_string()),
            ("separation.separation", s.separation.to_string()),
            ("separation.num_pos", s.num_pos.to_string()),
            ("separation.num_neg", s.num_neg.to_string()),
            ("separation.degenerate_count", s.degenerate_count.to_string()),
            ("retrieval_top1", self.retrieval_top1.to_string()),
            ("chance_level", self.chance_level.to_string()),
            ("mse", self.mse.to_string()),
            ("psnr", self.psnr.to_string()),
            ("temporal_consistency", self.temporal_consistency.to_string()),
        ]
    }

    /// `key=value` lines, config echo first.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.fields() {
            writeln!(out, "{k}={v}").expect("string write");
        }
        out
    }

    /// Flat binary mirror: magic, version, the metrics as LE f64/u64 in
    /// [`to_text`](Self::to_text) order (config excluded), CRC32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.separation;
        let mut w = Writer::new();
        w.bytes(TVER_MAGIC);
        w.u32(TVER_VERSION);
        w.f64(s.mean_pos_cosine);
        w.f64(s.mean_neg_cosine);
        w.f64(s.separation);
        w.u64(s.num_pos);
        w.u64(s.num_neg);
        w.u64(s.degenerate_count);
        for v in [self.retrieval_top1, self.chance_level, self.mse, self.psnr, self.temporal_consistency] {
            w.f64(v);
        }
        w.finish_with_crc(4)
    }

    /// Decodes the metrics of [`to_bytes`](Self::to_bytes) onto `config`.
    pub fn from_bytes(bytes: &[u8], config: TrainConfig) -> Result<Self> {
        let mut r = expect_magic(bytes, TVER_MAGIC, "TVER")?;
        let version = r.u32()?;
        if version != TVER_VERSION {
            return Err(FormatError::UnsupportedVersion { format: "TVER", found: version }.into());
        }
        let separation = SeparationReport {
            mean_pos_cosine: r.f64()?,
            mean_neg_cosine: r.f64()?,
            separation: r.f64()?,
            num_pos: r.u64()?,
            num_neg: r.u64()?,
            degenerate_count: r.u64()?,
        };
        let report = Self {
            separation,
            retrieval_top1: r.f64()?,
            chance_level: r.f64()?,
            mse: r.f64()?,
            psnr: r.f64()?,
            temporal_consistency: r.f64()?,
            config,
        };
        finish_crc(r)?;
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub use_cerl: bool,
    pub use_car: bool,
    pub report: EvalReport,
    pub final_loss: f64,
    pub log: Vec<LossRecord>,
    pub checkpoint: Checkpoint<f32>,
}

impl AblationCell {
    pub fn label(&self) -> String {
        cell_label(self.use_cerl, self.use_car)
    }
}

fn cell_label(cerl: bool, car: bool) -> String {
    let on = |b: bool| if b { "on" } else { "off" };
    format!("cerl={},car={}", on(cerl), on(car))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub cells: Vec<AblationCell>,
}

impl AblationGrid {
    pub fn cell(&self, use_cerl: bool, use_car: bool) -> &AblationCell {
        self.cells
            .iter()
            .find(|c| c.use_cerl == use_cerl && c.use_car == use_car)
            .expect("grid holds all four cells")
    }

    /// Tab-separated table, one row per cell.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "cerl\tcar\tseparation\tretrieval_top1\tmse\tpsnr\ttemporal_consistency\tfinal_loss_total\n",
        );
        for c in &self.cells {
            let r = &c.report;
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                c.use_cerl as u8,
                c.use_car as u8,
                r.separation.separation,
                r.retrieval_top1,
                r.mse,
                r.psnr,
                r.temporal_consistency,
                c.final_loss
            )
            .expect("string write");
        }
        out
    }
}

/// Trains and evaluates stage 2 for every CERL × CAR combination from the
/// same metric checkpoint and base config. Cells run in the order
/// (on,on), (on,off), (off,on), (off,off).
pub fn run_ablation(
    data: &[SequenceSample],
    heldout: &[SequenceSample],
    metric: &Checkpoint<f32>,
    base: &TrainConfig,
    exec: &Executor,
) -> Result<AblationGrid> {
    let mut cells = Vec::with_capacity(4);
    for (use_cerl, use_car) in [(true, true), (true, false), (false, true), (false, false)] {
        let cfg = TrainConfig { use_cerl, use_car, ..*base };
        let label = || cell_label(use_cerl, use_car);
        let cell = (|| -> Result<AblationCell> {
            let out = train_stage2_with(data, metric, &cfg, exec)?;
            let report = evaluate(heldout, &out.checkpoint, exec)?;
            Ok(AblationCell {
                use_cerl,
                use_car,
                report,
                final_loss: out.log.last().map_or(f64::NAN, |r| r.total),
                log: out.log,
                checkpoint: out.checkpoint,
            })
        })()
        .map_err(|e| Error::Cell { cell: label(), source: Box::new(e) })?;
        cells.push(cell);
    }
    Ok(AblationGrid { cells })
}
