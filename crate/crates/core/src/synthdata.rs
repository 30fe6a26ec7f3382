//! Synthetic speakers with controllable audio-visual coupling.
//!
//! Each sequence follows a variance-preserving AR(1) latent trajectory `z`.
//! Audio is a fixed linear read-out of `z` plus noise. The video shows a
//! per-sequence smooth background (the identity) with a bright "mouth"
//! rectangle whose height follows the first coordinate of
//! `y = γ·z + (1−γ)·z̃`, where `z̃` is an independent trajectory. With `γ = 0`
//! the two streams share nothing.
//!
//! # TVDS layout (all little-endian)
//!
//! ```text
//! "TVDS" | u32 version=1
//! u64 seed | u32 num_sequences | u32 T | u32 A_dim | u32 k | f32 ρ | f32 σ_a | f32 γ
//! u32 sequence count
//! per sequence: u32 id | audio T×A_dim f32 | frames T×1×32×32 f32 | latent T×k f32
//! u32 CRC32 (IEEE) of every byte after the magic
//! ```

use std::path::Path;

use crate::binio::{checked_size, expect_magic, finish_crc, write_atomic, FormatError, Reader, Writer};
use crate::error::{invalid, Result};
use crate::graph::sigmoid;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const FRAME_SIDE: usize = 32;
pub const MOUTH_ROW: usize = 24;
pub const MOUTH_COL: usize = 16;
pub const MOUTH_WIDTH: usize = 12;
/// Added to the background under the mouth, then clamped to 1.
pub const MOUTH_INTENSITY: f32 = 0.5;
const BACKGROUND_GRID: usize = 5;
const BACKGROUND_RANGE: (f64, f64) = (0.1, 0.6);

pub const TVDS_MAGIC: &[u8; 4] = b"TVDS";
pub const TVDS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub num_sequences: u32,
    pub t: u32,
    pub a_dim: u32,
    pub k: u32,
    pub rho: f32,
    pub sigma_a: f32,
    pub gamma: f32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_sequences: 50,
            t: 32,
            a_dim: 64,
            k: 4,
            rho: 0.9,
            sigma_a: 0.05,
            gamma: 1.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(invalid("generator config", msg));
        if self.num_sequences == 0 || self.t < 2 || self.a_dim == 0 || self.k == 0 {
            return bad(format!(
                "need num_sequences ≥ 1, T ≥ 2, A_dim ≥ 1, k ≥ 1 (got {}, {}, {}, {})",
                self.num_sequences, self.t, self.a_dim, self.k
            ));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad(format!("rho {} outside [0, 1)", self.rho));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if !(self.sigma_a >= 0.0 && self.sigma_a.is_finite()) {
            return bad(format!("sigma_a {} must be ≥ 0", self.sigma_a));
        }
        Ok(())
    }

    fn write(&self, w: &mut Writer) {
        w.u64(self.seed);
        w.u32(self.num_sequences);
        w.u32(self.t);
        w.u32(self.a_dim);
        w.u32(self.k);
        w.f32(self.rho);
        w.f32(self.sigma_a);
        w.f32(self.gamma);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, FormatError> {
        Ok(Self {
            seed: r.u64()?,
            num_sequences: r.u32()?,
            t: r.u32()?,
            a_dim: r.u32()?,
            k: r.u32()?,
            rho: r.f32()?,
            sigma_a: r.f32()?,
            gamma: r.f32()?,
        })
    }
}

/// One synthetic speaker: `T` aligned audio clips and frames.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub id: u32,
    /// `T × A_dim`
    pub audio: Tensor<f32>,
    /// `T × 1 × 32 × 32`, values in `[0, 1]`
    pub frames: Tensor<f32>,
    /// `T × k` audio-side latent trajectory
    pub latent: Tensor<f32>,
    pub coupling: f32,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.audio.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clip(&self, i: usize) -> Tensor<f32> {
        self.audio.index(i)
    }

    pub fn frame(&self, i: usize) -> Tensor<f32> {
        self.frames.index(i)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.coupling.to_bits() == other.coupling.to_bits()
            && self.audio.bit_eq(&other.audio)
            && self.frames.bit_eq(&other.frames)
            && self.latent.bit_eq(&other.latent)
    }
}

/// `T × k` AR(1) trajectory with unit stationary variance:
/// `z_0 ~ N(0, I)`, `z_t = ρ z_{t−1} + √(1−ρ²) ε_t`.
pub fn latent_trajectory(rng: &mut SeededRng, t: usize, k: usize, rho: f64) -> Vec<f64> {
    let innov = (1.0 - rho * rho).sqrt();
    let mut z = Vec::with_capacity(t * k);
    for step in 0..t {
        for j in 0..k {
            let e = rng.normal();
            let v = if step == 0 { e } else { rho * z[(step - 1) * k + j] + innov * e };
            z.push(v);
        }
    }
    z
}

/// `A_dim × k` read-out matrix shared by every sequence of a dataset, entries
/// `N(0, 1/k)` so each audio coordinate has roughly unit variance.
pub fn mixing_matrix(cfg: &GeneratorConfig) -> Vec<f64> {
    let mut rng = SeededRng::new(cfg.seed).fork(0);
    let std = (1.0 / cfg.k as f64).sqrt();
    (0..cfg.a_dim * cfg.k).map(|_| std * rng.normal()).collect()
}

/// Mouth height in pixels for a visual latent value.
pub fn mouth_height(y0: f64) -> usize {
    (2.0 + 8.0 * sigmoid(y0)).round() as usize
}

/// Smooth background: a coarse random grid bilinearly interpolated to the frame.
fn background(rng: &mut SeededRng) -> Vec<f32> {
    let n = BACKGROUND_GRID;
    let grid: Vec<f64> = (0..n * n)
        .map(|_| rng.uniform(BACKGROUND_RANGE.0, BACKGROUND_RANGE.1))
        .collect();
    let scale = (n - 1) as f64 / (FRAME_SIDE - 1) as f64;
    let mut out = Vec::with_capacity(FRAME_SIDE * FRAME_SIDE);
    for r in 0..FRAME_SIDE {
        let gy = r as f64 * scale;
        let (y0, fy) = ((gy.floor() as usize).min(n - 2), gy - (gy.floor()).min((n - 2) as f64));
        for c in 0..FRAME_SIDE {
            let gx = c as f64 * scale;
            let (x0, fx) = ((gx.floor() as usize).min(n - 2), gx - (gx.floor()).min((n - 2) as f64));
            let at = |y: usize, x: usize| grid[y * n + x];
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    out
}

/// Draws `background` with a mouth of height `h` into `frame`.
fn render(frame: &mut [f32], background: &[f32], h: usize) {
    frame.copy_from_slice(background);
    let top = MOUTH_ROW - h / 2;
    let left = MOUTH_COL - MOUTH_WIDTH / 2;
    for r in top..(top + h).min(FRAME_SIDE) {
        for c in left..left + MOUTH_WIDTH {
            let p = &mut frame[r * FRAME_SIDE + c];
            *p = (*p + MOUTH_INTENSITY).min(1.0);
        }
    }
}

pub fn generate_sequence(cfg: &GeneratorConfig, id: u32) -> Result<SequenceSample> {
    cfg.validate()?;
    Ok(generate_with(cfg, &mixing_matrix(cfg), id))
}

fn generate_with(cfg: &GeneratorConfig, mixing: &[f64], id: u32) -> SequenceSample {
    let (t, a_dim, k) = (cfg.t as usize, cfg.a_dim as usize, cfg.k as usize);
    let (rho, sigma, gamma) = (cfg.rho as f64, cfg.sigma_a as f64, cfg.gamma as f64);
    let base = SeededRng::new(cfg.seed).fork(1 + id as u64);
    let z = latent_trajectory(&mut base.fork(0), t, k, rho);
    let z_other = latent_trajectory(&mut base.fork(1), t, k, rho);
    let mut noise = base.fork(2);
    let bg = background(&mut base.fork(3));

    let mut audio = Vec::with_capacity(t * a_dim);
    for step in 0..t {
        let zt = &z[step * k..(step + 1) * k];
        for row in 0..a_dim {
            let proj: f64 = (0..k).map(|j| mixing[row * k + j] * zt[j]).sum();
            audio.push((proj + sigma * noise.normal()) as f32);
        }
    }

    let plane = FRAME_SIDE * FRAME_SIDE;
    let mut frames = vec![0.0f32; t * plane];
    for step in 0..t {
        let y0 = gamma * z[step * k] + (1.0 - gamma) * z_other[step * k];
        render(&mut frames[step * plane..(step + 1) * plane], &bg, mouth_height(y0));
    }

    SequenceSample {
        id,
        audio: Tensor::new(&[t, a_dim], audio).expect("audio shape"),
        frames: Tensor::new(&[t, 1, FRAME_SIDE, FRAME_SIDE], frames).expect("frame shape"),
        latent: Tensor::new(&[t, k], z.iter().map(|&v| v as f32).collect()).expect("latent shape"),
        coupling: cfg.gamma,
    }
}

/// Sequences `0..num_sequences`.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Vec<SequenceSample>> {
    cfg.validate()?;
    let mixing = mixing_matrix(cfg);
    Ok((0..cfg.num_sequences).map(|id| generate_with(cfg, &mixing, id)).collect())
}

/// Sequences ordered by id, split into (training, held-out); the held-out
/// part is the last 20% of ids (at least one).
pub fn split_by_id(samples: &[SequenceSample]) -> Result<(Vec<SequenceSample>, Vec<SequenceSample>)> {
    if samples.len() < 2 {
        return Err(invalid("dataset", format!("need at least 2 sequences to split, got {}", samples.len())));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by_key(|s| s.id);
    let held = (sorted.len() / 5).max(1);
    let heldout = sorted.split_off(sorted.len() - held);
    Ok((sorted, heldout))
}

pub fn encode_dataset(samples: &[SequenceSample], cfg: &GeneratorConfig) -> Result<Vec<u8>> {
    if samples.is_empty() {
        return Err(invalid("dataset", "no sequences to write"));
    }
    let (t, a_dim, k) = (cfg.t as usize, cfg.a_dim as usize, cfg.k as usize);
    let mut w = Writer::new();
    w.bytes(TVDS_MAGIC);
    w.u32(TVDS_VERSION);
    cfg.write(&mut w);
    w.u32(samples.len() as u32);
    for s in samples {
        let expect = [
            (s.audio.shape(), vec![t, a_dim]),
            (s.frames.shape(), vec![t, 1, FRAME_SIDE, FRAME_SIDE]),
            (s.latent.shape(), vec![t, k]),
        ];
        for (got, want) in expect {
            if got != want.as_slice() {
                return Err(invalid("dataset", format!("sequence {} has shape {got:?}, config implies {want:?}", s.id)));
            }
        }
        w.u32(s.id);
        for t in [&s.audio, &s.frames, &s.latent] {
            for &v in t.data() {
                w.f32(v);
            }
        }
    }
    Ok(w.finish_with_crc(4))
}

pub fn decode_dataset(bytes: &[u8]) -> Result<(Vec<SequenceSample>, GeneratorConfig)> {
    let mut r = expect_magic(bytes, TVDS_MAGIC, "TVDS")?;
    let version = r.u32()?;
    if version != TVDS_VERSION {
        return Err(FormatError::UnsupportedVersion {
            format: "TVDS",
            found: version,
        }
        .into());
    }
    let cfg = GeneratorConfig::read(&mut r)?;
    let count = r.u32()? as usize;
    let (t, a_dim, k) = (cfg.t as usize, cfg.a_dim as usize, cfg.k as usize);
    let per_seq = a_dim
        .checked_add(FRAME_SIDE * FRAME_SIDE)
        .and_then(|n| n.checked_add(k))
        .and_then(|n| checked_size(&[t, n], 4).ok())
        .and_then(|n| n.checked_add(4));
    let body = per_seq.and_then(|n| n.checked_mul(count));
    match body {
        Some(body) if body <= r.remaining() => {}
        _ => {
            return Err(FormatError::Truncated {
                offset: bytes.len(),
                needed: body.map_or(usize::MAX, |b| b.saturating_add(4) - r.remaining()),
            }
            .into())
        }
    }
    let read_tensor = |r: &mut Reader<'_>, shape: &[usize]| -> Result<Tensor<f32>, FormatError> {
        let raw = r.take(checked_size(shape, 4)?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Tensor::new(shape, data).expect("sized"))
    };
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r.u32()?;
        let audio = read_tensor(&mut r, &[t, a_dim])?;
        let frames = read_tensor(&mut r, &[t, 1, FRAME_SIDE, FRAME_SIDE])?;
        let latent = read_tensor(&mut r, &[t, k])?;
        samples.push(SequenceSample {
            id,
            audio,
            frames,
            latent,
            coupling: cfg.gamma,
        });
    }
    finish_crc(r)?;
    Ok((samples, cfg))
}

pub fn write_dataset(samples: &[SequenceSample], cfg: &GeneratorConfig, path: &Path) -> Result<()> {
    let bytes = encode_dataset(samples, cfg)?;
    write_atomic(path, &bytes)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(Vec<SequenceSample>, GeneratorConfig)> {
    decode_dataset(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    fn small(gamma: f32) -> GeneratorConfig {
        GeneratorConfig {
            num_sequences: 3,
            t: 12,
            a_dim: 8,
            gamma,
            ..GeneratorConfig::default()
        }
    }

    fn corr(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    /// Mouth height recovered from pixels: rows in the mouth column brighter
    /// than the background by the mouth intensity (or clamped at 1).
    fn measured_height(s: &SequenceSample, i: usize) -> f64 {
        let f = s.frame(i);
        (0..FRAME_SIDE)
            .filter(|&r| {
                let v = f.data()[r * FRAME_SIDE + MOUTH_COL];
                let left = f.data()[r * FRAME_SIDE + 2];
                v >= 1.0 || v - left > 0.3
            })
            .count() as f64
    }

    #[test]
    fn determinism_and_shapes() {
        let cfg = small(1.0);
        let a = generate_sequence(&cfg, 1).unwrap();
        let b = generate_sequence(&cfg, 1).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(a.audio.shape(), &[12, 8]);
        assert_eq!(a.frames.shape(), &[12, 1, 32, 32]);
        assert_eq!(a.latent.shape(), &[12, 4]);
        assert!(a.frames.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!(!generate_sequence(&cfg, 2).unwrap().bit_eq(&a));
    }

    #[test]
    fn invalid_config_rejected() {
        for cfg in [
            GeneratorConfig { rho: 1.0, ..small(1.0) },
            GeneratorConfig { gamma: 1.5, ..small(1.0) },
            GeneratorConfig { sigma_a: -0.1, ..small(1.0) },
            GeneratorConfig { t: 0, ..small(1.0) },
        ] {
            assert!(generate_sequence(&cfg, 0).is_err());
        }
    }

    #[test]
    fn mouth_tracks_latent_when_fully_coupled() {
        let cfg = small(1.0);
        let s = generate_sequence(&cfg, 0).unwrap();
        for i in 0..s.len() {
            let h = mouth_height(s.latent.data()[i * 4] as f64);
            assert_eq!(measured_height(&s, i), h as f64, "frame {i}");
        }
    }

    #[test]
    fn ar1_variance_is_stationary() {
        let mut rng = SeededRng::new(0);
        let (draws, t) = (10_000, 8);
        let mut sums = vec![0.0; t];
        for _ in 0..draws {
            let z = latent_trajectory(&mut rng, t, 1, 0.9);
            for (s, v) in sums.iter_mut().zip(&z) {
                *s += v * v;
            }
        }
        for s in sums {
            let var = s / draws as f64;
            assert!((0.9..=1.1).contains(&var), "{var}");
        }
    }

    #[test]
    fn white_latent_without_smoothness() {
        let cfg = GeneratorConfig { t: 512, rho: 0.0, ..small(1.0) };
        let s = generate_sequence(&cfg, 0).unwrap();
        let z: Vec<f64> = (0..512).map(|i| s.latent.data()[i * 4] as f64).collect();
        let lag1 = corr(&z[..511], &z[1..]);
        assert!(lag1.abs() <= 0.15, "{lag1}");
    }

    fn coupling_corr(gamma: f32, seqs: u32) -> f64 {
        let cfg = GeneratorConfig { t: 512, num_sequences: seqs, gamma, ..GeneratorConfig::default() };
        let w = mixing_matrix(&cfg);
        let (mut hs, mut proj) = (Vec::new(), Vec::new());
        for s in generate_dataset(&cfg).unwrap() {
            for i in 0..s.len() {
                hs.push(measured_height(&s, i));
                let a = s.clip(i);
                proj.push((0..64).map(|r| a.data()[r] as f64 * w[r * 4]).sum::<f64>());
            }
        }
        corr(&hs, &proj)
    }

    #[test]
    fn uncoupled_frames_ignore_audio() {
        let cfg = GeneratorConfig { t: 512, num_sequences: 1, gamma: 0.0, ..GeneratorConfig::default() };
        let s = &generate_dataset(&cfg).unwrap()[0];
        let h: Vec<f64> = (0..512).map(|i| measured_height(s, i)).collect();
        let a0: Vec<f64> = (0..512).map(|i| s.audio.data()[i * 64] as f64).collect();
        let c = corr(&h, &a0);
        assert!(c.abs() <= 0.15, "{c}");
    }

    #[test]
    fn coupling_is_monotone() {
        let c: Vec<f64> = [0.0, 0.5, 1.0].iter().map(|&g| coupling_corr(g, 20)).collect();
        assert!(c[0] < c[1] && c[1] < c[2], "{c:?}");
    }

    #[test]
    fn dataset_round_trip() {
        let cfg = small(0.5);
        let samples = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tvds");
        write_dataset(&samples, &cfg, &path).unwrap();
        let (back, cfg2) = read_dataset(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(back.len(), samples.len());
        for (a, b) in back.iter().zip(&samples) {
            assert!(a.bit_eq(b));
        }
        // Rewriting reproduces the same bytes.
        let again = encode_dataset(&back, &cfg2).unwrap();
        assert_eq!(again, std::fs::read(&path).unwrap());
    }

    #[test]
    fn any_corrupted_byte_is_rejected() {
        let cfg = GeneratorConfig { num_sequences: 2, t: 4, a_dim: 3, ..small(1.0) };
        let bytes = encode_dataset(&generate_dataset(&cfg).unwrap(), &cfg).unwrap();
        let mut bad = bytes.clone();
        for i in 0..bytes.len() {
            for mask in [0x01, 0x80, 0xFF] {
                bad[i] ^= mask;
                assert!(decode_dataset(&bad).is_err(), "byte {i} ^ {mask:#x}");
                bad[i] ^= mask;
            }
        }
    }

    #[test]
    fn dataset_errors() {
        let cfg = small(1.0);
        assert!(encode_dataset(&[], &cfg).is_err());
        let bytes = encode_dataset(&generate_dataset(&cfg).unwrap(), &cfg).unwrap();

        let mut bad = bytes.clone();
        let mid = bytes.len() / 2;
        bad[mid] ^= 0x40;
        assert!(matches!(decode_dataset(&bad), Err(Error::Format(FormatError::Crc { .. }))));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        let err = decode_dataset(&magic).unwrap_err();
        assert_eq!(err.to_string(), "not a TVDS file");

        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(decode_dataset(&version), Err(Error::Format(FormatError::UnsupportedVersion { .. }))));

        for cut in [2, 10, 60, bytes.len() / 3, bytes.len() - 1] {
            let err = decode_dataset(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format(FormatError::Truncated { .. })), "cut {cut}: {err}");
        }
    }

    #[test]
    fn split_holds_out_last_fifth() {
        let cfg = GeneratorConfig { num_sequences: 10, t: 8, ..GeneratorConfig::default() };
        let (train, held) = split_by_id(&generate_dataset(&cfg).unwrap()).unwrap();
        assert_eq!(train.iter().map(|s| s.id).collect::<Vec<_>>(), (0..8).collect::<Vec<_>>());
        assert_eq!(held.iter().map(|s| s.id).collect::<Vec<_>>(), vec![8, 9]);
    }
}
