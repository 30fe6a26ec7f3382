//! TVCE checkpoints: model parameters, Adam moments and the config that
//! produced them.
//!
//! ```text
//! "TVCE" | u32 version=1 | u8 stage
//! u32 iterations | f64 learning_rate | u32 batch_sequences | u32 tau | f64 lambda_reg
//! u8 use_cerl | u8 use_car | u64 seed | u32 A_dim | u32 D | u32 C | u32 frame side
//! u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 rank | u32 dims[rank] | u8 dtype | LE payload
//! u32 CRC32 (IEEE) of every byte after the magic
//! ```
//!
//! Tensors are the model parameters under their canonical names, then
//! `adam.m.<name>` / `adam.v.<name>` for every stepped parameter, then the
//! rank-0 f64 `adam.step`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::binio::{checked_size, expect_magic, finish_crc, write_atomic, FormatError, Reader, Writer};
use crate::encoders::{Dims, ModelParams, Network, ParamSpec};
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use crate::training::TrainConfig;

pub const TVCE_MAGIC: &[u8; 4] = b"TVCE";
pub const TVCE_VERSION: u32 = 1;
const STEP_NAME: &str = "adam.step";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar = f32> {
    pub config: TrainConfig,
    pub params: ModelParams<T>,
    pub adam: AdamState<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn stage(&self) -> u8 {
        self.config.stage
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(TVCE_MAGIC);
        w.u32(TVCE_VERSION);
        w.u8(self.config.stage);
        write_config(&mut w, &self.config);

        let mut tensors: Vec<(String, &Tensor<T>)> =
            self.params.entries().into_iter().map(|(n, t)| (n.to_string(), t)).collect();
        for (prefix, moments) in [("adam.m.", &self.adam.m), ("adam.v.", &self.adam.v)] {
            for (n, t) in moments.entries() {
                if let Some(t) = t {
                    tensors.push((format!("{prefix}{n}"), t));
                }
            }
        }
        w.u32(tensors.len() as u32 + 1);
        for (name, t) in tensors {
            write_header(&mut w, &name, t.shape(), T::DTYPE);
            for &x in t.data() {
                x.write_le(w.buf_mut());
            }
        }
        write_header(&mut w, STEP_NAME, &[], DType::F64);
        w.f64(self.adam.step as f64);
        w.finish_with_crc(4)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = expect_magic(bytes, TVCE_MAGIC, "TVCE")?;
        let version = r.u32()?;
        if version != TVCE_VERSION {
            return Err(FormatError::UnsupportedVersion { format: "TVCE", found: version }.into());
        }
        let stage = r.u8()?;
        let mut config = read_config(&mut r)?;
        config.stage = stage;

        let count = r.u32()? as usize;
        let mut raw: BTreeMap<String, (Vec<usize>, DType, &[u8])> = BTreeMap::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| FormatError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let tag = r.u8()?;
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| FormatError::Malformed(format!("tensor {name}: unknown dtype tag {tag}")))?;
            let payload = r.take(checked_size(&shape, dtype.size())?)?;
            if raw.insert(name.clone(), (shape, dtype, payload)).is_some() {
                return Err(FormatError::Malformed(format!("duplicate tensor {name}")).into());
            }
        }
        finish_crc(r)?;
        config.validate()?;

        let spec = Network::spec(config.dims);
        let decode = |name: &str, spec: &ParamSpec, raw: &(Vec<usize>, DType, &[u8])| -> Result<Tensor<T>> {
            let (shape, dtype, payload) = raw;
            if shape != &spec.shape {
                return Err(Error::DimMismatch {
                    name: name.to_string(),
                    expected: spec.shape.clone(),
                    found: shape.clone(),
                });
            }
            if *dtype != T::DTYPE {
                return Err(FormatError::Malformed(format!("tensor {name}: dtype {dtype:?}, expected {:?}", T::DTYPE)).into());
            }
            let data = payload.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
            Ok(Tensor::new(shape, data)?)
        };

        let params = spec.try_map(|name, s| {
            let entry = raw.remove(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
            decode(name, s, &entry)
        })?;
        let mut moments = |prefix: &str| {
            spec.try_map(|name, s| match raw.remove(&format!("{prefix}{name}")) {
                Some(entry) => decode(&format!("{prefix}{name}"), s, &entry).map(Some),
                None => Ok(None),
            })
        };
        let m = moments("adam.m.")?;
        let v = moments("adam.v.")?;
        for ((name, a), (_, b)) in m.entries().into_iter().zip(v.entries()) {
            if a.is_some() != b.is_some() {
                return Err(Error::MissingTensor(format!("adam moment for {name}")));
            }
        }
        let step = match raw.remove(STEP_NAME) {
            Some((shape, DType::F64, payload)) if shape.is_empty() => f64::read_le(payload),
            Some(_) => return Err(FormatError::Malformed(format!("{STEP_NAME} must be a rank-0 f64")).into()),
            None => return Err(Error::MissingTensor(STEP_NAME.to_string())),
        };
        if !(step >= 0.0 && step.fract() == 0.0) {
            return Err(FormatError::Malformed(format!("{STEP_NAME} = {step}")).into());
        }
        if let Some(name) = raw.keys().next() {
            return Err(Error::UnexpectedTensor(name.clone()));
        }
        Ok(Self {
            config,
            params,
            adam: AdamState { step: step as u64, m, v },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params.bit_eq(&other.params) && self.adam.bit_eq(&other.adam)
    }
}

fn write_header(w: &mut Writer, name: &str, shape: &[usize], dtype: DType) {
    w.u16(name.len() as u16);
    w.bytes(name.as_bytes());
    w.u8(shape.len() as u8);
    for &d in shape {
        w.u32(d as u32);
    }
    w.u8(dtype.tag());
}

fn write_config(w: &mut Writer, c: &TrainConfig) {
    w.u32(c.iterations);
    w.f64(c.learning_rate);
    w.u32(c.batch_sequences);
    w.u32(c.tau);
    w.f64(c.lambda_reg);
    w.u8(c.use_cerl as u8);
    w.u8(c.use_car as u8);
    w.u64(c.seed);
    let Dims { a_dim, d, c: channels, frame } = c.dims;
    for v in [a_dim, d, channels, frame] {
        w.u32(v as u32);
    }
}

fn read_bool(r: &mut Reader<'_>, what: &str) -> Result<bool, FormatError> {
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        b => Err(FormatError::Malformed(format!("{what} flag byte {b}"))),
    }
}

fn read_config(r: &mut Reader<'_>) -> Result<TrainConfig, FormatError> {
    Ok(TrainConfig {
        stage: 0,
        iterations: r.u32()?,
        learning_rate: r.f64()?,
        batch_sequences: r.u32()?,
        tau: r.u32()?,
        lambda_reg: r.f64()?,
        use_cerl: read_bool(r, "use_cerl")?,
        use_car: read_bool(r, "use_car")?,
        seed: r.u64()?,
        dims: Dims {
            a_dim: r.u32()? as usize,
            d: r.u32()? as usize,
            c: r.u32()? as usize,
            frame: r.u32()? as usize,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Component;
    use crate::optim::adam_step;

    fn sample() -> Checkpoint<f32> {
        let config = TrainConfig {
            dims: Dims { a_dim: 6, d: 3, c: 4, frame: 8 },
            ..TrainConfig::stage1()
        };
        let mut params = ModelParams::<f32>::init(2, config.dims).unwrap();
        let mut adam = AdamState::new(&params);
        let grads = params.map(|_, t| Some(t.map(|x| 0.5 * x + 0.1)));
        let metric = |c| matches!(c, Component::Audio | Component::Visual);
        adam_step(&mut params, &grads, &mut adam, 1e-3, metric).unwrap();
        Checkpoint { config, params, adam }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert!(back.bit_eq(&ck));
        assert_eq!(back.to_bytes(), bytes);
        assert!(back.adam.m.feature.conv1.weight.is_none());
        assert_eq!(back.adam.step, 1);
    }

    #[test]
    fn any_corrupted_byte_is_rejected() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        for i in 0..bytes.len() {
            for mask in [0x01, 0x80, 0xFF] {
                bad[i] ^= mask;
                assert!(Checkpoint::<f32>::from_bytes(&bad).is_err(), "byte {i} ^ {mask:#x}");
                bad[i] ^= mask;
            }
        }
        // Payload corruption leaves structure intact and must surface as a CRC error.
        let mut bad = bytes.clone();
        let i = bytes.len() - 20;
        bad[i] ^= 0x10;
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bad),
            Err(Error::Format(FormatError::Crc { .. }))
        ));
    }

    #[test]
    fn truncation_and_magic() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() / 2]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"TVDS");
        assert_eq!(Checkpoint::<f32>::from_bytes(&bad).unwrap_err().to_string(), "not a TVCE file");
    }

    #[test]
    fn wrong_dtype_is_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
    }

    /// Rebuilds a checkpoint file with one tensor altered.
    fn rewrite(ck: &Checkpoint<f32>, edit: impl Fn(&mut Vec<(String, Vec<usize>, Vec<f32>)>)) -> Vec<u8> {
        let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = ck
            .params
            .entries()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.data().to_vec()))
            .collect();
        edit(&mut tensors);
        let mut w = Writer::new();
        w.bytes(TVCE_MAGIC);
        w.u32(TVCE_VERSION);
        w.u8(ck.config.stage);
        write_config(&mut w, &ck.config);
        w.u32(tensors.len() as u32 + 1);
        for (name, shape, data) in &tensors {
            write_header(&mut w, name, shape, DType::F32);
            for x in data {
                w.f32(*x);
            }
        }
        write_header(&mut w, STEP_NAME, &[], DType::F64);
        w.f64(0.0);
        w.finish_with_crc(4)
    }

    #[test]
    fn validation_names_the_tensor() {
        let ck = sample();
        let missing = rewrite(&ck, |t| t.retain(|(n, _, _)| n != "generator.up1.bias"));
        let err = Checkpoint::<f32>::from_bytes(&missing).unwrap_err();
        assert!(matches!(&err, Error::MissingTensor(n) if n == "generator.up1.bias"), "{err}");

        let reshaped = rewrite(&ck, |t| {
            let e = t.iter_mut().find(|(n, _, _)| n == "audio_enc.fc2.weight").unwrap();
            e.1 = vec![32, 4];
            e.2 = vec![0.0; 128];
        });
        let err = Checkpoint::<f32>::from_bytes(&reshaped).unwrap_err();
        assert!(err.to_string().contains("audio_enc.fc2.weight"), "{err}");

        let extra = rewrite(&ck, |t| t.push(("bogus".into(), vec![1], vec![0.0])));
        assert!(matches!(Checkpoint::<f32>::from_bytes(&extra), Err(Error::UnexpectedTensor(n)) if n == "bogus"));
    }
}
