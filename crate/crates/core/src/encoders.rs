//! Small encoders, the correlation fusion block and the frame generator.
//!
//! [`Network`] is generic over what it stores: `Network<Tensor<T>>` is the
//! parameter set ([`ModelParams`]), `Network<Var>` the same parameters bound
//! onto a [`Graph`] for one forward/backward pass, and
//! `Network<ParamSpec>` the architecture description both are built from.

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::metric::DEGENERATE_NORM;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

pub const AUDIO_HIDDEN: usize = 32;
pub const VISUAL_HIDDEN: usize = 64;
pub const FEATURE_HIDDEN: usize = 16;
pub const GENERATOR_HIDDEN: usize = 16;

/// Model dimensions. `frame` is the side of the square grayscale frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub a_dim: usize,
    pub d: usize,
    pub c: usize,
    pub frame: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            a_dim: 64,
            d: 16,
            c: 32,
            frame: 32,
        }
    }
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        if self.a_dim == 0 || self.c == 0 {
            return Err(invalid("dims", format!("non-positive dimension in {self:?}")));
        }
        if self.d < 2 {
            return Err(invalid("dims", format!("embedding dimension {} < 2", self.d)));
        }
        if self.frame < 4 || self.frame % 4 != 0 {
            return Err(invalid("dims", format!("frame side {} must be a positive multiple of 4", self.frame)));
        }
        Ok(())
    }

    /// Side of the feature map after two stride-2 convolutions.
    pub fn map_side(&self) -> usize {
        self.frame / 4
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<P> {
    pub weight: P,
    pub bias: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioEncoder<P> {
    pub fc1: Layer<P>,
    pub fc2: Layer<P>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualEncoder<P> {
    pub fc1: Layer<P>,
    pub fc2: Layer<P>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor<P> {
    pub conv1: Layer<P>,
    pub conv2: Layer<P>,
}

/// Bias-free pointwise convolutions of the fusion block.
#[derive(Debug, Clone, PartialEq)]
pub struct Cerl<P> {
    /// `D×C`: feature channels down to embedding width.
    pub reduce: P,
    /// `C×D`: back up to feature channels.
    pub expand: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator<P> {
    pub fuse: Layer<P>,
    pub up1: Layer<P>,
    pub up2: Layer<P>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<P> {
    pub audio: AudioEncoder<P>,
    pub visual: VisualEncoder<P>,
    pub feature: FeatureExtractor<P>,
    pub cerl: Cerl<P>,
    pub generator: Generator<P>,
}

pub type ModelParams<T> = Network<Tensor<T>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Component {
    Audio,
    Visual,
    Feature,
    Cerl,
    Generator,
}

impl Component {
    pub fn of(name: &str) -> Component {
        match name.split('.').next() {
            Some("audio_enc") => Component::Audio,
            Some("visual_enc") => Component::Visual,
            Some("feature") => Component::Feature,
            Some("cerl") => Component::Cerl,
            Some("generator") => Component::Generator,
            _ => panic!("unknown parameter {name}"),
        }
    }
}

/// Shape of one parameter; `fan_in` is `None` for biases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub shape: Vec<usize>,
    pub fan_in: Option<usize>,
}

fn weight(shape: &[usize], fan_in: usize) -> ParamSpec {
    ParamSpec {
        shape: shape.to_vec(),
        fan_in: Some(fan_in),
    }
}

fn bias(n: usize) -> ParamSpec {
    ParamSpec {
        shape: vec![n],
        fan_in: None,
    }
}

impl Network<ParamSpec> {
    pub fn spec(dims: Dims) -> Self {
        let Dims { a_dim, d, c, frame } = dims;
        let (ah, vh, fh, gh) = (AUDIO_HIDDEN, VISUAL_HIDDEN, FEATURE_HIDDEN, GENERATOR_HIDDEN);
        Network {
            audio: AudioEncoder {
                fc1: Layer { weight: weight(&[a_dim, ah], a_dim), bias: bias(ah) },
                fc2: Layer { weight: weight(&[ah, d], ah), bias: bias(d) },
            },
            visual: VisualEncoder {
                fc1: Layer { weight: weight(&[frame * frame, vh], frame * frame), bias: bias(vh) },
                fc2: Layer { weight: weight(&[vh, d], vh), bias: bias(d) },
            },
            feature: FeatureExtractor {
                conv1: Layer { weight: weight(&[fh, 1, 3, 3], 9), bias: bias(fh) },
                conv2: Layer { weight: weight(&[c, fh, 3, 3], fh * 9), bias: bias(c) },
            },
            cerl: Cerl {
                reduce: weight(&[d, c], c),
                expand: weight(&[c, d], d),
            },
            generator: Generator {
                fuse: Layer { weight: weight(&[c, c + d], c + d), bias: bias(c) },
                up1: Layer { weight: weight(&[gh, c, 3, 3], c * 9), bias: bias(gh) },
                up2: Layer { weight: weight(&[1, gh, 3, 3], gh * 9), bias: bias(1) },
            },
        }
    }
}

impl<P> Network<P> {
    /// Every parameter with its canonical name, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, &P)> {
        vec![
            ("audio_enc.fc1.weight", &self.audio.fc1.weight),
            ("audio_enc.fc1.bias", &self.audio.fc1.bias),
            ("audio_enc.fc2.weight", &self.audio.fc2.weight),
            ("audio_enc.fc2.bias", &self.audio.fc2.bias),
            ("visual_enc.fc1.weight", &self.visual.fc1.weight),
            ("visual_enc.fc1.bias", &self.visual.fc1.bias),
            ("visual_enc.fc2.weight", &self.visual.fc2.weight),
            ("visual_enc.fc2.bias", &self.visual.fc2.bias),
            ("feature.conv1.weight", &self.feature.conv1.weight),
            ("feature.conv1.bias", &self.feature.conv1.bias),
            ("feature.conv2.weight", &self.feature.conv2.weight),
            ("feature.conv2.bias", &self.feature.conv2.bias),
            ("cerl.reduce.weight", &self.cerl.reduce),
            ("cerl.expand.weight", &self.cerl.expand),
            ("generator.fuse.weight", &self.generator.fuse.weight),
            ("generator.fuse.bias", &self.generator.fuse.bias),
            ("generator.up1.weight", &self.generator.up1.weight),
            ("generator.up1.bias", &self.generator.up1.bias),
            ("generator.up2.weight", &self.generator.up2.weight),
            ("generator.up2.bias", &self.generator.up2.bias),
        ]
    }

    pub fn entries_mut(&mut self) -> Vec<(&'static str, &mut P)> {
        vec![
            ("audio_enc.fc1.weight", &mut self.audio.fc1.weight),
            ("audio_enc.fc1.bias", &mut self.audio.fc1.bias),
            ("audio_enc.fc2.weight", &mut self.audio.fc2.weight),
            ("audio_enc.fc2.bias", &mut self.audio.fc2.bias),
            ("visual_enc.fc1.weight", &mut self.visual.fc1.weight),
            ("visual_enc.fc1.bias", &mut self.visual.fc1.bias),
            ("visual_enc.fc2.weight", &mut self.visual.fc2.weight),
            ("visual_enc.fc2.bias", &mut self.visual.fc2.bias),
            ("feature.conv1.weight", &mut self.feature.conv1.weight),
            ("feature.conv1.bias", &mut self.feature.conv1.bias),
            ("feature.conv2.weight", &mut self.feature.conv2.weight),
            ("feature.conv2.bias", &mut self.feature.conv2.bias),
            ("cerl.reduce.weight", &mut self.cerl.reduce),
            ("cerl.expand.weight", &mut self.cerl.expand),
            ("generator.fuse.weight", &mut self.generator.fuse.weight),
            ("generator.fuse.bias", &mut self.generator.fuse.bias),
            ("generator.up1.weight", &mut self.generator.up1.weight),
            ("generator.up1.bias", &mut self.generator.up1.bias),
            ("generator.up2.weight", &mut self.generator.up2.weight),
            ("generator.up2.bias", &mut self.generator.up2.bias),
        ]
    }

    pub fn names() -> Vec<&'static str> {
        Network::spec(Dims::default()).entries().into_iter().map(|(n, _)| n).collect()
    }

    /// Builds a new network field by field, visiting in [`entries`](Self::entries) order.
    pub fn try_map<Q, E>(&self, mut f: impl FnMut(&'static str, &P) -> Result<Q, E>) -> Result<Network<Q>, E> {
        let mut layer = |n: [&'static str; 2], l: &Layer<P>| -> Result<Layer<Q>, E> {
            Ok(Layer {
                weight: f(n[0], &l.weight)?,
                bias: f(n[1], &l.bias)?,
            })
        };
        let audio = AudioEncoder {
            fc1: layer(["audio_enc.fc1.weight", "audio_enc.fc1.bias"], &self.audio.fc1)?,
            fc2: layer(["audio_enc.fc2.weight", "audio_enc.fc2.bias"], &self.audio.fc2)?,
        };
        let visual = VisualEncoder {
            fc1: layer(["visual_enc.fc1.weight", "visual_enc.fc1.bias"], &self.visual.fc1)?,
            fc2: layer(["visual_enc.fc2.weight", "visual_enc.fc2.bias"], &self.visual.fc2)?,
        };
        let feature = FeatureExtractor {
            conv1: layer(["feature.conv1.weight", "feature.conv1.bias"], &self.feature.conv1)?,
            conv2: layer(["feature.conv2.weight", "feature.conv2.bias"], &self.feature.conv2)?,
        };
        drop(layer);
        let cerl = Cerl {
            reduce: f("cerl.reduce.weight", &self.cerl.reduce)?,
            expand: f("cerl.expand.weight", &self.cerl.expand)?,
        };
        let mut layer = |n: [&'static str; 2], l: &Layer<P>| -> Result<Layer<Q>, E> {
            Ok(Layer {
                weight: f(n[0], &l.weight)?,
                bias: f(n[1], &l.bias)?,
            })
        };
        let generator = Generator {
            fuse: layer(["generator.fuse.weight", "generator.fuse.bias"], &self.generator.fuse)?,
            up1: layer(["generator.up1.weight", "generator.up1.bias"], &self.generator.up1)?,
            up2: layer(["generator.up2.weight", "generator.up2.bias"], &self.generator.up2)?,
        };
        Ok(Network {
            audio,
            visual,
            feature,
            cerl,
            generator,
        })
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&'static str, &P) -> Q) -> Network<Q> {
        self.try_map(|n, p| Ok::<_, std::convert::Infallible>(f(n, p)))
            .unwrap_or_else(|e| match e {})
    }
}

impl<T: Scalar> ModelParams<T> {
    /// He-normal weights `N(0, 2/fan_in)`, zero biases.
    pub fn init(seed: u64, dims: Dims) -> Result<Self> {
        dims.validate()?;
        let mut rng = SeededRng::new(seed);
        Ok(Network::spec(dims).map(|_, spec| match spec.fan_in {
            Some(fan_in) => Tensor::randn(&spec.shape, (2.0 / fan_in as f64).sqrt(), &mut rng),
            None => Tensor::zeros(&spec.shape),
        }))
    }

    pub fn dims(&self) -> Dims {
        let s = self.visual.fc1.weight.shape()[0];
        Dims {
            a_dim: self.audio.fc1.weight.shape()[0],
            d: self.audio.fc2.weight.shape()[1],
            c: self.feature.conv2.weight.shape()[0],
            frame: (s as f64).sqrt().round() as usize,
        }
    }

    pub fn component_param_count(&self, component: Component) -> usize {
        self.entries()
            .into_iter()
            .filter(|(n, _)| Component::of(n) == component)
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.len()).sum()
    }

    /// Places every tensor on `g`; components for which `trainable` is true
    /// become trainable leaves, the rest constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(Component) -> bool) -> Network<Var> {
        self.map(|name, t| {
            if trainable(Component::of(name)) {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries()
            .iter()
            .zip(other.entries())
            .all(|((_, a), (_, b))| a.bit_eq(b))
    }
}

fn expect_last_dim<T: Scalar>(g: &Graph<T>, x: Var, want: usize, op: &'static str) -> Result<()> {
    let s = g.shape(x);
    if s.last() != Some(&want) {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![want],
        }
        .into());
    }
    Ok(())
}

fn mlp<T: Scalar>(g: &mut Graph<T>, x: Var, fc1: &Layer<Var>, fc2: &Layer<Var>) -> Result<Var> {
    let h = g.linear(x, fc1.weight, Some(fc1.bias))?;
    let h = g.relu(h)?;
    Ok(g.linear(h, fc2.weight, Some(fc2.bias))?)
}

/// Embeds one clip `[A_dim]` to `[D]`, or a batch `[N, A_dim]` to `[N, D]`.
pub fn audio_encode<T: Scalar>(g: &mut Graph<T>, net: &Network<Var>, clip: Var) -> Result<Var> {
    let a_dim = g.shape(net.audio.fc1.weight)[0];
    expect_last_dim(g, clip, a_dim, "audio_encode")?;
    let single = g.shape(clip).len() == 1;
    let x = if single { g.reshape(clip, &[1, a_dim])? } else { clip };
    if g.shape(x).len() != 2 {
        return Err(invalid("audio_encode", format!("clip rank {}", g.shape(x).len())));
    }
    let y = mlp(g, x, &net.audio.fc1, &net.audio.fc2)?;
    if single {
        let d = g.shape(y)[1];
        Ok(g.reshape(y, &[d])?)
    } else {
        Ok(y)
    }
}

/// Embeds one frame `[1, S, S]` to `[D]`, or a batch `[N, 1, S, S]` to `[N, D]`.
pub fn visual_encode<T: Scalar>(g: &mut Graph<T>, net: &Network<Var>, frame: Var) -> Result<Var> {
    let pixels = g.shape(net.visual.fc1.weight)[0];
    let s = g.shape(frame).to_vec();
    let (n, single) = match s.len() {
        3 => (1, true),
        4 => (s[0], false),
        _ => return Err(invalid("visual_encode", format!("frame shape {s:?}"))),
    };
    if s[s.len() - 3] != 1 || s[s.len() - 2] * s[s.len() - 1] != pixels {
        return Err(TensorError::ShapeMismatch {
            op: "visual_encode",
            lhs: s,
            rhs: vec![1, pixels],
        }
        .into());
    }
    let x = g.reshape(frame, &[n, pixels])?;
    let y = mlp(g, x, &net.visual.fc1, &net.visual.fc2)?;
    if single {
        let d = g.shape(y)[1];
        Ok(g.reshape(y, &[d])?)
    } else {
        Ok(y)
    }
}

/// Source frame `[1, S, S]` to a `[C, S/4, S/4]` feature map.
pub fn extract_feature_map<T: Scalar>(g: &mut Graph<T>, net: &Network<Var>, frame: Var) -> Result<Var> {
    let s = g.shape(frame);
    if s.len() != 3 || s[0] != 1 || s[1] % 4 != 0 || s[2] % 4 != 0 {
        return Err(invalid("extract_feature_map", format!("frame shape {s:?}")));
    }
    let f = &net.feature;
    let h = g.conv2d(frame, f.conv1.weight, Some(f.conv1.bias), 2, 1)?;
    let h = g.relu(h)?;
    let h = g.conv2d(h, f.conv2.weight, Some(f.conv2.bias), 2, 1)?;
    Ok(g.relu(h)?)
}

/// Injects a `D×D` audio relationship into a `C×H×W` feature map:
/// `f + expand(ĉ · reduce(f))`, where `ĉ` is the relationship scaled to unit
/// Frobenius norm (the zero matrix when its norm is below 1e-12).
pub fn cerl_fuse<T: Scalar>(g: &mut Graph<T>, net: &Network<Var>, f: Var, c_a: Var) -> Result<Var> {
    let (d, c) = (g.shape(net.cerl.reduce)[0], g.shape(net.cerl.reduce)[1]);
    let fs = g.shape(f).to_vec();
    if fs.len() != 3 || fs[0] != c {
        return Err(TensorError::ShapeMismatch {
            op: "cerl_fuse",
            lhs: fs,
            rhs: vec![c],
        }
        .into());
    }
    if g.shape(c_a) != [d, d] {
        return Err(TensorError::ShapeMismatch {
            op: "cerl_fuse",
            lhs: g.shape(c_a).to_vec(),
            rhs: vec![d, d],
        }
        .into());
    }
    let (h, w) = (fs[1], fs[2]);
    let norm = g.norm(c_a)?;
    let unit = if g.scalar_value(norm) < T::lit(DEGENERATE_NORM) {
        g.constant(Tensor::zeros(&[d, d]))
    } else {
        g.div(c_a, norm)?
    };
    let reduced = g.conv1x1(f, net.cerl.reduce, None)?;
    let flat = g.reshape(reduced, &[d, h * w])?;
    let mixed = g.matmul(unit, flat)?;
    let mixed = g.reshape(mixed, &[d, h, w])?;
    let expanded = g.conv1x1(mixed, net.cerl.expand, None)?;
    Ok(g.add(expanded, f)?)
}

/// Generates a `[1, 4H, 4W]` frame in `(0, 1)` from a fused feature map and
/// an audio embedding broadcast over the map.
pub fn render_frame<T: Scalar>(g: &mut Graph<T>, net: &Network<Var>, fused: Var, f_a: Var) -> Result<Var> {
    let gen = &net.generator;
    let c_in = g.shape(gen.fuse.weight)[1];
    let fs = g.shape(fused).to_vec();
    if fs.len() != 3 || g.shape(f_a).len() != 1 || fs[0] + g.shape(f_a)[0] != c_in {
        return Err(TensorError::ShapeMismatch {
            op: "render_frame",
            lhs: fs,
            rhs: g.shape(f_a).to_vec(),
        }
        .into());
    }
    let cond = g.expand_spatial(f_a, fs[1], fs[2])?;
    let x = g.concat(&[fused, cond])?;
    let h = g.conv1x1(x, gen.fuse.weight, Some(gen.fuse.bias))?;
    let h = g.relu(h)?;
    let h = g.upsample_conv(h, gen.up1.weight, Some(gen.up1.bias))?;
    let h = g.relu(h)?;
    let h = g.upsample_conv(h, gen.up2.weight, Some(gen.up2.bias))?;
    Ok(g.sigmoid(h)?)
}
