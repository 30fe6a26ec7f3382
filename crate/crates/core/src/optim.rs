//! Adam with bias correction.

use crate::encoders::{Component, ModelParams, Network};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Per-tensor gradients; `None` where nothing was computed.
pub type Grads<T> = Network<Option<Tensor<T>>>;

/// First and second moments exist only for tensors that have been stepped.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub step: u64,
    pub m: Network<Option<Tensor<T>>>,
    pub v: Network<Option<Tensor<T>>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<P>(shape_of: &Network<P>) -> Self {
        Self {
            step: 0,
            m: shape_of.map(|_, _| None),
            v: shape_of.map(|_, _| None),
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        let same = |a: &Network<Option<Tensor<T>>>, b: &Network<Option<Tensor<T>>>| {
            a.entries().iter().zip(b.entries()).all(|((_, x), (_, y))| match (x, y) {
                (None, None) => true,
                (Some(x), Some(y)) => x.bit_eq(y),
                _ => false,
            })
        };
        self.step == other.step && same(&self.m, &other.m) && same(&self.v, &other.v)
    }
}

/// One Adam update of every tensor whose component is `trainable`; all other
/// tensors (and their moments) are left untouched.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &Grads<T>,
    state: &mut AdamState<T>,
    lr: f64,
    trainable: impl Fn(Component) -> bool,
) -> Result<()> {
    // Validate everything before mutating anything.
    for (name, g) in grads.entries() {
        if !trainable(Component::of(name)) {
            continue;
        }
        match g {
            None => return Err(Error::MissingGradient(name.to_string())),
            Some(g) if !g.all_finite() => return Err(Error::NonFiniteGradient(name.to_string())),
            Some(_) => {}
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);

    let grads = grads.entries();
    let params = params.entries_mut();
    let ms = state.m.entries_mut();
    let vs = state.v.entries_mut();
    for (((name, p), (_, g)), ((_, m), (_, v))) in params.into_iter().zip(grads).zip(ms.into_iter().zip(vs)) {
        if !trainable(Component::of(name)) {
            continue;
        }
        let g = g.as_ref().expect("validated");
        let m = m.get_or_insert_with(|| Tensor::zeros(p.shape()));
        let v = v.get_or_insert_with(|| Tensor::zeros(p.shape()));
        for i in 0..p.len() {
            let gi = g.data()[i].as_f64();
            let mi = BETA1 * m.data()[i].as_f64() + (1.0 - BETA1) * gi;
            let vi = BETA2 * v.data()[i].as_f64() + (1.0 - BETA2) * gi * gi;
            m.data_mut()[i] = T::lit(mi);
            v.data_mut()[i] = T::lit(vi);
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + EPSILON);
            let pi = p.data()[i].as_f64() - update;
            p.data_mut()[i] = T::lit(pi);
        }
    }
    Ok(())
}
