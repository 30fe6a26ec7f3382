//! Central-difference gradient verification.
//!
//! [`check_gradients`] compares [`Graph::backward`] against
//! `(f(x+ε) − f(x−ε)) / 2ε` coordinate by coordinate. Relative error uses the
//! denominator `max(|analytic|, |numeric|, 1e-8)`.

use crate::graph::{Graph, Var};
use crate::rng::SeededRng;
use crate::tensor::{Tensor, TensorError, TensorResult};

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
    pub pass: bool,
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>], trainable: bool) -> TensorResult<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> TensorResult<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
        .collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(TensorError::NotScalar(g.shape(out).to_vec()));
    }
    Ok((g, vars, out))
}

/// Checks the gradient of a scalar function of several tensor inputs.
pub fn check_gradients_multi<F>(f: F, inputs: &[Tensor<f64>], eps: f64, tol: f64) -> TensorResult<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> TensorResult<Var>,
{
    let (g, vars, out) = eval(&f, inputs, true)?;
    let analytic: Vec<Tensor<f64>> = if g.requires_grad(out) {
        let grads = g.backward(out)?;
        vars.iter().map(|&v| grads.get(v).cloned().expect("leaf gradient")).collect()
    } else {
        // Constant function: nothing on the tape reaches the inputs.
        inputs.iter().map(|t| Tensor::zeros(t.shape())).collect()
    };

    let mut report = GradReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
        pass: true,
    };
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let x0 = input.data()[i];
            probe[k].data_mut()[i] = x0 + eps;
            let (gp, _, op) = eval(&f, &probe, false)?;
            probe[k].data_mut()[i] = x0 - eps;
            let (gm, _, om) = eval(&f, &probe, false)?;
            probe[k].data_mut()[i] = x0;

            let numeric = (gp.scalar_value(op) - gm.scalar_value(om)) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(TensorError::NonFinite { op: "finite_difference" });
            }
            let a = analytic[k].data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (k, i);
            }
        }
    }
    report.pass = report.max_rel_error <= tol;
    Ok(report)
}

/// Single-input form of [`check_gradients_multi`].
pub fn check_gradients<F>(f: F, x: &Tensor<f64>, eps: f64, tol: f64) -> TensorResult<GradReport>
where
    F: Fn(&mut Graph<f64>, Var) -> TensorResult<Var>,
{
    check_gradients_multi(|g, v| f(g, v[0]), std::slice::from_ref(x), eps, tol)
}

/// Reduces any output to a scalar through a fixed pseudo-random weighting,
/// so every output coordinate contributes a distinct gradient.
pub fn probe_sum(g: &mut Graph<f64>, y: Var) -> TensorResult<Var> {
    let mut rng = SeededRng::new(0x5EED_0F_9A0B);
    let w = Tensor::uniform(g.shape(y), 0.5, 1.5, &mut rng);
    let w = g.constant(w);
    g.dot(y, w)
}

pub type CaseFn = fn(&mut Graph<f64>, &[Var]) -> TensorResult<Var>;

/// One registered differentiable function with its input shapes. Input `k`
/// is drawn uniformly from `[−ranges[k], ranges[k]]`.
#[derive(Clone)]
pub struct GradCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub ranges: Vec<f64>,
    pub build: CaseFn,
    pub tol: f64,
}

impl GradCase {
    pub fn inputs(&self, seed: u64) -> Vec<Tensor<f64>> {
        let mut rng = SeededRng::new(seed).fork(fxhash(self.name));
        self.shapes
            .iter()
            .zip(&self.ranges)
            .map(|(s, &r)| Tensor::uniform(s, -r, r, &mut rng))
            .collect()
    }

    pub fn run(&self, seed: u64, eps: f64) -> TensorResult<GradReport> {
        let inputs = self.inputs(seed);
        check_gradients_multi(self.build, &inputs, eps, self.tol)
    }
}

fn fxhash(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn case(name: &'static str, shapes: &[&[usize]], build: CaseFn) -> GradCase {
    GradCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        ranges: vec![1.0; shapes.len()],
        build,
        tol: 1e-4,
    }
}

/// Every primitive op on the tape, on inputs in `[−1, 1]`.
pub fn op_cases() -> Vec<GradCase> {
    vec![
        case("add", &[&[6], &[6]], |g, v| {
            let y = g.add(v[0], v[1])?;
            probe_sum(g, y)
        }),
        case("add_broadcast", &[&[6], &[]], |g, v| {
            let y = g.add(v[0], v[1])?;
            probe_sum(g, y)
        }),
        case("sub", &[&[2, 3], &[2, 3]], |g, v| {
            let y = g.sub(v[0], v[1])?;
            probe_sum(g, y)
        }),
        case("mul", &[&[5], &[5]], |g, v| {
            let y = g.mul(v[0], v[1])?;
            probe_sum(g, y)
        }),
        case("div", &[&[5], &[5]], |g, v| {
            let d = g.add_scalar(v[1], 2.0)?;
            let y = g.div(v[0], d)?;
            probe_sum(g, y)
        }),
        case("scale", &[&[4]], |g, v| {
            let y = g.scale(v[0], -1.7)?;
            probe_sum(g, y)
        }),
        case("add_scalar", &[&[4]], |g, v| {
            let y = g.add_scalar(v[0], 0.3)?;
            let y = g.square(y)?;
            probe_sum(g, y)
        }),
        case("relu", &[&[8]], |g, v| {
            let y = g.relu(v[0])?;
            probe_sum(g, y)
        }),
        case("sigmoid", &[&[8]], |g, v| {
            let y = g.sigmoid(v[0])?;
            probe_sum(g, y)
        }),
        case("tanh", &[&[8]], |g, v| {
            let y = g.tanh(v[0])?;
            probe_sum(g, y)
        }),
        case("sqrt", &[&[8]], |g, v| {
            // shifted away from the origin, where the derivative blows up
            let s = g.square(v[0])?;
            let p = g.add_scalar(s, 0.25)?;
            let y = g.sqrt(p)?;
            probe_sum(g, y)
        }),
        case("clamp", &[&[8]], |g, v| {
            let y = g.clamp(v[0], -0.5, 0.5)?;
            probe_sum(g, y)
        }),
        case("matmul", &[&[3, 4], &[4, 2]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            probe_sum(g, y)
        }),
        case("linear", &[&[3, 4], &[4, 2], &[2]], |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            probe_sum(g, y)
        }),
        case("conv2d_stride2", &[&[2, 6, 6], &[3, 2, 3, 3], &[3]], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            probe_sum(g, y)
        }),
        case("conv1x1", &[&[3, 2, 2], &[4, 3]], |g, v| {
            let y = g.conv1x1(v[0], v[1], None)?;
            probe_sum(g, y)
        }),
        case("upsample_conv", &[&[2, 3, 3], &[1, 2, 3, 3], &[1]], |g, v| {
            let y = g.upsample_conv(v[0], v[1], Some(v[2]))?;
            probe_sum(g, y)
        }),
        case("reshape", &[&[2, 3]], |g, v| {
            let y = g.reshape(v[0], &[3, 2])?;
            let y = g.square(y)?;
            probe_sum(g, y)
        }),
        case("concat", &[&[2, 2], &[1, 2]], |g, v| {
            let y = g.concat(&[v[0], v[1]])?;
            let y = g.square(y)?;
            probe_sum(g, y)
        }),
        case("expand_spatial", &[&[3]], |g, v| {
            let y = g.expand_spatial(v[0], 2, 2)?;
            let y = g.square(y)?;
            probe_sum(g, y)
        }),
        case("index", &[&[3, 2]], |g, v| {
            let y = g.index(v[0], 1)?;
            let y = g.square(y)?;
            probe_sum(g, y)
        }),
        case("sum", &[&[5]], |g, v| {
            let y = g.square(v[0])?;
            g.sum(y)
        }),
        case("mean", &[&[5]], |g, v| {
            let y = g.square(v[0])?;
            g.mean(y)
        }),
        case("sum_axis", &[&[2, 3]], |g, v| {
            let y = g.sum_axis(v[0], 1)?;
            let y = g.square(y)?;
            probe_sum(g, y)
        }),
        case("norm", &[&[2, 3]], |g, v| g.norm(v[0])),
    ]
}
