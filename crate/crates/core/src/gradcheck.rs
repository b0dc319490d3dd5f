//! Central finite-difference checks for every differentiable tape op.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::model::relative_attention;
use crate::tensor::{Tensor, TensorError};

/// Step used for the central differences.
pub const STEP: f64 = 1e-5;
/// Pass threshold on `|analytic - numeric| / max(1, |numeric|)`.
pub const TOLERANCE: f64 = 1e-4;

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>>;

/// One op under test: input shapes and how to apply it.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Vec<usize>>,
    build: Build,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub name: &'static str,
    pub max_rel_error: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn case(name: &'static str, inputs: &[&[usize]], build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError> + 'static) -> OpCase {
    OpCase { name, inputs: inputs.iter().map(|s| s.to_vec()).collect(), build: Box::new(build) }
}

/// Every op, each exercised on small random shapes.
pub fn cases() -> Vec<OpCase> {
    vec![
        case("matmul", &[&[3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1])),
        case("matmul_batched", &[&[2, 3, 4], &[2, 4, 2]], |t, v| t.matmul(v[0], v[1])),
        case("matmul_shared_rhs", &[&[2, 3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1])),
        case("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1])),
        case("add_bias", &[&[3, 4], &[4]], |t, v| t.add_bias(v[0], v[1])),
        case("scale", &[&[3, 4]], |t, v| Ok(t.scale(v[0], -1.7))),
        case("concat_rows", &[&[2, 3], &[1, 3]], |t, v| t.concat(&[v[0], v[1]], 0)),
        case("concat_last", &[&[2, 3], &[2, 2]], |t, v| t.concat(&[v[0], v[1]], 1)),
        case("split", &[&[3, 5]], |t, v| {
            let parts = t.split(v[0], 1, &[2, 3])?;
            let a = t.scale(parts[0], 2.0);
            t.concat(&[parts[1], a], 1)
        }),
        case("index_select", &[&[2, 4, 3]], |t, v| t.index_select(v[0], 1, &[3, 0, 0, 2])),
        case("embedding", &[&[6, 3]], |t, v| t.embedding(v[0], &[5, 1, 1, 0])),
        case("softmax", &[&[3, 5]], |t, v| Ok(t.softmax(v[0]))),
        case("layer_norm", &[&[3, 6], &[6], &[6]], |t, v| t.layer_norm(v[0], v[1], v[2])),
        case("relu", &[&[4, 5]], |t, v| Ok(t.relu(v[0]))),
        case("dropout", &[&[4, 5]], |t, v| Ok(t.dropout(v[0], 0.3))),
        case("cross_entropy", &[&[4, 6]], |t, v| t.cross_entropy(v[0], &[2, 9, 0, 5], 9)),
        case("permute", &[&[2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1])),
        case("transpose", &[&[2, 3, 4]], |t, v| t.transpose(v[0])),
        case("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4])),
        case("masked_fill", &[&[3, 3]], |t, v| {
            let mask = [false, true, true, false, false, true, false, false, false];
            t.masked_fill(v[0], &mask, 0.25)
        }),
        case("skew", &[&[2, 4, 4]], |t, v| t.skew(v[0])),
        case("mean_rows", &[&[4, 3]], |t, v| t.mean_rows(v[0], &[true, false, true, true])),
        case("mse", &[&[2, 3]], |t, v| t.mse(v[0], &[0.1, -0.2, 0.3, 0.0, 1.0, -1.0])),
        case("repeat_rows", &[&[1, 3]], |t, v| t.repeat_rows(v[0], 4)),
        case("relative_attention", &[&[2, 5, 3], &[2, 5, 3], &[2, 5, 3], &[2, 4, 3]], |t, v| {
            relative_attention(t, v[0], v[1], v[2], v[3], 0.0)
        }),
    ]
}

/// Builds `sum(op(inputs) * weights)` on a fresh training tape; the fixed
/// tape seed keeps dropout masks identical between evaluations.
fn objective(
    c: &OpCase,
    inputs: &[Tensor<f64>],
    weights: &Tensor<f64>,
    trainable: bool,
) -> Result<(Tape<f64>, Var, Vec<Var>), TensorError> {
    let mut tape = Tape::training(11);
    let vars: Vec<Var> = inputs.iter().map(|x| if trainable { tape.param(x.clone()) } else { tape.constant(x.clone()) }).collect();
    let out = (c.build)(&mut tape, &vars)?;
    let n = tape.value(out).numel();
    let flat = tape.reshape(out, &[1, n])?;
    let w = tape.constant(weights.clone());
    let loss = tape.matmul(flat, w)?;
    Ok((tape, loss, vars))
}

/// Largest relative gradient error over all inputs of `c` for one seed.
pub fn check_case(c: &OpCase, seed: u64) -> Result<f64, TensorError> {
    let mut rng = crate::seeded_rng(seed);
    let inputs: Vec<Tensor<f64>> = c.inputs.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
    let out_numel = {
        let mut probe = Tape::training(11);
        let vars: Vec<Var> = inputs.iter().map(|x| probe.constant(x.clone())).collect();
        let out = (c.build)(&mut probe, &vars)?;
        probe.value(out).numel()
    };
    let weights = Tensor::randn(&[out_numel, 1], 1.0, &mut rng);
    let (tape, loss, vars) = objective(c, &inputs, &weights, true)?;
    let mut grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    for (i, &var) in vars.iter().enumerate() {
        let analytic = grads.take(var).unwrap_or_else(|| Tensor::zeros(&c.inputs[i]));
        for e in 0..inputs[i].numel() {
            let eval = |delta: f64| -> Result<f64, TensorError> {
                let mut shifted = inputs.clone();
                shifted[i].data_mut()[e] += delta;
                let (t, l, _) = objective(c, &shifted, &weights, false)?;
                Ok(t.value(l).item())
            };
            let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            let err = (analytic.data()[e] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Runs every case over `seeds` and keeps the worst error per op.
pub fn run(seeds: &[u64]) -> Result<Vec<OpReport>, TensorError> {
    cases()
        .iter()
        .map(|c| {
            let mut worst = 0.0f64;
            for &s in seeds {
                worst = worst.max(check_case(c, s)?);
            }
            Ok(OpReport { name: c.name, max_rel_error: worst })
        })
        .collect()
}
