//! Finite-difference checks of every differentiable tape op.

#[macro_use]
mod common;

use latentloop::autodiff::{grad_check_many, Tape, Tensor, Var};
use latentloop::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `sum(y * w)` for a fixed random `w`, so gradients are not trivially zero.
fn project(tape: &Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, &tape.shape(y), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

type OpFn = fn(&Tape<f64>, &[Var]) -> Result<Var>;

/// (name, input shapes, sampling range, op)
fn cases() -> Vec<(&'static str, Vec<Vec<usize>>, (f64, f64), OpFn)> {
    vec![
        ("add", vec![vec![2, 3], vec![2, 3]], (-2.0, 2.0), |t, v| t.add(v[0], v[1])),
        ("sub", vec![vec![2, 3], vec![2, 3]], (-2.0, 2.0), |t, v| t.sub(v[0], v[1])),
        ("mul", vec![vec![2, 3], vec![2, 3]], (-2.0, 2.0), |t, v| t.mul(v[0], v[1])),
        ("add_broadcast", vec![vec![2, 3], vec![3]], (-2.0, 2.0), |t, v| t.add_broadcast(v[0], v[1])),
        ("mul_broadcast", vec![vec![2, 3], vec![3]], (-2.0, 2.0), |t, v| t.mul_broadcast(v[0], v[1])),
        ("scale", vec![vec![4]], (-2.0, 2.0), |t, v| t.scale(v[0], 0.7)),
        ("add_scalar", vec![vec![4]], (-2.0, 2.0), |t, v| t.add_scalar(v[0], 1.5)),
        ("mul_scalar_var", vec![vec![2, 2], vec![1]], (-2.0, 2.0), |t, v| t.mul_scalar_var(v[0], v[1])),
        ("matmul", vec![vec![3, 4], vec![4, 2]], (-1.0, 1.0), |t, v| t.matmul(v[0], v[1])),
        ("matmul_rank3", vec![vec![2, 3, 4], vec![4, 2]], (-1.0, 1.0), |t, v| t.matmul(v[0], v[1])),
        ("bmm", vec![vec![2, 3, 4], vec![2, 4, 2]], (-1.0, 1.0), |t, v| t.batch_matmul(v[0], v[1], false)),
        ("bmm_t", vec![vec![2, 3, 4], vec![2, 5, 4]], (-1.0, 1.0), |t, v| t.batch_matmul(v[0], v[1], true)),
        ("reshape", vec![vec![2, 3]], (-1.0, 1.0), |t, v| t.reshape(v[0], &[3, 2])),
        ("permute", vec![vec![2, 3, 4]], (-1.0, 1.0), |t, v| t.permute(v[0], &[2, 0, 1])),
        ("softmax", vec![vec![3, 5]], (-3.0, 3.0), |t, v| t.softmax(v[0])),
        ("masked_softmax", vec![vec![2, 3, 3]], (-3.0, 3.0), |t, v| {
            let m = [true, false, true, false, true, true, true, true, false];
            t.masked_softmax(v[0], Some((&m, 3)))
        }),
        ("log_softmax", vec![vec![3, 4]], (-3.0, 3.0), |t, v| t.log_softmax(v[0])),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], (-2.0, 2.0), |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ("gelu", vec![vec![6]], (-3.0, 3.0), |t, v| t.gelu(v[0])),
        ("tanh", vec![vec![6]], (-2.0, 2.0), |t, v| t.tanh(v[0])),
        ("exp", vec![vec![6]], (-2.0, 2.0), |t, v| t.exp(v[0])),
        ("log", vec![vec![6]], (0.5, 3.0), |t, v| t.log(v[0])),
        ("sqrt", vec![vec![6]], (0.5, 3.0), |t, v| t.sqrt(v[0])),
        ("relu", vec![vec![6]], (-2.0, 2.0), |t, v| t.relu(v[0])),
        ("sum", vec![vec![2, 3]], (-2.0, 2.0), |t, v| t.sum(v[0])),
        ("mean", vec![vec![2, 3]], (-2.0, 2.0), |t, v| t.mean(v[0])),
        ("sum_axis", vec![vec![2, 3, 4]], (-2.0, 2.0), |t, v| t.sum_axis(v[0], 1)),
        ("concat", vec![vec![2, 3], vec![2, 2]], (-2.0, 2.0), |t, v| t.concat(&[v[0], v[1]], 1)),
        ("narrow", vec![vec![4, 3]], (-2.0, 2.0), |t, v| t.narrow(v[0], 0, 1, 2)),
        ("index_select", vec![vec![4, 3]], (-2.0, 2.0), |t, v| t.index_select(v[0], 0, &[3, 1, 3])),
        ("broadcast_to", vec![vec![3]], (-2.0, 2.0), |t, v| t.broadcast_to(v[0], &[2, 2, 3])),
        ("gather_last", vec![vec![3, 4]], (-2.0, 2.0), |t, v| t.gather_last(v[0], &[0, 3, 1])),
        ("neg", vec![vec![5]], (-2.0, 2.0), |t, v| t.neg(v[0])),
        ("square", vec![vec![5]], (-2.0, 2.0), |t, v| t.square(v[0])),
        ("mean_axis", vec![vec![2, 3, 4]], (-2.0, 2.0), |t, v| t.mean_axis(v[0], 2)),
        ("dropout_with_mask", vec![vec![6]], (-2.0, 2.0), |t, v| t.dropout_with_mask(v[0], vec![2.0, 0.0, 2.0, 2.0, 0.0, 2.0])),
    ]
}

/// Worst relative error per op over 100 random draws each.
pub fn worst_errors() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();
    for (name, shapes, (lo, hi), op) in cases() {
        let mut worst = 0.0f64;
        for trial in 0..100u64 {
            let inputs: Vec<_> = shapes.iter().map(|s| rand_tensor(&mut rng, s, lo, hi)).collect();
            // keep relu away from its kink
            let inputs = if name == "relu" {
                inputs.into_iter().map(|t| t.map(|x| if x.abs() < 1e-3 { 0.5 } else { x })).collect()
            } else {
                inputs
            };
            let e = grad_check_many(|t, v| project(t, op(t, v)?, trial), &inputs, 1e-5).unwrap();
            worst = worst.max(e);
        }
        out.push((name, worst));
    }
    out
}

pub fn every_primitive_passes_grad_check() {
    for (name, worst) in worst_errors() {
        assert!(worst < TOL, "{name}: max relative error {worst}");
    }
}

tests!(every_primitive_passes_grad_check);
