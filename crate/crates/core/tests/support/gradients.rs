//! Central-difference checks for every differentiable op and for the full
//! training loss of a toy model, all in 64-bit.

#![allow(dead_code)]

use mnad::autodiff::{finite_diff_check, BatchNormMode, Tape, Var};
use mnad::error::Result;
use mnad::losses::{training_losses, LossWeights};
use mnad::memory::{assign, MatchWeights, MemoryBank};
use mnad::model::{stack_windows, BoundParams, Graph, ModelConfig, ModelParams, Task};
use mnad::rng;
use mnad::tensor::Tensor;
use rand::Rng;

const EPS: f64 = 1e-6;

fn random(shape: &[usize], r: &mut rng::Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Values at least 0.1 away from zero, for ops with a kink there.
fn off_kink(shape: &[usize], r: &mut rng::Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = r.random_range(0.1..1.0);
        if r.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn weighted_sum(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let w = Tensor::from_fn(tape.shape(y), |i| ((i * 7919 % 97) as f64) / 97.0 - 0.4);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn op(name: &'static str, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static, pts: Vec<Tensor<f64>>) -> (&'static str, OpFn, Vec<Tensor<f64>>) {
    (name, Box::new(f), pts)
}

/// Worst relative gradient error for each op.
pub fn op_errors() -> Vec<(&'static str, f64)> {
    let mut r = rng::seeded(2024);
    let a = random(&[3, 4], &mut r);
    let b = random(&[3, 4], &mut r);
    let m45 = random(&[4, 5], &mut r);
    let m54 = random(&[5, 4], &mut r);
    let x3 = random(&[2, 3, 4], &mut r);
    let img = random(&[2, 2, 5, 5], &mut r);
    let w = random(&[3, 2, 3, 3], &mut r);
    let bias = random(&[3], &mut r);
    let wt = random(&[2, 3, 4, 4], &mut r);
    let gamma = random(&[2], &mut r);
    let beta = random(&[2], &mut r);
    let ops = vec![
        op("add", |t, v| { let y = t.add(v[0], v[1])?; weighted_sum(t, y) }, vec![a.clone(), b.clone()]),
        op("sub", |t, v| { let y = t.sub(v[0], v[1])?; weighted_sum(t, y) }, vec![a.clone(), b.clone()]),
        op("mul", |t, v| { let y = t.mul(v[0], v[1])?; weighted_sum(t, y) }, vec![a.clone(), b.clone()]),
        op("scale", |t, v| { let y = t.scale(v[0], -1.3); weighted_sum(t, y) }, vec![a.clone()]),
        op("add_scalar", |t, v| { let y = t.add_scalar(v[0], 0.4); weighted_sum(t, y) }, vec![a.clone()]),
        op("relu", |t, v| { let y = t.relu(v[0]); weighted_sum(t, y) }, vec![off_kink(&[3, 4], &mut r)]),
        op("tanh", |t, v| { let y = t.tanh(v[0]); weighted_sum(t, y) }, vec![a.clone()]),
        op("sum", |t, v| Ok(t.sum(v[0])), vec![a.clone()]),
        op("mean", |t, v| Ok(t.mean(v[0])), vec![a.clone()]),
        op("sq_l2_distance", |t, v| t.sq_l2_distance(v[0], v[1]), vec![a.clone(), b.clone()]),
        op("matmul", |t, v| { let y = t.matmul(v[0], v[1])?; weighted_sum(t, y) }, vec![a.clone(), m45.clone()]),
        op("matmul_nt", |t, v| { let y = t.matmul_nt(v[0], v[1])?; weighted_sum(t, y) }, vec![a.clone(), m54]),
        op("softmax", |t, v| { let y = t.softmax(v[0], 2)?; weighted_sum(t, y) }, vec![x3.clone()]),
        op("l2_normalize", |t, v| { let y = t.l2_normalize(v[0], 1)?; weighted_sum(t, y) }, vec![x3.clone()]),
        op("l2_norm", |t, v| { let y = t.l2_norm(v[0], 2)?; weighted_sum(t, y) }, vec![x3.clone()]),
        op("concat", |t, v| { let y = t.concat(&[v[0], v[1]], 0)?; weighted_sum(t, y) }, vec![a.clone(), b.clone()]),
        op("slice", |t, v| { let y = t.slice(v[0], 1, 1, 3)?; weighted_sum(t, y) }, vec![x3.clone()]),
        op("reshape", |t, v| { let y = t.reshape(v[0], &[6, 4])?; weighted_sum(t, y) }, vec![x3.clone()]),
        op("permute", |t, v| { let y = t.permute(v[0], &[2, 0, 1])?; weighted_sum(t, y) }, vec![x3]),
        op("gather_rows", |t, v| { let y = t.gather_rows(v[0], &[2, 0, 2])?; weighted_sum(t, y) }, vec![a]),
        op(
            "conv2d",
            |t, v| { let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?; weighted_sum(t, y) },
            vec![img.clone(), w, bias.clone()],
        ),
        op(
            "conv_transpose2d",
            |t, v| { let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)?; weighted_sum(t, y) },
            vec![img.clone(), wt, bias],
        ),
        op(
            "batch_norm2d",
            |t, v| {
                let (y, _) = t.batch_norm2d(v[0], v[1], v[2], &[0.1, -0.2], &[0.9, 1.2], BatchNormMode::Train)?;
                weighted_sum(t, y)
            },
            vec![img, gamma, beta],
        ),
    ];
    ops.into_iter()
        .map(|(name, f, pts)| (name, finite_diff_check(|t, v| f(t, v), &pts, EPS).unwrap()))
        .collect()
}

/// Toy prediction model: 16x16 frames, 4x4 query map (`K = 16`), `C = 8`,
/// `M = 3` trainable items; the full loss is checked against every model
/// parameter and the items.
pub fn toy_full_loss_error() -> f64 {
    let c = ModelConfig {
        frame_height: 16,
        frame_width: 16,
        feature_dims: vec![4, 8],
        query_channels: 8,
        ..ModelConfig::for_task(Task::Prediction)
    };
    assert_eq!(c.query_size(), (4, 4));
    let params = ModelParams::<f64>::init(&c, &mut rng::seeded(31)).unwrap();
    let names: Vec<String> = params.params.keys().cloned().collect();
    let mut points: Vec<Tensor<f64>> = params.params.values().cloned().collect();
    let items = MemoryBank::<f64>::random(3, c.query_channels, &mut rng::seeded(32)).unwrap();
    points.push(items.items().clone());
    let mut r = rng::seeded(33);
    let frames: Vec<Tensor<f64>> = (0..2 * c.sample_len()).map(|_| random(&[1, 16, 16], &mut r)).collect();
    let (w0, w1) = frames.split_at(c.sample_len());
    let input = stack_windows(&[w0[..4].iter().collect(), w1[..4].iter().collect()]).unwrap();
    let target = stack_windows(&[vec![&w0[4]], vec![&w1[4]]]).unwrap();
    let weights = LossWeights {
        lambda_c: 0.1,
        lambda_s: 0.1,
        alpha: 1.0,
    };
    finite_diff_check(
        |tape, vars| {
            let (model_vars, item_var) = vars.split_at(names.len());
            let bound = BoundParams {
                vars: names.iter().cloned().zip(model_vars.iter().copied()).collect(),
            };
            let mut g = Graph::new(&c, &bound, &params, BatchNormMode::Train);
            let x = tape.constant(input.clone());
            let out = g.forward(tape, x, Some(item_var[0]))?;
            let w = MatchWeights {
                probs: tape.value(out.weights.expect("memory path")).clone(),
            };
            let a = assign(&w)?;
            let y = tape.constant(target.clone());
            Ok(training_losses(tape, out.recon, y, out.encoded.queries, item_var[0], &a, &weights)?.total)
        },
        &points,
        EPS,
    )
    .unwrap()
}
