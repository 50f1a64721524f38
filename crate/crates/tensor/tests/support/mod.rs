//! Shared gradient-check cases; also compiled into the core acceptance suite.
#![allow(dead_code)]

use dat_tensor::{BnMode, Graph, Reduction, Result, RunningStats, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::normal(shape.to_vec(), 1.0, &mut rng(seed))
}

/// Reduces any output to a scalar with fixed random weights so that no
/// coordinate of the input gradient is trivially zero.
pub fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let w = randn(g.shape(out), seed ^ 0xabcd);
    let wv = g.constant(w);
    let p = g.mul(out, wv)?;
    Ok(g.sum(p))
}

pub type Primitive = fn(&mut Graph<f64>, Var, u64) -> Result<Var>;

pub fn primitives() -> Vec<(&'static str, Vec<usize>, Primitive)> {
    vec![
        ("add", vec![3, 4], |g, x, s| {
            let c = g.constant(randn(&[3, 4], s + 1));
            let y = g.add(x, c)?;
            weighted_sum(g, y, s)
        }),
        ("sub", vec![3, 4], |g, x, s| {
            let c = g.constant(randn(&[3, 4], s + 1));
            let y = g.sub(c, x)?;
            weighted_sum(g, y, s)
        }),
        ("mul", vec![3, 4], |g, x, s| {
            let c = g.constant(randn(&[3, 4], s + 1));
            let y = g.mul(x, c)?;
            let y = g.mul(y, x)?;
            weighted_sum(g, y, s)
        }),
        ("scale", vec![5], |g, x, s| {
            let y = g.scale(x, -1.75);
            weighted_sum(g, y, s)
        }),
        ("relu", vec![4, 5], |g, x, s| {
            let y = g.relu(x);
            weighted_sum(g, y, s)
        }),
        ("clamp", vec![4, 5], |g, x, s| {
            let y = g.clamp(x, -0.5, 0.8)?;
            weighted_sum(g, y, s)
        }),
        ("linear", vec![3, 5], |g, x, s| {
            let w = g.constant(randn(&[4, 5], s + 1));
            let b = g.constant(randn(&[4], s + 2));
            let y = g.linear(x, w, b)?;
            weighted_sum(g, y, s)
        }),
        ("linear-weight", vec![4, 5], |g, w, s| {
            let x = g.constant(randn(&[3, 5], s + 1));
            let b = g.constant(randn(&[4], s + 2));
            let y = g.linear(x, w, b)?;
            weighted_sum(g, y, s)
        }),
        ("conv2d-input", vec![2, 3, 5, 5], |g, x, s| {
            let k = g.constant(randn(&[4, 3, 3, 3], s + 1));
            let b = g.constant(randn(&[4], s + 2));
            let y = g.conv2d(x, k, b, 2, 1)?;
            weighted_sum(g, y, s)
        }),
        ("conv2d-kernel", vec![4, 3, 3, 3], |g, k, s| {
            let x = g.constant(randn(&[2, 3, 5, 5], s + 1));
            let b = g.constant(randn(&[4], s + 2));
            let y = g.conv2d(x, k, b, 1, 1)?;
            weighted_sum(g, y, s)
        }),
        ("conv2d-bias", vec![4], |g, b, s| {
            let x = g.constant(randn(&[2, 3, 4, 4], s + 1));
            let k = g.constant(randn(&[4, 3, 1, 1], s + 2));
            let y = g.conv2d(x, k, b, 1, 0)?;
            weighted_sum(g, y, s)
        }),
        ("avg_pool", vec![2, 2, 4, 4], |g, x, s| {
            let y = g.avg_pool(x, 2)?;
            weighted_sum(g, y, s)
        }),
        ("upsample_nearest", vec![2, 2, 3, 3], |g, x, s| {
            let y = g.upsample_nearest(x, 2)?;
            weighted_sum(g, y, s)
        }),
        ("batch_norm-train", vec![4, 3, 3, 3], |g, x, s| {
            let gamma = g.constant(randn(&[3], s + 1));
            let beta = g.constant(randn(&[3], s + 2));
            let out = g.batch_norm(x, gamma, beta, &RunningStats::new(3), BnMode::Train, 1e-5)?;
            weighted_sum(g, out.output, s)
        }),
        ("batch_norm-gamma", vec![3], |g, gamma, s| {
            let x = g.constant(randn(&[4, 3, 3, 3], s + 1));
            let beta = g.constant(randn(&[3], s + 2));
            let out = g.batch_norm(x, gamma, beta, &RunningStats::new(3), BnMode::Train, 1e-5)?;
            weighted_sum(g, out.output, s)
        }),
        ("batch_norm-eval", vec![2, 3, 2, 2], |g, x, s| {
            let gamma = g.constant(randn(&[3], s + 1));
            let beta = g.constant(randn(&[3], s + 2));
            let mut running = RunningStats::new(3);
            running.mean = randn(&[3], s + 3);
            let out = g.batch_norm(x, gamma, beta, &running, BnMode::Eval, 1e-5)?;
            weighted_sum(g, out.output, s)
        }),
        ("softmax_cross_entropy", vec![4, 7], |g, x, _| {
            g.softmax_cross_entropy(x, &[0, 6, 2, 2], Reduction::Mean)
        }),
        ("mean", vec![3, 3], |g, x, _| {
            let sq = g.mul(x, x)?;
            Ok(g.mean(sq))
        }),
        ("mse", vec![3, 3], |g, x, s| {
            let c = g.constant(randn(&[3, 3], s + 1));
            g.mse(x, c)
        }),
        ("permute", vec![2, 3, 2, 4], |g, x, s| {
            let y = g.permute(x, [0, 2, 3, 1])?;
            weighted_sum(g, y, s)
        }),
        ("reshape", vec![2, 6], |g, x, s| {
            let y = g.reshape(x, &[3, 4])?;
            weighted_sum(g, y, s)
        }),
        ("gather_rows", vec![5, 3], |g, t, s| {
            let y = g.gather_rows(t, &[4, 0, 4, 2])?;
            weighted_sum(g, y, s)
        }),
    ]
}
