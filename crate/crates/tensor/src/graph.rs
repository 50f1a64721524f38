//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive as it executes. Values live on the
//! tape; [`Var`] is a cheap handle into it. [`Graph::backward`] replays the
//! recorded backward rules in reverse order, once per graph.

use crate::error::{invalid, Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the batch statistics.
    Train,
    /// Normalize with the running statistics.
    Eval,
}

/// Per-channel running mean and variance of a batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros([channels]),
            var: Tensor::ones([channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn update(
        &mut self,
        batch_mean: &Tensor<T>,
        batch_var: &Tensor<T>,
        momentum: T,
    ) -> Result<()> {
        self.mean.expect_same_shape(batch_mean, "running_stats")?;
        self.var.expect_same_shape(batch_var, "running_stats")?;
        let keep = T::one() - momentum;
        for (r, &b) in self.mean.data_mut().iter_mut().zip(batch_mean.data()) {
            *r = keep * *r + momentum * b;
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(batch_var.data()) {
            *r = keep * *r + momentum * b;
        }
        Ok(())
    }
}

/// Result of a recorded batch normalization.
#[derive(Clone, Debug)]
pub struct BatchNormOutput<T> {
    pub output: Var,
    /// Statistics used for normalization: batch statistics in train mode,
    /// running statistics in eval mode. Variance is the biased estimate.
    pub batch_mean: Tensor<T>,
    pub batch_var: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Clamp(Var, T, T),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
        dims: (usize, usize, usize),
    },
    AvgPool(Var, usize),
    Upsample(Var, usize),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
        mode: BnMode,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
        scale: T,
    },
    Sum(Var),
    Mean(Var),
    StopGradient,
    StraightThrough(Var),
    Reshape(Var),
    Permute(Var, [usize; 4]),
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// The tape: an append-only record of executed primitives.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
    visited: usize,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
            visited: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded ops whose backward rule ran in the last `backward`.
    pub fn backward_visits(&self) -> usize {
        self.visited
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros_like(self.value(v)))
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        self.value(a).expect_same_shape(self.value(b), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::Relu(a))
    }

    /// Clamps to `[lo, hi]`; the gradient passes only strictly inside the interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(invalid(
                "clamp",
                format!("lower bound {lo} exceeds upper bound {hi}"),
            ));
        }
        let out = self.value(a).clamp(lo, hi);
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::Clamp(a, lo, hi)))
    }

    /// Direct cross-correlation of `[N,C,H,W]` with `[F,C,kh,kw]` plus a per-filter bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("conv2d")?;
        let (f, kc, kh, kw) = self.value(kernel).dims4("conv2d")?;
        if kc != c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: self.shape(input).to_vec(),
                right: self.shape(kernel).to_vec(),
            });
        }
        if self.shape(bias) != [f] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                left: self.shape(kernel).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be at least 1"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d kernel larger than padded input",
                left: self.shape(input).to_vec(),
                right: self.shape(kernel).to_vec(),
            });
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let data = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let out = Tensor::from_parts(vec![n, f, geom.oh, geom.ow], data);
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    /// Fully connected layer: `[N, in] · [out, in]ᵀ + [out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, inp) = match self.shape(input) {
            &[n, i] => (n, i),
            s => {
                return Err(invalid(
                    "linear",
                    format!("expected a rank-2 input, got {s:?}"),
                ))
            }
        };
        let out_dim = match self.shape(weight) {
            &[o, i] if i == inp => o,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    left: self.shape(input).to_vec(),
                    right: self.shape(weight).to_vec(),
                })
            }
        };
        if self.shape(bias) != [out_dim] {
            return Err(TensorError::ShapeMismatch {
                op: "linear bias",
                left: self.shape(weight).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let data = kernels::linear_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            n,
            inp,
            out_dim,
        );
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            Tensor::from_parts(vec![n, out_dim], data),
            rg,
            Op::Linear {
                input,
                weight,
                bias,
                dims: (n, inp, out_dim),
            },
        ))
    }

    /// Non-overlapping `k×k` average pooling.
    pub fn avg_pool(&mut self, input: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("avg_pool")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(invalid(
                "avg_pool",
                format!("window {k} does not tile {h}×{w}"),
            ));
        }
        let data = kernels::avgpool_forward(self.value(input).data(), n * c, h, w, k);
        let rg = self.rg(&[input]);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h / k, w / k], data),
            rg,
            Op::AvgPool(input, k),
        ))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("upsample_nearest")?;
        if factor == 0 {
            return Err(invalid("upsample_nearest", "factor must be at least 1"));
        }
        let data = kernels::upsample_forward(self.value(input).data(), n * c, h, w, factor);
        let rg = self.rg(&[input]);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h * factor, w * factor], data),
            rg,
            Op::Upsample(input, factor),
        ))
    }

    /// Batch normalization over the N, H, W axes of a `[N,C,H,W]` input.
    ///
    /// Running statistics are read in eval mode and never written here; call
    /// [`RunningStats::update`] with the returned batch statistics to advance them.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats<T>,
        mode: BnMode,
        epsilon: T,
    ) -> Result<BatchNormOutput<T>> {
        let (n, c, h, w) = self.value(input).dims4("batch_norm")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: if name == "gamma" {
                        "batch_norm gamma"
                    } else {
                        "batch_norm beta"
                    },
                    left: self.shape(input).to_vec(),
                    right: self.shape(v).to_vec(),
                });
            }
        }
        if running.channels() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm running stats",
                left: self.shape(input).to_vec(),
                right: running.mean.shape().to_vec(),
            });
        }
        let area = h * w;
        let (mean, var) = match mode {
            BnMode::Train => {
                if n * area < 2 {
                    return Err(invalid(
                        "batch_norm",
                        format!(
                            "train mode needs at least 2 values per channel, got N·H·W = {}",
                            n * area
                        ),
                    ));
                }
                kernels::channel_stats(self.value(input).data(), n, c, area)
            }
            BnMode::Eval => (running.mean.data().to_vec(), running.var.data().to_vec()),
        };
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + epsilon).sqrt())
            .collect();
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut normalized = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..n {
            for ch in 0..c {
                let base = (bi * c + ch) * area;
                for i in base..base + area {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    normalized[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let rg = self.rg(&[input, gamma, beta]);
        let output = self.push(
            Tensor::from_parts(vec![n, c, h, w], out),
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                mode,
            },
        );
        Ok(BatchNormOutput {
            output,
            batch_mean: Tensor::from_parts(vec![c], mean),
            batch_var: Tensor::from_parts(vec![c], var),
        })
    }

    /// Mean (or summed) negative log-softmax of the labelled class.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        reduction: Reduction,
    ) -> Result<Var> {
        let (n, k) = match self.shape(logits) {
            &[n, k] => (n, k),
            s => {
                return Err(invalid(
                    "softmax_cross_entropy",
                    format!("expected [N, K] logits, got {s:?}"),
                ))
            }
        };
        if labels.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy labels",
                left: vec![n, k],
                right: vec![labels.len()],
            });
        }
        if let Some((position, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(TensorError::LabelOutOfRange {
                label,
                position,
                classes: k,
            });
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &z[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let denom: T = row.iter().map(|&v| (v - m).exp()).sum();
            let log_denom = denom.ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - m).exp() / denom;
            }
            total = total + (log_denom - (row[label] - m));
        }
        let scale = match reduction {
            Reduction::Mean => T::one() / T::from_usize_lossy(n),
            Reduction::Sum => T::one(),
        };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total * scale),
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                scale,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / T::from_usize_lossy(t.len()));
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::Mean(a))
    }

    /// `mean((a − b)²)`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Forward identity that contributes no gradient to its input.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(out, false, Op::StopGradient)
    }

    /// Forwards `quantized` unchanged; backward copies the output gradient to
    /// `continuous` and sends nothing to `quantized`.
    pub fn straight_through(&mut self, continuous: Var, quantized: Var) -> Result<Var> {
        self.same_shape(continuous, quantized, "straight_through")?;
        let out = self.value(quantized).clone();
        let rg = self.rg(&[continuous]);
        Ok(self.push(out, rg, Op::StraightThrough(continuous)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::Reshape(a)))
    }

    /// Reorders the axes of a rank-4 tensor; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: [usize; 4]) -> Result<Var> {
        let shape = self.shape(a);
        let dims: [usize; 4] = shape
            .try_into()
            .map_err(|_| invalid("permute", format!("expected rank 4, got {shape:?}")))?;
        let mut seen = [false; 4];
        for &p in &perm {
            if p >= 4 || seen[p] {
                return Err(invalid(
                    "permute",
                    format!("{perm:?} is not a permutation of 0..4"),
                ));
            }
            seen[p] = true;
        }
        let data = kernels::permute4(self.value(a).data(), dims, perm);
        let out_shape = perm.iter().map(|&p| dims[p]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            rg,
            Op::Permute(a, perm),
        ))
    }

    /// Row lookup: `out[i] = table[indices[i]]` for a `[K, d]` table.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (k, d) = match self.shape(table) {
            &[k, d] => (k, d),
            s => {
                return Err(invalid(
                    "gather_rows",
                    format!("expected a [K, d] table, got {s:?}"),
                ))
            }
        };
        if indices.is_empty() {
            return Err(invalid("gather_rows", "no indices"));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= k {
                return Err(invalid(
                    "gather_rows",
                    format!("index {i} outside [0, {k})"),
                ));
            }
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![indices.len(), d], data),
            rg,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Replays backward rules from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::UnknownVar(loss.0));
        }
        let shape = self.shape(loss).to_vec();
        if numel(&shape) != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        self.backward_done = true;
        self.visited = 0;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::ones(shape));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = node.grad.as_ref() else {
                continue;
            };
            self.visited += 1;
            let contributions = self.backward_rule(id, grad)?;
            for (v, g) in contributions {
                self.accumulate(v, g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(g) {
                    *e = *e + d;
                }
            }
            None => node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
        }
    }

    fn backward_rule(&self, id: usize, grad: &Tensor<T>) -> Result<Vec<(Var, Vec<T>)>> {
        let gy = grad.data();
        let node = &self.nodes[id];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                out.push((*a, gy.to_vec()));
                out.push((*b, gy.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, gy.to_vec()));
                out.push((*b, gy.iter().map(|&g| -g).collect()));
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    out.push((*a, gy.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect()));
                }
                if rg(*b) {
                    out.push((*b, gy.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect()));
                }
            }
            Op::Scale(a, s) => out.push((*a, gy.iter().map(|&g| g * *s).collect())),
            Op::Relu(a) => out.push((
                *a,
                gy.iter()
                    .zip(val(*a))
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect(),
            )),
            Op::Clamp(a, lo, hi) => out.push((
                *a,
                gy.iter()
                    .zip(val(*a))
                    .map(|(&g, &x)| if x > *lo && x < *hi { g } else { T::zero() })
                    .collect(),
            )),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (di, dk, db) = kernels::conv2d_backward(
                    geom,
                    val(*input),
                    val(*kernel),
                    gy,
                    [rg(*input), rg(*kernel), rg(*bias)],
                );
                out.extend(di.map(|d| (*input, d)));
                out.extend(dk.map(|d| (*kernel, d)));
                out.extend(db.map(|d| (*bias, d)));
            }
            Op::Linear {
                input,
                weight,
                bias,
                dims,
            } => {
                let (dx, dw, db) = kernels::linear_backward(
                    val(*input),
                    val(*weight),
                    gy,
                    *dims,
                    [rg(*input), rg(*weight), rg(*bias)],
                );
                out.extend(dx.map(|d| (*input, d)));
                out.extend(dw.map(|d| (*weight, d)));
                out.extend(db.map(|d| (*bias, d)));
            }
            Op::AvgPool(a, k) => {
                let (n, c, h, w) = self.nodes[a.0].value.dims4("avg_pool")?;
                out.push((*a, kernels::avgpool_backward(gy, n * c, h, w, *k)));
            }
            Op::Upsample(a, s) => {
                let (n, c, h, w) = self.nodes[a.0].value.dims4("upsample_nearest")?;
                out.push((*a, kernels::upsample_backward(gy, n * c, h, w, *s)));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                mode,
            } => {
                let (n, c, h, w) = self.nodes[input.0].value.dims4("batch_norm")?;
                let area = h * w;
                let g = val(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..n {
                    for ch in 0..c {
                        let base = (bi * c + ch) * area;
                        for i in base..base + area {
                            dgamma[ch] = dgamma[ch] + gy[i] * normalized[i];
                            dbeta[ch] = dbeta[ch] + gy[i];
                        }
                    }
                }
                if rg(*input) {
                    let mut dx = vec![T::zero(); gy.len()];
                    match mode {
                        BnMode::Eval => {
                            for bi in 0..n {
                                for ch in 0..c {
                                    let base = (bi * c + ch) * area;
                                    let s = g[ch] * inv_std[ch];
                                    for i in base..base + area {
                                        dx[i] = gy[i] * s;
                                    }
                                }
                            }
                        }
                        BnMode::Train => {
                            // dgamma/dbeta hold Σ dy·x̂ and Σ dy per channel.
                            let m = T::from_usize_lossy(n * area);
                            for bi in 0..n {
                                for ch in 0..c {
                                    let base = (bi * c + ch) * area;
                                    let s = g[ch] * inv_std[ch];
                                    let mean_dy = dbeta[ch] / m;
                                    let mean_dy_xh = dgamma[ch] / m;
                                    for i in base..base + area {
                                        dx[i] = s * (gy[i] - mean_dy - normalized[i] * mean_dy_xh);
                                    }
                                }
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                if rg(*gamma) {
                    out.push((*gamma, dgamma));
                }
                if rg(*beta) {
                    out.push((*beta, dbeta));
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                scale,
            } => {
                let k = probs.len() / labels.len();
                let s = gy[0] * *scale;
                let mut d: Vec<T> = probs.iter().map(|&p| p * s).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] = d[i * k + l] - s;
                }
                out.push((*logits, d));
            }
            Op::Sum(a) => out.push((*a, vec![gy[0]; self.nodes[a.0].value.len()])),
            Op::Mean(a) => {
                let len = self.nodes[a.0].value.len();
                out.push((*a, vec![gy[0] / T::from_usize_lossy(len); len]));
            }
            Op::StraightThrough(c) => out.push((*c, gy.to_vec())),
            Op::Reshape(a) => out.push((*a, gy.to_vec())),
            Op::Permute(a, perm) => {
                let dims: [usize; 4] = node
                    .value
                    .shape()
                    .try_into()
                    .expect("permute output is rank 4");
                out.push((
                    *a,
                    kernels::permute4(gy, dims, kernels::inverse_perm(*perm)),
                ));
            }
            Op::Gather { table, indices } => {
                let t = &self.nodes[table.0].value;
                let d = t.shape()[1];
                let mut dt = vec![T::zero(); t.len()];
                for (row, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] = dt[i * d + j] + gy[row * d + j];
                    }
                }
                out.push((*table, dt));
            }
        }
        Ok(out)
    }
}
