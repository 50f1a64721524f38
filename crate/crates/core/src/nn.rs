//! Parameter storage, layers and optimizers shared by the discretizer and the classifier.

use dat_tensor::{BnMode, Graph, RunningStats, Scalar, Tensor, Var};
use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Result};
use crate::rng::content_hash;

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Graph handles for every parameter of a set, in set order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.entries.push((name.into(), t));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn numel(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// Records every parameter as a leaf.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound(
            self.entries
                .iter()
                .map(|(_, t)| g.leaf(t.clone(), trainable))
                .collect(),
        )
    }

    /// Gradients for each parameter after `backward`, zero-filled where nothing flowed.
    pub fn grads(&self, g: &Graph<T>, bound: &Bound) -> Vec<Tensor<T>> {
        bound.0.iter().map(|&v| g.grad_or_zeros(v)).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    pub fn write_to(&self, ck: &mut Checkpoint, prefix: &str) {
        for (n, t) in &self.entries {
            ck.insert(format!("{prefix}{n}"), t);
        }
    }

    /// Replaces every tensor with the same-named one from `ck`, checking shapes.
    pub fn read_from(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        for (n, t) in self.entries.iter_mut() {
            let src = ck.require(&format!("{prefix}{n}"))?;
            if src.shape() != t.shape() {
                return Err(invalid(
                    "checkpoint",
                    format!(
                        "`{prefix}{n}` has shape {:?}, model expects {:?}",
                        src.shape(),
                        t.shape()
                    ),
                ));
            }
            *t = src.cast();
        }
        Ok(())
    }

    /// Content hash over names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for (n, t) in &self.entries {
            bytes.extend_from_slice(n.as_bytes());
            for &d in t.shape() {
                bytes.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                bytes.extend_from_slice(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        content_hash(bytes)
    }
}

/// He-normal initialization for a layer with `fan_in` inputs.
pub fn he_normal<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    Tensor::normal(shape.to_vec(), (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            he_normal(&[cout, cin, k, k], cin * k * k, rng),
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros([cout]));
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.conv2d(
            x,
            p.var(self.weight),
            p.var(self.bias),
            self.stride,
            self.padding,
        )?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        inp: usize,
        out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        let weight = params.add(
            format!("{name}.weight"),
            Tensor::uniform([out, inp], -bound, bound, rng),
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros([out]));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.linear(x, p.var(self.weight), p.var(self.bias))?)
    }
}

/// Affine parameters of a batch-normalization layer; running statistics are
/// held by the owning model, indexed by `slot`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub slot: usize,
}

impl BatchNorm {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        running: &mut Vec<RunningStats<T>>,
        name: &str,
        channels: usize,
    ) -> Self {
        let gamma = params.add(format!("{name}.gamma"), Tensor::ones([channels]));
        let beta = params.add(format!("{name}.beta"), Tensor::zeros([channels]));
        running.push(RunningStats::new(channels));
        Self {
            gamma,
            beta,
            slot: running.len() - 1,
        }
    }

    /// Returns the output plus the per-channel statistics used to normalize.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        running: &[RunningStats<T>],
        x: Var,
        mode: BnMode,
        epsilon: T,
    ) -> Result<(Var, Tensor<T>, Tensor<T>)> {
        let out = g.batch_norm(
            x,
            p.var(self.gamma),
            p.var(self.beta),
            &running[self.slot],
            mode,
            epsilon,
        )?;
        Ok((out.output, out.batch_mean, out.batch_var))
    }
}

/// Stochastic gradient descent with momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: &ParamSet<T>, lr: T, momentum: T, weight_decay: T) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: params.tensors().map(Tensor::zeros_like).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(invalid(
                "sgd",
                "gradient count differs from parameter count",
            ));
        }
        for ((p, g), v) in params
            .tensors_mut()
            .zip(grads)
            .zip(self.velocity.iter_mut())
        {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let d = gv + self.weight_decay * *pv;
                *vv = self.momentum * *vv + d;
                *pv = *pv - self.lr * *vv;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    step: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: T) -> Self {
        Self {
            lr,
            beta1: T::from_f64_lossy(0.9),
            beta2: T::from_f64_lossy(0.999),
            epsilon: T::from_f64_lossy(1e-8),
            step: 0,
            m: params.tensors().map(Tensor::zeros_like).collect(),
            v: params.tensors().map(Tensor::zeros_like).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(invalid(
                "adam",
                "gradient count differs from parameter count",
            ));
        }
        self.step += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.step);
        let c2 = one - self.beta2.powi(self.step);
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (one - self.beta1) * gv;
                *vv = self.beta2 * *vv + (one - self.beta2) * gv * gv;
                let mh = *mv / c1;
                let vh = *vv / c2;
                *pv = *pv - self.lr * mh / (vh.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }

    /// Resets moment estimates for one parameter tensor (after re-seeding it).
    pub fn reset_moments(&mut self, id: ParamId) {
        self.m[id.0] = Tensor::zeros_like(&self.m[id.0]);
        self.v[id.0] = Tensor::zeros_like(&self.v[id.0]);
    }
}
