//! Small residual CNN with batch normalization.
//!
//! Layout for a 32×32 input at width `w`:
//!
//! ```text
//! stem    conv3×3 C→w, BN, relu, avgpool 2            16×16
//! stage 1 residual block w→w                          16×16
//! stage 2 residual block w→2w, stride 2, 1×1 shortcut   8×8
//! stage 3 residual block 2w→4w, stride 2, 1×1 shortcut  4×4
//! head    global average pool, linear 4w→K
//! ```
//!
//! Eight weighted layers on the main path. The "last BN" is the one after
//! the second convolution of stage 3; its statistics are taken before the
//! affine transform.

use dat_tensor::{BnMode, Graph, Reduction, RunningStats, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{invalid, DatError, Result};
use crate::nn::{BatchNorm, Bound, Conv, Linear, ParamSet};
use crate::rng::{self, labels};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub in_channels: usize,
    pub image_size: usize,
    /// Channels of the first stage; later stages use 2× and 4×.
    pub width: usize,
    pub num_classes: usize,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            image_size: 32,
            width: 16,
            num_classes: 10,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    shortcut: Option<(Conv, BatchNorm)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T> {
    config: ClassifierConfig,
    params: ParamSet<T>,
    running: Vec<RunningStats<T>>,
    stem: Conv,
    stem_bn: BatchNorm,
    blocks: Vec<Block>,
    head: Linear,
}

/// Per-layer statistics of one forward pass, in layer order.
#[derive(Clone, Debug)]
pub struct BnTrace<T> {
    pub means: Vec<Tensor<T>>,
    pub vars: Vec<Tensor<T>>,
}

impl<T: Scalar> BnTrace<T> {
    /// Pre-affine mean and variance at the designated last BN.
    pub fn last(&self) -> (&Tensor<T>, &Tensor<T>) {
        (
            self.means.last().expect("at least one BN"),
            self.vars.last().expect("at least one BN"),
        )
    }
}

impl<T: Scalar> Classifier<T> {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        if config.image_size % 8 != 0 || config.image_size == 0 {
            return Err(invalid(
                "classifier",
                format!("image size {} must be a multiple of 8", config.image_size),
            ));
        }
        if config.width == 0 || config.num_classes < 2 || config.in_channels == 0 {
            return Err(invalid(
                "classifier",
                "width and channels must be positive and classes ≥ 2",
            ));
        }
        let mut r = rng::stream(seed, labels::WEIGHT_INIT, 1);
        let mut params = ParamSet::new();
        let mut running = Vec::new();
        let w = config.width;
        let stem = Conv::new(&mut params, "stem", config.in_channels, w, 3, 1, 1, &mut r);
        let stem_bn = BatchNorm::new(&mut params, &mut running, "stem.bn", w);
        let mut blocks = Vec::new();
        for (i, (cin, cout, stride)) in [(w, w, 1), (w, 2 * w, 2), (2 * w, 4 * w, 2)]
            .into_iter()
            .enumerate()
        {
            let name = format!("stage{}", i + 1);
            // Shortcut first so that BN slots follow the recording order and the
            // last main-path BN is also the last slot.
            let shortcut = (stride != 1 || cin != cout).then(|| {
                let c = Conv::new(
                    &mut params,
                    &format!("{name}.short"),
                    cin,
                    cout,
                    1,
                    stride,
                    0,
                    &mut r,
                );
                let b =
                    BatchNorm::new(&mut params, &mut running, &format!("{name}.short.bn"), cout);
                (c, b)
            });
            let conv1 = Conv::new(
                &mut params,
                &format!("{name}.conv1"),
                cin,
                cout,
                3,
                stride,
                1,
                &mut r,
            );
            let bn1 = BatchNorm::new(&mut params, &mut running, &format!("{name}.bn1"), cout);
            let conv2 = Conv::new(
                &mut params,
                &format!("{name}.conv2"),
                cout,
                cout,
                3,
                1,
                1,
                &mut r,
            );
            let bn2 = BatchNorm::new(&mut params, &mut running, &format!("{name}.bn2"), cout);
            blocks.push(Block {
                conv1,
                bn1,
                conv2,
                bn2,
                shortcut,
            });
        }
        let head = Linear::new(&mut params, "head", 4 * w, config.num_classes, &mut r);
        Ok(Self {
            config,
            params,
            running,
            stem,
            stem_bn,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Index of the designated last BN within [`BnTrace`] and [`Self::running_stats`].
    pub fn last_bn_slot(&self) -> usize {
        let slot = self.blocks.last().expect("three stages").bn2.slot;
        debug_assert_eq!(slot, self.running.len() - 1);
        slot
    }

    pub fn cast<U: Scalar>(&self) -> Classifier<U> {
        Classifier {
            config: self.config.clone(),
            params: self.params.cast(),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    mean: r.mean.cast(),
                    var: r.var.cast(),
                })
                .collect(),
            stem: self.stem,
            stem_bn: self.stem_bn,
            blocks: self.blocks.clone(),
            head: self.head,
        }
    }

    /// Hash over parameters and running statistics.
    pub fn checksum(&self) -> u64 {
        let mut all = self.params.clone();
        for (i, r) in self.running.iter().enumerate() {
            all.add(format!("running{i}.mean"), r.mean.clone());
            all.add(format!("running{i}.var"), r.var.clone());
        }
        all.checksum()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        match shape {
            &[_, ch, h, w] if ch == c.in_channels && h == c.image_size && w == c.image_size => {
                Ok(())
            }
            s => Err(invalid(
                "classifier",
                format!(
                    "input {s:?} does not match [N, {}, {}, {}]",
                    c.in_channels, c.image_size, c.image_size
                ),
            )),
        }
    }

    fn bn(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        layer: &BatchNorm,
        x: Var,
        mode: BnMode,
        trace: &mut BnTrace<T>,
    ) -> Result<Var> {
        let eps = T::from_f64_lossy(self.config.bn_epsilon);
        let (out, mean, var) = layer.forward(g, p, &self.running, x, mode, eps)?;
        debug_assert_eq!(trace.means.len(), layer.slot);
        trace.means.push(mean);
        trace.vars.push(var);
        Ok(out)
    }

    /// Records the forward pass; returns logits `[N, K]` and the statistics of every BN.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        mode: BnMode,
    ) -> Result<(Var, BnTrace<T>)> {
        self.check_input(g.shape(x))?;
        let mut trace = BnTrace {
            means: Vec::with_capacity(self.running.len()),
            vars: Vec::with_capacity(self.running.len()),
        };
        let h = self.stem.forward(g, p, x)?;
        let h = self.bn(g, p, &self.stem_bn, h, mode, &mut trace)?;
        let h = g.relu(h);
        let mut h = g.avg_pool(h, 2)?;
        for b in &self.blocks {
            let skip = match &b.shortcut {
                Some((conv, bn)) => {
                    let s = conv.forward(g, p, h)?;
                    self.bn(g, p, bn, s, mode, &mut trace)?
                }
                None => h,
            };
            let y = b.conv1.forward(g, p, h)?;
            let y = self.bn(g, p, &b.bn1, y, mode, &mut trace)?;
            let y = g.relu(y);
            let y = b.conv2.forward(g, p, y)?;
            let y = self.bn(g, p, &b.bn2, y, mode, &mut trace)?;
            let sum = g.add(y, skip)?;
            h = g.relu(sum);
        }
        let spatial = g.shape(h)[2];
        let pooled = g.avg_pool(h, spatial)?;
        let n = g.shape(pooled)[0];
        let flat = g.reshape(pooled, &[n, 4 * self.config.width])?;
        let logits = self.head.forward(g, p, flat)?;
        Ok((logits, trace))
    }

    /// Logits without touching running statistics.
    pub fn logits(&self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let (out, _) = self.forward_graph(&mut g, &p, xv, mode)?;
        Ok(g.value(out).clone())
    }

    /// Train-mode forward that advances running statistics.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let (out, trace) = self.forward_graph(&mut g, &p, xv, BnMode::Train)?;
        self.commit_bn_stats(&trace)?;
        Ok(g.value(out).clone())
    }

    /// Advances every running statistic with the batch statistics of `trace`.
    pub fn commit_bn_stats(&mut self, trace: &BnTrace<T>) -> Result<()> {
        let m = T::from_f64_lossy(self.config.bn_momentum);
        for (r, (mean, var)) in self
            .running
            .iter_mut()
            .zip(trace.means.iter().zip(&trace.vars))
        {
            r.update(mean, var, m)?;
        }
        Ok(())
    }

    /// Batch mean and variance of the input to the last BN, computed in train
    /// mode without updating running statistics.
    pub fn last_bn_statistics(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        if x.shape().first().copied().unwrap_or(0) < 2 {
            return Err(invalid(
                "last_bn_statistics",
                "batch statistics need at least 2 images",
            ));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let (_, trace) = self.forward_graph(&mut g, &p, xv, BnMode::Train)?;
        let (m, v) = trace.last();
        Ok((m.clone(), v.clone()))
    }

    /// Loss and its gradient with respect to the input image.
    pub fn input_gradient(
        &self,
        x: &Tensor<T>,
        labels: &[usize],
        mode: BnMode,
        reduction: Reduction,
    ) -> Result<(T, Tensor<T>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.param(x.clone());
        let (logits, _) = self.forward_graph(&mut g, &p, xv, mode)?;
        let loss = g.softmax_cross_entropy(logits, labels, reduction)?;
        g.backward(loss)?;
        let grad = g.grad_or_zeros(xv);
        if !grad.all_finite() {
            return Err(DatError::NonFinite("input gradient"));
        }
        Ok((g.value(loss).item(), grad))
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.logits(x, BnMode::Eval)?;
        let k = self.config.num_classes;
        Ok(logits
            .data()
            .chunks_exact(k)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let c = &self.config;
        let meta = [c.in_channels, c.image_size, c.width, c.num_classes].map(|v| v as f32);
        ck.insert(
            "classifier.meta",
            &Tensor::new([4], meta.to_vec()).expect("4 values"),
        );
        ck.insert(
            "classifier.bn_hyper",
            &Tensor::<f64>::new([2], vec![c.bn_momentum, c.bn_epsilon]).expect("2 values"),
        );
        self.params.write_to(&mut ck, "classifier.");
        for (i, r) in self.running.iter().enumerate() {
            ck.insert(format!("classifier.running{i}.mean"), &r.mean);
            ck.insert(format!("classifier.running{i}.var"), &r.var);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m: Vec<usize> = ck
            .require("classifier.meta")?
            .data()
            .iter()
            .map(|&v| v as usize)
            .collect();
        let hyper = ck.require("classifier.bn_hyper")?.data();
        if m.len() != 4 || hyper.len() != 2 {
            return Err(invalid("checkpoint", "malformed classifier metadata"));
        }
        let config = ClassifierConfig {
            in_channels: m[0],
            image_size: m[1],
            width: m[2],
            num_classes: m[3],
            bn_momentum: hyper[0] as f64,
            bn_epsilon: hyper[1] as f64,
        };
        let mut model = Self::new(config, 0)?;
        model.params.read_from(ck, "classifier.")?;
        for (i, r) in model.running.iter_mut().enumerate() {
            r.mean = ck.require(&format!("classifier.running{i}.mean"))?.cast();
            r.var = ck.require(&format!("classifier.running{i}.var"))?.cast();
        }
        Ok(model)
    }
}

/// Anything whose summed cross-entropy can be differentiated with respect to its input.
/// Attack passes use eval-mode BN and never touch parameters.
pub trait AttackTarget<T: Scalar> {
    /// Summed per-example loss and its gradient with respect to `x`.
    fn loss_and_input_grad(&self, x: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)>;
}

impl<T: Scalar> AttackTarget<T> for Classifier<T> {
    fn loss_and_input_grad(&self, x: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
        self.input_gradient(x, labels, BnMode::Eval, Reduction::Sum)
    }
}

/// Softmax regression `logits = W·flatten(x) + b`; small enough to have closed-form gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSoftmax<T> {
    /// `[K, D]`.
    pub weight: Tensor<T>,
    /// `[K]`.
    pub bias: Tensor<T>,
}

impl<T: Scalar> AttackTarget<T> for LinearSoftmax<T> {
    fn loss_and_input_grad(&self, x: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
        let n = x.shape().first().copied().unwrap_or(0);
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let flat = g.reshape(xv, &[n, x.len() / n.max(1)])?;
        let w = g.constant(self.weight.clone());
        let b = g.constant(self.bias.clone());
        let logits = g.linear(flat, w, b)?;
        let loss = g.softmax_cross_entropy(logits, labels, Reduction::Sum)?;
        g.backward(loss)?;
        let grad = g.grad_or_zeros(xv);
        if !grad.all_finite() {
            return Err(DatError::NonFinite("input gradient"));
        }
        Ok((g.value(loss).item(), grad))
    }
}

/// Fraction of correctly classified examples, optionally after transforming each batch.
pub fn accuracy_with(
    model: &Classifier<f32>,
    data: &Dataset,
    batch_size: usize,
    mut transform: impl FnMut(&Tensor<f32>, &[usize]) -> Result<Tensor<f32>>,
) -> Result<f64> {
    let mut correct = 0usize;
    for idx in data.eval_batches(batch_size) {
        let (x, y) = data.batch(&idx)?;
        let x = transform(&x, &y)?;
        correct += model
            .predict(&x)?
            .iter()
            .zip(&y)
            .filter(|(p, t)| p == t)
            .count();
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

pub fn accuracy(model: &Classifier<f32>, data: &Dataset, batch_size: usize) -> Result<f64> {
    accuracy_with(model, data, batch_size, |x, _| Ok(x.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ClassifierConfig {
        ClassifierConfig {
            image_size: 8,
            width: 4,
            num_classes: 3,
            ..Default::default()
        }
    }

    fn images(n: usize, size: usize, seed: u64) -> Tensor<f32> {
        Tensor::uniform(
            [n, 3, size, size],
            0.0,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
    }

    #[test]
    fn logits_shape_and_eval_determinism() {
        let m = Classifier::<f32>::new(ClassifierConfig::default(), 0).unwrap();
        let x = images(2, 32, 1);
        let a = m.logits(&x, BnMode::Eval).unwrap();
        assert_eq!(a.shape(), &[2, 10]);
        assert!(a.bitwise_eq(&m.logits(&x, BnMode::Eval).unwrap()));
        assert!(m.logits(&images(2, 16, 1), BnMode::Eval).is_err());
    }

    #[test]
    fn duplicated_batch_gives_same_statistics() {
        let m = Classifier::<f64>::new(small(), 3).unwrap();
        let x = images(3, 8, 2).cast::<f64>();
        let xx = Tensor::concat_outer(&[x.clone(), x.clone()]).unwrap();
        let (m1, v1) = m.last_bn_statistics(&x).unwrap();
        let (m2, v2) = m.last_bn_statistics(&xx).unwrap();
        for (a, b) in m1
            .data()
            .iter()
            .zip(m2.data())
            .chain(v1.data().iter().zip(v2.data()))
        {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(m1.len(), 16);
    }

    #[test]
    fn constant_batch_has_zero_variance() {
        let m = Classifier::<f64>::new(small(), 3).unwrap();
        let x = Tensor::full([4, 3, 8, 8], 0.3);
        // An 8×8 input reaches the last BN as a 1×1 map, so zero padding adds
        // no spatial variation and identical images give zero variance.
        let (_, v) = m.last_bn_statistics(&x).unwrap();
        assert!(v.data().iter().all(|&s| s < 1e-12), "{:?}", v.data());
        assert!(m
            .last_bn_statistics(&Tensor::full([1, 3, 8, 8], 0.3))
            .is_err());
    }

    #[test]
    fn analysis_mode_leaves_model_unchanged() {
        let mut m = Classifier::<f32>::new(small(), 4).unwrap();
        let x = images(4, 8, 5);
        let before = m.checksum();
        m.last_bn_statistics(&x).unwrap();
        m.logits(&x, BnMode::Train).unwrap();
        assert_eq!(before, m.checksum());
        m.forward_train(&x).unwrap();
        assert_ne!(before, m.checksum());
    }

    #[test]
    fn commit_matches_slot_order() {
        let mut m = Classifier::<f64>::new(small(), 6).unwrap();
        let x = images(4, 8, 7).cast::<f64>();
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, false);
        let xv = g.constant(x);
        let (_, trace) = m.forward_graph(&mut g, &p, xv, BnMode::Train).unwrap();
        let last = m.last_bn_slot();
        let (lm, _) = trace.last();
        let lm = lm.clone();
        m.commit_bn_stats(&trace).unwrap();
        for (r, t) in m.running[last].mean.data().iter().zip(lm.data()) {
            assert!((r - 0.1 * t).abs() < 1e-15);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = Classifier::<f32>::new(small(), 8).unwrap();
        m.forward_train(&images(4, 8, 9)).unwrap();
        let back = Classifier::<f32>::from_checkpoint(
            &Checkpoint::decode(&m.to_checkpoint().encode().unwrap()).unwrap(),
        )
        .unwrap();
        assert_eq!(back.checksum(), m.checksum());
    }
}
