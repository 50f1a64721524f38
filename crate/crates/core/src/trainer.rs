//! Classifier training regimes: standard, pixel-space adversarial training,
//! discrete adversarial training through a frozen discretizer, and random
//! visual-word replacement.

use std::fmt;

use dat_tensor::{BnMode, Graph, Reduction, Scalar, Tensor};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{accuracy, AttackTarget, Classifier, ClassifierConfig};
use crate::data::Dataset;
use crate::discretizer::{Discretized, Discretizer};
use crate::error::{invalid, DatError, Result};
use crate::nn::Sgd;
use crate::rng::{self, labels};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// `δ = α·∇`.
    Raw,
    /// `δ = α·sign(∇)`.
    Sign,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PNorm {
    L2,
    Linf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientSource {
    /// Gradient taken at `x̂ = Q(x)` and copied to `x`.
    StraightThrough,
    /// Gradient backpropagated through decoder and encoder, straight-through only at the quantizer.
    FullBackward,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub alpha: f64,
    pub mode: GradientMode,
    /// Optional per-example projection onto a p-norm ball of radius ε (ε may be infinite).
    pub bound: Option<(PNorm, f64)>,
    pub source: GradientSource,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            mode: GradientMode::Raw,
            bound: None,
            source: GradientSource::StraightThrough,
        }
    }
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(invalid(
                "perturbation",
                format!("alpha must be finite and ≥ 0, got {}", self.alpha),
            ));
        }
        if let Some((_, eps)) = self.bound {
            if !(eps > 0.0) {
                return Err(invalid(
                    "perturbation",
                    format!("bound radius must be > 0, got {eps}"),
                ));
            }
        }
        Ok(())
    }
}

/// Projects each example of `delta` (leading axis) onto the ball of radius `eps`.
pub fn project<T: Scalar>(delta: &mut Tensor<T>, norm: PNorm, eps: f64) {
    let n = delta.shape()[0].max(1);
    let per = delta.len() / n;
    let e = T::from_f64_lossy(eps);
    for chunk in delta.data_mut().chunks_exact_mut(per) {
        match norm {
            PNorm::Linf => {
                for v in chunk.iter_mut() {
                    *v = v.max(-e).min(e);
                }
            }
            PNorm::L2 => {
                let norm = chunk
                    .iter()
                    .map(|&v| v.as_f64() * v.as_f64())
                    .sum::<f64>()
                    .sqrt();
                if norm > eps {
                    let s = T::from_f64_lossy(eps / norm);
                    for v in chunk.iter_mut() {
                        *v = *v * s;
                    }
                }
            }
        }
    }
}

fn shape_gradient<T: Scalar>(grad: Tensor<T>, spec: &PerturbationSpec) -> Result<Tensor<T>> {
    let a = T::from_f64_lossy(spec.alpha);
    let mut delta = match spec.mode {
        GradientMode::Raw => grad.scale(a),
        GradientMode::Sign => grad.sign().scale(a),
    };
    if let Some((norm, eps)) = spec.bound {
        project(&mut delta, norm, eps);
    }
    if !delta.all_finite() {
        return Err(DatError::NonFinite("perturbation"));
    }
    Ok(delta)
}

/// `δ = α·∇_{x̂} L(x̂, y)` (or its sign), optionally projected. The gradient is
/// that of the summed per-example loss, so `α` does not depend on batch size.
pub fn compute_perturbation<T: Scalar, M: AttackTarget<T>>(
    model: &M,
    x_hat: &Tensor<T>,
    labels: &[usize],
    spec: &PerturbationSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    if spec.alpha == 0.0 {
        return Ok(Tensor::zeros_like(x_hat));
    }
    let (_, grad) = model.loss_and_input_grad(x_hat, labels)?;
    shape_gradient(grad, spec)
}

/// `∇_x L(Q(x), y)` with true backpropagation through the decoder and encoder.
pub fn full_backward_gradient<T: Scalar>(
    model: &Classifier<T>,
    disc: &Discretizer<T>,
    x: &Tensor<T>,
    labels: &[usize],
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let pc = model.params().bind(&mut g, false);
    let pd = disc.params().bind(&mut g, false);
    let xv = g.param(x.clone());
    let trace = disc.forward_graph(&mut g, &pd, None, xv)?;
    let (logits, _) = model.forward_graph(&mut g, &pc, trace.reconstruction, BnMode::Eval)?;
    let loss = g.softmax_cross_entropy(logits, labels, Reduction::Sum)?;
    g.backward(loss)?;
    let grad = g.grad_or_zeros(xv);
    if !grad.all_finite() {
        return Err(DatError::NonFinite("full-backward gradient"));
    }
    Ok(grad)
}

/// `δ = α·∇_x L(Q(x), y)` through the whole discretizer; for fidelity comparisons.
pub fn full_backward_perturbation<T: Scalar>(
    model: &Classifier<T>,
    disc: &Discretizer<T>,
    x: &Tensor<T>,
    labels: &[usize],
    alpha: f64,
) -> Result<Tensor<T>> {
    let spec = PerturbationSpec {
        alpha,
        source: GradientSource::FullBackward,
        ..Default::default()
    };
    spec.validate()?;
    if alpha == 0.0 {
        return Ok(Tensor::zeros_like(x));
    }
    shape_gradient(full_backward_gradient(model, disc, x, labels)?, &spec)
}

/// Share of positions whose index differs.
pub fn modified_fraction(before: &[usize], after: &[usize]) -> f64 {
    if before.is_empty() {
        return 0.0;
    }
    before.iter().zip(after).filter(|(a, b)| a != b).count() as f64 / before.len() as f64
}

/// The DAT example `Q(clip(x + δ))` for a batch whose clean discretization is `x_hat`.
#[derive(Clone, Debug)]
pub struct DatExample {
    pub delta: Tensor<f32>,
    pub x_adv: Tensor<f32>,
    pub indices: Vec<usize>,
    pub modified_fraction: f64,
}

pub fn dat_example(
    model: &Classifier<f32>,
    disc: &Discretizer<f32>,
    x: &Tensor<f32>,
    x_hat: &Discretized<f32>,
    labels: &[usize],
    spec: &PerturbationSpec,
) -> Result<DatExample> {
    let delta = match spec.source {
        GradientSource::StraightThrough => compute_perturbation(model, &x_hat.image, labels, spec)?,
        GradientSource::FullBackward => {
            spec.validate()?;
            if spec.alpha == 0.0 {
                Tensor::zeros_like(x)
            } else {
                shape_gradient(full_backward_gradient(model, disc, x, labels)?, spec)?
            }
        }
    };
    let x_pert = x.add(&delta)?.clamp(0.0, 1.0);
    let q = disc.discretize(&x_pert)?;
    let modified_fraction = modified_fraction(&x_hat.indices, &q.indices);
    Ok(DatExample {
        delta,
        x_adv: q.image,
        indices: q.indices,
        modified_fraction,
    })
}

/// One optimizer step on the mean cross-entropy of `(x, labels)` with train-mode BN.
pub fn train_step(
    model: &mut Classifier<f32>,
    opt: &mut Sgd<f32>,
    x: &Tensor<f32>,
    labels: &[usize],
) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, true);
    let xv = g.constant(x.clone());
    let (logits, trace) = model.forward_graph(&mut g, &p, xv, BnMode::Train)?;
    let loss = g.softmax_cross_entropy(logits, labels, Reduction::Mean)?;
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(DatError::NonFinite("training loss"));
    }
    g.backward(loss)?;
    let grads = model.params().grads(&g, &p);
    opt.step(model.params_mut(), &grads)?;
    model.commit_bn_stats(&trace)?;
    Ok(value)
}

#[derive(Clone, Debug)]
pub struct DatStep {
    pub loss: f64,
    pub x_adv: Tensor<f32>,
    pub modified_fraction: f64,
}

/// Perturb `Q(x)` along the loss gradient, re-discretize, and train on the result.
#[allow(clippy::too_many_arguments)]
pub fn dat_step(
    model: &mut Classifier<f32>,
    opt: &mut Sgd<f32>,
    disc: &Discretizer<f32>,
    x: &Tensor<f32>,
    x_hat: &Discretized<f32>,
    labels: &[usize],
    spec: &PerturbationSpec,
) -> Result<DatStep> {
    let ex = dat_example(model, disc, x, x_hat, labels, spec)?;
    let loss = train_step(model, opt, &ex.x_adv, labels)?;
    Ok(DatStep {
        loss,
        x_adv: ex.x_adv,
        modified_fraction: ex.modified_fraction,
    })
}

/// Replaces `round(fraction·h·w)` uniformly chosen tokens per image with a
/// different uniformly drawn index and decodes the result.
pub fn random_word_perturbation<R: Rng>(
    disc: &Discretizer<f32>,
    x_hat: &Discretized<f32>,
    fraction: f64,
    rng: &mut R,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(invalid(
            "random_word_perturbation",
            format!("fraction {fraction} outside [0, 1]"),
        ));
    }
    let k = disc.codebook().size();
    let per = x_hat.index_shape[1..].iter().product::<usize>();
    let m = (fraction * per as f64).round() as usize;
    let mut indices = x_hat.indices.clone();
    for grid in indices.chunks_exact_mut(per) {
        for pos in sample(rng, per, m) {
            let old = grid[pos];
            let r = rng.random_range(0..k - 1);
            grid[pos] = if r >= old { r + 1 } else { r };
        }
    }
    let image = disc.decode_indices(&indices, &x_hat.index_shape)?;
    Ok((image, indices))
}

/// Projected sign-gradient ascent inside the ∞-ball of radius `epsilon`,
/// starting from `x`; `steps = 1, step_size = epsilon` is FGSM.
pub fn pgd_attack<T: Scalar, M: AttackTarget<T>>(
    model: &M,
    x: &Tensor<T>,
    labels: &[usize],
    epsilon: f64,
    steps: usize,
    step_size: f64,
) -> Result<Tensor<T>> {
    if !(epsilon >= 0.0) || steps == 0 || !(step_size >= 0.0) {
        return Err(invalid(
            "pgd_attack",
            "need epsilon ≥ 0, step size ≥ 0 and at least one step",
        ));
    }
    let e = T::from_f64_lossy(epsilon);
    let s = T::from_f64_lossy(step_size);
    let mut adv = x.clone();
    for _ in 0..steps {
        let (_, grad) = model.loss_and_input_grad(&adv, labels)?;
        let stepped = adv.add(&grad.sign().scale(s))?;
        adv = stepped.zip_map(x, "pgd_attack", |a, x0| {
            a.max(x0 - e).min(x0 + e).max(T::zero()).min(T::one())
        })?;
    }
    Ok(adv)
}

pub fn pixel_at_step(
    model: &mut Classifier<f32>,
    opt: &mut Sgd<f32>,
    x: &Tensor<f32>,
    labels: &[usize],
    epsilon: f64,
    steps: usize,
    step_size: f64,
) -> Result<f64> {
    let adv = pgd_attack(&*model, x, labels, epsilon, steps, step_size)?;
    train_step(model, opt, &adv, labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TrainMode {
    Standard,
    PixelAt {
        epsilon: f64,
        steps: usize,
        step_size: f64,
    },
    Dat(PerturbationSpec),
    RandomWord {
        fraction: f64,
    },
}

impl TrainMode {
    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Standard => "standard",
            TrainMode::PixelAt { .. } => "pixel_at",
            TrainMode::Dat(_) => "dat",
            TrainMode::RandomWord { .. } => "random_word",
        }
    }

    pub fn needs_discretizer(&self) -> bool {
        matches!(self, TrainMode::Dat(_) | TrainMode::RandomWord { .. })
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiply the learning rate by `lr_decay_factor` every this many epochs (0 disables).
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_every: 3,
            lr_decay_factor: 0.2,
            seed: 0,
        }
    }
}

impl ClassifierTrainConfig {
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if self.lr_decay_every == 0 {
            return self.learning_rate;
        }
        self.learning_rate
            * self
                .lr_decay_factor
                .powi((epoch / self.lr_decay_every) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEpochMetrics {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
    /// Mean share of tokens changed by the perturbation (discrete modes only).
    pub modified_fraction: Option<f64>,
}

/// `Q(x)` for every training image, computed once since the discretizer is frozen.
struct DiscreteCache {
    images: Tensor<f32>,
    indices: Vec<usize>,
    grid: Vec<usize>,
}

impl DiscreteCache {
    fn build(disc: &Discretizer<f32>, data: &Dataset) -> Result<Self> {
        let mut images = Vec::new();
        let mut indices = Vec::with_capacity(data.len() * 64);
        let mut grid = Vec::new();
        for idx in data.eval_batches(256) {
            let (x, _) = data.batch(&idx)?;
            let d = disc.discretize(&x)?;
            grid = d.index_shape[1..].to_vec();
            images.push(d.image);
            indices.extend(d.indices);
        }
        Ok(Self {
            images: Tensor::concat_outer(&images)?,
            indices,
            grid,
        })
    }

    fn batch(&self, idx: &[usize]) -> Result<Discretized<f32>> {
        let per: usize = self.grid.iter().product();
        let mut indices = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            indices.extend_from_slice(&self.indices[i * per..(i + 1) * per]);
        }
        let mut index_shape = vec![idx.len()];
        index_shape.extend_from_slice(&self.grid);
        Ok(Discretized {
            image: self.images.select_outer(idx)?,
            indices,
            index_shape,
        })
    }
}

/// Trains a classifier from scratch under `mode`. The discretizer, when
/// needed, is only read; its checksum is verified after every epoch.
pub fn train_classifier(
    train: &Dataset,
    val: &Dataset,
    model_config: &ClassifierConfig,
    mode: &TrainMode,
    cfg: &ClassifierTrainConfig,
    disc: Option<&Discretizer<f32>>,
    mut on_epoch: impl FnMut(&ClassifierEpochMetrics, &Classifier<f32>) -> Result<()>,
) -> Result<(Classifier<f32>, Vec<ClassifierEpochMetrics>)> {
    let disc = match (mode.needs_discretizer(), disc) {
        (true, None) => {
            return Err(DatError::Config(format!(
                "mode {mode} requires a discretizer checkpoint"
            )));
        }
        (true, Some(d)) => Some(d),
        (false, _) => None,
    };
    match mode {
        TrainMode::Dat(spec) => spec.validate()?,
        TrainMode::PixelAt { epsilon, steps, .. } if !(*epsilon > 0.0) || *steps == 0 => {
            return Err(invalid(
                "train",
                "pixel_at needs epsilon > 0 and at least one step",
            ));
        }
        TrainMode::RandomWord { fraction } if !(0.0..=1.0).contains(fraction) => {
            return Err(invalid(
                "train",
                format!("fraction {fraction} outside [0, 1]"),
            ));
        }
        _ => {}
    }
    if cfg.batch_size < 2 || cfg.batch_size > train.len() {
        return Err(invalid("train", "batch size must be in 2..=dataset size"));
    }
    let mut model = Classifier::<f32>::new(model_config.clone(), cfg.seed)?;
    let mut opt = Sgd::new(
        model.params(),
        cfg.learning_rate as f32,
        cfg.momentum as f32,
        cfg.weight_decay as f32,
    );
    let frozen = disc.map(Discretizer::checksum);
    let cache = disc.map(|d| DiscreteCache::build(d, train)).transpose()?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        opt.lr = lr as f32;
        let mut loss_sum = 0.0;
        let mut frac_sum = 0.0;
        let batches = train.train_batches(cfg.batch_size, cfg.seed, epoch);
        let mut words = rng::stream(cfg.seed, labels::RANDOM_WORDS, epoch as u64);
        for idx in &batches {
            let (x, y) = train.batch(idx)?;
            let loss = match (mode, disc, &cache) {
                (TrainMode::Standard, ..) => train_step(&mut model, &mut opt, &x, &y)?,
                (
                    TrainMode::PixelAt {
                        epsilon,
                        steps,
                        step_size,
                    },
                    ..,
                ) => pixel_at_step(&mut model, &mut opt, &x, &y, *epsilon, *steps, *step_size)?,
                (TrainMode::Dat(spec), Some(d), Some(c)) => {
                    let step = dat_step(&mut model, &mut opt, d, &x, &c.batch(idx)?, &y, spec)?;
                    frac_sum += step.modified_fraction;
                    step.loss
                }
                (TrainMode::RandomWord { fraction }, Some(d), Some(c)) => {
                    let x_hat = c.batch(idx)?;
                    let (x_rand, indices) =
                        random_word_perturbation(d, &x_hat, *fraction, &mut words)?;
                    frac_sum += modified_fraction(&x_hat.indices, &indices);
                    train_step(&mut model, &mut opt, &x_rand, &y)?
                }
                _ => unreachable!("discretizer presence checked above"),
            };
            loss_sum += loss;
        }
        if let (Some(d), Some(sum)) = (disc, frozen) {
            if d.checksum() != sum {
                return Err(invalid(
                    "train",
                    "discretizer parameters changed during training",
                ));
            }
        }
        let nb = batches.len().max(1) as f64;
        let m = ClassifierEpochMetrics {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / nb,
            val_accuracy: accuracy(&model, val, 256)?,
            modified_fraction: mode.needs_discretizer().then_some(frac_sum / nb),
        };
        on_epoch(&m, &model)?;
        history.push(m);
    }
    Ok((model, history))
}
