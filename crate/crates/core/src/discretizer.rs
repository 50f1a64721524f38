//! Image discretizer: convolutional encoder, codebook quantization and a
//! mirrored decoder, trained with L2 reconstruction plus the two VQ terms.

use dat_tensor::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::codebook::{lookup_on_graph, usage_fraction, usage_histogram, vq_losses, Codebook};
use crate::data::Dataset;
use crate::error::{invalid, DatError, Result};
use crate::nn::{Adam, Bound, Conv, ParamSet};
use crate::rng::{self, labels};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscretizerConfig {
    /// Image channels.
    pub channels: usize,
    /// Spatial downsampling factor `f`; a power of two.
    pub factor: usize,
    /// Latent (codebook entry) dimension `d`.
    pub latent_dim: usize,
    /// Number of codebook entries `K`.
    pub codebook_size: usize,
    /// Width of the hidden convolutions.
    pub hidden: usize,
}

impl Default for DiscretizerConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            factor: 4,
            latent_dim: 16,
            codebook_size: 128,
            hidden: 32,
        }
    }
}

impl DiscretizerConfig {
    fn stages(&self) -> Result<usize> {
        if self.factor < 2 || !self.factor.is_power_of_two() {
            return Err(invalid(
                "discretizer",
                format!("factor {} must be a power of two ≥ 2", self.factor),
            ));
        }
        Ok(self.factor.trailing_zeros() as usize)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discretizer<T> {
    config: DiscretizerConfig,
    params: ParamSet<T>,
    codebook: Codebook<T>,
    encoder: Vec<Conv>,
    to_latent: Conv,
    from_latent: Conv,
    decoder: Vec<Conv>,
    to_image: Conv,
}

/// Output of [`Discretizer::discretize`].
#[derive(Clone, Debug, PartialEq)]
pub struct Discretized<T> {
    pub image: Tensor<T>,
    pub indices: Vec<usize>,
    /// `[N, h, w]`.
    pub index_shape: Vec<usize>,
}

/// Graph handles produced by [`Discretizer::forward_graph`].
#[derive(Clone, Debug)]
pub struct DiscretizerTrace {
    pub latents: Var,
    pub quantized: Var,
    pub reconstruction: Var,
    pub indices: Vec<usize>,
    pub index_shape: Vec<usize>,
}

impl<T: Scalar> Discretizer<T> {
    /// Fresh model with weights from stream `(seed, weight-init)` and codebook from `(seed, codebook-init)`.
    pub fn new(config: DiscretizerConfig, seed: u64) -> Result<Self> {
        let stages = config.stages()?;
        if config.channels == 0 || config.hidden == 0 {
            return Err(invalid(
                "discretizer",
                "channels and hidden width must be positive",
            ));
        }
        let mut wrng = rng::stream(seed, labels::WEIGHT_INIT, 0);
        let mut params = ParamSet::new();
        let h = config.hidden;
        let mut encoder = Vec::with_capacity(stages);
        for i in 0..stages {
            let cin = if i == 0 { config.channels } else { h };
            encoder.push(Conv::new(
                &mut params,
                &format!("enc.{i}"),
                cin,
                h,
                3,
                2,
                1,
                &mut wrng,
            ));
        }
        let to_latent = Conv::new(
            &mut params,
            "enc.out",
            h,
            config.latent_dim,
            1,
            1,
            0,
            &mut wrng,
        );
        let from_latent = Conv::new(
            &mut params,
            "dec.in",
            config.latent_dim,
            h,
            3,
            1,
            1,
            &mut wrng,
        );
        let decoder = (0..stages - 1)
            .map(|i| Conv::new(&mut params, &format!("dec.{i}"), h, h, 3, 1, 1, &mut wrng))
            .collect();
        let to_image = Conv::new(
            &mut params,
            "dec.out",
            h,
            config.channels,
            3,
            1,
            1,
            &mut wrng,
        );
        // Centre the untrained output inside the clamp range.
        params
            .get_mut(to_image.bias)
            .data_mut()
            .fill(T::from_f64_lossy(0.5));
        let codebook = Codebook::init(
            config.codebook_size,
            config.latent_dim,
            &mut rng::stream(seed, labels::CODEBOOK_INIT, 0),
        )?;
        Ok(Self {
            config,
            params,
            codebook,
            encoder,
            to_latent,
            from_latent,
            decoder,
            to_image,
        })
    }

    pub fn config(&self) -> &DiscretizerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn codebook(&self) -> &Codebook<T> {
        &self.codebook
    }

    /// Checksum over encoder, decoder and codebook.
    pub fn checksum(&self) -> u64 {
        let mut all = self.params.clone();
        all.add("codebook", self.codebook.entries().clone());
        all.checksum()
    }

    pub fn cast<U: Scalar>(&self) -> Discretizer<U> {
        Discretizer {
            config: self.config.clone(),
            params: self.params.cast(),
            codebook: self.codebook.cast(),
            encoder: self.encoder.clone(),
            to_latent: self.to_latent,
            from_latent: self.from_latent,
            decoder: self.decoder.clone(),
            to_image: self.to_image,
        }
    }

    /// Latent grid `(h, w)` for an `H×W` input.
    pub fn latent_grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let f = self.config.factor;
        if height % f != 0 || width % f != 0 {
            let pad_h = (f - height % f) % f;
            let pad_w = (f - width % f) % f;
            return Err(invalid(
                "encode",
                format!(
                    "{height}×{width} is not divisible by the downsampling factor {f}; \
                     pad height by {pad_h} and width by {pad_w}"
                ),
            ));
        }
        Ok((height / f, width / f))
    }

    fn check_image(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4("encode")?;
        if c != self.config.channels {
            return Err(invalid(
                "encode",
                format!("expected {} channels, got {c}", self.config.channels),
            ));
        }
        self.latent_grid(h, w)?;
        if !x.all_finite() {
            return Err(DatError::NonFinite("encode input"));
        }
        Ok(())
    }

    /// Encoder on a graph: `[N,C,H,W]` → latents `[N,h,w,d]`.
    pub fn encode_graph(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for conv in &self.encoder {
            let y = conv.forward(g, p, h)?;
            h = g.relu(y);
        }
        let z = self.to_latent.forward(g, p, h)?;
        Ok(g.permute(z, [0, 2, 3, 1])?)
    }

    /// Decoder on a graph: `[N,h,w,d]` → image `[N,C,H,W]` clamped to `[0, 1]`.
    pub fn decode_graph(&self, g: &mut Graph<T>, p: &Bound, latents: Var) -> Result<Var> {
        let z = g.permute(latents, [0, 3, 1, 2])?;
        let y = self.from_latent.forward(g, p, z)?;
        let mut h = g.relu(y);
        for conv in &self.decoder {
            let u = g.upsample_nearest(h, 2)?;
            let y = conv.forward(g, p, u)?;
            h = g.relu(y);
        }
        let u = g.upsample_nearest(h, 2)?;
        let out = self.to_image.forward(g, p, u)?;
        Ok(g.clamp(out, T::zero(), T::one())?)
    }

    /// Full pipeline on a graph with the quantizer bridged by a straight-through estimator.
    ///
    /// When `table` is given, quantized vectors are looked up from it so that
    /// codebook gradients flow; otherwise they enter as constants.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        table: Option<Var>,
        x: Var,
    ) -> Result<DiscretizerTrace> {
        let latents = self.encode_graph(g, p, x)?;
        let q = self.codebook.quantize(g.value(latents))?;
        let quantized = match table {
            Some(t) => lookup_on_graph(g, t, &q.indices, &q.index_shape)?,
            None => g.constant(q.quantized),
        };
        let bridged = g.straight_through(latents, quantized)?;
        let reconstruction = self.decode_graph(g, p, bridged)?;
        Ok(DiscretizerTrace {
            latents,
            quantized,
            reconstruction,
            indices: q.indices,
            index_shape: q.index_shape,
        })
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(x)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let v = self.encode_graph(&mut g, &p, xv)?;
        Ok(g.value(v).clone())
    }

    pub fn decode(&self, quantized: &Tensor<T>) -> Result<Tensor<T>> {
        match quantized.shape() {
            &[_, _, _, d] if d == self.config.latent_dim => {}
            s => {
                return Err(invalid(
                    "decode",
                    format!(
                        "latent grid {s:?} must be [N, h, w, {}]",
                        self.config.latent_dim
                    ),
                ))
            }
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let v = g.constant(quantized.clone());
        let out = self.decode_graph(&mut g, &p, v)?;
        Ok(g.value(out).clone())
    }

    /// `decode(quantize(encode(x)))` with the index grid.
    pub fn discretize(&self, x: &Tensor<T>) -> Result<Discretized<T>> {
        let latents = self.encode(x)?;
        let q = self.codebook.quantize(&latents)?;
        let image = self.decode(&q.quantized)?;
        Ok(Discretized {
            image,
            indices: q.indices,
            index_shape: q.index_shape,
        })
    }

    /// Decodes an explicit index grid `[N, h, w]`.
    pub fn decode_indices(&self, indices: &[usize], index_shape: &[usize]) -> Result<Tensor<T>> {
        let q = self.codebook.lookup(indices, index_shape)?;
        self.decode(&q)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let c = &self.config;
        let meta = [
            c.channels,
            c.factor,
            c.latent_dim,
            c.codebook_size,
            c.hidden,
        ]
        .map(|v| v as f32);
        ck.insert(
            "discretizer.meta",
            &Tensor::new([5], meta.to_vec()).expect("5 values"),
        );
        self.params.write_to(&mut ck, "discretizer.");
        ck.insert("discretizer.codebook", self.codebook.entries());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = ck.require("discretizer.meta")?;
        let m: Vec<usize> = meta.data().iter().map(|&v| v as usize).collect();
        if m.len() != 5 {
            return Err(invalid("checkpoint", "discretizer.meta must hold 5 values"));
        }
        let config = DiscretizerConfig {
            channels: m[0],
            factor: m[1],
            latent_dim: m[2],
            codebook_size: m[3],
            hidden: m[4],
        };
        let mut model = Self::new(config, 0)?;
        model.params.read_from(ck, "discretizer.")?;
        model
            .codebook
            .set_entries(ck.require("discretizer.codebook")?.cast())?;
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscretizerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub commitment_weight: f64,
    pub seed: u64,
    /// Re-seed entries unused for a whole epoch from encoder outputs of the last batch.
    pub reseed_dead_entries: bool,
}

impl Default for DiscretizerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 64,
            learning_rate: 2e-3,
            commitment_weight: 0.25,
            seed: 0,
            reseed_dead_entries: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscretizerEpochMetrics {
    pub epoch: usize,
    /// Mean training reconstruction MSE over the epoch.
    pub reconstruction_mse: f64,
    pub codebook_loss: f64,
    pub commitment_loss: f64,
    /// Fraction of entries selected at least once during the epoch.
    pub codebook_usage: f64,
    pub reseeded_entries: usize,
}

/// Mean squared reconstruction error and usage fraction of `discretize` over a dataset.
pub fn reconstruction_report(
    model: &Discretizer<f32>,
    data: &Dataset,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let mut sq = 0.0;
    let mut count = 0usize;
    let mut counts = vec![0; model.codebook().size()];
    for idx in data.eval_batches(batch_size) {
        let (x, _) = data.batch(&idx)?;
        let d = model.discretize(&x)?;
        sq += d
            .image
            .data()
            .iter()
            .zip(x.data())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>();
        count += x.len();
        for (c, h) in counts
            .iter_mut()
            .zip(usage_histogram(&d.indices, model.codebook().size())?)
        {
            *c += h;
        }
    }
    Ok((sq / count as f64, usage_fraction(&counts)))
}

/// Trains a discretizer; `on_epoch` sees each finished epoch (e.g. to checkpoint it).
pub fn train_discretizer(
    train: &Dataset,
    config: &DiscretizerConfig,
    tcfg: &DiscretizerTrainConfig,
    mut on_epoch: impl FnMut(&DiscretizerEpochMetrics, &Discretizer<f32>) -> Result<()>,
) -> Result<(Discretizer<f32>, Vec<DiscretizerEpochMetrics>)> {
    let (c, ..) = train.image_shape();
    if c != config.channels {
        return Err(invalid(
            "train_discretizer",
            format!(
                "dataset has {c} channels, model expects {}",
                config.channels
            ),
        ));
    }
    if tcfg.batch_size < 1 || tcfg.batch_size > train.len() {
        return Err(invalid(
            "train_discretizer",
            "batch size must be in 1..=dataset size",
        ));
    }
    let mut model = Discretizer::<f32>::new(config.clone(), tcfg.seed)?;
    // The codebook is optimized as one extra parameter tensor after the conv weights.
    let mut opt_params = model.params.clone();
    let table_id = opt_params.add("codebook", model.codebook.entries().clone());
    let mut opt = Adam::new(&opt_params, tcfg.learning_rate as f32);
    let beta = tcfg.commitment_weight as f32;
    let k = config.codebook_size;
    let mut history = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        let mut sums = [0.0f64; 3];
        let mut counts = vec![0usize; k];
        let mut last_latents: Option<Tensor<f32>> = None;
        let batches = train.train_batches(tcfg.batch_size, tcfg.seed, epoch);
        for idx in &batches {
            let (x, _) = train.batch(idx)?;
            let mut g = Graph::new();
            let bound = opt_params.bind(&mut g, true);
            let table = *bound.vars().last().expect("codebook bound last");
            let xv = g.constant(x);
            let trace = model.forward_graph(&mut g, &bound, Some(table), xv)?;
            let recon = g.mse(trace.reconstruction, xv)?;
            let vq = vq_losses(&mut g, trace.latents, trace.quantized)?;
            let commit = g.scale(vq.commitment, beta);
            let partial = g.add(recon, vq.codebook)?;
            let loss = g.add(partial, commit)?;
            let loss_value = g.value(loss).item();
            if !loss_value.is_finite() {
                return Err(DatError::NonFinite("discretizer training loss"));
            }
            sums[0] += g.value(recon).item() as f64;
            sums[1] += g.value(vq.codebook).item() as f64;
            sums[2] += g.value(vq.commitment).item() as f64;
            for &i in &trace.indices {
                counts[i] += 1;
            }
            g.backward(loss)?;
            let grads = opt_params.grads(&g, &bound);
            last_latents = Some(g.value(trace.latents).clone());
            opt.step(&mut opt_params, &grads)?;
            sync_from_opt(&mut model, &opt_params, table_id)?;
        }
        let mut reseeded = 0;
        if tcfg.reseed_dead_entries {
            if let Some(lat) = &last_latents {
                let d = config.latent_dim;
                let n_vec = lat.len() / d;
                let mut r = rng::stream(tcfg.seed, labels::CODEBOOK_RESEED, epoch as u64);
                for entry in 0..k {
                    if counts[entry] == 0 {
                        let pick = rand::Rng::random_range(&mut r, 0..n_vec);
                        let v = lat.data()[pick * d..(pick + 1) * d].to_vec();
                        let table = opt_params.get_mut(table_id);
                        table.data_mut()[entry * d..(entry + 1) * d].copy_from_slice(&v);
                        reseeded += 1;
                    }
                }
                if reseeded > 0 {
                    opt.reset_moments(table_id);
                    sync_from_opt(&mut model, &opt_params, table_id)?;
                }
            }
        }
        let nb = batches.len().max(1) as f64;
        let m = DiscretizerEpochMetrics {
            epoch,
            reconstruction_mse: sums[0] / nb,
            codebook_loss: sums[1] / nb,
            commitment_loss: sums[2] / nb,
            codebook_usage: usage_fraction(&counts),
            reseeded_entries: reseeded,
        };
        on_epoch(&m, &model)?;
        history.push(m);
    }
    Ok((model, history))
}

fn sync_from_opt(
    model: &mut Discretizer<f32>,
    opt_params: &ParamSet<f32>,
    table_id: crate::nn::ParamId,
) -> Result<()> {
    for (dst, src) in model.params.tensors_mut().zip(opt_params.tensors()) {
        dst.data_mut().copy_from_slice(src.data());
    }
    model.codebook.set_entries(opt_params.get(table_id).clone())
}
