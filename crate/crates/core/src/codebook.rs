//! The vocabulary of visual words and nearest-entry quantization.

use dat_tensor::{Graph, Scalar, Tensor, Var};
use rand::Rng;

use crate::error::{invalid, DatError, Result};

/// `K` learnable `d`-dimensional entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    entries: Tensor<T>,
}

/// Output of [`Codebook::quantize`].
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized<T> {
    /// Same shape as the input latents; every `d`-vector is an entry of the codebook.
    pub quantized: Tensor<T>,
    /// One index per latent vector, row-major over the leading axes.
    pub indices: Vec<usize>,
    /// The leading axes of the latent tensor (`[h, w]` or `[N, h, w]`).
    pub index_shape: Vec<usize>,
}

impl<T: Scalar> Codebook<T> {
    pub fn new(entries: Tensor<T>) -> Result<Self> {
        match entries.shape() {
            &[k, d] if k >= 2 && d >= 1 => {}
            s => {
                return Err(invalid(
                    "codebook",
                    format!("entries must be [K ≥ 2, d ≥ 1], got {s:?}"),
                ))
            }
        }
        if !entries.all_finite() {
            return Err(DatError::NonFinite("codebook entries"));
        }
        Ok(Self { entries })
    }

    /// Entries drawn uniformly from `[−1/K, 1/K]`.
    pub fn init<R: Rng>(size: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if size < 2 || dim < 1 {
            return Err(invalid(
                "codebook",
                format!("need K ≥ 2 and d ≥ 1, got K={size}, d={dim}"),
            ));
        }
        let b = 1.0 / size as f64;
        Self::new(Tensor::uniform([size, dim], -b, b, rng))
    }

    pub fn size(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn entries(&self) -> &Tensor<T> {
        &self.entries
    }

    pub fn entry(&self, k: usize) -> &[T] {
        let d = self.dim();
        &self.entries.data()[k * d..(k + 1) * d]
    }

    /// Overwrites entry `k`.
    pub fn set_entry(&mut self, k: usize, value: &[T]) -> Result<()> {
        let d = self.dim();
        if k >= self.size() || value.len() != d {
            return Err(invalid(
                "codebook",
                format!("cannot write {} values into entry {k}", value.len()),
            ));
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(DatError::NonFinite("codebook entry"));
        }
        self.entries.data_mut()[k * d..(k + 1) * d].copy_from_slice(value);
        Ok(())
    }

    pub fn set_entries(&mut self, entries: Tensor<T>) -> Result<()> {
        if entries.shape() != self.entries.shape() {
            return Err(invalid(
                "codebook",
                "replacement entries change the codebook shape",
            ));
        }
        *self = Self::new(entries)?;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Codebook<U> {
        Codebook {
            entries: self.entries.cast(),
        }
    }

    /// Index of the entry at minimal squared Euclidean distance, lowest index on ties.
    pub fn nearest(&self, v: &[T]) -> (usize, T) {
        let d = self.dim();
        let mut best = (0, T::infinity());
        for (k, z) in self.entries.data().chunks_exact(d).enumerate() {
            let dist: T = v.iter().zip(z).map(|(&a, &b)| (a - b) * (a - b)).sum();
            if dist < best.1 {
                best = (k, dist);
            }
        }
        best
    }

    /// Replaces every trailing-axis vector by its nearest entry.
    pub fn quantize(&self, latents: &Tensor<T>) -> Result<Quantized<T>> {
        let shape = latents.shape();
        let d = self.dim();
        if shape.len() < 2 || *shape.last().unwrap_or(&0) != d {
            return Err(invalid(
                "quantize",
                format!("latents {shape:?} must end in the codebook dimension {d}"),
            ));
        }
        if !latents.all_finite() {
            return Err(DatError::NonFinite("quantize latents"));
        }
        let mut data = Vec::with_capacity(latents.len());
        let mut indices = Vec::with_capacity(latents.len() / d);
        for v in latents.data().chunks_exact(d) {
            let (k, _) = self.nearest(v);
            indices.push(k);
            data.extend_from_slice(self.entry(k));
        }
        Ok(Quantized {
            quantized: Tensor::new(shape.to_vec(), data)?,
            indices,
            index_shape: shape[..shape.len() - 1].to_vec(),
        })
    }

    /// Decodes an index grid back to entry vectors, shaped `[..index_shape, d]`.
    pub fn lookup(&self, indices: &[usize], index_shape: &[usize]) -> Result<Tensor<T>> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &k in indices {
            if k >= self.size() {
                return Err(invalid(
                    "lookup",
                    format!("index {k} outside [0, {})", self.size()),
                ));
            }
            data.extend_from_slice(self.entry(k));
        }
        let mut shape = index_shape.to_vec();
        shape.push(d);
        Ok(Tensor::new(shape, data)?)
    }
}

/// Records `table[indices]` reshaped to `[..index_shape, d]`, so gradients reach the entries.
pub fn lookup_on_graph<T: Scalar>(
    g: &mut Graph<T>,
    table: Var,
    indices: &[usize],
    index_shape: &[usize],
) -> Result<Var> {
    let rows = g.gather_rows(table, indices)?;
    let d = g.shape(table)[1];
    let mut shape = index_shape.to_vec();
    shape.push(d);
    Ok(g.reshape(rows, &shape)?)
}

/// The two quantization terms of the VQ objective.
#[derive(Clone, Copy, Debug)]
pub struct VqLosses {
    /// `mean((sg[latents] − quantized)²)`: moves codebook entries only.
    pub codebook: Var,
    /// `mean((latents − sg[quantized])²)`: moves the encoder only.
    pub commitment: Var,
}

pub fn vq_losses<T: Scalar>(g: &mut Graph<T>, latents: Var, quantized: Var) -> Result<VqLosses> {
    if g.shape(latents) != g.shape(quantized) {
        return Err(dat_tensor::TensorError::ShapeMismatch {
            op: "vq_losses",
            left: g.shape(latents).to_vec(),
            right: g.shape(quantized).to_vec(),
        }
        .into());
    }
    let sg_latents = g.stop_gradient(latents);
    let codebook = g.mse(sg_latents, quantized)?;
    let sg_quantized = g.stop_gradient(quantized);
    let commitment = g.mse(latents, sg_quantized)?;
    Ok(VqLosses {
        codebook,
        commitment,
    })
}

/// Per-entry counts of `indices`; they sum to `indices.len()`.
pub fn usage_histogram(indices: &[usize], size: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0; size];
    for &k in indices {
        if k >= size {
            return Err(invalid(
                "usage_histogram",
                format!("index {k} outside [0, {size})"),
            ));
        }
        counts[k] += 1;
    }
    Ok(counts)
}

/// Fraction of entries used at least once.
pub fn usage_fraction(counts: &[usize]) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    counts.iter().filter(|&&c| c > 0).count() as f64 / counts.len() as f64
}
