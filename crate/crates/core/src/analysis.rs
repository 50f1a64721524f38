//! Mechanistic measurements: BN-statistic correlation between clean and
//! adversarial batches, colour counts, radial spectra and gradient alignment.

use std::collections::HashSet;

use dat_tensor::Tensor;
use rand::seq::index::sample;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::classifier::AttackTarget;
use crate::classifier::Classifier;
use crate::data::Dataset;
use crate::discretizer::Discretizer;
use crate::error::{invalid, Result};
use crate::rng::{self, labels};
use crate::trainer::{dat_example, full_backward_gradient, pgd_attack, PerturbationSpec};

/// Pearson correlation of two equal-length vectors.
pub fn pcc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(invalid(
            "pcc",
            format!("need equal lengths ≥ 2, got {} and {}", a.len(), b.len()),
        ));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(invalid(
            "pcc",
            "correlation is undefined for a constant vector",
        ));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Cosine similarity of two same-shape tensors.
pub fn gradient_alignment(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(invalid(
            "gradient_alignment",
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(invalid(
            "gradient_alignment",
            "cosine is undefined for a zero vector",
        ));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Number of distinct colours after quantizing each channel to `levels` steps.
/// `image` is `[C, H, W]` (or `[H, W]` for grey).
pub fn color_count(image: &Tensor<f32>, levels: usize) -> Result<usize> {
    let (c, hw) = match image.shape() {
        &[c, h, w] => (c, h * w),
        &[h, w] => (1, h * w),
        s => {
            return Err(invalid(
                "color_count",
                format!("expected [C, H, W] or [H, W], got {s:?}"),
            ))
        }
    };
    let top = (levels.max(2) - 1) as f32;
    let q = |v: f32| (v.clamp(0.0, 1.0) * top).round() as u16;
    let d = image.data();
    let mut seen = HashSet::with_capacity(hw);
    for p in 0..hw {
        let key: Vec<u16> = (0..c).map(|ch| q(d[ch * hw + p])).collect();
        seen.insert(key);
    }
    Ok(seen.len())
}

/// Spectral energy of a square image `[C, H, W]` or `[H, W]` binned by radial
/// frequency into `n_bands` equal-width rings (the last ring reaches the
/// corner frequency). Normalized so the bands sum to `Σ x²` (Parseval).
pub fn radial_frequency_profile(image: &Tensor<f64>, n_bands: usize) -> Result<Vec<f64>> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        &[h, w] => (1, h, w),
        s => {
            return Err(invalid(
                "radial_frequency_profile",
                format!("expected [C, H, W] or [H, W], got {s:?}"),
            ))
        }
    };
    if h != w {
        return Err(invalid(
            "radial_frequency_profile",
            format!("image must be square, got {h}×{w}"),
        ));
    }
    if n_bands == 0 {
        return Err(invalid(
            "radial_frequency_profile",
            "need at least one band",
        ));
    }
    let n = h;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let freq = |k: usize| {
        if k <= n / 2 {
            k as f64
        } else {
            k as f64 - n as f64
        }
    };
    let rmax = (2.0f64).sqrt() * (n / 2) as f64;
    let mut bands = vec![0.0; n_bands];
    for ch in 0..c {
        let plane = &image.data()[ch * n * n..(ch + 1) * n * n];
        let mut buf: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
        for row in buf.chunks_exact_mut(n) {
            fft.process(row);
        }
        let mut col = vec![Complex::new(0.0, 0.0); n];
        for x in 0..n {
            for y in 0..n {
                col[y] = buf[y * n + x];
            }
            fft.process(&mut col);
            for y in 0..n {
                buf[y * n + x] = col[y];
            }
        }
        for y in 0..n {
            for x in 0..n {
                let r = (freq(y).powi(2) + freq(x).powi(2)).sqrt();
                let b = if rmax == 0.0 {
                    0
                } else {
                    ((r / rmax * n_bands as f64) as usize).min(n_bands - 1)
                };
                bands[b] += buf[y * n + x].norm_sqr() / (n * n) as f64;
            }
        }
    }
    Ok(bands)
}

/// How adversarial batches are produced for the BN comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum Regime {
    PixelAt {
        epsilon: f64,
        steps: usize,
        step_size: f64,
    },
    Dat(PerturbationSpec),
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::PixelAt { .. } => "pixel_at",
            Regime::Dat(_) => "dat",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PccHistogram {
    pub regime: String,
    /// `bins + 1` edges over `[−1, 1]`.
    pub edges: Vec<f64>,
    pub mean_counts: Vec<usize>,
    pub var_counts: Vec<usize>,
    pub mean_pcc: Vec<f64>,
    pub var_pcc: Vec<f64>,
    pub n_batches: usize,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl PccHistogram {
    fn from_values(regime: &str, mean_pcc: Vec<f64>, var_pcc: Vec<f64>, bins: usize) -> Self {
        let edges: Vec<f64> = (0..=bins)
            .map(|i| -1.0 + 2.0 * i as f64 / bins as f64)
            .collect();
        let count = |vals: &[f64]| {
            let mut c = vec![0usize; bins];
            for &v in vals {
                let b = (((v + 1.0) / 2.0 * bins as f64) as usize).min(bins - 1);
                c[b] += 1;
            }
            c
        };
        Self {
            regime: regime.to_string(),
            edges,
            mean_counts: count(&mean_pcc),
            var_counts: count(&var_pcc),
            n_batches: mean_pcc.len(),
            mean_pcc,
            var_pcc,
        }
    }

    pub fn median_mean_pcc(&self) -> f64 {
        median(&self.mean_pcc)
    }

    pub fn median_var_pcc(&self) -> f64 {
        median(&self.var_pcc)
    }

    /// `bin_lo,bin_hi,mean_count,var_count` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("regime,bin_lo,bin_hi,mean_count,var_count\n");
        for i in 0..self.mean_counts.len() {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                self.regime,
                self.edges[i],
                self.edges[i + 1],
                self.mean_counts[i],
                self.var_counts[i]
            ));
        }
        s
    }
}

/// Batch `b` of the analysis: `batch_size` distinct examples drawn from stream `(seed, analysis, b)`.
pub fn analysis_batch(
    data: &Dataset,
    batch_size: usize,
    seed: u64,
    b: usize,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    let n = batch_size.min(data.len());
    let idx = sample(
        &mut rng::stream(seed, labels::ANALYSIS, b as u64),
        data.len(),
        n,
    )
    .into_vec();
    data.batch(&idx)
}

/// Builds the adversarial counterpart of a clean batch under `regime`.
pub fn adversarial_batch(
    model: &Classifier<f32>,
    disc: Option<&Discretizer<f32>>,
    regime: &Regime,
    x: &Tensor<f32>,
    y: &[usize],
) -> Result<Tensor<f32>> {
    match regime {
        Regime::PixelAt {
            epsilon,
            steps,
            step_size,
        } => pgd_attack(model, x, y, *epsilon, *steps, *step_size),
        Regime::Dat(spec) => {
            let d =
                disc.ok_or_else(|| invalid("analysis", "the dat regime needs a discretizer"))?;
            let x_hat = d.discretize(x)?;
            Ok(dat_example(model, d, x, &x_hat, y, spec)?.x_adv)
        }
    }
}

/// For each of `n_batches` seeded batches, the PCC between the last-BN batch
/// statistics of the clean batch and of its adversarial counterpart, for
/// means and variances separately. Nothing in the model is modified.
#[allow(clippy::too_many_arguments)]
pub fn bn_pcc_histogram(
    model: &Classifier<f32>,
    disc: Option<&Discretizer<f32>>,
    data: &Dataset,
    regimes: &[Regime],
    n_batches: usize,
    batch_size: usize,
    seed: u64,
    bins: usize,
) -> Result<Vec<PccHistogram>> {
    if n_batches < 2 || bins == 0 {
        return Err(invalid(
            "bn_pcc_histogram",
            "need at least 2 batches and 1 bin",
        ));
    }
    let as64 = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    let mut values =
        vec![(Vec::with_capacity(n_batches), Vec::with_capacity(n_batches)); regimes.len()];
    for b in 0..n_batches {
        let (x, y) = analysis_batch(data, batch_size, seed, b)?;
        let (cm, cv) = model.last_bn_statistics(&x)?;
        for (regime, (mv, vv)) in regimes.iter().zip(values.iter_mut()) {
            let adv = adversarial_batch(model, disc, regime, &x, &y)?;
            let (am, av) = model.last_bn_statistics(&adv)?;
            mv.push(pcc(&as64(&cm), &as64(&am))?);
            vv.push(pcc(&as64(&cv), &as64(&av))?);
        }
    }
    Ok(regimes
        .iter()
        .zip(values)
        .map(|(r, (m, v))| PccHistogram::from_values(r.name(), m, v, bins))
        .collect())
}

/// Per-image colour and spectrum comparison of DAT and FGSM examples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealismReport {
    pub n_images: usize,
    pub colors_clean: f64,
    pub colors_dat: f64,
    pub colors_fgsm: f64,
    /// Mean over images of `|colors(adv) − colors(clean)|`.
    pub color_delta_dat: f64,
    pub color_delta_fgsm: f64,
    /// Mean energy of `x_adv − x` in the top third of radial frequencies.
    pub high_freq_dat: f64,
    pub high_freq_fgsm: f64,
    /// Same, for `x_adv − Q(x)`: the part of the DAT change caused by `δ` alone.
    pub high_freq_dat_token_change: f64,
    /// Mean radial energy profile of each perturbation, `profile_bands` bands.
    pub profile_dat: Vec<f64>,
    pub profile_fgsm: Vec<f64>,
}

impl RealismReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("band,dat_energy,fgsm_energy\n");
        for (i, (d, f)) in self.profile_dat.iter().zip(&self.profile_fgsm).enumerate() {
            s.push_str(&format!("{i},{d},{f}\n"));
        }
        s
    }
}

/// Radial profile of a `[C,H,W]` difference image, summed over channels.
fn channel_profile(
    diff: &[f32],
    (c, h, w): (usize, usize, usize),
    bands: usize,
) -> Result<Vec<f64>> {
    let mut total = vec![0.0; bands];
    for ch in diff.chunks(h * w).take(c) {
        let t = Tensor::new([h, w], ch.iter().map(|&v| v as f64).collect())?;
        for (acc, e) in total.iter_mut().zip(radial_frequency_profile(&t, bands)?) {
            *acc += e;
        }
    }
    Ok(total)
}

fn diff(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Compares DAT examples (under `spec`) and FGSM examples of radius `epsilon`
/// on the first `n_images` images of `data`.
pub fn realism_report(
    model: &Classifier<f32>,
    disc: &Discretizer<f32>,
    data: &Dataset,
    n_images: usize,
    spec: &PerturbationSpec,
    epsilon: f64,
    profile_bands: usize,
) -> Result<RealismReport> {
    let n = n_images.min(data.len());
    if n == 0 || profile_bands < 3 {
        return Err(invalid(
            "realism_report",
            "need at least one image and three bands",
        ));
    }
    let dims = data.image_shape();
    let per = dims.0 * dims.1 * dims.2;
    let mut r = RealismReport {
        n_images: n,
        colors_clean: 0.0,
        colors_dat: 0.0,
        colors_fgsm: 0.0,
        color_delta_dat: 0.0,
        color_delta_fgsm: 0.0,
        high_freq_dat: 0.0,
        high_freq_fgsm: 0.0,
        high_freq_dat_token_change: 0.0,
        profile_dat: vec![0.0; profile_bands],
        profile_fgsm: vec![0.0; profile_bands],
    };
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(50) {
        let (x, y) = data.batch(chunk)?;
        let x_hat = disc.discretize(&x)?;
        let dat = dat_example(model, disc, &x, &x_hat, &y, spec)?.x_adv;
        let fgsm = pgd_attack(model, &x, &y, epsilon, 1, epsilon)?;
        for i in 0..chunk.len() {
            let s = i * per..(i + 1) * per;
            let img = |t: &Tensor<f32>| {
                Tensor::new([dims.0, dims.1, dims.2], t.data()[s.clone()].to_vec())
            };
            let clean = color_count(&img(&x)?, 256)? as f64;
            let cd = color_count(&img(&dat)?, 256)? as f64;
            let cf = color_count(&img(&fgsm)?, 256)? as f64;
            r.colors_clean += clean;
            r.colors_dat += cd;
            r.colors_fgsm += cf;
            r.color_delta_dat += (cd - clean).abs();
            r.color_delta_fgsm += (cf - clean).abs();

            let third = |p: &[f64]| {
                let (lo, hi) = (2 * p.len() / 3, p.len());
                p[lo..hi].iter().sum::<f64>()
            };
            let x_s = &x.data()[s.clone()];
            let pd = channel_profile(&diff(&dat.data()[s.clone()], x_s), dims, profile_bands)?;
            let pf = channel_profile(&diff(&fgsm.data()[s.clone()], x_s), dims, profile_bands)?;
            let pt = channel_profile(
                &diff(&dat.data()[s.clone()], &x_hat.image.data()[s.clone()]),
                dims,
                profile_bands,
            )?;
            r.high_freq_dat += third(&pd);
            r.high_freq_fgsm += third(&pf);
            r.high_freq_dat_token_change += third(&pt);
            for (acc, v) in r.profile_dat.iter_mut().zip(&pd) {
                *acc += v;
            }
            for (acc, v) in r.profile_fgsm.iter_mut().zip(&pf) {
                *acc += v;
            }
        }
    }
    let nf = n as f64;
    for v in [
        &mut r.colors_clean,
        &mut r.colors_dat,
        &mut r.colors_fgsm,
        &mut r.color_delta_dat,
        &mut r.color_delta_fgsm,
        &mut r.high_freq_dat,
        &mut r.high_freq_fgsm,
        &mut r.high_freq_dat_token_change,
    ] {
        *v /= nf;
    }
    r.profile_dat
        .iter_mut()
        .chain(r.profile_fgsm.iter_mut())
        .for_each(|v| *v /= nf);
    Ok(r)
}

/// Cosine similarity between the straight-through and full-backward input
/// gradients, one value per seeded batch.
pub fn straight_through_alignment(
    model: &Classifier<f32>,
    disc: &Discretizer<f32>,
    data: &Dataset,
    n_batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    (0..n_batches)
        .map(|b| {
            let (x, y) = analysis_batch(data, batch_size, seed, b)?;
            let x_hat = disc.discretize(&x)?;
            let (_, st) = model.loss_and_input_grad(&x_hat.image, &y)?;
            let full = full_backward_gradient(model, disc, &x, &y)?;
            gradient_alignment(&st, &full)
        })
        .collect()
}

/// Modified-token fraction of DAT examples for each `alpha` (other settings
/// from `spec`): one row per seeded batch, one column per alpha.
#[allow(clippy::too_many_arguments)]
pub fn modified_fraction_sweep(
    model: &Classifier<f32>,
    disc: &Discretizer<f32>,
    data: &Dataset,
    spec: &PerturbationSpec,
    alphas: &[f64],
    n_batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    (0..n_batches)
        .map(|b| {
            let (x, y) = analysis_batch(data, batch_size, seed, b)?;
            let x_hat = disc.discretize(&x)?;
            alphas
                .iter()
                .map(|&alpha| {
                    let s = PerturbationSpec { alpha, ..*spec };
                    Ok(dat_example(model, disc, &x, &x_hat, &y, &s)?.modified_fraction)
                })
                .collect()
        })
        .collect()
}

/// Column means of a row-major table.
pub fn column_means(rows: &[Vec<f64>]) -> Vec<f64> {
    let cols = rows.first().map_or(0, Vec::len);
    (0..cols)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcc_examples() {
        let x = [0.3, -1.2, 2.5, 0.0, 4.1];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pcc(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((pcc(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!(pcc(&x, &[1.0; 5]).is_err());
        assert!(pcc(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn alignment_examples() {
        let a = Tensor::new([3], vec![1.0f32, -2.0, 0.5]).unwrap();
        assert!((gradient_alignment(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((gradient_alignment(&a, &a.scale(-1.0)).unwrap() + 1.0).abs() < 1e-12);
        assert!(gradient_alignment(&a, &Tensor::zeros([3])).is_err());
    }

    #[test]
    fn color_count_examples() {
        assert_eq!(color_count(&Tensor::full([3, 4, 4], 0.2), 256).unwrap(), 1);
        let checker: Vec<f32> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f32).collect();
        assert_eq!(
            color_count(&Tensor::new([4, 4], checker).unwrap(), 256).unwrap(),
            2
        );
    }

    #[test]
    fn constant_image_energy_is_all_in_band_zero() {
        let bands = radial_frequency_profile(&Tensor::full([8, 8], 0.5), 4).unwrap();
        assert!((bands[0] - 64.0 * 0.25).abs() < 1e-9);
        assert!(bands[1..].iter().all(|&e| e.abs() < 1e-9));
        assert!(radial_frequency_profile(&Tensor::zeros([4, 6]), 3).is_err());
    }

    #[test]
    fn histogram_counts_sum_to_batches() {
        let h = PccHistogram::from_values(
            "x",
            vec![1.0, -1.0, 0.95, 0.2],
            vec![0.0, 0.5, 0.5, 0.999],
            20,
        );
        assert_eq!(h.mean_counts.iter().sum::<usize>(), 4);
        assert_eq!(h.var_counts.iter().sum::<usize>(), 4);
        assert_eq!(h.mean_counts[19], 2);
        assert_eq!(h.mean_counts[0], 1);
        assert!((h.median_mean_pcc() - 0.575).abs() < 1e-12);
    }
}
