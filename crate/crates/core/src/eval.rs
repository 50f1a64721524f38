//! Clean accuracy, FGSM robustness, a seeded corruption suite and
//! inference through the discretizer.

use std::fmt;
use std::str::FromStr;

use dat_tensor::{Scalar, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::classifier::{AttackTarget, Classifier};
use crate::data::Dataset;
use crate::discretizer::Discretizer;
use crate::error::{invalid, DatError, Result};
use crate::rng::{self, content_hash, labels};

/// `clamp(x + ε·sign(∇ₓL), 0, 1)`.
pub fn fgsm_attack<T: Scalar, M: AttackTarget<T>>(
    model: &M,
    x: &Tensor<T>,
    labels: &[usize],
    epsilon: f64,
) -> Result<Tensor<T>> {
    if !(epsilon >= 0.0) {
        return Err(invalid(
            "fgsm_attack",
            format!("epsilon must be ≥ 0, got {epsilon}"),
        ));
    }
    let (_, grad) = model.loss_and_input_grad(x, labels)?;
    let e = T::from_f64_lossy(epsilon);
    Ok(x.add(&grad.sign().scale(e))?.clamp(T::zero(), T::one()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    GaussianBlur,
    Contrast,
    Brightness,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 7] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
        CorruptionKind::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    /// Severity parameters 1..=5. Changing any value changes every corrupted
    /// image, so treat this table as versioned data.
    pub fn table(self) -> [f64; 5] {
        match self {
            // Noise standard deviation.
            CorruptionKind::GaussianNoise => [0.04, 0.06, 0.08, 0.09, 0.10],
            // Photon count scale: x ← Poisson(x·c)/c.
            CorruptionKind::ShotNoise => [500.0, 250.0, 100.0, 75.0, 50.0],
            // Salt-and-pepper probability per value.
            CorruptionKind::ImpulseNoise => [0.01, 0.02, 0.03, 0.05, 0.07],
            // Blur σ in pixels.
            CorruptionKind::GaussianBlur => [0.4, 0.6, 0.7, 0.8, 1.0],
            // Contrast factor around the image mean.
            CorruptionKind::Contrast => [0.75, 0.5, 0.4, 0.3, 0.15],
            // Additive offset.
            CorruptionKind::Brightness => [0.05, 0.1, 0.15, 0.2, 0.3],
            // Relative side of the downsampled image.
            CorruptionKind::Pixelate => [0.95, 0.9, 0.85, 0.75, 0.65],
        }
    }

    fn id(self) -> u8 {
        self as u8
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = DatError;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = CorruptionKind::ALL.iter().map(|k| k.name()).collect();
                invalid(
                    "corrupt",
                    format!("unknown corruption `{s}`; known: {}", known.join(", ")),
                )
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn parameter(&self) -> Result<f64> {
        if !(1..=5).contains(&self.severity) {
            return Err(invalid(
                "corrupt",
                format!("severity {} outside 1..=5", self.severity),
            ));
        }
        Ok(self.kind.table()[self.severity as usize - 1])
    }

    /// Every kind at every severity.
    pub fn full_suite(seed: u64) -> Vec<CorruptionSpec> {
        CorruptionKind::ALL
            .into_iter()
            .flat_map(|kind| {
                (1..=5).map(move |severity| CorruptionSpec {
                    kind,
                    severity,
                    seed,
                })
            })
            .collect()
    }
}

/// Corrupts each image of `[N, C, H, W]` in `[0, 1]`. Noise for an image is drawn
/// from a stream keyed by the spec and the image's own bytes, so results do
/// not depend on batch composition or order.
pub fn corrupt(x: &Tensor<f32>, spec: &CorruptionSpec) -> Result<Tensor<f32>> {
    let param = spec.parameter()?;
    let (n, c, h, w) = x.dims4("corrupt")?;
    let per = c * h * w;
    let mut out = Vec::with_capacity(x.len());
    for img in x.data().chunks_exact(per) {
        let key = content_hash(
            img.iter()
                .flat_map(|v| v.to_le_bytes())
                .chain([spec.kind.id(), spec.severity]),
        );
        let mut r = rng::stream(spec.seed, labels::CORRUPTION_NOISE, key);
        out.extend(apply_corruption(spec.kind, param, img, (c, h, w), &mut r));
    }
    Ok(Tensor::new([n, c, h, w], out)?)
}

/// One image `[C, H, W]` under an explicit parameter (outside the severity table).
pub fn apply_corruption<R: Rng>(
    kind: CorruptionKind,
    param: f64,
    img: &[f32],
    dims: (usize, usize, usize),
    r: &mut R,
) -> Vec<f32> {
    let clip = |v: f64| v.clamp(0.0, 1.0) as f32;
    let (c, h, w) = dims;
    match kind {
        CorruptionKind::GaussianNoise => {
            let normal = Normal::new(0.0, param).expect("finite std");
            img.iter()
                .map(|&v| clip(v as f64 + normal.sample(r)))
                .collect()
        }
        CorruptionKind::ShotNoise => img
            .iter()
            .map(|&v| {
                let lambda = v as f64 * param;
                if lambda <= 0.0 {
                    0.0
                } else {
                    clip(Poisson::new(lambda).expect("positive rate").sample(r) / param)
                }
            })
            .collect(),
        CorruptionKind::ImpulseNoise => img
            .iter()
            .map(|&v| {
                let u: f64 = r.random();
                if u < param / 2.0 {
                    0.0
                } else if u < param {
                    1.0
                } else {
                    v
                }
            })
            .collect(),
        CorruptionKind::GaussianBlur => gaussian_blur(img, c, h, w, param),
        CorruptionKind::Contrast => {
            let mean = img.iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64;
            img.iter()
                .map(|&v| clip((v as f64 - mean) * param + mean))
                .collect()
        }
        CorruptionKind::Brightness => img.iter().map(|&v| clip(v as f64 + param)).collect(),
        CorruptionKind::Pixelate => pixelate(img, c, h, w, param),
    }
}

fn gaussian_blur(img: &[f32], c: usize, h: usize, w: usize, sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let at = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut out = vec![0.0f32; img.len()];
    let mut tmp = vec![0.0f64; h * w];
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| {
                        kv * plane[y * w + at(x as isize + k as isize - radius, w)] as f64
                    })
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp[at(y as isize + k as isize - radius, h) * w + x])
                    .sum();
                out[ch * h * w + y * w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

/// Area-average down to `round(scale·H) × round(scale·W)`, then nearest-neighbour back up.
fn pixelate(img: &[f32], c: usize, h: usize, w: usize, scale: f64) -> Vec<f32> {
    let sh = ((h as f64 * scale).round() as usize).clamp(1, h);
    let sw = ((w as f64 * scale).round() as usize).clamp(1, w);
    // Weight of source cell `i` inside target cell `t` when n source cells map onto m target cells.
    let overlap = |t: usize, m: usize, n: usize| -> Vec<(usize, f64)> {
        let lo = t as f64 * n as f64 / m as f64;
        let hi = (t + 1) as f64 * n as f64 / m as f64;
        (lo.floor() as usize..(hi.ceil() as usize).min(n))
            .map(|i| (i, (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0)))
            .filter(|&(_, wgt)| wgt > 0.0)
            .collect()
    };
    let rows: Vec<_> = (0..sh).map(|t| overlap(t, sh, h)).collect();
    let cols: Vec<_> = (0..sw).map(|t| overlap(t, sw, w)).collect();
    let mut out = vec![0.0f32; img.len()];
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        let mut small = vec![0.0f64; sh * sw];
        for (ty, rw) in rows.iter().enumerate() {
            for (tx, cw) in cols.iter().enumerate() {
                let (mut s, mut a) = (0.0, 0.0);
                for &(y, wy) in rw {
                    for &(x, wx) in cw {
                        s += wy * wx * plane[y * w + x] as f64;
                        a += wy * wx;
                    }
                }
                small[ty * sw + tx] = s / a;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v = small[(y * sh / h) * sw + x * sw / w];
                out[ch * h * w + y * w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions<'a> {
    /// Replace every test input by `Q(x)` before the classifier.
    pub discretizer: Option<&'a Discretizer<f32>>,
    pub fgsm_epsilons: Vec<f64>,
    pub corruptions: Vec<CorruptionSpec>,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionResult {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clean_accuracy: f64,
    /// `(ε, accuracy)`.
    pub fgsm: Vec<(f64, f64)>,
    pub corruptions: Vec<CorruptionResult>,
    pub with_discretizer: bool,
}

impl EvalReport {
    /// Mean accuracy over all corruption kinds and severities.
    pub fn corruption_accuracy(&self) -> Option<f64> {
        if self.corruptions.is_empty() {
            return None;
        }
        Some(
            self.corruptions.iter().map(|c| c.accuracy).sum::<f64>()
                / self.corruptions.len() as f64,
        )
    }

    /// Flat metric names for records.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let mut out = vec![("clean_accuracy".to_string(), self.clean_accuracy)];
        for (e, a) in &self.fgsm {
            out.push((format!("fgsm_{:.0}_255_accuracy", e * 255.0), *a));
        }
        for c in &self.corruptions {
            out.push((format!("{}_{}_accuracy", c.kind, c.severity), c.accuracy));
        }
        if let Some(a) = self.corruption_accuracy() {
            out.push(("corruption_accuracy".into(), a));
        }
        out
    }
}

/// Mean over kinds and severities of `err_model / err_baseline`.
pub fn relative_corruption_error(model: &EvalReport, baseline: &EvalReport) -> Result<f64> {
    if baseline.corruptions.is_empty() {
        return Err(invalid("rce", "baseline report has no corruption results"));
    }
    if model.corruptions.len() != baseline.corruptions.len() {
        return Err(invalid(
            "rce",
            "model and baseline were evaluated on different corruption sets",
        ));
    }
    let mut sum = 0.0;
    for (m, b) in model.corruptions.iter().zip(&baseline.corruptions) {
        if (m.kind, m.severity) != (b.kind, b.severity) {
            return Err(invalid(
                "rce",
                "model and baseline corruption lists are in different orders",
            ));
        }
        let eb = 1.0 - b.accuracy;
        if eb <= 0.0 {
            return Err(invalid(
                "rce",
                format!("baseline makes no errors on {} {}", b.kind, b.severity),
            ));
        }
        sum += (1.0 - m.accuracy) / eb;
    }
    Ok(sum / model.corruptions.len() as f64)
}

fn count_correct(model: &Classifier<f32>, x: &Tensor<f32>, y: &[usize]) -> Result<usize> {
    Ok(model
        .predict(x)?
        .iter()
        .zip(y)
        .filter(|(p, t)| p == t)
        .count())
}

/// Read-only evaluation. With a discretizer, FGSM takes its gradient at
/// `Q(x)` and copies it to `x` (straight-through), and the attacked or
/// corrupted image is discretized before classification.
pub fn evaluate(
    model: &Classifier<f32>,
    data: &Dataset,
    opts: &EvalOptions<'_>,
) -> Result<EvalReport> {
    let bs = if opts.batch_size == 0 {
        256
    } else {
        opts.batch_size
    };
    let prep = |x: &Tensor<f32>| -> Result<Tensor<f32>> {
        match opts.discretizer {
            Some(d) => Ok(d.discretize(x)?.image),
            None => Ok(x.clone()),
        }
    };
    let mut clean = 0usize;
    let mut fgsm = vec![0usize; opts.fgsm_epsilons.len()];
    let mut corr = vec![0usize; opts.corruptions.len()];
    for idx in data.eval_batches(bs) {
        let (x, y) = data.batch(&idx)?;
        let xq = prep(&x)?;
        clean += count_correct(model, &xq, &y)?;
        if !opts.fgsm_epsilons.is_empty() {
            let (_, grad) = model.loss_and_input_grad(&xq, &y)?;
            let sign = grad.sign();
            for (slot, &e) in fgsm.iter_mut().zip(&opts.fgsm_epsilons) {
                if !(e >= 0.0) {
                    return Err(invalid(
                        "evaluate",
                        format!("FGSM epsilon must be ≥ 0, got {e}"),
                    ));
                }
                let adv = x.add(&sign.scale(e as f32))?.clamp(0.0, 1.0);
                *slot += count_correct(model, &prep(&adv)?, &y)?;
            }
        }
        for (slot, spec) in corr.iter_mut().zip(&opts.corruptions) {
            let xc = corrupt(&x, spec)?;
            *slot += count_correct(model, &prep(&xc)?, &y)?;
        }
    }
    let n = data.len().max(1) as f64;
    Ok(EvalReport {
        clean_accuracy: clean as f64 / n,
        fgsm: opts
            .fgsm_epsilons
            .iter()
            .zip(&fgsm)
            .map(|(&e, &c)| (e, c as f64 / n))
            .collect(),
        corruptions: opts
            .corruptions
            .iter()
            .zip(&corr)
            .map(|(s, &c)| CorruptionResult {
                kind: s.kind,
                severity: s.severity,
                accuracy: c as f64 / n,
            })
            .collect(),
        with_discretizer: opts.discretizer.is_some(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64, n: usize, size: usize) -> Tensor<f32> {
        Tensor::uniform(
            [n, 3, size, size],
            0.0,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
    }

    #[test]
    fn zero_brightness_is_identity() {
        let x = image(1, 1, 8);
        let out = apply_corruption(
            CorruptionKind::Brightness,
            0.0,
            x.data(),
            (3, 8, 8),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert_eq!(out, x.data());
    }

    #[test]
    fn gaussian_noise_std_matches_table() {
        for severity in 1..=5u8 {
            let spec = CorruptionSpec {
                kind: CorruptionKind::GaussianNoise,
                severity,
                seed: 3,
            };
            let x = Tensor::full([1, 3, 128, 128], 0.5f32);
            let y = corrupt(&x, &spec).unwrap();
            let n = y.len() as f64;
            let diffs: Vec<f64> = y.data().iter().map(|&v| v as f64 - 0.5).collect();
            let mean = diffs.iter().sum::<f64>() / n;
            let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
            let want = spec.parameter().unwrap();
            assert!(
                (std - want).abs() / want < 0.05,
                "severity {severity}: {std} vs {want}"
            );
        }
    }

    #[test]
    fn corruptions_are_deterministic_and_in_range() {
        let x = image(2, 3, 16);
        for spec in CorruptionSpec::full_suite(9) {
            let a = corrupt(&x, &spec).unwrap();
            let b = corrupt(&x, &spec).unwrap();
            assert!(a.bitwise_eq(&b), "{spec:?}");
            assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            // Independent of batch composition.
            let single = corrupt(&x.slice_outer(1, 1).unwrap(), &spec).unwrap();
            assert!(single.bitwise_eq(&a.slice_outer(1, 1).unwrap()));
        }
    }

    #[test]
    fn severity_and_kind_are_validated() {
        let x = image(3, 1, 8);
        let bad = CorruptionSpec {
            kind: CorruptionKind::Contrast,
            severity: 6,
            seed: 0,
        };
        assert!(corrupt(&x, &bad).is_err());
        assert!("fog".parse::<CorruptionKind>().is_err());
        assert_eq!(
            "pixelate".parse::<CorruptionKind>().unwrap(),
            CorruptionKind::Pixelate
        );
    }

    #[test]
    fn pixelate_constant_blocks_and_blur_preserve_constants() {
        let x = Tensor::full([1, 3, 8, 8], 0.25f32);
        for kind in [
            CorruptionKind::Pixelate,
            CorruptionKind::GaussianBlur,
            CorruptionKind::Contrast,
        ] {
            let y = corrupt(
                &x,
                &CorruptionSpec {
                    kind,
                    severity: 5,
                    seed: 0,
                },
            )
            .unwrap();
            assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-6), "{kind}");
        }
        // Half-scale pixelation of a 4×4 ramp averages 2×2 blocks.
        let ramp: Vec<f32> = (0..16).map(|i| i as f32 / 16.0).collect();
        let out = pixelate(&ramp, 1, 4, 4, 0.5);
        let block = (0.0 + 1.0 + 4.0 + 5.0) / 64.0;
        assert!((out[0] - block).abs() < 1e-6 && (out[5] - block).abs() < 1e-6);
    }

    #[test]
    fn rce_against_self_is_one() {
        let r = EvalReport {
            clean_accuracy: 0.9,
            fgsm: vec![],
            corruptions: vec![
                CorruptionResult {
                    kind: CorruptionKind::Brightness,
                    severity: 1,
                    accuracy: 0.8,
                },
                CorruptionResult {
                    kind: CorruptionKind::Contrast,
                    severity: 2,
                    accuracy: 0.3,
                },
            ],
            with_discretizer: false,
        };
        assert_eq!(relative_corruption_error(&r, &r).unwrap(), 1.0);
        let empty = EvalReport {
            corruptions: vec![],
            ..r.clone()
        };
        assert!(relative_corruption_error(&r, &empty).is_err());
    }
}
