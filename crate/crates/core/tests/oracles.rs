use dat_core::analysis::{color_count, pcc, radial_frequency_profile};
use dat_core::classifier::{AttackTarget, Classifier, ClassifierConfig, LinearSoftmax};
use dat_core::codebook::Codebook;
use dat_core::discretizer::{Discretizer, DiscretizerConfig};
use dat_core::eval::fgsm_attack;
use dat_core::trainer::{
    compute_perturbation, dat_example, pgd_attack, project, random_word_perturbation, GradientMode,
    PNorm, PerturbationSpec,
};
use dat_tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Two classes, three features: `w1 − w0 = (1, −2, 0.5)`.
fn toy() -> LinearSoftmax<f64> {
    LinearSoftmax {
        weight: Tensor::new([2, 3], vec![0.5, 1.0, -0.25, 1.5, -1.0, 0.25]).unwrap(),
        bias: Tensor::new([2], vec![0.1, -0.3]).unwrap(),
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `∂/∂x` of the summed cross-entropy of the toy: `(p1 − [y = 1])·(w1 − w0)`.
fn toy_gradient(x: &[f64], labels: &[usize]) -> Vec<f64> {
    let dw = [1.0, -2.0, 0.5];
    let db = -0.4;
    let mut out = Vec::new();
    for (row, &y) in x.chunks(3).zip(labels) {
        let z = row.iter().zip(dw).map(|(a, b)| a * b).sum::<f64>() + db;
        let coef = sigmoid(z) - if y == 1 { 1.0 } else { 0.0 };
        out.extend(dw.iter().map(|w| coef * w));
    }
    out
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn linear_toy_gradient_and_perturbation_closed_form() {
    let x = Tensor::new([2, 3], vec![0.2, 0.7, 0.4, 0.9, 0.1, 0.6]).unwrap();
    let labels = [0, 1];
    let (_, grad) = toy().loss_and_input_grad(&x, &labels).unwrap();
    let expect = toy_gradient(x.data(), &labels);
    assert!(close(grad.data(), &expect, 1e-12));

    let raw = compute_perturbation(
        &toy(),
        &x,
        &labels,
        &PerturbationSpec {
            alpha: 0.1,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(close(
        raw.data(),
        &expect.iter().map(|g| 0.1 * g).collect::<Vec<_>>(),
        1e-12
    ));

    let sign = PerturbationSpec {
        alpha: 0.05,
        mode: GradientMode::Sign,
        ..Default::default()
    };
    let s = compute_perturbation(&toy(), &x, &labels, &sign).unwrap();
    assert!(close(
        s.data(),
        &expect.iter().map(|g| 0.05 * g.signum()).collect::<Vec<_>>(),
        0.0
    ));
}

#[test]
fn linear_toy_fgsm_and_pgd_closed_form() {
    let x = Tensor::new([2, 3], vec![0.2, 0.7, 0.995, 0.9, 0.001, 0.6]).unwrap();
    let labels = [0, 1];
    let eps = 4.0 / 255.0;
    let grad = toy_gradient(x.data(), &labels);
    let expect: Vec<f64> = x
        .data()
        .iter()
        .zip(&grad)
        .map(|(v, g)| (v + eps * g.signum()).clamp(0.0, 1.0))
        .collect();
    let adv = fgsm_attack(&toy(), &x, &labels, eps).unwrap();
    assert!(close(adv.data(), &expect, 1e-15));

    // The sign of a linear model's gradient never changes with x, so PGD
    // walks straight to the ball boundary.
    for (steps, step) in [(5, 1.0 / 255.0), (3, 1.0 / 255.0), (10, 2.0 / 255.0)] {
        let reach: f64 = (steps as f64 * step).min(eps);
        let expect: Vec<f64> = x
            .data()
            .iter()
            .zip(&grad)
            .map(|(v, g)| (v + reach * g.signum()).clamp(0.0, 1.0))
            .collect();
        let adv = pgd_attack(&toy(), &x, &labels, eps, steps, step).unwrap();
        assert!(close(adv.data(), &expect, 1e-12), "steps {steps}");
    }
}

#[test]
fn infinite_bound_equals_unbounded_bitwise() {
    let x = Tensor::new([2, 3], vec![0.2, 0.7, 0.4, 0.9, 0.1, 0.6]).unwrap();
    let free = PerturbationSpec {
        alpha: 3.0,
        ..Default::default()
    };
    let a = compute_perturbation(&toy(), &x, &[1, 0], &free).unwrap();
    for norm in [PNorm::Linf, PNorm::L2] {
        let bounded = PerturbationSpec {
            bound: Some((norm, f64::INFINITY)),
            ..free
        };
        let b = compute_perturbation(&toy(), &x, &[1, 0], &bounded).unwrap();
        assert!(a.bitwise_eq(&b));
    }
}

#[test]
fn projection_oracles() {
    let mut d = Tensor::new([2, 2], vec![3.0f64, -4.0, 0.3, 0.4]).unwrap();
    project(&mut d, PNorm::L2, 1.0);
    assert!(close(d.data(), &[0.6, -0.8, 0.3, 0.4], 1e-15));
    let mut d = Tensor::new([1, 3], vec![0.5f64, -0.05, -2.0]).unwrap();
    project(&mut d, PNorm::Linf, 0.1);
    assert_eq!(d.data(), &[0.1, -0.05, -0.1]);
}

#[test]
fn pcc_matches_direct_formula() {
    // Means 2.5 and 2.75; covariance sum 6.5; variance sums 5 and 8.75.
    let expect = 6.5 / (5.0f64 * 8.75).sqrt();
    let r = pcc(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 5.0]).unwrap();
    assert!((r - expect).abs() < 1e-15, "{r} vs {expect}");
}

proptest! {
    #[test]
    fn pcc_is_symmetric_and_bounded(a in proptest::collection::vec(-10.0f64..10.0, 2..40), seed in 0u64..1000) {
        let mut r = rng(seed);
        let b: Vec<f64> = a.iter().map(|v| v * 0.3 + rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
        prop_assume!(a.iter().any(|v| *v != a[0]) && b.iter().any(|v| *v != b[0]));
        let ab = pcc(&a, &b).unwrap();
        let ba = pcc(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&ab));
    }

    #[test]
    fn parseval_holds(seed in 0u64..10_000, n in prop_oneof![Just(8usize), Just(16), Just(15)], bands in 1usize..12) {
        let img = Tensor::<f64>::uniform([n, n], -1.0, 1.0, &mut rng(seed));
        let energy: f64 = img.data().iter().map(|v| v * v).sum();
        let total: f64 = radial_frequency_profile(&img, bands).unwrap().iter().sum();
        prop_assert!((total - energy).abs() <= 1e-6 * energy);
    }

    #[test]
    fn quantize_matches_exhaustive_scan(seed in 0u64..10_000, k in 2usize..40, d in 1usize..6, n in 1usize..30) {
        let mut r = rng(seed);
        let mut entries = Tensor::<f64>::normal([k, d], 1.0, &mut r);
        // Duplicate an entry to force ties.
        if k > 2 {
            let row = entries.data()[..d].to_vec();
            entries.data_mut()[(k - 1) * d..].copy_from_slice(&row);
        }
        let book = Codebook::new(entries.clone()).unwrap();
        let latents = Tensor::<f64>::normal([n, d], 1.0, &mut r);
        let q = book.quantize(&latents).unwrap();
        for (v, &got) in latents.data().chunks(d).zip(&q.indices) {
            let mut best = (usize::MAX, f64::INFINITY);
            for (j, e) in entries.data().chunks(d).enumerate() {
                let dist: f64 = v.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.1 {
                    best = (j, dist);
                }
            }
            prop_assert_eq!(got, best.0);
        }
    }
}

#[test]
fn spectrum_examples() {
    let constant = Tensor::<f64>::full([8, 8], 0.7);
    let p = radial_frequency_profile(&constant, 4).unwrap();
    assert!(p[0] > 0.0 && p[1..].iter().all(|&e| e.abs() < 1e-20));

    // cos(2π·3x/16) has energy only at horizontal frequency ±3: radius 3 of 11.3.
    let n = 16;
    let data: Vec<f64> = (0..n * n)
        .map(|i| (2.0 * std::f64::consts::PI * 3.0 * (i % n) as f64 / n as f64).cos())
        .collect();
    let p = radial_frequency_profile(&Tensor::new([n, n], data).unwrap(), 4).unwrap();
    let total: f64 = p.iter().sum();
    assert!(p[1] / total > 1.0 - 1e-9, "{p:?}");
    assert!(radial_frequency_profile(&Tensor::<f64>::zeros([4, 6]), 3).is_err());
}

#[test]
fn color_count_examples() {
    assert_eq!(
        color_count(&Tensor::full([3, 4, 4], 0.25f32), 256).unwrap(),
        1
    );
    let board: Vec<f32> = (0..3 * 16)
        .map(|i| ((i % 16) % 4 + (i % 16) / 4) as f32 % 2.0)
        .collect();
    assert_eq!(
        color_count(&Tensor::new([3, 4, 4], board).unwrap(), 256).unwrap(),
        2
    );
}

fn small_disc() -> Discretizer<f32> {
    Discretizer::new(
        DiscretizerConfig {
            channels: 3,
            factor: 4,
            latent_dim: 4,
            codebook_size: 16,
            hidden: 8,
        },
        3,
    )
    .unwrap()
}

fn small_classifier() -> Classifier<f32> {
    Classifier::new(
        ClassifierConfig {
            image_size: 32,
            width: 4,
            ..Default::default()
        },
        5,
    )
    .unwrap()
}

#[test]
fn random_word_replaces_exactly_the_requested_count() {
    let disc = small_disc();
    let x = Tensor::<f32>::uniform([3, 3, 32, 32], 0.0, 1.0, &mut rng(1));
    let x_hat = disc.discretize(&x).unwrap();
    assert_eq!(x_hat.index_shape, vec![3, 8, 8]);
    for (fraction, expect) in [(0.038, 2), (0.0, 0), (0.5, 32), (1.0, 64)] {
        let (image, idx) = random_word_perturbation(&disc, &x_hat, fraction, &mut rng(7)).unwrap();
        for (a, b) in idx.chunks(64).zip(x_hat.indices.chunks(64)) {
            assert_eq!(
                a.iter().zip(b).filter(|(p, q)| p != q).count(),
                expect,
                "fraction {fraction}"
            );
        }
        assert!(image.bitwise_eq(&disc.decode_indices(&idx, &x_hat.index_shape).unwrap()));
    }
    assert!(random_word_perturbation(&disc, &x_hat, 1.5, &mut rng(0)).is_err());
}

#[test]
fn zero_alpha_dat_example_is_the_clean_discretization() {
    let disc = small_disc();
    let model = small_classifier();
    let x = Tensor::<f32>::uniform([4, 3, 32, 32], 0.0, 1.0, &mut rng(2));
    let x_hat = disc.discretize(&x).unwrap();
    let spec = PerturbationSpec {
        alpha: 0.0,
        ..Default::default()
    };
    let ex = dat_example(&model, &disc, &x, &x_hat, &[0, 1, 2, 3], &spec).unwrap();
    assert!(ex.x_adv.bitwise_eq(&x_hat.image));
    assert_eq!(ex.modified_fraction, 0.0);
    assert!(ex.delta.data().iter().all(|&v| v == 0.0));
}

#[test]
fn larger_alpha_changes_more_tokens_on_a_toy_batch() {
    let disc = small_disc();
    let model = small_classifier();
    let x = Tensor::<f32>::uniform([8, 3, 32, 32], 0.0, 1.0, &mut rng(4));
    let y: Vec<usize> = (0..8).map(|i| i % 10).collect();
    let x_hat = disc.discretize(&x).unwrap();
    let frac = |alpha| {
        dat_example(
            &model,
            &disc,
            &x,
            &x_hat,
            &y,
            &PerturbationSpec {
                alpha,
                ..Default::default()
            },
        )
        .unwrap()
        .modified_fraction
    };
    let (small, large) = (frac(0.1), frac(100.0));
    assert!(large > small, "{small} vs {large}");
}
