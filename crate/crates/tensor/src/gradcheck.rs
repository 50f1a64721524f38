//! Central-difference verification of backward rules.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Skip coordinates whose one-sided slopes disagree by more than this
    /// fraction of their magnitude (a relu or clamp kink lies within the step).
    pub kink_tolerance: Option<f64>,
    /// Check a seeded random subset of this many coordinates instead of all.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// The autodiff gradient is expected to differ from finite differences
    /// (stopped or straight-through paths).
    pub expect_mismatch: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            kink_tolerance: None,
            max_coords: None,
            seed: 0,
            expect_mismatch: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the coordinate with the largest error.
    pub worst_index: Option<usize>,
    pub analytic: Tensor<f64>,
    /// `(flat index, central difference)` for each checked coordinate.
    pub numeric: Vec<(usize, f64)>,
    pub skipped_kinks: usize,
    pub expect_mismatch: bool,
}

impl GradCheckReport {
    /// Whether the check met its expectation at the given tolerance.
    pub fn passes(&self, tolerance: f64) -> bool {
        if self.expect_mismatch {
            self.max_rel_error >= tolerance
        } else {
            self.max_rel_error < tolerance && !self.numeric.is_empty()
        }
    }
}

/// `|a − b| / max(|a|, |b|, 1e−8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval<F>(f: &F, x: Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.constant(x);
    let out = f(&mut g, xv)?;
    let t = g.value(out);
    if t.len() != 1 {
        return Err(invalid(
            "finite_difference_check",
            format!("function returned shape {:?}", t.shape()),
        ));
    }
    Ok(t.item())
}

/// Compares the autodiff gradient of scalar `f` at `x` with central differences of step `h`.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    finite_difference_check_with(
        f,
        x,
        &GradCheckOptions {
            step: h,
            ..Default::default()
        },
    )
}

pub fn finite_difference_check_with<F>(
    f: F,
    x: &Tensor<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if !(opts.step > 0.0) {
        return Err(invalid("finite_difference_check", "step must be positive"));
    }
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let out = f(&mut g, xv)?;
    g.backward(out)?;
    let analytic = g.grad_or_zeros(xv);

    let coords: Vec<usize> = match opts.max_coords {
        Some(m) if m < x.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut picked = sample(&mut rng, x.len(), m).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..x.len()).collect(),
    };
    let f0 = match opts.kink_tolerance {
        Some(_) => Some(eval(&f, x.clone())?),
        None => None,
    };
    let h = opts.step;
    let mut numeric = Vec::with_capacity(coords.len());
    let mut skipped = 0;
    let mut worst = (0.0f64, None);
    for i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fp = eval(&f, plus)?;
        let fm = eval(&f, minus)?;
        if let (Some(tol), Some(f0)) = (opts.kink_tolerance, f0) {
            let fwd = (fp - f0) / h;
            let bwd = (f0 - fm) / h;
            if (fwd - bwd).abs() > tol * fwd.abs().max(bwd.abs()) + 1e-7 {
                skipped += 1;
                continue;
            }
        }
        let central = (fp - fm) / (2.0 * h);
        let err = relative_error(analytic.data()[i], central);
        if worst.1.is_none() || err > worst.0 {
            worst = (err, Some(i));
        }
        numeric.push((i, central));
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        analytic,
        numeric,
        skipped_kinks: skipped,
        expect_mismatch: opts.expect_mismatch,
    })
}
