//! Analytic-versus-finite-difference gradient checks for the differentiable kernels.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{asa_kernel_grad, Modulation};
use crate::error::{Error, Result};
use crate::linear::{softmax, softmax_jacobian};
use crate::sampling::{bilinear_sample, bilinear_sample_grad, FeatureMap, Level};

/// Pass threshold on the relative error.
pub const GRAD_TOLERANCE: f64 = 1e-5;
/// Denominator floor so that near-zero gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelId {
    Gaussian,
    Laplacian,
    Reciprocal,
    Softmax,
    Bilinear,
}

impl KernelId {
    pub const ALL: [KernelId; 5] = [
        KernelId::Gaussian,
        KernelId::Laplacian,
        KernelId::Reciprocal,
        KernelId::Softmax,
        KernelId::Bilinear,
    ];

    /// Finite-difference step used when none is given.
    pub fn default_step(self) -> f64 {
        match self {
            KernelId::Bilinear => 1e-4,
            _ => 1e-5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelId::Gaussian => "gaussian",
            KernelId::Laplacian => "laplacian",
            KernelId::Reciprocal => "reciprocal",
            KernelId::Softmax => "softmax",
            KernelId::Bilinear => "bilinear",
        }
    }
}

impl fmt::Display for KernelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KernelId::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Reference(format!("unknown kernel id `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub kernel: KernelId,
    /// Random evaluation points.
    pub probes: usize,
    /// Scalar partials compared across all probes.
    pub comparisons: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `(f(x + h) − f(x − h)) / 2h`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

struct Tally {
    comparisons: usize,
    worst: f64,
}

impl Tally {
    fn add(&mut self, analytic: f64, numeric: f64) {
        self.comparisons += 1;
        let e = relative_error(analytic, numeric);
        // NaN must fail the check, so keep it sticky
        self.worst = if e.is_nan() || self.worst.is_nan() {
            f64::NAN
        } else {
            self.worst.max(e)
        };
    }
}

fn check_kernel(
    kind: Modulation,
    trials: usize,
    h: f64,
    rng: &mut ChaCha8Rng,
    t: &mut Tally,
) -> Result<()> {
    for _ in 0..trials {
        let d = rng.gen_range(0.01..5.0);
        let eps = rng.gen_range(0.5..5.0);
        let g = asa_kernel_grad(d, eps, kind)?;
        t.add(
            g.d_distance,
            central_difference(|x| kind.factor(x, eps), d, h),
        );
        t.add(g.d_eps, central_difference(|e| kind.factor(d, e), eps, h));
    }
    Ok(())
}

fn check_softmax(trials: usize, h: f64, rng: &mut ChaCha8Rng, t: &mut Tally) {
    const N: usize = 8;
    for _ in 0..trials {
        let x: Vec<f64> = (0..N).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let jac = softmax_jacobian(&x);
        for j in 0..N {
            let at = |xj: f64| {
                let mut y = x.clone();
                y[j] = xj;
                softmax(&y)
            };
            let (plus, minus) = (at(x[j] + h), at(x[j] - h));
            for i in 0..N {
                t.add(jac[(i, j)], (plus[i] - minus[i]) / (2.0 * h));
            }
        }
    }
}

/// Draws an input coordinate whose level-pixel coordinate is interior and has
/// fractional part in `[0.1, 0.9]`, away from the piecewise-linear kinks.
fn interior_coordinate(rng: &mut ChaCha8Rng, extent: usize, scale: f64) -> f64 {
    let cell = rng.gen_range(1..extent - 2) as f64;
    let pixel = cell + rng.gen_range(0.1..0.9);
    (pixel + 0.5) / scale
}

fn check_bilinear(trials: usize, h: f64, rng: &mut ChaCha8Rng, t: &mut Tally) -> Result<()> {
    let (channels, height, width) = (3, 12, 16);
    for _ in 0..trials {
        let level = Level::ALL[rng.gen_range(0..4)];
        let data = (0..channels * height * width)
            .map(|_| rng.gen_range(-1.0f32..1.0))
            .collect();
        let fm = FeatureMap::new(0, level, channels, height, width, data)?;
        let u = interior_coordinate(rng, width, level.scale());
        let v = interior_coordinate(rng, height, level.scale());
        let g = bilinear_sample_grad(&fm, u, v);
        for c in 0..channels {
            t.add(
                g.d_u[c],
                central_difference(|x| bilinear_sample(&fm, x, v)[c], u, h),
            );
            t.add(
                g.d_v[c],
                central_difference(|y| bilinear_sample(&fm, u, y)[c], v, h),
            );
        }
    }
    Ok(())
}

/// Compares analytic partials with central differences at `trials` random
/// points drawn from a seeded generator.
pub fn check_gradients(
    kernel: KernelId,
    trials: usize,
    step: f64,
    seed: u64,
) -> Result<GradReport> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tally {
        comparisons: 0,
        worst: 0.0,
    };
    match kernel {
        KernelId::Gaussian => check_kernel(Modulation::Gaussian, trials, step, &mut rng, &mut t)?,
        KernelId::Laplacian => check_kernel(Modulation::Laplacian, trials, step, &mut rng, &mut t)?,
        KernelId::Reciprocal => {
            check_kernel(Modulation::Reciprocal, trials, step, &mut rng, &mut t)?
        }
        KernelId::Softmax => check_softmax(trials, step, &mut rng, &mut t),
        KernelId::Bilinear => check_bilinear(trials, step, &mut rng, &mut t)?,
    }
    Ok(GradReport {
        kernel,
        probes: trials,
        comparisons: t.comparisons,
        max_rel_error: t.worst,
        tolerance: GRAD_TOLERANCE,
        passed: t.worst <= GRAD_TOLERANCE,
    })
}
