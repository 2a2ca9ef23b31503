#![allow(dead_code)]

use diffcal_core::kernels::KernelSpec;
use diffcal_core::shapes::{CurveShape, GridImage, LandmarkShape, MatchKind, MatchSpec, Momentum, Shape};
use diffcal_core::shooting::{initial_velocity, Scheme, ShootingConfig};
use diffcal_core::{GridGeometry, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn landmarks(coords: Vec<f64>) -> Shape {
    Shape::Landmarks(LandmarkShape::new(PointCloud::new(2, coords).unwrap()).unwrap())
}

pub fn random_landmarks(rng: &mut ChaCha8Rng, n: usize) -> Shape {
    landmarks((0..2 * n).map(|_| rng.random_range(0.0..1.0)).collect())
}

pub fn random_curve(rng: &mut ChaCha8Rng, m: usize) -> Shape {
    let mut v = Vec::new();
    let (mut x, mut y) = (0.1, rng.random_range(0.2..0.8));
    for _ in 0..m {
        v.push(x);
        v.push(y);
        x += 0.8 / m as f64;
        y += rng.random_range(-0.1..0.1);
    }
    Shape::Curve(CurveShape::new(PointCloud::new(2, v).unwrap()).unwrap())
}

pub fn blob(n: usize, cx: f64, cy: f64, width: f64) -> Shape {
    let g = GridGeometry::unit_square(n, n).unwrap();
    Shape::Image(
        GridImage::from_fn(g, |x, y| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * width * width)).exp()).unwrap(),
    )
}

pub fn random_momentum(rng: &mut ChaCha8Rng, shape: &Shape, scale: f64) -> Momentum {
    Momentum((0..shape.dof_len()).map(|_| rng.random_range(-scale..scale)).collect())
}

/// Random momentum on `q` rescaled so the largest initial velocity is
/// `speed`.
pub fn momentum_with_speed(rng: &mut ChaCha8Rng, q: &Shape, kernel: &KernelSpec, speed: f64) -> Momentum {
    let p = random_momentum(rng, q, 1.0);
    let v = initial_velocity(q, &p, kernel).unwrap();
    let vmax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    Momentum(p.0.iter().map(|x| x * speed / vmax).collect())
}

pub fn perturbed(rng: &mut ChaCha8Rng, shape: &Shape, scale: f64) -> Shape {
    let d = shape.dofs().iter().map(|v| v + rng.random_range(-scale..scale)).collect();
    shape.with_dofs(d).unwrap()
}

pub fn config(kernel_ls: f64, kind: MatchKind, weight: f64, scheme: Scheme, steps: usize) -> ShootingConfig {
    let spec = match kind {
        MatchKind::CurrentMmd => MatchSpec::current(KernelSpec::gaussian(0.3), weight),
        k => MatchSpec::new(k, weight),
    };
    let mut cfg = ShootingConfig::new(KernelSpec::gaussian(kernel_ls), spec);
    cfg.scheme = scheme;
    cfg.num_steps = steps;
    cfg
}

/// Fourth-order central difference of `f` along coordinate `k` of `x`.
pub fn fd4(f: &dyn Fn(&[f64]) -> f64, x: &[f64], k: usize, h: f64) -> f64 {
    let at = |s: f64| {
        let mut y = x.to_vec();
        y[k] += s;
        f(&y)
    };
    (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h)
}

/// Plain central difference.
pub fn fd2(f: &dyn Fn(&[f64]) -> f64, x: &[f64], k: usize, h: f64) -> f64 {
    let at = |s: f64| {
        let mut y = x.to_vec();
        y[k] += s;
        f(&y)
    };
    (at(h) - at(-h)) / (2.0 * h)
}

/// Largest entrywise relative error, with magnitudes below `1e-3 · max|fd|`
/// measured against that floor.
pub fn max_rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    let floor = 1e-3 * fd.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    analytic.iter().zip(fd).map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor)).fold(0.0, f64::max)
}

/// Kolmogorov–Smirnov distance between a sample and a continuous CDF.
pub fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

pub fn prior_cdf(p: &diffcal_core::calibration::Prior, x: f64) -> f64 {
    use diffcal_core::calibration::Prior;
    use statrs::distribution::{ContinuousCDF, Normal};
    match *p {
        Prior::Uniform { lo, hi } => ((x - lo) / (hi - lo)).clamp(0.0, 1.0),
        Prior::Normal { mean, sd } => Normal::new(mean, sd).unwrap().cdf(x),
    }
}

/// Monte Carlo standard error of the mean of a correlated series, by
/// non-overlapping batch means.
pub fn batch_means_se(xs: &[f64], batches: usize) -> f64 {
    let size = xs.len() / batches;
    let means: Vec<f64> =
        (0..batches).map(|b| xs[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64).collect();
    let m = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (var / batches as f64).sqrt()
}
