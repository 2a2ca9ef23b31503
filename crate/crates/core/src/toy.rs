//! Synthetic image simulator with four parameters and Latin hypercube
//! designs over its parameter box.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::grid::GridGeometry;
use crate::shapes::GridImage;

pub const TOY_SIZE: usize = 32;
pub const TOY_BETA_STAR: [f64; 4] = [0.2, 0.3, 0.4, 0.8];
pub const TOY_LOWER: [f64; 4] = [0.0; 4];
pub const TOY_UPPER: [f64; 4] = [0.5, 0.5, 0.7, 0.7];
pub const TOY_DESIGN_SIZE: usize = 300;

/// Kernel lengthscale used to register toy images: two pixels.
pub fn toy_kernel_lengthscale(size: usize) -> f64 {
    2.0 / size as f64
}

/// `exp(-6((x + β1 sin(2π β3 y))² + (y + β2 cos(2π β4 x))²))` on a
/// `size x size` grid over the unit square.
pub fn toy_image(beta: &[f64], size: usize) -> Result<GridImage> {
    if beta.len() != 4 || beta.iter().any(|b| !b.is_finite()) {
        return Err(invalid("toy simulator takes four finite parameters"));
    }
    let tau = std::f64::consts::TAU;
    let g = GridGeometry::unit_square(size, size)?;
    GridImage::from_fn(g, |x, y| {
        let u = x + beta[0] * (tau * beta[2] * y).sin();
        let v = y + beta[1] * (tau * beta[3] * x).cos();
        (-6.0 * (u * u + v * v)).exp()
    })
}

/// `n` points of a Latin hypercube over the box `[lower, upper]`: each
/// coordinate hits every one of the `n` equal strata exactly once.
pub fn latin_hypercube(n: usize, lower: &[f64], upper: &[f64], seed: u64) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(invalid("design size must be positive"));
    }
    if lower.len() != upper.len() || lower.is_empty() {
        return Err(invalid("bounds must have the same positive length"));
    }
    if lower.iter().zip(upper).any(|(l, u)| !(l.is_finite() && u.is_finite() && l < u)) {
        return Err(invalid("every lower bound must be finite and below its upper bound"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut design = vec![vec![0.0; lower.len()]; n];
    for (d, (&lo, &hi)) in lower.iter().zip(upper).enumerate() {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(&mut rng);
        for (row, s) in design.iter_mut().zip(strata) {
            let u: f64 = rng.random();
            row[d] = lo + (s as f64 + u) / n as f64 * (hi - lo);
        }
    }
    Ok(design)
}
