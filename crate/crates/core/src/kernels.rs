//! Reproducing kernels of the admissible velocity space.
//!
//! The velocity space is an RKHS with a scalar kernel times the identity on
//! `R^d`, so a momentum `π` carried by control points `q_i` generates the
//! velocity `v(x) = Σ_i k(x, q_i) π_i`. On grids the same kernel acts by
//! discrete convolution weighted by the cell area.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::{GridGeometry, VectorField};
use crate::points::{sq_dist, PointCloud};

/// Truncation radius of grid convolutions, in lengthscales.
pub const DEFAULT_TRUNCATION: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    #[serde(default = "default_family")]
    pub family: KernelFamily,
    pub lengthscale: f64,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
}

fn default_family() -> KernelFamily {
    KernelFamily::Gaussian
}

fn default_amplitude() -> f64 {
    1.0
}

impl KernelSpec {
    pub fn gaussian(lengthscale: f64) -> Self {
        Self { family: KernelFamily::Gaussian, lengthscale, amplitude: 1.0 }
    }

    pub fn with_amplitude(mut self, amplitude: f64) -> Self {
        self.amplitude = amplitude;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lengthscale.is_finite() && self.lengthscale > 0.0) {
            return Err(invalid("kernel lengthscale must be positive and finite"));
        }
        if !(self.amplitude.is_finite() && self.amplitude > 0.0) {
            return Err(invalid("kernel amplitude must be positive and finite"));
        }
        Ok(())
    }

    /// Kernel value as a function of the squared distance.
    #[inline]
    pub fn eval_sq(&self, r2: f64) -> f64 {
        match self.family {
            KernelFamily::Gaussian => self.amplitude * (-r2 / (2.0 * self.lengthscale * self.lengthscale)).exp(),
        }
    }

    /// `(k, dk/dr², d²k/d(r²)²)` at squared distance `r2`.
    #[inline]
    pub fn profile(&self, r2: f64) -> (f64, f64, f64) {
        match self.family {
            KernelFamily::Gaussian => {
                let s = 1.0 / (2.0 * self.lengthscale * self.lengthscale);
                let k = self.amplitude * (-r2 * s).exp();
                (k, -s * k, s * s * k)
            }
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        self.eval_sq(sq_dist(x, y))
    }
}

/// Kernel matrix `K_ij = k(a_i, b_j)`.
pub fn kernel_matrix(a: &PointCloud, b: &PointCloud, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    if a.dim() != b.dim() {
        return Err(invalid(format!("point dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| spec.eval(a.point(i), b.point(j))))
}

/// Velocity at `x` generated by `momenta` attached to `control_points`.
pub fn velocity_at(x: &[f64], control_points: &PointCloud, momenta: &[f64], spec: &KernelSpec) -> Result<Vec<f64>> {
    let d = control_points.dim();
    if x.len() != d || momenta.len() != control_points.coords().len() {
        return Err(invalid(format!(
            "velocity_at: x has {} coordinates, {} control points of dimension {d}, {} momentum entries",
            x.len(),
            control_points.len(),
            momenta.len()
        )));
    }
    if x.iter().chain(momenta).any(|v| !v.is_finite()) {
        return Err(invalid("velocity_at: non-finite input"));
    }
    let mut v = vec![0.0; d];
    for (q, p) in control_points.iter().zip(momenta.chunks_exact(d)) {
        let k = spec.eval(x, q);
        for (vi, pi) in v.iter_mut().zip(p) {
            *vi += k * pi;
        }
    }
    Ok(v)
}

/// Separable Gaussian convolution on a fixed grid, including the quadrature
/// weight (cell area) and the kernel amplitude.
#[derive(Clone, Debug)]
pub struct GridConvolver {
    geometry: GridGeometry,
    taps_x: Vec<f64>,
    taps_y: Vec<f64>,
    scale: f64,
}

impl GridConvolver {
    pub fn new(geometry: GridGeometry, spec: &KernelSpec) -> Result<Self> {
        Self::with_truncation(geometry, spec, DEFAULT_TRUNCATION)
    }

    /// `truncation` is the half-width of the stencil in lengthscales.
    pub fn with_truncation(geometry: GridGeometry, spec: &KernelSpec, truncation: f64) -> Result<Self> {
        spec.validate()?;
        geometry.validate()?;
        if !(truncation > 0.0) {
            return Err(invalid("truncation radius must be positive"));
        }
        let l = spec.lengthscale;
        let taps = |h: f64, n: usize| -> Vec<f64> {
            let half = ((truncation * l / h).floor() as usize).min(n - 1);
            (0..=half)
                .map(|k| {
                    let r = k as f64 * h;
                    (-r * r / (2.0 * l * l)).exp()
                })
                .collect()
        };
        Ok(Self {
            geometry,
            taps_x: taps(geometry.hx(), geometry.cols),
            taps_y: taps(geometry.hy(), geometry.rows),
            scale: spec.amplitude * geometry.cell_area(),
        })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    /// Convolve one scalar component (zero padding outside the box).
    pub fn apply(&self, field: &[f64]) -> Vec<f64> {
        let g = &self.geometry;
        let (rows, cols) = (g.rows, g.cols);
        let wx = self.taps_x.len() - 1;
        let wy = self.taps_y.len() - 1;
        let mut tmp = vec![0.0; field.len()];
        for r in 0..rows {
            let line = &field[r * cols..(r + 1) * cols];
            let out = &mut tmp[r * cols..(r + 1) * cols];
            for (d, o) in out.iter_mut().zip(line) {
                *d = self.taps_x[0] * o;
            }
            for k in 1..=wx {
                let w = self.taps_x[k];
                for (d, s) in out[k..].iter_mut().zip(&line[..cols - k]) {
                    *d += w * s;
                }
                for (d, s) in out[..cols - k].iter_mut().zip(&line[k..]) {
                    *d += w * s;
                }
            }
        }
        let mut out = vec![0.0; field.len()];
        for r in 0..rows {
            let lo = r.saturating_sub(wy);
            let hi = (r + wy).min(rows - 1);
            for i in lo..=hi {
                let w = self.taps_y[r.abs_diff(i)] * self.scale;
                let src = &tmp[i * cols..(i + 1) * cols];
                let dst = &mut out[r * cols..(r + 1) * cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }
}

/// Discrete kernel convolution of a momentum density on its grid.
pub fn convolve_grid(field: &VectorField, spec: &KernelSpec) -> Result<VectorField> {
    if field.components.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid("convolve_grid: non-finite momentum field"));
    }
    let conv = GridConvolver::new(field.geometry, spec)?;
    Ok(VectorField {
        geometry: field.geometry,
        components: [conv.apply(&field.components[0]), conv.apply(&field.components[1])],
    })
}
