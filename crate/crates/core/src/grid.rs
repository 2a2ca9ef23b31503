//! Cell-centred uniform grids and the finite-difference operators used by
//! the image shape space.
//!
//! Values are stored row-major with row 0 at the smallest `y`. Pixel
//! `(row, col)` has its centre at
//! `(x0 + (col + 1/2) hx, y0 + (row + 1/2) hy)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Axis-aligned box sampled on a cell-centred grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub rows: usize,
    pub cols: usize,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// Spatial axis of a 2-D grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Along columns.
    X,
    /// Along rows.
    Y,
}

impl GridGeometry {
    pub fn new(rows: usize, cols: usize, x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let g = Self { rows, cols, x0, y0, x1, y1 };
        g.validate()?;
        Ok(g)
    }

    /// `rows x cols` grid over the unit square.
    pub fn unit_square(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, 0.0, 0.0, 1.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows < 2 || self.cols < 2 {
            return Err(invalid(format!("grid must be at least 2x2, got {}x{}", self.rows, self.cols)));
        }
        if ![self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite())
            || self.x1 <= self.x0
            || self.y1 <= self.y0
        {
            return Err(invalid("grid box must be finite with x1 > x0 and y1 > y0"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hx(&self) -> f64 {
        (self.x1 - self.x0) / self.cols as f64
    }

    pub fn hy(&self) -> f64 {
        (self.y1 - self.y0) / self.rows as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.hx() * self.hy()
    }

    pub fn spacing(&self, axis: Axis) -> f64 {
        match axis {
            Axis::X => self.hx(),
            Axis::Y => self.hy(),
        }
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn center(&self, row: usize, col: usize) -> [f64; 2] {
        [self.x0 + (col as f64 + 0.5) * self.hx(), self.y0 + (row as f64 + 0.5) * self.hy()]
    }

    /// Geometries agree to a relative tolerance of 1e-12.
    pub fn same_as(&self, other: &GridGeometry) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()));
        self.rows == other.rows
            && self.cols == other.cols
            && close(self.x0, other.x0)
            && close(self.y0, other.y0)
            && close(self.x1, other.x1)
            && close(self.y1, other.y1)
    }
}

// Stencil for the derivative at position `i` of a line of length `n`:
// second-order central in the interior, second-order one-sided at the ends
// (first-order when the line only has two samples).
fn stencil(i: usize, n: usize, h: f64) -> [(usize, f64); 3] {
    if n == 2 {
        return [(0, -1.0 / h), (1, 1.0 / h), (0, 0.0)];
    }
    let c = 0.5 / h;
    if i == 0 {
        [(0, -3.0 * c), (1, 4.0 * c), (2, -c)]
    } else if i == n - 1 {
        [(n - 1, 3.0 * c), (n - 2, -4.0 * c), (n - 3, c)]
    } else {
        [(i - 1, -c), (i + 1, c), (i, 0.0)]
    }
}

/// Ends of a line use the one-sided stencils; everything in between is
/// the central difference.
fn is_end(i: usize, n: usize) -> bool {
    n == 2 || i == 0 || i == n - 1
}

/// Finite-difference partial derivative of a scalar field along `axis`.
pub fn partial(geom: &GridGeometry, field: &[f64], axis: Axis) -> Vec<f64> {
    let (rows, cols) = (geom.rows, geom.cols);
    let h = geom.spacing(axis);
    let c = 0.5 / h;
    let mut out = vec![0.0; field.len()];
    match axis {
        Axis::X => {
            for (src, dst) in field.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
                for i in 1..cols - 1 {
                    dst[i] = c * (src[i + 1] - src[i - 1]);
                }
                for i in [0, cols - 1] {
                    dst[i] = stencil(i, cols, h).iter().map(|&(j, w)| w * src[j]).sum();
                }
            }
        }
        Axis::Y => {
            for r in 0..rows {
                let dst = &mut out[r * cols..(r + 1) * cols];
                for (i, w) in stencil(r, rows, h) {
                    if w != 0.0 {
                        axpy(dst, w, &field[i * cols..(i + 1) * cols]);
                    }
                }
            }
        }
    }
    out
}

/// Exact transpose of [`partial`]: `<partial(f), g> == <f, partial_transpose(g)>`
/// in the plain Euclidean pairing. In the interior this is minus the central
/// difference.
pub fn partial_transpose(geom: &GridGeometry, field: &[f64], axis: Axis) -> Vec<f64> {
    let (rows, cols) = (geom.rows, geom.cols);
    let h = geom.spacing(axis);
    let mut out = vec![0.0; field.len()];
    match axis {
        Axis::X => {
            for (src, dst) in field.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
                for i in 0..cols {
                    if is_end(i, cols) {
                        for (j, w) in stencil(i, cols, h) {
                            dst[j] += w * src[i];
                        }
                    }
                }
                let c = 0.5 / h;
                if cols > 2 {
                    for i in 1..cols - 1 {
                        dst[i - 1] -= c * src[i];
                        dst[i + 1] += c * src[i];
                    }
                }
            }
        }
        Axis::Y => {
            for r in 0..rows {
                let src = &field[r * cols..(r + 1) * cols];
                for (i, w) in stencil(r, rows, h) {
                    if w != 0.0 {
                        axpy(&mut out[i * cols..(i + 1) * cols], w, src);
                    }
                }
            }
        }
    }
    out
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Gradient of a scalar field as `[d/dx, d/dy]`.
pub fn gradient(geom: &GridGeometry, field: &[f64]) -> [Vec<f64>; 2] {
    [partial(geom, field, Axis::X), partial(geom, field, Axis::Y)]
}

/// Two-component vector field sampled on a grid, stored component-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    pub geometry: GridGeometry,
    pub components: [Vec<f64>; 2],
}

impl VectorField {
    pub fn zeros(geometry: GridGeometry) -> Self {
        let n = geometry.len();
        Self { geometry, components: [vec![0.0; n], vec![0.0; n]] }
    }

    /// Flattened as all x-components followed by all y-components.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.components[0].clone();
        v.extend_from_slice(&self.components[1]);
        v
    }

    pub fn from_flat(geometry: GridGeometry, flat: &[f64]) -> Result<Self> {
        let n = geometry.len();
        if flat.len() != 2 * n {
            return Err(invalid(format!("vector field needs {} values, got {}", 2 * n, flat.len())));
        }
        Ok(Self { geometry, components: [flat[..n].to_vec(), flat[n..].to_vec()] })
    }

    pub fn max_norm(&self) -> f64 {
        self.components[0].iter().zip(&self.components[1]).map(|(a, b)| (a * a + b * b).sqrt()).fold(0.0, f64::max)
    }
}
