//! Discrete Hamiltonians `H(q, π) = ½ <ξ_q^* π, K ξ_q^* π>` for point-based
//! shapes and grid images, with first and second derivatives.
//!
//! The discrete state is a finite-dimensional canonical system with a
//! constant pairing weight `w` (cell area for images, 1 for points):
//! `q̇ = (1/w) ∂H/∂π` and `π̇ = -(1/w) ∂H/∂q`.

use crate::error::Result;
use crate::grid::{partial, partial_transpose, Axis, GridGeometry};
use crate::kernels::{GridConvolver, KernelSpec};
use crate::shapes::Shape;

#[derive(Clone, Debug)]
pub(crate) struct PointSystem {
    dim: usize,
    kernel: KernelSpec,
}

#[derive(Clone, Debug)]
pub(crate) struct ImageSystem {
    geometry: GridGeometry,
    conv: GridConvolver,
}

#[derive(Clone, Debug)]
pub(crate) enum System {
    Points(PointSystem),
    Image(ImageSystem),
}

/// `(∂H/∂q, ∂H/∂π)`.
pub(crate) type Gradient = (Vec<f64>, Vec<f64>);

impl System {
    pub fn for_shape(shape: &Shape, kernel: &KernelSpec) -> Result<Self> {
        kernel.validate()?;
        Ok(match shape {
            Shape::Image(img) => System::Image(ImageSystem {
                geometry: *img.geometry(),
                conv: GridConvolver::new(*img.geometry(), kernel)?,
            }),
            _ => System::Points(PointSystem { dim: shape.points().expect("point shape").dim(), kernel: *kernel }),
        })
    }

    pub fn weight(&self) -> f64 {
        match self {
            System::Points(_) => 1.0,
            System::Image(s) => s.geometry.cell_area(),
        }
    }

    pub fn energy(&self, q: &[f64], p: &[f64]) -> f64 {
        match self {
            System::Points(s) => s.energy(q, p),
            System::Image(s) => s.energy(q, p),
        }
    }

    pub fn gradient(&self, q: &[f64], p: &[f64]) -> Gradient {
        match self {
            System::Points(s) => s.gradient(q, p),
            System::Image(s) => s.gradient(q, p),
        }
    }

    /// Hessian-vector product `∇²H(q, p) · (dq, dp)`.
    pub fn hvp(&self, q: &[f64], p: &[f64], dq: &[f64], dp: &[f64]) -> Gradient {
        match self {
            System::Points(s) => s.hvp(q, p, dq, dp),
            System::Image(s) => s.hvp(q, p, dq, dp),
        }
    }

    /// Eulerian velocity sampled at the shape's degrees of freedom: `K π` at
    /// the points, or the two components of `K ⋆ (-π ∇q)` on the grid.
    pub fn velocity_field(&self, q: &[f64], p: &[f64]) -> Vec<f64> {
        match self {
            System::Points(s) => s.gradient(q, p).1,
            System::Image(s) => {
                let [vx, vy] = s.velocity(q, p);
                let mut out = vx;
                out.extend(vy);
                out
            }
        }
    }

    /// Largest speed of the velocity field, and the grid spacing it should
    /// be compared against (infinite for point shapes).
    pub fn cfl_data(&self, q: &[f64], p: &[f64]) -> (f64, f64) {
        match self {
            System::Points(_) => (0.0, f64::INFINITY),
            System::Image(s) => {
                let [vx, vy] = s.velocity(q, p);
                let speed = vx.iter().zip(&vy).map(|(a, b)| (a * a + b * b).sqrt()).fold(0.0, f64::max);
                (speed, s.geometry.hx().min(s.geometry.hy()))
            }
        }
    }
}

impl PointSystem {
    fn energy(&self, q: &[f64], p: &[f64]) -> f64 {
        let d = self.dim;
        let n = q.len() / d;
        let mut h = 0.0;
        for i in 0..n {
            let (qi, pi) = (&q[i * d..(i + 1) * d], &p[i * d..(i + 1) * d]);
            h += 0.5 * self.kernel.eval_sq(0.0) * dot(pi, pi);
            for j in i + 1..n {
                let (qj, pj) = (&q[j * d..(j + 1) * d], &p[j * d..(j + 1) * d]);
                h += self.kernel.eval_sq(sq(qi, qj)) * dot(pi, pj);
            }
        }
        h
    }

    fn gradient(&self, q: &[f64], p: &[f64]) -> Gradient {
        let d = self.dim;
        let n = q.len() / d;
        let mut gq = vec![0.0; q.len()];
        let mut gp = vec![0.0; p.len()];
        let k0 = self.kernel.eval_sq(0.0);
        for i in 0..n {
            for c in 0..d {
                gp[i * d + c] += k0 * p[i * d + c];
            }
            for j in i + 1..n {
                let (qi, qj) = (&q[i * d..(i + 1) * d], &q[j * d..(j + 1) * d]);
                let (pi, pj) = (&p[i * d..(i + 1) * d], &p[j * d..(j + 1) * d]);
                let (k, k1, _) = self.kernel.profile(sq(qi, qj));
                let pp = dot(pi, pj);
                for c in 0..d {
                    gp[i * d + c] += k * pj[c];
                    gp[j * d + c] += k * pi[c];
                    let f = 2.0 * k1 * pp * (qi[c] - qj[c]);
                    gq[i * d + c] += f;
                    gq[j * d + c] -= f;
                }
            }
        }
        (gq, gp)
    }

    fn hvp(&self, q: &[f64], p: &[f64], dq: &[f64], dp: &[f64]) -> Gradient {
        let d = self.dim;
        let n = q.len() / d;
        let mut hq = vec![0.0; q.len()];
        let mut hp = vec![0.0; p.len()];
        let k0 = self.kernel.eval_sq(0.0);
        for i in 0..n {
            for c in 0..d {
                hp[i * d + c] += k0 * dp[i * d + c];
            }
            for j in i + 1..n {
                let r = |v: &[f64], k: usize| -> [f64; 3] {
                    let mut out = [0.0; 3];
                    out[..d].copy_from_slice(&v[k * d..(k + 1) * d]);
                    out
                };
                let (qi, qj, pi, pj) = (r(q, i), r(q, j), r(p, i), r(p, j));
                let (dqi, dqj, dpi, dpj) = (r(dq, i), r(dq, j), r(dp, i), r(dp, j));
                let mut diff = [0.0; 3];
                let mut ddiff = [0.0; 3];
                for c in 0..d {
                    diff[c] = qi[c] - qj[c];
                    ddiff[c] = dqi[c] - dqj[c];
                }
                let (k, k1, k2) = self.kernel.profile(dot(&diff[..d], &diff[..d]));
                let dr2 = 2.0 * dot(&diff[..d], &ddiff[..d]);
                let pp = dot(&pi[..d], &pj[..d]);
                let dpp = dot(&dpi[..d], &pj[..d]) + dot(&pi[..d], &dpj[..d]);
                for c in 0..d {
                    hp[i * d + c] += k * dpj[c] + k1 * dr2 * pj[c];
                    hp[j * d + c] += k * dpi[c] + k1 * dr2 * pi[c];
                    let f = 2.0 * (k2 * dr2 * pp * diff[c] + k1 * dpp * diff[c] + k1 * pp * ddiff[c]);
                    hq[i * d + c] += f;
                    hq[j * d + c] -= f;
                }
            }
        }
        (hq, hp)
    }
}

impl ImageSystem {
    fn grad_q(&self, q: &[f64]) -> [Vec<f64>; 2] {
        [partial(&self.geometry, q, Axis::X), partial(&self.geometry, q, Axis::Y)]
    }

    fn momentum_density(p: &[f64], gq: &[Vec<f64>; 2]) -> [Vec<f64>; 2] {
        let m = |g: &Vec<f64>| p.iter().zip(g).map(|(a, b)| -a * b).collect();
        [m(&gq[0]), m(&gq[1])]
    }

    fn velocity(&self, q: &[f64], p: &[f64]) -> [Vec<f64>; 2] {
        let m = Self::momentum_density(p, &self.grad_q(q));
        [self.conv.apply(&m[0]), self.conv.apply(&m[1])]
    }

    fn energy(&self, q: &[f64], p: &[f64]) -> f64 {
        let m = Self::momentum_density(p, &self.grad_q(q));
        let a = self.geometry.cell_area();
        let mut h = 0.0;
        for mc in &m {
            let vc = self.conv.apply(mc);
            h += mc.iter().zip(&vc).map(|(x, y)| x * y).sum::<f64>();
        }
        0.5 * a * h
    }

    fn gradient(&self, q: &[f64], p: &[f64]) -> Gradient {
        let a = self.geometry.cell_area();
        let gq = self.grad_q(q);
        let m = Self::momentum_density(p, &gq);
        let mut dh_dp = vec![0.0; p.len()];
        let mut dh_dq = vec![0.0; q.len()];
        for (c, axis) in [Axis::X, Axis::Y].into_iter().enumerate() {
            let v = self.conv.apply(&m[c]);
            for i in 0..p.len() {
                dh_dp[i] -= a * gq[c][i] * v[i];
            }
            let pv: Vec<f64> = p.iter().zip(&v).map(|(x, y)| -a * x * y).collect();
            for (o, t) in dh_dq.iter_mut().zip(partial_transpose(&self.geometry, &pv, axis)) {
                *o += t;
            }
        }
        (dh_dq, dh_dp)
    }

    fn hvp(&self, q: &[f64], p: &[f64], dq: &[f64], dp: &[f64]) -> Gradient {
        let a = self.geometry.cell_area();
        let gq = self.grad_q(q);
        let gdq = self.grad_q(dq);
        let mut hp = vec![0.0; p.len()];
        let mut hq = vec![0.0; q.len()];
        for (c, axis) in [Axis::X, Axis::Y].into_iter().enumerate() {
            let m: Vec<f64> = p.iter().zip(&gq[c]).map(|(x, g)| -x * g).collect();
            let dm: Vec<f64> = (0..p.len()).map(|i| -dp[i] * gq[c][i] - p[i] * gdq[c][i]).collect();
            let v = self.conv.apply(&m);
            let dv = self.conv.apply(&dm);
            for i in 0..p.len() {
                hp[i] -= a * (gdq[c][i] * v[i] + gq[c][i] * dv[i]);
            }
            let t: Vec<f64> = (0..p.len()).map(|i| -a * (dp[i] * v[i] + p[i] * dv[i])).collect();
            for (o, x) in hq.iter_mut().zip(partial_transpose(&self.geometry, &t, axis)) {
                *o += x;
            }
        }
        (hq, hp)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridGeometry;
    use crate::points::PointCloud;
    use crate::shapes::{GridImage, LandmarkShape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn systems(rng: &mut ChaCha8Rng) -> Vec<(System, Vec<f64>, Vec<f64>)> {
        let lm = Shape::Landmarks(
            LandmarkShape::new(PointCloud::new(2, (0..10).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap())
                .unwrap(),
        );
        let g = GridGeometry::unit_square(7, 6).unwrap();
        let img =
            Shape::Image(GridImage::from_fn(g, |x, y| (-4.0 * ((x - 0.4).powi(2) + (y - 0.6).powi(2))).exp()).unwrap());
        let mut out = Vec::new();
        for (shape, l) in [(lm, 0.4), (img, 0.2)] {
            let sys = System::for_shape(&shape, &KernelSpec::gaussian(l)).unwrap();
            let q = shape.dofs().to_vec();
            let p = (0..q.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            out.push((sys, q, p));
        }
        out
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (sys, q, p) in systems(&mut rng) {
            let (gq, gp) = sys.gradient(&q, &p);
            let h = 1e-6;
            for k in 0..q.len() {
                let mut qp = q.clone();
                qp[k] += h;
                let mut qm = q.clone();
                qm[k] -= h;
                let fd = (sys.energy(&qp, &p) - sys.energy(&qm, &p)) / (2.0 * h);
                assert!((fd - gq[k]).abs() < 1e-6 * (1.0 + fd.abs()), "q{k}: {fd} vs {}", gq[k]);
                let mut pp = p.clone();
                pp[k] += h;
                let mut pm = p.clone();
                pm[k] -= h;
                let fd = (sys.energy(&q, &pp) - sys.energy(&q, &pm)) / (2.0 * h);
                assert!((fd - gp[k]).abs() < 1e-6 * (1.0 + fd.abs()), "p{k}: {fd} vs {}", gp[k]);
            }
        }
    }

    #[test]
    fn hvp_matches_gradient_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (sys, q, p) in systems(&mut rng) {
            let dq: Vec<f64> = (0..q.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dp: Vec<f64> = (0..q.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (hq, hp) = sys.hvp(&q, &p, &dq, &dp);
            let e = 1e-6;
            let shift = |s: f64| {
                let qs: Vec<f64> = q.iter().zip(&dq).map(|(a, b)| a + s * b).collect();
                let ps: Vec<f64> = p.iter().zip(&dp).map(|(a, b)| a + s * b).collect();
                sys.gradient(&qs, &ps)
            };
            let (plus, minus) = (shift(e), shift(-e));
            for k in 0..q.len() {
                let fq = (plus.0[k] - minus.0[k]) / (2.0 * e);
                let fp = (plus.1[k] - minus.1[k]) / (2.0 * e);
                assert!((fq - hq[k]).abs() < 1e-5 * (1.0 + fq.abs()), "{fq} vs {}", hq[k]);
                assert!((fp - hp[k]).abs() < 1e-5 * (1.0 + fp.abs()), "{fp} vs {}", hp[k]);
            }
        }
    }
}
