//! Rigid pre-alignment of a dataset to a measurement: one shared rigid
//! motion, parametrised by a vector of the Lie algebra se(d), `d ∈ {2, 3}`.
//!
//! Parameters list the rotation generators first (one angle for `d = 2`,
//! an axis-angle vector for `d = 3`) and then the translation part.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::shapes::{match_cost, MatchSpec, Shape};

/// Number of se(d) parameters.
pub fn se_dim(d: usize) -> usize {
    d * (d + 1) / 2
}

fn spatial_dim(params: usize) -> Result<usize> {
    match params {
        3 => Ok(2),
        6 => Ok(3),
        n => Err(invalid(format!("{n} parameters do not describe se(2) or se(3)"))),
    }
}

/// Block matrix `[[Ω, v], [0, 0]]` of the algebra element.
fn algebra_matrix(omega: &[f64], d: usize) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(d + 1, d + 1);
    let r = if d == 2 { 1 } else { 3 };
    if d == 2 {
        a[(0, 1)] = -omega[0];
        a[(1, 0)] = omega[0];
    } else {
        let (x, y, z) = (omega[0], omega[1], omega[2]);
        a[(0, 1)] = -z;
        a[(0, 2)] = y;
        a[(1, 0)] = z;
        a[(1, 2)] = -x;
        a[(2, 0)] = -y;
        a[(2, 1)] = x;
    }
    for i in 0..d {
        a[(i, d)] = omega[r + i];
    }
    a
}

/// `(sin θ/θ, (1 - cos θ)/θ², (θ - sin θ)/θ³)` with series near zero.
fn rodrigues_coefficients(theta: f64) -> (f64, f64, f64) {
    let t2 = theta * theta;
    if theta.abs() < 1e-4 {
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
    }
}

/// Homogeneous `(d+1) x (d+1)` rigid matrix `exp([[Ω, v], [0, 0]])`.
pub fn se_exp(omega: &[f64]) -> Result<DMatrix<f64>> {
    let d = spatial_dim(omega.len())?;
    if omega.iter().any(|w| !w.is_finite()) {
        return Err(invalid("rigid parameters must be finite"));
    }
    let a = algebra_matrix(omega, d);
    let w = a.view((0, 0), (d, d)).into_owned();
    let theta = if d == 2 { omega[0].abs() } else { (omega[0].powi(2) + omega[1].powi(2) + omega[2].powi(2)).sqrt() };
    let (s, c1, c2) = rodrigues_coefficients(theta);
    let id = DMatrix::<f64>::identity(d, d);
    let w2 = &w * &w;
    let rot = &id + &w * s + &w2 * c1;
    let v = &id + &w * c1 + &w2 * c2;
    let t = v * a.view((0, d), (d, 1));
    let mut m = DMatrix::identity(d + 1, d + 1);
    m.view_mut((0, 0), (d, d)).copy_from(&rot);
    m.view_mut((0, d), (d, 1)).copy_from(&t);
    Ok(m)
}

fn transform_coords(m: &DMatrix<f64>, coords: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; coords.len()];
    for (x, y) in coords.chunks(d).zip(out.chunks_mut(d)) {
        for i in 0..d {
            y[i] = m[(i, d)] + (0..d).map(|j| m[(i, j)] * x[j]).sum::<f64>();
        }
    }
    out
}

/// Applies a homogeneous rigid matrix to every point of a landmark set or
/// curve.
pub fn apply_rigid(shape: &Shape, transform: &DMatrix<f64>) -> Result<Shape> {
    let points =
        shape.points().ok_or_else(|| Error::Unsupported("rigid motions act on point-based shapes only".into()))?;
    let d = points.dim();
    if transform.nrows() != d + 1 || transform.ncols() != d + 1 {
        return Err(invalid(format!("expected a {0}x{0} homogeneous matrix", d + 1)));
    }
    shape.with_dofs(transform_coords(transform, points.coords(), d))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigidFitConfig {
    pub step_size: f64,
    pub max_iters: usize,
    /// Relative cost decrease below which an iteration counts as stalled.
    pub tolerance: f64,
}

impl Default for RigidFitConfig {
    fn default() -> Self {
        Self { step_size: 0.05, max_iters: 500, tolerance: 1e-12 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RigidFit {
    pub omega: Vec<f64>,
    pub cost: f64,
    /// Objective after every accepted iteration, starting at `ω = 0`.
    pub history: Vec<f64>,
    pub converged: bool,
}

/// Mean matching cost of the transformed dataset and its gradient in `ω`.
fn objective(q_mes: &Shape, dataset: &[Shape], spec: &MatchSpec, omega: &[f64], d: usize) -> Result<(f64, Vec<f64>)> {
    let m = se_exp(omega)?;
    // dC/dM accumulated over all points: Σ g xᵀ in homogeneous coordinates.
    let mut dm = DMatrix::<f64>::zeros(d + 1, d + 1);
    let mut cost = 0.0;
    for q in dataset {
        let moved = apply_rigid(q, &m)?;
        let mv = match_cost(&moved, q_mes, spec)?;
        cost += mv.cost;
        let src = q.points().expect("point shape").coords();
        for (x, g) in src.chunks(d).zip(mv.gradient.chunks(d)) {
            for i in 0..d {
                for j in 0..d {
                    dm[(i, j)] += g[i] * x[j];
                }
                dm[(i, d)] += g[i];
            }
        }
    }
    let scale = 1.0 / dataset.len() as f64;
    // Fréchet derivative of exp: upper-right block of exp([[A, E], [0, A]]).
    let a = algebra_matrix(omega, d);
    let k = d + 1;
    let mut grad = vec![0.0; omega.len()];
    for (p, g) in grad.iter_mut().enumerate() {
        let mut unit = vec![0.0; omega.len()];
        unit[p] = 1.0;
        let e = algebra_matrix(&unit, d);
        let mut block = DMatrix::zeros(2 * k, 2 * k);
        block.view_mut((0, 0), (k, k)).copy_from(&a);
        block.view_mut((k, k), (k, k)).copy_from(&a);
        block.view_mut((0, k), (k, k)).copy_from(&e);
        let de = block.exp().view((0, k), (k, k)).into_owned();
        *g = scale * dm.component_mul(&de).sum();
    }
    Ok((scale * cost, grad))
}

/// Finds the rigid motion that, applied to every dataset shape, minimises
/// the mean matching cost to `q_mes`. Steps follow Adam directions and are
/// halved until the cost decreases, so the objective never goes up.
pub fn fit_mean_rigid(q_mes: &Shape, dataset: &[Shape], spec: &MatchSpec, cfg: &RigidFitConfig) -> Result<RigidFit> {
    let d =
        q_mes.points().ok_or_else(|| Error::Unsupported("rigid pre-alignment needs point-based shapes".into()))?.dim();
    if !(d == 2 || d == 3) {
        return Err(invalid("rigid pre-alignment supports two and three dimensions"));
    }
    if dataset.is_empty() {
        return Err(invalid("empty dataset"));
    }
    let k = se_dim(d);
    let mut omega = vec![0.0; k];
    let (mut cost, mut grad) = objective(q_mes, dataset, spec, &omega, d)?;
    let mut history = vec![cost];
    let (mut m1, mut m2) = (vec![0.0; k], vec![0.0; k]);
    let mut converged = false;
    let mut calm = 0;
    for it in 1..=cfg.max_iters {
        if cost == 0.0 || grad.iter().all(|g| *g == 0.0) {
            converged = true;
            break;
        }
        let (c1, c2) = (1.0 - 0.9f64.powi(it as i32), 1.0 - 0.999f64.powi(it as i32));
        let dir: Vec<f64> = (0..k)
            .map(|i| {
                m1[i] = 0.9 * m1[i] + 0.1 * grad[i];
                m2[i] = 0.999 * m2[i] + 0.001 * grad[i] * grad[i];
                -(m1[i] / c1) / ((m2[i] / c2).sqrt() + 1e-15)
            })
            .collect();
        let mut step = cfg.step_size;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = omega.iter().zip(&dir).map(|(w, d)| w + step * d).collect();
            let (c, g) = objective(q_mes, dataset, spec, &trial, d)?;
            if c < cost {
                accepted = Some((trial, c, g));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, c, g)) = accepted else {
            // No decrease along the Adam direction: restart the moments so
            // the next direction follows the current gradient.
            m1.iter_mut().for_each(|v| *v = 0.0);
            m2.iter_mut().for_each(|v| *v = 0.0);
            calm += 1;
            if calm >= 3 {
                converged = true;
                break;
            }
            continue;
        };
        let rel = (cost - c) / cost.max(f64::MIN_POSITIVE);
        calm = if rel <= cfg.tolerance { calm + 1 } else { 0 };
        omega = trial;
        cost = c;
        grad = g;
        history.push(cost);
        if calm >= 5 {
            converged = true;
            break;
        }
    }
    Ok(RigidFit { omega, cost, history, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn series_exp(a: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let mut term = DMatrix::identity(n, n);
        let mut sum = term.clone();
        for k in 1..30 {
            term = &term * a / k as f64;
            sum += &term;
        }
        sum
    }

    #[test]
    fn zero_is_identity_and_quarter_turn_is_exact() {
        assert_eq!(se_exp(&[0.0; 3]).unwrap(), DMatrix::identity(3, 3));
        assert_eq!(se_exp(&[0.0; 6]).unwrap(), DMatrix::identity(4, 4));
        let m = se_exp(&[std::f64::consts::FRAC_PI_2, 0.0, 0.0]).unwrap();
        let expected = DMatrix::from_row_slice(3, 3, &[0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!((m - expected).abs().max() < 1e-15);
        assert!(se_exp(&[0.0; 4]).is_err());
    }

    #[test]
    fn closed_form_matches_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in [3, 6] {
            for _ in 0..20 {
                let w: Vec<f64> = (0..k).map(|_| rng.random_range(-1.5..1.5)).collect();
                let d = spatial_dim(k).unwrap();
                let m = se_exp(&w).unwrap();
                assert!((&m - series_exp(&algebra_matrix(&w, d))).abs().max() < 1e-10);
                let inv = se_exp(&w.iter().map(|v| -v).collect::<Vec<_>>()).unwrap();
                assert!((&m * inv - DMatrix::identity(d + 1, d + 1)).abs().max() < 1e-10);
                let r = m.view((0, 0), (d, d)).into_owned();
                assert!((r.transpose() * &r - DMatrix::identity(d, d)).abs().max() < 1e-12);
                assert!((r.determinant() - 1.0).abs() < 1e-12);
            }
        }
        // Near-zero angles use the series branch.
        let w = [1e-6, 0.2, -0.1];
        assert!((se_exp(&w).unwrap() - series_exp(&algebra_matrix(&w, 2))).abs().max() < 1e-14);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let coords: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q =
            Shape::Landmarks(crate::LandmarkShape::new(crate::PointCloud::new(2, coords.clone()).unwrap()).unwrap());
        let other = q.with_dofs(coords.iter().map(|c| c * 1.1 + 0.2).collect()).unwrap();
        let spec = MatchSpec::new(crate::MatchKind::L2Landmarks, 1.0);
        let w = [0.3, -0.2, 0.5];
        let (_, g) = objective(&q, std::slice::from_ref(&other), &spec, &w, 2).unwrap();
        for p in 0..3 {
            let h = 1e-6;
            let mut wp = w;
            wp[p] += h;
            let mut wm = w;
            wm[p] -= h;
            let fd = (objective(&q, std::slice::from_ref(&other), &spec, &wp, 2).unwrap().0
                - objective(&q, std::slice::from_ref(&other), &spec, &wm, 2).unwrap().0)
                / (2.0 * h);
            assert!((fd - g[p]).abs() < 1e-7 * (1.0 + fd.abs()), "{fd} vs {}", g[p]);
        }
    }
}
