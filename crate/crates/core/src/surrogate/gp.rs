//! Gaussian-process regression with an anisotropic squared-exponential
//! covariance. Inputs are rescaled to the unit box of the training data and
//! targets are standardised before fitting.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::hexf;

pub const MIN_NUGGET: f64 = 1e-8;
pub const MAX_NUGGET: f64 = 1e-2;

const LOG_LENGTHSCALE_RANGE: (f64, f64) = (-4.6, 4.6);
const LOG_SIGNAL_RANGE: (f64, f64) = (-9.2, 9.2);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpOptions {
    /// Optimisation runs: one from a fixed default, the rest from seeded
    /// random starting points.
    pub restarts: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for GpOptions {
    fn default() -> Self {
        Self { restarts: 5, iterations: 60, learning_rate: 0.1, seed: 0 }
    }
}

/// Serialised form of a [`GpModel`]: hyperparameters and training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpData {
    #[serde(with = "hexf::vec")]
    pub lengthscales: Vec<f64>,
    #[serde(with = "hexf::scalar")]
    pub signal_variance: f64,
    #[serde(with = "hexf::scalar")]
    pub nugget: f64,
    #[serde(with = "hexf::vec")]
    pub input_lower: Vec<f64>,
    #[serde(with = "hexf::vec")]
    pub input_upper: Vec<f64>,
    #[serde(with = "hexf::mat")]
    pub inputs: Vec<Vec<f64>>,
    #[serde(with = "hexf::vec")]
    pub targets: Vec<f64>,
    #[serde(with = "hexf::scalar")]
    pub target_mean: f64,
    #[serde(with = "hexf::scalar")]
    pub target_scale: f64,
}

/// Fitted GP; hyperparameters refer to unit-box inputs and standardised
/// targets.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(into = "GpData", try_from = "GpData")]
pub struct GpModel {
    data: GpData,
    scaled: Vec<Vec<f64>>,
    chol: DMatrix<f64>,
    alpha: DVector<f64>,
}

impl PartialEq for GpModel {
    fn eq(&self, other: &Self) -> bool {
        self.data == other.data
    }
}

impl From<GpModel> for GpData {
    fn from(m: GpModel) -> Self {
        m.data
    }
}

impl TryFrom<GpData> for GpModel {
    type Error = String;

    fn try_from(data: GpData) -> std::result::Result<Self, String> {
        let p = data.lengthscales.len();
        let n = data.targets.len();
        let ok = n > 0
            && data.inputs.len() == n
            && data.inputs.iter().all(|r| r.len() == p)
            && data.input_lower.len() == p
            && data.input_upper.len() == p
            && data.signal_variance > 0.0
            && data.nugget >= MIN_NUGGET
            && data.target_scale > 0.0
            && data.lengthscales.iter().all(|l| *l > 0.0);
        if !ok {
            return Err("inconsistent Gaussian-process data".into());
        }
        GpModel::assemble(data).map_err(|e| e.to_string())
    }
}

fn scale_inputs(inputs: &[Vec<f64>], lo: &[f64], hi: &[f64]) -> Vec<Vec<f64>> {
    inputs.iter().map(|x| scale_point(x, lo, hi)).collect()
}

fn scale_point(x: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    x.iter().zip(lo).zip(hi).map(|((x, l), h)| (x - l) / (h - l)).collect()
}

fn se(a: &[f64], b: &[f64], ls: &[f64], s2: f64) -> f64 {
    let r2: f64 = a.iter().zip(b).zip(ls).map(|((a, b), l)| ((a - b) / l).powi(2)).sum();
    s2 * (-0.5 * r2).exp()
}

fn covariance(x: &[Vec<f64>], ls: &[f64], s2: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = s2;
        for j in 0..i {
            let v = se(&x[i], &x[j], ls, s2);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn factor(mut k: DMatrix<f64>, nugget: f64) -> Option<Cholesky<f64, Dyn>> {
    for i in 0..k.nrows() {
        k[(i, i)] += nugget;
    }
    Cholesky::new(k)
}

/// Log marginal likelihood and its gradient in
/// `θ = (log ℓ_1..p, log s², log nugget)`.
fn lml(x: &[Vec<f64>], sq: &[DMatrix<f64>], y: &DVector<f64>, theta: &[f64]) -> Option<(f64, Vec<f64>)> {
    let p = sq.len();
    let n = x.len();
    let ls: Vec<f64> = theta[..p].iter().map(|t| t.exp()).collect();
    let s2 = theta[p].exp();
    let nugget = theta[p + 1].exp();
    let kse = covariance(x, &ls, s2);
    let chol = factor(kse.clone(), nugget)?;
    let alpha = chol.solve(y);
    let logdet: f64 = chol.l_dirty().diagonal().iter().take(n).map(|d| d.ln()).sum::<f64>();
    let value = -0.5 * y.dot(&alpha) - logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    let kinv = chol.inverse();
    // ∂L/∂θ = ½ tr((ααᵀ - K⁻¹) ∂K/∂θ)
    let mut grad = vec![0.0; p + 2];
    let mut trace_w = 0.0;
    for i in 0..n {
        for j in 0..n {
            let w = alpha[i] * alpha[j] - kinv[(i, j)];
            if i == j {
                trace_w += w;
            }
            let wk = w * kse[(i, j)];
            grad[p] += wk;
            for d in 0..p {
                grad[d] += wk * sq[d][(i, j)] / (ls[d] * ls[d]);
            }
        }
    }
    grad.iter_mut().take(p + 1).for_each(|g| *g *= 0.5);
    grad[p + 1] = 0.5 * nugget * trace_w;
    value.is_finite().then_some((value, grad))
}

fn clamp_theta(theta: &mut [f64]) {
    let p = theta.len() - 2;
    for t in &mut theta[..p] {
        *t = t.clamp(LOG_LENGTHSCALE_RANGE.0, LOG_LENGTHSCALE_RANGE.1);
    }
    theta[p] = theta[p].clamp(LOG_SIGNAL_RANGE.0, LOG_SIGNAL_RANGE.1);
    theta[p + 1] = theta[p + 1].clamp(MIN_NUGGET.ln(), 0.0);
}

/// Adam ascent from `theta`; returns the best point visited.
fn ascend(
    x: &[Vec<f64>],
    sq: &[DMatrix<f64>],
    y: &DVector<f64>,
    mut theta: Vec<f64>,
    opts: &GpOptions,
) -> Option<(f64, Vec<f64>)> {
    let mut current = lml(x, sq, y, &theta)?;
    let mut best = (current.0, theta.clone());
    let k = theta.len();
    let (mut m1, mut m2) = (vec![0.0; k], vec![0.0; k]);
    let mut lr = opts.learning_rate;
    for it in 1..=opts.iterations {
        let g = &current.1;
        let (c1, c2) = (1.0 - 0.9f64.powi(it as i32), 1.0 - 0.999f64.powi(it as i32));
        let mut next = theta.clone();
        for i in 0..k {
            m1[i] = 0.9 * m1[i] + 0.1 * g[i];
            m2[i] = 0.999 * m2[i] + 0.001 * g[i] * g[i];
            next[i] += lr * (m1[i] / c1) / ((m2[i] / c2).sqrt() + 1e-12);
        }
        clamp_theta(&mut next);
        match lml(x, sq, y, &next) {
            Some(v) => {
                theta = next;
                current = v;
                if current.0 > best.0 {
                    best = (current.0, theta.clone());
                }
            }
            None => lr *= 0.5,
        }
    }
    Some(best)
}

/// Fits a GP to `targets` by maximising the log marginal likelihood over
/// `opts.restarts` starting points.
pub fn fit_gp(inputs: &[Vec<f64>], targets: &[f64], opts: &GpOptions) -> Result<GpModel> {
    let n = inputs.len();
    if n < 3 || targets.len() != n {
        return Err(invalid("a GP needs at least three training pairs"));
    }
    let p = inputs[0].len();
    if p == 0 || inputs.iter().any(|r| r.len() != p || r.iter().any(|v| !v.is_finite())) {
        return Err(invalid("GP inputs must be finite and of equal positive dimension"));
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(invalid("GP targets must be finite"));
    }
    let mut lo = vec![f64::INFINITY; p];
    let mut hi = vec![f64::NEG_INFINITY; p];
    for r in inputs {
        for d in 0..p {
            lo[d] = lo[d].min(r[d]);
            hi[d] = hi[d].max(r[d]);
        }
    }
    for d in 0..p {
        if hi[d] - lo[d] <= 0.0 {
            hi[d] = lo[d] + 1.0;
        }
    }
    let mean = targets.iter().sum::<f64>() / n as f64;
    let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n as f64;
    let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
    let x = scale_inputs(inputs, &lo, &hi);
    let y = DVector::from_iterator(n, targets.iter().map(|t| (t - mean) / scale));
    let sq: Vec<DMatrix<f64>> = (0..p).map(|d| DMatrix::from_fn(n, n, |i, j| (x[i][d] - x[j][d]).powi(2))).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts = vec![{
        let mut t = vec![0.3f64.ln(); p];
        t.push(0.0);
        t.push(1e-4f64.ln());
        t
    }];
    for _ in 1..opts.restarts.max(1) {
        let mut t: Vec<f64> = (0..p).map(|_| rng.random_range(0.05f64.ln()..2.0f64.ln())).collect();
        t.push(rng.random_range(0.3f64.ln()..3.0f64.ln()));
        t.push(rng.random_range(1e-6f64.ln()..1e-2f64.ln()));
        starts.push(t);
    }
    let best =
        starts.into_iter().filter_map(|s| ascend(&x, &sq, &y, s, opts)).fold(None::<(f64, Vec<f64>)>, |acc, cand| {
            match acc {
                Some(a) if a.0 >= cand.0 => Some(a),
                _ => Some(cand),
            }
        });
    let theta = match best {
        Some((_, t)) => t,
        None => {
            let mut t = vec![0.3f64.ln(); p];
            t.push(0.0);
            t.push(MIN_NUGGET.ln());
            t
        }
    };
    let data = GpData {
        lengthscales: theta[..p].iter().map(|t| t.exp()).collect(),
        signal_variance: theta[p].exp(),
        nugget: theta[p + 1].exp().max(MIN_NUGGET),
        input_lower: lo,
        input_upper: hi,
        inputs: inputs.to_vec(),
        targets: targets.to_vec(),
        target_mean: mean,
        target_scale: scale,
    };
    GpModel::assemble(data)
}

impl GpModel {
    /// Factorises the covariance, raising the nugget tenfold at a time up
    /// to [`MAX_NUGGET`] if it is not numerically positive definite.
    fn assemble(mut data: GpData) -> Result<Self> {
        let scaled = scale_inputs(&data.inputs, &data.input_lower, &data.input_upper);
        let y = DVector::from_iterator(
            data.targets.len(),
            data.targets.iter().map(|t| (t - data.target_mean) / data.target_scale),
        );
        let kse = covariance(&scaled, &data.lengthscales, data.signal_variance);
        loop {
            if let Some(chol) = factor(kse.clone(), data.nugget) {
                let alpha = chol.solve(&y);
                return Ok(Self { chol: chol.unpack(), alpha, scaled, data });
            }
            if data.nugget >= MAX_NUGGET {
                return Err(Error::IllConditioned(format!(
                    "GP covariance not positive definite even with nugget {:e}",
                    data.nugget
                )));
            }
            data.nugget = (data.nugget * 10.0).min(MAX_NUGGET);
        }
    }

    pub fn data(&self) -> &GpData {
        &self.data
    }

    pub fn nugget(&self) -> f64 {
        self.data.nugget
    }

    pub fn input_dim(&self) -> usize {
        self.data.lengthscales.len()
    }

    /// Log marginal likelihood of the standardised targets.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.alpha.len();
        let y = DVector::from_iterator(
            n,
            self.data.targets.iter().map(|t| (t - self.data.target_mean) / self.data.target_scale),
        );
        let logdet: f64 = self.chol.diagonal().iter().map(|d| d.ln()).sum();
        -0.5 * y.dot(&self.alpha) - logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    fn cross(&self, z: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.scaled.len(),
            self.scaled.iter().map(|x| se(z, x, &self.data.lengthscales, self.data.signal_variance)),
        )
    }

    /// Posterior mean and variance at `x`. The variance includes the
    /// nugget, so it never vanishes.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let z = scale_point(x, &self.data.input_lower, &self.data.input_upper);
        let k = self.cross(&z);
        let mean = k.dot(&self.alpha);
        let v = self.chol.solve_lower_triangular(&k).expect("non-singular factor");
        let var = (self.data.signal_variance + self.data.nugget - v.dot(&v)).max(self.data.nugget);
        let s = self.data.target_scale;
        (self.data.target_mean + s * mean, s * s * var)
    }

    /// [`predict`](Self::predict) together with the gradients of the mean
    /// and the variance with respect to `x`.
    pub fn predict_with_gradient(&self, x: &[f64]) -> (f64, f64, Vec<f64>, Vec<f64>) {
        let d = &self.data;
        let z = scale_point(x, &d.input_lower, &d.input_upper);
        let k = self.cross(&z);
        let v = self.chol.solve_lower_triangular(&k).expect("non-singular factor");
        // K⁻¹ k for the variance derivative.
        let w = self.chol.transpose().solve_upper_triangular(&v).expect("non-singular factor");
        let raw_var = d.signal_variance + d.nugget - v.dot(&v);
        let s = d.target_scale;
        let p = z.len();
        let mut dmean = vec![0.0; p];
        let mut dvar = vec![0.0; p];
        for (i, xi) in self.scaled.iter().enumerate() {
            for a in 0..p {
                let l2 = d.lengthscales[a] * d.lengthscales[a];
                let dk = -k[i] * (z[a] - xi[a]) / l2 / (d.input_upper[a] - d.input_lower[a]);
                dmean[a] += dk * self.alpha[i];
                dvar[a] -= 2.0 * w[i] * dk;
            }
        }
        let clamped = raw_var <= d.nugget;
        let var = raw_var.max(d.nugget);
        (
            d.target_mean + s * k.dot(&self.alpha),
            s * s * var,
            dmean.into_iter().map(|g| s * g).collect(),
            dvar.into_iter().map(|g| if clamped { 0.0 } else { s * s * g }).collect(),
        )
    }

    /// Closed-form leave-one-out predictive means and variances.
    pub fn leave_one_out(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.alpha.len();
        let l = &self.chol;
        let linv = l.clone().solve_lower_triangular(&DMatrix::identity(n, n)).expect("non-singular factor");
        let s = self.data.target_scale;
        let mut means = Vec::with_capacity(n);
        let mut vars = Vec::with_capacity(n);
        for i in 0..n {
            let kinv_ii: f64 = linv.column(i).iter().map(|v| v * v).sum();
            let y = (self.data.targets[i] - self.data.target_mean) / s;
            means.push(self.data.target_mean + s * (y - self.alpha[i] / kinv_ii));
            vars.push(s * s / kinv_ii);
        }
        (means, vars)
    }
}
