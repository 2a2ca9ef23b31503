//! Pushforward of parameter draws into shape space.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::momentum_for_latent;
use super::sampler::PosteriorChain;
use crate::error::{invalid, Error, Result};
use crate::shapes::{Momentum, Shape};
use crate::shooting::{hamiltonian, pushforward, ShootingConfig};
use crate::surrogate::SurrogateModel;

/// Share of draws allowed to fail integration.
const MAX_SKIPPED_FRACTION: f64 = 0.1;

/// Pointwise mean and standard deviation of the deformed measurement, laid
/// out like its degrees of freedom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveSummary {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Deformation energy `2H` of every successful draw.
    pub energies: Vec<f64>,
    pub skipped: usize,
}

impl PredictiveSummary {
    pub fn mean_shape(&self, like: &Shape) -> Result<Shape> {
        like.with_dofs(self.mean.clone())
    }

    pub fn std_shape(&self, like: &Shape) -> Result<Shape> {
        like.with_dofs(self.std.clone())
    }

    /// Average of the pointwise standard deviation.
    pub fn mean_std(&self) -> f64 {
        self.std.iter().sum::<f64>() / self.std.len().max(1) as f64
    }
}

/// Affine map of `values` onto `[0, 1]`; constant input maps to zeros.
pub fn rescale_unit(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        values.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; values.len()]
    }
}

/// Shoots `q_mes` along every momentum and summarises the endpoints.
/// Draws whose integration fails are skipped; more than 10% skipped is an
/// error.
pub fn predictive_from_momenta(
    q_mes: &Shape,
    momenta: &[Momentum],
    shooting: &ShootingConfig,
) -> Result<PredictiveSummary> {
    if momenta.is_empty() {
        return Err(invalid("no draws to push forward"));
    }
    let results: Vec<Result<(Vec<f64>, f64)>> = momenta
        .par_iter()
        .map(|pi| {
            let end = pushforward(q_mes, pi, shooting)?;
            let energy = 2.0 * hamiltonian(q_mes, pi, &shooting.kernel)?;
            Ok((end.dofs().to_vec(), energy))
        })
        .collect();
    let mut ends = Vec::new();
    let mut energies = Vec::new();
    let mut skipped = 0;
    for r in results {
        match r {
            Ok((e, h)) => {
                ends.push(e);
                energies.push(h);
            }
            Err(Error::IntegrationFailure { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if skipped as f64 > MAX_SKIPPED_FRACTION * momenta.len() as f64 {
        return Err(Error::Diagnostics(format!("{skipped} of {} predictive draws failed to integrate", momenta.len())));
    }
    let n = ends.len() as f64;
    let dim = q_mes.dof_len();
    let mut mean = vec![0.0; dim];
    for e in &ends {
        mean.iter_mut().zip(e).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; dim];
    for e in &ends {
        var.iter_mut().zip(e).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2) / n);
    }
    Ok(PredictiveSummary { mean, std: var.into_iter().map(f64::sqrt).collect(), energies, skipped })
}

/// Predictive summary of parameter draws: each `β` goes through the
/// surrogate mean to a momentum on the measurement.
pub fn predictive_from_draws(
    betas: &[Vec<f64>],
    model: &SurrogateModel,
    q_mes: &Shape,
    shooting: &ShootingConfig,
) -> Result<PredictiveSummary> {
    let momenta = betas
        .iter()
        .map(|b| {
            if b.len() != model.param_dim() {
                return Err(invalid(format!("expected {} parameters, got {}", model.param_dim(), b.len())));
            }
            momentum_for_latent(model, &model.predict_latent(b).0)
        })
        .collect::<Result<Vec<_>>>()?;
    predictive_from_momenta(q_mes, &momenta, shooting)
}

/// Pushes `n_draws` evenly spaced chain samples forward. Only the first
/// `model.param_dim()` coordinates (the parameters) are used.
pub fn posterior_predictive(
    chain: &PosteriorChain,
    model: &SurrogateModel,
    q_mes: &Shape,
    shooting: &ShootingConfig,
    n_draws: usize,
) -> Result<PredictiveSummary> {
    if n_draws == 0 || n_draws > chain.len() {
        return Err(invalid(format!("cannot take {n_draws} draws from a chain of {}", chain.len())));
    }
    let p = model.param_dim();
    let betas: Vec<Vec<f64>> = (0..n_draws).map(|k| chain.samples[k * chain.len() / n_draws][..p].to_vec()).collect();
    predictive_from_draws(&betas, model, q_mes, shooting)
}
