//! Bayesian calibration of simulation parameters against a measured shape
//! through a fitted surrogate.
//!
//! The deformation part of the likelihood lives in latent space: the latent
//! code of the predicted initial velocity is scored by a centred Gaussian
//! whose per-component variances are the PCA eigenvalues, optionally
//! inflated by the surrogate's predictive variance. A latent discrepancy
//! `ξ` can absorb a systematic offset shared by all simulations.

pub mod predictive;
pub mod sampler;

use rand::Rng;
use rand_distr::{Distribution, Normal as NormalDist};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::shapes::{match_cost, Momentum, Shape};
use crate::shooting::{endpoint_match, pushforward, ShootingConfig};
use crate::surrogate::SurrogateModel;

pub use predictive::{
    posterior_predictive, predictive_from_draws, predictive_from_momenta, rescale_unit, PredictiveSummary,
};
pub use sampler::{map_estimate, parameter_names, sample, split_rhat, McmcConfig, PosteriorChain, Proposal};

/// Marginal prior of one parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Prior {
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, sd: f64 },
}

impl Prior {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Prior::Uniform { lo, hi } if lo.is_finite() && hi.is_finite() && lo < hi => Ok(()),
            Prior::Normal { mean, sd } if mean.is_finite() && sd.is_finite() && sd > 0.0 => Ok(()),
            _ => Err(invalid(format!("bad prior {self:?}"))),
        }
    }

    /// Log density up to a constant; `-inf` outside the support.
    pub fn log_density(&self, x: f64) -> f64 {
        match *self {
            Prior::Uniform { lo, hi } => {
                if (lo..=hi).contains(&x) {
                    -(hi - lo).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            Prior::Normal { mean, sd } => -0.5 * ((x - mean) / sd).powi(2) - sd.ln(),
        }
    }

    pub fn gradient(&self, x: f64) -> f64 {
        match *self {
            Prior::Uniform { .. } => 0.0,
            Prior::Normal { mean, sd } => -(x - mean) / (sd * sd),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Prior::Uniform { lo, hi } => rng.random_range(lo..hi),
            Prior::Normal { mean, sd } => NormalDist::new(mean, sd).expect("validated prior").sample(rng),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Prior::Uniform { lo, hi } => 0.5 * (lo + hi),
            Prior::Normal { mean, .. } => mean,
        }
    }

    pub fn sd(&self) -> f64 {
        match *self {
            Prior::Uniform { lo, hi } => (hi - lo) / 12f64.sqrt(),
            Prior::Normal { sd, .. } => sd,
        }
    }
}

/// Independent priors on `β`, and `N(1, xi_sd²)` on every active
/// discrepancy coefficient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub beta: Vec<Prior>,
    #[serde(default = "default_xi_sd")]
    pub xi_sd: f64,
}

fn default_xi_sd() -> f64 {
    0.1
}

impl PriorSpec {
    pub fn new(beta: Vec<Prior>) -> Self {
        Self { beta, xi_sd: default_xi_sd() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.is_empty() {
            return Err(invalid("at least one parameter prior is required"));
        }
        self.beta.iter().try_for_each(Prior::validate)?;
        if !(self.xi_sd.is_finite() && self.xi_sd > 0.0) {
            return Err(invalid("xi_sd must be positive"));
        }
        Ok(())
    }

    /// Marginal priors of the full state `(β, ξ)` with `xi_dim` active
    /// discrepancy coefficients.
    pub fn marginals(&self, xi_dim: usize) -> Vec<Prior> {
        let mut all = self.beta.clone();
        all.extend(std::iter::repeat_n(Prior::Normal { mean: 1.0, sd: self.xi_sd }, xi_dim));
        all
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LikelihoodSpec {
    /// Observation noise scale of the data term.
    pub sigma: f64,
    pub include_model_error: bool,
    pub include_discrepancy: bool,
    /// Compare the measurement with its predicted deformation.
    pub include_data_term: bool,
}

impl Default for LikelihoodSpec {
    fn default() -> Self {
        Self { sigma: 0.1, include_model_error: true, include_discrepancy: false, include_data_term: true }
    }
}

impl LikelihoodSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(invalid("sigma must be positive"));
        }
        Ok(())
    }
}

/// Variances below this are treated as this, so a flat latent component
/// cannot produce a division by zero.
const VARIANCE_FLOOR: f64 = 1e-300;

/// Latent part of the log-likelihood: the log density of `N(0, diag(d))` at
/// the residual `r`, where `d = λ + s²` with model error and `d = λ`
/// without.
fn latent_term(r: &[f64], lambda: &[f64], s2: Option<&[f64]>) -> f64 {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    r.iter()
        .enumerate()
        .map(|(j, r)| {
            let d = (lambda[j] + s2.map_or(0.0, |s| s[j])).max(VARIANCE_FLOOR);
            -0.5 * (r * r / d + d.ln() + ln_2pi)
        })
        .sum()
}

/// Momentum whose geodesic from the measurement realises latent code `u`.
pub fn momentum_for_latent(model: &SurrogateModel, u: &[f64]) -> Result<Momentum> {
    model
        .reconstruct_pi0(u)
        .map(Momentum)
        .ok_or_else(|| Error::Unsupported("the surrogate was trained without momenta".into()))
}

/// Predicted simulation output `f(β)`: the measurement deformed along the
/// geodesic with the surrogate's mean initial velocity.
pub fn predicted_shape(
    beta: &[f64],
    model: &SurrogateModel,
    q_mes: &Shape,
    shooting: &ShootingConfig,
) -> Result<Shape> {
    let (u, _) = model.predict_latent(beta);
    pushforward(q_mes, &momentum_for_latent(model, &u)?, shooting)
}

fn check_dims(beta: &[f64], xi: Option<&[f64]>, model: &SurrogateModel, spec: &LikelihoodSpec) -> Result<()> {
    if beta.len() != model.param_dim() {
        return Err(invalid(format!("expected {} parameters, got {}", model.param_dim(), beta.len())));
    }
    if spec.include_discrepancy {
        match xi {
            Some(x) if x.len() == model.latent_dim() => {}
            _ => return Err(invalid(format!("expected {} discrepancy coefficients", model.latent_dim()))),
        }
    }
    Ok(())
}

/// Log-likelihood of `(β, ξ)` given the measurement.
pub fn log_likelihood(
    beta: &[f64],
    xi: Option<&[f64]>,
    model: &SurrogateModel,
    q_mes: &Shape,
    spec: &LikelihoodSpec,
    shooting: &ShootingConfig,
) -> Result<f64> {
    check_dims(beta, xi, model, spec)?;
    let (u, s2) = model.predict_latent(beta);
    let r = residual(&u, xi, model, spec);
    let mut value = latent_term(&r, &model.basis.explained_variance, spec.include_model_error.then_some(&s2[..]));
    if spec.include_data_term {
        let moved = pushforward(q_mes, &momentum_for_latent(model, &u)?, shooting)?;
        value -= match_cost(&moved, q_mes, &shooting.match_spec)?.cost / (2.0 * spec.sigma * spec.sigma);
    }
    Ok(value)
}

fn residual(u: &[f64], xi: Option<&[f64]>, model: &SurrogateModel, spec: &LikelihoodSpec) -> Vec<f64> {
    match (spec.include_discrepancy, xi) {
        (true, Some(xi)) => u.iter().zip(xi).zip(&model.u_min).map(|((u, x), m)| u - x * m).collect(),
        _ => u.to_vec(),
    }
}

/// Unnormalised log density on a flat parameter vector.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Value at `x` (`-inf` outside the support) and, when `with_gradient`
    /// is set and available, its gradient.
    fn evaluate(&self, x: &[f64], with_gradient: bool) -> Result<(f64, Option<Vec<f64>>)>;
}

/// Independent priors as a density; sampling it checks the sampler.
#[derive(Clone, Debug)]
pub struct PriorDensity(pub Vec<Prior>);

impl LogDensity for PriorDensity {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn evaluate(&self, x: &[f64], with_gradient: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let v = self.0.iter().zip(x).map(|(p, x)| p.log_density(*x)).sum();
        let g = with_gradient.then(|| self.0.iter().zip(x).map(|(p, x)| p.gradient(*x)).collect());
        Ok((v, g))
    }
}

/// Posterior over `(β, ξ)`: the priors plus [`log_likelihood`].
pub struct SurrogatePosterior<'a> {
    pub prior: &'a PriorSpec,
    pub likelihood: &'a LikelihoodSpec,
    pub model: &'a SurrogateModel,
    pub q_mes: &'a Shape,
    pub shooting: &'a ShootingConfig,
}

impl SurrogatePosterior<'_> {
    pub fn new<'a>(
        prior: &'a PriorSpec,
        likelihood: &'a LikelihoodSpec,
        model: &'a SurrogateModel,
        q_mes: &'a Shape,
        shooting: &'a ShootingConfig,
    ) -> Result<SurrogatePosterior<'a>> {
        prior.validate()?;
        likelihood.validate()?;
        if prior.beta.len() != model.param_dim() {
            return Err(invalid(format!(
                "{} priors for a surrogate with {} parameters",
                prior.beta.len(),
                model.param_dim()
            )));
        }
        if likelihood.include_data_term {
            shooting.validate()?;
            if model.basis.preimage.is_none() {
                return Err(Error::Unsupported("the data term needs a surrogate trained with momenta".into()));
            }
            if model.basis.preimage.as_ref().is_some_and(|p| p.mean.len() != q_mes.dof_len()) {
                return Err(Error::RepresentationMismatch(
                    "surrogate momenta do not match the measurement's degrees of freedom".into(),
                ));
            }
        }
        Ok(SurrogatePosterior { prior, likelihood, model, q_mes, shooting })
    }

    pub fn xi_dim(&self) -> usize {
        if self.likelihood.include_discrepancy {
            self.model.latent_dim()
        } else {
            0
        }
    }

    pub fn marginals(&self) -> Vec<Prior> {
        self.prior.marginals(self.xi_dim())
    }
}

impl LogDensity for SurrogatePosterior<'_> {
    fn dim(&self) -> usize {
        self.prior.beta.len() + self.xi_dim()
    }

    fn evaluate(&self, x: &[f64], with_gradient: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let marginals = self.marginals();
        let prior = PriorDensity(marginals);
        let (lp, prior_grad) = prior.evaluate(x, with_gradient)?;
        if lp == f64::NEG_INFINITY {
            return Ok((lp, prior_grad));
        }
        let p = self.prior.beta.len();
        let (beta, xi) = x.split_at(p);
        let xi = (!xi.is_empty()).then_some(xi);
        let spec = self.likelihood;
        let model = self.model;
        let lambda = &model.basis.explained_variance;

        let (u, s2, du, ds2) = model.predict_latent_with_gradient(beta);
        let r = residual(&u, xi, model, spec);
        let s2_used = spec.include_model_error.then_some(&s2[..]);
        let mut value = lp + latent_term(&r, lambda, s2_used);
        let mut grad = prior_grad;

        let pi0 = if spec.include_data_term { Some(momentum_for_latent(model, &u)?) } else { None };
        if let Some(g) = grad.as_mut() {
            for j in 0..r.len() {
                let d = (lambda[j] + s2_used.map_or(0.0, |s| s[j])).max(VARIANCE_FLOOR);
                for (a, ga) in g[..p].iter_mut().enumerate() {
                    *ga -= r[j] * du[j][a] / d;
                    if spec.include_model_error {
                        *ga += 0.5 * ds2[j][a] * (r[j] * r[j] / (d * d) - 1.0 / d);
                    }
                }
                if xi.is_some() {
                    g[p + j] += r[j] * model.u_min[j] / d;
                }
            }
        }
        if let Some(pi0) = pi0 {
            let scale = 1.0 / (2.0 * spec.sigma * spec.sigma);
            if let Some(g) = grad.as_mut() {
                let (cost, dpi) = endpoint_match(self.q_mes, &pi0, self.q_mes, self.shooting)?;
                value -= scale * cost;
                // π0 is affine in the latent code through the preimage basis.
                let pre = model.basis.preimage.as_ref().expect("checked at construction");
                for (j, comp) in pre.components.iter().enumerate() {
                    let dc: f64 = comp.iter().zip(&dpi.0).map(|(c, d)| c * d).sum();
                    for (a, ga) in g[..p].iter_mut().enumerate() {
                        *ga -= scale * dc * du[j][a];
                    }
                }
            } else {
                let moved = pushforward(self.q_mes, &pi0, self.shooting)?;
                value -= scale * match_cost(&moved, self.q_mes, &self.shooting.match_spec)?.cost;
            }
        }
        Ok((value, grad))
    }
}
