//! Geodesic shooting: Hamiltonian integration in `(q, π)` space, exact
//! gradients of the shooting loss and the registration optimizer.

mod integrator;
mod system;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kernels::KernelSpec;
use crate::shapes::{match_cost, MatchSpec, Momentum, Shape};
use integrator::{backward, forward};
use system::System;

pub use integrator::Scheme;

/// Upper bound on the internal refinement applied by the CFL guard.
const MAX_REFINEMENT: usize = 64;
/// Courant number above which image integration refines its time step.
const CFL_LIMIT: f64 = 0.5;
/// Consecutive small relative changes required to declare convergence.
const CALM_ITERATIONS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub max_iters: usize,
    pub grad_clip_norm: f64,
    pub tolerance: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { step_size: 0.02, max_iters: 400, grad_clip_norm: 100.0, tolerance: 1e-7 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShootingConfig {
    pub num_steps: usize,
    pub scheme: Scheme,
    pub optimizer: OptimizerConfig,
    #[serde(rename = "match")]
    pub match_spec: MatchSpec,
    pub kernel: KernelSpec,
}

impl ShootingConfig {
    pub fn new(kernel: KernelSpec, match_spec: MatchSpec) -> Self {
        Self { num_steps: 15, scheme: Scheme::Leapfrog, optimizer: OptimizerConfig::default(), match_spec, kernel }
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        self.match_spec.validate()?;
        let o = &self.optimizer;
        if self.num_steps < 4 {
            return Err(invalid(format!("num_steps must be at least 4, got {}", self.num_steps)));
        }
        if !(o.step_size > 0.0 && o.step_size.is_finite()) {
            return Err(invalid("optimizer step_size must be positive"));
        }
        if !(o.grad_clip_norm > 0.0) {
            return Err(invalid("grad_clip_norm must be positive"));
        }
        if !(o.tolerance >= 0.0) {
            return Err(invalid("tolerance must be non-negative"));
        }
        Ok(())
    }
}

/// One sample `(q_t, π_t)` of a geodesic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeodesicState {
    pub q: Shape,
    pub pi: Momentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeodesicSolution {
    pub pi0: Momentum,
    pub trajectory: Vec<GeodesicState>,
    /// `H(q0, π0)`, half the deformation energy.
    pub hamiltonian: f64,
    /// Unweighted matching cost between the endpoint and the target.
    pub match_residual: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl GeodesicSolution {
    pub fn endpoint(&self) -> &Shape {
        &self.trajectory.last().expect("non-empty trajectory").q
    }
}

/// Value and gradient of `H(q0, π0) + λ C(q_T, target)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShootingLoss {
    pub loss: f64,
    pub gradient: Momentum,
    pub hamiltonian: f64,
    pub match_cost: f64,
}

pub fn hamiltonian(q: &Shape, pi: &Momentum, kernel: &KernelSpec) -> Result<f64> {
    pi.check_layout(q)?;
    Ok(System::for_shape(q, kernel)?.energy(q.dofs(), pi.as_slice()))
}

/// Velocity `K ξ_q^* π` sampled at the degrees of freedom of `q`: point
/// velocities for point shapes, `x` components then `y` components on the
/// grid for images.
pub fn initial_velocity(q: &Shape, pi: &Momentum, kernel: &KernelSpec) -> Result<Vec<f64>> {
    pi.check_layout(q)?;
    Ok(System::for_shape(q, kernel)?.velocity_field(q.dofs(), pi.as_slice()))
}

/// Number of internal steps actually used: images refine until the
/// initial Courant number is at most 0.5.
fn effective_steps(system: &System, q0: &[f64], p0: &[f64], steps: usize) -> usize {
    let (speed, h) = system.cfl_data(q0, p0);
    let mut t = steps;
    while speed / t as f64 > CFL_LIMIT * h && t < steps * MAX_REFINEMENT {
        t *= 2;
    }
    t
}

/// Geodesic from `(q0, π0)` sampled at `num_steps + 1` uniform times.
pub fn integrate_geodesic(q0: &Shape, pi0: &Momentum, cfg: &ShootingConfig) -> Result<Vec<GeodesicState>> {
    cfg.validate()?;
    pi0.check_layout(q0)?;
    let system = System::for_shape(q0, &cfg.kernel)?;
    let t = effective_steps(&system, q0.dofs(), pi0.as_slice(), cfg.num_steps);
    let fwd = forward(&system, q0.dofs(), pi0.as_slice(), cfg.scheme, t, false)?;
    let stride = t / cfg.num_steps;
    fwd.states
        .into_iter()
        .step_by(stride)
        .map(|(q, p)| Ok(GeodesicState { q: q0.with_dofs(q)?, pi: Momentum(p) }))
        .collect()
}

/// Endpoint `q_1` of the geodesic shot from `(q0, π0)`.
pub fn pushforward(q0: &Shape, pi0: &Momentum, cfg: &ShootingConfig) -> Result<Shape> {
    cfg.validate()?;
    pi0.check_layout(q0)?;
    let system = System::for_shape(q0, &cfg.kernel)?;
    let t = effective_steps(&system, q0.dofs(), pi0.as_slice(), cfg.num_steps);
    let fwd = forward(&system, q0.dofs(), pi0.as_slice(), cfg.scheme, t, false)?;
    let (q, _) = fwd.states.into_iter().last().expect("non-empty trajectory");
    q0.with_dofs(q)
}

fn check_pair(q0: &Shape, target: &Shape) -> Result<()> {
    if q0.kind() != target.kind() {
        return Err(Error::RepresentationMismatch(format!("cannot register {:?} onto {:?}", q0.kind(), target.kind())));
    }
    Ok(())
}

fn loss_with(system: &System, q0: &Shape, pi0: &[f64], target: &Shape, cfg: &ShootingConfig) -> Result<ShootingLoss> {
    let q = q0.dofs();
    let t = effective_steps(system, q, pi0, cfg.num_steps);
    let fwd = forward(system, q, pi0, cfg.scheme, t, true)?;
    let (q_end, _) = fwd.states.last().expect("non-empty trajectory");
    let m = match_cost(&q0.with_dofs(q_end.clone())?, target, &cfg.match_spec)?;
    let lambda = cfg.match_spec.weight;
    let adj_q: Vec<f64> = m.gradient.iter().map(|g| lambda * g).collect();
    let (_, adj_p) = backward(system, &fwd, adj_q, vec![0.0; q.len()]);
    let h = system.energy(q, pi0);
    let (_, dh_dp) = system.gradient(q, pi0);
    let gradient = dh_dp.iter().zip(&adj_p).map(|(a, b)| a + b).collect();
    Ok(ShootingLoss { loss: h + lambda * m.cost, gradient: Momentum(gradient), hamiltonian: h, match_cost: m.cost })
}

pub fn shooting_loss(q0: &Shape, pi0: &Momentum, target: &Shape, cfg: &ShootingConfig) -> Result<ShootingLoss> {
    cfg.validate()?;
    check_pair(q0, target)?;
    pi0.check_layout(q0)?;
    let system = System::for_shape(q0, &cfg.kernel)?;
    loss_with(&system, q0, pi0.as_slice(), target, cfg)
}

/// Unweighted matching cost between the endpoint shot from `(q0, π0)` and
/// `target`, with its gradient with respect to `π0`.
pub fn endpoint_match(q0: &Shape, pi0: &Momentum, target: &Shape, cfg: &ShootingConfig) -> Result<(f64, Momentum)> {
    cfg.validate()?;
    check_pair(q0, target)?;
    pi0.check_layout(q0)?;
    let system = System::for_shape(q0, &cfg.kernel)?;
    let q = q0.dofs();
    let t = effective_steps(&system, q, pi0.as_slice(), cfg.num_steps);
    let fwd = forward(&system, q, pi0.as_slice(), cfg.scheme, t, true)?;
    let (q_end, _) = fwd.states.last().expect("non-empty trajectory");
    let m = match_cost(&q0.with_dofs(q_end.clone())?, target, &cfg.match_spec)?;
    let (_, adj_p) = backward(&system, &fwd, m.gradient, vec![0.0; q.len()]);
    Ok((m.cost, Momentum(adj_p)))
}

/// Finds the initial momentum carrying `source` onto `target`.
///
/// Adam on `π0` from zero with gradient-norm clipping; the best iterate is
/// returned. An integration failure restarts the search once with half the
/// step size.
pub fn register(source: &Shape, target: &Shape, cfg: &ShootingConfig) -> Result<GeodesicSolution> {
    cfg.validate()?;
    check_pair(source, target)?;
    let system = System::for_shape(source, &cfg.kernel)?;
    match optimize(&system, source, target, cfg, cfg.optimizer.step_size) {
        Err(Error::IntegrationFailure { .. }) => optimize(&system, source, target, cfg, 0.5 * cfg.optimizer.step_size),
        other => other,
    }
}

fn optimize(
    system: &System,
    source: &Shape,
    target: &Shape,
    cfg: &ShootingConfig,
    step: f64,
) -> Result<GeodesicSolution> {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-12;
    let opt = &cfg.optimizer;
    let n = source.dof_len();
    let mut pi = vec![0.0; n];
    let mut m1 = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    let mut best = (f64::INFINITY, pi.clone());
    let mut prev = f64::NAN;
    let mut calm = 0;
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=opt.max_iters {
        iterations = it;
        let value = loss_with(system, source, &pi, target, cfg)?;
        if value.loss < best.0 {
            best = (value.loss, pi.clone());
        }
        if prev.is_finite() {
            let change = (prev - value.loss).abs() / prev.abs().max(f64::MIN_POSITIVE);
            calm = if change <= opt.tolerance { calm + 1 } else { 0 };
        }
        if calm >= CALM_ITERATIONS || value.loss == 0.0 {
            converged = true;
            break;
        }
        prev = value.loss;
        let mut g = value.gradient.0;
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > opt.grad_clip_norm {
            let s = opt.grad_clip_norm / norm;
            g.iter_mut().for_each(|v| *v *= s);
        }
        let (c1, c2) = (1.0 - B1.powi(it as i32), 1.0 - B2.powi(it as i32));
        for k in 0..n {
            m1[k] = B1 * m1[k] + (1.0 - B1) * g[k];
            m2[k] = B2 * m2[k] + (1.0 - B2) * g[k] * g[k];
            pi[k] -= step * (m1[k] / c1) / ((m2[k] / c2).sqrt() + EPS);
        }
    }
    let pi0 = Momentum(best.1);
    let trajectory = integrate_geodesic(source, &pi0, cfg)?;
    let end = &trajectory.last().expect("non-empty trajectory").q;
    let match_residual = match_cost(end, target, &cfg.match_spec)?.cost;
    Ok(GeodesicSolution {
        hamiltonian: system.energy(source.dofs(), pi0.as_slice()),
        pi0,
        trajectory,
        match_residual,
        converged,
        iterations,
    })
}

/// Deformation energy `E = 2 H(q0, π0)` of a geodesic.
pub fn deformation_energy(sol: &GeodesicSolution) -> f64 {
    2.0 * sol.hamiltonian
}
