//! Dataset-level steps shared by the command line and the tests: batch
//! registration, record assembly and the held-out split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::kernels::KernelSpec;
use crate::shapes::{MatchKind, MatchSpec, Shape};
use crate::shooting::{deformation_energy, initial_velocity, register, GeodesicSolution, Scheme, ShootingConfig};
use crate::surrogate::VelocityRecord;
use crate::toy::toy_kernel_lengthscale;

/// Registration settings used for the toy images.
pub fn toy_shooting_config(size: usize) -> ShootingConfig {
    let mut cfg = ShootingConfig::new(
        KernelSpec::gaussian(toy_kernel_lengthscale(size)),
        MatchSpec::new(MatchKind::L2Image, 1000.0),
    );
    cfg.num_steps = 10;
    cfg.scheme = Scheme::Rk2;
    cfg.optimizer.step_size = 0.05;
    cfg.optimizer.max_iters = 200;
    cfg
}

/// Registers `q_mes` onto every simulation output, in parallel on the
/// current rayon pool. Results keep the order of `sims`.
pub fn register_all(q_mes: &Shape, sims: &[Shape], cfg: &ShootingConfig) -> Vec<Result<GeodesicSolution>> {
    sims.par_iter().map(|sim| register(q_mes, sim, cfg)).collect()
}

/// Surrogate training record for the geodesic `sol` starting at `q_mes`.
pub fn velocity_record(
    beta: &[f64],
    q_mes: &Shape,
    sol: &GeodesicSolution,
    kernel: &KernelSpec,
) -> Result<VelocityRecord> {
    Ok(VelocityRecord {
        beta: beta.to_vec(),
        v0: initial_velocity(q_mes, &sol.pi0, kernel)?,
        pi0: sol.pi0.0.clone(),
        energy: deformation_energy(sol),
    })
}

/// Seeded split of `0..n` into training and held-out indices, each sorted.
/// The held-out part has `round(fraction n)` entries.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(invalid("held-out fraction must lie in [0, 1)"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = (fraction * n as f64).round() as usize;
    let mut test = idx[..k].to_vec();
    let mut train = idx[k..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}
