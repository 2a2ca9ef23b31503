//! Adaptive Metropolis samplers.
//!
//! During burn-in the proposal covariance tracks the empirical covariance
//! of the chain and a global scale is tuned towards the target acceptance
//! rate by stochastic approximation. Both are frozen afterwards, so the
//! retained samples come from a fixed Markov kernel.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LogDensity, Prior};
use crate::error::{invalid, Error, Result};
use crate::io::{read_table, write_table, Table};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proposal {
    /// Random-walk Metropolis.
    Rwm,
    /// Metropolis-adjusted Langevin.
    Mala,
}

impl Proposal {
    fn target_acceptance(self) -> f64 {
        match self {
            Proposal::Rwm => 0.234,
            Proposal::Mala => 0.574,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcConfig {
    pub chains: usize,
    /// Retained iterations per chain, before thinning.
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub proposal: Proposal,
    /// Initial proposal standard deviation relative to the prior's.
    pub initial_scale: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            iterations: 5000,
            burn_in: 2000,
            thin: 1,
            seed: 0,
            proposal: Proposal::Rwm,
            initial_scale: 0.1,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.iterations == 0 || self.thin == 0 {
            return Err(invalid("chains, iterations and thin must be positive"));
        }
        if !(self.initial_scale.is_finite() && self.initial_scale > 0.0) {
            return Err(invalid("initial_scale must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorChain {
    /// Column names, one per sampled coordinate.
    pub names: Vec<String>,
    /// Retained samples of all chains, chain after chain.
    pub samples: Vec<Vec<f64>>,
    pub log_post: Vec<f64>,
    /// Number of retained samples in each chain.
    pub chain_lengths: Vec<usize>,
    pub acceptance_rate: f64,
    pub seed: u64,
    pub burn_in: usize,
    pub thin: usize,
    /// Split-R̂ per coordinate when there are at least two chains.
    pub rhat: Option<Vec<f64>>,
}

/// `beta_1..beta_p` then `xi_1..xi_k`.
pub fn parameter_names(p: usize, xi: usize) -> Vec<String> {
    (1..=p).map(|i| format!("beta_{i}")).chain((1..=xi).map(|i| format!("xi_{i}"))).collect()
}

impl PosteriorChain {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s[k]).collect()
    }

    /// Retained samples of each chain.
    pub fn per_chain(&self) -> Vec<&[Vec<f64>]> {
        let mut out = Vec::new();
        let mut start = 0;
        for &n in &self.chain_lengths {
            out.push(&self.samples[start..start + n]);
            start += n;
        }
        out
    }

    /// Writes the samples with a `log_post` column.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut header = self.names.clone();
        header.push("log_post".into());
        let mut table = Table::new(header);
        for (s, lp) in self.samples.iter().zip(&self.log_post) {
            let mut row = s.clone();
            row.push(*lp);
            table.rows.push(row);
        }
        write_table(path, &table)
    }

    /// Reads a chain written by [`write_csv`](Self::write_csv) as a single
    /// chain; sampler settings are not stored in the file.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut table = read_table(path)?;
        if table.header.last().map(String::as_str) != Some("log_post") || table.header.len() < 2 {
            return Err(Error::Format(format!("{}: last column must be log_post", path.display())));
        }
        table.header.pop();
        let mut samples = Vec::with_capacity(table.rows.len());
        let mut log_post = Vec::with_capacity(table.rows.len());
        for mut row in table.rows {
            if row.len() != table.header.len() + 1 {
                return Err(Error::Format(format!("{}: ragged row", path.display())));
            }
            log_post.push(row.pop().expect("non-empty row"));
            samples.push(row);
        }
        Ok(Self {
            names: table.header,
            chain_lengths: vec![samples.len()],
            samples,
            log_post,
            acceptance_rate: f64::NAN,
            seed: 0,
            burn_in: 0,
            thin: 1,
            rhat: None,
        })
    }
}

/// Split-R̂ of every coordinate: each chain is cut in two halves and the
/// halves are compared as separate chains. Chains are truncated to a
/// common even length.
pub fn split_rhat(chains: &[&[Vec<f64>]]) -> Option<Vec<f64>> {
    let n = chains.iter().map(|c| c.len()).min()? / 2;
    if chains.len() < 2 || n < 2 {
        return None;
    }
    let dim = chains[0][0].len();
    let halves: Vec<&[Vec<f64>]> = chains.iter().flat_map(|c| [&c[..n], &c[n..2 * n]]).collect();
    let m = halves.len() as f64;
    let nf = n as f64;
    Some(
        (0..dim)
            .map(|k| {
                let stats: Vec<(f64, f64)> = halves
                    .iter()
                    .map(|h| {
                        let mean = h.iter().map(|s| s[k]).sum::<f64>() / nf;
                        let var = h.iter().map(|s| (s[k] - mean).powi(2)).sum::<f64>() / (nf - 1.0);
                        (mean, var)
                    })
                    .collect();
                let grand = stats.iter().map(|s| s.0).sum::<f64>() / m;
                let b = nf / (m - 1.0) * stats.iter().map(|s| (s.0 - grand).powi(2)).sum::<f64>();
                let w = stats.iter().map(|s| s.1).sum::<f64>() / m;
                if w <= 0.0 {
                    return if b <= 0.0 { 1.0 } else { f64::INFINITY };
                }
                (((nf - 1.0) / nf * w + b / nf) / w).sqrt()
            })
            .collect(),
    )
}

/// Best retained sample: `(β, ξ, log posterior)` with `ξ` empty when the
/// chain has `p` coordinates only.
pub fn map_estimate(chain: &PosteriorChain, p: usize) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let best = (0..chain.len())
        .max_by(|&a, &b| chain.log_post[a].total_cmp(&chain.log_post[b]).then(b.cmp(&a)))
        .ok_or_else(|| invalid("empty chain"))?;
    let s = &chain.samples[best];
    if p > s.len() {
        return Err(invalid("more parameters requested than sampled"));
    }
    Ok((s[..p].to_vec(), s[p..].to_vec(), chain.log_post[best]))
}

/// Running mean and covariance for the adaptive proposal.
struct Moments {
    n: f64,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl Moments {
    fn new(d: usize) -> Self {
        Self { n: 0.0, mean: DVector::zeros(d), m2: DMatrix::zeros(d, d) }
    }

    fn push(&mut self, x: &[f64]) {
        let x = DVector::from_row_slice(x);
        self.n += 1.0;
        let delta = &x - &self.mean;
        self.mean += &delta / self.n;
        let delta2 = &x - &self.mean;
        self.m2 += &delta * delta2.transpose();
    }

    fn covariance(&self) -> DMatrix<f64> {
        &self.m2 / (self.n - 1.0)
    }
}

struct State {
    x: Vec<f64>,
    lp: f64,
    grad: Option<Vec<f64>>,
}

/// Proposal geometry: `x' = x + drift + scale L z`.
struct Kernel {
    chol: DMatrix<f64>,
    cov: DMatrix<f64>,
    log_scale: f64,
}

impl Kernel {
    fn from_covariance(cov: DMatrix<f64>, log_scale: f64) -> Option<Self> {
        let chol = cov.clone().cholesky()?.unpack();
        Some(Self { chol, cov, log_scale })
    }

    fn mala_drift(&self, grad: &[f64]) -> DVector<f64> {
        let h2 = (2.0 * self.log_scale).exp();
        &self.cov * DVector::from_row_slice(grad) * (0.5 * h2)
    }

    /// `log q(to | from)` of the Langevin proposal, up to a constant.
    fn mala_log_q(&self, to: &[f64], from: &State) -> f64 {
        let mean = DVector::from_row_slice(&from.x) + self.mala_drift(from.grad.as_deref().expect("gradient"));
        let diff = DVector::from_row_slice(to) - mean;
        let h = self.log_scale.exp();
        let z = self.chol.solve_lower_triangular(&diff).expect("non-singular factor") / h;
        -0.5 * z.dot(&z)
    }
}

fn evaluate(target: &dyn LogDensity, x: &[f64], with_gradient: bool) -> Result<State> {
    match target.evaluate(x, with_gradient) {
        Ok((lp, grad)) if !lp.is_nan() => {
            if with_gradient && lp.is_finite() && grad.is_none() {
                return Err(invalid("MALA needs a target with gradients"));
            }
            Ok(State { x: x.to_vec(), lp, grad })
        }
        Ok(_) => Ok(State { x: x.to_vec(), lp: f64::NEG_INFINITY, grad: None }),
        // A proposal whose geodesic blows up is simply rejected.
        Err(Error::IntegrationFailure { .. }) => Ok(State { x: x.to_vec(), lp: f64::NEG_INFINITY, grad: None }),
        Err(e) => Err(e),
    }
}

struct ChainOutput {
    samples: Vec<Vec<f64>>,
    log_post: Vec<f64>,
    accepted: usize,
    proposed: usize,
}

fn run_chain(target: &dyn LogDensity, marginals: &[Prior], cfg: &McmcConfig, chain: u64) -> Result<ChainOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chain);
    let d = marginals.len();
    let mala = cfg.proposal == Proposal::Mala;
    let target_rate = cfg.proposal.target_acceptance();

    // Start from a prior draw with finite density.
    let mut state = None;
    for _ in 0..1000 {
        let x: Vec<f64> = marginals.iter().map(|p| p.sample(&mut rng)).collect();
        let s = evaluate(target, &x, mala)?;
        if s.lp.is_finite() {
            state = Some(s);
            break;
        }
    }
    let mut state = state
        .ok_or_else(|| Error::Diagnostics("no prior draw has finite posterior density; check the priors".into()))?;

    let initial: Vec<f64> = marginals.iter().map(|p| (cfg.initial_scale * p.sd()).powi(2)).collect();
    let initial_cov = DMatrix::from_diagonal(&DVector::from_vec(initial.clone()));
    let mut kernel = Kernel::from_covariance(initial_cov.clone(), 0.0).expect("diagonal covariance");
    let mut moments = Moments::new(d);
    // Haario et al.: scale the empirical covariance by 2.38² / d.
    let haario = 2.38f64.powi(2) / d as f64;
    let adapt_start = (10 * d).max(50);

    let total = cfg.burn_in + cfg.iterations;
    let mut out = ChainOutput { samples: Vec::new(), log_post: Vec::new(), accepted: 0, proposed: 0 };
    let mut burn_accepted = 0;
    for t in 0..total {
        let h = kernel.log_scale.exp();
        let z: DVector<f64> = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let step = &kernel.chol * z * h;
        let mut y = DVector::from_row_slice(&state.x) + step;
        if mala {
            y += kernel.mala_drift(state.grad.as_deref().expect("gradient"));
        }
        let y: Vec<f64> = y.iter().copied().collect();
        let cand = evaluate(target, &y, mala)?;
        let mut log_ratio = cand.lp - state.lp;
        if mala && cand.lp.is_finite() {
            log_ratio += kernel.mala_log_q(&state.x, &cand) - kernel.mala_log_q(&cand.x, &state);
        }
        let u: f64 = rng.random();
        let accept = cand.lp.is_finite() && u.ln() < log_ratio;
        if accept {
            state = cand;
        }

        if t < cfg.burn_in {
            burn_accepted += accept as usize;
            moments.push(&state.x);
            let gain = 1.0 / ((t + 1) as f64).powf(0.6);
            kernel.log_scale += gain * (accept as u8 as f64 - target_rate);
            if t + 1 >= adapt_start && (t + 1) % 10 == 0 {
                let mut cov = moments.covariance() * haario;
                for (i, v) in initial.iter().enumerate() {
                    cov[(i, i)] += 1e-6 * v;
                }
                if let Some(k) = Kernel::from_covariance(cov, kernel.log_scale) {
                    kernel = k;
                }
            }
        } else {
            out.accepted += accept as usize;
            out.proposed += 1;
            if (t - cfg.burn_in).is_multiple_of(cfg.thin) {
                out.samples.push(state.x.clone());
                out.log_post.push(state.lp);
            }
        }
    }
    if cfg.burn_in > 0 && burn_accepted == 0 {
        return Err(Error::Diagnostics(format!(
            "chain {chain} accepted no proposal during burn-in; reduce initial_scale"
        )));
    }
    Ok(out)
}

/// Runs `cfg.chains` independent chains in parallel. Chain `c` draws from
/// stream `c` of a generator seeded with `cfg.seed`, so results do not
/// depend on scheduling.
pub fn sample(
    target: &dyn LogDensity,
    marginals: &[Prior],
    names: Vec<String>,
    cfg: &McmcConfig,
) -> Result<PosteriorChain> {
    cfg.validate()?;
    if marginals.len() != target.dim() || names.len() != target.dim() {
        return Err(invalid("priors, names and target disagree on the dimension"));
    }
    marginals.iter().try_for_each(Prior::validate)?;
    let outputs = (0..cfg.chains as u64)
        .into_par_iter()
        .map(|c| run_chain(target, marginals, cfg, c))
        .collect::<Result<Vec<_>>>()?;
    let accepted: usize = outputs.iter().map(|o| o.accepted).sum();
    let proposed: usize = outputs.iter().map(|o| o.proposed).sum();
    let chain_lengths = outputs.iter().map(|o| o.samples.len()).collect();
    let rhat = split_rhat(&outputs.iter().map(|o| o.samples.as_slice()).collect::<Vec<_>>());
    let mut samples = Vec::new();
    let mut log_post = Vec::new();
    for o in outputs {
        samples.extend(o.samples);
        log_post.extend(o.log_post);
    }
    Ok(PosteriorChain {
        names,
        samples,
        log_post,
        chain_lengths,
        acceptance_rate: accepted as f64 / proposed.max(1) as f64,
        seed: cfg.seed,
        burn_in: cfg.burn_in,
        thin: cfg.thin,
        rhat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_of(samples: Vec<Vec<f64>>, log_post: Vec<f64>) -> PosteriorChain {
        PosteriorChain {
            names: parameter_names(samples[0].len(), 0),
            chain_lengths: vec![samples.len()],
            samples,
            log_post,
            acceptance_rate: 0.5,
            seed: 0,
            burn_in: 0,
            thin: 1,
            rhat: None,
        }
    }

    #[test]
    fn map_picks_the_largest_log_posterior() {
        let single = chain_of(vec![vec![0.3, 0.1]], vec![-2.0]);
        assert_eq!(map_estimate(&single, 1).unwrap(), (vec![0.3], vec![0.1], -2.0));
        let c = chain_of(vec![vec![0.0], vec![5.0], vec![1.0]], vec![-3.0, 10.0, -1.0]);
        assert_eq!(map_estimate(&c, 1).unwrap().0, vec![5.0]);
    }

    #[test]
    fn rhat_is_near_one_for_identical_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let chains: Vec<Vec<Vec<f64>>> =
            (0..4).map(|_| (0..1000).map(|_| vec![rng.sample::<f64, _>(StandardNormal)]).collect()).collect();
        let refs: Vec<&[Vec<f64>]> = chains.iter().map(|c| c.as_slice()).collect();
        let r = split_rhat(&refs).unwrap();
        assert!((r[0] - 1.0).abs() < 0.01, "{}", r[0]);
        // Shifted chains are flagged.
        let shifted: Vec<Vec<Vec<f64>>> =
            chains.iter().enumerate().map(|(i, c)| c.iter().map(|s| vec![s[0] + i as f64]).collect()).collect();
        let refs: Vec<&[Vec<f64>]> = shifted.iter().map(|c| c.as_slice()).collect();
        assert!(split_rhat(&refs).unwrap()[0] > 1.5);
        assert!(split_rhat(&refs[..1]).is_none());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.csv");
        let c = chain_of(vec![vec![0.25, 1.0 / 3.0], vec![-1e-7, 2.0]], vec![-1.5, -0.25]);
        c.write_csv(&path).unwrap();
        let back = PosteriorChain::read_csv(&path).unwrap();
        assert_eq!(back.samples, c.samples);
        assert_eq!(back.log_post, c.log_post);
        assert_eq!(back.names, vec!["beta_1", "beta_2"]);
    }
}
