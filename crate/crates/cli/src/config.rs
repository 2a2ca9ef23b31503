//! Run configuration: a TOML file with a `version` field and one section
//! per stage. Every field has a default, so an empty file with only
//! `version = 1` is valid. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use diffcal_core::calibration::{LikelihoodSpec, McmcConfig, Prior, PriorSpec, Proposal};
use diffcal_core::prealign::RigidFitConfig;
use diffcal_core::shooting::OptimizerConfig;
use diffcal_core::surrogate::gp::GpOptions;
use diffcal_core::surrogate::SurrogateOptions;
use diffcal_core::toy::{toy_kernel_lengthscale, TOY_LOWER, TOY_SIZE, TOY_UPPER};
use diffcal_core::{KernelSpec, MatchKind, MatchSpec, Scheme, ShapeKind, ShootingConfig};

use crate::UsageError;

pub const CONFIG_VERSION: u32 = 1;
pub const SEED_VAR: &str = "DIFFCAL_SEED";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub kernel: KernelSection,
    #[serde(default)]
    pub shooting: ShootingSection,
    #[serde(default, rename = "match")]
    pub match_: MatchSection,
    #[serde(default)]
    pub prealign: RigidFitConfig,
    #[serde(default)]
    pub surrogate: SurrogateSection,
    #[serde(default)]
    pub priors: PriorsSection,
    #[serde(default)]
    pub likelihood: LikelihoodSpec,
    #[serde(default)]
    pub mcmc: McmcSection,
    #[serde(default)]
    pub predict: PredictSection,
    #[serde(default)]
    pub paths: PathsSection,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSection {
    pub lengthscale: f64,
    pub amplitude: f64,
}

impl Default for KernelSection {
    fn default() -> Self {
        Self { lengthscale: toy_kernel_lengthscale(TOY_SIZE), amplitude: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShootingSection {
    pub num_steps: usize,
    pub scheme: Scheme,
    pub step_size: f64,
    pub max_iters: usize,
    pub grad_clip_norm: f64,
    pub tolerance: f64,
}

impl Default for ShootingSection {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        Self {
            num_steps: 10,
            scheme: Scheme::Rk2,
            step_size: 0.05,
            max_iters: 200,
            grad_clip_norm: o.grad_clip_norm,
            tolerance: o.tolerance,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchSection {
    /// Chosen from the shape representation when absent.
    pub kind: Option<MatchKind>,
    pub weight: f64,
    /// Lengthscale of the current-space kernel, needed for curves.
    pub current_lengthscale: Option<f64>,
}

impl Default for MatchSection {
    fn default() -> Self {
        Self { kind: None, weight: MatchSpec::weight_for_sigma(0.1), current_lengthscale: None }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateSection {
    pub filter_fraction: f64,
    pub variance_fraction: f64,
    pub holdout_fraction: f64,
    pub gp_restarts: usize,
    pub gp_iterations: usize,
    pub gp_learning_rate: f64,
}

impl Default for SurrogateSection {
    fn default() -> Self {
        let s = SurrogateOptions::default();
        Self {
            filter_fraction: s.filter_fraction,
            variance_fraction: s.variance_fraction,
            holdout_fraction: 0.2,
            gp_restarts: s.gp.restarts,
            gp_iterations: s.gp.iterations,
            gp_learning_rate: s.gp.learning_rate,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorsSection {
    pub beta: Vec<Prior>,
    pub xi_sd: f64,
}

impl Default for PriorsSection {
    fn default() -> Self {
        let spec =
            PriorSpec::new(TOY_LOWER.iter().zip(&TOY_UPPER).map(|(&lo, &hi)| Prior::Uniform { lo, hi }).collect());
        Self { beta: spec.beta, xi_sd: spec.xi_sd }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcSection {
    pub chains: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub proposal: Proposal,
    pub initial_scale: f64,
}

impl Default for McmcSection {
    fn default() -> Self {
        let m = McmcConfig::default();
        Self {
            chains: m.chains,
            iterations: m.iterations,
            burn_in: m.burn_in,
            thin: m.thin,
            proposal: m.proposal,
            initial_scale: m.initial_scale,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    pub draws: usize,
}

impl Default for PredictSection {
    fn default() -> Self {
        Self { draws: 200 }
    }
}

/// Default locations used when the matching flag is absent. Relative paths
/// are taken from the directory of the config file.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub mes: Option<PathBuf>,
    pub sims: Option<PathBuf>,
    /// Stage outputs default to `<work>/<stage>`.
    pub work: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            kernel: KernelSection::default(),
            shooting: ShootingSection::default(),
            match_: MatchSection::default(),
            prealign: RigidFitConfig::default(),
            surrogate: SurrogateSection::default(),
            priors: PriorsSection::default(),
            likelihood: LikelihoodSpec::default(),
            mcmc: McmcSection::default(),
            predict: PredictSection::default(),
            paths: PathsSection::default(),
        }
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

impl RunConfig {
    /// Reads `path` (or the defaults), applies `DIFFCAL_SEED` and checks
    /// every section.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let mut cfg = Self::parse(&text).with_context(|| format!("config {}", p.display()))?;
                let base = p.parent().unwrap_or(Path::new("."));
                for slot in [&mut cfg.paths.mes, &mut cfg.paths.sims, &mut cfg.paths.work] {
                    if let Some(rel) = slot.as_mut().filter(|r| r.is_relative()) {
                        *rel = base.join(&*rel);
                    }
                }
                cfg
            }
        };
        if let Ok(raw) = std::env::var(SEED_VAR) {
            cfg.seed = raw
                .trim()
                .parse()
                .map_err(|_| usage(format!("{SEED_VAR}={raw:?} is not a 64-bit unsigned integer")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| usage(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(usage(format!("unsupported config version {} (expected {CONFIG_VERSION})", cfg.version)));
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |r: diffcal_core::Result<()>| r.map_err(|e| usage(e.to_string()));
        check(self.kernel().validate())?;
        check(self.shooting_for(ShapeKind::Landmarks).validate())?;
        check(self.prior_spec().validate())?;
        check(self.likelihood.validate())?;
        check(self.mcmc(0).validate())?;
        let s = &self.surrogate;
        if !(0.0..1.0).contains(&s.filter_fraction) || !(0.0..1.0).contains(&s.holdout_fraction) {
            return Err(usage("surrogate fractions must lie in [0, 1)"));
        }
        if !(s.variance_fraction > 0.0 && s.variance_fraction <= 1.0) {
            return Err(usage("surrogate.variance_fraction must lie in (0, 1]"));
        }
        if s.gp_restarts == 0 || !(s.gp_learning_rate > 0.0) {
            return Err(usage("surrogate GP settings must be positive"));
        }
        if self.predict.draws == 0 {
            return Err(usage("predict.draws must be positive"));
        }
        if self.match_.current_lengthscale.is_some_and(|l| !(l > 0.0 && l.is_finite())) {
            return Err(usage("match.current_lengthscale must be positive"));
        }
        Ok(())
    }

    pub fn kernel(&self) -> KernelSpec {
        KernelSpec::gaussian(self.kernel.lengthscale).with_amplitude(self.kernel.amplitude)
    }

    fn match_kind(&self, shape: ShapeKind) -> MatchKind {
        self.match_.kind.unwrap_or(match shape {
            ShapeKind::Landmarks => MatchKind::L2Landmarks,
            ShapeKind::Image => MatchKind::L2Image,
            ShapeKind::Curve => MatchKind::CurrentMmd,
        })
    }

    /// Matching functional for shapes of the given kind.
    pub fn match_spec(&self, shape: ShapeKind) -> Result<MatchSpec> {
        let kind = self.match_kind(shape);
        if kind != MatchKind::CurrentMmd {
            return Ok(MatchSpec::new(kind, self.match_.weight));
        }
        let l =
            self.match_.current_lengthscale.ok_or_else(|| usage("current matching needs match.current_lengthscale"))?;
        Ok(MatchSpec::current(KernelSpec::gaussian(l), self.match_.weight))
    }

    fn shooting_for(&self, shape: ShapeKind) -> ShootingConfig {
        let spec = self.match_spec(shape).unwrap_or(MatchSpec::new(MatchKind::L2Landmarks, self.match_.weight));
        let s = &self.shooting;
        let mut cfg = ShootingConfig::new(self.kernel(), spec);
        cfg.num_steps = s.num_steps;
        cfg.scheme = s.scheme;
        cfg.optimizer = OptimizerConfig {
            step_size: s.step_size,
            max_iters: s.max_iters,
            grad_clip_norm: s.grad_clip_norm,
            tolerance: s.tolerance,
        };
        cfg
    }

    pub fn shooting(&self, shape: ShapeKind) -> Result<ShootingConfig> {
        let mut cfg = self.shooting_for(shape);
        cfg.match_spec = self.match_spec(shape)?;
        Ok(cfg)
    }

    pub fn surrogate_options(&self) -> SurrogateOptions {
        let s = &self.surrogate;
        SurrogateOptions {
            filter_fraction: s.filter_fraction,
            variance_fraction: s.variance_fraction,
            gp: GpOptions {
                restarts: s.gp_restarts,
                iterations: s.gp_iterations,
                learning_rate: s.gp_learning_rate,
                seed: self.seed,
            },
        }
    }

    pub fn prior_spec(&self) -> PriorSpec {
        PriorSpec { beta: self.priors.beta.clone(), xi_sd: self.priors.xi_sd }
    }

    pub fn mcmc(&self, seed: u64) -> McmcConfig {
        let m = &self.mcmc;
        McmcConfig {
            chains: m.chains,
            iterations: m.iterations,
            burn_in: m.burn_in,
            thin: m.thin,
            seed,
            proposal: m.proposal,
            initial_scale: m.initial_scale,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_gives_the_defaults() {
        let cfg = RunConfig::parse("version = 1").unwrap();
        let d = RunConfig::default();
        assert_eq!(cfg.seed, d.seed);
        assert_eq!(cfg.shooting(ShapeKind::Image).unwrap(), d.shooting(ShapeKind::Image).unwrap());
        assert_eq!(cfg.prior_spec(), d.prior_spec());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_versions_are_rejected() {
        assert!(RunConfig::parse("").is_err());
        assert!(RunConfig::parse("version = 2").is_err());
        assert!(RunConfig::parse("version = 1\ncolour = 3").is_err());
        assert!(RunConfig::parse("version = 1\n[mcmc]\nchainz = 3").is_err());
        assert!(RunConfig::parse("version = 1\n[paths]\nmes = 'a.grid'").is_ok());
    }

    #[test]
    fn sections_are_parsed() {
        let cfg = RunConfig::parse(
            r#"
version = 1
seed = 9
[kernel]
lengthscale = 0.3
[shooting]
scheme = "leapfrog"
num_steps = 20
[match]
kind = "current-mmd"
current_lengthscale = 0.2
[priors]
beta = [{ kind = "normal", mean = 0.0, sd = 1.0 }]
[likelihood]
sigma = 0.5
include_discrepancy = true
[mcmc]
proposal = "mala"
"#,
        )
        .unwrap();
        cfg.validate().unwrap();
        let s = cfg.shooting(ShapeKind::Curve).unwrap();
        assert_eq!((s.num_steps, s.scheme, s.kernel.lengthscale), (20, Scheme::Leapfrog, 0.3));
        assert_eq!(s.match_spec.kind, MatchKind::CurrentMmd);
        assert_eq!(cfg.prior_spec().beta, vec![Prior::Normal { mean: 0.0, sd: 1.0 }]);
        assert!(cfg.likelihood.include_discrepancy);
        assert_eq!(cfg.mcmc(cfg.seed).proposal, Proposal::Mala);
    }

    #[test]
    fn curves_need_a_current_kernel() {
        let cfg = RunConfig::default();
        assert!(cfg.shooting(ShapeKind::Curve).is_err());
        assert_eq!(cfg.shooting(ShapeKind::Landmarks).unwrap().match_spec.kind, MatchKind::L2Landmarks);
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(RunConfig::parse("version = 1\n[likelihood]\nsigma = -1.0").unwrap().validate().is_err());
        assert!(RunConfig::parse("version = 1\n[shooting]\nnum_steps = 2").unwrap().validate().is_err());
        assert!(RunConfig::parse("version = 1\n[surrogate]\nholdout_fraction = 1.0").unwrap().validate().is_err());
    }
}
