use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use diffcal_core::calibration::{
    map_estimate, parameter_names, posterior_predictive, predictive_from_draws, sample, PosteriorChain,
    PredictiveSummary, PriorDensity, SurrogatePosterior,
};
use diffcal_core::io::{write_table, Table};
use diffcal_core::pipeline::{holdout_split, register_all, velocity_record};
use diffcal_core::prealign::{apply_rigid, fit_mean_rigid, se_exp};
use diffcal_core::surrogate::metrics::{validation_report, ValidationReport};
use diffcal_core::surrogate::{fit_surrogate, SurrogateModel, VelocityRecord};
use diffcal_core::toy::{latin_hypercube, toy_image, TOY_DESIGN_SIZE, TOY_LOWER, TOY_UPPER};
use diffcal_core::{Error, Shape};

use crate::config::RunConfig;
use crate::files::{
    beta_header, list_shapes, read_betas, read_json, read_shape, stem, write_json, write_shape, Stage, BETAS_FILE,
};
use crate::{CalibrateArgs, Command, FitArgs, GenToyArgs, PrealignArgs, PredictArgs, RegisterArgs, UsageError};

const SOLUTIONS_DIR: &str = "solutions";
const SURROGATE_FILE: &str = "surrogate.json";
const CHAIN_FILE: &str = "chain.csv";

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn run(command: Command, config: &Option<PathBuf>, jobs: Option<usize>, force: bool) -> Result<()> {
    let cfg = RunConfig::load(config.as_deref())?;
    let jobs = match jobs {
        Some(0) => return Err(usage("--jobs must be positive")),
        Some(j) => j,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool =
        |threads: usize| rayon::ThreadPoolBuilder::new().num_threads(threads).build().context("starting worker pool");
    let ctx = Ctx { cfg, force };
    match command {
        Command::GenToy(a) => pool(1)?.install(|| ctx.gen_toy(a)),
        Command::Prealign(a) => pool(1)?.install(|| ctx.prealign(a)),
        Command::Register(a) => pool(jobs)?.install(|| ctx.register(a)),
        Command::FitSurrogate(a) => pool(1)?.install(|| ctx.fit_surrogate(a)),
        Command::Calibrate(a) => pool(1)?.install(|| ctx.calibrate(a)),
        Command::PredictPosterior(a) => pool(jobs)?.install(|| ctx.predict(a)),
    }
}

struct Ctx {
    cfg: RunConfig,
    force: bool,
}

/// Saved result of one registration.
#[derive(Serialize, Deserialize)]
struct RegistrationRecord {
    source: String,
    beta: Option<Vec<f64>>,
    energy: f64,
    hamiltonian: f64,
    match_residual: f64,
    converged: bool,
    iterations: usize,
    pi0: Vec<f64>,
    v0: Vec<f64>,
}

#[derive(Serialize)]
struct ValidationFile {
    report: ValidationReport,
    train_size: usize,
    held_out: Vec<usize>,
}

fn parse_bounds(text: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let (lo, hi) = text.split_once("..").ok_or_else(|| usage(format!("bounds {text:?} must look like lo..hi")))?;
    let list = |s: &str| -> Result<Vec<f64>> {
        s.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| usage(format!("bad bound {v:?}")))).collect()
    };
    let (lo, hi) = (list(lo)?, list(hi)?);
    if lo.len() != 4 || hi.len() != 4 {
        return Err(usage("bounds need four values on each side"));
    }
    if lo.iter().zip(&hi).any(|(l, h)| !(l.is_finite() && h.is_finite() && l < h)) {
        return Err(usage(format!("bounds {text:?}: every lower bound must be below its upper bound")));
    }
    Ok((lo, hi))
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let (i, f) = (h.floor() as usize, h - h.floor());
    if i + 1 < sorted.len() {
        sorted[i] + f * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

fn write_summary(path: &Path, chain: &PosteriorChain) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["parameter", "mean", "sd", "q2.5", "q97.5"])?;
    for (k, name) in chain.names.iter().enumerate() {
        let mut x = chain.column(k);
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
        x.sort_by(f64::total_cmp);
        let row = [mean, sd, quantile(&x, 0.025), quantile(&x, 0.975)];
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| format!("{v:e}")));
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

fn write_predictive(out: &Path, mes: &Shape, summary: &PredictiveSummary, draws: usize) -> Result<Vec<String>> {
    let mean = write_shape(out, "mean", &summary.mean_shape(mes)?)?;
    let std = write_shape(out, "std", &summary.std_shape(mes)?)?;
    let mut table = Table::new(vec!["energy".into()]);
    table.rows = summary.energies.iter().map(|e| vec![*e]).collect();
    write_table(&out.join("energies.csv"), &table)?;
    write_json(
        &out.join("predictive.json"),
        &json!({ "draws": draws, "skipped": summary.skipped, "mean_std": summary.mean_std() }),
    )?;
    let name = |p: &Path| p.file_name().unwrap().to_string_lossy().into_owned();
    Ok(vec![name(&mean), name(&std), "energies.csv".into(), "predictive.json".into()])
}

impl Ctx {
    fn path(&self, flag: Option<PathBuf>, fallback: Option<PathBuf>, name: &str) -> Result<PathBuf> {
        flag.or(fallback).ok_or_else(|| usage(format!("--{name} is required")))
    }

    fn work(&self, stage: &str) -> Option<PathBuf> {
        self.cfg.paths.work.as_ref().map(|w| w.join(stage))
    }

    /// True when the stage can be skipped; otherwise prepares its output
    /// directory.
    fn skip(&self, stage: &Stage, name: &str) -> Result<bool> {
        if !self.force && stage.is_current() {
            eprintln!("{name}: outputs are up to date (use --force to recompute)");
            return Ok(true);
        }
        stage.begin()?;
        Ok(false)
    }

    fn gen_toy(&self, a: GenToyArgs) -> Result<()> {
        if a.size < 2 {
            return Err(usage("--size must be at least 2"));
        }
        let seed = a.seed.unwrap_or(self.cfg.seed);
        let (lo, hi) = match &a.bounds {
            Some(b) => parse_bounds(b)?,
            None => (TOY_LOWER.to_vec(), TOY_UPPER.to_vec()),
        };
        let n = a.lhs.unwrap_or(TOY_DESIGN_SIZE);
        if n == 0 {
            return Err(usage("--lhs must be positive"));
        }
        let settings = json!({ "beta": a.beta, "n": n, "lo": lo, "hi": hi, "seed": seed, "size": a.size });
        let stage = Stage::new("gen-toy", &a.out, &settings, &[])?;
        if self.skip(&stage, "gen-toy")? {
            return Ok(());
        }
        let design = match &a.beta {
            Some(b) => vec![b.clone()],
            None => latin_hypercube(n, &lo, &hi, seed)?,
        };
        let width = design.len().saturating_sub(1).to_string().len().max(4);
        let mut outputs = Vec::new();
        for (i, beta) in design.iter().enumerate() {
            let img = Shape::Image(toy_image(beta, a.size)?);
            let path = write_shape(&a.out, &format!("sim_{i:0width$}"), &img)?;
            outputs.push(path.file_name().unwrap().to_string_lossy().into_owned());
        }
        let mut table = Table::new(beta_header(4));
        table.rows = design;
        write_table(&a.out.join(BETAS_FILE), &table)?;
        outputs.push(BETAS_FILE.into());
        eprintln!("gen-toy: wrote {} images to {}", outputs.len() - 1, a.out.display());
        stage.finish(outputs)
    }

    fn prealign(&self, a: PrealignArgs) -> Result<()> {
        let mes_path = self.path(a.mes, self.cfg.paths.mes.clone(), "mes")?;
        let sims = self.path(a.sims, self.cfg.paths.sims.clone(), "sims")?;
        let out = self.path(a.out, self.work("prealign"), "out")?;
        let files = list_shapes(&sims)?;
        let mut inputs = vec![mes_path.clone()];
        inputs.extend(files.iter().cloned());
        let betas = sims.join(BETAS_FILE);
        if betas.exists() {
            inputs.push(betas.clone());
        }
        let settings = json!({ "prealign": self.cfg.prealign, "match": self.cfg.match_ });
        let stage = Stage::new("prealign", &out, &settings, &inputs)?;
        if self.skip(&stage, "prealign")? {
            return Ok(());
        }
        let mes = read_shape(&mes_path)?;
        let dataset = files.iter().map(|f| read_shape(f)).collect::<Result<Vec<_>>>()?;
        let spec = self.cfg.match_spec(mes.kind())?;
        let fit = fit_mean_rigid(&mes, &dataset, &spec, &self.cfg.prealign)?;
        let g = se_exp(&fit.omega)?;
        let mut outputs = Vec::new();
        for (f, shape) in files.iter().zip(&dataset) {
            let path = write_shape(&out, &stem(f), &apply_rigid(shape, &g)?)?;
            outputs.push(path.file_name().unwrap().to_string_lossy().into_owned());
        }
        if betas.exists() {
            std::fs::copy(&betas, out.join(BETAS_FILE))?;
            outputs.push(BETAS_FILE.into());
        }
        let matrix: Vec<Vec<f64>> = g.row_iter().map(|r| r.iter().copied().collect()).collect();
        write_json(
            &out.join("transform.json"),
            &json!({ "omega": fit.omega, "matrix": matrix, "cost": fit.cost, "history": fit.history, "converged": fit.converged }),
        )?;
        outputs.push("transform.json".into());
        eprintln!("prealign: mean cost {:.6e} -> {:.6e}", fit.history[0], fit.cost);
        stage.finish(outputs)
    }

    fn register(&self, a: RegisterArgs) -> Result<()> {
        let mes_path = self.path(a.mes, self.cfg.paths.mes.clone(), "mes")?;
        let sims = self.path(a.sims, self.cfg.paths.sims.clone(), "sims")?;
        let out = self.path(a.out, self.work("register"), "out")?;
        let files = list_shapes(&sims)?;
        let mes = read_shape(&mes_path).with_context(|| format!("reading {}", mes_path.display()))?;
        let shooting = self.cfg.shooting(mes.kind())?;
        let mut inputs = vec![mes_path.clone()];
        inputs.extend(files.iter().cloned());
        if sims.join(BETAS_FILE).exists() {
            inputs.push(sims.join(BETAS_FILE));
        }
        let stage = Stage::new("register", &out, &shooting, &inputs)?;
        if self.skip(&stage, "register")? {
            return Ok(());
        }
        let shapes = files
            .iter()
            .map(|f| read_shape(f).with_context(|| format!("reading {}", f.display())))
            .collect::<Result<Vec<_>>>()?;
        let betas = read_betas(&sims)?;
        if let Some(b) = &betas {
            if b.len() != files.len() {
                bail!("{}: {} rows for {} shapes", sims.join(BETAS_FILE).display(), b.len(), files.len());
            }
        }
        let solutions = register_all(&mes, &shapes, &shooting);
        std::fs::create_dir_all(out.join(SOLUTIONS_DIR))?;
        let p = betas.as_ref().map_or(0, |b| b[0].len());
        let mut header = vec!["sim".to_string()];
        header.extend(beta_header(p));
        header.extend(["energy", "match_residual", "converged", "iterations"].map(String::from));
        let mut table = Table::new(header);
        let mut outputs = vec!["energies.csv".to_string()];
        for (i, (file, sol)) in files.iter().zip(solutions).enumerate() {
            let sol = sol.with_context(|| format!("registering onto {}", file.display()))?;
            let beta = betas.as_ref().map(|b| b[i].clone());
            let rec = velocity_record(beta.as_deref().unwrap_or(&[]), &mes, &sol, &shooting.kernel)?;
            let mut row = vec![i as f64];
            row.extend(beta.iter().flatten());
            row.extend([rec.energy, sol.match_residual, f64::from(u8::from(sol.converged)), sol.iterations as f64]);
            table.rows.push(row);
            let name = format!("{SOLUTIONS_DIR}/{}.json", stem(file));
            let saved = RegistrationRecord {
                source: file.file_name().unwrap().to_string_lossy().into_owned(),
                beta,
                energy: rec.energy,
                hamiltonian: sol.hamiltonian,
                match_residual: sol.match_residual,
                converged: sol.converged,
                iterations: sol.iterations,
                pi0: rec.pi0,
                v0: rec.v0,
            };
            write_json(&out.join(&name), &saved)?;
            outputs.push(name);
        }
        write_table(&out.join("energies.csv"), &table)?;
        let e = table.column("energy").unwrap();
        eprintln!(
            "register: {} shapes, energy range [{:.4e}, {:.4e}]",
            e.len(),
            e.iter().copied().fold(f64::INFINITY, f64::min),
            e.iter().copied().fold(0.0, f64::max)
        );
        stage.finish(outputs)
    }

    fn fit_surrogate(&self, a: FitArgs) -> Result<()> {
        let reg = self.path(a.registrations, self.work("register"), "registrations")?;
        let out = self.path(a.out, self.work("fit-surrogate"), "out")?;
        let dir = reg.join(SOLUTIONS_DIR);
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|f| f.extension().is_some_and(|e| e == "json"));
        files.sort();
        if files.is_empty() {
            bail!("{}: no registrations", dir.display());
        }
        let settings = json!({ "surrogate": self.cfg.surrogate, "seed": self.cfg.seed });
        let stage = Stage::new("fit-surrogate", &out, &settings, &files)?;
        if self.skip(&stage, "fit-surrogate")? {
            return Ok(());
        }
        let records = files
            .iter()
            .map(|f| {
                let r: RegistrationRecord = read_json(f)?;
                let beta = r.beta.ok_or_else(|| Error::Format(format!("{}: no parameters recorded", f.display())))?;
                Ok(VelocityRecord { beta, v0: r.v0, pi0: r.pi0, energy: r.energy })
            })
            .collect::<Result<Vec<_>>>()?;
        let (train, test) = holdout_split(records.len(), self.cfg.surrogate.holdout_fraction, self.cfg.seed)?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
        let model = fit_surrogate(&pick(&train), &self.cfg.surrogate_options())?;
        model.save(&out.join(SURROGATE_FILE))?;
        let mut outputs = vec![SURROGATE_FILE.to_string()];
        if !test.is_empty() {
            let report = validation_report(&model, &pick(&test))?;
            eprintln!(
                "fit-surrogate: {} components, held-out Q2 {:.4}, IAE {:.4}",
                model.latent_dim(),
                report.q2,
                report.iae
            );
            write_json(
                &out.join("validation.json"),
                &ValidationFile { report, train_size: train.len(), held_out: test },
            )?;
            outputs.push("validation.json".into());
        }
        stage.finish(outputs)
    }

    fn calibrate(&self, a: CalibrateArgs) -> Result<()> {
        let out = self.path(a.out, self.work("calibrate"), "out")?;
        let surrogate = a.surrogate.or_else(|| self.work("fit-surrogate").map(|w| w.join(SURROGATE_FILE)));
        let mes_path = if a.prior_only { None } else { Some(self.path(a.mes, self.cfg.paths.mes.clone(), "mes")?) };
        let surrogate = if a.prior_only {
            surrogate.filter(|s| s.exists())
        } else {
            Some(surrogate.ok_or_else(|| usage("--surrogate is required"))?)
        };
        let inputs: Vec<PathBuf> = surrogate.iter().chain(&mes_path).cloned().collect();
        let settings = json!({
            "prior_only": a.prior_only, "priors": self.cfg.priors, "likelihood": self.cfg.likelihood,
            "mcmc": self.cfg.mcmc, "seed": self.cfg.seed, "match": self.cfg.match_,
            "kernel": self.cfg.kernel, "shooting": self.cfg.shooting,
        });
        let stage = Stage::new("calibrate", &out, &settings, &inputs)?;
        if self.skip(&stage, "calibrate")? {
            return Ok(());
        }
        let prior = self.cfg.prior_spec();
        let mcmc = self.cfg.mcmc(self.cfg.seed);
        let model = surrogate.as_deref().map(SurrogateModel::load).transpose()?;
        let p = prior.beta.len();
        let chain = match (&mes_path, &model) {
            (Some(mes_path), Some(model)) => {
                let mes = read_shape(mes_path)?;
                let shooting = self.cfg.shooting(mes.kind())?;
                let post = SurrogatePosterior::new(&prior, &self.cfg.likelihood, model, &mes, &shooting)?;
                sample(&post, &post.marginals(), parameter_names(p, post.xi_dim()), &mcmc)?
            }
            _ => {
                let xi = match &model {
                    Some(m) if self.cfg.likelihood.include_discrepancy => m.latent_dim(),
                    _ => 0,
                };
                let marginals = prior.marginals(xi);
                sample(&PriorDensity(marginals.clone()), &marginals, parameter_names(p, xi), &mcmc)?
            }
        };
        chain.write_csv(&out.join(CHAIN_FILE))?;
        write_summary(&out.join("summary.csv"), &chain)?;
        let (beta, xi, lp) = map_estimate(&chain, p)?;
        write_json(
            &out.join("diagnostics.json"),
            &json!({
                "samples": chain.len(), "acceptance_rate": chain.acceptance_rate, "rhat": chain.rhat,
                "map": { "beta": beta, "xi": xi, "log_post": lp },
            }),
        )?;
        eprintln!("calibrate: {} samples, acceptance {:.3}", chain.len(), chain.acceptance_rate);
        stage.finish(vec![CHAIN_FILE.into(), "summary.csv".into(), "diagnostics.json".into()])
    }

    fn predict(&self, a: PredictArgs) -> Result<()> {
        let out = self.path(a.out, self.work("predict-posterior"), "out")?;
        let surrogate =
            self.path(a.surrogate, self.work("fit-surrogate").map(|w| w.join(SURROGATE_FILE)), "surrogate")?;
        let mes_path = self.path(a.mes, self.cfg.paths.mes.clone(), "mes")?;
        let chain_path = if a.from_prior {
            None
        } else {
            Some(self.path(a.chain, self.work("calibrate").map(|w| w.join(CHAIN_FILE)), "chain")?)
        };
        let draws = a.draws.unwrap_or(self.cfg.predict.draws);
        if draws == 0 {
            return Err(usage("--draws must be positive"));
        }
        let mut inputs = vec![surrogate.clone(), mes_path.clone()];
        inputs.extend(chain_path.iter().cloned());
        let settings = json!({
            "draws": draws, "from_prior": a.from_prior, "priors": self.cfg.priors, "seed": self.cfg.seed,
            "match": self.cfg.match_, "kernel": self.cfg.kernel, "shooting": self.cfg.shooting,
        });
        let stage = Stage::new("predict-posterior", &out, &settings, &inputs)?;
        if self.skip(&stage, "predict-posterior")? {
            return Ok(());
        }
        let model = SurrogateModel::load(&surrogate)?;
        let mes = read_shape(&mes_path)?;
        let shooting = self.cfg.shooting(mes.kind())?;
        let (summary, used) = match &chain_path {
            Some(c) => {
                let chain = PosteriorChain::read_csv(c)?;
                let n = draws.min(chain.len());
                (posterior_predictive(&chain, &model, &mes, &shooting, n)?, n)
            }
            None => {
                let prior = self.cfg.prior_spec();
                if prior.beta.len() != model.param_dim() {
                    return Err(usage(format!("{} priors for {} parameters", prior.beta.len(), model.param_dim())));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
                let betas: Vec<Vec<f64>> =
                    (0..draws).map(|_| prior.beta.iter().map(|p| p.sample(&mut rng)).collect()).collect();
                (predictive_from_draws(&betas, &model, &mes, &shooting)?, draws)
            }
        };
        let outputs = write_predictive(&out, &mes, &summary, used)?;
        eprintln!("predict-posterior: {used} draws, mean pointwise std {:.4e}", summary.mean_std());
        stage.finish(outputs)
    }
}
