//! GP-PCA surrogate of the map from simulation parameters to initial
//! velocity fields.
//!
//! Velocities are reduced with PCA and every latent score gets its own GP.
//! Latent coordinates are the plain projections `C x` (no centring), so the
//! zero velocity field sits at the origin of latent space.

pub mod gp;
pub mod metrics;
pub mod pca;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::hexf;

pub use gp::{fit_gp, GpModel, GpOptions};
pub use metrics::{validation_report, Predictor, ValidationReport};
pub use pca::{fit_pca, PcaBasis};

pub const SURROGATE_FORMAT: &str = "diffcal-surrogate";
pub const SURROGATE_VERSION: u32 = 1;

/// One simulation: its parameters, the initial velocity of the geodesic
/// from the measurement to its output, the matching momentum and the
/// deformation energy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityRecord {
    pub beta: Vec<f64>,
    pub v0: Vec<f64>,
    /// Empty when the momentum was not kept.
    pub pi0: Vec<f64>,
    pub energy: f64,
}

/// Drops the `ceil(fraction n)` records with the largest energy. Among
/// equal energies the later record goes first. The rest keep their order.
pub fn filter_worst(records: &[VelocityRecord], fraction: f64) -> Result<Vec<VelocityRecord>> {
    if records.is_empty() {
        return Err(invalid("no records to filter"));
    }
    if !(0.0..1.0).contains(&fraction) {
        return Err(invalid("filter fraction must lie in [0, 1)"));
    }
    let n = records.len();
    let drop = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| records[b].energy.total_cmp(&records[a].energy).then(b.cmp(&a)));
    let mut dropped = vec![false; n];
    for &i in order.iter().take(drop.min(n - 1)) {
        dropped[i] = true;
    }
    Ok(records.iter().zip(dropped).filter(|(_, d)| !d).map(|(r, _)| r.clone()).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateOptions {
    pub filter_fraction: f64,
    pub variance_fraction: f64,
    pub gp: GpOptions,
}

impl Default for SurrogateOptions {
    fn default() -> Self {
        Self { filter_fraction: 0.1, variance_fraction: 0.99, gp: GpOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub records: usize,
    pub filtered: usize,
    pub components: usize,
    #[serde(with = "hexf::scalar")]
    pub variance_fraction: f64,
    #[serde(with = "hexf::vec")]
    pub log_marginal_likelihoods: Vec<f64>,
    #[serde(with = "hexf::vec")]
    pub nuggets: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub basis: PcaBasis,
    pub gps: Vec<GpModel>,
    /// Latent code of the lowest-energy training record.
    #[serde(with = "hexf::vec")]
    pub u_min: Vec<f64>,
    pub summary: TrainingSummary,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SurrogateFile {
    format: String,
    version: u32,
    model: SurrogateModel,
}

/// Filters, reduces and regresses `records`. Momenta are carried through
/// the PCA when every record has one.
pub fn fit_surrogate(records: &[VelocityRecord], opts: &SurrogateOptions) -> Result<SurrogateModel> {
    let kept = filter_worst(records, opts.filter_fraction)?;
    if kept.len() < 3 {
        return Err(invalid("a surrogate needs at least three records after filtering"));
    }
    let p = kept[0].beta.len();
    if kept.iter().any(|r| r.beta.len() != p || !r.energy.is_finite()) {
        return Err(invalid("records disagree on the parameter dimension"));
    }
    let v: Vec<Vec<f64>> = kept.iter().map(|r| r.v0.clone()).collect();
    let pi: Vec<Vec<f64>> = kept.iter().map(|r| r.pi0.clone()).collect();
    let paired = kept.iter().all(|r| !r.pi0.is_empty()).then_some(pi.as_slice());
    let basis = fit_pca(&v, opts.variance_fraction, paired)?;

    let inputs: Vec<Vec<f64>> = kept.iter().map(|r| r.beta.clone()).collect();
    let latent: Vec<Vec<f64>> = v.iter().map(|x| latent_of(&basis, x)).collect();
    let gps = (0..basis.len())
        .into_par_iter()
        .map(|j| {
            let targets: Vec<f64> = latent.iter().map(|u| u[j]).collect();
            let gp_opts = GpOptions { seed: opts.gp.seed.wrapping_add(j as u64), ..opts.gp };
            fit_gp(&inputs, &targets, &gp_opts)
        })
        .collect::<Result<Vec<_>>>()?;

    let best = (0..kept.len()).min_by(|&a, &b| kept[a].energy.total_cmp(&kept[b].energy)).expect("non-empty");
    let summary = TrainingSummary {
        records: records.len(),
        filtered: records.len() - kept.len(),
        components: basis.len(),
        variance_fraction: basis.variance_fraction,
        log_marginal_likelihoods: gps.iter().map(GpModel::log_marginal_likelihood).collect(),
        nuggets: gps.iter().map(GpModel::nugget).collect(),
    };
    Ok(SurrogateModel { u_min: latent[best].clone(), basis, gps, summary })
}

fn latent_of(basis: &PcaBasis, x: &[f64]) -> Vec<f64> {
    basis.project(x).iter().zip(basis.anchor()).map(|(u, a)| u + a).collect()
}

impl SurrogateModel {
    pub fn latent_dim(&self) -> usize {
        self.gps.len()
    }

    pub fn param_dim(&self) -> usize {
        self.gps.first().map_or(0, GpModel::input_dim)
    }

    /// Latent code of an output vector.
    pub fn encode(&self, v0: &[f64]) -> Vec<f64> {
        latent_of(&self.basis, v0)
    }

    /// GP posterior means and variances of the latent code at `beta`.
    pub fn predict_latent(&self, beta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        self.gps.iter().map(|g| g.predict(beta)).unzip()
    }

    /// Means, variances and their Jacobians (row `j` holds the gradient of
    /// component `j`).
    #[allow(clippy::type_complexity)]
    pub fn predict_latent_with_gradient(&self, beta: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut out = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for g in &self.gps {
            let (m, v, dm, dv) = g.predict_with_gradient(beta);
            out.0.push(m);
            out.1.push(v);
            out.2.push(dm);
            out.3.push(dv);
        }
        out
    }

    fn centred(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(self.basis.anchor()).map(|(u, a)| u - a).collect()
    }

    /// Velocity field with latent code `u`.
    pub fn reconstruct_v0(&self, u: &[f64]) -> Vec<f64> {
        self.basis.reconstruct(&self.centred(u))
    }

    /// Momentum generating [`reconstruct_v0`](Self::reconstruct_v0)`(u)`,
    /// available when the model was trained with momenta.
    pub fn reconstruct_pi0(&self, u: &[f64]) -> Option<Vec<f64>> {
        self.basis.reconstruct_preimage(&self.centred(u))
    }

    pub fn to_json(&self) -> Result<String> {
        let file = SurrogateFile { format: SURROGATE_FORMAT.into(), version: SURROGATE_VERSION, model: self.clone() };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let head: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if head.get("format").and_then(|f| f.as_str()) != Some(SURROGATE_FORMAT) {
            return Err(Error::Format("not a surrogate model document".into()));
        }
        match head.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == SURROGATE_VERSION as u64 => {}
            other => {
                return Err(Error::Format(format!(
                    "unsupported surrogate version {other:?}, expected {SURROGATE_VERSION}"
                )))
            }
        }
        let file: SurrogateFile = serde_json::from_value(head).map_err(|e| Error::Format(e.to_string()))?;
        let m = file.model;
        if m.gps.len() != m.basis.len() || m.u_min.len() != m.gps.len() {
            return Err(Error::Format("surrogate components are inconsistent".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

impl Predictor for SurrogateModel {
    fn predict(&self, beta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (u, s2) = self.predict_latent(beta);
        let mean = self.reconstruct_v0(&u);
        let mut var = self.basis.residual_variance.clone();
        for (c, s2) in self.basis.components.iter().zip(&s2) {
            for (v, c) in var.iter_mut().zip(c) {
                *v += c * c * s2;
            }
        }
        (mean, var)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(energy: f64, tag: f64) -> VelocityRecord {
        VelocityRecord { beta: vec![tag], v0: vec![tag], pi0: vec![], energy }
    }

    fn tags(rs: &[VelocityRecord]) -> Vec<f64> {
        rs.iter().map(|r| r.beta[0]).collect()
    }

    #[test]
    fn filter_drops_the_most_energetic() {
        let rs: Vec<_> = (0..10).map(|i| rec(((i * 7) % 10) as f64, i as f64)).collect();
        let kept = filter_worst(&rs, 0.1).unwrap();
        assert_eq!(kept.len(), 9);
        assert!(!tags(&kept).contains(&7.0));
        assert_eq!(filter_worst(&rs, 0.0).unwrap(), rs);
        assert!(filter_worst(&[], 0.1).is_err());
        assert!(filter_worst(&rs, 1.0).is_err());
    }

    #[test]
    fn filter_ties_keep_the_earlier_record() {
        // Four tied records, drop ceil(0.25 * 4) = 1: the last one goes,
        // whatever the order they arrive in.
        let base = [0.0, 1.0, 2.0, 3.0];
        let perms = [[0, 1, 2, 3], [3, 2, 1, 0], [1, 3, 0, 2], [2, 0, 3, 1]];
        for perm in perms {
            let rs: Vec<_> = perm.iter().map(|&i| rec(5.0, base[i])).collect();
            let kept = filter_worst(&rs, 0.25).unwrap();
            let expected: Vec<f64> = rs[..3].iter().map(|r| r.beta[0]).collect();
            assert_eq!(tags(&kept), expected);
        }
    }

    fn linear_records(n: usize) -> Vec<VelocityRecord> {
        // v = A π with π depending smoothly on β.
        (0..n)
            .map(|i| {
                let b = [(i as f64 * 0.618) % 1.0, (i as f64 * 0.377) % 1.0];
                let pi = vec![b[0].sin(), b[1] * b[0], b[1].cos(), 0.3 * b[0]];
                let v = vec![pi[0], pi[1], pi[2], pi[3], pi[0] + pi[1], pi[2] - 2.0 * pi[3]];
                VelocityRecord { beta: b.to_vec(), energy: pi.iter().map(|p| p * p).sum(), v0: v, pi0: pi }
            })
            .collect()
    }

    #[test]
    fn training_inputs_are_reproduced() {
        let rs = linear_records(25);
        let opts = SurrogateOptions { filter_fraction: 0.0, ..SurrogateOptions::default() };
        let m = fit_surrogate(&rs, &opts).unwrap();
        for r in &rs {
            let (u, _) = m.predict_latent(&r.beta);
            let target = m.encode(&r.v0);
            let scale = target.iter().map(|t| t * t).sum::<f64>().sqrt();
            let err = u.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(err < 1e-3 * scale.max(1e-3), "{err} vs {scale}");
        }
        assert!(m.encode(&[0.0; 6]).iter().all(|u| *u == 0.0));
        // With no truncation the origin decodes to the zero field too.
        let opts = SurrogateOptions { filter_fraction: 0.0, variance_fraction: 1.0, ..SurrogateOptions::default() };
        let m = fit_surrogate(&rs, &opts).unwrap();
        let zero = m.reconstruct_v0(&vec![0.0; m.latent_dim()]);
        assert!(zero.iter().all(|v| v.abs() < 1e-12));
        assert!(m.reconstruct_pi0(&vec![0.0; m.latent_dim()]).unwrap().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn variance_grows_away_from_data() {
        let m = fit_surrogate(&linear_records(20), &SurrogateOptions::default()).unwrap();
        let (_, near) = m.predict_latent(&[0.5, 0.5]);
        let (_, far) = m.predict_latent(&[6.0, -5.0]);
        for (a, b) in near.iter().zip(&far) {
            assert!(a <= b);
        }
        let (u0, _) = m.predict_latent(&[0.3, 0.4]);
        let (u1, _) = m.predict_latent(&[0.3 + 1e-8, 0.4]);
        assert!(u0.iter().zip(&u1).all(|(a, b)| (a - b).abs() < 1e-5));
    }

    #[test]
    fn u_min_is_the_lowest_energy_record() {
        let rs = linear_records(20);
        let m = fit_surrogate(&rs, &SurrogateOptions::default()).unwrap();
        let best = rs.iter().min_by(|a, b| a.energy.total_cmp(&b.energy)).unwrap();
        assert_eq!(m.u_min, m.encode(&best.v0));
    }

    #[test]
    fn fit_is_invariant_to_record_order() {
        let rs = linear_records(15);
        let mut rev = rs.clone();
        rev.reverse();
        let opts = SurrogateOptions::default();
        let (a, b) = (fit_surrogate(&rs, &opts).unwrap(), fit_surrogate(&rev, &opts).unwrap());
        for beta in [[0.2, 0.7], [0.9, 0.1]] {
            let (ua, _) = a.predict_latent(&beta);
            let (ub, _) = b.predict_latent(&beta);
            assert!(ua.iter().zip(&ub).all(|(x, y)| (x - y).abs() < 1e-4 * (1.0 + x.abs())));
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let m = fit_surrogate(&linear_records(12), &SurrogateOptions::default()).unwrap();
        let text = m.to_json().unwrap();
        let back = SurrogateModel::from_json(&text).unwrap();
        assert_eq!(back, m);
        let beta = [0.123, 0.456];
        let (a, b) = (m.predict(&beta), back.predict(&beta));
        assert!(a.0.iter().zip(&b.0).all(|(x, y)| x.to_bits() == y.to_bits()));
        let bumped = text.replacen("\"version\": 1", "\"version\": 2", 1);
        assert!(matches!(SurrogateModel::from_json(&bumped), Err(Error::Format(_))));
        assert!(SurrogateModel::from_json("{\"format\": \"other\", \"version\": 1}").is_err());
    }
}
