//! Held-out validation metrics for probabilistic predictors of vector
//! outputs.
//!
//! Per-dimension scores are combined with weights proportional to the
//! held-out variance of each dimension, so constant dimensions do not
//! count and the aggregated Q² equals `1 - ΣSSE / ΣSST`.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use super::VelocityRecord;
use crate::error::{invalid, Result};

/// Credibility levels for the coverage curve; the endpoints are pinned to
/// `P(0) = 0` and `P(1) = 1`.
const COVERAGE_LEVELS: usize = 99;

pub trait Predictor {
    /// Predictive mean and variance of every output dimension.
    fn predict(&self, beta: &[f64]) -> (Vec<f64>, Vec<f64>);
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub nrmse: f64,
    pub nmae: f64,
    pub q2: f64,
    pub crps: f64,
    /// Integrated absolute gap between nominal and empirical coverage.
    pub iae: f64,
    /// Relative root mean squared error, in percent.
    pub rrmse: f64,
    pub held_out: usize,
}

fn crps_gaussian(y: f64, mu: f64, s: f64) -> f64 {
    if s <= 0.0 {
        return (y - mu).abs();
    }
    let n = Normal::standard();
    let z = (y - mu) / s;
    s * (z * (2.0 * n.cdf(z) - 1.0) + 2.0 * n.pdf(z) - 1.0 / std::f64::consts::PI.sqrt())
}

/// Area between the empirical coverage of central intervals and the
/// diagonal, by the trapezoid rule.
fn coverage_gap(errors: &[f64], sds: &[f64]) -> f64 {
    let n = Normal::standard();
    let mut alphas = vec![0.0];
    let mut cover = vec![0.0];
    for k in 1..=COVERAGE_LEVELS {
        let a = k as f64 / (COVERAGE_LEVELS + 1) as f64;
        let half = n.inverse_cdf(0.5 + a / 2.0);
        let inside = errors.iter().zip(sds).filter(|(e, s)| e.abs() <= half * **s).count();
        alphas.push(a);
        cover.push(inside as f64 / errors.len() as f64);
    }
    alphas.push(1.0);
    cover.push(1.0);
    alphas
        .windows(2)
        .zip(cover.windows(2))
        .map(|(a, p)| 0.5 * (a[1] - a[0]) * ((p[0] - a[0]).abs() + (p[1] - a[1]).abs()))
        .sum()
}

pub fn validation_report(model: &dyn Predictor, held_out: &[VelocityRecord]) -> Result<ValidationReport> {
    let n = held_out.len();
    if n < 5 {
        return Err(invalid("validation needs at least five held-out records"));
    }
    let d = held_out[0].v0.len();
    if held_out.iter().any(|r| r.v0.len() != d) {
        return Err(invalid("held-out records disagree on the output dimension"));
    }
    let preds: Vec<(Vec<f64>, Vec<f64>)> = held_out.iter().map(|r| model.predict(&r.beta)).collect();
    if preds.iter().any(|(m, v)| m.len() != d || v.len() != d) {
        return Err(invalid("predictor output dimension does not match the records"));
    }

    let (mut sse_total, mut sst_total, mut sq_norm) = (0.0, 0.0, 0.0);
    let (mut nrmse, mut nmae, mut crps, mut iae) = (0.0, 0.0, 0.0, 0.0);
    let mut weighted = Vec::new();
    for k in 0..d {
        let y: Vec<f64> = held_out.iter().map(|r| r.v0[k]).collect();
        let mean = y.iter().sum::<f64>() / n as f64;
        let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
        let errors: Vec<f64> = y.iter().zip(&preds).map(|(y, p)| y - p.0[k]).collect();
        let sse: f64 = errors.iter().map(|e| e * e).sum();
        sse_total += sse;
        sst_total += sst;
        sq_norm += y.iter().map(|v| v * v).sum::<f64>();
        if sst <= 0.0 {
            continue;
        }
        let sd = (sst / n as f64).sqrt();
        let sds: Vec<f64> = preds.iter().map(|p| p.1[k].max(0.0).sqrt()).collect();
        let c: f64 = y.iter().zip(&preds).zip(&sds).map(|((y, p), s)| crps_gaussian(*y, p.0[k], *s)).sum();
        weighted.push((
            sst,
            (sse / sst).sqrt(),
            errors.iter().map(|e| e.abs()).sum::<f64>() / n as f64 / sd,
            c / n as f64 / sd,
            coverage_gap(&errors, &sds),
        ));
    }
    for (w, a, b, c, e) in &weighted {
        let w = w / sst_total;
        nrmse += w * a;
        nmae += w * b;
        crps += w * c;
        iae += w * e;
    }
    let q2 = if sst_total > 0.0 { 1.0 - sse_total / sst_total } else { 0.0 };
    let rrmse = if sq_norm > 0.0 { 100.0 * (sse_total / sq_norm).sqrt() } else { 0.0 };
    Ok(ValidationReport { nrmse, nmae, q2, crps, iae, rrmse, held_out: n })
}
