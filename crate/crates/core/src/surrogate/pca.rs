//! Principal component analysis of flattened outputs through the `n x n`
//! Gram matrix, which is cheap when there are far fewer records than
//! output dimensions.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::hexf;

/// Variance below this fraction of the largest eigenvalue is treated as
/// numerical noise.
const RELATIVE_EIGEN_FLOOR: f64 = 1e-13;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    #[serde(with = "hexf::vec")]
    pub mean: Vec<f64>,
    /// `P` orthonormal rows of length `D`.
    #[serde(with = "hexf::mat")]
    pub components: Vec<Vec<f64>>,
    #[serde(with = "hexf::vec")]
    pub explained_variance: Vec<f64>,
    /// Share of the total variance explained by the retained components.
    #[serde(with = "hexf::scalar")]
    pub variance_fraction: f64,
    /// Per-dimension variance of the training data left outside the span.
    #[serde(with = "hexf::vec")]
    pub residual_variance: Vec<f64>,
    /// Set when the data had no variance at all.
    pub degenerate: bool,
    /// Images of the components under a second, linearly related data set
    /// (the momenta that generated the velocities), if one was supplied.
    pub preimage: Option<Preimage>,
}

/// Mean and components transported to a paired data set: if every record
/// satisfies `x_i = A y_i` for a linear `A`, then
/// `A (preimage.mean + Σ u_j preimage.components[j]) = mean + Σ u_j components[j]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preimage {
    #[serde(with = "hexf::vec")]
    pub mean: Vec<f64>,
    #[serde(with = "hexf::mat")]
    pub components: Vec<Vec<f64>>,
}

impl PcaBasis {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Latent scores `C (x - mean)`.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components.iter().map(|c| c.iter().zip(x).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum()).collect()
    }

    /// `mean + Σ u_j components[j]`.
    pub fn reconstruct(&self, u: &[f64]) -> Vec<f64> {
        combine(&self.mean, &self.components, u)
    }

    /// `C mean`. Adding it to a centred score gives coordinates in which
    /// the zero output sits at the origin.
    pub fn anchor(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.iter().zip(&self.mean).map(|(c, m)| c * m).sum()).collect()
    }

    pub fn reconstruct_preimage(&self, u: &[f64]) -> Option<Vec<f64>> {
        self.preimage.as_ref().map(|p| combine(&p.mean, &p.components, u))
    }
}

fn combine(mean: &[f64], components: &[Vec<f64>], u: &[f64]) -> Vec<f64> {
    let mut out = mean.to_vec();
    for (c, &w) in components.iter().zip(u) {
        for (o, c) in out.iter_mut().zip(c) {
            *o += w * c;
        }
    }
    out
}

fn centred(rows: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = (rows.len(), rows[0].len());
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    (mean, x)
}

/// Keeps the smallest number of components explaining `variance_fraction`
/// of the variance. `paired` rows, when given, get a [`Preimage`].
pub fn fit_pca(rows: &[Vec<f64>], variance_fraction: f64, paired: Option<&[Vec<f64>]>) -> Result<PcaBasis> {
    let n = rows.len();
    if n < 2 {
        return Err(invalid("PCA needs at least two records"));
    }
    if !(variance_fraction > 0.0 && variance_fraction <= 1.0) {
        return Err(invalid("variance fraction must lie in (0, 1]"));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d || r.iter().any(|v| !v.is_finite())) {
        return Err(invalid("PCA records must be finite and of equal positive length"));
    }
    if let Some(p) = paired {
        let e = p.first().map_or(0, Vec::len);
        if p.len() != n || e == 0 || p.iter().any(|r| r.len() != e) {
            return Err(invalid("paired records must match the PCA records"));
        }
    }
    let (mean, x) = centred(rows);
    let gram = &x * x.transpose();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let total: f64 = x.iter().map(|v| v * v).sum();
    let paired_centred = paired.map(centred);

    if top <= 0.0 || total <= 0.0 {
        let mut e1 = vec![0.0; d];
        e1[0] = 1.0;
        let preimage = paired_centred.map(|(m, y)| Preimage { components: vec![vec![0.0; y.ncols()]], mean: m });
        return Ok(PcaBasis {
            mean,
            components: vec![e1],
            explained_variance: vec![0.0],
            variance_fraction: 1.0,
            residual_variance: vec![0.0; d],
            degenerate: true,
            preimage,
        });
    }

    let mut components: Vec<Vec<f64>> = Vec::new();
    let mut pre_components = Vec::new();
    let mut explained = Vec::new();
    let mut acc = 0.0;
    for &k in &order {
        let e = eig.eigenvalues[k];
        if e <= RELATIVE_EIGEN_FLOOR * top || acc >= variance_fraction * total * (1.0 - 1e-12) {
            break;
        }
        let u = eig.eigenvectors.column(k);
        let scale = 1.0 / e.sqrt();
        let mut c: Vec<f64> = (x.transpose() * u).iter().map(|v| v * scale).collect();
        let mut pc: Option<Vec<f64>> =
            paired_centred.as_ref().map(|(_, y)| (y.transpose() * u).iter().map(|v| v * scale).collect());
        // Re-orthogonalise against earlier components to repair rounding.
        for prev in &components {
            let dot: f64 = prev.iter().zip(&c).map(|(a, b)| a * b).sum();
            c.iter_mut().zip(prev).for_each(|(ci, pi)| *ci -= dot * pi);
        }
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        c.iter_mut().for_each(|v| *v /= norm);
        let peak = c.iter().fold(0.0f64, |m, &v| if v.abs() > m.abs() { v } else { m });
        if peak < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
            if let Some(pc) = pc.as_mut() {
                pc.iter_mut().for_each(|v| *v = -*v);
            }
        }
        acc += e;
        explained.push(e / (n - 1) as f64);
        components.push(c);
        pre_components.push(pc);
    }

    let basis = PcaBasis {
        residual_variance: vec![0.0; d],
        mean,
        components,
        explained_variance: explained,
        variance_fraction: (acc / total).min(1.0),
        degenerate: false,
        preimage: paired_centred.map(|(m, _)| Preimage {
            mean: m,
            components: pre_components.into_iter().map(|c| c.expect("paired component")).collect(),
        }),
    };
    let mut residual = vec![0.0; d];
    for r in rows {
        let back = basis.reconstruct(&basis.project(r));
        for ((acc, a), b) in residual.iter_mut().zip(r).zip(back) {
            *acc += (a - b) * (a - b) / (n - 1) as f64;
        }
    }
    Ok(PcaBasis { residual_variance: residual, ..basis })
}
