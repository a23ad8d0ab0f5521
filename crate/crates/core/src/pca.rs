//! Three-axis principal component view of denoiser latents. The basis is
//! fit on pooled per-cell latent vectors; sampling runs are then reduced to
//! one region-mean point per step and projected, giving a low-dimensional
//! trajectory against the reference cloud.

use crate::field::{GridSpec, TargetRegion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PcaError {
    #[error("need at least {need} samples, got {found}")]
    TooFewSamples { need: usize, found: usize },
    #[error("samples disagree on dimension: {a} vs {b}")]
    RaggedSamples { a: usize, b: usize },
    #[error("covariance rank {rank} cannot span a 3-axis basis")]
    DegenerateBasis { rank: usize },
    #[error("latent length {len} does not divide into {cells} cells")]
    RaggedLatent { len: usize, cells: usize },
    #[error("non-finite value in input")]
    NonFinite,
}

/// Full spectrum of a dense symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order with matching unit eigenvectors
/// as rows. `a` is row-major `n x n` and must be symmetric.
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    assert_eq!(a.len(), n * n, "matrix must be square");
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-14 * norm.max(1.0);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= tol / (n as f64) {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[j * n + j]
            .partial_cmp(&m[i * n + i])
            .expect("eigenvalues are finite")
    });
    let eigvals: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let eigvecs: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| (0..n).map(|k| v[k * n + i]).collect())
        .collect();
    (eigvals, eigvecs)
}

/// Top-three principal axes of a sample cloud.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    pub axes: [Vec<f64>; 3],
    pub eigenvalues: [f64; 3],
}

impl PcaBasis {
    pub fn project(&self, x: &[f64]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (o, axis) in out.iter_mut().zip(&self.axes) {
            *o = x
                .iter()
                .zip(&self.mean)
                .zip(axis)
                .map(|((xi, mi), ai)| (xi - mi) * ai)
                .sum();
        }
        out
    }

    /// Point in the original space spanned by the three axes.
    pub fn reconstruct(&self, p: &[f64; 3]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (coef, axis) in p.iter().zip(&self.axes) {
            for (o, a) in out.iter_mut().zip(axis) {
                *o += coef * a;
            }
        }
        out
    }
}

/// Fit the top-three axes of the sample covariance. Needs at least four
/// samples and covariance rank three.
pub fn fit_pca3(samples: &[Vec<f64>]) -> Result<PcaBasis, PcaError> {
    if samples.len() < 4 {
        return Err(PcaError::TooFewSamples {
            need: 4,
            found: samples.len(),
        });
    }
    let d = samples[0].len();
    for s in samples {
        if s.len() != d {
            return Err(PcaError::RaggedSamples { a: d, b: s.len() });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(PcaError::NonFinite);
        }
    }
    if d < 3 {
        return Err(PcaError::DegenerateBasis { rank: d });
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, x) in mean.iter_mut().zip(s) {
            *m += x / n;
        }
    }
    let mut cov = vec![0.0; d * d];
    for s in samples {
        for i in 0..d {
            let di = s[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += di * (s[j] - mean[j]) / (n - 1.0);
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[i * d + j] = cov[j * d + i];
        }
    }
    let (vals, vecs) = jacobi_eigen(&cov, d);
    let floor = 1e-12 * vals[0].max(1.0);
    let rank = vals.iter().take_while(|&&l| l > floor).count();
    if rank < 3 {
        return Err(PcaError::DegenerateBasis { rank });
    }
    let mut it = vecs.into_iter();
    let axes = [
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
    ];
    Ok(PcaBasis {
        mean,
        axes,
        eigenvalues: [vals[0], vals[1], vals[2]],
    })
}

/// Mean hidden vector over the region cells of one cell-major latent grid.
pub fn region_mean_latent(
    latent: &[f64],
    spec: &GridSpec,
    region: &TargetRegion,
) -> Result<Vec<f64>, PcaError> {
    let cells = spec.cells();
    if latent.is_empty() || latent.len() % cells != 0 {
        return Err(PcaError::RaggedLatent {
            len: latent.len(),
            cells,
        });
    }
    let hidden = latent.len() / cells;
    let mut mean = vec![0.0; hidden];
    for &(r, c) in &region.cells {
        let cell = r * spec.width + c;
        for (m, v) in mean.iter_mut().zip(&latent[cell * hidden..(cell + 1) * hidden]) {
            *m += v;
        }
    }
    let n = region.cells.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// A sampling run projected into the pooled-latent principal space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaTrajectory {
    pub basis: PcaBasis,
    /// One region-mean point per sampling step.
    pub path: Vec<[f64; 3]>,
    /// Region-mean point of the reference run's final step.
    pub reference: [f64; 3],
}

/// Fit the basis on pooled per-cell latents, then project a selected run's
/// per-step latent grids and the reference final-step grid, each collapsed
/// to its region mean.
pub fn pca_trajectory(
    pooled: &[Vec<f64>],
    trace: &[Vec<f64>],
    reference_latent: &[f64],
    spec: &GridSpec,
    region: &TargetRegion,
) -> Result<PcaTrajectory, PcaError> {
    let basis = fit_pca3(pooled)?;
    let path = trace
        .iter()
        .map(|step| Ok(basis.project(&region_mean_latent(step, spec, region)?)))
        .collect::<Result<Vec<_>, PcaError>>()?;
    let reference = basis.project(&region_mean_latent(reference_latent, spec, region)?);
    Ok(PcaTrajectory {
        basis,
        path,
        reference,
    })
}
