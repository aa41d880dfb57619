//! PCA / SVD estimates of the measurement subspace and the rank heuristic.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{linalg, Error, Result};

#[derive(Debug, Clone)]
pub struct PcaModel {
    /// Eigenvectors of the sample covariance, one per column, ordered like
    /// `eigenvalues`.
    pub transform: DMatrix<f64>,
    /// Descending, negatives from round-off clipped to zero.
    pub eigenvalues: DVector<f64>,
    pub mean: DVector<f64>,
    pub rows: usize,
}

/// Sample covariance with `1/(t-1)` normalization. Without centering this is
/// the raw second moment.
pub fn covariance(z: &DMatrix<f64>, center: bool) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (t, m) = z.shape();
    if t < 2 {
        return Err(Error::contract(format!("covariance needs at least 2 rows, got {t}")));
    }
    let mean = if center { z.row_mean().transpose() } else { DVector::zeros(m) };
    let mut zc = z.clone();
    if center {
        for mut row in zc.row_iter_mut() {
            row -= mean.transpose();
        }
    }
    let mut cov = zc.tr_mul(&zc) / (t - 1) as f64;
    // Exact symmetry for the eigen-solver.
    cov = (&cov + cov.transpose()) * 0.5;
    Ok((cov, mean))
}

pub fn fit_pca(z: &DMatrix<f64>, center: bool) -> Result<PcaModel> {
    let (cov, mean) = covariance(z, center)?;
    let (mut values, mut vectors) = linalg::symmetric_eigen_desc(&cov)?;
    values.apply(|v| *v = v.max(0.0));
    linalg::canonical_signs(&mut vectors);
    Ok(PcaModel { transform: vectors, eigenvalues: values, mean, rows: z.nrows() })
}

/// How the cumulative eigenvalue fraction is compared against the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankRule {
    /// Smallest `k` whose fraction reaches `gamma`.
    #[default]
    CumulativeFraction,
    /// Keep adding components while the fraction is `<= gamma`.
    StrictExceed,
}

/// Number of influential components: the smallest `k` whose leading
/// eigenvalues hold a `gamma` share of the total.
pub fn select_rank(v: &DVector<f64>, gamma: f64, rule: RankRule) -> Result<usize> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::contract(format!("gamma {gamma} is outside (0, 1]")));
    }
    if v.as_slice().windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::contract("eigenvalues must be sorted in descending order"));
    }
    let total: f64 = v.iter().map(|x| x.max(0.0)).sum();
    if total <= 0.0 {
        return Err(Error::contract("all eigenvalues are zero"));
    }
    let mut acc = 0.0;
    for (k, x) in v.iter().enumerate() {
        acc += x.max(0.0);
        let frac = acc / total;
        let done = match rule {
            RankRule::CumulativeFraction => frac >= gamma,
            RankRule::StrictExceed => frac > gamma,
        };
        if done {
            return Ok(k + 1);
        }
    }
    // Round-off can keep the last fraction a hair under 1.
    Ok(v.iter().rposition(|x| *x > 0.0).map_or(v.len(), |k| k + 1))
}

#[derive(Debug, Clone)]
pub struct ReducedBasis {
    /// `m x rho`, orthonormal columns.
    pub h_pca: DMatrix<f64>,
    pub rho: usize,
    /// Threshold that picked `rho`, if the heuristic was used.
    pub gamma_used: Option<f64>,
}

pub fn reduced_basis(model: &PcaModel, rho: usize) -> Result<ReducedBasis> {
    let m = model.transform.ncols();
    if rho == 0 || rho > m {
        return Err(Error::contract(format!("rho = {rho} is outside 1..={m}")));
    }
    Ok(ReducedBasis { h_pca: model.transform.columns(0, rho).into_owned(), rho, gamma_used: None })
}

/// Leading left singular vectors of the sample covariance.
pub fn svd_subspace(z: &DMatrix<f64>, rho: usize, center: bool) -> Result<ReducedBasis> {
    let (cov, _) = covariance(z, center)?;
    let m = cov.nrows();
    if rho == 0 || rho > m {
        return Err(Error::contract(format!("rho = {rho} is outside 1..={m}")));
    }
    let mut u = linalg::thin_svd(&cov)?.u.columns(0, rho).into_owned();
    linalg::canonical_signs(&mut u);
    Ok(ReducedBasis { h_pca: u, rho, gamma_used: None })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisMethod {
    Pca,
    Svd,
}

/// Rank used when building a blind basis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankChoice {
    Fixed(usize),
    Heuristic { gamma: f64, rule: RankRule },
}

/// Fit PCA, pick the rank, and return the basis from the requested method.
pub fn blind_basis(
    z: &DMatrix<f64>,
    method: BasisMethod,
    rank: RankChoice,
    center: bool,
) -> Result<(ReducedBasis, PcaModel)> {
    let model = fit_pca(z, center)?;
    let (rho, gamma) = match rank {
        RankChoice::Fixed(r) => (r, None),
        RankChoice::Heuristic { gamma, rule } => (select_rank(&model.eigenvalues, gamma, rule)?, Some(gamma)),
    };
    let mut basis = match method {
        BasisMethod::Pca => reduced_basis(&model, rho)?,
        BasisMethod::Svd => svd_subspace(z, rho, center)?,
    };
    basis.gamma_used = gamma;
    Ok((basis, model))
}
