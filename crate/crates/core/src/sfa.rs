//! Linear slow feature analysis for bi-temporal change detection (USFA) and
//! its iteratively reweighted variant (ISFA).

use log::{debug, warn};
use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::linalg::{gen_eig, SquareMatrix};
use crate::raster::PixelMatrix;
use crate::segment::chi2_survival;

/// Per-pixel weights in `[0, 1]`.
pub type PixelWeights = Vec<f64>;

/// Fitted projection: the columns of `w_hat` are the `B`-normalized
/// generalized eigenvectors, slowest (smallest eigenvalue) first.
#[derive(Debug, Clone)]
pub struct SfaModel {
    pub w_hat: Array2<f64>,
    pub eigenvalues: Array1<f64>,
}

fn check_pair(x: &PixelMatrix, y: &PixelMatrix) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::shape(format!(
            "bi-temporal inputs differ: {:?} vs {:?}",
            x.dim(),
            y.dim()
        )));
    }
    if x.ncols() == 0 || x.nrows() == 0 {
        return Err(Error::shape("empty pixel matrix"));
    }
    Ok(())
}

fn check_weights(weights: &[f64], n: usize) -> Result<f64> {
    if weights.len() != n {
        return Err(Error::shape(format!("{} weights for {n} pixels", weights.len())));
    }
    if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "weight {i} is {} (must be finite and non-negative)",
            weights[i]
        )));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroWeights);
    }
    Ok(total)
}

/// Weighted second-moment matrices of the change problem:
/// `A = Σ wᵢ (xᵢ−yᵢ)(xᵢ−yᵢ)ᵀ / Σ wᵢ`, `B = Σ wᵢ (xᵢxᵢᵀ + yᵢyᵢᵀ) / (2 Σ wᵢ)`.
pub fn sfa_matrices(
    x: &PixelMatrix,
    y: &PixelMatrix,
    weights: Option<&[f64]>,
) -> Result<(SquareMatrix, SquareMatrix)> {
    check_pair(x, y)?;
    let n = x.ncols();
    let diff = x - y;
    let (a, b) = match weights {
        None => {
            let nf = n as f64;
            (diff.dot(&diff.t()) / nf, (x.dot(&x.t()) + y.dot(&y.t())) / (2.0 * nf))
        }
        Some(w) => {
            let total = check_weights(w, n)?;
            let w = Array1::from(w.to_vec());
            let diff_w = &diff * &w;
            let x_w = x * &w;
            let y_w = y * &w;
            (
                diff_w.dot(&diff.t()) / total,
                (x_w.dot(&x.t()) + y_w.dot(&y.t())) / (2.0 * total),
            )
        }
    };
    Ok(((&a + &a.t()) * 0.5, (&b + &b.t()) * 0.5))
}

fn solve_with_ridge(a: &SquareMatrix, b: &SquareMatrix) -> Result<(crate::linalg::GenEigResult, SquareMatrix)> {
    match gen_eig(a, b) {
        Ok(res) => Ok((res, b.clone())),
        Err(Error::NotPositiveDefinite { pivot }) => {
            let m = b.nrows() as f64;
            let ridge = 1e-10 * b.diag().sum() / m;
            warn!("B is not positive definite (pivot {pivot}); adding ridge {ridge:e}");
            let b = b + &(Array2::<f64>::eye(b.nrows()) * ridge);
            Ok((gen_eig(a, &b)?, b))
        }
        Err(e) => Err(e),
    }
}

pub fn fit_sfa(x: &PixelMatrix, y: &PixelMatrix, weights: Option<&[f64]>) -> Result<SfaModel> {
    let (a, b) = sfa_matrices(x, y, weights)?;
    fit_from_matrices(&a, &b)
}

/// Solves `A W = B W Λ` and rescales each column to `wᵀ B w = 1`.
pub fn fit_from_matrices(a: &SquareMatrix, b: &SquareMatrix) -> Result<SfaModel> {
    let (res, b_used) = solve_with_ridge(a, b)?;
    let mut w_hat = res.eigenvectors;
    for mut col in w_hat.axis_iter_mut(Axis(1)) {
        let norm = col.dot(&b_used.dot(&col)).sqrt();
        if norm > 0.0 {
            col.mapv_inplace(|v| v / norm);
        }
    }
    Ok(SfaModel {
        w_hat,
        eigenvalues: res.eigenvalues,
    })
}

/// `D = ŵᵀX − ŵᵀY`.
pub fn transform_diff(model: &SfaModel, x: &PixelMatrix, y: &PixelMatrix) -> Result<PixelMatrix> {
    check_pair(x, y)?;
    if model.w_hat.nrows() != x.nrows() {
        return Err(Error::shape(format!(
            "model expects {} bands, input has {}",
            model.w_hat.nrows(),
            x.nrows()
        )));
    }
    Ok(model.w_hat.t().dot(&(x - y)))
}

#[derive(Debug, Clone)]
pub struct IsfaFit {
    pub model: SfaModel,
    pub weights: PixelWeights,
    pub iterations: usize,
}

/// Chi-square statistic per pixel using weighted band variances
/// `σⱼ² = Σ wᵢ Dⱼᵢ² / Σ wᵢ`; returns the statistics and the effective dof.
pub fn weighted_chi2(d: &PixelMatrix, weights: &[f64]) -> (Vec<f64>, usize) {
    let total: f64 = weights.iter().sum();
    let mut stats = vec![0.0; d.ncols()];
    let mut dof = 0;
    for row in d.axis_iter(Axis(0)) {
        let var = row.iter().zip(weights).map(|(v, w)| w * v * v).sum::<f64>() / total;
        if var <= 0.0 {
            continue;
        }
        dof += 1;
        for (t, v) in stats.iter_mut().zip(row.iter()) {
            *t += v * v / var;
        }
    }
    (stats, dof)
}

/// No-change probability of each pixel under the χ² model.
pub fn isfa_weights(d: &PixelMatrix, weights: &[f64]) -> PixelWeights {
    let (stats, dof) = weighted_chi2(d, weights);
    if dof == 0 {
        return vec![1.0; stats.len()];
    }
    stats.iter().map(|&t| chi2_survival(t, dof)).collect()
}

pub const ISFA_MAX_ITER: usize = 50;
pub const ISFA_TOL: f64 = 1e-6;

/// Iteratively reweighted SFA. Starts from the unweighted fit; each
/// iteration derives weights from the current model and refits.
pub fn fit_isfa(x: &PixelMatrix, y: &PixelMatrix, max_iter: usize, tol: f64) -> Result<IsfaFit> {
    if max_iter == 0 {
        return Err(Error::InvalidParameter("max_iter must be at least 1".into()));
    }
    let mut model = fit_sfa(x, y, None)?;
    let mut weights = vec![1.0; x.ncols()];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let d = transform_diff(&model, x, y)?;
        let next = isfa_weights(&d, &weights);
        if next.iter().all(|&w| w < 1e-12) {
            return Err(Error::DegenerateWeights);
        }
        let delta = next
            .iter()
            .zip(&weights)
            .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()));
        weights = next;
        model = fit_sfa(x, y, Some(&weights))?;
        debug!("ISFA iteration {iterations}: max weight change {delta:e}");
        if delta < tol {
            break;
        }
    }
    Ok(IsfaFit {
        model,
        weights,
        iterations,
    })
}
