//! Change intensity and thresholding.

use ndarray::Axis;
use serde::Serialize;
use statrs::function::gamma::gamma_ur;

use crate::error::{Error, Result};
use crate::eval::{confusion, metrics, BinaryMask, Criterion, GroundTruth, Label, MetricBundle};
use crate::raster::PixelMatrix;

pub const OTSU_BINS: usize = 256;

/// Per-pixel chi-square change intensity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntensityMap {
    pub values: Vec<f64>,
    /// Number of bands that contributed (zero-variance bands are skipped).
    pub dof: usize,
}

/// `chi2_i = Σ_j D_ji² / σ_j²` with `σ_j²` the population variance of row `j`.
pub fn chi2_intensity(d: &PixelMatrix) -> Result<IntensityMap> {
    let n = d.ncols();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let variances = d.var_axis(Axis(1), 0.0);
    let mut values = vec![0.0; n];
    let mut dof = 0;
    for (row, &var) in d.axis_iter(Axis(0)).zip(variances.iter()) {
        if var <= 0.0 {
            continue;
        }
        dof += 1;
        for (acc, &x) in values.iter_mut().zip(row.iter()) {
            *acc += x * x / var;
        }
    }
    if dof == 0 {
        return Err(Error::AllBandsDegenerate);
    }
    Ok(IntensityMap { values, dof })
}

/// Upper-tail probability `P(χ²_dof > x)`, i.e. the regularized upper
/// incomplete gamma function `Q(dof/2, x/2)`.
pub fn chi2_survival(x: f64, dof: usize) -> f64 {
    assert!(dof > 0, "chi-square needs at least one degree of freedom");
    if !(x > 0.0) {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    gamma_ur(dof as f64 / 2.0, x / 2.0).clamp(0.0, 1.0)
}

fn value_range(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: values.len(),
        });
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return Err(Error::ConstantInput);
    }
    Ok((lo, hi))
}

/// Equal-width histogram over `[lo, hi]`; the maximum lands in the last bin.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<u64> {
    let width = (hi - lo) / bins as f64;
    let mut hist = vec![0u64; bins];
    for &v in values {
        let k = ((v - lo) / width).floor();
        let k = if k < 0.0 { 0 } else { (k as usize).min(bins - 1) };
        hist[k] += 1;
    }
    hist
}

/// Index `k` maximizing the between-class variance when bins `0..=k` form
/// the lower class. Near-ties (relative 1e-12) resolve to the lower index.
pub fn otsu_bin(hist: &[u64]) -> usize {
    let total: i128 = hist.iter().map(|&h| h as i128).sum();
    let total_sum: i128 = hist.iter().enumerate().map(|(i, &h)| i as i128 * h as i128).sum();
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut w0: i128 = 0;
    let mut s0: i128 = 0;
    for (k, &h) in hist.iter().enumerate() {
        w0 += h as i128;
        s0 += k as i128 * h as i128;
        let w1 = total - w0;
        let var = if w0 == 0 || w1 == 0 {
            0.0
        } else {
            let num = (s0 * total - w0 * total_sum) as f64;
            num * num / ((w0 * w1) as f64 * (total * total) as f64)
        };
        if var > best.1 * (1.0 + 1e-12) || best.1 == f64::NEG_INFINITY {
            best = (k, var);
        }
    }
    best.0
}

/// Otsu threshold over a 256-bin histogram spanning `[min, max]`; returns the
/// upper edge of the winning bin.
pub fn otsu_threshold(values: &[f64]) -> Result<f64> {
    let (lo, hi) = value_range(values)?;
    let hist = histogram(values, OTSU_BINS, lo, hi);
    let k = otsu_bin(&hist);
    let width = (hi - lo) / OTSU_BINS as f64;
    Ok(lo + (k + 1) as f64 * width)
}

/// `mask_i = values_i > threshold`.
pub fn binarize(values: &[f64], threshold: f64) -> BinaryMask {
    values.iter().map(|&v| v > threshold).collect()
}

/// Exhaustive search over every distinct sampled value as threshold; returns
/// the threshold maximizing `criterion` (ties go to the lower threshold).
pub fn best_threshold(
    values: &[f64],
    gt: &GroundTruth,
    criterion: Criterion,
) -> Result<(f64, MetricBundle)> {
    if values.len() != gt.len() {
        return Err(Error::shape(format!(
            "{} intensities for {} ground-truth pixels",
            values.len(),
            gt.len()
        )));
    }
    let mut sampled: Vec<(f64, bool)> = values
        .iter()
        .zip(gt.labels())
        .filter_map(|(&v, &l)| match l {
            Label::Changed => Some((v, true)),
            Label::Unchanged => Some((v, false)),
            Label::Unsampled => None,
        })
        .collect();
    let changed_total = sampled.iter().filter(|s| s.1).count() as u64;
    let unchanged_total = sampled.len() as u64 - changed_total;
    if changed_total == 0 || unchanged_total == 0 {
        return Err(Error::DegenerateGroundTruth);
    }
    sampled.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Walking upwards, pixels at or below the threshold are predicted unchanged.
    let mut fn_ = 0u64;
    let mut tn = 0u64;
    let mut best: Option<(f64, f64, MetricBundle)> = None;
    let mut i = 0;
    while i < sampled.len() {
        let t = sampled[i].0;
        while i < sampled.len() && sampled[i].0 == t {
            if sampled[i].1 {
                fn_ += 1;
            } else {
                tn += 1;
            }
            i += 1;
        }
        let counts = crate::eval::ConfusionCounts {
            tp: changed_total - fn_,
            tn,
            fp: unchanged_total - tn,
            fn_,
        };
        let m = metrics(&counts)?;
        let score = criterion.of(&m);
        if best.as_ref().is_none_or(|b| score > b.1) {
            best = Some((t, score, m));
        }
    }
    let (t, _, m) = best.expect("at least one sampled pixel");
    debug_assert_eq!(
        metrics(&confusion(&binarize(values, t), gt)?)?.oa,
        m.oa,
        "sweep counts agree with direct evaluation"
    );
    Ok((t, m))
}
