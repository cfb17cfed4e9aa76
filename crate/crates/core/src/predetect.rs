//! CVA and PCA baselines, CVA + k-means pre-detection and training sample
//! selection.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{BinaryMask, GroundTruth, Label};
use crate::linalg::sym_eig;
use crate::raster::PixelMatrix;

fn check_pair(x: &PixelMatrix, y: &PixelMatrix) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::shape(format!(
            "bi-temporal inputs differ: {:?} vs {:?}",
            x.dim(),
            y.dim()
        )));
    }
    Ok(())
}

/// Euclidean norm of each pixel's spectral difference.
pub fn cva_magnitude(x: &PixelMatrix, y: &PixelMatrix) -> Result<Vec<f64>> {
    check_pair(x, y)?;
    let diff = x - y;
    Ok(diff
        .axis_iter(Axis(1))
        .map(|col| col.dot(&col).sqrt())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans1d {
    pub mask: BinaryMask,
    /// `[unchanged, changed]` cluster centroids.
    pub centroids: [f64; 2],
    pub iterations: usize,
}

const KMEANS_MAX_ITER: usize = 1000;

/// Two-cluster Lloyd iterations on scalars, seeded at the min and max.
/// Pixels in the cluster with the larger centroid are flagged changed.
/// The seed only decides pixels exactly equidistant from both centroids.
pub fn kmeans_1d(values: &[f64], seed: u64) -> Result<KMeans1d> {
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
    let mut centroids = [lo, hi];
    let mut assign = vec![false; values.len()];
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut changed_any = false;
        for (a, &v) in assign.iter_mut().zip(values) {
            let d0 = (v - centroids[0]).abs();
            let d1 = (v - centroids[1]).abs();
            let high = if d0 == d1 { rng.random::<bool>() } else { d1 < d0 };
            if high != *a {
                *a = high;
                changed_any = true;
            }
        }
        let mut sums = [0.0; 2];
        let mut counts = [0usize; 2];
        for (&a, &v) in assign.iter().zip(values) {
            sums[a as usize] += v;
            counts[a as usize] += 1;
        }
        for c in 0..2 {
            if counts[c] > 0 {
                centroids[c] = sums[c] / counts[c] as f64;
            }
        }
        if (!changed_any && iterations > 1) || iterations >= KMEANS_MAX_ITER {
            break;
        }
    }
    if centroids[0] > centroids[1] {
        centroids.swap(0, 1);
        assign.iter_mut().for_each(|a| *a = !*a);
    }
    Ok(KMeans1d {
        mask: assign,
        centroids,
        iterations,
    })
}

/// Within-cluster sum of squares of a two-cluster assignment.
pub fn within_cluster_ss(values: &[f64], mask: &[bool]) -> f64 {
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    for (&m, &v) in mask.iter().zip(values) {
        sums[m as usize] += v;
        counts[m as usize] += 1;
    }
    let means = [
        sums[0] / counts[0].max(1) as f64,
        sums[1] / counts[1].max(1) as f64,
    ];
    mask.iter()
        .zip(values)
        .map(|(&m, &v)| (v - means[m as usize]).powi(2))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStrategy {
    /// Pixels the CVA pre-detection marks unchanged.
    Cva,
    /// Pixels labeled unchanged in the ground truth.
    GroundTruth,
    /// Any pixel.
    Random,
    /// Pixels labeled changed in the ground truth.
    Negative,
}

impl SampleStrategy {
    pub const ALL: [SampleStrategy; 4] = [
        SampleStrategy::Cva,
        SampleStrategy::GroundTruth,
        SampleStrategy::Random,
        SampleStrategy::Negative,
    ];

    pub fn needs_ground_truth(self) -> bool {
        matches!(self, SampleStrategy::GroundTruth | SampleStrategy::Negative)
    }
}

impl fmt::Display for SampleStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SampleStrategy::Cva => "cva",
            SampleStrategy::GroundTruth => "ground_truth",
            SampleStrategy::Random => "random",
            SampleStrategy::Negative => "negative",
        })
    }
}

impl FromStr for SampleStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cva" => Ok(SampleStrategy::Cva),
            "ground_truth" | "ground-truth" | "gt" => Ok(SampleStrategy::GroundTruth),
            "random" => Ok(SampleStrategy::Random),
            "negative" => Ok(SampleStrategy::Negative),
            other => Err(Error::InvalidParameter(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Where training pixels may be drawn from.
#[derive(Debug, Clone, Copy)]
pub enum SampleSource<'a> {
    /// Pre-detected change mask; sampling draws from its `false` pixels.
    Cva(&'a [bool]),
    GroundTruth(&'a GroundTruth),
    Random,
    Negative(&'a GroundTruth),
}

impl SampleSource<'_> {
    pub fn strategy(&self) -> SampleStrategy {
        match self {
            SampleSource::Cva(_) => SampleStrategy::Cva,
            SampleSource::GroundTruth(_) => SampleStrategy::GroundTruth,
            SampleSource::Random => SampleStrategy::Random,
            SampleSource::Negative(_) => SampleStrategy::Negative,
        }
    }

    /// Eligible pixel indices, ascending.
    pub fn pool(&self, n: usize) -> Result<Vec<usize>> {
        let check = |len: usize| {
            if len == n {
                Ok(())
            } else {
                Err(Error::shape(format!("mask has {len} pixels, scene has {n}")))
            }
        };
        Ok(match self {
            SampleSource::Cva(mask) => {
                check(mask.len())?;
                (0..n).filter(|&i| !mask[i]).collect()
            }
            SampleSource::GroundTruth(gt) => {
                check(gt.len())?;
                gt.indices_of(Label::Unchanged)
            }
            SampleSource::Negative(gt) => {
                check(gt.len())?;
                gt.indices_of(Label::Changed)
            }
            SampleSource::Random => (0..n).collect(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct SampleSet {
    pub xs: PixelMatrix,
    pub ys: PixelMatrix,
    /// Selected pixel indices, ascending.
    pub indices: Vec<usize>,
    pub strategy: SampleStrategy,
}

/// Uniform sample of `count` pixels without replacement from the source's pool.
pub fn select_samples(
    x: &PixelMatrix,
    y: &PixelMatrix,
    source: SampleSource<'_>,
    count: usize,
    seed: u64,
) -> Result<SampleSet> {
    check_pair(x, y)?;
    let pool = source.pool(x.ncols())?;
    if count > pool.len() {
        return Err(Error::NotEnoughSamples {
            requested: count,
            available: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = index::sample(&mut rng, pool.len(), count)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    indices.sort_unstable();
    Ok(SampleSet {
        xs: x.select(Axis(1), &indices),
        ys: y.select(Axis(1), &indices),
        indices,
        strategy: source.strategy(),
    })
}

fn difference_pca(x: &PixelMatrix, y: &PixelMatrix) -> Result<(PixelMatrix, ndarray::Array1<f64>, Array2<f64>)> {
    check_pair(x, y)?;
    let diff = x - y;
    let n = diff.ncols();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let mean = diff.mean_axis(Axis(1)).expect("n >= 2");
    let centered = &diff - &mean.insert_axis(Axis(1));
    let cov = centered.dot(&centered.t()) / n as f64;
    let (values, vectors) = sym_eig(&cov)?;
    Ok((diff, values, vectors))
}

/// Squared norm of each pixel's difference vector projected onto the `k`
/// leading principal components of the difference image.
pub fn pca_diff(x: &PixelMatrix, y: &PixelMatrix, k: usize) -> Result<Vec<f64>> {
    let m = x.nrows();
    if k == 0 || k > m {
        return Err(Error::InvalidParameter(format!(
            "component count {k} outside 1..={m}"
        )));
    }
    let (diff, _, vectors) = difference_pca(x, y)?;
    let top = vectors.slice(ndarray::s![.., m - k..]);
    let proj = top.t().dot(&diff);
    Ok(proj.axis_iter(Axis(1)).map(|c| c.dot(&c)).collect())
}

/// Smallest component count whose eigenvalues explain at least `fraction`
/// of the difference variance (at least 1).
pub fn pca_component_count(x: &PixelMatrix, y: &PixelMatrix, fraction: f64) -> Result<usize> {
    let (_, values, _) = difference_pca(x, y)?;
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    if total <= 0.0 {
        return Ok(1);
    }
    let mut acc = 0.0;
    for (k, v) in values.iter().rev().enumerate() {
        acc += v.max(0.0);
        if acc >= fraction * total {
            return Ok(k + 1);
        }
    }
    Ok(values.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cva_hand_norm() {
        let v = cva_magnitude(&array![[3.0, 1.0], [4.0, 1.0]], &array![[0.0, 1.0], [0.0, 1.0]]).unwrap();
        assert_eq!(v, vec![5.0, 0.0]);
    }

    #[test]
    fn kmeans_separable() {
        let km = kmeans_1d(&[0.0, 0.0, 10.0, 10.0], 0).unwrap();
        assert_eq!(km.mask, vec![false, false, true, true]);
        assert_eq!(km.centroids, [0.0, 10.0]);
        assert!(matches!(kmeans_1d(&[2.0, 2.0], 0), Err(Error::ConstantInput)));
    }

    #[test]
    fn sampling_whole_pool() {
        let x = Array2::from_shape_fn((2, 6), |(i, j)| (i * 6 + j) as f64);
        let y = x.clone();
        let mask = vec![true, false, false, true, false, false];
        let s = select_samples(&x, &y, SampleSource::Cva(&mask), 4, 3).unwrap();
        assert_eq!(s.indices, vec![1, 2, 4, 5]);
        assert_eq!(s.xs.column(0), x.column(1));
        let err = select_samples(&x, &y, SampleSource::Cva(&mask), 5, 3).unwrap_err();
        assert!(matches!(err, Error::NotEnoughSamples { requested: 5, available: 4 }));
    }

    #[test]
    fn pca_rejects_bad_k() {
        let x = array![[1.0, 2.0, 3.0]];
        assert!(pca_diff(&x, &x, 0).is_err());
        assert!(pca_diff(&x, &x, 2).is_err());
    }

    #[test]
    fn pca_single_band_is_squared_difference() {
        let x = array![[1.0, 2.0, 4.0]];
        let y = array![[0.0, 2.5, 1.0]];
        let v = pca_diff(&x, &y, 1).unwrap();
        for (got, want) in v.iter().zip([1.0, 0.25, 9.0]) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn strategy_round_trips_through_strings() {
        for s in SampleStrategy::ALL {
            assert_eq!(s.to_string().parse::<SampleStrategy>().unwrap(), s);
        }
    }
}
