//! Synthetic bi-temporal scenes with planted changes.
//!
//! The first date is a smooth random multiband field whose bands have
//! different dynamic ranges. The second date repeats it with i.i.d. noise
//! everywhere and a spectral shift (one random direction per blob) inside
//! rectangular change blobs.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::raster::MultibandImage;

const WAVES_PER_FIELD: usize = 6;
/// Smooth fields mixed into every band; fewer than the band count, so the
/// bands are strongly correlated as in real multispectral data.
const LATENT_FIELDS: usize = 4;
const PLACEMENT_ATTEMPTS: usize = 100_000;
/// Euclidean norm of every planted shift, in raw field units.
const SHIFT_NORM: f64 = 0.5;
/// Per-band dynamic ranges are spaced geometrically between these bounds
/// and shuffled across bands.
const BAND_SCALE: (f64, f64) = (0.03, 3.0);

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub t1: MultibandImage,
    pub t2: MultibandImage,
    pub truth: GroundTruth,
}

fn smooth_field(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut field = Array2::<f64>::zeros((rows, cols));
    for _ in 0..WAVES_PER_FIELD {
        let fy: f64 = rng.random_range(0.5..4.0);
        let fx: f64 = rng.random_range(0.5..4.0);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let amp: f64 = rng.random_range(0.3..1.0);
        for ((r, c), v) in field.indexed_iter_mut() {
            let arg = std::f64::consts::TAU * (fy * r as f64 / rows as f64 + fx * c as f64 / cols as f64);
            *v += amp * (arg + phase).sin();
        }
    }
    let std = field.std(0.0).max(1e-12);
    let mean = field.mean().unwrap_or(0.0);
    field.mapv(|v| (v - mean) / std)
}

fn band_scales(bands: usize) -> Vec<f64> {
    let (lo, hi) = (BAND_SCALE.0.ln(), BAND_SCALE.1.ln());
    if bands == 1 {
        return vec![(0.5 * (lo + hi)).exp()];
    }
    (0..bands)
        .map(|b| (lo + (hi - lo) * b as f64 / (bands - 1) as f64).exp())
        .collect()
}

fn random_direction(bands: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..bands).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Places non-overlapping rectangles until roughly `fraction` of the scene
/// is covered (within ±10% of the target pixel count).
fn place_blobs(rows: usize, cols: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    let n = rows * cols;
    let target = ((fraction * n as f64).round() as usize).max(1);
    let (lo, hi) = ((0.9 * target as f64).ceil() as usize, (1.1 * target as f64).floor() as usize);
    let hi = hi.max(lo);
    let max_side_r = (rows / 5).max(1);
    let max_side_c = (cols / 5).max(1);
    let mut taken = vec![false; n];
    let mut covered = 0;
    let mut blobs = Vec::new();
    for _ in 0..PLACEMENT_ATTEMPTS {
        if covered >= lo {
            return Ok(blobs);
        }
        let h = rng.random_range(1..=max_side_r);
        let w = rng.random_range(1..=max_side_c);
        if covered + h * w > hi {
            continue;
        }
        let r0 = rng.random_range(0..=rows - h);
        let c0 = rng.random_range(0..=cols - w);
        let pixels: Vec<usize> = (r0..r0 + h)
            .flat_map(|r| (c0..c0 + w).map(move |c| r * cols + c))
            .collect();
        if pixels.iter().any(|&p| taken[p]) {
            continue;
        }
        for &p in &pixels {
            taken[p] = true;
        }
        covered += pixels.len();
        blobs.push(pixels);
    }
    if covered >= lo {
        Ok(blobs)
    } else {
        Err(Error::BlobPlacement(PLACEMENT_ATTEMPTS))
    }
}

pub fn synth_generate(
    rows: usize,
    cols: usize,
    bands: usize,
    change_fraction: f64,
    noise_std: f64,
    seed: u64,
) -> Result<SyntheticScene> {
    if rows == 0 || cols == 0 || bands == 0 {
        return Err(Error::InvalidParameter("scene dimensions must be positive".into()));
    }
    if !(change_fraction > 0.0 && change_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "change fraction must lie in (0, 1), got {change_fraction}"
        )));
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::InvalidParameter(format!("bad noise std {noise_std}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rows * cols;

    let latents: Vec<Array2<f64>> = (0..LATENT_FIELDS).map(|_| smooth_field(rows, cols, &mut rng)).collect();
    let mut scales = band_scales(bands);
    scales.shuffle(&mut rng);
    let mut t1 = vec![0.0; n * bands];
    for (b, &scale) in scales.iter().enumerate() {
        let offset: f64 = rng.random_range(-1.0..1.0);
        let mix = random_direction(LATENT_FIELDS, &mut rng);
        let band = &mut t1[b * n..(b + 1) * n];
        for (k, latent) in latents.iter().enumerate() {
            for (v, &l) in band.iter_mut().zip(latent.iter()) {
                *v += mix[k] * l;
            }
        }
        for v in band.iter_mut() {
            *v = offset + scale * *v;
        }
    }

    let mut t2 = t1.clone();
    if noise_std > 0.0 {
        let noise = Normal::new(0.0, noise_std).expect("valid std");
        for v in t2.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }

    let blobs = place_blobs(rows, cols, change_fraction, &mut rng)?;
    let mut changed = vec![false; n];
    for blob in &blobs {
        let dir = random_direction(bands, &mut rng);
        for &p in blob {
            changed[p] = true;
            for (b, d) in dir.iter().enumerate() {
                t2[b * n + p] += SHIFT_NORM * d;
            }
        }
    }

    // Stored rasters are f32; narrow here so files round-trip exactly.
    let narrow = |v: Vec<f64>| v.into_iter().map(|x| x as f32 as f64).collect::<Vec<_>>();
    Ok(SyntheticScene {
        t1: MultibandImage::new(rows, cols, bands, narrow(t1))?,
        t2: MultibandImage::new(rows, cols, bands, narrow(t2))?,
        truth: GroundTruth::from_mask(&changed),
    })
}
