//! Multiband raster I/O and per-band standardization.
//!
//! Rasters are stored as a pair of files sharing a stem: `<name>.json` holds
//! the header and `<name>.bin` the raw little-endian `f32` payload in
//! band-sequential order. All arithmetic downstream is done in `f64`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `bands × pixels` matrix; column `j` is the spectral vector of pixel `j`
/// (pixels in row-major order).
pub type PixelMatrix = Array2<f64>;

/// A `rows × cols` raster with `bands` values per pixel, band-sequential.
#[derive(Debug, Clone, PartialEq)]
pub struct MultibandImage {
    rows: usize,
    cols: usize,
    bands: usize,
    values: Vec<f64>,
}

impl MultibandImage {
    pub fn new(rows: usize, cols: usize, bands: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || bands == 0 {
            return Err(Error::InvalidParameter(format!(
                "raster dimensions must be positive, got {rows}x{cols}x{bands}"
            )));
        }
        let expected = rows * cols * bands;
        if values.len() != expected {
            return Err(Error::shape(format!(
                "{rows}x{cols}x{bands} raster needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            rows,
            cols,
            bands,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Value of `band` at (`row`, `col`).
    pub fn get(&self, row: usize, col: usize, band: usize) -> f64 {
        self.values[band * self.rows * self.cols + row * self.cols + col]
    }

    pub fn same_geometry(&self, other: &MultibandImage) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.bands == other.bands
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RasterHeader {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub dtype: String,
    pub layout: String,
}

impl RasterHeader {
    fn for_image(image: &MultibandImage) -> Self {
        Self {
            rows: image.rows,
            cols: image.cols,
            bands: image.bands,
            dtype: "f32".to_string(),
            layout: "bsq".to_string(),
        }
    }
}

/// Resolves `path` (stem, `.json` or `.bin`) to the header/payload pair.
pub fn raster_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut header = stem.clone().into_os_string();
    header.push(".json");
    let mut payload = stem.into_os_string();
    payload.push(".bin");
    (PathBuf::from(header), PathBuf::from(payload))
}

pub fn load_image(path: impl AsRef<Path>) -> Result<MultibandImage> {
    let (header_path, payload_path) = raster_paths(path.as_ref());
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: RasterHeader = serde_json::from_str(&text).map_err(|e| Error::Header {
        path: header_path.clone(),
        reason: e.to_string(),
    })?;
    if header.dtype != "f32" || header.layout != "bsq" {
        return Err(Error::Header {
            path: header_path,
            reason: format!(
                "unsupported dtype/layout {}/{} (expected f32/bsq)",
                header.dtype, header.layout
            ),
        });
    }
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let expected = header.rows * header.cols * header.bands * 4;
    if bytes.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: bytes.len(),
        });
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    MultibandImage::new(header.rows, header.cols, header.bands, values)
}

/// Writes the header/payload pair, creating parent directories as needed.
///
/// Values are narrowed to `f32`; images whose values are already `f32`
/// representable (e.g. anything produced by [`load_image`]) round-trip exactly.
pub fn save_image(image: &MultibandImage, path: impl AsRef<Path>) -> Result<()> {
    let (header_path, payload_path) = raster_paths(path.as_ref());
    ensure_parent(&header_path)?;
    let header = serde_json::to_string_pretty(&RasterHeader::for_image(image))?;
    fs::write(&header_path, header).map_err(|e| Error::io(&header_path, e))?;
    let mut payload = Vec::with_capacity(image.values.len() * 4);
    for &v in &image.values {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(&payload_path, payload).map_err(|e| Error::io(&payload_path, e))
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

/// Min-max scales `values` into an 8-bit binary PGM (P5).
///
/// Constant input maps to all zeros. Scaled values are rounded half-up.
pub fn save_gray_map(values: &[f64], rows: usize, cols: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if values.len() != rows * cols {
        return Err(Error::shape(format!(
            "gray map {rows}x{cols} needs {} values, got {}",
            rows * cols,
            values.len()
        )));
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let pixels = scale_to_u8(values);
    ensure_parent(path)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(file, "P5\n{cols} {rows}\n255\n").map_err(|e| Error::io(path, e))?;
    file.write_all(&pixels).map_err(|e| Error::io(path, e))
}

pub(crate) fn scale_to_u8(values: &[f64]) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    values
        .iter()
        .map(|&v| {
            if range > 0.0 {
                ((v - lo) / range * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

/// Reads a binary 8-bit PGM written by [`save_gray_map`]; returns `(rows, cols, pixels)`.
pub fn load_gray_map(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Header {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    // Header: magic, width, height, maxval separated by single whitespace runs.
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected 8-bit binary PGM"));
    }
    let cols: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let rows: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let data = &bytes[pos + 1..];
    if data.len() != rows * cols {
        return Err(Error::SizeMismatch {
            expected: rows * cols,
            found: data.len(),
        });
    }
    Ok((rows, cols, data.to_vec()))
}

/// `bands × (rows·cols)` view of the image; pixel order is row-major.
pub fn flatten(image: &MultibandImage) -> PixelMatrix {
    Array2::from_shape_vec((image.bands, image.pixels()), image.values.clone())
        .expect("band-sequential layout matches matrix shape")
}

pub fn unflatten(matrix: &PixelMatrix, rows: usize, cols: usize) -> Result<MultibandImage> {
    if matrix.ncols() != rows * cols {
        return Err(Error::shape(format!(
            "{} pixels cannot form a {rows}x{cols} raster",
            matrix.ncols()
        )));
    }
    MultibandImage::new(rows, cols, matrix.nrows(), matrix.iter().copied().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandStats {
    pub means: Array1<f64>,
    /// Population standard deviations.
    pub stds: Array1<f64>,
    /// Bands with zero variance; these are emitted as zeros.
    pub degenerate: Vec<bool>,
}

/// Z-scores each band (row) with its own mean and population std.
pub fn zscore_standardize(x: &PixelMatrix) -> Result<(PixelMatrix, BandStats)> {
    let n = x.ncols();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let means = x.mean_axis(Axis(1)).expect("n >= 2");
    let stds = x.std_axis(Axis(1), 0.0);
    let mut out = x.clone();
    let mut degenerate = vec![false; x.nrows()];
    for (band, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let (mean, std) = (means[band], stds[band]);
        if std > 0.0 {
            row.mapv_inplace(|v| (v - mean) / std);
        } else {
            warn!("band {band} has zero variance; emitting zeros");
            degenerate[band] = true;
            row.fill(0.0);
        }
    }
    Ok((
        out,
        BandStats {
            means,
            stds,
            degenerate,
        },
    ))
}
