//! End-to-end change detection: standardize, pre-detect and sample, train,
//! project, score and threshold, then evaluate and write outputs.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::eval::{confusion, metrics, BinaryMask, ConfusionCounts, Criterion, GroundTruth, MetricBundle, MetricsRecord};
use crate::net::{project_dsfa, train, TrainConfig};
use crate::predetect::{
    cva_magnitude, kmeans_1d, pca_component_count, pca_diff, select_samples, SampleSource, SampleStrategy,
};
use crate::raster::{
    flatten, load_image, save_gray_map, save_image, zscore_standardize, MultibandImage, PixelMatrix,
};
use crate::segment::{best_threshold, binarize, chi2_intensity, otsu_threshold};
use crate::sfa::{fit_isfa, fit_sfa, transform_diff, ISFA_MAX_ITER, ISFA_TOL};

/// Fraction of difference variance the PCA baseline keeps.
pub const PCA_VARIANCE_FRACTION: f64 = 0.9;
/// Default DSFA training set: 2.5% of the scene, clamped to this range.
pub const DEFAULT_SAMPLE_FRACTION: f64 = 0.025;
pub const DEFAULT_SAMPLE_RANGE: (usize, usize) = (64, 4000);
/// Independent DSFA trainings summed by the command-line front end.
pub const DEFAULT_DSFA_RUNS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cva,
    Pca,
    Usfa,
    Isfa,
    Dsfa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMethod {
    Otsu,
    Kmeans,
    /// Exhaustive search against the ground truth.
    Best,
}

macro_rules! string_enum {
    ($ty:ty, $($variant:path => $name:literal),+ $(,)?) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::InvalidParameter(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"),
                        other
                    ))),
                }
            }
        }
    };
}

string_enum!(Method, Method::Cva => "cva", Method::Pca => "pca", Method::Usfa => "usfa", Method::Isfa => "isfa", Method::Dsfa => "dsfa");
string_enum!(ThresholdMethod, ThresholdMethod::Otsu => "otsu", ThresholdMethod::Kmeans => "kmeans", ThresholdMethod::Best => "best");
string_enum!(Criterion, Criterion::Oa => "oa", Criterion::Kappa => "kappa", Criterion::F1 => "f1");

/// Everything that controls detection on an already-loaded scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectParams {
    pub method: Method,
    pub train: TrainConfig,
    /// DSFA training pixels; `None` picks the default size, capped at the pool.
    pub sample_count: Option<usize>,
    pub strategy: SampleStrategy,
    pub threshold: ThresholdMethod,
    pub best_criterion: Criterion,
    pub runs: usize,
    pub seed: u64,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            method: Method::Dsfa,
            train: TrainConfig::default(),
            sample_count: None,
            strategy: SampleStrategy::Cva,
            threshold: ThresholdMethod::Otsu,
            best_criterion: Criterion::Oa,
            runs: 1,
            seed: 0,
        }
    }
}

impl DetectParams {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::InvalidParameter("runs must be at least 1".into()));
        }
        if self.runs > 1 && self.method != Method::Dsfa {
            return Err(Error::InvalidParameter(format!(
                "multiple runs only apply to dsfa, not {}",
                self.method
            )));
        }
        if self.method == Method::Dsfa {
            self.train.validate()?;
        }
        Ok(())
    }
}

/// A standardized image pair plus optional ground truth.
#[derive(Debug, Clone)]
pub struct Scene {
    pub rows: usize,
    pub cols: usize,
    pub x: PixelMatrix,
    pub y: PixelMatrix,
    pub truth: Option<GroundTruth>,
}

impl Scene {
    /// Z-scores each date independently.
    pub fn new(t1: &MultibandImage, t2: &MultibandImage, truth: Option<GroundTruth>) -> Result<Self> {
        if !t1.same_geometry(t2) {
            return Err(Error::shape(format!(
                "dates differ: {}x{}x{} vs {}x{}x{}",
                t1.rows(),
                t1.cols(),
                t1.bands(),
                t2.rows(),
                t2.cols(),
                t2.bands()
            )));
        }
        if let Some(gt) = &truth {
            if gt.len() != t1.pixels() {
                return Err(Error::shape(format!(
                    "ground truth has {} pixels, images have {}",
                    gt.len(),
                    t1.pixels()
                )));
            }
        }
        let (x, _) = zscore_standardize(&flatten(t1))?;
        let (y, _) = zscore_standardize(&flatten(t2))?;
        Ok(Self {
            rows: t1.rows(),
            cols: t1.cols(),
            x,
            y,
            truth,
        })
    }

    pub fn pixels(&self) -> usize {
        self.x.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Default)]
struct Timer {
    timings: Vec<StageTiming>,
}

impl Timer {
    fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().stage(stage);
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub seed: u64,
    pub train_samples: usize,
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Detection {
    /// Change intensity, summed over runs for multi-run DSFA.
    pub intensity: Vec<f64>,
    pub per_run_intensity: Vec<Vec<f64>>,
    pub dof: usize,
    pub threshold: f64,
    pub mask: BinaryMask,
    pub evaluation: Option<(MetricBundle, ConfusionCounts)>,
    pub runs: Vec<RunInfo>,
    pub timings: Vec<StageTiming>,
}

pub fn default_sample_count(pixels: usize) -> usize {
    let (lo, hi) = DEFAULT_SAMPLE_RANGE;
    ((pixels as f64 * DEFAULT_SAMPLE_FRACTION).round() as usize).clamp(lo, hi)
}

fn dsfa_run(scene: &Scene, params: &DetectParams, seed: u64, timer: &mut Timer) -> Result<(Vec<f64>, usize, RunInfo)> {
    let predetected = if params.strategy == SampleStrategy::Cva {
        Some(timer.time("predetect", || {
            let magnitude = cva_magnitude(&scene.x, &scene.y)?;
            match kmeans_1d(&magnitude, params.seed) {
                Ok(km) => Ok(km.mask),
                // A flat CVA map means no pixel looks changed.
                Err(Error::ConstantInput) => Ok(vec![false; magnitude.len()]),
                Err(e) => Err(e),
            }
        })?)
    } else {
        None
    };
    let samples = timer.time("sample", || {
        let need_truth = || {
            scene.truth.as_ref().ok_or_else(|| {
                Error::InvalidParameter(format!("strategy {} needs ground truth", params.strategy))
            })
        };
        let source = match params.strategy {
            SampleStrategy::Cva => SampleSource::Cva(predetected.as_deref().expect("computed above")),
            SampleStrategy::GroundTruth => SampleSource::GroundTruth(need_truth()?),
            SampleStrategy::Negative => SampleSource::Negative(need_truth()?),
            SampleStrategy::Random => SampleSource::Random,
        };
        let count = match params.sample_count {
            Some(c) => c,
            None => default_sample_count(scene.pixels()).min(source.pool(scene.pixels())?.len()),
        };
        select_samples(&scene.x, &scene.y, source, count, seed)
    })?;
    let config = TrainConfig {
        seed,
        ..params.train.clone()
    };
    let trained = timer.time("train", || train(&samples.xs, &samples.ys, &config))?;
    let d = timer.time("project", || project_dsfa(&trained.theta1, &trained.theta2, &scene.x, &scene.y))?;
    let (values, dof) = timer.time("intensity", || intensity_of(&d))?;
    Ok((
        values,
        dof,
        RunInfo {
            seed,
            train_samples: samples.indices.len(),
            loss_history: trained.loss_history,
        },
    ))
}

/// Chi-square intensity of projected differences. A difference that is zero
/// everywhere (identical dates) yields a flat zero map with no degrees of freedom.
fn intensity_of(d: &PixelMatrix) -> Result<(Vec<f64>, usize)> {
    match chi2_intensity(d) {
        Ok(map) => Ok((map.values, map.dof)),
        Err(Error::AllBandsDegenerate) => Ok((vec![0.0; d.ncols()], 0)),
        Err(e) => Err(e),
    }
}

/// Per-pixel change intensity of a single-run method.
fn linear_intensity(scene: &Scene, method: Method, timer: &mut Timer) -> Result<(Vec<f64>, usize)> {
    let (x, y) = (&scene.x, &scene.y);
    match method {
        Method::Cva => timer.time("intensity", || Ok((cva_magnitude(x, y)?, x.nrows()))),
        Method::Pca => timer.time("intensity", || {
            let k = pca_component_count(x, y, PCA_VARIANCE_FRACTION)?;
            Ok((pca_diff(x, y, k)?, k))
        }),
        Method::Usfa => {
            let model = timer.time("fit", || fit_sfa(x, y, None))?;
            timer.time("intensity", || {
                intensity_of(&transform_diff(&model, x, y)?)
            })
        }
        Method::Isfa => {
            let fit = timer.time("fit", || fit_isfa(x, y, ISFA_MAX_ITER, ISFA_TOL))?;
            timer.time("intensity", || {
                intensity_of(&transform_diff(&fit.model, x, y)?)
            })
        }
        Method::Dsfa => unreachable!("dsfa is handled per run"),
    }
}

/// Applies the configured threshold rule; returns the threshold and mask.
pub fn apply_threshold(
    intensity: &[f64],
    method: ThresholdMethod,
    truth: Option<&GroundTruth>,
    criterion: Criterion,
    seed: u64,
) -> Result<(f64, BinaryMask)> {
    // Identical dates give a flat map: nothing changed.
    let flat = intensity.windows(2).all(|w| w[0] == w[1]);
    if flat {
        let t = intensity.first().copied().unwrap_or(0.0);
        return Ok((t, vec![false; intensity.len()]));
    }
    match method {
        ThresholdMethod::Otsu => {
            let t = otsu_threshold(intensity)?;
            Ok((t, binarize(intensity, t)))
        }
        ThresholdMethod::Kmeans => {
            let km = kmeans_1d(intensity, seed)?;
            let t = intensity
                .iter()
                .zip(&km.mask)
                .filter(|(_, &m)| !m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            Ok((t, km.mask))
        }
        ThresholdMethod::Best => {
            let truth = truth.ok_or_else(|| {
                Error::InvalidParameter("best threshold needs ground truth".into())
            })?;
            let (t, _) = best_threshold(intensity, truth, criterion)?;
            Ok((t, binarize(intensity, t)))
        }
    }
}

/// Runs detection on a loaded scene. For DSFA with `runs = R`, run `i` is
/// seeded with `seed + i` and the intensities are summed before thresholding.
pub fn detect(scene: &Scene, params: &DetectParams) -> Result<Detection> {
    params.validate()?;
    let mut timer = Timer::default();
    let (intensity, per_run_intensity, dof, runs) = if scene.x == scene.y {
        // Nothing differs between the dates, so there is nothing to learn or project.
        info!("dates are identical; skipping {}", params.method);
        let zeros = vec![0.0; scene.pixels()];
        (zeros.clone(), vec![zeros], 0, Vec::new())
    } else if params.method == Method::Dsfa {
        let mut sum = vec![0.0; scene.pixels()];
        let mut per_run = Vec::with_capacity(params.runs);
        let mut infos = Vec::with_capacity(params.runs);
        let mut dof = 0;
        for i in 0..params.runs {
            let seed = params.seed.wrapping_add(i as u64);
            let (values, run_dof, info) = dsfa_run(scene, params, seed, &mut timer)?;
            info!("dsfa run {i}: final loss {:?}", info.loss_history.last());
            for (s, v) in sum.iter_mut().zip(&values) {
                *s += v;
            }
            dof = run_dof;
            per_run.push(values);
            infos.push(info);
        }
        (sum, per_run, dof, infos)
    } else {
        let (values, dof) = linear_intensity(scene, params.method, &mut timer)?;
        (values.clone(), vec![values], dof, Vec::new())
    };

    let (threshold, mask) = timer.time("threshold", || {
        apply_threshold(
            &intensity,
            params.threshold,
            scene.truth.as_ref(),
            params.best_criterion,
            params.seed,
        )
    })?;
    let evaluation = match &scene.truth {
        Some(gt) => Some(timer.time("evaluate", || {
            let counts = confusion(&mask, gt)?;
            Ok((metrics(&counts)?, counts))
        })?),
        None => None,
    };
    Ok(Detection {
        intensity,
        per_run_intensity,
        dof,
        threshold,
        mask,
        evaluation,
        runs,
        timings: timer.timings,
    })
}

/// File-level configuration for [`run_pipeline`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub t1: PathBuf,
    pub t2: PathBuf,
    pub ground_truth: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub params: DetectParams,
    pub write_loss_history: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub threshold_method: ThresholdMethod,
    pub threshold: f64,
    pub changed_pixels: usize,
    pub dof: usize,
    pub metrics: Option<MetricsRecord>,
    pub runs: Vec<RunInfo>,
    pub timings: Vec<StageTiming>,
    /// Files written, relative to the output directory.
    pub manifest: Vec<String>,
}

pub const INTENSITY_PGM: &str = "intensity.pgm";
pub const MASK_PGM: &str = "mask.pgm";
pub const INTENSITY_RASTER: &str = "intensity";
pub const METRICS_JSON: &str = "metrics.json";
pub const REPORT_JSON: &str = "report.json";
pub const LOSS_CSV: &str = "loss_history.csv";

pub fn load_scene(t1: &Path, t2: &Path, ground_truth: Option<&Path>) -> Result<Scene> {
    if t1 == t2 {
        return Err(Error::InvalidParameter("the two dates must be different files".into()));
    }
    let img1 = load_image(t1)?;
    let img2 = load_image(t2)?;
    let truth = ground_truth
        .map(|p| load_image(p).and_then(|img| GroundTruth::from_image(&img)))
        .transpose()?;
    Scene::new(&img1, &img2, truth)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loss histories as CSV: `epoch,run_0,run_1,...`.
pub fn loss_history_csv(runs: &[RunInfo]) -> String {
    let mut out = String::from("epoch");
    for i in 0..runs.len() {
        out.push_str(&format!(",run_{i}"));
    }
    out.push('\n');
    let epochs = runs.iter().map(|r| r.loss_history.len()).max().unwrap_or(0);
    for e in 0..epochs {
        out.push_str(&e.to_string());
        for r in runs {
            out.push(',');
            if let Some(v) = r.loss_history.get(e) {
                out.push_str(&v.to_string());
            }
        }
        out.push('\n');
    }
    out
}

/// Loads both dates, detects changes and writes the output files.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunReport> {
    let start = Instant::now();
    let scene = load_scene(&config.t1, &config.t2, config.ground_truth.as_deref()).stage("load")?;
    let load_time = start.elapsed().as_secs_f64();
    let detection = detect(&scene, &config.params)?;

    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e)).stage("write")?;
    let write_start = Instant::now();
    let mut manifest = Vec::new();
    let mut write = || -> Result<()> {
        save_gray_map(&detection.intensity, scene.rows, scene.cols, out.join(INTENSITY_PGM))?;
        manifest.push(INTENSITY_PGM.to_string());
        let mask_values: Vec<f64> = detection.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        save_gray_map(&mask_values, scene.rows, scene.cols, out.join(MASK_PGM))?;
        manifest.push(MASK_PGM.to_string());
        let raster = MultibandImage::new(scene.rows, scene.cols, 1, detection.intensity.clone())?;
        save_image(&raster, out.join(INTENSITY_RASTER))?;
        manifest.push(format!("{INTENSITY_RASTER}.json"));
        manifest.push(format!("{INTENSITY_RASTER}.bin"));
        if let Some((m, c)) = &detection.evaluation {
            let record = MetricsRecord::new(m, c);
            write_text(&out.join(METRICS_JSON), &serde_json::to_string_pretty(&record)?)?;
            manifest.push(METRICS_JSON.to_string());
        }
        if config.write_loss_history && !detection.runs.is_empty() {
            write_text(&out.join(LOSS_CSV), &loss_history_csv(&detection.runs))?;
            manifest.push(LOSS_CSV.to_string());
        }
        Ok(())
    };
    write().stage("write")?;

    let mut timings = vec![StageTiming {
        stage: "load".into(),
        seconds: load_time,
    }];
    timings.extend(detection.timings.iter().cloned());
    timings.push(StageTiming {
        stage: "write".into(),
        seconds: write_start.elapsed().as_secs_f64(),
    });
    manifest.push(REPORT_JSON.to_string());
    let report = RunReport {
        method: config.params.method,
        threshold_method: config.params.threshold,
        threshold: detection.threshold,
        changed_pixels: detection.mask.iter().filter(|&&m| m).count(),
        dof: detection.dof,
        metrics: detection.evaluation.as_ref().map(|(m, c)| MetricsRecord::new(m, c)),
        runs: detection.runs,
        timings,
        manifest,
    };
    write_text(&out.join(REPORT_JSON), &serde_json::to_string_pretty(&report)?).stage("write")?;
    Ok(report)
}

/// [`run_pipeline`] for DSFA with `runs` independent trainings.
pub fn multi_run(config: &PipelineConfig) -> Result<RunReport> {
    if config.params.method != Method::Dsfa {
        return Err(Error::InvalidParameter("multi-run summation applies to dsfa only".into()));
    }
    run_pipeline(config)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub label: String,
    pub metrics: MetricBundle,
}

fn sweep_csv(key: &str, rows: &[SweepRow]) -> String {
    let mut out = format!("{key},oa_chg,oa_un,oa,kappa,f1\n");
    for r in rows {
        let m = &r.metrics;
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.label, m.oa_chg, m.oa_un, m.oa, m.kappa, m.f1
        ));
    }
    out
}

fn evaluated(scene: &Scene, params: &DetectParams) -> Result<MetricBundle> {
    let detection = detect(scene, params)?;
    detection
        .evaluation
        .map(|(m, _)| m)
        .ok_or_else(|| Error::InvalidParameter("sweeps need ground truth".into()))
}

/// Runs DSFA once per regularization value.
pub fn sweep_r(scene: &Scene, params: &DetectParams, r_values: &[f64]) -> Result<Vec<SweepRow>> {
    if params.method != Method::Dsfa {
        return Err(Error::InvalidParameter("r sweep applies to dsfa only".into()));
    }
    if scene.truth.is_none() {
        return Err(Error::InvalidParameter("r sweep needs ground truth".into()));
    }
    r_values
        .iter()
        .map(|&r| {
            let mut p = params.clone();
            p.train.reg_r = r;
            Ok(SweepRow {
                label: format!("{r:e}"),
                metrics: evaluated(scene, &p)?,
            })
        })
        .collect()
}

/// Runs DSFA once per training-sample selection strategy.
pub fn sweep_strategy(
    scene: &Scene,
    params: &DetectParams,
    strategies: &[SampleStrategy],
) -> Result<Vec<SweepRow>> {
    if params.method != Method::Dsfa {
        return Err(Error::InvalidParameter("strategy sweep applies to dsfa only".into()));
    }
    if scene.truth.is_none() {
        return Err(Error::InvalidParameter(
            "strategy sweep needs ground truth for labels and scoring".into(),
        ));
    }
    strategies
        .iter()
        .map(|&s| {
            let mut p = params.clone();
            p.strategy = s;
            Ok(SweepRow {
                label: s.to_string(),
                metrics: evaluated(scene, &p)?,
            })
        })
        .collect()
}

pub fn write_sweep_csv(path: &Path, key: &str, rows: &[SweepRow]) -> Result<()> {
    crate::raster::ensure_parent(path)?;
    write_text(path, &sweep_csv(key, rows))
}
