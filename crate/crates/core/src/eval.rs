//! Accuracy assessment against tri-state ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::MultibandImage;

/// Per-pixel change flag, `true` = changed.
pub type BinaryMask = Vec<bool>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Changed,
    Unchanged,
    Unsampled,
}

impl Label {
    /// Raster encoding: 0 = unsampled, 1 = unchanged, 2 = changed.
    pub fn code(self) -> u8 {
        match self {
            Label::Unsampled => 0,
            Label::Unchanged => 1,
            Label::Changed => 2,
        }
    }

    pub fn from_code(code: f64) -> Option<Self> {
        match code {
            0.0 => Some(Label::Unsampled),
            1.0 => Some(Label::Unchanged),
            2.0 => Some(Label::Changed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    labels: Vec<Label>,
}

impl GroundTruth {
    pub fn new(labels: Vec<Label>) -> Self {
        Self { labels }
    }

    /// Fully sampled ground truth from a change mask.
    pub fn from_mask(mask: &[bool]) -> Self {
        Self::new(
            mask.iter()
                .map(|&c| if c { Label::Changed } else { Label::Unchanged })
                .collect(),
        )
    }

    /// Decodes a single-band label raster (0 unsampled, 1 unchanged, 2 changed).
    pub fn from_image(image: &MultibandImage) -> Result<Self> {
        if image.bands() != 1 {
            return Err(Error::shape(format!(
                "ground truth must be single-band, got {} bands",
                image.bands()
            )));
        }
        image
            .values()
            .iter()
            .map(|&v| {
                Label::from_code(v)
                    .ok_or_else(|| Error::InvalidParameter(format!("bad ground-truth label {v}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }

    pub fn to_image(&self, rows: usize, cols: usize) -> Result<MultibandImage> {
        MultibandImage::new(
            rows,
            cols,
            1,
            self.labels.iter().map(|l| l.code() as f64).collect(),
        )
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Pixel indices carrying `label`, ascending.
    pub fn indices_of(&self, label: Label) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == label).then_some(i))
            .collect()
    }

    pub fn changed_mask(&self) -> BinaryMask {
        self.labels.iter().map(|&l| l == Label::Changed).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Confusion counts over sampled pixels; changed is the positive class.
pub fn confusion(pred: &[bool], gt: &GroundTruth) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &label) in pred.iter().zip(gt.labels()) {
        match (label, p) {
            (Label::Changed, true) => c.tp += 1,
            (Label::Changed, false) => c.fn_ += 1,
            (Label::Unchanged, true) => c.fp += 1,
            (Label::Unchanged, false) => c.tn += 1,
            (Label::Unsampled, _) => {}
        }
    }
    if c.total() == 0 {
        return Err(Error::NoSampledPixels);
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub oa_chg: f64,
    pub oa_un: f64,
    pub oa: f64,
    pub kappa: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64, name: &'static str) -> Result<f64> {
    if den == 0 {
        Err(Error::UndefinedMetric(name))
    } else {
        Ok(num as f64 / den as f64)
    }
}

pub fn metrics(c: &ConfusionCounts) -> Result<MetricBundle> {
    let ConfusionCounts { tp, tn, fp, fn_ } = *c;
    let n = c.total();
    if n == 0 {
        return Err(Error::NoSampledPixels);
    }
    let oa_chg = ratio(tp, tp + fn_, "oa_chg")?;
    let oa_un = ratio(tn, tn + fp, "oa_un")?;
    let oa = (tp + tn) as f64 / n as f64;
    let nf = n as f64;
    let pe = ((tp + fp) as f64 * (tp + fn_) as f64 + (fn_ + tn) as f64 * (fp + tn) as f64) / (nf * nf);
    if pe >= 1.0 {
        return Err(Error::UndefinedMetric("kappa"));
    }
    let kappa = (oa - pe) / (1.0 - pe);
    let f1 = ratio(2 * tp, 2 * tp + fp + fn_, "f1")?;
    Ok(MetricBundle {
        oa_chg,
        oa_un,
        oa,
        kappa,
        f1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Oa,
    Kappa,
    F1,
}

impl Criterion {
    pub fn of(self, m: &MetricBundle) -> f64 {
        match self {
            Criterion::Oa => m.oa,
            Criterion::Kappa => m.kappa,
            Criterion::F1 => m.f1,
        }
    }
}

/// Flat JSON record of the five metrics plus the raw counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub oa_chg: f64,
    pub oa_un: f64,
    pub oa: f64,
    pub kappa: f64,
    pub f1: f64,
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl MetricsRecord {
    pub fn new(m: &MetricBundle, c: &ConfusionCounts) -> Self {
        Self {
            oa_chg: m.oa_chg,
            oa_un: m.oa_un,
            oa: m.oa,
            kappa: m.kappa,
            f1: m.f1,
            tp: c.tp,
            tn: c.tn,
            fp: c.fp,
            fn_: c.fn_,
        }
    }
}
