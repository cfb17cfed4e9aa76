//! Unsupervised change detection for co-registered multiband image pairs.
//!
//! The main method is deep slow feature analysis (DSFA): two fully connected
//! streams map the two dates into a feature space in which unchanged pixel
//! pairs vary slowly, a generalized eigenproblem extracts the slow-feature
//! projection, and the chi-square distance of the projected difference is
//! thresholded into a change mask. Linear SFA (USFA/ISFA), CVA and PCA are
//! provided as baselines and for pre-detection.

// `!(x > 0.0)` deliberately treats NaN as invalid input.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod linalg;
pub mod net;
pub mod pipeline;
pub mod predetect;
pub mod raster;
pub mod segment;
pub mod sfa;
pub mod synth;

pub use error::{Error, Result};
pub use eval::{BinaryMask, ConfusionCounts, Criterion, GroundTruth, Label, MetricBundle};
pub use linalg::{GenEigResult, SquareMatrix};
pub use net::{Activation, NetworkParams, TrainConfig};
pub use pipeline::{DetectParams, Method, PipelineConfig, Scene, ThresholdMethod};
pub use raster::{BandStats, MultibandImage, PixelMatrix};
pub use segment::IntensityMap;
pub use sfa::{PixelWeights, SfaModel};
