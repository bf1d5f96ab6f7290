//! Face detection: boxes, five landmarks and a confidence per face.
//!
//! Two backends sit behind [`Detector`]: a cascaded CNN detector loaded from
//! pretrained weights, and a synthetic fiducial reader that decodes the marker
//! patterns painted by [`synthetic::paint_face`]. The latter makes the whole
//! pipeline testable without restricted data or neural weights.

pub mod mtcnn;
pub mod synthetic;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{BoundingBox, LandmarkSet};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub landmarks: LandmarkSet,
    pub confidence: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, landmarks: LandmarkSet, confidence: f64) -> Result<Self> {
        let d = Self {
            bbox,
            landmarks,
            confidence,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::InvalidInput(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        if !self.landmarks.is_finite() {
            return Err(Error::InvalidInput("non-finite landmarks".into()));
        }
        let slack = self.bbox.expanded(0.10);
        if !self.landmarks.points().iter().all(|p| slack.contains(*p)) {
            return Err(Error::InvalidInput(format!(
                "landmarks fall outside box {:?} expanded by 10%",
                self.bbox
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    PretrainedMtcnnStyle,
    SyntheticOracle,
}

impl std::str::FromStr for Backend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrained_mtcnn_style" => Ok(Backend::PretrainedMtcnnStyle),
            "synthetic_oracle" => Ok(Backend::SyntheticOracle),
            other => Err(Error::Parse(format!("unknown detector backend `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub backend: Backend,
    pub min_confidence: f64,
    pub model_path: Option<PathBuf>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            backend: Backend::PretrainedMtcnnStyle,
            min_confidence: 0.9,
            model_path: None,
        }
    }
}

impl DetectorConfig {
    pub fn synthetic() -> Self {
        Self {
            backend: Backend::SyntheticOracle,
            min_confidence: 0.9,
            model_path: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err(Error::Config(format!(
                "min_confidence {} outside [0, 1]",
                self.min_confidence
            )));
        }
        Ok(())
    }
}

/// A constructed detector. Read-only after construction.
pub enum Detector {
    Synthetic(synthetic::FiducialDetector),
    Mtcnn(Box<mtcnn::Mtcnn>),
}

impl Detector {
    pub fn from_config(config: &DetectorConfig) -> Result<(Self, f64)> {
        config.validate()?;
        let det = match config.backend {
            Backend::SyntheticOracle => Detector::Synthetic(synthetic::FiducialDetector::default()),
            Backend::PretrainedMtcnnStyle => {
                let path = config.model_path.as_ref().ok_or_else(|| {
                    Error::Backend("pretrained backend requires model_path".into())
                })?;
                Detector::Mtcnn(Box::new(mtcnn::Mtcnn::load(path)?))
            }
        };
        Ok((det, config.min_confidence))
    }

    pub fn detect_raw(&self, image: &Image) -> Result<Vec<Detection>> {
        if image.is_empty() {
            return Err(Error::InvalidInput("cannot detect on an empty image".into()));
        }
        match self {
            Detector::Synthetic(d) => Ok(d.detect(image)),
            Detector::Mtcnn(d) => d.detect(image),
        }
    }
}

/// Configured detector with its confidence floor applied.
pub struct FaceDetector {
    inner: Detector,
    min_confidence: f64,
}

impl FaceDetector {
    pub fn new(config: &DetectorConfig) -> Result<Self> {
        let (inner, min_confidence) = Detector::from_config(config)?;
        Ok(Self {
            inner,
            min_confidence,
        })
    }

    pub fn detect(&self, image: &Image) -> Result<Vec<Detection>> {
        let mut out = self.inner.detect_raw(image)?;
        out.retain(|d| d.confidence >= self.min_confidence && d.validate().is_ok());
        Ok(out)
    }
}

pub fn detect_faces(image: &Image, config: &DetectorConfig) -> Result<Vec<Detection>> {
    FaceDetector::new(config)?.detect(image)
}

/// Largest box wins; ties go to higher confidence, then smaller `x_min`.
pub fn primary_face(detections: &[Detection]) -> Result<Detection> {
    detections
        .iter()
        .copied()
        .reduce(|best, d| {
            let ord = d
                .bbox
                .area()
                .total_cmp(&best.bbox.area())
                .then(d.confidence.total_cmp(&best.confidence))
                .then(best.bbox.x_min.total_cmp(&d.bbox.x_min));
            if ord.is_gt() {
                d
            } else {
                best
            }
        })
        .ok_or(Error::NoFace)
}
