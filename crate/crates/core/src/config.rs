//! The flat configuration file that drives every pipeline command.
//!
//! One `key = value` TOML document without tables. Unknown keys are
//! rejected; every key has a default except the corpus location. Relative
//! paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::corpus::{Layout, Partition};
use crate::detect::{Backend, DetectorConfig};
use crate::error::{Error, Result};
use crate::evalfuse::{FusionWeights, Protocol};
use crate::net::{Backbone, ModelConfig, Normalization, Precision, PretrainedSource};
use crate::optim::{LookaheadConfig, PlateauConfig, RAdamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    // corpus
    pub corpus_root: PathBuf,
    pub labels: PathBuf,
    pub corpus_name: String,
    pub layout: Layout,
    pub stride: usize,
    /// Root for the manifest, crops, checkpoints, predictions and reports.
    pub work_dir: PathBuf,

    // detection and alignment
    pub detector_backend: Backend,
    pub detector_min_confidence: f64,
    pub detector_model: Option<PathBuf>,
    pub crop_size: usize,

    // model
    pub backbone: Backbone,
    pub pretrained_source: PretrainedSource,
    pub pretrained_path: Option<PathBuf>,
    pub head_widths: Vec<usize>,
    pub precision: Precision,
    /// Channel statistics; default to those of the pretrained source.
    pub norm_mean: Option<[f64; 3]>,
    pub norm_std: Option<[f64; 3]>,

    // training
    pub seed: u64,
    pub batch_size: usize,
    pub max_epochs: u32,
    pub keep_all_checkpoints: bool,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lookahead_k: u64,
    pub lookahead_alpha: f64,
    pub plateau_factor: f64,
    pub plateau_patience: u32,
    pub plateau_min_lr: f64,
    pub plateau_threshold: f64,

    // augmentation
    pub flip_probability: f64,
    pub brightness_range: [f64; 2],
    pub contrast_range: [f64; 2],
    pub saturation_range: [f64; 2],

    // evaluation
    pub fusion_weights: [f64; 2],
    pub protocol: Protocol,
    pub eval_partition: Partition,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let radam = RAdamConfig::default();
        let la = LookaheadConfig::default();
        let plateau = PlateauConfig::default();
        let aug = AugmentPolicy::default();
        let model = ModelConfig::default();
        let det = DetectorConfig::default();
        Self {
            corpus_root: PathBuf::new(),
            labels: PathBuf::from("labels.csv"),
            corpus_name: "corpus".into(),
            layout: Layout::Generic,
            stride: 1,
            work_dir: PathBuf::from("work"),
            detector_backend: det.backend,
            detector_min_confidence: det.min_confidence,
            detector_model: None,
            crop_size: model.input_size,
            backbone: model.backbone,
            pretrained_source: model.pretrained_source,
            pretrained_path: None,
            head_widths: model.head_widths,
            precision: model.precision,
            norm_mean: None,
            norm_std: None,
            seed: 0,
            batch_size: 32,
            max_epochs: 50,
            keep_all_checkpoints: true,
            lr: radam.lr,
            beta1: radam.beta1,
            beta2: radam.beta2,
            epsilon: radam.epsilon,
            lookahead_k: la.k,
            lookahead_alpha: la.alpha,
            plateau_factor: plateau.factor,
            plateau_patience: plateau.patience,
            plateau_min_lr: plateau.min_lr,
            plateau_threshold: plateau.threshold,
            flip_probability: aug.flip_probability,
            brightness_range: aug.brightness_range.into(),
            contrast_range: aug.contrast_range.into(),
            saturation_range: aug.saturation_range.into(),
            fusion_weights: [0.5, 0.5],
            protocol: Protocol::Separated,
            eval_partition: Partition::Test,
        }
    }
}

impl PipelineConfig {
    /// Parses and validates configuration text. Paths stay as written.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a configuration file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus_root);
        fix(&mut self.labels);
        fix(&mut self.work_dir);
        if let Some(p) = self.detector_model.as_mut() {
            fix(p);
        }
        if let Some(p) = self.pretrained_path.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.stride == 0 {
            problems.push("stride must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            problems.push("max_epochs must be at least 1".into());
        }
        let checks: [(&str, Result<()>); 6] = [
            ("model", self.model().validate()),
            ("optimizer", self.radam().validate()),
            ("scheduler", self.plateau().validate()),
            ("augmentation", self.augment().validate()),
            ("detector", self.detector().validate()),
            ("fusion_weights", self.weights().map(|_| ())),
        ];
        for (what, r) in checks {
            if let Err(e) = r {
                problems.push(format!("{what}: {e}"));
            }
        }
        if self.lookahead_k == 0 || !(0.0..=1.0).contains(&self.lookahead_alpha) {
            problems.push("lookahead_k must be ≥ 1 and lookahead_alpha in [0, 1]".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            backend: self.detector_backend,
            min_confidence: self.detector_min_confidence,
            model_path: self.detector_model.clone(),
        }
    }

    pub fn model(&self) -> ModelConfig {
        let defaults = self.pretrained_source.default_normalization();
        ModelConfig {
            backbone: self.backbone,
            pretrained_source: self.pretrained_source,
            pretrained_path: self.pretrained_path.clone(),
            head_widths: self.head_widths.clone(),
            input_size: self.crop_size,
            normalization: Normalization {
                mean: self.norm_mean.unwrap_or(defaults.mean),
                std: self.norm_std.unwrap_or(defaults.std),
            },
            precision: self.precision,
            init_seed: self.seed,
        }
    }

    pub fn radam(&self) -> RAdamConfig {
        RAdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn lookahead(&self) -> LookaheadConfig {
        LookaheadConfig {
            k: self.lookahead_k,
            alpha: self.lookahead_alpha,
        }
    }

    pub fn plateau(&self) -> PlateauConfig {
        PlateauConfig {
            factor: self.plateau_factor,
            patience: self.plateau_patience,
            min_lr: self.plateau_min_lr,
            threshold: self.plateau_threshold,
        }
    }

    pub fn augment(&self) -> AugmentPolicy {
        let pair = |r: [f64; 2]| (r[0], r[1]);
        AugmentPolicy {
            flip_probability: self.flip_probability,
            brightness_range: pair(self.brightness_range),
            contrast_range: pair(self.contrast_range),
            saturation_range: pair(self.saturation_range),
            seed: self.seed,
        }
    }

    pub fn weights(&self) -> Result<FusionWeights> {
        FusionWeights::new(self.fusion_weights[0], self.fusion_weights[1])
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.work_dir.join("manifest.csv")
    }

    pub fn crop_root(&self) -> PathBuf {
        self.work_dir.join("crops")
    }

    pub fn checkpoint_root(&self) -> PathBuf {
        self.work_dir.join("checkpoints")
    }
}
