//! Per-stream training: frame-level L1 regression against the video's
//! label, RAdam + Lookahead steps, a development evaluation and a plateau
//! scheduler step per epoch, and a checkpoint after every epoch.
//!
//! Data order and augmentation are keyed by `(seed, epoch)` only, so a run
//! resumed from any checkpoint replays exactly the batches an uninterrupted
//! run would have seen. The optimizer keeps `f64` master weights; the model
//! tensors are refreshed from them after every step.

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentPolicy, AugmentSampler};
use crate::checkpoint::{self, BestRecord, Checkpoint, EpochRecord, TrainState};
use crate::config::PipelineConfig;
use crate::corpus::{list_crops, Manifest, Partition};
use crate::error::{Error, Result};
use crate::evalfuse::{mae, rmse, StreamPrediction};
use crate::geom::AlignmentMode;
use crate::image::Image;
use crate::net::{Model, ModelConfig};
use crate::optim::{
    Lookahead, LookaheadConfig, NamedParam, Plateau, PlateauConfig, RAdam, RAdamConfig,
};
use crate::tensorfile::HostTensor;

/// Mean absolute difference.
pub fn l1_loss(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "l1_loss needs equal non-empty lengths, got {} and {}",
            predictions.len(),
            labels.len()
        )));
    }
    Ok(predictions.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / predictions.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stream: AlignmentMode,
    pub batch_size: usize,
    pub max_epochs: u32,
    pub seed: u64,
    pub augment: AugmentPolicy,
    pub model: ModelConfig,
    pub radam: RAdamConfig,
    pub lookahead: LookaheadConfig,
    pub plateau: PlateauConfig,
    pub manifest_path: PathBuf,
    pub crop_root: PathBuf,
    pub checkpoint_dir: PathBuf,
    /// Keep every `epoch_NNN.ckpt`; otherwise only the best and the last survive.
    pub keep_all_checkpoints: bool,
}

impl TrainConfig {
    pub fn from_pipeline(cfg: &PipelineConfig, stream: AlignmentMode) -> Self {
        Self {
            stream,
            batch_size: cfg.batch_size,
            max_epochs: cfg.max_epochs,
            seed: cfg.seed,
            augment: cfg.augment(),
            model: cfg.model(),
            radam: cfg.radam(),
            lookahead: cfg.lookahead(),
            plateau: cfg.plateau(),
            manifest_path: cfg.manifest_path(),
            crop_root: cfg.crop_root(),
            checkpoint_dir: cfg.checkpoint_root().join(stream.as_str()),
            keep_all_checkpoints: cfg.keep_all_checkpoints,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be at least 1".into()));
        }
        self.model.validate()?;
        self.radam.validate()?;
        self.plateau.validate()?;
        self.augment.validate()?;
        Ok(())
    }
}

/// Per-epoch history of a run.
pub type TrainLog = Vec<EpochRecord>;

pub fn write_train_log<W: std::io::Write>(w: W, log: &[EpochRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in log {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|e| Error::io("<train log>", e))?;
    Ok(())
}

pub fn read_train_log<R: std::io::Read>(r: R) -> Result<TrainLog> {
    Ok(csv::Reader::from_reader(r).deserialize().collect::<Result<_, _>>()?)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub best: Option<BestRecord>,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
}

/// One labelled training frame.
struct Sample {
    image: Image,
    label: f64,
}

/// Frames of one video for evaluation.
pub struct VideoFrames {
    pub video_id: String,
    pub label: f64,
    pub frames: Vec<(usize, Image)>,
}

/// Loads every stored crop of the given partition, in video-id order.
pub fn load_partition(
    manifest: &Manifest,
    crop_root: &Path,
    stream: AlignmentMode,
    partition: Partition,
) -> Result<Vec<VideoFrames>> {
    let mut records: Vec<_> = manifest.partition(partition).collect();
    records.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    records
        .into_iter()
        .map(|r| {
            let crops = list_crops(crop_root, stream, &r.video_id).map_err(|e| {
                Error::Config(format!("no {stream} crops for video `{}`: {e}", r.video_id))
            })?;
            let frames = crops
                .into_iter()
                .map(|(i, p)| {
                    Image::load(&p)
                        .map(|img| (i, img))
                        .map_err(|e| Error::Config(format!("unreadable crop: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(VideoFrames {
                video_id: r.video_id.clone(),
                label: f64::from(r.bdi_score),
                frames,
            })
        })
        .collect()
}

/// Per-frame scores and video scores of a set of videos, evaluation mode.
pub fn predict_videos(
    model: &Model,
    videos: &[VideoFrames],
    stream: AlignmentMode,
    batch_size: usize,
) -> Result<Vec<StreamPrediction>> {
    let mut out = Vec::with_capacity(videos.len());
    for v in videos {
        let mut scores = Vec::with_capacity(v.frames.len());
        for chunk in v.frames.chunks(batch_size.max(1)) {
            let imgs: Vec<&Image> = chunk.iter().map(|(_, im)| im).collect();
            let raw = model.predict(&imgs)?;
            for ((i, _), s) in chunk.iter().zip(raw) {
                if !s.is_finite() {
                    return Err(Error::Numeric(format!("non-finite score for `{}` frame {i}", v.video_id)));
                }
                scores.push((*i, s));
            }
        }
        out.push(StreamPrediction::new(v.video_id.clone(), stream, scores)?);
    }
    Ok(out)
}

/// Video-level MAE and RMSE of a model on loaded videos.
pub fn video_metrics(model: &Model, videos: &[VideoFrames], stream: AlignmentMode, batch_size: usize) -> Result<(f64, f64)> {
    let preds = predict_videos(model, videos, stream, batch_size)?;
    let p: Vec<f64> = preds.iter().map(|s| s.video_score).collect();
    let y: Vec<f64> = videos.iter().map(|v| v.label).collect();
    Ok((mae(&p, &y)?, rmse(&p, &y)?))
}

struct Run {
    config: TrainConfig,
    model: Model,
    params: Vec<NamedParam>,
    radam: RAdam,
    lookahead: Lookahead,
    plateau: Plateau,
    epoch: u32,
    best: Option<BestRecord>,
    log: TrainLog,
}

fn epoch_rng(seed: u64, epoch: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(epoch));
    rng
}

/// Augmentation policy of one epoch: a seed derived from `(seed, epoch)`.
fn epoch_policy(base: &AugmentPolicy, epoch: u32) -> AugmentPolicy {
    AugmentPolicy {
        seed: base.seed ^ (u64::from(epoch) << 32 | 0xa5a5),
        ..*base
    }
}

impl Run {
    fn fresh(config: TrainConfig) -> Result<Self> {
        let model = Model::build(&config.model)?;
        let params = master_params(&model)?;
        let radam = RAdam::new(config.radam)?;
        let lookahead = Lookahead::new(config.lookahead, &params)?;
        let plateau = Plateau::new(config.plateau, config.radam.lr)?;
        Ok(Self {
            config,
            model,
            params,
            radam,
            lookahead,
            plateau,
            epoch: 0,
            best: None,
            log: Vec::new(),
        })
    }

    fn from_checkpoint(config: TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        if ckpt.model_config != config.model {
            return Err(Error::Checkpoint(
                "checkpoint was trained with a different model configuration".into(),
            ));
        }
        let t = &ckpt.train;
        if t.stream != config.stream {
            return Err(Error::Checkpoint(format!(
                "checkpoint belongs to the {} stream, not {}",
                t.stream, config.stream
            )));
        }
        if t.seed != config.seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint seed {} differs from configured seed {}",
                t.seed, config.seed
            )));
        }
        let model = ckpt.model()?;
        let params = model
            .params()
            .keys()
            .map(|n| NamedParam::new(n.clone(), ckpt.model_state[n].data.clone()))
            .collect();
        let mut radam = RAdam::from_state(t.radam, t.radam_step, ckpt.moments.clone())?;
        radam.set_lr(t.plateau.lr);
        let lookahead = Lookahead::from_state(t.lookahead, ckpt.slow.clone(), t.lookahead_counter)?;
        Ok(Self {
            config,
            model,
            params,
            radam,
            lookahead,
            plateau: t.plateau,
            epoch: t.epoch,
            best: t.best,
            log: t.log.clone(),
        })
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let mut model_state = self.model.state()?;
        // store the optimizer's master weights, not their rounded copies
        for p in &self.params {
            let shape = model_state[&p.name].shape.clone();
            model_state.insert(p.name.clone(), HostTensor::new(shape, p.value.clone()));
        }
        Ok(Checkpoint {
            model_config: self.config.model.clone(),
            model_state,
            moments: self.radam.moments().clone(),
            slow: self.lookahead.slow().clone(),
            train: TrainState {
                stream: self.config.stream,
                seed: self.config.seed,
                epoch: self.epoch,
                radam: *self.radam.config(),
                radam_step: self.radam.step_count(),
                lookahead: *self.lookahead.config(),
                lookahead_counter: self.lookahead.counter(),
                plateau: self.plateau,
                best: self.best,
                log: self.log.clone(),
            },
        })
    }

    fn train_epoch(&mut self, train: &[Sample]) -> Result<f64> {
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut epoch_rng(self.config.seed, epoch));
        let mut sampler = AugmentSampler::new(epoch_policy(&self.config.augment, epoch), 0)?;
        let mut abs_sum = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            let images = batch
                .iter()
                .map(|&i| sampler.sample().apply(&train[i].image))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<f64> = batch.iter().map(|&i| train[i].label).collect();
            let x = self.model.batch(&images.iter().collect::<Vec<_>>())?;
            let y = self.model.forward_train(&x)?;
            let target = Tensor::from_vec(labels.clone(), labels.len(), self.model.device())?.to_dtype(self.model.dtype())?;
            let loss = (y.clone() - target)?.abs()?.mean_all()?;
            let grads = loss.backward()?;
            let preds = y.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            abs_sum += l1_loss(&preds, &labels)? * labels.len() as f64;
            for p in &mut self.params {
                let var = &self.model.params()[&p.name];
                p.grad = match grads.get(var.as_tensor()) {
                    Some(g) => g.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?,
                    None => vec![0.0; p.value.len()],
                };
            }
            self.radam.step(&mut self.params)?;
            self.lookahead.after_step(&mut self.params)?;
            self.sync_model()?;
        }
        Ok(abs_sum / train.len() as f64)
    }

    fn sync_model(&mut self) -> Result<()> {
        for p in &self.params {
            let shape = self.model.params()[&p.name].dims().to_vec();
            self.model.set_tensor(&p.name, &HostTensor::new(shape, p.value.clone()))?;
        }
        Ok(())
    }

    fn run(mut self, train: &[Sample], dev: &[VideoFrames]) -> Result<TrainOutcome> {
        let dir = self.config.checkpoint_dir.clone();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        while self.epoch < self.config.max_epochs {
            let started = Instant::now();
            let lr = self.radam.lr();
            let train_loss = self.train_epoch(train)?;
            let (dev_mae, dev_rmse) =
                video_metrics(&self.model, dev, self.config.stream, self.config.batch_size)?;
            self.epoch += 1;
            let new_lr = self.plateau.step(dev_mae);
            self.radam.set_lr(new_lr);
            let improved = self.best.is_none_or(|b| dev_mae < b.dev_mae);
            if improved {
                self.best = Some(BestRecord {
                    epoch: self.epoch,
                    dev_mae,
                });
            }
            self.log.push(EpochRecord {
                epoch: self.epoch,
                train_loss,
                dev_mae,
                dev_rmse,
                lr,
                wall_clock: started.elapsed().as_secs_f64(),
            });
            self.checkpoint()?.save(&dir.join(checkpoint::epoch_file_name(self.epoch)))?;
            checkpoint::write_marker(&dir, checkpoint::LAST_MARKER, self.epoch)?;
            if improved {
                checkpoint::write_marker(&dir, checkpoint::BEST_MARKER, self.epoch)?;
            }
            if !self.config.keep_all_checkpoints {
                self.prune(&dir)?;
            }
            let log_path = dir.join("train_log.csv");
            let f = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
            write_train_log(f, &self.log)?;
        }
        Ok(TrainOutcome {
            best: self.best,
            best_path: checkpoint::resolve_marker(&dir, checkpoint::BEST_MARKER)?,
            last_path: checkpoint::resolve_marker(&dir, checkpoint::LAST_MARKER)?,
            log: self.log,
        })
    }

    fn prune(&self, dir: &Path) -> Result<()> {
        let keep = [Some(self.epoch), self.best.map(|b| b.epoch)];
        for e in 1..self.epoch {
            if !keep.contains(&Some(e)) {
                let p = dir.join(checkpoint::epoch_file_name(e));
                if p.exists() {
                    std::fs::remove_file(&p).map_err(|err| Error::io(&p, err))?;
                }
            }
        }
        Ok(())
    }
}

fn master_params(model: &Model) -> Result<Vec<NamedParam>> {
    let state = model.state()?;
    Ok(model
        .params()
        .keys()
        .map(|n| NamedParam::new(n.clone(), state[n].data.clone()))
        .collect())
}

fn load_data(config: &TrainConfig) -> Result<(Vec<Sample>, Vec<VideoFrames>)> {
    config.validate()?;
    let manifest = Manifest::load(&config.manifest_path)?;
    let train_videos = load_partition(&manifest, &config.crop_root, config.stream, Partition::Training)?;
    let dev = load_partition(&manifest, &config.crop_root, config.stream, Partition::Development)?;
    // every frame is supervised with its video's label
    let train: Vec<Sample> = train_videos
        .into_iter()
        .flat_map(|v| {
            let label = v.label;
            v.frames.into_iter().map(move |(_, image)| Sample { image, label })
        })
        .collect();
    if train.is_empty() {
        return Err(Error::Config("the training partition has no crops".into()));
    }
    if dev.iter().all(|v| v.frames.is_empty()) {
        return Err(Error::Config("the development partition has no crops".into()));
    }
    if let Some(v) = dev.iter().find(|v| v.frames.is_empty()) {
        return Err(Error::Config(format!("development video `{}` has no crops", v.video_id)));
    }
    let size = config.model.input_size;
    if let Some(s) = train.iter().find(|s| s.image.width() != size || s.image.height() != size) {
        return Err(Error::Config(format!(
            "crops are {}x{} but the model expects {size}x{size}",
            s.image.width(),
            s.image.height()
        )));
    }
    Ok((train, dev))
}

/// Trains one stream from scratch.
pub fn train_stream(config: &TrainConfig) -> Result<TrainOutcome> {
    let (train, dev) = load_data(config)?;
    Run::fresh(config.clone())?.run(&train, &dev)
}

/// Continues a run from a checkpoint up to `config.max_epochs`.
pub fn resume(config: &TrainConfig, checkpoint_path: &Path) -> Result<TrainOutcome> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let (train, dev) = load_data(config)?;
    Run::from_checkpoint(config.clone(), ckpt)?.run(&train, &dev)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_examples() {
        assert_eq!(l1_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(l1_loss(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 3.5);
        assert_eq!(l1_loss(&[2.5], &[-1.0]).unwrap(), 3.5);
        assert!(matches!(l1_loss(&[1.0], &[1.0, 2.0]), Err(Error::InvalidInput(_))));
        assert!(l1_loss(&[], &[]).is_err());
    }

    #[test]
    fn epoch_order_depends_only_on_seed_and_epoch() {
        let order = |seed, epoch| {
            let mut v: Vec<usize> = (0..50).collect();
            v.shuffle(&mut epoch_rng(seed, epoch));
            v
        };
        assert_eq!(order(1, 3), order(1, 3));
        assert_ne!(order(1, 3), order(1, 4));
        assert_ne!(order(1, 3), order(2, 3));
        let p = AugmentPolicy::default();
        assert_ne!(epoch_policy(&p, 1).seed, epoch_policy(&p, 2).seed);
    }

    #[test]
    fn train_log_round_trip() {
        let log = vec![EpochRecord {
            epoch: 1,
            train_loss: 0.1 + 0.2,
            dev_mae: 1.0 / 3.0,
            dev_rmse: 2.0f64.sqrt(),
            lr: 3e-4,
            wall_clock: 1.25,
        }];
        let mut buf = Vec::new();
        write_train_log(&mut buf, &log).unwrap();
        assert!(String::from_utf8(buf.clone())
            .unwrap()
            .starts_with("epoch,train_loss,dev_mae,dev_rmse,lr,wall_clock\n"));
        assert_eq!(read_train_log(buf.as_slice()).unwrap(), log);
    }
}
