//! Synthetic corpora of painted fiducial faces.
//!
//! Each subject has one identity: a fixed landmark layout and marker size,
//! drawn in every frame with a different position and head roll on a grey
//! texture. Labels are constant per identity, so a model that tells the
//! identities apart can fit them exactly.

use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Partition, Task};
use crate::detect::synthetic::{paint_face, textured_background, FaceSpec};
use crate::error::{Error, Result};
use crate::geom::{Angle, Point2};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureVideo {
    pub video_id: String,
    pub subject_id: String,
    pub task: Task,
    pub partition: Partition,
    pub bdi_score: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub videos: Vec<FixtureVideo>,
    pub frames_per_video: usize,
    pub width: usize,
    pub height: usize,
    pub max_roll_degrees: f64,
    pub seed: u64,
}

impl FixtureSpec {
    /// Eight single-task videos of four subjects whose labels cover all four
    /// severity bands: one training video per subject, and a second video of
    /// each subject in the development or test partition.
    pub fn eight_videos(seed: u64) -> Self {
        let rows = [
            ("v01", "s1", Partition::Training, 5),
            ("v02", "s2", Partition::Training, 17),
            ("v03", "s3", Partition::Training, 24),
            ("v04", "s4", Partition::Training, 41),
            ("v05", "s1", Partition::Development, 5),
            ("v06", "s3", Partition::Development, 24),
            ("v07", "s2", Partition::Test, 17),
            ("v08", "s4", Partition::Test, 41),
        ];
        Self {
            videos: rows
                .iter()
                .map(|(id, subject, p, bdi)| FixtureVideo {
                    video_id: id.to_string(),
                    subject_id: subject.to_string(),
                    task: Task::Single,
                    partition: *p,
                    bdi_score: *bdi,
                })
                .collect(),
            frames_per_video: 12,
            width: 96,
            height: 96,
            max_roll_degrees: 25.0,
            seed,
        }
    }
}

/// Identity traits: landmark offsets (in half-widths) and marker radius.
fn identity(seed: u64, subject_id: &str) -> ([(f64, f64); 5], f64) {
    // FNV-1a keeps the stream independent of the platform
    let key = subject_id
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1d);
    rng.set_stream(key);
    let mut offsets = [(0.0, 0.0); 5];
    for o in &mut offsets {
        *o = (rng.random_range(-0.12..=0.12), rng.random_range(-0.12..=0.12));
    }
    (offsets, rng.random_range(2.5..=4.5))
}

/// Frame `frame` of video `video_index`.
pub fn render_frame(spec: &FixtureSpec, video_index: usize, frame: usize) -> (Image, FaceSpec) {
    let (offsets, radius) = identity(spec.seed, &spec.videos[video_index].subject_id);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(((video_index as u64) << 20) + frame as u64 + 1);
    let min_side = spec.width.min(spec.height) as f64;
    let hw = min_side * rng.random_range(0.2..=0.24);
    let reach = hw * 1.2 * std::f64::consts::SQRT_2 + 2.0;
    let cx = rng.random_range(reach..=(spec.width as f64 - reach).max(reach));
    let cy = rng.random_range(reach..=(spec.height as f64 - reach).max(reach));
    let roll = Angle::from_degrees(rng.random_range(-spec.max_roll_degrees..=spec.max_roll_degrees))
        .expect("finite roll");
    let mut face = FaceSpec::with_offsets(Point2::new(cx, cy), hw, roll, offsets);
    face.marker_radius = radius;
    let mut img = textured_background(spec.width, spec.height, spec.seed.wrapping_add(video_index as u64 * 31 + frame as u64));
    paint_face(&mut img, &face);
    (img, face)
}

/// Writes `root/videos/<video_id>/frame_NNNN.png` for every video plus
/// `root/labels.csv`, and returns the labels path.
pub fn write_corpus(root: &Path, spec: &FixtureSpec) -> Result<PathBuf> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let frames_root = root.join("videos");
    for (vi, v) in spec.videos.iter().enumerate() {
        let dir = frames_root.join(&v.video_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for f in 0..spec.frames_per_video {
            render_frame(spec, vi, f).0.save(&dir.join(format!("frame_{f:04}.png")))?;
        }
    }
    let labels = root.join("labels.csv");
    let file = std::fs::File::create(&labels).map_err(|e| Error::io(&labels, e))?;
    let mut wtr = csv::Writer::from_writer(file);
    wtr.write_record(["video_id", "subject_id", "task", "partition", "bdi_score"])?;
    for v in &spec.videos {
        wtr.write_record([
            v.video_id.as_str(),
            v.subject_id.as_str(),
            v.task.as_str(),
            v.partition.as_str(),
            &v.bdi_score.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io(&labels, e))?;
    Ok(labels)
}

/// Directory holding the per-video frame folders of a written corpus.
pub fn videos_dir(root: &Path) -> PathBuf {
    root.join("videos")
}
