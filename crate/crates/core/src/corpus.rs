//! Corpus ingestion: labels, manifests, frame sampling, severity bands and
//! the preprocessing pass that writes aligned crops to disk.
//!
//! On-disk corpus layout: `corpus_root/<video_id>/` holds the frames of one
//! video as image files whose lexicographic order is the frame order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::{primary_face, DetectorConfig, FaceDetector};
use crate::error::{Error, Result};
use crate::geom::{align_pose_dependent, align_pose_independent, AlignmentMode};
use crate::image::Image;

pub const MAX_BDI: u8 = 63;
const FRAME_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Northwind,
    Freeform,
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Training,
    Development,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Training, Partition::Development, Partition::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Training => "training",
            Partition::Development => "development",
            Partition::Test => "test",
        }
    }
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Northwind => "northwind",
            Task::Freeform => "freeform",
            Task::Single => "single",
        }
    }
}

impl std::str::FromStr for Partition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "training" => Ok(Partition::Training),
            "development" => Ok(Partition::Development),
            "test" => Ok(Partition::Test),
            other => Err(Error::Parse(format!("unknown partition `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Avec2013,
    Avec2014,
    #[default]
    Generic,
}

impl std::str::FromStr for Layout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avec2013" => Ok(Layout::Avec2013),
            "avec2014" => Ok(Layout::Avec2014),
            "generic" => Ok(Layout::Generic),
            other => Err(Error::Parse(format!("unknown corpus layout `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeverityBand {
    Minimal,
    Mild,
    Moderate,
    Severe,
}

/// BDI-II bands: minimal 0-13, mild 14-19, moderate 20-28, severe 29-63.
pub fn severity_band(score: i64) -> Result<SeverityBand> {
    match score {
        0..=13 => Ok(SeverityBand::Minimal),
        14..=19 => Ok(SeverityBand::Mild),
        20..=28 => Ok(SeverityBand::Moderate),
        29..=63 => Ok(SeverityBand::Severe),
        _ => Err(Error::Label(format!("BDI-II score {score} outside [0, 63]"))),
    }
}

/// Frame indices `0, stride, 2*stride, ...` below `frame_count`.
pub fn sample_frames(frame_count: usize, stride: usize) -> Vec<usize> {
    (0..frame_count).step_by(stride.max(1)).collect()
}

/// One row of the labels file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub video_id: String,
    pub subject_id: String,
    pub task: Task,
    pub partition: Partition,
    pub bdi_score: u8,
}

#[derive(Deserialize)]
struct RawLabelRow {
    video_id: String,
    subject_id: String,
    task: Task,
    partition: Partition,
    bdi_score: i64,
}

/// Parses `video_id,subject_id,task,partition,bdi_score` with a header row.
pub fn parse_labels<R: Read>(reader: R) -> Result<Vec<LabelRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for (line, row) in rdr.deserialize::<RawLabelRow>().enumerate() {
        let row = row?;
        if row.video_id.is_empty() {
            return Err(Error::Label(format!("row {}: empty video_id", line + 1)));
        }
        severity_band(row.bdi_score)
            .map_err(|_| Error::Label(format!("video `{}`: BDI-II score {} outside [0, 63]", row.video_id, row.bdi_score)))?;
        out.push(LabelRow {
            video_id: row.video_id,
            subject_id: row.subject_id,
            task: row.task,
            partition: row.partition,
            bdi_score: row.bdi_score as u8,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub subject_id: String,
    pub task: Task,
    pub partition: Partition,
    pub bdi_score: u8,
    pub frame_count: usize,
    /// Frame files in order; empty when the raw corpus is not on disk.
    #[serde(skip)]
    pub frame_paths: Vec<PathBuf>,
}

impl VideoRecord {
    pub fn band(&self) -> SeverityBand {
        severity_band(i64::from(self.bdi_score)).expect("scores are range-checked on construction")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestMeta {
    corpus_name: String,
    layout: Layout,
    stride: usize,
    root: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub corpus_name: String,
    pub layout: Layout,
    pub stride: usize,
    pub root: PathBuf,
    pub records: Vec<VideoRecord>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.stride == 0 {
            problems.push("stride must be at least 1".to_string());
        }
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert(r.video_id.as_str()) {
                problems.push(format!("duplicate video_id `{}`", r.video_id));
            }
            if r.bdi_score > MAX_BDI {
                problems.push(format!("video `{}`: BDI-II score {} outside [0, 63]", r.video_id, r.bdi_score));
            }
        }
        for p in Partition::ALL {
            if !self.records.iter().any(|r| r.partition == p) {
                problems.push(format!("partition {p:?} is empty"));
            }
        }
        match self.layout {
            Layout::Avec2013 => {
                for r in self.records.iter().filter(|r| r.task != Task::Single) {
                    problems.push(format!("video `{}`: avec2013 corpora have only task `single`", r.video_id));
                }
            }
            Layout::Avec2014 => {
                let mut by_subject: BTreeMap<&str, Vec<Task>> = BTreeMap::new();
                for r in &self.records {
                    by_subject.entry(&r.subject_id).or_default().push(r.task);
                }
                for (subject, mut tasks) in by_subject {
                    tasks.sort();
                    if tasks != [Task::Northwind, Task::Freeform] {
                        problems.push(format!(
                            "subject `{subject}` has tasks {tasks:?}; avec2014 needs exactly one northwind and one freeform"
                        ));
                    }
                }
            }
            Layout::Generic => {}
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Manifest(problems))
        }
    }

    pub fn partition(&self, p: Partition) -> impl Iterator<Item = &VideoRecord> {
        self.records.iter().filter(move |r| r.partition == p)
    }

    pub fn get(&self, video_id: &str) -> Option<&VideoRecord> {
        self.records.iter().find(|r| r.video_id == video_id)
    }

    /// Writes the manifest: one `#`-prefixed JSON metadata line, then a
    /// header and one row per video.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let meta = ManifestMeta {
            corpus_name: self.corpus_name.clone(),
            layout: self.layout,
            stride: self.stride,
            root: self.root.clone(),
        };
        let meta = serde_json::to_string(&meta).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(w, "# {meta}").map_err(|e| Error::io("<manifest>", e))?;
        let mut wtr = csv::Writer::from_writer(w);
        for r in &self.records {
            wtr.serialize(r)?;
        }
        wtr.flush().map_err(|e| Error::io("<manifest>", e))?;
        Ok(())
    }

    /// Parses a manifest written by [`Manifest::write`]. Frame paths are
    /// re-listed from `root` when the video directory exists.
    pub fn read<R: Read>(mut reader: R) -> Result<Self> {
        let mut text = String::new();
        reader
            .read_to_string(&mut text)
            .map_err(|e| Error::Parse(format!("manifest is not UTF-8 text: {e}")))?;
        let (first, rest) = text.split_once('\n').unwrap_or((text.as_str(), ""));
        let meta_json = first
            .strip_prefix('#')
            .ok_or_else(|| Error::Parse("manifest lacks its `#` metadata line".into()))?;
        let meta: ManifestMeta =
            serde_json::from_str(meta_json.trim()).map_err(|e| Error::Parse(format!("manifest metadata: {e}")))?;
        let mut rdr = csv::Reader::from_reader(rest.as_bytes());
        let mut records = Vec::new();
        for row in rdr.deserialize::<VideoRecord>() {
            let mut r = row?;
            let dir = meta.root.join(&r.video_id);
            if dir.is_dir() {
                r.frame_paths = list_frames(&dir)?;
                if r.frame_paths.len() != r.frame_count {
                    return Err(Error::Manifest(vec![format!(
                        "video `{}`: manifest lists {} frames but {} are on disk",
                        r.video_id,
                        r.frame_count,
                        r.frame_paths.len()
                    )]));
                }
            }
            records.push(r);
        }
        let m = Manifest {
            corpus_name: meta.corpus_name,
            layout: meta.layout,
            stride: meta.stride,
            root: meta.root,
            records,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(f)
    }
}

/// Image files of one video directory in lexicographic order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut frames = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_frame = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if path.is_file() && is_frame {
            frames.push(path);
        }
    }
    frames.sort();
    Ok(frames)
}

/// Joins the video directories under `corpus_root` with the labels file.
///
/// Every problem found (unlabelled video, label without video, duplicate
/// id, empty video, layout violation) is collected into one manifest error.
pub fn build_manifest(
    corpus_root: &Path,
    layout: Layout,
    labels_file: &Path,
    stride: usize,
    corpus_name: &str,
) -> Result<Manifest> {
    let f = fs::File::open(labels_file).map_err(|e| Error::io(labels_file, e))?;
    let labels = parse_labels(f)?;

    let mut problems = Vec::new();
    let mut by_id: BTreeMap<String, LabelRow> = BTreeMap::new();
    for row in labels {
        if by_id.contains_key(&row.video_id) {
            problems.push(format!("duplicate label for video `{}`", row.video_id));
        } else {
            by_id.insert(row.video_id.clone(), row);
        }
    }

    let mut dirs = BTreeMap::new();
    for entry in fs::read_dir(corpus_root).map_err(|e| Error::io(corpus_root, e))? {
        let path = entry.map_err(|e| Error::io(corpus_root, e))?.path();
        if path.is_dir() {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                dirs.insert(name.to_string(), path);
            }
        }
    }

    for id in dirs.keys().filter(|id| !by_id.contains_key(*id)) {
        problems.push(format!("video `{id}` has no label"));
    }
    for id in by_id.keys().filter(|id| !dirs.contains_key(*id)) {
        problems.push(format!("label for `{id}` has no video directory"));
    }

    let mut records = Vec::new();
    for (id, label) in &by_id {
        let Some(dir) = dirs.get(id) else { continue };
        let frames = list_frames(dir)?;
        if frames.is_empty() {
            problems.push(format!("video `{id}` has no frames"));
            continue;
        }
        records.push(VideoRecord {
            video_id: id.clone(),
            subject_id: label.subject_id.clone(),
            task: label.task,
            partition: label.partition,
            bdi_score: label.bdi_score,
            frame_count: frames.len(),
            frame_paths: frames,
        });
    }

    let manifest = Manifest {
        corpus_name: corpus_name.to_string(),
        layout,
        stride,
        root: corpus_root.to_path_buf(),
        records,
    };
    if let Err(Error::Manifest(more)) = manifest.validate() {
        problems.extend(more);
    }
    if problems.is_empty() {
        Ok(manifest)
    } else {
        Err(Error::Manifest(problems))
    }
}

/// Per-video preprocessing counts. Column order of the report file follows
/// field order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoPreprocess {
    pub video_id: String,
    pub sampled: usize,
    pub processed: usize,
    pub no_face_skipped: usize,
    pub padding_flagged: usize,
    pub redetect_fallback: usize,
    pub status: VideoStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VideoStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PreprocessReport {
    pub videos: Vec<VideoPreprocess>,
}

impl PreprocessReport {
    pub fn failures(&self) -> Vec<&str> {
        self.videos
            .iter()
            .filter(|v| v.status == VideoStatus::Failed)
            .map(|v| v.video_id.as_str())
            .collect()
    }

    pub fn total_processed(&self) -> usize {
        self.videos.iter().map(|v| v.processed).sum()
    }

    /// Header `video_id,sampled,processed,no_face_skipped,padding_flagged,redetect_fallback,status`.
    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for v in &self.videos {
            wtr.serialize(v)?;
        }
        wtr.flush().map_err(|e| Error::io("<report>", e))?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let videos = rdr.deserialize().collect::<Result<Vec<VideoPreprocess>, _>>()?;
        Ok(Self { videos })
    }
}

/// Directory holding the crops of one video for one stream.
pub fn crop_dir(out_root: &Path, mode: AlignmentMode, video_id: &str) -> PathBuf {
    out_root.join(mode.as_str()).join(video_id)
}

pub fn crop_file_name(frame_index: usize) -> String {
    format!("{frame_index:06}.png")
}

/// `(frame_index, path)` pairs of the stored crops of one video, by index.
pub fn list_crops(out_root: &Path, mode: AlignmentMode, video_id: &str) -> Result<Vec<(usize, PathBuf)>> {
    let dir = crop_dir(out_root, mode, video_id);
    let mut out = Vec::new();
    for path in list_frames(&dir)? {
        let idx = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::Config(format!("unexpected crop file {}", path.display())))?;
        out.push((idx, path));
    }
    out.sort();
    Ok(out)
}

/// Detects, aligns and stores one crop per sampled frame of every video.
pub fn extract_and_align(
    manifest: &Manifest,
    detector: &DetectorConfig,
    mode: AlignmentMode,
    target: usize,
    out_root: &Path,
) -> Result<PreprocessReport> {
    manifest.validate()?;
    let det = FaceDetector::new(detector)?;
    let mut videos = manifest
        .records
        .par_iter()
        .map(|r| preprocess_video(r, manifest.stride, &det, mode, target, out_root))
        .collect::<Result<Vec<_>>>()?;
    videos.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    Ok(PreprocessReport { videos })
}

fn preprocess_video(
    record: &VideoRecord,
    stride: usize,
    det: &FaceDetector,
    mode: AlignmentMode,
    target: usize,
    out_root: &Path,
) -> Result<VideoPreprocess> {
    if record.frame_paths.len() != record.frame_count {
        return Err(Error::Config(format!(
            "video `{}`: raw frames are not available",
            record.video_id
        )));
    }
    let dir = crop_dir(out_root, mode, &record.video_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let indices = sample_frames(record.frame_paths.len(), stride);
    let mut stats = VideoPreprocess {
        video_id: record.video_id.clone(),
        sampled: indices.len(),
        processed: 0,
        no_face_skipped: 0,
        padding_flagged: 0,
        redetect_fallback: 0,
        status: VideoStatus::Ok,
    };
    for idx in indices {
        let frame = Image::load(&record.frame_paths[idx])?;
        let found = det.detect(&frame)?;
        let Ok(face) = primary_face(&found) else {
            stats.no_face_skipped += 1;
            continue;
        };
        let aligned = match mode {
            AlignmentMode::PoseIndependent => align_pose_independent(&frame, idx, &face, target),
            AlignmentMode::PoseDependent => align_pose_dependent(&frame, idx, &face, |im| det.detect(im), target),
        };
        let aligned = match aligned {
            Ok(a) => a,
            Err(Error::DegenerateLandmarks(_) | Error::InvalidCrop(_)) => {
                stats.no_face_skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        aligned.pixels.save(&dir.join(crop_file_name(idx)))?;
        stats.processed += 1;
        stats.padding_flagged += usize::from(aligned.touched_padding);
        stats.redetect_fallback += usize::from(aligned.redetect_fallback);
    }
    if stats.processed == 0 {
        stats.status = VideoStatus::Failed;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn severity_boundaries() {
        use SeverityBand::*;
        let cases = [
            (0, Minimal),
            (13, Minimal),
            (14, Mild),
            (19, Mild),
            (20, Moderate),
            (28, Moderate),
            (29, Severe),
            (63, Severe),
        ];
        for (s, b) in cases {
            assert_eq!(severity_band(s).unwrap(), b, "score {s}");
        }
        assert!(matches!(severity_band(-1), Err(Error::Label(_))));
        assert!(matches!(severity_band(64), Err(Error::Label(_))));
    }

    #[test]
    fn severity_is_monotone() {
        let bands: Vec<_> = (0..=63).map(|s| severity_band(s).unwrap()).collect();
        assert!(bands.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn sample_frames_examples() {
        assert_eq!(sample_frames(10, 1), (0..10).collect::<Vec<_>>());
        let s = sample_frames(100, 9);
        assert_eq!(s.len(), 12);
        assert_eq!(&s[..3], &[0, 9, 18]);
        assert_eq!(*s.last().unwrap(), 99);
        assert_eq!(sample_frames(1, 9), vec![0]);
    }

    #[test]
    fn sample_frames_exhaustive_small() {
        for count in 1..=300usize {
            for stride in 1..=40usize {
                let s = sample_frames(count, stride);
                assert_eq!(s.len(), count.div_ceil(stride));
                assert!(s.windows(2).all(|w| w[0] < w[1]));
                assert!(s.iter().all(|i| *i < count));
            }
        }
    }

    #[test]
    fn labels_parse_and_reject() {
        let ok = "video_id,subject_id,task,partition,bdi_score\nv1,s1,single,training,12\nv2,s2,single,test,0\n";
        let rows = parse_labels(ok.as_bytes()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].bdi_score, 12);

        let bad = "video_id,subject_id,task,partition,bdi_score\nv1,s1,single,training,64\n";
        assert!(matches!(parse_labels(bad.as_bytes()), Err(Error::Label(_))));
        let bad = "video_id,subject_id,task,partition,bdi_score\nv1,s1,single,training,-2\n";
        assert!(matches!(parse_labels(bad.as_bytes()), Err(Error::Label(_))));
        let bad = "video_id,subject_id,task,partition,bdi_score\nv1,s1,bogus,training,3\n";
        assert!(parse_labels(bad.as_bytes()).is_err());
    }

    fn record(id: &str, subject: &str, task: Task, partition: Partition) -> VideoRecord {
        VideoRecord {
            video_id: id.into(),
            subject_id: subject.into(),
            task,
            partition,
            bdi_score: 10,
            frame_count: 3,
            frame_paths: Vec::new(),
        }
    }

    #[test]
    fn avec2014_needs_both_tasks() {
        use Partition::*;
        use Task::*;
        let mut m = Manifest {
            corpus_name: "t".into(),
            layout: Layout::Avec2014,
            stride: 1,
            root: PathBuf::from("/nonexistent"),
            records: vec![
                record("a_n", "a", Northwind, Training),
                record("a_f", "a", Freeform, Training),
                record("b_n", "b", Northwind, Development),
                record("b_f", "b", Freeform, Development),
                record("c_n", "c", Northwind, Test),
            ],
        };
        let err = m.validate().unwrap_err();
        assert!(err.to_string().contains("subject `c`"));
        m.records.push(record("c_f", "c", Freeform, Test));
        m.validate().unwrap();
        m.records.push(record("c_f", "c", Freeform, Test));
        assert!(m.validate().unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn manifest_text_round_trip() {
        use Partition::*;
        let m = Manifest {
            corpus_name: "synthetic".into(),
            layout: Layout::Generic,
            stride: 9,
            root: PathBuf::from("/nonexistent/root dir"),
            records: vec![
                record("v1", "s1", Task::Single, Training),
                record("v2", "s2", Task::Single, Development),
                record("v3", "s3", Task::Single, Test),
            ],
        };
        let mut buf = Vec::new();
        m.write(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().nth(1).unwrap() == "video_id,subject_id,task,partition,bdi_score,frame_count");
        assert_eq!(Manifest::read(buf.as_slice()).unwrap(), m);
    }
}
