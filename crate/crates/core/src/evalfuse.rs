//! Video-level scoring, two-stream fusion, MAE/RMSE and the evaluation
//! protocols.
//!
//! A video's score is the mean of its frame scores, clamped to the BDI-II
//! range. Fusion is a convex combination of the two streams' video scores.
//! Under the joint protocol each subject's two task videos are averaged
//! before metrics are taken.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::{Manifest, Partition, Task};
use crate::error::{Error, Result};
use crate::geom::AlignmentMode;
use crate::net::clamp_score;

#[derive(Debug, Clone, PartialEq)]
pub struct StreamPrediction {
    pub video_id: String,
    pub stream: AlignmentMode,
    /// `(frame_index, score)` in frame order.
    pub frame_scores: Vec<(usize, f64)>,
    pub video_score: f64,
}

impl StreamPrediction {
    pub fn new(video_id: impl Into<String>, stream: AlignmentMode, mut frame_scores: Vec<(usize, f64)>) -> Result<Self> {
        let video_id = video_id.into();
        frame_scores.sort_by_key(|(i, _)| *i);
        let scores: Vec<f64> = frame_scores.iter().map(|(_, s)| *s).collect();
        let video_score =
            video_score(&scores).map_err(|_| Error::NoPrediction(format!("video `{video_id}` has no frame scores")))?;
        Ok(Self {
            video_id,
            stream,
            frame_scores,
            video_score,
        })
    }
}

/// Mean of the frame scores, clamped to `[0, 63]`.
pub fn video_score(frame_scores: &[f64]) -> Result<f64> {
    if frame_scores.is_empty() {
        return Err(Error::NoPrediction("no frame scores".into()));
    }
    let mean = frame_scores.iter().sum::<f64>() / frame_scores.len() as f64;
    clamp_score(mean)
}

fn check_pair(preds: &[f64], labels: &[f64]) -> Result<()> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "need equal non-empty lengths, got {} predictions and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

pub fn mae(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(preds, labels)?;
    Ok(preds.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / preds.len() as f64)
}

pub fn rmse(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(preds, labels)?;
    let mse = preds.iter().zip(labels).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / preds.len() as f64;
    Ok(mse.sqrt())
}

/// Absolute errors sorted from smallest to largest.
pub fn error_distribution(preds: &[f64], labels: &[f64]) -> Result<Vec<f64>> {
    if preds.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut e: Vec<f64> = preds.iter().zip(labels).map(|(p, y)| (p - y).abs()).collect();
    e.sort_by(f64::total_cmp);
    Ok(e)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub w_independent: f64,
    pub w_dependent: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            w_independent: 0.5,
            w_dependent: 0.5,
        }
    }
}

impl FusionWeights {
    pub fn new(w_independent: f64, w_dependent: f64) -> Result<Self> {
        if !(w_independent >= 0.0 && w_dependent >= 0.0) || (w_independent + w_dependent - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!(
                "fusion weights ({w_independent}, {w_dependent}) must be non-negative and sum to 1"
            )));
        }
        Ok(Self {
            w_independent,
            w_dependent,
        })
    }

    pub fn weight(&self, stream: AlignmentMode) -> f64 {
        match stream {
            AlignmentMode::PoseIndependent => self.w_independent,
            AlignmentMode::PoseDependent => self.w_dependent,
        }
    }

    pub fn combine(&self, independent: f64, dependent: f64) -> Result<f64> {
        clamp_score(self.w_independent * independent + self.w_dependent * dependent)
    }
}

/// Fused video score of two stream predictions for the same video.
pub fn fuse_streams(a: &StreamPrediction, b: &StreamPrediction, w: &FusionWeights) -> Result<f64> {
    if a.video_id != b.video_id {
        return Err(Error::Pairing(format!(
            "cannot fuse `{}` with `{}`",
            a.video_id, b.video_id
        )));
    }
    if a.stream == b.stream {
        return Err(Error::Pairing(format!(
            "both predictions for `{}` come from {}",
            a.video_id, a.stream
        )));
    }
    let (ind, dep) = match a.stream {
        AlignmentMode::PoseIndependent => (a, b),
        AlignmentMode::PoseDependent => (b, a),
    };
    w.combine(ind.video_score, dep.video_score)
}

/// One video's score with the identifiers needed for the joint protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoScore {
    pub video_id: String,
    pub subject_id: String,
    pub task: Task,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectScore {
    pub subject_id: String,
    pub score: f64,
}

/// Averages each subject's Northwind and Freeform scores.
pub fn joint_task_scores(videos: &[VideoScore]) -> Result<Vec<SubjectScore>> {
    let mut by_subject: BTreeMap<&str, BTreeMap<Task, f64>> = BTreeMap::new();
    for v in videos {
        let tasks = by_subject.entry(&v.subject_id).or_default();
        if tasks.insert(v.task, v.score).is_some() {
            return Err(Error::Protocol(format!(
                "subject `{}` has two {:?} videos",
                v.subject_id, v.task
            )));
        }
    }
    by_subject
        .into_iter()
        .map(|(subject, tasks)| match (tasks.get(&Task::Northwind), tasks.get(&Task::Freeform), tasks.len()) {
            (Some(n), Some(f), 2) => Ok(SubjectScore {
                subject_id: subject.to_string(),
                score: (n + f) / 2.0,
            }),
            _ => Err(Error::Protocol(format!(
                "subject `{subject}` needs exactly one northwind and one freeform video, has {:?}",
                tasks.keys().collect::<Vec<_>>()
            ))),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    #[default]
    Separated,
    Joint,
    Single,
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separated" => Ok(Protocol::Separated),
            "joint" => Ok(Protocol::Joint),
            "single" => Ok(Protocol::Single),
            other => Err(Error::Parse(format!("unknown protocol `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
}

impl Metrics {
    pub fn compute(preds: &[f64], labels: &[f64]) -> Result<Self> {
        Ok(Self {
            mae: mae(preds, labels)?,
            rmse: rmse(preds, labels)?,
        })
    }
}

/// One evaluated unit: a video (separated, single) or a subject (joint).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitScore {
    pub id: String,
    pub label: f64,
    pub pose_independent: f64,
    pub pose_dependent: f64,
    pub fused: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub partition: Partition,
    pub count: usize,
    pub weights: FusionWeights,
    pub pose_independent: Metrics,
    pub pose_dependent: Metrics,
    pub fused: Metrics,
    /// Fused absolute errors, ascending.
    pub sorted_abs_errors: Vec<f64>,
    pub units: Vec<UnitScore>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("evaluation report: {e}")))
    }

    /// `rank,abs_error` rows of the fused error distribution.
    pub fn write_error_distribution<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["rank", "abs_error"])?;
        for (i, e) in self.sorted_abs_errors.iter().enumerate() {
            wtr.write_record([i.to_string(), e.to_string()])?;
        }
        wtr.flush().map_err(|e| Error::io("<errors>", e))?;
        Ok(())
    }
}

/// Computes the report for `partition` under `protocol` from per-stream
/// predictions. Only videos of that partition are used; each needs a
/// prediction in both streams.
pub fn evaluate_predictions(
    manifest: &Manifest,
    partition: Partition,
    independent: &[StreamPrediction],
    dependent: &[StreamPrediction],
    weights: &FusionWeights,
    protocol: Protocol,
) -> Result<EvalReport> {
    let index = |preds: &[StreamPrediction], want: AlignmentMode| -> Result<BTreeMap<String, f64>> {
        let mut m = BTreeMap::new();
        for p in preds {
            if p.stream != want {
                return Err(Error::Pairing(format!("{} prediction passed as {want}", p.stream)));
            }
            m.insert(p.video_id.clone(), p.video_score);
        }
        Ok(m)
    };
    let ind = index(independent, AlignmentMode::PoseIndependent)?;
    let dep = index(dependent, AlignmentMode::PoseDependent)?;

    let mut videos: Vec<_> = manifest.partition(partition).collect();
    videos.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    if videos.is_empty() {
        return Err(Error::Config(format!("partition {partition:?} has no videos")));
    }
    if protocol == Protocol::Single {
        if let Some(v) = videos.iter().find(|v| v.task != Task::Single) {
            return Err(Error::Protocol(format!(
                "single protocol needs a single-task corpus; `{}` is {:?}",
                v.video_id, v.task
            )));
        }
    }

    let mut per_video = Vec::with_capacity(videos.len());
    for v in &videos {
        let lookup = |m: &BTreeMap<String, f64>, s: AlignmentMode| {
            m.get(&v.video_id)
                .copied()
                .ok_or_else(|| Error::NoPrediction(format!("no {s} prediction for video `{}`", v.video_id)))
        };
        let si = lookup(&ind, AlignmentMode::PoseIndependent)?;
        let sd = lookup(&dep, AlignmentMode::PoseDependent)?;
        per_video.push((*v, si, sd, weights.combine(si, sd)?));
    }

    let units: Vec<UnitScore> = match protocol {
        Protocol::Separated | Protocol::Single => per_video
            .iter()
            .map(|(v, si, sd, f)| UnitScore {
                id: v.video_id.clone(),
                label: f64::from(v.bdi_score),
                pose_independent: *si,
                pose_dependent: *sd,
                fused: *f,
            })
            .collect(),
        Protocol::Joint => {
            let column = |pick: &dyn Fn(&(_, f64, f64, f64)) -> f64| -> Result<Vec<SubjectScore>> {
                let scores: Vec<VideoScore> = per_video
                    .iter()
                    .map(|row| VideoScore {
                        video_id: row.0.video_id.clone(),
                        subject_id: row.0.subject_id.clone(),
                        task: row.0.task,
                        score: pick(row),
                    })
                    .collect();
                joint_task_scores(&scores)
            };
            let labels = column(&|r| f64::from(r.0.bdi_score))?;
            let si = column(&|r| r.1)?;
            let sd = column(&|r| r.2)?;
            let fu = column(&|r| r.3)?;
            labels
                .into_iter()
                .zip(si)
                .zip(sd)
                .zip(fu)
                .map(|(((l, a), b), f)| UnitScore {
                    id: l.subject_id,
                    label: l.score,
                    pose_independent: a.score,
                    pose_dependent: b.score,
                    fused: f.score,
                })
                .collect()
        }
    };

    let labels: Vec<f64> = units.iter().map(|u| u.label).collect();
    let col = |f: fn(&UnitScore) -> f64| units.iter().map(f).collect::<Vec<f64>>();
    let fused = col(|u| u.fused);
    Ok(EvalReport {
        protocol,
        partition,
        count: units.len(),
        weights: *weights,
        pose_independent: Metrics::compute(&col(|u| u.pose_independent), &labels)?,
        pose_dependent: Metrics::compute(&col(|u| u.pose_dependent), &labels)?,
        fused: Metrics::compute(&fused, &labels)?,
        sorted_abs_errors: error_distribution(&fused, &labels)?,
        units,
    })
}

/// Row of a per-frame score file: `video_id,frame_index,score`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameScoreRow {
    pub video_id: String,
    pub frame_index: usize,
    pub score: f64,
}

pub fn write_frame_scores<W: Write>(w: W, preds: &[StreamPrediction]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut sorted: Vec<&StreamPrediction> = preds.iter().collect();
    sorted.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    for p in sorted {
        for (i, s) in &p.frame_scores {
            wtr.serialize(FrameScoreRow {
                video_id: p.video_id.clone(),
                frame_index: *i,
                score: *s,
            })?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<frame scores>", e))?;
    Ok(())
}

/// Groups a per-frame score file back into stream predictions.
pub fn read_frame_scores<R: Read>(r: R, stream: AlignmentMode) -> Result<Vec<StreamPrediction>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut grouped: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for row in rdr.deserialize::<FrameScoreRow>() {
        let row = row?;
        if !row.score.is_finite() {
            return Err(Error::Parse(format!("non-finite score for video `{}`", row.video_id)));
        }
        let frames = grouped.entry(row.video_id).or_default();
        if frames.iter().any(|(i, _)| *i == row.frame_index) {
            return Err(Error::Parse(format!("duplicate frame {} in score file", row.frame_index)));
        }
        frames.push((row.frame_index, row.score));
    }
    grouped
        .into_iter()
        .map(|(id, frames)| StreamPrediction::new(id, stream, frames))
        .collect()
}

/// Stream column of a predictions file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamLabel {
    PoseDependent,
    PoseIndependent,
    Fused,
}

impl From<AlignmentMode> for StreamLabel {
    fn from(m: AlignmentMode) -> Self {
        match m {
            AlignmentMode::PoseDependent => StreamLabel::PoseDependent,
            AlignmentMode::PoseIndependent => StreamLabel::PoseIndependent,
        }
    }
}

/// Row of a predictions file: `video_id,task,stream,score`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub video_id: String,
    pub task: Task,
    pub stream: StreamLabel,
    pub score: f64,
}

pub fn write_predictions<W: Write>(w: W, rows: &[PredictionRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|e| Error::io("<predictions>", e))?;
    Ok(())
}

pub fn read_predictions<R: Read>(r: R) -> Result<Vec<PredictionRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let rows = rdr.deserialize().collect::<Result<Vec<PredictionRow>, _>>()?;
    if let Some(bad) = rows.iter().find(|r| !r.score.is_finite()) {
        return Err(Error::Parse(format!("non-finite score for video `{}`", bad.video_id)));
    }
    Ok(rows)
}

/// Fuses two per-stream prediction files video by video.
pub fn fuse_prediction_rows(
    independent: &[PredictionRow],
    dependent: &[PredictionRow],
    weights: &FusionWeights,
) -> Result<Vec<PredictionRow>> {
    let dep: BTreeMap<&str, &PredictionRow> = dependent.iter().map(|r| (r.video_id.as_str(), r)).collect();
    let mut out = Vec::with_capacity(independent.len());
    let mut ind_sorted: Vec<&PredictionRow> = independent.iter().collect();
    ind_sorted.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    for a in ind_sorted {
        if a.stream != StreamLabel::PoseIndependent {
            return Err(Error::Pairing(format!("`{}` is not a pose_independent prediction", a.video_id)));
        }
        let b = dep
            .get(a.video_id.as_str())
            .ok_or_else(|| Error::Pairing(format!("no pose_dependent prediction for `{}`", a.video_id)))?;
        if b.stream != StreamLabel::PoseDependent {
            return Err(Error::Pairing(format!("`{}` is not a pose_dependent prediction", b.video_id)));
        }
        out.push(PredictionRow {
            video_id: a.video_id.clone(),
            task: a.task,
            stream: StreamLabel::Fused,
            score: weights.combine(a.score, b.score)?,
        });
    }
    if dep.len() != out.len() {
        return Err(Error::Pairing("stream prediction files cover different videos".into()));
    }
    Ok(out)
}

/// Minimal SVG bar chart of an ascending absolute-error list.
pub fn render_error_plot(errors: &[f64], title: &str) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let max = errors.iter().cloned().fold(1.0f64, f64::max);
    let n = errors.len().max(1) as f64;
    let bar = (w - 2.0 * pad) / n;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" font-size="14" text-anchor="middle">{}</text>"#,
        w / 2.0,
        title.replace('&', "&amp;").replace('<', "&lt;")
    );
    for (i, e) in errors.iter().enumerate() {
        let bh = (h - 2.0 * pad) * e / max;
        let _ = writeln!(
            svg,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4a78b5"/>"##,
            pad + i as f64 * bar,
            h - pad - bh,
            (bar * 0.9).max(0.5),
            bh
        );
    }
    let _ = writeln!(
        svg,
        r#"<line x1="{pad}" y1="{y}" x2="{x2}" y2="{y}" stroke="black"/>"#,
        y = h - pad,
        x2 = w - pad
    );
    let _ = writeln!(
        svg,
        r#"<text x="10" y="{}" font-size="11">{max:.2}</text>"#,
        pad + 4.0
    );
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::VideoRecord;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sp(id: &str, stream: AlignmentMode, scores: &[f64]) -> StreamPrediction {
        StreamPrediction::new(id, stream, scores.iter().copied().enumerate().collect()).unwrap()
    }

    #[test]
    fn video_score_examples() {
        assert_eq!(video_score(&[7.5; 9]).unwrap(), 7.5);
        assert_eq!(video_score(&[4.0, 6.0]).unwrap(), 5.0);
        assert!(matches!(video_score(&[]), Err(Error::NoPrediction(_))));
        assert_eq!(video_score(&[70.0, 80.0]).unwrap(), 63.0);
    }

    #[test]
    fn metric_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 3.5);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 3.53553).abs() < 1e-5);
        assert!(mae(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn error_distribution_examples() {
        assert_eq!(error_distribution(&[5.0, 1.0], &[1.0, 5.0]).unwrap(), vec![4.0, 4.0]);
        assert_eq!(error_distribution(&[2.0, 3.0], &[2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        assert!(error_distribution(&[1.0], &[]).is_err());
    }

    #[test]
    fn fusion_examples() {
        use AlignmentMode::*;
        let w = FusionWeights::new(0.7, 0.3).unwrap();
        let a = sp("v", PoseIndependent, &[12.0]);
        let b = sp("v", PoseDependent, &[12.0]);
        assert!((fuse_streams(&a, &b, &w).unwrap() - 12.0).abs() < 1e-12);
        let a = sp("v", PoseIndependent, &[10.0]);
        let b = sp("v", PoseDependent, &[0.0]);
        assert!((fuse_streams(&a, &b, &w).unwrap() - 7.0).abs() < 1e-12);
        assert!((fuse_streams(&b, &a, &w).unwrap() - 7.0).abs() < 1e-12);
        let one = FusionWeights::new(1.0, 0.0).unwrap();
        assert_eq!(fuse_streams(&a, &b, &one).unwrap(), 10.0);
        let other = sp("u", PoseDependent, &[1.0]);
        assert!(matches!(fuse_streams(&a, &other, &w), Err(Error::Pairing(_))));
        assert!(matches!(fuse_streams(&a, &a, &w), Err(Error::Pairing(_))));
        assert!(FusionWeights::new(0.6, 0.6).is_err());
        assert!(FusionWeights::new(-0.1, 1.1).is_err());
    }

    fn vs(subject: &str, task: Task, score: f64) -> VideoScore {
        VideoScore {
            video_id: format!("{subject}_{task:?}"),
            subject_id: subject.into(),
            task,
            score,
        }
    }

    #[test]
    fn joint_examples() {
        let out = joint_task_scores(&[vs("s", Task::Northwind, 6.0), vs("s", Task::Freeform, 8.0)]).unwrap();
        assert_eq!(out, vec![SubjectScore { subject_id: "s".into(), score: 7.0 }]);
        let out = joint_task_scores(&[vs("s", Task::Northwind, 9.5), vs("s", Task::Freeform, 9.5)]).unwrap();
        assert_eq!(out[0].score, 9.5);
        let err = joint_task_scores(&[vs("s", Task::Northwind, 6.0)]).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
        let mut many = Vec::new();
        for i in 0..50 {
            many.push(vs(&format!("s{i:02}"), Task::Northwind, i as f64));
            many.push(vs(&format!("s{i:02}"), Task::Freeform, i as f64 + 1.0));
        }
        assert_eq!(joint_task_scores(&many).unwrap().len(), 50);
    }

    #[test]
    fn oracle_agreement_on_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let preds: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..63.0)).collect();
        let labels: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..63.0)).collect();
        let mut abs_sum = 0.0;
        let mut sq_sum = 0.0;
        for i in 0..1000 {
            let d = preds[i] - labels[i];
            abs_sum += if d < 0.0 { -d } else { d };
            sq_sum += d * d;
        }
        let m = mae(&preds, &labels).unwrap();
        let r = rmse(&preds, &labels).unwrap();
        assert!((m - abs_sum / 1000.0).abs() <= 1e-9 * m);
        assert!((r - (sq_sum / 1000.0).sqrt()).abs() <= 1e-9 * r);
        assert!(r >= m);
        let mut total = 0.0;
        for p in &preds {
            total += p;
        }
        assert!((video_score(&preds).unwrap() - total / 1000.0).abs() <= 1e-9);
    }

    #[test]
    fn frame_score_file_round_trip_is_exact() {
        let preds = vec![
            sp("b", AlignmentMode::PoseDependent, &[1.0 / 3.0, 12.345678901234567, 0.1]),
            sp("a", AlignmentMode::PoseDependent, &[5e-17, 62.99999999999999]),
        ];
        let mut buf = Vec::new();
        write_frame_scores(&mut buf, &preds).unwrap();
        let back = read_frame_scores(buf.as_slice(), AlignmentMode::PoseDependent).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], preds[1]);
        assert_eq!(back[1], preds[0]);
    }

    fn manifest(records: Vec<VideoRecord>) -> Manifest {
        Manifest {
            corpus_name: "fixture".into(),
            layout: crate::corpus::Layout::Generic,
            stride: 1,
            root: "/nonexistent".into(),
            records,
        }
    }

    fn rec(id: &str, subject: &str, task: Task, partition: Partition, bdi: u8) -> VideoRecord {
        VideoRecord {
            video_id: id.into(),
            subject_id: subject.into(),
            task,
            partition,
            bdi_score: bdi,
            frame_count: 1,
            frame_paths: vec![],
        }
    }

    #[test]
    fn four_video_fixture_matches_standalone_ops() {
        use AlignmentMode::*;
        let m = manifest(vec![
            rec("v1", "s1", Task::Single, Partition::Test, 3),
            rec("v2", "s2", Task::Single, Partition::Test, 17),
            rec("v3", "s3", Task::Single, Partition::Test, 25),
            rec("v4", "s4", Task::Single, Partition::Test, 40),
            rec("t1", "s5", Task::Single, Partition::Training, 9),
        ]);
        let ind = vec![
            sp("v1", PoseIndependent, &[2.0, 4.0]),
            sp("v2", PoseIndependent, &[20.0]),
            sp("v3", PoseIndependent, &[22.0, 23.0, 24.0]),
            sp("v4", PoseIndependent, &[35.0]),
        ];
        let dep = vec![
            sp("v4", PoseDependent, &[44.0, 40.0]),
            sp("v3", PoseDependent, &[26.0]),
            sp("v2", PoseDependent, &[15.0]),
            sp("v1", PoseDependent, &[5.0]),
        ];
        let w = FusionWeights::default();
        let rep = evaluate_predictions(&m, Partition::Test, &ind, &dep, &w, Protocol::Single).unwrap();
        let labels = [3.0, 17.0, 25.0, 40.0];
        let si = [3.0, 20.0, 23.0, 35.0];
        let sd = [5.0, 15.0, 26.0, 42.0];
        let fu: Vec<f64> = si.iter().zip(&sd).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
        assert_eq!(rep.count, 4);
        assert_eq!(rep.pose_independent.mae, mae(&si, &labels).unwrap());
        assert_eq!(rep.pose_dependent.rmse, rmse(&sd, &labels).unwrap());
        assert_eq!(rep.fused.mae, mae(&fu, &labels).unwrap());
        assert_eq!(rep.sorted_abs_errors, error_distribution(&fu, &labels).unwrap());

        // ordering of manifest records does not matter
        let mut shuffled = m.clone();
        shuffled.records.reverse();
        let rep2 = evaluate_predictions(&shuffled, Partition::Test, &ind, &dep, &w, Protocol::Single).unwrap();
        assert_eq!(rep, rep2);

        let missing = &dep[1..];
        assert!(matches!(
            evaluate_predictions(&m, Partition::Test, &ind, missing, &w, Protocol::Single),
            Err(Error::NoPrediction(_))
        ));
    }

    #[test]
    fn constant_model_on_constant_labels_scores_zero() {
        use AlignmentMode::*;
        let m = manifest(
            (0..6)
                .map(|i| rec(&format!("v{i}"), &format!("s{i}"), Task::Single, Partition::Test, 21))
                .collect(),
        );
        let ind: Vec<_> = (0..6).map(|i| sp(&format!("v{i}"), PoseIndependent, &[21.0; 4])).collect();
        let dep: Vec<_> = (0..6).map(|i| sp(&format!("v{i}"), PoseDependent, &[21.0; 3])).collect();
        let rep = evaluate_predictions(&m, Partition::Test, &ind, &dep, &FusionWeights::default(), Protocol::Separated)
            .unwrap();
        for metrics in [rep.pose_independent, rep.pose_dependent, rep.fused] {
            assert_eq!(metrics.mae, 0.0);
            assert_eq!(metrics.rmse, 0.0);
        }
    }

    #[test]
    fn predictions_fuse_file_level() {
        let row = |id: &str, s: StreamLabel, v: f64| PredictionRow {
            video_id: id.into(),
            task: Task::Single,
            stream: s,
            score: v,
        };
        let a = vec![row("x", StreamLabel::PoseIndependent, 10.0), row("y", StreamLabel::PoseIndependent, 4.0)];
        let b = vec![row("y", StreamLabel::PoseDependent, 8.0), row("x", StreamLabel::PoseDependent, 20.0)];
        let fused = fuse_prediction_rows(&a, &b, &FusionWeights::default()).unwrap();
        assert_eq!(fused[0].score, 15.0);
        assert_eq!(fused[1].score, 6.0);
        let mut buf = Vec::new();
        write_predictions(&mut buf, &fused).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("video_id,task,stream,score\n"));
        assert_eq!(read_predictions(buf.as_slice()).unwrap(), fused);
        assert!(fuse_prediction_rows(&a, &b[..1], &FusionWeights::default()).is_err());
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(v in prop::collection::vec((-100.0..100.0f64, -100.0..100.0f64), 1..200)) {
            let (p, y): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let m = mae(&p, &y).unwrap();
            let r = rmse(&p, &y).unwrap();
            prop_assert!(r >= m * (1.0 - 1e-12));
        }

        #[test]
        fn fusion_is_idempotent_and_affine(s in 0.0..63.0f64, t in 0.0..63.0f64, wi in 0.0..=1.0f64) {
            use AlignmentMode::*;
            let w = FusionWeights::new(wi, 1.0 - wi).unwrap();
            let a = sp("v", PoseIndependent, &[s]);
            let b = sp("v", PoseDependent, &[s]);
            prop_assert!((fuse_streams(&a, &b, &w).unwrap() - s).abs() < 1e-9);
            let c = sp("v", PoseDependent, &[t]);
            let f = fuse_streams(&a, &c, &w).unwrap();
            prop_assert!((f - (wi * s + (1.0 - wi) * t)).abs() < 1e-9);
        }

        #[test]
        fn joint_of_constant_subject_scores_is_identity(scores in prop::collection::vec(0.0..63.0f64, 1..30)) {
            let mut v = Vec::new();
            for (i, s) in scores.iter().enumerate() {
                v.push(vs(&format!("s{i:03}"), Task::Freeform, *s));
                v.push(vs(&format!("s{i:03}"), Task::Northwind, *s));
            }
            let out = joint_task_scores(&v).unwrap();
            for (o, s) in out.iter().zip(&scores) {
                prop_assert_eq!(o.score, *s);
            }
        }
    }
}
