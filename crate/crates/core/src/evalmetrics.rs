//! Frame-level ROC AUC, average precision and per-class breakdowns.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{csv_writer, DataError, Dataset};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::models::Model;

/// Ground truth and predictions for every frame of one test video.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSeries {
    pub video_id: String,
    pub class: Option<String>,
    pub labels: Vec<u8>,
    pub scores: Vec<f64>,
}

/// Frame `f` takes the score of segment `⌊f·n_s/n_f⌋`.
pub fn expand_to_frames(segment_scores: &[f64], frames: usize) -> Result<Vec<f64>> {
    let n_s = segment_scores.len();
    if n_s == 0 || frames == 0 {
        return Err(Error::shape(format!("cannot expand {n_s} segments to {frames} frames")));
    }
    Ok((0..frames).map(|f| segment_scores[f * n_s / frames]).collect())
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::config("labels must be 0 or 1"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Area under the ROC curve in Mann–Whitney form with mid-ranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::config("AUC needs both positive and negative frames"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their midpoint
        let mid = (i + j + 2) as f64 / 2.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += mid * tied_pos as f64;
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// `Σ (R_n − R_{n−1})·P_n` over a stable descending-score sweep.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check_inputs(scores, labels)?;
    if pos == 0 {
        return Err(Error::config("average precision needs at least one positive frame"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (n, &k) in order.iter().enumerate() {
        if labels[k] == 1 {
            hits += 1;
            // recall steps by 1/pos exactly at positives
            ap += hits as f64 / (n + 1) as f64;
        }
    }
    Ok(ap / pos as f64)
}

/// AUC of one anomaly class against all normal test videos.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAuc {
    pub class: String,
    pub videos: usize,
    pub auc: f64,
}

fn pooled<'a>(series: impl Iterator<Item = &'a FrameSeries>) -> (Vec<f64>, Vec<u8>) {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for s in series {
        scores.extend_from_slice(&s.scores);
        labels.extend_from_slice(&s.labels);
    }
    (scores, labels)
}

/// Per-class AUC over the class's anomalous videos plus every normal video.
///
/// Videos with any positive frame count as anomalous and must carry a class.
pub fn per_class_report(series: &[FrameSeries]) -> Result<Vec<ClassAuc>> {
    let mut classes: BTreeMap<&str, Vec<&FrameSeries>> = BTreeMap::new();
    let mut normals = Vec::new();
    for s in series {
        if s.labels.contains(&1) {
            let class = s
                .class
                .as_deref()
                .ok_or_else(|| Error::config(format!("anomalous video `{}` has no class tag", s.video_id)))?;
            classes.entry(class).or_default().push(s);
        } else {
            normals.push(s);
        }
    }
    if classes.is_empty() {
        return Err(Error::config("no anomalous videos to report on"));
    }
    classes
        .into_par_iter()
        .map(|(class, videos)| {
            let (scores, labels) = pooled(videos.iter().copied().chain(normals.iter().copied()));
            Ok(ClassAuc {
                class: class.to_string(),
                videos: videos.len(),
                auc: roc_auc(&scores, &labels)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub ap: f64,
    pub frames: usize,
    pub per_class: Vec<ClassAuc>,
}

impl EvalReport {
    /// One `metric,value` row per number, classes as `auc.<class>`.
    pub fn write_csv<W: Write>(&self, out: W, fingerprint: &str) -> Result<()> {
        let mut w = csv_writer(out, fingerprint, &["metric", "value"])?;
        let mut rows = vec![
            ("auc".to_string(), format!("{:?}", self.auc)),
            ("ap".to_string(), format!("{:?}", self.ap)),
            ("frames".to_string(), self.frames.to_string()),
        ];
        for c in &self.per_class {
            rows.push((format!("auc.{}", c.class), format!("{:?}", c.auc)));
        }
        for (k, v) in rows {
            w.write_record([k, v]).map_err(DataError::from)?;
        }
        w.flush().map_err(DataError::from)?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let classes: Vec<String> = self.per_class.iter().map(|c| format!("{}={:.4}", c.class, c.auc)).collect();
        format!("AUC={:.4} AP={:.4} frames={} [{}]", self.auc, self.ap, self.frames, classes.join(" "))
    }
}

pub fn evaluate_series(series: &[FrameSeries]) -> Result<EvalReport> {
    let (scores, labels) = pooled(series.iter());
    Ok(EvalReport {
        auc: roc_auc(&scores, &labels)?,
        ap: average_precision(&scores, &labels)?,
        frames: scores.len(),
        per_class: per_class_report(series)?,
    })
}

/// Scores every test video with `model` fed the listed dataset streams.
pub fn score_test_split(model: &Model, dataset: &Dataset, streams: &[usize]) -> Result<Vec<FrameSeries>> {
    if streams.len() != model.config.streams() || streams.iter().any(|&t| t >= dataset.stream_count()) {
        return Err(Error::shape(format!(
            "model takes {} stream(s), selection is {streams:?}",
            model.config.streams()
        )));
    }
    let videos: Vec<_> = dataset.test().collect();
    videos
        .par_iter()
        .map(|v| {
            let inputs: Vec<&Tensor> = streams.iter().map(|&t| &v.streams[t]).collect();
            let out = model.forward(&inputs)?;
            Ok(FrameSeries {
                video_id: v.id.clone(),
                class: v.class.clone(),
                labels: v.frame_labels(),
                scores: expand_to_frames(&out.scores, v.frames)?,
            })
        })
        .collect()
}

/// Streams a model consumes by default: all of them, or the student stream for single-stream models.
pub fn default_streams(model: &Model, dataset: &Dataset) -> Vec<usize> {
    if model.config.streams() == 1 && dataset.stream_count() > 1 {
        vec![dataset.student_stream]
    } else {
        (0..dataset.stream_count()).collect()
    }
}

pub fn evaluate_model(model: &Model, dataset: &Dataset) -> Result<(EvalReport, Vec<FrameSeries>)> {
    let series = score_test_split(model, dataset, &default_streams(model, dataset))?;
    Ok((evaluate_series(&series)?, series))
}

/// Per-frame scores of every test video.
pub fn write_frame_scores<W: Write>(out: W, fingerprint: &str, series: &[FrameSeries]) -> Result<()> {
    let mut w = csv_writer(out, fingerprint, &["video_id", "frame", "label", "score"])?;
    for s in series {
        for (f, (l, v)) in s.labels.iter().zip(&s.scores).enumerate() {
            w.write_record([s.video_id.as_str(), &f.to_string(), &l.to_string(), &format!("{v:?}")])
                .map_err(DataError::from)?;
        }
    }
    w.flush().map_err(DataError::from)?;
    Ok(())
}
