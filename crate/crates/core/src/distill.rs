//! Second-stage distillation of the frozen teacher into a single-stream student.
//!
//! Two signals are combined:
//!
//! * prediction level: binary cross-entropy between the student's segment
//!   scores and the refined pseudo-labels;
//! * feature level: InfoNCE between projected teacher and student
//!   representations. Segments are split into anomalous and normal sets by
//!   thresholding the teacher's scores at `δ`; an anchor's positive is the
//!   other model's projection of the same segment and its negatives are the
//!   student's projections of the opposite class.
//!
//! The total is `L_bce + α·τ²·L_nce`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Video};
use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::miltrain::{add_grads, apply_adagrad, class_indices, epoch_batches, OptimConfig, OptimizerState};
use crate::models::{Model, ModelOutput};
use crate::params::{glorot_uniform, ParamStore};
use crate::refinery::PseudoLabelStore;

/// Prediction clamp used inside the cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Teacher-score threshold separating anomalous from normal segments.
    pub delta: f64,
    pub tau: f64,
    pub alpha: f64,
    pub proj_hidden: usize,
    pub proj_out: usize,
    /// Include the prediction-level term.
    pub use_bce: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            delta: 0.9,
            tau: 10.0,
            alpha: 7.5,
            proj_hidden: 512,
            proj_out: 128,
            use_bce: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config(format!("delta {} must lie in (0, 1)", self.delta)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config("tau must be positive"));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::config("alpha must be non-negative"));
        }
        if self.proj_hidden == 0 || self.proj_out == 0 {
            return Err(Error::config("projection head widths must be positive"));
        }
        if !self.use_bce && self.alpha == 0.0 {
            return Err(Error::config("both distillation terms are disabled"));
        }
        Ok(())
    }

    fn uses_nce(&self) -> bool {
        self.alpha > 0.0
    }
}

/// `L_bce + α·τ²·L_nce`.
pub fn distill_loss(bce: f64, nce: f64, alpha: f64, tau: f64) -> f64 {
    bce + alpha * tau * tau * nce
}

/// Mean binary cross-entropy with predictions clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_loss(labels: &[f64], preds: &[f64]) -> Result<f64> {
    if labels.len() != preds.len() || labels.is_empty() {
        return Err(Error::shape(format!(
            "{} labels for {} predictions",
            labels.len(),
            preds.len()
        )));
    }
    let total: f64 = labels
        .iter()
        .zip(preds)
        .map(|(&y, &p)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Appends the cross-entropy between a `[n]` prediction node and fixed labels.
pub fn bce_node(g: &mut Graph, preds: NodeId, labels: &[f64]) -> Result<NodeId> {
    if g.shape(preds) != [labels.len()] {
        return Err(Error::shape(format!(
            "{} labels for predictions of shape {:?}",
            labels.len(),
            g.shape(preds)
        )));
    }
    let y = g.constant(Tensor::vector(labels.to_vec()));
    let one_minus_y = g.constant(Tensor::vector(labels.iter().map(|v| 1.0 - v).collect()));
    let p = g.clamp(preds, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let log_p = g.ln(p);
    let neg = g.scale(p, -1.0);
    let q = g.add_scalar(neg, 1.0);
    let log_q = g.ln(q);
    let a = g.mul(y, log_p)?;
    let b = g.mul(one_minus_y, log_q)?;
    let s = g.add(a, b)?;
    let m = g.mean(s);
    Ok(g.scale(m, -1.0))
}

/// Teacher-thresholded split of aligned segment representations.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePartition {
    /// Row indices whose teacher score is at least `δ`.
    pub anomalous: Vec<usize>,
    pub normal: Vec<usize>,
    pub teacher: Tensor,
    pub student: Tensor,
}

impl FeaturePartition {
    fn rows(t: &Tensor, idx: &[usize]) -> Option<Tensor> {
        if idx.is_empty() {
            return None;
        }
        let data = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        Some(Tensor::from_parts(vec![idx.len(), t.cols()], data))
    }

    pub fn teacher_anomalous(&self) -> Option<Tensor> {
        Self::rows(&self.teacher, &self.anomalous)
    }

    pub fn teacher_normal(&self) -> Option<Tensor> {
        Self::rows(&self.teacher, &self.normal)
    }

    pub fn student_anomalous(&self) -> Option<Tensor> {
        Self::rows(&self.student, &self.anomalous)
    }

    pub fn student_normal(&self) -> Option<Tensor> {
        Self::rows(&self.student, &self.normal)
    }
}

/// Indices of segments at or above `delta`, and the rest.
pub fn threshold_mask(teacher_scores: &[f64], delta: f64) -> (Vec<usize>, Vec<usize>) {
    (0..teacher_scores.len()).partition(|&i| teacher_scores[i] >= delta)
}

pub fn partition_features(
    teacher_scores: &[f64],
    teacher_h: &Tensor,
    student_h: &Tensor,
    delta: f64,
) -> Result<FeaturePartition> {
    let n = teacher_scores.len();
    if teacher_h.rank() != 2 || student_h.rank() != 2 || teacher_h.rows() != n || student_h.rows() != n {
        return Err(Error::shape(format!(
            "{n} scores, teacher rows {:?}, student rows {:?}",
            teacher_h.shape(),
            student_h.shape()
        )));
    }
    let (anomalous, normal) = threshold_mask(teacher_scores, delta);
    Ok(FeaturePartition {
        anomalous,
        normal,
        teacher: teacher_h.clone(),
        student: student_h.clone(),
    })
}

/// Appends the symmetric InfoNCE over projected rows `zt`, `zs` (both `m × p`).
///
/// Returns the sum of the anomaly-anchor mean and the normal-anchor mean;
/// an empty class contributes nothing.
pub fn info_nce_node(
    g: &mut Graph,
    zt: NodeId,
    zs: NodeId,
    anomalous: &[usize],
    normal: &[usize],
    tau: f64,
) -> Result<NodeId> {
    if g.shape(zt) != g.shape(zs) || g.shape(zt).len() != 2 {
        return Err(Error::shape("teacher and student projections must align"));
    }
    let zt = g.normalize_rows(zt)?;
    let zs = g.normalize_rows(zs)?;
    let mut total: Option<NodeId> = None;
    for (anchors, negatives) in [(anomalous, normal), (normal, anomalous)] {
        if anchors.is_empty() {
            continue;
        }
        let t = g.gather_rows(zt, anchors.to_vec())?;
        let s = g.gather_rows(zs, anchors.to_vec())?;
        let prod = g.mul(t, s)?;
        let pos = g.sum_last(prod)?;
        let pos = g.reshape(pos, &[anchors.len(), 1])?;
        let logits = if negatives.is_empty() {
            pos
        } else {
            let neg = g.gather_rows(zs, negatives.to_vec())?;
            let neg_t = g.transpose(neg)?;
            let sims = g.matmul(t, neg_t)?;
            g.concat(&[pos, sims], 1)?
        };
        let scaled = g.scale(logits, 1.0 / tau);
        let log_prob = g.log_softmax(scaled)?;
        let first = g.slice_cols(log_prob, 0, 1)?;
        let mean = g.mean(first);
        let term = g.scale(mean, -1.0);
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    total.ok_or_else(|| Error::shape("InfoNCE needs at least one segment"))
}

/// InfoNCE on already-projected features.
pub fn info_nce_projected(zt: &Tensor, zs: &Tensor, anomalous: &[usize], normal: &[usize], tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(zt.clone());
    let b = g.constant(zs.clone());
    let out = info_nce_node(&mut g, a, b, anomalous, normal, tau)?;
    g.set_output(out);
    g.forward(&[])?;
    Ok(g.output_value()?.item())
}

/// Teacher-side and student-side single-hidden-layer projection heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHeads {
    pub params: ParamStore,
}

pub const TEACHER_HEAD: &str = "nce.teacher.";
pub const STUDENT_HEAD: &str = "nce.student.";

impl ProjectionHeads {
    pub fn init(teacher_width: usize, student_width: usize, cfg: &DistillConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (prefix, width) in [(TEACHER_HEAD, teacher_width), (STUDENT_HEAD, student_width)] {
            params.insert(format!("{prefix}w1"), glorot_uniform(&mut rng, width, cfg.proj_hidden));
            params.insert(format!("{prefix}w2"), glorot_uniform(&mut rng, cfg.proj_hidden, cfg.proj_out));
        }
        Self { params }
    }

    fn register(&self, g: &mut Graph) -> Result<[NodeId; 4]> {
        Ok([
            self.params.register(g, &format!("{TEACHER_HEAD}w1"), false)?,
            self.params.register(g, &format!("{TEACHER_HEAD}w2"), false)?,
            self.params.register(g, &format!("{STUDENT_HEAD}w1"), false)?,
            self.params.register(g, &format!("{STUDENT_HEAD}w2"), false)?,
        ])
    }

    fn project(g: &mut Graph, h: NodeId, w1: NodeId, w2: NodeId) -> Result<NodeId> {
        let a = g.matmul(h, w1)?;
        let a = g.relu(a);
        Ok(g.matmul(a, w2)?)
    }

    /// Projects both representations (`teacher`: side 0, `student`: side 1).
    pub fn apply(&self, teacher_h: &Tensor, student_h: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let [tw1, tw2, sw1, sw2] = self.register(&mut g)?;
        let t = g.constant(teacher_h.clone());
        let s = g.constant(student_h.clone());
        let zt = Self::project(&mut g, t, tw1, tw2)?;
        let zs = Self::project(&mut g, s, sw1, sw2)?;
        g.forward(&[])?;
        Ok((g.value(zt)?.clone(), g.value(zs)?.clone()))
    }
}

/// InfoNCE of a partition after projecting both sides through `heads`.
pub fn info_nce_loss(partition: &FeaturePartition, heads: &ProjectionHeads, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::config("tau must be positive"));
    }
    let (zt, zs) = heads.apply(&partition.teacher, &partition.student)?;
    info_nce_projected(&zt, &zs, &partition.anomalous, &partition.normal, tau)
}

/// Handles of the assembled distillation objective.
#[derive(Clone, Copy, Debug)]
pub struct DistillNodes {
    pub bce: Option<NodeId>,
    pub nce: Option<NodeId>,
    pub total: NodeId,
}

/// Per-video inputs of the batch objective.
pub struct BatchTerms<'a> {
    /// Student `[n]` score nodes, one per video.
    pub student_scores: &'a [NodeId],
    /// Student `n × d` representation nodes.
    pub student_h: &'a [NodeId],
    /// Frozen teacher outputs aligned with the videos.
    pub teacher: &'a [&'a ModelOutput],
    /// Pseudo-labels aligned with the videos.
    pub labels: &'a [&'a [f64]],
}

/// Appends `L_bce + α·τ²·L_nce` over a batch of videos to `g`.
pub fn build_distill_objective(
    g: &mut Graph,
    heads: &ProjectionHeads,
    terms: &BatchTerms<'_>,
    cfg: &DistillConfig,
) -> Result<DistillNodes> {
    let count = terms.student_scores.len();
    if terms.student_h.len() != count || terms.teacher.len() != count || terms.labels.len() != count || count == 0 {
        return Err(Error::shape("distillation batch inputs are misaligned"));
    }
    let scores = if count == 1 {
        terms.student_scores[0]
    } else {
        g.concat(terms.student_scores, 0)?
    };
    let labels: Vec<f64> = terms.labels.iter().flat_map(|l| l.iter().copied()).collect();
    let bce = if cfg.use_bce { Some(bce_node(g, scores, &labels)?) } else { None };

    let nce = if cfg.uses_nce() {
        let student_h = if count == 1 {
            terms.student_h[0]
        } else {
            g.concat(terms.student_h, 0)?
        };
        let teacher_rows: Vec<f64> = terms
            .teacher
            .iter()
            .flat_map(|o| o.representation.data().iter().copied())
            .collect();
        let t_width = terms.teacher[0].representation.cols();
        let rows = teacher_rows.len() / t_width;
        if rows != g.shape(student_h)[0] {
            return Err(Error::shape("teacher and student segment counts differ"));
        }
        let teacher_h = g.constant(Tensor::new(vec![rows, t_width], teacher_rows)?);
        let teacher_scores: Vec<f64> = terms.teacher.iter().flat_map(|o| o.scores.iter().copied()).collect();
        let (anomalous, normal) = threshold_mask(&teacher_scores, cfg.delta);
        let [tw1, tw2, sw1, sw2] = heads.register(g)?;
        let zt = ProjectionHeads::project(g, teacher_h, tw1, tw2)?;
        let zs = ProjectionHeads::project(g, student_h, sw1, sw2)?;
        Some(info_nce_node(g, zt, zs, &anomalous, &normal, cfg.tau)?)
    } else {
        None
    };

    let total = match (bce, nce) {
        (Some(b), Some(n)) => {
            let weighted = g.scale(n, cfg.alpha * cfg.tau * cfg.tau);
            g.add(b, weighted)?
        }
        (Some(b), None) => b,
        (None, Some(n)) => g.scale(n, cfg.alpha * cfg.tau * cfg.tau),
        (None, None) => return Err(Error::config("both distillation terms are disabled")),
    };
    Ok(DistillNodes { bce, nce, total })
}

/// Loss components of one epoch (means over batches).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillEpoch {
    pub bce: f64,
    pub nce: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct DistilledStudent {
    pub model: Model,
    pub heads: ProjectionHeads,
    pub history: Vec<DistillEpoch>,
}

/// Teacher outputs for every training video, computed once (the teacher is frozen).
pub fn teacher_outputs(teacher: &Model, videos: &[&Video]) -> Result<Vec<ModelOutput>> {
    videos
        .par_iter()
        .map(|v| {
            let streams: Vec<&Tensor> = v.streams.iter().collect();
            teacher.forward(&streams)
        })
        .collect()
}

struct StudentPass {
    graph: Graph,
    scores: NodeId,
    h: NodeId,
}

fn student_pass(student: &Model, video: &Video, stream: usize) -> Result<StudentPass> {
    let mut g = Graph::new();
    let nodes = student.register(&mut g)?;
    let z = &video.streams[stream];
    let input = g.input("z", z.shape())?;
    let out = student.apply(&mut g, &nodes, &[input])?;
    g.forward(&[("z", z)])?;
    Ok(StudentPass {
        graph: g,
        scores: out.scores,
        h: out.representation,
    })
}

/// Trains `student` on the designated stream against the frozen teacher.
pub fn train_student(
    dataset: &Dataset,
    teacher: &Model,
    student: Model,
    labels: &PseudoLabelStore,
    cfg: &DistillConfig,
    optim: &OptimConfig,
    seed: u64,
) -> Result<DistilledStudent> {
    cfg.validate()?;
    optim.validate()?;
    let stream = dataset.student_stream;
    if stream >= dataset.stream_count() {
        return Err(Error::config(format!("designated student stream {stream} is absent")));
    }
    if student.config.streams() != 1 || student.config.input_widths[0] != dataset.stream_width(stream) {
        return Err(Error::shape("student width does not match the designated stream"));
    }
    let videos: Vec<&Video> = dataset.train().collect();
    let (anomalous, normal) = class_indices(&videos)?;
    let video_labels: Vec<&[f64]> = videos
        .iter()
        .map(|v| {
            labels
                .get(&v.id)
                .filter(|l| l.len() == v.segments())
                .ok_or_else(|| Error::config(format!("missing pseudo-labels for video `{}`", v.id)))
        })
        .collect::<Result<_>>()?;
    let teacher_out = teacher_outputs(teacher, &videos)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut student = student;
    let mut heads = ProjectionHeads::init(
        teacher_out[0].representation.cols(),
        student.config.dims.width,
        cfg,
        seed ^ 0x9e37_79b9_7f4a_7c15,
    );
    let mut student_state = OptimizerState::new(optim.eps);
    let mut head_state = OptimizerState::new(optim.eps);
    let mut history = Vec::with_capacity(optim.epochs);
    let chunk = rayon::current_num_threads().max(1);

    for epoch in 0..optim.epochs {
        let batches = epoch_batches(&mut rng, &anomalous, &normal, optim);
        let mut sums = DistillEpoch { bce: 0.0, nce: 0.0, total: 0.0 };
        for (ab, nb) in &batches {
            let members: Vec<usize> = ab.iter().chain(nb).copied().collect();
            let mut passes = Vec::with_capacity(members.len());
            for group in members.chunks(chunk) {
                let done: Vec<Result<StudentPass>> = group
                    .par_iter()
                    .map(|&v| student_pass(&student, videos[v], stream))
                    .collect();
                for p in done {
                    passes.push(p?);
                }
            }

            let mut g = Graph::new();
            let mut score_ids = Vec::with_capacity(members.len());
            let mut h_ids = Vec::with_capacity(members.len());
            let mut feeds: Vec<(String, &Tensor)> = Vec::with_capacity(2 * members.len());
            for (slot, pass) in passes.iter().enumerate() {
                let s = pass.graph.value(pass.scores)?;
                let h = pass.graph.value(pass.h)?;
                let (sn, hn) = (format!("v{slot}.scores"), format!("v{slot}.h"));
                score_ids.push(g.input_tracked(&sn, s.shape())?);
                h_ids.push(g.input_tracked(&hn, h.shape())?);
                feeds.push((sn, s));
                feeds.push((hn, h));
            }
            let teacher_refs: Vec<&ModelOutput> = members.iter().map(|&v| &teacher_out[v]).collect();
            let label_refs: Vec<&[f64]> = members.iter().map(|&v| video_labels[v]).collect();
            let terms = BatchTerms {
                student_scores: &score_ids,
                student_h: &h_ids,
                teacher: &teacher_refs,
                labels: &label_refs,
            };
            let obj = build_distill_objective(&mut g, &heads, &terms, cfg)?;
            g.set_output(obj.total);
            let refs: Vec<(&str, &Tensor)> = feeds.iter().map(|(n, t)| (n.as_str(), *t)).collect();
            g.forward(&refs)?;
            let total = g.output_value()?.item();
            if !total.is_finite() {
                return Err(Error::Numeric(format!("non-finite distillation loss in epoch {epoch}")));
            }
            sums.total += total;
            if let Some(b) = obj.bce {
                sums.bce += g.value(b)?.item();
            }
            if let Some(n) = obj.nce {
                sums.nce += g.value(n)?.item();
            }
            let loss_grads = g.backward(&Tensor::scalar(1.0))?;

            let mut student_grads = BTreeMap::new();
            for (slot, pass) in passes.iter().enumerate() {
                let mut seeds = Vec::with_capacity(2);
                if let Some(ds) = loss_grads.inputs.get(&format!("v{slot}.scores")) {
                    seeds.push((pass.scores, ds));
                }
                if let Some(dh) = loss_grads.inputs.get(&format!("v{slot}.h")) {
                    seeds.push((pass.h, dh));
                }
                let grads = pass.graph.backward_from(&seeds)?;
                add_grads(&mut student_grads, &grads.params, 1.0);
            }
            apply_adagrad(&mut student.params, &student_grads, &mut student_state, optim)?;
            apply_adagrad(&mut heads.params, &loss_grads.params, &mut head_state, optim)?;
        }
        let k = batches.len() as f64;
        history.push(DistillEpoch {
            bce: sums.bce / k,
            nce: sums.nce / k,
            total: sums.total / k,
        });
    }
    Ok(DistilledStudent {
        model: student,
        heads,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn identical_positive_without_negatives_is_zero() {
        let z = Tensor::from_rows(&[vec![0.6, 0.8]]).unwrap();
        let loss = info_nce_projected(&z, &z, &[0], &[], 10.0).unwrap();
        assert!(loss.abs() < 1e-15);
    }

    #[test]
    fn one_orthogonal_negative_at_tau_ten() {
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let loss = info_nce_projected(&z, &z, &[0], &[1], 10.0).unwrap();
        let want = 2.0 * (1.0 + (-0.1f64).exp()).ln();
        assert!((loss - want).abs() < 1e-12, "{loss} vs {want}");
    }

    #[test]
    fn loss_falls_as_positive_similarity_rises() {
        let student = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let mut prev = f64::INFINITY;
        for angle in [1.4f64, 1.0, 0.6, 0.2, 0.0] {
            let teacher = Tensor::from_rows(&[unit(&[angle.cos(), angle.sin(), 0.0]), vec![0.0, 0.0, 1.0]]).unwrap();
            let loss = info_nce_projected(&teacher, &student, &[0], &[1], 0.5).unwrap();
            assert!(loss < prev);
            assert!(loss >= 0.0);
            prev = loss;
        }
    }

    #[test]
    fn zero_norm_projection_is_rejected() {
        let z = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(info_nce_projected(&z, &z, &[0], &[1], 1.0).is_err());
    }

    #[test]
    fn bce_examples() {
        assert!((bce_loss(&[0.5], &[0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((bce_loss(&[1.0], &[0.25]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(bce_loss(&[0.0, 1.0, 1.0], &[0.0, 1.0, 1.0]).unwrap() < 1e-6);
        assert!(bce_loss(&[0.0], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn combined_loss_arithmetic() {
        assert!((distill_loss(0.5, 0.01, 7.5, 10.0) - 8.0).abs() < 1e-12);
        assert_eq!(distill_loss(0.5, 0.3, 0.0, 10.0), 0.5);
        assert_eq!(distill_loss(0.5, 0.0, 7.5, 10.0), 0.5);
    }

    #[test]
    fn partition_follows_teacher_threshold() {
        let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let p = partition_features(&[0.95, 0.1], &t, &t, 0.9).unwrap();
        assert_eq!(p.anomalous, vec![0]);
        assert_eq!(p.normal, vec![1]);
        let p = partition_features(&[0.5, 0.1], &t, &t, 0.9).unwrap();
        assert!(p.anomalous.is_empty() && p.teacher_anomalous().is_none());
        let p = partition_features(&[0.5, 0.1], &t, &t, 1e-12).unwrap();
        assert_eq!(p.anomalous, vec![0, 1]);
        assert!(partition_features(&[0.5], &t, &t, 0.9).is_err());
    }

    #[test]
    fn bce_graph_matches_direct_and_passes_grad_check() {
        let preds = Tensor::vector(vec![0.2, 0.7, 0.9, 0.4]);
        let labels = [0.0, 1.0, 0.6, 0.25];
        let mut g = Graph::new();
        let p = g.param("p", std::sync::Arc::new(preds.clone())).unwrap();
        let l = bce_node(&mut g, p, &labels).unwrap();
        g.set_output(l);
        g.forward(&[]).unwrap();
        assert!((g.output_value().unwrap().item() - bce_loss(&labels, preds.data()).unwrap()).abs() < 1e-14);
        assert!(grad_check(&g, &[], 1e-4).unwrap().passed());
    }

    /// Independent loop evaluation of the symmetric InfoNCE.
    fn nce_oracle(zt: &Tensor, zs: &Tensor, a: &[usize], n: &[usize], tau: f64) -> f64 {
        let cos = |x: &[f64], y: &[f64]| {
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            dot / (nx * ny)
        };
        let mut total = 0.0;
        for (anchors, negs) in [(a, n), (n, a)] {
            if anchors.is_empty() {
                continue;
            }
            let mut acc = 0.0;
            for &i in anchors {
                let pos = (cos(zt.row(i), zs.row(i)) / tau).exp();
                let neg: f64 = negs.iter().map(|&k| (cos(zt.row(i), zs.row(k)) / tau).exp()).sum();
                acc += -(pos / (neg + pos)).ln();
            }
            total += acc / anchors.len() as f64;
        }
        total
    }

    #[test]
    fn info_nce_matches_loop_oracle_and_gradients() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let zt = glorot_uniform(&mut rng, 6, 4);
        let zs = glorot_uniform(&mut rng, 6, 4);
        let a = [0, 3, 4];
        let n = [1, 2, 5];
        let got = info_nce_projected(&zt, &zs, &a, &n, 0.7).unwrap();
        assert!((got - nce_oracle(&zt, &zs, &a, &n, 0.7)).abs() < 1e-12);

        let mut g = Graph::new();
        let t = g.param("t", std::sync::Arc::new(zt)).unwrap();
        let s = g.param("s", std::sync::Arc::new(zs)).unwrap();
        let out = info_nce_node(&mut g, t, s, &a, &n, 0.7).unwrap();
        g.set_output(out);
        assert!(grad_check(&g, &[], 1e-4).unwrap().passed());
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        let bad = DistillConfig { delta: 1.0, ..DistillConfig::default() };
        assert!(bad.validate().is_err());
        let bad = DistillConfig { tau: 0.0, ..DistillConfig::default() };
        assert!(bad.validate().is_err());
        let bad = DistillConfig { alpha: 0.0, use_bce: false, ..DistillConfig::default() };
        assert!(bad.validate().is_err());
    }
}
