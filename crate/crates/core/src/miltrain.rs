//! First-stage teacher training with the multiple-instance ranking objective.
//!
//! Each video is a bag of segments and only the bag label is known. Within a
//! batch, anomalous and normal videos are paired index-wise and the hinge
//! `max(0, 1 − bag(anom) + bag(norm))` pushes the top anomalous segment above
//! the top normal one, regularized by temporal smoothness and sparsity of the
//! anomalous scores.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Video};
use crate::diffcore::{Gradients, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::params::ParamStore;

/// Optimizer and batching settings shared by both training stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub epochs: usize,
    pub normal_per_batch: usize,
    pub anomalous_per_batch: usize,
    /// Learning rate of the aggregation block.
    pub lr_temporal: f64,
    /// Learning rate of everything else.
    pub lr_other: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            normal_per_batch: 30,
            anomalous_per_batch: 30,
            lr_temporal: 1e-4,
            lr_other: 1e-3,
            weight_decay: 1e-3,
            eps: 1e-10,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.normal_per_batch == 0 || self.anomalous_per_batch == 0 {
            return Err(Error::config("batch counts must be positive"));
        }
        if !(self.lr_temporal > 0.0 && self.lr_other > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.eps >= 0.0) {
            return Err(Error::config("weight decay and epsilon must be non-negative"));
        }
        Ok(())
    }

    pub fn lr_for(&self, name: &str) -> f64 {
        if Model::is_temporal_param(name) {
            self.lr_temporal
        } else {
            self.lr_other
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MilConfig {
    pub lambda_smooth: f64,
    pub lambda_sparse: f64,
    /// Bag score is the mean of the `bag_k` highest segment scores.
    pub bag_k: usize,
    pub optim: OptimConfig,
}

impl Default for MilConfig {
    fn default() -> Self {
        Self {
            lambda_smooth: 8e-5,
            lambda_sparse: 8e-5,
            bag_k: 1,
            optim: OptimConfig::default(),
        }
    }
}

impl MilConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_smooth >= 0.0 && self.lambda_sparse >= 0.0) {
            return Err(Error::config("MIL regularization weights must be non-negative"));
        }
        if self.bag_k == 0 {
            return Err(Error::config("bag_k must be at least 1"));
        }
        self.optim.validate()
    }
}

fn bag_score(scores: &[f64], k: usize) -> f64 {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[..k.min(sorted.len())].iter().sum::<f64>() / k.min(sorted.len()) as f64
}

/// Ranking hinge plus smoothness and sparsity penalties on the anomalous bag.
pub fn mil_ranking_loss(anom: &[f64], norm: &[f64], cfg: &MilConfig) -> Result<f64> {
    if anom.len() != norm.len() || anom.is_empty() {
        return Err(Error::shape(format!(
            "score sequences of length {} and {}",
            anom.len(),
            norm.len()
        )));
    }
    let k = cfg.bag_k.min(anom.len());
    let hinge = (1.0 - bag_score(anom, k) + bag_score(norm, k)).max(0.0);
    let smooth: f64 = anom.windows(2).map(|w| (w[0] - w[1]).powi(2)).sum();
    let sparse: f64 = anom.iter().sum();
    Ok(hinge + cfg.lambda_smooth * smooth + cfg.lambda_sparse * sparse)
}

/// Appends the ranking loss of one (anomalous, normal) pair of `[n]` score nodes.
pub fn mil_loss_node(g: &mut Graph, anom: NodeId, norm: NodeId, cfg: &MilConfig) -> Result<NodeId> {
    let n = g.shape(anom).first().copied().unwrap_or(1);
    if g.shape(anom) != g.shape(norm) || g.shape(anom).len() != 1 {
        return Err(Error::shape("MIL loss needs two equally long score vectors"));
    }
    let k = cfg.bag_k.min(n);
    let top_a = g.topk_mean(anom, k)?;
    let top_n = g.topk_mean(norm, k)?;
    let gap = g.sub(top_n, top_a)?;
    let margin = g.add_scalar(gap, 1.0);
    let mut loss = g.relu(margin);
    if n > 1 && cfg.lambda_smooth != 0.0 {
        let head = g.gather_rows(anom, (0..n - 1).collect())?;
        let tail = g.gather_rows(anom, (1..n).collect())?;
        let diff = g.sub(head, tail)?;
        let sq = g.mul(diff, diff)?;
        let smooth = g.sum(sq);
        let smooth = g.scale(smooth, cfg.lambda_smooth);
        loss = g.add(loss, smooth)?;
    }
    if cfg.lambda_sparse != 0.0 {
        let sparse = g.sum(anom);
        let sparse = g.scale(sparse, cfg.lambda_sparse);
        loss = g.add(loss, sparse)?;
    }
    Ok(loss)
}

/// Adagrad squared-gradient accumulators, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub accum: BTreeMap<String, Tensor>,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(eps: f64) -> Self {
        Self {
            accum: BTreeMap::new(),
            eps,
        }
    }
}

/// One Adagrad update with L2 weight decay folded into the gradient:
/// `g' = g + wd·θ`, `G += g'²`, `θ −= lr·g'/(√G + ε)`.
pub fn adagrad_step(
    param: &mut Tensor,
    grad: &Tensor,
    accum: &mut Tensor,
    lr: f64,
    weight_decay: f64,
    eps: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != accum.shape() {
        return Err(Error::shape(format!(
            "adagrad shapes param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            accum.shape()
        )));
    }
    for ((theta, &g), acc) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(accum.data_mut())
    {
        let g = g + weight_decay * *theta;
        *acc += g * g;
        *theta -= lr * g / (acc.sqrt() + eps);
    }
    Ok(())
}

/// Applies [`adagrad_step`] to every parameter that received a gradient.
pub fn apply_adagrad(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    optim: &OptimConfig,
) -> Result<()> {
    for (name, grad) in grads {
        let param = params
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("gradient for unknown parameter `{name}`")))?;
        let accum = state
            .accum
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        adagrad_step(param, grad, accum, optim.lr_for(name), optim.weight_decay, state.eps)?;
    }
    Ok(())
}

/// Adds `part` (scaled) into `total`, in call order.
pub(crate) fn add_grads(total: &mut BTreeMap<String, Tensor>, part: &BTreeMap<String, Tensor>, scale: f64) {
    for (name, g) in part {
        match total.get_mut(name) {
            Some(acc) => acc.add_scaled(g, scale),
            None => {
                total.insert(name.clone(), g.map(|v| v * scale));
            }
        }
    }
}

/// A trained model with its per-epoch mean loss.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: Model,
    pub history: Vec<f64>,
}

/// Feeds one video's streams into `g` as untracked inputs.
pub(crate) fn feed_video(g: &mut Graph, tag: &str, video: &Video) -> Result<(Vec<NodeId>, Vec<String>)> {
    let mut ids = Vec::new();
    let mut names = Vec::new();
    for (t, s) in video.streams.iter().enumerate() {
        let name = format!("{tag}.s{t}");
        ids.push(g.input(&name, s.shape())?);
        names.push(name);
    }
    Ok((ids, names))
}

/// Builds the full loss graph of one (anomalous, normal) pair.
pub fn pair_loss_graph(model: &Model, anom: &Video, norm: &Video, cfg: &MilConfig) -> Result<(Graph, Vec<(String, Tensor)>)> {
    let mut g = Graph::new();
    let nodes = model.register(&mut g)?;
    let (a_in, a_names) = feed_video(&mut g, "anom", anom)?;
    let (n_in, n_names) = feed_video(&mut g, "norm", norm)?;
    let a = model.apply(&mut g, &nodes, &a_in)?;
    let n = model.apply(&mut g, &nodes, &n_in)?;
    let loss = mil_loss_node(&mut g, a.scores, n.scores, cfg)?;
    g.set_output(loss);
    let feeds = a_names
        .into_iter()
        .zip(anom.streams.iter().cloned())
        .chain(n_names.into_iter().zip(norm.streams.iter().cloned()))
        .collect();
    Ok((g, feeds))
}

fn pair_gradients(model: &Model, anom: &Video, norm: &Video, cfg: &MilConfig) -> Result<(f64, Gradients)> {
    let (mut g, feeds) = pair_loss_graph(model, anom, norm, cfg)?;
    let refs: Vec<(&str, &Tensor)> = feeds.iter().map(|(n, t)| (n.as_str(), t)).collect();
    g.forward(&refs)?;
    let loss = g.output_value()?.item();
    let grads = g.backward(&Tensor::scalar(1.0))?;
    Ok((loss, grads))
}

/// Splits shuffled class indices into aligned (anomalous, normal) batches.
pub(crate) fn epoch_batches(
    rng: &mut ChaCha8Rng,
    anomalous: &[usize],
    normal: &[usize],
    optim: &OptimConfig,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut a = anomalous.to_vec();
    let mut n = normal.to_vec();
    a.shuffle(rng);
    n.shuffle(rng);
    let steps = a
        .len()
        .div_ceil(optim.anomalous_per_batch)
        .min(n.len().div_ceil(optim.normal_per_batch));
    (0..steps)
        .map(|s| {
            let ab = &a[s * optim.anomalous_per_batch..((s + 1) * optim.anomalous_per_batch).min(a.len())];
            let nb = &n[s * optim.normal_per_batch..((s + 1) * optim.normal_per_batch).min(n.len())];
            (ab.to_vec(), nb.to_vec())
        })
        .collect()
}

pub(crate) fn class_indices(videos: &[&Video]) -> Result<(Vec<usize>, Vec<usize>)> {
    let anomalous: Vec<usize> = (0..videos.len()).filter(|&i| videos[i].label == 1).collect();
    let normal: Vec<usize> = (0..videos.len()).filter(|&i| videos[i].label == 0).collect();
    if anomalous.is_empty() || normal.is_empty() {
        return Err(Error::config("training split must contain both normal and anomalous videos"));
    }
    Ok((anomalous, normal))
}

/// Trains `model` on the training split with the MIL objective.
///
/// Deterministic in `seed`; per-pair work runs on the rayon pool in chunks of
/// the pool size and gradients are summed in pair order.
pub fn train_teacher(dataset: &Dataset, model: Model, cfg: &MilConfig, seed: u64) -> Result<TrainedModel> {
    cfg.validate()?;
    let videos: Vec<&Video> = dataset.train().collect();
    let (anomalous, normal) = class_indices(&videos)?;
    if model.config.streams() != dataset.stream_count() {
        return Err(Error::shape(format!(
            "model takes {} stream(s), dataset provides {}",
            model.config.streams(),
            dataset.stream_count()
        )));
    }
    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = OptimizerState::new(cfg.optim.eps);
    let mut history = Vec::with_capacity(cfg.optim.epochs);
    let chunk = rayon::current_num_threads().max(1);
    for epoch in 0..cfg.optim.epochs {
        let mut epoch_loss = 0.0;
        let batches = epoch_batches(&mut rng, &anomalous, &normal, &cfg.optim);
        for (ab, nb) in &batches {
            let pairs: Vec<(usize, usize)> = ab.iter().copied().zip(nb.iter().copied()).collect();
            let scale = 1.0 / pairs.len() as f64;
            let mut total = BTreeMap::new();
            let mut batch_loss = 0.0;
            for group in pairs.chunks(chunk) {
                let results: Vec<Result<(f64, Gradients)>> = group
                    .par_iter()
                    .map(|&(a, n)| pair_gradients(&model, videos[a], videos[n], cfg))
                    .collect();
                for r in results {
                    let (loss, grads) = r?;
                    batch_loss += loss * scale;
                    add_grads(&mut total, &grads.params, scale);
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite MIL loss in epoch {epoch}")));
            }
            apply_adagrad(&mut model.params, &total, &mut state, &cfg.optim)?;
            epoch_loss += batch_loss;
        }
        history.push(epoch_loss / batches.len() as f64);
    }
    Ok(TrainedModel { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;

    fn lambdas(smooth: f64, sparse: f64) -> MilConfig {
        MilConfig {
            lambda_smooth: smooth,
            lambda_sparse: sparse,
            ..MilConfig::default()
        }
    }

    #[test]
    fn hinge_only_when_everything_is_zero() {
        let z = vec![0.0; 32];
        assert_eq!(mil_ranking_loss(&z, &z, &MilConfig::default()).unwrap(), 1.0);
    }

    #[test]
    fn one_hot_interior_peak() {
        let mut a = vec![0.0; 32];
        a[10] = 1.0;
        let n = vec![0.0; 32];
        let loss = mil_ranking_loss(&a, &n, &lambdas(8e-5, 8e-5)).unwrap();
        assert!((loss - 2.4e-4).abs() < 1e-15);
    }

    #[test]
    fn satisfied_hinge_without_penalties() {
        let mut a = vec![0.2; 8];
        a[3] = 1.0;
        let n = vec![0.0; 8];
        assert_eq!(mil_ranking_loss(&a, &n, &lambdas(0.0, 0.0)).unwrap(), 0.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(mil_ranking_loss(&[0.1, 0.2], &[0.3], &MilConfig::default()).is_err());
    }

    #[test]
    fn graph_loss_matches_direct_formula_and_gradients() {
        let a = Tensor::vector(vec![0.2, 0.7, 0.4, 0.9, 0.1]);
        let n = Tensor::vector(vec![0.3, 0.5, 0.35, 0.2, 0.6]);
        let cfg = lambdas(0.3, 0.2);
        let mut g = Graph::new();
        let an = g.param("a", std::sync::Arc::new(a.clone())).unwrap();
        let nn = g.param("n", std::sync::Arc::new(n.clone())).unwrap();
        let loss = mil_loss_node(&mut g, an, nn, &cfg).unwrap();
        g.set_output(loss);
        g.forward(&[]).unwrap();
        let want = mil_ranking_loss(a.data(), n.data(), &cfg).unwrap();
        assert!((g.output_value().unwrap().item() - want).abs() < 1e-14);
        assert!(grad_check(&g, &[], 1e-4).unwrap().passed());
    }

    #[test]
    fn adagrad_first_and_second_steps() {
        let mut theta = Tensor::scalar(1.0);
        let grad = Tensor::scalar(1.0);
        let mut acc = Tensor::scalar(0.0);
        adagrad_step(&mut theta, &grad, &mut acc, 0.1, 0.0, 0.0).unwrap();
        assert!((theta.item() - 0.9).abs() < 1e-15);
        assert_eq!(acc.item(), 1.0);
        adagrad_step(&mut theta, &grad, &mut acc, 0.1, 0.0, 0.0).unwrap();
        assert!((theta.item() - (0.9 - 0.1 / 2f64.sqrt())).abs() < 1e-15);
        assert!((theta.item() - 0.82929).abs() < 1e-5);
        assert_eq!(acc.item(), 2.0);
    }

    #[test]
    fn adagrad_fixed_points() {
        let mut theta = Tensor::vector(vec![0.5, -2.0]);
        let mut acc = Tensor::vector(vec![0.0, 0.0]);
        adagrad_step(&mut theta, &Tensor::vector(vec![0.0, 0.0]), &mut acc, 0.1, 0.0, 1e-10).unwrap();
        assert_eq!(theta.data(), &[0.5, -2.0]);
        let before = theta.clone();
        adagrad_step(&mut theta, &Tensor::vector(vec![3.0, -1.0]), &mut acc, 0.0, 1e-3, 1e-10).unwrap();
        assert_eq!(theta, before);
        assert!(adagrad_step(&mut theta, &Tensor::scalar(1.0), &mut acc, 0.1, 0.0, 0.0).is_err());
    }

    #[test]
    fn batches_pair_class_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: Vec<usize> = (0..80).collect();
        let n: Vec<usize> = (100..180).collect();
        let batches = epoch_batches(&mut rng, &a, &n, &OptimConfig::default());
        let sizes: Vec<(usize, usize)> = batches.iter().map(|(x, y)| (x.len(), y.len())).collect();
        assert_eq!(sizes, vec![(30, 30), (30, 30), (20, 20)]);
        let mut seen: Vec<usize> = batches.iter().flat_map(|(x, _)| x.clone()).collect();
        seen.sort();
        assert_eq!(seen, a);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn seq(n: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(0.0f64..1.0, n)
        }

        proptest! {
            #[test]
            fn loss_is_nonnegative_and_hinge_zero_iff_margin(a in seq(12), n in seq(12)) {
                let cfg = lambdas(0.0, 0.0);
                let loss = mil_ranking_loss(&a, &n, &cfg).unwrap();
                prop_assert!(loss >= 0.0);
                let gap = a.iter().copied().fold(0.0, f64::max) - n.iter().copied().fold(0.0, f64::max);
                prop_assert_eq!(loss == 0.0, gap >= 1.0);
                let full = mil_ranking_loss(&a, &n, &MilConfig::default()).unwrap();
                prop_assert!(full >= 0.0);
            }

            #[test]
            fn permutation_invariances(a in seq(10), n in seq(10), rot in 0usize..10) {
                let cfg = MilConfig::default();
                let base = mil_ranking_loss(&a, &n, &cfg).unwrap();
                let mut n2 = n.clone();
                n2.rotate_left(rot);
                n2.reverse();
                prop_assert!((mil_ranking_loss(&a, &n2, &cfg).unwrap() - base).abs() < 1e-12);

                // hinge + sparsity ignore anomalous order; smoothness does not
                let no_smooth = lambdas(0.0, cfg.lambda_sparse);
                let mut a2 = a.clone();
                a2.rotate_left(rot);
                a2.reverse();
                let lhs = mil_ranking_loss(&a, &n, &no_smooth).unwrap();
                let rhs = mil_ranking_loss(&a2, &n, &no_smooth).unwrap();
                prop_assert!((lhs - rhs).abs() < 1e-12);
            }

            #[test]
            fn adagrad_accumulators_never_decrease(gs in prop::collection::vec(-5.0f64..5.0, 1..20)) {
                let mut theta = Tensor::scalar(0.3);
                let mut acc = Tensor::scalar(0.0);
                let mut prev = 0.0;
                for g in gs {
                    adagrad_step(&mut theta, &Tensor::scalar(g), &mut acc, 0.05, 1e-3, 1e-10).unwrap();
                    prop_assert!(acc.item() >= prev);
                    prev = acc.item();
                }
            }
        }
    }

    #[test]
    fn smoothness_term_is_order_sensitive() {
        let cfg = lambdas(1.0, 0.0);
        let a = [0.0, 1.0, 0.0, 1.0];
        let b = [0.0, 0.0, 1.0, 1.0];
        let n = [0.0; 4];
        let la = mil_ranking_loss(&a, &n, &cfg).unwrap();
        let lb = mil_ranking_loss(&b, &n, &cfg).unwrap();
        assert!((la - lb).abs() > 0.5);
    }
}
