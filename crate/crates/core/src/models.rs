//! Teacher (multi-stream) and student (single-stream) scoring networks.
//!
//! Both share one layout: a two-layer projection perceptron per stream, an
//! aggregation block, and a sigmoid scoring head applied per segment. The
//! aggregation block is the disentangled attention of [`crate::relattn`]
//! followed by residual connections and a position-wise feedforward layer,
//! or plain averaging of the projected streams when attention is disabled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::params::{glorot_uniform, ParamStore};
use crate::relattn::{build_tam, AttentionNodes, AttentionParams, ComponentMask, TamLayout};

/// Parameter-name prefix of the aggregation block (trained at the temporal rate).
pub const TEMPORAL_PREFIX: &str = "tam.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregator {
    Attention,
    /// Fallback without attention: the projected streams are averaged.
    MeanPool,
}

/// Layer widths shared by teacher and student.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Common width every stream is projected to; attention width.
    pub width: usize,
    pub proj_hidden: usize,
    pub heads: usize,
    pub bucket_cap: usize,
    /// Feedforward hidden width after attention; 0 disables the feedforward layer.
    pub ffn_hidden: usize,
    pub head_hidden: Vec<usize>,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            width: 512,
            proj_hidden: 512,
            heads: 8,
            bucket_cap: 25,
            ffn_hidden: 1024,
            head_hidden: vec![512, 32],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature width of each input stream.
    pub input_widths: Vec<usize>,
    pub dims: ModelDims,
    pub mask: ComponentMask,
    pub aggregator: Aggregator,
    /// Keep the relative-position table at its initial value.
    pub freeze_rel_table: bool,
}

impl ModelConfig {
    pub fn teacher(input_widths: Vec<usize>, dims: ModelDims) -> Self {
        Self {
            input_widths,
            dims,
            mask: ComponentMask::ALL,
            aggregator: Aggregator::Attention,
            freeze_rel_table: false,
        }
    }

    pub fn student(input_width: usize, dims: ModelDims) -> Self {
        Self {
            input_widths: vec![input_width],
            dims,
            mask: ComponentMask::SINGLE_STREAM,
            aggregator: Aggregator::Attention,
            freeze_rel_table: false,
        }
    }

    pub fn streams(&self) -> usize {
        self.input_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        if self.input_widths.is_empty() || self.input_widths.contains(&0) {
            return Err(Error::config("every stream needs a positive input width"));
        }
        if d.width == 0 || d.proj_hidden == 0 || d.head_hidden.contains(&0) {
            return Err(Error::config("layer widths must be positive"));
        }
        if self.aggregator == Aggregator::Attention {
            if d.heads == 0 || d.width % d.heads != 0 {
                return Err(Error::config(format!(
                    "head count {} must divide width {}",
                    d.heads, d.width
                )));
            }
            if d.bucket_cap < 1 {
                return Err(Error::config("bucket cap k must be at least 1"));
            }
            if self.mask.term_count(self.streams()) == 0 {
                return Err(Error::config(format!(
                    "attention mask `{}` enables no terms",
                    self.mask
                )));
            }
        }
        Ok(())
    }

    fn uses_ffn(&self) -> bool {
        self.aggregator == Aggregator::Attention && self.dims.ffn_hidden > 0
    }

    /// Every parameter name the configuration requires, in initialization order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for t in 0..self.streams() {
            for p in ["w1", "b1", "w2", "b2"] {
                names.push(format!("proj.{t}.{p}"));
            }
        }
        if self.aggregator == Aggregator::Attention {
            names.extend(AttentionParams::param_names(TEMPORAL_PREFIX, self.streams()));
            if self.uses_ffn() {
                for p in ["w1", "b1", "w2", "b2"] {
                    names.push(format!("{TEMPORAL_PREFIX}ffn.{p}"));
                }
            }
        }
        for l in 0..=self.dims.head_hidden.len() {
            names.push(format!("head.w{l}"));
            names.push(format!("head.b{l}"));
        }
        names
    }
}

/// A scoring network together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Evaluated model outputs for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    /// Per-segment anomaly scores in (0, 1).
    pub scores: Vec<f64>,
    /// Aggregated representation fed to the scoring head, `n × width`.
    pub representation: Tensor,
}

#[derive(Clone, Debug)]
struct Dense {
    w: NodeId,
    b: NodeId,
}

/// Parameter handles of one model inside one graph.
#[derive(Clone, Debug)]
pub struct ModelNodes {
    proj: Vec<(Dense, Dense)>,
    attention: Option<AttentionNodes>,
    ffn: Option<(Dense, Dense)>,
    head: Vec<Dense>,
}

/// Output handles of one model application.
#[derive(Clone, Copy, Debug)]
pub struct AppliedModel {
    /// `[n]` scores.
    pub scores: NodeId,
    /// `n × width` representation.
    pub representation: NodeId,
}

fn dense(g: &mut Graph, x: NodeId, layer: &Dense) -> Result<NodeId> {
    let h = g.matmul(x, layer.w)?;
    Ok(g.add_row(h, layer.b)?)
}

impl Model {
    /// Glorot-uniform weights and zero biases, deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dims.clone();
        let mut params = ParamStore::new();
        let layer = |params: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, wname: &str, bname: &str, fan_in: usize, fan_out: usize| {
            params.insert(format!("{prefix}{wname}"), glorot_uniform(rng, fan_in, fan_out));
            params.insert(format!("{prefix}{bname}"), Tensor::zeros(&[fan_out]));
        };
        for (t, &din) in config.input_widths.iter().enumerate() {
            let prefix = format!("proj.{t}.");
            layer(&mut params, &mut rng, &prefix, "w1", "b1", din, d.proj_hidden);
            layer(&mut params, &mut rng, &prefix, "w2", "b2", d.proj_hidden, d.width);
        }
        if config.aggregator == Aggregator::Attention {
            let attn = AttentionParams::init(&mut rng, config.streams(), d.width, d.heads, d.bucket_cap)?;
            attn.store_into(&mut params, TEMPORAL_PREFIX);
            if config.uses_ffn() {
                let prefix = format!("{TEMPORAL_PREFIX}ffn.");
                layer(&mut params, &mut rng, &prefix, "w1", "b1", d.width, d.ffn_hidden);
                layer(&mut params, &mut rng, &prefix, "w2", "b2", d.ffn_hidden, d.width);
            }
        }
        let mut fan_in = d.width;
        for (l, &out) in d.head_hidden.iter().chain(std::iter::once(&1)).enumerate() {
            layer(&mut params, &mut rng, "head.", &format!("w{l}"), &format!("b{l}"), fan_in, out);
            fan_in = out;
        }
        Ok(Self { config, params })
    }

    /// Wraps loaded parameters after checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Model::init(config.clone(), 0)?;
        for name in reference.params.names() {
            let have = params
                .get(name)
                .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))?;
            let want = reference.params.get(name).expect("listed");
            if have.shape() != want.shape() {
                return Err(Error::shape(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    have.shape(),
                    want.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn is_temporal_param(name: &str) -> bool {
        name.starts_with(TEMPORAL_PREFIX)
    }

    /// Registers every parameter in `g` once; apply as many times as needed.
    pub fn register(&self, g: &mut Graph) -> Result<ModelNodes> {
        let store = &self.params;
        let reg = |g: &mut Graph, n: &str| -> Result<NodeId> { Ok(store.register(g, n, false)?) };
        let pair = |g: &mut Graph, prefix: &str, w: &str, b: &str| -> Result<Dense> {
            Ok(Dense {
                w: reg(g, &format!("{prefix}{w}"))?,
                b: reg(g, &format!("{prefix}{b}"))?,
            })
        };
        let mut proj = Vec::new();
        for t in 0..self.config.streams() {
            let prefix = format!("proj.{t}.");
            proj.push((pair(g, &prefix, "w1", "b1")?, pair(g, &prefix, "w2", "b2")?));
        }
        let (attention, ffn) = if self.config.aggregator == Aggregator::Attention {
            let d = &self.config.dims;
            let attn = AttentionParams::from_store(
                store,
                TEMPORAL_PREFIX,
                self.config.streams(),
                d.heads,
                d.bucket_cap,
            )?;
            let nodes = attn.register(g, TEMPORAL_PREFIX, self.config.freeze_rel_table)?;
            let ffn = if self.config.uses_ffn() {
                let prefix = format!("{TEMPORAL_PREFIX}ffn.");
                Some((pair(g, &prefix, "w1", "b1")?, pair(g, &prefix, "w2", "b2")?))
            } else {
                None
            };
            (Some(nodes), ffn)
        } else {
            (None, None)
        };
        let head = (0..=self.config.dims.head_hidden.len())
            .map(|l| pair(g, "head.", &format!("w{l}"), &format!("b{l}")))
            .collect::<Result<_>>()?;
        Ok(ModelNodes { proj, attention, ffn, head })
    }

    /// Appends one forward pass over `streams` (each `n × d_t`) to `g`.
    pub fn apply(&self, g: &mut Graph, nodes: &ModelNodes, streams: &[NodeId]) -> Result<AppliedModel> {
        let cfg = &self.config;
        if streams.len() != cfg.streams() {
            return Err(Error::shape(format!(
                "model expects {} stream(s), got {}",
                cfg.streams(),
                streams.len()
            )));
        }
        let n = g.shape(streams[0]).first().copied().unwrap_or(0);
        for (t, &s) in streams.iter().enumerate() {
            if g.shape(s) != [n, cfg.input_widths[t]] {
                return Err(Error::shape(format!(
                    "stream {t} has shape {:?}, expected [{n}, {}]",
                    g.shape(s),
                    cfg.input_widths[t]
                )));
            }
        }
        let mut projected = Vec::with_capacity(streams.len());
        for (&s, (l1, l2)) in streams.iter().zip(&nodes.proj) {
            let h = dense(g, s, l1)?;
            let h = g.relu(h);
            projected.push(dense(g, h, l2)?);
        }
        let mut mean = projected[0];
        for &p in &projected[1..] {
            mean = g.add(mean, p)?;
        }
        if projected.len() > 1 {
            mean = g.scale(mean, 1.0 / projected.len() as f64);
        }
        let representation = match &nodes.attention {
            None => mean,
            Some(attn) => {
                let d = &cfg.dims;
                let layout = TamLayout {
                    segments: n,
                    width: d.width,
                    heads: d.heads,
                    bucket_cap: d.bucket_cap,
                    mask: cfg.mask,
                };
                let tam = build_tam(g, &layout, attn, &projected)?;
                let x = g.add(mean, tam.aggregated)?;
                match &nodes.ffn {
                    None => x,
                    Some((l1, l2)) => {
                        let h = dense(g, x, l1)?;
                        let h = g.relu(h);
                        let h = dense(g, h, l2)?;
                        g.add(x, h)?
                    }
                }
            }
        };
        let mut h = representation;
        let last = nodes.head.len() - 1;
        for (l, layer) in nodes.head.iter().enumerate() {
            h = dense(g, h, layer)?;
            if l < last {
                h = g.relu(h);
            }
        }
        let logits = g.reshape(h, &[n])?;
        let scores = g.sigmoid(logits);
        Ok(AppliedModel { scores, representation })
    }

    /// Evaluates the network on one video's streams.
    pub fn forward(&self, streams: &[&Tensor]) -> Result<ModelOutput> {
        let mut g = Graph::new();
        let nodes = self.register(&mut g)?;
        let names: Vec<String> = (0..streams.len()).map(|t| format!("stream{t}")).collect();
        let mut inputs = Vec::with_capacity(streams.len());
        for (name, s) in names.iter().zip(streams) {
            inputs.push(g.input(name, s.shape())?);
        }
        let out = self.apply(&mut g, &nodes, &inputs)?;
        let feeds: Vec<(&str, &Tensor)> = names.iter().map(String::as_str).zip(streams.iter().copied()).collect();
        g.forward(&feeds)?;
        Ok(ModelOutput {
            scores: g.value(out.scores)?.data().to_vec(),
            representation: g.value(out.representation)?.clone(),
        })
    }
}

/// Multi-stream forward pass.
pub fn teacher_forward(model: &Model, streams: &[&Tensor]) -> Result<ModelOutput> {
    model.forward(streams)
}

/// Single-stream forward pass.
pub fn student_forward(model: &Model, stream: &Tensor) -> Result<ModelOutput> {
    if model.config.streams() != 1 {
        return Err(Error::config("student models take exactly one stream"));
    }
    model.forward(&[stream])
}
