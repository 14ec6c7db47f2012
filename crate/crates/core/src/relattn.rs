//! Temporal aggregation by disentangled self/cross attention.
//!
//! Each of `T` feature streams gets its own content projections while the
//! relative-position embedding table and its two projections are shared.
//! For stream `t`, segment pair `(i, j)` and one head, the attention logit is
//!
//! ```text
//! A_t[i,j] = Qc_t[i]·Kc_t[j]                      self content-to-content
//!          + Σ_{t'≠t} Qc_t[i]·Kc_t'[j]            cross content-to-content
//!          + Qc_t[i]·Kr[bucket(i,j)]              content-to-position
//!          + Kc_t[j]·Qr[bucket(j,i)]              position-to-content
//! ```
//!
//! scaled by `1/sqrt(m·d)` where `m` counts the enabled terms (self = 1,
//! cross = T−1, each positional term = 1). With every term on, `m = T + 2`.
//! Stream outputs `H_t = softmax(A_t / sqrt(m·d)) Vc_t` are averaged into `H`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::params::{glorot_uniform, ParamStore};

/// Relative-distance bucket of query position `i` against key position `j`.
///
/// Distances saturate at `±k`, giving buckets in `[0, 2k)`.
pub fn relative_bucket(i: usize, j: usize, k: usize) -> Result<usize> {
    if k < 1 {
        return Err(Error::config("bucket cap k must be at least 1"));
    }
    Ok(bucket_unchecked(i, j, k))
}

fn bucket_unchecked(i: usize, j: usize, k: usize) -> usize {
    let diff = i as i64 - j as i64;
    let k = k as i64;
    if diff <= -k {
        0
    } else if diff >= k {
        (2 * k - 1) as usize
    } else {
        (diff + k) as usize
    }
}

/// Which logit components contribute to the attention scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentMask {
    pub self_c2c: bool,
    pub cross_c2c: bool,
    pub c2p: bool,
    pub p2c: bool,
}

impl ComponentMask {
    pub const ALL: Self = Self {
        self_c2c: true,
        cross_c2c: true,
        c2p: true,
        p2c: true,
    };

    /// Single-stream configuration: cross content-to-content omitted.
    pub const SINGLE_STREAM: Self = Self {
        self_c2c: true,
        cross_c2c: false,
        c2p: true,
        p2c: true,
    };

    pub fn is_empty(&self) -> bool {
        !(self.self_c2c || self.cross_c2c || self.c2p || self.p2c)
    }

    /// Number of logit terms summed for `streams` streams; sets the divisor.
    pub fn term_count(&self, streams: usize) -> usize {
        usize::from(self.self_c2c)
            + if self.cross_c2c { streams.saturating_sub(1) } else { 0 }
            + usize::from(self.c2p)
            + usize::from(self.p2c)
    }

    /// Every enabled/disabled combination with at least one term.
    pub fn all_nonempty() -> Vec<Self> {
        (1u8..16)
            .map(|bits| Self {
                self_c2c: bits & 1 != 0,
                cross_c2c: bits & 2 != 0,
                c2p: bits & 4 != 0,
                p2c: bits & 8 != 0,
            })
            .collect()
    }
}

impl fmt::Display for ComponentMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.self_c2c {
            parts.push("self");
        }
        if self.cross_c2c {
            parts.push("cross");
        }
        if self.c2p {
            parts.push("c2p");
        }
        if self.p2c {
            parts.push("p2c");
        }
        if parts.is_empty() {
            parts.push("none");
        }
        write!(f, "{}", parts.join("+"))
    }
}

impl FromStr for ComponentMask {
    type Err = Error;

    /// Parses `all` or a `+`/`,`-separated subset of `self`, `cross`, `c2p`, `p2c`.
    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "all" {
            return Ok(Self::ALL);
        }
        let mut mask = Self {
            self_c2c: false,
            cross_c2c: false,
            c2p: false,
            p2c: false,
        };
        for part in s.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "self" => mask.self_c2c = true,
                "cross" => mask.cross_c2c = true,
                "c2p" => mask.c2p = true,
                "p2c" => mask.p2c = true,
                other => return Err(Error::config(format!("unknown attention component `{other}`"))),
            }
        }
        if mask.is_empty() {
            return Err(Error::config("attention component mask is empty"));
        }
        Ok(mask)
    }
}

/// Projection matrices and the shared relative-position table.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub query: Vec<Arc<Tensor>>,
    pub key: Vec<Arc<Tensor>>,
    pub value: Vec<Arc<Tensor>>,
    pub pos_query: Arc<Tensor>,
    pub pos_key: Arc<Tensor>,
    /// `2k × d`, one instance for all streams.
    pub rel_table: Arc<Tensor>,
    pub bucket_cap: usize,
    pub heads: usize,
}

fn check_geometry(width: usize, heads: usize, bucket_cap: usize) -> Result<()> {
    if bucket_cap < 1 {
        return Err(Error::config("bucket cap k must be at least 1"));
    }
    if width == 0 || heads == 0 || width % heads != 0 {
        return Err(Error::config(format!(
            "head count {heads} must divide attention width {width}"
        )));
    }
    Ok(())
}

impl AttentionParams {
    pub fn init(
        rng: &mut impl Rng,
        streams: usize,
        width: usize,
        heads: usize,
        bucket_cap: usize,
    ) -> Result<Self> {
        check_geometry(width, heads, bucket_cap)?;
        if streams == 0 {
            return Err(Error::config("at least one stream is required"));
        }
        let sq = |rng: &mut _| Arc::new(glorot_uniform(rng, width, width));
        let mut query = Vec::new();
        let mut key = Vec::new();
        let mut value = Vec::new();
        for _ in 0..streams {
            query.push(sq(rng));
            key.push(sq(rng));
            value.push(sq(rng));
        }
        let pos_query = sq(rng);
        let pos_key = sq(rng);
        let rel_table = Arc::new(glorot_uniform(rng, 2 * bucket_cap, width));
        Ok(Self {
            query,
            key,
            value,
            pos_query,
            pos_key,
            rel_table,
            bucket_cap,
            heads,
        })
    }

    pub fn streams(&self) -> usize {
        self.query.len()
    }

    pub fn width(&self) -> usize {
        self.pos_query.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.width();
        check_geometry(d, self.heads, self.bucket_cap)?;
        let t = self.streams();
        if t == 0 || self.key.len() != t || self.value.len() != t {
            return Err(Error::shape("per-stream projection counts differ"));
        }
        let square = |m: &Tensor| m.shape() == [d, d];
        let all = self.query.iter().chain(&self.key).chain(&self.value);
        if !all.chain([&self.pos_query, &self.pos_key]).all(|m| square(m)) {
            return Err(Error::shape(format!("attention projections must be {d}x{d}")));
        }
        if self.rel_table.shape() != [2 * self.bucket_cap, d] {
            return Err(Error::shape(format!(
                "relative table must be {}x{d}, got {:?}",
                2 * self.bucket_cap,
                self.rel_table.shape()
            )));
        }
        Ok(())
    }

    pub fn param_names(prefix: &str, streams: usize) -> Vec<String> {
        let mut names = Vec::new();
        for t in 0..streams {
            for kind in ["wq", "wk", "wv"] {
                names.push(format!("{prefix}{kind}.{t}"));
            }
        }
        for kind in ["wq_rel", "wk_rel", "rel_table"] {
            names.push(format!("{prefix}{kind}"));
        }
        names
    }

    pub fn store_into(&self, store: &mut ParamStore, prefix: &str) {
        for t in 0..self.streams() {
            store.insert(format!("{prefix}wq.{t}"), (*self.query[t]).clone());
            store.insert(format!("{prefix}wk.{t}"), (*self.key[t]).clone());
            store.insert(format!("{prefix}wv.{t}"), (*self.value[t]).clone());
        }
        store.insert(format!("{prefix}wq_rel"), (*self.pos_query).clone());
        store.insert(format!("{prefix}wk_rel"), (*self.pos_key).clone());
        store.insert(format!("{prefix}rel_table"), (*self.rel_table).clone());
    }

    pub fn from_store(
        store: &ParamStore,
        prefix: &str,
        streams: usize,
        heads: usize,
        bucket_cap: usize,
    ) -> Result<Self> {
        let get = |n: String| -> Result<Arc<Tensor>> { Ok(Arc::clone(store.require(&n)?)) };
        let mut query = Vec::new();
        let mut key = Vec::new();
        let mut value = Vec::new();
        for t in 0..streams {
            query.push(get(format!("{prefix}wq.{t}"))?);
            key.push(get(format!("{prefix}wk.{t}"))?);
            value.push(get(format!("{prefix}wv.{t}"))?);
        }
        let params = Self {
            query,
            key,
            value,
            pos_query: get(format!("{prefix}wq_rel"))?,
            pos_key: get(format!("{prefix}wk_rel"))?,
            rel_table: get(format!("{prefix}rel_table"))?,
            bucket_cap,
            heads,
        };
        params.validate()?;
        Ok(params)
    }

    /// Registers every tensor in `g` under `prefix`; a frozen table becomes a constant.
    pub fn register(&self, g: &mut Graph, prefix: &str, freeze_table: bool) -> Result<AttentionNodes> {
        let reg = |g: &mut Graph, name: String, v: &Arc<Tensor>| g.param(&name, Arc::clone(v));
        let mut nodes = AttentionNodes {
            query: Vec::new(),
            key: Vec::new(),
            value: Vec::new(),
            pos_query: reg(g, format!("{prefix}wq_rel"), &self.pos_query)?,
            pos_key: reg(g, format!("{prefix}wk_rel"), &self.pos_key)?,
            rel_table: if freeze_table {
                g.constant_shared(Arc::clone(&self.rel_table))
            } else {
                reg(g, format!("{prefix}rel_table"), &self.rel_table)?
            },
        };
        for t in 0..self.streams() {
            nodes.query.push(reg(g, format!("{prefix}wq.{t}"), &self.query[t])?);
            nodes.key.push(reg(g, format!("{prefix}wk.{t}"), &self.key[t])?);
            nodes.value.push(reg(g, format!("{prefix}wv.{t}"), &self.value[t])?);
        }
        Ok(nodes)
    }
}

/// Graph handles of [`AttentionParams`].
#[derive(Clone, Debug)]
pub struct AttentionNodes {
    pub query: Vec<NodeId>,
    pub key: Vec<NodeId>,
    pub value: Vec<NodeId>,
    pub pos_query: NodeId,
    pub pos_key: NodeId,
    pub rel_table: NodeId,
}

/// Static description of one attention evaluation.
#[derive(Clone, Copy, Debug)]
pub struct TamLayout {
    pub segments: usize,
    pub width: usize,
    pub heads: usize,
    pub bucket_cap: usize,
    pub mask: ComponentMask,
}

impl TamLayout {
    /// Softmax temperature `sqrt(m·d)`.
    pub fn divisor(&self, streams: usize) -> f64 {
        ((self.mask.term_count(streams) * self.width) as f64).sqrt()
    }
}

/// Node handles produced by [`build_tam`].
#[derive(Clone, Debug)]
pub struct TamNodes {
    pub per_stream: Vec<NodeId>,
    pub aggregated: NodeId,
    /// Raw (unscaled) logits, indexed `[stream][head]`.
    pub logits: Vec<Vec<NodeId>>,
    /// Softmax attention weights, indexed `[stream][head]`.
    pub weights: Vec<Vec<NodeId>>,
}

/// Flat indices into an `n × 2k` matrix selecting `M[i, bucket(i, j)]` at `(i, j)`.
fn c2p_indices(n: usize, k: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            idx.push(i * 2 * k + bucket_unchecked(i, j, k));
        }
    }
    idx
}

/// Flat indices selecting `M[j, bucket(j, i)]` at `(i, j)`.
fn p2c_indices(n: usize, k: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            idx.push(j * 2 * k + bucket_unchecked(j, i, k));
        }
    }
    idx
}

/// Appends the attention computation to `g`. Each stream node must be `n × d`.
pub fn build_tam(
    g: &mut Graph,
    layout: &TamLayout,
    params: &AttentionNodes,
    streams: &[NodeId],
) -> Result<TamNodes> {
    let t_count = streams.len();
    let (n, d, h, k) = (layout.segments, layout.width, layout.heads, layout.bucket_cap);
    check_geometry(d, h, k)?;
    if t_count == 0 || params.query.len() != t_count {
        return Err(Error::shape(format!(
            "{t_count} streams for {} projection triples",
            params.query.len()
        )));
    }
    for &s in streams {
        if g.shape(s) != [n, d] {
            return Err(Error::shape(format!("stream shape {:?}, expected [{n}, {d}]", g.shape(s))));
        }
    }
    let terms = layout.mask.term_count(t_count);
    if terms == 0 {
        return Err(Error::config(format!(
            "component mask `{}` enables no terms for {t_count} stream(s)",
            layout.mask
        )));
    }
    let inv_scale = 1.0 / layout.divisor(t_count);
    let dh = d / h;
    let mask = layout.mask;

    let mut q_heads = Vec::with_capacity(t_count);
    let mut kt_heads = Vec::with_capacity(t_count);
    let mut k_heads = Vec::with_capacity(t_count);
    let mut v_heads = Vec::with_capacity(t_count);
    for (t, &z) in streams.iter().enumerate() {
        let q = g.matmul(z, params.query[t])?;
        let kk = g.matmul(z, params.key[t])?;
        let v = g.matmul(z, params.value[t])?;
        let mut qs = Vec::with_capacity(h);
        let mut ks = Vec::with_capacity(h);
        let mut kts = Vec::with_capacity(h);
        let mut vs = Vec::with_capacity(h);
        for head in 0..h {
            qs.push(g.slice_cols(q, head * dh, dh)?);
            let kh = g.slice_cols(kk, head * dh, dh)?;
            ks.push(kh);
            kts.push(g.transpose(kh)?);
            vs.push(g.slice_cols(v, head * dh, dh)?);
        }
        q_heads.push(qs);
        k_heads.push(ks);
        kt_heads.push(kts);
        v_heads.push(vs);
    }

    let positional = mask.c2p || mask.p2c;
    let mut qr_t_heads = Vec::new();
    let mut kr_t_heads = Vec::new();
    if positional {
        let qr = g.matmul(params.rel_table, params.pos_query)?;
        let kr = g.matmul(params.rel_table, params.pos_key)?;
        for head in 0..h {
            let qh = g.slice_cols(qr, head * dh, dh)?;
            qr_t_heads.push(g.transpose(qh)?);
            let kh = g.slice_cols(kr, head * dh, dh)?;
            kr_t_heads.push(g.transpose(kh)?);
        }
    }
    let c2p_idx = c2p_indices(n, k);
    let p2c_idx = p2c_indices(n, k);

    let mut per_stream = Vec::with_capacity(t_count);
    let mut logits = Vec::with_capacity(t_count);
    let mut weights = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let mut head_out = Vec::with_capacity(h);
        let mut head_logits = Vec::with_capacity(h);
        let mut head_weights = Vec::with_capacity(h);
        for head in 0..h {
            let q = q_heads[t][head];
            let mut terms_here: Vec<NodeId> = Vec::new();
            if mask.self_c2c {
                terms_here.push(g.matmul(q, kt_heads[t][head])?);
            }
            if mask.cross_c2c {
                for other in (0..t_count).filter(|&o| o != t) {
                    terms_here.push(g.matmul(q, kt_heads[other][head])?);
                }
            }
            if mask.c2p {
                let full = g.matmul(q, kr_t_heads[head])?; // n × 2k
                let flat = g.reshape(full, &[n * 2 * k])?;
                let picked = g.gather_rows(flat, c2p_idx.clone())?;
                terms_here.push(g.reshape(picked, &[n, n])?);
            }
            if mask.p2c {
                let full = g.matmul(k_heads[t][head], qr_t_heads[head])?; // n × 2k
                let flat = g.reshape(full, &[n * 2 * k])?;
                let picked = g.gather_rows(flat, p2c_idx.clone())?;
                terms_here.push(g.reshape(picked, &[n, n])?);
            }
            let mut acc = terms_here[0];
            for &term in &terms_here[1..] {
                acc = g.add(acc, term)?;
            }
            head_logits.push(acc);
            let scaled = g.scale(acc, inv_scale);
            let attn = g.softmax(scaled)?;
            head_weights.push(attn);
            head_out.push(g.matmul(attn, v_heads[t][head])?);
        }
        let out = if h == 1 { head_out[0] } else { g.concat(&head_out, 1)? };
        per_stream.push(out);
        logits.push(head_logits);
        weights.push(head_weights);
    }

    let mut sum = per_stream[0];
    for &s in &per_stream[1..] {
        sum = g.add(sum, s)?;
    }
    let aggregated = if t_count == 1 { sum } else { g.scale(sum, 1.0 / t_count as f64) };
    Ok(TamNodes {
        per_stream,
        aggregated,
        logits,
        weights,
    })
}

/// Evaluated attention outputs.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub per_stream: Vec<Tensor>,
    pub aggregated: Tensor,
    /// Raw logits `[stream][head]`, each `n × n`.
    pub logits: Vec<Vec<Tensor>>,
    /// Attention weights `[stream][head]`, rows summing to one.
    pub weights: Vec<Vec<Tensor>>,
}

fn evaluate(streams: &[Tensor], params: &AttentionParams, mask: ComponentMask) -> Result<AttentionOutput> {
    params.validate()?;
    if streams.len() != params.streams() {
        return Err(Error::shape(format!(
            "{} streams given, parameters cover {}",
            streams.len(),
            params.streams()
        )));
    }
    let first = streams.first().ok_or_else(|| Error::shape("no streams"))?;
    if first.rank() != 2 {
        return Err(Error::shape("streams must be matrices"));
    }
    let n = first.rows();
    if streams.iter().any(|s| s.shape() != first.shape()) {
        return Err(Error::shape("streams disagree on segment count or width"));
    }
    let layout = TamLayout {
        segments: n,
        width: params.width(),
        heads: params.heads,
        bucket_cap: params.bucket_cap,
        mask,
    };
    let mut g = Graph::new();
    let nodes = params.register(&mut g, "", false)?;
    let names: Vec<String> = (0..streams.len()).map(|t| format!("z{t}")).collect();
    let mut inputs = Vec::new();
    for (name, s) in names.iter().zip(streams) {
        inputs.push(g.input(name, s.shape())?);
    }
    let tam = build_tam(&mut g, &layout, &nodes, &inputs)?;
    let feeds: Vec<(&str, &Tensor)> = names.iter().map(String::as_str).zip(streams).collect();
    g.forward(&feeds)?;
    Ok(AttentionOutput {
        per_stream: tam
            .per_stream
            .iter()
            .map(|&id| g.value(id).cloned())
            .collect::<Result<_, _>>()?,
        aggregated: g.value(tam.aggregated)?.clone(),
        logits: collect_grid(&g, &tam.logits)?,
        weights: collect_grid(&g, &tam.weights)?,
    })
}

fn collect_grid(g: &Graph, ids: &[Vec<NodeId>]) -> Result<Vec<Vec<Tensor>>> {
    let mut out = Vec::with_capacity(ids.len());
    for row in ids {
        let mut vals = Vec::with_capacity(row.len());
        for &id in row {
            vals.push(g.value(id)?.clone());
        }
        out.push(vals);
    }
    Ok(out)
}

/// Disentangled attention over `T` streams, with or without cross terms.
pub fn tam_forward(streams: &[Tensor], params: &AttentionParams, include_cross: bool) -> Result<AttentionOutput> {
    let mask = if include_cross {
        ComponentMask::ALL
    } else {
        ComponentMask::SINGLE_STREAM
    };
    evaluate(streams, params, mask)
}

/// Attention restricted to the components enabled in `mask`.
pub fn ablate_components(
    streams: &[Tensor],
    params: &AttentionParams,
    mask: ComponentMask,
) -> Result<AttentionOutput> {
    if mask.is_empty() {
        return Err(Error::config("attention component mask is empty"));
    }
    evaluate(streams, params, mask)
}
