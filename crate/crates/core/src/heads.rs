//! Embedding heads: layer norm, attentive statistics pooling, batch norm and
//! a linear projection.
//!
//! Each block has its own head unless sharing is enabled. The pooling group
//! (`ln`, `attn`) and the projection group (`bn`, `proj`) share
//! independently: shared groups live under `head.shared.*`, per-block ones
//! under `head.<block>.*`. The aggregated speaker-embedding head lives under
//! `mfa.*` and pools the channel-wise concatenation of all taps.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, Mode, TapSet};
use crate::error::{Error, Result};
use crate::losses::l2_normalize_rows;
use crate::params::{init, Binder, ParamStore};
use crate::tape::{Tape, Var};

/// Variance floor inside the pooled standard deviation.
pub const STD_EPS: f64 = 1e-8;

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Output width of each per-block head.
    pub embed_dim: usize,
    /// Output width of the aggregated speaker embedding.
    pub speaker_dim: usize,
    pub share_pooling: bool,
    pub share_projection: bool,
    pub attention_hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { embed_dim: 192, speaker_dim: 192, share_pooling: false, share_projection: false, attention_hidden: 128 }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.speaker_dim == 0 || self.attention_hidden == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn pooling_prefix(&self, block: usize) -> String {
        if self.share_pooling {
            "head.shared".into()
        } else {
            format!("head.{block}")
        }
    }

    pub fn projection_prefix(&self, block: usize) -> String {
        if self.share_projection {
            "head.shared".into()
        } else {
            format!("head.{block}")
        }
    }
}

/// Rows of embeddings with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub vectors: Array2<f64>,
    pub labels: Vec<usize>,
    pub is_augmented: Vec<bool>,
}

impl EmbeddingBatch {
    pub fn new(vectors: Array2<f64>, labels: Vec<usize>, is_augmented: Vec<bool>) -> Result<Self> {
        if vectors.nrows() != labels.len() || labels.len() != is_augmented.len() {
            return Err(Error::Shape(format!("{} rows, {} labels, {} flags", vectors.nrows(), labels.len(), is_augmented.len())));
        }
        Ok(Self { vectors, labels, is_augmented })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn normalized(&self) -> Self {
        Self { vectors: l2_normalize_rows(&self.vectors).0, labels: self.labels.clone(), is_augmented: self.is_augmented.clone() }
    }
}

fn add_pooling<R: Rng>(store: &mut ParamStore, r: &mut R, prefix: &str, channels: usize, hidden: usize) {
    if store.get(&format!("{prefix}.ln.gamma")).is_some() {
        return;
    }
    store.insert(format!("{prefix}.ln.gamma"), init::ones(channels));
    store.insert(format!("{prefix}.ln.beta"), init::zeros(channels));
    store.insert(format!("{prefix}.attn.weight"), init::xavier(r, channels, hidden));
    store.insert(format!("{prefix}.attn.bias"), init::zeros(hidden));
    store.insert(format!("{prefix}.attn.v"), init::xavier(r, hidden, 1));
}

fn add_projection<R: Rng>(store: &mut ParamStore, r: &mut R, prefix: &str, pooled: usize, out: usize) {
    if store.get(&format!("{prefix}.proj.weight")).is_some() {
        return;
    }
    store.insert(format!("{prefix}.bn.gamma"), init::ones(pooled));
    store.insert(format!("{prefix}.bn.beta"), init::zeros(pooled));
    store.insert_buffer(format!("{prefix}.bn.running_mean"), init::zeros(pooled));
    store.insert_buffer(format!("{prefix}.bn.running_var"), init::ones(pooled));
    store.insert(format!("{prefix}.proj.weight"), init::xavier(r, pooled, out));
    store.insert(format!("{prefix}.proj.bias"), init::zeros(out));
}

/// Insert per-block (or shared) heads and the aggregated head.
pub fn init_params<R: Rng>(enc: &EncoderConfig, cfg: &HeadConfig, store: &mut ParamStore, r: &mut R) {
    let c = enc.model_dim;
    for k in 0..enc.num_blocks {
        add_pooling(store, r, &cfg.pooling_prefix(k), c, cfg.attention_hidden);
        add_projection(store, r, &cfg.projection_prefix(k), 2 * c, cfg.embed_dim);
    }
    let cat = c * enc.num_blocks;
    add_pooling(store, r, "mfa", cat, cfg.attention_hidden);
    add_projection(store, r, "mfa", 2 * cat, cfg.speaker_dim);
}

/// Attentive statistics pooling on a tape: `h` is `T × C`, result `1 × 2C`.
pub fn attentive_stats_pool_on<'p>(t: &mut Tape<'p>, b: &mut Binder<'p>, h: Var, prefix: &str) -> (Var, Var) {
    let w = b.get(t, &format!("{prefix}.attn.weight"));
    let bias = b.get(t, &format!("{prefix}.attn.bias"));
    let v = b.get(t, &format!("{prefix}.attn.v"));
    let e = t.matmul(h, w);
    let e = t.add_row(e, bias);
    let e = t.tanh(e);
    let scores = t.matmul(e, v);
    let alpha = t.softmax(scores, 0);
    let mean = t.matmul_t(alpha, h, true, false);
    let h2 = t.square(h);
    let m2 = t.matmul_t(alpha, h2, true, false);
    let mean_sq = t.square(mean);
    let var = t.sub(m2, mean_sq);
    let var = t.clamp_min(var, STD_EPS);
    let std = t.sqrt(var);
    (t.concat_cols(&[mean, std]), alpha)
}

/// Layer norm then attentive pooling of one tap (per-utterance half of a head).
pub fn pool_on<'p>(t: &mut Tape<'p>, b: &mut Binder<'p>, tap: Var, prefix: &str) -> Var {
    let g = b.get(t, &format!("{prefix}.ln.gamma"));
    let be = b.get(t, &format!("{prefix}.ln.beta"));
    let h = t.layer_norm(tap, g, be);
    attentive_stats_pool_on(t, b, h, prefix).0
}

/// Running-statistics update requested by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub rows: usize,
}

/// Batch norm and projection of stacked pooled rows (batch half of a head).
pub fn project_on<'p>(t: &mut Tape<'p>, b: &mut Binder<'p>, pooled: Var, prefix: &str, mode: Mode) -> (Var, Option<BnUpdate>) {
    let g = b.get(t, &format!("{prefix}.bn.gamma"));
    let be = b.get(t, &format!("{prefix}.bn.beta"));
    let (normed, update) = match mode {
        Mode::Train { .. } => {
            let rows = t.shape(pooled).0;
            let (y, mean, var) = t.batch_norm_train(pooled, g, be);
            let up = BnUpdate { prefix: prefix.to_string(), mean, var, rows };
            (y, Some(up))
        }
        Mode::Eval => {
            let mean = b.buffer(&format!("{prefix}.bn.running_mean"));
            let var = b.buffer(&format!("{prefix}.bn.running_var"));
            let y = t.batch_norm_eval(pooled, g, be, mean.as_slice().expect("contiguous"), var.as_slice().expect("contiguous"));
            (y, None)
        }
    };
    let w = b.get(t, &format!("{prefix}.proj.weight"));
    let bias = b.get(t, &format!("{prefix}.proj.bias"));
    let y = t.matmul(normed, w);
    (t.add_row(y, bias), update)
}

/// Fold a batch's statistics into the running buffers (unbiased variance).
pub fn apply_bn_update(store: &mut ParamStore, up: &BnUpdate) {
    let n = up.rows as f64;
    let unbias = if up.rows > 1 { n / (n - 1.0) } else { 1.0 };
    if let Some(m) = store.buffer_mut(&format!("{}.bn.running_mean", up.prefix)) {
        for (r, &x) in m.iter_mut().zip(&up.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * x;
        }
    }
    if let Some(v) = store.buffer_mut(&format!("{}.bn.running_var", up.prefix)) {
        for (r, &x) in v.iter_mut().zip(&up.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * x * unbias;
        }
    }
}

/// Borrowed attention parameters for direct pooling calls.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams<'a> {
    /// `C × A`
    pub weight: &'a Array2<f64>,
    /// `1 × A`
    pub bias: &'a Array2<f64>,
    /// `A × 1`
    pub v: &'a Array2<f64>,
}

impl<'a> AttentionParams<'a> {
    pub fn from_store(store: &'a ParamStore, prefix: &str) -> Result<Self> {
        let get = |n: &str| store.get(&format!("{prefix}.attn.{n}")).ok_or_else(|| Error::Config(format!("missing {prefix}.attn.{n}")));
        Ok(Self { weight: get("weight")?, bias: get("bias")?, v: get("v")? })
    }
}

/// Attention-weighted mean and standard deviation over time.
/// Returns the `2C` statistics and the `T` attention weights.
pub fn attentive_stats_pool(h: &Array2<f64>, attn: AttentionParams<'_>) -> Result<(Array1<f64>, Array1<f64>)> {
    if h.nrows() == 0 {
        return Err(Error::Length("cannot pool zero frames".into()));
    }
    if attn.weight.nrows() != h.ncols() {
        return Err(Error::Shape(format!("{} channels but attention expects {}", h.ncols(), attn.weight.nrows())));
    }
    let mut store = ParamStore::new();
    store.insert("p.attn.weight", attn.weight.clone());
    store.insert("p.attn.bias", attn.bias.clone());
    store.insert("p.attn.v", attn.v.clone());
    let mut t = Tape::new();
    let mut b = Binder::new(&store);
    let x = t.constant(h.clone());
    let (stats, alpha) = attentive_stats_pool_on(&mut t, &mut b, x, "p");
    Ok((t.value(stats).row(0).to_owned(), t.value(alpha).column(0).to_owned()))
}

fn check_taps(taps: &[TapSet], enc: &EncoderConfig) -> Result<()> {
    if taps.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    for ts in taps {
        if ts.len() != enc.num_blocks {
            return Err(Error::Shape(format!("{} taps for {} blocks", ts.len(), enc.num_blocks)));
        }
        for m in &ts.maps {
            if m.ncols() != enc.model_dim || m.nrows() == 0 {
                return Err(Error::Shape(format!("tap is {}×{}", m.nrows(), m.ncols())));
            }
        }
    }
    Ok(())
}

fn check_heads(store: &ParamStore, enc: &EncoderConfig, cfg: &HeadConfig) -> Result<()> {
    for k in 0..enc.num_blocks {
        for name in [format!("{}.attn.weight", cfg.pooling_prefix(k)), format!("{}.proj.weight", cfg.projection_prefix(k))] {
            if store.get(&name).is_none() {
                return Err(Error::Config(format!("head parameters {name} missing for this sharing setup")));
            }
        }
    }
    Ok(())
}

/// Raw (unnormalised) outputs of block `block`'s head for a batch of taps.
pub fn head_forward(
    taps: &[Array2<f64>],
    block: usize,
    enc: &EncoderConfig,
    cfg: &HeadConfig,
    params: &ParamStore,
    mode: Mode,
) -> Result<Array2<f64>> {
    if taps.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    if let Some(bad) = taps.iter().find(|m| m.ncols() != enc.model_dim || m.nrows() == 0) {
        return Err(Error::Shape(format!("tap is {}×{}", bad.nrows(), bad.ncols())));
    }
    check_heads(params, enc, cfg)?;
    let mut t = Tape::new();
    let mut b = Binder::new(params);
    let pooled: Vec<Var> = taps
        .iter()
        .map(|m| {
            let x = t.constant(m.clone());
            pool_on(&mut t, &mut b, x, &cfg.pooling_prefix(block))
        })
        .collect();
    let stacked = t.concat_rows(&pooled);
    let (y, _) = project_on(&mut t, &mut b, stacked, &cfg.projection_prefix(block), mode);
    Ok(t.value(y).clone())
}

/// One unit-norm embedding batch per block.
pub fn feature_map_embeddings(
    taps: &[TapSet],
    labels: &[usize],
    is_augmented: &[bool],
    enc: &EncoderConfig,
    cfg: &HeadConfig,
    params: &ParamStore,
    mode: Mode,
) -> Result<Vec<EmbeddingBatch>> {
    check_taps(taps, enc)?;
    (0..enc.num_blocks)
        .map(|k| {
            let block: Vec<Array2<f64>> = taps.iter().map(|ts| ts.maps[k].clone()).collect();
            let raw = head_forward(&block, k, enc, cfg, params, mode)?;
            Ok(EmbeddingBatch::new(raw, labels.to_vec(), is_augmented.to_vec())?.normalized())
        })
        .collect()
}

/// Concatenate taps channel-wise and pool on a tape (per-utterance half of
/// the aggregated head).
pub fn aggregate_pool_on<'p>(t: &mut Tape<'p>, b: &mut Binder<'p>, taps: &[Var]) -> Var {
    let cat = if taps.len() == 1 { taps[0] } else { t.concat_cols(taps) };
    pool_on(t, b, cat, "mfa")
}

/// Raw speaker embeddings (`N × speaker_dim`) from the aggregated head.
pub fn speaker_embedding(taps: &[TapSet], enc: &EncoderConfig, params: &ParamStore, mode: Mode) -> Result<Array2<f64>> {
    check_taps(taps, enc)?;
    let mut t = Tape::new();
    let mut b = Binder::new(params);
    let pooled: Vec<Var> = taps
        .iter()
        .map(|ts| {
            let vars: Vec<Var> = ts.maps.iter().map(|m| t.constant(m.clone())).collect();
            aggregate_pool_on(&mut t, &mut b, &vars)
        })
        .collect();
    let stacked = t.concat_rows(&pooled);
    let (y, _) = project_on(&mut t, &mut b, stacked, "mfa", mode);
    Ok(t.value(y).clone())
}
