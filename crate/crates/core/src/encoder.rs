//! Conformer encoder with a stride-2 convolutional front end. Every block's
//! output is kept as a tap.
//!
//! Parameter names (all under `encoder.`):
//!
//! - `frontend.{weight,bias}`: stride-2 convolution, stored as a
//!   `(kernel·n_mels) × model_dim` matrix over unfolded frames.
//! - `blocks.<k>.ff1.*`, `blocks.<k>.ff2.*`: `ln.{gamma,beta}`,
//!   `w1`, `b1`, `w2`, `b2`.
//! - `blocks.<k>.mhsa.*`: `ln.{gamma,beta}`, `wq`, `bq`, `wk`, `bk`, `wv`,
//!   `bv`, `wo`, `bo`.
//! - `blocks.<k>.conv.*`: `ln.{gamma,beta}`, `pw1.{weight,bias}`,
//!   `dw.{weight,bias}`, `norm.{gamma,beta}`, `pw2.{weight,bias}`.
//! - `blocks.<k>.out_ln.{gamma,beta}`.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::params::{init, Binder, ParamStore};
use crate::rng;
use crate::tape::{Tape, Var};

/// Front-end convolution width in frames.
pub const FRONTEND_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subsample {
    /// One stride-2 convolution (kernel 3, padding 1): `T' = ⌈T/2⌉`.
    #[default]
    Half,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub num_blocks: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ff_expansion: usize,
    pub conv_kernel: usize,
    pub subsample: Subsample,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 80,
            num_blocks: 6,
            model_dim: 64,
            num_heads: 4,
            ff_expansion: 4,
            conv_kernel: 15,
            subsample: Subsample::Half,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    /// Full-size preset (6 blocks, 256 channels).
    pub fn full() -> Self {
        Self { model_dim: 256, dropout: 0.1, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(Error::Config("num_blocks must be at least 1".into()));
        }
        if self.input_dim == 0 || self.model_dim == 0 || self.ff_expansion == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!("model_dim {} not divisible by num_heads {}", self.model_dim, self.num_heads)));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config(format!("conv_kernel must be odd, got {}", self.conv_kernel)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// Frames after the front end.
    pub fn subsampled_len(&self, frames: usize) -> usize {
        match self.subsample {
            Subsample::Half => (frames + 2 - FRONTEND_KERNEL) / 2 + 1,
        }
    }

    pub const MIN_FRAMES: usize = 4;
}

/// Forward-pass mode. Training enables dropout (seeded) and batch statistics
/// in batch-norm layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64 },
    Eval,
}

/// Ordered block outputs, shallow to deep; each is `T' × model_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct TapSet {
    pub maps: Vec<Array2<f64>>,
}

impl TapSet {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.maps.first().map_or(0, |m| m.nrows())
    }
}

fn block_prefix(k: usize) -> String {
    format!("encoder.blocks.{k}")
}

fn add_linear<R: Rng>(store: &mut ParamStore, r: &mut R, w: &str, b: &str, fan_in: usize, fan_out: usize) {
    store.insert(w, init::xavier(r, fan_in, fan_out));
    store.insert(b, init::zeros(fan_out));
}

fn add_ln(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.gamma"), init::ones(dim));
    store.insert(format!("{prefix}.beta"), init::zeros(dim));
}

/// Insert freshly initialised encoder parameters into `store`.
pub fn init_params<R: Rng>(cfg: &EncoderConfig, store: &mut ParamStore, r: &mut R) {
    let d = cfg.model_dim;
    add_linear(store, r, "encoder.frontend.weight", "encoder.frontend.bias", FRONTEND_KERNEL * cfg.input_dim, d);
    for k in 0..cfg.num_blocks {
        let p = block_prefix(k);
        for ff in ["ff1", "ff2"] {
            add_ln(store, &format!("{p}.{ff}.ln"), d);
            let h = d * cfg.ff_expansion;
            add_linear(store, r, &format!("{p}.{ff}.w1"), &format!("{p}.{ff}.b1"), d, h);
            add_linear(store, r, &format!("{p}.{ff}.w2"), &format!("{p}.{ff}.b2"), h, d);
        }
        add_ln(store, &format!("{p}.mhsa.ln"), d);
        for m in ["q", "k", "v", "o"] {
            add_linear(store, r, &format!("{p}.mhsa.w{m}"), &format!("{p}.mhsa.b{m}"), d, d);
        }
        add_ln(store, &format!("{p}.conv.ln"), d);
        add_linear(store, r, &format!("{p}.conv.pw1.weight"), &format!("{p}.conv.pw1.bias"), d, 2 * d);
        let a = 1.0 / (cfg.conv_kernel as f64).sqrt();
        store.insert(format!("{p}.conv.dw.weight"), init::uniform(r, cfg.conv_kernel, d, a));
        store.insert(format!("{p}.conv.dw.bias"), init::zeros(d));
        add_ln(store, &format!("{p}.conv.norm"), d);
        add_linear(store, r, &format!("{p}.conv.pw2.weight"), &format!("{p}.conv.pw2.bias"), d, d);
        add_ln(store, &format!("{p}.out_ln"), d);
    }
}

/// Fixed sinusoidal position table, `frames × dim`.
pub fn sinusoidal_positions(frames: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((frames, dim), |(t, j)| {
        let i = (j / 2) as f64;
        let angle = t as f64 / 10_000f64.powf(2.0 * i / dim as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn linear<'p>(t: &mut Tape<'p>, b: &mut Binder<'p>, x: Var, w: &str, bias: &str) -> Var {
    let wv = b.get(t, w);
    let bv = b.get(t, bias);
    let y = t.matmul(x, wv);
    t.add_row(y, bv)
}

fn layer_norm<'p>(t: &mut Tape<'p>, b: &mut Binder<'p>, x: Var, prefix: &str) -> Var {
    let g = b.get(t, &format!("{prefix}.gamma"));
    let be = b.get(t, &format!("{prefix}.beta"));
    t.layer_norm(x, g, be)
}

/// Inverted dropout with a mask drawn from `(seed, site)`.
fn dropout(t: &mut Tape<'_>, x: Var, p: f64, mode: Mode, site: u64) -> Var {
    let Mode::Train { seed } = mode else { return x };
    if p == 0.0 {
        return x;
    }
    let (r, c) = t.shape(x);
    let mut g = rng::rng_at(seed, &[site]);
    let keep = 1.0 / (1.0 - p);
    let mask = Array2::from_shape_fn((r, c), |_| if g.gen_bool(p) { 0.0 } else { keep });
    t.mul_const(x, mask)
}

/// Front end on a tape: per-bin mean removal, stride-2 convolution, swish,
/// sinusoidal positions.
pub fn frontend_on<'p>(t: &mut Tape<'p>, b: &mut Binder<'p>, x: &FeatureMatrix, cfg: &EncoderConfig) -> Result<Var> {
    if x.frames() < EncoderConfig::MIN_FRAMES {
        return Err(Error::Length(format!("{} frames; the encoder needs at least {}", x.frames(), EncoderConfig::MIN_FRAMES)));
    }
    if x.bins() != cfg.input_dim {
        return Err(Error::Shape(format!("{} mel bins, encoder expects {}", x.bins(), cfg.input_dim)));
    }
    let input = t.constant(x.mean_normalized());
    let frames = t.unfold(input, FRONTEND_KERNEL, 2, 1);
    let h = linear(t, b, frames, "encoder.frontend.weight", "encoder.frontend.bias");
    let h = t.swish(h);
    let pos = sinusoidal_positions(t.shape(h).0, cfg.model_dim);
    Ok(t.add_const(h, &pos))
}

fn feed_forward<'p>(t: &mut Tape<'p>, b: &mut Binder<'p>, x: Var, p: &str, cfg: &EncoderConfig, mode: Mode, site: u64) -> Var {
    let h = layer_norm(t, b, x, &format!("{p}.ln"));
    let h = linear(t, b, h, &format!("{p}.w1"), &format!("{p}.b1"));
    let h = t.swish(h);
    let h = dropout(t, h, cfg.dropout, mode, site);
    let h = linear(t, b, h, &format!("{p}.w2"), &format!("{p}.b2"));
    dropout(t, h, cfg.dropout, mode, site + 1)
}

fn self_attention<'p>(t: &mut Tape<'p>, b: &mut Binder<'p>, x: Var, p: &str, cfg: &EncoderConfig, mode: Mode, site: u64) -> Var {
    let h = layer_norm(t, b, x, &format!("{p}.ln"));
    let q = linear(t, b, h, &format!("{p}.wq"), &format!("{p}.bq"));
    let k = linear(t, b, h, &format!("{p}.wk"), &format!("{p}.bk"));
    let v = linear(t, b, h, &format!("{p}.wv"), &format!("{p}.bv"));
    let dk = cfg.model_dim / cfg.num_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let heads: Vec<Var> = (0..cfg.num_heads)
        .map(|i| {
            let qh = t.slice_cols(q, i * dk, dk);
            let kh = t.slice_cols(k, i * dk, dk);
            let vh = t.slice_cols(v, i * dk, dk);
            let scores = t.matmul_t(qh, kh, false, true);
            let scores = t.scale(scores, scale);
            let attn = t.softmax(scores, 1);
            t.matmul(attn, vh)
        })
        .collect();
    let o = if heads.len() == 1 { heads[0] } else { t.concat_cols(&heads) };
    let o = linear(t, b, o, &format!("{p}.wo"), &format!("{p}.bo"));
    dropout(t, o, cfg.dropout, mode, site)
}

fn convolution<'p>(t: &mut Tape<'p>, b: &mut Binder<'p>, x: Var, p: &str, cfg: &EncoderConfig, mode: Mode, site: u64) -> Var {
    let d = cfg.model_dim;
    let h = layer_norm(t, b, x, &format!("{p}.ln"));
    let h = linear(t, b, h, &format!("{p}.pw1.weight"), &format!("{p}.pw1.bias"));
    let a = t.slice_cols(h, 0, d);
    let gate = t.slice_cols(h, d, d);
    let gate = t.sigmoid(gate);
    let h = t.mul(a, gate);
    let w = b.get(t, &format!("{p}.dw.weight"));
    let bias = b.get(t, &format!("{p}.dw.bias"));
    let h = t.depthwise_conv(h, w, bias);
    let h = layer_norm(t, b, h, &format!("{p}.norm"));
    let h = t.swish(h);
    let h = linear(t, b, h, &format!("{p}.pw2.weight"), &format!("{p}.pw2.bias"));
    dropout(t, h, cfg.dropout, mode, site)
}

/// One Conformer block on a tape (macaron feed-forward halves around
/// attention and convolution, closing layer norm).
pub fn block_on<'p>(t: &mut Tape<'p>, b: &mut Binder<'p>, x: Var, k: usize, cfg: &EncoderConfig, mode: Mode) -> Var {
    let p = block_prefix(k);
    let site = 16 * k as u64;
    let f = feed_forward(t, b, x, &format!("{p}.ff1"), cfg, mode, site);
    let f = t.scale(f, 0.5);
    let x = t.add(x, f);
    let a = self_attention(t, b, x, &format!("{p}.mhsa"), cfg, mode, site + 2);
    let x = t.add(x, a);
    let c = convolution(t, b, x, &format!("{p}.conv"), cfg, mode, site + 3);
    let x = t.add(x, c);
    let f = feed_forward(t, b, x, &format!("{p}.ff2"), cfg, mode, site + 4);
    let f = t.scale(f, 0.5);
    let x = t.add(x, f);
    layer_norm(t, b, x, &format!("{p}.out_ln"))
}

/// Front end plus all blocks on a tape; returns one var per block output.
pub fn encode_on<'p>(t: &mut Tape<'p>, b: &mut Binder<'p>, x: &FeatureMatrix, cfg: &EncoderConfig, mode: Mode) -> Result<Vec<Var>> {
    let mut h = frontend_on(t, b, x, cfg)?;
    let mut taps = Vec::with_capacity(cfg.num_blocks);
    for k in 0..cfg.num_blocks {
        h = block_on(t, b, h, k, cfg, mode);
        taps.push(h);
    }
    Ok(taps)
}

/// Subsampled front-end output, `T' × model_dim`.
pub fn subsample_frontend(x: &FeatureMatrix, cfg: &EncoderConfig, params: &ParamStore) -> Result<Array2<f64>> {
    cfg.validate()?;
    let mut t = Tape::new();
    let mut b = Binder::new(params);
    let h = frontend_on(&mut t, &mut b, x, cfg)?;
    Ok(t.value(h).clone())
}

/// Block `k` applied to `h`.
pub fn conformer_block(h: &Array2<f64>, k: usize, cfg: &EncoderConfig, params: &ParamStore, mode: Mode) -> Result<Array2<f64>> {
    cfg.validate()?;
    if h.ncols() != cfg.model_dim || h.nrows() == 0 {
        return Err(Error::Shape(format!("block input is {}×{}, expected T×{}", h.nrows(), h.ncols(), cfg.model_dim)));
    }
    if k >= cfg.num_blocks {
        return Err(Error::Shape(format!("block {k} of {}", cfg.num_blocks)));
    }
    let mut t = Tape::new();
    let mut b = Binder::new(params);
    let x = t.constant(h.clone());
    let y = block_on(&mut t, &mut b, x, k, cfg, mode);
    Ok(t.value(y).clone())
}

/// All block outputs for one utterance.
pub fn encode_with_taps(x: &FeatureMatrix, cfg: &EncoderConfig, params: &ParamStore, mode: Mode) -> Result<TapSet> {
    cfg.validate()?;
    let mut t = Tape::new();
    let mut b = Binder::new(params);
    let taps = encode_on(&mut t, &mut b, x, cfg, mode)?;
    Ok(TapSet { maps: taps.iter().map(|&v| t.value(v).clone()).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cfg() -> EncoderConfig {
        EncoderConfig {
            input_dim: 6,
            num_blocks: 2,
            model_dim: 8,
            num_heads: 2,
            ff_expansion: 2,
            conv_kernel: 3,
            ..EncoderConfig::default()
        }
    }

    fn params(cfg: &EncoderConfig, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_params(cfg, &mut s, &mut rng::rng(seed));
        s
    }

    fn feats(t: usize, f: usize, seed: u64) -> FeatureMatrix {
        let mut r = rng::rng(seed);
        FeatureMatrix { values: Array2::from_shape_fn((t, f), |_| r.gen_range(-3.0..3.0)), frame_shift: 0.01, speaker_id: "s".into() }
    }

    #[test]
    fn frontend_lengths() {
        let cfg = EncoderConfig { input_dim: 80, num_blocks: 1, ..EncoderConfig::default() };
        let p = params(&cfg, 1);
        assert_eq!(subsample_frontend(&feats(298, 80, 2), &cfg, &p).unwrap().dim(), (149, 64));
        assert_eq!(subsample_frontend(&feats(4, 80, 2), &cfg, &p).unwrap().nrows(), 2);
        assert!(matches!(subsample_frontend(&feats(3, 80, 2), &cfg, &p), Err(Error::Length(_))));
        for t in 4..60 {
            let d = cfg.subsampled_len(2 * t) as i64 - 2 * cfg.subsampled_len(t) as i64;
            assert!(d.abs() <= 1);
        }
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig { num_blocks: 0, ..toy_cfg() }.validate().is_err());
        assert!(EncoderConfig { num_heads: 3, ..toy_cfg() }.validate().is_err());
        assert!(EncoderConfig { conv_kernel: 4, ..toy_cfg() }.validate().is_err());
        assert!(toy_cfg().validate().is_ok());
    }

    #[test]
    fn taps_chain_through_blocks() {
        let cfg = toy_cfg();
        let p = params(&cfg, 3);
        let x = feats(12, 6, 4);
        let taps = encode_with_taps(&x, &cfg, &p, Mode::Eval).unwrap();
        assert_eq!(taps.len(), 2);
        assert!(taps.maps.iter().all(|m| m.dim() == (6, 8)));
        let front = subsample_frontend(&x, &cfg, &p).unwrap();
        assert_eq!(conformer_block(&front, 0, &cfg, &p, Mode::Eval).unwrap(), taps.maps[0]);
        assert_eq!(conformer_block(&taps.maps[0], 1, &cfg, &p, Mode::Eval).unwrap(), taps.maps[1]);
        assert_eq!(encode_with_taps(&x, &cfg, &p, Mode::Eval).unwrap(), taps);
    }

    #[test]
    fn block_shape_errors() {
        let cfg = toy_cfg();
        let p = params(&cfg, 3);
        assert!(matches!(conformer_block(&Array2::zeros((5, 7)), 0, &cfg, &p, Mode::Eval), Err(Error::Shape(_))));
    }

    #[test]
    fn dropout_is_seeded() {
        let cfg = EncoderConfig { dropout: 0.3, ..toy_cfg() };
        let p = params(&cfg, 5);
        let h = feats(6, 8, 6).values;
        let a = conformer_block(&h, 0, &cfg, &p, Mode::Train { seed: 1 }).unwrap();
        let b = conformer_block(&h, 0, &cfg, &p, Mode::Train { seed: 1 }).unwrap();
        let c = conformer_block(&h, 0, &cfg, &p, Mode::Train { seed: 2 }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    /// Central-difference check of d(Σ w ∘ block(h))/dh on a 4×8 input.
    #[test]
    fn block_input_gradient_matches_finite_differences() {
        let cfg = toy_cfg();
        let p = params(&cfg, 7);
        let h0 = feats(4, 8, 8).values;
        let w = feats(4, 8, 9).values;
        let f = |h: &Array2<f64>| (conformer_block(h, 0, &cfg, &p, Mode::Eval).unwrap() * &w).sum();
        let mut t = Tape::new();
        let mut b = Binder::new(&p);
        let x = t.input(h0.clone());
        let y = block_on(&mut t, &mut b, x, 0, &cfg, Mode::Eval);
        let g = t.backward(&[(y, &w)]);
        let analytic = g.get(x).unwrap();
        let eps = 1e-5;
        let mut num = Array2::zeros(h0.raw_dim());
        for i in 0..h0.len() {
            let mut a = h0.clone();
            let mut c = h0.clone();
            a.as_slice_mut().unwrap()[i] += eps;
            c.as_slice_mut().unwrap()[i] -= eps;
            num.as_slice_mut().unwrap()[i] = (f(&a) - f(&c)) / (2.0 * eps);
        }
        let err = (analytic - &num).mapv(|v| v * v).sum().sqrt() / num.mapv(|v| v * v).sum().sqrt();
        assert!(err < 1e-4, "relative error {err}");
    }
}
