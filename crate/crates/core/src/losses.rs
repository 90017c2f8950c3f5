//! Training objectives with closed-form gradients.
//!
//! Every loss takes embeddings as an `N × D` matrix and returns the scalar
//! together with `dL/dz` (and `dL/dW` for the margin classifier). The
//! composites ([`mfcon`], [`combined`], [`am_supcon`]) take *raw* head
//! outputs, L2-normalise them internally, and return gradients with respect
//! to the raw rows.

use ndarray::{Array1, Array2, ArrayView1, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cosines are clamped to this distance from ±1 before `acos`.
pub const COS_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginStyle {
    /// Target logit `s·(cos θ − m)`.
    CosineAdditive,
    /// Target logit `s·cos(θ + m)`.
    AngularAdditive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveKind {
    Supcon,
    Ntxent,
    Triplet,
    Npair,
}

impl std::str::FromStr for ContrastiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supcon" => Ok(Self::Supcon),
            "ntxent" => Ok(Self::Ntxent),
            "triplet" => Ok(Self::Triplet),
            "npair" => Ok(Self::Npair),
            _ => Err(Error::Config(format!("unknown contrastive loss '{s}'"))),
        }
    }
}

impl std::fmt::Display for ContrastiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Supcon => "supcon",
            Self::Ntxent => "ntxent",
            Self::Triplet => "triplet",
            Self::Npair => "npair",
        })
    }
}

/// Which composite drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Margin softmax on the speaker embedding only.
    AmSoftmax,
    /// Margin softmax plus `lambda2` × SupCon on the speaker embedding.
    AmSupcon,
    /// Margin softmax plus `lambda` × mean per-block contrastive term.
    Mfcon,
    /// Margin softmax, `lambda1` × mean per-block term, `lambda2` × SupCon on
    /// the speaker embedding.
    Combined,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "am_softmax" => Ok(Self::AmSoftmax),
            "am_supcon" => Ok(Self::AmSupcon),
            "mfcon" => Ok(Self::Mfcon),
            "combined" => Ok(Self::Combined),
            _ => Err(Error::Config(format!("unknown objective '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub objective: Objective,
    pub margin: f64,
    pub scale: f64,
    pub temperature: f64,
    pub lambda: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub margin_style: MarginStyle,
    pub contrastive_kind: ContrastiveKind,
    /// Hinge margin of the triplet loss (squared-distance units).
    pub triplet_margin: f64,
    /// Divide the SupCon sum by the number of contributing anchors.
    pub supcon_mean_over_anchors: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Combined,
            margin: 0.2,
            scale: 30.0,
            temperature: 0.07,
            lambda: 0.01,
            lambda1: 0.03,
            lambda2: 0.03,
            margin_style: MarginStyle::CosineAdditive,
            contrastive_kind: ContrastiveKind::Supcon,
            triplet_margin: 0.2,
            supcon_mean_over_anchors: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(self.scale > 0.0) {
            return Err(Error::Config("scale must be positive".into()));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Config("margin must be non-negative".into()));
        }
        for (n, v) in [("lambda", self.lambda), ("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{n} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Loss value with the gradient with respect to its embedding input.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct SupconOutput {
    pub value: f64,
    pub grad: Array2<f64>,
    /// Anchors skipped for lacking a positive.
    pub dropped_anchors: usize,
}

#[derive(Debug, Clone)]
pub struct AmSoftmaxOutput {
    pub value: f64,
    pub grad_z: Array2<f64>,
    pub grad_w: Array2<f64>,
}

fn log_sum_exp<'a>(xs: impl Iterator<Item = &'a f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn row_norm(r: ArrayView1<f64>) -> f64 {
    r.dot(&r).sqrt()
}

/// Row-wise L2 normalisation; returns the normalised matrix and row norms.
pub fn l2_normalize_rows(z: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms: Array1<f64> = z.rows().into_iter().map(row_norm).collect();
    let mut out = z.clone();
    for (mut r, &n) in out.rows_mut().into_iter().zip(norms.iter()) {
        r.mapv_inplace(|v| v / n);
    }
    (out, norms)
}

/// Chain rule through `ẑ = z/|z|` given `dL/dẑ`.
pub fn l2_normalize_backward(zhat: &Array2<f64>, norms: &Array1<f64>, dzhat: &Array2<f64>) -> Array2<f64> {
    let mut dz = dzhat.clone();
    for (i, mut r) in dz.rows_mut().into_iter().enumerate() {
        let h = zhat.row(i);
        let proj = h.dot(&dzhat.row(i));
        Zip::from(&mut r).and(&h).for_each(|d, &hv| *d = (*d - hv * proj) / norms[i]);
    }
    dz
}

fn check_rows(z: &Array2<f64>, labels: &[usize]) -> Result<()> {
    if z.nrows() != labels.len() {
        return Err(Error::Shape(format!("{} embeddings but {} labels", z.nrows(), labels.len())));
    }
    Ok(())
}

/// Additive-margin softmax over cosine logits.
///
/// `z` is `N × D` (any norm), `w` is `K × D` class weights (any norm).
pub fn am_softmax(z: &Array2<f64>, w: &Array2<f64>, labels: &[usize], cfg: &LossConfig) -> Result<AmSoftmaxOutput> {
    check_rows(z, labels)?;
    let (n, k) = (z.nrows(), w.nrows());
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if z.ncols() != w.ncols() {
        return Err(Error::Shape(format!("embedding dim {} vs classifier dim {}", z.ncols(), w.ncols())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::LabelOutOfRange { label: bad, classes: k });
    }
    let (zh, zn) = l2_normalize_rows(z);
    let (wh, wn) = l2_normalize_rows(w);
    let cos = zh.dot(&wh.t());
    let (s, m) = (cfg.scale, cfg.margin);
    let mut dcos = Array2::zeros((n, k));
    let mut total = 0.0;
    let lim = 1.0 - COS_CLAMP;
    for i in 0..n {
        let y = labels[i];
        let c = cos[[i, y]];
        let (target, dtarget) = match cfg.margin_style {
            MarginStyle::CosineAdditive => (c - m, 1.0),
            MarginStyle::AngularAdditive => {
                let cc = c.clamp(-lim, lim);
                let sin = (1.0 - cc * cc).sqrt();
                let phi = cc * m.cos() - sin * m.sin();
                let dphi = if c.abs() > lim { 0.0 } else { m.cos() + cc * m.sin() / sin };
                (phi, dphi)
            }
        };
        let logits: Vec<f64> = (0..k).map(|j| if j == y { s * target } else { s * cos[[i, j]] }).collect();
        let lse = log_sum_exp(logits.iter());
        total += lse - logits[y];
        for j in 0..k {
            let p = (logits[j] - lse).exp();
            let dl = (p - if j == y { 1.0 } else { 0.0 }) / n as f64;
            dcos[[i, j]] = s * dl * if j == y { dtarget } else { 1.0 };
        }
    }
    let dzh = dcos.dot(&wh);
    let dwh = dcos.t().dot(&zh);
    Ok(AmSoftmaxOutput {
        value: total / n as f64,
        grad_z: l2_normalize_backward(&zh, &zn, &dzh),
        grad_w: l2_normalize_backward(&wh, &wn, &dwh),
    })
}

/// Given `G = dL/dS` for the similarity matrix `S = z zᵀ / τ`, return `dL/dz`.
fn similarity_backward(g: &Array2<f64>, z: &Array2<f64>, tau: f64) -> Array2<f64> {
    let sym = g + &g.t();
    sym.dot(z) / tau
}

/// Supervised contrastive loss summed over anchors.
///
/// Anchors without a positive are skipped and counted. With
/// `mean_over_anchors` the sum is divided by the number of contributing
/// anchors.
pub fn supcon(z: &Array2<f64>, labels: &[usize], temperature: f64, mean_over_anchors: bool) -> Result<SupconOutput> {
    check_rows(z, labels)?;
    let n = z.nrows();
    let sim = z.dot(&z.t()) / temperature;
    let mut g = Array2::zeros((n, n));
    let mut total = 0.0;
    let mut dropped = 0;
    let mut anchors = 0;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if positives.is_empty() {
            dropped += 1;
            continue;
        }
        anchors += 1;
        let row = sim.row(i);
        let others: Vec<f64> = (0..n).filter(|&a| a != i).map(|a| row[a]).collect();
        let lse = log_sum_exp(others.iter());
        let np = positives.len() as f64;
        total += positives.iter().map(|&p| lse - row[p]).sum::<f64>() / np;
        for a in (0..n).filter(|&a| a != i) {
            g[[i, a]] += (row[a] - lse).exp();
        }
        for &p in &positives {
            g[[i, p]] -= 1.0 / np;
        }
    }
    if dropped > 0 {
        log::debug!("supcon: {dropped} anchors without positives skipped");
    }
    let norm = if mean_over_anchors && anchors > 0 { anchors as f64 } else { 1.0 };
    g /= norm;
    Ok(SupconOutput { value: total / norm, grad: similarity_backward(&g, z, temperature), dropped_anchors: dropped })
}

/// NT-Xent over a perfect matching: `partner[i]` is the augmented view of `i`.
/// Averaged over all anchors.
pub fn ntxent(z: &Array2<f64>, partner: &[usize], temperature: f64) -> Result<LossGrad> {
    let n = z.nrows();
    if partner.len() != n {
        return Err(Error::Layout(format!("{} rows but {} partners", n, partner.len())));
    }
    for (i, &p) in partner.iter().enumerate() {
        if p >= n || p == i || partner[p] != i {
            return Err(Error::Layout(format!("row {i} is not part of a matched pair")));
        }
    }
    let sim = z.dot(&z.t()) / temperature;
    let mut g = Array2::zeros((n, n));
    let mut total = 0.0;
    for i in 0..n {
        let row = sim.row(i);
        let others: Vec<f64> = (0..n).filter(|&a| a != i).map(|a| row[a]).collect();
        let lse = log_sum_exp(others.iter());
        total += lse - row[partner[i]];
        for a in (0..n).filter(|&a| a != i) {
            g[[i, a]] += (row[a] - lse).exp() / n as f64;
        }
        g[[i, partner[i]]] -= 1.0 / n as f64;
    }
    Ok(LossGrad { value: total / n as f64, grad: similarity_backward(&g, z, temperature) })
}

/// Batch-all triplet loss on squared Euclidean distance. The mean runs over
/// triples with a positive hinge; the loss is 0 when none are active.
pub fn triplet(z: &Array2<f64>, labels: &[usize], margin: f64) -> Result<LossGrad> {
    check_rows(z, labels)?;
    let n = z.nrows();
    let gram = z.dot(&z.t());
    let d = |a: usize, b: usize| gram[[a, a]] + gram[[b, b]] - 2.0 * gram[[a, b]];
    let mut any_valid = false;
    let mut active: Vec<(usize, usize, usize)> = Vec::new();
    let mut total = 0.0;
    for a in 0..n {
        for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
            let dap = d(a, p);
            for q in (0..n).filter(|&q| labels[q] != labels[a]) {
                any_valid = true;
                let h = dap - d(a, q) + margin;
                if h > 0.0 {
                    total += h;
                    active.push((a, p, q));
                }
            }
        }
    }
    if !any_valid {
        return Err(Error::NoValidTriple);
    }
    let mut grad = Array2::zeros(z.raw_dim());
    if active.is_empty() {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let c = 1.0 / active.len() as f64;
    for &(a, p, q) in &active {
        let za = z.row(a).to_owned();
        let zp = z.row(p).to_owned();
        let zq = z.row(q).to_owned();
        grad.row_mut(a).scaled_add(2.0 * c, &(&zq - &zp));
        grad.row_mut(p).scaled_add(-2.0 * c, &(&za - &zp));
        grad.row_mut(q).scaled_add(2.0 * c, &(&za - &zq));
    }
    Ok(LossGrad { value: total * c, grad })
}

/// Multi-class N-pair loss. `pairs` lists (anchor, positive) rows, one per
/// class; each anchor is scored against every listed positive.
pub fn npair(z: &Array2<f64>, labels: &[usize], pairs: &[(usize, usize)]) -> Result<LossGrad> {
    check_rows(z, labels)?;
    let n = z.nrows();
    let mut seen = std::collections::HashSet::new();
    for &(a, p) in pairs {
        if a >= n || p >= n || a == p {
            return Err(Error::Layout(format!("bad pair ({a}, {p})")));
        }
        if labels[a] != labels[p] {
            return Err(Error::Layout(format!("pair ({a}, {p}) mixes classes")));
        }
        if !seen.insert(labels[a]) {
            return Err(Error::Layout(format!("class {} has more than one anchor", labels[a])));
        }
    }
    let m = pairs.len();
    let mut grad = Array2::zeros(z.raw_dim());
    if m == 0 {
        return Err(Error::Layout("no anchor/positive pairs".into()));
    }
    let mut total = 0.0;
    let mut g = Array2::<f64>::zeros((m, m));
    for (i, &(ai, _)) in pairs.iter().enumerate() {
        let logits: Vec<f64> = pairs.iter().map(|&(_, pj)| z.row(ai).dot(&z.row(pj))).collect();
        let lse = log_sum_exp(logits.iter());
        total += lse - logits[i];
        for j in 0..m {
            g[[i, j]] = ((logits[j] - lse).exp() - if i == j { 1.0 } else { 0.0 }) / m as f64;
        }
    }
    for (i, &(ai, _)) in pairs.iter().enumerate() {
        for (j, &(_, pj)) in pairs.iter().enumerate() {
            let gij = g[[i, j]];
            let (zai, zpj) = (z.row(ai).to_owned(), z.row(pj).to_owned());
            grad.row_mut(ai).scaled_add(gij, &zpj);
            grad.row_mut(pj).scaled_add(gij, &zai);
        }
    }
    Ok(LossGrad { value: total / m as f64, grad })
}

/// Row structure of a training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLayout {
    pub labels: Vec<usize>,
    /// Augmented counterpart of each row, when the batch is paired.
    pub partner: Option<Vec<usize>>,
}

impl BatchLayout {
    pub fn unpaired(labels: Vec<usize>) -> Self {
        Self { labels, partner: None }
    }

    /// Layout of a doubled batch: rows `0..B` originals, `B..2B` their views.
    pub fn doubled(original_labels: &[usize]) -> Self {
        let b = original_labels.len();
        let labels = original_labels.iter().chain(original_labels).copied().collect();
        let partner = (0..2 * b).map(|i| if i < b { i + b } else { i - b }).collect();
        Self { labels, partner: Some(partner) }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// One (anchor, positive) per class: the first row of each class that has
    /// a partner, paired with it.
    pub fn npair_pairs(&self) -> Result<Vec<(usize, usize)>> {
        let partner = self.partner.as_ref().ok_or_else(|| Error::Layout("n-pair loss needs a paired batch".into()))?;
        let mut seen = std::collections::HashSet::new();
        Ok((0..self.len()).filter(|&i| seen.insert(self.labels[i])).map(|i| (i, partner[i])).collect())
    }
}

/// Apply the configured contrastive loss to unit-norm rows.
pub fn contrastive(z: &Array2<f64>, layout: &BatchLayout, cfg: &LossConfig) -> Result<LossGrad> {
    match cfg.contrastive_kind {
        ContrastiveKind::Supcon => {
            let out = supcon(z, &layout.labels, cfg.temperature, cfg.supcon_mean_over_anchors)?;
            Ok(LossGrad { value: out.value, grad: out.grad })
        }
        ContrastiveKind::Ntxent => {
            let partner = layout.partner.as_ref().ok_or_else(|| Error::Layout("NT-Xent needs a paired batch".into()))?;
            ntxent(z, partner, cfg.temperature)
        }
        ContrastiveKind::Triplet => triplet(z, &layout.labels, cfg.triplet_margin),
        ContrastiveKind::Npair => npair(z, &layout.labels, &layout.npair_pairs()?),
    }
}

/// Contrastive term on raw rows: normalise, score, chain back.
fn contrastive_raw(z: &Array2<f64>, layout: &BatchLayout, cfg: &LossConfig) -> Result<LossGrad> {
    let (zh, norms) = l2_normalize_rows(z);
    let out = contrastive(&zh, layout, cfg)?;
    Ok(LossGrad { value: out.value, grad: l2_normalize_backward(&zh, &norms, &out.grad) })
}

fn supcon_raw(z: &Array2<f64>, layout: &BatchLayout, cfg: &LossConfig) -> Result<LossGrad> {
    let (zh, norms) = l2_normalize_rows(z);
    let out = supcon(&zh, &layout.labels, cfg.temperature, cfg.supcon_mean_over_anchors)?;
    Ok(LossGrad { value: out.value, grad: l2_normalize_backward(&zh, &norms, &out.grad) })
}

/// Inputs of the composite objectives: raw per-block embeddings, the raw
/// speaker embedding and the classifier weights.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveInput<'a> {
    pub taps: &'a [Array2<f64>],
    pub speaker: &'a Array2<f64>,
    pub classifier: &'a Array2<f64>,
    pub layout: &'a BatchLayout,
}

/// Value and gradients of a composite objective, with its parts.
#[derive(Debug, Clone, Serialize)]
pub struct Breakdown {
    pub total: f64,
    pub ams: f64,
    /// Per-block contrastive values (empty when the objective has none).
    pub contrastive: Vec<f64>,
    /// SupCon on the speaker embedding, when the objective has it.
    pub speaker_supcon: Option<f64>,
    /// Weight on the mean per-block term.
    pub block_weight: f64,
    /// Weight on the speaker-embedding SupCon term.
    pub speaker_weight: f64,
    #[serde(skip)]
    pub grad_taps: Vec<Array2<f64>>,
    #[serde(skip)]
    pub grad_speaker: Array2<f64>,
    #[serde(skip)]
    pub grad_classifier: Array2<f64>,
}

impl Breakdown {
    pub fn mean_contrastive(&self) -> f64 {
        if self.contrastive.is_empty() {
            0.0
        } else {
            self.contrastive.iter().sum::<f64>() / self.contrastive.len() as f64
        }
    }

    /// `ams + w₁·mean(contrastive) + w₂·speaker_supcon`, the expression every
    /// composite uses for its total.
    pub fn recombine(&self) -> f64 {
        let mut t = self.ams;
        if self.block_weight != 0.0 {
            t += self.block_weight * self.mean_contrastive();
        }
        if self.speaker_weight != 0.0 {
            t += self.speaker_weight * self.speaker_supcon.unwrap_or(0.0);
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.grad_speaker.iter().all(|v| v.is_finite())
            && self.grad_classifier.iter().all(|v| v.is_finite())
            && self.grad_taps.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

fn composite(input: &ObjectiveInput<'_>, cfg: &LossConfig, block_weight: Option<f64>, speaker_weight: Option<f64>) -> Result<Breakdown> {
    cfg.validate()?;
    let layout = input.layout;
    let ams = am_softmax(input.speaker, input.classifier, &layout.labels, cfg)?;
    let mut grad_speaker = ams.grad_z;
    let mut grad_taps: Vec<Array2<f64>> = input.taps.iter().map(|t| Array2::zeros(t.raw_dim())).collect();
    let mut contrastive_vals = Vec::new();
    if let Some(wt) = block_weight {
        if input.taps.is_empty() {
            return Err(Error::Shape("no block embeddings".into()));
        }
        let l = input.taps.len() as f64;
        for (tap, g) in input.taps.iter().zip(grad_taps.iter_mut()) {
            check_rows(tap, &layout.labels)?;
            let c = contrastive_raw(tap, layout, cfg)?;
            contrastive_vals.push(c.value);
            if wt != 0.0 {
                g.scaled_add(wt / l, &c.grad);
            }
        }
    }
    let mut speaker_supcon = None;
    if let Some(wt) = speaker_weight {
        let c = supcon_raw(input.speaker, layout, cfg)?;
        speaker_supcon = Some(c.value);
        if wt != 0.0 {
            grad_speaker.scaled_add(wt, &c.grad);
        }
    }
    let mut out = Breakdown {
        total: 0.0,
        ams: ams.value,
        contrastive: contrastive_vals,
        speaker_supcon,
        block_weight: block_weight.unwrap_or(0.0),
        speaker_weight: speaker_weight.unwrap_or(0.0),
        grad_taps,
        grad_speaker,
        grad_classifier: ams.grad_w,
    };
    out.total = out.recombine();
    Ok(out)
}

/// Margin softmax alone, in composite form.
pub fn am_only(input: &ObjectiveInput<'_>, cfg: &LossConfig) -> Result<Breakdown> {
    composite(input, cfg, None, None)
}

/// `am_softmax + λ · (1/L) Σ_i contrastive(block_i)`.
pub fn mfcon(input: &ObjectiveInput<'_>, cfg: &LossConfig) -> Result<Breakdown> {
    composite(input, cfg, Some(cfg.lambda), None)
}

/// `am_softmax + λ2 · supcon(speaker)`.
pub fn am_supcon(input: &ObjectiveInput<'_>, cfg: &LossConfig) -> Result<Breakdown> {
    composite(input, cfg, None, Some(cfg.lambda2))
}

/// `am_softmax + λ1 · (1/L) Σ_i supcon(block_i) + λ2 · supcon(speaker)`.
///
/// The per-block term follows `contrastive_kind` like [`mfcon`].
pub fn combined(input: &ObjectiveInput<'_>, cfg: &LossConfig) -> Result<Breakdown> {
    composite(input, cfg, Some(cfg.lambda1), Some(cfg.lambda2))
}

pub fn objective(input: &ObjectiveInput<'_>, cfg: &LossConfig) -> Result<Breakdown> {
    match cfg.objective {
        Objective::AmSoftmax => am_only(input, cfg),
        Objective::AmSupcon => am_supcon(input, cfg),
        Objective::Mfcon => mfcon(input, cfg),
        Objective::Combined => combined(input, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    #[test]
    fn margin_free_am_softmax_is_cosine_cross_entropy() {
        let z = array![[1.0, 2.0, 0.5], [-1.0, 0.3, 0.2]];
        let w = array![[0.5, 0.1, 0.0], [0.0, 1.0, -1.0], [1.0, 1.0, 1.0]];
        let c = LossConfig { margin: 0.0, scale: 1.0, ..cfg() };
        let got = am_softmax(&z, &w, &[2, 0], &c).unwrap().value;
        let (zh, _) = l2_normalize_rows(&z);
        let (wh, _) = l2_normalize_rows(&w);
        let cos = zh.dot(&wh.t());
        let ce = |i: usize, y: usize| {
            let z: f64 = cos.row(i).iter().map(|v| v.exp()).sum();
            -(cos[[i, y]].exp() / z).ln()
        };
        assert!((got - 0.5 * (ce(0, 2) + ce(1, 0))).abs() < 1e-12);
    }

    #[test]
    fn am_softmax_closed_form() {
        let z = array![[1.0, 0.0]];
        let w = array![[1.0, 0.0], [-1.0, 0.0]];
        let got = am_softmax(&z, &w, &[0], &cfg()).unwrap().value;
        let expected = (1.0 + (-54.0f64).exp()).ln();
        assert!((got - expected).abs() < 1e-15);
        assert!(got < 1e-20);
    }

    #[test]
    fn am_softmax_rejects_bad_label() {
        let z = array![[1.0, 0.0]];
        let w = array![[1.0, 0.0]];
        assert!(matches!(am_softmax(&z, &w, &[1], &cfg()), Err(Error::LabelOutOfRange { label: 1, classes: 1 })));
    }

    #[test]
    fn supcon_degenerate_and_closed_form() {
        let z = array![[0.6, 0.8], [1.0, 0.0]];
        let out = supcon(&z, &[3, 3], 0.07, false).unwrap();
        assert_eq!(out.value, 0.0);

        let z = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        let out = supcon(&z, &[0, 0, 1, 1], 1.0, false).unwrap();
        let e = std::f64::consts::E;
        let per = -(e / (e + 2.0)).ln();
        assert!((per - 0.551445).abs() < 1e-6);
        assert!((out.value - 4.0 * per).abs() < 1e-12);
        assert!((out.value - 2.205779).abs() < 1e-6);
    }

    #[test]
    fn supcon_skips_anchors_without_positives() {
        let z = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let out = supcon(&z, &[0, 0, 1], 1.0, false).unwrap();
        assert_eq!(out.dropped_anchors, 1);
        let mean = supcon(&z, &[0, 0, 1], 1.0, true).unwrap();
        assert!((mean.value * 2.0 - out.value).abs() < 1e-12);
    }

    #[test]
    fn ntxent_cases() {
        let z = array![[0.6, 0.8], [1.0, 0.0]];
        assert_eq!(ntxent(&z, &[1, 0], 0.5).unwrap().value, 0.0);
        let z = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        let out = ntxent(&z, &[1, 0, 3, 2], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((out.value - -(e / (e + 2.0)).ln()).abs() < 1e-12);
        assert!(ntxent(&z, &[1, 0, 3, 3], 1.0).is_err());
        assert!(ntxent(&z, &[1, 2, 0, 3], 1.0).is_err());
    }

    #[test]
    fn triplet_cases() {
        let z = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        let out = triplet(&z, &[0, 0, 1], 0.2).unwrap();
        // both anchors see d(a,p) = 2 and d(a,n) ∈ {0, 2}
        let terms = [2.0 + 0.2, 2.0 - 2.0 + 0.2];
        assert!((out.value - (terms[0] + terms[1]) / 2.0).abs() < 1e-12);

        // satisfied margin
        let z = array![[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]];
        assert_eq!(triplet(&z, &[0, 0, 1], 0.2).unwrap().value, 0.0);
        assert!(matches!(triplet(&z, &[0, 1, 2], 0.2), Err(Error::NoValidTriple)));
    }

    #[test]
    fn npair_cases() {
        let z = array![[0.6, 0.8], [0.6, 0.8]];
        assert_eq!(npair(&z, &[0, 0], &[(0, 1)]).unwrap().value, 0.0);
        let z = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        let out = npair(&z, &[0, 0, 1, 1], &[(0, 1), (2, 3)]).unwrap();
        let e = std::f64::consts::E;
        assert!((out.value - -(e / (e + 1.0)).ln()).abs() < 1e-12);
        assert!((out.value - 0.313262).abs() < 1e-6);
        assert!(npair(&z, &[0, 0, 0, 0], &[(0, 1), (2, 3)]).is_err());
    }

    #[test]
    fn doubled_layout() {
        let l = BatchLayout::doubled(&[4, 7, 4]);
        assert_eq!(l.labels, vec![4, 7, 4, 4, 7, 4]);
        assert_eq!(l.partner.as_ref().unwrap(), &vec![3, 4, 5, 0, 1, 2]);
        assert_eq!(l.npair_pairs().unwrap(), vec![(0, 3), (1, 4)]);
    }
}
