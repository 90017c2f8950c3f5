//! Batch construction, learning-rate schedule, training loop and evaluation.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array1;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::Mode;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::features::{self, AugmentConfig, AugmentSource, Fbank, FeatureMatrix, Waveform};
use crate::losses::{BatchLayout, Breakdown, LossConfig};
use crate::metrics::{self, Trial, TrialScoreSet};
use crate::model::{Model, ModelConfig};
use crate::params::{AdamConfig, AdamState};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Original utterances per batch; the augmented copies double it.
    pub batch_size: usize,
    pub lr: f64,
    pub lr_halve_every: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Evaluate every this many steps (0: only after the last epoch).
    pub eval_every: usize,
    pub crop_seconds: f64,
    pub augment: AugmentConfig,
    pub adam: AdamConfig,
    pub exec: Execution,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            lr: 1e-3,
            lr_halve_every: 5,
            epochs: 30,
            seed: 0,
            eval_every: 0,
            crop_seconds: 3.0,
            augment: AugmentConfig::default(),
            adam: AdamConfig::default(),
            exec: Execution::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.lr_halve_every == 0 {
            return Err(Error::Config("lr_halve_every must be at least 1".into()));
        }
        if !(self.crop_seconds > 0.0) {
            return Err(Error::Config("crop_seconds must be positive".into()));
        }
        self.loss.validate()
    }
}

/// `lr₀ · 0.5^⌊epoch / halve_every⌋`, epochs counted from zero.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * 0.5f64.powi((epoch / cfg.lr_halve_every) as i32)
}

/// Labelled utterances with a dense class index per speaker.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub utterances: Vec<Waveform>,
    pub labels: Vec<usize>,
    /// Speaker id of each class index, sorted.
    pub classes: Vec<String>,
}

impl Dataset {
    pub fn new(utterances: Vec<Waveform>) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::Length("dataset has no utterances".into()));
        }
        let index: BTreeMap<&str, usize> = utterances.iter().map(|w| (w.speaker_id.as_str(), 0)).collect();
        let classes: Vec<String> = index.keys().map(|s| s.to_string()).collect();
        let lookup: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let labels = utterances.iter().map(|w| lookup[w.speaker_id.as_str()]).collect();
        Ok(Self { utterances, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

/// A doubled training batch: originals first, then their augmented copies.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub feats: Vec<FeatureMatrix>,
    pub labels: Vec<usize>,
    pub is_augmented: Vec<bool>,
    pub layout: BatchLayout,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.feats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feats.is_empty()
    }
}

/// Everything needed to turn waveforms into training rows.
#[derive(Debug, Clone)]
pub struct BatchBuilder {
    pub fbank: Fbank,
    pub augment: AugmentConfig,
    pub source: AugmentSource,
    pub crop_seconds: f64,
}

impl BatchBuilder {
    pub fn new(fbank: Fbank, cfg: &TrainConfig, source: AugmentSource) -> Self {
        Self { fbank, augment: cfg.augment.clone(), source, crop_seconds: cfg.crop_seconds }
    }

    /// Crop each utterance, extract features, and append an augmented copy of
    /// every crop. Deterministic in `seed`.
    pub fn build(&self, utterances: &[&Waveform], labels: &[usize], seed: u64, exec: Execution) -> Result<Batch> {
        if utterances.is_empty() {
            return Err(Error::Length("batch has no utterances".into()));
        }
        if utterances.len() != labels.len() {
            return Err(Error::Shape(format!("{} utterances for {} labels", utterances.len(), labels.len())));
        }
        let b = utterances.len();
        let rows = exec::map_range(exec, 2 * b, |r| -> Result<FeatureMatrix> {
            let i = r % b;
            let crop = features::random_crop(utterances[i], self.crop_seconds, rng::derive(seed, &[i as u64, 0]))?;
            if r < b {
                self.fbank.extract(&crop)
            } else {
                let spec = self.source.sample(crop.sample_rate, &self.augment, rng::derive(seed, &[i as u64, 1]));
                self.fbank.extract(&features::augment(&crop, &spec)?)
            }
        });
        let feats = rows.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            feats,
            labels: labels.iter().chain(labels).copied().collect(),
            is_augmented: (0..2 * b).map(|r| r >= b).collect(),
            layout: BatchLayout::doubled(labels),
        })
    }
}

/// Features of every utterance a trial list touches, computed once.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub trials: Vec<Trial>,
    pub ids: Vec<String>,
    pub feats: Vec<FeatureMatrix>,
}

impl EvalSet {
    pub fn new(trials: Vec<Trial>, utterances: &[Waveform], fbank: &Fbank, exec: Execution) -> Result<Self> {
        let by_id: HashMap<&str, &Waveform> = utterances.iter().map(|w| (w.utterance_id.as_str(), w)).collect();
        let mut ids: Vec<String> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut missing = std::collections::BTreeSet::new();
        for t in &trials {
            for id in [&t.enroll_utt, &t.test_utt] {
                if !by_id.contains_key(id.as_str()) {
                    missing.insert(id.clone());
                } else if seen.insert(id.clone()) {
                    ids.push(id.clone());
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingIds(missing.into_iter().collect()));
        }
        let feats = exec::map(exec, &ids, |_, id| fbank.extract(by_id[id.as_str()])).into_iter().collect::<Result<Vec<_>>>()?;
        Ok(Self { trials, ids, feats })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub eer: f64,
    pub eer_threshold: f64,
    pub mindcf: f64,
    #[serde(skip)]
    pub scores: TrialScoreSet,
}

/// Embed each unique utterance once (full length, eval mode), score every
/// trial and compute EER and minDCF.
pub fn evaluate(model: &Model, set: &EvalSet, exec: Execution) -> Result<EvalResult> {
    let embeddings = model.embed_all(&set.feats, exec)?;
    let store: HashMap<String, Array1<f64>> = set.ids.iter().cloned().zip(embeddings).collect();
    let scores = metrics::score_trials(&set.trials, &store, exec)?;
    let (eer, eer_threshold) = metrics::compute_eer(&scores)?;
    let (mindcf, _) = metrics::compute_mindcf(&scores, metrics::P_TARGET, 1.0, 1.0)?;
    Ok(EvalResult { eer, eer_threshold, mindcf, scores })
}

/// One JSON-lines record.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: usize,
        epoch: usize,
        lr: f64,
        lambda: f64,
        lambda1: f64,
        lambda2: f64,
        #[serde(flatten)]
        loss: Breakdown,
    },
    Eval {
        step: usize,
        epoch: usize,
        #[serde(flatten)]
        result: EvalResult,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainSummary {
    /// Total loss of every step, in order.
    pub losses: Vec<f64>,
    pub steps: usize,
    pub final_eval: Option<EvalResult>,
}

/// Model plus optimizer state and the batch pipeline.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub opt: AdamState,
    pub cfg: TrainConfig,
    pub builder: BatchBuilder,
    pub step: usize,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, fbank: Fbank, source: AugmentSource) -> Result<Self> {
        cfg.validate()?;
        if fbank.config().n_mels != model_cfg.encoder.input_dim {
            return Err(Error::Config(format!(
                "fbank produces {} bins but the encoder expects {}",
                fbank.config().n_mels,
                model_cfg.encoder.input_dim
            )));
        }
        let model = Model::new(model_cfg, rng::derive(cfg.seed, &[0xC0DE]))?;
        let opt = AdamState::new(&model.params);
        Ok(Self { model, opt, builder: BatchBuilder::new(fbank, &cfg, source), cfg, step: 0 })
    }

    /// Forward, backward and one Adam update at learning rate `lr`.
    pub fn train_step(&mut self, batch: &Batch, lr: f64, dropout_seed: u64) -> Result<Breakdown> {
        let out =
            self.model.forward_backward(&batch.feats, &batch.layout, &self.cfg.loss, Mode::Train { seed: dropout_seed }, self.cfg.exec)?;
        let grads_finite = out.grads.flatten(&self.model.params).iter().all(|g| g.is_finite());
        if !out.breakdown.is_finite() || !grads_finite {
            let detail = serde_json::to_string(&out.breakdown).unwrap_or_else(|_| format!("{:?}", out.breakdown.total));
            return Err(Error::NonFinite { step: self.step, detail: format!("{detail} (gradients finite: {grads_finite})") });
        }
        self.opt.update(&mut self.model.params, &out.grads, lr, &self.cfg.adam);
        self.model.apply_bn_updates(&out.bn_updates);
        self.step += 1;
        Ok(out.breakdown)
    }

    /// Shuffled batches of one epoch, as dataset indices.
    pub fn epoch_order(&self, data: &Dataset, epoch: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut rng::rng_at(self.cfg.seed, &[1, epoch as u64]));
        idx.chunks(self.cfg.batch_size).map(|c| c.to_vec()).collect()
    }

    pub fn build_batch(&self, data: &Dataset, indices: &[usize], seed: u64) -> Result<Batch> {
        let utts: Vec<&Waveform> = indices.iter().map(|&i| &data.utterances[i]).collect();
        let labels: Vec<usize> = indices.iter().map(|&i| data.labels[i]).collect();
        self.builder.build(&utts, &labels, seed, self.cfg.exec)
    }

    /// Run every configured epoch, reporting each step (and evaluation, when
    /// an eval set is given) to `log`.
    pub fn fit(&mut self, data: &Dataset, eval: Option<&EvalSet>, log: &mut dyn FnMut(&LogRecord) -> Result<()>) -> Result<TrainSummary> {
        if data.num_classes() > self.model.cfg.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} speakers but the classifier has {} classes",
                data.num_classes(),
                self.model.cfg.num_classes
            )));
        }
        let mut summary = TrainSummary::default();
        for epoch in 0..self.cfg.epochs {
            let lr = lr_schedule(epoch, &self.cfg);
            for (b, indices) in self.epoch_order(data, epoch).into_iter().enumerate() {
                let seed = rng::derive(self.cfg.seed, &[2, epoch as u64, b as u64]);
                let batch = self.build_batch(data, &indices, seed)?;
                let loss = self.train_step(&batch, lr, rng::derive(seed, &[3]))?;
                summary.losses.push(loss.total);
                log(&LogRecord::Step {
                    step: self.step,
                    epoch,
                    lr,
                    lambda: self.cfg.loss.lambda,
                    lambda1: self.cfg.loss.lambda1,
                    lambda2: self.cfg.loss.lambda2,
                    loss,
                })?;
                if let Some(set) = eval {
                    if self.cfg.eval_every > 0 && self.step % self.cfg.eval_every == 0 {
                        let result = evaluate(&self.model, set, self.cfg.exec)?;
                        log(&LogRecord::Eval { step: self.step, epoch, result })?;
                    }
                }
            }
        }
        summary.steps = self.step;
        if let Some(set) = eval {
            let result = evaluate(&self.model, set, self.cfg.exec)?;
            log(&LogRecord::Eval { step: self.step, epoch: self.cfg.epochs, result: result.clone() })?;
            summary.final_eval = Some(result);
        }
        Ok(summary)
    }
}
