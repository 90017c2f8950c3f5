//! Full network: encoder, per-block heads, aggregated head and the margin
//! classifier, with a batched forward/backward pass.
//!
//! The pass is split where batch norm couples samples. Everything up to the
//! pooled statistics runs per utterance (one tape each, data-parallel);
//! batch norm, projections and the loss run on one batch-level tape. The
//! backward pass mirrors this: the batch tape yields gradients of the pooled
//! rows, which seed the per-utterance tapes.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderConfig, Mode, TapSet};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::features::FeatureMatrix;
use crate::heads::{self, BnUpdate, HeadConfig};
use crate::losses::{self, BatchLayout, Breakdown, LossConfig, Objective, ObjectiveInput};
use crate::params::{init, Binder, GradStore, ParamStore};
use crate::rng;
use crate::tape::{Tape, Var};

pub const CLASSIFIER: &str = "classifier.weight";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()?;
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

/// Result of [`Model::forward_backward`].
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub breakdown: Breakdown,
    pub grads: GradStore,
    pub bn_updates: Vec<BnUpdate>,
}

/// Forward-only outputs of a batch.
#[derive(Debug, Clone)]
pub struct BatchOutputs {
    /// Raw per-block head outputs, one `N × embed_dim` matrix per block.
    pub taps: Vec<Array2<f64>>,
    /// Raw speaker embeddings, `N × speaker_dim`.
    pub speaker: Array2<f64>,
}

struct SampleGraph<'p> {
    tape: Tape<'p>,
    binder: Binder<'p>,
    pooled: Vec<Var>,
    aggregate: Var,
}

impl Model {
    /// Freshly initialised network.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::rng(seed);
        let mut params = ParamStore::new();
        encoder::init_params(&cfg.encoder, &mut params, &mut r);
        heads::init_params(&cfg.encoder, &cfg.head, &mut params, &mut r);
        params.insert(CLASSIFIER, init::normal(&mut r, cfg.num_classes, cfg.head.speaker_dim, 1.0));
        Ok(Self { cfg, params })
    }

    pub fn classifier(&self) -> &Array2<f64> {
        self.params.get(CLASSIFIER).expect("classifier present")
    }

    fn sample_graph<'p>(&'p self, x: &FeatureMatrix, mode: Mode, with_blocks: bool) -> Result<SampleGraph<'p>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let taps = encoder::encode_on(&mut tape, &mut binder, x, &self.cfg.encoder, mode)?;
        let pooled = if with_blocks {
            taps.iter().enumerate().map(|(k, &tap)| heads::pool_on(&mut tape, &mut binder, tap, &self.cfg.head.pooling_prefix(k))).collect()
        } else {
            Vec::new()
        };
        let aggregate = heads::aggregate_pool_on(&mut tape, &mut binder, &taps);
        Ok(SampleGraph { tape, binder, pooled, aggregate })
    }

    fn sample_mode(mode: Mode, row: usize) -> Mode {
        match mode {
            Mode::Train { seed } => Mode::Train { seed: rng::derive(seed, &[row as u64]) },
            Mode::Eval => Mode::Eval,
        }
    }

    /// Stack one pooled var per sample into a batch-level leaf.
    fn stack(graphs: &[SampleGraph<'_>], pick: impl Fn(&SampleGraph<'_>) -> Var) -> Array2<f64> {
        let rows: Vec<_> = graphs.iter().map(|g| g.tape.value(pick(g)).view()).collect();
        ndarray::concatenate(Axis(0), &rows).expect("pooled widths agree")
    }

    /// Forward pass and gradient of the configured objective.
    pub fn forward_backward(
        &self,
        feats: &[FeatureMatrix],
        layout: &BatchLayout,
        loss: &LossConfig,
        mode: Mode,
        exec: Execution,
    ) -> Result<StepOutput> {
        if feats.len() != layout.len() || feats.is_empty() {
            return Err(Error::Shape(format!("{} inputs for {} labels", feats.len(), layout.len())));
        }
        // Objectives without a per-block term never look at the block heads.
        let with_blocks = matches!(loss.objective, Objective::Mfcon | Objective::Combined);
        let graphs: Vec<SampleGraph<'_>> = exec::map(exec, feats, |i, x| self.sample_graph(x, Self::sample_mode(mode, i), with_blocks))
            .into_iter()
            .collect::<Result<_>>()?;

        let l = if with_blocks { self.cfg.encoder.num_blocks } else { 0 };
        let mut bt = Tape::new();
        let mut bb = Binder::new(&self.params);
        let mut bn_updates = Vec::new();
        let mut pooled_leaves = Vec::with_capacity(l);
        let mut tap_out = Vec::with_capacity(l);
        for k in 0..l {
            let leaf = bt.input(Self::stack(&graphs, |g| g.pooled[k]));
            let (y, up) = heads::project_on(&mut bt, &mut bb, leaf, &self.cfg.head.projection_prefix(k), mode);
            pooled_leaves.push(leaf);
            tap_out.push(y);
            bn_updates.extend(up);
        }
        let agg_leaf = bt.input(Self::stack(&graphs, |g| g.aggregate));
        let (spk, up) = heads::project_on(&mut bt, &mut bb, agg_leaf, "mfa", mode);
        bn_updates.extend(up);

        let tap_values: Vec<Array2<f64>> = tap_out.iter().map(|&v| bt.value(v).clone()).collect();
        let speaker = bt.value(spk).clone();
        let breakdown =
            losses::objective(&ObjectiveInput { taps: &tap_values, speaker: &speaker, classifier: self.classifier(), layout }, loss)?;

        let mut seeds: Vec<(Var, &Array2<f64>)> = tap_out.iter().copied().zip(breakdown.grad_taps.iter()).collect();
        seeds.push((spk, &breakdown.grad_speaker));
        let mut bgrads = bt.backward(&seeds);
        let mut grads = GradStore::new(&self.params);
        bb.collect(&bgrads, &mut grads);
        let cls = self.params.index_of(CLASSIFIER).expect("classifier present");
        grads.add(cls, &breakdown.grad_classifier);

        let d_pooled: Vec<Array2<f64>> = pooled_leaves.iter().map(|&v| bgrads.take(v).expect("pooled rows feed the loss")).collect();
        let d_agg = bgrads.take(agg_leaf).expect("aggregate feeds the loss");

        let per_sample: Vec<GradStore> = exec::map(exec, &graphs, |i, g| {
            let rows: Vec<Array2<f64>> = d_pooled.iter().map(|d| d.row(i).insert_axis(Axis(0)).to_owned()).collect();
            let agg_row = d_agg.row(i).insert_axis(Axis(0)).to_owned();
            let mut seeds: Vec<(Var, &Array2<f64>)> = g.pooled.iter().copied().zip(rows.iter()).collect();
            seeds.push((g.aggregate, &agg_row));
            let sg = g.tape.backward(&seeds);
            let mut out = GradStore::new(&self.params);
            g.binder.collect(&sg, &mut out);
            out
        });
        for g in &per_sample {
            grads.merge(g);
        }
        Ok(StepOutput { breakdown, grads, bn_updates })
    }

    /// Forward pass only; returns raw head outputs for the batch.
    pub fn forward(&self, feats: &[FeatureMatrix], mode: Mode, exec: Execution) -> Result<BatchOutputs> {
        if feats.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let graphs: Vec<SampleGraph<'_>> =
            exec::map(exec, feats, |i, x| self.sample_graph(x, Self::sample_mode(mode, i), true)).into_iter().collect::<Result<_>>()?;
        let mut bt = Tape::new();
        let mut bb = Binder::new(&self.params);
        let taps = (0..self.cfg.encoder.num_blocks)
            .map(|k| {
                let leaf = bt.constant(Self::stack(&graphs, |g| g.pooled[k]));
                let (y, _) = heads::project_on(&mut bt, &mut bb, leaf, &self.cfg.head.projection_prefix(k), mode);
                bt.value(y).clone()
            })
            .collect();
        let leaf = bt.constant(Self::stack(&graphs, |g| g.aggregate));
        let (y, _) = heads::project_on(&mut bt, &mut bb, leaf, "mfa", mode);
        Ok(BatchOutputs { taps, speaker: bt.value(y).clone() })
    }

    /// Objective value without gradients (finite-difference checks, logging).
    pub fn loss(&self, feats: &[FeatureMatrix], layout: &BatchLayout, loss: &LossConfig, mode: Mode, exec: Execution) -> Result<f64> {
        let out = self.forward(feats, mode, exec)?;
        let b = losses::objective(&ObjectiveInput { taps: &out.taps, speaker: &out.speaker, classifier: self.classifier(), layout }, loss)?;
        Ok(b.total)
    }

    /// Eval-mode speaker embedding of one utterance (raw, unnormalised).
    pub fn embed(&self, x: &FeatureMatrix) -> Result<Array1<f64>> {
        let g = self.sample_graph(x, Mode::Eval, false)?;
        let mut bt = Tape::new();
        let mut bb = Binder::new(&self.params);
        let leaf = bt.constant(g.tape.value(g.aggregate).clone());
        let (y, _) = heads::project_on(&mut bt, &mut bb, leaf, "mfa", Mode::Eval);
        Ok(bt.value(y).row(0).to_owned())
    }

    pub fn embed_all(&self, feats: &[FeatureMatrix], exec: Execution) -> Result<Vec<Array1<f64>>> {
        exec::map(exec, feats, |_, x| self.embed(x)).into_iter().collect()
    }

    /// Encoder taps for one utterance.
    pub fn taps(&self, x: &FeatureMatrix, mode: Mode) -> Result<TapSet> {
        encoder::encode_with_taps(x, &self.cfg.encoder, &self.params, mode)
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for up in updates {
            heads::apply_bn_update(&mut self.params, up);
        }
    }
}
