//! The two training stages: contrastive item pretraining with attribute
//! reconstruction, then next-item fine-tuning of the user side.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Sample;
use crate::features::FeatureStore;
use crate::loss::info_nce;
use crate::model::{Model, ModelError};
use crate::optim::{clip_global_norm, AdamConfig, AdamW, OptimError, Schedule};
use crate::params::{Binder, Group, ParamStore};
use crate::tensor::{Float, Graph, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    Config(String),
    #[error("no usable training examples for {0}")]
    NoExamples(&'static str),
    #[error("frozen parameters changed during {0}")]
    FrozenChanged(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub temperature: f64,
    /// Weight of the reconstruction term; pretraining only.
    pub recon_weight: f64,
    pub epochs: usize,
    pub batch: usize,
    pub grad_clip: f64,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<u64>,
    /// Keep the item encoder fixed while fine-tuning.
    pub freeze_items: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            warmup_steps: 20,
            temperature: 0.07,
            recon_weight: 0.5,
            epochs: 50,
            batch: 16,
            grad_clip: 1.0,
            max_steps: None,
            freeze_items: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if self.warmup_steps < 1 {
            return bad("warmup_steps must be at least 1");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if self.batch < 2 {
            return bad("batch must be at least 2 for in-batch negatives");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.recon_weight >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr must be positive; recon_weight and weight_decay non-negative");
        }
        if self.epochs == 0 || self.max_steps == Some(0) {
            return bad("epochs and max_steps must be positive");
        }
        Ok(())
    }

    fn optimizer<F: Float>(&self, n_params: usize, trainable: &[Group]) -> AdamW<F> {
        let adam = AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        };
        AdamW::new(adam, n_params, trainable)
    }

    fn total_steps(&self, per_epoch: usize) -> u64 {
        let full = (self.epochs * per_epoch) as u64;
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn trainable(self, freeze_items: bool) -> Vec<Group> {
        match (self, freeze_items) {
            (Stage::Pretrain, _) => vec![Group::ItemEncoder, Group::ReconHead],
            (Stage::Finetune, false) => vec![Group::ItemEncoder, Group::UserEncoder, Group::Reader],
            (Stage::Finetune, true) => vec![Group::UserEncoder, Group::Reader],
        }
    }

    fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretraining",
            Stage::Finetune => "fine-tuning",
        }
    }
}

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub contrast: f64,
    pub recon: Option<f64>,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Called after each epoch with the log so far and the current state.
pub type EpochHook<'a, F> = dyn FnMut(&EpochRecord, &ParamStore<F>, &AdamW<F>) + 'a;

/// An adjacent pair `(earlier item, later item)` from one user's history.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ItemPair {
    pub anchor: usize,
    pub positive: usize,
}

/// Candidate adjacent pairs per user, restricted to events before the
/// held-out tail and skipping repeats of the same item.
pub fn adjacent_pairs(fs: &FeatureStore) -> Vec<Vec<ItemPair>> {
    fs.events
        .iter()
        .map(|evs| {
            let train = &evs[..evs.len().saturating_sub(2)];
            train
                .windows(2)
                .filter(|w| w[0].item != w[1].item)
                .map(|w| ItemPair {
                    anchor: w[0].item,
                    positive: w[1].item,
                })
                .collect()
        })
        .collect()
}

/// Greedy batches in the given order; an example sharing an item with the
/// batch so far is skipped, since that item would be its own negative.
fn pack<T: Copy>(examples: &[T], batch: usize, keys: impl Fn(&T) -> Vec<usize>) -> Vec<Vec<T>> {
    let mut out = Vec::new();
    let mut cur: Vec<T> = Vec::new();
    let mut taken: HashSet<usize> = HashSet::new();
    for ex in examples {
        let k = keys(ex);
        if k.iter().any(|i| taken.contains(i)) {
            continue;
        }
        taken.extend(k);
        cur.push(*ex);
        if cur.len() == batch {
            out.push(std::mem::take(&mut cur));
            taken.clear();
        }
    }
    if cur.len() >= 2 {
        out.push(cur);
    }
    out
}

pub fn pretrain_batches<R: Rng>(pairs: &[Vec<ItemPair>], batch: usize, rng: &mut R) -> Vec<Vec<ItemPair>> {
    let mut drawn: Vec<ItemPair> = pairs.iter().filter(|p| !p.is_empty()).map(|p| p[rng.random_range(0..p.len())]).collect();
    drawn.shuffle(rng);
    pack(&drawn, batch, |p| vec![p.anchor, p.positive])
}

fn finetune_batches<R: Rng>(fs: &FeatureStore, samples: &[Sample], batch: usize, rng: &mut R) -> Vec<Vec<Sample>> {
    let mut order = samples.to_vec();
    order.shuffle(rng);
    let target = |s: &Sample| fs.events[s.user][s.target].item;
    pack(&order, batch, |s| vec![target(s)])
}

/// Items needed to encode a batch, sorted.
fn union(items: impl IntoIterator<Item = usize>) -> Vec<usize> {
    items.into_iter().collect::<BTreeSet<_>>().into_iter().collect()
}

pub struct PretrainLoss {
    pub total: Var,
    pub contrast: Var,
    pub recon: Option<Var>,
}

/// Contrastive loss over mean-pooled item tokens of adjacent pairs plus the
/// weighted reconstruction loss over every attribute of the batch's items.
pub fn pretrain_loss<F: Float>(b: &Binder<'_, F>, model: &Model, fs: &FeatureStore, pairs: &[ItemPair], cfg: &TrainConfig) -> Result<PretrainLoss> {
    pretrain_loss_with(b, model, fs, pairs, cfg, None)
}

/// Items of a pretraining batch in encoding order.
pub fn pair_items(pairs: &[ItemPair]) -> Vec<usize> {
    union(pairs.iter().flat_map(|p| [p.anchor, p.positive]))
}

/// [`pretrain_loss`] with the reconstruction targets optionally pinned
/// instead of read from the current value embeddings.
pub fn pretrain_loss_with<F: Float>(
    b: &Binder<'_, F>,
    model: &Model,
    fs: &FeatureStore,
    pairs: &[ItemPair],
    cfg: &TrainConfig,
    targets: Option<&[f64]>,
) -> Result<PretrainLoss> {
    let g = b.graph();
    let batch = model.encode_items(b, fs, &pair_items(pairs))?;
    let pos = |i: usize| batch.position[&i];
    let a = g.gather_rows(batch.pooled, &pairs.iter().map(|p| pos(p.anchor)).collect::<Vec<_>>())?;
    let p = g.gather_rows(batch.pooled, &pairs.iter().map(|p| pos(p.positive)).collect::<Vec<_>>())?;
    let contrast = info_nce(g, a, p, cfg.temperature)?;
    if cfg.recon_weight == 0.0 {
        return Ok(PretrainLoss {
            total: contrast,
            contrast,
            recon: None,
        });
    }
    let recon = match targets {
        Some(t) => model.reconstruction_error(b, fs, &batch, t)?,
        None => model.reconstruction_loss(b, fs, &batch)?,
    };
    let total = g.add(contrast, g.scale(recon, F::of(cfg.recon_weight))?)?;
    Ok(PretrainLoss {
        total,
        contrast,
        recon: Some(recon),
    })
}

/// InfoNCE between user vectors and the pooled tokens of their targets.
pub fn finetune_loss<F: Float>(b: &Binder<'_, F>, model: &Model, fs: &FeatureStore, samples: &[Sample], cfg: &TrainConfig) -> Result<Var> {
    let g = b.graph();
    let target = |s: &Sample| fs.events[s.user][s.target].item;
    let items = union(
        samples
            .iter()
            .flat_map(|s| (s.start..s.target).map(|t| fs.events[s.user][t].item).chain([target(s)])),
    );
    let batch = model.encode_items(b, fs, &items)?;
    let u = model.user_vectors(b, fs, samples, &batch)?;
    let z = g.gather_rows(batch.pooled, &samples.iter().map(|s| batch.position[&target(s)]).collect::<Vec<_>>())?;
    Ok(info_nce(g, u, z, cfg.temperature)?)
}

struct Loop<'a, F: Float> {
    stage: Stage,
    cfg: &'a TrainConfig,
    trainable: Vec<Group>,
    opt: AdamW<F>,
    schedule: Schedule,
    log: TrainLog,
}

impl<F: Float> Loop<'_, F> {
    /// Runs one step; returns `false` once the step budget is spent.
    fn step(
        &mut self,
        store: &mut ParamStore<F>,
        epoch: usize,
        batch: usize,
        forward: impl FnOnce(&Binder<'_, F>) -> Result<(Var, f64, Option<f64>)>,
    ) -> Result<bool> {
        let step = self.opt.steps_taken() + 1;
        if step > self.schedule.total_steps {
            return Ok(false);
        }
        let g = Graph::new();
        let b = Binder::new(&g, store, &self.trainable);
        let (loss, contrast, recon) = forward(&b)?;
        let value = g.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "training loss" }.into());
        }
        let mut grads = g.backward(loss)?;
        let mut grads = b.collect(&mut grads);
        drop(b);
        clip_global_norm(&mut grads, self.cfg.grad_clip);
        let lr = self.schedule.lr_at(step);
        self.opt.step(store, &grads, lr)?;
        self.log.steps.push(StepRecord {
            stage: self.stage,
            epoch,
            step,
            lr,
            loss: value,
            contrast,
            recon,
            batch,
        });
        Ok(true)
    }

    fn end_epoch(&mut self, epoch: usize, first_step: usize) -> EpochRecord {
        let recs = &self.log.steps[first_step..];
        let mean_loss = recs.iter().map(|r| r.loss).sum::<f64>() / recs.len().max(1) as f64;
        let rec = EpochRecord {
            stage: self.stage,
            epoch,
            steps: recs.len(),
            mean_loss,
        };
        self.log.epochs.push(rec.clone());
        rec
    }
}

fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (stage as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn frozen_groups(trainable: &[Group]) -> Vec<Group> {
    Group::ALL.iter().copied().filter(|g| !trainable.contains(g)).collect()
}

/// Shared epoch loop: draws batches, steps, logs, and checks that frozen
/// groups are untouched at the end.
#[allow(clippy::too_many_arguments)]
fn run<F: Float, T>(
    stage: Stage,
    store: &mut ParamStore<F>,
    cfg: &TrainConfig,
    seed: u64,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> Vec<Vec<T>>,
    mut forward: impl FnMut(&Binder<'_, F>, &[T]) -> Result<(Var, f64, Option<f64>)>,
    hook: Option<&mut EpochHook<'_, F>>,
) -> Result<(TrainLog, AdamW<F>)> {
    cfg.validate()?;
    let trainable = stage.trainable(cfg.freeze_items);
    let frozen = frozen_groups(&trainable);
    let before = store.fingerprint(&frozen);
    let mut rng = stage_rng(seed, stage);
    let first = draw(&mut rng);
    if first.is_empty() {
        return Err(TrainError::NoExamples(stage.name()));
    }
    let mut lp = Loop {
        stage,
        cfg,
        opt: cfg.optimizer(store.len(), &trainable),
        trainable,
        schedule: Schedule {
            peak: cfg.lr,
            warmup_steps: cfg.warmup_steps,
            total_steps: cfg.total_steps(first.len()),
        },
        log: TrainLog::default(),
    };
    let mut hook = hook;
    let mut batches = Some(first);
    'epochs: for epoch in 0..cfg.epochs {
        let epoch_batches = match batches.take() {
            Some(b) => b,
            None => draw(&mut rng),
        };
        let start = lp.log.steps.len();
        for batch in &epoch_batches {
            let n = batch.len();
            if !lp.step(store, epoch, n, |b| forward(b, batch))? {
                if lp.log.steps.len() > start {
                    let rec = lp.end_epoch(epoch, start);
                    if let Some(h) = hook.as_deref_mut() {
                        h(&rec, store, &lp.opt);
                    }
                }
                break 'epochs;
            }
        }
        let rec = lp.end_epoch(epoch, start);
        if let Some(h) = hook.as_deref_mut() {
            h(&rec, store, &lp.opt);
        }
    }
    if store.fingerprint(&frozen) != before {
        return Err(TrainError::FrozenChanged(stage.name()));
    }
    Ok((lp.log, lp.opt))
}

/// Stage one: trains the item encoder and reconstruction head on one
/// random adjacent pair per user per epoch.
pub fn pretrain<F: Float>(
    store: &mut ParamStore<F>,
    model: &Model,
    fs: &FeatureStore,
    cfg: &TrainConfig,
    seed: u64,
    hook: Option<&mut EpochHook<'_, F>>,
) -> Result<(TrainLog, AdamW<F>)> {
    let pairs = adjacent_pairs(fs);
    run(
        Stage::Pretrain,
        store,
        cfg,
        seed,
        |rng| pretrain_batches(&pairs, cfg.batch, rng),
        |b, batch| {
            let l = pretrain_loss(b, model, fs, batch, cfg)?;
            let g = b.graph();
            let recon = l.recon.map(|r| g.value(r).item().as_f64());
            Ok((l.total, g.value(l.contrast).item().as_f64(), recon))
        },
        hook,
    )
}

/// Stage two: trains the user side (and, unless frozen, the item encoder)
/// on next-item prediction over the training windows.
pub fn finetune<F: Float>(
    store: &mut ParamStore<F>,
    model: &Model,
    fs: &FeatureStore,
    samples: &[Sample],
    cfg: &TrainConfig,
    seed: u64,
    hook: Option<&mut EpochHook<'_, F>>,
) -> Result<(TrainLog, AdamW<F>)> {
    run(
        Stage::Finetune,
        store,
        cfg,
        seed,
        |rng| finetune_batches(fs, samples, cfg.batch, rng),
        |b, batch| {
            let l = finetune_loss(b, model, fs, batch, cfg)?;
            let v = b.graph().value(l).item().as_f64();
            Ok((l, v, None))
        },
        hook,
    )
}
