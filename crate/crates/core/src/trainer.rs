//! Two-stage training.
//!
//! Stage 1 fine-tunes on the original examples with one-hot targets. Stage 2
//! starts from the stage-1 best checkpoint, scores every training example,
//! splits at the median difficulty, pairs each anchor with its most similar
//! neighbour in the same pool, and trains on the mixed pseudo-samples: the
//! whole easy pool first, then the hard pool, every epoch.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{Example, FewShotSplit, PAD};
use crate::difficulty::{self, DifficultyPartition, DifficultyScore};
use crate::encoder::{ParamStore, ParamVars, EMBEDDING};
use crate::error::{Error, Result};
use crate::evalkit;
use crate::mixup::{self, LambdaDist, Labeled, MixVariant, MixedItem};
use crate::pairing::{self, ReprCache};
use crate::rng::{self, tag};
use crate::smoothing::{SmoothingConfig, SoftLabel};
use crate::tensor::{Tape, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionPolicy {
    /// Uniformly random partners from the whole training set, no pools.
    Random,
    EasyToHard,
    HardToEasy,
}

impl std::str::FromStr for SelectionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SelectionPolicy::Random),
            "easy_to_hard" => Ok(SelectionPolicy::EasyToHard),
            "hard_to_easy" => Ok(SelectionPolicy::HardToEasy),
            other => Err(Error::Config(format!("unknown selection policy {other:?}"))),
        }
    }
}

impl std::fmt::Display for SelectionPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SelectionPolicy::Random => "random",
            SelectionPolicy::EasyToHard => "easy_to_hard",
            SelectionPolicy::HardToEasy => "hard_to_easy",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub selection_policy: SelectionPolicy,
    pub mix_variant: MixVariant,
    pub mix_layer: usize,
    pub lambda_dist: LambdaDist,
    pub smoothing: SmoothingConfig,
    pub rescore_every_epoch: bool,
    pub append_originals: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            stage1_lr: 1e-3,
            stage2_lr: 2e-4,
            weight_decay: 1e-4,
            warmup_fraction: 0.1,
            stage1_epochs: 30,
            stage2_epochs: 20,
            selection_policy: SelectionPolicy::EasyToHard,
            mix_variant: MixVariant::Span,
            mix_layer: 1,
            lambda_dist: LambdaDist::default(),
            smoothing: SmoothingConfig::default(),
            rescore_every_epoch: false,
            append_originals: false,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, lr) in [("stage1_lr", self.stage1_lr), ("stage2_lr", self.stage2_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        self.lambda_dist.validate()
    }
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
    pub step: u64,
}

/// One AdamW update with bias correction and decoupled weight decay:
/// `θ ← θ − lr·wd·θ − lr·m̂/(√v̂ + ε)`. The pad embedding row is never
/// touched. Parameters without a gradient are treated as having a zero
/// gradient. Returns `false` (and leaves everything unchanged) when any
/// gradient is non-finite.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<bool> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::shape("optimizer_step", format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "optimizer_step",
                format!("{name}: parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            log::warn!("non-finite gradient for {name}; skipping optimizer step");
            return Ok(false);
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (name, p) in params.tensors_mut().iter_mut() {
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let g = grads.get(name);
        let skip = if name == EMBEDDING { p.shape()[1] } else { 0 };
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in (PAD * skip + skip)..pd.len() {
            let gi = g.map_or(0.0, |g| g.data()[i] as f64);
            let mi = BETA1 * md[i] as f64 + (1.0 - BETA1) * gi;
            let vi = BETA2 * vd[i] as f64 + (1.0 - BETA2) * gi * gi;
            md[i] = mi as f32;
            vd[i] = vi as f32;
            let mut theta = pd[i] as f64;
            theta -= lr * weight_decay * theta;
            theta -= lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
            pd[i] = theta as f32;
        }
    }
    Ok(true)
}

/// Linear warmup from 0 to `base_lr` over the first
/// `floor(warmup_fraction · total_steps)` steps, then linear decay to 0 at
/// `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f64, warmup_fraction: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("learning-rate schedule needs at least one step".into()));
    }
    if step > total_steps {
        return Err(Error::Config(format!("step {step} beyond {total_steps} total steps")));
    }
    let warmup = (warmup_fraction * total_steps as f64) as usize;
    if step < warmup {
        return Ok(base_lr * step as f64 / warmup as f64);
    }
    Ok(base_lr * (total_steps - step) as f64 / (total_steps - warmup).max(1) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub epochs: Vec<EpochMetrics>,
    pub best_dev_accuracy: f64,
    /// 0 when no epoch ran and the starting parameters were kept.
    pub best_epoch: usize,
    /// Accuracy of the best-dev parameters on the test set, if any.
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subset {
    Easy,
    Hard,
    All,
}

impl std::fmt::Display for Subset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Subset::Easy => "easy",
            Subset::Hard => "hard",
            Subset::All => "all",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchLogEntry {
    pub epoch: usize,
    pub batch: usize,
    pub subset: Subset,
    pub anchor_ids: Vec<usize>,
    pub loss: f64,
}

/// `epoch<TAB>batch<TAB>subset<TAB>anchor_ids` with comma-joined ids.
pub fn batchlog_tsv(log: &[BatchLogEntry]) -> String {
    let mut out = String::from("epoch\tbatch\tsubset\tanchor_ids\n");
    for e in log {
        let ids: Vec<String> = e.anchor_ids.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "{}\t{}\t{}\t{}", e.epoch, e.batch, e.subset, ids.join(","));
    }
    out
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub record: RunRecord,
    pub best_params: ParamStore,
    pub batch_log: Vec<BatchLogEntry>,
    /// Difficulty scores and partition used at the start of stage 2.
    pub scores: Vec<DifficultyScore>,
    pub partition: Option<DifficultyPartition>,
}

/// Forward, loss, backward and one optimizer update over a batch.
fn train_batch(
    params: &mut ParamStore,
    state: &mut OptimizerState,
    items: &[MixedItem],
    lr: f64,
    weight_decay: f64,
) -> Result<f64> {
    let mut tape = Tape::<f32>::new();
    let pv = ParamVars::register(&mut tape, params);
    let mut probs = Vec::with_capacity(items.len());
    let mut targets = Vec::with_capacity(items.len());
    for item in items {
        probs.push(item.forward_on_tape(&mut tape, params, &pv)?.probs);
        targets.push(item.soft_label.probs().iter().map(|v| *v as f32).collect());
    }
    let loss = tape.soft_cross_entropy(&probs, &targets)?;
    let value = tape.value(loss).data()[0] as f64;
    let grads = tape.backward(loss)?.into_params();
    optimizer_step(params, &grads, state, lr, weight_decay)?;
    debug_assert!(params.embedding().row(PAD).iter().all(|v| *v == 0.0));
    Ok(value)
}

struct BestTracker {
    best: Option<(f64, usize, ParamStore)>,
}

impl BestTracker {
    fn offer(&mut self, acc: f64, epoch: usize, params: &ParamStore) {
        if self.best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            self.best = Some((acc, epoch, params.clone()));
        }
    }

    fn finish(self, start: ParamStore, dev: &[Example], test: &[Example], epochs: Vec<EpochMetrics>) -> Result<(RunRecord, ParamStore)> {
        let (best_dev_accuracy, best_epoch, best_params) = match self.best {
            Some(b) => b,
            None => (evalkit::evaluate(&start, dev)?, 0, start),
        };
        let test_accuracy = if test.is_empty() {
            None
        } else {
            Some(evalkit::evaluate(&best_params, test)?)
        };
        Ok((
            RunRecord {
                epochs,
                best_dev_accuracy,
                best_epoch,
                test_accuracy,
            },
            best_params,
        ))
    }
}

fn check_split(split: &FewShotSplit) -> Result<()> {
    if split.train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if split.dev.is_empty() {
        return Err(Error::Data("empty dev set; best-checkpoint selection needs one".into()));
    }
    Ok(())
}

/// Plain fine-tuning with one-hot targets, keeping the parameters with the
/// best dev accuracy.
pub fn train_stage1(config: &TrainConfig, split: &FewShotSplit, init: ParamStore) -> Result<StageOutcome> {
    config.validate()?;
    check_split(split)?;
    let n = split.train.len();
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let total = config.stage1_epochs * batches_per_epoch;
    let mut params = init.clone();
    let mut state = OptimizerState::default();
    let mut tracker = BestTracker { best: None };
    let mut epochs = Vec::new();
    let mut batch_log = Vec::new();
    let mut step = 0;
    for epoch in 1..=config.stage1_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(config.seed, &[tag::SHUFFLE, 1, epoch as u64]));
        let mut losses = Vec::new();
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let items: Vec<MixedItem> = chunk
                .iter()
                .map(|&i| {
                    let e = &split.train[i];
                    Ok(MixedItem::original(Labeled {
                        example: e,
                        target: &SoftLabel::new(e.one_hot.clone())?,
                    }))
                })
                .collect::<Result<_>>()?;
            let lr = lr_schedule(step, total, config.stage1_lr, config.warmup_fraction)?;
            let loss = train_batch(&mut params, &mut state, &items, lr, config.weight_decay)?;
            step += 1;
            losses.push(loss);
            batch_log.push(BatchLogEntry {
                epoch,
                batch: b,
                subset: Subset::All,
                anchor_ids: chunk.iter().map(|&i| split.train[i].id).collect(),
                loss,
            });
        }
        let dev_accuracy = evalkit::evaluate(&params, &split.dev)?;
        tracker.offer(dev_accuracy, epoch, &params);
        epochs.push(EpochMetrics {
            epoch,
            train_loss: mean(&losses),
            dev_accuracy,
        });
    }
    let (record, best_params) = tracker.finish(init, &split.dev, &split.test, epochs)?;
    Ok(StageOutcome {
        record,
        best_params,
        batch_log,
        scores: vec![],
        partition: None,
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Everything stage 2 derives from a parameter snapshot.
struct Curriculum {
    scores: Vec<DifficultyScore>,
    partition: DifficultyPartition,
    /// Smoothed target per training index.
    targets: Vec<SoftLabel>,
    /// Nearest same-pool partner per training index, if the pool has one.
    partners: Vec<Option<usize>>,
}

impl Curriculum {
    fn build(config: &TrainConfig, params: &ParamStore, train: &[Example]) -> Result<Self> {
        let scores = difficulty::score_all(params, train)?;
        let partition = difficulty::partition_by_median(&scores)?;
        let targets = train
            .iter()
            .zip(&scores)
            .map(|(e, s)| config.smoothing.apply(&e.one_hot, Some(&s.probs)))
            .collect::<Result<Vec<_>>>()?;
        let index: BTreeMap<usize, usize> = train.iter().enumerate().map(|(i, e)| (e.id, i)).collect();
        if index.len() != train.len() {
            return Err(Error::Data("training examples must have distinct ids".into()));
        }
        let mut partners = vec![None; train.len()];
        if config.selection_policy != SelectionPolicy::Random {
            let reprs: ReprCache = pairing::represent_all(params, train)?;
            for (name, pool) in [("easy", &partition.easy), ("hard", &partition.hard)] {
                if pool.len() < 2 {
                    if !pool.is_empty() {
                        log::info!("{name} pool has {} member(s); training it without mixup", pool.len());
                    }
                    continue;
                }
                for pair in pairing::pair_subset(pool, &reprs)? {
                    partners[index[&pair.anchor_id]] = Some(index[&pair.partner_id]);
                }
            }
        }
        Ok(Self {
            scores,
            partition,
            targets,
            partners,
        })
    }

    /// Ordered groups of training indices for one epoch.
    fn groups(&self, policy: SelectionPolicy, train: &[Example]) -> Vec<(Subset, Vec<usize>)> {
        let pos = |ids: &[usize]| -> Vec<usize> {
            ids.iter()
                .map(|id| train.iter().position(|e| e.id == *id).expect("partition id in train"))
                .collect()
        };
        let easy = (Subset::Easy, pos(&self.partition.easy));
        let hard = (Subset::Hard, pos(&self.partition.hard));
        match policy {
            SelectionPolicy::EasyToHard => vec![easy, hard],
            SelectionPolicy::HardToEasy => vec![hard, easy],
            SelectionPolicy::Random => vec![(Subset::All, (0..train.len()).collect())],
        }
    }
}

fn batches_per_epoch(groups: &[(Subset, Vec<usize>)], batch_size: usize) -> usize {
    groups.iter().map(|(_, g)| g.len().div_ceil(batch_size)).sum()
}

/// Self-evolution mixup training starting from `start` (the stage-1 best
/// parameters).
pub fn train_stage2_se(config: &TrainConfig, split: &FewShotSplit, start: &ParamStore) -> Result<StageOutcome> {
    config.validate()?;
    check_split(split)?;
    let train = &split.train;
    if config.mix_layer > start.num_blocks() {
        return Err(Error::Config(format!(
            "mix_layer {} exceeds {} blocks",
            config.mix_layer,
            start.num_blocks()
        )));
    }
    let mut curriculum = Curriculum::build(config, start, train)?;
    let initial_scores = curriculum.scores.clone();
    let initial_partition = curriculum.partition.clone();
    let per_epoch = batches_per_epoch(&curriculum.groups(config.selection_policy, train), config.batch_size);
    let total = config.stage2_epochs * per_epoch;

    let mut params = start.clone();
    let mut state = OptimizerState::default();
    let mut tracker = BestTracker { best: None };
    let mut epochs = Vec::new();
    let mut batch_log = Vec::new();
    let mut step = 0;
    for epoch in 1..=config.stage2_epochs {
        if config.rescore_every_epoch && epoch > 1 {
            curriculum = Curriculum::build(config, &params, train)?;
        }
        let mut groups = curriculum.groups(config.selection_policy, train);
        for (g, (_, members)) in groups.iter_mut().enumerate() {
            members.shuffle(&mut rng::stream(config.seed, &[tag::SHUFFLE, 2, epoch as u64, g as u64]));
        }
        let mut losses = Vec::new();
        let mut batch = 0usize;
        for (subset, members) in &groups {
            for chunk in members.chunks(config.batch_size) {
                let mut items = Vec::with_capacity(chunk.len() * 2);
                for (k, &i) in chunk.iter().enumerate() {
                    let keys = [epoch as u64, batch as u64, k as u64];
                    let anchor = Labeled {
                        example: &train[i],
                        target: &curriculum.targets[i],
                    };
                    let partner = match config.selection_policy {
                        SelectionPolicy::Random if train.len() > 1 => {
                            let mut r = rng::stream(config.seed, &[tag::PARTNER, keys[0], keys[1], keys[2]]);
                            let mut j = r.random_range(0..train.len() - 1);
                            if j >= i {
                                j += 1;
                            }
                            Some(j)
                        }
                        SelectionPolicy::Random => None,
                        _ => curriculum.partners[i],
                    };
                    let item = match partner {
                        Some(j) => {
                            let mut r = rng::stream(config.seed, &[tag::LAMBDA, keys[0], keys[1], keys[2]]);
                            let lambda = mixup::sample_lambda(&mut r, config.lambda_dist)?;
                            let partner = Labeled {
                                example: &train[j],
                                target: &curriculum.targets[j],
                            };
                            mixup::mix(config.mix_variant, &params, anchor, partner, lambda, config.mix_layer)?
                        }
                        None => MixedItem::original(anchor),
                    };
                    items.push(item);
                    if config.append_originals && config.mix_variant != MixVariant::None {
                        items.push(MixedItem::original(anchor));
                    }
                }
                let lr = lr_schedule(step, total, config.stage2_lr, config.warmup_fraction)?;
                let loss = train_batch(&mut params, &mut state, &items, lr, config.weight_decay)?;
                step += 1;
                losses.push(loss);
                batch_log.push(BatchLogEntry {
                    epoch,
                    batch,
                    subset: *subset,
                    anchor_ids: chunk.iter().map(|&i| train[i].id).collect(),
                    loss,
                });
                batch += 1;
            }
        }
        let dev_accuracy = evalkit::evaluate(&params, &split.dev)?;
        tracker.offer(dev_accuracy, epoch, &params);
        epochs.push(EpochMetrics {
            epoch,
            train_loss: mean(&losses),
            dev_accuracy,
        });
    }
    let (record, best_params) = tracker.finish(start.clone(), &split.dev, &split.test, epochs)?;
    Ok(StageOutcome {
        record,
        best_params,
        batch_log,
        scores: initial_scores,
        partition: Some(initial_partition),
    })
}

#[derive(Clone, Debug)]
pub struct TwoStageOutcome {
    pub stage1: StageOutcome,
    pub stage2: StageOutcome,
}

pub fn train_two_stage(config: &TrainConfig, split: &FewShotSplit, init: ParamStore) -> Result<TwoStageOutcome> {
    let stage1 = train_stage1(config, split, init)?;
    let stage2 = train_stage2_se(config, split, &stage1.best_params)?;
    Ok(TwoStageOutcome { stage1, stage2 })
}

/// Check that within every epoch no easy batch follows a hard batch.
pub fn curriculum_order_holds(log: &[BatchLogEntry], policy: SelectionPolicy) -> bool {
    let (first, second) = match policy {
        SelectionPolicy::EasyToHard => (Subset::Easy, Subset::Hard),
        SelectionPolicy::HardToEasy => (Subset::Hard, Subset::Easy),
        SelectionPolicy::Random => return log.iter().all(|e| e.subset == Subset::All),
    };
    let mut by_epoch: BTreeMap<usize, Vec<&BatchLogEntry>> = BTreeMap::new();
    for e in log {
        by_epoch.entry(e.epoch).or_default().push(e);
    }
    by_epoch.values().all(|entries| {
        let mut seen_second = false;
        let mut sorted = entries.clone();
        sorted.sort_by_key(|e| e.batch);
        sorted.iter().all(|e| {
            if e.subset == second {
                seen_second = true;
                true
            } else {
                e.subset == first && !seen_second
            }
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_schedule(0, 100, 1.0, 0.1).unwrap(), 0.0);
        assert_eq!(lr_schedule(10, 100, 1.0, 0.1).unwrap(), 1.0);
        assert_eq!(lr_schedule(5, 100, 1.0, 0.1).unwrap(), 0.5);
        assert_eq!(lr_schedule(55, 100, 1.0, 0.1).unwrap(), 0.5);
        assert_eq!(lr_schedule(100, 100, 1.0, 0.1).unwrap(), 0.0);
        assert_eq!(lr_schedule(0, 4, 2.0, 0.0).unwrap(), 2.0);
        assert!(lr_schedule(0, 0, 1.0, 0.1).is_err());
        assert!(lr_schedule(5, 4, 1.0, 0.1).is_err());
    }

    fn tiny() -> (ModelConfig, ParamStore) {
        let c = ModelConfig {
            vocab_size: 6,
            embed_dim: 3,
            num_blocks: 1,
            hidden_dim: 3,
            num_classes: 2,
            max_len: 4,
        };
        let p = ParamStore::init(&c, 1).unwrap();
        (c, p)
    }

    #[test]
    fn zero_gradient_zero_decay_is_a_fixed_point() {
        let (_, mut p) = tiny();
        let before = p.clone();
        let grads: BTreeMap<String, Tensor> =
            p.tensors().iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        let mut s = OptimizerState::default();
        assert!(optimizer_step(&mut p, &grads, &mut s, 0.1, 0.0).unwrap());
        assert_eq!(p, before);
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let (_, mut p) = tiny();
        let before = p.clone();
        let mut g = Tensor::zeros(p.get("head.bias").unwrap().shape());
        g.data_mut()[0] = f32::NAN;
        let grads = BTreeMap::from([("head.bias".to_string(), g)]);
        let mut s = OptimizerState::default();
        assert!(!optimizer_step(&mut p, &grads, &mut s, 0.1, 0.01).unwrap());
        assert_eq!(p, before);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn gradient_shape_mismatch_is_an_error() {
        let (_, mut p) = tiny();
        let grads = BTreeMap::from([("head.bias".to_string(), Tensor::zeros(&[5]))]);
        assert!(optimizer_step(&mut p, &grads, &mut OptimizerState::default(), 0.1, 0.0).is_err());
    }

    #[test]
    fn adamw_matches_hand_computed_updates() {
        let (_, mut p) = tiny();
        let theta0 = p.get("head.bias").unwrap().data()[1] as f64;
        let (g1, g2, lr, wd) = (0.5f64, -0.25f64, 0.01, 0.1);
        let grad = |g: f64| {
            let mut t = Tensor::zeros(&[2]);
            t.data_mut()[1] = g as f32;
            BTreeMap::from([("head.bias".to_string(), t)])
        };
        let mut s = OptimizerState::default();
        optimizer_step(&mut p, &grad(g1), &mut s, lr, wd).unwrap();
        // Step 1: m̂ = g, v̂ = g², so the adaptive term is lr·g/(|g| + ε).
        let theta1 = theta0 - lr * wd * theta0 - lr * g1 / (g1.abs() + ADAM_EPS);
        assert!((p.get("head.bias").unwrap().data()[1] as f64 - theta1).abs() < 1e-6);
        optimizer_step(&mut p, &grad(g2), &mut s, lr, wd).unwrap();
        let m = 0.9 * 0.1 * g1 + 0.1 * g2;
        let v = 0.999 * 0.001 * g1 * g1 + 0.001 * g2 * g2;
        let (mh, vh) = (m / (1.0 - 0.9f64.powi(2)), v / (1.0 - 0.999f64.powi(2)));
        let theta2 = theta1 - lr * wd * theta1 - lr * mh / (vh.sqrt() + ADAM_EPS);
        assert!((p.get("head.bias").unwrap().data()[1] as f64 - theta2).abs() < 1e-6);
        assert_eq!(s.step, 2);
    }

    #[test]
    fn pad_row_stays_zero() {
        let (_, mut p) = tiny();
        let mut s = OptimizerState::default();
        for k in 0..100 {
            let grads: BTreeMap<String, Tensor> = p
                .tensors()
                .iter()
                .map(|(n, t)| {
                    let data = (0..t.len()).map(|i| ((i + k) % 7) as f32 - 3.0).collect();
                    (n.clone(), Tensor::new(t.shape().to_vec(), data).unwrap())
                })
                .collect();
            optimizer_step(&mut p, &grads, &mut s, 0.05, 0.1).unwrap();
        }
        assert!(p.embedding().row(PAD).iter().all(|v| *v == 0.0));
        assert!(p.embedding().row(PAD + 1).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn curriculum_order_checker() {
        let e = |epoch, batch, subset| BatchLogEntry {
            epoch,
            batch,
            subset,
            anchor_ids: vec![],
            loss: 0.0,
        };
        let good = vec![e(1, 0, Subset::Easy), e(1, 1, Subset::Hard), e(2, 0, Subset::Easy), e(2, 1, Subset::Hard)];
        assert!(curriculum_order_holds(&good, SelectionPolicy::EasyToHard));
        assert!(!curriculum_order_holds(&good, SelectionPolicy::HardToEasy));
        let bad = vec![e(1, 0, Subset::Easy), e(1, 1, Subset::Hard), e(1, 2, Subset::Easy)];
        assert!(!curriculum_order_holds(&bad, SelectionPolicy::EasyToHard));
    }

    #[test]
    fn batchlog_format() {
        let log = vec![BatchLogEntry {
            epoch: 1,
            batch: 0,
            subset: Subset::Easy,
            anchor_ids: vec![4, 7],
            loss: 0.5,
        }];
        assert_eq!(batchlog_tsv(&log), "epoch\tbatch\tsubset\tanchor_ids\n1\t0\teasy\t4,7\n");
    }
}
