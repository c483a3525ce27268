//! Two-step transfer learning.
//!
//! Stage 1 trains only the head with the backbone frozen; stage 2 trains every
//! parameter at a lower learning rate. Both stages use Adam on mean
//! cross-entropy, stop after `early_stop_patience` epochs without a lower
//! validation loss, and restore the best weights seen.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{self, AugmentParams};
use super::model::{fingerprint, TrainedModel};
use super::network::{self, Layout};
use super::softmax::{argmax, softmax_unchecked};
use crate::dataset::{load_record_image, DatasetManifest, SplitRole};
use crate::error::{Error, Result};
use crate::imaging::Tensor3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based within its stage.
    pub epoch: usize,
    pub stage: u8,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: u8,
    pub learning_rate: f64,
    pub epochs_run: usize,
    /// 0 means no epoch beat the weights the stage started from.
    pub best_epoch: usize,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub stages: Vec<StageSummary>,
    pub train_images: usize,
    pub val_images: usize,
}

impl TrainingHistory {
    pub fn stage(&self, stage: u8) -> Option<&StageSummary> {
        self.stages.iter().find(|s| s.stage == stage)
    }
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    range: Range<usize>,
}

impl Adam {
    fn new(lr: f64, range: Range<usize>) -> Self {
        let n = range.len();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            range,
        }
    }

    /// Updates only `params[range]`; everything else is left untouched.
    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let target = &mut params[self.range.clone()];
        let g = &grads[self.range.clone()];
        for i in 0..target.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            target[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

struct Sample {
    input: Tensor3,
    target: usize,
}

/// Fixed sample grouping for gradient accumulation; keeps floating-point
/// summation order independent of the rayon thread count.
const GRAD_CHUNK: usize = 4;

fn evaluate(layout: &Layout, params: &[f64], data: &[Sample]) -> (f64, f64) {
    if data.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let per: Vec<(f64, bool)> = data
        .par_iter()
        .map(|s| {
            let p = softmax_unchecked(&network::logits(layout, params, &s.input));
            (-p[s.target].max(f64::MIN_POSITIVE).ln(), argmax(&p) == s.target)
        })
        .collect();
    let n = per.len() as f64;
    let loss = per.iter().map(|(l, _)| l).sum::<f64>() / n;
    let acc = per.iter().filter(|(_, c)| *c).count() as f64 / n;
    (loss, acc)
}

struct StageContext<'a> {
    stage: u8,
    lr: f64,
    train_backbone: bool,
    train: &'a [Sample],
    val: &'a [Sample],
}

fn run_stage(
    model: &mut TrainedModel,
    ctx: StageContext<'_>,
    rng: &mut ChaCha8Rng,
    history: &mut TrainingHistory,
) -> Result<()> {
    let cfg = model.config.clone();
    let layout = model.layout.clone();
    let range = if ctx.train_backbone {
        0..layout.total_len
    } else {
        layout.backbone_len..layout.total_len
    };
    let mut adam = Adam::new(ctx.lr, range);
    let monitor = |params: &[f64]| {
        if ctx.val.is_empty() {
            evaluate(&layout, params, ctx.train)
        } else {
            evaluate(&layout, params, ctx.val)
        }
    };

    // The weights entering the stage are the baseline to beat.
    let (initial_val_loss, _) = monitor(&model.params);
    let mut best_loss = initial_val_loss;
    let mut best_params = model.params.clone();
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut epochs_run = 0;
    let feature_len = layout.feature_len();
    let mut order: Vec<usize> = (0..ctx.train.len()).collect();

    for epoch in 1..=cfg.max_epochs_per_stage {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let draws: Vec<(u64, Vec<f64>)> = batch
                .iter()
                .map(|_| {
                    let aug_seed = rng.next_u64();
                    (aug_seed, network::dropout_mask(feature_len, cfg.dropout_rate, rng))
                })
                .collect();
            let params = &model.params;
            let partials: Vec<(Vec<f64>, f64, usize)> = batch
                .par_chunks(GRAD_CHUNK)
                .zip(draws.par_chunks(GRAD_CHUNK))
                .map(|(idxs, draws)| {
                    let mut grads = vec![0.0; layout.total_len];
                    let mut loss = 0.0;
                    let mut hits = 0;
                    for (&i, (aug_seed, mask)) in idxs.iter().zip(draws) {
                        let s = &ctx.train[i];
                        let input = if cfg.augmentation.is_identity() {
                            s.input.clone()
                        } else {
                            augment::apply(&s.input, &AugmentParams::sample(&cfg.augmentation, *aug_seed))
                        };
                        let trace = network::forward_train(&layout, params, &input, mask.clone());
                        if argmax(&trace.logits) == s.target {
                            hits += 1;
                        }
                        loss += network::backward(&layout, params, &trace, s.target, ctx.train_backbone, &mut grads);
                    }
                    (grads, loss, hits)
                })
                .collect();

            let mut grads = vec![0.0; layout.total_len];
            for (g, l, h) in partials {
                for (acc, v) in grads.iter_mut().zip(&g) {
                    *acc += v;
                }
                loss_sum += l;
                correct += h;
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= scale);
            adam.step(&mut model.params, &grads);
        }
        epochs_run = epoch;

        let n = ctx.train.len() as f64;
        let train_loss = loss_sum / n;
        if !train_loss.is_finite() {
            return Err(Error::TrainingDiverged {
                stage: ctx.stage,
                epoch,
            });
        }
        let (val_loss, val_acc) = if ctx.val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            evaluate(&layout, &model.params, ctx.val)
        };
        let (monitored, _) = if ctx.val.is_empty() {
            monitor(&model.params)
        } else {
            (val_loss, val_acc)
        };
        if !monitored.is_finite() {
            return Err(Error::TrainingDiverged {
                stage: ctx.stage,
                epoch,
            });
        }
        history.epochs.push(EpochRecord {
            epoch,
            stage: ctx.stage,
            train_loss,
            val_loss,
            train_acc: correct as f64 / n,
            val_acc,
        });
        log::info!(
            "stage {} epoch {epoch}: train_loss={train_loss:.4} val_loss={val_loss:.4} val_acc={val_acc:.3}",
            ctx.stage
        );

        if monitored < best_loss {
            best_loss = monitored;
            best_params.clone_from(&model.params);
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }

    model.params = best_params;
    history.stages.push(StageSummary {
        stage: ctx.stage,
        learning_rate: ctx.lr,
        epochs_run,
        best_epoch,
        initial_val_loss,
        best_val_loss: best_loss,
        stopped_early: epochs_run < cfg.max_epochs_per_stage,
    });
    Ok(())
}

/// Stratified hold-out: from each class with at least two images,
/// `max(1, round(fraction * n))` images go to validation.
fn holdout(targets: &[usize], fraction: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, t) in targets.iter().enumerate() {
        by_class.entry(*t).or_default().push(i);
    }
    let mut is_val = vec![false; targets.len()];
    for idxs in by_class.values_mut() {
        if idxs.len() < 2 {
            continue;
        }
        idxs.shuffle(rng);
        let n_val = ((fraction * idxs.len() as f64).round() as usize).clamp(1, idxs.len() - 1);
        for &i in &idxs[..n_val] {
            is_val[i] = true;
        }
    }
    is_val
}

fn load_samples(model: &TrainedModel, manifest: &DatasetManifest) -> Result<Vec<Sample>> {
    let schema = model.schema();
    let records = manifest.records_with_role(SplitRole::Train);
    records
        .par_iter()
        .map(|r| {
            let label = r.label(model.method).ok_or_else(|| Error::MissingLabel {
                image_id: r.image_id.clone(),
                method: model.method.id().to_string(),
            })?;
            let target = schema.index_of(label.as_str()).ok_or_else(|| {
                Error::Validation(format!("{}: label {label} not in schema", r.image_id))
            })?;
            let img = load_record_image(manifest, r)?;
            Ok(Sample {
                input: model.preprocessing.to_tensor(&img),
                target,
            })
        })
        .collect()
}

/// Runs both training stages on the train split of `manifest` and returns the
/// trained model with its history and backbone fingerprints.
pub fn train_two_step(mut model: TrainedModel, manifest: &DatasetManifest) -> Result<TrainedModel> {
    model.config.validate()?;
    if manifest.split.is_none() {
        return Err(Error::Validation("manifest has no train/test split".into()));
    }
    let samples = load_samples(&model, manifest)?;
    if samples.is_empty() {
        return Err(Error::NoData);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
    let targets: Vec<usize> = samples.iter().map(|s| s.target).collect();
    let is_val = holdout(&targets, model.config.validation_fraction, &mut rng);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (sample, v) in samples.into_iter().zip(is_val) {
        if v {
            val.push(sample);
        } else {
            train.push(sample);
        }
    }
    if train.is_empty() {
        return Err(Error::NoData);
    }

    let mut history = TrainingHistory {
        train_images: train.len(),
        val_images: val.len(),
        ..Default::default()
    };
    let (lr1, lr2) = (model.config.lr_stage1, model.config.lr_stage2);

    run_stage(
        &mut model,
        StageContext {
            stage: 1,
            lr: lr1,
            train_backbone: false,
            train: &train,
            val: &val,
        },
        &mut rng,
        &mut history,
    )?;
    model.fingerprints.backbone_prestage2 = Some(fingerprint(model.backbone_params()));

    run_stage(
        &mut model,
        StageContext {
            stage: 2,
            lr: lr2,
            train_backbone: true,
            train: &train,
            val: &val,
        },
        &mut rng,
        &mut history,
    )?;
    model.fingerprints.backbone_final = Some(fingerprint(model.backbone_params()));
    model.history = history;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_touches_only_its_range() {
        let mut params = vec![1.0; 6];
        let grads = vec![0.5; 6];
        let mut adam = Adam::new(0.1, 2..6);
        adam.step(&mut params, &grads);
        assert_eq!(&params[..2], &[1.0, 1.0]);
        // First Adam step moves each coordinate by lr * sign(g) (up to eps).
        for p in &params[2..] {
            assert!((p - 0.9).abs() < 1e-6);
        }
    }

    #[test]
    fn holdout_is_stratified() {
        let targets: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = holdout(&targets, 0.1, &mut rng);
        for class in 0..4 {
            let n = targets
                .iter()
                .zip(&v)
                .filter(|(t, is_val)| **t == class && **is_val)
                .count();
            assert_eq!(n, 1);
        }
    }
}
