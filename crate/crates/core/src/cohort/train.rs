use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{import_2d_vit, NamedTensors};
use crate::encoder::{loss_and_grads, predict, ModelParams, ViTConfig};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::stats::{ScoredCohort, FOLDS};
use crate::tokenizer::Volume;

use super::FoldSplit;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "VOLFORMER_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Samples per batch; half cases, half controls.
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Epochs of linear learning-rate warmup before the cosine decay.
    pub warmup_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: 10,
            batch_size: 8,
            weight_decay: 0.05,
            warmup_epochs: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be positive"));
        }
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return Err(Error::invalid(format!(
                "batch size must be even and positive, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }

    /// Learning rate for optimizer step `step` of `total`: linear warmup
    /// over the first `warmup` steps, then cosine decay to zero.
    pub fn lr_at(&self, step: usize, warmup: usize, total: usize) -> f64 {
        if step < warmup {
            return self.lr * (step + 1) as f64 / warmup as f64;
        }
        let progress = (step - warmup) as f64 / (total - warmup).max(1) as f64;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// A matched case and control with their volumes loaded.
#[derive(Clone, Debug)]
pub struct VolumePair {
    pub case_id: String,
    pub control_id: String,
    pub case: Volume,
    pub control: Volume,
}

/// AdamW with decoupled weight decay applied to weight matrices (`*.w`)
/// only.
#[derive(Clone, Debug)]
pub struct AdamW {
    lr: f64,
    weight_decay: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new<T: crate::tensor::Real>(params: &ModelParams<T>, lr: f64, weight_decay: f64) -> Self {
        let named = params.named();
        AdamW {
            lr,
            weight_decay,
            step: 0,
            m: named.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: named.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            decay: named.iter().map(|(n, _)| n.ends_with(".w")).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut ModelParams<f32>, grads: &ModelParams<f32>) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        let grads = grads.named();
        for (i, w) in params.tensors_mut().into_iter().enumerate() {
            let g = grads[i].1.data();
            let decay = if self.decay[i] { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in w.data_mut().iter_mut().enumerate() {
                let gj = g[j] as f64;
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS) + decay * *w as f64;
                *w = (*w as f64 - self.lr * update) as f32;
            }
        }
    }
}

/// Worker count: `VOLFORMER_THREADS` if set to a positive integer, else
/// every available core.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn pool() -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

fn divergence(err: Error, epoch: usize, batch: usize) -> Error {
    if err.is_numeric() {
        Error::Divergence {
            epoch,
            batch,
            loss: f64::NAN,
        }
    } else {
        err
    }
}

/// Per-epoch progress passed to [`train_with`].
#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Mini-batch AdamW on the binary cross-entropy loss, with linear warmup
/// and cosine decay. Returns the trained parameters and the mean training
/// loss of each epoch.
pub fn train(
    params: ModelParams<f32>,
    pairs: &[VolumePair],
    cfg: &ViTConfig,
    tc: &TrainConfig,
) -> Result<(ModelParams<f32>, Vec<f64>)> {
    train_with(params, pairs, cfg, tc, |_| {})
}

/// [`train`] with a callback after each epoch.
pub fn train_with(
    params: ModelParams<f32>,
    pairs: &[VolumePair],
    cfg: &ViTConfig,
    tc: &TrainConfig,
    on_epoch: impl FnMut(EpochStats),
) -> Result<(ModelParams<f32>, Vec<f64>)> {
    let refs: Vec<&VolumePair> = pairs.iter().collect();
    train_refs(params, &refs, cfg, tc, on_epoch)
}

fn train_refs(
    mut params: ModelParams<f32>,
    pairs: &[&VolumePair],
    cfg: &ViTConfig,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(EpochStats),
) -> Result<(ModelParams<f32>, Vec<f64>)> {
    tc.validate()?;
    params.check_config(cfg)?;
    if pairs.is_empty() {
        return Err(Error::invalid("no training pairs"));
    }
    let pool = pool()?;
    let mut opt = AdamW::new(&params, tc.lr, tc.weight_decay);
    let pairs_per_batch = tc.batch_size / 2;
    let steps_per_epoch = pairs.len().div_ceil(pairs_per_batch);
    let (warmup, total) = (tc.warmup_epochs * steps_per_epoch, tc.epochs * steps_per_epoch);
    let mut history = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        SeededRng::derive(tc.seed, epoch as u64).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for (batch, chunk) in order.chunks(pairs_per_batch).enumerate() {
            let samples: Vec<(&Volume, u8)> = chunk
                .iter()
                .flat_map(|&i| [(&pairs[i].case, 1u8), (&pairs[i].control, 0u8)])
                .collect();
            let results: Vec<Result<(f64, ModelParams<f32>)>> = pool.install(|| {
                samples
                    .par_iter()
                    .map(|(v, label)| loss_and_grads(v, *label, &params, cfg))
                    .collect()
            });
            let mut grads = params.zeros_like();
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, g) = r.map_err(|e| divergence(e, epoch, batch))?;
                batch_loss += loss;
                grads.accumulate(&g)?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch,
                    loss: batch_loss,
                });
            }
            grads.scale(1.0 / samples.len() as f32);
            opt.set_lr(tc.lr_at(epoch * steps_per_epoch + batch, warmup, total));
            opt.step(&mut params, &grads);
            if params.first_non_finite().is_some() {
                return Err(Error::Divergence {
                    epoch,
                    batch,
                    loss: batch_loss / samples.len() as f64,
                });
            }
            epoch_loss += batch_loss;
        }
        let mean_loss = epoch_loss / (2 * pairs.len()) as f64;
        on_epoch(EpochStats { epoch, mean_loss });
        history.push(mean_loss);
    }
    Ok((params, history))
}

/// Case probabilities for every volume of `pairs`, as a cohort in pair
/// order (case then control), with matching subject ids.
pub fn score_pairs(
    params: &ModelParams<f32>,
    pairs: &[&VolumePair],
    cfg: &ViTConfig,
) -> Result<(Vec<String>, ScoredCohort)> {
    let pool = pool()?;
    let samples: Vec<(&str, &Volume, u8)> = pairs
        .iter()
        .flat_map(|p| [(p.case_id.as_str(), &p.case, 1u8), (p.control_id.as_str(), &p.control, 0u8)])
        .collect();
    let scores: Vec<Result<f64>> = pool.install(|| samples.par_iter().map(|(_, v, _)| predict(v, params, cfg)).collect());
    let scores = scores.into_iter().collect::<Result<Vec<f64>>>()?;
    let ids = samples.iter().map(|s| s.0.to_string()).collect();
    let labels = samples.iter().map(|s| s.2).collect();
    Ok((ids, ScoredCohort::new(scores, labels)?))
}

/// One fold's trained model and its held-out predictions.
#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    pub params: ModelParams<f32>,
    pub history: Vec<f64>,
    pub ids: Vec<String>,
    pub cohort: ScoredCohort,
}

/// Seed for fold `f`'s head initialization and batch order.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    SeededRng::derive(seed, 0x464f_4c44 + fold as u64).next_u64()
}

/// Six-fold cross-validation: for each fold, import `archive` afresh,
/// train on the other five folds and score the held-out one.
pub fn cross_validate(
    archive: &NamedTensors,
    pairs: &[VolumePair],
    split: &FoldSplit,
    cfg: &ViTConfig,
    tc: &TrainConfig,
) -> Result<Vec<FoldOutcome>> {
    cross_validate_with(archive, pairs, split, cfg, tc, |_, _| {})
}

/// [`cross_validate`] with a per-epoch callback receiving the fold index.
pub fn cross_validate_with(
    archive: &NamedTensors,
    pairs: &[VolumePair],
    split: &FoldSplit,
    cfg: &ViTConfig,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(usize, EpochStats),
) -> Result<Vec<FoldOutcome>> {
    tc.validate()?;
    split.validate(pairs.len())?;
    let geometry = pairs[0].case.geometry();
    let mut out = Vec::with_capacity(FOLDS);
    for fold in 0..FOLDS {
        let seed = fold_seed(tc.seed, fold);
        let (params, _) = import_2d_vit(archive, geometry, cfg, &mut SeededRng::new(seed))?;
        let train_pairs: Vec<&VolumePair> = split.training_pairs(fold).into_iter().map(|i| &pairs[i]).collect();
        let fold_tc = TrainConfig { seed, ..tc.clone() };
        let (params, history) = train_refs(params, &train_pairs, cfg, &fold_tc, |s| on_epoch(fold, s))?;
        let held_out: Vec<&VolumePair> = split.folds[fold].iter().map(|&i| &pairs[i]).collect();
        let (ids, cohort) = score_pairs(&params, &held_out, cfg)?;
        out.push(FoldOutcome {
            fold,
            params,
            history,
            ids,
            cohort,
        });
    }
    Ok(out)
}
