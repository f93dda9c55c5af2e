//! Training: losses, dual-corpus sampling, augmentation and the loop.
//!
//! Each step draws `batch_size` indices, augments every sample with its own
//! RNG, runs [`Network::restricted_forward`] so encoder gradients only flow
//! through the target and the `grad_context_depth` most recent context
//! frames, and applies one Adam update with the batch-mean gradient.
//!
//! Randomness: the index stream comes from a ChaCha8 generator seeded with
//! `seed`; the augmentation RNG of batch slot `j` at step `s` is seeded with
//! [`derive_seed`]`(seed, s, j)`. Results therefore do not depend on how many
//! worker threads evaluate a batch.

pub mod augment;
pub mod loss;
pub mod sampler;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use augment::{augment, AugmentConfig, AugmentDraw};
pub use loss::{cross_entropy, segmentation_loss, separation, LossBreakdown, LossOutput};
pub use sampler::BatchSampler;

use crate::datamodel::{load_sample, CorpusManifest, Subset, TemporalSample};
use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate every `lr_step_epochs` epochs.
    pub lr_decay: f64,
    pub lr_step_epochs: usize,
    pub seed: u64,
    pub separation_loss_weight: f64,
    pub augment: AugmentConfig,
    /// Context frames (most recent first) whose encoder pass receives gradients.
    pub grad_context_depth: usize,
    /// Draw base and extension entries with equal probability.
    pub equal_subset_sampling: bool,
    /// Global gradient-norm clip; `0` disables clipping.
    pub max_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 4,
            learning_rate: 2e-3,
            lr_decay: 0.5,
            lr_step_epochs: 15,
            seed: 0,
            separation_loss_weight: 0.01,
            augment: AugmentConfig::default(),
            grad_context_depth: 1,
            equal_subset_sampling: true,
            max_grad_norm: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, net: &NetworkConfig) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.lr_decay > 0.0) || self.lr_step_epochs == 0 {
            return Err(Error::Config("invalid learning-rate schedule".into()));
        }
        if !(self.separation_loss_weight >= 0.0) {
            return Err(Error::Config("separation_loss_weight must be non-negative".into()));
        }
        if net.context_len > 0 && self.grad_context_depth > net.context_len {
            return Err(Error::Config(format!(
                "grad_context_depth {} exceeds T = {}",
                self.grad_context_depth, net.context_len
            )));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.lr_step_epochs) as i32)
    }
}

/// One line of the loss-curve log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    pub cross_entropy: f64,
    pub separation: f64,
    pub learning_rate: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub losses: Vec<LossRecord>,
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the augmentation RNG of batch slot `slot` at `step`.
pub fn derive_seed(seed: u64, step: usize, slot: usize) -> u64 {
    mix(seed ^ mix(((step as u64) << 20) ^ slot as u64))
}

#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        self.t += 1;
        let g = grads.to_flat();
        let bc1 = 1.0 - Self::BETA1.powi(self.t);
        let bc2 = 1.0 - Self::BETA2.powi(self.t);
        let mut i = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        params.for_each_mut(|_, _, data| {
            for p in data.iter_mut() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                *p -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + Self::EPS);
                i += 1;
            }
        });
    }
}

enum IndexSource {
    Balanced(BatchSampler),
    Uniform(ChaCha8Rng, usize),
}

impl IndexSource {
    fn batch(&mut self, k: usize) -> Vec<usize> {
        match self {
            IndexSource::Balanced(s) => s.sample_batch(k),
            IndexSource::Uniform(rng, n) => (0..k).map(|_| rng.random_range(0..*n)).collect(),
        }
    }
}

/// Loss and gradients of one (already augmented) sample.
pub fn sample_gradients(
    net: &Network,
    sample: &TemporalSample,
    separation_weight: f64,
    grad_context_depth: usize,
) -> Result<(LossBreakdown, Params)> {
    let gt = &sample
        .annotation
        .as_ref()
        .ok_or_else(|| Error::Data("training sample has no annotation".into()))?
        .mask;
    let trace = net.restricted_forward(sample, grad_context_depth)?;
    let out = segmentation_loss(trace.scores().view(), Some(trace.fused().view()), gt, separation_weight)?;
    let grads = net.backward(&trace, &out.dscores, out.dfeatures.as_ref());
    Ok((out.breakdown, grads))
}

/// Trains on in-memory samples. `subsets[i]` tags `samples[i]`.
pub fn train_samples(
    samples: &[TemporalSample],
    subsets: &[Subset],
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    net_cfg.validate()?;
    cfg.validate(net_cfg)?;
    if samples.is_empty() || samples.len() != subsets.len() {
        return Err(Error::Config(format!(
            "need a non-empty sample list with one subset tag each ({} samples, {} tags)",
            samples.len(),
            subsets.len()
        )));
    }
    let samples: Vec<TemporalSample> = samples
        .iter()
        .map(|s| s.truncate_context(net_cfg.context_len))
        .collect::<Result<_>>()?;

    let mut network = Network::init(net_cfg.clone(), cfg.seed)?;
    let base: Vec<usize> = (0..subsets.len()).filter(|&i| subsets[i] == Subset::Base).collect();
    let ext: Vec<usize> = (0..subsets.len()).filter(|&i| subsets[i] == Subset::Extension).collect();
    let mut source = if cfg.equal_subset_sampling && !base.is_empty() && !ext.is_empty() {
        IndexSource::Balanced(BatchSampler::new(base, ext, cfg.seed)?)
    } else {
        if cfg.equal_subset_sampling {
            log::warn!("one corpus subset is empty; sampling uniformly over all entries");
        }
        IndexSource::Uniform(ChaCha8Rng::seed_from_u64(cfg.seed), samples.len())
    };

    let depth = cfg.grad_context_depth.min(net_cfg.context_len);
    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let mut adam = Adam::new(network.params().num_parameters());
    let mut losses = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        for _ in 0..steps_per_epoch {
            let indices = source.batch(cfg.batch_size);
            let net = &network;
            let results: Vec<Result<(LossBreakdown, Params)>> = indices
                .par_iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, step, slot));
                    let sample = augment(&samples[i], &cfg.augment, &mut rng);
                    sample_gradients(net, &sample, cfg.separation_loss_weight, depth)
                })
                .collect();

            let mut grads = Params::zeros(net_cfg);
            let mut total = LossBreakdown {
                total: 0.0,
                cross_entropy: 0.0,
                separation: 0.0,
            };
            for r in results {
                let (b, g) = r?;
                total.total += b.total;
                total.cross_entropy += b.cross_entropy;
                total.separation += b.separation;
                grads.add_scaled(&g, 1.0);
            }
            let k = indices.len() as f64;
            grads.scale(1.0 / k);
            if !total.total.is_finite() || !grads.is_finite() {
                return Err(Error::NonFiniteLoss { step, epoch });
            }
            if cfg.max_grad_norm > 0.0 {
                let norm = grads.l2_norm();
                if norm > cfg.max_grad_norm {
                    grads.scale(cfg.max_grad_norm / norm);
                }
            }
            adam.step(network.params_mut(), &grads, lr);
            losses.push(LossRecord {
                step,
                epoch,
                total: total.total / k,
                cross_entropy: total.cross_entropy / k,
                separation: total.separation / k,
                learning_rate: lr,
            });
            step += 1;
        }
        log::debug!(
            "epoch {epoch}: mean loss {:.4}",
            losses[losses.len() - steps_per_epoch..].iter().map(|r| r.total).sum::<f64>() / steps_per_epoch as f64
        );
    }
    Ok(TrainOutcome { network, losses })
}

/// Loads every manifest entry into memory and trains on it.
pub fn train(manifest: &CorpusManifest, net_cfg: &NetworkConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    net_cfg.validate()?;
    cfg.validate(net_cfg)?;
    if net_cfg.context_len > manifest.context_len {
        return Err(Error::Config(format!(
            "network needs T = {} context frames, manifest provides {}",
            net_cfg.context_len, manifest.context_len
        )));
    }
    let samples = (0..manifest.len())
        .map(|i| load_sample(manifest, i))
        .collect::<Result<Vec<_>>>()?;
    let subsets: Vec<Subset> = manifest.entries.iter().map(|e| e.subset).collect();
    train_samples(&samples, &subsets, net_cfg, cfg)
}

/// Appends records to a line-delimited JSON log.
pub fn append_loss_log(records: &[LossRecord], path: &Path) -> Result<()> {
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Serde(e.to_string()))?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
