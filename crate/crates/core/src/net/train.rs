//! Seeded mini-batch training loop with per-epoch loss logging and
//! best-validation checkpoint selection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    adam_step, backward, default_keep_probs, forward, init_params, loss, AdamState, DropoutPlan,
    Mode, NetworkParams,
};
use crate::data::{batch_indices, Dataset};
use crate::{Error, Result};

/// Everything a training run depends on. Serialized into checkpoints so a
/// run can be reproduced from its artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub topology: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub use_perceptual_weights: bool,
    /// Dropout keep probability for each layer's input.
    pub keep_probs: Vec<f64>,
    /// 1 for single-frame inputs, 3 for stacked context.
    pub context_frames: usize,
    pub rng_seed: u64,
}

impl TrainingConfig {
    /// A config with everything defaulted from the topology and context.
    pub fn new(topology: Vec<usize>, context_frames: usize) -> Self {
        let keep_probs = default_keep_probs(&topology, context_frames);
        Self {
            topology,
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 256,
            use_perceptual_weights: false,
            keep_probs,
            context_frames,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.topology.len() < 2 || self.topology.contains(&0) {
            return Err(Error::InvalidArg(format!("bad topology {:?}", self.topology)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArg("batch_size must be >= 1".into()));
        }
        if self.context_frames != 1 && self.context_frames != 3 {
            return Err(Error::InvalidArg("context_frames must be 1 or 3".into()));
        }
        if self.keep_probs.len() != self.topology.len() - 1 {
            return Err(Error::InvalidArg(
                "one keep probability per layer required".into(),
            ));
        }
        if self.keep_probs.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::InvalidArg("keep probabilities must be in (0, 1]".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArg("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

fn dropout_seed(seed: u64, epoch: u64, batch: u64) -> u64 {
    seed.wrapping_mul(0x0100_0000_01b3)
        .wrapping_add(epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(batch.wrapping_mul(0x517c_c1b7_2722_0a95))
}

/// Average (optionally weighted) loss over a dataset in infer mode,
/// evaluated in fixed-size chunks in deterministic order.
pub fn dataset_loss(
    params: &NetworkParams,
    data: &Dataset,
    use_weights: bool,
) -> Result<f64> {
    let n = data.len();
    if n == 0 {
        return Err(Error::InvalidArg("empty dataset".into()));
    }
    let chunk = 1024;
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let (x, m, h) = data.gather(&idx);
        let out = super::forward_infer(params, &x)?;
        let l = loss(&out, &m, use_weights.then_some(&h))?;
        total += l * idx.len() as f64;
        start += chunk;
    }
    Ok(total / n as f64)
}

/// Trains a network on `train_set`, validating each epoch on `val_set`
/// (or on the training loss itself when no validation data exists), and
/// returns the best-validation parameters plus the full loss log.
///
/// Deterministic in `config.rng_seed`: initialization, shuffling, and
/// dropout all derive from it. With `epochs == 0` the freshly initialized
/// parameters come back untouched and the log is empty.
pub fn train(
    config: &TrainingConfig,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
) -> Result<(NetworkParams, Vec<EpochLoss>)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if train_set.inputs.nrows() != config.topology[0] {
        return Err(Error::Shape(format!(
            "dataset input dim {} vs topology[0] = {}",
            train_set.inputs.nrows(),
            config.topology[0]
        )));
    }
    let mut params = init_params(&config.topology, config.rng_seed)?;
    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut log = Vec::with_capacity(config.epochs);
    let mut adam = AdamState::new(&params, config.learning_rate);
    let plan = DropoutPlan {
        keep_probs: config.keep_probs.clone(),
        rng_seed: config.rng_seed,
    };
    let val = val_set.filter(|v| !v.is_empty());

    for epoch in 0..config.epochs {
        let batches = batch_indices(
            train_set.len(),
            config.batch_size,
            config.rng_seed,
            epoch as u64,
        );
        let mut sum = 0.0;
        let mut count = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            let (x, m, h) = train_set.gather(batch);
            let mut rng =
                ChaCha8Rng::seed_from_u64(dropout_seed(plan.rng_seed, epoch as u64, bi as u64));
            let (out, cache) = forward(&params, &x, &plan, Mode::Train, &mut rng)?;
            let weights = config.use_perceptual_weights.then_some(&h);
            let batch_loss = loss(&out, &m, weights)?;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch}, batch {bi}"
                )));
            }
            let grads = backward(&params, &cache, &m, weights)?;
            adam_step(&mut params, &grads, &mut adam)?;
            sum += batch_loss * batch.len() as f64;
            count += batch.len();
        }
        let train_loss = sum / count as f64;
        let val_loss = match val {
            Some(v) => dataset_loss(&params, v, config.use_perceptual_weights)?,
            None => train_loss,
        };
        if !val_loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite validation loss at epoch {epoch}")));
        }
        if val_loss < best_val {
            best_val = val_loss;
            best = params.clone();
        }
        log.push(EpochLoss {
            epoch,
            train_loss,
            val_loss,
        });
    }
    Ok((best, log))
}

/// Writes the loss log as `epoch,train_loss,val_loss` CSV.
pub fn write_loss_log(path: impl AsRef<std::path::Path>, log: &[EpochLoss]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for row in log {
        out.push_str(&format!("{},{},{}\n", row.epoch, row.train_loss, row.val_loss));
    }
    std::fs::write(path, out).map_err(Error::io(path))
}
