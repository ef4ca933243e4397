use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::backward_ce;
use super::model::Trainable;
use super::optim::{sgd_step, Sgd};
use crate::data::Dataset;
use crate::error::{config, Result};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub batch_size: usize,
}

pub(crate) fn default_momentum() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Accuracy (percent) of the predictions made while training the epoch.
    pub accuracy: f64,
}

/// Per-epoch Fisher–Yates shuffle of `0..n` cut into batches; the remainder
/// forms a short final batch.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Minibatch cross-entropy training of every trainable parameter.
pub fn train<T: Trainable + ?Sized>(
    net: &mut T,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<EpochLog>> {
    if data.is_empty() {
        return Err(config("cannot train on an empty dataset"));
    }
    if cfg.batch_size == 0 {
        return Err(config("batch_size must be positive"));
    }
    let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;
    let mut rng = stream(seed, Stream::Shuffle);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in epoch_batches(data.len(), cfg.batch_size, &mut rng) {
            let (x, y) = data.batch(&batch);
            let model = net.effective_model();
            let trace = model.forward_trace(&x)?;
            correct += crate::metrics::argmax_rows(&trace.output)
                .iter()
                .zip(&y)
                .filter(|(p, t)| p == t)
                .count();
            let (loss, grads) = backward_ce(&model, &x, &y)?;
            let tg = net.trainable_grads(&grads)?;
            drop(model);
            sgd_step(net, &mut opt, &tg)?;
            loss_sum += loss * batch.len() as f64;
        }
        let entry = EpochLog {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: 100.0 * correct as f64 / data.len() as f64,
        };
        log::debug!("epoch {epoch}: loss {:.4} acc {:.2}", entry.loss, entry.accuracy);
        log.push(entry);
    }
    Ok(log)
}
