use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_loss_and_grad, mean_loss, ModelConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::prep::{standardize, Split, TrainingCorpus};
use crate::uncert::{latent_stats, LatentStats};

/// Adam with the usual bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ModelWeights) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ModelWeights, grad: &ModelWeights, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grad.tensors())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub learning_rate: f64,
}

/// Per-epoch losses. Entry 0 holds the losses of the initial weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub chosen_epoch: usize,
    /// Early stopping monitored the training loss because no validation
    /// examples were supplied.
    pub monitored_train_loss: bool,
}

impl TrainingHistory {
    pub fn chosen(&self) -> &EpochRecord {
        &self.epochs[self.chosen_epoch]
    }

    fn monitored(&self, r: &EpochRecord) -> f64 {
        if self.monitored_train_loss {
            r.train_loss
        } else {
            r.validation_loss
        }
    }
}

fn standardized(corpus: &TrainingCorpus, split: Split) -> Result<Vec<Vec<f64>>> {
    corpus
        .split(split)
        .map(|e| standardize(&e.values).map(|(s, _)| s.iter().copied().collect()))
        .collect()
}

/// Trains in autoencoder mode (target = input) with mean-square loss.
///
/// Weights from the epoch with the lowest validation loss are returned.
/// The learning rate is multiplied by `lr_decay_per_epoch` after every epoch.
pub fn train(corpus: &TrainingCorpus, cfg: &ModelConfig) -> Result<(ModelWeights, TrainingHistory, LatentStats)> {
    cfg.validate()?;
    if corpus.count(Split::Train) == 0 {
        return Err(Error::invalid("training corpus has no training examples"));
    }
    let side = cfg.input_side;
    if let Some(e) = corpus.examples.iter().find(|e| e.values.dim() != (side, side)) {
        return Err(Error::invalid(format!(
            "corpus example has shape {:?}, model expects {side}x{side}",
            e.values.dim()
        )));
    }
    let train_set = standardized(corpus, Split::Train)?;
    let val_set = standardized(corpus, Split::Validation)?;
    let monitored_train_loss = val_set.is_empty();

    let mut weights = ModelWeights::init(cfg)?;
    let mut adam = Adam::new(&weights);
    // stream 0 is consumed by the weight initialization
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut history = TrainingHistory {
        epochs: vec![EpochRecord {
            epoch: 0,
            train_loss: mean_loss(&train_set, &weights),
            validation_loss: mean_loss(&val_set, &weights),
            learning_rate: cfg.learning_rate,
        }],
        chosen_epoch: 0,
        monitored_train_loss,
    };
    let mut best = weights.clone();
    let mut best_loss = history.monitored(&history.epochs[0]);
    if !best_loss.is_finite() {
        return Err(Error::TrainingDiverged { epoch: 0 });
    }
    let mut since_best = 0;
    let mut lr = cfg.learning_rate;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| train_set[i].as_slice()).collect();
            let (loss, grad) = batch_loss_and_grad(&batch, &weights);
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            epoch_loss += loss * chunk.len() as f64;
            adam.step(&mut weights, &grad, lr);
        }
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            validation_loss: mean_loss(&val_set, &weights),
            learning_rate: lr,
        };
        lr *= cfg.lr_decay_per_epoch;
        let monitored = history.monitored(&record);
        if !monitored.is_finite() || !record.train_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        debug!(
            "epoch {epoch}: train {:.5} validation {:.5}",
            record.train_loss, record.validation_loss
        );
        history.epochs.push(record);
        if monitored < best_loss {
            best_loss = monitored;
            best = weights.clone();
            history.chosen_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                info!("early stopping after epoch {epoch}");
                break;
            }
        }
    }

    let train_inputs: Vec<_> = corpus.split(Split::Train).map(|e| e.values.clone()).collect();
    let stats = latent_stats(&train_inputs, &best)?;
    Ok((best, history, stats))
}
