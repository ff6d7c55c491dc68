use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::greedy_decode;
use crate::model::{Model, ModelConfig, ModelParams, Sample, Track, Unrolled, Vocab};
use crate::numerics::seeded_rng;
use crate::optimizer::AdamState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.01,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-token cross-entropy of each epoch.
    pub epoch_losses: Vec<f64>,
}

fn example_gradient(model: &Model, sample: &Sample, scale: f64) -> Result<(f64, Vec<f64>)> {
    let mut unrolled = Unrolled::new(model, &sample.image, Track::Params)?;
    let tokens = sample.caption.tokens();
    let mut seeds = Vec::with_capacity(tokens.len());
    let mut loss = 0.0;
    for t in 0..tokens.len() {
        let node = unrolled.node(&tokens[..t])?;
        loss -= unrolled.logprobs(node)[tokens[t]];
        seeds.push((unrolled.logprob_var(node), tokens[t], -scale));
    }
    let grad = unrolled.param_gradient(&seeds)?;
    Ok((loss / tokens.len() as f64, grad))
}

/// Teacher-forced cross-entropy training with ADAM.
pub fn train_toy(
    dataset: &[Sample],
    config: &ModelConfig,
    train: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let vocab = if config.vocab_size == crate::model::SYNTHETIC_TOKENS.len() {
        Vocab::synthetic()
    } else {
        Vocab::anonymous(config.vocab_size)?
    };
    let params = ModelParams::init(config, train.seed)?;
    let mut model = Model::new(config.clone(), params, vocab)?;
    let mut adam = AdamState::new(model.params.num_values(), train.learning_rate);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = seeded_rng(train.seed ^ 0x005e_ed0f_da7a);
    let batch = train.batch_size.max(1);
    let mut report = TrainReport::default();

    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(batch).enumerate() {
            let scale = 1.0 / (chunk.len() * dataset[chunk[0]].caption.len()) as f64;
            let results: Vec<Result<(f64, Vec<f64>)>> = chunk
                .par_iter()
                .map(|&i| example_gradient(&model, &dataset[i], scale))
                .collect();
            let mut grad = vec![0.0; model.params.num_values()];
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, g) = r?;
                batch_loss += loss;
                for (acc, v) in grad.iter_mut().zip(&g) {
                    *acc += v;
                }
            }
            if !batch_loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite loss {batch_loss} at epoch {epoch}, batch {b}"
                )));
            }
            epoch_loss += batch_loss;
            let delta = adam.step(&grad)?;
            model.params.apply_delta(&delta)?;
        }
        report.epoch_losses.push(epoch_loss / dataset.len() as f64);
    }
    Ok((model, report))
}

/// Fraction of samples whose clean greedy decode equals the grammar caption.
pub fn exact_match_rate(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let hits: Result<Vec<bool>> = samples
        .par_iter()
        .map(|s| {
            let mut unrolled = Unrolled::new(model, &s.image, Track::Nothing)?;
            let decoded = greedy_decode(&mut unrolled, model.config.max_len)?;
            Ok(decoded == s.caption)
        })
        .collect();
    let hits = hits?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / samples.len() as f64)
}
