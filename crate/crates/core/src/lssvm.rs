//! Latent structural SVM attack: latent completion, loss-augmented
//! inference of the most violating caption, and margin-driven noise updates.

use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::harness::{evaluate_state, AttackOutcome, TraceRecord};
use crate::inference::{latent_completion, loss_augmented_infer, PartialCaption};
use crate::model::{
    grad_wrt_noise, AdversarialState, Model, ObjectiveTerm, ReparamMode, Token, Track, Unrolled,
};
use crate::numerics::Tensor;
use crate::optimizer::{NoiseOptimizer, DEFAULT_LEARNING_RATE};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuredLossConfig {
    pub zeta: f64,
}

impl Default for StructuredLossConfig {
    fn default() -> Self {
        Self { zeta: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LssvmConfig {
    pub lambda: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub adam_steps: usize,
    pub learning_rate: f64,
    pub zeta: f64,
    pub reparam: ReparamMode,
    pub early_stop: bool,
}

impl Default for LssvmConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            outer_iterations: 10,
            inner_iterations: 10,
            adam_steps: 10,
            learning_rate: DEFAULT_LEARNING_RATE,
            zeta: StructuredLossConfig::default().zeta,
            reparam: ReparamMode::Clip,
            early_stop: true,
        }
    }
}

impl LssvmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Input(format!(
                "lambda {} must be finite and >= 0",
                self.lambda
            )));
        }
        if !(self.zeta > 0.0) || !self.zeta.is_finite() {
            return Err(Error::Input(format!(
                "zeta {} must be finite and > 0",
                self.zeta
            )));
        }
        if self.outer_iterations == 0 || self.inner_iterations == 0 {
            return Err(Error::Input(
                "outer and inner iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LssvmTrace {
    pub outer: usize,
    pub inner: usize,
    pub objective: f64,
    pub loss_aug_delta: f64,
    pub eps_norm: f64,
    pub success: bool,
}

/// `ζ` times the number of observed positions whose tokens differ.
pub fn structured_loss(target: &[Token], inferred: &[Token], zeta: f64) -> Result<f64> {
    if target.len() != inferred.len() {
        return Err(Error::Input(format!(
            "structured loss over {} targeted and {} inferred tokens",
            target.len(),
            inferred.len()
        )));
    }
    let mismatches = target.iter().zip(inferred).filter(|(a, b)| a != b).count();
    Ok(zeta * mismatches as f64)
}

fn teacher_forced(seq: &[Token], weight: f64) -> impl Iterator<Item = ObjectiveTerm> + '_ {
    (0..seq.len()).map(move |t| ObjectiveTerm::logprob(seq[..t].to_vec(), seq[t], weight))
}

/// Value and descent gradient of
/// `λ‖ε‖² + ln P(Ŝ* | ε) − ln P(S_O, S_H* | ε)`.
pub fn ssvm_objective_grad(
    model: &Model,
    completion: &[Token],
    augmented: &[Token],
    state: &AdversarialState,
    lambda: f64,
) -> Result<(f64, Tensor)> {
    if completion.len() != augmented.len() {
        return Err(Error::Input(format!(
            "completion of length {} vs augmented caption of length {}",
            completion.len(),
            augmented.len()
        )));
    }
    let terms: Vec<ObjectiveTerm> = teacher_forced(completion, 1.0)
        .chain(teacher_forced(augmented, -1.0))
        .collect();
    // ascent form of (ln P(completion) − ln P(augmented) − λ‖ε‖²), negated
    let (value, grad) = grad_wrt_noise(model, state, &terms, lambda)?;
    Ok((-value, grad.scaled(-1.0)))
}

pub fn lssvm_attack(
    model: &Model,
    image: &Tensor,
    partial: &PartialCaption,
    config: &LssvmConfig,
) -> Result<AttackOutcome> {
    config.validate()?;
    partial.validate_targeted(model.config.vocab_size)?;
    let started = Instant::now();
    let mut optimizer = NoiseOptimizer::new(image.clone(), config.reparam, config.learning_rate)?;
    let target = partial.observed_tokens();
    let mut trace = Vec::new();
    let mut last = None;
    'outer: for outer in 1..=config.outer_iterations {
        let completion = {
            let mut u = Unrolled::new(model, &optimizer.state().perturbed(), Track::Nothing)?;
            latent_completion(&mut u, partial)?
        };
        for inner in 1..=config.inner_iterations {
            let augmented = {
                let mut u = Unrolled::new(model, &optimizer.state().perturbed(), Track::Nothing)?;
                loss_augmented_infer(&mut u, partial, config.zeta)?
            };
            let delta = structured_loss(&target, &augmented.observed, config.zeta)?;
            let mut objective = 0.0;
            for step in 0..config.adam_steps {
                let (value, grad) = ssvm_objective_grad(
                    model,
                    &completion,
                    &augmented.sequence,
                    optimizer.state(),
                    config.lambda,
                )?;
                if step == 0 {
                    objective = value + delta;
                }
                optimizer.descend(&grad)?;
            }
            let (predicted, metrics) = evaluate_state(model, partial, optimizer.state())?;
            let success = metrics.succ_sign == 1;
            trace.push(TraceRecord::Lssvm(LssvmTrace {
                outer,
                inner,
                objective,
                loss_aug_delta: delta,
                eps_norm: metrics.eps_norm,
                success,
            }));
            last = Some((predicted, metrics));
            if success && config.early_stop {
                break 'outer;
            }
        }
    }
    let (predicted, metrics) = last.expect("at least one inner iteration");
    Ok(AttackOutcome::new(
        optimizer.state().noise().clone(),
        predicted,
        metrics,
        trace,
        started.elapsed(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        assert_eq!(structured_loss(&[3, 7], &[3, 7], 1.0).unwrap(), 0.0);
        assert_eq!(structured_loss(&[3, 7], &[3, 9], 1.0).unwrap(), 1.0);
        assert_eq!(structured_loss(&[1, 2, 3], &[4, 5, 6], 2.5).unwrap(), 7.5);
        assert!(structured_loss(&[1], &[1, 2], 1.0).is_err());
    }

    #[test]
    fn zeta_must_be_positive() {
        let cfg = LssvmConfig {
            zeta: 0.0,
            ..LssvmConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
