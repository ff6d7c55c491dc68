//! Logit-based comparison attacks on complete target captions, and the
//! untargeted attack that pushes the clean caption's likelihood down.

use serde::{Deserialize, Serialize};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::harness::{evaluate_state, AttackOutcome, TraceRecord};
use crate::inference::{greedy_decode, PartialCaption};
use crate::model::{
    grad_wrt_noise, AdversarialState, Caption, Model, ObjectiveTerm, ReparamMode, Token, Track,
    Unrolled,
};
use crate::numerics::Tensor;
use crate::optimizer::{NoiseOptimizer, DEFAULT_LEARNING_RATE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    MaxLogits,
    LogitMargin,
    Untargeted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    pub lambda: f64,
    /// Weight on the summed logit hinge.
    pub margin_constant: f64,
    pub budget: usize,
    pub learning_rate: f64,
    pub reparam: ReparamMode,
    /// Decode and test for success every this many steps.
    pub check_every: usize,
    pub early_stop: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            method: BaselineMethod::MaxLogits,
            lambda: 0.1,
            margin_constant: 10_000.0,
            budget: 500,
            learning_rate: DEFAULT_LEARNING_RATE,
            reparam: ReparamMode::Clip,
            check_every: 10,
            early_stop: true,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Input(format!(
                "lambda {} must be finite and >= 0",
                self.lambda
            )));
        }
        if self.check_every == 0 {
            return Err(Error::Input("check_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineTrace {
    pub step: usize,
    pub objective: f64,
    pub eps_norm: f64,
    pub success: bool,
}

/// Value and ascent gradient of `Σ_t z_{t, s_t} − λ‖ε‖²` under teacher forcing.
pub fn logits_objective(
    model: &Model,
    target: &Caption,
    state: &AdversarialState,
    lambda: f64,
) -> Result<(f64, Tensor)> {
    let seq = target.tokens();
    let terms: Vec<ObjectiveTerm> = (0..seq.len())
        .map(|t| ObjectiveTerm::logit(seq[..t].to_vec(), seq[t], 1.0))
        .collect();
    grad_wrt_noise(model, state, &terms, lambda)
}

/// Per step, the strongest rival of the targeted token when its hinge is
/// active (rival logit above the target's), under teacher forcing.
fn active_rivals(unrolled: &mut Unrolled<'_>, seq: &[Token]) -> Result<Vec<Option<Token>>> {
    let mut out = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        let node = unrolled.node(&seq[..t])?;
        let z = unrolled.logits(node);
        let s = seq[t];
        let rival = (0..z.len())
            .filter(|&k| k != s)
            .fold(None, |best: Option<usize>, k| match best {
                Some(b) if z[b] >= z[k] => Some(b),
                _ => Some(k),
            })
            .ok_or_else(|| Error::Input("logit margin needs at least two tokens".into()))?;
        out.push((z[rival] > z[s]).then_some(rival));
    }
    Ok(out)
}

/// Active hinge rivals of `target` at `state`; `None` where the target already wins.
pub fn margin_active_set(
    model: &Model,
    target: &Caption,
    state: &AdversarialState,
) -> Result<Vec<Option<Token>>> {
    let mut unrolled = Unrolled::new(model, &state.perturbed(), Track::Nothing)?;
    active_rivals(&mut unrolled, target.tokens())
}

/// Value and descent gradient of
/// `c · Σ_t max(0, max_{k≠s_t} z_{t,k} − z_{t,s_t}) + λ‖ε‖²`.
pub fn logit_margin_objective(
    model: &Model,
    target: &Caption,
    state: &AdversarialState,
    lambda: f64,
    margin_constant: f64,
) -> Result<(f64, Tensor)> {
    let seq = target.tokens();
    let mut unrolled = Unrolled::new(model, &state.perturbed(), Track::Pixels)?;
    let mut terms = Vec::new();
    for (t, rival) in active_rivals(&mut unrolled, seq)?.into_iter().enumerate() {
        if let Some(rival) = rival {
            terms.push(ObjectiveTerm::logit(
                seq[..t].to_vec(),
                rival,
                -margin_constant,
            ));
            terms.push(ObjectiveTerm::logit(
                seq[..t].to_vec(),
                seq[t],
                margin_constant,
            ));
        }
    }
    let (value, seeds) = unrolled.evaluate(&terms)?;
    let mut grad = unrolled.pixel_gradient(&seeds)?;
    for (g, e) in grad.iter_mut().zip(state.noise().data()) {
        *g = -*g + 2.0 * lambda * e;
    }
    let value = -value + lambda * state.noise().sum_sq();
    if !value.is_finite() {
        return Err(Error::Numerical(format!("logit margin objective {value}")));
    }
    Ok((value, Tensor::new(state.base().shape().to_vec(), grad)?))
}

/// Value and descent gradient of `ln P(S₀ | ε) + λ‖ε‖²`.
pub fn untargeted_objective(
    model: &Model,
    clean: &Caption,
    state: &AdversarialState,
    lambda: f64,
) -> Result<(f64, Tensor)> {
    let seq = clean.tokens();
    let terms: Vec<ObjectiveTerm> = (0..seq.len())
        .map(|t| ObjectiveTerm::logprob(seq[..t].to_vec(), seq[t], -1.0))
        .collect();
    let (value, grad) = grad_wrt_noise(model, state, &terms, lambda)?;
    Ok((-value, grad.scaled(-1.0)))
}

enum Direction {
    Ascend,
    Descend,
}

fn run_targeted<F>(
    model: &Model,
    image: &Tensor,
    target: &Caption,
    config: &BaselineConfig,
    direction: Direction,
    objective: F,
) -> Result<AttackOutcome>
where
    F: Fn(&AdversarialState) -> Result<(f64, Tensor)>,
{
    config.validate()?;
    let partial = PartialCaption::complete(target.tokens())?;
    partial.validate_targeted(model.config.vocab_size)?;
    let started = Instant::now();
    let mut optimizer = NoiseOptimizer::new(image.clone(), config.reparam, config.learning_rate)?;
    let mut trace = Vec::new();
    let mut last = evaluate_state(model, &partial, optimizer.state())?;
    for step in 1..=config.budget {
        let (value, grad) = objective(optimizer.state())?;
        match direction {
            Direction::Ascend => optimizer.ascend(&grad)?,
            Direction::Descend => optimizer.descend(&grad)?,
        }
        if step % config.check_every == 0 || step == config.budget {
            last = evaluate_state(model, &partial, optimizer.state())?;
            let success = last.1.succ_sign == 1;
            trace.push(TraceRecord::Baseline(BaselineTrace {
                step,
                objective: value,
                eps_norm: last.1.eps_norm,
                success,
            }));
            if success && config.early_stop {
                break;
            }
        }
    }
    let (predicted, metrics) = last;
    Ok(AttackOutcome::new(
        optimizer.state().noise().clone(),
        predicted,
        metrics,
        trace,
        started.elapsed(),
    ))
}

pub fn logits_attack(
    model: &Model,
    image: &Tensor,
    target: &Caption,
    config: &BaselineConfig,
) -> Result<AttackOutcome> {
    run_targeted(model, image, target, config, Direction::Ascend, |s| {
        logits_objective(model, target, s, config.lambda)
    })
}

pub fn logit_margin_attack(
    model: &Model,
    image: &Tensor,
    target: &Caption,
    config: &BaselineConfig,
) -> Result<AttackOutcome> {
    run_targeted(model, image, target, config, Direction::Descend, |s| {
        logit_margin_objective(model, target, s, config.lambda, config.margin_constant)
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UntargetedOutcome {
    pub noise: Tensor,
    pub clean: Caption,
    pub predicted: Caption,
    pub changed: bool,
    pub clean_logprob: f64,
    pub final_logprob: f64,
    pub eps_norm: f64,
    pub trace: Vec<TraceRecord>,
    pub wall_time: Duration,
}

impl UntargetedOutcome {
    pub fn logprob_drop(&self) -> f64 {
        self.clean_logprob - self.final_logprob
    }
}

fn clean_caption_logprob(model: &Model, state: &AdversarialState, clean: &Caption) -> Result<f64> {
    let mut unrolled = Unrolled::new(model, &state.perturbed(), Track::Nothing)?;
    unrolled.sequence_logprob(clean.tokens())
}

/// Descends on the clean caption's log-likelihood until the greedy decode changes.
pub fn untargeted_attack(
    model: &Model,
    image: &Tensor,
    config: &BaselineConfig,
) -> Result<UntargetedOutcome> {
    config.validate()?;
    let started = Instant::now();
    let mut optimizer = NoiseOptimizer::new(image.clone(), config.reparam, config.learning_rate)?;
    let decode = |state: &AdversarialState| -> Result<Caption> {
        let mut u = Unrolled::new(model, &state.perturbed(), Track::Nothing)?;
        greedy_decode(&mut u, model.config.max_len)
    };
    let clean = decode(optimizer.state())?;
    let clean_logprob = clean_caption_logprob(model, optimizer.state(), &clean)?;
    let mut predicted = clean.clone();
    let mut trace = Vec::new();
    for step in 1..=config.budget {
        let (value, grad) = untargeted_objective(model, &clean, optimizer.state(), config.lambda)?;
        optimizer.descend(&grad)?;
        if step % config.check_every == 0 || step == config.budget {
            predicted = decode(optimizer.state())?;
            let changed = predicted != clean;
            trace.push(TraceRecord::Baseline(BaselineTrace {
                step,
                objective: value,
                eps_norm: optimizer.state().noise_norm(),
                success: changed,
            }));
            if changed && config.early_stop {
                break;
            }
        }
    }
    let final_logprob = clean_caption_logprob(model, optimizer.state(), &clean)?;
    Ok(UntargetedOutcome {
        noise: optimizer.state().noise().clone(),
        changed: predicted != clean,
        clean,
        predicted,
        clean_logprob,
        final_logprob,
        eps_norm: optimizer.state().noise_norm(),
        trace,
        wall_time: started.elapsed(),
    })
}
