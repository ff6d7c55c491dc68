//! Generalized EM attack: a factorized posterior over latent words is fitted
//! in the E-step and the noise ascends the pruned evidence lower bound in
//! the M-step.

use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::harness::{evaluate_state, AttackOutcome, TraceRecord};
use crate::inference::{
    enumerate_latent_configs, for_each_latent_assignment, oracle_space, sequence_logprob,
    PartialCaption, StepScorer,
};
use crate::model::{
    grad_wrt_noise, AdversarialState, Model, ObjectiveTerm, ReparamMode, Track, Unrolled,
};
use crate::numerics::{logsumexp, Tensor};
use crate::optimizer::{NoiseOptimizer, DEFAULT_LEARNING_RATE};

const NORMALIZATION_TOL: f64 = 1e-10;

/// One categorical distribution per latent position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorizedPosterior {
    positions: Vec<usize>,
    dists: Vec<Vec<f64>>,
}

impl FactorizedPosterior {
    pub fn from_parts(positions: Vec<usize>, dists: Vec<Vec<f64>>) -> Result<Self> {
        if positions.len() != dists.len() {
            return Err(Error::Dimension(format!(
                "{} latent positions with {} distributions",
                positions.len(),
                dists.len()
            )));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input(
                "latent positions must be strictly ascending".into(),
            ));
        }
        let q = Self { positions, dists };
        q.validate()?;
        Ok(q)
    }

    /// Uniform over `vocab` at every latent position of `partial`.
    pub fn uniform(partial: &PartialCaption, vocab: usize) -> Self {
        let positions = partial.latent_positions();
        let dists = vec![vec![1.0 / vocab as f64; vocab]; positions.len()];
        Self { positions, dists }
    }

    pub fn validate(&self) -> Result<()> {
        let vocab = self.dists.first().map_or(0, Vec::len);
        for (p, d) in self.iter() {
            if d.len() != vocab || d.is_empty() {
                return Err(Error::Dimension(format!(
                    "ragged posterior at position {p}"
                )));
            }
            if d.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Numerical(format!(
                    "invalid probability at position {p}"
                )));
            }
            let total: f64 = d.iter().sum();
            if (total - 1.0).abs() > NORMALIZATION_TOL {
                return Err(Error::Numerical(format!(
                    "posterior at position {p} sums to {total}"
                )));
            }
        }
        Ok(())
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Distribution of the `i`-th latent position.
    pub fn dist(&self, i: usize) -> &[f64] {
        &self.dists[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.positions
            .iter()
            .copied()
            .zip(self.dists.iter().map(Vec::as_slice))
    }

    /// Probability of a joint latent assignment.
    pub fn joint(&self, assignment: &[usize]) -> f64 {
        assignment
            .iter()
            .zip(&self.dists)
            .map(|(&k, d)| d[k])
            .product()
    }

    /// Sum of the per-position entropies.
    pub fn entropy(&self) -> f64 {
        self.dists
            .iter()
            .flatten()
            .filter(|p| **p > 0.0)
            .map(|p| -p * p.ln())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GemConfig {
    pub lambda: f64,
    pub iterations: usize,
    pub width: usize,
    pub adam_steps: usize,
    pub learning_rate: f64,
    pub reparam: ReparamMode,
    /// Trace the exact ELBO when `|V|^|H|` is at most this.
    pub trace_elbo_max_configs: usize,
    pub early_stop: bool,
}

impl Default for GemConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            iterations: 50,
            width: 3,
            adam_steps: 10,
            learning_rate: DEFAULT_LEARNING_RATE,
            reparam: ReparamMode::Clip,
            trace_elbo_max_configs: 64,
            early_stop: true,
        }
    }
}

impl GemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Input(format!(
                "lambda {} must be finite and >= 0",
                self.lambda
            )));
        }
        if self.iterations == 0 || self.width == 0 {
            return Err(Error::Input(
                "iterations and width must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub lower_bound: f64,
    pub kl: f64,
    pub evidence: f64,
    pub entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GemTrace {
    pub iter: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elbo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    pub eps_norm: f64,
    pub success: bool,
}

fn normalize_exp(scores: &[f64]) -> Vec<f64> {
    let z = logsumexp(scores);
    scores.iter().map(|s| (s - z).exp()).collect()
}

/// One ascending sweep: each latent position becomes the normalized
/// exponential of its expected step log-probability under the pruned
/// configurations of the (already updated) earlier latent positions.
pub fn e_step<S: StepScorer + ?Sized>(
    scorer: &mut S,
    partial: &PartialCaption,
    q: &FactorizedPosterior,
    width: usize,
) -> Result<FactorizedPosterior> {
    if q.positions() != partial.latent_positions().as_slice() {
        return Err(Error::Input(
            "posterior does not cover the latent positions".into(),
        ));
    }
    let vocab = scorer.vocab_size();
    let mut next = q.clone();
    for i in 0..next.len() {
        let pos = next.positions[i];
        let mut expected = vec![0.0; vocab];
        for config in enumerate_latent_configs(&next, width, pos) {
            let prefix = partial.fill(&config.tokens, pos);
            let logp = scorer.step_logprobs(&prefix)?;
            if logp.len() != vocab {
                return Err(Error::Dimension("step distribution has wrong width".into()));
            }
            for (e, l) in expected.iter_mut().zip(&logp) {
                *e += config.weight * l;
            }
        }
        next.dists[i] = normalize_exp(&expected);
    }
    Ok(next)
}

/// Exact lower bound, KL to the true latent posterior, evidence and entropy
/// by enumeration of every latent assignment.
pub fn elbo<S: StepScorer + ?Sized>(
    scorer: &mut S,
    partial: &PartialCaption,
    q: &FactorizedPosterior,
) -> Result<ElboReport> {
    let vocab = scorer.vocab_size();
    let latents = q.len();
    let mut joint = Vec::with_capacity(oracle_space(vocab, latents)?);
    let mut weights = Vec::with_capacity(joint.capacity());
    for_each_latent_assignment(vocab, latents, |assign| {
        let seq = partial.fill(assign, partial.len());
        joint.push(sequence_logprob(scorer, &seq)?);
        weights.push(q.joint(assign));
        Ok(())
    })?;
    let evidence = logsumexp(&joint);
    let entropy = q.entropy();
    let expected: f64 = weights
        .iter()
        .zip(&joint)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, l)| w * l)
        .sum();
    let kl: f64 = weights
        .iter()
        .zip(&joint)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, l)| w * (w.ln() - (l - evidence)))
        .sum();
    Ok(ElboReport {
        lower_bound: expected + entropy,
        kl,
        evidence,
        entropy,
    })
}

/// Weighted step terms of the pruned lower bound (entropy omitted).
pub fn m_step_terms(
    partial: &PartialCaption,
    q: &FactorizedPosterior,
    width: usize,
) -> Vec<ObjectiveTerm> {
    let mut terms = Vec::new();
    for t in 0..partial.len() {
        for config in enumerate_latent_configs(q, width, t + 1) {
            let seq = partial.fill(&config.tokens, t + 1);
            terms.push(ObjectiveTerm::logprob(
                seq[..t].to_vec(),
                seq[t],
                config.weight,
            ));
        }
    }
    terms
}

/// Value and ascent gradient of the M-step objective at `state`.
pub fn m_step_objective(
    model: &Model,
    partial: &PartialCaption,
    state: &AdversarialState,
    q: &FactorizedPosterior,
    config: &GemConfig,
) -> Result<(f64, Tensor)> {
    grad_wrt_noise(
        model,
        state,
        &m_step_terms(partial, q, config.width),
        config.lambda,
    )
}

/// `adam_steps` projected ascent steps; returns the objective before each step.
pub fn m_step(
    model: &Model,
    partial: &PartialCaption,
    optimizer: &mut NoiseOptimizer,
    q: &FactorizedPosterior,
    config: &GemConfig,
) -> Result<Vec<f64>> {
    let terms = m_step_terms(partial, q, config.width);
    let mut values = Vec::with_capacity(config.adam_steps);
    for step in 0..config.adam_steps {
        let (value, grad) = grad_wrt_noise(model, optimizer.state(), &terms, config.lambda)?;
        optimizer.ascend(&grad).map_err(|e| match e {
            Error::Numerical(msg) => Error::Numerical(format!("M-step {step}: {msg}")),
            other => other,
        })?;
        values.push(value);
    }
    Ok(values)
}

fn posterior_at(
    model: &Model,
    partial: &PartialCaption,
    state: &AdversarialState,
    q: &FactorizedPosterior,
    width: usize,
) -> Result<FactorizedPosterior> {
    if q.is_empty() {
        return Ok(q.clone());
    }
    let mut unrolled = Unrolled::new(model, &state.perturbed(), Track::Nothing)?;
    e_step(&mut unrolled, partial, q, width)
}

pub fn gem_attack(
    model: &Model,
    image: &Tensor,
    partial: &PartialCaption,
    config: &GemConfig,
) -> Result<AttackOutcome> {
    config.validate()?;
    partial.validate_targeted(model.config.vocab_size)?;
    let started = Instant::now();
    let mut optimizer = NoiseOptimizer::new(image.clone(), config.reparam, config.learning_rate)?;
    let mut q = FactorizedPosterior::uniform(partial, model.config.vocab_size);
    let exact_elbo = oracle_space(model.config.vocab_size, q.len())
        .is_ok_and(|n| n <= config.trace_elbo_max_configs);
    let mut trace = Vec::new();
    let mut last = None;
    for iter in 1..=config.iterations {
        q = posterior_at(model, partial, optimizer.state(), &q, config.width)?;
        m_step(model, partial, &mut optimizer, &q, config)?;
        let state = optimizer.state();
        let (predicted, metrics) = evaluate_state(model, partial, state)?;
        let report = if exact_elbo {
            let mut unrolled = Unrolled::new(model, &state.perturbed(), Track::Nothing)?;
            Some(elbo(&mut unrolled, partial, &q)?)
        } else {
            None
        };
        let success = metrics.succ_sign == 1;
        trace.push(TraceRecord::Gem(GemTrace {
            iter,
            elbo: report.map(|r| r.lower_bound),
            kl: report.map(|r| r.kl),
            eps_norm: metrics.eps_norm,
            success,
        }));
        last = Some((predicted, metrics));
        if success && config.early_stop {
            break;
        }
    }
    let (predicted, metrics) = last.expect("at least one iteration");
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
    use crate::inference::FnScorer;
    use crate::model::Token;
    use crate::numerics::log_softmax;

    fn table_scorer() -> FnScorer<impl FnMut(&[Token]) -> Vec<f64>> {
        FnScorer::new(4, |p: &[Token]| {
            let z: Vec<f64> = (0..4)
                .map(|k| ((k * 7 + p.iter().sum::<usize>() * 3 + p.len()) % 5) as f64 * 0.4)
                .collect();
            log_softmax(&z).unwrap()
        })
    }

    #[test]
    fn first_latent_matches_step_distribution() {
        let mut s = table_scorer();
        let partial = PartialCaption::new(3, &[(0, 2)]).unwrap();
        let q0 = FactorizedPosterior::uniform(&partial, 4);
        let q = e_step(&mut s, &partial, &q0, 4).unwrap();
        let step: Vec<f64> = s
            .step_logprobs(&[2])
            .unwrap()
            .iter()
            .map(|l| l.exp())
            .collect();
        for (a, b) in q.dist(0).iter().zip(&step) {
            assert!((a - b).abs() < 1e-12);
        }
        q.validate().unwrap();
    }

    #[test]
    fn uniform_steps_give_uniform_posterior() {
        let mut s = FnScorer::new(5, |_: &[Token]| vec![-(5f64.ln()); 5]);
        let partial = PartialCaption::new(4, &[(1, 3)]).unwrap();
        let q = e_step(
            &mut s,
            &partial,
            &FactorizedPosterior::uniform(&partial, 5),
            3,
        )
        .unwrap();
        for (_, d) in q.iter() {
            assert!(d.iter().all(|v| (v - 0.2).abs() < 1e-12));
        }
    }

    #[test]
    fn no_latents_bound_is_evidence() {
        let mut s = table_scorer();
        let partial = PartialCaption::complete(&[1, 3, 0]).unwrap();
        let q = FactorizedPosterior::uniform(&partial, 4);
        let r = elbo(&mut s, &partial, &q).unwrap();
        let lp = sequence_logprob(&mut s, &[1, 3, 0]).unwrap();
        assert!((r.lower_bound - lp).abs() < 1e-12);
        assert!(r.kl.abs() < 1e-12);
    }

    #[test]
    fn complete_caption_terms_are_teacher_forced() {
        let partial = PartialCaption::complete(&[4, 5, 1]).unwrap();
        let terms = m_step_terms(&partial, &FactorizedPosterior::uniform(&partial, 6), 3);
        assert_eq!(terms.len(), 3);
        assert_eq!(terms[2], ObjectiveTerm::logprob(vec![4, 5], 1, 1.0));
    }

    #[test]
    fn posterior_validation() {
        assert!(FactorizedPosterior::from_parts(vec![1], vec![vec![0.5, 0.4]]).is_err());
        assert!(FactorizedPosterior::from_parts(vec![2, 1], vec![vec![1.0], vec![1.0]]).is_err());
        assert!(FactorizedPosterior::from_parts(vec![1], vec![vec![0.5, 0.5]]).is_ok());
    }
}
