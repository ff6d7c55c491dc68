//! Sequential decoders over a step-wise scorer: greedy prediction, latent
//! completion, loss-augmented inference, pruned latent-configuration
//! enumeration, and an exhaustive marginal for small instances.
//!
//! Positions are 0-based internally; reports use 1-based locations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gem::FactorizedPosterior;
use crate::model::{Caption, Token, Unrolled, EOS};
use crate::numerics::logsumexp;

/// Largest `|V|^|H|` the exhaustive routines will enumerate.
pub const ORACLE_LIMIT: usize = 1_000_000;

/// Anything that yields `ln P(. | prefix)` over a fixed vocabulary.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn step_logprobs(&mut self, prefix: &[Token]) -> Result<Vec<f64>>;
}

impl StepScorer for Unrolled<'_> {
    fn vocab_size(&self) -> usize {
        self.model().config.vocab_size
    }

    fn step_logprobs(&mut self, prefix: &[Token]) -> Result<Vec<f64>> {
        Unrolled::step_logprobs(self, prefix)
    }
}

/// Scorer backed by a closure; convenient for hand-built distributions.
pub struct FnScorer<F> {
    vocab: usize,
    f: F,
}

impl<F> FnScorer<F>
where
    F: FnMut(&[Token]) -> Vec<f64>,
{
    pub fn new(vocab: usize, f: F) -> Self {
        Self { vocab, f }
    }
}

impl<F> StepScorer for FnScorer<F>
where
    F: FnMut(&[Token]) -> Vec<f64>,
{
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn step_logprobs(&mut self, prefix: &[Token]) -> Result<Vec<f64>> {
        Ok((self.f)(prefix))
    }
}

/// A caption template: observed tokens at some positions, latent elsewhere.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PartialCaption {
    slots: Vec<Option<Token>>,
}

#[derive(Serialize, Deserialize)]
struct ObservedWire {
    /// 1-based location.
    location: usize,
    token: Token,
}

#[derive(Serialize, Deserialize)]
struct PartialWire {
    len: usize,
    observed: Vec<ObservedWire>,
}

impl Serialize for PartialCaption {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PartialWire {
            len: self.len(),
            observed: self
                .observed()
                .map(|(p, token)| ObservedWire {
                    location: p + 1,
                    token,
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PartialCaption {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let wire = PartialWire::deserialize(d)?;
        let observed = wire
            .observed
            .into_iter()
            .map(|o| {
                o.location
                    .checked_sub(1)
                    .map(|p| (p, o.token))
                    .ok_or_else(|| serde::de::Error::custom("locations are 1-based"))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        PartialCaption::new(wire.len, &observed).map_err(serde::de::Error::custom)
    }
}

impl PartialCaption {
    /// `observed` holds 0-based `(position, token)` pairs.
    pub fn new(len: usize, observed: &[(usize, Token)]) -> Result<Self> {
        if len == 0 {
            return Err(Error::Input("partial caption of length 0".into()));
        }
        let mut slots = vec![None; len];
        for &(p, tok) in observed {
            if p >= len {
                return Err(Error::Input(format!(
                    "observed position {p} outside length {len}"
                )));
            }
            if slots[p].replace(tok).is_some() {
                return Err(Error::Input(format!("position {p} observed twice")));
            }
        }
        Ok(Self { slots })
    }

    /// Every position observed.
    pub fn complete(tokens: &[Token]) -> Result<Self> {
        let observed: Vec<_> = tokens.iter().copied().enumerate().collect();
        Self::new(tokens.len(), &observed)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slot(&self, position: usize) -> Option<Token> {
        self.slots.get(position).copied().flatten()
    }

    pub fn is_observed(&self, position: usize) -> bool {
        self.slot(position).is_some()
    }

    pub fn observed(&self) -> impl Iterator<Item = (usize, Token)> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(p, s)| s.map(|t| (p, t)))
    }

    pub fn observed_positions(&self) -> Vec<usize> {
        self.observed().map(|(p, _)| p).collect()
    }

    pub fn observed_tokens(&self) -> Vec<Token> {
        self.observed().map(|(_, t)| t).collect()
    }

    pub fn latent_positions(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&p| self.slots[p].is_none())
            .collect()
    }

    pub fn has_latents(&self) -> bool {
        self.slots.iter().any(Option::is_none)
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if let Some((p, t)) = self.observed().find(|&(_, t)| t >= vocab_size) {
            return Err(Error::Input(format!(
                "observed token {t} at position {p} outside vocabulary of {vocab_size}"
            )));
        }
        Ok(())
    }

    /// Targeted attacks need at least one observed position.
    pub fn validate_targeted(&self, vocab_size: usize) -> Result<()> {
        self.validate(vocab_size)?;
        if self.observed().next().is_none() {
            return Err(Error::Input(
                "targeted partial caption observes nothing".into(),
            ));
        }
        Ok(())
    }

    /// The first `end` tokens with latent positions taken from `latent`
    /// (aligned with [`PartialCaption::latent_positions`]).
    pub fn fill(&self, latent: &[Token], end: usize) -> Vec<Token> {
        let mut it = latent.iter();
        self.slots[..end]
            .iter()
            .map(|s| match s {
                Some(t) => *t,
                None => *it.next().expect("latent assignment shorter than prefix"),
            })
            .collect()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn sequence_logprob<S: StepScorer + ?Sized>(scorer: &mut S, tokens: &[Token]) -> Result<f64> {
    let mut total = 0.0;
    for t in 0..tokens.len() {
        total += scorer.step_logprobs(&tokens[..t])?[tokens[t]];
    }
    Ok(total)
}

/// Greedy prediction: argmax at every step until EOS (included) or `max_len` tokens.
pub fn greedy_decode<S: StepScorer + ?Sized>(scorer: &mut S, max_len: usize) -> Result<Caption> {
    let mut tokens = Vec::with_capacity(max_len);
    while tokens.len() < max_len {
        let next = argmax(&scorer.step_logprobs(&tokens)?);
        tokens.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(Caption(tokens))
}

/// Observed positions keep their targeted tokens; each latent position takes
/// the argmax given the already-fixed prefix, in ascending order.
pub fn latent_completion<S: StepScorer + ?Sized>(
    scorer: &mut S,
    partial: &PartialCaption,
) -> Result<Vec<Token>> {
    let mut tokens = Vec::with_capacity(partial.len());
    for p in 0..partial.len() {
        let tok = match partial.slot(p) {
            Some(t) => t,
            None => argmax(&scorer.step_logprobs(&tokens)?),
        };
        tokens.push(tok);
    }
    Ok(tokens)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossAugmentedResult {
    /// Full inferred sequence of length N.
    pub sequence: Vec<Token>,
    /// Inferred tokens at observed positions.
    pub observed: Vec<Token>,
    /// Inferred tokens at latent positions.
    pub latent: Vec<Token>,
    /// `ln P(sequence)`.
    pub log_prob: f64,
    /// Structured loss against the targeted tokens.
    pub loss: f64,
    /// `log_prob + loss`.
    pub score: f64,
}

/// Ascending decode of `ln P(k | Ŝ_<t) + ζ·[k ≠ s_t]` at observed positions
/// and `ln P(k | Ŝ_<t)` at latent ones.
pub fn loss_augmented_infer<S: StepScorer + ?Sized>(
    scorer: &mut S,
    partial: &PartialCaption,
    zeta: f64,
) -> Result<LossAugmentedResult> {
    if zeta < 0.0 {
        return Err(Error::Input(format!(
            "mismatch penalty {zeta} must be non-negative"
        )));
    }
    let mut sequence = Vec::with_capacity(partial.len());
    let (mut log_prob, mut loss) = (0.0, 0.0);
    for p in 0..partial.len() {
        let logp = scorer.step_logprobs(&sequence)?;
        let tok = match partial.slot(p) {
            Some(target) => {
                let augmented: Vec<f64> = logp
                    .iter()
                    .enumerate()
                    .map(|(k, v)| if k == target { *v } else { v + zeta })
                    .collect();
                let k = argmax(&augmented);
                if k != target {
                    loss += zeta;
                }
                k
            }
            None => argmax(&logp),
        };
        log_prob += logp[tok];
        sequence.push(tok);
    }
    let observed = partial
        .observed_positions()
        .iter()
        .map(|&p| sequence[p])
        .collect();
    let latent = partial
        .latent_positions()
        .iter()
        .map(|&p| sequence[p])
        .collect();
    Ok(LossAugmentedResult {
        sequence,
        observed,
        latent,
        log_prob,
        loss,
        score: log_prob + loss,
    })
}

/// One joint assignment of the kept states for a run of latent positions.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentConfig {
    /// Tokens aligned with the leading latent positions of the posterior.
    pub tokens: Vec<Token>,
    pub weight: f64,
}

/// Indices of the `width` largest entries, largest first, ties to lower index.
pub fn top_k(values: &[f64], width: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(width.max(1));
    idx
}

/// Cartesian product of the top-`width` states of every latent position
/// before `end`, each weighted by its product of per-position
/// probabilities renormalized over the kept states.
pub fn enumerate_latent_configs(
    q: &FactorizedPosterior,
    width: usize,
    end: usize,
) -> Vec<LatentConfig> {
    let mut configs = vec![LatentConfig {
        tokens: Vec::new(),
        weight: 1.0,
    }];
    for (pos, dist) in q.iter() {
        if pos >= end {
            break;
        }
        let kept = top_k(dist, width);
        let mass: f64 = kept.iter().map(|&k| dist[k]).sum();
        let mut next = Vec::with_capacity(configs.len() * kept.len());
        for c in &configs {
            for &k in &kept {
                let mut tokens = c.tokens.clone();
                tokens.push(k);
                let w = if mass > 0.0 {
                    dist[k] / mass
                } else {
                    1.0 / kept.len() as f64
                };
                next.push(LatentConfig {
                    tokens,
                    weight: c.weight * w,
                });
            }
        }
        configs = next;
    }
    configs
}

/// Number of joint latent assignments, or a guard error above [`ORACLE_LIMIT`].
pub fn oracle_space(vocab: usize, latents: usize) -> Result<usize> {
    let mut total: usize = 1;
    for _ in 0..latents {
        total = total
            .checked_mul(vocab)
            .filter(|&t| t <= ORACLE_LIMIT)
            .ok_or_else(|| {
                Error::Guard(format!(
                    "{vocab}^{latents} latent configurations exceed {ORACLE_LIMIT}"
                ))
            })?;
    }
    Ok(total)
}

/// Visits every joint assignment of the latent positions in odometer order
/// (last latent position varies fastest).
pub fn for_each_latent_assignment<F>(vocab: usize, latents: usize, mut f: F) -> Result<()>
where
    F: FnMut(&[Token]) -> Result<()>,
{
    oracle_space(vocab, latents)?;
    let mut assign = vec![0usize; latents];
    loop {
        f(&assign)?;
        let mut i = latents;
        loop {
            if i == 0 {
                return Ok(());
            }
            i -= 1;
            assign[i] += 1;
            if assign[i] < vocab {
                break;
            }
            assign[i] = 0;
        }
    }
}

/// `ln Σ_{S_H} P(S_O, S_H)` by exhaustive enumeration.
pub fn marginal_logprob_oracle<S: StepScorer + ?Sized>(
    scorer: &mut S,
    partial: &PartialCaption,
) -> Result<f64> {
    let vocab = scorer.vocab_size();
    let latents = partial.latent_positions().len();
    let mut terms = Vec::with_capacity(oracle_space(vocab, latents)?);
    for_each_latent_assignment(vocab, latents, |assign| {
        let seq = partial.fill(assign, partial.len());
        terms.push(sequence_logprob(scorer, &seq)?);
        Ok(())
    })?;
    Ok(logsumexp(&terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::log_softmax;

    fn one_hot(k: usize, v: usize) -> Vec<f64> {
        let mut z = vec![-30.0; v];
        z[k] = 0.0;
        log_softmax(&z).unwrap()
    }

    #[test]
    fn greedy_follows_one_hot_table() {
        let script = [3usize, 2, 3, EOS];
        let mut s = FnScorer::new(4, |p: &[Token]| one_hot(script[p.len().min(3)], 4));
        let c = greedy_decode(&mut s, 12).unwrap();
        assert_eq!(c.tokens(), &script);
        let c = greedy_decode(&mut s, 2).unwrap();
        assert_eq!(c.tokens(), &[3, 2]);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5, 0.2]), 1);
        assert_eq!(top_k(&[0.2, 0.4, 0.4, 0.1], 3), vec![1, 2, 0]);
    }

    #[test]
    fn observed_step_arithmetic() {
        let dist = |_: &[Token]| {
            let mut p = [0.0f64; 4];
            p[2] = 0.9;
            p[3] = 0.05;
            p[0] = 0.03;
            p[1] = 0.02;
            p.iter().map(|v| v.ln()).collect()
        };
        let partial = PartialCaption::new(1, &[(0, 2)]).unwrap();
        let r = loss_augmented_infer(&mut FnScorer::new(4, dist), &partial, 1.0).unwrap();
        assert_eq!(r.sequence, vec![2]);
        assert_eq!(r.loss, 0.0);
        let r = loss_augmented_infer(&mut FnScorer::new(4, dist), &partial, 3.0).unwrap();
        assert_eq!(r.sequence, vec![3]);
        assert_eq!(r.loss, 3.0);
        assert!((r.score - (0.05f64.ln() + 3.0)).abs() < 1e-12);
    }

    #[test]
    fn fully_observed_completion_is_identity() {
        let mut s = FnScorer::new(5, |_: &[Token]| one_hot(4, 5));
        let partial = PartialCaption::complete(&[2, 3, 1]).unwrap();
        assert_eq!(latent_completion(&mut s, &partial).unwrap(), vec![2, 3, 1]);
    }

    #[test]
    fn pruned_count_and_weights() {
        let dists = (0..4)
            .map(|i| {
                vec![
                    0.4,
                    0.3,
                    0.2,
                    0.05 + 0.01 * i as f64,
                    0.05 - 0.01 * i as f64,
                ]
            })
            .collect();
        let q = FactorizedPosterior::from_parts(vec![1, 2, 4, 5], dists).unwrap();
        let configs = enumerate_latent_configs(&q, 3, 6);
        assert_eq!(configs.len(), 81);
        let total: f64 = configs.iter().map(|c| c.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(enumerate_latent_configs(&q, 3, 2).len(), 3);
        assert_eq!(enumerate_latent_configs(&q, 3, 1).len(), 1);
        let full = enumerate_latent_configs(&q, 5, 6);
        assert_eq!(full.len(), 625);
        let exact: f64 = full[7]
            .tokens
            .iter()
            .enumerate()
            .map(|(i, &k)| q.dist(i)[k])
            .product();
        assert!((full[7].weight - exact).abs() < 1e-15);
    }

    #[test]
    fn partial_caption_rules() {
        assert!(PartialCaption::new(3, &[(3, 1)]).is_err());
        assert!(PartialCaption::new(3, &[(1, 1), (1, 2)]).is_err());
        let p = PartialCaption::new(4, &[(0, 2), (2, 5)]).unwrap();
        assert_eq!(p.latent_positions(), vec![1, 3]);
        assert_eq!(p.fill(&[7, 8], 4), vec![2, 7, 5, 8]);
        assert_eq!(p.fill(&[7], 3), vec![2, 7, 5]);
        assert!(p.validate(5).is_err());
        assert!(PartialCaption::new(2, &[])
            .unwrap()
            .validate_targeted(9)
            .is_err());
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(
            json,
            r#"{"len":4,"observed":[{"location":1,"token":2},{"location":3,"token":5}]}"#
        );
        let back: PartialCaption = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn oracle_guard() {
        assert!(oracle_space(20, 4).is_ok());
        assert!(matches!(oracle_space(20, 5), Err(Error::Guard(_))));
    }
}
