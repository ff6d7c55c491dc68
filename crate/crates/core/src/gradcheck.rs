//! Finite-difference audit of every noise gradient the attacks rely on.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    logit_margin_objective, logits_objective, margin_active_set, untargeted_objective,
};
use crate::error::{Error, Result};
use crate::gem::{e_step, m_step_objective, FactorizedPosterior, GemConfig};
use crate::inference::{greedy_decode, latent_completion, loss_augmented_infer, PartialCaption};
use crate::lssvm::ssvm_objective_grad;
use crate::model::{AdversarialState, Caption, Model, Token, Track, Unrolled};
use crate::numerics::{relative_error, seeded_rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub probes: usize,
    pub step: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    pub tolerance: f64,
    /// Deliberately corrupt the analytic gradients (negative control).
    pub inject_fault: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            probes: 10,
            step: 1e-5,
            floor: 1e-6,
            tolerance: 1e-4,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveCheck {
    pub objective: String,
    pub probes: usize,
    pub worst_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checks: Vec<ObjectiveCheck>,
    pub passed: bool,
}

/// Interior image and noise so that `±step` probes never touch the box.
pub fn interior_state(model: &Model, seed: u64) -> Result<AdversarialState> {
    let mut rng = seeded_rng(seed);
    let n = model.config.pixels();
    let base: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..0.8)).collect();
    let noise: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.05..0.05)).collect();
    let shape = model.image_shape().to_vec();
    AdversarialState::clean(Tensor::new(shape.clone(), base)?)?
        .with_noise(Tensor::new(shape, noise)?)
}

/// Central-difference check of `objective` at `probes` random pixels.
///
/// `skip` rejects probe pixels where the objective is not smooth at `±step`.
pub fn check_objective<F, S>(
    state: &AdversarialState,
    config: &GradcheckConfig,
    rng: &mut impl Rng,
    objective: F,
    mut skip: S,
) -> Result<(usize, f64)>
where
    F: Fn(&AdversarialState) -> Result<(f64, Tensor)>,
    S: FnMut(&AdversarialState, &AdversarialState) -> Result<bool>,
{
    let (_, mut grad) = objective(state)?;
    if config.inject_fault {
        grad = grad.scaled(1.5);
    }
    let n = state.noise().len();
    let (mut done, mut worst, mut attempts) = (0, 0.0f64, 0);
    while done < config.probes {
        attempts += 1;
        if attempts > 50 * config.probes {
            return Err(Error::Numerical(
                "could not find smooth probe pixels".into(),
            ));
        }
        let i = rng.gen_range(0..n);
        let shifted = |delta: f64| -> Result<AdversarialState> {
            let mut noise = state.noise().clone();
            noise.data_mut()[i] += delta;
            state.clone().with_noise(noise)
        };
        let (plus, minus) = (shifted(config.step)?, shifted(-config.step)?);
        if skip(&plus, &minus)? {
            continue;
        }
        let fd = (objective(&plus)?.0 - objective(&minus)?.0) / (2.0 * config.step);
        worst = worst.max(relative_error(grad.data()[i], fd, config.floor));
        done += 1;
    }
    Ok((done, worst))
}

fn fixture_tokens(model: &Model, len: usize, rng: &mut impl Rng) -> Vec<Token> {
    (0..len)
        .map(|_| rng.gen_range(2..model.config.vocab_size))
        .collect()
}

/// Checks the GEM M-step, SSVM, max-logits, logit-margin and untargeted
/// objectives on random interior states of `model`.
pub fn gradcheck(model: &Model, config: &GradcheckConfig) -> Result<GradcheckReport> {
    let len = 5.min(model.config.max_len - 1);
    let mut rng = seeded_rng(config.seed);
    let state = interior_state(model, rng.gen())?;
    let tokens = fixture_tokens(model, len, &mut rng);
    let observed: Vec<(usize, Token)> = tokens
        .iter()
        .copied()
        .enumerate()
        .filter(|(p, _)| p % 2 == 0)
        .collect();
    let partial = PartialCaption::new(len, &observed)?;
    let target = Caption(tokens.clone());
    let never = |_: &AdversarialState, _: &AdversarialState| Ok(false);
    let mut checks = Vec::new();
    let mut record = |name: &str, result: (usize, f64)| {
        checks.push(ObjectiveCheck {
            objective: name.to_string(),
            probes: result.0,
            worst_rel_err: result.1,
            passed: result.1 <= config.tolerance,
        });
    };

    let gem = GemConfig::default();
    let q = {
        let mut u = Unrolled::new(model, &state.perturbed(), Track::Nothing)?;
        let q0 = FactorizedPosterior::uniform(&partial, model.config.vocab_size);
        e_step(&mut u, &partial, &q0, gem.width)?
    };
    let r = check_objective(
        &state,
        config,
        &mut rng,
        |s| m_step_objective(model, &partial, s, &q, &gem),
        never,
    )?;
    record("gem_m_step", r);

    let (completion, augmented) = {
        let mut u = Unrolled::new(model, &state.perturbed(), Track::Nothing)?;
        let c = latent_completion(&mut u, &partial)?;
        let a = loss_augmented_infer(&mut u, &partial, 5.0)?;
        (c, a.sequence)
    };
    let r = check_objective(
        &state,
        config,
        &mut rng,
        |s| ssvm_objective_grad(model, &completion, &augmented, s, 0.1),
        never,
    )?;
    record("ssvm", r);

    let r = check_objective(
        &state,
        config,
        &mut rng,
        |s| logits_objective(model, &target, s, 0.1),
        never,
    )?;
    record("max_logits", r);

    let centre = margin_active_set(model, &target, &state)?;
    let r = check_objective(
        &state,
        config,
        &mut rng,
        |s| logit_margin_objective(model, &target, s, 0.1, 1.0),
        |p, m| {
            Ok(margin_active_set(model, &target, p)? != centre
                || margin_active_set(model, &target, m)? != centre)
        },
    )?;
    record("logit_margin", r);

    let clean = {
        let mut u = Unrolled::new(model, &state.base().clone(), Track::Nothing)?;
        greedy_decode(&mut u, model.config.max_len)?
    };
    let r = check_objective(
        &state,
        config,
        &mut rng,
        |s| untargeted_objective(model, &clean, s, 0.1),
        never,
    )?;
    record("untargeted", r);

    let passed = checks.iter().all(|c| c.passed);
    Ok(GradcheckReport { checks, passed })
}
