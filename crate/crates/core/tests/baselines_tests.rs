mod common;

use capattack::baselines::{
    logit_margin_attack, logit_margin_objective, logits_attack, logits_objective,
    margin_active_set, untargeted_attack, untargeted_objective, BaselineConfig, BaselineMethod,
};
use capattack::gradcheck::interior_state;
use capattack::harness::{
    make_experiment_targets, run_experiment, AttackConfig, AttackMethod, TargetSpec,
};
use capattack::inference::argmax;
use capattack::model::{
    grad_wrt_noise, AdversarialState, Caption, FeedMode, Model, ObjectiveTerm, Token, Track,
    Unrolled,
};
use capattack::numerics::Tensor;
use proptest::prelude::*;

/// Teacher-forced logit argmax sequence at `state`.
fn logit_argmax_caption(model: &Model, state: &AdversarialState, len: usize) -> Caption {
    let mut u = Unrolled::new(model, &state.perturbed(), Track::Nothing).unwrap();
    let mut seq: Vec<Token> = Vec::new();
    for _ in 0..len {
        let node = u.node(&seq).unwrap();
        seq.push(argmax(u.logits(node)));
    }
    Caption(seq)
}

#[test]
fn image_independent_model_has_zero_gradients() {
    let mut model = common::tiny_model(5, FeedMode::StepFeed, 3, 4.0);
    // logits reduce to the output bias
    model.params.out_w = Tensor::zeros(model.params.out_w.shape());
    let state = interior_state(&model, 1).unwrap();
    let target = Caption(vec![2, 3, 4]);
    let (_, g_logit) = logits_objective(&model, &target, &state, 0.0).unwrap();
    let terms: Vec<ObjectiveTerm> = (0..3)
        .map(|t| ObjectiveTerm::logprob(target.tokens()[..t].to_vec(), target.tokens()[t], 1.0))
        .collect();
    let (_, g_logp) = grad_wrt_noise(&model, &state, &terms, 0.0).unwrap();
    assert!(g_logit.data().iter().all(|g| *g == 0.0));
    assert!(g_logp.data().iter().all(|g| *g == 0.0));
}

#[test]
fn inactive_hinge_leaves_only_the_norm() {
    let model = common::tiny_model(6, FeedMode::StepFeed, 4, 6.0);
    let state = interior_state(&model, 2).unwrap();
    let target = logit_argmax_caption(&model, &state, 4);
    assert!(margin_active_set(&model, &target, &state)
        .unwrap()
        .iter()
        .all(Option::is_none));
    let (value, grad) = logit_margin_objective(&model, &target, &state, 0.4, 10_000.0).unwrap();
    assert!((value - 0.4 * state.noise().sum_sq()).abs() < 1e-12);
    for (g, e) in grad.data().iter().zip(state.noise().data()) {
        assert!((g - 0.8 * e).abs() < 1e-12);
    }
}

#[test]
fn active_hinge_gradient_is_logit_difference() {
    let model = common::tiny_model(6, FeedMode::InitFeed, 5, 6.0);
    let state = interior_state(&model, 3).unwrap();
    let best = logit_argmax_caption(&model, &state, 1).tokens()[0];
    let target = Caption(vec![(best + 1) % 6]);
    let rivals = margin_active_set(&model, &target, &state).unwrap();
    assert_eq!(rivals, vec![Some(best)]);
    let (_, grad) = logit_margin_objective(&model, &target, &state, 0.0, 3.0).unwrap();
    let terms = [
        ObjectiveTerm::logit(vec![], best, 3.0),
        ObjectiveTerm::logit(vec![], target.tokens()[0], -3.0),
    ];
    let (_, reference) = grad_wrt_noise(&model, &state, &terms, 0.0).unwrap();
    for (a, b) in grad.data().iter().zip(reference.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn margin_loss_dominates_norm(seed in 0u64..5000, target in prop::collection::vec(0usize..6, 1..5), lambda in 0.0f64..2.0) {
        let model = common::tiny_model(6, FeedMode::StepFeed, seed, 5.0);
        let state = interior_state(&model, seed).unwrap();
        let target = Caption(target);
        let (value, _) = logit_margin_objective(&model, &target, &state, lambda, 1.0).unwrap();
        let norm = lambda * state.noise().sum_sq();
        prop_assert!(value >= norm - 1e-12);
        let is_argmax = logit_argmax_caption(&model, &state, target.len()) == target;
        let inactive = margin_active_set(&model, &target, &state).unwrap().iter().all(Option::is_none);
        prop_assert_eq!(inactive, (value - norm).abs() <= 1e-12);
        if is_argmax {
            prop_assert!(inactive);
        }
    }
}

#[test]
fn zero_budget_untargeted_changes_nothing() {
    let model = common::step_feed_model();
    let image = common::held_out(1)[0].image.clone();
    let config = BaselineConfig {
        method: BaselineMethod::Untargeted,
        budget: 0,
        ..BaselineConfig::default()
    };
    let outcome = untargeted_attack(model, &image, &config).unwrap();
    assert!(!outcome.changed);
    assert_eq!(outcome.eps_norm, 0.0);
    assert_eq!(outcome.predicted, outcome.clean);
}

#[test]
fn successful_untargeted_run_lowers_clean_likelihood() {
    let model = common::step_feed_model();
    let config = BaselineConfig {
        method: BaselineMethod::Untargeted,
        lambda: 0.001,
        budget: 200,
        ..BaselineConfig::default()
    };
    let mut changed = 0;
    for s in common::held_out(5) {
        let outcome = untargeted_attack(model, &s.image, &config).unwrap();
        if outcome.changed {
            changed += 1;
            assert!(outcome.final_logprob < outcome.clean_logprob);
            assert_ne!(outcome.predicted, outcome.clean);
        }
        let perturbed = s.image.add(&outcome.noise).unwrap();
        assert!(perturbed
            .data()
            .iter()
            .all(|v| (-1e-15..=1.0 + 1e-15).contains(v)));
    }
    assert!(changed > 0);
}

#[test]
fn untargeted_gradient_is_negated_logprob_gradient() {
    let model = common::tiny_model(6, FeedMode::StepFeed, 6, 4.0);
    let state = interior_state(&model, 6).unwrap();
    let clean = Caption(vec![2, 3, 1]);
    let (value, grad) = untargeted_objective(&model, &clean, &state, 0.25).unwrap();
    let expected =
        model.sequence_logprob(&state, clean.tokens()).unwrap() + 0.25 * state.noise().sum_sq();
    assert!((value - expected).abs() < 1e-12);
    assert_eq!(grad.shape(), state.noise().shape());
}

#[test]
fn baselines_respect_the_box_and_validate() {
    let model = common::step_feed_model();
    let samples = common::held_out(2);
    let target = samples[1].caption.clone();
    let config = BaselineConfig {
        lambda: 0.001,
        budget: 40,
        ..BaselineConfig::default()
    };
    for outcome in [
        logits_attack(model, &samples[0].image, &target, &config).unwrap(),
        logit_margin_attack(model, &samples[0].image, &target, &config).unwrap(),
    ] {
        let perturbed = samples[0].image.add(&outcome.noise).unwrap();
        assert!(perturbed.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(!outcome.trace.is_empty());
    }
    let bad = BaselineConfig {
        check_every: 0,
        ..config
    };
    assert!(logits_attack(model, &samples[0].image, &target, &bad).is_err());
}

#[test]
fn max_logits_suite_succeeds_on_half_the_targets() {
    let model = common::step_feed_model();
    let samples = common::held_out(50);
    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    let targets =
        make_experiment_targets(&samples, 50, TargetSpec::complete(), 5, &model.vocab).unwrap();
    let config = AttackConfig::default().with_lambda(0.001);
    let report = run_experiment(
        model,
        &images,
        &targets,
        AttackMethod::MaxLogits,
        &config,
        5,
        8,
    )
    .unwrap();
    assert!(report.aggregates.sr >= 0.5, "sr {}", report.aggregates.sr);
}
