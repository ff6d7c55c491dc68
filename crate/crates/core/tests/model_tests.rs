mod common;

use capattack::gradcheck::{check_objective, interior_state, GradcheckConfig};
use capattack::model::{
    exact_match_rate, gen_synthetic, grad_wrt_noise, load_checkpoint, load_dataset,
    save_checkpoint, save_dataset, train_toy, AdversarialState, FeedMode, Model, ModelConfig,
    ModelParams, ObjectiveTerm, Track, TrainConfig, Unrolled,
};
use capattack::numerics::{logsumexp, seeded_rng, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn all_sequences(vocab: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|p| (0..vocab).map(move |k| [p.clone(), vec![k]].concat()))
            .collect();
    }
    out
}

#[test]
fn sequence_probabilities_sum_to_one_on_tiny_model() {
    for feed in [FeedMode::InitFeed, FeedMode::StepFeed] {
        let model = common::tiny_model(4, feed, 3, 8.0);
        let state = AdversarialState::clean(common::random_image(&model, 4)).unwrap();
        let mut u = Unrolled::new(&model, &state.perturbed(), Track::Nothing).unwrap();
        let logps: Vec<f64> = all_sequences(4, 3)
            .iter()
            .map(|s| u.sequence_logprob(s).unwrap())
            .collect();
        assert_eq!(logps.len(), 64);
        assert!(logsumexp(&logps).abs() < 1e-8);
    }
}

#[test]
fn sequence_logprob_is_additive() {
    let model = common::tiny_model(6, FeedMode::StepFeed, 1, 5.0);
    let state = AdversarialState::clean(common::random_image(&model, 2)).unwrap();
    let seq = [3, 1, 4, 1, 5];
    let total = model.sequence_logprob(&state, &seq).unwrap();
    let head = model.sequence_logprob(&state, &seq[..2]).unwrap();
    let tail: f64 = (2..seq.len())
        .map(|t| model.step_logprobs(&state, &seq[..t]).unwrap()[seq[t]])
        .sum();
    assert!((total - head - tail).abs() < 1e-12);
    let single = model.sequence_logprob(&state, &seq[..1]).unwrap();
    assert_eq!(single, model.step_logprobs(&state, &[]).unwrap()[3]);
}

#[test]
fn out_of_vocab_prefix_is_input_error() {
    let model = common::tiny_model(4, FeedMode::StepFeed, 1, 1.0);
    let state = AdversarialState::clean(common::random_image(&model, 2)).unwrap();
    assert!(matches!(
        model.step_logprobs(&state, &[2, 9]),
        Err(capattack::Error::Input(_))
    ));
}

#[test]
fn zero_feature_makes_feed_modes_agree() {
    let step = common::tiny_model(5, FeedMode::StepFeed, 9, 4.0);
    let mut params = step.params.clone();
    // a zero second encoder layer forces the feature to tanh(0) = 0
    params.enc2_w = Tensor::zeros(params.enc2_w.shape());
    params.enc2_b = Tensor::zeros(params.enc2_b.shape());
    let step = Model::new(step.config.clone(), params, step.vocab.clone()).unwrap();
    let (cfg, init_params) = step.params.to_init_feed(&step.config).unwrap();
    let init = Model::new(cfg, init_params, step.vocab.clone()).unwrap();
    let state = AdversarialState::clean(common::random_image(&step, 1)).unwrap();
    for prefix in [vec![], vec![2], vec![3, 4, 1]] {
        let a = step.step_logprobs(&state, &prefix).unwrap();
        let b = init.step_logprobs(&state, &prefix).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }
}

#[test]
fn zero_weights_leave_only_norm_gradient() {
    let model = common::tiny_model(4, FeedMode::StepFeed, 2, 3.0);
    let state = interior_state(&model, 5).unwrap();
    let terms = vec![
        ObjectiveTerm::logprob(vec![], 2, 0.0),
        ObjectiveTerm::logprob(vec![2], 3, 0.0),
    ];
    let (_, g) = grad_wrt_noise(&model, &state, &terms, 1.0).unwrap();
    for (gi, e) in g.data().iter().zip(state.noise().data()) {
        assert!((gi + 2.0 * e).abs() < 1e-15);
    }
}

#[test]
fn noise_gradient_matches_finite_differences_in_both_feed_modes() {
    let config = GradcheckConfig::default();
    for feed in [FeedMode::InitFeed, FeedMode::StepFeed] {
        let model = Model::random(ModelConfig::default().with_feed_mode(feed), 21).unwrap();
        let state = interior_state(&model, 6).unwrap();
        let terms = vec![
            ObjectiveTerm::logprob(vec![], 2, 1.0),
            ObjectiveTerm::logprob(vec![2], 5, 0.7),
            ObjectiveTerm::logprob(vec![2, 5, 9], 11, -0.3),
        ];
        let mut rng = seeded_rng(1);
        let (probes, worst) = check_objective(
            &state,
            &config,
            &mut rng,
            |s| grad_wrt_noise(&model, s, &terms, 0.5),
            |_, _| Ok(false),
        )
        .unwrap();
        assert_eq!(probes, 10);
        assert!(worst <= 1e-4, "{feed:?}: {worst}");
    }
}

#[test]
fn trained_models_pass_the_exact_match_gate() {
    let held_out = common::held_out(200);
    for model in [common::step_feed_model(), common::init_feed_model()] {
        let rate = exact_match_rate(model, &held_out).unwrap();
        assert!(rate >= 0.9, "{:?}: {rate}", model.config.feed_mode);
    }
}

#[test]
fn step_feed_depends_on_individual_pixels() {
    let model = common::step_feed_model();
    let sample = &common::held_out(1)[0];
    let mut other = sample.image.clone();
    other.data_mut()[7 * 16 + 8] = 1.0 - other.data()[7 * 16 + 8];
    let a = model
        .step_logprobs(
            &AdversarialState::clean(sample.image.clone()).unwrap(),
            &[2],
        )
        .unwrap();
    let b = model
        .step_logprobs(&AdversarialState::clean(other).unwrap(), &[2])
        .unwrap();
    assert_ne!(a, b);
}

/// Norm of the noise gradient of one late-position term, averaged over images.
fn late_term_gradient(model: &Model, samples: &[capattack::model::Sample]) -> f64 {
    let placement = model.vocab.id("left").unwrap();
    let mut total = 0.0;
    for s in samples {
        let state = AdversarialState::clean(s.image.clone()).unwrap();
        let prefix = s.caption.tokens()[..5].to_vec();
        let terms = [ObjectiveTerm::logprob(prefix, placement, 1.0)];
        let (_, g) = grad_wrt_noise(model, &state, &terms, 0.0).unwrap();
        total += g.norm_l2();
    }
    total / samples.len() as f64
}

#[test]
fn init_feed_late_gradients_are_attenuated() {
    let samples: Vec<_> = common::held_out(40)
        .into_iter()
        .filter(|s| {
            !s.caption
                .tokens()
                .contains(&common::step_feed_model().vocab.id("left").unwrap())
        })
        .collect();
    let init = late_term_gradient(common::init_feed_model(), &samples);
    let step = late_term_gradient(common::step_feed_model(), &samples);
    assert!(init > 0.0);
    assert!(init < step, "init {init} vs step {step}");
}

#[test]
fn train_with_zero_epochs_returns_initialization() {
    let data = gen_synthetic(4, 1).unwrap();
    let cfg = ModelConfig::default();
    let train = TrainConfig {
        epochs: 0,
        seed: 4,
        ..TrainConfig::default()
    };
    let (model, report) = train_toy(&data, &cfg, &train).unwrap();
    assert!(report.epoch_losses.is_empty());
    assert_eq!(model.params, ModelParams::init(&cfg, 4).unwrap());
}

#[test]
fn checkpoint_round_trip_reproduces_step_distributions() {
    let model = common::step_feed_model();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), model).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back.params, model.params);
    let state = AdversarialState::clean(common::held_out(1)[0].image.clone()).unwrap();
    assert_eq!(
        model.step_logprobs(&state, &[2, 4]).unwrap(),
        back.step_logprobs(&state, &[2, 4]).unwrap()
    );
}

#[test]
fn dataset_round_trip_and_class_coverage() {
    let data = gen_synthetic(200, 3).unwrap();
    let classes: std::collections::HashSet<_> = data.iter().map(|s| s.class).collect();
    assert_eq!(classes.len(), 18);
    assert!(data.iter().all(|s| s.caption.len() == 7));
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &data[..10]).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 10);
    for (a, b) in back.iter().zip(&data) {
        assert_eq!(a.image, b.image);
        assert_eq!(a.caption, b.caption);
        assert_eq!(a.class, b.class);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn step_distributions_normalize(seed in 0u64..1000, prefix in prop::collection::vec(0usize..6, 0..5), scale in 0.5f64..12.0) {
        let model = common::tiny_model(6, FeedMode::StepFeed, seed, scale);
        let state = AdversarialState::clean(common::random_image(&model, seed + 1)).unwrap();
        let logp = model.step_logprobs(&state, &prefix).unwrap();
        let total: f64 = logp.iter().map(|v| v.exp()).sum();
        prop_assert!((total - 1.0).abs() <= 1e-10);
        prop_assert_eq!(logp, model.step_logprobs(&state, &prefix).unwrap());
    }

    #[test]
    fn projected_noise_keeps_image_in_box(seed in 0u64..1000, amp in 0.0f64..3.0) {
        let model = common::tiny_model(4, FeedMode::InitFeed, 0, 1.0);
        let base = common::random_image(&model, seed);
        let mut rng = seeded_rng(seed);
        let noise: Vec<f64> = (0..base.len()).map(|_| rng.gen_range(-amp..=amp)).collect();
        let state = AdversarialState::clean(base.clone()).unwrap()
            .with_noise(Tensor::new(base.shape().to_vec(), noise).unwrap()).unwrap();
        prop_assert!(state.perturbed().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
