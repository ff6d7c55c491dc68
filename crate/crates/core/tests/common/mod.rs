//! Shared fixtures: trained toy captioners cached on disk between test binaries.

#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use capattack::model::{
    gen_synthetic, load_checkpoint, save_checkpoint, train_toy, FeedMode, Model, ModelConfig,
    Sample, TrainConfig,
};

pub const TRAIN_SEED: u64 = 7;
pub const DATA_SEED: u64 = 11;
pub const HELD_OUT_SEED: u64 = 12_345;
pub const TRAIN_EXAMPLES: usize = 2000;
/// Bump when the model or trainer changes so stale checkpoints are ignored.
const CACHE_VERSION: u32 = 2;

fn cache_dir(feed: FeedMode) -> PathBuf {
    let tag = match feed {
        FeedMode::InitFeed => "init_feed",
        FeedMode::StepFeed => "step_feed",
    };
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!(
        "toy-v{CACHE_VERSION}-{tag}-{TRAIN_EXAMPLES}-{DATA_SEED}-{TRAIN_SEED}"
    ))
}

fn train_or_load(feed: FeedMode) -> Model {
    let dir = cache_dir(feed);
    if let Ok(model) = load_checkpoint(&dir) {
        return model;
    }
    let data = gen_synthetic(TRAIN_EXAMPLES, DATA_SEED).expect("synthetic data");
    let config = ModelConfig::default().with_feed_mode(feed);
    let train = TrainConfig {
        seed: TRAIN_SEED,
        ..TrainConfig::default()
    };
    let (model, _) = train_toy(&data, &config, &train).expect("training");
    let staging = dir.with_extension(format!("tmp{}", std::process::id()));
    save_checkpoint(&staging, &model).expect("save checkpoint");
    let _ = std::fs::rename(&staging, &dir);
    load_checkpoint(&dir).unwrap_or(model)
}

pub fn step_feed_model() -> &'static Model {
    static MODEL: OnceLock<Model> = OnceLock::new();
    MODEL.get_or_init(|| train_or_load(FeedMode::StepFeed))
}

pub fn init_feed_model() -> &'static Model {
    static MODEL: OnceLock<Model> = OnceLock::new();
    MODEL.get_or_init(|| train_or_load(FeedMode::InitFeed))
}

/// Images never seen in training.
pub fn held_out(n: usize) -> Vec<Sample> {
    gen_synthetic(n, HELD_OUT_SEED).expect("held-out data")
}

/// Small random captioner whose weights are stretched by `scale` so step
/// distributions are far from uniform.
pub fn tiny_model(vocab: usize, feed: FeedMode, seed: u64, scale: f64) -> Model {
    let config = ModelConfig {
        image_side: 3,
        feature_dim: 4,
        hidden_dim: 5,
        embed_dim: 3,
        vocab_size: vocab,
        feed_mode: feed,
        max_len: 8,
    };
    let mut model = Model::random(config, seed).expect("tiny model");
    for t in model.params.tensors_mut() {
        *t = t.scaled(scale);
    }
    model
}

/// Random image with every pixel in `[0.1, 0.9]`.
pub fn random_image(model: &Model, seed: u64) -> capattack::numerics::Tensor {
    use rand::Rng;
    let mut rng = capattack::numerics::seeded_rng(seed);
    let data = (0..model.config.pixels())
        .map(|_| rng.gen_range(0.1..0.9))
        .collect();
    capattack::numerics::Tensor::new(model.image_shape().to_vec(), data).expect("image")
}
