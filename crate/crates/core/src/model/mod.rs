//! The reference captioner: a dense image encoder feeding a GRU decoder.
//!
//! `P(S_t | S_<t, I0 + eps)` is produced one prefix at a time by
//! [`Unrolled`], which shares forward computation between prefixes through a
//! trie so that expectations over many latent configurations cost one
//! recurrent step per distinct prefix.

mod checkpoint;
mod data;
mod train;
mod unroll;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use data::{
    gen_synthetic, load_dataset, read_pgm, save_dataset, write_pgm, Intensity, Placement, Sample,
    ShapeClass, ShapeKind, CAPTION_LEN,
};
pub use train::{exact_match_rate, train_toy, TrainConfig, TrainReport};
pub use unroll::{grad_wrt_noise, NodeId, ObjectiveTerm, Score, Track, Unrolled};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, GruCell, Tensor};

pub type Token = usize;

pub const BOS: Token = 0;
pub const EOS: Token = 1;

/// Words of the synthetic grammar plus a handful of never-emitted distractors.
pub const SYNTHETIC_TOKENS: [&str; 20] = [
    "<bos>", "<eos>", "a", "dark", "bright", "square", "triangle", "bar", "on", "the", "left",
    "center", "right", "circle", "cross", "top", "bottom", "small", "big", "gray",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, Token>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 4 {
            return Err(Error::Input(format!(
                "vocabulary needs at least 4 tokens, got {}",
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn synthetic() -> Self {
        Self::new(SYNTHETIC_TOKENS.iter().map(|s| s.to_string()).collect())
            .expect("synthetic vocabulary is valid")
    }

    /// Anonymous vocabulary `<bos>, <eos>, w2, w3, ...` for small test models.
    pub fn anonymous(size: usize) -> Result<Self> {
        let tokens = (0..size)
            .map(|i| match i {
                0 => "<bos>".to_string(),
                1 => "<eos>".to_string(),
                _ => format!("w{i}"),
            })
            .collect();
        Self::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Option<Token> {
        self.index.get(word).copied()
    }

    pub fn word(&self, token: Token) -> Option<&str> {
        self.tokens.get(token).map(String::as_str)
    }

    /// Whitespace-separated words to tokens. A trailing `<eos>` is appended
    /// when `with_eos` is set and the text does not already end in one.
    pub fn encode(&self, text: &str, with_eos: bool) -> Result<Caption> {
        let mut out = text
            .split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Input(format!("unknown word {w:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if with_eos && out.last() != Some(&EOS) {
            out.push(EOS);
        }
        Ok(Caption(out))
    }

    pub fn decode(&self, tokens: &[Token]) -> String {
        tokens
            .iter()
            .map(|&t| self.word(t).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedMode {
    /// Image feature only sets the initial recurrent state.
    InitFeed,
    /// Image feature sets the initial state and is appended to every step's input.
    StepFeed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_side: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub feed_mode: FeedMode,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_side: 16,
            feature_dim: 32,
            hidden_dim: 32,
            embed_dim: 16,
            vocab_size: SYNTHETIC_TOKENS.len(),
            feed_mode: FeedMode::StepFeed,
            max_len: 12,
        }
    }
}

impl ModelConfig {
    pub fn with_feed_mode(mut self, feed_mode: FeedMode) -> Self {
        self.feed_mode = feed_mode;
        self
    }

    pub fn pixels(&self) -> usize {
        self.image_side * self.image_side
    }

    pub fn gru_input(&self) -> usize {
        match self.feed_mode {
            FeedMode::InitFeed => self.embed_dim,
            FeedMode::StepFeed => self.embed_dim + self.feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("image_side", self.image_side),
            ("feature_dim", self.feature_dim),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("max_len", self.max_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Input(format!("{name} must be at least 1")));
            }
        }
        if self.vocab_size < 4 {
            return Err(Error::Input("vocab_size must be at least 4".into()));
        }
        Ok(())
    }
}

/// All learned weights of the captioner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub enc1_w: Tensor,
    pub enc1_b: Tensor,
    pub enc2_w: Tensor,
    pub enc2_b: Tensor,
    pub init_w: Tensor,
    pub init_b: Tensor,
    pub embedding: Tensor,
    pub gru: GruCell,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

pub const PARAM_INIT_SCALE: f64 = 0.1;

impl ModelParams {
    /// Uniform `[-0.1, 0.1]` initialization from a splitmix64 stream.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let s = PARAM_INIT_SCALE;
        let (d, h, e, v) = (
            config.feature_dim,
            config.hidden_dim,
            config.embed_dim,
            config.vocab_size,
        );
        let mut u = |shape: &[usize]| Tensor::uniform(shape, s, &mut rng);
        Ok(Self {
            enc1_w: u(&[d, config.pixels()]),
            enc1_b: u(&[d]),
            enc2_w: u(&[d, d]),
            enc2_b: u(&[d]),
            init_w: u(&[h, d]),
            init_b: u(&[h]),
            embedding: u(&[v, e]),
            gru: GruCell {
                w_input: u(&[3 * h, config.gru_input()]),
                w_hidden: u(&[3 * h, h]),
                b_input: u(&[3 * h]),
                b_hidden: u(&[3 * h]),
            },
            out_w: u(&[v, h]),
            out_b: u(&[v]),
        })
    }

    pub fn tensors(&self) -> [&Tensor; 13] {
        [
            &self.enc1_w,
            &self.enc1_b,
            &self.enc2_w,
            &self.enc2_b,
            &self.init_w,
            &self.init_b,
            &self.embedding,
            &self.gru.w_input,
            &self.gru.w_hidden,
            &self.gru.b_input,
            &self.gru.b_hidden,
            &self.out_w,
            &self.out_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 13] {
        [
            &mut self.enc1_w,
            &mut self.enc1_b,
            &mut self.enc2_w,
            &mut self.enc2_b,
            &mut self.init_w,
            &mut self.init_b,
            &mut self.embedding,
            &mut self.gru.w_input,
            &mut self.gru.w_hidden,
            &mut self.gru.b_input,
            &mut self.gru.b_hidden,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        let [enc1_w, enc1_b, enc2_w, enc2_b, init_w, init_b, embedding, gw, gu, gbw, gbu, out_w, out_b]: [Tensor; 13] =
            tensors.try_into().map_err(|v: Vec<Tensor>| {
                Error::Format(format!("checkpoint holds {} tensors, expected 13", v.len()))
            })?;
        Ok(Self {
            enc1_w,
            enc1_b,
            enc2_w,
            enc2_b,
            init_w,
            init_b,
            embedding,
            gru: GruCell {
                w_input: gw,
                w_hidden: gu,
                b_input: gbw,
                b_hidden: gbu,
            },
            out_w,
            out_b,
        })
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Adds `delta` (laid out as [`ModelParams::flatten`]) in place.
    pub fn apply_delta(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.num_values() {
            return Err(Error::Dimension(format!(
                "delta of {} values for {} parameters",
                delta.len(),
                self.num_values()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            for (p, d) in t.data_mut().iter_mut().zip(&delta[offset..offset + n]) {
                *p += d;
            }
            offset += n;
        }
        Ok(())
    }

    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let reference = ModelParams::init(config, 0)?;
        for (a, b) in self.tensors().iter().zip(reference.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Dimension(format!(
                    "parameter shape {:?}, config expects {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Drops the image-feature columns of the recurrent input weights,
    /// turning step-feed weights into the matching init-feed weights.
    pub fn to_init_feed(&self, config: &ModelConfig) -> Result<(ModelConfig, ModelParams)> {
        if config.feed_mode != FeedMode::StepFeed {
            return Err(Error::Input("parameters are already init-feed".into()));
        }
        let rows = self.gru.w_input.rows();
        let in_cols = self.gru.w_input.cols();
        let keep = config.embed_dim;
        let mut w = Vec::with_capacity(rows * keep);
        for r in 0..rows {
            w.extend_from_slice(&self.gru.w_input.data()[r * in_cols..r * in_cols + keep]);
        }
        let mut params = self.clone();
        params.gru.w_input = Tensor::matrix(rows, keep, w)?;
        let cfg = config.clone().with_feed_mode(FeedMode::InitFeed);
        Ok((cfg, params))
    }
}

/// A trained captioner bundle.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub vocab: Vocab,
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParams, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Input(format!(
                "vocabulary has {} tokens, config expects {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        Ok(Self {
            config,
            params,
            vocab,
        })
    }

    /// Freshly initialized (untrained) model.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        let vocab = if config.vocab_size == SYNTHETIC_TOKENS.len() {
            Vocab::synthetic()
        } else {
            Vocab::anonymous(config.vocab_size)?
        };
        let params = ModelParams::init(&config, seed)?;
        Self::new(config, params, vocab)
    }

    pub fn image_shape(&self) -> [usize; 2] {
        [self.config.image_side, self.config.image_side]
    }

    /// `ln P(. | prefix, image)` over the vocabulary.
    pub fn step_logprobs(&self, state: &AdversarialState, prefix: &[Token]) -> Result<Vec<f64>> {
        let mut unrolled = Unrolled::new(self, &state.perturbed(), Track::Nothing)?;
        let node = unrolled.node(prefix)?;
        Ok(unrolled.logprobs(node).to_vec())
    }

    /// `Σ_t ln P(S_t | S_<t, image)`.
    pub fn sequence_logprob(&self, state: &AdversarialState, caption: &[Token]) -> Result<f64> {
        if caption.is_empty() {
            return Err(Error::Input("sequence_logprob of empty caption".into()));
        }
        let mut unrolled = Unrolled::new(self, &state.perturbed(), Track::Nothing)?;
        unrolled.sequence_logprob(caption)
    }
}

/// Box-constraint handling used while optimizing the noise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReparamMode {
    #[default]
    Clip,
    Arctanh,
}

/// Benign image plus additive noise, always expressed in the `[0, 1]` pixel domain.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialState {
    base: Tensor,
    noise: Tensor,
    mode: ReparamMode,
}

impl AdversarialState {
    pub fn new(base: Tensor, mode: ReparamMode) -> Result<Self> {
        if base.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("benign image must lie in [0, 1]".into()));
        }
        let noise = Tensor::zeros(base.shape());
        Ok(Self { base, noise, mode })
    }

    pub fn clean(base: Tensor) -> Result<Self> {
        Self::new(base, ReparamMode::Clip)
    }

    /// Replaces the noise; it is projected so that `I0 + eps` stays in `[0, 1]`.
    pub fn with_noise(mut self, noise: Tensor) -> Result<Self> {
        self.set_noise(noise)?;
        Ok(self)
    }

    pub fn set_noise(&mut self, noise: Tensor) -> Result<()> {
        if !noise.same_shape(&self.base) {
            return Err(Error::Dimension(format!(
                "noise {:?} vs image {:?}",
                noise.shape(),
                self.base.shape()
            )));
        }
        self.noise = crate::optimizer::project_box(&self.base, &noise)?;
        Ok(())
    }

    pub fn base(&self) -> &Tensor {
        &self.base
    }

    pub fn noise(&self) -> &Tensor {
        &self.noise
    }

    pub fn mode(&self) -> ReparamMode {
        self.mode
    }

    pub fn perturbed(&self) -> Tensor {
        let data = self
            .base
            .data()
            .iter()
            .zip(self.noise.data())
            .map(|(a, b)| (a + b).clamp(0.0, 1.0))
            .collect();
        Tensor::new(self.base.shape().to_vec(), data).expect("finite by construction")
    }

    pub fn noise_norm(&self) -> f64 {
        self.noise.norm_l2()
    }
}

/// Token sequence excluding BOS. Decoder outputs end in at most one EOS.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Caption(pub Vec<Token>);

impl Caption {
    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Checks the decoder-output invariants: indices in range, EOS only last.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if let Some(t) = self.0.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::Input(format!(
                "token {t} outside vocabulary of {vocab_size}"
            )));
        }
        if let Some(p) = self.0.iter().position(|&t| t == EOS) {
            if p + 1 != self.0.len() {
                return Err(Error::Input(format!("EOS at {p} before end of caption")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_round_trip_and_errors() {
        let v = Vocab::synthetic();
        assert_eq!(v.len(), 20);
        assert_eq!(v.id("<bos>"), Some(BOS));
        assert_eq!(v.id("<eos>"), Some(EOS));
        let back = Vocab::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert!(Vocab::new(vec!["a".into(), "b".into(), "a".into(), "c".into()]).is_err());
        assert!(Vocab::new(vec!["a".into(), "b".into()]).is_err());
        let c = v.encode("a dark bar on the left", true).unwrap();
        assert_eq!(c.len(), 7);
        assert_eq!(v.decode(c.tokens()), "a dark bar on the left <eos>");
        assert!(v.encode("a purple bar", false).is_err());
    }

    #[test]
    fn caption_validation() {
        assert!(Caption(vec![2, 3, EOS]).validate(5).is_ok());
        assert!(Caption(vec![2, EOS, 3]).validate(5).is_err());
        assert!(Caption(vec![9]).validate(5).is_err());
    }

    #[test]
    fn config_rejects_zero_dims() {
        let cfg = ModelConfig {
            hidden_dim: 0,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = ModelConfig::default();
        let a = ModelParams::init(&cfg, 3).unwrap();
        let b = ModelParams::init(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.flatten().iter().all(|v| v.abs() <= PARAM_INIT_SCALE));
        assert_ne!(a, ModelParams::init(&cfg, 4).unwrap());
    }

    #[test]
    fn noise_is_projected_into_box() {
        let base = Tensor::new(vec![1, 2], vec![0.9, 0.1]).unwrap();
        let s = AdversarialState::clean(base)
            .unwrap()
            .with_noise(Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap())
            .unwrap();
        let p = s.perturbed();
        assert!((p.data()[0] - 1.0).abs() < 1e-15);
        assert!(p.data()[1].abs() < 1e-15);
    }
}
