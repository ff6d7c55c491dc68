use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::{AdversarialState, FeedMode, Model, ModelParams, Token, BOS};
use crate::numerics::{GruVars, Tape, Tensor, Var};

/// Which leaves receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Track {
    Nothing,
    Pixels,
    Params,
}

/// Index of a prefix in the trie held by [`Unrolled`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Score {
    /// `ln P(token | prefix)`.
    LogProb,
    /// Pre-softmax score of `token` after `prefix`.
    Logit,
}

/// One weighted `score(token | prefix)` term of an objective.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveTerm {
    pub prefix: Vec<Token>,
    pub token: Token,
    pub weight: f64,
    pub score: Score,
}

impl ObjectiveTerm {
    pub fn logprob(prefix: Vec<Token>, token: Token, weight: f64) -> Self {
        Self {
            prefix,
            token,
            weight,
            score: Score::LogProb,
        }
    }

    pub fn logit(prefix: Vec<Token>, token: Token, weight: f64) -> Self {
        Self {
            prefix,
            token,
            weight,
            score: Score::Logit,
        }
    }
}

struct ParamVars {
    enc1_w: Var,
    enc1_b: Var,
    enc2_w: Var,
    enc2_b: Var,
    init_w: Var,
    init_b: Var,
    embedding: Var,
    gru: GruVars,
    out_w: Var,
    out_b: Var,
}

impl ParamVars {
    fn all(&self) -> [Var; 13] {
        [
            self.enc1_w,
            self.enc1_b,
            self.enc2_w,
            self.enc2_b,
            self.init_w,
            self.init_b,
            self.embedding,
            self.gru.w_input,
            self.gru.w_hidden,
            self.gru.b_input,
            self.gru.b_hidden,
            self.out_w,
            self.out_b,
        ]
    }
}

struct PrefixNode {
    hidden: Var,
    logits: Var,
    logprobs: Var,
}

/// The decoder unrolled over a trie of prefixes for one fixed image.
pub struct Unrolled<'a> {
    model: &'a Model,
    tape: Tape<'a>,
    pixels: Var,
    feature: Var,
    vars: ParamVars,
    nodes: Vec<PrefixNode>,
    children: HashMap<(usize, Token), usize>,
}

impl<'a> Unrolled<'a> {
    pub fn new(model: &'a Model, pixels: &Tensor, track: Track) -> Result<Self> {
        let config = &model.config;
        if pixels.len() != config.pixels() {
            return Err(Error::Dimension(format!(
                "image has {} pixels, model expects {}",
                pixels.len(),
                config.pixels()
            )));
        }
        let params: &'a ModelParams = &model.params;
        let mut tape = Tape::new();
        let grad_params = track == Track::Params;
        let pixels = tape.leaf_owned(pixels.clone(), track == Track::Pixels);
        let vars = ParamVars {
            enc1_w: tape.leaf(&params.enc1_w, grad_params),
            enc1_b: tape.leaf(&params.enc1_b, grad_params),
            enc2_w: tape.leaf(&params.enc2_w, grad_params),
            enc2_b: tape.leaf(&params.enc2_b, grad_params),
            init_w: tape.leaf(&params.init_w, grad_params),
            init_b: tape.leaf(&params.init_b, grad_params),
            embedding: tape.leaf(&params.embedding, grad_params),
            gru: params.gru.on_tape(&mut tape, grad_params),
            out_w: tape.leaf(&params.out_w, grad_params),
            out_b: tape.leaf(&params.out_b, grad_params),
        };
        let centered = tape.affine(pixels, 2.0, -1.0)?;
        let a1 = tape.dense(centered, vars.enc1_w, vars.enc1_b)?;
        let f1 = tape.tanh(a1)?;
        let a2 = tape.dense(f1, vars.enc2_w, vars.enc2_b)?;
        let feature = tape.tanh(a2)?;
        let a0 = tape.dense(feature, vars.init_w, vars.init_b)?;
        let h0 = tape.tanh(a0)?;

        let mut this = Self {
            model,
            tape,
            pixels,
            feature,
            vars,
            nodes: Vec::new(),
            children: HashMap::new(),
        };
        let root = this.advance(h0, BOS)?;
        this.nodes.push(root);
        Ok(this)
    }

    fn advance(&mut self, hidden: Var, token: Token) -> Result<PrefixNode> {
        let emb = self.tape.embed(self.vars.embedding, token)?;
        let input = match self.model.config.feed_mode {
            FeedMode::InitFeed => emb,
            FeedMode::StepFeed => self.tape.concat(emb, self.feature)?,
        };
        let hidden = self.tape.gru_step(input, hidden, self.vars.gru)?;
        let logits = self.tape.dense(hidden, self.vars.out_w, self.vars.out_b)?;
        let logprobs = self.tape.log_softmax(logits)?;
        Ok(PrefixNode {
            hidden,
            logits,
            logprobs,
        })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn tape(&self) -> &Tape<'a> {
        &self.tape
    }

    pub fn feature(&self) -> &[f64] {
        self.tape.value(self.feature)
    }

    /// Number of distinct prefixes evaluated so far.
    pub fn prefixes(&self) -> usize {
        self.nodes.len()
    }

    /// Trie node for `prefix`, extending the trie as needed.
    pub fn node(&mut self, prefix: &[Token]) -> Result<NodeId> {
        let vocab = self.model.config.vocab_size;
        if prefix.len() >= self.model.config.max_len {
            return Err(Error::Input(format!(
                "prefix of length {} reaches max length {}",
                prefix.len(),
                self.model.config.max_len
            )));
        }
        let mut current = 0usize;
        for &tok in prefix {
            if tok >= vocab {
                return Err(Error::Input(format!(
                    "token {tok} outside vocabulary of {vocab}"
                )));
            }
            current = match self.children.get(&(current, tok)) {
                Some(&child) => child,
                None => {
                    let hidden = self.nodes[current].hidden;
                    let node = self.advance(hidden, tok)?;
                    self.nodes.push(node);
                    let id = self.nodes.len() - 1;
                    self.children.insert((current, tok), id);
                    id
                }
            };
        }
        Ok(NodeId(current))
    }

    pub fn logprobs(&self, node: NodeId) -> &[f64] {
        self.tape.value(self.nodes[node.0].logprobs)
    }

    pub fn logprob_var(&self, node: NodeId) -> Var {
        self.nodes[node.0].logprobs
    }

    pub fn logit_var(&self, node: NodeId) -> Var {
        self.nodes[node.0].logits
    }

    pub fn logits(&self, node: NodeId) -> &[f64] {
        self.tape.value(self.nodes[node.0].logits)
    }

    pub fn step_logprobs(&mut self, prefix: &[Token]) -> Result<Vec<f64>> {
        let id = self.node(prefix)?;
        Ok(self.logprobs(id).to_vec())
    }

    pub fn sequence_logprob(&mut self, tokens: &[Token]) -> Result<f64> {
        let mut total = 0.0;
        for t in 0..tokens.len() {
            let id = self.node(&tokens[..t])?;
            total += self.logprobs(id)[tokens[t]];
        }
        Ok(total)
    }

    fn score_var(&self, node: NodeId, score: Score) -> Var {
        match score {
            Score::LogProb => self.nodes[node.0].logprobs,
            Score::Logit => self.nodes[node.0].logits,
        }
    }

    /// Evaluates `Σ weight · score` and returns the seeds for its reverse pass.
    pub fn evaluate(&mut self, terms: &[ObjectiveTerm]) -> Result<(f64, Vec<(Var, usize, f64)>)> {
        let vocab = self.model.config.vocab_size;
        let mut value = 0.0;
        let mut seeds = Vec::with_capacity(terms.len());
        for term in terms {
            if term.token >= vocab {
                return Err(Error::Input(format!(
                    "token {} outside vocabulary of {vocab}",
                    term.token
                )));
            }
            let id = self.node(&term.prefix)?;
            let var = self.score_var(id, term.score);
            value += term.weight * self.tape.value(var)[term.token];
            seeds.push((var, term.token, term.weight));
        }
        Ok((value, seeds))
    }

    /// Gradient of the seeded objective with respect to the input pixels.
    pub fn pixel_gradient(&self, seeds: &[(Var, usize, f64)]) -> Result<Vec<f64>> {
        let grads = self.tape.backward(seeds)?;
        Ok(grads.dense(&self.tape, self.pixels))
    }

    /// Gradient of the seeded objective with respect to every parameter,
    /// flattened in [`ModelParams::flatten`] order.
    pub fn param_gradient(&self, seeds: &[(Var, usize, f64)]) -> Result<Vec<f64>> {
        let grads = self.tape.backward(seeds)?;
        let mut out = Vec::with_capacity(self.model.params.num_values());
        for var in self.vars.all() {
            out.extend(grads.dense(&self.tape, var));
        }
        Ok(out)
    }
}

/// Ascent direction of `Σ weight · ln P(token | prefix, I0 + eps) − λ ‖eps‖²`
/// with respect to `eps`, plus the objective value.
pub fn grad_wrt_noise(
    model: &Model,
    state: &AdversarialState,
    terms: &[ObjectiveTerm],
    l2_weight: f64,
) -> Result<(f64, Tensor)> {
    let mut unrolled = Unrolled::new(model, &state.perturbed(), Track::Pixels)?;
    let (value, seeds) = unrolled.evaluate(terms)?;
    let mut grad = unrolled.pixel_gradient(&seeds)?;
    let noise = state.noise().data();
    for (g, e) in grad.iter_mut().zip(noise) {
        *g -= 2.0 * l2_weight * e;
    }
    let value = value - l2_weight * state.noise().sum_sq();
    if !value.is_finite() {
        return Err(Error::Numerical(format!("objective value {value}")));
    }
    Ok((value, Tensor::new(state.base().shape().to_vec(), grad)?))
}
