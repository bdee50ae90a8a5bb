//! Tiny decoder-only transformer.
//!
//! The same architecture plays two roles: the base generator, and the
//! class-conditional discriminator, where the first context token is a
//! control code instead of BOS. Discriminator-only scalars (the Bayes scale
//! `alpha` and the two class biases) live in every parameter set so a single
//! checkpoint format covers both roles.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{logsumexp, Array, AutodiffError, Tape, Var};
use crate::tokenizer::{BOS, CTRL_NEG, CTRL_POS, NUM_SPECIALS};

const CHECKPOINT_MAGIC: &[u8; 8] = b"VGUIDEW\0";
const CHECKPOINT_VERSION: u32 = 1;
const INIT_STD: f64 = 0.02;
const FFN_MULT: usize = 4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("context of {len} tokens is outside 1..={max}")]
    ContextLength { len: usize, max: usize },
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence must start with {expected}, found token {found}")]
    BadPrefix { expected: &'static str, found: u32 },
    #[error("checkpoint vocabulary hash {found:016x} does not match {expected:016x}")]
    VocabMismatch { expected: u64, found: u64 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub context_length: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            context_length: 256,
            embed_dim: 128,
            num_layers: 4,
            num_heads: 4,
            vocab_size: 512,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.embed_dim == 0 || self.num_heads == 0 || self.num_layers == 0 {
            return bad("embed_dim, num_heads and num_layers must be positive");
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad("embed_dim must be divisible by num_heads");
        }
        if self.context_length < 2 {
            return bad("context_length must be at least 2");
        }
        if self.vocab_size <= NUM_SPECIALS {
            return bad("vocab_size must exceed the number of special tokens");
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Which class a control-code prefix selects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ControlCode {
    Pos,
    Neg,
}

impl ControlCode {
    pub fn token(self) -> u32 {
        match self {
            ControlCode::Pos => CTRL_POS,
            ControlCode::Neg => CTRL_NEG,
        }
    }

    /// Index into the class-bias vector.
    pub fn index(self) -> usize {
        match self {
            ControlCode::Pos => 0,
            ControlCode::Neg => 1,
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            ControlCode::Pos => ControlCode::Neg,
            ControlCode::Neg => ControlCode::Pos,
        }
    }

    pub const BOTH: [ControlCode; 2] = [ControlCode::Pos, ControlCode::Neg];
}

/// Token sequence whose first token is BOS or a control code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlledSequence {
    tokens: Vec<u32>,
    control: Option<ControlCode>,
    label: Option<ControlCode>,
}

impl ControlledSequence {
    /// Checks the prefix invariant on an already assembled token list.
    pub fn new(
        tokens: Vec<u32>,
        control: Option<ControlCode>,
        label: Option<ControlCode>,
    ) -> Result<Self> {
        let (expected, name) = match control {
            Some(ControlCode::Pos) => (CTRL_POS, "CTRL_POS"),
            Some(ControlCode::Neg) => (CTRL_NEG, "CTRL_NEG"),
            None => (BOS, "BOS"),
        };
        match tokens.first() {
            Some(&t) if t == expected => Ok(ControlledSequence {
                tokens,
                control,
                label,
            }),
            Some(&t) => Err(ModelError::BadPrefix {
                expected: name,
                found: t,
            }),
            None => Err(ModelError::ContextLength {
                len: 0,
                max: usize::MAX,
            }),
        }
    }

    /// `[BOS] ++ body`
    pub fn unconditioned(body: &[u32]) -> Self {
        let mut tokens = Vec::with_capacity(body.len() + 1);
        tokens.push(BOS);
        tokens.extend_from_slice(body);
        ControlledSequence {
            tokens,
            control: None,
            label: None,
        }
    }

    /// `[code] ++ body`
    pub fn conditioned(code: ControlCode, body: &[u32]) -> Self {
        let mut tokens = Vec::with_capacity(body.len() + 1);
        tokens.push(code.token());
        tokens.extend_from_slice(body);
        ControlledSequence {
            tokens,
            control: Some(code),
            label: None,
        }
    }

    /// Conditioned on its own label, as used for discriminator training.
    pub fn labeled(label: ControlCode, body: &[u32]) -> Self {
        ControlledSequence {
            label: Some(label),
            ..Self::conditioned(label, body)
        }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Tokens after the prefix.
    pub fn body(&self) -> &[u32] {
        &self.tokens[1..]
    }

    pub fn control(&self) -> Option<ControlCode> {
        self.control
    }

    pub fn label(&self) -> Option<ControlCode> {
        self.label
    }

    /// Same body under a different prefix.
    pub fn with_control(&self, code: ControlCode) -> Self {
        ControlledSequence {
            control: Some(code),
            label: self.label,
            tokens: Self::conditioned(code, self.body()).tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub value: Array,
}

/// All weights of one model instance, in a fixed declared order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    config: ModelConfig,
    vocab_hash: u64,
    tensors: Vec<Tensor>,
}

const PER_LAYER: usize = 12;
// offsets inside a layer block
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const WQ: usize = 2;
const WK: usize = 3;
const WV: usize = 4;
const WO: usize = 5;
const LN2_G: usize = 6;
const LN2_B: usize = 7;
const W1: usize = 8;
const B1: usize = 9;
const W2: usize = 10;
const B2: usize = 11;

impl ModelParameters {
    /// Fresh weights. Both control-code embeddings start from the same random
    /// row, so an untrained discriminator is exactly class-symmetric.
    pub fn init(config: ModelConfig, vocab_hash: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut randn = |shape: &[usize]| {
            let n = shape.iter().product();
            Array::new(
                shape.to_vec(),
                (0..n).map(|_| normal.sample(&mut rng)).collect(),
            )
            .expect("shape")
        };
        let (v, d, c) = (config.vocab_size, config.embed_dim, config.context_length);
        let h = d * FFN_MULT;
        let mut tensors = Vec::new();
        let mut push = |name: String, value: Array| tensors.push(Tensor { name, value });

        let mut tok = randn(&[v, d]);
        let pos_row = tok.row(CTRL_POS as usize).to_vec();
        tok.data_mut()[CTRL_NEG as usize * d..(CTRL_NEG as usize + 1) * d]
            .copy_from_slice(&pos_row);
        push("tok_emb".into(), tok);
        push("pos_emb".into(), randn(&[c, d]));
        for l in 0..config.num_layers {
            push(format!("layer{l}.ln1.gain"), Array::filled(&[d], 1.0));
            push(format!("layer{l}.ln1.bias"), Array::zeros(&[d]));
            push(format!("layer{l}.attn.wq"), randn(&[d, d]));
            push(format!("layer{l}.attn.wk"), randn(&[d, d]));
            push(format!("layer{l}.attn.wv"), randn(&[d, d]));
            push(format!("layer{l}.attn.wo"), randn(&[d, d]));
            push(format!("layer{l}.ln2.gain"), Array::filled(&[d], 1.0));
            push(format!("layer{l}.ln2.bias"), Array::zeros(&[d]));
            push(format!("layer{l}.ffn.w1"), randn(&[d, h]));
            push(format!("layer{l}.ffn.b1"), Array::zeros(&[h]));
            push(format!("layer{l}.ffn.w2"), randn(&[h, d]));
            push(format!("layer{l}.ffn.b2"), Array::zeros(&[d]));
        }
        push("final_ln.gain".into(), Array::filled(&[d], 1.0));
        push("final_ln.bias".into(), Array::zeros(&[d]));
        push("out.weight".into(), randn(&[d, v]));
        push("out.bias".into(), Array::zeros(&[v]));
        push("disc.alpha".into(), Array::scalar(1.0));
        push("disc.class_bias".into(), Array::zeros(&[2]));
        Ok(ModelParameters {
            config,
            vocab_hash,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_hash(&self) -> u64 {
        self.vocab_hash
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    fn layer_base(l: usize) -> usize {
        2 + l * PER_LAYER
    }

    fn head_base(&self) -> usize {
        Self::layer_base(self.config.num_layers)
    }

    pub(crate) fn alpha_index(&self) -> usize {
        self.tensors.len() - 2
    }

    pub(crate) fn class_bias_index(&self) -> usize {
        self.tensors.len() - 1
    }

    /// Learnable exponent scale of the Bayes-rule class posterior.
    pub fn alpha(&self) -> f64 {
        self.tensors[self.alpha_index()].value.data()[0]
    }

    /// Class biases `[b_pos, b_neg]`; priors are their softmax.
    pub fn class_bias(&self) -> [f64; 2] {
        let b = self.tensors[self.class_bias_index()].value.data();
        [b[0], b[1]]
    }

    pub fn set_alpha(&mut self, alpha: f64) {
        let i = self.alpha_index();
        self.tensors[i].value.data_mut()[0] = alpha;
    }

    pub fn set_class_bias(&mut self, bias: [f64; 2]) {
        let i = self.class_bias_index();
        self.tensors[i].value.data_mut().copy_from_slice(&bias);
    }

    /// Mutable view of one token's embedding row.
    pub fn token_embedding_mut(&mut self, token: u32) -> &mut [f64] {
        let d = self.config.embed_dim;
        let t = token as usize;
        &mut self.tensors[0].value.data_mut()[t * d..(t + 1) * d]
    }

    /// Records every tensor as a leaf on `tape`, in declared order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.value.clone()))
            .collect()
    }

    fn check_context(&self, tokens: &[u32]) -> Result<()> {
        let max = self.config.context_length;
        if tokens.is_empty() || tokens.len() > max {
            return Err(ModelError::ContextLength {
                len: tokens.len(),
                max,
            });
        }
        if let Some(&bad) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(ModelError::TokenOutOfRange {
                token: bad,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Final hidden states `[T × d]` for `tokens`.
    fn hidden(&self, tape: &mut Tape, vars: &[Var], tokens: &[u32]) -> Result<Var> {
        self.check_context(tokens)?;
        let cfg = &self.config;
        let t = tokens.len();
        let ids: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
        let positions: Vec<usize> = (0..t).collect();
        let tok = tape.embedding(vars[0], &ids)?;
        let pos = tape.embedding(vars[1], &positions)?;
        let mut x = tape.add(tok, pos)?;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        for l in 0..cfg.num_layers {
            let p = |k: usize| vars[Self::layer_base(l) + k];
            let h = tape.layer_norm(x, p(LN1_G), p(LN1_B))?;
            let q = tape.matmul(h, p(WQ))?;
            let k = tape.matmul(h, p(WK))?;
            let v = tape.matmul(h, p(WV))?;
            let mut heads = Vec::with_capacity(cfg.num_heads);
            for head in 0..cfg.num_heads {
                let (a, b) = (head * dh, (head + 1) * dh);
                let qh = tape.slice_cols(q, a, b)?;
                let kh = tape.slice_cols(k, a, b)?;
                let vh = tape.slice_cols(v, a, b)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, scale);
                let masked = tape.causal_mask(scores)?;
                let logw = tape.log_softmax(masked);
                let w = tape.exp(logw);
                heads.push(tape.matmul(w, vh)?);
            }
            let cat = if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat(&heads)?
            };
            let attn = tape.matmul(cat, p(WO))?;
            x = tape.add(x, attn)?;
            let h2 = tape.layer_norm(x, p(LN2_G), p(LN2_B))?;
            let f = tape.matmul(h2, p(W1))?;
            let f = tape.add(f, p(B1))?;
            let f = tape.tanh(f);
            let f = tape.matmul(f, p(W2))?;
            let f = tape.add(f, p(B2))?;
            x = tape.add(x, f)?;
        }
        Ok(x)
    }

    fn project(&self, tape: &mut Tape, vars: &[Var], hidden: Var) -> Result<Var> {
        let base = self.head_base();
        let h = tape.layer_norm(hidden, vars[base], vars[base + 1])?;
        let logits = tape.matmul(h, vars[base + 2])?;
        let logits = tape.add(logits, vars[base + 3])?;
        Ok(tape.log_softmax(logits))
    }

    /// Next-token log-probabilities `[T × V]` at every position of `tokens`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], tokens: &[u32]) -> Result<Var> {
        let h = self.hidden(tape, vars, tokens)?;
        self.project(tape, vars, h)
    }

    /// Next-token log-probabilities `[1 × V]` after the last token only.
    pub fn forward_last(&self, tape: &mut Tape, vars: &[Var], tokens: &[u32]) -> Result<Var> {
        let h = self.hidden(tape, vars, tokens)?;
        let t = tokens.len();
        let last = tape.slice_rows(h, t - 1, t)?;
        self.project(tape, vars, last)
    }

    /// Summed log-probability of `tokens[1..]` given their prefixes, on `tape`.
    pub fn sequence_log_prob_var(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        tokens: &[u32],
    ) -> Result<Var> {
        if tokens.len() < 2 {
            let zero = tape.leaf(Array::scalar(0.0));
            return Ok(zero);
        }
        let inputs = &tokens[..tokens.len() - 1];
        let lp = self.forward(tape, vars, inputs)?;
        let targets: Vec<usize> = tokens[1..].iter().map(|&x| x as usize).collect();
        let weights = vec![1.0; targets.len()];
        let nll = tape.cross_entropy(lp, &targets, &weights)?;
        Ok(tape.scale(nll, -1.0))
    }

    /// Log-distribution over the next token given `context`.
    pub fn next_token_logprobs(&self, context: &[u32]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let lp = self.forward_last(&mut tape, &vars, context)?;
        Ok(tape.value(lp).data().to_vec())
    }

    /// `Σ_t log p(x_t | x_<t)` over the body, conditioned on the sequence's prefix.
    pub fn sequence_log_prob(&self, seq: &ControlledSequence) -> Result<f64> {
        self.check_context(seq.tokens())?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let v = self.sequence_log_prob_var(&mut tape, &vars, seq.tokens())?;
        Ok(tape.value(v).data()[0])
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let c = &self.config;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for v in [
            c.context_length,
            c.embed_dim,
            c.num_layers,
            c.num_heads,
            c.vocab_size,
        ] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&c.seed.to_le_bytes())?;
        w.write_all(&self.vocab_hash.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&(t.name.len() as u32).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&(t.value.shape().len() as u32).to_le_bytes())?;
            for &dim in t.value.shape() {
                w.write_all(&(dim as u64).to_le_bytes())?;
            }
            for &x in t.value.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Loads a checkpoint without checking its vocabulary.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// Loads a checkpoint and rejects it unless it was trained on `vocab_hash`.
    pub fn load_checkpoint_for(path: &Path, vocab_hash: u64) -> Result<Self> {
        let params = Self::load_checkpoint(path)?;
        if params.vocab_hash != vocab_hash {
            return Err(ModelError::VocabMismatch {
                expected: vocab_hash,
                found: params.vocab_hash,
            });
        }
        Ok(params)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let corrupt = |m: &str| ModelError::Corrupt(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| corrupt("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Corrupt(format!(
                "unsupported version {version}"
            )));
        }
        let mut dims = [0usize; 5];
        for d in dims.iter_mut() {
            *d = read_u64(r)? as usize;
        }
        let config = ModelConfig {
            context_length: dims[0],
            embed_dim: dims[1],
            num_layers: dims[2],
            num_heads: dims[3],
            vocab_size: dims[4],
            seed: read_u64(r)?,
        };
        config.validate()?;
        let vocab_hash = read_u64(r)?;
        // the declared layout is the source of truth for names and shapes
        let template = ModelParameters::init(config, vocab_hash)?;
        let count = read_u32(r)? as usize;
        if count != template.tensors.len() {
            return Err(corrupt("tensor count does not match config"));
        }
        let mut tensors = Vec::with_capacity(count);
        for expected in &template.tensors {
            let name_len = read_u32(r)? as usize;
            if name_len > 1024 {
                return Err(corrupt("tensor name too long"));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)
                .map_err(|_| corrupt("truncated tensor name"))?;
            let name = String::from_utf8(name).map_err(|_| corrupt("tensor name is not UTF-8"))?;
            let ndim = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim.min(8) {
                shape.push(read_u64(r)? as usize);
            }
            if name != expected.name || shape != expected.value.shape() {
                return Err(ModelError::Corrupt(format!(
                    "unexpected tensor {name} {shape:?}"
                )));
            }
            let mut data = vec![0.0; expected.value.len()];
            let mut b = [0u8; 8];
            for x in data.iter_mut() {
                r.read_exact(&mut b)
                    .map_err(|_| corrupt("truncated tensor data"))?;
                *x = f64::from_le_bytes(b);
            }
            tensors.push(Tensor {
                name,
                value: Array::new(shape, data)?,
            });
        }
        Ok(ModelParameters {
            config,
            vocab_hash,
            tensors,
        })
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| ModelError::Corrupt("truncated".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| ModelError::Corrupt("truncated".into()))?;
    Ok(u64::from_le_bytes(b))
}

/// Converts a log-probability vector to probabilities.
pub fn probs_from_logprobs(lp: &[f64]) -> Vec<f64> {
    let lse = logsumexp(lp);
    lp.iter().map(|v| (v - lse).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> ModelParameters {
        let cfg = ModelConfig {
            context_length: 16,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            vocab_size: 12,
            seed,
        };
        ModelParameters::init(cfg, 42).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig {
            embed_dim: 10,
            num_heads: 4,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg = ModelConfig {
            context_length: 1,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn fresh_model_is_near_uniform_and_normalized() {
        let m = tiny(1);
        let lp = m.next_token_logprobs(&[BOS, 7, 8]).unwrap();
        assert!(logsumexp(&lp).abs() < 1e-12);
        let p = probs_from_logprobs(&lp);
        let (max, min) = p
            .iter()
            .fold((0.0f64, 1.0f64), |(a, b), &x| (a.max(x), b.min(x)));
        assert!(max / min < 10.0, "ratio {}", max / min);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn deterministic_inference() {
        let m = tiny(2);
        assert_eq!(
            m.next_token_logprobs(&[BOS, 5, 6]).unwrap(),
            m.next_token_logprobs(&[BOS, 5, 6]).unwrap()
        );
    }

    #[test]
    fn context_errors() {
        let m = tiny(3);
        assert!(matches!(
            m.next_token_logprobs(&[]),
            Err(ModelError::ContextLength { .. })
        ));
        assert!(matches!(
            m.next_token_logprobs(&[BOS; 17]),
            Err(ModelError::ContextLength { .. })
        ));
        assert!(matches!(
            m.next_token_logprobs(&[BOS, 99]),
            Err(ModelError::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn sequence_log_prob_is_chain_rule_sum() {
        let m = tiny(4);
        let seq = ControlledSequence::conditioned(ControlCode::Pos, &[7, 9, 5, 11, 6]);
        let mut total = 0.0;
        for t in 1..seq.tokens().len() {
            let lp = m.next_token_logprobs(&seq.tokens()[..t]).unwrap();
            total += lp[seq.tokens()[t] as usize];
        }
        assert!((m.sequence_log_prob(&seq).unwrap() - total).abs() < 1e-12);
    }

    #[test]
    fn single_token_sequence() {
        let m = tiny(5);
        let seq = ControlledSequence::unconditioned(&[9]);
        let lp = m.next_token_logprobs(&[BOS]).unwrap();
        assert!((m.sequence_log_prob(&seq).unwrap() - lp[9]).abs() < 1e-15);
    }

    #[test]
    fn symmetric_init_gives_equal_class_likelihoods() {
        let m = tiny(6);
        let body = [8, 9, 10, 6];
        let pos = m
            .sequence_log_prob(&ControlledSequence::conditioned(ControlCode::Pos, &body))
            .unwrap();
        let neg = m
            .sequence_log_prob(&ControlledSequence::conditioned(ControlCode::Neg, &body))
            .unwrap();
        assert!((pos - neg).abs() < 1e-9);
    }

    #[test]
    fn causality() {
        let m = tiny(7);
        let a = [BOS, 5, 6, 7, 8, 9];
        let mut b = a;
        b[4] = 11;
        let mut ta = Tape::new();
        let va = m.bind(&mut ta);
        let la = m.forward(&mut ta, &va, &a).unwrap();
        let mut tb = Tape::new();
        let vb = m.bind(&mut tb);
        let lb = m.forward(&mut tb, &vb, &b).unwrap();
        for pos in 0..4 {
            assert_eq!(
                ta.value(la).row(pos),
                tb.value(lb).row(pos),
                "position {pos}"
            );
        }
        assert_ne!(ta.value(la).row(4), tb.value(lb).row(4));
    }

    #[test]
    fn prefix_invariant() {
        assert!(ControlledSequence::new(vec![CTRL_POS, 7], Some(ControlCode::Pos), None).is_ok());
        assert!(matches!(
            ControlledSequence::new(vec![BOS, 7], Some(ControlCode::Neg), None),
            Err(ModelError::BadPrefix { .. })
        ));
        let s = ControlledSequence::labeled(ControlCode::Neg, &[7, 8]);
        assert_eq!(s.tokens()[0], CTRL_NEG);
        assert_eq!(s.with_control(ControlCode::Pos).tokens(), &[CTRL_POS, 7, 8]);
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let mut m = tiny(8);
        m.set_alpha(1.75);
        m.set_class_bias([0.25, -0.5]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save_checkpoint(&path).unwrap();
        let back = ModelParameters::load_checkpoint_for(&path, 42).unwrap();
        for (a, b) in m.tensors().iter().zip(back.tensors()) {
            assert_eq!(a.name, b.name);
            assert!(a
                .value
                .data()
                .iter()
                .zip(b.value.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.config(), m.config());
        assert!(matches!(
            ModelParameters::load_checkpoint_for(&path, 43),
            Err(ModelError::VocabMismatch { .. })
        ));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            ModelParameters::load_checkpoint(&path),
            Err(ModelError::Corrupt(_))
        ));
    }
}
