//! Training objectives, the Bayes-rule class posterior, Adam with cosine
//! decay, and the generator / discriminator training loops.
//!
//! Every loss is built on an autodiff [`Tape`] so that its value and its
//! gradient come from the same graph. Losses are means over sequences of
//! per-sequence means over loss positions.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Array, AutodiffError, Tape, Var};
use crate::corpus::InstructionExample;
use crate::model::{ControlCode, ControlledSequence, ModelConfig, ModelError, ModelParameters};
use crate::tokenizer::{Vocab, EOS};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("sequence {index} has no positions that contribute to the loss")]
    NoLossPositions { index: usize },
    #[error("sequence {index} has no control-code prefix")]
    MissingPrefix { index: usize },
    #[error("sequence {index} has no class label")]
    MissingLabel { index: usize },
    #[error("class posterior needs at least one token")]
    EmptySequence,
    #[error("lambda {0} outside [0, 1]")]
    LambdaRange(f64),
    #[error("total_steps must be positive")]
    ZeroSteps,
    #[error("step {step} outside 0..={total}")]
    StepRange { step: usize, total: usize },
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("gradient count or shape does not match parameters")]
    GradientShape,
    #[error("example {index} needs {len} tokens but the context holds {max}")]
    TooLong {
        index: usize,
        len: usize,
        max: usize,
    },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("discriminator corpus must contain both labels")]
    SingleClass,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Weight of the generative loss in the hybrid objective.
    pub lambda: f64,
    /// Fraction of the discriminator corpus held out for accuracy.
    pub heldout_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 4,
            batch_size: 8,
            lr_init: 3e-4,
            lr_min: 0.0,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            lambda: 0.5,
            heldout_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.lr_init > 0.0) || self.lr_min < 0.0 || self.lr_min > self.lr_init {
            return bad("need lr_init > 0 and 0 <= lr_min <= lr_init");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(TrainError::LambdaRange(self.lambda));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return bad("heldout_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// A sequence plus an optional mask over its loss positions. Position `j`
/// is the prediction of `tokens[j + 1]`; `None` means every position counts.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSequence {
    pub sequence: ControlledSequence,
    pub loss_mask: Option<Vec<bool>>,
}

impl TrainingSequence {
    pub fn new(sequence: ControlledSequence) -> Self {
        TrainingSequence {
            sequence,
            loss_mask: None,
        }
    }

    fn weights(&self, index: usize) -> Result<Vec<f64>> {
        let n = self.sequence.tokens().len().saturating_sub(1);
        let w: Vec<f64> = match &self.loss_mask {
            Some(mask) => (0..n)
                .map(|j| {
                    if mask.get(j).copied().unwrap_or(true) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect(),
            None => vec![1.0; n],
        };
        let count: f64 = w.iter().sum();
        if count == 0.0 {
            return Err(TrainError::NoLossPositions { index });
        }
        Ok(w.into_iter().map(|x| x / count).collect())
    }
}

/// Loss values of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub generative: Option<f64>,
    pub discriminative: Option<f64>,
}

/// Which objective a graph should compute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Plain next-token NLL, no prefix requirement.
    Nll,
    /// NLL with each sequence conditioned on its own control code.
    Generative,
    Discriminative,
    Hybrid {
        lambda: f64,
    },
}

struct LossVars {
    total: Var,
    generative: Option<Var>,
    discriminative: Option<Var>,
}

/// Mean masked NLL of one sequence under its own prefix, as a graph node.
fn masked_nll(
    tape: &mut Tape,
    vars: &[Var],
    params: &ModelParameters,
    seq: &TrainingSequence,
    index: usize,
) -> Result<Var> {
    let tokens = seq.sequence.tokens();
    let weights = seq.weights(index)?;
    let lp = params.forward(tape, vars, &tokens[..tokens.len() - 1])?;
    let targets: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
    Ok(tape.cross_entropy(lp, &targets, &weights)?)
}

/// Class logits `log p(c) + (α/t) log p(x|c)` for `[POS, NEG]`, given the
/// two log-likelihood nodes.
fn class_logits(
    tape: &mut Tape,
    vars: &[Var],
    params: &ModelParameters,
    ll: [Var; 2],
    t: usize,
) -> Result<Var> {
    let alpha = vars[params.alpha_index()];
    let bias = vars[params.class_bias_index()];
    let both = tape.concat(&ll)?;
    let per_token = tape.scale(both, 1.0 / t as f64);
    let scaled = tape.mul(per_token, alpha)?;
    let prior = tape.log_softmax(bias);
    let z = tape.add(scaled, prior)?;
    Ok(tape.log_softmax(z))
}

/// Log-posterior vector `[log p(POS|x), log p(NEG|x)]` as a graph node.
pub fn class_log_posterior_var(
    tape: &mut Tape,
    vars: &[Var],
    params: &ModelParameters,
    body: &[u32],
) -> Result<Var> {
    if body.is_empty() {
        return Err(TrainError::EmptySequence);
    }
    let mut ll = [None, None];
    for code in ControlCode::BOTH {
        let seq = ControlledSequence::conditioned(code, body);
        ll[code.index()] = Some(params.sequence_log_prob_var(tape, vars, seq.tokens())?);
    }
    class_logits(
        tape,
        vars,
        params,
        [ll[0].unwrap(), ll[1].unwrap()],
        body.len(),
    )
}

fn objective_graph(
    tape: &mut Tape,
    vars: &[Var],
    params: &ModelParameters,
    batch: &[TrainingSequence],
    objective: Objective,
) -> Result<LossVars> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if let Objective::Hybrid { lambda } = objective {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(TrainError::LambdaRange(lambda));
        }
    }
    let needs_prefix = !matches!(objective, Objective::Nll);
    let needs_label = matches!(
        objective,
        Objective::Discriminative | Objective::Hybrid { .. }
    );
    let needs_gen = matches!(
        objective,
        Objective::Nll | Objective::Generative | Objective::Hybrid { .. }
    );
    for (i, ex) in batch.iter().enumerate() {
        if needs_prefix && ex.sequence.control().is_none() {
            return Err(TrainError::MissingPrefix { index: i });
        }
        if needs_label && ex.sequence.label().is_none() {
            return Err(TrainError::MissingLabel { index: i });
        }
    }
    let inv = 1.0 / batch.len() as f64;
    let mut gen_terms = Vec::new();
    let mut disc_terms = Vec::new();
    for (i, ex) in batch.iter().enumerate() {
        if !needs_label {
            gen_terms.push(masked_nll(tape, vars, params, ex, i)?);
            continue;
        }
        let label = ex.sequence.label().expect("checked above");
        let body = ex.sequence.body();
        if body.is_empty() {
            return Err(TrainError::NoLossPositions { index: i });
        }
        let mut ll = [None, None];
        for code in ControlCode::BOTH {
            let seq = ControlledSequence::conditioned(code, body);
            let tokens = seq.tokens();
            let lp = params.forward(tape, vars, &tokens[..tokens.len() - 1])?;
            let targets: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
            if code == label && needs_gen {
                let w = TrainingSequence {
                    sequence: seq.clone(),
                    loss_mask: ex.loss_mask.clone(),
                }
                .weights(i)?;
                gen_terms.push(tape.cross_entropy(lp, &targets, &w)?);
            }
            let nll = tape.cross_entropy(lp, &targets, &vec![1.0; targets.len()])?;
            ll[code.index()] = Some(tape.scale(nll, -1.0));
        }
        let logpost = class_logits(
            tape,
            vars,
            params,
            [ll[0].unwrap(), ll[1].unwrap()],
            body.len(),
        )?;
        disc_terms.push(tape.cross_entropy(logpost, &[label.index()], &[1.0])?);
    }
    let mean = |tape: &mut Tape, terms: &[Var]| -> Result<Option<Var>> {
        if terms.is_empty() {
            return Ok(None);
        }
        let cat = tape.concat(terms)?;
        let s = tape.sum(cat);
        Ok(Some(tape.scale(s, inv)))
    };
    let generative = mean(tape, &gen_terms)?;
    let discriminative = mean(tape, &disc_terms)?;
    let total = match objective {
        Objective::Nll | Objective::Generative => generative.expect("generative terms"),
        Objective::Discriminative => discriminative.expect("discriminative terms"),
        Objective::Hybrid { lambda } => {
            let g = tape.scale(generative.expect("generative terms"), lambda);
            let d = tape.scale(discriminative.expect("discriminative terms"), 1.0 - lambda);
            tape.add(g, d)?
        }
    };
    Ok(LossVars {
        total,
        generative,
        discriminative,
    })
}

/// Evaluates an objective without gradients.
pub fn evaluate(
    params: &ModelParameters,
    batch: &[TrainingSequence],
    objective: Objective,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let lv = objective_graph(&mut tape, &vars, params, batch, objective)?;
    let val = |v: Var| tape.value(v).data()[0];
    Ok(LossBreakdown {
        total: val(lv.total),
        generative: lv.generative.map(val),
        discriminative: lv.discriminative.map(val),
    })
}

/// Objective value and its gradient for every parameter tensor.
pub fn loss_and_gradients(
    params: &ModelParameters,
    batch: &[TrainingSequence],
    objective: Objective,
) -> Result<(LossBreakdown, Vec<Array>)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let lv = objective_graph(&mut tape, &vars, params, batch, objective)?;
    let mut grads = tape.backward(lv.total)?;
    let val = |v: Var| tape.value(v).data()[0];
    let breakdown = LossBreakdown {
        total: val(lv.total),
        generative: lv.generative.map(val),
        discriminative: lv.discriminative.map(val),
    };
    Ok((breakdown, vars.iter().map(|&v| grads.take(v)).collect()))
}

/// Mean over sequences of the mean negative log-likelihood over loss positions.
pub fn nll_loss(params: &ModelParameters, batch: &[TrainingSequence]) -> Result<f64> {
    Ok(evaluate(params, batch, Objective::Nll)?.total)
}

/// [`nll_loss`] with every sequence conditioned on its own control code.
pub fn generative_loss(params: &ModelParameters, batch: &[TrainingSequence]) -> Result<f64> {
    Ok(evaluate(params, batch, Objective::Generative)?.total)
}

/// Mean of `-log p(c_y | x_{1:n})` over the batch.
pub fn discriminative_loss(params: &ModelParameters, batch: &[TrainingSequence]) -> Result<f64> {
    Ok(evaluate(params, batch, Objective::Discriminative)?.total)
}

/// `λ·L_g + (1−λ)·L_d`.
pub fn hybrid_loss(
    params: &ModelParameters,
    batch: &[TrainingSequence],
    lambda: f64,
) -> Result<f64> {
    Ok(evaluate(params, batch, Objective::Hybrid { lambda })?.total)
}

/// Bayes-rule posterior `[p(POS|x), p(NEG|x)]` from the two class
/// log-likelihoods of a length-`t` sequence. Likelihoods enter with exponent
/// `α/t`; priors are `softmax(bias)`. The two entries sum to one.
pub fn posterior_from_loglik(
    ll_pos: f64,
    ll_neg: f64,
    t: usize,
    alpha: f64,
    bias: [f64; 2],
) -> Result<[f64; 2]> {
    if t == 0 {
        return Err(TrainError::EmptySequence);
    }
    let scale = alpha / t as f64;
    let z_pos = bias[0] + scale * ll_pos;
    let z_neg = bias[1] + scale * ll_neg;
    Ok(two_class_softmax(z_pos, z_neg))
}

/// `[σ(a−b), σ(b−a)]`, with the smaller entry computed directly and the
/// larger as its complement.
pub fn two_class_softmax(a: f64, b: f64) -> [f64; 2] {
    let d = a - b;
    if d >= 0.0 {
        let small = 1.0 / (1.0 + d.exp());
        [1.0 - small, small]
    } else {
        let small = 1.0 / (1.0 + (-d).exp());
        [small, 1.0 - small]
    }
}

/// Probability that `body` belongs to the POS class.
pub fn class_posterior(params: &ModelParameters, body: &[u32]) -> Result<f64> {
    if body.is_empty() {
        return Err(TrainError::EmptySequence);
    }
    let ll_pos =
        params.sequence_log_prob(&ControlledSequence::conditioned(ControlCode::Pos, body))?;
    let ll_neg =
        params.sequence_log_prob(&ControlledSequence::conditioned(ControlCode::Neg, body))?;
    Ok(posterior_from_loglik(
        ll_pos,
        ll_neg,
        body.len(),
        params.alpha(),
        params.class_bias(),
    )?[0])
}

/// Adam moments for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<Array>,
    pub second: Vec<Array>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ModelParameters, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Array> = params
            .tensors()
            .iter()
            .map(|t| Array::zeros(t.value.shape()))
            .collect();
        AdamState {
            first: zeros.clone(),
            second: zeros,
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn from_config(params: &ModelParameters, cfg: &TrainConfig) -> Self {
        Self::new(params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut ModelParameters,
    grads: &[Array],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.tensors().len() {
        return Err(TrainError::GradientShape);
    }
    for (t, g) in params.tensors().iter().zip(grads) {
        if t.value.shape() != g.shape() {
            return Err(TrainError::GradientShape);
        }
        if g.data().iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteGradient(t.name.clone()));
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (j, p) in tensor.value.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *p -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Cosine decay from `lr_init` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_init: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(TrainError::ZeroSteps);
    }
    if step > total_steps {
        return Err(TrainError::StepRange {
            step,
            total: total_steps,
        });
    }
    // endpoints are returned exactly rather than through the cosine
    if step == 0 {
        return Ok(lr_init);
    }
    if step == total_steps {
        return Ok(lr_min);
    }
    let progress = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_init - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    #[serde(rename = "L")]
    pub loss: f64,
    #[serde(rename = "L_g")]
    pub loss_g: Option<f64>,
    #[serde(rename = "L_d")]
    pub loss_d: Option<f64>,
    pub heldout_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParameters,
    pub log: Vec<TrainLogRecord>,
    /// Objective on the training set before the first update.
    pub initial_loss: f64,
    /// Objective on the training set after the last update.
    pub final_loss: f64,
    pub heldout_accuracy: Option<f64>,
}

/// Tokenizes an instruction pair as `[BOS] instruction answer [EOS]` with the
/// instruction positions masked out of the loss.
pub fn encode_instruction(vocab: &Vocab, example: &InstructionExample) -> TrainingSequence {
    let instr = vocab.encode(&example.instruction);
    let answer = vocab.encode(&example.answer);
    let mut body = instr.clone();
    body.extend_from_slice(&answer);
    body.push(EOS);
    let n = body.len();
    // position j predicts body[j]
    let mask = (0..n).map(|j| j >= instr.len()).collect();
    TrainingSequence {
        sequence: ControlledSequence::unconditioned(&body),
        loss_mask: Some(mask),
    }
}

fn check_lengths(seqs: &[TrainingSequence], max: usize) -> Result<()> {
    for (index, s) in seqs.iter().enumerate() {
        let len = s.sequence.tokens().len();
        if len > max + 1 {
            return Err(TrainError::TooLong {
                index,
                len,
                max: max + 1,
            });
        }
    }
    Ok(())
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

/// Mean objective over a whole set, evaluated in batches.
fn dataset_loss(
    params: &ModelParameters,
    data: &[TrainingSequence],
    objective: Objective,
    batch: usize,
) -> Result<LossBreakdown> {
    let mut sums = (0.0, 0.0, 0.0);
    let mut has = (false, false);
    for chunk in data.chunks(batch.max(1)) {
        let b = evaluate(params, chunk, objective)?;
        let w = chunk.len() as f64;
        sums.0 += b.total * w;
        if let Some(g) = b.generative {
            sums.1 += g * w;
            has.0 = true;
        }
        if let Some(d) = b.discriminative {
            sums.2 += d * w;
            has.1 = true;
        }
    }
    let n = data.len() as f64;
    Ok(LossBreakdown {
        total: sums.0 / n,
        generative: has.0.then_some(sums.1 / n),
        discriminative: has.1.then_some(sums.2 / n),
    })
}

/// Minibatch Adam over `data` with a cosine schedule across all steps.
fn fit(
    mut params: ModelParameters,
    data: &[TrainingSequence],
    heldout: &[(Vec<u32>, ControlCode)],
    objective: Objective,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    check_lengths(data, params.config().context_length)?;
    let initial_loss = dataset_loss(&params, data, objective, cfg.batch_size)?.total;
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut adam = AdamState::from_config(&params, cfg);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    let mut heldout_accuracy = None;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let (mut sum, mut sum_g, mut sum_d) = (0.0, 0.0, 0.0);
        let mut lr = cfg.lr_init;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainingSequence> = idx.iter().map(|&i| data[i].clone()).collect();
            let (loss, grads) = loss_and_gradients(&params, &batch, objective)?;
            lr = cosine_lr(step, total_steps, cfg.lr_init, cfg.lr_min)?;
            adam_step(&mut params, &grads, &mut adam, lr)?;
            step += 1;
            let w = batch.len() as f64;
            sum += loss.total * w;
            sum_g += loss.generative.unwrap_or(f64::NAN) * w;
            sum_d += loss.discriminative.unwrap_or(f64::NAN) * w;
        }
        let n = data.len() as f64;
        let acc = if heldout.is_empty() {
            None
        } else {
            Some(classification_accuracy(&params, heldout)?)
        };
        heldout_accuracy = acc.or(heldout_accuracy);
        let record = TrainLogRecord {
            epoch,
            step,
            lr,
            loss: sum / n,
            loss_g: Some(sum_g / n).filter(|v| v.is_finite()),
            loss_d: Some(sum_d / n).filter(|v| v.is_finite()),
            heldout_acc: acc,
        };
        log::info!("epoch {epoch}: loss {:.5} lr {:.2e}", record.loss, lr);
        log.push(record);
    }
    let final_loss = dataset_loss(&params, data, objective, cfg.batch_size)?.total;
    Ok(TrainOutcome {
        params,
        log,
        initial_loss,
        final_loss,
        heldout_accuracy,
    })
}

fn fresh_params(vocab: &Vocab, model: ModelConfig) -> Result<ModelParameters> {
    let config = ModelConfig {
        vocab_size: vocab.len(),
        ..model
    };
    Ok(ModelParameters::init(config, vocab.hash())?)
}

/// Instruction-tunes a fresh generator on `examples`.
pub fn train_generator(
    examples: &[InstructionExample],
    vocab: &Vocab,
    model: ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if examples.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let data: Vec<TrainingSequence> = examples
        .iter()
        .map(|e| encode_instruction(vocab, e))
        .collect();
    fit(fresh_params(vocab, model)?, &data, &[], Objective::Nll, cfg)
}

/// Continues next-token training of existing parameters on prepared sequences.
pub fn train_sequences(
    params: ModelParameters,
    data: &[TrainingSequence],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    fit(params, data, &[], Objective::Nll, cfg)
}

/// Splits labeled bodies into train / held-out parts with a seeded shuffle.
pub fn split_heldout(
    labeled: &[(Vec<u32>, ControlCode)],
    fraction: f64,
    seed: u64,
) -> (Vec<(Vec<u32>, ControlCode)>, Vec<(Vec<u32>, ControlCode)>) {
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(
        seed.wrapping_add(0xD1B5_4A32_D192_ED03),
    ));
    let n_held = (labeled.len() as f64 * fraction).round() as usize;
    let held = order[..n_held]
        .iter()
        .map(|&i| labeled[i].clone())
        .collect();
    let train = order[n_held..]
        .iter()
        .map(|&i| labeled[i].clone())
        .collect();
    (train, held)
}

/// Trains a fresh class-conditional discriminator with the hybrid objective.
/// A `heldout_fraction` of the corpus is kept aside for accuracy reporting.
pub fn train_discriminator(
    labeled: &[(Vec<u32>, ControlCode)],
    vocab: &Vocab,
    model: ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let has = |c: ControlCode| labeled.iter().any(|(_, l)| *l == c);
    if !has(ControlCode::Pos) || !has(ControlCode::Neg) {
        return Err(TrainError::SingleClass);
    }
    let (train, held) = split_heldout(labeled, cfg.heldout_fraction, cfg.seed);
    let data: Vec<TrainingSequence> = train
        .iter()
        .map(|(body, label)| TrainingSequence::new(ControlledSequence::labeled(*label, body)))
        .collect();
    fit(
        fresh_params(vocab, model)?,
        &data,
        &held,
        Objective::Hybrid { lambda: cfg.lambda },
        cfg,
    )
}

/// Fraction of examples whose argmax class posterior equals the label.
pub fn classification_accuracy(
    params: &ModelParameters,
    examples: &[(Vec<u32>, ControlCode)],
) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (body, label) in examples {
        let p = class_posterior(params, body)?;
        let predicted = if p > 0.5 {
            ControlCode::Pos
        } else {
            ControlCode::Neg
        };
        correct += usize::from(predicted == *label);
    }
    Ok(correct as f64 / examples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{BOS, CTRL_NEG, CTRL_POS};

    fn tiny(seed: u64) -> ModelParameters {
        let cfg = ModelConfig {
            context_length: 16,
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            vocab_size: 12,
            seed,
        };
        ModelParameters::init(cfg, 0).unwrap()
    }

    fn plain(body: &[u32]) -> TrainingSequence {
        TrainingSequence::new(ControlledSequence::unconditioned(body))
    }

    fn labeled(code: ControlCode, body: &[u32]) -> TrainingSequence {
        TrainingSequence::new(ControlledSequence::labeled(code, body))
    }

    #[test]
    fn one_token_nll() {
        let m = tiny(1);
        let lp = m.next_token_logprobs(&[BOS]).unwrap();
        let loss = nll_loss(&m, &[plain(&[7])]).unwrap();
        assert!((loss + lp[7]).abs() < 1e-14);
    }

    #[test]
    fn uniform_model_loss_is_log_vocab() {
        let mut m = tiny(2);
        // zero output weights and bias: every logit equal
        let out = m.tensors().len() - 4;
        for i in [out, out + 1] {
            m.tensors_mut()[i].value.data_mut().fill(0.0);
        }
        let loss = nll_loss(&m, &[plain(&[5, 6, 7]), plain(&[8])]).unwrap();
        assert!((loss - (12f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_matches_hand_sum() {
        let m = tiny(3);
        let seqs = [vec![5u32, 6, 7], vec![9], vec![10, 11, 5, 6]];
        let mut expected = 0.0;
        for s in &seqs {
            let mut ctx = vec![BOS];
            let mut acc = 0.0;
            for &t in s {
                acc -= m.next_token_logprobs(&ctx).unwrap()[t as usize];
                ctx.push(t);
            }
            expected += acc / s.len() as f64;
        }
        expected /= seqs.len() as f64;
        let batch: Vec<_> = seqs.iter().map(|s| plain(s)).collect();
        assert!((nll_loss(&m, &batch).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn masked_positions_are_ignored() {
        let m = tiny(4);
        let mut s = plain(&[5, 6, 7]);
        s.loss_mask = Some(vec![false, false, true]);
        let lp = m.next_token_logprobs(&[BOS, 5, 6]).unwrap();
        assert!((nll_loss(&m, &[s.clone()]).unwrap() + lp[7]).abs() < 1e-13);
        s.loss_mask = Some(vec![false; 3]);
        assert!(matches!(
            nll_loss(&m, &[s]),
            Err(TrainError::NoLossPositions { index: 0 })
        ));
        assert!(matches!(nll_loss(&m, &[]), Err(TrainError::EmptyBatch)));
    }

    #[test]
    fn generative_loss_requires_prefix_and_is_symmetric() {
        let m = tiny(5);
        assert!(matches!(
            generative_loss(&m, &[plain(&[5])]),
            Err(TrainError::MissingPrefix { index: 0 })
        ));
        let pos = generative_loss(&m, &[labeled(ControlCode::Pos, &[5, 6, 7])]).unwrap();
        let neg = generative_loss(&m, &[labeled(ControlCode::Neg, &[5, 6, 7])]).unwrap();
        assert!((pos - neg).abs() < 1e-12);
        let both = generative_loss(
            &m,
            &[
                labeled(ControlCode::Pos, &[5, 6, 7]),
                labeled(ControlCode::Neg, &[5, 6, 7]),
            ],
        )
        .unwrap();
        assert!((both - pos).abs() < 1e-12);
        let lp = m.next_token_logprobs(&[CTRL_POS]).unwrap();
        let single = generative_loss(&m, &[labeled(ControlCode::Pos, &[9])]).unwrap();
        assert!((single + lp[9]).abs() < 1e-14);
    }

    #[test]
    fn generative_equals_nll_when_prefixes_are_indistinguishable() {
        let mut m = tiny(6);
        for t in [BOS, CTRL_POS, CTRL_NEG] {
            m.token_embedding_mut(t).fill(0.0);
        }
        let bodies = [vec![5u32, 6], vec![7, 8, 9]];
        let plain_batch: Vec<_> = bodies.iter().map(|b| plain(b)).collect();
        let gen_batch = vec![
            labeled(ControlCode::Pos, &bodies[0]),
            labeled(ControlCode::Neg, &bodies[1]),
        ];
        let a = nll_loss(&m, &plain_batch).unwrap();
        let b = generative_loss(&m, &gen_batch).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn posterior_hand_values() {
        assert_eq!(
            posterior_from_loglik(-3.0, -3.0, 4, 1.0, [0.0, 0.0]).unwrap(),
            [0.5, 0.5]
        );
        // t = 1, alpha = 1: 0.8 / (0.8 + 0.2)
        let p = posterior_from_loglik(0.8f64.ln(), 0.2f64.ln(), 1, 1.0, [0.0, 0.0]).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-12);
        // alpha = 0 returns the prior softmax(b)
        let b = [0.3, -0.4];
        let p = posterior_from_loglik(-1.0, -50.0, 7, 0.0, b).unwrap();
        let prior = 1.0 / (1.0 + (b[1] - b[0]).exp());
        assert!((p[0] - prior).abs() < 1e-12);
        assert!(matches!(
            posterior_from_loglik(0.0, 0.0, 0, 1.0, [0.0; 2]),
            Err(TrainError::EmptySequence)
        ));
    }

    #[test]
    fn posterior_of_fresh_model_is_half() {
        let m = tiny(7);
        assert!((class_posterior(&m, &[5, 6, 7]).unwrap() - 0.5).abs() < 1e-9);
        assert!(matches!(
            class_posterior(&m, &[]),
            Err(TrainError::EmptySequence)
        ));
        let l = discriminative_loss(
            &m,
            &[
                labeled(ControlCode::Pos, &[5, 6]),
                labeled(ControlCode::Neg, &[7]),
            ],
        )
        .unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-9);
        assert!(matches!(
            discriminative_loss(
                &m,
                &[TrainingSequence::new(ControlledSequence::conditioned(
                    ControlCode::Pos,
                    &[5]
                ))]
            ),
            Err(TrainError::MissingLabel { index: 0 })
        ));
    }

    #[test]
    fn hybrid_is_affine_in_lambda() {
        let mut m = tiny(8);
        m.set_alpha(1.3);
        m.set_class_bias([0.2, -0.1]);
        m.token_embedding_mut(CTRL_NEG)[0] += 0.5;
        let batch = vec![
            labeled(ControlCode::Pos, &[5, 6, 7]),
            labeled(ControlCode::Neg, &[8, 9]),
        ];
        let lg = generative_loss(&m, &batch).unwrap();
        let ld = discriminative_loss(&m, &batch).unwrap();
        assert_eq!(hybrid_loss(&m, &batch, 1.0).unwrap(), lg);
        assert_eq!(hybrid_loss(&m, &batch, 0.0).unwrap(), ld);
        for lambda in [0.25, 0.5, 0.75] {
            let h = hybrid_loss(&m, &batch, lambda).unwrap();
            assert!((h - (lambda * lg + (1.0 - lambda) * ld)).abs() < 1e-12);
        }
        assert!(matches!(
            hybrid_loss(&m, &batch, 1.5),
            Err(TrainError::LambdaRange(_))
        ));
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut m = tiny(9);
        let before = m.clone();
        let mut st = AdamState::new(&m, 0.9, 0.95, 1e-8);
        let zeros: Vec<Array> = m
            .tensors()
            .iter()
            .map(|t| Array::zeros(t.value.shape()))
            .collect();
        adam_step(&mut m, &zeros, &mut st, 0.1).unwrap();
        assert_eq!(m, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut m = tiny(10);
        let before = m.clone();
        let mut st = AdamState::new(&m, 0.9, 0.95, 1e-8);
        let grads: Vec<Array> = m
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| Array::filled(t.value.shape(), if i % 2 == 0 { 0.3 } else { -2.0 }))
            .collect();
        let lr = 1e-3;
        adam_step(&mut m, &grads, &mut st, lr).unwrap();
        for (i, (a, b)) in m.tensors().iter().zip(before.tensors()).enumerate() {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert!(((y - x) - lr * sign).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn adam_rejects_nan() {
        let mut m = tiny(11);
        let mut st = AdamState::new(&m, 0.9, 0.95, 1e-8);
        let mut grads: Vec<Array> = m
            .tensors()
            .iter()
            .map(|t| Array::zeros(t.value.shape()))
            .collect();
        grads[3].data_mut()[0] = f64::NAN;
        let err = adam_step(&mut m, &grads, &mut st, 0.1).unwrap_err();
        assert!(
            matches!(err, TrainError::NonFiniteGradient(ref name) if name == &m.tensors()[3].name)
        );
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0, 100, 3e-4, 1e-5).unwrap(), 3e-4);
        assert_eq!(cosine_lr(100, 100, 3e-4, 1e-5).unwrap(), 1e-5);
        assert_eq!(cosine_lr(0, 50, 1e-2, 1e-3).unwrap(), 1e-2);
        assert!((cosine_lr(50, 100, 2.0, 0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            cosine_lr(0, 0, 1.0, 0.0),
            Err(TrainError::ZeroSteps)
        ));
        assert!(matches!(
            cosine_lr(5, 4, 1.0, 0.0),
            Err(TrainError::StepRange { .. })
        ));
    }

    #[test]
    fn two_class_softmax_sums_to_one() {
        for (a, b) in [
            (0.1, 0.2),
            (-30.0, 4.0),
            (1e-3, -1e-3),
            (7.5, 7.5),
            (-0.37, 2.91),
        ] {
            let p = two_class_softmax(a, b);
            assert_eq!(p[0] + p[1], 1.0);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            lambda: 1.1,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lr_init: 0.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }
}
