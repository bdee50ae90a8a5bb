//! Discriminator-guided decoding.
//!
//! Each step combines the base model's next-token distribution with the
//! class-conditional discriminator's Bayes-rule posterior for every
//! candidate token, `p_w ∝ p_base · p(POS | x_<t, v)^w`, restricts sampling
//! to the union of a posterior-ranked cumulative-mass prefix and a
//! posterior threshold set, and samples from `p_w` renormalized over it.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::logsumexp;
use crate::model::{ControlCode, ControlledSequence, ModelError, ModelParameters};
use crate::sampling::{sample_token, StopReason};
use crate::tokenizer::{BOS, EOS};
use crate::training::two_class_softmax;

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("invalid guidance config: {0}")]
    Config(String),
    #[error("base model and discriminator disagree on the vocabulary ({base_size} vs {disc_size} tokens, hash {base_hash:016x} vs {disc_hash:016x})")]
    VocabMismatch {
        base_size: usize,
        disc_size: usize,
        base_hash: u64,
        disc_hash: u64,
    },
    #[error("guidance state has no next-token cache; refresh it first")]
    Uninitialized,
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, GuidanceError>;

/// Key used to order the vocabulary before taking the cumulative-mass prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankBy {
    /// Class posterior of each candidate (the default).
    Posterior,
    /// The weighted distribution itself.
    Weighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub w: f64,
    pub rho: f64,
    pub tau: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub greedy: bool,
    pub rank_by: RankBy,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            w: 1.5,
            rho: 0.9,
            tau: 0.75,
            temperature: 0.8,
            max_new_tokens: 128,
            seed: 0,
            greedy: false,
            rank_by: RankBy::Posterior,
        }
    }
}

impl GuidanceConfig {
    /// Settings under which guided decoding reduces to plain sampling.
    pub fn neutral(temperature: f64, max_new_tokens: usize) -> Self {
        Self {
            w: 0.0,
            rho: 1.0,
            tau: 0.0,
            temperature,
            max_new_tokens,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GuidanceError::Config(m));
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return bad(format!(
                "w must be a finite non-negative number, got {}",
                self.w
            ));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho must lie in (0, 1], got {}", self.rho));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be positive".into());
        }
        Ok(())
    }
}

/// Running class log-likelihoods of the text generated so far, plus the
/// per-class next-token log-probabilities for the current step.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceState {
    /// `log p(x_{1:t} | c)` indexed by [`ControlCode::index`].
    pub log_score: [f64; 2],
    pub t: usize,
    pub alpha: f64,
    pub bias: [f64; 2],
    contexts: [Vec<u32>; 2],
    cache: Option<[Vec<f64>; 2]>,
}

impl GuidanceState {
    /// Starts a stream whose discriminator view begins with `seed` (for
    /// example the module head); the seed's likelihood is scored at once.
    pub fn new(disc: &ModelParameters, seed: &[u32]) -> Result<Self> {
        let mut log_score = [0.0; 2];
        let mut contexts: [Vec<u32>; 2] = [Vec::new(), Vec::new()];
        for code in ControlCode::BOTH {
            let seq = ControlledSequence::conditioned(code, seed);
            if !seed.is_empty() {
                log_score[code.index()] = disc.sequence_log_prob(&seq)?;
            }
            contexts[code.index()] = seq.tokens().to_vec();
        }
        Ok(Self {
            log_score,
            t: seed.len(),
            alpha: disc.alpha(),
            bias: disc.class_bias(),
            contexts,
            cache: None,
        })
    }

    /// A state with given scores and no model context, for analysis and tests.
    pub fn from_scores(log_score: [f64; 2], t: usize, alpha: f64, bias: [f64; 2]) -> Self {
        Self {
            log_score,
            t,
            alpha,
            bias,
            contexts: [Vec::new(), Vec::new()],
            cache: None,
        }
    }

    /// Runs the discriminator once per control code to fill the cache.
    pub fn refresh(&mut self, disc: &ModelParameters) -> Result<()> {
        let pos = disc.next_token_logprobs(&self.contexts[0])?;
        let neg = disc.next_token_logprobs(&self.contexts[1])?;
        self.cache = Some([pos, neg]);
        Ok(())
    }

    pub fn set_cache(&mut self, pos: Vec<f64>, neg: Vec<f64>) {
        self.cache = Some([pos, neg]);
    }

    pub fn cache(&self) -> Option<&[Vec<f64>; 2]> {
        self.cache.as_ref()
    }

    /// Discriminator context length (control code plus scored tokens).
    pub fn context_len(&self) -> usize {
        self.contexts[0].len()
    }

    fn class_logits(&self, cache: &[Vec<f64>; 2], v: usize) -> [f64; 2] {
        let lp = [
            self.bias[0] - logsumexp(&self.bias),
            self.bias[1] - logsumexp(&self.bias),
        ];
        let scale = self.alpha / (self.t + 1) as f64;
        [
            lp[0] + scale * (self.log_score[0] + cache[0][v]),
            lp[1] + scale * (self.log_score[1] + cache[1][v]),
        ]
    }
}

/// `p(POS | x_<t, v)` for every candidate `v`.
pub fn token_posteriors(state: &GuidanceState) -> Result<Vec<f64>> {
    let cache = state.cache.as_ref().ok_or(GuidanceError::Uninitialized)?;
    Ok((0..cache[0].len())
        .map(|v| {
            let z = state.class_logits(cache, v);
            two_class_softmax(z[0], z[1])[0]
        })
        .collect())
}

/// `log p(POS | x_<t, v)` for every candidate, without underflow.
pub fn token_log_posteriors(state: &GuidanceState) -> Result<Vec<f64>> {
    let cache = state.cache.as_ref().ok_or(GuidanceError::Uninitialized)?;
    Ok((0..cache[0].len())
        .map(|v| {
            let z = state.class_logits(cache, v);
            z[0] - logsumexp(&z)
        })
        .collect())
}

/// Unnormalized `log p_w`. With `w = 0` the base log-probabilities are
/// returned untouched.
pub fn weighted_logits(base_logprobs: &[f64], log_posteriors: &[f64], w: f64) -> Result<Vec<f64>> {
    if base_logprobs.len() != log_posteriors.len() {
        return Err(GuidanceError::LengthMismatch(
            base_logprobs.len(),
            log_posteriors.len(),
        ));
    }
    if w == 0.0 {
        return Ok(base_logprobs.to_vec());
    }
    Ok(base_logprobs
        .iter()
        .zip(log_posteriors)
        .map(|(b, p)| b + w * p)
        .collect())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let z = logsumexp(logits);
    logits.iter().map(|l| (l - z).exp()).collect()
}

/// `p_w(v) ∝ p_base(v) · posterior(v)^w`, normalized in the log domain.
pub fn weighted_distribution(
    base_logprobs: &[f64],
    posteriors: &[f64],
    w: f64,
) -> Result<Vec<f64>> {
    let logs: Vec<f64> = posteriors.iter().map(|p| p.ln()).collect();
    Ok(softmax(&weighted_logits(base_logprobs, &logs, w)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FilterSets {
    /// All ids, best first.
    pub rank: Vec<u32>,
    pub m: usize,
    /// The first `m` ranked ids.
    pub v_m: Vec<u32>,
    /// Ids whose posterior exceeds τ, ascending.
    pub v_tau: Vec<u32>,
    /// `v_m ∪ v_tau`, ascending; never empty.
    pub v_k: Vec<u32>,
    /// `v_k` fell back to the single most probable id.
    pub fallback: bool,
}

impl FilterSets {
    pub fn mask(&self, vocab: usize) -> Vec<bool> {
        let mut mask = vec![false; vocab];
        for &v in &self.v_k {
            mask[v as usize] = true;
        }
        mask
    }
}

/// Ranks the vocabulary (ties by ascending id), takes the shortest prefix
/// holding at least `rho` of the `p_w` mass (everything if the total falls
/// short), and unions it with the ids whose posterior exceeds `tau`.
pub fn build_filter_sets(
    p_w: &[f64],
    posteriors: &[f64],
    rho: f64,
    tau: f64,
    rank_by: RankBy,
) -> Result<FilterSets> {
    if p_w.len() != posteriors.len() {
        return Err(GuidanceError::LengthMismatch(p_w.len(), posteriors.len()));
    }
    let key = match rank_by {
        RankBy::Posterior => posteriors,
        RankBy::Weighted => p_w,
    };
    let mut rank: Vec<u32> = (0..p_w.len() as u32).collect();
    rank.sort_by(|&a, &b| key[b as usize].total_cmp(&key[a as usize]).then(a.cmp(&b)));

    let mut m = rank.len();
    let mut acc = 0.0;
    // rho = 1 asks for the full mass; rounding must not drop the tail
    for (i, &v) in rank.iter().enumerate().take_while(|_| rho < 1.0) {
        acc += p_w[v as usize];
        if acc >= rho {
            m = i + 1;
            break;
        }
    }
    let v_m = rank[..m].to_vec();
    let v_tau: Vec<u32> = (0..posteriors.len() as u32)
        .filter(|&v| posteriors[v as usize] > tau)
        .collect();
    let mut v_k: Vec<u32> = v_m.iter().chain(&v_tau).copied().collect();
    v_k.sort_unstable();
    v_k.dedup();
    let mut fallback = false;
    if v_k.is_empty() && !p_w.is_empty() {
        let best = (0..p_w.len()).fold(0, |b, v| if p_w[v] > p_w[b] { v } else { b });
        v_k.push(best as u32);
        fallback = true;
    }
    Ok(FilterSets {
        rank,
        m,
        v_m,
        v_tau,
        v_k,
        fallback,
    })
}

/// Folds the chosen token into both running class scores.
pub fn advance_state(state: &mut GuidanceState, token: u32) -> Result<()> {
    let cache = state.cache.take().ok_or(GuidanceError::Uninitialized)?;
    let v = token as usize;
    if v >= cache[0].len() {
        let vocab = cache[0].len();
        state.cache = Some(cache);
        return Err(GuidanceError::TokenOutOfRange { token, vocab });
    }
    state.log_score[0] += cache[0][v];
    state.log_score[1] += cache[1][v];
    state.t += 1;
    for ctx in &mut state.contexts {
        ctx.push(token);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub token: u32,
    /// `|V_k|`.
    pub kept: usize,
    /// Posterior of the chosen token.
    pub posterior: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidedGeneration {
    /// Generated ids, excluding the terminating EOS.
    pub tokens: Vec<u32>,
    pub stop: StopReason,
    pub trace: Vec<TraceRecord>,
}

pub fn check_vocab(base: &ModelParameters, disc: &ModelParameters) -> Result<()> {
    let (b, d) = (base.config().vocab_size, disc.config().vocab_size);
    if b != d || base.vocab_hash() != disc.vocab_hash() {
        return Err(GuidanceError::VocabMismatch {
            base_size: b,
            disc_size: d,
            base_hash: base.vocab_hash(),
            disc_hash: disc.vocab_hash(),
        });
    }
    Ok(())
}

/// Guided sampling. The base model sees `[BOS] prompt generated`; the
/// discriminator sees `[code] disc_seed generated` for each control code.
pub fn generate(
    base: &ModelParameters,
    disc: &ModelParameters,
    prompt: &[u32],
    disc_seed: &[u32],
    cfg: &GuidanceConfig,
    rng: &mut impl Rng,
) -> Result<GuidedGeneration> {
    cfg.validate()?;
    check_vocab(base, disc)?;
    let vocab = base.config().vocab_size;
    let mut context = Vec::with_capacity(1 + prompt.len() + cfg.max_new_tokens);
    context.push(BOS);
    context.extend_from_slice(prompt);
    let (base_max, disc_max) = (base.config().context_length, disc.config().context_length);
    if context.len() > base_max {
        return Err(ModelError::ContextLength {
            len: context.len(),
            max: base_max,
        }
        .into());
    }
    let mut state = GuidanceState::new(disc, disc_seed)?;
    let mut tokens = Vec::new();
    let mut trace = Vec::new();
    let stop = loop {
        if tokens.len() >= cfg.max_new_tokens {
            break StopReason::MaxTokens;
        }
        if context.len() >= base_max || state.context_len() >= disc_max {
            break StopReason::ContextFull;
        }
        let base_lp = base.next_token_logprobs(&context)?;
        state.refresh(disc)?;
        let posteriors = token_posteriors(&state)?;
        let logits = weighted_logits(&base_lp, &token_log_posteriors(&state)?, cfg.w)?;
        let p_w = softmax(&logits);
        let sets = build_filter_sets(&p_w, &posteriors, cfg.rho, cfg.tau, cfg.rank_by)?;
        let id = sample_token(
            &logits,
            Some(&sets.mask(vocab)),
            cfg.temperature,
            cfg.greedy,
            rng,
        );
        trace.push(TraceRecord {
            step: trace.len(),
            token: id,
            kept: sets.v_k.len(),
            posterior: posteriors[id as usize],
        });
        if id == EOS {
            break StopReason::Eos;
        }
        advance_state(&mut state, id)?;
        tokens.push(id);
        context.push(id);
    };
    Ok(GuidedGeneration {
        tokens,
        stop,
        trace,
    })
}

/// Writes trace records as one JSON object per line.
pub fn write_trace(w: &mut impl Write, trace: &[TraceRecord]) -> std::io::Result<()> {
    for r in trace {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::sampling::{generate_unguided, SampleConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64, vocab: usize) -> ModelParameters {
        let cfg = ModelConfig {
            context_length: 24,
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            vocab_size: vocab,
            seed,
        };
        ModelParameters::init(cfg, 7).unwrap()
    }

    #[test]
    fn symmetric_discriminator_gives_half() {
        let mut s = GuidanceState::from_scores([-3.0, -3.0], 2, 1.0, [0.0, 0.0]);
        s.set_cache(vec![-1.0, -2.0, -0.5], vec![-1.0, -2.0, -0.5]);
        for p in token_posteriors(&s).unwrap() {
            assert_eq!(p, 0.5);
        }
    }

    #[test]
    fn hand_bayes_two_tokens() {
        let mut s = GuidanceState::from_scores([0.0, 0.0], 0, 1.0, [0.0, 0.0]);
        s.set_cache(
            vec![0.9f64.ln(), 0.1f64.ln()],
            vec![0.1f64.ln(), 0.9f64.ln()],
        );
        let p = token_posteriors(&s).unwrap();
        assert!(
            (p[0] - 0.9).abs() < 1e-12 && (p[1] - 0.1).abs() < 1e-12,
            "{p:?}"
        );
        let lp = token_log_posteriors(&s).unwrap();
        assert!((lp[0] - 0.9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn uninitialized_state_errors() {
        let s = GuidanceState::from_scores([0.0, 0.0], 0, 1.0, [0.0, 0.0]);
        assert!(matches!(
            token_posteriors(&s),
            Err(GuidanceError::Uninitialized)
        ));
        let mut s = s;
        assert!(matches!(
            advance_state(&mut s, 0),
            Err(GuidanceError::Uninitialized)
        ));
    }

    #[test]
    fn weighted_hand_values() {
        let base: Vec<f64> = [0.5f64, 0.3, 0.2].iter().map(|p| p.ln()).collect();
        let post = [0.2, 0.5, 0.9];
        let pw = weighted_distribution(&base, &post, 1.0).unwrap();
        // (0.10, 0.15, 0.18) / 0.43
        for (got, want) in pw.iter().zip([0.10 / 0.43, 0.15 / 0.43, 0.18 / 0.43]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((pw.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let same = weighted_distribution(&base, &post, 0.0).unwrap();
        for (a, b) in same.iter().zip([0.5, 0.3, 0.2]) {
            assert!((a - b).abs() < 1e-15);
        }
        let sharp = weighted_distribution(&base, &post, 50.0).unwrap();
        let argmax = (0..3)
            .max_by(|&a, &b| sharp[a].total_cmp(&sharp[b]))
            .unwrap();
        assert_eq!(argmax, 2);
        assert!(weighted_distribution(&base, &post[..2], 1.0).is_err());
    }

    #[test]
    fn filter_set_examples() {
        let post = [0.9, 0.5, 0.2];
        let all = build_filter_sets(&[0.4, 0.4, 0.2], &post, 1.0, 0.0, RankBy::Posterior).unwrap();
        assert_eq!(all.v_k, [0, 1, 2]);
        let s = build_filter_sets(&[0.4, 0.4, 0.2], &post, 0.7, 0.99, RankBy::Posterior).unwrap();
        assert_eq!(s.rank, [0, 1, 2]);
        assert_eq!(s.m, 2);
        assert_eq!(s.v_k, [0, 1]);
        let t = build_filter_sets(&[0.1, 0.1, 0.8], &post, 0.05, 0.85, RankBy::Posterior).unwrap();
        assert_eq!(t.v_tau, [0]);
        assert!(t.v_k.contains(&0));
        let by_pw = build_filter_sets(&[0.1, 0.1, 0.8], &post, 0.5, 1.0, RankBy::Weighted).unwrap();
        assert_eq!(by_pw.v_k, [2]);
    }

    #[test]
    fn ties_rank_by_ascending_id() {
        let s = build_filter_sets(
            &[0.25; 4],
            &[0.5, 0.7, 0.5, 0.7],
            1.0,
            1.0,
            RankBy::Posterior,
        )
        .unwrap();
        assert_eq!(s.rank, [1, 3, 0, 2]);
    }

    #[test]
    fn short_total_mass_keeps_everything() {
        let s = build_filter_sets(&[0.3, 0.3], &[0.1, 0.2], 1.0, 1.0, RankBy::Posterior).unwrap();
        assert_eq!(s.m, 2);
    }

    #[test]
    fn advance_matches_recomputation() {
        let disc = tiny(3, 16);
        let seed = [9u32, 10];
        let mut state = GuidanceState::new(&disc, &seed).unwrap();
        let mut body = seed.to_vec();
        for tok in [5u32, 11, 6, 12] {
            state.refresh(&disc).unwrap();
            advance_state(&mut state, tok).unwrap();
            body.push(tok);
            assert_eq!(state.t, body.len());
            for code in ControlCode::BOTH {
                let fresh = disc
                    .sequence_log_prob(&ControlledSequence::conditioned(code, &body))
                    .unwrap();
                assert!((fresh - state.log_score[code.index()]).abs() < 1e-9);
            }
        }
        state.refresh(&disc).unwrap();
        assert!(matches!(
            advance_state(&mut state, 99),
            Err(GuidanceError::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn symmetric_models_keep_scores_equal() {
        let disc = tiny(4, 16);
        let mut s = GuidanceState::new(&disc, &[]).unwrap();
        for tok in [7u32, 8, 9] {
            s.refresh(&disc).unwrap();
            advance_state(&mut s, tok).unwrap();
            assert_eq!(s.log_score[0], s.log_score[1]);
        }
    }

    #[test]
    fn constant_shift_leaves_posteriors() {
        let cache = (vec![-0.3, -1.7, -2.2], vec![-1.1, -0.4, -2.9]);
        let mut a = GuidanceState::from_scores([-4.0, -5.5], 3, 1.3, [0.2, -0.1]);
        let mut b = GuidanceState::from_scores([-4.0 - 17.25, -5.5 - 17.25], 3, 1.3, [0.2, -0.1]);
        a.set_cache(cache.0.clone(), cache.1.clone());
        b.set_cache(cache.0, cache.1);
        for (x, y) in token_posteriors(&a)
            .unwrap()
            .iter()
            .zip(token_posteriors(&b).unwrap())
        {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn neutral_settings_reproduce_plain_sampling() {
        let base = tiny(1, 16);
        let disc = tiny(2, 16);
        let cfg = GuidanceConfig::neutral(0.9, 15);
        let sc = SampleConfig {
            temperature: 0.9,
            max_new_tokens: 15,
            greedy: false,
        };
        for seed in 0..5 {
            let g = generate(
                &base,
                &disc,
                &[6, 7],
                &[],
                &cfg,
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap();
            let u = generate_unguided(&base, &[6, 7], &sc, &mut ChaCha8Rng::seed_from_u64(seed))
                .unwrap();
            assert_eq!(g.tokens, u.tokens);
            assert_eq!(g.stop, u.stop);
        }
    }

    #[test]
    fn greedy_is_deterministic_and_vocab_checked() {
        let base = tiny(1, 16);
        let disc = tiny(2, 16);
        let cfg = GuidanceConfig {
            greedy: true,
            max_new_tokens: 8,
            ..GuidanceConfig::default()
        };
        let a = generate(
            &base,
            &disc,
            &[6],
            &[6],
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let b = generate(
            &base,
            &disc,
            &[6],
            &[6],
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(99),
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a.trace.len(),
            a.tokens.len() + usize::from(a.stop == StopReason::Eos)
        );
        let other = tiny(2, 17);
        assert!(matches!(
            generate(
                &base,
                &other,
                &[6],
                &[],
                &cfg,
                &mut ChaCha8Rng::seed_from_u64(1)
            ),
            Err(GuidanceError::VocabMismatch { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(GuidanceConfig::default().validate().is_ok());
        for bad in [
            GuidanceConfig {
                w: -1.0,
                ..Default::default()
            },
            GuidanceConfig {
                rho: 0.0,
                ..Default::default()
            },
            GuidanceConfig {
                tau: 1.5,
                ..Default::default()
            },
            GuidanceConfig {
                temperature: 0.0,
                ..Default::default()
            },
            GuidanceConfig {
                max_new_tokens: 0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn set_laws(
                raw in proptest::collection::vec((0.001f64..1.0, 0.001f64..0.999), 1..40),
                rho in 0.01f64..=1.0,
                tau in 0.0f64..=1.0,
            ) {
                let total: f64 = raw.iter().map(|r| r.0).sum();
                let p_w: Vec<f64> = raw.iter().map(|r| r.0 / total).collect();
                let post: Vec<f64> = raw.iter().map(|r| r.1).collect();
                let s = build_filter_sets(&p_w, &post, rho, tau, RankBy::Posterior).unwrap();
                prop_assert!(!s.v_k.is_empty());
                prop_assert!(s.v_m.iter().all(|v| s.v_k.contains(v)));
                prop_assert!(s.v_tau.iter().all(|v| s.v_k.contains(v)));
                let mass: f64 = s.v_m.iter().map(|&v| p_w[v as usize]).sum();
                let without_last: f64 = s.v_m[..s.m - 1].iter().map(|&v| p_w[v as usize]).sum();
                prop_assert!(mass >= rho || s.m == p_w.len());
                prop_assert!(without_last < rho);
            }

            #[test]
            fn larger_posterior_wins_at_equal_base(pa in 0.01f64..0.99, pb in 0.01f64..0.99, w in 0.01f64..10.0) {
                prop_assume!(pa != pb);
                let base = [0.4f64.ln(), 0.4f64.ln(), 0.2f64.ln()];
                let pw = weighted_distribution(&base, &[pa, pb, 0.5], w).unwrap();
                prop_assert_eq!(pa > pb, pw[0] > pw[1]);
            }
        }
    }
}
