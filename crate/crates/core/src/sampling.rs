//! Token sampling shared by plain and guided decoding.
//!
//! Both decoders draw exactly one uniform number per step and walk the
//! allowed ids in ascending order, so identical logits, masks and RNG state
//! give identical tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{ModelError, ModelParameters};
use crate::tokenizer::{BOS, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    MaxTokens,
    ContextFull,
}

/// Draws a token from `softmax(logits / temperature)` restricted to ids
/// where `allowed` is true (all ids when `None`). With `greedy` the
/// highest-logit allowed id wins, lowest id on ties, and no randomness is used.
///
/// Panics if no id is allowed; callers guarantee a non-empty set.
pub fn sample_token(
    logits: &[f64],
    allowed: Option<&[bool]>,
    temperature: f64,
    greedy: bool,
    rng: &mut impl Rng,
) -> u32 {
    let ok = |i: usize| allowed.is_none_or(|a| a[i]);
    let mut best = None;
    for (i, &l) in logits.iter().enumerate() {
        if ok(i) && best.is_none_or(|(_, b)| l > b) {
            best = Some((i, l));
        }
    }
    let (argmax, max) = best.expect("sample_token needs at least one allowed id");
    if greedy {
        return argmax as u32;
    }
    let u: f64 = rng.random();
    let weight = |l: f64| ((l - max) / temperature).exp();
    let total: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| ok(i))
        .map(|(_, &l)| weight(l))
        .sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last = argmax;
    for (i, &l) in logits.iter().enumerate() {
        if !ok(i) {
            continue;
        }
        acc += weight(l);
        last = i;
        if acc > target {
            return i as u32;
        }
    }
    last as u32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub greedy: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            max_new_tokens: 128,
            greedy: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// Generated ids, excluding the terminating EOS.
    pub tokens: Vec<u32>,
    pub stop: StopReason,
}

/// Ordinary ancestral sampling from the generator given `[BOS] prompt`.
pub fn generate_unguided(
    model: &ModelParameters,
    prompt: &[u32],
    cfg: &SampleConfig,
    rng: &mut impl Rng,
) -> Result<Generation, ModelError> {
    let mut context = Vec::with_capacity(prompt.len() + 1 + cfg.max_new_tokens);
    context.push(BOS);
    context.extend_from_slice(prompt);
    let max = model.config().context_length;
    if context.len() > max {
        return Err(ModelError::ContextLength {
            len: context.len(),
            max,
        });
    }
    let mut tokens = Vec::new();
    loop {
        if tokens.len() >= cfg.max_new_tokens {
            return Ok(Generation {
                tokens,
                stop: StopReason::MaxTokens,
            });
        }
        if context.len() >= max {
            return Ok(Generation {
                tokens,
                stop: StopReason::ContextFull,
            });
        }
        let lp = model.next_token_logprobs(&context)?;
        let id = sample_token(&lp, None, cfg.temperature, cfg.greedy, rng);
        if id == EOS {
            return Ok(Generation {
                tokens,
                stop: StopReason::Eos,
            });
        }
        tokens.push(id);
        context.push(id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn greedy_picks_lowest_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            sample_token(&[0.0, 2.0, 2.0, 1.0], None, 1.0, true, &mut rng),
            1
        );
        let mask = [true, false, true, true];
        assert_eq!(
            sample_token(&[0.0, 2.0, 2.0, 1.0], Some(&mask), 1.0, true, &mut rng),
            2
        );
    }

    #[test]
    fn masked_ids_never_drawn() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask = [false, true, false, true];
        for _ in 0..500 {
            let id = sample_token(&[5.0, 0.0, 5.0, 0.0], Some(&mask), 1.0, false, &mut rng);
            assert!(id == 1 || id == 3);
        }
    }

    #[test]
    fn frequencies_follow_softmax() {
        let logits = [0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 20_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[sample_token(&logits, None, 1.0, false, &mut rng) as usize] += 1;
        }
        for (c, p) in counts.iter().zip([0.5, 0.3, 0.2]) {
            // 4.5 standard deviations of a binomial proportion
            let sd = (p * (1.0 - p) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - p).abs() < 4.5 * sd, "{counts:?}");
        }
    }

    #[test]
    fn low_temperature_concentrates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hits = (0..200)
            .filter(|_| sample_token(&[0.0, 0.5], None, 0.01, false, &mut rng) == 1)
            .count();
        assert_eq!(hits, 200);
    }

    #[test]
    fn unguided_generation_is_reproducible_and_bounded() {
        let cfg = crate::model::ModelConfig {
            context_length: 12,
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            vocab_size: 20,
            seed: 4,
        };
        let model = ModelParameters::init(cfg, 0).unwrap();
        let sc = SampleConfig {
            temperature: 1.0,
            max_new_tokens: 50,
            greedy: false,
        };
        let a = generate_unguided(&model, &[7, 8], &sc, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = generate_unguided(&model, &[7, 8], &sc, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.tokens.len() <= 12 - 3);
        let short = SampleConfig {
            max_new_tokens: 2,
            ..sc.clone()
        };
        let g = generate_unguided(&model, &[7], &short, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!(g.tokens.len() <= 2);
        assert!(
            generate_unguided(&model, &[1; 12], &sc, &mut ChaCha8Rng::seed_from_u64(9)).is_err()
        );
    }
}
