//! Synthetic data: complete module heads with the generator at high
//! temperature, keep the syntactically valid completions, and label them
//! POS/NEG either directly or against a reference design's metric.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{split_definition_body, templates, InstructionExample, Task};
use crate::labelers::{Labeler, LabelerKind, MetricStatus};
use crate::model::{ControlCode, ModelError, ModelParameters};
use crate::sampling::{generate_unguided, SampleConfig};
use crate::tokenizer::Vocab;

pub const DEFAULT_TEMPERATURE: f64 = 1.2;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("labeler `{name}` is unavailable: {reason}")]
    LabelerUnavailable { name: String, reason: String },
    #[error("labeler `{name}` is {kind:?}, expected {expected:?}")]
    WrongKind {
        name: String,
        kind: LabelerKind,
        expected: LabelerKind,
    },
    #[error("labeler `{0}` needs a reference design")]
    MissingReference(String),
    #[error("reference metric failed ({status:?}): {output}")]
    ReferenceFailed {
        status: MetricStatus,
        output: String,
    },
    #[error("invalid augmentation job: {0}")]
    Job(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, AugmentError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentJob {
    /// Module definitions (header plus port declarations) to complete.
    pub heads: Vec<String>,
    pub samples_per_head: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl AugmentJob {
    pub fn new(heads: Vec<String>, samples_per_head: usize) -> Self {
        Self {
            heads,
            samples_per_head,
            temperature: DEFAULT_TEMPERATURE,
            max_new_tokens: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub head_index: usize,
    pub sample_index: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkippedHead {
    pub head_index: usize,
    pub reason: String,
}

/// Prompt used to ask the generator to complete a module head.
pub fn completion_prompt(vocab: &Vocab, head: &str) -> Vec<u32> {
    vocab.encode(&templates::render(templates::AUTOCOMPLETE, head))
}

/// Per-sample seed, independent of evaluation order.
pub fn stream_seed(seed: u64, a: usize, b: usize) -> u64 {
    let mut x = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [a as u64, b as u64] {
        x = (x ^ v).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x ^= x >> 31;
    }
    x
}

/// `samples_per_head` unguided completions per head, ordered by
/// (head, sample). Heads that do not fit the context are skipped.
pub fn complete_heads(
    model: &ModelParameters,
    vocab: &Vocab,
    job: &AugmentJob,
) -> Result<(Vec<Candidate>, Vec<SkippedHead>)> {
    if job.samples_per_head == 0 || !(job.temperature > 0.0) || job.max_new_tokens == 0 {
        return Err(AugmentError::Job(
            "samples_per_head, temperature and max_new_tokens must be positive".into(),
        ));
    }
    let max = model.config().context_length;
    let mut skipped = Vec::new();
    let mut work = Vec::new();
    for (h, head) in job.heads.iter().enumerate() {
        let prompt = completion_prompt(vocab, head);
        if prompt.len() + 1 >= max {
            skipped.push(SkippedHead {
                head_index: h,
                reason: format!("prompt of {} tokens exceeds context {max}", prompt.len()),
            });
            continue;
        }
        for s in 0..job.samples_per_head {
            work.push((h, s, prompt.clone()));
        }
    }
    let cfg = SampleConfig {
        temperature: job.temperature,
        max_new_tokens: job.max_new_tokens,
        greedy: false,
    };
    let out: std::result::Result<Vec<Candidate>, ModelError> = work
        .par_iter()
        .map(|(h, s, prompt)| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(job.seed, *h, *s));
            let g = generate_unguided(model, prompt, &cfg, &mut rng)?;
            let text = vocab.decode(&g.tokens).unwrap_or_default();
            Ok(Candidate {
                head_index: *h,
                sample_index: *s,
                text,
            })
        })
        .collect();
    Ok((out?, skipped))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FilterReport {
    pub checker: String,
    pub checked: usize,
    pub passed: usize,
    pub syntax_failures: usize,
    /// Candidates on which the checker itself failed (crash, timeout).
    pub checker_errors: usize,
}

impl FilterReport {
    pub fn survival_rate(&self) -> f64 {
        if self.checked == 0 {
            0.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

/// Keeps exactly the candidates the checker accepts.
pub fn syntax_filter(
    candidates: Vec<Candidate>,
    checker: &dyn Labeler,
) -> (Vec<Candidate>, FilterReport) {
    let results: Vec<_> = candidates
        .par_iter()
        .map(|c| checker.measure(&c.text, None))
        .collect();
    let mut report = FilterReport {
        checker: checker.name().to_string(),
        checked: candidates.len(),
        ..Default::default()
    };
    let mut kept = Vec::new();
    for (c, r) in candidates.into_iter().zip(results) {
        if r.passed() {
            report.passed += 1;
            kept.push(c);
        } else if r.status == MetricStatus::Ok {
            report.syntax_failures += 1;
        } else {
            report.checker_errors += 1;
        }
    }
    (kept, report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub text: String,
    pub label: ControlCode,
    pub metric_value: Option<f64>,
    pub labeler: String,
    pub reference_metric: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

fn check_labeler(labeler: &dyn Labeler, expected: LabelerKind) -> Result<()> {
    let spec = labeler.spec();
    if spec.kind != expected {
        return Err(AugmentError::WrongKind {
            name: spec.name.clone(),
            kind: spec.kind,
            expected,
        });
    }
    labeler
        .available()
        .map_err(|reason| AugmentError::LabelerUnavailable {
            name: spec.name.clone(),
            reason,
        })
}

fn failure_reason(status: MetricStatus, output: &str) -> String {
    let first = output.lines().next().unwrap_or("");
    format!("{status:?}: {first}").to_lowercase()
}

/// Labels every candidate with an absolute labeler; labeler failures
/// become NEG with the failure recorded in `reason`.
pub fn label_absolute(
    texts: &[String],
    labeler: &dyn Labeler,
    reference: Option<&str>,
) -> Result<Vec<LabeledExample>> {
    check_labeler(labeler, LabelerKind::Absolute)?;
    if labeler.spec().needs_reference && reference.is_none() {
        return Err(AugmentError::MissingReference(labeler.name().to_string()));
    }
    Ok(texts
        .par_iter()
        .map(|t| {
            let r = labeler.measure(t, reference);
            let reason =
                (r.status != MetricStatus::Ok).then(|| failure_reason(r.status, &r.raw_output));
            LabeledExample {
                text: t.clone(),
                label: if r.passed() {
                    ControlCode::Pos
                } else {
                    ControlCode::Neg
                },
                metric_value: r.value,
                labeler: labeler.name().to_string(),
                reference_metric: None,
                reason,
            }
        })
        .collect())
}

/// Metric of the reference design under a relative labeler.
pub fn reference_metric(labeler: &dyn Labeler, reference: &str) -> Result<f64> {
    check_labeler(labeler, LabelerKind::Relative)?;
    let r = labeler.measure(reference, None);
    match (r.status, r.value) {
        (MetricStatus::Ok, Some(v)) => Ok(v),
        (status, _) => Err(AugmentError::ReferenceFailed {
            status,
            output: r.raw_output,
        }),
    }
}

/// POS iff the candidate's metric is strictly below the reference metric.
pub fn label_relative(
    texts: &[String],
    labeler: &dyn Labeler,
    reference_value: f64,
) -> Result<Vec<LabeledExample>> {
    check_labeler(labeler, LabelerKind::Relative)?;
    Ok(texts
        .par_iter()
        .map(|t| {
            let r = labeler.measure(t, None);
            let (label, reason) = match (r.status, r.value) {
                (MetricStatus::Ok, Some(v)) => (relative_label(v, reference_value), None),
                (status, _) => (
                    ControlCode::Neg,
                    Some(failure_reason(status, &r.raw_output)),
                ),
            };
            LabeledExample {
                text: t.clone(),
                label,
                metric_value: r.value,
                labeler: labeler.name().to_string(),
                reference_metric: Some(reference_value),
                reason,
            }
        })
        .collect())
}

/// Ties count as NEG.
pub fn relative_label(metric: f64, reference: f64) -> ControlCode {
    if metric < reference {
        ControlCode::Pos
    } else {
        ControlCode::Neg
    }
}

/// Tokenized `(body, label)` pairs for discriminator training.
pub fn to_training_pairs(
    examples: &[LabeledExample],
    vocab: &Vocab,
) -> Vec<(Vec<u32>, ControlCode)> {
    examples
        .iter()
        .map(|e| (vocab.encode(&e.text), e.label))
        .collect()
}

/// Autocomplete pairs built from POS examples, for optionally appending
/// synthetic data to the generator corpus. Examples whose header cannot be
/// split are skipped.
pub fn positive_instruction_examples(examples: &[LabeledExample]) -> Vec<InstructionExample> {
    examples
        .iter()
        .filter(|e| e.label == ControlCode::Pos)
        .filter_map(|e| {
            let (definition, _) = split_definition_body(&e.text).ok()?;
            Some(InstructionExample {
                instruction: templates::render(templates::AUTOCOMPLETE, &definition),
                answer: e.text.clone(),
                task: Task::Autocomplete,
            })
        })
        .collect()
}
