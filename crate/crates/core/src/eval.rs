//! pass@k estimation and the benchmark harness: load problems, draw `n`
//! completions per problem (optionally guided), judge each with the
//! problem's checker, and aggregate mean pass@k over problems.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{completion_prompt, relative_label, stream_seed};
use crate::guidance::{self, GuidanceConfig};
use crate::labelers::{Labeler, LabelerKind, MetricStatus};
use crate::model::{ControlCode, ModelParameters};
use crate::sampling::{generate_unguided, SampleConfig};
use crate::tokenizer::Vocab;

pub const DEFAULT_SAMPLES: usize = 20;
pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("pass@k needs 0 <= c <= n and 1 <= k <= n, got n={n} c={c} k={k}")]
    Domain { n: usize, c: usize, k: usize },
    #[error("problem {problem}: {reason}")]
    Problem { problem: String, reason: String },
    #[error("no checker registered under `{0}`")]
    UnknownChecker(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Unbiased estimate of the probability that at least one of `k` samples
/// drawn without replacement from `n` (of which `c` pass) passes:
/// `1 − C(n−c, k) / C(n, k)`, evaluated as a product of ratios.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if c > n || k == 0 || k > n {
        return Err(EvalError::Domain { n, c, k });
    }
    if c == 0 {
        return Ok(0.0);
    }
    if n - c < k {
        return Ok(1.0);
    }
    let miss: f64 = (n - c + 1..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - miss)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub description: String,
    pub module_definition: String,
    /// Labeler name judging each completion.
    pub checker: String,
    /// Reference design for relative checkers or equivalence.
    pub reference: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ProblemFile {
    checker: String,
    reference: Option<PathBuf>,
}

pub const DESCRIPTION_FILE: &str = "description.txt";
pub const DEFINITION_FILE: &str = "definition.v";
pub const CHECKER_FILE: &str = "checker.toml";

/// Loads every subdirectory of `dir` holding `description.txt`,
/// `definition.v` and `checker.toml` (`checker = "<labeler>"`, optional
/// `reference = "<file>"` relative to the problem directory), sorted by id.
pub fn load_problems(dir: &Path) -> Result<Vec<Problem>> {
    let mut problems = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for path in entries {
        let id = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let err = |reason: String| EvalError::Problem {
            problem: id.clone(),
            reason,
        };
        let read = |name: &str| {
            fs::read_to_string(path.join(name)).map_err(|e| err(format!("{name}: {e}")))
        };
        let cfg: ProblemFile = toml::from_str(&read(CHECKER_FILE)?)
            .map_err(|e| err(format!("{CHECKER_FILE}: {e}")))?;
        let reference = match &cfg.reference {
            Some(r) => Some(
                fs::read_to_string(path.join(r))
                    .map_err(|e| err(format!("{}: {e}", r.display())))?,
            ),
            None => None,
        };
        problems.push(Problem {
            id: id.clone(),
            description: read(DESCRIPTION_FILE)?,
            module_definition: read(DEFINITION_FILE)?,
            checker: cfg.checker,
            reference,
        });
    }
    Ok(problems)
}

/// Produces one completion for a problem; errors count as failed samples.
pub trait Completer: Sync {
    fn complete(&self, problem: &Problem, seed: u64) -> std::result::Result<String, String>;
}

/// Completes problems with the generator, guided when a discriminator is set.
pub struct ModelCompleter<'a> {
    pub base: &'a ModelParameters,
    pub vocab: &'a Vocab,
    pub sample: SampleConfig,
    pub guidance: Option<(&'a ModelParameters, GuidanceConfig)>,
}

impl Completer for ModelCompleter<'_> {
    fn complete(&self, problem: &Problem, seed: u64) -> std::result::Result<String, String> {
        let prompt = completion_prompt(self.vocab, &problem.module_definition);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = match &self.guidance {
            None => {
                generate_unguided(self.base, &prompt, &self.sample, &mut rng)
                    .map_err(|e| e.to_string())?
                    .tokens
            }
            Some((disc, cfg)) => {
                guidance::generate(self.base, disc, &prompt, &[], cfg, &mut rng)
                    .map_err(|e| e.to_string())?
                    .tokens
            }
        };
        self.vocab.decode(&tokens).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub problem: String,
    pub n: usize,
    pub c: usize,
    pub outcomes: Vec<bool>,
    pub pass_at_k: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub problems: usize,
    pub empty: bool,
    pub mean_pass_at_k: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub records: Vec<EvalRecord>,
    pub aggregate: Aggregate,
}

fn id_seed(seed: u64, id: &str) -> u64 {
    // FNV-1a keeps per-problem seeds independent of problem order
    let h = id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    });
    seed ^ h
}

/// Judges one completion: absolute checkers must pass; relative checkers
/// must beat the reference metric.
pub fn judge(
    checker: &dyn Labeler,
    problem: &Problem,
    reference_value: Option<f64>,
    text: &str,
) -> bool {
    match checker.spec().kind {
        LabelerKind::Absolute => checker.measure(text, problem.reference.as_deref()).passed(),
        LabelerKind::Relative => {
            let r = checker.measure(text, None);
            match (r.status, r.value, reference_value) {
                (MetricStatus::Ok, Some(v), Some(reference)) => {
                    relative_label(v, reference) == ControlCode::Pos
                }
                _ => false,
            }
        }
    }
}

/// Evaluates every problem with `n` samples and reports pass@k for each k ≤ n.
pub fn run_benchmark(
    problems: &[Problem],
    completer: &dyn Completer,
    checkers: &BTreeMap<String, Box<dyn Labeler>>,
    n: usize,
    ks: &[usize],
    seed: u64,
) -> Result<Report> {
    for p in problems {
        if !checkers.contains_key(&p.checker) {
            return Err(EvalError::UnknownChecker(p.checker.clone()));
        }
    }
    let mut sorted: Vec<&Problem> = problems.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let records: Result<Vec<EvalRecord>> = sorted
        .par_iter()
        .map(|p| {
            let checker = checkers[&p.checker].as_ref();
            let reference_value = match (checker.spec().kind, &p.reference) {
                (LabelerKind::Relative, Some(r)) => {
                    let m = checker.measure(r, None);
                    match (m.status, m.value) {
                        (MetricStatus::Ok, Some(v)) => Some(v),
                        _ => {
                            return Err(EvalError::Problem {
                                problem: p.id.clone(),
                                reason: format!("reference metric failed: {:?}", m.status),
                            })
                        }
                    }
                }
                _ => checker.default_reference(),
            };
            let base = id_seed(seed, &p.id);
            let outcomes: Vec<bool> = (0..n)
                .map(|s| match completer.complete(p, stream_seed(base, s, 0)) {
                    Ok(text) => judge(checker, p, reference_value, &text),
                    Err(e) => {
                        log::warn!("problem {} sample {s}: {e}", p.id);
                        false
                    }
                })
                .collect();
            record(&p.id, outcomes, ks)
        })
        .collect();
    let records = records?;
    let aggregate = aggregate(&records, ks);
    Ok(Report { records, aggregate })
}

/// Builds a record from per-sample outcomes; ks larger than n are omitted.
pub fn record(problem: &str, outcomes: Vec<bool>, ks: &[usize]) -> Result<EvalRecord> {
    let n = outcomes.len();
    let c = outcomes.iter().filter(|&&o| o).count();
    let mut pass = BTreeMap::new();
    for &k in ks.iter().filter(|&&k| k <= n) {
        pass.insert(k, pass_at_k(n, c, k)?);
    }
    Ok(EvalRecord {
        problem: problem.to_string(),
        n,
        c,
        outcomes,
        pass_at_k: pass,
    })
}

/// Mean pass@k over the records that report each k.
pub fn aggregate(records: &[EvalRecord], ks: &[usize]) -> Aggregate {
    let mut mean = BTreeMap::new();
    for &k in ks {
        let vals: Vec<f64> = records
            .iter()
            .filter_map(|r| r.pass_at_k.get(&k).copied())
            .collect();
        if !vals.is_empty() {
            mean.insert(k, vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    Aggregate {
        problems: records.len(),
        empty: records.is_empty(),
        mean_pass_at_k: mean,
    }
}

/// Writes one line per problem record followed by `{"aggregate": …}`.
pub fn report_emit(w: &mut impl Write, report: &Report) -> std::io::Result<()> {
    for r in &report.records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    #[derive(Serialize)]
    struct Line<'a> {
        aggregate: &'a Aggregate,
    }
    serde_json::to_writer(
        &mut *w,
        &Line {
            aggregate: &report.aggregate,
        },
    )?;
    w.write_all(b"\n")
}
