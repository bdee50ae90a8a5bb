use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use veriguide_core::augment::{self, AugmentJob, LabeledExample};
use veriguide_core::corpus::{self, InstructionExample, RewritePair, Task, VerilogUnit};
use veriguide_core::eval::{self, ModelCompleter};
use veriguide_core::guidance::{self, TraceRecord};
use veriguide_core::labelers::{self, Labeler, LabelerKind};
use veriguide_core::sampling::{generate_unguided, SampleConfig, StopReason};
use veriguide_core::tokenizer::{build_vocab as learn_vocab, Vocab};
use veriguide_core::training::{self, TrainLogRecord, TrainOutcome};
use veriguide_core::{ModelConfig, ModelParameters};

use crate::config::AppConfig;
use crate::{
    AugmentArgs, BuildVocabArgs, EvalArgs, ExtractArgs, GenerateArgs, TrainDiscArgs, TrainLmArgs,
};

fn require_file(path: &Path, what: &str) -> Result<()> {
    ensure!(path.is_file(), "{what} {} does not exist", path.display());
    Ok(())
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    ensure!(
        path.is_dir(),
        "{what} {} is not a directory",
        path.display()
    );
    Ok(())
}

fn load_vocab(path: &Path) -> Result<Vocab> {
    require_file(path, "vocabulary")?;
    Vocab::load(path).with_context(|| format!("loading vocabulary {}", path.display()))
}

fn load_model(path: &Path, vocab: &Vocab) -> Result<ModelParameters> {
    require_file(path, "checkpoint")?;
    ModelParameters::load_checkpoint_for(path, vocab.hash())
        .with_context(|| format!("loading checkpoint {}", path.display()))
}

fn writer(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_records<T: Serialize>(
    w: &mut dyn Write,
    records: impl IntoIterator<Item = T>,
) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn model_config(cfg: &AppConfig, vocab: &Vocab) -> ModelConfig {
    let m = &cfg.model;
    ModelConfig {
        context_length: m.context_length,
        embed_dim: m.embed_dim,
        num_layers: m.num_layers,
        num_heads: m.num_heads,
        vocab_size: vocab.len(),
        seed: m.seed,
    }
}

pub fn extract(args: &ExtractArgs, cfg: &AppConfig) -> Result<()> {
    for root in &args.root {
        require_dir(root, "root")?;
    }
    let vocab = match &args.vocab {
        Some(p) => load_vocab(p)?,
        None => Vocab::byte_level(),
    };
    let checker = labelers::syntax_checker(&cfg.tools);
    let (units, report) = corpus::run_pipeline(&args.root, &cfg.corpus, &vocab, checker.as_ref())?;
    log::info!("corpus report: {}", serde_json::to_string(&report)?);
    corpus::write_jsonl(&args.out, &units)?;
    log::info!("wrote {} units to {}", units.len(), args.out.display());

    if args.tasks.is_empty() {
        return Ok(());
    }
    let needs = |t: Task| args.tasks.contains(&t);
    let translations = match &args.c_dir {
        Some(dir) => Some(corpus::load_translations(
            dir,
            &units,
            &vocab,
            cfg.corpus.max_tokens,
        )?),
        None => None,
    };
    let rewrites: Option<Vec<RewritePair>> = match &args.rewrites {
        Some(p) => Some(corpus::read_jsonl(p)?),
        None => None,
    };
    if needs(Task::V2c) || needs(Task::C2v) {
        ensure!(translations.is_some(), "tasks v2c/c2v need --c-dir");
    }
    if needs(Task::Rewrite) {
        ensure!(rewrites.is_some(), "task rewrite needs --rewrites");
    }
    let pairs = corpus::build_instruction_pairs(
        &units,
        translations.as_deref(),
        rewrites.as_deref(),
        &args.tasks,
    )?;
    let path = args.pairs.clone().unwrap_or_else(|| pairs_path(&args.out));
    corpus::write_jsonl(&path, &pairs)?;
    log::info!(
        "wrote {} instruction pairs to {}",
        pairs.len(),
        path.display()
    );
    Ok(())
}

fn pairs_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into());
    out.with_file_name(format!("{stem}.pairs.jsonl"))
}

pub fn build_vocab(args: &BuildVocabArgs, cfg: &AppConfig) -> Result<()> {
    require_file(&args.corpus, "corpus")?;
    let units: Vec<VerilogUnit> = corpus::read_jsonl(&args.corpus)?;
    let texts: Vec<&str> = units.iter().map(|u| u.full_text.as_str()).collect();
    let vocab = learn_vocab(&texts, cfg.tokenizer.vocab_size)?;
    vocab.save(&args.out)?;
    log::info!(
        "vocabulary of {} tokens ({} merges) written to {}",
        vocab.len(),
        vocab.num_merges(),
        args.out.display()
    );
    Ok(())
}

fn save_training(outcome: &TrainOutcome, out: &Path, log_path: Option<&Path>) -> Result<()> {
    outcome.params.save_checkpoint(out)?;
    if let Some(p) = log_path {
        corpus::write_jsonl::<TrainLogRecord>(p, &outcome.log)?;
    }
    log::info!(
        "loss {:.5} -> {:.5}; checkpoint {}",
        outcome.initial_loss,
        outcome.final_loss,
        out.display()
    );
    Ok(())
}

pub fn train_lm(args: &TrainLmArgs, cfg: &AppConfig) -> Result<()> {
    require_file(&args.data, "training data")?;
    let vocab = load_vocab(&args.vocab)?;
    let mut examples: Vec<InstructionExample> = corpus::read_jsonl(&args.data)?;
    if let Some(p) = &args.augmented {
        require_file(p, "augmented data")?;
        let labeled: Vec<LabeledExample> = corpus::read_jsonl(p)?;
        let extra = augment::positive_instruction_examples(&labeled);
        log::info!("appending {} augmented examples", extra.len());
        examples.extend(extra);
    }
    log::info!("seed {} (model seed {})", cfg.train.seed, cfg.model.seed);
    let outcome =
        training::train_generator(&examples, &vocab, model_config(cfg, &vocab), &cfg.train)?;
    save_training(&outcome, &args.out, args.log.as_deref())
}

pub fn train_disc(args: &TrainDiscArgs, cfg: &AppConfig) -> Result<()> {
    require_file(&args.data, "training data")?;
    let vocab = load_vocab(&args.vocab)?;
    let labeled: Vec<LabeledExample> = corpus::read_jsonl(&args.data)?;
    let pairs = augment::to_training_pairs(&labeled, &vocab);
    log::info!(
        "seed {} (model seed {}), lambda {}",
        cfg.train.seed,
        cfg.model.seed,
        cfg.train.lambda
    );
    let outcome =
        training::train_discriminator(&pairs, &vocab, model_config(cfg, &vocab), &cfg.train)?;
    if let Some(acc) = outcome.heldout_accuracy {
        log::info!("held-out accuracy {acc:.4}");
    }
    save_training(&outcome, &args.out, args.log.as_deref())
}

#[derive(Serialize)]
struct Sample<'a> {
    index: usize,
    text: &'a str,
    stop: StopReason,
}

#[derive(Serialize)]
struct SampleTrace<'a> {
    sample: usize,
    #[serde(flatten)]
    record: &'a TraceRecord,
}

pub fn generate(args: &GenerateArgs, cfg: &AppConfig) -> Result<()> {
    require_file(&args.prompt, "prompt")?;
    ensure!(args.n > 0, "--n must be positive");
    if args.trace.is_some() && args.disc.is_none() {
        bail!("--trace needs --disc");
    }
    let vocab = load_vocab(&args.vocab)?;
    let base = load_model(&args.base, &vocab)?;
    let disc = args
        .disc
        .as_deref()
        .map(|p| load_model(p, &vocab))
        .transpose()?;
    let raw = fs::read_to_string(&args.prompt)?;
    let prompt = if args.autocomplete {
        augment::completion_prompt(&vocab, &raw)
    } else {
        vocab.encode(&raw)
    };
    // the discriminator scores the module text, not the instruction
    let disc_seed = vocab.encode(&raw);
    let g = &cfg.guidance;
    log::info!("seed {}", g.seed);

    let mut out = writer(args.out.as_deref())?;
    let mut trace = args.trace.as_deref().map(|p| writer(Some(p))).transpose()?;
    for i in 0..args.n {
        let mut rng = ChaCha8Rng::seed_from_u64(augment::stream_seed(g.seed, i, 0));
        let (tokens, stop) = match &disc {
            Some(d) => {
                let r = guidance::generate(&base, d, &prompt, &disc_seed, g, &mut rng)?;
                if let Some(t) = trace.as_mut() {
                    write_records(
                        t.as_mut(),
                        r.trace
                            .iter()
                            .map(|record| SampleTrace { sample: i, record }),
                    )?;
                }
                (r.tokens, r.stop)
            }
            None => {
                let sc = SampleConfig {
                    temperature: g.temperature,
                    max_new_tokens: g.max_new_tokens,
                    greedy: g.greedy,
                };
                let r = generate_unguided(&base, &prompt, &sc, &mut rng)?;
                (r.tokens, r.stop)
            }
        };
        let text = vocab.decode(&tokens)?;
        write_records(
            out.as_mut(),
            [Sample {
                index: i,
                text: &text,
                stop,
            }],
        )?;
    }
    Ok(())
}

pub fn augment(args: &AugmentArgs, cfg: &AppConfig) -> Result<()> {
    require_file(&args.heads, "heads")?;
    let vocab = load_vocab(&args.vocab)?;
    let base = load_model(&args.base, &vocab)?;
    let labeler = labelers::create_labeler(&args.labeler, &cfg.tools, Some(&vocab))?;
    if let Err(reason) = labeler.available() {
        bail!("labeler `{}` is unavailable: {reason}", labeler.name());
    }
    let reference = match &args.reference {
        Some(p) => {
            require_file(p, "reference")?;
            Some(fs::read_to_string(p)?)
        }
        None => None,
    };
    let units: Vec<VerilogUnit> = corpus::read_jsonl(&args.heads)?;
    let a = &cfg.augment;
    let job = AugmentJob {
        heads: units.into_iter().map(|u| u.definition).collect(),
        samples_per_head: a.samples_per_head,
        temperature: a.temperature,
        max_new_tokens: a.max_new_tokens,
        seed: a.seed,
    };
    log::info!(
        "seed {}; {} heads x {} samples",
        job.seed,
        job.heads.len(),
        job.samples_per_head
    );
    let (candidates, skipped) = augment::complete_heads(&base, &vocab, &job)?;
    for s in &skipped {
        log::warn!("head {} skipped: {}", s.head_index, s.reason);
    }
    let checker = labelers::syntax_checker(&cfg.tools);
    let (survivors, report) = augment::syntax_filter(candidates, checker.as_ref());
    log::info!(
        "{} of {} candidates pass {}",
        report.passed,
        report.checked,
        report.checker
    );
    let texts: Vec<String> = survivors.into_iter().map(|c| c.text).collect();
    let labeled = label(labeler.as_ref(), &texts, reference.as_deref())?;
    let pos = labeled
        .iter()
        .filter(|e| e.label == veriguide_core::ControlCode::Pos)
        .count();
    log::info!("labeled {} examples, {pos} POS", labeled.len());
    corpus::write_jsonl(&args.out, &labeled)?;
    Ok(())
}

fn label(
    labeler: &dyn Labeler,
    texts: &[String],
    reference: Option<&str>,
) -> Result<Vec<LabeledExample>> {
    Ok(match labeler.spec().kind {
        LabelerKind::Absolute => augment::label_absolute(texts, labeler, reference)?,
        LabelerKind::Relative => {
            let value = match reference {
                Some(r) => augment::reference_metric(labeler, r)?,
                None => match labeler.default_reference() {
                    Some(v) => v,
                    None => bail!("labeler `{}` needs --reference", labeler.name()),
                },
            };
            augment::label_relative(texts, labeler, value)?
        }
    })
}

pub fn eval(args: &EvalArgs, cfg: &AppConfig) -> Result<()> {
    require_dir(&args.problems, "problems")?;
    let vocab = load_vocab(&args.vocab)?;
    let base = load_model(&args.base, &vocab)?;
    let disc = args
        .disc
        .as_deref()
        .map(|p| load_model(p, &vocab))
        .transpose()?;
    let mut problems = eval::load_problems(&args.problems)?;
    ensure!(
        !problems.is_empty(),
        "no problems found in {}",
        args.problems.display()
    );
    if let Some(name) = &args.labeler {
        for p in &mut problems {
            p.checker = name.clone();
        }
    }
    let mut checkers: BTreeMap<String, Box<dyn Labeler>> = BTreeMap::new();
    for p in &problems {
        if !checkers.contains_key(&p.checker) {
            let l = labelers::create_labeler(&p.checker, &cfg.tools, Some(&vocab))?;
            if let Err(reason) = l.available() {
                bail!("checker `{}` is unavailable: {reason}", p.checker);
            }
            checkers.insert(p.checker.clone(), l);
        }
    }
    let g = &cfg.guidance;
    let completer = ModelCompleter {
        base: &base,
        vocab: &vocab,
        sample: SampleConfig {
            temperature: g.temperature,
            max_new_tokens: g.max_new_tokens,
            greedy: g.greedy,
        },
        guidance: disc.as_ref().map(|d| (d, g.clone())),
    };
    let e = &cfg.eval;
    log::info!("seed {}; {} problems, n = {}", e.seed, problems.len(), e.n);
    let report = eval::run_benchmark(&problems, &completer, &checkers, e.n, &e.ks, e.seed)?;
    let mut out = writer(args.out.as_deref())?;
    eval::report_emit(&mut out, &report)?;
    out.flush()?;
    for (k, v) in &report.aggregate.mean_pass_at_k {
        log::info!("pass@{k} = {v:.4}");
    }
    Ok(())
}
