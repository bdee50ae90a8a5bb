use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use veriguide_core::corpus::Task;

mod commands;
mod config;

use config::Override;

/// Discriminator-guided Verilog generation toolkit.
#[derive(Debug, Parser)]
#[command(name = "veriguide", version, about)]
struct Cli {
    /// TOML config file with per-module sections ([corpus], [train], ...).
    #[arg(long, global = true, env = config::CONFIG_ENV)]
    config: Option<PathBuf>,

    /// Print the resolved configuration as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Mine module/function units from Verilog trees into a JSONL corpus.
    Extract(ExtractArgs),
    /// Learn a byte-level BPE vocabulary from a corpus file.
    BuildVocab(BuildVocabArgs),
    /// Instruction-tune a generator on instruction pairs.
    TrainLm(TrainLmArgs),
    /// Train a class-conditional discriminator on labeled examples.
    TrainDisc(TrainDiscArgs),
    /// Sample completions, guided when a discriminator is given.
    Generate(GenerateArgs),
    /// Complete module heads, filter them and label the survivors.
    Augment(AugmentArgs),
    /// Run a problem directory and report pass@k.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct ExtractArgs {
    /// Source tree to scan; repeat for several roots.
    #[arg(long, required = true)]
    root: Vec<PathBuf>,
    #[arg(long)]
    min_lines: Option<usize>,
    #[arg(long)]
    max_lines: Option<usize>,
    #[arg(long)]
    max_tokens: Option<usize>,
    /// Unit corpus output (JSONL).
    #[arg(long)]
    out: PathBuf,
    /// Vocabulary used for token counting; byte-level when omitted.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Directory of `<unit_name>.c` translations for the v2c/c2v tasks.
    #[arg(long)]
    c_dir: Option<PathBuf>,
    /// JSONL of {original, rewritten} pairs for the rewrite task.
    #[arg(long)]
    rewrites: Option<PathBuf>,
    /// Instruction tasks to emit, comma separated (v2c,c2v,autocomplete,rewrite).
    #[arg(long, value_delimiter = ',')]
    tasks: Vec<Task>,
    /// Instruction pair output; defaults to `<out>.pairs.jsonl`.
    #[arg(long)]
    pairs: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BuildVocabArgs {
    /// Unit corpus written by `extract`.
    #[arg(long)]
    corpus: PathBuf,
    /// Target vocabulary size.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long)]
    context_length: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    num_layers: Option<usize>,
    #[arg(long)]
    num_heads: Option<usize>,
    /// Parameter initialization seed.
    #[arg(long)]
    model_seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_init: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    adam_eps: Option<f64>,
    /// Shuffling and held-out split seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainLmArgs {
    /// Instruction pairs (JSONL) written by `extract --tasks`.
    #[arg(long)]
    data: PathBuf,
    /// Labeled examples whose POS entries are appended as autocomplete pairs.
    #[arg(long)]
    augmented: Option<PathBuf>,
    #[arg(long)]
    vocab: PathBuf,
    /// Checkpoint output.
    #[arg(long)]
    out: PathBuf,
    /// Training log output (JSONL).
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Debug, Args)]
struct TrainDiscArgs {
    /// Labeled examples (JSONL) written by `augment`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
    /// Weight of the generative term in the hybrid loss.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    heldout_fraction: Option<f64>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Debug, Args)]
struct GuidanceArgs {
    /// Guidance weight; 0 disables the discriminator's influence.
    #[arg(long)]
    w: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    rank_by: Option<RankByArg>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum RankByArg {
    Posterior,
    Weighted,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    disc: Option<PathBuf>,
    #[arg(long)]
    vocab: PathBuf,
    /// Text file holding the prompt.
    #[arg(long)]
    prompt: PathBuf,
    /// Wrap the prompt in the autocomplete instruction.
    #[arg(long)]
    autocomplete: bool,
    #[command(flatten)]
    guidance: GuidanceArgs,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    greedy: bool,
    /// Number of samples.
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-step trace output (JSONL); guided runs only.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Sample output (JSONL); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    /// Unit corpus whose definitions serve as heads.
    #[arg(long)]
    heads: PathBuf,
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Samples per head.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Labeler name, e.g. aig-nodes, keyword:posedge, length:200.
    #[arg(long)]
    labeler: String,
    /// Reference design for relative or equivalence labelers.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Labeled output (JSONL).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory of problem subdirectories.
    #[arg(long)]
    problems: PathBuf,
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    disc: Option<PathBuf>,
    #[arg(long)]
    vocab: PathBuf,
    #[command(flatten)]
    guidance: GuidanceArgs,
    /// Checker for every problem, overriding each problem's own.
    #[arg(long)]
    labeler: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    /// Comma-separated k values.
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report output (JSONL); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn push<T: Into<toml::Value>>(
    out: &mut Vec<Override>,
    section: &'static str,
    key: &'static str,
    v: Option<T>,
) {
    if let Some(v) = v {
        out.push(Override::new(section, key, v));
    }
}

fn int<T: TryInto<i64>>(v: Option<T>) -> Option<i64> {
    v.and_then(|x| x.try_into().ok())
}

impl ModelArgs {
    fn overrides(&self, out: &mut Vec<Override>) {
        push(out, "model", "context_length", int(self.context_length));
        push(out, "model", "embed_dim", int(self.embed_dim));
        push(out, "model", "num_layers", int(self.num_layers));
        push(out, "model", "num_heads", int(self.num_heads));
        push(out, "model", "seed", int(self.model_seed));
    }
}

impl TrainArgs {
    fn overrides(&self, out: &mut Vec<Override>) {
        push(out, "train", "epochs", int(self.epochs));
        push(out, "train", "batch_size", int(self.batch_size));
        push(out, "train", "lr_init", self.lr_init);
        push(out, "train", "lr_min", self.lr_min);
        push(out, "train", "beta1", self.beta1);
        push(out, "train", "beta2", self.beta2);
        push(out, "train", "adam_eps", self.adam_eps);
        push(out, "train", "seed", int(self.seed));
    }
}

impl GuidanceArgs {
    fn overrides(&self, out: &mut Vec<Override>) {
        push(out, "guidance", "w", self.w);
        push(out, "guidance", "rho", self.rho);
        push(out, "guidance", "tau", self.tau);
        let rank = self.rank_by.map(|r| match r {
            RankByArg::Posterior => "posterior",
            RankByArg::Weighted => "weighted",
        });
        push(out, "guidance", "rank_by", rank);
    }
}

impl Command {
    /// Config values set by this subcommand's flags.
    fn overrides(&self) -> Vec<Override> {
        let mut out = Vec::new();
        match self {
            Command::Extract(a) => {
                push(&mut out, "corpus", "min_lines", int(a.min_lines));
                push(&mut out, "corpus", "max_lines", int(a.max_lines));
                push(&mut out, "corpus", "max_tokens", int(a.max_tokens));
            }
            Command::BuildVocab(a) => push(&mut out, "tokenizer", "vocab_size", int(a.size)),
            Command::TrainLm(a) => {
                a.model.overrides(&mut out);
                a.train.overrides(&mut out);
            }
            Command::TrainDisc(a) => {
                a.model.overrides(&mut out);
                a.train.overrides(&mut out);
                push(&mut out, "train", "lambda", a.lambda);
                push(&mut out, "train", "heldout_fraction", a.heldout_fraction);
            }
            Command::Generate(a) => {
                a.guidance.overrides(&mut out);
                push(&mut out, "guidance", "temperature", a.temperature);
                push(
                    &mut out,
                    "guidance",
                    "max_new_tokens",
                    int(a.max_new_tokens),
                );
                push(&mut out, "guidance", "seed", int(a.seed));
                if a.greedy {
                    push(&mut out, "guidance", "greedy", Some(true));
                }
            }
            Command::Augment(a) => {
                push(&mut out, "augment", "samples_per_head", int(a.n));
                push(&mut out, "augment", "temperature", a.temperature);
                push(&mut out, "augment", "max_new_tokens", int(a.max_new_tokens));
                push(&mut out, "augment", "seed", int(a.seed));
            }
            Command::Eval(a) => {
                a.guidance.overrides(&mut out);
                push(&mut out, "guidance", "temperature", a.temperature);
                push(
                    &mut out,
                    "guidance",
                    "max_new_tokens",
                    int(a.max_new_tokens),
                );
                push(&mut out, "eval", "n", int(a.n));
                push(&mut out, "eval", "seed", int(a.seed));
                if !a.k.is_empty() {
                    let ks: Vec<i64> = a.k.iter().filter_map(|&k| i64::try_from(k).ok()).collect();
                    push(&mut out, "eval", "ks", Some(ks));
                }
            }
        }
        out
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Extract(_) => "extract",
            Command::BuildVocab(_) => "build-vocab",
            Command::TrainLm(_) => "train-lm",
            Command::TrainDisc(_) => "train-disc",
            Command::Generate(_) => "generate",
            Command::Augment(_) => "augment",
            Command::Eval(_) => "eval",
        }
    }
}

fn main() -> ExitCode {
    // clap exits with 0 for --help/--version and 2 for usage errors
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();

    let cfg = match config::load(cli.config.as_deref(), &cli.command.overrides()) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return ExitCode::SUCCESS;
    }
    log::info!(
        "{} with resolved config:\n{}",
        cli.command.name(),
        cfg.to_toml()
    );

    let result = match &cli.command {
        Command::Extract(a) => commands::extract(a, &cfg),
        Command::BuildVocab(a) => commands::build_vocab(a, &cfg),
        Command::TrainLm(a) => commands::train_lm(a, &cfg),
        Command::TrainDisc(a) => commands::train_disc(a, &cfg),
        Command::Generate(a) => commands::generate(a, &cfg),
        Command::Augment(a) => commands::augment(a, &cfg),
        Command::Eval(a) => commands::eval(a, &cfg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
