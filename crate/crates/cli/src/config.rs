//! Layered configuration: defaults, then the TOML file, then `VERIGUIDE_*`
//! environment variables, then command-line flags.
//!
//! Every key lives in a section (`[train] lambda = 0.5`). The environment
//! name of `section.key` is `VERIGUIDE_SECTION_KEY`, except the tool paths,
//! which use `VERIGUIDE_YOSYS` and `VERIGUIDE_EQY`.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use veriguide_core::corpus::CorpusConfig;
use veriguide_core::guidance::GuidanceConfig;
use veriguide_core::labelers::{ToolConfig, EQY_ENV, YOSYS_ENV};
use veriguide_core::tokenizer::DEFAULT_VOCAB_SIZE;
use veriguide_core::training::TrainConfig;

pub const CONFIG_ENV: &str = "VERIGUIDE_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerSection {
    pub vocab_size: usize,
}

/// Model shape; the vocabulary size comes from the vocabulary file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub context_length: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSection {
    pub samples_per_head: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub n: usize,
    pub ks: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppConfig {
    pub corpus: CorpusConfig,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    pub augment: AugmentSection,
    pub eval: EvalSection,
    pub tools: ToolConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        let model = veriguide_core::ModelConfig::default();
        let job = veriguide_core::augment::AugmentJob::new(Vec::new(), 4);
        AppConfig {
            corpus: CorpusConfig::default(),
            tokenizer: TokenizerSection {
                vocab_size: DEFAULT_VOCAB_SIZE,
            },
            model: ModelSection {
                context_length: model.context_length,
                embed_dim: model.embed_dim,
                num_layers: model.num_layers,
                num_heads: model.num_heads,
                seed: model.seed,
            },
            train: TrainConfig::default(),
            guidance: GuidanceConfig::default(),
            augment: AugmentSection {
                samples_per_head: job.samples_per_head,
                temperature: job.temperature,
                max_new_tokens: job.max_new_tokens,
                seed: job.seed,
            },
            eval: EvalSection {
                n: veriguide_core::eval::DEFAULT_SAMPLES,
                ks: veriguide_core::eval::DEFAULT_KS.to_vec(),
                seed: 0,
            },
            tools: ToolConfig::default(),
        }
    }
}

/// Keys that default to "unset" and so are absent from the defaults table.
const OPTIONAL_KEYS: &[(&str, &str)] = &[
    ("tools", "yosys"),
    ("tools", "eqy"),
    ("tools", "timeout_secs"),
    ("tools", "max_processes"),
];

/// Keys whose environment values are always taken as strings.
const PATH_KEYS: &[(&str, &str)] = &[("tools", "yosys"), ("tools", "eqy")];

/// A value set on the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub section: &'static str,
    pub key: &'static str,
    pub value: Value,
}

impl Override {
    pub fn new(section: &'static str, key: &'static str, value: impl Into<Value>) -> Self {
        Override {
            section,
            key,
            value: value.into(),
        }
    }
}

pub fn env_name(section: &str, key: &str) -> String {
    match (section, key) {
        ("tools", "yosys") => YOSYS_ENV.to_string(),
        ("tools", "eqy") => EQY_ENV.to_string(),
        _ => format!(
            "VERIGUIDE_{}_{}",
            section.to_uppercase(),
            key.to_uppercase()
        ),
    }
}

fn defaults_table() -> Table {
    Table::try_from(AppConfig::default()).expect("defaults serialize to a table")
}

/// Every `(section, key)` the configuration knows about.
fn known_keys(defaults: &Table) -> Vec<(String, String)> {
    let mut keys: Vec<(String, String)> = defaults
        .iter()
        .flat_map(|(s, v)| {
            let table = v.as_table().cloned().unwrap_or_default();
            table
                .keys()
                .map(|k| (s.clone(), k.clone()))
                .collect::<Vec<_>>()
        })
        .collect();
    for (s, k) in OPTIONAL_KEYS {
        keys.push((s.to_string(), k.to_string()));
    }
    keys.sort();
    keys.dedup();
    keys
}

fn set(table: &mut Table, section: &str, key: &str, value: Value) {
    let entry = table
        .entry(section)
        .or_insert_with(|| Value::Table(Table::new()));
    if let Value::Table(t) = entry {
        t.insert(key.to_string(), value);
    }
}

/// Parses an environment value as a TOML literal (`3`, `0.5`, `[1, 5]`,
/// `true`), falling back to a plain string.
fn env_value(raw: &str, as_string: bool) -> Value {
    if as_string {
        return Value::String(raw.to_string());
    }
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Merges the layers and validates the result.
pub fn resolve(
    file: Option<&str>,
    env: &dyn Fn(&str) -> Option<String>,
    overrides: &[Override],
) -> Result<AppConfig> {
    let mut table = defaults_table();
    let keys = known_keys(&table);
    let known = |s: &str, k: &str| keys.iter().any(|(a, b)| a == s && b == k);

    if let Some(text) = file {
        let parsed: Table = text.parse().context("config file is not valid TOML")?;
        for (section, value) in parsed {
            let Value::Table(entries) = value else {
                bail!("config key `{section}` must be a [section]");
            };
            for (key, v) in entries {
                if !known(&section, &key) {
                    bail!("unknown config key `{section}.{key}`");
                }
                set(&mut table, &section, &key, v);
            }
        }
    }
    for (section, key) in &keys {
        if let Some(raw) = env(&env_name(section, key)) {
            let as_string = PATH_KEYS.contains(&(section.as_str(), key.as_str()));
            set(&mut table, section, key, env_value(&raw, as_string));
        }
    }
    for o in overrides {
        debug_assert!(
            known(o.section, o.key),
            "flag for unknown key {}.{}",
            o.section,
            o.key
        );
        set(&mut table, o.section, o.key, o.value.clone());
    }
    let cfg: AppConfig = Value::Table(table)
        .try_into()
        .context("invalid configuration")?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads the config file (if any) and resolves against the process environment.
pub fn load(path: Option<&Path>, overrides: &[Override]) -> Result<AppConfig> {
    let text = match path {
        Some(p) => Some(
            std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?,
        ),
        None => None,
    };
    resolve(text.as_deref(), &|name| std::env::var(name).ok(), overrides)
}

impl AppConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        if c.min_lines > c.max_lines || c.max_tokens == 0 {
            bail!("corpus: need min_lines <= max_lines and max_tokens > 0");
        }
        self.train.validate()?;
        self.guidance.validate()?;
        let m = &self.model;
        if m.embed_dim == 0
            || m.num_heads == 0
            || !m.embed_dim.is_multiple_of(m.num_heads)
            || m.num_layers == 0
        {
            bail!(
                "model: embed_dim must be a positive multiple of num_heads and num_layers positive"
            );
        }
        if m.context_length < 2 {
            bail!("model: context_length must be at least 2");
        }
        let a = &self.augment;
        if a.samples_per_head == 0 || !(a.temperature > 0.0) || a.max_new_tokens == 0 {
            bail!("augment: samples_per_head, temperature and max_new_tokens must be positive");
        }
        if self.eval.n == 0 || self.eval.ks.contains(&0) {
            bail!("eval: n and every k must be positive");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }
}
