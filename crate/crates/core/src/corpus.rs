//! Corpus mining: scan source trees for Verilog files, extract modules and
//! functions, split each into definition and body, filter by token budget,
//! duplication and syntax, and turn the survivors into instruction pairs.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::labelers::{Labeler, MetricStatus};
use crate::tokenizer::Vocab;
use crate::verilog::{is_identifier, mask_comments_and_strings, words, Word};

pub const VERILOG_EXTENSIONS: &[&str] = &["v", "sv", "vh", "svh"];
pub const DEFAULT_MIN_LINES: usize = 4;
pub const DEFAULT_MAX_LINES: usize = 10_000;
pub const DEFAULT_MAX_TOKENS: usize = 1024;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read source root {path}: {source}")]
    Root {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("task {task} requested but no {missing} were supplied")]
    MissingInput { task: Task, missing: &'static str },
    #[error("{path}:{line}: {reason}")]
    Record {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceFile {
    pub path: PathBuf,
    pub content: String,
    pub line_count: usize,
}

impl SourceFile {
    pub fn new(path: impl Into<PathBuf>, content: impl Into<String>) -> Self {
        let content = content.into();
        let line_count = count_lines(&content);
        Self {
            path: path.into(),
            content,
            line_count,
        }
    }
}

/// Number of newline-delimited lines; a trailing newline does not open a new line.
pub fn count_lines(content: &str) -> usize {
    content.lines().count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitKind {
    Module,
    Function,
}

impl UnitKind {
    pub fn end_keyword(self) -> &'static str {
        match self {
            UnitKind::Module => "endmodule",
            UnitKind::Function => "endfunction",
        }
    }

    fn from_open(word: &str) -> Option<Self> {
        match word {
            "module" | "macromodule" => Some(UnitKind::Module),
            "function" => Some(UnitKind::Function),
            _ => None,
        }
    }

    fn from_close(word: &str) -> Option<Self> {
        match word {
            "endmodule" => Some(UnitKind::Module),
            "endfunction" => Some(UnitKind::Function),
            _ => None,
        }
    }
}

/// One extracted module or function. Field order is the on-disk record order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerilogUnit {
    pub kind: UnitKind,
    pub name: String,
    pub definition: String,
    pub body: String,
    pub full_text: String,
    pub token_count: usize,
    pub source_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationPair {
    pub verilog: VerilogUnit,
    pub c_program: String,
}

/// An externally supplied improved version of a module, used for rewrite pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewritePair {
    pub original: String,
    pub rewritten: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    V2c,
    C2v,
    Autocomplete,
    Rewrite,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::V2c, Task::C2v, Task::Autocomplete, Task::Rewrite];

    pub fn name(self) -> &'static str {
        match self {
            Task::V2c => "v2c",
            Task::C2v => "c2v",
            Task::Autocomplete => "autocomplete",
            Task::Rewrite => "rewrite",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s.trim())
            .ok_or_else(|| {
                format!("unknown task `{s}` (expected v2c, c2v, autocomplete or rewrite)")
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionExample {
    pub instruction: String,
    pub answer: String,
    pub task: Task,
}

/// Fixed instruction templates. The payload is appended after a newline.
pub mod templates {
    pub const AUTOCOMPLETE: &str = "Complete the Verilog module.";
    pub const V2C: &str = "Translate the Verilog into C.";
    pub const C2V: &str = "Translate the C into Verilog.";
    pub const REWRITE: &str = "Rewrite the Verilog module.";

    pub fn render(template: &str, payload: &str) -> String {
        format!("{template}\n{payload}")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ScanReport {
    pub verilog_files: usize,
    pub kept: usize,
    pub outside_line_bounds: usize,
    pub unreadable: usize,
}

/// Verilog/SystemVerilog files under `root` whose line count lies in
/// `min_lines..=max_lines`, in lexicographic path order.
pub fn scan_tree(
    root: &Path,
    min_lines: usize,
    max_lines: usize,
) -> Result<(Vec<SourceFile>, ScanReport)> {
    fs::read_dir(root).map_err(|source| CorpusError::Root {
        path: root.to_path_buf(),
        source,
    })?;
    let mut report = ScanReport::default();
    let mut paths = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = match entry {
            Ok(e) => e,
            Err(e) => {
                log::warn!("skipping unreadable entry: {e}");
                report.unreadable += 1;
                continue;
            }
        };
        if entry.file_type().is_file() && has_verilog_extension(entry.path()) {
            paths.push(entry.into_path());
        }
    }
    paths.sort();
    report.verilog_files = paths.len();

    let loaded: Vec<Option<SourceFile>> = paths
        .par_iter()
        .map(|p| match fs::read(p) {
            Ok(bytes) => Some(SourceFile::new(
                p.clone(),
                String::from_utf8_lossy(&bytes).into_owned(),
            )),
            Err(e) => {
                log::warn!("skipping {}: {e}", p.display());
                None
            }
        })
        .collect();

    let mut files = Vec::new();
    for f in loaded {
        match f {
            None => report.unreadable += 1,
            Some(f) if f.line_count < min_lines || f.line_count > max_lines => {
                report.outside_line_bounds += 1
            }
            Some(f) => files.push(f),
        }
    }
    report.kept = files.len();
    Ok((files, report))
}

fn has_verilog_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| VERILOG_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Why a region was not emitted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub source_path: String,
    pub offset: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Extraction {
    pub units: Vec<VerilogUnit>,
    /// Unbalanced open/close keywords.
    pub dangling: Vec<Diagnostic>,
    /// Balanced regions whose header could not be parsed.
    pub malformed: Vec<Diagnostic>,
}

/// Every balanced `module…endmodule` and `function…endfunction` region of
/// the file, in source order. Keywords inside comments and strings are ignored.
pub fn extract_units(file: &SourceFile) -> Extraction {
    let src = file.content.as_str();
    let source_path = file.path.display().to_string();
    let masked = mask_comments_and_strings(src);
    let text = masked.text.as_str();
    let ws: Vec<Word> = words(text).collect();

    let mut out = Extraction::default();
    let diag = |offset: usize, reason: String| Diagnostic {
        source_path: source_path.clone(),
        offset,
        reason,
    };
    let mut regions: Vec<(UnitKind, usize, usize, Option<usize>)> = Vec::new();
    // (kind, start offset, index of the word after the keyword)
    let mut stack: Vec<(UnitKind, usize, usize)> = Vec::new();

    for (k, w) in ws.iter().enumerate() {
        if let Some(kind) = UnitKind::from_open(w.text) {
            stack.push((kind, w.start, k + 1));
        } else if let Some(kind) = UnitKind::from_close(w.text) {
            match stack.iter().rposition(|(open, _, _)| *open == kind) {
                Some(pos) => {
                    for (open, at, _) in stack.drain(pos + 1..) {
                        out.dangling.push(diag(
                            at,
                            format!("`{}` without `{}`", open_keyword(open), open.end_keyword()),
                        ));
                    }
                    let (_, start, name_at) = stack.pop().expect("position found above");
                    regions.push((kind, start, w.end, Some(name_at)));
                }
                None => out.dangling.push(diag(
                    w.start,
                    format!("`{}` without an opening keyword", w.text),
                )),
            }
        }
    }
    for (open, at, _) in stack {
        out.dangling.push(diag(
            at,
            format!("`{}` without `{}`", open_keyword(open), open.end_keyword()),
        ));
    }
    regions.sort_by_key(|r| r.1);

    for (kind, start, end, name_at) in regions {
        let name = match kind {
            UnitKind::Module => name_at
                .and_then(|i| ws.get(i))
                .filter(|w| {
                    is_identifier(w.text) && text[start..w.start].split_whitespace().count() == 1
                })
                .map(|w| w.text),
            UnitKind::Function => function_name(text, &ws, name_at.unwrap_or(0), end),
        };
        let Some(name) = name else {
            out.malformed.push(diag(
                start,
                format!("{} without a legal name", open_keyword(kind)),
            ));
            continue;
        };
        let full_text = &src[start..end];
        match split_masked(&text[start..end], full_text) {
            Ok((definition, body)) => out.units.push(VerilogUnit {
                kind,
                name: name.to_string(),
                definition,
                body,
                full_text: full_text.to_string(),
                token_count: 0,
                source_path: source_path.clone(),
            }),
            Err(reason) => out.malformed.push(diag(start, format!("{name}: {reason}"))),
        }
    }
    out
}

fn open_keyword(kind: UnitKind) -> &'static str {
    match kind {
        UnitKind::Module => "module",
        UnitKind::Function => "function",
    }
}

/// The function name is the last identifier before the first `(` or `;`
/// after the keyword, skipping qualifiers, return types and ranges.
fn function_name<'a>(text: &str, ws: &[Word<'a>], from: usize, end: usize) -> Option<&'a str> {
    const SKIP: &[&str] = &[
        "automatic",
        "static",
        "signed",
        "unsigned",
        "integer",
        "real",
        "realtime",
        "time",
        "reg",
        "logic",
        "bit",
        "byte",
        "shortint",
        "int",
        "longint",
        "void",
    ];
    let first = ws.get(from)?;
    let stop = text[first.start..end]
        .find(['(', ';'])
        .map(|p| first.start + p)?;
    ws[from..]
        .iter()
        .take_while(|w| w.start < stop)
        .filter(|w| !SKIP.contains(&w.text) && !inside_brackets(&text[first.start..w.start]))
        .map(|w| w.text)
        .last()
        .filter(|n| is_identifier(n))
}

fn inside_brackets(prefix: &str) -> bool {
    prefix.matches('[').count() > prefix.matches(']').count()
}

/// Splits a unit's full text into `(definition, body)`. The definition runs
/// through the header's terminating `;` and any contiguous leading
/// `input`/`output`/`inout` declarations, plus the rest of that line when it
/// holds only whitespace or a comment.
pub fn split_definition_body(full_text: &str) -> std::result::Result<(String, String), String> {
    let masked = mask_comments_and_strings(full_text);
    split_masked(&masked.text, full_text)
}

fn split_masked(masked: &str, full_text: &str) -> std::result::Result<(String, String), String> {
    let bytes = masked.as_bytes();
    let mut cut = statement_end(bytes, 0).ok_or("header has no terminating `;`")?;
    loop {
        let next = masked[cut..]
            .find(|c: char| !c.is_whitespace())
            .map(|p| cut + p);
        let Some(next) = next else { break };
        let word: String = masked[next..]
            .chars()
            .take_while(|&c| c.is_ascii_alphanumeric() || c == '_')
            .collect();
        if !matches!(word.as_str(), "input" | "output" | "inout") {
            break;
        }
        match statement_end(bytes, next) {
            Some(end) => cut = end,
            None => break,
        }
    }
    let line_end = masked[cut..]
        .find('\n')
        .map_or(masked.len(), |p| cut + p + 1);
    if masked[cut..line_end].trim().is_empty() {
        cut = line_end;
    }
    Ok((full_text[..cut].to_string(), full_text[cut..].to_string()))
}

/// Byte offset just past the next `;` at bracket depth zero.
fn statement_end(bytes: &[u8], from: usize) -> Option<usize> {
    let mut depth = 0i64;
    for (i, &b) in bytes.iter().enumerate().skip(from) {
        match b {
            b'(' | b'[' | b'{' => depth += 1,
            b')' | b']' | b'}' => depth -= 1,
            b';' if depth <= 0 => return Some(i + 1),
            _ => {}
        }
    }
    None
}

/// Keeps units whose token count is at most `max_tokens`, recording the count.
pub fn filter_by_tokens(
    units: Vec<VerilogUnit>,
    vocab: &Vocab,
    max_tokens: usize,
) -> Vec<VerilogUnit> {
    let counts: Vec<usize> = units
        .par_iter()
        .map(|u| vocab.encode(&u.full_text).len())
        .collect();
    units
        .into_iter()
        .zip(counts)
        .filter(|(_, n)| *n <= max_tokens)
        .map(|(mut u, n)| {
            u.token_count = n;
            u
        })
        .collect()
}

/// Collapses every whitespace run to one space and trims the ends.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Drops later units whose whitespace-normalized text was already seen.
pub fn dedup(units: Vec<VerilogUnit>) -> Vec<VerilogUnit> {
    let mut seen = HashSet::new();
    units
        .into_iter()
        .filter(|u| seen.insert(normalize_whitespace(&u.full_text)))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SyntaxPassReport {
    pub checker: String,
    pub checked: usize,
    pub rejected: usize,
    pub checker_errors: usize,
}

/// Text handed to a syntax checker: functions are wrapped in a module
/// since checkers only accept complete design units.
pub fn checkable_text(unit: &VerilogUnit) -> String {
    match unit.kind {
        UnitKind::Module => unit.full_text.clone(),
        UnitKind::Function => format!("module __syntax_wrapper;\n{}\nendmodule\n", unit.full_text),
    }
}

/// Keeps the units the checker accepts. Checker failures (missing tool,
/// timeout) drop the unit and are tallied apart from rejections.
pub fn syntax_pass(
    units: Vec<VerilogUnit>,
    checker: &dyn Labeler,
) -> (Vec<VerilogUnit>, SyntaxPassReport) {
    let verdicts: Vec<(bool, bool)> = units
        .par_iter()
        .map(|u| {
            let r = checker.measure(&checkable_text(u), None);
            (r.passed(), r.status != MetricStatus::Ok)
        })
        .collect();
    let mut report = SyntaxPassReport {
        checker: checker.spec().name.clone(),
        checked: units.len(),
        ..Default::default()
    };
    let mut kept = Vec::new();
    for (u, (pass, error)) in units.into_iter().zip(verdicts) {
        if pass {
            kept.push(u);
        } else if error {
            report.checker_errors += 1;
        } else {
            report.rejected += 1;
        }
    }
    (kept, report)
}

/// Builds instruction pairs for each requested task. Units feed
/// autocomplete; translation and rewrite pairs are external inputs.
pub fn build_instruction_pairs(
    units: &[VerilogUnit],
    translations: Option<&[TranslationPair]>,
    rewrites: Option<&[RewritePair]>,
    tasks: &[Task],
) -> Result<Vec<InstructionExample>> {
    let mut tasks = tasks.to_vec();
    tasks.sort();
    tasks.dedup();
    for &task in &tasks {
        let missing = match task {
            Task::V2c | Task::C2v if translations.is_none() => Some("translations"),
            Task::Rewrite if rewrites.is_none() => Some("rewrite pairs"),
            _ => None,
        };
        if let Some(missing) = missing {
            return Err(CorpusError::MissingInput { task, missing });
        }
    }
    let translations = translations.unwrap_or_default();
    let rewrites = rewrites.unwrap_or_default();
    let mut out = Vec::new();
    for task in tasks {
        match task {
            Task::Autocomplete => out.extend(units.iter().map(|u| InstructionExample {
                instruction: templates::render(templates::AUTOCOMPLETE, &u.definition),
                answer: u.full_text.clone(),
                task,
            })),
            Task::V2c => out.extend(translations.iter().map(|t| InstructionExample {
                instruction: templates::render(templates::V2C, &t.verilog.full_text),
                answer: t.c_program.clone(),
                task,
            })),
            Task::C2v => out.extend(translations.iter().map(|t| InstructionExample {
                instruction: templates::render(templates::C2V, &t.c_program),
                answer: t.verilog.full_text.clone(),
                task,
            })),
            Task::Rewrite => out.extend(rewrites.iter().map(|r| InstructionExample {
                instruction: templates::render(templates::REWRITE, &r.original),
                answer: r.rewritten.clone(),
                task,
            })),
        }
    }
    out.retain(|e| !e.instruction.trim().is_empty() && !e.answer.trim().is_empty());
    Ok(out)
}

/// Pairs each unit with `<c_dir>/<name>.c` when that file exists and is
/// non-empty; pairs whose C side exceeds the token budget are dropped.
pub fn load_translations(
    c_dir: &Path,
    units: &[VerilogUnit],
    vocab: &Vocab,
    max_tokens: usize,
) -> Result<Vec<TranslationPair>> {
    fs::read_dir(c_dir).map_err(|source| CorpusError::Root {
        path: c_dir.to_path_buf(),
        source,
    })?;
    let mut pairs = Vec::new();
    for u in units {
        let path = c_dir.join(format!("{}.c", u.name));
        let Ok(c_program) = fs::read_to_string(&path) else {
            continue;
        };
        if c_program.trim().is_empty() || vocab.encode(&c_program).len() > max_tokens {
            continue;
        }
        pairs.push(TranslationPair {
            verilog: u.clone(),
            c_program,
        });
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub min_lines: usize,
    pub max_lines: usize,
    pub max_tokens: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            min_lines: DEFAULT_MIN_LINES,
            max_lines: DEFAULT_MAX_LINES,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CorpusReport {
    pub scan: ScanReport,
    pub extracted: usize,
    pub dangling: Vec<Diagnostic>,
    pub malformed: Vec<Diagnostic>,
    pub over_token_budget: usize,
    pub duplicates: usize,
    pub syntax: SyntaxPassReport,
    pub survivors: usize,
}

/// Scan → extract → token filter → dedup → syntax pass over every root
/// (the roots act as the allowlist of permitted sources).
pub fn run_pipeline(
    roots: &[PathBuf],
    cfg: &CorpusConfig,
    vocab: &Vocab,
    checker: &dyn Labeler,
) -> Result<(Vec<VerilogUnit>, CorpusReport)> {
    let mut report = CorpusReport::default();
    let mut files = Vec::new();
    for root in roots {
        let (f, r) = scan_tree(root, cfg.min_lines, cfg.max_lines)?;
        files.extend(f);
        report.scan.verilog_files += r.verilog_files;
        report.scan.kept += r.kept;
        report.scan.outside_line_bounds += r.outside_line_bounds;
        report.scan.unreadable += r.unreadable;
    }
    let extractions: Vec<Extraction> = files.par_iter().map(extract_units).collect();
    let mut units = Vec::new();
    for e in extractions {
        units.extend(e.units);
        report.dangling.extend(e.dangling);
        report.malformed.extend(e.malformed);
    }
    report.extracted = units.len();

    let before = units.len();
    let units = filter_by_tokens(units, vocab, cfg.max_tokens);
    report.over_token_budget = before - units.len();
    let before = units.len();
    let units = dedup(units);
    report.duplicates = before - units.len();
    let (units, syntax) = syntax_pass(units, checker);
    report.syntax = syntax;
    report.survivors = units.len();
    Ok((units, report))
}

/// Writes one JSON record per line with LF endings.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| CorpusError::Record {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelers::BuiltinSyntax;
    use crate::tokenizer::build_vocab;

    pub(crate) const D_LATCH: &str = "module d_latch (\n    input d,\n    input en,\n    output reg q\n);\n    always @(*) begin\n        if (en)\n            q <= d;\n    end\nendmodule\n";

    fn file(content: &str) -> SourceFile {
        SourceFile::new("mem.v", content)
    }

    fn unit(text: &str) -> VerilogUnit {
        let mut e = extract_units(&file(text));
        assert_eq!(e.units.len(), 1, "{e:?}");
        e.units.remove(0)
    }

    #[test]
    fn line_count_matches_lines() {
        assert_eq!(count_lines(""), 0);
        assert_eq!(count_lines("a"), 1);
        assert_eq!(count_lines("a\nb\n"), 2);
        assert_eq!(count_lines("a\n\nb"), 3);
    }

    #[test]
    fn d_latch_extracts_and_splits() {
        let u = unit(D_LATCH);
        assert_eq!(u.kind, UnitKind::Module);
        assert_eq!(u.name, "d_latch");
        assert!(u.definition.contains("module d_latch"));
        assert!(u.definition.contains("output reg q"));
        assert!(u.body.contains("always @(*)"));
        assert!(!u.definition.contains("always"));
        assert_eq!(format!("{}{}", u.definition, u.body), u.full_text);
        assert!(u.full_text.ends_with("endmodule"));
    }

    #[test]
    fn two_modules_in_order() {
        let e = extract_units(&file("module a; endmodule\nmodule b; endmodule\n"));
        let names: Vec<&str> = e.units.iter().map(|u| u.name.as_str()).collect();
        assert_eq!(names, ["a", "b"]);
    }

    #[test]
    fn comment_does_not_close() {
        let e = extract_units(&file("module m; /* endmodule */ endmodule"));
        assert_eq!(e.units.len(), 1);
        assert_eq!(e.units[0].full_text, "module m; /* endmodule */ endmodule");
        assert!(e.dangling.is_empty());
    }

    #[test]
    fn nested_function_yields_both() {
        let src = "module top(input [3:0] a, output [3:0] y);\n  function automatic [3:0] inc;\n    input [3:0] x;\n    inc = x + 1;\n  endfunction\n  assign y = inc(a);\nendmodule\n";
        let e = extract_units(&file(src));
        let got: Vec<(UnitKind, &str)> =
            e.units.iter().map(|u| (u.kind, u.name.as_str())).collect();
        assert_eq!(
            got,
            [(UnitKind::Module, "top"), (UnitKind::Function, "inc")]
        );
        let f = &e.units[1];
        assert!(f.definition.contains("input [3:0] x;"));
        assert!(f.body.trim_start().starts_with("inc = x + 1;"));
    }

    #[test]
    fn dangling_regions_are_reported() {
        let e = extract_units(&file(
            "module a;\nmodule b; endmodule\nendmodule\nendmodule\nmodule c;",
        ));
        assert_eq!(e.units.len(), 2);
        assert_eq!(e.dangling.len(), 2);
        let e = extract_units(&file("module ok; endmodule\nmodule broken(input a);\n"));
        assert_eq!(e.units.len(), 1);
        assert_eq!(e.dangling.len(), 1);
    }

    #[test]
    fn header_without_semicolon_is_malformed() {
        let e = extract_units(&file("module m (input a) endmodule"));
        assert!(e.units.is_empty());
        assert_eq!(e.malformed.len(), 1);
    }

    #[test]
    fn unnamed_module_is_malformed() {
        let e = extract_units(&file("module (a); endmodule"));
        assert!(e.units.is_empty());
        assert_eq!(e.malformed.len(), 1);
    }

    #[test]
    fn empty_body_is_the_terminator() {
        let u = unit("module m(); endmodule");
        assert_eq!(u.definition, "module m();");
        assert_eq!(u.body, " endmodule");
    }

    #[test]
    fn ansi_widths_stay_in_definition() {
        let src = "module alu #(parameter W = 8) (\n  input  [W-1:0] a, b,\n  input  [1:0]   op,\n  output reg [W-1:0] y\n);\n  always @(*) y = a + b;\nendmodule";
        let u = unit(src);
        // hand-annotated split point: just past the ");\n" closing the port list
        let expected = src.find(");\n").unwrap() + 3;
        assert_eq!(u.definition.len(), expected);
        assert!(u.definition.contains("[W-1:0] a, b"));
    }

    #[test]
    fn non_ansi_declarations_join_definition() {
        let src =
            "module m(a, y);\n  input a; // data in\n  output y;\n  assign y = ~a;\nendmodule";
        let u = unit(src);
        assert_eq!(
            u.definition,
            "module m(a, y);\n  input a; // data in\n  output y;\n"
        );
        assert_eq!(u.body, "  assign y = ~a;\nendmodule");
    }

    #[test]
    fn token_filter_boundary() {
        let vocab = build_vocab(&["x"], 261).unwrap();
        let text = "module m;x"; // 10 bytes, 10 tokens with a merge-free vocab
        let mut u = VerilogUnit {
            kind: UnitKind::Module,
            name: "m".into(),
            definition: String::new(),
            body: String::new(),
            full_text: text.into(),
            token_count: 0,
            source_path: String::new(),
        };
        assert_eq!(filter_by_tokens(vec![u.clone()], &vocab, 10).len(), 1);
        assert_eq!(
            filter_by_tokens(vec![u.clone()], &vocab, 10)[0].token_count,
            10
        );
        u.full_text.push('x');
        assert!(filter_by_tokens(vec![u], &vocab, 10).is_empty());
    }

    #[test]
    fn dedup_cases() {
        let a = unit("module a; endmodule");
        let b = unit("module b; endmodule");
        let a2 = unit("module a;\n\n\n   endmodule");
        assert_eq!(
            dedup(vec![a.clone(), b.clone(), a.clone()]),
            vec![a.clone(), b.clone()]
        );
        assert!(dedup(vec![]).is_empty());
        assert_eq!(dedup(vec![a.clone(), a2]).len(), 1);
    }

    #[test]
    fn instruction_pairs() {
        let u = unit(D_LATCH);
        let ex =
            build_instruction_pairs(std::slice::from_ref(&u), None, None, &[Task::Autocomplete])
                .unwrap();
        assert_eq!(ex.len(), 1);
        assert!(ex[0].instruction.contains(&u.definition));
        assert_eq!(ex[0].answer, u.full_text);
        assert!(
            build_instruction_pairs(&[], None, None, &[Task::Autocomplete])
                .unwrap()
                .is_empty()
        );
        assert!(matches!(
            build_instruction_pairs(std::slice::from_ref(&u), None, None, &[Task::V2c]),
            Err(CorpusError::MissingInput {
                task: Task::V2c,
                ..
            })
        ));
        assert!(
            build_instruction_pairs(std::slice::from_ref(&u), None, None, &[Task::Rewrite])
                .is_err()
        );
    }

    #[test]
    fn pair_count_is_sum_over_tasks() {
        let a = unit("module a; endmodule");
        let b = unit("module b; endmodule");
        let tr: Vec<TranslationPair> = [&a, &b]
            .iter()
            .map(|u| TranslationPair {
                verilog: (*u).clone(),
                c_program: format!("void {}(void) {{}}", u.name),
            })
            .collect();
        let units = [a, b];
        let ex = build_instruction_pairs(&units, Some(&tr), None, &[Task::Autocomplete, Task::V2c])
            .unwrap();
        let expected = units.len() + tr.len();
        assert_eq!(ex.len(), expected);
        let c2v = build_instruction_pairs(&units, Some(&tr), None, &[Task::C2v]).unwrap();
        assert!(c2v[0].instruction.contains("void a(void)"));
        assert_eq!(c2v[0].answer, units[0].full_text);
    }

    #[test]
    fn task_names_roundtrip() {
        for t in Task::ALL {
            assert_eq!(t.name().parse::<Task>().unwrap(), t);
            assert_eq!(
                serde_json::to_string(&t).unwrap(),
                format!("\"{}\"", t.name())
            );
        }
        assert!("translate".parse::<Task>().is_err());
    }

    #[test]
    fn record_field_order() {
        let u = unit("module a; endmodule");
        let json = serde_json::to_string(&u).unwrap();
        let keys = [
            "kind",
            "name",
            "definition",
            "body",
            "full_text",
            "token_count",
            "source_path",
        ];
        let positions: Vec<usize> = keys
            .iter()
            .map(|k| json.find(&format!("\"{k}\"")).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{json}");
        assert!(json.starts_with("{\"kind\":\"module\""));
    }

    #[test]
    fn syntax_pass_tallies() {
        let good = unit(D_LATCH);
        let func = extract_units(&file("function f; input a; f = a; endfunction"))
            .units
            .remove(0);
        let mut bad = good.clone();
        bad.full_text = "module d_latch(input d); begin endmodule".into();
        let (kept, report) = syntax_pass(vec![good.clone(), bad, func], &BuiltinSyntax::new());
        assert_eq!(kept.len(), 2);
        assert_eq!(report.rejected, 1);
        assert_eq!(report.checker_errors, 0);
        assert_eq!(report.checker, "builtin-syntax");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn module_text() -> impl Strategy<Value = String> {
            let port = prop_oneof![
                Just("input a"),
                Just("input [3:0] b"),
                Just("output reg y"),
                Just("output [7:0] z")
            ];
            let stmt = prop_oneof![
                Just("  assign y = a;\n"),
                Just("  // endmodule in a comment\n"),
                Just("  always @(posedge a) y <= 1'b0;\n"),
                Just("  /* module fake; */\n"),
                Just("  function f; input x; f = x; endfunction\n"),
                Just("  initial $display(\"endmodule\");\n"),
            ];
            (
                "[a-z][a-z0-9_]{0,6}",
                proptest::collection::vec(port, 0..4),
                proptest::collection::vec(stmt, 0..5),
            )
                .prop_map(|(name, ports, stmts)| {
                    format!(
                        "module {name}({});\n{}endmodule\n",
                        ports.join(", "),
                        stmts.concat()
                    )
                })
        }

        proptest! {
            #[test]
            fn reconstruction_and_soundness(mods in proptest::collection::vec(module_text(), 1..4)) {
                let src = mods.concat();
                let e = extract_units(&SourceFile::new("p.v", src.clone()));
                prop_assert!(e.dangling.is_empty());
                let modules: Vec<&VerilogUnit> = e.units.iter().filter(|u| u.kind == UnitKind::Module).collect();
                prop_assert_eq!(modules.len(), mods.len());
                for u in &e.units {
                    prop_assert_eq!(format!("{}{}", u.definition, u.body), u.full_text.clone());
                    prop_assert!(u.full_text.ends_with(u.kind.end_keyword()));
                    let masked = mask_comments_and_strings(&u.full_text).text;
                    let opens = words(&masked).filter(|w| w.text == "module").count();
                    let closes = words(&masked).filter(|w| w.text == "endmodule").count();
                    prop_assert_eq!(opens, closes);
                }
            }

            #[test]
            fn dedup_idempotent_and_stable(picks in proptest::collection::vec(0usize..4, 0..12)) {
                let pool: Vec<VerilogUnit> = ["module a; endmodule", "module b; endmodule", "module a;  endmodule", "module c; endmodule"]
                    .iter()
                    .map(|t| unit(t))
                    .collect();
                let units: Vec<VerilogUnit> = picks.iter().map(|&i| pool[i].clone()).collect();
                let once = dedup(units.clone());
                prop_assert_eq!(dedup(once.clone()), once.clone());
                let idx: Vec<usize> = once.iter().map(|u| units.iter().position(|v| v == u).unwrap()).collect();
                prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
