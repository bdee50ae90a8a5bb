//! Labelers turn a Verilog text into a [`MetricResult`]. Absolute labelers
//! report pass (1) or fail (0); relative labelers report a real metric where
//! lower is better. External adapters drive Yosys and eqy as subprocesses in
//! throwaway directories; built-in labelers are pure and need no tools.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Condvar, Mutex, OnceLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::Vocab;
use crate::verilog::{
    check_structure, contains_outside_comments, mask_comments_and_strings, port_names, words,
};

pub const DEFAULT_SHORT_TIMEOUT: Duration = Duration::from_secs(60);
pub const DEFAULT_LONG_TIMEOUT: Duration = Duration::from_secs(600);
pub const DEFAULT_SAT_REPETITIONS: usize = 3;
pub const YOSYS_ENV: &str = "VERIGUIDE_YOSYS";
pub const EQY_ENV: &str = "VERIGUIDE_EQY";

#[derive(Debug, Error)]
pub enum LabelerError {
    #[error("unknown labeler `{0}`")]
    Unknown(String),
    #[error("labeler `{name}` is unavailable: {reason}")]
    Unavailable { name: String, reason: String },
    #[error("labeler `{0}` needs a reference design")]
    NeedsReference(String),
    #[error("invalid labeler argument: {0}")]
    Argument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelerKind {
    Absolute,
    Relative,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelerSpec {
    pub name: String,
    pub kind: LabelerKind,
    /// Exact script text for external adapters (with `{design}` placeholders), empty for built-ins.
    pub command_recipe: String,
    pub timeout: Duration,
    pub needs_reference: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricStatus {
    Ok,
    ToolError,
    Timeout,
    ParseError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub status: MetricStatus,
    pub value: Option<f64>,
    pub raw_output: String,
}

impl MetricResult {
    pub fn ok(value: f64, raw_output: impl Into<String>) -> Self {
        Self {
            status: MetricStatus::Ok,
            value: Some(value),
            raw_output: raw_output.into(),
        }
    }

    pub fn verdict(pass: bool, raw_output: impl Into<String>) -> Self {
        Self::ok(if pass { 1.0 } else { 0.0 }, raw_output)
    }

    pub fn failure(status: MetricStatus, raw_output: impl Into<String>) -> Self {
        debug_assert_ne!(status, MetricStatus::Ok);
        Self {
            status,
            value: None,
            raw_output: raw_output.into(),
        }
    }

    /// Absolute-labeler pass: status ok and a positive value.
    pub fn passed(&self) -> bool {
        self.status == MetricStatus::Ok && self.value.is_some_and(|v| v > 0.5)
    }
}

pub trait Labeler: Send + Sync {
    fn spec(&self) -> &LabelerSpec;

    /// Measures `text`. Labelers that compare against a reference design
    /// (`spec().needs_reference`) receive it in `reference`.
    fn measure(&self, text: &str, reference: Option<&str>) -> MetricResult;

    fn name(&self) -> &str {
        &self.spec().name
    }

    /// `Err(reason)` when the labeler cannot run at all (e.g. its tool is missing).
    fn available(&self) -> Result<(), String> {
        Ok(())
    }

    /// Reference metric used by relative labelers when no reference design is given.
    fn default_reference(&self) -> Option<f64> {
        None
    }
}

fn program_available(program: &Path) -> Result<(), String> {
    find_program(program)
        .map(|_| ())
        .ok_or_else(|| format!("{} not found", program.display()))
}

fn builtin_spec(name: &str, kind: LabelerKind) -> LabelerSpec {
    LabelerSpec {
        name: name.to_string(),
        kind,
        command_recipe: String::new(),
        timeout: DEFAULT_SHORT_TIMEOUT,
        needs_reference: false,
    }
}

/// Balanced-structure syntax check used when no external tool is configured.
pub struct BuiltinSyntax {
    spec: LabelerSpec,
}

impl BuiltinSyntax {
    pub fn new() -> Self {
        Self {
            spec: builtin_spec("builtin-syntax", LabelerKind::Absolute),
        }
    }
}

impl Default for BuiltinSyntax {
    fn default() -> Self {
        Self::new()
    }
}

impl Labeler for BuiltinSyntax {
    fn spec(&self) -> &LabelerSpec {
        &self.spec
    }

    fn measure(&self, text: &str, _reference: Option<&str>) -> MetricResult {
        match check_structure(text) {
            Ok(()) => MetricResult::verdict(true, ""),
            Err(reason) => MetricResult::verdict(false, reason),
        }
    }
}

/// POS iff the pattern occurs outside comments and string literals.
pub struct KeywordLabeler {
    pattern: String,
    spec: LabelerSpec,
}

impl KeywordLabeler {
    pub fn new(pattern: impl Into<String>) -> Self {
        let pattern = pattern.into();
        let spec = builtin_spec(&format!("keyword:{pattern}"), LabelerKind::Absolute);
        Self { pattern, spec }
    }
}

impl Labeler for KeywordLabeler {
    fn spec(&self) -> &LabelerSpec {
        &self.spec
    }

    fn measure(&self, text: &str, _reference: Option<&str>) -> MetricResult {
        MetricResult::verdict(contains_outside_comments(text, &self.pattern), "")
    }
}

/// Relative labeler whose metric is the token count. The threshold serves
/// as the reference metric when no reference design is given.
pub struct LengthLabeler {
    vocab: Vocab,
    threshold: Option<f64>,
    spec: LabelerSpec,
}

impl LengthLabeler {
    pub fn new(vocab: Vocab, threshold: Option<f64>) -> Self {
        Self {
            vocab,
            threshold,
            spec: builtin_spec("length", LabelerKind::Relative),
        }
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }
}

impl Labeler for LengthLabeler {
    fn spec(&self) -> &LabelerSpec {
        &self.spec
    }

    fn measure(&self, text: &str, _reference: Option<&str>) -> MetricResult {
        MetricResult::ok(self.vocab.encode(text).len() as f64, "")
    }

    fn default_reference(&self) -> Option<f64> {
        self.threshold
    }
}

/// Bounds the number of concurrently running tool processes.
pub struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.freed.notify_one();
    }
}

static TOOL_SLOTS: OnceLock<Semaphore> = OnceLock::new();

/// Sets the global tool-process bound. Only the first call has an effect.
pub fn init_tool_slots(max_processes: usize) {
    let _ = TOOL_SLOTS.set(Semaphore::new(max_processes));
}

fn tool_slots() -> &'static Semaphore {
    TOOL_SLOTS
        .get_or_init(|| Semaphore::new(std::thread::available_parallelism().map_or(1, |n| n.get())))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ToolOutcome {
    Exited { success: bool, output: String },
    Missing(String),
    TimedOut { output: String },
    SpawnFailed(String),
}

/// Runs `program args…` in `dir` with combined stdout/stderr captured to a
/// file, killing it after `timeout`.
pub fn run_tool(program: &Path, args: &[&str], dir: &Path, timeout: Duration) -> ToolOutcome {
    let _permit = tool_slots().acquire();
    let log_path = dir.join("tool.log");
    let log = match fs::File::create(&log_path).and_then(|f| Ok((f.try_clone()?, f))) {
        Ok(pair) => pair,
        Err(e) => return ToolOutcome::SpawnFailed(e.to_string()),
    };
    let spawned = Command::new(program)
        .args(args)
        .current_dir(dir)
        .stdin(Stdio::null())
        .stdout(log.0)
        .stderr(log.1)
        .spawn();
    let mut child = match spawned {
        Ok(c) => c,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return ToolOutcome::Missing(format!("{} not found", program.display()))
        }
        Err(e) => return ToolOutcome::SpawnFailed(e.to_string()),
    };
    let start = Instant::now();
    let read_log = || {
        fs::read(&log_path)
            .map(|b| String::from_utf8_lossy(&b).into_owned())
            .unwrap_or_default()
    };
    loop {
        match child.try_wait() {
            Ok(Some(status)) => {
                return ToolOutcome::Exited {
                    success: status.success(),
                    output: read_log(),
                }
            }
            Ok(None) if start.elapsed() >= timeout => {
                let _ = child.kill();
                let _ = child.wait();
                return ToolOutcome::TimedOut { output: read_log() };
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(5)),
            Err(e) => return ToolOutcome::SpawnFailed(e.to_string()),
        }
    }
}

/// Locates a program: paths with a separator are taken as given, bare names
/// are searched on `PATH`.
pub fn find_program(program: &Path) -> Option<PathBuf> {
    if program.components().count() > 1 {
        return program.is_file().then(|| program.to_path_buf());
    }
    let path = std::env::var_os("PATH")?;
    std::env::split_paths(&path)
        .map(|d| d.join(program))
        .find(|p| p.is_file())
}

pub const DESIGN_FILE: &str = "design.v";
pub const FORMAL_DESIGN_FILE: &str = "design.sv";

pub fn syntax_script() -> String {
    format!("read_verilog {DESIGN_FILE}\nprep\n")
}

pub fn aig_script() -> String {
    format!("read_verilog {DESIGN_FILE}\nhierarchy -auto-top\nproc; aigmap; stat\n")
}

pub fn sat_script() -> String {
    format!(
        "read_verilog -formal -sv {FORMAL_DESIGN_FILE}\nhierarchy -auto-top; proc; opt; sat -verify -seq 100 -tempinduct -prove-asserts\n"
    )
}

pub fn eqy_config(top: &str) -> String {
    format!(
        "[gold]\nread_verilog gold.v\nprep -top {top}\n\n[gate]\nread_verilog gate.v\nprep -top {top}\n\n[strategy sby]\nuse sby\ndepth 10\nengine smtbmc\n"
    )
}

/// Counts parsed from a `stat` report. The last statistics block wins,
/// which is the top module (or the design total) after `hierarchy`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatCounts {
    pub cells: u64,
    pub and_gates: Option<u64>,
}

/// Parses both the classic (`Number of cells: N`) and newer (`N cells`)
/// `stat` layouts.
pub fn parse_stat(output: &str) -> Option<StatCounts> {
    let mut cells = None;
    let mut and_gates = None;
    for line in output.lines() {
        let t = line.trim();
        if let Some(rest) = t.strip_prefix("Number of cells:") {
            if let Ok(n) = rest.trim().parse() {
                cells = Some(n);
                and_gates = None;
            }
            continue;
        }
        let parts: Vec<&str> = t.split_whitespace().collect();
        match parts.as_slice() {
            [n, "cells"] => {
                if let Ok(n) = n.parse() {
                    cells = Some(n);
                    and_gates = None;
                }
            }
            ["$_AND_", n] | [n, "$_AND_"] => {
                if let Ok(n) = n.parse() {
                    and_gates = Some(n);
                }
            }
            _ => {}
        }
    }
    cells.map(|cells| StatCounts { cells, and_gates })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum YosysMode {
    Syntax,
    AigNodes,
    AigAndGates,
    SatRuntime,
}

/// Yosys-backed labeler; one instance per metric.
pub struct YosysLabeler {
    mode: YosysMode,
    binary: PathBuf,
    repetitions: usize,
    spec: LabelerSpec,
}

impl YosysLabeler {
    pub fn new(mode: YosysMode, binary: PathBuf, timeout: Option<Duration>) -> Self {
        let (name, kind, recipe, default_timeout) = match mode {
            YosysMode::Syntax => (
                "yosys-syntax",
                LabelerKind::Absolute,
                syntax_script(),
                DEFAULT_SHORT_TIMEOUT,
            ),
            YosysMode::AigNodes => (
                "aig-nodes",
                LabelerKind::Relative,
                aig_script(),
                DEFAULT_SHORT_TIMEOUT,
            ),
            YosysMode::AigAndGates => (
                "aig-and",
                LabelerKind::Relative,
                aig_script(),
                DEFAULT_SHORT_TIMEOUT,
            ),
            YosysMode::SatRuntime => (
                "sat-runtime",
                LabelerKind::Relative,
                sat_script(),
                DEFAULT_LONG_TIMEOUT,
            ),
        };
        let spec = LabelerSpec {
            name: name.into(),
            kind,
            command_recipe: recipe,
            timeout: timeout.unwrap_or(default_timeout),
            needs_reference: false,
        };
        Self {
            mode,
            binary,
            repetitions: DEFAULT_SAT_REPETITIONS,
            spec,
        }
    }

    pub fn with_repetitions(mut self, r: usize) -> Self {
        self.repetitions = r.max(1);
        self
    }

    fn invoke(
        &self,
        file: &str,
        text: &str,
    ) -> std::result::Result<(ToolOutcome, Duration), MetricResult> {
        let dir = tempfile::tempdir()
            .map_err(|e| MetricResult::failure(MetricStatus::ToolError, e.to_string()))?;
        let write = |name: &str, body: &str| fs::write(dir.path().join(name), body);
        write(file, text)
            .and_then(|_| write("script.ys", &self.spec.command_recipe))
            .map_err(|e| MetricResult::failure(MetricStatus::ToolError, e.to_string()))?;
        let start = Instant::now();
        let outcome = run_tool(
            &self.binary,
            &["-q", "-s", "script.ys"],
            dir.path(),
            self.spec.timeout,
        );
        Ok((outcome, start.elapsed()))
    }
}

fn outcome_failure(outcome: ToolOutcome, timeout: Duration) -> MetricResult {
    match outcome {
        ToolOutcome::Missing(m) => {
            MetricResult::failure(MetricStatus::ToolError, format!("tool missing: {m}"))
        }
        ToolOutcome::SpawnFailed(m) => MetricResult::failure(MetricStatus::ToolError, m),
        ToolOutcome::TimedOut { output } => MetricResult::failure(
            MetricStatus::Timeout,
            format!("timed out after {:.1}s\n{output}", timeout.as_secs_f64()),
        ),
        ToolOutcome::Exited { output, .. } => {
            MetricResult::failure(MetricStatus::ToolError, output)
        }
    }
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// `true` when the design has an `assert` statement outside comments.
pub fn has_assertion(text: &str) -> bool {
    let masked = mask_comments_and_strings(text).text;
    // bound so the iterator borrowing `masked` drops first
    let found = words(&masked).any(|w| w.text == "assert");
    found
}

impl Labeler for YosysLabeler {
    fn spec(&self) -> &LabelerSpec {
        &self.spec
    }

    fn available(&self) -> Result<(), String> {
        program_available(&self.binary)
    }

    fn measure(&self, text: &str, _reference: Option<&str>) -> MetricResult {
        let timeout = self.spec.timeout;
        match self.mode {
            YosysMode::Syntax => match self.invoke(DESIGN_FILE, text) {
                Err(r) => r,
                Ok((ToolOutcome::Exited { success, output }, _)) => {
                    MetricResult::verdict(success, output)
                }
                Ok((other, _)) => outcome_failure(other, timeout),
            },
            YosysMode::AigNodes | YosysMode::AigAndGates => match self.invoke(DESIGN_FILE, text) {
                Err(r) => r,
                Ok((
                    ToolOutcome::Exited {
                        success: true,
                        output,
                    },
                    _,
                )) => {
                    let parsed = parse_stat(&output);
                    let value = match self.mode {
                        YosysMode::AigNodes => parsed.map(|s| s.cells),
                        _ => parsed.and_then(|s| s.and_gates.or(Some(0))),
                    };
                    match value {
                        Some(v) => MetricResult::ok(v as f64, output),
                        None => MetricResult::failure(MetricStatus::ParseError, output),
                    }
                }
                Ok((other, _)) => outcome_failure(other, timeout),
            },
            YosysMode::SatRuntime => {
                if !has_assertion(text) {
                    return MetricResult::failure(
                        MetricStatus::ToolError,
                        "precondition: design has no assertion",
                    );
                }
                let mut times = Vec::with_capacity(self.repetitions);
                let mut last = String::new();
                for _ in 0..self.repetitions {
                    match self.invoke(FORMAL_DESIGN_FILE, text) {
                        Err(r) => return r,
                        Ok((
                            ToolOutcome::Exited {
                                success: true,
                                output,
                            },
                            elapsed,
                        )) => {
                            times.push(elapsed.as_secs_f64());
                            last = output;
                        }
                        Ok((other, _)) => return outcome_failure(other, timeout),
                    }
                }
                match median(&mut times) {
                    Some(m) => MetricResult::ok(m, last),
                    None => MetricResult::failure(MetricStatus::ToolError, "no runs"),
                }
            }
        }
    }
}

/// Name of the first module declared in `text`.
pub fn first_module_name(text: &str) -> Option<String> {
    let masked = mask_comments_and_strings(text).text;
    let mut ws = words(&masked);
    while let Some(w) = ws.next() {
        if w.text == "module" {
            return ws.next().map(|n| n.text.to_string());
        }
    }
    None
}

/// Functional equivalence of a candidate against a reference via eqy.
pub struct EquivalenceLabeler {
    binary: PathBuf,
    spec: LabelerSpec,
}

impl EquivalenceLabeler {
    pub fn new(binary: PathBuf, timeout: Option<Duration>) -> Self {
        let spec = LabelerSpec {
            name: "equivalence".into(),
            kind: LabelerKind::Absolute,
            command_recipe: eqy_config("{top}"),
            timeout: timeout.unwrap_or(DEFAULT_LONG_TIMEOUT),
            needs_reference: true,
        };
        Self { binary, spec }
    }
}

/// Checks that both designs' first modules share name and port set.
pub fn interface_mismatch(candidate: &str, reference: &str) -> Option<String> {
    let (Some(a), Some(b)) = (first_module_name(candidate), first_module_name(reference)) else {
        return Some("no module found".into());
    };
    if a != b {
        return Some(format!("module names differ: {a} vs {b}"));
    }
    let mut pa = port_names(candidate);
    let mut pb = port_names(reference);
    pa.sort();
    pb.sort();
    (pa != pb).then(|| format!("ports differ: {pa:?} vs {pb:?}"))
}

impl Labeler for EquivalenceLabeler {
    fn spec(&self) -> &LabelerSpec {
        &self.spec
    }

    fn available(&self) -> Result<(), String> {
        program_available(&self.binary)
    }

    fn measure(&self, text: &str, reference: Option<&str>) -> MetricResult {
        let Some(reference) = reference else {
            return MetricResult::failure(MetricStatus::ToolError, "no reference design");
        };
        if let Some(reason) = interface_mismatch(text, reference) {
            return MetricResult::failure(
                MetricStatus::ToolError,
                format!("interface mismatch: {reason}"),
            );
        }
        let top = first_module_name(reference).expect("checked by interface_mismatch");
        let dir = match tempfile::tempdir() {
            Ok(d) => d,
            Err(e) => return MetricResult::failure(MetricStatus::ToolError, e.to_string()),
        };
        let written = fs::write(dir.path().join("gold.v"), reference)
            .and_then(|_| fs::write(dir.path().join("gate.v"), text))
            .and_then(|_| fs::write(dir.path().join("equiv.eqy"), eqy_config(&top)));
        if let Err(e) = written {
            return MetricResult::failure(MetricStatus::ToolError, e.to_string());
        }
        match run_tool(
            &self.binary,
            &["-f", "equiv.eqy"],
            dir.path(),
            self.spec.timeout,
        ) {
            ToolOutcome::Exited { success, output } => MetricResult::verdict(success, output),
            other => outcome_failure(other, self.spec.timeout),
        }
    }
}

/// Tool locations and limits shared by the adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolConfig {
    pub yosys: Option<PathBuf>,
    pub eqy: Option<PathBuf>,
    pub timeout_secs: Option<u64>,
    pub sat_repetitions: usize,
    pub max_processes: Option<usize>,
}

impl Default for ToolConfig {
    fn default() -> Self {
        Self {
            yosys: None,
            eqy: None,
            timeout_secs: None,
            sat_repetitions: DEFAULT_SAT_REPETITIONS,
            max_processes: None,
        }
    }
}

impl ToolConfig {
    fn timeout(&self) -> Option<Duration> {
        self.timeout_secs.map(Duration::from_secs)
    }

    fn yosys_binary(&self) -> PathBuf {
        self.yosys.clone().unwrap_or_else(|| PathBuf::from("yosys"))
    }

    fn eqy_binary(&self) -> PathBuf {
        self.eqy.clone().unwrap_or_else(|| PathBuf::from("eqy"))
    }

    /// The Yosys binary when it is configured or on `PATH`.
    pub fn yosys_available(&self) -> Option<PathBuf> {
        find_program(&self.yosys_binary())
    }

    pub fn eqy_available(&self) -> Option<PathBuf> {
        find_program(&self.eqy_binary())
    }
}

/// The corpus/augmentation syntax checker: Yosys when available, otherwise
/// the built-in structure check.
pub fn syntax_checker(tools: &ToolConfig) -> Box<dyn Labeler> {
    match tools.yosys_available() {
        Some(bin) => Box::new(YosysLabeler::new(YosysMode::Syntax, bin, tools.timeout())),
        None => Box::new(BuiltinSyntax::new()),
    }
}

/// Registered names: `syntax`, `builtin-syntax`, `yosys-syntax`,
/// `aig-nodes`, `aig-and`, `sat-runtime`, `equivalence`,
/// `keyword:<pattern>`, `length[:<threshold>]` (needs a vocabulary).
pub fn create_labeler(
    name: &str,
    tools: &ToolConfig,
    vocab: Option<&Vocab>,
) -> Result<Box<dyn Labeler>, LabelerError> {
    if let Some(max) = tools.max_processes {
        init_tool_slots(max);
    }
    let yosys = |mode| -> Box<dyn Labeler> {
        Box::new(
            YosysLabeler::new(mode, tools.yosys_binary(), tools.timeout())
                .with_repetitions(tools.sat_repetitions),
        )
    };
    if let Some(pattern) = name.strip_prefix("keyword:") {
        if pattern.is_empty() {
            return Err(LabelerError::Argument(
                "keyword labeler needs a pattern".into(),
            ));
        }
        return Ok(Box::new(KeywordLabeler::new(pattern)));
    }
    if name == "length" || name.starts_with("length:") {
        let threshold = match name.strip_prefix("length:") {
            Some(t) => Some(
                t.parse::<f64>()
                    .map_err(|e| LabelerError::Argument(format!("length threshold `{t}`: {e}")))?,
            ),
            None => None,
        };
        let vocab = vocab.ok_or_else(|| LabelerError::Unavailable {
            name: name.into(),
            reason: "needs a vocabulary".into(),
        })?;
        return Ok(Box::new(LengthLabeler::new(vocab.clone(), threshold)));
    }
    Ok(match name {
        "syntax" => syntax_checker(tools),
        "builtin-syntax" => Box::new(BuiltinSyntax::new()),
        "yosys-syntax" => yosys(YosysMode::Syntax),
        "aig-nodes" => yosys(YosysMode::AigNodes),
        "aig-and" => yosys(YosysMode::AigAndGates),
        "sat-runtime" => yosys(YosysMode::SatRuntime),
        "equivalence" => Box::new(EquivalenceLabeler::new(tools.eqy_binary(), tools.timeout())),
        other => return Err(LabelerError::Unknown(other.into())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::build_vocab;

    const D_LATCH: &str = "module d_latch (\n    input d,\n    input en,\n    output reg q\n);\n    always @(*) begin\n        if (en)\n            q <= d;\n    end\nendmodule\n";

    #[test]
    fn scripts_are_byte_exact() {
        assert_eq!(syntax_script(), "read_verilog design.v\nprep\n");
        assert_eq!(
            aig_script(),
            "read_verilog design.v\nhierarchy -auto-top\nproc; aigmap; stat\n"
        );
        assert_eq!(
            sat_script(),
            "read_verilog -formal -sv design.sv\nhierarchy -auto-top; proc; opt; sat -verify -seq 100 -tempinduct -prove-asserts\n"
        );
        assert_eq!(
            eqy_config("top"),
            "[gold]\nread_verilog gold.v\nprep -top top\n\n[gate]\nread_verilog gate.v\nprep -top top\n\n[strategy sby]\nuse sby\ndepth 10\nengine smtbmc\n"
        );
    }

    #[test]
    fn stat_parsing_classic_layout() {
        let out = "=== top ===\n\n   Number of wires:                 12\n   Number of cells:                 31\n     $_AND_                         19\n     $_NOT_                         12\n";
        assert_eq!(
            parse_stat(out),
            Some(StatCounts {
                cells: 31,
                and_gates: Some(19)
            })
        );
    }

    #[test]
    fn stat_parsing_new_layout_takes_last_block() {
        let out = "=== sub ===\n        5 cells\n        5   $_AND_\n=== top ===\n       40 cells\n       25   $_AND_\n       15   $_NOT_\n";
        assert_eq!(
            parse_stat(out),
            Some(StatCounts {
                cells: 40,
                and_gates: Some(25)
            })
        );
        assert_eq!(parse_stat("no statistics here"), None);
        assert_eq!(
            parse_stat("Number of cells: 3\n"),
            Some(StatCounts {
                cells: 3,
                and_gates: None
            })
        );
    }

    #[test]
    fn missing_binary_is_tool_error() {
        let l = YosysLabeler::new(
            YosysMode::Syntax,
            PathBuf::from("/nonexistent/yosys-binary"),
            None,
        );
        let r = l.measure(D_LATCH, None);
        assert_eq!(r.status, MetricStatus::ToolError);
        assert!(r.raw_output.contains("tool missing"));
        assert!(r.value.is_none());
        assert!(l.available().is_err());
        assert!(BuiltinSyntax::new().available().is_ok());
    }

    #[test]
    fn subprocess_exit_and_timeout() {
        let dir = tempfile::tempdir().unwrap();
        let sh = PathBuf::from("/bin/sh");
        match run_tool(
            &sh,
            &["-c", "echo hi; exit 3"],
            dir.path(),
            Duration::from_secs(10),
        ) {
            ToolOutcome::Exited { success, output } => {
                assert!(!success);
                assert_eq!(output.trim(), "hi");
            }
            other => panic!("{other:?}"),
        }
        let t = run_tool(
            &sh,
            &["-c", "sleep 5"],
            dir.path(),
            Duration::from_millis(100),
        );
        assert!(matches!(t, ToolOutcome::TimedOut { .. }));
    }

    #[test]
    fn sat_precondition() {
        let l = YosysLabeler::new(YosysMode::SatRuntime, PathBuf::from("/nonexistent/y"), None);
        let r = l.measure("module m; endmodule", None);
        assert_eq!(r.status, MetricStatus::ToolError);
        assert!(r.raw_output.contains("precondition"));
        assert!(has_assertion("module m; always @* assert(a); endmodule"));
        assert!(!has_assertion("module m; // assert(a)\nendmodule"));
    }

    #[test]
    fn median_lies_within_range() {
        let mut v = vec![3.0, 1.0, 2.0];
        assert_eq!(median(&mut v), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn builtin_syntax_labels() {
        let s = BuiltinSyntax::new();
        assert!(s.measure(D_LATCH, None).passed());
        let r = s.measure("module d_latch(input d);\n  assign q = d;\n", None);
        assert_eq!(r.status, MetricStatus::Ok);
        assert!(!r.passed());
    }

    #[test]
    fn keyword_labeler() {
        let k = KeywordLabeler::new("posedge");
        assert!(k
            .measure(
                "module r(input clk); always @(posedge clk) q <= d; endmodule",
                None
            )
            .passed());
        assert!(!k
            .measure("module r; /* posedge */ endmodule", None)
            .passed());
        assert_eq!(k.name(), "keyword:posedge");
    }

    #[test]
    fn length_labeler_counts_tokens() {
        let vocab = build_vocab(&["x"], 261).unwrap();
        let l = LengthLabeler::new(vocab, Some(5.0));
        assert_eq!(l.measure("0123456789", None).value, Some(10.0));
        assert_eq!(l.spec().kind, LabelerKind::Relative);
        assert_eq!(l.threshold(), Some(5.0));
    }

    #[test]
    fn equivalence_interface_checks() {
        let inv = "module f(input a, output y); assign y = ~a; endmodule";
        let buf = "module f(input a, output y); assign y = a; endmodule";
        let other = "module f(input a, input b, output y); assign y = a; endmodule";
        assert_eq!(interface_mismatch(inv, buf), None);
        assert!(interface_mismatch(inv, other).is_some());
        let e = EquivalenceLabeler::new(PathBuf::from("/nonexistent/eqy"), None);
        assert!(e
            .measure(inv, Some(other))
            .raw_output
            .contains("interface mismatch"));
        assert_eq!(e.measure(inv, None).status, MetricStatus::ToolError);
    }

    #[test]
    fn registry() {
        let tools = ToolConfig::default();
        for name in [
            "syntax",
            "builtin-syntax",
            "yosys-syntax",
            "aig-nodes",
            "aig-and",
            "sat-runtime",
            "equivalence",
            "keyword:assign",
        ] {
            assert!(create_labeler(name, &tools, None).is_ok(), "{name}");
        }
        assert!(matches!(
            create_labeler("nope", &tools, None),
            Err(LabelerError::Unknown(_))
        ));
        assert!(create_labeler("length", &tools, None).is_err());
        let vocab = build_vocab(&["x"], 261).unwrap();
        assert!(create_labeler("length:12", &tools, Some(&vocab)).is_ok());
        assert!(create_labeler("length:x", &tools, Some(&vocab)).is_err());
        assert!(create_labeler("keyword:", &tools, None).is_err());
    }

    #[test]
    fn semaphore_bounds_concurrency() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let sem = Semaphore::new(2);
        let active = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..6 {
                s.spawn(|| {
                    let _p = sem.acquire();
                    let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(10));
                    active.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
