//! Dataset curation: size/loop filters over corpus functions, source
//! preprocessing (comment stripping, `inline` removal, deterministic
//! variable renaming), and the build loop that compiles each kept
//! function at several optimization levels, disassembles it, and emits
//! (logic-tree, source) training pairs as line-delimited JSON.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::process::{Command, Stdio};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cfg::build_cfg;
use crate::eval::OptLevel;
use crate::ingest::{parse_listing, parse_objdump_section_contents, DataImage, Function, Section};
use crate::loops::detect_loops;
use crate::normalize::normalize;
use crate::pipeline::CompilerCfg;
use crate::salt::{construct_salt, render_prompt, serialize_salt, DEFAULT_TOKEN_BUDGET};

/// Thresholds for keeping a corpus function.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterPolicy {
    /// Minimum body lines: nonblank lines excluding the first nonblank
    /// line and lines that are only braces.
    pub min_nonblank_lines: usize,
    /// Maximum total lines, counted verbatim.
    pub max_lines: usize,
    /// A function is kept outright when `loop_lines_per_loop * loops`
    /// exceeds its total line count.
    pub loop_lines_per_loop: usize,
    /// Probability of keeping a function that fails the loop-density
    /// rule.
    pub loop_free_retention: f64,
    /// Seed for the retention draw, making runs reproducible.
    pub seed: u64,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        FilterPolicy {
            min_nonblank_lines: 5,
            max_lines: 500,
            loop_lines_per_loop: 200,
            loop_free_retention: 0.20,
            seed: 0,
        }
    }
}

/// Why a function was kept or dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterReason {
    /// Too few body lines.
    MinLines,
    /// Too many total lines.
    MaxLines,
    /// Kept because loops dominate the line count.
    LoopRatio,
    /// Failed the loop-density rule but survived the retention draw.
    RetainedLoopFree,
    /// Failed the loop-density rule and lost the retention draw.
    DroppedLoopFree,
}

/// Outcome of filtering one function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub keep: bool,
    pub reason: FilterReason,
    pub loops: usize,
    pub lines: usize,
}

fn is_lone_brace(line: &str) -> bool {
    let t = line.trim();
    let t = t.strip_suffix(';').unwrap_or(t);
    !t.is_empty() && t.chars().all(|c| c == '{' || c == '}')
}

/// Apply the size and loop-density rules to one function. Functions that
/// fail the density rule are kept with probability
/// [`FilterPolicy::loop_free_retention`] using the caller's generator,
/// so a fixed seed reproduces the same subset.
pub fn filter_function(
    source: &str,
    policy: &FilterPolicy,
    rng: &mut impl Rng,
) -> FilterDecision {
    let total_lines = source.lines().count();
    let loops = count_loops(source);
    let mut body_lines = 0usize;
    let mut seen_first = false;
    for line in source.lines() {
        if line.trim().is_empty() {
            continue;
        }
        if !seen_first {
            seen_first = true;
            continue;
        }
        if is_lone_brace(line) {
            continue;
        }
        body_lines += 1;
    }
    let decision = |keep, reason| FilterDecision {
        keep,
        reason,
        loops,
        lines: total_lines,
    };
    if body_lines < policy.min_nonblank_lines {
        return decision(false, FilterReason::MinLines);
    }
    if total_lines > policy.max_lines {
        return decision(false, FilterReason::MaxLines);
    }
    if policy.loop_lines_per_loop * loops > total_lines {
        return decision(true, FilterReason::LoopRatio);
    }
    if rng.gen::<f64>() < policy.loop_free_retention {
        decision(true, FilterReason::RetainedLoopFree)
    } else {
        decision(false, FilterReason::DroppedLoopFree)
    }
}

/// Count `for`/`while`/`do` keywords outside comments and string or
/// character literals. A `do … while` loop contributes two counts; the
/// density rule only needs a monotone proxy, not an exact parse.
pub fn count_loops(source: &str) -> usize {
    let mut n = 0;
    scan_code_words(source, |_, word, _| {
        if word == "for" || word == "while" || word == "do" {
            n += 1;
        }
    });
    n
}

/// Walk identifier-shaped words in code regions (outside comments and
/// literals), reporting each word's byte offset and the next non-space
/// byte after it.
fn scan_code_words(src: &str, mut f: impl FnMut(usize, &str, Option<u8>)) {
    #[derive(PartialEq)]
    enum S {
        Code,
        LineComment,
        BlockComment,
        Str,
        Char,
    }
    let bytes = src.as_bytes();
    let mut state = S::Code;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        match state {
            S::Code => {
                if b == b'/' && bytes.get(i + 1) == Some(&b'/') {
                    state = S::LineComment;
                    i += 2;
                } else if b == b'/' && bytes.get(i + 1) == Some(&b'*') {
                    state = S::BlockComment;
                    i += 2;
                } else if b == b'"' {
                    state = S::Str;
                    i += 1;
                } else if b == b'\'' {
                    state = S::Char;
                    i += 1;
                } else if b.is_ascii_alphabetic() || b == b'_' {
                    let start = i;
                    while i < bytes.len()
                        && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_')
                    {
                        i += 1;
                    }
                    let mut j = i;
                    while j < bytes.len() && bytes[j].is_ascii_whitespace() {
                        j += 1;
                    }
                    f(start, &src[start..i], bytes.get(j).copied());
                } else {
                    i += 1;
                }
            }
            S::LineComment => {
                if b == b'\n' {
                    state = S::Code;
                }
                i += 1;
            }
            S::BlockComment => {
                if b == b'*' && bytes.get(i + 1) == Some(&b'/') {
                    state = S::Code;
                    i += 2;
                } else {
                    i += 1;
                }
            }
            S::Str | S::Char => {
                if b == b'\\' && i + 1 < bytes.len() {
                    i += 2;
                } else {
                    if (state == S::Str && b == b'"') || (state == S::Char && b == b'\'') {
                        state = S::Code;
                    }
                    i += 1;
                }
            }
        }
    }
}

fn comment_spans(src: &str) -> Vec<(usize, usize)> {
    #[derive(PartialEq)]
    enum S {
        Code,
        LineComment(usize),
        BlockComment(usize),
        Str,
        Char,
    }
    let bytes = src.as_bytes();
    let mut spans = Vec::new();
    let mut state = S::Code;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        match state {
            S::Code => {
                if b == b'/' && bytes.get(i + 1) == Some(&b'/') {
                    state = S::LineComment(i);
                    i += 2;
                } else if b == b'/' && bytes.get(i + 1) == Some(&b'*') {
                    state = S::BlockComment(i);
                    i += 2;
                } else {
                    if b == b'"' {
                        state = S::Str;
                    } else if b == b'\'' {
                        state = S::Char;
                    }
                    i += 1;
                }
            }
            S::LineComment(start) => {
                if b == b'\n' {
                    spans.push((start, i)); // newline survives
                    state = S::Code;
                }
                i += 1;
                if i == bytes.len() {
                    if let S::LineComment(start) = state {
                        spans.push((start, i));
                        state = S::Code;
                    }
                }
            }
            S::BlockComment(start) => {
                if b == b'*' && bytes.get(i + 1) == Some(&b'/') {
                    i += 2;
                    spans.push((start, i));
                    state = S::Code;
                } else {
                    i += 1;
                }
            }
            S::Str | S::Char => {
                if b == b'\\' && i + 1 < bytes.len() {
                    i += 2;
                } else {
                    if (state == S::Str && b == b'"') || (state == S::Char && b == b'\'') {
                        state = S::Code;
                    }
                    i += 1;
                }
            }
        }
    }
    if let S::BlockComment(start) = state {
        spans.push((start, bytes.len()));
    }
    spans
}

/// Remove comments, keeping newlines a block comment spanned so line
/// counts survive.
pub fn strip_comments(src: &str) -> String {
    let spans = comment_spans(src);
    let mut out = String::with_capacity(src.len());
    let mut cursor = 0;
    for (start, end) in spans {
        out.push_str(&src[cursor..start]);
        out.push(' ');
        for c in src[start..end].chars() {
            if c == '\n' {
                out.push('\n');
            }
        }
        cursor = end;
    }
    out.push_str(&src[cursor..]);
    out
}

const C_RESERVED: &[&str] = &[
    "auto", "break", "case", "char", "const", "continue", "default", "do", "double", "else",
    "enum", "extern", "float", "for", "goto", "if", "inline", "int", "long", "register",
    "restrict", "return", "short", "signed", "sizeof", "static", "struct", "switch", "typedef",
    "union", "unsigned", "void", "volatile", "while", "_Bool", "bool", "true", "false", "NULL",
    "size_t", "ssize_t", "ptrdiff_t", "intptr_t", "uintptr_t", "int8_t", "int16_t", "int32_t",
    "int64_t", "uint8_t", "uint16_t", "uint32_t", "uint64_t", "FILE", "va_list",
];

/// Remove standalone `inline` keywords so single-function translation
/// units still emit code when compiled alone.
pub fn strip_inline(src: &str) -> String {
    let mut cuts: Vec<(usize, usize)> = Vec::new();
    scan_code_words(src, |start, word, _| {
        if word == "inline" || word == "__inline" || word == "__inline__" {
            cuts.push((start, start + word.len()));
        }
    });
    let mut out = String::with_capacity(src.len());
    let mut cursor = 0;
    for (start, end) in cuts {
        out.push_str(&src[cursor..start]);
        cursor = end;
    }
    out.push_str(&src[cursor..]);
    out
}

/// Rename local identifiers to `var1`, `var2`, … in first-occurrence
/// order. Reserved words, tag names after `struct`/`union`/`enum`, goto
/// targets, anything immediately followed by `(` (calls and definitions)
/// or `:` (labels), and member names after `.`/`->` keep their spelling.
pub fn rename_variables(src: &str) -> String {
    let bytes = src.as_bytes();
    let mut names: BTreeMap<String, String> = BTreeMap::new();
    let mut order = 0usize;
    let mut edits: Vec<(usize, usize, String)> = Vec::new();
    let mut prev: Option<String> = None;
    scan_code_words(src, |start, word, next| {
        let prev_word = prev.replace(word.to_string());
        if C_RESERVED.contains(&word) {
            return;
        }
        if matches!(
            prev_word.as_deref(),
            Some("struct" | "union" | "enum" | "goto")
        ) {
            return;
        }
        if matches!(next, Some(b'(') | Some(b':')) {
            return;
        }
        let mut k = start;
        while k > 0 && bytes[k - 1].is_ascii_whitespace() {
            k -= 1;
        }
        if k > 0 && (bytes[k - 1] == b'.' || (k > 1 && bytes[k - 2] == b'-' && bytes[k - 1] == b'>'))
        {
            return;
        }
        let fresh = names.entry(word.to_string()).or_insert_with(|| {
            order += 1;
            format!("var{order}")
        });
        edits.push((start, start + word.len(), fresh.clone()));
    });
    let mut out = String::with_capacity(src.len());
    let mut cursor = 0;
    for (start, end, replacement) in edits {
        out.push_str(&src[cursor..start]);
        out.push_str(&replacement);
        cursor = end;
    }
    out.push_str(&src[cursor..]);
    out
}

/// How pairs get built: toolchain commands, levels, and the prompt
/// budget that prunes oversized results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildRecipe {
    #[serde(default)]
    pub compiler: CompilerCfg,
    #[serde(default = "all_levels")]
    pub opt_levels: Vec<OptLevel>,
    /// Strip symbols before disassembly, as a deployed binary would be.
    #[serde(default = "default_true")]
    pub strip: bool,
    #[serde(default = "default_strip_cmd")]
    pub strip_cmd: String,
    #[serde(default = "default_disassembler")]
    pub disassembler: String,
    /// External formatter command (argv), fed source on stdin. `None`
    /// keeps the source layout as written.
    #[serde(default)]
    pub formatter: Option<Vec<String>>,
    /// External renamer command (argv). `None` uses the built-in
    /// first-occurrence `varN` renamer.
    #[serde(default)]
    pub renamer: Option<Vec<String>>,
    #[serde(default = "default_budget")]
    pub token_budget: usize,
}

fn all_levels() -> Vec<OptLevel> {
    OptLevel::ALL.to_vec()
}

fn default_true() -> bool {
    true
}

fn default_strip_cmd() -> String {
    "strip".into()
}

fn default_disassembler() -> String {
    "objdump".into()
}

fn default_budget() -> usize {
    DEFAULT_TOKEN_BUDGET
}

impl Default for BuildRecipe {
    fn default() -> Self {
        BuildRecipe {
            compiler: CompilerCfg::default(),
            opt_levels: all_levels(),
            strip: true,
            strip_cmd: default_strip_cmd(),
            disassembler: default_disassembler(),
            formatter: None,
            renamer: None,
            token_budget: default_budget(),
        }
    }
}

/// One training pair, written as a line of JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub level: OptLevel,
    pub salt: String,
    pub source: String,
}

/// One build failure, kept alongside the pairs for audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailureRecord {
    pub id: String,
    pub level: Option<OptLevel>,
    pub stage: String,
    pub message: String,
}

/// Everything a build run produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildOutput {
    pub pairs: Vec<PairRecord>,
    pub failures: Vec<FailureRecord>,
    pub decisions: Vec<(String, FilterDecision)>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("tool {0:?} not found")]
    ToolNotFound(String),
    #[error("scratch environment failed: {0}")]
    Scratch(String),
}

fn probe_tool(command: &str, arg: &str) -> Result<(), DatasetError> {
    match Command::new(command)
        .arg(arg)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()
    {
        Ok(_) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(DatasetError::ToolNotFound(command.to_string()))
        }
        Err(e) => Err(DatasetError::Scratch(e.to_string())),
    }
}

fn pipe_through(argv: &[String], input: &str) -> Result<String, String> {
    let (cmd, args) = argv.split_first().ok_or("empty command")?;
    let mut child = Command::new(cmd)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| format!("{cmd}: {e}"))?;
    child
        .stdin
        .take()
        .ok_or("no stdin")?
        .write_all(input.as_bytes())
        .map_err(|e| e.to_string())?;
    let out = child.wait_with_output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "{cmd} exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    String::from_utf8(out.stdout).map_err(|e| e.to_string())
}

/// Comment stripping, `inline` removal, then formatting and renaming —
/// external tools when configured, built-ins otherwise.
pub fn preprocess_source(source: &str, recipe: &BuildRecipe) -> Result<String, (String, String)> {
    let mut text = strip_inline(&strip_comments(source));
    if let Some(fmt) = &recipe.formatter {
        text = pipe_through(fmt, &text).map_err(|e| ("formatter".to_string(), e))?;
    }
    text = match &recipe.renamer {
        Some(cmd) => pipe_through(cmd, &text).map_err(|e| ("renamer".to_string(), e))?,
        None => rename_variables(&text),
    };
    Ok(text)
}

/// Relocatable objects place every section at offset zero, so
/// overlapping data sections cannot coexist in one address image; keep
/// the largest data section and drop the rest (annotation stays
/// best-effort for object-file corpora).
fn data_image_from_sections(sections: Vec<Section>) -> DataImage {
    let mut data: Vec<Section> = sections
        .into_iter()
        .filter(|s| {
            !s.bytes.is_empty() && (s.name.starts_with(".rodata") || s.name.starts_with(".data"))
        })
        .collect();
    data.sort_by_key(|s| std::cmp::Reverse(s.bytes.len()));
    let mut kept: Vec<Section> = Vec::new();
    for s in data {
        let overlaps = kept
            .iter()
            .any(|k| s.start < k.start + k.bytes.len() as u64 && k.start < s.start + s.bytes.len() as u64);
        if !overlaps {
            kept.push(s);
        }
    }
    kept.sort_by_key(|s| s.start);
    DataImage { sections: kept }
}

fn run_tool(mut cmd: Command, stage: &str) -> Result<std::process::Output, (String, String)> {
    let out = cmd
        .output()
        .map_err(|e| (stage.to_string(), e.to_string()))?;
    if !out.status.success() {
        return Err((
            stage.to_string(),
            String::from_utf8_lossy(&out.stderr).into_owned(),
        ));
    }
    Ok(out)
}

fn build_one(
    id: &str,
    source: &str,
    level: OptLevel,
    recipe: &BuildRecipe,
) -> Result<PairRecord, (String, String)> {
    let dir = tempfile::tempdir().map_err(|e| ("scratch".to_string(), e.to_string()))?;
    std::fs::write(dir.path().join("src.c"), source)
        .map_err(|e| ("scratch".to_string(), e.to_string()))?;

    // Every tool runs inside the scratch directory on relative names so
    // that diagnostics and listings never mention the random path; failure
    // records then come out identical run to run.
    let mut compile = Command::new(&recipe.compiler.command);
    compile
        .args(&recipe.compiler.flags)
        .arg(level.flag())
        .arg("-c")
        .arg("src.c")
        .arg("-o")
        .arg("src.o")
        .current_dir(dir.path());
    run_tool(compile, "compile")?;

    if recipe.strip {
        let mut strip = Command::new(&recipe.strip_cmd);
        strip.arg("src.o").current_dir(dir.path());
        run_tool(strip, "strip")?;
    }

    let mut disasm = Command::new(&recipe.disassembler);
    disasm.arg("-d").arg("src.o").current_dir(dir.path());
    let listing_out = run_tool(disasm, "disassemble")?;
    let listing_text = String::from_utf8_lossy(&listing_out.stdout).into_owned();
    let listing = parse_listing(&listing_text).map_err(|e| ("parse".to_string(), e.to_string()))?;
    let function: Function = listing
        .functions
        .into_iter()
        .max_by_key(|f| (f.instructions.len(), std::cmp::Reverse(f.entry)))
        .ok_or_else(|| ("parse".to_string(), "no functions in listing".to_string()))?;

    let mut contents = Command::new(&recipe.disassembler);
    contents.arg("-s").arg("src.o").current_dir(dir.path());
    let data = run_tool(contents, "contents")
        .ok()
        .and_then(|out| {
            parse_objdump_section_contents(&String::from_utf8_lossy(&out.stdout)).ok()
        })
        .map(|img| data_image_from_sections(img.sections))
        .unwrap_or_default();

    let normalized = normalize(function, &data);
    let g = build_cfg(&normalized.base).map_err(|e| ("cfg".to_string(), e.to_string()))?;
    let forest = detect_loops(&g);
    let salt = construct_salt(&g, &forest, &normalized);
    render_prompt(&salt, recipe.token_budget)
        .map_err(|e| ("token-budget".to_string(), e.to_string()))?;

    Ok(PairRecord {
        id: id.to_string(),
        level,
        salt: serialize_salt(&salt),
        source: source.to_string(),
    })
}

/// Filter the corpus, preprocess survivors, and build one pair per
/// (function, level) on a fixed-size worker pool. Output order is the
/// corpus order crossed with the recipe's level order, independent of
/// worker count.
pub fn build_pairs(
    corpus: &[(String, String)],
    recipe: &BuildRecipe,
    policy: &FilterPolicy,
    jobs: usize,
) -> Result<BuildOutput, DatasetError> {
    use rayon::prelude::*;

    if corpus.is_empty() {
        return Err(DatasetError::EmptyCorpus);
    }
    probe_tool(&recipe.compiler.command, "--version")?;
    probe_tool(&recipe.disassembler, "--version")?;
    if recipe.strip {
        probe_tool(&recipe.strip_cmd, "--version")?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let mut decisions = Vec::with_capacity(corpus.len());
    let mut failures = Vec::new();
    let mut tasks: Vec<(String, String)> = Vec::new();
    for (id, source) in corpus {
        let decision = filter_function(source, policy, &mut rng);
        decisions.push((id.clone(), decision));
        if !decision.keep {
            continue;
        }
        match preprocess_source(source, recipe) {
            Ok(pre) => tasks.push((id.clone(), pre)),
            Err((stage, message)) => failures.push(FailureRecord {
                id: id.clone(),
                level: None,
                stage,
                message,
            }),
        }
    }

    let jobs_list: Vec<(&(String, String), OptLevel)> = tasks
        .iter()
        .flat_map(|t| recipe.opt_levels.iter().map(move |&l| (t, l)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| DatasetError::Scratch(e.to_string()))?;
    let results: Vec<Result<PairRecord, FailureRecord>> = pool.install(|| {
        jobs_list
            .par_iter()
            .map(|((id, pre), level)| {
                build_one(id, pre, *level, recipe).map_err(|(stage, message)| FailureRecord {
                    id: id.clone(),
                    level: Some(*level),
                    stage,
                    message,
                })
            })
            .collect()
    });
    let mut pairs = Vec::new();
    for r in results {
        match r {
            Ok(p) => pairs.push(p),
            Err(f) => failures.push(f),
        }
    }
    Ok(BuildOutput {
        pairs,
        failures,
        decisions,
    })
}

/// Write pairs as line-delimited JSON.
pub fn write_pairs_ldjson(
    out: &mut impl std::io::Write,
    pairs: &[PairRecord],
) -> std::io::Result<()> {
    for p in pairs {
        serde_json::to_writer(&mut *out, p)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Read pairs back from line-delimited JSON, skipping blank lines.
pub fn read_pairs_ldjson(text: &str) -> Result<Vec<PairRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
