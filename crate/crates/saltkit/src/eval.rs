//! Behavioral evaluation of decompiled candidates. Each case pairs a
//! candidate translation unit with a test scaffold whose `assert` calls
//! are rewritten into counting checks; the harness compiles the pair,
//! runs the binary under a deadline, and reads the last progress line the
//! instrumentation printed. Aggregates report the rate of compilable
//! candidates (RC), the rate of fully passing candidates (RE), and the
//! mean per-case pass fraction (TCP).

use std::collections::BTreeMap;
use std::io::Read;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::CompilerCfg;

/// Optimization level the original binary was built at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OptLevel {
    O0,
    O1,
    O2,
    O3,
}

impl OptLevel {
    pub const ALL: [OptLevel; 4] = [OptLevel::O0, OptLevel::O1, OptLevel::O2, OptLevel::O3];

    /// The matching compiler flag, e.g. `-O2`.
    pub fn flag(self) -> &'static str {
        match self {
            OptLevel::O0 => "-O0",
            OptLevel::O1 => "-O1",
            OptLevel::O2 => "-O2",
            OptLevel::O3 => "-O3",
        }
    }
}

impl std::fmt::Display for OptLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptLevel::O0 => "O0",
            OptLevel::O1 => "O1",
            OptLevel::O2 => "O2",
            OptLevel::O3 => "O3",
        })
    }
}

impl std::str::FromStr for OptLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "O0" | "o0" | "0" | "-O0" => Ok(OptLevel::O0),
            "O1" | "o1" | "1" | "-O1" => Ok(OptLevel::O1),
            "O2" | "o2" | "2" | "-O2" => Ok(OptLevel::O2),
            "O3" | "o3" | "3" | "-O3" => Ok(OptLevel::O3),
            other => Err(format!("unknown optimization level {other:?}")),
        }
    }
}

/// One candidate plus the scaffold that exercises it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalCase {
    pub id: String,
    pub level: OptLevel,
    /// Decompiled candidate, compiled as its own translation unit.
    pub decompiled: String,
    /// Test scaffold with `assert(...)` calls and a `main`.
    pub scaffold: String,
    #[serde(default = "default_case_timeout")]
    pub timeout_secs: u64,
}

fn default_case_timeout() -> u64 {
    10
}

/// Outcome of one case.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseResult {
    pub id: String,
    pub level: OptLevel,
    pub compiled: bool,
    /// Clean exit and every check passed.
    pub all_passed: bool,
    pub passed: u32,
    pub total: u32,
}

impl CaseResult {
    /// Fraction of checks that passed (zero when the case has none).
    pub fn pass_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            f64::from(self.passed) / f64::from(self.total)
        }
    }
}

/// Mean rates over a set of case results.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    /// Rate of candidates that compiled.
    pub rc: f64,
    /// Rate of candidates whose every check passed.
    pub re: f64,
    /// Mean per-case pass fraction.
    pub tcp: f64,
}

/// Per-level and overall aggregates plus the raw case rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: Vec<CaseResult>,
    pub per_level: BTreeMap<OptLevel, Aggregate>,
    pub overall: Aggregate,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scaffold contains no assert calls")]
    NoAssertions,
    #[error("no cases to aggregate")]
    EmptyInput,
    #[error("sandbox failure: {0}")]
    SandboxFailure(String),
}

/// Scaffold source after instrumentation, with its static check count.
#[derive(Debug, Clone)]
pub struct Instrumented {
    pub source: String,
    pub total: u32,
}

const PRELUDE: &str = r#"#include <stdio.h>
#include <stdlib.h>
static int salt_passed_ = 0;
static int salt_total_ = 0;
static void salt_report_(void) {
    printf("SALT_RESULT passed=%d total=%d\n", salt_passed_, salt_total_);
    fflush(stdout);
}
static void salt_init_(void) __attribute__((constructor));
static void salt_init_(void) { atexit(salt_report_); }
#undef assert
#define CHECK(cond) do { \
    salt_total_ += 1; \
    if (cond) salt_passed_ += 1; \
    salt_report_(); \
} while (0)
"#;

/// Rewrite every `assert` call in the scaffold into a counting `CHECK`
/// that reports progress after each check, so a later crash cannot erase
/// the checks that already ran. Comments, string literals, and character
/// literals are left untouched.
pub fn instrument_scaffold(scaffold: &str) -> Result<Instrumented, EvalError> {
    #[derive(PartialEq)]
    enum S {
        Code,
        LineComment,
        BlockComment,
        Str,
        Char,
    }
    let bytes = scaffold.as_bytes();
    let mut out = String::with_capacity(scaffold.len() + PRELUDE.len());
    out.push_str(PRELUDE);
    let mut state = S::Code;
    let mut total: u32 = 0;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        match state {
            S::Code => {
                if b == b'/' && bytes.get(i + 1) == Some(&b'/') {
                    state = S::LineComment;
                    out.push_str("//");
                    i += 2;
                    continue;
                }
                if b == b'/' && bytes.get(i + 1) == Some(&b'*') {
                    state = S::BlockComment;
                    out.push_str("/*");
                    i += 2;
                    continue;
                }
                if b == b'"' {
                    state = S::Str;
                    out.push('"');
                    i += 1;
                    continue;
                }
                if b == b'\'' {
                    state = S::Char;
                    out.push('\'');
                    i += 1;
                    continue;
                }
                if b.is_ascii_alphabetic() || b == b'_' {
                    let start = i;
                    while i < bytes.len()
                        && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_')
                    {
                        i += 1;
                    }
                    let word = &scaffold[start..i];
                    if word == "assert" && next_nonspace(bytes, i) == Some(b'(') {
                        out.push_str("CHECK");
                        total += 1;
                    } else {
                        out.push_str(word);
                    }
                    continue;
                }
                out.push(b as char);
                i += 1;
            }
            S::LineComment => {
                out.push(b as char);
                if b == b'\n' {
                    state = S::Code;
                }
                i += 1;
            }
            S::BlockComment => {
                if b == b'*' && bytes.get(i + 1) == Some(&b'/') {
                    out.push_str("*/");
                    state = S::Code;
                    i += 2;
                } else {
                    out.push(b as char);
                    i += 1;
                }
            }
            S::Str | S::Char => {
                if b == b'\\' && i + 1 < bytes.len() {
                    out.push(b as char);
                    out.push(bytes[i + 1] as char);
                    i += 2;
                    continue;
                }
                let closes = if state == S::Str { b'"' } else { b'\'' };
                out.push(b as char);
                if b == closes {
                    state = S::Code;
                }
                i += 1;
            }
        }
    }
    if total == 0 {
        return Err(EvalError::NoAssertions);
    }
    Ok(Instrumented { source: out, total })
}

fn next_nonspace(bytes: &[u8], mut i: usize) -> Option<u8> {
    while i < bytes.len() {
        if !bytes[i].is_ascii_whitespace() {
            return Some(bytes[i]);
        }
        i += 1;
    }
    None
}

/// Compile the candidate with the instrumented scaffold and run the
/// binary under the case deadline. A compile failure scores zero checks;
/// a crash or timeout keeps whatever the last progress line reported but
/// can never count as fully passing.
pub fn run_case(case: &EvalCase, compiler: &CompilerCfg) -> Result<CaseResult, EvalError> {
    let instrumented = instrument_scaffold(&case.scaffold)?;
    let dir = tempfile::tempdir().map_err(|e| EvalError::SandboxFailure(e.to_string()))?;
    let dec = dir.path().join("dec.c");
    let scaf = dir.path().join("scaffold.c");
    let bin = dir.path().join("case_bin");
    std::fs::write(&dec, &case.decompiled).map_err(|e| EvalError::SandboxFailure(e.to_string()))?;
    std::fs::write(&scaf, &instrumented.source)
        .map_err(|e| EvalError::SandboxFailure(e.to_string()))?;

    let compile = std::process::Command::new(&compiler.command)
        .args(&compiler.flags)
        .arg(&dec)
        .arg(&scaf)
        .arg("-o")
        .arg(&bin)
        .arg("-lm")
        .output()
        .map_err(|e| EvalError::SandboxFailure(format!("{}: {e}", compiler.command)))?;
    if !compile.status.success() {
        return Ok(CaseResult {
            id: case.id.clone(),
            level: case.level,
            compiled: false,
            all_passed: false,
            passed: 0,
            total: instrumented.total,
        });
    }

    let stdout_path = dir.path().join("stdout.txt");
    let stdout_file = std::fs::File::create(&stdout_path)
        .map_err(|e| EvalError::SandboxFailure(e.to_string()))?;
    let mut child = std::process::Command::new(&bin)
        .stdin(std::process::Stdio::null())
        .stdout(stdout_file)
        .stderr(std::process::Stdio::null())
        .spawn()
        .map_err(|e| EvalError::SandboxFailure(e.to_string()))?;
    let deadline = Instant::now() + Duration::from_secs(case.timeout_secs.max(1));
    let status = loop {
        match child
            .try_wait()
            .map_err(|e| EvalError::SandboxFailure(e.to_string()))?
        {
            Some(status) => break Some(status),
            None if Instant::now() >= deadline => {
                let _ = child.kill();
                let _ = child.wait();
                break None;
            }
            None => std::thread::sleep(Duration::from_millis(10)),
        }
    };

    let mut stdout = String::new();
    std::fs::File::open(&stdout_path)
        .and_then(|mut f| f.read_to_string(&mut stdout))
        .map_err(|e| EvalError::SandboxFailure(e.to_string()))?;
    let passed = last_progress_line(&stdout).map(|(p, _)| p).unwrap_or(0);
    let passed = passed.min(instrumented.total);
    let clean_exit = status.map(|s| s.success()).unwrap_or(false);
    Ok(CaseResult {
        id: case.id.clone(),
        level: case.level,
        compiled: true,
        all_passed: clean_exit && passed == instrumented.total,
        passed,
        total: instrumented.total,
    })
}

/// Parse the last `SALT_RESULT passed=N total=M` line, if any.
fn last_progress_line(stdout: &str) -> Option<(u32, u32)> {
    stdout
        .lines()
        .rev()
        .find_map(|line| {
            let rest = line.trim().strip_prefix("SALT_RESULT ")?;
            let (p, t) = rest.split_once(' ')?;
            let p = p.strip_prefix("passed=")?.parse().ok()?;
            let t = t.strip_prefix("total=")?.parse().ok()?;
            Some((p, t))
        })
}

/// Run every case on a fixed-size worker pool, preserving input order.
pub fn run_cases(
    cases: &[EvalCase],
    compiler: &CompilerCfg,
    jobs: usize,
) -> Vec<Result<CaseResult, EvalError>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("worker pool");
    pool.install(|| cases.par_iter().map(|c| run_case(c, compiler)).collect())
}

fn mean_of(results: &[&CaseResult]) -> Aggregate {
    let n = results.len();
    let nf = n as f64;
    Aggregate {
        n,
        rc: results.iter().filter(|r| r.compiled).count() as f64 / nf,
        re: results.iter().filter(|r| r.all_passed).count() as f64 / nf,
        tcp: results.iter().map(|r| r.pass_fraction()).sum::<f64>() / nf,
    }
}

/// Fold case rows into per-level and overall rates.
pub fn aggregate(results: &[CaseResult]) -> Result<EvalReport, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut by_level: BTreeMap<OptLevel, Vec<&CaseResult>> = BTreeMap::new();
    for r in results {
        by_level.entry(r.level).or_default().push(r);
    }
    let per_level = by_level
        .into_iter()
        .map(|(level, rows)| (level, mean_of(&rows)))
        .collect();
    let overall = mean_of(&results.iter().collect::<Vec<_>>());
    Ok(EvalReport {
        cases: results.to_vec(),
        per_level,
        overall,
    })
}

/// Plain-text table: one row per level plus an overall row.
pub fn report_table(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<8} {:>6} {:>8} {:>8} {:>8}\n",
        "level", "n", "RC", "RE", "TCP"
    ));
    for (level, agg) in &report.per_level {
        out.push_str(&format!(
            "{:<8} {:>6} {:>8.4} {:>8.4} {:>8.4}\n",
            level.to_string(),
            agg.n,
            agg.rc,
            agg.re,
            agg.tcp
        ));
    }
    let a = &report.overall;
    out.push_str(&format!(
        "{:<8} {:>6} {:>8.4} {:>8.4} {:>8.4}\n",
        "ALL", a.n, a.rc, a.re, a.tcp
    ));
    out
}
