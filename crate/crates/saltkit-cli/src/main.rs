//! Command-line front end: listing ingestion, tree lifting, the
//! LLM-backed decompilation pipeline, candidate scoring, and training
//! pair construction.
//!
//! Exit codes: 0 on success, 1 when the requested operation fails at
//! runtime, 2 on usage or configuration errors.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use saltkit::cfg::build_cfg;
use saltkit::dataset::{build_pairs, write_pairs_ldjson};
use saltkit::eval::{aggregate, report_table, run_cases, EvalCase};
use saltkit::ingest::{function_to_json, parse_listing, Function};
use saltkit::loops::{detect_loops, forest_to_json};
use saltkit::normalize::normalize;
use saltkit::pipeline::{
    replay_transcript, run_pipeline, DecompileRecord, HttpChatClient, Status,
};
use saltkit::salt::{
    construct_salt, parse_salt, render_prompt, serialize_salt, Salt, DEFAULT_TOKEN_BUDGET,
};

use config::Config;

#[derive(Parser)]
#[command(name = "saltkit", version, about = "Lift stripped binaries into logic trees and drive an LLM decompiler around them")]
struct Cli {
    /// TOML configuration file (default: ./saltkit.toml when present).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Emit machine-readable JSON where a table would be printed.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum InputFormat {
    /// A disassembly listing.
    #[default]
    Listing,
    /// A serialized logic tree.
    Salt,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse a disassembly listing into canonical function JSON.
    Ingest {
        /// Listing file to parse.
        #[arg(long)]
        input: PathBuf,
        /// Output path (default: stdout), one JSON line per function.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Restrict output to one function by name.
        #[arg(long)]
        function: Option<String>,
        /// Also write the selected function's flow graph as DOT.
        #[arg(long)]
        emit_cfg_dot: Option<PathBuf>,
        /// Also write the selected function's loop forest as JSON.
        #[arg(long)]
        emit_loops_json: Option<PathBuf>,
    },
    /// Lift one function from a listing into its serialized logic tree.
    Salt {
        /// Listing file to lift.
        #[arg(long)]
        input: PathBuf,
        /// Function name (default: the largest function).
        #[arg(long)]
        function: Option<String>,
        /// Output path (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Emit the full decompilation prompt instead of the bare tree.
        #[arg(long)]
        prompt: bool,
        /// Reject output whose prompt exceeds this token estimate.
        #[arg(long, default_value_t = DEFAULT_TOKEN_BUDGET)]
        token_budget: usize,
        /// Also write the flow graph as DOT.
        #[arg(long)]
        emit_cfg_dot: Option<PathBuf>,
        /// Also write the loop forest as JSON.
        #[arg(long)]
        emit_loops_json: Option<PathBuf>,
    },
    /// Run the decompile-and-fix pipeline against the configured endpoint.
    Decompile {
        /// Input file: a listing or a serialized tree (see --format).
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        format: InputFormat,
        /// Function name (listings only; default: the largest function).
        #[arg(long)]
        function: Option<String>,
        /// Where to write the full record JSON (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TOKEN_BUDGET)]
        token_budget: usize,
    },
    /// Re-run a stored record's transcript offline; verifies that the
    /// final candidate reproduces byte for byte.
    Replay {
        /// Record JSON produced by `decompile`.
        #[arg(long)]
        record: PathBuf,
        /// Where to write the replayed record (default: nowhere).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TOKEN_BUDGET)]
        token_budget: usize,
    },
    /// Score decompiled candidates by compiling and running scaffolds.
    Eval {
        /// Case file: one JSON object per line with id, level,
        /// decompiled, scaffold, and optional timeout_secs.
        #[arg(long)]
        cases: PathBuf,
        /// Where to write the report JSON (default: stdout table).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker pool size.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Build (tree, source) training pairs from a directory of C files.
    Dataset {
        /// Directory of .c files, one function per file.
        #[arg(long)]
        corpus: PathBuf,
        /// Output path for the pair records, one JSON line each.
        #[arg(long)]
        out: PathBuf,
        /// Optimization levels to build (repeatable; default from config
        /// or O0..O3).
        #[arg(long = "opt-level")]
        opt_level: Vec<String>,
        /// Worker pool size.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Also write per-function filter decisions as JSON.
        #[arg(long)]
        decisions: Option<PathBuf>,
        /// Also write build failures as JSON.
        #[arg(long)]
        failures: Option<PathBuf>,
    },
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn usage(msg: impl Into<String>) -> CliError {
        CliError::Usage(msg.into())
    }
    fn runtime(msg: impl std::fmt::Display) -> CliError {
        CliError::Runtime(msg.to_string())
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
    }
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| if text.ends_with('\n') { Ok(()) } else { stdout.write_all(b"\n") })
                .map_err(|e| {
                    // A downstream reader (`head`, a closed pager) hanging up
                    // is normal usage, not an error worth reporting.
                    if e.kind() == std::io::ErrorKind::BrokenPipe {
                        std::process::exit(0);
                    }
                    CliError::runtime(e)
                })
        }
    }
}

/// Pick a function from a listing: by name when given, otherwise the
/// one with the most instructions (ties to the lowest entry), matching
/// the dataset builder's rule for stripped objects.
fn select_function(
    functions: Vec<Function>,
    name: Option<&str>,
) -> Result<Function, CliError> {
    if functions.is_empty() {
        return Err(CliError::runtime("listing contains no functions"));
    }
    match name {
        Some(n) => {
            let names: Vec<String> = functions.iter().map(|f| f.name.clone()).collect();
            functions.into_iter().find(|f| f.name == n).ok_or_else(|| {
                CliError::usage(format!("no function {n:?}; listing has {names:?}"))
            })
        }
        None => Ok(functions
            .into_iter()
            .max_by_key(|f| (f.instructions.len(), std::cmp::Reverse(f.entry)))
            .expect("nonempty")),
    }
}

struct Lifted {
    function: Function,
    salt: Salt,
    dot: String,
    loops_json: String,
}

/// Listing text -> selected function -> normalized tree plus the side
/// artifacts (graph DOT, forest JSON).
fn lift(text: &str, name: Option<&str>) -> Result<Lifted, CliError> {
    let listing = parse_listing(text).map_err(CliError::runtime)?;
    let function = select_function(listing.functions, name)?;
    let nf = normalize(function.clone(), &listing.data);
    let g = build_cfg(&nf.base).map_err(CliError::runtime)?;
    let forest = detect_loops(&g);
    let salt = construct_salt(&g, &forest, &nf);
    Ok(Lifted {
        function,
        dot: g.to_dot(&nf.base),
        loops_json: forest_to_json(&forest, &g).to_string(),
        salt,
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = Config::load(cli.config.as_deref()).map_err(CliError::Usage)?;
    match cli.command {
        Cmd::Ingest {
            input,
            out,
            function,
            emit_cfg_dot,
            emit_loops_json,
        } => {
            let text = read_file(&input)?;
            let listing = parse_listing(&text).map_err(CliError::runtime)?;
            let mut lines = String::new();
            for f in &listing.functions {
                if function.as_deref().is_none_or(|n| n == f.name) {
                    lines.push_str(&function_to_json(f));
                    lines.push('\n');
                }
            }
            if lines.is_empty() {
                return Err(CliError::usage("no matching function in listing"));
            }
            if emit_cfg_dot.is_some() || emit_loops_json.is_some() {
                let lifted = lift(&text, function.as_deref())?;
                if let Some(path) = emit_cfg_dot {
                    write_output(Some(&path), &lifted.dot)?;
                }
                if let Some(path) = emit_loops_json {
                    write_output(Some(&path), &lifted.loops_json)?;
                }
            }
            write_output(out.as_deref(), &lines)
        }
        Cmd::Salt {
            input,
            function,
            out,
            prompt,
            token_budget,
            emit_cfg_dot,
            emit_loops_json,
        } => {
            let text = read_file(&input)?;
            let lifted = lift(&text, function.as_deref())?;
            if let Some(path) = emit_cfg_dot {
                write_output(Some(&path), &lifted.dot)?;
            }
            if let Some(path) = emit_loops_json {
                write_output(Some(&path), &lifted.loops_json)?;
            }
            let rendered = render_prompt(&lifted.salt, token_budget).map_err(CliError::runtime)?;
            let body = if prompt {
                rendered
            } else {
                serialize_salt(&lifted.salt)
            };
            write_output(out.as_deref(), &body)
        }
        Cmd::Decompile {
            input,
            format,
            function,
            out,
            token_budget,
        } => {
            let endpoint = cfg.endpoint().ok_or_else(|| {
                CliError::usage(
                    "no endpoint configured: add an [endpoint] section or set SALTKIT_ENDPOINT",
                )
            })?;
            let client = HttpChatClient::new(endpoint).map_err(CliError::runtime)?;
            let prompts = cfg.prompts().map_err(CliError::Usage)?;
            let compiler = cfg.compiler();
            let text = read_file(&input)?;
            let (id, salt) = match format {
                InputFormat::Listing => {
                    let lifted = lift(&text, function.as_deref())?;
                    (lifted.function.name.clone(), lifted.salt)
                }
                InputFormat::Salt => {
                    let id = function.unwrap_or_else(|| {
                        input
                            .file_stem()
                            .map(|s| s.to_string_lossy().into_owned())
                            .unwrap_or_else(|| "function".into())
                    });
                    (id, parse_salt(&text).map_err(CliError::runtime)?)
                }
            };
            let record = run_pipeline(&salt, &id, &client, &prompts, &compiler, token_budget)
                .map_err(CliError::runtime)?;
            let body = serde_json::to_string_pretty(&record).map_err(CliError::runtime)?;
            write_output(out.as_deref(), &body)?;
            match &record.status {
                Status::Failed(msg) => Err(CliError::runtime(format!(
                    "pipeline did not produce a candidate: {msg}"
                ))),
                _ => Ok(()),
            }
        }
        Cmd::Replay {
            record,
            out,
            token_budget,
        } => {
            let text = read_file(&record)?;
            let stored: DecompileRecord =
                serde_json::from_str(&text).map_err(|e| {
                    CliError::usage(format!("cannot parse {}: {e}", record.display()))
                })?;
            let prompts = cfg.prompts().map_err(CliError::Usage)?;
            let replayed = replay_transcript(&stored, &prompts, &cfg.compiler(), token_budget)
                .map_err(CliError::runtime)?;
            if let Some(path) = out {
                let body = serde_json::to_string_pretty(&replayed).map_err(CliError::runtime)?;
                write_output(Some(&path), &body)?;
            }
            if replayed.candidate == stored.candidate && replayed.status == stored.status {
                write_output(None, "replay reproduced the stored candidate")?;
                Ok(())
            } else {
                Err(CliError::runtime(format!(
                    "replay diverged: status {:?} vs {:?}",
                    replayed.status, stored.status
                )))
            }
        }
        Cmd::Eval { cases, out, jobs } => {
            let text = read_file(&cases)?;
            let parsed: Vec<EvalCase> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<Result<_, _>>()
                .map_err(|e| CliError::usage(format!("cannot parse {}: {e}", cases.display())))?;
            let results = run_cases(&parsed, &cfg.compiler(), jobs);
            let mut rows = Vec::with_capacity(results.len());
            for (case, result) in parsed.iter().zip(results) {
                rows.push(result.map_err(|e| {
                    CliError::runtime(format!("case {}: {e}", case.id))
                })?);
            }
            let report = aggregate(&rows).map_err(CliError::runtime)?;
            let body = if cli.json || out.is_some() {
                serde_json::to_string_pretty(&report).map_err(CliError::runtime)?
            } else {
                report_table(&report)
            };
            write_output(out.as_deref(), &body)
        }
        Cmd::Dataset {
            corpus,
            out,
            opt_level,
            jobs,
            decisions,
            failures,
        } => {
            let recipe = cfg.recipe(&opt_level).map_err(CliError::Usage)?;
            let policy = cfg.policy();
            let mut entries: Vec<(String, String)> = Vec::new();
            let dir = std::fs::read_dir(&corpus).map_err(|e| {
                CliError::usage(format!("cannot read {}: {e}", corpus.display()))
            })?;
            let mut files: Vec<PathBuf> = dir
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "c"))
                .collect();
            files.sort();
            for path in files {
                let id = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                entries.push((id, read_file(&path)?));
            }
            let output =
                build_pairs(&entries, &recipe, &policy, jobs).map_err(CliError::runtime)?;
            let mut bytes = Vec::new();
            write_pairs_ldjson(&mut bytes, &output.pairs).map_err(CliError::runtime)?;
            std::fs::write(&out, &bytes)
                .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", out.display())))?;
            if let Some(path) = decisions {
                let body =
                    serde_json::to_string_pretty(&output.decisions).map_err(CliError::runtime)?;
                write_output(Some(&path), &body)?;
            }
            if let Some(path) = failures {
                let body =
                    serde_json::to_string_pretty(&output.failures).map_err(CliError::runtime)?;
                write_output(Some(&path), &body)?;
            }
            let kept = output
                .decisions
                .iter()
                .filter(|(_, d)| d.keep)
                .count();
            eprintln!(
                "{} pairs from {} kept functions ({} candidates, {} failures)",
                output.pairs.len(),
                kept,
                entries.len(),
                output.failures.len()
            );
            Ok(())
        }
    }
}
