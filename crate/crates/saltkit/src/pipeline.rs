//! The LLM-backed decompilation pipeline: prompt a chat endpoint with a
//! serialized logic tree, then walk the candidate through a bounded
//! compilation-fix loop, a one-shot boundary fixer, and symbol recovery.
//! Every prompt/response pair lands in the record's transcript so a run
//! can be audited or replayed offline.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::{estimate_tokens, PromptRole, PromptSet};
use crate::salt::{serialize_salt, Salt};

/// How many times the compilation-error fixer may iterate.
pub const CEF_MAX_ITERATIONS: u8 = 3;

/// Where and how to reach the chat-completion endpoint. The bearer token
/// is named by environment variable, never stored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LlmEndpoint {
    pub base_url: String,
    pub model: String,
    #[serde(default)]
    pub token_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
}

fn default_timeout() -> u64 {
    60
}

fn default_retries() -> u32 {
    2
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("endpoint unavailable: {0}")]
    EndpointUnavailable(String),
    #[error("request timed out")]
    Timeout,
    #[error("empty or malformed response")]
    EmptyResponse,
}

/// Anything that can answer one prompt with one completion.
pub trait ChatClient: Sync {
    fn complete(&self, prompt: &str) -> Result<String, TransportError>;
}

/// Real HTTP client speaking the chat-completion JSON shape:
/// request `{model, messages:[{role:"user", content}]}`, response
/// `choices[0].message.content`.
pub struct HttpChatClient {
    endpoint: LlmEndpoint,
    url: String,
    client: reqwest::blocking::Client,
}

impl HttpChatClient {
    pub fn new(endpoint: LlmEndpoint) -> Result<Self, TransportError> {
        let url = if endpoint.base_url.contains("/chat/completions") {
            endpoint.base_url.clone()
        } else {
            format!(
                "{}/v1/chat/completions",
                endpoint.base_url.trim_end_matches('/')
            )
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(endpoint.timeout_secs))
            .build()
            .map_err(|e| TransportError::EndpointUnavailable(e.to_string()))?;
        Ok(HttpChatClient {
            endpoint,
            url,
            client,
        })
    }

    fn token(&self) -> Option<String> {
        let var = self.endpoint.token_env.as_deref()?;
        std::env::var(var).ok().filter(|t| !t.is_empty())
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, prompt: &str) -> Result<String, TransportError> {
        let body = serde_json::json!({
            "model": self.endpoint.model,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut last: Option<TransportError> = None;
        for attempt in 0..=self.endpoint.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(200 * u64::from(attempt)));
            }
            let mut req = self.client.post(&self.url).json(&body);
            if let Some(tok) = self.token() {
                req = req.bearer_auth(tok);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let v: serde_json::Value =
                            resp.json().map_err(|_| TransportError::EmptyResponse)?;
                        let content = v["choices"][0]["message"]["content"]
                            .as_str()
                            .filter(|s| !s.is_empty())
                            .ok_or(TransportError::EmptyResponse)?;
                        return Ok(content.to_string());
                    }
                    if status.is_server_error() {
                        last = Some(TransportError::EndpointUnavailable(format!(
                            "http {status}"
                        )));
                        continue;
                    }
                    return Err(TransportError::EndpointUnavailable(format!(
                        "http {status}"
                    )));
                }
                Err(e) if e.is_timeout() => last = Some(TransportError::Timeout),
                Err(e) => last = Some(TransportError::EndpointUnavailable(e.to_string())),
            }
        }
        Err(last.unwrap_or(TransportError::EmptyResponse))
    }
}

/// Canned client for tests: answers prompts from a queue and records what
/// it was asked.
pub struct ScriptedClient {
    responses: Mutex<VecDeque<Result<String, TransportError>>>,
    prompts: Mutex<Vec<String>>,
}

impl ScriptedClient {
    pub fn new(responses: Vec<Result<String, TransportError>>) -> Self {
        ScriptedClient {
            responses: Mutex::new(responses.into()),
            prompts: Mutex::new(Vec::new()),
        }
    }

    /// Shorthand: every call returns the same text forever.
    pub fn repeating(text: &str) -> Self {
        ScriptedClient {
            responses: Mutex::new(VecDeque::new()),
            prompts: Mutex::new(vec![format!("\u{0}repeat:{text}")]),
        }
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts
            .lock()
            .unwrap()
            .iter()
            .filter(|p| !p.starts_with('\u{0}'))
            .cloned()
            .collect()
    }
}

impl ChatClient for ScriptedClient {
    fn complete(&self, prompt: &str) -> Result<String, TransportError> {
        let mut prompts = self.prompts.lock().unwrap();
        if let Some(repeat) = prompts
            .first()
            .and_then(|p| p.strip_prefix("\u{0}repeat:"))
            .map(str::to_string)
        {
            prompts.push(prompt.to_string());
            return Ok(repeat);
        }
        prompts.push(prompt.to_string());
        drop(prompts);
        self.responses
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or(Err(TransportError::EndpointUnavailable(
                "script exhausted".into(),
            )))
    }
}

/// Replays a recorded transcript in order; any prompt that diverges from
/// the recording is refused.
pub struct TranscriptClient {
    exchanges: Vec<Exchange>,
    next: Mutex<usize>,
}

impl TranscriptClient {
    pub fn new(exchanges: Vec<Exchange>) -> Self {
        TranscriptClient {
            exchanges,
            next: Mutex::new(0),
        }
    }
}

impl ChatClient for TranscriptClient {
    fn complete(&self, prompt: &str) -> Result<String, TransportError> {
        let mut next = self.next.lock().unwrap();
        let Some(e) = self.exchanges.get(*next) else {
            return Err(TransportError::EndpointUnavailable(
                "transcript exhausted".into(),
            ));
        };
        if e.prompt != prompt {
            return Err(TransportError::EndpointUnavailable(format!(
                "transcript divergence at exchange {}",
                *next
            )));
        }
        *next += 1;
        Ok(e.response.clone())
    }
}

/// One prompt/response pair, tagged with the role that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub role: String,
    pub prompt: String,
    pub response: String,
}

/// Result of one compile probe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompileOutcome {
    pub ok: bool,
    pub stderr: String,
}

/// Where a record stands in the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    /// Fresh from the decompilation prompt.
    Raw,
    /// Compiled on the first probe; the fix loop never ran.
    Compiled,
    /// The compilation fixer ran this many iterations (≤ 3).
    CefFixed(u8),
    /// Past the boundary fixer.
    BefFixed,
    /// Past renaming and comment insertion.
    SymbolsRecovered,
    /// The decompilation call itself failed; terminal.
    Failed(String),
}

impl Status {
    /// Stage ordering: raw < compiled/cef_fixed < bef_fixed <
    /// symbols_recovered. `Failed` is terminal and outside the order.
    pub fn rank(&self) -> Option<u8> {
        match self {
            Status::Raw => Some(0),
            Status::Compiled | Status::CefFixed(_) => Some(1),
            Status::BefFixed => Some(2),
            Status::SymbolsRecovered => Some(3),
            Status::Failed(_) => None,
        }
    }
}

/// Everything one function accumulates on its way through the pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecompileRecord {
    pub function_id: String,
    pub salt_text: String,
    pub candidate: String,
    pub status: Status,
    pub transcript: Vec<Exchange>,
    pub compiles: Vec<CompileOutcome>,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("compiler {0:?} not found")]
    CompilerNotFound(String),
    #[error("scratch environment failed: {0}")]
    Scratch(String),
    #[error("stage order violated: {0}")]
    StageOrder(&'static str),
    #[error("prompt estimated at {0} tokens exceeds the budget")]
    PromptTooLong(usize),
    #[error("stored salt text does not parse: {0}")]
    BadSalt(String),
}

/// Compiler invocation used for the fix-loop probes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompilerCfg {
    #[serde(default = "default_cc")]
    pub command: String,
    #[serde(default = "default_cc_flags")]
    pub flags: Vec<String>,
}

fn default_cc() -> String {
    "gcc".into()
}

fn default_cc_flags() -> Vec<String> {
    vec!["-w".into()]
}

impl Default for CompilerCfg {
    fn default() -> Self {
        CompilerCfg {
            command: default_cc(),
            flags: default_cc_flags(),
        }
    }
}

/// Probe whether `source` compiles as a lone translation unit.
pub fn check_compiles(cfg: &CompilerCfg, source: &str) -> Result<CompileOutcome, PipelineError> {
    let dir = tempfile::tempdir().map_err(|e| PipelineError::Scratch(e.to_string()))?;
    std::fs::write(dir.path().join("candidate.c"), source)
        .map_err(|e| PipelineError::Scratch(e.to_string()))?;
    // Relative paths keep scratch directory names out of stderr, so fix
    // prompts and stored transcripts replay byte-identically.
    let result = std::process::Command::new(&cfg.command)
        .args(&cfg.flags)
        .arg("-c")
        .arg("candidate.c")
        .arg("-o")
        .arg("candidate.o")
        .current_dir(dir.path())
        .output();
    match result {
        Ok(o) => Ok(CompileOutcome {
            ok: o.status.success(),
            stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
        }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(PipelineError::CompilerNotFound(cfg.command.clone()))
        }
        Err(e) => Err(PipelineError::Scratch(e.to_string())),
    }
}

/// Pull the code out of a model response: the first fenced block if there
/// is one, else the longest brace-balanced region (widened to its line
/// start so signatures survive), else the whole text.
pub fn extract_code(text: &str) -> String {
    if let Some(open) = text.find("```") {
        let after = &text[open + 3..];
        // Skip the info string (language tag) to the end of that line.
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
        let body = &after[body_start..];
        if let Some(close) = body.find("```") {
            return body[..close].trim().to_string();
        }
    }
    let bytes = text.as_bytes();
    let mut stack: Vec<usize> = Vec::new();
    let mut best: Option<(usize, usize)> = None;
    for (i, &b) in bytes.iter().enumerate() {
        match b {
            b'{' => stack.push(i),
            b'}' => {
                if let Some(start) = stack.pop() {
                    let better = match best {
                        Some((s, e)) => i - start > e - s,
                        None => true,
                    };
                    if better {
                        best = Some((start, i));
                    }
                }
            }
            _ => {}
        }
    }
    if let Some((start, end)) = best {
        let line_start = text[..start].rfind('\n').map(|i| i + 1).unwrap_or(0);
        return text[line_start..=end].trim().to_string();
    }
    text.trim().to_string()
}

/// Stage 1: render the decompilation prompt and ask for source. Transport
/// failures produce a terminal `Failed` record rather than an error; only
/// a prompt over the token budget refuses to run.
pub fn decompile(
    salt: &Salt,
    function_id: &str,
    client: &dyn ChatClient,
    prompts: &PromptSet,
    budget: usize,
) -> Result<DecompileRecord, PipelineError> {
    let salt_text = serialize_salt(salt);
    let prompt = prompts
        .render(PromptRole::Decompile, &[("SALT", &salt_text)])
        .expect("decompile template binds exactly {SALT}");
    let estimate = estimate_tokens(&prompt);
    if estimate > budget {
        return Err(PipelineError::PromptTooLong(estimate));
    }
    let mut rec = DecompileRecord {
        function_id: function_id.to_string(),
        salt_text,
        candidate: String::new(),
        status: Status::Raw,
        transcript: Vec::new(),
        compiles: Vec::new(),
    };
    match client.complete(&prompt) {
        Ok(response) => {
            rec.candidate = extract_code(&response);
            rec.transcript.push(Exchange {
                role: PromptRole::Decompile.stem().into(),
                prompt,
                response,
            });
        }
        Err(e) => rec.status = Status::Failed(e.to_string()),
    }
    Ok(rec)
}

/// Stage 2: the compilation-error fix loop. Probes the candidate, then
/// feeds stderr plus code back to the model for at most
/// [`CEF_MAX_ITERATIONS`] rounds, replacing the candidate each round.
/// The record advances whether or not the final candidate compiles;
/// transport errors end the loop early with the last candidate kept.
pub fn fix_compilation(
    mut rec: DecompileRecord,
    client: &dyn ChatClient,
    prompts: &PromptSet,
    compiler: &CompilerCfg,
) -> Result<DecompileRecord, PipelineError> {
    if rec.status != Status::Raw {
        return Err(PipelineError::StageOrder("fix_compilation needs a raw record"));
    }
    let first = check_compiles(compiler, &rec.candidate)?;
    let ok = first.ok;
    rec.compiles.push(first);
    if ok {
        rec.status = Status::Compiled;
        return Ok(rec);
    }
    for n in 1..=CEF_MAX_ITERATIONS {
        let errors = rec.compiles.last().unwrap().stderr.clone();
        let prompt = prompts
            .render(PromptRole::Cef, &[("errors", &errors), ("code", &rec.candidate)])
            .expect("cef template binds {errors} and {code}");
        let response = match client.complete(&prompt) {
            Ok(r) => r,
            Err(_) => {
                rec.status = Status::CefFixed(n - 1);
                return Ok(rec);
            }
        };
        rec.transcript.push(Exchange {
            role: PromptRole::Cef.stem().into(),
            prompt,
            response: response.clone(),
        });
        rec.candidate = extract_code(&response);
        let outcome = check_compiles(compiler, &rec.candidate)?;
        let ok = outcome.ok;
        rec.compiles.push(outcome);
        if ok {
            rec.status = Status::CefFixed(n);
            return Ok(rec);
        }
    }
    rec.status = Status::CefFixed(CEF_MAX_ITERATIONS);
    Ok(rec)
}

/// Stage 3: one-shot boundary-condition pass. The model's answer only
/// replaces the candidate when it still compiles; transport errors keep
/// the original.
pub fn fix_boundaries(
    mut rec: DecompileRecord,
    client: &dyn ChatClient,
    prompts: &PromptSet,
    compiler: &CompilerCfg,
) -> Result<DecompileRecord, PipelineError> {
    if rec.status.rank() != Some(1) {
        return Err(PipelineError::StageOrder("fix_boundaries needs a record past the fix loop"));
    }
    guarded_rewrite(&mut rec, PromptRole::Bef, client, prompts, compiler)?;
    rec.status = Status::BefFixed;
    Ok(rec)
}

/// Stage 4: symbol recovery — variable renaming, then comment insertion,
/// each compile-guarded exactly like the boundary pass.
pub fn recover_symbols(
    mut rec: DecompileRecord,
    client: &dyn ChatClient,
    prompts: &PromptSet,
    compiler: &CompilerCfg,
) -> Result<DecompileRecord, PipelineError> {
    if rec.status != Status::BefFixed {
        return Err(PipelineError::StageOrder("recover_symbols needs a boundary-fixed record"));
    }
    guarded_rewrite(&mut rec, PromptRole::Rename, client, prompts, compiler)?;
    guarded_rewrite(&mut rec, PromptRole::Comment, client, prompts, compiler)?;
    rec.status = Status::SymbolsRecovered;
    Ok(rec)
}

/// Ask `role` to rewrite the candidate; adopt the answer only when it
/// compiles.
fn guarded_rewrite(
    rec: &mut DecompileRecord,
    role: PromptRole,
    client: &dyn ChatClient,
    prompts: &PromptSet,
    compiler: &CompilerCfg,
) -> Result<(), PipelineError> {
    let prompt = prompts
        .render(role, &[("code", &rec.candidate)])
        .expect("rewrite templates bind {code}");
    let Ok(response) = client.complete(&prompt) else {
        return Ok(());
    };
    rec.transcript.push(Exchange {
        role: role.stem().into(),
        prompt,
        response: response.clone(),
    });
    let candidate = extract_code(&response);
    let outcome = check_compiles(compiler, &candidate)?;
    let ok = outcome.ok;
    rec.compiles.push(outcome);
    if ok {
        rec.candidate = candidate;
    }
    Ok(())
}

/// All four stages in order. A failed decompilation call short-circuits;
/// later stages always advance the status.
pub fn run_pipeline(
    salt: &Salt,
    function_id: &str,
    client: &dyn ChatClient,
    prompts: &PromptSet,
    compiler: &CompilerCfg,
    budget: usize,
) -> Result<DecompileRecord, PipelineError> {
    let rec = decompile(salt, function_id, client, prompts, budget)?;
    if matches!(rec.status, Status::Failed(_)) {
        return Ok(rec);
    }
    let rec = fix_compilation(rec, client, prompts, compiler)?;
    let rec = fix_boundaries(rec, client, prompts, compiler)?;
    recover_symbols(rec, client, prompts, compiler)
}

/// Run many functions through the pipeline on a fixed-size worker pool,
/// preserving input order in the output.
pub fn run_many(
    salts: &[(String, Salt)],
    client: &dyn ChatClient,
    prompts: &PromptSet,
    compiler: &CompilerCfg,
    budget: usize,
    jobs: usize,
) -> Vec<Result<DecompileRecord, PipelineError>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("worker pool");
    pool.install(|| {
        salts
            .par_iter()
            .map(|(id, salt)| run_pipeline(salt, id, client, prompts, compiler, budget))
            .collect()
    })
}

/// Re-run the pipeline against a record's stored transcript instead of a
/// live endpoint. With a deterministic compiler this reproduces the final
/// candidate byte for byte.
pub fn replay_transcript(
    record: &DecompileRecord,
    prompts: &PromptSet,
    compiler: &CompilerCfg,
    budget: usize,
) -> Result<DecompileRecord, PipelineError> {
    let salt = crate::salt::parse_salt(&record.salt_text)
        .map_err(|e| PipelineError::BadSalt(e.to_string()))?;
    let client = TranscriptClient::new(record.transcript.clone());
    run_pipeline(
        &salt,
        &record.function_id,
        &client,
        prompts,
        compiler,
        budget,
    )
}
