//! TOML configuration with environment overrides. Secrets never live in
//! the file: the endpoint section names the environment variable that
//! holds the bearer token, and the token itself is read at request time.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use saltkit::dataset::{BuildRecipe, FilterPolicy};
use saltkit::eval::OptLevel;
use saltkit::pipeline::{CompilerCfg, LlmEndpoint};
use saltkit::prompts::PromptSet;
use serde::Deserialize;

/// Whole configuration file. Every section and field is optional;
/// omitted values fall back to the library defaults.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub compiler: CompilerSection,
    #[serde(default)]
    pub endpoint: Option<EndpointSection>,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub filter: FilterSection,
    /// Directory of prompt template files overriding the embedded set.
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompilerSection {
    pub command: Option<String>,
    pub flags: Option<Vec<String>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointSection {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: Option<String>,
    pub timeout_secs: Option<u64>,
    pub max_retries: Option<u32>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub opt_levels: Option<Vec<String>>,
    pub strip: Option<bool>,
    pub strip_cmd: Option<String>,
    pub disassembler: Option<String>,
    pub formatter: Option<Vec<String>>,
    pub renamer: Option<Vec<String>>,
    pub token_budget: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    pub min_nonblank_lines: Option<usize>,
    pub max_lines: Option<usize>,
    pub loop_lines_per_loop: Option<usize>,
    pub loop_free_retention: Option<f64>,
    pub seed: Option<u64>,
}

fn env(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.is_empty())
}

impl Config {
    /// Load from `path`, or from `./saltkit.toml` when present, or the
    /// defaults. An explicitly named file must exist and parse.
    pub fn load(path: Option<&Path>) -> Result<Config, String> {
        let chosen: Option<PathBuf> = match path {
            Some(p) => Some(p.to_path_buf()),
            None => {
                let fallback = Path::new("saltkit.toml");
                fallback.exists().then(|| fallback.to_path_buf())
            }
        };
        let Some(file) = chosen else {
            return Ok(Config::default());
        };
        let text = std::fs::read_to_string(&file)
            .map_err(|e| format!("cannot read {}: {e}", file.display()))?;
        toml::from_str(&text).map_err(|e| format!("cannot parse {}: {e}", file.display()))
    }

    /// Compiler command and flags, `SALTKIT_COMPILER` overriding the
    /// command.
    pub fn compiler(&self) -> CompilerCfg {
        let mut cfg = CompilerCfg::default();
        if let Some(cmd) = &self.compiler.command {
            cfg.command = cmd.clone();
        }
        if let Some(flags) = &self.compiler.flags {
            cfg.flags = flags.clone();
        }
        if let Some(cmd) = env("SALTKIT_COMPILER") {
            cfg.command = cmd;
        }
        cfg
    }

    /// Chat endpoint, if configured. `SALTKIT_ENDPOINT`, `SALTKIT_MODEL`
    /// and `SALTKIT_TOKEN_ENV` override the file and can stand alone:
    /// setting `SALTKIT_ENDPOINT` without a file is enough.
    pub fn endpoint(&self) -> Option<LlmEndpoint> {
        let base_url = env("SALTKIT_ENDPOINT").or_else(|| {
            self.endpoint.as_ref().map(|e| e.base_url.clone())
        })?;
        let section = self.endpoint.as_ref();
        let model = env("SALTKIT_MODEL")
            .or_else(|| section.map(|e| e.model.clone()))
            .unwrap_or_else(|| "default".to_string());
        let token_env = env("SALTKIT_TOKEN_ENV").or_else(|| section.and_then(|e| e.token_env.clone()));
        let mut endpoint = LlmEndpoint {
            base_url,
            model,
            token_env,
            timeout_secs: 60,
            max_retries: 2,
        };
        if let Some(s) = section {
            if let Some(t) = s.timeout_secs {
                endpoint.timeout_secs = t;
            }
            if let Some(r) = s.max_retries {
                endpoint.max_retries = r;
            }
        }
        Some(endpoint)
    }

    /// Build recipe for the dataset pipeline; CLI `--opt-level` values,
    /// when given, replace the configured level list.
    pub fn recipe(&self, cli_levels: &[String]) -> Result<BuildRecipe, String> {
        let mut recipe = BuildRecipe {
            compiler: self.compiler(),
            ..BuildRecipe::default()
        };
        let named: Option<&Vec<String>> = if cli_levels.is_empty() {
            self.dataset.opt_levels.as_ref()
        } else {
            None
        };
        let levels: Vec<String> = if cli_levels.is_empty() {
            named.cloned().unwrap_or_default()
        } else {
            cli_levels.to_vec()
        };
        if !levels.is_empty() {
            recipe.opt_levels = levels
                .iter()
                .map(|s| OptLevel::from_str(s))
                .collect::<Result<Vec<_>, _>>()?;
        }
        if let Some(v) = self.dataset.strip {
            recipe.strip = v;
        }
        if let Some(v) = &self.dataset.strip_cmd {
            recipe.strip_cmd = v.clone();
        }
        if let Some(v) = &self.dataset.disassembler {
            recipe.disassembler = v.clone();
        }
        recipe.formatter = self.dataset.formatter.clone();
        recipe.renamer = self.dataset.renamer.clone();
        if let Some(v) = self.dataset.token_budget {
            recipe.token_budget = v;
        }
        Ok(recipe)
    }

    /// Corpus filter thresholds.
    pub fn policy(&self) -> FilterPolicy {
        let mut p = FilterPolicy::default();
        if let Some(v) = self.filter.min_nonblank_lines {
            p.min_nonblank_lines = v;
        }
        if let Some(v) = self.filter.max_lines {
            p.max_lines = v;
        }
        if let Some(v) = self.filter.loop_lines_per_loop {
            p.loop_lines_per_loop = v;
        }
        if let Some(v) = self.filter.loop_free_retention {
            p.loop_free_retention = v;
        }
        if let Some(v) = self.filter.seed {
            p.seed = v;
        }
        p
    }

    /// Prompt templates: a directory named by `SALTKIT_PROMPTS` or the
    /// config file, otherwise the embedded set.
    pub fn prompts(&self) -> Result<PromptSet, String> {
        let dir = env("SALTKIT_PROMPTS")
            .map(PathBuf::from)
            .or_else(|| self.prompts_dir.clone());
        match dir {
            Some(d) => PromptSet::from_dir(&d)
                .map_err(|e| format!("cannot load prompts from {}: {e}", d.display())),
            None => Ok(PromptSet::embedded()),
        }
    }
}
