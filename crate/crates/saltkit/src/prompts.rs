//! The five prompt templates the pipeline speaks with, and placeholder
//! binding. Templates are fixed text shipped with the crate (overridable
//! from a directory); rendering is pure substitution — no formatting
//! logic lives here, so the wording stays byte-stable.

use std::fmt;
use std::path::Path;

use thiserror::Error;

/// What each template asks of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptRole {
    /// SALT in, C source out.
    Decompile,
    /// Compilation-error fixer.
    Cef,
    /// Boundary-error fixer.
    Bef,
    /// Variable renaming.
    Rename,
    /// Comment insertion.
    Comment,
}

impl PromptRole {
    pub const ALL: [PromptRole; 5] = [
        PromptRole::Decompile,
        PromptRole::Cef,
        PromptRole::Bef,
        PromptRole::Rename,
        PromptRole::Comment,
    ];

    /// Stable file-name stem for the role.
    pub fn stem(self) -> &'static str {
        match self {
            PromptRole::Decompile => "decompile",
            PromptRole::Cef => "cef",
            PromptRole::Bef => "bef",
            PromptRole::Rename => "rename",
            PromptRole::Comment => "comment",
        }
    }

    fn index(self) -> usize {
        match self {
            PromptRole::Decompile => 0,
            PromptRole::Cef => 1,
            PromptRole::Bef => 2,
            PromptRole::Rename => 3,
            PromptRole::Comment => 4,
        }
    }
}

impl fmt::Display for PromptRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.stem())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    /// The template names a placeholder the caller did not bind.
    #[error("placeholder {{{0}}} is not bound")]
    UnboundPlaceholder(String),
}

/// One template per role.
#[derive(Debug, Clone)]
pub struct PromptSet {
    templates: [String; 5],
}

impl PromptSet {
    /// The templates compiled into the crate.
    pub fn embedded() -> PromptSet {
        PromptSet {
            templates: [
                include_str!("../resources/prompts/decompile.txt").to_string(),
                include_str!("../resources/prompts/cef.txt").to_string(),
                include_str!("../resources/prompts/bef.txt").to_string(),
                include_str!("../resources/prompts/rename.txt").to_string(),
                include_str!("../resources/prompts/comment.txt").to_string(),
            ],
        }
    }

    /// Load `{role}.txt` files from a directory, for deployments that
    /// need different wording.
    pub fn from_dir(dir: &Path) -> std::io::Result<PromptSet> {
        let mut templates: [String; 5] = Default::default();
        for role in PromptRole::ALL {
            templates[role.index()] =
                std::fs::read_to_string(dir.join(format!("{}.txt", role.stem())))?;
        }
        Ok(PromptSet { templates })
    }

    /// The raw template text for a role.
    pub fn template(&self, role: PromptRole) -> &str {
        &self.templates[role.index()]
    }

    /// Substitute `{name}` placeholders. Every placeholder in the
    /// template must be bound; bound values are inserted verbatim and
    /// never rescanned, so payloads containing braces are safe.
    pub fn render(
        &self,
        role: PromptRole,
        bindings: &[(&str, &str)],
    ) -> Result<String, PromptError> {
        let template = self.template(role);
        let mut out = String::with_capacity(template.len());
        let mut rest = template;
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            match placeholder_name(after) {
                Some(name) => {
                    let value = bindings
                        .iter()
                        .find(|(k, _)| *k == name)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| PromptError::UnboundPlaceholder(name.to_string()))?;
                    out.push_str(value);
                    rest = &after[name.len() + 1..];
                }
                None => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// `name}` prefix of a placeholder body, if the text after `{` starts one.
fn placeholder_name(after: &str) -> Option<&str> {
    let end = after.find('}')?;
    let name = &after[..end];
    let mut chars = name.chars();
    let first = chars.next()?;
    if !(first.is_ascii_alphabetic() || first == '_') {
        return None;
    }
    if chars.all(|c| c.is_ascii_alphanumeric() || c == '_') {
        Some(name)
    } else {
        None
    }
}

/// Crude but stable token estimate: one token per four bytes, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}
