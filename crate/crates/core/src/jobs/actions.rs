use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

/// Named command templates of an editor session.
///
/// Templates may reference `{main}` (the designated main file) and `{files}`
/// (every staged file, space separated). Other brace groups that look like
/// identifiers are rejected; anything else, such as `${HOME}` or `{1..3}`, is
/// passed to the shell untouched.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionSet(pub BTreeMap<String, String>);

const VARIABLES: [&str; 2] = ["main", "files"];

impl ActionSet {
    pub fn new<I, K, V>(actions: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        Self(
            actions
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
        )
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, template) in &self.0 {
            if name.trim().is_empty() {
                return Err("action names must be non-empty".into());
            }
            if name.contains('/') || name.chars().any(char::is_control) {
                return Err(format!("invalid action name {name:?}"));
            }
            if template.trim().is_empty() {
                return Err(format!("action {name:?} has an empty template"));
            }
            for var in variables(template) {
                if !VARIABLES.contains(&var) {
                    return Err(format!("action {name:?} uses unknown variable {{{var}}}"));
                }
            }
        }
        Ok(())
    }
}

/// Identifier-like `{name}` groups not preceded by `$`.
fn variables(template: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let bytes = template.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' && (i == 0 || bytes[i - 1] != b'$') {
            if let Some(len) = template[i + 1..].find('}') {
                let inner = &template[i + 1..i + 1 + len];
                if is_identifier(inner) {
                    out.push(inner);
                    i += len + 2;
                    continue;
                }
            }
        }
        i += 1;
    }
    out
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Expands a validated template. `main` is needed only if referenced.
pub fn expand(template: &str, main: Option<&str>, files: &BTreeSet<String>) -> Result<String, String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(pos) = rest.find('{') {
        let (head, tail) = rest.split_at(pos);
        out.push_str(head);
        let dollar = out.ends_with('$');
        let var = tail[1..]
            .find('}')
            .map(|len| &tail[1..1 + len])
            .filter(|v| !dollar && is_identifier(v));
        match var {
            Some("main") => {
                let m = main.ok_or("no main file to substitute for {main}")?;
                out.push_str(&shell_quote(m));
                rest = &tail[6..];
            }
            Some("files") => {
                let joined: Vec<String> = files.iter().map(|f| shell_quote(f)).collect();
                out.push_str(&joined.join(" "));
                rest = &tail[7..];
            }
            Some(other) => return Err(format!("unknown variable {{{other}}}")),
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    if out.trim().is_empty() {
        return Err("template expands to an empty command".into());
    }
    Ok(out)
}

fn shell_quote(s: &str) -> String {
    let plain = !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-' | '/' | '+'));
    if plain {
        s.to_owned()
    } else {
        format!("'{}'", s.replace('\'', r"'\''"))
    }
}
