//! Reversible pseudonymization of proper names before text reaches a
//! language model, and leak counting on the way back.
//!
//! Names are replaced by opaque tokens `ENT_xxxxxxxx` (8 lowercase hex
//! digits of a salted SHA-256). Decoding restores every token the vault
//! knows; unknown tokens are fabricated entities and are replaced by
//! [`UNKNOWN_ENTITY`].

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const TOKEN_PREFIX: &str = "ENT_";
pub const UNKNOWN_ENTITY: &str = "[UNKNOWN ENTITY]";
const MAX_REHASH: u32 = 64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnonymizeError {
    #[error("protected names must be non-empty")]
    EmptyName,
    #[error("no free token for `{0}` after {MAX_REHASH} attempts")]
    TokenCollision(String),
}

fn token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"ENT_[0-9a-f]{8}").expect("valid pattern"))
}

/// Whether `text` contains anything shaped like a vault token.
pub fn contains_token_pattern(text: &str) -> bool {
    token_regex().is_match(text)
}

/// Every token-shaped substring, in order of appearance.
pub fn find_tokens(text: &str) -> Vec<&str> {
    token_regex().find_iter(text).map(|m| m.as_str()).collect()
}

pub fn is_token(s: &str) -> bool {
    s.len() == 12 && token_regex().find(s).is_some_and(|m| m.len() == 12)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NameVault {
    salt: String,
    forward: BTreeMap<String, String>,
    reverse: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct VaultFile {
    salt: String,
    entries: Vec<VaultEntry>,
}

#[derive(Serialize, Deserialize)]
struct VaultEntry {
    name: String,
    token: String,
}

impl NameVault {
    pub fn new(salt: impl Into<String>) -> Self {
        Self {
            salt: salt.into(),
            ..Self::default()
        }
    }

    /// Vault pre-populated with `names`, ready for read-only encoding.
    pub fn with_names<S: AsRef<str>>(
        salt: impl Into<String>,
        names: &[S],
    ) -> Result<Self, AnonymizeError> {
        let mut v = Self::new(salt);
        for n in names {
            v.register(n.as_ref())?;
        }
        Ok(v)
    }

    pub fn salt(&self) -> &str {
        &self.salt
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn token_for(&self, name: &str) -> Option<&str> {
        self.forward.get(name).map(String::as_str)
    }

    pub fn name_for(&self, token: &str) -> Option<&str> {
        self.reverse.get(token).map(String::as_str)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.forward.keys().map(String::as_str)
    }

    fn hash_token(&self, name: &str, counter: u32) -> String {
        let mut h = Sha256::new();
        h.update(self.salt.as_bytes());
        h.update([0]);
        h.update(name.as_bytes());
        if counter > 0 {
            h.update([0]);
            h.update(counter.to_le_bytes());
        }
        format!("{TOKEN_PREFIX}{}", &hex::encode(h.finalize())[..8])
    }

    /// Adds `name` if unknown and returns its token.
    pub fn register(&mut self, name: &str) -> Result<String, AnonymizeError> {
        if name.is_empty() {
            return Err(AnonymizeError::EmptyName);
        }
        if let Some(t) = self.forward.get(name) {
            return Ok(t.clone());
        }
        for counter in 0..MAX_REHASH {
            let token = self.hash_token(name, counter);
            if !self.reverse.contains_key(&token) {
                self.forward.insert(name.to_string(), token.clone());
                self.reverse.insert(token.clone(), name.to_string());
                return Ok(token);
            }
        }
        Err(AnonymizeError::TokenCollision(name.to_string()))
    }

    /// Replaces every registered name in `text` with its token using the
    /// rules of [`encode`]. Does not extend the vault.
    pub fn encode_text(&self, text: &str) -> String {
        let mut names: Vec<&str> = self.forward.keys().map(String::as_str).collect();
        // Longest first; ties broken lexicographically for determinism.
        names.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        substitute(text, &names, |n| self.forward[n].as_str())
    }

    pub fn to_json(&self) -> String {
        let file = VaultFile {
            salt: self.salt.clone(),
            entries: self
                .forward
                .iter()
                .map(|(n, t)| VaultEntry {
                    name: n.clone(),
                    token: t.clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("vault serializes")
    }

    /// Loads a persisted vault, re-checking the bijection and token format.
    pub fn from_json(text: &str) -> Result<Self, String> {
        let file: VaultFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let mut v = Self::new(file.salt);
        for e in file.entries {
            if e.name.is_empty() {
                return Err("empty name".into());
            }
            if !is_token(&e.token) {
                return Err(format!("malformed token `{}`", e.token));
            }
            if v.forward.contains_key(&e.name) || v.reverse.contains_key(&e.token) {
                return Err(format!("entry `{}` is not one-to-one", e.name));
            }
            v.forward.insert(e.name.clone(), e.token.clone());
            v.reverse.insert(e.token, e.name);
        }
        Ok(v)
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Single left-to-right pass. At each position the longest matching name
/// wins; a name edge that is a word character must sit on a word boundary.
fn substitute<'a>(text: &str, names: &[&'a str], token: impl Fn(&'a str) -> &'a str) -> String {
    if names.is_empty() {
        return text.to_string();
    }
    let mut out = String::with_capacity(text.len());
    let mut prev: Option<char> = None;
    let mut i = 0;
    'outer: while i < text.len() {
        let rest = &text[i..];
        for &name in names {
            if !rest.starts_with(name) {
                continue;
            }
            let first = name.chars().next().expect("non-empty");
            let last = name.chars().next_back().expect("non-empty");
            let next = rest[name.len()..].chars().next();
            let left_ok = !is_word_char(first) || !prev.is_some_and(is_word_char);
            let right_ok = !is_word_char(last) || !next.is_some_and(is_word_char);
            if left_ok && right_ok {
                out.push_str(token(name));
                prev = Some(last);
                i += name.len();
                continue 'outer;
            }
        }
        let c = rest.chars().next().expect("in bounds");
        out.push(c);
        prev = Some(c);
        i += c.len_utf8();
    }
    out
}

/// Replaces every occurrence of each name (longest match first,
/// case-sensitive, word-boundary) with its token, extending the vault.
pub fn encode<S: AsRef<str>>(
    text: &str,
    names: &[S],
    vault: &NameVault,
) -> Result<(String, NameVault), AnonymizeError> {
    let mut v = vault.clone();
    for n in names {
        v.register(n.as_ref())?;
    }
    let out = v.encode_text(text);
    Ok((out, v))
}

/// Restores known tokens. Unknown tokens are counted as leaks and replaced
/// by [`UNKNOWN_ENTITY`].
pub fn decode(text: &str, vault: &NameVault) -> (String, usize) {
    let mut leaks = 0;
    let out = token_regex().replace_all(text, |caps: &regex::Captures| {
        let tok = &caps[0];
        match vault.name_for(tok) {
            Some(name) => name.to_string(),
            None => {
                leaks += 1;
                UNKNOWN_ENTITY.to_string()
            }
        }
    });
    (out.into_owned(), leaks)
}
