//! Detection of directly identifying values in free text.
//!
//! Two checks are combined: an exact substring match against the live set of
//! registered identifiers, and a denylist of identifier shapes (email
//! addresses, Finnish personal identity codes) that catches values the vault
//! has never seen.

use std::collections::BTreeMap;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier values shorter than this are not substring-matched; at that
/// length they collide with ordinary words and tokens.
pub const DEFAULT_MIN_IDENTIFIER_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenylistPattern {
    pub name: String,
    pub regex: String,
}

impl DenylistPattern {
    pub fn new(name: impl Into<String>, regex: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            regex: regex.into(),
        }
    }

    pub fn email() -> Self {
        Self::new(
            "email",
            r"[A-Za-z0-9._%+\-]+@[A-Za-z0-9\-]+(\.[A-Za-z0-9\-]+)*\.[A-Za-z]{2,}",
        )
    }

    /// Finnish personal identity code: DDMMYY, century sign, 3 digits, check char.
    pub fn finnish_identity_code() -> Self {
        Self::new(
            "fi-identity-code",
            r"\b[0-3]\d[01]\d\d\d[-+A-FU-Y]\d{3}[0-9A-FHJ-NPR-Y]\b",
        )
    }

    pub fn defaults() -> Vec<Self> {
        vec![Self::email(), Self::finnish_identity_code()]
    }
}

/// Reference-counted multiset of live identifier values.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdentifierIndex {
    values: BTreeMap<String, usize>,
}

impl IdentifierIndex {
    pub fn insert(&mut self, value: &str) {
        *self.values.entry(value.to_string()).or_default() += 1;
    }

    pub fn remove(&mut self, value: &str) {
        if let Some(n) = self.values.get_mut(value) {
            *n -= 1;
            if *n == 0 {
                self.values.remove(value);
            }
        }
    }

    pub fn contains(&self, value: &str) -> bool {
        self.values.contains_key(value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// What was found. Never carries the matched value itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "name", rename_all = "snake_case")]
pub enum Finding {
    RegisteredIdentifier,
    Pattern(String),
}

impl std::fmt::Display for Finding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Finding::RegisteredIdentifier => f.write_str("registered identifier"),
            Finding::Pattern(name) => write!(f, "{name}-shaped value"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Detector {
    patterns: Vec<(String, Regex)>,
    min_identifier_len: usize,
}

impl Default for Detector {
    fn default() -> Self {
        Self::new(&DenylistPattern::defaults(), DEFAULT_MIN_IDENTIFIER_LEN)
            .expect("built-in patterns compile")
    }
}

impl Detector {
    pub fn new(patterns: &[DenylistPattern], min_identifier_len: usize) -> Result<Self> {
        let patterns = patterns
            .iter()
            .map(|p| {
                Regex::new(&p.regex)
                    .map(|re| (p.name.clone(), re))
                    .map_err(|e| {
                        Error::MalformedPayload(format!("denylist pattern `{}`: {e}", p.name))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patterns,
            min_identifier_len,
        })
    }

    pub fn min_identifier_len(&self) -> usize {
        self.min_identifier_len
    }

    pub fn scan(&self, text: &str, live: &IdentifierIndex) -> Option<Finding> {
        if text.is_empty() {
            return None;
        }
        let hit = live
            .iter()
            .filter(|v| v.len() >= self.min_identifier_len)
            .any(|v| text.contains(v));
        if hit {
            return Some(Finding::RegisteredIdentifier);
        }
        self.scan_patterns(text)
    }

    pub fn scan_patterns(&self, text: &str) -> Option<Finding> {
        self.patterns
            .iter()
            .find(|(_, re)| re.is_match(text))
            .map(|(name, _)| Finding::Pattern(name.clone()))
    }

    /// Scans every string leaf of a JSON value. Returns the JSON path of the
    /// first offending leaf.
    pub fn scan_json(
        &self,
        value: &serde_json::Value,
        live: &IdentifierIndex,
    ) -> Vec<(String, Finding)> {
        let mut out = Vec::new();
        self.walk(value, String::new(), live, &mut out);
        out
    }

    fn walk(
        &self,
        value: &serde_json::Value,
        path: String,
        live: &IdentifierIndex,
        out: &mut Vec<(String, Finding)>,
    ) {
        match value {
            serde_json::Value::String(s) => {
                if let Some(f) = self.scan(s, live) {
                    out.push((path, f));
                }
            }
            serde_json::Value::Array(items) => {
                for (i, item) in items.iter().enumerate() {
                    self.walk(item, format!("{path}[{i}]"), live, out);
                }
            }
            serde_json::Value::Object(map) => {
                for (k, v) in map {
                    let child = if path.is_empty() {
                        k.clone()
                    } else {
                        format!("{path}.{k}")
                    };
                    if let Some(f) = self.scan(k, live) {
                        out.push((child.clone(), f));
                    }
                    self.walk(v, child, live, out);
                }
            }
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn email_shapes_are_caught() {
        let d = Detector::default();
        let live = IdentifierIndex::default();
        assert_eq!(
            d.scan("contact a@x.eu now", &live),
            Some(Finding::Pattern("email".into()))
        );
        assert_eq!(d.scan("erase p=Ab3xyz", &live), None);
    }

    #[test]
    fn finnish_identity_codes_are_caught() {
        let d = Detector::default();
        let live = IdentifierIndex::default();
        assert!(d.scan("id 131052-308T", &live).is_some());
        assert!(d.scan("id 010101A123N", &live).is_some());
        assert!(d.scan("ticket 2024-01-15", &live).is_none());
    }

    #[test]
    fn live_identifiers_match_as_substrings() {
        let d = Detector::default();
        let mut live = IdentifierIndex::default();
        live.insert("Aino Virtanen");
        assert_eq!(
            d.scan("note about Aino Virtanen.", &live),
            Some(Finding::RegisteredIdentifier)
        );
        live.remove("Aino Virtanen");
        assert_eq!(d.scan("note about Aino Virtanen.", &live), None);
    }

    #[test]
    fn short_identifiers_are_not_substring_matched() {
        let d = Detector::default();
        let mut live = IdentifierIndex::default();
        live.insert("Al");
        assert_eq!(d.scan("Allowed", &live), None);
    }

    #[test]
    fn index_is_refcounted() {
        let mut idx = IdentifierIndex::default();
        idx.insert("x-value");
        idx.insert("x-value");
        idx.remove("x-value");
        assert!(idx.contains("x-value"));
        idx.remove("x-value");
        assert!(!idx.contains("x-value"));
    }

    #[test]
    fn json_walk_reports_paths() {
        let d = Detector::default();
        let live = IdentifierIndex::default();
        let v = serde_json::json!({"rows": [{"note": "ok"}, {"note": "mail b@y.fi"}]});
        let hits = d.scan_json(&v, &live);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].0, "rows[1].note");
    }
}
