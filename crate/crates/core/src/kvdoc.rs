//! Flat key/value text documents.
//!
//! One `key=value` pair per line, `\n` terminated. Keys are `[a-z0-9_]+`.
//! Values escape backslash, newline and carriage return as `\\`, `\n` and
//! `\r`. Field order is preserved on both encode and decode, so a document
//! built in a fixed order always encodes to the same bytes.
//!
//! Used for restart manifests, wire messages and job parameter blobs.

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KvError {
    #[error("document is not valid UTF-8")]
    NotUtf8,
    #[error("line {0}: missing '='")]
    MissingSeparator(usize),
    #[error("line {0}: invalid key {1:?}")]
    InvalidKey(usize, String),
    #[error("line {0}: bad escape sequence")]
    BadEscape(usize),
    #[error("duplicate key {0:?}")]
    DuplicateKey(String),
    #[error("document does not end with a newline")]
    Unterminated,
    #[error("missing field {0:?}")]
    MissingField(String),
    #[error("field {field:?}: {reason}")]
    BadValue { field: String, reason: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvDoc {
    fields: Vec<(String, String)>,
}

pub fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a field, replacing an existing value with the same key in place.
    ///
    /// Panics if `key` is not a valid key; keys are always literals in this crate.
    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        assert!(valid_key(key), "invalid kvdoc key {key:?}");
        let value = value.to_string();
        match self.fields.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.fields.push((key.to_string(), value)),
        }
        self
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.set(key, value);
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, KvError> {
        self.get(key)
            .ok_or_else(|| KvError::MissingField(key.to_string()))
    }

    pub fn require_parsed<T>(&self, key: &str) -> Result<T, KvError>
    where
        T: std::str::FromStr,
        T::Err: fmt::Display,
    {
        let raw = self.require(key)?;
        raw.parse().map_err(|e: T::Err| KvError::BadValue {
            field: key.to_string(),
            reason: e.to_string(),
        })
    }

    pub fn parsed_or<T>(&self, key: &str, default: T) -> Result<T, KvError>
    where
        T: std::str::FromStr,
        T::Err: fmt::Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(_) => self.require_parsed(key),
        }
    }

    pub fn fields(&self) -> impl Iterator<Item = (&str, &str)> {
        self.fields.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn encode(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.fields {
            out.push_str(k);
            out.push('=');
            escape_into(v, &mut out);
            out.push('\n');
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, KvError> {
        let text = std::str::from_utf8(bytes).map_err(|_| KvError::NotUtf8)?;
        if text.is_empty() {
            return Ok(Self::default());
        }
        let body = text.strip_suffix('\n').ok_or(KvError::Unterminated)?;
        let mut doc = Self::default();
        for (idx, line) in body.split('\n').enumerate() {
            let lineno = idx + 1;
            let (key, raw) = line
                .split_once('=')
                .ok_or(KvError::MissingSeparator(lineno))?;
            if !valid_key(key) {
                return Err(KvError::InvalidKey(lineno, key.to_string()));
            }
            if doc.get(key).is_some() {
                return Err(KvError::DuplicateKey(key.to_string()));
            }
            let value = unescape(raw).ok_or(KvError::BadEscape(lineno))?;
            doc.fields.push((key.to_string(), value));
        }
        Ok(doc)
    }
}

fn escape_into(value: &str, out: &mut String) {
    for c in value.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
}

fn unescape(raw: &str) -> Option<String> {
    let mut out = String::with_capacity(raw.len());
    let mut chars = raw.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next()? {
            '\\' => out.push('\\'),
            'n' => out.push('\n'),
            'r' => out.push('\r'),
            _ => return None,
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn preserves_order_and_escapes() {
        let doc = KvDoc::new()
            .with("service", "hop")
            .with("message", "two\nlines \\ here");
        let text = doc.encode();
        assert_eq!(text, "service=hop\nmessage=two\\nlines \\\\ here\n");
        assert_eq!(KvDoc::decode(text.as_bytes()).unwrap(), doc);
    }

    #[test]
    fn rejects_malformed() {
        assert_eq!(KvDoc::decode(b"a=1"), Err(KvError::Unterminated));
        assert_eq!(KvDoc::decode(b"a\n"), Err(KvError::MissingSeparator(1)));
        assert_eq!(
            KvDoc::decode(b"A=1\n"),
            Err(KvError::InvalidKey(1, "A".into()))
        );
        assert_eq!(
            KvDoc::decode(b"a=1\na=2\n"),
            Err(KvError::DuplicateKey("a".into()))
        );
        assert_eq!(KvDoc::decode(b"a=\\x\n"), Err(KvError::BadEscape(1)));
    }

    #[test]
    fn empty_value_is_allowed() {
        let doc = KvDoc::decode(b"keys=\n").unwrap();
        assert_eq!(doc.get("keys"), Some(""));
    }

    proptest! {
        #[test]
        fn round_trips_arbitrary_values(values in proptest::collection::vec(".*", 0..6)) {
            let mut doc = KvDoc::new();
            for (i, v) in values.iter().enumerate() {
                doc.set(&format!("k{i}"), v);
            }
            let decoded = KvDoc::decode(doc.encode().as_bytes()).unwrap();
            prop_assert_eq!(decoded, doc);
        }
    }
}
