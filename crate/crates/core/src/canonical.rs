//! Canonical byte encoding of structured values and SHA-256 digests.
//!
//! Every signature and hash in the crate is computed over the output of
//! [`canonical_encode`]. The encoding is JSON restricted to integers, with map
//! keys sorted by their UTF-8 bytes, no whitespace and minimal string escaping.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Domain tag for Merkle leaf nodes.
pub const LEAF_TAG: u8 = 0x00;
/// Domain tag for Merkle interior nodes.
pub const NODE_TAG: u8 = 0x01;

/// A structured value. There is deliberately no floating-point variant.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Value {
    Null,
    Bool(bool),
    Int(i64),
    Str(String),
    List(Vec<Value>),
    Map(BTreeMap<String, Value>),
}

impl Value {
    pub fn str(s: impl Into<String>) -> Self {
        Value::Str(s.into())
    }

    /// Builds a map from `(key, value)` pairs. Later duplicates win.
    pub fn map<K: Into<String>>(pairs: impl IntoIterator<Item = (K, Value)>) -> Self {
        Value::Map(pairs.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }

    pub fn as_map(&self) -> Option<&BTreeMap<String, Value>> {
        match self {
            Value::Map(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Value]> {
        match self {
            Value::List(l) => Some(l),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Value::Null => "null",
            Value::Bool(_) => "boolean",
            Value::Int(_) => "integer",
            Value::Str(_) => "string",
            Value::List(_) => "list",
            Value::Map(_) => "map",
        }
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Str(s.to_owned())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Str(s)
    }
}

impl From<i64> for Value {
    fn from(i: i64) -> Self {
        Value::Int(i)
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Bool(b)
    }
}

impl From<Digest> for Value {
    fn from(d: Digest) -> Self {
        Value::Str(d.to_hex())
    }
}

/// Encodes `value` into its canonical byte form.
pub fn canonical_encode(value: &Value) -> Vec<u8> {
    let mut out = Vec::with_capacity(128);
    encode_into(value, &mut out);
    out
}

fn encode_into(value: &Value, out: &mut Vec<u8>) {
    match value {
        Value::Null => out.extend_from_slice(b"null"),
        Value::Bool(true) => out.extend_from_slice(b"true"),
        Value::Bool(false) => out.extend_from_slice(b"false"),
        Value::Int(i) => out.extend_from_slice(i.to_string().as_bytes()),
        Value::Str(s) => encode_str(s, out),
        Value::List(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                encode_into(item, out);
            }
            out.push(b']');
        }
        Value::Map(map) => {
            // BTreeMap<String, _> iterates in UTF-8 byte order.
            out.push(b'{');
            for (i, (k, v)) in map.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                encode_str(k, out);
                out.push(b':');
                encode_into(v, out);
            }
            out.push(b'}');
        }
    }
}

fn encode_str(s: &str, out: &mut Vec<u8>) {
    const HEX: &[u8; 16] = b"0123456789abcdef";
    out.push(b'"');
    for &b in s.as_bytes() {
        match b {
            b'"' => out.extend_from_slice(b"\\\""),
            b'\\' => out.extend_from_slice(b"\\\\"),
            b'\n' => out.extend_from_slice(b"\\n"),
            b'\r' => out.extend_from_slice(b"\\r"),
            b'\t' => out.extend_from_slice(b"\\t"),
            0x00..=0x1f => {
                out.extend_from_slice(b"\\u00");
                out.push(HEX[(b >> 4) as usize]);
                out.push(HEX[(b & 0x0f) as usize]);
            }
            _ => out.push(b),
        }
    }
    out.push(b'"');
}

/// Errors raised while decoding interchange text into a [`Value`].
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("malformed document: {0}")]
    Syntax(String),
    #[error("floating-point number not permitted: {0}")]
    Float(String),
    #[error("integer out of signed 64-bit range: {0}")]
    IntegerRange(String),
    #[error("document is not in canonical form")]
    NonCanonical,
}

/// Parses interchange text into a [`Value`]. Accepts any valid JSON within the
/// value domain, including whitespace and unsorted keys.
pub fn decode(bytes: &[u8]) -> Result<Value, DecodeError> {
    let json: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| DecodeError::Syntax(e.to_string()))?;
    from_json(json)
}

/// Parses text that must already be in canonical form: re-encoding the parsed
/// value has to reproduce `bytes` exactly.
pub fn decode_canonical(bytes: &[u8]) -> Result<Value, DecodeError> {
    let value = decode(bytes)?;
    if canonical_encode(&value) != bytes {
        return Err(DecodeError::NonCanonical);
    }
    Ok(value)
}

fn from_json(json: serde_json::Value) -> Result<Value, DecodeError> {
    Ok(match json {
        serde_json::Value::Null => Value::Null,
        serde_json::Value::Bool(b) => Value::Bool(b),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                Value::Int(i)
            } else if n.is_u64() {
                return Err(DecodeError::IntegerRange(n.to_string()));
            } else {
                return Err(DecodeError::Float(n.to_string()));
            }
        }
        serde_json::Value::String(s) => Value::Str(s),
        serde_json::Value::Array(items) => {
            Value::List(items.into_iter().map(from_json).collect::<Result<_, _>>()?)
        }
        serde_json::Value::Object(map) => Value::Map(
            map.into_iter()
                .map(|(k, v)| Ok((k, from_json(v)?)))
                .collect::<Result<_, DecodeError>>()?,
        ),
    })
}

/// A 32-byte SHA-256 digest, rendered as 64 lowercase hex characters.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Parses exactly 64 lowercase hex characters.
    pub fn from_hex(s: &str) -> Result<Self, HexError> {
        Ok(Digest(parse_lower_hex::<32>(s)?))
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl FromStr for Digest {
    type Err = HexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Digest::from_hex(s)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HexError {
    #[error("expected {expected} hex characters, found {found}")]
    Length { expected: usize, found: usize },
    #[error("invalid character {0:?}; only lowercase hex is accepted")]
    Character(char),
}

/// Decodes `2 * N` lowercase hex characters. Uppercase is rejected so that
/// every byte string has exactly one text form.
pub fn parse_lower_hex<const N: usize>(s: &str) -> Result<[u8; N], HexError> {
    if s.len() != 2 * N {
        return Err(HexError::Length {
            expected: 2 * N,
            found: s.len(),
        });
    }
    if let Some(c) = s.chars().find(|c| !matches!(c, '0'..='9' | 'a'..='f')) {
        return Err(HexError::Character(c));
    }
    let mut out = [0u8; N];
    hex::decode_to_slice(s, &mut out).map_err(|_| HexError::Length {
        expected: 2 * N,
        found: s.len(),
    })?;
    Ok(out)
}

/// SHA-256 of `data`.
pub fn digest(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// SHA-256 of `tag ‖ parts[0] ‖ parts[1] ‖ …`.
pub fn domain_digest(tag: u8, parts: &[&[u8]]) -> Digest {
    let mut hasher = Sha256::new();
    hasher.update([tag]);
    for part in parts {
        hasher.update(part);
    }
    Digest(hasher.finalize().into())
}

/// Digest of the canonical encoding of `value`.
pub fn digest_value(value: &Value) -> Digest {
    digest(&canonical_encode(value))
}

/// Field-level error produced when a [`Value`] does not have the expected shape.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("field `{field}`: {message}")]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        FieldError {
            field: field.into(),
            message: message.into(),
        }
    }
}

/// Typed accessors over a map value, used by every `from_value` in the crate.
pub struct Fields<'a> {
    map: &'a BTreeMap<String, Value>,
}

impl<'a> Fields<'a> {
    pub fn new(value: &'a Value, what: &str) -> Result<Self, FieldError> {
        value
            .as_map()
            .map(|map| Fields { map })
            .ok_or_else(|| FieldError::new(what, format!("expected map, found {}", value.kind())))
    }

    /// Rejects keys outside `allowed`.
    pub fn only(self, allowed: &[&str]) -> Result<Self, FieldError> {
        if let Some(k) = self.map.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(FieldError::new(k.clone(), "unexpected field"));
        }
        Ok(self)
    }

    pub fn get(&self, key: &str) -> Result<&'a Value, FieldError> {
        self.map
            .get(key)
            .ok_or_else(|| FieldError::new(key, "missing"))
    }

    pub fn opt(&self, key: &str) -> Option<&'a Value> {
        match self.map.get(key) {
            None | Some(Value::Null) => None,
            Some(v) => Some(v),
        }
    }

    pub fn str(&self, key: &str) -> Result<&'a str, FieldError> {
        let v = self.get(key)?;
        v.as_str()
            .ok_or_else(|| FieldError::new(key, format!("expected string, found {}", v.kind())))
    }

    pub fn int(&self, key: &str) -> Result<i64, FieldError> {
        let v = self.get(key)?;
        v.as_int()
            .ok_or_else(|| FieldError::new(key, format!("expected integer, found {}", v.kind())))
    }

    pub fn list(&self, key: &str) -> Result<&'a [Value], FieldError> {
        let v = self.get(key)?;
        v.as_list()
            .ok_or_else(|| FieldError::new(key, format!("expected list, found {}", v.kind())))
    }

    pub fn map(&self, key: &str) -> Result<&'a BTreeMap<String, Value>, FieldError> {
        let v = self.get(key)?;
        v.as_map()
            .ok_or_else(|| FieldError::new(key, format!("expected map, found {}", v.kind())))
    }

    pub fn digest(&self, key: &str) -> Result<Digest, FieldError> {
        Digest::from_hex(self.str(key)?).map_err(|e| FieldError::new(key, e.to_string()))
    }

    pub fn hex<const N: usize>(&self, key: &str) -> Result<[u8; N], FieldError> {
        parse_lower_hex::<N>(self.str(key)?).map_err(|e| FieldError::new(key, e.to_string()))
    }

    pub fn str_list(&self, key: &str) -> Result<Vec<String>, FieldError> {
        self.list(key)?
            .iter()
            .map(|v| {
                v.as_str()
                    .map(str::to_owned)
                    .ok_or_else(|| FieldError::new(key, "expected list of strings"))
            })
            .collect()
    }
}
