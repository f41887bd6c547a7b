//! Resumable task state and its canonical byte form.
//!
//! Variables live in a sorted map and are restricted to a closed set of
//! value types, so a state serialized on one node decodes to a bit-identical
//! state on any other. Floats are stored as raw IEEE-754 bits.

use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StateError {
    #[error("task state truncated")]
    Truncated,
    #[error("unknown value tag {0}")]
    UnknownTag(u8),
    #[error("string is not UTF-8")]
    NotUtf8,
    #[error("map keys not in canonical order")]
    NonCanonical,
    #[error("{0} trailing bytes after task state")]
    TrailingBytes(usize),
    #[error("nesting deeper than {MAX_DEPTH}")]
    TooDeep,
}

const MAX_DEPTH: usize = 32;

pub type VarMap = BTreeMap<String, Value>;

#[derive(Debug, Clone)]
pub enum Value {
    Int(i64),
    Float(f64),
    Str(String),
    Bytes(Vec<u8>),
    FloatArray(Vec<f64>),
    Map(VarMap),
}

// Bitwise equality: two states are equal iff they serialize identically.
impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Value::Int(a), Value::Int(b)) => a == b,
            (Value::Float(a), Value::Float(b)) => a.to_bits() == b.to_bits(),
            (Value::Str(a), Value::Str(b)) => a == b,
            (Value::Bytes(a), Value::Bytes(b)) => a == b,
            (Value::FloatArray(a), Value::FloatArray(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Value::Map(a), Value::Map(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for Value {}

impl Value {
    fn tag(&self) -> u8 {
        match self {
            Value::Int(_) => 0,
            Value::Float(_) => 1,
            Value::Str(_) => 2,
            Value::Bytes(_) => 3,
            Value::FloatArray(_) => 4,
            Value::Map(_) => 5,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_float(&self) -> Option<f64> {
        match self {
            Value::Float(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_bytes(&self) -> Option<&[u8]> {
        match self {
            Value::Bytes(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_float_array(&self) -> Option<&[f64]> {
        match self {
            Value::FloatArray(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_map(&self) -> Option<&VarMap> {
        match self {
            Value::Map(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskState {
    pub job_id: String,
    pub app_name: String,
    pub next_stage: u32,
    pub vars: VarMap,
    /// Sequence of the last checkpoint image emitted for this job, 0 if none.
    pub ckpt_sequence: u64,
}

impl TaskState {
    pub fn fresh(job_id: impl Into<String>, app_name: impl Into<String>) -> Self {
        Self {
            job_id: job_id.into(),
            app_name: app_name.into(),
            next_stage: 0,
            vars: VarMap::new(),
            ckpt_sequence: 0,
        }
    }

    pub fn set(&mut self, name: &str, value: Value) {
        self.vars.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.vars.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Value> {
        self.vars.remove(name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_str16(&mut out, &self.job_id);
        put_str16(&mut out, &self.app_name);
        out.extend_from_slice(&self.next_stage.to_le_bytes());
        out.extend_from_slice(&self.ckpt_sequence.to_le_bytes());
        put_map(&mut out, &self.vars);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StateError> {
        let mut r = Cursor { buf: bytes, pos: 0 };
        let job_id = r.str16()?;
        let app_name = r.str16()?;
        let next_stage = u32::from_le_bytes(r.array()?);
        let ckpt_sequence = u64::from_le_bytes(r.array()?);
        let vars = r.map(0)?;
        if r.pos != bytes.len() {
            return Err(StateError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self {
            job_id,
            app_name,
            next_stage,
            vars,
            ckpt_sequence,
        })
    }
}

fn put_str16(out: &mut Vec<u8>, s: &str) {
    let len = u16::try_from(s.len()).expect("identifier longer than 65535 bytes");
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_len32(out: &mut Vec<u8>, len: usize) {
    let len = u32::try_from(len).expect("value longer than u32::MAX");
    out.extend_from_slice(&len.to_le_bytes());
}

fn put_map(out: &mut Vec<u8>, map: &VarMap) {
    put_len32(out, map.len());
    for (k, v) in map {
        put_str16(out, k);
        put_value(out, v);
    }
}

fn put_value(out: &mut Vec<u8>, v: &Value) {
    out.push(v.tag());
    match v {
        Value::Int(i) => out.extend_from_slice(&i.to_le_bytes()),
        Value::Float(f) => out.extend_from_slice(&f.to_bits().to_le_bytes()),
        Value::Str(s) => {
            put_len32(out, s.len());
            out.extend_from_slice(s.as_bytes());
        }
        Value::Bytes(b) => {
            put_len32(out, b.len());
            out.extend_from_slice(b);
        }
        Value::FloatArray(xs) => {
            put_len32(out, xs.len());
            for x in xs {
                out.extend_from_slice(&x.to_bits().to_le_bytes());
            }
        }
        Value::Map(m) => put_map(out, m),
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StateError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(StateError::Truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], StateError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn len32(&mut self) -> Result<usize, StateError> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }

    fn utf8(&mut self, n: usize) -> Result<String, StateError> {
        std::str::from_utf8(self.take(n)?)
            .map(str::to_string)
            .map_err(|_| StateError::NotUtf8)
    }

    fn str16(&mut self) -> Result<String, StateError> {
        let n = u16::from_le_bytes(self.array()?) as usize;
        self.utf8(n)
    }

    fn map(&mut self, depth: usize) -> Result<VarMap, StateError> {
        if depth > MAX_DEPTH {
            return Err(StateError::TooDeep);
        }
        let count = self.len32()?;
        let mut map = VarMap::new();
        let mut prev: Option<String> = None;
        for _ in 0..count {
            let key = self.str16()?;
            if prev.as_ref().is_some_and(|p| *p >= key) {
                return Err(StateError::NonCanonical);
            }
            let value = self.value(depth)?;
            prev = Some(key.clone());
            map.insert(key, value);
        }
        Ok(map)
    }

    fn value(&mut self, depth: usize) -> Result<Value, StateError> {
        let tag = self.array::<1>()?[0];
        Ok(match tag {
            0 => Value::Int(i64::from_le_bytes(self.array()?)),
            1 => Value::Float(f64::from_bits(u64::from_le_bytes(self.array()?))),
            2 => {
                let n = self.len32()?;
                Value::Str(self.utf8(n)?)
            }
            3 => {
                let n = self.len32()?;
                Value::Bytes(self.take(n)?.to_vec())
            }
            4 => {
                let n = self.len32()?;
                let raw = self.take(n.checked_mul(8).ok_or(StateError::Truncated)?)?;
                Value::FloatArray(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
                        .collect(),
                )
            }
            5 => Value::Map(self.map(depth + 1)?),
            t => return Err(StateError::UnknownTag(t)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> TaskState {
        let mut s = TaskState::fresh("1", "colocation");
        s.next_stage = 3;
        s.ckpt_sequence = 2;
        s.set("count", Value::Int(-5));
        s.set("radius", Value::Float(0.05));
        s.set("nan", Value::Float(f64::from_bits(0x7ff8_0000_0000_0001)));
        s.set("name", Value::Str("granule-α".into()));
        s.set("raw", Value::Bytes(vec![0, 1, 255]));
        s.set("xs", Value::FloatArray(vec![1.5, -0.0, 6371.0]));
        let mut inner = VarMap::new();
        inner.insert("b".into(), Value::Int(2));
        inner.insert("a".into(), Value::Str("x".into()));
        s.set("nested", Value::Map(inner));
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let bytes = s.to_bytes();
        let back = TaskState::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_unsorted_keys() {
        let mut s = TaskState::fresh("j", "a");
        s.set("a", Value::Int(1));
        s.set("b", Value::Int(2));
        let mut bytes = s.to_bytes();
        // each entry is key len (2) + key (1) + tag (1) + i64 (8); swap the key bytes
        let entry = 2 + 1 + 1 + 8;
        let pos_a = bytes.len() - 2 * entry + 2;
        let pos_b = pos_a + entry;
        assert_eq!((bytes[pos_a], bytes[pos_b]), (b'a', b'b'));
        bytes.swap(pos_a, pos_b);
        assert_eq!(TaskState::from_bytes(&bytes), Err(StateError::NonCanonical));
    }

    #[test]
    fn rejects_truncation_and_trailing() {
        let bytes = sample().to_bytes();
        for len in 0..bytes.len() {
            assert!(TaskState::from_bytes(&bytes[..len]).is_err(), "prefix {len}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(TaskState::from_bytes(&extra), Err(StateError::TrailingBytes(1)));
    }

    fn value_strategy() -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            any::<i64>().prop_map(Value::Int),
            any::<f64>().prop_map(Value::Float),
            ".{0,12}".prop_map(Value::Str),
            proptest::collection::vec(any::<u8>(), 0..16).prop_map(Value::Bytes),
            proptest::collection::vec(any::<f64>(), 0..8).prop_map(Value::FloatArray),
        ];
        leaf.prop_recursive(3, 24, 4, |inner| {
            proptest::collection::btree_map("[a-z]{1,4}", inner, 0..4).prop_map(Value::Map)
        })
    }

    proptest! {
        #[test]
        fn serialize_deserialize_identity(
            vars in proptest::collection::btree_map("[a-z_]{1,8}", value_strategy(), 0..6),
            next in 0u32..20,
            seq in any::<u64>(),
        ) {
            let s = TaskState { job_id: "j".into(), app_name: "app".into(), next_stage: next, vars, ckpt_sequence: seq };
            let bytes = s.to_bytes();
            let back = TaskState::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(back, s);
        }
    }
}
