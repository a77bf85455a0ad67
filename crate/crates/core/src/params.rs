//! Named parameter tensors and their checkpoint file.
//!
//! Checkpoint layout:
//!
//! ```text
//! "FLGP"  u32 LE index length  index text  f32 LE payload
//! ```
//!
//! The index holds one line per entry, in insertion order:
//! `meta <key> <value>` or `tensor <name> <d0>x<d1>x… <offset>`, where
//! `offset` counts f32 values from the start of the payload.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{invalid, Error, Result};
use crate::tensor::{Graph, Node, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FLGP";

/// Ordered name → tensor map plus free-form string metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    tensors: IndexMap<String, Tensor>,
    meta: IndexMap<String, String>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| invalid!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| invalid!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Moves every tensor of `other` into `self`, prefixing names.
    pub fn merge(&mut self, prefix: &str, other: ModelParams) {
        for (k, v) in other.tensors {
            self.tensors.insert(format!("{prefix}{k}"), v);
        }
        for (k, v) in other.meta {
            self.meta.insert(format!("{prefix}{k}"), v);
        }
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    /// Parses a metadata value, failing with a format error when absent or malformed.
    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks `{key}`")))?
            .parse()
            .map_err(|_| Error::Format(format!("checkpoint `{key}` is malformed")))
    }

    /// Registers every tensor as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            nodes: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.param(v.clone())))
                .collect(),
        }
    }

    /// Registers every tensor as a constant of `g`.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            nodes: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.constant(v.clone())))
                .collect(),
        }
    }

    /// Zero-valued copy with the same names and shapes (metadata dropped).
    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
            meta: IndexMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut index = String::new();
        for (k, v) in &self.meta {
            index.push_str(&format!("meta {k} {v}\n"));
        }
        let mut off = 0usize;
        for (k, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            index.push_str(&format!("tensor {k} {} {off}\n", dims.join("x")));
            off += t.len();
        }
        let mut out = Vec::with_capacity(8 + index.len() + 4 * off);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(index.len() as u32).to_le_bytes());
        out.extend_from_slice(index.as_bytes());
        for t in self.tensors.values() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fmt("bad magic (expected FLGP)"));
        }
        let ilen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let index = bytes
            .get(8..8 + ilen)
            .ok_or_else(|| fmt("truncated index"))?;
        let index = std::str::from_utf8(index).map_err(|_| fmt("index is not utf-8"))?;
        let payload = &bytes[8 + ilen..];
        let mut p = ModelParams::new();
        for line in index.lines() {
            let mut it = line.splitn(2, ' ');
            match (it.next(), it.next()) {
                (Some("meta"), Some(rest)) => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    p.meta.insert(k.to_string(), v.to_string());
                }
                (Some("tensor"), Some(rest)) => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    let [name, dims, off] = f[..] else {
                        return Err(fmt(&format!("malformed entry `{line}`")));
                    };
                    let shape = dims
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| fmt(&format!("bad shape in `{line}`")))?;
                    let off: usize = off.parse().map_err(|_| fmt(&format!("bad offset in `{line}`")))?;
                    let n: usize = shape.iter().product();
                    let raw = payload
                        .get(4 * off..4 * (off + n))
                        .ok_or_else(|| fmt(&format!("payload too short for {name}")))?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                        .collect();
                    p.tensors.insert(name.to_string(), Tensor::new(shape, data)?);
                }
                _ => return Err(fmt(&format!("malformed entry `{line}`"))),
            }
        }
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Graph nodes for a parameter set, looked up by name.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    nodes: IndexMap<String, Node>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Node> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| invalid!("missing parameter {name}"))
    }

    /// Replaces (or adds) the node used for `name`.
    pub fn set(&mut self, name: impl Into<String>, node: Node) {
        self.nodes.insert(name.into(), node);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Node)> {
        self.nodes.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients of every bound node, keyed like `params`.
    pub fn grads(&self, g: &Graph, params: &ModelParams) -> ModelParams {
        let mut out = ModelParams::new();
        for (name, _) in params.iter() {
            let t = match self.nodes.get(name) {
                Some(&n) => g.grad(n),
                None => Tensor::zeros(params.tensors[name].shape().to_vec()),
            };
            out.insert(name, t);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("b.weight", Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.25, 3.0, 4.0]).unwrap());
        p.insert("a.bias", Tensor::from_vec(vec![0.125]));
        p.set_meta("rank", 2);
        p.set_meta("channels", "8,6");
        p
    }

    #[test]
    fn checkpoint_round_trip_preserves_order() {
        let p = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        p.save(&path).unwrap();
        let q = ModelParams::load(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.names().collect::<Vec<_>>(), ["b.weight", "a.bias"]);
        assert_eq!(q.meta_parse::<usize>("rank").unwrap(), 2);
        assert_eq!(p.to_bytes(), q.to_bytes());
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        let b = sample().to_bytes();
        assert!(matches!(ModelParams::from_bytes(&b[..b.len() - 2]), Err(Error::Format(_))));
        let mut c = b.clone();
        c[0] = b'X';
        assert!(matches!(ModelParams::from_bytes(&c), Err(Error::Format(_))));
    }

    #[test]
    fn grads_follow_param_order() {
        let p = sample();
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let s = g.sum(b.get("b.weight").unwrap());
        g.backward(s).unwrap();
        let gr = b.grads(&g, &p);
        assert_eq!(gr.get("b.weight").unwrap().data(), &[1.0; 6]);
        assert_eq!(gr.get("a.bias").unwrap().data(), &[0.0]);
    }
}
