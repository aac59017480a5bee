//! Named parameter storage and checkpointing.
//!
//! A [`ParamStore`] maps parameter names to shaped `f64` buffers. Buffers
//! sit behind `Arc`, so spawning a per-sample graph shares them without
//! copying; the optimizer mutates them in place once the graphs are gone.
//!
//! On disk a checkpoint is two files: `<stem>.bin` holding every buffer as
//! little-endian f64 in name order, and `<stem>.json` with a versioned
//! manifest describing the layout plus caller metadata.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Buffer, Graph, Shape, Var};
use crate::{Error, Result};

const MANIFEST_VERSION: u32 = 1;

#[derive(Clone)]
pub struct ParamTensor {
    pub shape: Shape,
    pub values: Buffer,
}

/// Name-keyed parameter set. Iteration order (and therefore checkpoint
/// layout and gradient application order) is the BTreeMap name order.
#[derive(Default, Clone)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamTensor>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, shape: Shape, values: Vec<f64>) {
        assert_eq!(shape.numel(), values.len(), "param {name}: shape/value mismatch");
        assert!(
            self.entries.insert(name.to_string(), ParamTensor { shape, values: Arc::new(values) }).is_none(),
            "param {name} registered twice"
        );
    }

    pub fn get(&self, name: &str) -> &ParamTensor {
        self.entries.get(name).unwrap_or_else(|| panic!("unknown param {name}"))
    }

    pub fn remove(&mut self, name: &str) -> Option<ParamTensor> {
        self.entries.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|p| p.shape.numel()).sum()
    }

    /// Materialise a parameter as a gradient-tracking leaf on `g`.
    /// The value buffer is shared, not copied, and repeated requests for
    /// the same name on one graph return the same node, so gradients from
    /// every use site accumulate together.
    pub fn var(&self, g: &Graph, name: &str) -> Var {
        let p = self.get(name);
        g.named_param(name, p.shape.clone(), p.values.clone())
    }

    /// Mutable view of one buffer for in-place optimizer updates. Clones
    /// only if some graph still holds the buffer.
    pub fn values_mut(&mut self, name: &str) -> &mut Vec<f64> {
        let p = self.entries.get_mut(name).unwrap_or_else(|| panic!("unknown param {name}"));
        Arc::make_mut(&mut p.values)
    }

    /// Write `<stem>.bin` + `<stem>.json`.
    pub fn save(&self, stem: &Path, meta: serde_json::Value) -> Result<()> {
        let mut entries = Vec::with_capacity(self.entries.len());
        let mut offset = 0usize;
        let mut bin: Vec<u8> = Vec::with_capacity(self.total_elements() * 8);
        for (name, p) in &self.entries {
            entries.push(ManifestEntry {
                name: name.clone(),
                dims: p.shape.0.clone(),
                offset,
                len: p.shape.numel(),
            });
            for v in p.values.iter() {
                bin.extend_from_slice(&v.to_le_bytes());
            }
            offset += p.shape.numel();
        }
        let manifest =
            Manifest { version: MANIFEST_VERSION, total_len: offset, params: entries, meta };
        let mut f = std::fs::File::create(stem.with_extension("bin"))?;
        f.write_all(&bin)?;
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(stem.with_extension("json"), json)?;
        Ok(())
    }

    /// Read a checkpoint written by [`ParamStore::save`].
    pub fn load(stem: &Path) -> Result<(ParamStore, serde_json::Value)> {
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {MANIFEST_VERSION})",
                manifest.version
            )));
        }
        let mut bin = Vec::new();
        std::fs::File::open(stem.with_extension("bin"))?.read_to_end(&mut bin)?;
        if bin.len() != manifest.total_len * 8 {
            return Err(Error::Checkpoint(format!(
                "binary payload is {} bytes, manifest expects {}",
                bin.len(),
                manifest.total_len * 8
            )));
        }
        let mut store = ParamStore::new();
        for e in &manifest.params {
            let shape = Shape::of(&e.dims);
            if shape.numel() != e.len {
                return Err(Error::Checkpoint(format!(
                    "param {}: dims {:?} disagree with len {}",
                    e.name, e.dims, e.len
                )));
            }
            let bytes = &bin[e.offset * 8..(e.offset + e.len) * 8];
            let values: Vec<f64> =
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("param {}: non-finite value", e.name)));
            }
            store.insert(&e.name, shape, values);
        }
        Ok((store, manifest.meta))
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dims: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    total_len: usize,
    params: Vec<ManifestEntry>,
    meta: serde_json::Value,
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn roundtrip_preserves_values_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("model");
        let mut store = ParamStore::new();
        store.insert("b.weight", Shape::of(&[2, 2]), vec![1.5, -2.25, 0.0, 1e-300]);
        store.insert("a.bias", Shape::of(&[3]), vec![0.1, 0.2, 0.3]);
        store.save(&stem, json!({"epoch": 7})).unwrap();

        let (loaded, meta) = ParamStore::load(&stem).unwrap();
        assert_eq!(meta["epoch"], 7);
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.get("b.weight").values.as_slice(), &[1.5, -2.25, 0.0, 1e-300]);
        assert_eq!(loaded.get("a.bias").shape, Shape::of(&[3]));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("model");
        let mut store = ParamStore::new();
        store.insert("w", Shape::of(&[4]), vec![1.0, 2.0, 3.0, 4.0]);
        store.save(&stem, serde_json::Value::Null).unwrap();
        let bin = stem.with_extension("bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        let err = match ParamStore::load(&stem) {
            Err(e) => e,
            Ok(_) => panic!("truncated checkpoint loaded"),
        };
        assert!(matches!(err, Error::Checkpoint(_)), "unexpected error: {err}");
    }

    #[test]
    fn reused_param_accumulates_gradient_on_one_node() {
        let mut store = ParamStore::new();
        store.insert("w", Shape::of(&[2]), vec![3.0, 4.0]);
        let g = Graph::new();
        let a = store.var(&g, "w");
        let b = store.var(&g, "w");
        // y = sum(w) + sum(w * w) -> dy/dw = 1 + 2w
        let y = a.sum_all().add(&b.mul(&b).sum_all());
        let grads = y.backward();
        let id = g.named_node("w").unwrap();
        assert_eq!(grads.by_id(id).unwrap(), &[7.0, 9.0]);
    }

    #[test]
    fn optimizer_update_after_graph_drop_does_not_copy() {
        let mut store = ParamStore::new();
        store.insert("w", Shape::of(&[2]), vec![1.0, 2.0]);
        let before = Arc::as_ptr(&store.get("w").values);
        {
            let g = Graph::new();
            let v = store.var(&g, "w");
            let _ = v.sum_all();
        } // graph dropped -> Arc unique again
        let _ = store.values_mut("w");
        assert_eq!(Arc::as_ptr(&store.get("w").values), before);
    }
}
