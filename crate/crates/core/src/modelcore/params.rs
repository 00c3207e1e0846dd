use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Handle to one named tensor in a [`ParameterStore`]. Handles are plain
/// indices, so every handle for the same name addresses the same storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Row-major real tensor with copy-on-write storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() > 1 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn data_mut(&mut self) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.data)
    }
}

/// The single source of truth for model weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replace every tensor's values with those of `other`, which must have
    /// the same layout.
    pub fn copy_from(&mut self, other: &ParameterStore) {
        assert_eq!(self.names, other.names, "parameter layout mismatch");
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            assert_eq!(dst.shape, src.shape);
            dst.data = Arc::clone(&src.data);
        }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (_, name, t) in self.iter() {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in &t.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
