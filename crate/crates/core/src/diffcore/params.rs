use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::dense::Dense;
use crate::error::{Error, Result};
use crate::hash::Fnv64;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    value: Dense,
    grad: Dense,
}

/// Named parameter tensors, each paired with a gradient buffer of the same
/// shape. Serializes values only; gradients come back zeroed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "StoreRepr", into = "StoreRepr")]
pub struct ParamStore {
    entries: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct StoreRepr {
    params: Vec<NamedDense>,
}

#[derive(Serialize, Deserialize)]
struct NamedDense {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<StoreRepr> for ParamStore {
    type Error = Error;

    fn try_from(r: StoreRepr) -> Result<Self> {
        let mut s = ParamStore::new();
        for p in r.params {
            s.add(&p.name, Dense::new(p.rows, p.cols, p.data)?)?;
        }
        Ok(s)
    }
}

impl From<ParamStore> for StoreRepr {
    fn from(s: ParamStore) -> Self {
        StoreRepr {
            params: s
                .entries
                .into_iter()
                .map(|e| NamedDense {
                    name: e.name,
                    rows: e.value.rows(),
                    cols: e.value.cols(),
                    data: e.value.into_vec(),
                })
                .collect(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Dense) -> Result<ParamId> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::InvalidConfig(alloc::format!("duplicate parameter `{name}`")));
        }
        let grad = Dense::zeros(value.rows(), value.cols());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Dense {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Dense {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Dense {
        &self.entries[id.0].grad
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (e, g) in self.entries.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                for (a, b) in e.grad.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *a += b;
                }
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        libm::sqrt(self.entries.iter().map(|e| e.grad.sum_sq()).sum())
    }

    pub(crate) fn parts_mut(&mut self, id: ParamId) -> (&str, &mut Dense, &mut Dense) {
        let e = &mut self.entries[id.0];
        (&e.name, &mut e.value, &mut e.grad)
    }

    /// 64-bit FNV-1a over names, shapes and the bit patterns of all values.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        for e in &self.entries {
            h.write_str(&e.name);
            h.write_u64(e.value.rows() as u64);
            h.write_u64(e.value.cols() as u64);
            for v in e.value.as_slice() {
                h.write_f64(*v);
            }
        }
        h.finish()
    }
}

/// Per-parameter gradient contributions produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub(crate) grads: Vec<Option<Dense>>,
}

impl Gradients {
    pub(crate) fn for_store(store: &ParamStore) -> Self {
        Gradients {
            grads: (0..store.len()).map(|_| None).collect(),
        }
    }

    pub(crate) fn slot(&mut self, id: ParamId, shape: &Dense) -> &mut Dense {
        self.grads[id.0].get_or_insert_with(|| Dense::zeros(shape.rows(), shape.cols()))
    }

    pub fn get(&self, id: ParamId) -> Option<&Dense> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_grad_and_lookup() {
        let mut s = ParamStore::new();
        let a = s.add("a", Dense::column(vec![1.0, 2.0])).unwrap();
        assert!(s.add("a", Dense::zeros(1, 1)).is_err());
        assert_eq!(s.id("a").unwrap(), a);
        assert!(s.id("missing").is_err());
        let (_, _, g) = s.parts_mut(a);
        g.fill(3.0);
        assert!(s.grad_norm() > 0.0);
        s.zero_grad();
        assert_eq!(s.grad(a).as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut s = ParamStore::new();
        let a = s.add("a", Dense::column(vec![1.0, 2.0])).unwrap();
        let f = s.fingerprint();
        s.value_mut(a).as_mut_slice()[0] = 1.5;
        assert_ne!(f, s.fingerprint());
    }
}
