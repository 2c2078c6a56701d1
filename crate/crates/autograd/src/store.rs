use std::sync::atomic::{AtomicU64, Ordering};

use crate::real::Real;
use crate::tape::Gradients;
use crate::tensor::Tensor;

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

/// Handle to one entry of a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    /// Updated by an optimizer from gradients.
    Trainable,
    /// Saved with the model but not trained (e.g. batch-norm running stats).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Entry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
    pub kind: EntryKind,
}

/// Named, ordered collection of a network's parameters and buffers.
///
/// Gradients accumulate (`+=`) across [`ParamStore::accumulate`] calls until
/// [`ParamStore::zero_grads`] clears them.
#[derive(Debug)]
pub struct ParamStore<T> {
    uid: u64,
    entries: Vec<Entry<T>>,
}

impl<T> Clone for ParamStore<T>
where
    T: Clone,
{
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            entries: self.entries.clone(),
        }
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    fn push(&mut self, name: &str, value: Tensor<T>, kind: EntryKind) -> ParamId {
        assert!(self.find(name).is_none(), "duplicate parameter name `{name}`");
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad: None,
            kind,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_param(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.push(name, value, EntryKind::Trainable)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.push(name, value, EntryKind::Buffer)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == EntryKind::Trainable)
            .map(|(i, _)| ParamId(i))
    }

    pub fn entry(&self, id: ParamId) -> &Entry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&[T]> {
        self.entries[id.0].grad.as_deref()
    }

    pub fn kind(&self, id: ParamId) -> EntryKind {
        self.entries[id.0].kind
    }

    /// Total element count of the trainable entries.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Adds the gradients recorded for this store's parameters on a tape.
    ///
    /// Every trainable entry ends up with a populated gradient; entries that
    /// did not reach the loss get zeros.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (key, g) in grads.param_grads() {
            if key.store != self.uid {
                continue;
            }
            let entry = &mut self.entries[key.id.0];
            if entry.kind != EntryKind::Trainable {
                continue;
            }
            match &mut entry.grad {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += *v;
                    }
                }
                None => entry.grad = Some(g.to_vec()),
            }
        }
        for e in &mut self.entries {
            if e.kind == EntryKind::Trainable && e.grad.is_none() {
                e.grad = Some(vec![T::ZERO; e.value.numel()]);
            }
        }
    }

    /// Copy of the store in another precision. Gradients are dropped.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    grad: None,
                    kind: e.kind,
                })
                .collect(),
        }
    }

    /// Overwrites every value from `other`, which must have identical
    /// names and shapes in the same order.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) {
        assert_eq!(self.entries.len(), other.entries.len());
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            assert_eq!(dst.name, src.name);
            assert_eq!(dst.value.shape(), src.value.shape());
            dst.value = src.value.clone();
        }
    }

    /// Little-endian bytes of every value, in entry order.
    pub fn value_bytes(&self) -> Vec<u8>
    where
        T: Real,
    {
        let mut out = Vec::new();
        for e in &self.entries {
            for v in e.value.data() {
                out.extend_from_slice(&v.to_f64().to_le_bytes());
            }
        }
        out
    }
}
