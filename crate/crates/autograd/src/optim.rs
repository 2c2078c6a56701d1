//! First-order optimizers over a [`ParamStore`]. Both leave gradients in
//! place; callers zero them between steps.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::store::{EntryKind, ParamStore};

/// SGD with classical momentum and L2 weight decay.
///
/// Per trainable entry `w` with gradient `grad`:
/// `g = grad + weight_decay * w; v = momentum * v + g; w -= learning_rate * v`.
#[derive(Clone, Debug)]
pub struct SgdState<T> {
    pub learning_rate: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Real> SgdState<T> {
    pub fn new(learning_rate: T, momentum: T, weight_decay: T) -> Result<Self> {
        if !(learning_rate > T::ZERO) {
            return Err(TensorError::Invalid(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if momentum < T::ZERO || momentum >= T::ONE {
            return Err(TensorError::Invalid(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        if weight_decay < T::ZERO {
            return Err(TensorError::Invalid(format!(
                "weight decay must be non-negative, got {weight_decay}"
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self, index: usize) -> Option<&[T]> {
        self.velocity.get(index).and_then(|v| v.as_deref())
    }

    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        check_grads(store)?;
        self.velocity.resize(store.len(), None);
        let (lr, mom, wd) = (self.learning_rate, self.momentum, self.weight_decay);
        for id in store.trainable_ids().collect::<Vec<_>>() {
            let grad = store.grad(id).expect("checked").to_vec();
            let vel = self.velocity[id.index()].get_or_insert_with(|| vec![T::ZERO; grad.len()]);
            let w = store.value_mut(id).data_mut();
            for ((wi, vi), gi) in w.iter_mut().zip(vel.iter_mut()).zip(grad) {
                let g = gi + wd * *wi;
                *vi = mom * *vi + g;
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }
}

fn check_grads<T: Real>(store: &ParamStore<T>) -> Result<()> {
    for e in store.entries() {
        if e.kind == EntryKind::Trainable && e.grad.is_none() {
            return Err(TensorError::MissingGrad(e.name.clone()));
        }
    }
    Ok(())
}

/// Adam with bias correction, used for the adversarial networks.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    steps: u32,
    m: Vec<Option<Vec<T>>>,
    v: Vec<Option<Vec<T>>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(learning_rate: T, beta1: T, beta2: T) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            eps: T::from_f64(1e-8),
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        check_grads(store)?;
        self.steps += 1;
        self.m.resize(store.len(), None);
        self.v.resize(store.len(), None);
        let t = self.steps as f64;
        let c1 = T::from_f64(1.0 - self.beta1.to_f64().powf(t));
        let c2 = T::from_f64(1.0 - self.beta2.to_f64().powf(t));
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        for id in store.trainable_ids().collect::<Vec<_>>() {
            let grad = store.grad(id).expect("checked").to_vec();
            let m = self.m[id.index()].get_or_insert_with(|| vec![T::ZERO; grad.len()]);
            let v = self.v[id.index()].get_or_insert_with(|| vec![T::ZERO; grad.len()]);
            let w = store.value_mut(id).data_mut();
            for i in 0..grad.len() {
                m[i] = b1 * m[i] + (T::ONE - b1) * grad[i];
                v[i] = b2 * v[i] + (T::ONE - b2) * grad[i] * grad[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
