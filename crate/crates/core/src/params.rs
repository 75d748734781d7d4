//! Named parameter/buffer storage plus the Adam optimizer.
//!
//! Parameters are registered once at model construction in a deterministic
//! order; graphs bind them per forward pass and export gradients back here.
//! Non-trainable entries (batch-norm running statistics) live in the same
//! table so checkpoints capture the full model state.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

struct Entry<T> {
    name: String,
    value: ArrayD<T>,
    grad: ArrayD<T>,
    trainable: bool,
}

pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<T>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        let grad = ArrayD::zeros(value.raw_dim());
        self.entries.push(Entry { name, value, grad, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &ArrayD<T> {
        &self.entries[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &ArrayD<T>) {
        self.entries[id.0].grad.zip_mut_with(g, |a, b| *a += *b);
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(T::zero());
        }
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Global L2 norm of all trainable gradients.
    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for e in self.entries.iter().filter(|e| e.trainable) {
            for g in e.grad.iter() {
                let v = g.to_f64_lossy();
                acc += v * v;
            }
        }
        acc.sqrt()
    }

    /// Scale every trainable gradient so the global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let k = T::c(max_norm / norm);
            for e in self.entries.iter_mut().filter(|e| e.trainable) {
                e.grad.mapv_inplace(|g| g * k);
            }
        }
    }
}

/// Hierarchical name scope used while building a model, so parameters get
/// stable dotted names like `stem.cb1.conv.weight`.
pub struct Scope<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    path: String,
}

impl<'a, T: Scalar> Scope<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Scope { store, rng, path: String::new() }
    }

    pub fn child(&mut self, name: &str) -> Scope<'_, T> {
        let path = if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.path)
        };
        Scope { store: &mut *self.store, rng: &mut *self.rng, path }
    }

    fn full(&self, name: &str) -> String {
        if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.path)
        }
    }

    /// He (fan-in) normal initialization; randomness drawn in f64 so f32 and
    /// f64 stores see the same stream.
    pub fn he_normal(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(self.rng);
            data.push(T::c(z * std));
        }
        let full = self.full(name);
        self.store
            .register(full, ArrayD::from_shape_vec(IxDyn(shape), data).unwrap(), true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64, trainable: bool) -> ParamId {
        let full = self.full(name);
        self.store
            .register(full, ArrayD::from_elem(IxDyn(shape), T::c(v)), trainable)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.constant(name, shape, 0.0, true)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.constant(name, shape, v, false)
    }

    /// Uniform in [-bound, bound]; used for the small linear-map projections.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = self.rng.random_range(-bound..bound);
            data.push(T::c(u));
        }
        let full = self.full(name);
        self.store
            .register(full, ArrayD::from_shape_vec(IxDyn(shape), data).unwrap(), true)
    }
}

/// Adam with bias correction; moments are kept per trainable entry.
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: usize,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let m = store
            .entries
            .iter()
            .map(|e| ArrayD::zeros(e.value.raw_dim()))
            .collect();
        let v = store
            .entries
            .iter()
            .map(|e| ArrayD::zeros(e.value.raw_dim()))
            .collect();
        Adam {
            lr: T::c(lr),
            beta1: T::c(beta1),
            beta2: T::c(beta2),
            eps: T::c(1e-8),
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (i, e) in store.entries.iter_mut().enumerate() {
            if !e.trainable {
                continue;
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut e.value)
                .and(m)
                .and(v)
                .and(&e.grad)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                });
        }
        store.zero_grads();
    }

    /// Snapshot of the optimizer moments as named tensors for checkpointing.
    pub fn state_tensors<'s>(
        &'s self,
        store: &'s ParamStore<T>,
    ) -> impl Iterator<Item = (String, &'s ArrayD<T>)> + 's {
        let ms = self
            .m
            .iter()
            .enumerate()
            .map(|(i, m)| (format!("opt.m.{}", store.entries[i].name), m));
        let vs = self
            .v
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("opt.v.{}", store.entries[i].name), v));
        ms.chain(vs)
    }

    pub fn restore_state(
        &mut self,
        store: &ParamStore<T>,
        step: usize,
        mut fetch: impl FnMut(&str) -> Result<ArrayD<T>>,
    ) -> Result<()> {
        self.step = step;
        for (i, e) in store.entries.iter().enumerate() {
            let m = fetch(&format!("opt.m.{}", e.name))?;
            let v = fetch(&format!("opt.v.{}", e.name))?;
            if m.shape() != e.value.shape() || v.shape() != e.value.shape() {
                return Err(Error::checkpoint(format!(
                    "optimizer state shape mismatch for {}",
                    e.name
                )));
            }
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}
