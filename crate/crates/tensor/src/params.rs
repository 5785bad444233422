use std::collections::HashMap;

use crate::array::Array;
use crate::error::{Result, TensorError};
use crate::graph::{Gradients, Graph};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// Running mean/variance buffers of one batch-norm layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunningStats {
    pub mean: BufferId,
    pub var: BufferId,
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Array<T>,
    pub grad: Array<T>,
    velocity: Option<Array<T>>,
}

/// Non-learnable state saved with the model (batch-norm running statistics).
#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Array<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn plain(lr: f64) -> Self {
        Self {
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }
}

/// Owns every learnable tensor and buffer of a model, addressed by id or unique name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    index: HashMap<String, Slot>,
}

#[derive(Clone, Copy, Debug)]
enum Slot {
    Param(usize),
    Buffer(usize),
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn claim(&mut self, name: &str, slot: Slot) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(TensorError::DuplicateName(name.to_string()));
        }
        self.index.insert(name.to_string(), slot);
        Ok(())
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Array<T>) -> Result<ParamId> {
        let name = name.into();
        self.claim(&name, Slot::Param(self.params.len()))?;
        let grad = Array::zeros(value.shape());
        self.params.push(Parameter {
            name,
            value,
            grad,
            velocity: None,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Array<T>) -> Result<BufferId> {
        let name = name.into();
        self.claim(&name, Slot::Buffer(self.buffers.len()))?;
        self.buffers.push(Buffer { name, value });
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array<T> {
        &self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Array<T> {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Array<T> {
        &mut self.buffers[id.0].value
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        match self.index.get(name)? {
            Slot::Param(i) => Some(ParamId(*i)),
            Slot::Buffer(_) => None,
        }
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        match self.index.get(name)? {
            Slot::Buffer(i) => Some(BufferId(*i)),
            Slot::Param(_) => None,
        }
    }

    /// Number of learnable scalars (buffers excluded).
    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Adds the gradients of every parameter node in `graph` into the store.
    pub fn accumulate(&mut self, graph: &Graph<T>, grads: &Gradients<T>) {
        for (id, var) in graph.param_nodes() {
            if let Some(g) = grads.get(var) {
                self.params[id.0].grad.add_assign(g);
            }
        }
    }

    /// Folds the batch statistics recorded by train-mode batch-norm nodes into the
    /// running buffers: `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_batch_stats(&mut self, graph: &Graph<T>, momentum: f64) {
        let m = T::lit(momentum);
        let keep = T::one() - m;
        for upd in graph.pending_stats() {
            for (dst, src) in [(upd.running.mean, &upd.mean), (upd.running.var, &upd.var)] {
                for (r, &b) in self.buffers[dst.0].value.data_mut().iter_mut().zip(src.iter()) {
                    *r = keep * *r + m * b;
                }
            }
        }
    }

    /// Plain SGD: `p <- p - lr * grad`, then clears gradients.
    pub fn sgd_step(&mut self, lr: f64) {
        self.sgd_step_with(&SgdConfig::plain(lr));
    }

    pub fn sgd_step_with(&mut self, cfg: &SgdConfig) {
        let lr = T::lit(cfg.lr);
        let mu = T::lit(cfg.momentum);
        let wd = T::lit(cfg.weight_decay);
        for p in &mut self.params {
            if cfg.weight_decay != 0.0 {
                for (g, &v) in p.grad.data_mut().iter_mut().zip(p.value.data()) {
                    *g += wd * v;
                }
            }
            if cfg.momentum != 0.0 {
                let vel = p.velocity.get_or_insert_with(|| Array::zeros(p.value.shape()));
                for (v, &g) in vel.data_mut().iter_mut().zip(p.grad.data()) {
                    *v = mu * *v + g;
                }
                for (x, &v) in p.value.data_mut().iter_mut().zip(vel.data()) {
                    *x -= lr * v;
                }
            } else {
                for (x, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                    *x -= lr * g;
                }
            }
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Same names, shapes and values in another precision. Optimizer state is dropped.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: Array::zeros(p.value.shape()),
                    velocity: None,
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    value: b.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Anything that owns a [`ParamStore`]; lets generic utilities perturb parameters.
pub trait HasParams<T> {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
}

impl<T> HasParams<T> for ParamStore<T> {
    fn params(&self) -> &ParamStore<T> {
        self
    }
    fn params_mut(&mut self) -> &mut ParamStore<T> {
        self
    }
}
