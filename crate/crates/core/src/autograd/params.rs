use super::tape::{Gradients, Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{MglError, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// One forward pass: a fresh tape over read-only parameters. Parameters are
/// bound to tape leaves on first use.
pub struct Session<'p, T: Real> {
    pub tape: Tape<T>,
    params: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
}

impl<'p, T: Real> Session<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id).clone(), true);
        self.bound[id.0] = Some(v);
        v
    }

    /// Backpropagate `loss` and return one gradient per parameter (zeros for
    /// parameters the loss does not depend on).
    pub fn gradients(self, loss: Var) -> Result<Vec<Tensor<T>>> {
        let Session {
            tape,
            params,
            bound,
        } = self;
        let mut grads: Gradients<T> = tape.backward(loss)?;
        Ok(params
            .ids()
            .map(|id| {
                bound[id.0]
                    .and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(params.get(id).shape()))
            })
            .collect())
    }
}

/// Learning rate of the poly schedule: `base_lr · (1 − iter/max_iter)^power`.
pub fn poly_lr(base_lr: f64, iter: usize, max_iter: usize, power: f64) -> Result<f64> {
    if iter >= max_iter {
        return Err(MglError::Config(format!(
            "iteration {iter} outside schedule of {max_iter} steps"
        )));
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub max_iter: usize,
}

/// Momentum buffers, one per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState<T> {
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Real> SgdState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self {
            velocity: params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect(),
        }
    }
}

/// SGD with heavy-ball momentum under the poly schedule:
/// `v ← μ·v + g`, `p ← p − lr·v`. Returns the learning rate used.
pub fn sgd_poly_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut SgdState<T>,
    iter: usize,
    cfg: &SgdConfig,
) -> Result<f64> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(MglError::shape(format!(
            "sgd step: {} params, {} grads, {} momentum buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    let lr = poly_lr(cfg.base_lr, iter, cfg.max_iter, cfg.power)?;
    let (lr_t, mu) = (T::of(lr), T::of(cfg.momentum));
    for id in params.ids() {
        let g = &grads[id.0];
        let v = &mut state.velocity[id.0];
        if g.shape() != v.shape() {
            return Err(MglError::shape(format!(
                "gradient for {} has shape {:?}, parameter {:?}",
                params.name(id),
                g.shape(),
                v.shape()
            )));
        }
        for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = mu * *vi + gi;
        }
        for (pi, &vi) in params.get_mut(id).data_mut().iter_mut().zip(v.data()) {
            *pi -= lr_t * vi;
        }
    }
    Ok(lr)
}
