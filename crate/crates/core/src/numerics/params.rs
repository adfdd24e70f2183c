use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use super::tensor::Tensor;
use super::NumericsError;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    value: Arc<Tensor>,
    grad: Option<Tensor>,
}

impl Parameter {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, NumericsError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NumericsError::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value: Arc::new(value),
            grad: None,
        });
        Ok(id)
    }

    /// Xavier-uniform initialised `[fan_in, fan_out]` matrix.
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId, NumericsError> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.add(name, Tensor::from_parts(vec![fan_in, fan_out], data))
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<ParamId, NumericsError> {
        self.add(name, Tensor::full(shape, value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub(crate) fn shared_value(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.params[id.0].value)
    }

    /// Mutable access to a parameter's value (copy-on-write if a graph still shares it).
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<(), NumericsError> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(acc) => acc.add_assign(g),
            None => p.grad = Some(g.clone()),
        }
    }

    pub fn grad_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.params[id.0].grad.as_mut()
    }

    /// Resets every gradient to zeros of the parameter's shape.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            match &mut p.grad {
                Some(g) => g.fill(0.0),
                None => p.grad = Some(Tensor::zeros(p.value.shape())),
            }
        }
    }

    /// Scales every gradient so that their joint L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self
            .params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .map(Tensor::sq_norm)
            .sum::<f64>()
            .sqrt();
        if norm > max_norm && norm.is_finite() {
            let s = max_norm / norm;
            for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
                g.scale_assign(s);
            }
        }
        norm
    }

    pub fn scale_grads(&mut self, s: f64) {
        for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
            g.scale_assign(s);
        }
    }
}
