use super::graph::Gradients;
use super::{Real, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Read access to parameter values, in whatever precision a graph runs in.
pub trait ParamValues<F: Real> {
    fn value(&self, id: ParamId) -> &Tensor<F>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor<f32>,
    pub grad: Tensor<f32>,
    pub adam_m: Tensor<f32>,
    pub adam_v: Tensor<f32>,
}

/// Named trainable tensors in registration order, with gradient and Adam
/// moment buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<f32>) -> Result<ParamId, TensorError> {
        let name = name.into();
        if self.by_name(&name).is_some() {
            return Err(TensorError::DuplicateParameter(name));
        }
        let zeros = Tensor::zeros(value.dims());
        self.params.push(Parameter {
            name,
            grad: zeros.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            value,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds `grads` into the stored gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients<f32>) {
        for (id, g) in grads.params() {
            self.params[id.0].grad.add_assign(g);
        }
    }

    pub fn accumulate_scaled(&mut self, grads: &Gradients<f32>, scale: f32) {
        for (id, g) in grads.params() {
            for (d, v) in self.params[id.0].grad.data_mut().iter_mut().zip(g.data()) {
                *d += scale * v;
            }
        }
    }

    /// L2 norm over every gradient entry, summed in f64.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: f32) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Copy of the parameter values in another precision.
    pub fn shadow<F: Real>(&self) -> ShadowParams<F> {
        ShadowParams {
            values: self.params.iter().map(|p| p.value.cast()).collect(),
        }
    }
}

impl ParamValues<f32> for ParamStore {
    fn value(&self, id: ParamId) -> &Tensor<f32> {
        &self.params[id.0].value
    }
}

/// Parameter values only, used for f64 evaluation and perturbation.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowParams<F: Real> {
    values: Vec<Tensor<F>>,
}

impl<F: Real> ShadowParams<F> {
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }
}

impl<F: Real> ParamValues<F> for ShadowParams<F> {
    fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.values[id.0]
    }
}
