use super::noise::NoiseSource;
use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;

/// Index of a tensor inside a [`Params`] store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn size(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Registers every tensor as a differentiable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound { vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect() }
    }
}

/// Parameters registered on one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Gradients in store order.
    pub fn gradients(&self, grads: &mut Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

/// Affine map `x W + b` with `W: in x out` and `b: 1 x out`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Normal initialisation with standard deviation `1/sqrt(in)`, zero bias.
    pub fn new(params: &mut Params, name: &str, inp: usize, out: usize, noise: &mut NoiseSource) -> Self {
        let std = 1.0 / (inp as f64).sqrt();
        Linear::with_init(params, name, noise.normal_tensor(inp, out).scale(std), Tensor::zeros(1, out))
    }

    pub fn with_init(params: &mut Params, name: &str, w: Tensor, b: Tensor) -> Self {
        let w = params.add(format!("{name}.w"), w);
        let b = params.add(format!("{name}.b"), b);
        Linear { w, b }
    }

    pub fn apply<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        x.matmul(bound.get(self.w)).add_row(bound.get(self.b))
    }
}
