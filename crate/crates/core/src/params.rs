//! Named parameter tensors and their binding onto a [`Graph`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamGrads, Real, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Whether AdamW weight decay applies.
    pub decay: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    specs: Vec<ParamSpec>,
    data: Vec<Vec<T>>,
}

impl<T: Real> Default for Params<T> {
    fn default() -> Self {
        Params { specs: Vec::new(), data: Vec::new() }
    }
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], decay: bool, values: Vec<T>) -> usize {
        let spec = ParamSpec { name: name.into(), shape: shape.to_vec(), decay };
        assert_eq!(spec.numel(), values.len(), "parameter {} size", spec.name);
        assert!(self.id_of(&spec.name).is_none(), "duplicate parameter {}", spec.name);
        self.specs.push(spec);
        self.data.push(values);
        self.specs.len() - 1
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize], decay: bool) -> usize {
        let n = shape.iter().product();
        self.add(name, shape, decay, vec![T::zero(); n])
    }

    pub fn filled(&mut self, name: impl Into<String>, shape: &[usize], decay: bool, v: f64) -> usize {
        let n = shape.iter().product();
        self.add(name, shape, decay, vec![T::lit(v); n])
    }

    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> usize {
        let n: usize = shape.iter().product();
        let v = (0..n).map(|_| T::lit(std * rng.sample::<f64, _>(StandardNormal))).collect();
        self.add(name, shape, true, v)
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn spec(&self, id: usize) -> &ParamSpec {
        &self.specs[id]
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn get(&self, id: usize) -> &[T] {
        &self.data[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut [T] {
        &mut self.data[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&[T]> {
        self.id_of(name).map(|i| self.get(i))
    }

    pub fn set_decay(&mut self, id: usize, decay: bool) {
        self.specs[id].decay = decay;
    }

    pub fn total_elements(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            specs: self.specs.clone(),
            data: self.data.iter().map(|d| d.iter().map(|&x| U::lit(x.to_f64_lossy())).collect()).collect(),
        }
    }

    /// Largest absolute elementwise difference to another store of the same
    /// layout.
    pub fn max_abs_diff(&self, other: &Params<T>) -> f64 {
        assert_eq!(self.specs, other.specs, "parameter layouts differ");
        self.data
            .iter()
            .zip(&other.data)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| (x - y).abs().to_f64_lossy()))
            .fold(0.0, f64::max)
    }

    /// Gradient buffers laid out like the parameters, zero where a parameter
    /// was not reached.
    pub fn dense_grads(&self, grads: &ParamGrads<T>) -> Vec<Vec<T>> {
        (0..self.len()).map(|id| grads.get(id).map_or_else(|| vec![T::zero(); self.specs[id].numel()], <[T]>::to_vec)).collect()
    }
}

/// A graph under construction plus lazily bound parameter leaves.
pub struct Tape<'p, T: Real> {
    pub g: Graph<T>,
    params: &'p Params<T>,
    vars: Vec<Option<Var>>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p Params<T>) -> Self {
        Tape { g: Graph::new(), params, vars: vec![None; params.len()] }
    }

    /// Leaf for parameter `id`, created on first use.
    pub fn p(&mut self, id: usize) -> Var {
        if let Some(v) = self.vars[id] {
            return v;
        }
        let spec = self.params.spec(id);
        let v = self.g.param(id, self.params.get(id), &spec.shape);
        self.vars[id] = Some(v);
        v
    }

    pub fn params(&self) -> &'p Params<T> {
        self.params
    }
}
