//! Named parameter storage, tape binding, and the small layer types the
//! model is assembled from.

use std::ops::Index;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(Error::dim(
                "param set",
                format!("{}: {:?} vs {:?}", self.names[id.0], value.shape(), self.tensors[id.0].shape()),
            ));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Total number of scalars across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replaces every tensor from `(name, tensor)` records; names and shapes
    /// must match this store exactly.
    pub fn load_records(&mut self, records: Vec<(String, Tensor<T>)>) -> Result<()> {
        if records.len() != self.len() {
            return Err(Error::Format(format!(
                "expected {} parameter records, found {}",
                self.len(),
                records.len()
            )));
        }
        for (i, (name, tensor)) in records.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(Error::Format(format!("expected parameter {}, found {name}", self.names[i])));
            }
            self.set(ParamId(i), tensor)?;
        }
        Ok(())
    }
}

/// Tape variables for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps leaves created elsewhere, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Creates parameters under a dotted name prefix, drawing initial values
/// from a seeded generator.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A builder whose names are nested under `name`.
    pub fn scope(&mut self, name: &str) -> Builder<'_, T> {
        Builder {
            prefix: self.qualify(name),
            store: self.store,
            rng: self.rng,
        }
    }

    fn qualify(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let full = self.qualify(name);
        self.store.add(full, value)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::ones(shape.to_vec()))
    }

    /// Uniform in `[-bound, bound)`, drawn in `f64` then rounded, so both
    /// precisions see the same initial values.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let numel: usize = shape.iter().product();
        let data: Vec<T> = (0..numel)
            .map(|_| T::lit(self.rng.gen_range(-bound..bound)))
            .collect();
        self.tensor(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn linear(&mut self, name: &str, cin: usize, cout: usize, bias: bool) -> Linear {
        let mut s = self.scope(name);
        let bound = 1.0 / (cin as f64).sqrt();
        let weight = s.uniform("weight", &[cin, cout], bound);
        let bias = bias.then(|| s.uniform("bias", &[cout], bound));
        Linear { weight, bias }
    }

    pub fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize, stride: usize) -> Conv {
        let mut s = self.scope(name);
        let bound = 1.0 / ((k * k * cin) as f64).sqrt();
        let kernel = s.uniform("kernel", &[k, k, cin, cout], bound);
        let bias = s.uniform("bias", &[cout], bound);
        Conv {
            kernel,
            bias,
            stride,
            padding: k / 2,
        }
    }

    pub fn zero_conv(&mut self, name: &str, k: usize, cin: usize, cout: usize) -> Conv {
        let mut s = self.scope(name);
        let kernel = s.zeros("kernel", &[k, k, cin, cout]);
        let bias = s.zeros("bias", &[cout]);
        Conv {
            kernel,
            bias,
            stride: 1,
            padding: k / 2,
        }
    }

    pub fn depthwise(&mut self, name: &str, k: usize, c: usize) -> Depthwise {
        let mut s = self.scope(name);
        let bound = 1.0 / ((k * k) as f64).sqrt();
        let kernel = s.uniform("kernel", &[k, k, c], bound);
        let bias = s.uniform("bias", &[c], bound);
        Depthwise {
            kernel,
            bias,
            padding: k / 2,
        }
    }

    pub fn norm(&mut self, name: &str, c: usize) -> Norm {
        let mut s = self.scope(name);
        Norm {
            gamma: s.ones("gamma", &[c]),
            beta: s.zeros("beta", &[c]),
        }
    }
}

/// Affine map over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn forward<T: Real>(&self, tape: &Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p[self.weight], self.bias.map(|b| p[b]))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    pub fn forward<T: Real>(&self, tape: &Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p[self.kernel], p[self.bias], self.stride, self.padding)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Depthwise {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub padding: usize,
}

impl Depthwise {
    pub fn forward<T: Real>(&self, tape: &Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.depthwise_conv2d(x, p[self.kernel], p[self.bias], self.padding)
    }
}

/// Layer-norm affine parameters.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Norm {
    pub fn forward<T: Real>(&self, tape: &Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gamma], p[self.beta], T::lit(LAYER_NORM_EPS))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn builder_scopes_names_and_is_seeded() {
        let build = || {
            let mut store = ParamStore::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut b = Builder::new(&mut store, &mut rng);
            let mut block = b.scope("block");
            block.linear("proj", 4, 2, true);
            block.norm("ln", 2);
            store
        };
        let a = build();
        assert_eq!(a, build());
        let names: Vec<&str> = a.iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            ["block.proj.weight", "block.proj.bias", "block.ln.gamma", "block.ln.beta"]
        );
        assert_eq!(a.num_scalars(), 8 + 2 + 2 + 2);
    }

    #[test]
    fn load_records_checks_names_and_shapes() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::zeros(vec![2]));
        assert!(store
            .clone()
            .load_records(vec![("v".into(), Tensor::zeros(vec![2]))])
            .is_err());
        assert!(store
            .clone()
            .load_records(vec![("w".into(), Tensor::zeros(vec![3]))])
            .is_err());
        store
            .load_records(vec![("w".into(), Tensor::ones(vec![2]))])
            .unwrap();
        assert_eq!(store.get(ParamId(0)).data(), &[1.0, 1.0]);
    }
}
