use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::real::Real;
use super::tape::{Gradients, Tape, Var};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param<F: Real> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Arc<Vec<F>>,
}

impl<F: Real> Param<F> {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Named learnable arrays, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F: Real> {
    params: Vec<Param<F>>,
    index: HashMap<String, ParamId>,
}

/// Initialization schemes, sampled in 64-bit and rounded to the store precision.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    Uniform(f64),
    Normal(f64),
    UniformRange(f64, f64),
}

impl Init {
    pub fn sample(self, n: usize, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Constant(c) => vec![c; n],
            Init::Uniform(bound) => Init::UniformRange(-bound, bound).sample(n, rng),
            Init::UniformRange(lo, hi) => {
                let d = Uniform::new(lo, hi).expect("valid uniform range");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("valid normal std");
                (0..n).map(|_| d.sample(rng)).collect()
            }
        }
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut impl Rng) -> ParamId {
        let n = shape.iter().product();
        let values = init.sample(n, rng).into_iter().map(F::from_f64).collect();
        self.insert(name.into(), shape.to_vec(), values)
    }

    pub fn insert(&mut self, name: String, shape: Vec<usize>, values: Vec<F>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "parameter `{name}` size");
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            shape,
            value: Arc::new(values),
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn values(&self, id: ParamId) -> &[F] {
        &self.params[id.0].value
    }

    /// Mutable access; copies the buffer if a tape still shares it.
    pub fn values_mut(&mut self, id: ParamId) -> &mut [F] {
        Arc::make_mut(&mut self.params[id.0].value).as_mut_slice()
    }

    pub fn set(&mut self, id: ParamId, values: Vec<F>) -> Result<()> {
        let p = &mut self.params[id.0];
        if values.len() != p.len() {
            return Err(Error::ShapeMismatch {
                name: p.name.clone(),
                expected: p.shape.clone(),
                found: vec![values.len()],
            });
        }
        p.value = Arc::new(values);
        Ok(())
    }

    /// Registers every parameter as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<F>) -> Bound {
        let vars = self.params.iter().map(|p| tape.leaf(Arc::clone(&p.value), &p.shape)).collect();
        Bound { vars }
    }

    /// Same names, shapes and values in another precision.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.insert(
                p.name.clone(),
                p.shape.clone(),
                p.value.iter().map(|v| G::from_f64(v.as_f64())).collect(),
            );
        }
        out
    }
}

/// Tape handles for every parameter of a store, by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Collects per-parameter gradients, zero-filled where none flowed.
    pub fn gradients<F: Real>(&self, store: &ParamStore<F>, grads: &mut Gradients<F>) -> Vec<Vec<F>> {
        self.vars
            .iter()
            .zip(&store.params)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| vec![F::zero(); p.len()]))
            .collect()
    }
}
