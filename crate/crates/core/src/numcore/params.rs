use indexmap::IndexMap;
use rand::Rng;

use super::tensor::Tensor;
use super::NumError;

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    /// First and second moment estimates for the optimizer.
    pub m: Tensor,
    pub v: Tensor,
}

/// Named trainable parameters, kept in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
    /// Number of optimizer steps taken so far.
    pub step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), NumError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NumError::DuplicateParam(name));
        }
        let shape = value.shape().to_vec();
        self.params.insert(
            name,
            Param {
                value,
                grad: None,
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
            },
        );
        Ok(())
    }

    /// Uniform init in `±sqrt(6/(fan_in+fan_out))`.
    pub fn insert_xavier<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        rng: &mut R,
    ) -> Result<(), NumError> {
        let (fan_in, fan_out) = match shape {
            [n] => (*n, *n),
            [a, b] => (*a, *b),
            _ => {
                let n: usize = shape.iter().product();
                (n, n)
            }
        };
        let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<(), NumError> {
        use rand_distr::{Distribution, Normal};
        let dist = Normal::new(0.0, std).map_err(|_| NumError::BadInit(std))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.get_index_of(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub(crate) fn value_at(&self, idx: usize) -> &Tensor {
        &self.params[idx].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Zero gradients for parameters the last pass did not touch (e.g.
    /// attention weights on an edgeless batch).
    pub fn fill_missing_grads(&mut self) {
        for p in self.params.values_mut() {
            if p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
    }

    pub(crate) fn accumulate_grad(&mut self, idx: usize, g: Option<&[f64]>) {
        let p = &mut self.params[idx];
        let grad = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
        if let Some(g) = g {
            grad.data_mut().iter_mut().zip(g).for_each(|(d, s)| *d += s);
        }
    }

    /// Copies values only, leaving grads and moments untouched.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<(), NumError> {
        for (name, p) in self.params.iter_mut() {
            let src = other
                .params
                .get(name)
                .ok_or_else(|| NumError::UnknownParam(name.clone()))?;
            if src.value.shape() != p.value.shape() {
                return Err(NumError::ShapeMismatch {
                    op: "load_values_from",
                    lhs: p.value.shape().to_vec(),
                    rhs: src.value.shape().to_vec(),
                });
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}
