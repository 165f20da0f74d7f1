//! Named parameter storage and the small layers the model is built from.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Padding, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        Ok(ParamId(id))
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total scalar count.
    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Put every parameter on `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Binding {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Binding { vars }
    }

    /// Replace values from `other`, which must hold the same names and shapes.
    /// Every mismatch is reported, not only the first.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        let mut problems = Vec::new();
        for (name, t) in other.iter() {
            match self.find(name) {
                None => problems.push(format!("unexpected tensor {name}")),
                Some(id) if self.get(id).shape() != t.shape() => problems.push(format!(
                    "{name}: expected {:?}, found {:?}",
                    self.get(id).shape(),
                    t.shape()
                )),
                Some(_) => {}
            }
        }
        for name in &self.names {
            if other.find(name).is_none() {
                problems.push(format!("missing tensor {name}"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::invalid(format!("parameter mismatch: {}", problems.join("; "))));
        }
        for (name, t) in other.iter() {
            let id = self.find(name).expect("checked above");
            *self.get_mut(id) = t.clone();
        }
        Ok(())
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Handles in store order, e.g. the leaves a gradient check created.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.random_range(-bound..=bound)))
}

pub fn normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape.to_vec(), |_| T::lit(dist.sample(rng)))
}

/// `x . W + b` over rows of `x: [n, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Linear {
            weight: store.add(format!("{name}.weight"), uniform(&[d_in, d_out], bound, rng))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros([d_out]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Binding, x: Var) -> Result<Var> {
        let y = g.matmul(x, b.var(self.weight))?;
        g.add_row_bias(y, b.var(self.bias))
    }
}

/// Linear, ReLU, Linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Mlp {
            first: Linear::new(store, &format!("{name}.0"), d_in, hidden, rng)?,
            second: Linear::new(store, &format!("{name}.1"), hidden, d_out, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Binding, x: Var) -> Result<Var> {
        let h = self.first.forward(g, b, x)?;
        let h = g.relu(h)?;
        self.second.forward(g, b, h)
    }
}

pub const NORM_EPS: f64 = 1e-5;

/// Layer normalization over the last axis with learned scale and shift.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(Norm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([d]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros([d]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Binding, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, T::lit(NORM_EPS))?;
        g.affine_lastdim(n, b.var(self.gamma), b.var(self.beta))
    }

    /// Normalize `x: [C, H, W]` across channels at every pixel.
    pub fn forward_channels<T: Scalar>(&self, g: &mut Graph<T>, b: &Binding, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("channel norm", &s, &[]));
        }
        let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
        let rows = g.transpose(flat)?;
        let y = self.forward(g, b, rows)?;
        let back = g.transpose(y)?;
        g.reshape(back, &s)
    }
}

/// Square-kernel 2D convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: Padding,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(&[c_out, c_in, k, k], bound, rng))?;
        let bias = if with_bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros([c_out]))?)
        } else {
            None
        };
        Ok(Conv {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Binding, x: Var) -> Result<Var> {
        g.conv2d(x, b.var(self.weight), self.bias.map(|id| b.var(id)), self.stride, self.padding)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn store_counts_and_rejects_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f64>::new();
        Linear::new(&mut s, "a", 3, 4, &mut rng).unwrap();
        assert_eq!(s.num_params(), 16);
        assert!(Linear::new(&mut s, "a", 3, 4, &mut rng).is_err());
    }

    #[test]
    fn load_from_reports_every_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = ParamStore::<f64>::new();
        Linear::new(&mut a, "l", 2, 2, &mut rng).unwrap();
        let mut b = ParamStore::<f64>::new();
        Linear::new(&mut b, "l", 3, 2, &mut rng).unwrap();
        b.add("extra", Tensor::zeros([1])).unwrap();
        let msg = a.load_from(&b).unwrap_err().to_string();
        assert!(msg.contains("l.weight") && msg.contains("extra"), "{msg}");
    }

    #[test]
    fn channel_norm_zero_mean_per_pixel() {
        let mut s = ParamStore::<f64>::new();
        let n = Norm::new(&mut s, "n", 3).unwrap();
        let mut g = Graph::new();
        let b = s.bind(&mut g, false);
        let x = g.constant(Tensor::from_fn([3, 2, 2], |i| (i * i) as f64));
        let y = n.forward_channels(&mut g, &b, x).unwrap();
        let v = g.value(y);
        for p in 0..4 {
            let m: f64 = (0..3).map(|c| v.data()[c * 4 + p]).sum();
            assert!(m.abs() < 1e-9);
        }
    }
}
