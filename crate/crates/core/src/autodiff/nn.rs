//! Parameter storage, layers and the Adam optimizer.

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Grads, Tape, Var};
use super::tensor::Tensor;
use crate::container::Container;
use crate::error::{ensure, Result};
use crate::scalar::Real;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in [`ParamSet::values`].
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Real> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

/// Tape handles for every parameter of a set.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet { names: Vec::new(), values: Vec::new() }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
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

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Places every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        Bound { vars: self.values.iter().map(|v| tape.leaf(v.clone(), requires_grad)).collect() }
    }

    /// Gradients for every parameter, zero where the loss does not depend on it.
    pub fn collect_grads(&self, grads: &mut Grads<T>, bound: &Bound) -> Vec<Tensor<T>> {
        self.values
            .iter()
            .zip(&bound.vars)
            .map(|(v, &var)| grads.take(var).unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { names: self.names.clone(), values: self.values.iter().map(Tensor::cast).collect() }
    }

    /// Stores every tensor under `prefix/name`.
    pub fn write_to(&self, c: &mut Container, prefix: &str) {
        for (name, v) in self.names.iter().zip(&self.values) {
            let a = ArrayD::from_shape_vec(IxDyn(v.shape()), v.data().to_vec()).expect("tensor shape");
            c.put_real(&format!("{prefix}/{name}"), &a);
        }
    }

    /// Overwrites parameters from `prefix/name` entries; shapes must match.
    pub fn read_from(&mut self, c: &Container, prefix: &str) -> Result<()> {
        for (name, v) in self.names.iter().zip(self.values.iter_mut()) {
            let a = c.real::<T>(&format!("{prefix}/{name}"))?;
            ensure!(
                a.shape() == v.shape(),
                Shape,
                "parameter {name}: stored shape {:?}, expected {:?}",
                a.shape(),
                v.shape()
            );
            *v = Tensor::new(v.shape().to_vec(), a.iter().copied().collect())?;
        }
        Ok(())
    }
}

/// Seeded source of initial weights.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let d = Normal::new(0.0, std).expect("std is finite and non-negative");
        Tensor::from_fn(shape, |_| T::lit(d.sample(&mut self.rng)))
    }

    /// He-normal weights for a layer with the given fan-in.
    pub fn he<T: Real>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.normal(shape, (2.0 / fan_in as f64).sqrt())
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Square-kernel convolution with bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// He-initialised `cin -> cout` convolution with "same"-style padding.
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        (cin, cout, k): (usize, usize, usize),
        stride: usize,
    ) -> Self {
        Self::with_gain(params, init, name, (cin, cout, k), stride, 1.0)
    }

    /// As [`Conv::new`] with the weights scaled by `gain` (0 gives a zero layer).
    pub fn with_gain<T: Real>(
        params: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        (cin, cout, k): (usize, usize, usize),
        stride: usize,
        gain: f64,
    ) -> Self {
        let mut w = init.he::<T>(&[cout, cin, k, k], cin * k * k);
        w.scale_in_place(T::lit(gain));
        let w = params.add(format!("{name}.w"), w);
        let b = params.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv { w, b, stride, pad: k / 2 }
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        tape.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)
    }
}

/// Fully connected layer on `[N, K]` inputs.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<T: Real>(params: &mut ParamSet<T>, init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        let w = params.add(format!("{name}.w"), init.normal(&[cout, cin], (1.0 / cin as f64).sqrt()));
        // A random bias keeps the output away from zero for blank inputs.
        let b = params.add(format!("{name}.b"), init.normal(&[cout], 0.1));
        Dense { w, b }
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        tape.linear(x, p.var(self.w), Some(p.var(self.b)))
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: f64) -> Self {
        let zeros = || params.values().iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for (((p, g), m), v) in params.values_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pi, &gi), mi), vi) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
    }
}
