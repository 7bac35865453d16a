//! Layer building blocks shared by the prompt and quality networks.
//!
//! Every layer is generic over its parameter slot `P`: `Tensor<T>` for stored
//! weights and [`Var`] once bound to a [`Graph`]. `map` defines the one
//! canonical parameter order used for binding, gradients, Adam state and
//! checkpoints; `visit_mut` must walk the same order.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{Graph, Real, Tensor, Var};

pub type MapFn<'a, 'p, P, Q> = dyn FnMut(String, &'p P) -> Q + 'a;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<P> {
    pub weight: P,
    pub bias: P,
    pub stride: usize,
    pub padding: usize,
}

impl<P> Conv<P> {
    pub fn map<'p, Q>(&'p self, prefix: &str, f: &mut MapFn<'_, 'p, P, Q>) -> Conv<Q> {
        Conv {
            weight: f(format!("{prefix}.weight"), &self.weight),
            bias: f(format!("{prefix}.bias"), &self.bias),
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut P)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

impl<T: Real> Conv<Tensor<T>> {
    /// He-uniform weights, zero bias.
    pub fn init(rng: &mut ChaCha8Rng, cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        let fan_in = cin * kernel * kernel;
        Conv {
            weight: he_uniform(rng, &[cout, cin, kernel, kernel], fan_in),
            bias: Tensor::zeros(&[cout]),
            stride,
            padding,
        }
    }

    /// 3×3, stride 1, same padding.
    pub fn same3(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> Self {
        Self::init(rng, cin, cout, 3, 1, 1)
    }

    /// Non-overlapping `k×k` patch embedding with stride `k`.
    pub fn patch(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize) -> Self {
        if k == 1 {
            Self::same3(rng, cin, cout)
        } else {
            Self::init(rng, cin, cout, k, k, 0)
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl Conv<Var> {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = g.conv2d(x, self.weight, self.stride, self.padding)?;
        g.add_bias(y, self.bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: P,
}

impl<P> Linear<P> {
    pub fn map<'p, Q>(&'p self, prefix: &str, f: &mut MapFn<'_, 'p, P, Q>) -> Linear<Q> {
        Linear {
            weight: f(format!("{prefix}.weight"), &self.weight),
            bias: f(format!("{prefix}.bias"), &self.bias),
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut P)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

impl<T: Real> Linear<Tensor<T>> {
    pub fn init(rng: &mut ChaCha8Rng, fin: usize, fout: usize) -> Self {
        Linear {
            weight: he_uniform(rng, &[fout, fin], fin),
            bias: Tensor::zeros(&[fout]),
        }
    }
}

impl Linear<Var> {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.linear(x, self.weight, self.bias)
    }
}

pub(crate) fn he_uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = libm::sqrt(6.0 / fan_in as f64);
    Tensor::from_fn(shape, |_| T::of_f64(rng.random_range(-bound..bound)))
}

/// Binds stored parameters as trainable leaves, remembering their order.
pub struct Binder<'g, T> {
    pub graph: &'g mut Graph<T>,
    vars: Vec<Var>,
}

impl<'g, T: Real> Binder<'g, T> {
    pub fn new(graph: &'g mut Graph<T>) -> Self {
        Self {
            graph,
            vars: Vec::new(),
        }
    }

    pub fn bind(&mut self, t: &Tensor<T>) -> Var {
        let v = self.graph.param(t.clone());
        self.vars.push(v);
        v
    }

    pub fn finish(self) -> Vec<Var> {
        self.vars
    }
}
