//! Parameterized layers built on the tensor graph.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::tensor::{BufferId, Graph, ParamId, ParamStore, Real, Tensor, Var, BN_EPS};

/// Whether batch norm uses batch statistics (and updates running ones).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Registers named parameters under a dotted prefix.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn scope(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = self.name(name);
        Builder { store: self.store, rng: self.rng, prefix }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let rng = &mut *self.rng;
        Tensor::from_fn(shape, |_| T::of(rng.sample::<f64, _>(StandardNormal) * std))
    }

    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        let full = self.name(name);
        self.store.add_param(&full, value)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> Result<BufferId> {
        let full = self.name(name);
        self.store.add_buffer(&full, value)
    }

    /// Kaiming-normal (fan-in) weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, bias: bool) -> Result<Conv2d> {
        self.conv_scaled(name, c_in, c_out, k, stride, pad, bias, 1.0)
    }

    /// [`Builder::conv`] with the weight standard deviation multiplied by `gain`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_scaled(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, bias: bool, gain: f64) -> Result<Conv2d> {
        let std = gain * (2.0 / (c_in * k * k) as f64).sqrt();
        let w = self.normal(&[c_out, c_in, k, k], std);
        let weight = self.param(&format!("{name}.weight"), w)?;
        let bias = if bias { Some(self.param(&format!("{name}.bias"), Tensor::zeros(&[c_out]))?) } else { None };
        Ok(Conv2d { weight, bias, stride, pad })
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> Result<BatchNorm2d> {
        Ok(BatchNorm2d {
            gamma: self.param(&format!("{name}.weight"), Tensor::full(&[channels], T::one()))?,
            beta: self.param(&format!("{name}.bias"), Tensor::zeros(&[channels]))?,
            running_mean: self.buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: self.buffer(&format!("{name}.running_var"), Tensor::full(&[channels], T::one()))?,
        })
    }

    /// Normal weights with the given standard deviation, zero bias.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, std: f64, bias: bool) -> Result<Linear> {
        let w = self.normal(&[fan_out, fan_in], std);
        let weight = self.param(&format!("{name}.weight"), w)?;
        let bias = if bias { Some(self.param(&format!("{name}.bias"), Tensor::zeros(&[fan_out]))?) } else { None };
        Ok(Linear { weight, bias })
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = self.bias.map(|b| g.param(ps, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }

    pub fn element_count<T: Real>(&self, ps: &ParamStore<T>) -> usize {
        self.params().iter().map(|&p| ps.param(p).value.numel()).sum()
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm2d {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        let mut rm = ps.buffer(self.running_mean).clone();
        let mut rv = ps.buffer(self.running_var).clone();
        let y = g.batch_norm2d(x, gamma, beta, &mut rm, &mut rv, mode == Mode::Train, BN_EPS)?;
        if mode == Mode::Train {
            *ps.buffer_mut(self.running_mean) = rm;
            *ps.buffer_mut(self.running_var) = rv;
        }
        Ok(y)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = self.bias.map(|b| g.param(ps, b));
        g.linear(x, w, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// conv → batch norm → optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self { conv: s.conv("conv", c_in, c_out, k, stride, pad, false)?, bn: s.batch_norm("bn", c_out)? })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &mut ParamStore<T>, x: Var, mode: Mode, relu: bool) -> Result<Var> {
        let y = self.conv.forward(g, ps, x)?;
        let y = self.bn.forward(g, ps, y, mode)?;
        if relu {
            g.relu(y)
        } else {
            Ok(y)
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.conv.params();
        p.extend(self.bn.params());
        p
    }
}
