//! Analytic parameter and multiply-add counting.
//!
//! Counting rules, per sample:
//! - convolution (stride 1, same padding): `c_out · c_in · k² · H · W`
//! - `(m×k)·(k×n)` matrix product: `m · k · n`
//! - batch norm, pooling, softmax, activations and residual fusion: one
//!   op per element touched
//! - learnable scalars: parameters only; their scaling is in the fusion
//!   element count
//!
//! Totals are multiplied by the batch extent of the input shape.

use serde::{Deserialize, Serialize};

/// A size that is either fixed by the module or equal to `H·W`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extent {
    Fixed(usize),
    Pixels,
}

impl Extent {
    fn resolve(self, pixels: u64) -> u64 {
        match self {
            Extent::Fixed(v) => v as u64,
            Extent::Pixels => pixels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv { c_in: usize, c_out: usize, k: usize, bias: bool },
    BatchNorm { channels: usize },
    Scalars { count: usize },
    MatMul { m: Extent, k: Extent, n: Extent },
    Elementwise { rows: Extent, cols: Extent },
}

/// Flat inventory of a module's parameterized layers and products, all
/// operating at the input's spatial resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModuleDescriptor {
    pub name: String,
    pub layers: Vec<Layer>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub module: String,
    pub params: u64,
    pub mult_adds: u64,
    pub input_shape: Vec<usize>,
}

pub fn count_params(desc: &ModuleDescriptor) -> u64 {
    desc.layers
        .iter()
        .map(|l| match *l {
            Layer::Conv { c_in, c_out, k, bias } => (c_out * c_in * k * k + if bias { c_out } else { 0 }) as u64,
            Layer::BatchNorm { channels } => 2 * channels as u64,
            Layer::Scalars { count } => count as u64,
            Layer::MatMul { .. } | Layer::Elementwise { .. } => 0,
        })
        .sum()
}

/// Multiply-adds for an input of shape `[B, C, H, W]`.
pub fn count_flops(desc: &ModuleDescriptor, input_shape: [usize; 4]) -> u64 {
    let [b, _, h, w] = input_shape;
    let px = (h * w) as u64;
    let per_sample: u64 = desc
        .layers
        .iter()
        .map(|l| match *l {
            Layer::Conv { c_in, c_out, k, .. } => (c_out * c_in * k * k) as u64 * px,
            Layer::BatchNorm { channels } => channels as u64 * px,
            Layer::Scalars { .. } => 0,
            Layer::MatMul { m, k, n } => m.resolve(px) * k.resolve(px) * n.resolve(px),
            Layer::Elementwise { rows, cols } => rows.resolve(px) * cols.resolve(px),
        })
        .sum();
    per_sample * b as u64
}

impl CostReport {
    pub fn new(desc: &ModuleDescriptor, input_shape: [usize; 4]) -> Self {
        Self {
            module: desc.name.clone(),
            params: count_params(desc),
            mult_adds: count_flops(desc, input_shape),
            input_shape: input_shape.to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(layer: Layer) -> ModuleDescriptor {
        ModuleDescriptor { name: "t".into(), layers: vec![layer] }
    }

    #[test]
    fn pointwise_conv_counts() {
        let d = single(Layer::Conv { c_in: 512, c_out: 512, k: 1, bias: true });
        assert_eq!(count_params(&d), 262_656);
        assert_eq!(count_flops(&d, [1, 512, 16, 8]), 33_554_432);
    }

    #[test]
    fn matmul_counts() {
        let d = single(Layer::MatMul { m: Extent::Fixed(512), k: Extent::Fixed(512), n: Extent::Pixels });
        assert_eq!(count_flops(&d, [1, 1024, 16, 8]), 512 * 512 * 128);
        assert_eq!(count_flops(&d, [2, 1024, 16, 8]), 2 * 512 * 512 * 128);
        assert_eq!(count_params(&d), 0);
    }
}
