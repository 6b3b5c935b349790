//! Minimal dense feed-forward networks for the voxel attribute decoders.
//!
//! Plain f64 matrices with tanh between layers and a linear output. Weights
//! come from a seeded Xavier-uniform init so runs are reproducible; the scene
//! format serializes them verbatim.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// Row-major `[out][in]` weights.
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    /// Xavier-uniform seeded init for the given layer widths
    /// (e.g. `[35, 32, 32, 10]`). The tag keeps decoder streams independent.
    pub fn seeded(dims: &[usize], seed: u64, tag: u64) -> Self {
        assert!(dims.len() >= 2, "need at least input and output widths");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (li, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let mut rng = SplitMix64::derived(seed, &[tag, li as u64]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weight = (0..fan_out)
                .map(|_| (0..fan_in).map(|_| rng.uniform(-bound, bound)).collect())
                .collect();
            let bias = vec![0.0; fan_out];
            layers.push(Layer { weight, bias });
        }
        Mlp { layers }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::parse("decoder_weights", "decoder has no layers"));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.weight.len() != layer.bias.len() {
                return Err(Error::parse(
                    "decoder_weights",
                    format!(
                        "layer {i}: {} rows vs {} biases",
                        layer.weight.len(),
                        layer.bias.len()
                    ),
                ));
            }
            let fan_in = layer.weight.first().map_or(0, |r| r.len());
            if fan_in == 0 || layer.weight.iter().any(|r| r.len() != fan_in) {
                return Err(Error::parse(
                    "decoder_weights",
                    format!("layer {i}: ragged or empty weight rows"),
                ));
            }
            if i > 0 && fan_in != layers[i - 1].bias.len() {
                return Err(Error::parse(
                    "decoder_weights",
                    format!("layer {i}: input width {fan_in} does not match previous output"),
                ));
            }
            let finite = layer
                .weight
                .iter()
                .flatten()
                .chain(&layer.bias)
                .all(|v| v.is_finite());
            if !finite {
                return Err(Error::parse(
                    "decoder_weights",
                    format!("layer {i}: non-finite value"),
                ));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight[0].len()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().bias.len()
    }

    /// Forward pass; tanh on hidden layers, linear output.
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.input_dim());
        let mut x = input.to_vec();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut y = layer.bias.clone();
            for (o, row) in layer.weight.iter().enumerate() {
                let mut acc = 0.0;
                for (w, v) in row.iter().zip(&x) {
                    acc += w * v;
                }
                y[o] += acc;
            }
            if li != last {
                for v in &mut y {
                    *v = v.tanh();
                }
            }
            x = y;
        }
        x
    }
}
