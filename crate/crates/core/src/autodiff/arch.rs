//! Network architecture descriptors.
//!
//! Parameters are flattened in layer order. Inside a layer the weights come
//! first in row-major order, followed by the bias:
//!
//! * dense `W ∈ R^{out×in}`: index `o·in + i`, then `b ∈ R^{out}`;
//! * conv2d `W ∈ R^{out×in×k×k}`: index `((o·in + c)·k + ki)·k + kj`, then `b ∈ R^{out}`;
//! * frozen batchnorm: scale `γ ∈ R^{channels}`, then shift `β ∈ R^{channels}`.
//!
//! Activations and flatten layers own no parameters. Batchnorm running
//! statistics are part of the descriptor, not of the parameter vector.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EllaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Activation {
        kind: Activation,
    },
    /// Batch normalization with frozen inference statistics. Channel axis is
    /// the leading axis of the incoming tensor.
    BatchNorm {
        channels: usize,
        mean: Vec<f64>,
        var: Vec<f64>,
        #[serde(default = "default_bn_eps")]
        eps: f64,
    },
    Flatten,
}

fn one() -> usize {
    1
}

fn default_bn_eps() -> f64 {
    1e-5
}

impl Layer {
    pub fn activation(kind: Activation) -> Self {
        Layer::Activation { kind }
    }

    pub fn batchnorm(channels: usize) -> Self {
        Layer::BatchNorm {
            channels,
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: default_bn_eps(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Dense { inputs, outputs } => outputs * inputs + outputs,
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => out_channels * in_channels * kernel * kernel + out_channels,
            Layer::BatchNorm { channels, .. } => 2 * channels,
            Layer::Activation { .. } | Layer::Flatten => 0,
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense { inputs, outputs } => {
                if input != [*inputs] {
                    return Err(EllaError::Arch(format!(
                        "dense layer expects input [{inputs}], got {input:?}"
                    )));
                }
                Ok(vec![*outputs])
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != *in_channels {
                    return Err(EllaError::Arch(format!(
                        "conv2d expects input [{in_channels}, H, W], got {input:?}"
                    )));
                }
                if *kernel == 0 || *stride == 0 {
                    return Err(EllaError::Arch("conv2d kernel and stride must be >= 1".into()));
                }
                let (h, w) = (input[1] + 2 * padding, input[2] + 2 * padding);
                if h < *kernel || w < *kernel {
                    return Err(EllaError::Arch(format!(
                        "conv2d kernel {kernel} larger than padded input {h}x{w}"
                    )));
                }
                Ok(vec![
                    *out_channels,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ])
            }
            Layer::BatchNorm {
                channels,
                mean,
                var,
                eps,
            } => {
                if input.is_empty() || input[0] != *channels {
                    return Err(EllaError::Arch(format!(
                        "batchnorm over {channels} channels got input {input:?}"
                    )));
                }
                if mean.len() != *channels || var.len() != *channels {
                    return Err(EllaError::Arch("batchnorm statistics length mismatch".into()));
                }
                if var.iter().any(|v| !(*v >= 0.0)) || !(*eps > 0.0) {
                    return Err(EllaError::Arch("batchnorm variance must be >= 0 and eps > 0".into()));
                }
                Ok(input.to_vec())
            }
            Layer::Activation { .. } => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArchSpec {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

/// A validated layer stack. Shapes and parameter offsets are derived once at
/// construction; the parameter count is a pure function of the layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ArchSpec", into = "ArchSpec")]
pub struct ArchDescriptor {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    shapes: Vec<Vec<usize>>,
    offsets: Vec<usize>,
    num_params: usize,
}

impl TryFrom<ArchSpec> for ArchDescriptor {
    type Error = EllaError;
    fn try_from(spec: ArchSpec) -> Result<Self> {
        ArchDescriptor::new(spec.input_shape, spec.layers)
    }
}

impl From<ArchDescriptor> for ArchSpec {
    fn from(arch: ArchDescriptor) -> Self {
        ArchSpec {
            input_shape: arch.input_shape,
            layers: arch.layers,
        }
    }
}

impl ArchDescriptor {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(EllaError::Arch(format!("bad input shape {input_shape:?}")));
        }
        let mut shapes = vec![input_shape.clone()];
        let mut offsets = Vec::with_capacity(layers.len() + 1);
        let mut offset = 0;
        for (idx, layer) in layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes.last().unwrap())
                .map_err(|e| EllaError::Arch(format!("layer {idx}: {e}")))?;
            shapes.push(next);
            offsets.push(offset);
            offset += layer.param_count();
        }
        offsets.push(offset);
        let out = shapes.last().unwrap();
        if out.len() != 1 || out[0] == 0 {
            return Err(EllaError::Arch(format!(
                "network output must be a vector, got shape {out:?}"
            )));
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
            offsets,
            num_params: offset,
        })
    }

    /// Fully connected stack `sizes[0] → … → sizes[last]` with `act` between
    /// consecutive dense layers.
    pub fn mlp(sizes: &[usize], act: Activation) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(EllaError::Arch("mlp needs at least input and output sizes".into()));
        }
        let mut layers = Vec::new();
        for (i, w) in sizes.windows(2).enumerate() {
            layers.push(Layer::Dense {
                inputs: w[0],
                outputs: w[1],
            });
            if i + 2 < sizes.len() {
                layers.push(Layer::activation(act));
            }
        }
        Self::new(vec![sizes[0]], layers)
    }

    /// Two convolutions and a linear head with batchnorm and ReLU, sized
    /// for 28×28 grayscale digits.
    pub fn small_convnet(classes: usize) -> Result<Self> {
        Self::new(
            vec![1, 28, 28],
            vec![
                Layer::Conv2d {
                    in_channels: 1,
                    out_channels: 8,
                    kernel: 5,
                    stride: 2,
                    padding: 0,
                },
                Layer::batchnorm(8),
                Layer::activation(Activation::Relu),
                Layer::Conv2d {
                    in_channels: 8,
                    out_channels: 16,
                    kernel: 3,
                    stride: 2,
                    padding: 0,
                },
                Layer::batchnorm(16),
                Layer::activation(Activation::Relu),
                Layer::Flatten,
                Layer::Dense {
                    inputs: 16 * 5 * 5,
                    outputs: classes,
                },
            ],
        )
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Shape entering layer `i`; `shape(layers.len())` is the output shape.
    pub fn shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    /// Parameter range owned by layer `i`.
    pub fn param_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn num_outputs(&self) -> usize {
        self.shapes.last().unwrap()[0]
    }

    /// Parameter range of the final dense layer, used by last-layer LLA.
    pub fn last_dense_range(&self) -> Option<std::ops::Range<usize>> {
        self.layers
            .iter()
            .rposition(|l| matches!(l, Layer::Dense { .. }))
            .map(|i| self.param_range(i))
    }

    /// Replace the frozen statistics of batchnorm layer `i`.
    pub fn with_batchnorm_stats(&self, i: usize, mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        let mut layers = self.layers.clone();
        match layers.get_mut(i) {
            Some(Layer::BatchNorm {
                mean: m, var: v, ..
            }) => {
                *m = mean;
                *v = var;
            }
            _ => return Err(EllaError::Arch(format!("layer {i} is not a batchnorm layer"))),
        }
        Self::new(self.input_shape.clone(), layers)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("architecture serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_param_count() {
        let arch = ArchDescriptor::mlp(&[1, 50, 50, 50, 1], Activation::Tanh).unwrap();
        assert_eq!(arch.num_params(), 100 + 2550 * 2 + 51);
        assert_eq!(arch.num_outputs(), 1);
        assert_eq!(arch.last_dense_range(), Some(5200..5251));
    }

    #[test]
    fn convnet_shapes() {
        let arch = ArchDescriptor::small_convnet(10).unwrap();
        assert_eq!(arch.shape(1), &[8, 12, 12]);
        assert_eq!(arch.shape(4), &[16, 5, 5]);
        assert_eq!(arch.num_params(), 208 + 16 + 1168 + 32 + 4010);
        assert_eq!(arch.num_outputs(), 10);
    }

    #[test]
    fn incompatible_layers_rejected() {
        let err = ArchDescriptor::new(
            vec![3],
            vec![
                Layer::Dense {
                    inputs: 3,
                    outputs: 4,
                },
                Layer::Dense {
                    inputs: 5,
                    outputs: 1,
                },
            ],
        );
        assert!(matches!(err, Err(EllaError::Arch(_))));
        let err = ArchDescriptor::new(vec![1, 4, 4], vec![Layer::Flatten, Layer::Flatten]);
        assert!(err.is_ok());
        let err = ArchDescriptor::new(vec![1, 4, 4], vec![Layer::activation(Activation::Relu)]);
        assert!(err.is_err(), "image-shaped output must be rejected");
    }

    #[test]
    fn json_roundtrip_preserves_hash() {
        let arch = ArchDescriptor::small_convnet(10).unwrap();
        let json = serde_json::to_string(&arch).unwrap();
        let back: ArchDescriptor = serde_json::from_str(&json).unwrap();
        assert_eq!(arch, back);
        assert_eq!(arch.hash(), back.hash());
    }
}
