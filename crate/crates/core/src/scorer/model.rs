use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ScorerError;
use crate::tensor_file;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Identity => x,
        }
    }
}

/// One affine layer. `weights` is row-major `rows x cols` where `cols` is
/// the input width and `rows` the output width.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub activation: Activation,
}

/// Feed-forward network ending in a single sigmoid unit.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseModel {
    pub generation: u64,
    pub input_dim: usize,
    pub layers: Vec<DenseLayer>,
}

#[derive(Serialize, Deserialize)]
struct LayerHeader {
    rows: usize,
    cols: usize,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
struct DenseHeader {
    kind: String,
    generation: u64,
    input_dim: usize,
    layers: Vec<LayerHeader>,
}

const KIND: &str = "dense_mlp";

impl DenseModel {
    /// Validate shapes, finiteness and the single sigmoid output.
    pub fn new(generation: u64, input_dim: usize, layers: Vec<DenseLayer>) -> Result<Self, ScorerError> {
        let model = Self {
            generation,
            input_dim,
            layers,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<(), ScorerError> {
        let invalid = |m: String| Err(ScorerError::InvalidModel(m));
        if self.input_dim == 0 || self.layers.is_empty() {
            return invalid("model needs a positive input width and at least one layer".into());
        }
        let mut width = self.input_dim;
        for (i, l) in self.layers.iter().enumerate() {
            if l.cols != width {
                return invalid(format!("layer {i} expects {} inputs, previous width is {width}", l.cols));
            }
            if l.weights.len() != l.rows * l.cols || l.bias.len() != l.rows {
                return invalid(format!("layer {i} buffers do not match {}x{}", l.rows, l.cols));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return invalid(format!("layer {i} has non-finite parameters"));
            }
            width = l.rows;
        }
        let last = self.layers.last().unwrap();
        if last.rows != 1 || last.activation != Activation::Sigmoid {
            return invalid("final layer must be a single sigmoid unit".into());
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        1
    }

    /// Score one input vector.
    pub fn forward(&self, input: &[f32]) -> Result<f32, ScorerError> {
        if input.len() != self.input_dim {
            return Err(ScorerError::DimensionMismatch {
                expected: self.input_dim,
                found: input.len(),
            });
        }
        let mut act: Vec<f64> = input.iter().map(|&v| f64::from(v)).collect();
        for layer in &self.layers {
            act = layer
                .weights
                .chunks_exact(layer.cols)
                .zip(&layer.bias)
                .map(|(row, &b)| {
                    let z = row
                        .iter()
                        .zip(&act)
                        .fold(f64::from(b), |acc, (&w, &x)| acc + f64::from(w) * x);
                    layer.activation.apply(z)
                })
                .collect();
        }
        Ok(act[0] as f32)
    }

    /// Score a batch laid out row-major (`inputs.len() == n * input_dim`).
    /// Produces exactly the per-row results of [`DenseModel::forward`].
    pub fn forward_batch(&self, inputs: &[f32]) -> Result<Vec<f32>, ScorerError> {
        if inputs.len() % self.input_dim != 0 {
            return Err(ScorerError::DimensionMismatch {
                expected: self.input_dim,
                found: inputs.len() % self.input_dim,
            });
        }
        inputs.chunks_exact(self.input_dim).map(|row| self.forward(row)).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ScorerError> {
        let header = DenseHeader {
            kind: KIND.into(),
            generation: self.generation,
            input_dim: self.input_dim,
            layers: self
                .layers
                .iter()
                .map(|l| LayerHeader {
                    rows: l.rows,
                    cols: l.cols,
                    activation: l.activation,
                })
                .collect(),
        };
        let mut tensors: Vec<&[f32]> = Vec::new();
        for l in &self.layers {
            tensors.push(&l.weights);
            tensors.push(&l.bias);
        }
        Ok(tensor_file::encode(&header, &tensors)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ScorerError> {
        let (header, body): (DenseHeader, Vec<f32>) = tensor_file::decode(bytes)?;
        if header.kind != KIND {
            return Err(ScorerError::InvalidModel(format!("unexpected model kind {:?}", header.kind)));
        }
        let mut rest = body.as_slice();
        let mut layers = Vec::with_capacity(header.layers.len());
        for lh in header.layers {
            let need = lh.rows * lh.cols + lh.rows;
            if rest.len() < need {
                return Err(ScorerError::InvalidModel("tensor body shorter than header shapes".into()));
            }
            let (w, tail) = rest.split_at(lh.rows * lh.cols);
            let (b, tail) = tail.split_at(lh.rows);
            rest = tail;
            layers.push(DenseLayer {
                rows: lh.rows,
                cols: lh.cols,
                weights: w.to_vec(),
                bias: b.to_vec(),
                activation: lh.activation,
            });
        }
        if !rest.is_empty() {
            return Err(ScorerError::InvalidModel("trailing values after last layer".into()));
        }
        Self::new(header.generation, header.input_dim, layers)
    }

    pub fn save(&self, path: &Path) -> Result<(), ScorerError> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| ScorerError::File(e.into()))
    }

    pub fn load(path: &Path) -> Result<Self, ScorerError> {
        let bytes = std::fs::read(path).map_err(|e| ScorerError::File(e.into()))?;
        Self::from_bytes(&bytes)
    }
}
