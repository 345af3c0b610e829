use rand::Rng;

use super::{par_map_rows, uniform_init, ModelError};
use crate::numerics::{Graph, NumericsError, Tensor, Var};

/// Affine layer `y = x·Wᵀ + b`, `W` stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: uniform_init(output, input, rng),
            bias: Tensor::zeros(&[1, output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[1, output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Tanh multilayer perceptron producing features in `(−1, 1)^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub layers: Vec<Linear>,
}

/// Graph leaves of a bound extractor, `(weight, bias)` per layer.
#[derive(Clone, Debug)]
pub struct ExtractorVars {
    layers: Vec<(Var, Var)>,
}

impl FeatureExtractor {
    pub fn new(input_dim: usize, hidden: &[usize], feature_dim: usize, rng: &mut impl Rng) -> Self {
        let widths = Self::widths(input_dim, hidden, feature_dim);
        Self {
            layers: widths.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect(),
        }
    }

    pub fn zeros(input_dim: usize, hidden: &[usize], feature_dim: usize) -> Self {
        let widths = Self::widths(input_dim, hidden, feature_dim);
        Self {
            layers: widths.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
        }
    }

    fn widths(input_dim: usize, hidden: &[usize], feature_dim: usize) -> Vec<usize> {
        let mut w = vec![input_dim];
        w.extend_from_slice(hidden);
        w.push(feature_dim);
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Linear::input_dim)
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::output_dim)
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len().saturating_sub(1)]
            .iter()
            .map(Linear::output_dim)
            .collect()
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ExtractorVars {
        ExtractorVars {
            layers: self
                .layers
                .iter()
                .map(|l| (g.leaf(l.weight.clone(), trainable), g.leaf(l.bias.clone(), trainable)))
                .collect(),
        }
    }

    /// Wraps existing graph leaves, given in [`Self::parameters`] order.
    pub fn bind_leaves(&self, leaves: &[Var]) -> Result<ExtractorVars, NumericsError> {
        if leaves.len() != 2 * self.layers.len() {
            return Err(NumericsError::InvalidArgument(format!(
                "expected {} extractor leaves, got {}",
                2 * self.layers.len(),
                leaves.len()
            )));
        }
        Ok(ExtractorVars {
            layers: leaves.chunks(2).map(|c| (c[0], c[1])).collect(),
        })
    }

    /// `h = φ(x)` for a batch of inputs.
    pub fn extract(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        if x.cols() != self.input_dim() {
            return Err(ModelError::DimMismatch {
                expected: self.input_dim(),
                found: x.cols(),
            });
        }
        par_map_rows(x, |chunk| {
            let mut g = Graph::new();
            let vars = self.bind(&mut g, false);
            let xv = g.constant(chunk);
            let h = vars.forward(&mut g, xv)?;
            Ok(g.value(h).clone())
        })
    }
}

impl ExtractorVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NumericsError> {
        let mut cur = x;
        for &(w, b) in &self.layers {
            let lin = g.matmul_nt(cur, w)?;
            let lin = g.add_row(lin, b)?;
            cur = g.tanh(lin)?;
        }
        Ok(cur)
    }

    /// Leaves in the same order as [`FeatureExtractor::parameters`].
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}
