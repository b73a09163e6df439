use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, NodeId, Tensor, TensorError};

/// Affine layer `y = x·W + b` with `W` stored as [in, out].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

/// Graph handles for one layer's weight and bias.
#[derive(Debug, Clone, Copy)]
pub struct DenseNodes {
    pub w: NodeId,
    pub b: NodeId,
}

impl Dense {
    /// Uniform(-sqrt(1/in), sqrt(1/in)) weights and biases.
    pub fn init(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / input as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..=bound)).collect::<Vec<_>>();
        let w = draw(input * output);
        let b = draw(output);
        Self { w: Tensor::new(vec![input, output], w).expect("shape"), b: Tensor::vector(b) }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { w: Tensor::zeros(&[input, output]), b: Tensor::zeros(&[output]) }
    }

    pub fn input_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// Registers the layer's tensors, as params or constants.
    pub fn attach(&self, g: &mut Graph, trainable: bool) -> Result<DenseNodes, TensorError> {
        let (w, b) = if trainable {
            (g.param(self.w.clone())?, g.param(self.b.clone())?)
        } else {
            (g.constant(self.w.clone())?, g.constant(self.b.clone())?)
        };
        Ok(DenseNodes { w, b })
    }

    pub fn apply(g: &mut Graph, nodes: DenseNodes, x: NodeId) -> Result<NodeId, TensorError> {
        let h = g.matmul(x, nodes.w)?;
        g.add_bias(h, nodes.b)
    }

    /// Appends weight (row-major) then bias.
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.w.data());
        out.extend_from_slice(self.b.data());
    }

    /// Reads weight then bias from `src`, returning the number consumed.
    pub fn read_flat(&mut self, src: &[f64]) -> usize {
        let (nw, nb) = (self.w.len(), self.b.len());
        self.w.data_mut().copy_from_slice(&src[..nw]);
        self.b.data_mut().copy_from_slice(&src[nw..nw + nb]);
        nw + nb
    }
}
