use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SurrogateError;
use crate::autodiff::{Adam, AdamConfig, Dense, Gradients, Graph, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub width: usize,
    pub input_dim: usize,
    pub vocab_size: usize,
    pub lora_rank: usize,
    pub adapter_depth: usize,
}

impl ModelConfig {
    pub fn llm(input_dim: usize, vocab_size: usize) -> Self {
        Self { n_layers: 8, width: 64, input_dim, vocab_size, lora_rank: 4, adapter_depth: 2 }
    }

    pub fn slm(input_dim: usize, vocab_size: usize) -> Self {
        Self { n_layers: 4, ..Self::llm(input_dim, vocab_size) }
    }

    pub fn validate(&self) -> Result<(), SurrogateError> {
        let bad = |m: &str| Err(SurrogateError::ConfigMismatch(m.to_string()));
        if self.n_layers == 0 || self.width == 0 || self.input_dim == 0 {
            return bad("layers, width and input_dim must be positive");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if self.lora_rank == 0 {
            return bad("lora_rank must be positive");
        }
        if self.adapter_depth > self.n_layers {
            return bad("adapter_depth exceeds n_layers");
        }
        if self.adapter_depth == self.n_layers && self.input_dim != self.width {
            return bad("an all-adapter model needs input_dim == width");
        }
        Ok(())
    }

    pub fn layer_dims(&self, layer: usize) -> (usize, usize) {
        (if layer == 0 { self.input_dim } else { self.width }, self.width)
    }

    pub fn adapter_start(&self) -> usize {
        self.n_layers - self.adapter_depth
    }
}

/// One dense layer with a low-rank adapter. The effective map is
/// `x·(W + A·B) + b`, with `W` stored [in, out], `A` [in, rank] and
/// `B` [rank, out] so that rows of `x` multiply from the left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    pub id: usize,
    pub dense: Dense,
    pub lora_a: Tensor,
    pub lora_b: Tensor,
}

impl LayerState {
    fn init(id: usize, input: usize, output: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        let dense = Dense::init(input, output, rng);
        let bound = 0.01;
        let a = (0..input * rank).map(|_| rng.random_range(-bound..=bound)).collect();
        Self {
            id,
            dense,
            lora_a: Tensor::new(vec![input, rank], a).expect("shape"),
            lora_b: Tensor::zeros(&[rank, output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dense.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.dense.output_dim()
    }

    pub fn rank(&self) -> usize {
        self.lora_a.shape()[1]
    }

    pub fn lora_len(&self) -> usize {
        self.lora_a.len() + self.lora_b.len()
    }

    pub fn dense_len(&self) -> usize {
        self.dense.param_count()
    }

    /// W + A·B.
    pub fn effective_weight(&self) -> Tensor {
        let (i, r, o) = (self.input_dim(), self.rank(), self.output_dim());
        let mut out = self.dense.w.data().to_vec();
        crate::autodiff::gemm(i, r, o, self.lora_a.data(), false, self.lora_b.data(), false, &mut out, true);
        Tensor::new(vec![i, o], out).expect("shape")
    }

    /// A (row-major) then B.
    pub fn lora_flat(&self) -> Vec<f64> {
        let mut v = self.lora_a.data().to_vec();
        v.extend_from_slice(self.lora_b.data());
        v
    }

    pub fn set_lora_flat(&mut self, flat: &[f64]) -> Result<(), SurrogateError> {
        if flat.len() != self.lora_len() {
            return Err(SurrogateError::LengthMismatch(flat.len(), self.lora_len()));
        }
        let na = self.lora_a.len();
        self.lora_a.data_mut().copy_from_slice(&flat[..na]);
        self.lora_b.data_mut().copy_from_slice(&flat[na..]);
        Ok(())
    }

    pub fn dense_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dense_len());
        self.dense.write_flat(&mut v);
        v
    }

    pub fn set_dense_flat(&mut self, flat: &[f64]) -> Result<(), SurrogateError> {
        if flat.len() != self.dense_len() {
            return Err(SurrogateError::LengthMismatch(flat.len(), self.dense_len()));
        }
        self.dense.read_flat(flat);
        Ok(())
    }
}

/// Which parts of a layer receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayerTrain {
    pub dense: bool,
    pub lora: bool,
}

impl LayerTrain {
    pub const FROZEN: LayerTrain = LayerTrain { dense: false, lora: false };
    pub const LORA: LayerTrain = LayerTrain { dense: false, lora: true };
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNodes {
    pub w: NodeId,
    pub b: NodeId,
    pub a: NodeId,
    pub bb: NodeId,
}

/// Node handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    pub hidden: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
    pub layers: Vec<LayerNodes>,
}

/// Per-layer flat gradients for the trained parts.
#[derive(Debug, Clone, Default)]
pub struct ModelGrads {
    pub dense: Vec<Option<Vec<f64>>>,
    pub lora: Vec<Option<Vec<f64>>>,
}

impl ModelGrads {
    pub fn is_all_zero(&self) -> bool {
        self.dense.iter().chain(&self.lora).flatten().all(|g| g.iter().all(|&v| v == 0.0))
    }
}

/// Dense GELU stack with LoRA on every layer and a frozen output table
/// mapping the last hidden state onto the shared vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub config: ModelConfig,
    pub layers: Vec<LayerState>,
    /// [width, vocab], never trained.
    pub head: Tensor,
    pub adapter_version: u64,
}

/// Server model with fresh parameters.
pub fn build_llm(config: ModelConfig, seed: u64) -> Result<SurrogateModel, SurrogateError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = (0..config.n_layers)
        .map(|l| {
            let (i, o) = config.layer_dims(l);
            LayerState::init(l, i, o, config.lora_rank, &mut rng)
        })
        .collect();
    let bound = 1.0 / (config.width as f64).sqrt();
    let head: Vec<f64> = (0..config.width * config.vocab_size).map(|_| rng.random_range(-bound..=bound) * 4.0).collect();
    Ok(SurrogateModel {
        config,
        layers,
        head: Tensor::new(vec![config.width, config.vocab_size], head).expect("shape"),
        adapter_version: 0,
    })
}

/// Client model: a freshly initialized foundation followed by a copy of the
/// server's adapter layers. The output table is shared with the server.
pub fn build_slm(llm: &SurrogateModel, config: ModelConfig, seed: u64) -> Result<SurrogateModel, SurrogateError> {
    config.validate()?;
    let lc = &llm.config;
    if config.adapter_depth != lc.adapter_depth {
        return Err(SurrogateError::ConfigMismatch("adapter depth differs from the server model".into()));
    }
    if config.width != lc.width || config.vocab_size != lc.vocab_size || config.lora_rank != lc.lora_rank {
        return Err(SurrogateError::ConfigMismatch("width, vocab or rank differs from the server model".into()));
    }
    if config.n_layers == config.adapter_depth || lc.n_layers == lc.adapter_depth {
        return Err(SurrogateError::ConfigMismatch("both models need at least one foundation layer".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers: Vec<LayerState> = (0..config.adapter_start())
        .map(|l| {
            let (i, o) = config.layer_dims(l);
            LayerState::init(l, i, o, config.lora_rank, &mut rng)
        })
        .collect();
    for (k, src) in llm.adapter_layers().iter().enumerate() {
        let mut l = src.clone();
        l.id = config.adapter_start() + k;
        layers.push(l);
    }
    Ok(SurrogateModel { config, layers, head: llm.head.clone(), adapter_version: llm.adapter_version })
}

/// Copy of the server's adapter layers stamped with a version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterBundle {
    pub version: u64,
    pub layers: Vec<LayerState>,
}

/// Copies the adapter out of the server model and bumps its version.
pub fn dispatch_adapter(llm: &mut SurrogateModel) -> AdapterBundle {
    llm.adapter_version += 1;
    AdapterBundle { version: llm.adapter_version, layers: llm.adapter_layers().to_vec() }
}

/// Installs the bundle's LoRA factors into the server's adapter layers.
/// Only the latest dispatched version is accepted.
pub fn return_adapter(llm: &mut SurrogateModel, bundle: &AdapterBundle) -> Result<(), SurrogateError> {
    if bundle.version != llm.adapter_version {
        return Err(SurrogateError::StaleVersion { expected: llm.adapter_version, got: bundle.version });
    }
    if bundle.layers.len() != llm.config.adapter_depth {
        return Err(SurrogateError::ConfigMismatch("bundle depth".into()));
    }
    let start = llm.config.adapter_start();
    for (k, src) in bundle.layers.iter().enumerate() {
        let dst = &mut llm.layers[start + k];
        if src.lora_a.shape() != dst.lora_a.shape() || src.lora_b.shape() != dst.lora_b.shape() {
            return Err(SurrogateError::ConfigMismatch(format!("adapter layer {k} shape")));
        }
        dst.lora_a = src.lora_a.clone();
        dst.lora_b = src.lora_b.clone();
    }
    llm.adapter_version += 1;
    Ok(())
}

impl SurrogateModel {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn adapter_range(&self) -> std::ops::Range<usize> {
        self.config.adapter_start()..self.config.n_layers
    }

    pub fn is_adapter(&self, layer: usize) -> bool {
        self.adapter_range().contains(&layer)
    }

    pub fn adapter_layers(&self) -> &[LayerState] {
        &self.layers[self.config.adapter_start()..]
    }

    /// Replaces this model's adapter layers with the bundle's (weights and
    /// factors) and adopts its version.
    pub fn install_adapter(&mut self, bundle: &AdapterBundle) -> Result<(), SurrogateError> {
        if bundle.layers.len() != self.config.adapter_depth {
            return Err(SurrogateError::ConfigMismatch("bundle depth".into()));
        }
        let start = self.config.adapter_start();
        for (k, src) in bundle.layers.iter().enumerate() {
            if src.dense.w.shape() != self.layers[start + k].dense.w.shape() {
                return Err(SurrogateError::ConfigMismatch(format!("adapter layer {k} shape")));
            }
            let mut l = src.clone();
            l.id = start + k;
            self.layers[start + k] = l;
        }
        self.adapter_version = bundle.version;
        Ok(())
    }

    fn check_layers(&self, selected: &[usize]) -> Result<(), SurrogateError> {
        match selected.iter().find(|&&l| l >= self.layers.len()) {
            Some(&l) => Err(SurrogateError::UnknownLayer(l)),
            None => Ok(()),
        }
    }

    /// LoRA factors of the selected layers, concatenated in selection order.
    pub fn trainable_params(&self, selected: &[usize]) -> Result<Vec<f64>, SurrogateError> {
        self.check_layers(selected)?;
        Ok(selected.iter().flat_map(|&l| self.layers[l].lora_flat()).collect())
    }

    pub fn set_trainable_params(&mut self, selected: &[usize], flat: &[f64]) -> Result<(), SurrogateError> {
        self.check_layers(selected)?;
        let total: usize = selected.iter().map(|&l| self.layers[l].lora_len()).sum();
        if flat.len() != total {
            return Err(SurrogateError::LengthMismatch(flat.len(), total));
        }
        let mut off = 0;
        for &l in selected {
            let n = self.layers[l].lora_len();
            self.layers[l].set_lora_flat(&flat[off..off + n])?;
            off += n;
        }
        Ok(())
    }

    pub fn lora_param_count(&self) -> usize {
        self.layers.iter().map(LayerState::lora_len).sum()
    }

    /// Builds the forward pass on `g`. Tensors are registered as params only
    /// where `plan` asks for training; a missing plan freezes everything.
    pub fn attach(&self, g: &mut Graph, x: NodeId, plan: &[LayerTrain]) -> Result<ForwardTape, SurrogateError> {
        let in_dim = g.value(x).cols();
        if g.value(x).shape().len() != 2 || in_dim != self.config.input_dim {
            return Err(SurrogateError::ShapeMismatch { expected: self.config.input_dim, got: in_dim });
        }
        let mut h = x;
        let mut nodes = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let t = plan.get(l).copied().unwrap_or_default();
            let reg = |g: &mut Graph, v: &Tensor, train: bool| if train { g.param(v.clone()) } else { g.constant(v.clone()) };
            let w = reg(g, &layer.dense.w, t.dense)?;
            let b = reg(g, &layer.dense.b, t.dense)?;
            let a = reg(g, &layer.lora_a, t.lora)?;
            let bb = reg(g, &layer.lora_b, t.lora)?;
            let base = g.matmul(h, w)?;
            let low = g.matmul(h, a)?;
            let low = g.matmul(low, bb)?;
            let sum = g.add(base, low)?;
            let z = g.add_bias(sum, b)?;
            h = g.gelu(z)?;
            nodes.push(LayerNodes { w, b, a, bb });
        }
        let head = g.constant(self.head.clone())?;
        let logits = g.matmul(h, head)?;
        let probs = g.softmax(logits, 1)?;
        Ok(ForwardTape { hidden: h, logits, probs, layers: nodes })
    }

    /// Output distributions, one row per input row.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor, SurrogateError> {
        let mut g = Graph::new();
        let x = g.constant(features.clone())?;
        let tape = self.attach(&mut g, x, &[])?;
        Ok(g.value(tape.probs).clone())
    }

    /// Gradients of the parts `plan` marks as trained.
    pub fn collect_grads(&self, grads: &Gradients, tape: &ForwardTape, plan: &[LayerTrain]) -> ModelGrads {
        let mut out = ModelGrads::default();
        for (l, layer) in self.layers.iter().enumerate() {
            let t = plan.get(l).copied().unwrap_or_default();
            let n = tape.layers[l];
            out.dense.push(t.dense.then(|| {
                let mut v = grads.get_or_zeros(n.w, layer.dense.w.shape()).into_data();
                v.extend_from_slice(grads.get_or_zeros(n.b, layer.dense.b.shape()).data());
                v
            }));
            out.lora.push(t.lora.then(|| {
                let mut v = grads.get_or_zeros(n.a, layer.lora_a.shape()).into_data();
                v.extend_from_slice(grads.get_or_zeros(n.bb, layer.lora_b.shape()).data());
                v
            }));
        }
        out
    }
}

/// Adam state for every layer's dense and LoRA parameters.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ModelOptimizer {
    dense: Vec<Adam>,
    lora: Vec<Adam>,
}

impl ModelOptimizer {
    pub fn new(model: &SurrogateModel) -> Self {
        Self {
            dense: model.layers.iter().map(|l| Adam::new(l.dense_len())).collect(),
            lora: model.layers.iter().map(|l| Adam::new(l.lora_len())).collect(),
        }
    }

    /// Restarts the LoRA moments of one layer, used when its factors are
    /// replaced from outside.
    pub fn reset_lora(&mut self, layer: usize, len: usize) {
        self.lora[layer] = Adam::new(len);
    }

    pub fn step(&mut self, model: &mut SurrogateModel, grads: &ModelGrads, cfg: &AdamConfig) -> Result<(), SurrogateError> {
        for (l, layer) in model.layers.iter_mut().enumerate() {
            if let Some(Some(g)) = grads.dense.get(l) {
                let mut p = layer.dense_flat();
                self.dense[l].step(&mut p, g, cfg);
                layer.set_dense_flat(&p)?;
            }
            if let Some(Some(g)) = grads.lora.get(l) {
                let mut p = layer.lora_flat();
                self.lora[l].step(&mut p, g, cfg);
                layer.set_lora_flat(&p)?;
            }
        }
        Ok(())
    }
}
