//! Checkpoint files: `<stem>.bin` holds every value as little-endian f64,
//! `<stem>.manifest` lists the configuration and tensor shapes in order.
//!
//! Value order: for each layer, W [in, out] row-major, b, A [in, rank],
//! B [rank, out]; then the output table [width, vocab].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{LayerState, ModelConfig, SurrogateError, SurrogateModel};
use crate::autodiff::{Dense, Tensor};

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("manifest"))
}

fn shape(t: &Tensor) -> String {
    t.shape().iter().map(ToString::to_string).collect::<Vec<_>>().join("x")
}

pub fn manifest(model: &SurrogateModel) -> String {
    let c = &model.config;
    let mut s = String::new();
    let _ = writeln!(s, "format trajfed-checkpoint 1");
    let _ = writeln!(s, "n_layers {}", c.n_layers);
    let _ = writeln!(s, "width {}", c.width);
    let _ = writeln!(s, "input_dim {}", c.input_dim);
    let _ = writeln!(s, "vocab_size {}", c.vocab_size);
    let _ = writeln!(s, "lora_rank {}", c.lora_rank);
    let _ = writeln!(s, "adapter_depth {}", c.adapter_depth);
    let _ = writeln!(s, "adapter_version {}", model.adapter_version);
    for l in &model.layers {
        let _ = writeln!(
            s,
            "layer {} w {} b {} lora_a {} lora_b {}",
            l.id,
            shape(&l.dense.w),
            shape(&l.dense.b),
            shape(&l.lora_a),
            shape(&l.lora_b)
        );
    }
    let _ = writeln!(s, "head {}", shape(&model.head));
    let _ = writeln!(s, "values {}", flatten(model).len());
    s
}

pub fn flatten(model: &SurrogateModel) -> Vec<f64> {
    let mut v = Vec::new();
    for l in &model.layers {
        v.extend_from_slice(l.dense.w.data());
        v.extend_from_slice(l.dense.b.data());
        v.extend_from_slice(l.lora_a.data());
        v.extend_from_slice(l.lora_b.data());
    }
    v.extend_from_slice(model.head.data());
    v
}

pub fn save_checkpoint(model: &SurrogateModel, stem: impl AsRef<Path>) -> Result<(), SurrogateError> {
    let (bin, man) = paths(stem.as_ref());
    let bytes: Vec<u8> = flatten(model).iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&bin, bytes).map_err(|e| SurrogateError::Io(format!("{}: {e}", bin.display())))?;
    fs::write(&man, manifest(model)).map_err(|e| SurrogateError::Io(format!("{}: {e}", man.display())))?;
    Ok(())
}

fn field(text: &str, key: &str) -> Result<u64, SurrogateError> {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| SurrogateError::Checkpoint(format!("manifest lacks `{key}`")))
}

pub fn load_checkpoint(stem: impl AsRef<Path>) -> Result<SurrogateModel, SurrogateError> {
    let (bin, man) = paths(stem.as_ref());
    let text = fs::read_to_string(&man).map_err(|e| SurrogateError::Io(format!("{}: {e}", man.display())))?;
    if !text.starts_with("format trajfed-checkpoint 1") {
        return Err(SurrogateError::Checkpoint("unknown manifest format".into()));
    }
    let config = ModelConfig {
        n_layers: field(&text, "n_layers")? as usize,
        width: field(&text, "width")? as usize,
        input_dim: field(&text, "input_dim")? as usize,
        vocab_size: field(&text, "vocab_size")? as usize,
        lora_rank: field(&text, "lora_rank")? as usize,
        adapter_depth: field(&text, "adapter_depth")? as usize,
    };
    config.validate()?;
    let bytes = fs::read(&bin).map_err(|e| SurrogateError::Io(format!("{}: {e}", bin.display())))?;
    if bytes.len() % 8 != 0 {
        return Err(SurrogateError::Checkpoint("value file length is not a multiple of 8".into()));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut off = 0;
    let mut take = |shape: Vec<usize>| -> Result<Tensor, SurrogateError> {
        let n: usize = shape.iter().product();
        let slice = values.get(off..off + n).ok_or_else(|| SurrogateError::Checkpoint("value file too short".into()))?;
        off += n;
        Ok(Tensor::new(shape, slice.to_vec())?)
    };
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let (i, o) = config.layer_dims(l);
        let r = config.lora_rank;
        let w = take(vec![i, o])?;
        let b = take(vec![o])?;
        let lora_a = take(vec![i, r])?;
        let lora_b = take(vec![r, o])?;
        layers.push(LayerState { id: l, dense: Dense { w, b }, lora_a, lora_b });
    }
    let head = take(vec![config.width, config.vocab_size])?;
    if off != values.len() {
        return Err(SurrogateError::Checkpoint(format!("{} trailing values", values.len() - off)));
    }
    let expected = field(&text, "values")? as usize;
    if expected != off {
        return Err(SurrogateError::Checkpoint(format!("manifest says {expected} values, file has {off}")));
    }
    Ok(SurrogateModel { config, layers, head, adapter_version: field(&text, "adapter_version")? })
}
