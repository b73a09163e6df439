//! Per-point trajectory autoencoder: min-max normalization, encoder and
//! decoder MLPs, embedding batches and server-side union/split.

mod batch;

pub use batch::{split_results, union_embeddings, Embedding, EmbeddingBatch, OwnershipMap, PointKey};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Adam, AdamConfig, Dense, DenseNodes, Graph, NodeId, Tensor, TensorError};
use crate::traj::{BBox, SpatioTemporalPoint, SubTrajectory};

pub const INPUT_DIM: usize = 3;
pub const HIDDEN_DIM: usize = 256;
pub const EMBED_DIM: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TpaError {
    #[error("point ({lon}, {lat}, {t}) lies outside the normalization range")]
    OutOfNormalizationRange { lon: f64, lat: f64, t: i64 },
    #[error("duplicate point key {0:?}")]
    DuplicatePointKey(PointKey),
    #[error("point key {0:?} has no owner")]
    UnknownPointKey(PointKey),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid normalization window")]
    InvalidNormalization,
    #[error("embedding has length {0}, expected {EMBED_DIM}")]
    BadEmbedding(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Spatial box and time window mapping (lon, lat, t) onto [0, 1]^3.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub bbox: BBox,
    pub t_min: i64,
    pub t_max: i64,
}

impl Normalization {
    pub fn new(bbox: BBox, t_min: i64, t_max: i64) -> Result<Self, TpaError> {
        if !bbox.is_valid() || t_max <= t_min {
            return Err(TpaError::InvalidNormalization);
        }
        Ok(Self { bbox, t_min, t_max })
    }

    /// Box and window spanning every point given.
    pub fn covering<'a>(points: impl IntoIterator<Item = &'a SpatioTemporalPoint>, bbox: BBox) -> Result<Self, TpaError> {
        let (mut lo, mut hi) = (i64::MAX, i64::MIN);
        for p in points {
            lo = lo.min(p.t);
            hi = hi.max(p.t);
        }
        if lo > hi {
            return Err(TpaError::InvalidNormalization);
        }
        Self::new(bbox, lo, hi.max(lo + 1))
    }

    pub fn normalize(&self, p: &SpatioTemporalPoint) -> Result<[f64; 3], TpaError> {
        if !self.bbox.contains(p.lon, p.lat) || p.t < self.t_min || p.t > self.t_max {
            return Err(TpaError::OutOfNormalizationRange { lon: p.lon, lat: p.lat, t: p.t });
        }
        let b = &self.bbox;
        Ok([
            (p.lon - b.lon_min) / (b.lon_max - b.lon_min),
            (p.lat - b.lat_min) / (b.lat_max - b.lat_min),
            (p.t - self.t_min) as f64 / (self.t_max - self.t_min) as f64,
        ])
    }

    /// Inverse scaling; coordinates are clamped to valid WGS-84 ranges.
    pub fn denormalize(&self, x: &[f64; 3]) -> SpatioTemporalPoint {
        let b = &self.bbox;
        let lon = (b.lon_min + x[0] * (b.lon_max - b.lon_min)).clamp(-180.0, 180.0);
        let lat = (b.lat_min + x[1] * (b.lat_max - b.lat_min)).clamp(-90.0, 90.0);
        let t = self.t_min as f64 + x[2] * (self.t_max - self.t_min) as f64;
        SpatioTemporalPoint::new(lon, lat, t.round() as i64)
    }
}

/// Encoder 3→256→256→32 and decoder 32→256→256→3, GELU between layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpaParams {
    pub encoder: Vec<Dense>,
    pub decoder: Vec<Dense>,
    pub norm: Normalization,
}

const ENCODER_DIMS: [usize; 4] = [INPUT_DIM, HIDDEN_DIM, HIDDEN_DIM, EMBED_DIM];
const DECODER_DIMS: [usize; 4] = [EMBED_DIM, HIDDEN_DIM, HIDDEN_DIM, INPUT_DIM];

struct TpaNodes {
    encoder: Vec<DenseNodes>,
    decoder: Vec<DenseNodes>,
}

fn mlp(g: &mut Graph, layers: &[DenseNodes], mut x: NodeId) -> Result<NodeId, TensorError> {
    for (i, &l) in layers.iter().enumerate() {
        x = Dense::apply(g, l, x)?;
        if i + 1 < layers.len() {
            x = g.gelu(x)?;
        }
    }
    Ok(x)
}

impl TpaParams {
    pub fn init(norm: Normalization, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = ENCODER_DIMS.windows(2).map(|d| Dense::init(d[0], d[1], &mut rng)).collect();
        let decoder = DECODER_DIMS.windows(2).map(|d| Dense::init(d[0], d[1], &mut rng)).collect();
        let p = Self { encoder, decoder, norm };
        p.assert_shapes();
        p
    }

    pub fn zeros(norm: Normalization) -> Self {
        let encoder = ENCODER_DIMS.windows(2).map(|d| Dense::zeros(d[0], d[1])).collect();
        let decoder = DECODER_DIMS.windows(2).map(|d| Dense::zeros(d[0], d[1])).collect();
        Self { encoder, decoder, norm }
    }

    fn assert_shapes(&self) {
        assert_eq!(self.encoder.last().map(Dense::output_dim), Some(EMBED_DIM));
        assert_eq!(self.encoder[0].output_dim(), HIDDEN_DIM);
        assert_eq!(self.decoder[0].output_dim(), HIDDEN_DIM);
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.last().map_or(0, Dense::output_dim)
    }

    pub fn hidden_dim(&self) -> usize {
        self.encoder[0].output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.encoder.iter().chain(&self.decoder).map(Dense::param_count).sum()
    }

    /// Encoder layers then decoder layers, each weight (row-major) then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.encoder.iter().chain(&self.decoder) {
            l.write_flat(&mut out);
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<(), TpaError> {
        if flat.len() != self.param_count() {
            return Err(TpaError::LengthMismatch(flat.len(), self.param_count()));
        }
        let mut off = 0;
        for l in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            off += l.read_flat(&flat[off..]);
        }
        Ok(())
    }

    fn attach(&self, g: &mut Graph, trainable: bool) -> Result<TpaNodes, TensorError> {
        Ok(TpaNodes {
            encoder: self.encoder.iter().map(|l| l.attach(g, trainable)).collect::<Result<_, _>>()?,
            decoder: self.decoder.iter().map(|l| l.attach(g, trainable)).collect::<Result<_, _>>()?,
        })
    }

    fn feature_matrix(&self, points: &[SpatioTemporalPoint]) -> Result<Tensor, TpaError> {
        let mut data = Vec::with_capacity(points.len() * INPUT_DIM);
        for p in points {
            data.extend_from_slice(&self.norm.normalize(p)?);
        }
        Ok(Tensor::new(vec![points.len(), INPUT_DIM], data)?)
    }

    /// Encodes normalized features row by row.
    pub fn encode_features(&self, x: &Tensor) -> Result<Tensor, TpaError> {
        let mut g = Graph::new();
        let nodes = self.attach(&mut g, false)?;
        let x = g.constant(x.clone())?;
        let e = mlp(&mut g, &nodes.encoder, x)?;
        Ok(g.value(e).clone())
    }

    pub fn decode_features(&self, e: &Tensor) -> Result<Tensor, TpaError> {
        let mut g = Graph::new();
        let nodes = self.attach(&mut g, false)?;
        let x = g.constant(e.clone())?;
        let y = mlp(&mut g, &nodes.decoder, x)?;
        Ok(g.value(y).clone())
    }

    pub fn encode(&self, parent_id: &str, p: &SpatioTemporalPoint) -> Result<Embedding, TpaError> {
        let e = self.encode_features(&self.feature_matrix(std::slice::from_ref(p))?)?;
        Ok(Embedding { key: PointKey::new(parent_id, p.t), e: e.into_data() })
    }

    pub fn encode_sub(&self, sub: &SubTrajectory) -> Result<EmbeddingBatch, TpaError> {
        let e = self.encode_features(&self.feature_matrix(&sub.points)?)?;
        let embeddings = sub
            .points
            .iter()
            .zip(e.data().chunks(EMBED_DIM))
            .map(|(p, row)| Embedding { key: PointKey::new(&sub.parent_id, p.t), e: row.to_vec() })
            .collect();
        Ok(EmbeddingBatch { client_id: sub.client_id, embeddings })
    }

    /// Decoder output in normalized feature space.
    pub fn decode_normalized(&self, e: &Embedding) -> Result<[f64; 3], TpaError> {
        if e.e.len() != EMBED_DIM {
            return Err(TpaError::BadEmbedding(e.e.len()));
        }
        let y = self.decode_features(&Tensor::new(vec![1, EMBED_DIM], e.e.clone())?)?;
        Ok([y.data()[0], y.data()[1], y.data()[2]])
    }

    pub fn decode(&self, e: &Embedding) -> Result<SpatioTemporalPoint, TpaError> {
        Ok(self.norm.denormalize(&self.decode_normalized(e)?))
    }

    /// Reconstruction MSE of a point set in normalized space.
    pub fn reconstruction_mse(&self, points: &[SpatioTemporalPoint]) -> Result<f64, TpaError> {
        let x = self.feature_matrix(points)?;
        let y = self.decode_features(&self.encode_features(&x)?)?;
        Ok(mse(y.data(), x.data()))
    }

    /// Loss and flat gradient (same layout as `to_flat`) on a point batch.
    pub fn loss_and_grad(&self, points: &[SpatioTemporalPoint]) -> Result<(f64, Vec<f64>), TpaError> {
        let x = self.feature_matrix(points)?;
        let mut g = Graph::new();
        let nodes = self.attach(&mut g, true)?;
        let xn = g.constant(x)?;
        let e = mlp(&mut g, &nodes.encoder, xn)?;
        let y = mlp(&mut g, &nodes.decoder, e)?;
        let loss = recon_loss_node(&mut g, y, xn)?;
        let grads = g.backward(loss)?;
        let mut flat = Vec::with_capacity(self.param_count());
        for (layer, n) in self.encoder.iter().chain(&self.decoder).zip(nodes.encoder.iter().chain(&nodes.decoder)) {
            flat.extend_from_slice(grads.get_or_zeros(n.w, layer.w.shape()).data());
            flat.extend_from_slice(grads.get_or_zeros(n.b, layer.b.shape()).data());
        }
        Ok((g.value(loss).item(), flat))
    }

    /// One Adam step on a batch; returns the pre-step loss.
    pub fn train_step(&mut self, points: &[SpatioTemporalPoint], opt: &mut Adam, cfg: &AdamConfig) -> Result<f64, TpaError> {
        let (loss, grad) = self.loss_and_grad(points)?;
        let mut flat = self.to_flat();
        opt.step(&mut flat, &grad, cfg);
        self.load_flat(&flat)?;
        Ok(loss)
    }
}

/// Mean squared error over every coordinate of two equal-shaped nodes.
pub fn recon_loss_node(g: &mut Graph, pred: NodeId, target: NodeId) -> Result<NodeId, TensorError> {
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// MSE between decoded and true points, both given in normalized features.
pub fn recon_loss(decoded: &[[f64; 3]], truth: &[[f64; 3]]) -> Result<f64, TpaError> {
    if decoded.len() != truth.len() {
        return Err(TpaError::LengthMismatch(decoded.len(), truth.len()));
    }
    if decoded.is_empty() {
        return Ok(0.0);
    }
    Ok(mse(decoded.as_flattened(), truth.as_flattened()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;

    fn norm() -> Normalization {
        Normalization::new(BBox::new(116.0, 39.0, 117.0, 40.0), 0, 1000).unwrap()
    }

    #[test]
    fn shapes_and_count() {
        let p = TpaParams::init(norm(), 1);
        assert_eq!(p.embed_dim(), 32);
        assert_eq!(p.hidden_dim(), 256);
        let expected = (3 * 256 + 256) + (256 * 256 + 256) + (256 * 32 + 32) + (32 * 256 + 256) + (256 * 256 + 256) + (256 * 3 + 3);
        assert_eq!(p.param_count(), expected);
        assert_eq!(p.to_flat().len(), expected);
    }

    #[test]
    fn flat_round_trip_and_layout() {
        let p = TpaParams::init(norm(), 2);
        let flat = p.to_flat();
        assert_eq!(&flat[..3], &p.encoder[0].w.data()[..3]);
        assert_eq!(flat[3 * 256], p.encoder[0].b.data()[0]);
        let mut q = TpaParams::zeros(norm());
        q.load_flat(&flat).unwrap();
        assert_eq!(p, q);
        assert!(q.load_flat(&flat[1..]).is_err());
    }

    #[test]
    fn encode_deterministic_and_sized() {
        let p = TpaParams::init(norm(), 3);
        let pt = SpatioTemporalPoint::new(116.5, 39.5, 500);
        let a = p.encode("t", &pt).unwrap();
        let b = p.encode("t", &pt).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.e.len(), 32);
        assert_eq!(p.decode(&a).unwrap(), p.decode(&a).unwrap());
    }

    #[test]
    fn zero_weights_give_bias_pattern() {
        let mut p = TpaParams::zeros(norm());
        let bias: Vec<f64> = (0..32).map(|i| i as f64 * 0.1).collect();
        p.encoder[2].b = Tensor::vector(bias.clone());
        let a = p.encode("t", &SpatioTemporalPoint::new(116.1, 39.2, 10)).unwrap();
        let b = p.encode("t", &SpatioTemporalPoint::new(116.9, 39.8, 990)).unwrap();
        assert_eq!(a.e, bias);
        assert_eq!(b.e, bias);
    }

    #[test]
    fn out_of_range_rejected() {
        let p = TpaParams::init(norm(), 3);
        assert!(matches!(
            p.encode("t", &SpatioTemporalPoint::new(118.0, 39.5, 5)),
            Err(TpaError::OutOfNormalizationRange { .. })
        ));
        assert!(p.encode("t", &SpatioTemporalPoint::new(116.5, 39.5, 1001)).is_err());
    }

    #[test]
    fn normalization_round_trip() {
        let n = norm();
        let pt = SpatioTemporalPoint::new(116.25, 39.75, 400);
        let x = n.normalize(&pt).unwrap();
        assert_eq!(x, [0.25, 0.75, 0.4]);
        assert_eq!(n.denormalize(&x), pt);
    }

    #[test]
    fn recon_loss_examples() {
        let a = [[0.1, 0.2, 0.3], [0.5, 0.5, 0.5]];
        assert_eq!(recon_loss(&a, &a).unwrap(), 0.0);
        let delta = 0.2;
        let b: Vec<[f64; 3]> = a.iter().map(|r| [r[0] + delta, r[1], r[2]]).collect();
        assert!((recon_loss(&b, &a).unwrap() - delta * delta / 3.0).abs() < 1e-15);
        assert_eq!(recon_loss(&a[..1], &a), Err(TpaError::LengthMismatch(1, 2)));
    }

    #[test]
    fn recon_loss_gradcheck() {
        let target = Tensor::matrix(2, 3, vec![0.1, 0.4, 0.9, 0.3, 0.3, 0.2]).unwrap();
        let point = Tensor::matrix(2, 3, vec![0.5, -0.2, 0.7, 0.0, 0.8, 0.1]).unwrap();
        let r = gradcheck(
            |g, x| {
                let t = g.constant(target.clone())?;
                let h = g.gelu(x)?;
                recon_loss_node(g, h, t)
            },
            &point,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn small_step_decreases_loss() {
        let mut p = TpaParams::init(norm(), 4);
        let pts: Vec<_> = (0..20).map(|i| SpatioTemporalPoint::new(116.0 + 0.04 * i as f64, 39.5, i * 40)).collect();
        let (before, grad) = p.loss_and_grad(&pts).unwrap();
        let mut flat = p.to_flat();
        crate::autodiff::sgd_step(&mut flat, &grad, 1e-3);
        p.load_flat(&flat).unwrap();
        assert!(p.reconstruction_mse(&pts).unwrap() < before);
    }
}
