//! Pairwise-masked aggregation of flat parameter vectors.
//!
//! Each client splits its vector into one block per client, masks every
//! block with antisymmetric pairwise keys and sends block k to client k.
//! Client k averages what it receives (the masks cancel) and broadcasts.

mod wire;

pub use wire::{read_trace, write_trace, Frame, TraceKind, TraceRecord, HEADER_BYTES};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SecureAggError {
    #[error("no key for client pair involving {0}")]
    MissingKey(usize),
    #[error("no masked block from client {0}")]
    MissingClient(usize),
    #[error("client {0} sent more than one block")]
    DuplicateClient(usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("parameter vector is empty")]
    EmptyParams,
    #[error("no clients")]
    NoClients,
    #[error("decode: {0}")]
    Decode(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Shared mask of the unordered pair (i, j), stored with i < j.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskKey {
    pub i: usize,
    pub j: usize,
    pub mask: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeySet {
    pub num_clients: usize,
    pub block_len: usize,
    keys: BTreeMap<(usize, usize), MaskKey>,
}

impl KeySet {
    /// Key for the pair, in either argument order.
    pub fn get(&self, i: usize, j: usize) -> Option<&MaskKey> {
        self.keys.get(&(i.min(j), i.max(j)))
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &MaskKey> {
        self.keys.values()
    }

    pub fn zeros(num_clients: usize, block_len: usize) -> Self {
        let mut keys = BTreeMap::new();
        for i in 0..num_clients {
            for j in i + 1..num_clients {
                keys.insert((i, j), MaskKey { i, j, mask: vec![0.0; block_len] });
            }
        }
        Self { num_clients, block_len, keys }
    }

    pub fn remove(&mut self, i: usize, j: usize) -> Option<MaskKey> {
        self.keys.remove(&(i.min(j), i.max(j)))
    }
}

fn sha_seed(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// Seed for the key set of one block in one round.
pub fn round_seed(session_seed: u64, round: u32, block: usize) -> u64 {
    let d = sha_seed(&[b"round", &session_seed.to_le_bytes(), &round.to_le_bytes(), &(block as u64).to_le_bytes()]);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Masks for all unordered pairs, uniform in [-1, 1], each drawn from a
/// generator seeded by a hash of (seed, min(i,j), max(i,j)).
pub fn gen_pairwise_keys(num_clients: usize, block_len: usize, session_seed: u64) -> KeySet {
    let mut keys = BTreeMap::new();
    for i in 0..num_clients {
        for j in i + 1..num_clients {
            let seed = sha_seed(&[b"pairmask", &session_seed.to_le_bytes(), &(i as u64).to_le_bytes(), &(j as u64).to_le_bytes()]);
            let mut rng = ChaCha20Rng::from_seed(seed);
            let mask = (0..block_len).map(|_| rng.random_range(-1.0..=1.0)).collect();
            keys.insert((i, j), MaskKey { i, j, mask });
        }
    }
    KeySet { num_clients, block_len, keys }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterBlock {
    pub k: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedBlock {
    pub k: usize,
    pub origin: usize,
    pub values: Vec<f64>,
}

/// Contiguous blocks of length ceil(L / clients); the last takes the rest.
/// Fewer blocks than clients are produced when L is small.
pub fn partition_params(flat: &[f64], num_clients: usize) -> Result<Vec<ParameterBlock>, SecureAggError> {
    if flat.is_empty() {
        return Err(SecureAggError::EmptyParams);
    }
    if num_clients == 0 {
        return Err(SecureAggError::NoClients);
    }
    let size = flat.len().div_ceil(num_clients);
    Ok(flat.chunks(size).enumerate().map(|(k, c)| ParameterBlock { k, values: c.to_vec() }).collect())
}

/// Sign applied by client i to the key shared with j.
pub fn mask_sign(i: usize, j: usize) -> f64 {
    if i < j {
        1.0
    } else {
        -1.0
    }
}

/// block + Σ_{j≠i} a_ij · sk_ij with a_ij = +1 for i < j and -1 for i > j.
pub fn mask_block(block: &ParameterBlock, i: usize, keys: &KeySet) -> Result<MaskedBlock, SecureAggError> {
    let mut values = block.values.clone();
    for j in (0..keys.num_clients).filter(|&j| j != i) {
        let key = keys.get(i, j).ok_or(SecureAggError::MissingKey(j))?;
        if key.mask.len() != values.len() {
            return Err(SecureAggError::LengthMismatch(key.mask.len(), values.len()));
        }
        let a = mask_sign(i, j);
        for (v, m) in values.iter_mut().zip(&key.mask) {
            *v += a * m;
        }
    }
    Ok(MaskedBlock { k: block.k, origin: i, values })
}

/// Mean of one block index over all clients. Inputs are summed in origin
/// order so the result does not depend on arrival order.
pub fn aggregate_masked(blocks: &[MaskedBlock], num_clients: usize) -> Result<Vec<f64>, SecureAggError> {
    let mut by_origin: BTreeMap<usize, &MaskedBlock> = BTreeMap::new();
    for b in blocks {
        if by_origin.insert(b.origin, b).is_some() {
            return Err(SecureAggError::DuplicateClient(b.origin));
        }
    }
    if let Some(missing) = (0..num_clients).find(|c| !by_origin.contains_key(c)) {
        return Err(SecureAggError::MissingClient(missing));
    }
    let len = by_origin.values().next().map(|b| b.values.len()).ok_or(SecureAggError::NoClients)?;
    let mut sum = vec![0.0; len];
    for b in by_origin.values() {
        if b.values.len() != len {
            return Err(SecureAggError::LengthMismatch(b.values.len(), len));
        }
        for (s, v) in sum.iter_mut().zip(&b.values) {
            *s += v;
        }
    }
    let n = num_clients as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub session_seed: u64,
    pub round: u32,
    /// Use all-zero masks (degenerate check only).
    pub zero_keys: bool,
    /// Shuffle message delivery with this seed.
    pub delivery_seed: Option<u64>,
}

impl RoundConfig {
    pub fn new(session_seed: u64, round: u32) -> Self {
        Self { session_seed, round, zero_keys: false, delivery_seed: None }
    }
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    /// Each client's parameter vector after the broadcast.
    pub per_client: Vec<Vec<f64>>,
    /// Every delivered message, in delivery order.
    pub trace: Vec<TraceRecord>,
    /// Masked blocks received per aggregator.
    pub received: Vec<usize>,
}

impl RoundOutcome {
    pub fn bytes_sent(&self) -> usize {
        self.trace.iter().map(|r| r.frame.byte_len()).sum()
    }
}

/// Keys used for block `k` of a round.
pub fn block_keys(cfg: &RoundConfig, num_clients: usize, k: usize, block_len: usize) -> KeySet {
    if cfg.zero_keys {
        KeySet::zeros(num_clients, block_len)
    } else {
        gen_pairwise_keys(num_clients, block_len, round_seed(cfg.session_seed, cfg.round, k))
    }
}

/// One full masked aggregation: mask, send block k to client k, average,
/// broadcast, reassemble.
pub fn run_aggregation_round(params: &[Vec<f64>], cfg: &RoundConfig) -> Result<RoundOutcome, SecureAggError> {
    let c = params.len();
    if c == 0 {
        return Err(SecureAggError::NoClients);
    }
    let len = params[0].len();
    if let Some(bad) = params.iter().find(|p| p.len() != len) {
        return Err(SecureAggError::LengthMismatch(bad.len(), len));
    }
    let blocks: Vec<Vec<ParameterBlock>> = params.iter().map(|p| partition_params(p, c)).collect::<Result<_, _>>()?;
    let nblocks = blocks[0].len();
    let keys: Vec<KeySet> = (0..nblocks).map(|k| block_keys(cfg, c, k, blocks[0][k].values.len())).collect();

    let mut outbox = Vec::with_capacity(c * nblocks);
    for (i, client_blocks) in blocks.iter().enumerate() {
        for b in client_blocks {
            let m = mask_block(b, i, &keys[b.k])?;
            outbox.push(TraceRecord {
                kind: TraceKind::Masked,
                dest: b.k as u16,
                frame: Frame::new(cfg.round, b.k as u16, i as u16, m.values),
            });
        }
    }
    if let Some(s) = cfg.delivery_seed {
        outbox.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    }

    let mut inbox: Vec<Vec<MaskedBlock>> = vec![Vec::new(); nblocks];
    let mut trace = Vec::with_capacity(outbox.len() + nblocks * c);
    let mut averaged: Vec<Option<Vec<f64>>> = vec![None; nblocks];
    for rec in outbox {
        let k = rec.frame.block as usize;
        inbox[k].push(MaskedBlock { k, origin: rec.frame.origin as usize, values: rec.frame.values.clone() });
        trace.push(rec);
        // Barrier: aggregate once every client's block has arrived.
        if inbox[k].len() == c {
            let avg = aggregate_masked(&inbox[k], c)?;
            for dest in (0..c).filter(|&d| d != k) {
                trace.push(TraceRecord {
                    kind: TraceKind::Broadcast,
                    dest: dest as u16,
                    frame: Frame::new(cfg.round, k as u16, k as u16, avg.clone()),
                });
            }
            averaged[k] = Some(avg);
        }
    }
    let global: Vec<f64> = averaged
        .into_iter()
        .enumerate()
        .map(|(k, a)| a.ok_or(SecureAggError::MissingClient(k)))
        .collect::<Result<Vec<_>, _>>()?
        .concat();
    Ok(RoundOutcome { per_client: vec![global; c], trace, received: inbox.iter().map(Vec::len).collect() })
}

/// Plain mean of the client vectors, for comparison.
pub fn plain_average(params: &[Vec<f64>]) -> Vec<f64> {
    let n = params.len() as f64;
    let mut out = vec![0.0; params.first().map_or(0, Vec::len)];
    for p in params {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v / n;
        }
    }
    out
}
