use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TpaError;

/// Orders embeddings by parent trajectory, then time.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PointKey {
    pub parent_id: String,
    pub t: i64,
}

impl PointKey {
    pub fn new(parent_id: &str, t: i64) -> Self {
        Self { parent_id: parent_id.to_string(), t }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub key: PointKey,
    pub e: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBatch {
    pub client_id: usize,
    pub embeddings: Vec<Embedding>,
}

impl EmbeddingBatch {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}

/// Which client owns each point key.
pub type OwnershipMap = BTreeMap<PointKey, usize>;

/// Merges client batches into one sequence sorted by key.
pub fn union_embeddings(batches: &[EmbeddingBatch]) -> Result<(Vec<Embedding>, OwnershipMap), TpaError> {
    let mut owners = OwnershipMap::new();
    let mut all = Vec::with_capacity(batches.iter().map(EmbeddingBatch::len).sum());
    for b in batches {
        for e in &b.embeddings {
            if owners.insert(e.key.clone(), b.client_id).is_some() {
                return Err(TpaError::DuplicatePointKey(e.key.clone()));
            }
            all.push(e.clone());
        }
    }
    all.sort_by(|a, b| a.key.cmp(&b.key));
    Ok((all, owners))
}

/// Routes each result back to its owner. Batches come out ordered by client
/// id, each in key order.
pub fn split_results(results: &[Embedding], owners: &OwnershipMap) -> Result<Vec<EmbeddingBatch>, TpaError> {
    let mut per: BTreeMap<usize, Vec<Embedding>> = BTreeMap::new();
    for e in results {
        let &c = owners.get(&e.key).ok_or_else(|| TpaError::UnknownPointKey(e.key.clone()))?;
        per.entry(c).or_default().push(e.clone());
    }
    Ok(per
        .into_iter()
        .map(|(client_id, mut embeddings)| {
            embeddings.sort_by(|a, b| a.key.cmp(&b.key));
            EmbeddingBatch { client_id, embeddings }
        })
        .collect())
}
