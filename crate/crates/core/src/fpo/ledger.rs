use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::secure_agg::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ClientToServer,
    ServerToClient,
    ClientToClient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    /// Point embeddings.
    Embedding,
    /// Point and item keys that index embeddings and results.
    Keys,
    /// Output distributions and context estimates.
    Result,
    /// Client LoRA uploads.
    Lora,
    /// Masked TPA blocks and their averaged broadcasts.
    TpaAgg,
    /// Global LoRA sent back to clients.
    Adapter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommEntry {
    pub direction: Direction,
    pub category: Category,
    pub frames: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundComm {
    pub round: u32,
    pub frozen: bool,
    /// The post-training evaluation exchange.
    pub eval: bool,
    pub entries: Vec<CommEntry>,
}

/// Bytes on the wire per round, direction and category. Every count is
/// the exact encoded frame size.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    rounds: BTreeMap<u32, (bool, bool)>,
    counts: BTreeMap<(u32, Direction, Category), (u64, u64)>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn mark_round(&mut self, round: u32, frozen: bool, eval: bool) {
        self.rounds.insert(round, (frozen, eval));
    }

    pub fn record(&mut self, round: u32, dir: Direction, cat: Category, frame: &Frame) {
        let e = self.counts.entry((round, dir, cat)).or_default();
        e.0 += 1;
        e.1 += frame.byte_len() as u64;
    }

    pub fn record_all<'a>(&mut self, round: u32, dir: Direction, cat: Category, frames: impl IntoIterator<Item = &'a Frame>) {
        for f in frames {
            self.record(round, dir, cat, f);
        }
    }

    pub fn merge(&mut self, other: &CommLedger) {
        for (&r, &flags) in &other.rounds {
            self.rounds.insert(r, flags);
        }
        for (&k, &(f, b)) in &other.counts {
            let e = self.counts.entry(k).or_default();
            e.0 += f;
            e.1 += b;
        }
    }

    pub fn bytes(&self, round: u32, dir: Direction, cat: Category) -> u64 {
        self.counts.get(&(round, dir, cat)).map_or(0, |e| e.1)
    }

    pub fn frames(&self, round: u32, dir: Direction, cat: Category) -> u64 {
        self.counts.get(&(round, dir, cat)).map_or(0, |e| e.0)
    }

    /// Sum over training rounds (the evaluation exchange excluded).
    pub fn total(&self, dir: Direction, cat: Category) -> u64 {
        self.counts
            .iter()
            .filter(|((r, d, c), _)| *d == dir && *c == cat && !self.is_eval(*r))
            .map(|(_, e)| e.1)
            .sum()
    }

    pub fn is_frozen(&self, round: u32) -> bool {
        self.rounds.get(&round).is_some_and(|f| f.0)
    }

    pub fn is_eval(&self, round: u32) -> bool {
        self.rounds.get(&round).is_some_and(|f| f.1)
    }

    pub fn round_numbers(&self) -> Vec<u32> {
        self.rounds.keys().copied().collect()
    }

    pub fn rounds(&self) -> Vec<RoundComm> {
        self.rounds
            .iter()
            .map(|(&round, &(frozen, eval))| RoundComm {
                round,
                frozen,
                eval,
                entries: self
                    .counts
                    .range((round, Direction::ClientToServer, Category::Embedding)..)
                    .take_while(|((r, _, _), _)| *r == round)
                    .map(|(&(_, direction, category), &(frames, bytes))| CommEntry { direction, category, frames, bytes })
                    .collect(),
            })
            .collect()
    }
}
