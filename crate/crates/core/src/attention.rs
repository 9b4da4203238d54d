//! Conditional/unconditional attention similarity and attention sharing
//! under classifier-free guidance.

use crate::error::{Result, TrdqError};
use crate::tensor::Tensor2D;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

pub const DEFAULT_SHARE_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Branch {
    Conditional,
    Unconditional,
}

impl Branch {
    pub fn to_u8(self) -> u8 {
        match self {
            Branch::Conditional => 0,
            Branch::Unconditional => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Branch::Conditional),
            1 => Some(Branch::Unconditional),
            _ => None,
        }
    }
}

/// Post-softmax attention probabilities of one block, all heads stacked
/// (`heads * tokens x tokens`).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub block_id: u32,
    pub timestep: u32,
    pub branch: Branch,
    pub attn: Tensor2D,
}

/// Flattened `a . b / (|a| |b|)`.
pub fn cosine_similarity(a: &Tensor2D, b: &Tensor2D) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(TrdqError::shape(format!(
            "cosine of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(TrdqError::domain("cosine similarity of a zero tensor"));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Cosine similarity per `(block, timestep)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    values: BTreeMap<(u32, u32), f64>,
}

impl SimilarityMatrix {
    pub fn from_values(values: BTreeMap<(u32, u32), f64>) -> Self {
        Self { values }
    }

    pub fn get(&self, block: u32, timestep: u32) -> Option<f64> {
        self.values.get(&(block, timestep)).copied()
    }

    pub fn values(&self) -> &BTreeMap<(u32, u32), f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn blocks(&self) -> BTreeSet<u32> {
        self.values.keys().map(|k| k.0).collect()
    }

    pub fn timesteps(&self) -> BTreeSet<u32> {
        self.values.keys().map(|k| k.1).collect()
    }

    /// `block,timestep,cosine` CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("block,timestep,cosine\n");
        for (&(b, t), v) in &self.values {
            out.push_str(&format!("{b},{t},{v:.17}\n"));
        }
        out
    }
}

/// Averages over repeated records of the same key (several calibration runs).
pub fn build_similarity_matrix(records: &[AttentionRecord]) -> Result<SimilarityMatrix> {
    let mut pairs: BTreeMap<(u32, u32), (Vec<&Tensor2D>, Vec<&Tensor2D>)> = BTreeMap::new();
    for r in records {
        let e = pairs.entry((r.block_id, r.timestep)).or_default();
        match r.branch {
            Branch::Conditional => e.0.push(&r.attn),
            Branch::Unconditional => e.1.push(&r.attn),
        }
    }
    let unpaired: Vec<String> = pairs
        .iter()
        .filter(|(_, (c, u))| c.len() != u.len())
        .map(|(&(b, t), _)| format!("(block {b}, step {t})"))
        .collect();
    if !unpaired.is_empty() {
        return Err(TrdqError::Coverage { missing: unpaired });
    }
    let mut values = BTreeMap::new();
    for (key, (cond, uncond)) in pairs {
        let mut sum = 0.0;
        for (c, u) in cond.iter().zip(&uncond) {
            sum += cosine_similarity(c, u)?;
        }
        values.insert(key, sum / cond.len() as f64);
    }
    Ok(SimilarityMatrix { values })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SharingPolicy {
    /// A block is shared at every timestep or not at all.
    AllTimesteps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharingPlan {
    pub shared_blocks: BTreeSet<u32>,
    pub threshold: f64,
    pub policy: SharingPolicy,
}

impl SharingPlan {
    pub fn none() -> Self {
        Self {
            shared_blocks: BTreeSet::new(),
            threshold: f64::INFINITY,
            policy: SharingPolicy::AllTimesteps,
        }
    }

    pub fn all(blocks: impl IntoIterator<Item = u32>) -> Self {
        Self {
            shared_blocks: blocks.into_iter().collect(),
            threshold: 0.0,
            policy: SharingPolicy::AllTimesteps,
        }
    }

    pub fn is_shared(&self, block: u32) -> bool {
        self.shared_blocks.contains(&block)
    }
}

/// A block is shared iff its similarity reaches `threshold` at every
/// timestep present in the matrix.
pub fn derive_sharing_plan(sim: &SimilarityMatrix, threshold: f64) -> SharingPlan {
    let steps = sim.timesteps();
    let shared_blocks = sim
        .blocks()
        .into_iter()
        .filter(|&b| {
            steps
                .iter()
                .all(|&t| sim.get(b, t).is_some_and(|v| v >= threshold))
        })
        .collect();
    SharingPlan {
        shared_blocks,
        threshold,
        policy: SharingPolicy::AllTimesteps,
    }
}

/// Attention for the unconditional branch. Shared blocks reuse `cond_attn`
/// without running `uncond_attn`; the flag reports whether it ran.
pub fn apply_sharing<F>(
    plan: &SharingPlan,
    block_id: u32,
    _t: u32,
    cond_attn: &Tensor2D,
    uncond_attn: F,
) -> Result<(Tensor2D, bool)>
where
    F: FnOnce() -> Result<Tensor2D>,
{
    if plan.is_shared(block_id) {
        Ok((cond_attn.clone(), false))
    } else {
        Ok((uncond_attn()?, true))
    }
}
