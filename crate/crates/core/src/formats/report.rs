//! JSON evaluation report.

use super::write_atomic;
use crate::error::{Result, TrdqError};
use crate::toydit::{LayerStepMetrics, OutputMetrics, PipelineToggles, ToyDiTConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveConfig {
    pub model: ToyDiTConfig,
    pub weight_bits: u8,
    pub act_bits: u8,
    pub toggles: PipelineToggles,
    pub grouping: Option<String>,
    pub alpha: Option<f64>,
    pub block_size: usize,
    pub share_threshold: Option<f64>,
    pub seeds: Vec<u64>,
}

/// End-to-end metrics of one configuration against the reference run,
/// per seed and averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigurationMetrics {
    pub name: String,
    pub toggles: PipelineToggles,
    pub per_seed: Vec<OutputMetrics>,
    /// Mean of the per-seed SQNR values in dB.
    pub mean_sqnr_db: Option<f64>,
    pub mean_mse: f64,
    pub mean_cosine: f64,
    pub attention_computed: usize,
    pub attention_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityEntry {
    pub block: u32,
    pub timestep: u32,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharingSummary {
    pub threshold: f64,
    pub shared_blocks: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub config: EffectiveConfig,
    /// The requested configuration first, followed by any comparison runs.
    pub end_to_end: Vec<ConfigurationMetrics>,
    /// Per `(layer, timestep)` metrics of the requested configuration.
    pub layers: Vec<LayerStepMetrics>,
    pub similarity: Vec<SimilarityEntry>,
    pub sharing: Option<SharingSummary>,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| TrdqError::format(format!("report serialization: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Report = serde_json::from_str(text)
            .map_err(|e| TrdqError::format(format!("report parse: {e}")))?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(TrdqError::format(format!(
                "unsupported report schema {}",
                report.schema_version
            )));
        }
        Ok(report)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}
