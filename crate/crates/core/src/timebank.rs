//! Per-timestep balancing parameters.
//!
//! Activation statistics drift over the denoising schedule, so the bank
//! holds one [`BalancingParams`] per `(layer, timestep group)`. Timesteps are
//! 1-based denoising step indices `1..=schedule_len`.

use crate::error::{Result, TrdqError};
use crate::quant::{fake_quantize, quantize, QuantConfig, QuantizedTensor};
use crate::rotation::{
    assemble_balancing_with, BalancingParams, BalancingToggles, RotationBuildConfig,
};
use crate::smoothing::DEFAULT_ALPHA;
use crate::tensor::Tensor2D;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub type LayerId = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct TimestepTrace {
    pub layer_id: LayerId,
    pub timestep: u32,
    /// `tokens x in_channels` input of the layer.
    pub activations: Tensor2D,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Grouping {
    PerStep,
    /// `count` contiguous buckets; step `t` goes to bucket `ceil(t * count / N)`.
    Buckets(usize),
}

impl Grouping {
    pub fn group_count(&self, schedule_len: u32) -> usize {
        match *self {
            Grouping::PerStep => schedule_len as usize,
            Grouping::Buckets(k) => k,
        }
    }

    /// 0-based group of the 1-based timestep `t`.
    pub fn group_of(&self, t: u32, schedule_len: u32) -> usize {
        match *self {
            Grouping::PerStep => t as usize - 1,
            Grouping::Buckets(k) => (t as usize * k).div_ceil(schedule_len as usize) - 1,
        }
    }

    fn validate(&self, schedule_len: u32) -> Result<()> {
        if schedule_len == 0 {
            return Err(TrdqError::domain("schedule length must be positive"));
        }
        if let Grouping::Buckets(k) = *self {
            if k == 0 || k > schedule_len as usize {
                return Err(TrdqError::domain(format!(
                    "bucket count {k} must be in [1, {schedule_len}]"
                )));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for Grouping {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Grouping::PerStep => write!(f, "per-step"),
            Grouping::Buckets(k) => write!(f, "buckets:{k}"),
        }
    }
}

impl std::str::FromStr for Grouping {
    type Err = TrdqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-step" | "per_step" => Ok(Grouping::PerStep),
            _ => s
                .strip_prefix("buckets:")
                .and_then(|k| k.parse().ok())
                .map(Grouping::Buckets)
                .ok_or_else(|| {
                    TrdqError::Usage(format!("grouping `{s}` is not `per-step` or `buckets:<k>`"))
                }),
        }
    }
}

/// Everything that determines how a bank is calibrated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSettings {
    pub alpha: f64,
    pub rotation: RotationBuildConfig,
    pub grouping: Grouping,
    pub schedule_len: u32,
    pub toggles: BalancingToggles,
}

impl CalibrationSettings {
    pub fn new(schedule_len: u32) -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            rotation: RotationBuildConfig::default(),
            grouping: Grouping::PerStep,
            schedule_len,
            toggles: BalancingToggles::ALL,
        }
    }

    pub fn with_grouping(mut self, grouping: Grouping) -> Self {
        self.grouping = grouping;
        self
    }

    pub fn with_toggles(mut self, toggles: BalancingToggles) -> Self {
        self.toggles = toggles;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeParamBank {
    settings: CalibrationSettings,
    entries: BTreeMap<(LayerId, usize), BalancingParams>,
}

impl TimeParamBank {
    /// Builds a bank from explicit entries, checking completeness.
    pub fn from_entries(
        settings: CalibrationSettings,
        entries: BTreeMap<(LayerId, usize), BalancingParams>,
    ) -> Result<Self> {
        settings.grouping.validate(settings.schedule_len)?;
        let groups = settings.grouping.group_count(settings.schedule_len);
        let layers: Vec<LayerId> = {
            let mut l: Vec<_> = entries.keys().map(|k| k.0).collect();
            l.dedup();
            l
        };
        let missing: Vec<String> = layers
            .iter()
            .flat_map(|&l| (0..groups).map(move |g| (l, g)))
            .filter(|k| !entries.contains_key(k))
            .map(|(l, g)| format!("(layer {l}, group {g})"))
            .collect();
        if !missing.is_empty() {
            return Err(TrdqError::Coverage { missing });
        }
        if entries.keys().any(|&(_, g)| g >= groups) {
            return Err(TrdqError::format(
                "bank entry group index beyond the schedule",
            ));
        }
        Ok(Self { settings, entries })
    }

    pub fn settings(&self) -> &CalibrationSettings {
        &self.settings
    }

    pub fn grouping(&self) -> Grouping {
        self.settings.grouping
    }

    pub fn schedule_len(&self) -> u32 {
        self.settings.schedule_len
    }

    pub fn entries(&self) -> &BTreeMap<(LayerId, usize), BalancingParams> {
        &self.entries
    }

    pub fn layers(&self) -> Vec<LayerId> {
        let mut l: Vec<_> = self.entries.keys().map(|k| k.0).collect();
        l.dedup();
        l
    }

    pub fn group_count(&self) -> usize {
        self.settings
            .grouping
            .group_count(self.settings.schedule_len)
    }

    pub fn group_of(&self, t: u32) -> Result<usize> {
        if t == 0 || t > self.settings.schedule_len {
            return Err(TrdqError::domain(format!(
                "timestep {t} outside [1, {}]",
                self.settings.schedule_len
            )));
        }
        Ok(self
            .settings
            .grouping
            .group_of(t, self.settings.schedule_len))
    }

    pub fn lookup(&self, layer: LayerId, t: u32) -> Result<&BalancingParams> {
        let g = self.group_of(t)?;
        self.entries
            .get(&(layer, g))
            .ok_or_else(|| TrdqError::Coverage {
                missing: vec![format!("(layer {layer}, step {t})")],
            })
    }

    /// Transforms every layer's weights with each group's parameters and,
    /// given a config, fake-quantizes them statically per output channel.
    pub fn prepare_weights(
        &self,
        weights: &BTreeMap<LayerId, Tensor2D>,
        bits: Option<QuantConfig>,
    ) -> Result<WeightBank> {
        let entries = self
            .entries
            .par_iter()
            .map(|(&key, bp)| {
                let w = weights.get(&key.0).ok_or_else(|| {
                    TrdqError::ConfigMismatch(format!("bank layer {} has no weights", key.0))
                })?;
                let wt = bp.transform_weights(w)?;
                match bits {
                    Some(cfg) => Ok((key, fake_quantize(&wt, cfg)?)),
                    None => Ok((key, wt)),
                }
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(WeightBank {
            grouping: self.settings.grouping,
            schedule_len: self.settings.schedule_len,
            entries,
        })
    }
}

/// Transformed, fake-quantized weight copies, one per `(layer, group)`.
#[derive(Debug, Clone)]
pub struct WeightBank {
    grouping: Grouping,
    schedule_len: u32,
    entries: BTreeMap<(LayerId, usize), Tensor2D>,
}

impl WeightBank {
    pub fn get(&self, layer: LayerId, t: u32) -> Result<&Tensor2D> {
        if t == 0 || t > self.schedule_len {
            return Err(TrdqError::domain(format!(
                "timestep {t} outside [1, {}]",
                self.schedule_len
            )));
        }
        let g = self.grouping.group_of(t, self.schedule_len);
        self.entries
            .get(&(layer, g))
            .ok_or_else(|| TrdqError::Coverage {
                missing: vec![format!("(layer {layer}, step {t})")],
            })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Concatenates each group's traces per layer and runs the balancing
/// assembly on them.
pub fn calibrate_bank(
    traces: &[TimestepTrace],
    weights: &BTreeMap<LayerId, Tensor2D>,
    settings: &CalibrationSettings,
) -> Result<TimeParamBank> {
    let n = settings.schedule_len;
    settings.grouping.validate(n)?;
    settings.rotation.validate()?;
    let groups = settings.grouping.group_count(n);

    let mut by_key: BTreeMap<(LayerId, usize), Vec<&Tensor2D>> = BTreeMap::new();
    for tr in traces {
        if tr.timestep == 0 || tr.timestep > n {
            return Err(TrdqError::domain(format!(
                "trace timestep {} outside [1, {n}]",
                tr.timestep
            )));
        }
        if !weights.contains_key(&tr.layer_id) {
            return Err(TrdqError::ConfigMismatch(format!(
                "trace for unknown layer {}",
                tr.layer_id
            )));
        }
        let g = settings.grouping.group_of(tr.timestep, n);
        by_key
            .entry((tr.layer_id, g))
            .or_default()
            .push(&tr.activations);
    }

    let mut missing = Vec::new();
    for &layer in weights.keys() {
        for t in 1..=n {
            let g = settings.grouping.group_of(t, n);
            if !by_key.contains_key(&(layer, g)) {
                match settings.grouping {
                    Grouping::PerStep => missing.push(format!("(layer {layer}, step {t})")),
                    Grouping::Buckets(_) => {
                        let key = format!("(layer {layer}, bucket {})", g + 1);
                        if !missing.contains(&key) {
                            missing.push(key);
                        }
                    }
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(TrdqError::Coverage { missing });
    }
    debug_assert_eq!(by_key.len(), weights.len() * groups);

    let entries = by_key
        .into_par_iter()
        .map(|(key, parts)| {
            let x = Tensor2D::vstack(&parts)?;
            let bp = assemble_balancing_with(
                &x,
                &weights[&key.0],
                settings.alpha,
                &settings.rotation,
                settings.toggles,
            )?;
            Ok((key, bp))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(TimeParamBank {
        settings: *settings,
        entries,
    })
}

/// Per-token quantization with scale and zero point taken from this tensor's
/// own row extremes.
pub fn dynamic_activation_quant(x_transformed: &Tensor2D, bits: u8) -> Result<QuantizedTensor> {
    quantize(x_transformed, QuantConfig::dynamic_per_token(bits)?)
}
