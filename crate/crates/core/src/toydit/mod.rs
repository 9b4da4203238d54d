//! A desk-scale diffusion transformer with classifier-free guidance.
//!
//! Pre-norm blocks (multi-head self-attention and a two-layer GELU MLP) with
//! adaptive norm modulation from the timestep embedding plus the condition
//! vector. A few norm channels per block swell to `outlier_gain` during a
//! window of the noise schedule, so the model shows massive activation
//! outliers whose location changes with the timestep. Sampling is 20-step
//! DDIM with guidance `eps_u + scale * (eps_c - eps_u)`.
//!
//! Linear layers, in order within block `b`: query, key, value, attention
//! output, MLP up, MLP down, with ids `6 b .. 6 b + 5`; the noise head is
//! the last id.

mod model;
pub mod schedule;

use crate::attention::{AttentionRecord, Branch, SharingPlan};
use crate::error::{Result, TrdqError};
use crate::quant::{fake_quantize, sqnr_db, Granularity, QuantConfig};
use crate::rng::{mix_seed, seeded};
use crate::rotation::BalancingToggles;
use crate::tensor::Tensor2D;
use crate::timebank::{
    CalibrationSettings, Grouping, LayerId, TimeParamBank, TimestepTrace, WeightBank,
};
use model::{forward, ForwardCtx, Linear, LinearExec, ModelWeights};
use rand_distr::{Distribution, StandardNormal};
use schedule::DdimSchedule;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub(crate) const LAYERS_PER_BLOCK: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Query,
    Key,
    Value,
    AttnOut,
    MlpUp,
    MlpDown,
    Head,
}

impl LayerKind {
    const BLOCK_ORDER: [LayerKind; LAYERS_PER_BLOCK] = [
        LayerKind::Query,
        LayerKind::Key,
        LayerKind::Value,
        LayerKind::AttnOut,
        LayerKind::MlpUp,
        LayerKind::MlpDown,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Query => "attn.q",
            LayerKind::Key => "attn.k",
            LayerKind::Value => "attn.v",
            LayerKind::AttnOut => "attn.out",
            LayerKind::MlpUp => "mlp.up",
            LayerKind::MlpDown => "mlp.down",
            LayerKind::Head => "head",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyDiTConfig {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub tokens: usize,
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
    pub mlp_ratio: usize,
    /// Planted outlier channels per norm and block.
    pub outlier_channels: usize,
    /// Peak gain of a planted channel.
    pub outlier_gain: f64,
    /// When false the unconditional branch gets its own random weights.
    pub tie_branches: bool,
    /// Rotation block size the dimensions must be divisible by.
    pub block_size: usize,
}

impl Default for ToyDiTConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            blocks: 4,
            tokens: 16,
            steps: 20,
            cfg_scale: 4.5,
            seed: 0,
            mlp_ratio: 4,
            outlier_channels: 3,
            outlier_gain: 20.0,
            tie_branches: true,
            block_size: 16,
        }
    }
}

impl ToyDiTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrdqError::ConfigMismatch(m));
        if self.dim == 0
            || self.heads == 0
            || self.blocks == 0
            || self.tokens == 0
            || self.steps == 0
        {
            return bad("model sizes must be positive".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            ));
        }
        if !self.dim.is_multiple_of(2) {
            return bad("dim must be even".into());
        }
        if self.block_size == 0
            || !self.dim.is_multiple_of(self.block_size)
            || !self.mlp_hidden().is_multiple_of(self.block_size)
        {
            return bad(format!(
                "dim {} not divisible by rotation block size {}",
                self.dim, self.block_size
            ));
        }
        if self.steps > schedule::TRAIN_TIMESTEPS {
            return bad("more sampling steps than training timesteps".into());
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn layer_count(&self) -> usize {
        self.blocks * LAYERS_PER_BLOCK + 1
    }

    pub fn layer_ids(&self) -> Vec<LayerId> {
        (0..self.layer_count() as LayerId).collect()
    }

    pub fn layer_id(&self, block: usize, kind: LayerKind) -> LayerId {
        match kind {
            LayerKind::Head => self.head_id(),
            k => {
                (block * LAYERS_PER_BLOCK
                    + LayerKind::BLOCK_ORDER.iter().position(|&o| o == k).unwrap())
                    as LayerId
            }
        }
    }

    pub fn head_id(&self) -> LayerId {
        (self.blocks * LAYERS_PER_BLOCK) as LayerId
    }

    /// `(block, kind)` of a layer id; the head reports block `blocks`.
    pub fn layer_kind(&self, id: LayerId) -> (usize, LayerKind) {
        let id = id as usize;
        if id >= self.blocks * LAYERS_PER_BLOCK {
            (self.blocks, LayerKind::Head)
        } else {
            (
                id / LAYERS_PER_BLOCK,
                LayerKind::BLOCK_ORDER[id % LAYERS_PER_BLOCK],
            )
        }
    }

    /// `(in_channels, out_channels)` of a layer.
    pub fn layer_shape(&self, id: LayerId) -> (usize, usize) {
        match self.layer_kind(id).1 {
            LayerKind::MlpUp => (self.dim, self.mlp_hidden()),
            LayerKind::MlpDown => (self.mlp_hidden(), self.dim),
            _ => (self.dim, self.dim),
        }
    }

    pub fn layer_name(&self, id: LayerId) -> String {
        match self.layer_kind(id) {
            (_, LayerKind::Head) => "head".to_string(),
            (b, k) => format!("blocks.{b}.{}", k.name()),
        }
    }
}

/// Which parts of the pipeline are active for a fake-quantized run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineToggles {
    pub balancing: BalancingToggles,
    /// Per-timestep parameters; off means a single bucket for the schedule.
    pub time_rotation: bool,
}

impl PipelineToggles {
    pub const FULL: Self = Self {
        balancing: BalancingToggles::ALL,
        time_rotation: true,
    };
    pub const PLAIN: Self = Self {
        balancing: BalancingToggles::NONE,
        time_rotation: false,
    };

    pub fn needs_bank(&self) -> bool {
        self.balancing.any()
    }

    /// Calibration settings that produce a bank matching these toggles.
    pub fn calibration_settings(&self, model: &ToyDiTConfig) -> CalibrationSettings {
        let grouping = if self.time_rotation {
            Grouping::PerStep
        } else {
            Grouping::Buckets(1)
        };
        let mut s = CalibrationSettings::new(model.steps as u32)
            .with_grouping(grouping)
            .with_toggles(self.balancing);
        s.rotation.block_size = model.block_size;
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSettings {
    pub weight_bits: u8,
    pub act_bits: u8,
    pub toggles: PipelineToggles,
}

impl QuantSettings {
    /// Bit-widths are restricted to 4, 6 and 8.
    pub fn new(weight_bits: u8, act_bits: u8, toggles: PipelineToggles) -> Result<Self> {
        for b in [weight_bits, act_bits] {
            if ![4, 6, 8].contains(&b) {
                return Err(TrdqError::domain(format!(
                    "bit-width {b} not in {{4, 6, 8}}"
                )));
            }
        }
        Ok(Self {
            weight_bits,
            act_bits,
            toggles,
        })
    }

    /// Any bit-width up to 32, for convergence checks against full precision.
    pub fn precision_limit(bits: u8, toggles: PipelineToggles) -> Result<Self> {
        QuantConfig::precision_limit(bits, Granularity::PerToken)?;
        Ok(Self {
            weight_bits: bits,
            act_bits: bits,
            toggles,
        })
    }

    fn weight_config(&self) -> Result<QuantConfig> {
        QuantConfig::precision_limit(self.weight_bits, Granularity::PerChannel)
    }

    fn act_config(&self) -> Result<QuantConfig> {
        Ok(QuantConfig::precision_limit(self.act_bits, Granularity::PerToken)?.with_dynamic(true))
    }
}

/// Execution mode applied to every linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerMode {
    Reference,
    /// Balancing transforms at full precision, without quantization.
    Balanced(PipelineToggles),
    FakeQuant(QuantSettings),
}

impl LayerMode {
    fn toggles(&self) -> Option<PipelineToggles> {
        match self {
            LayerMode::Reference => None,
            LayerMode::Balanced(t) => Some(*t),
            LayerMode::FakeQuant(q) => Some(q.toggles),
        }
    }

    fn quant(&self) -> Option<QuantSettings> {
        match self {
            LayerMode::FakeQuant(q) => Some(*q),
            _ => None,
        }
    }
}

/// Condition vectors and initial noise for one sampling run.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub condition: Vec<f64>,
    /// Conditioning of the unconditional branch (zeros unless overridden).
    pub null_condition: Vec<f64>,
    pub noise_seed: u64,
}

impl Sample {
    pub fn from_seed(cfg: &ToyDiTConfig, seed: u64) -> Self {
        let mut rng = seeded(mix_seed(seed, &[0xC0_4D]));
        let condition = (0..cfg.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self {
            condition,
            null_condition: vec![0.0; cfg.dim],
            noise_seed: seed,
        }
    }

    /// Same condition on both branches.
    pub fn with_identical_branches(mut self) -> Self {
        self.null_condition = self.condition.clone();
        self
    }
}

#[derive(Debug, Clone)]
pub struct ToyDiT {
    config: ToyDiTConfig,
    weights: ModelWeights,
    uncond_weights: Option<ModelWeights>,
    schedule: DdimSchedule,
}

impl ToyDiT {
    pub fn new(config: ToyDiTConfig) -> Result<Self> {
        config.validate()?;
        let weights = ModelWeights::random(&config, config.seed);
        let uncond_weights = (!config.tie_branches)
            .then(|| ModelWeights::random(&config, mix_seed(config.seed, &[0x0BC0])));
        Ok(Self {
            config,
            weights,
            uncond_weights,
            schedule: DdimSchedule::new(config.steps),
        })
    }

    pub fn config(&self) -> &ToyDiTConfig {
        &self.config
    }

    /// Weight matrices of the linear layers (conditional branch).
    pub fn linear_weights(&self) -> BTreeMap<LayerId, Tensor2D> {
        self.config
            .layer_ids()
            .into_iter()
            .map(|id| (id, self.weights.linear(&self.config, id).w.clone()))
            .collect()
    }

    fn branch_weights(&self, branch: Branch) -> &ModelWeights {
        match branch {
            Branch::Unconditional => self.uncond_weights.as_ref().unwrap_or(&self.weights),
            Branch::Conditional => &self.weights,
        }
    }

    fn initial_latent(&self, sample: &Sample) -> Tensor2D {
        let mut rng = seeded(mix_seed(sample.noise_seed, &[0x1A7E]));
        Tensor2D::randn(self.config.tokens, self.config.dim, 1.0, &mut rng)
    }

    fn check_sample(&self, sample: &Sample) -> Result<()> {
        if sample.condition.len() != self.config.dim
            || sample.null_condition.len() != self.config.dim
        {
            return Err(TrdqError::shape(
                "condition length must equal the model width",
            ));
        }
        Ok(())
    }

    fn sample_loop(
        &self,
        exec: &mut dyn LinearExec,
        sample: &Sample,
        plan: Option<&SharingPlan>,
        mut on_attention: Option<&mut dyn FnMut(u32, Branch, Vec<Tensor2D>)>,
    ) -> Result<(Tensor2D, RunStats)> {
        self.check_sample(sample)?;
        let mut latent = self.initial_latent(sample);
        let mut stats = RunStats::default();
        for step in 1..=self.config.steps {
            let noise_level = self.schedule.noise_level(step);
            let mut cond_attn = Vec::with_capacity(self.config.blocks);
            let mut ctx = ForwardCtx {
                step: step as u32,
                noise_level,
                branch: Branch::Conditional,
                condition: &sample.condition,
                share: None,
                attn_out: Some(&mut cond_attn),
                attn_computed: 0,
                attn_skipped: 0,
            };
            let eps_c = forward(
                &self.config,
                self.branch_weights(Branch::Conditional),
                exec,
                &latent,
                &mut ctx,
            )?;
            stats.attention_computed += ctx.attn_computed;

            let mut uncond_attn = Vec::with_capacity(self.config.blocks);
            let mut ctx = ForwardCtx {
                step: step as u32,
                noise_level,
                branch: Branch::Unconditional,
                condition: &sample.null_condition,
                share: plan.map(|p| (p, cond_attn.as_slice())),
                attn_out: Some(&mut uncond_attn),
                attn_computed: 0,
                attn_skipped: 0,
            };
            let eps_u = forward(
                &self.config,
                self.branch_weights(Branch::Unconditional),
                exec,
                &latent,
                &mut ctx,
            )?;
            stats.attention_computed += ctx.attn_computed;
            stats.attention_skipped += ctx.attn_skipped;

            if let Some(cb) = on_attention.as_deref_mut() {
                cb(step as u32, Branch::Conditional, cond_attn);
                cb(step as u32, Branch::Unconditional, uncond_attn);
            }

            let s = self.config.cfg_scale;
            let eps = eps_u.zip_with(&eps_c, |u, c| u + s * (c - u))?;
            let next = self.schedule.step(step, latent.data(), eps.data());
            latent = Tensor2D::new(self.config.tokens, self.config.dim, next)?;
        }
        Ok((latent, stats))
    }

    /// Full-precision sampling that records every linear input and every
    /// block's attention probabilities.
    pub fn capture(&self, sample: &Sample) -> Result<Capture> {
        let mut exec = ReferenceExec {
            traces: Some(Vec::new()),
        };
        let mut attention = Vec::new();
        let mut sink = |step: u32, branch: Branch, probs: Vec<Tensor2D>| {
            for (b, attn) in probs.into_iter().enumerate() {
                attention.push(AttentionRecord {
                    block_id: b as u32,
                    timestep: step,
                    branch,
                    attn,
                });
            }
        };
        let (latent, _) = self.sample_loop(&mut exec, sample, None, Some(&mut sink))?;
        Ok(Capture {
            activations: exec.traces.unwrap_or_default(),
            attention,
            latent,
        })
    }
}

/// Linear-layer inputs and attention probabilities from reference runs.
#[derive(Debug, Clone, Default)]
pub struct Capture {
    pub activations: Vec<BranchTrace>,
    pub attention: Vec<AttentionRecord>,
    pub latent: Tensor2D,
}

impl Default for Tensor2D {
    fn default() -> Self {
        Tensor2D::zeros(0, 0)
    }
}

/// A [`TimestepTrace`] tagged with the CFG branch it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchTrace {
    pub branch: Branch,
    pub trace: TimestepTrace,
}

/// Runs reference sampling for every condition and gathers all traces.
pub fn capture_traces(model: &ToyDiT, samples: &[Sample]) -> Result<Capture> {
    let mut all = Capture::default();
    for s in samples {
        let c = model.capture(s)?;
        all.activations.extend(c.activations);
        all.attention.extend(c.attention);
        all.latent = c.latent;
    }
    Ok(all)
}

struct ReferenceExec {
    traces: Option<Vec<BranchTrace>>,
}

impl LinearExec for ReferenceExec {
    fn linear(
        &mut self,
        id: LayerId,
        step: u32,
        branch: Branch,
        x: &Tensor2D,
        lin: &Linear,
    ) -> Result<Tensor2D> {
        if let Some(t) = self.traces.as_mut() {
            t.push(BranchTrace {
                branch,
                trace: TimestepTrace {
                    layer_id: id,
                    timestep: step,
                    activations: x.clone(),
                },
            });
        }
        lin.forward(x)
    }
}

enum PreparedWeights {
    Plain(BTreeMap<LayerId, Tensor2D>),
    Banked(WeightBank),
}

struct QuantExec<'a> {
    quant: Option<QuantSettings>,
    bank: Option<&'a TimeParamBank>,
    weights: &'a PreparedWeights,
    metrics: Option<&'a mut MetricsAccumulator>,
}

impl LinearExec for QuantExec<'_> {
    fn linear(
        &mut self,
        id: LayerId,
        step: u32,
        _branch: Branch,
        x: &Tensor2D,
        lin: &Linear,
    ) -> Result<Tensor2D> {
        let xt = match self.bank {
            Some(bank) => bank.lookup(id, step)?.transform_activations(x)?,
            None => x.clone(),
        };
        let xq = match self.quant {
            Some(q) => fake_quantize(&xt, q.act_config()?)?,
            None => xt.clone(),
        };
        let wq = match self.weights {
            PreparedWeights::Plain(m) => &m[&id],
            PreparedWeights::Banked(wb) => wb.get(id, step)?,
        };
        let y = xq.matmul(wq)?.add_row_vector(&lin.b)?;
        if let Some(acc) = self.metrics.as_deref_mut() {
            let y_ref = lin.forward(x)?;
            acc.add(id, step, &xt, &xq, &y_ref, &y);
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    /// Attention score/softmax evaluations that ran.
    pub attention_computed: usize,
    /// Unconditional evaluations replaced by the conditional branch.
    pub attention_skipped: usize,
}

#[derive(Debug, Clone)]
pub struct DenoiseRun {
    pub latent: Tensor2D,
    pub stats: RunStats,
}

/// Per `(layer, timestep)` error of a fake-quantized layer against the full
/// precision output for the same input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStepMetrics {
    pub layer_id: LayerId,
    pub layer: String,
    pub timestep: u32,
    pub act_sqnr_db: Option<f64>,
    pub output_sqnr_db: Option<f64>,
    pub output_mse: f64,
    pub calls: usize,
}

#[derive(Debug, Default, Clone)]
pub struct MetricsAccumulator {
    sums: BTreeMap<(LayerId, u32), [f64; 6]>,
}

impl MetricsAccumulator {
    fn add(
        &mut self,
        id: LayerId,
        step: u32,
        xt: &Tensor2D,
        xq: &Tensor2D,
        y_ref: &Tensor2D,
        y: &Tensor2D,
    ) {
        let e = self.sums.entry((id, step)).or_insert([0.0; 6]);
        for (a, b) in xt.data().iter().zip(xq.data()) {
            e[0] += a * a;
            e[1] += (a - b) * (a - b);
        }
        for (a, b) in y_ref.data().iter().zip(y.data()) {
            e[2] += a * a;
            e[3] += (a - b) * (a - b);
        }
        e[4] += y.data().len() as f64;
        e[5] += 1.0;
    }

    pub fn finish(&self, cfg: &ToyDiTConfig) -> Vec<LayerStepMetrics> {
        let finite = |v: f64| v.is_finite().then_some(v);
        self.sums
            .iter()
            .map(|(&(id, t), e)| LayerStepMetrics {
                layer_id: id,
                layer: cfg.layer_name(id),
                timestep: t,
                act_sqnr_db: finite(sqnr_db(e[0], e[1])),
                output_sqnr_db: finite(sqnr_db(e[2], e[3])),
                output_mse: e[3] / e[4].max(1.0),
                calls: e[5] as usize,
            })
            .collect()
    }
}

/// A model bound to an execution mode, parameter bank and sharing plan.
pub struct Denoiser<'a> {
    model: &'a ToyDiT,
    mode: LayerMode,
    bank: Option<&'a TimeParamBank>,
    plan: Option<&'a SharingPlan>,
    prepared: Option<PreparedWeights>,
}

impl<'a> Denoiser<'a> {
    pub fn new(
        model: &'a ToyDiT,
        mode: LayerMode,
        bank: Option<&'a TimeParamBank>,
        plan: Option<&'a SharingPlan>,
    ) -> Result<Self> {
        let cfg = model.config();
        if let Some(p) = plan {
            if let Some(&b) = p.shared_blocks.iter().find(|&&b| b as usize >= cfg.blocks) {
                return Err(TrdqError::ConfigMismatch(format!(
                    "sharing plan names block {b}, model has {}",
                    cfg.blocks
                )));
            }
        }
        let (bank, prepared) = match mode.toggles() {
            None => (None, None),
            Some(toggles) => {
                if model.uncond_weights.is_some() {
                    return Err(TrdqError::ConfigMismatch(
                        "transformed layers need tied branch weights".into(),
                    ));
                }
                let weights = model.linear_weights();
                let wcfg = mode.quant().map(|q| q.weight_config()).transpose()?;
                if toggles.needs_bank() {
                    let bank = bank.ok_or_else(|| TrdqError::Coverage {
                        missing: vec!["parameter bank".into()],
                    })?;
                    check_bank(cfg, bank, toggles)?;
                    (
                        Some(bank),
                        Some(PreparedWeights::Banked(
                            bank.prepare_weights(&weights, wcfg)?,
                        )),
                    )
                } else {
                    let plain = weights
                        .into_iter()
                        .map(|(id, w)| {
                            Ok((
                                id,
                                if let Some(c) = wcfg {
                                    fake_quantize(&w, c)?
                                } else {
                                    w
                                },
                            ))
                        })
                        .collect::<Result<BTreeMap<_, _>>>()?;
                    (None, Some(PreparedWeights::Plain(plain)))
                }
            }
        };
        Ok(Self {
            model,
            mode,
            bank,
            plan,
            prepared,
        })
    }

    pub fn run(&self, sample: &Sample) -> Result<DenoiseRun> {
        self.run_inner(sample, None)
    }

    /// Like [`Denoiser::run`], also accumulating per-layer error metrics.
    pub fn run_with_metrics(
        &self,
        sample: &Sample,
        metrics: &mut MetricsAccumulator,
    ) -> Result<DenoiseRun> {
        self.run_inner(sample, Some(metrics))
    }

    fn run_inner(
        &self,
        sample: &Sample,
        metrics: Option<&mut MetricsAccumulator>,
    ) -> Result<DenoiseRun> {
        let (latent, stats) = match &self.prepared {
            Some(weights) => {
                let mut exec = QuantExec {
                    quant: self.mode.quant(),
                    bank: self.bank,
                    weights,
                    metrics,
                };
                self.model.sample_loop(&mut exec, sample, self.plan, None)?
            }
            None => {
                let mut exec = ReferenceExec { traces: None };
                self.model.sample_loop(&mut exec, sample, self.plan, None)?
            }
        };
        Ok(DenoiseRun { latent, stats })
    }
}

fn check_bank(cfg: &ToyDiTConfig, bank: &TimeParamBank, toggles: PipelineToggles) -> Result<()> {
    let s = bank.settings();
    if s.schedule_len as usize != cfg.steps {
        return Err(TrdqError::ConfigMismatch(format!(
            "bank schedule has {} steps, model samples {}",
            s.schedule_len, cfg.steps
        )));
    }
    if s.toggles != toggles.balancing {
        return Err(TrdqError::ConfigMismatch(
            "bank was calibrated with different balancing factors".into(),
        ));
    }
    if !toggles.time_rotation && bank.group_count() != 1 {
        return Err(TrdqError::ConfigMismatch(
            "time rotation disabled but bank has several timestep groups".into(),
        ));
    }
    let mut missing = Vec::new();
    for id in cfg.layer_ids() {
        let (cin, _) = cfg.layer_shape(id);
        for t in 1..=cfg.steps as u32 {
            match bank.lookup(id, t) {
                Ok(bp) if bp.channels() != cin => {
                    return Err(TrdqError::ConfigMismatch(format!(
                        "bank layer {id} has {} channels, model expects {cin}",
                        bp.channels()
                    )))
                }
                Ok(_) => {}
                Err(_) => missing.push(format!("(layer {id}, step {t})")),
            }
        }
    }
    if !missing.is_empty() {
        return Err(TrdqError::Coverage { missing });
    }
    Ok(())
}

/// Runs one sampling trajectory.
pub fn denoise(
    model: &ToyDiT,
    mode: LayerMode,
    bank: Option<&TimeParamBank>,
    plan: Option<&SharingPlan>,
    sample: &Sample,
) -> Result<Tensor2D> {
    Ok(Denoiser::new(model, mode, bank, plan)?.run(sample)?.latent)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputMetrics {
    pub mse: f64,
    /// `None` when the outputs are identical.
    pub sqnr_db: Option<f64>,
    pub max_abs_err: f64,
    pub cosine: f64,
}

pub fn evaluate(reference_out: &Tensor2D, quant_out: &Tensor2D) -> Result<OutputMetrics> {
    if reference_out.shape() != quant_out.shape() {
        return Err(TrdqError::shape("evaluated outputs differ in shape"));
    }
    let (mut sig, mut noise, mut max_err) = (0.0, 0.0, 0.0_f64);
    let (mut dot, mut nq) = (0.0, 0.0);
    for (&r, &q) in reference_out.data().iter().zip(quant_out.data()) {
        sig += r * r;
        noise += (r - q) * (r - q);
        max_err = max_err.max((r - q).abs());
        dot += r * q;
        nq += q * q;
    }
    let n = reference_out.data().len().max(1) as f64;
    let cosine = if sig == 0.0 || nq == 0.0 {
        0.0
    } else {
        (dot / (sig.sqrt() * nq.sqrt())).clamp(-1.0, 1.0)
    };
    let s = sqnr_db(sig, noise);
    Ok(OutputMetrics {
        mse: noise / n,
        sqnr_db: s.is_finite().then_some(s),
        max_abs_err: max_err,
        cosine,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyDiTConfig {
        ToyDiTConfig {
            steps: 4,
            ..ToyDiTConfig::default()
        }
    }

    #[test]
    fn layer_id_mapping() {
        let cfg = ToyDiTConfig::default();
        assert_eq!(cfg.layer_count(), 25);
        assert_eq!(cfg.layer_id(1, LayerKind::MlpDown), 11);
        assert_eq!(cfg.layer_kind(11), (1, LayerKind::MlpDown));
        assert_eq!(cfg.layer_shape(11), (256, 64));
        assert_eq!(cfg.layer_kind(24), (4, LayerKind::Head));
        assert_eq!(cfg.layer_name(3), "blocks.0.attn.out");
    }

    #[test]
    fn config_validation() {
        assert!(ToyDiTConfig {
            heads: 5,
            ..small()
        }
        .validate()
        .is_err());
        assert!(ToyDiTConfig {
            block_size: 48,
            ..small()
        }
        .validate()
        .is_err());
        assert!(small().validate().is_ok());
    }

    #[test]
    fn reference_runs_are_deterministic() {
        let model = ToyDiT::new(small()).unwrap();
        let s = Sample::from_seed(model.config(), 3);
        let a = denoise(&model, LayerMode::Reference, None, None, &s).unwrap();
        let b = denoise(&model, LayerMode::Reference, None, None, &s).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
    }

    #[test]
    fn capture_counts_and_shapes() {
        let model = ToyDiT::new(small()).unwrap();
        let cfg = *model.config();
        let cap = model.capture(&Sample::from_seed(&cfg, 1)).unwrap();
        assert_eq!(cap.activations.len(), cfg.layer_count() * cfg.steps * 2);
        assert_eq!(cap.attention.len(), cfg.blocks * cfg.steps * 2);
        for bt in &cap.activations {
            let (cin, _) = cfg.layer_shape(bt.trace.layer_id);
            assert_eq!(bt.trace.activations.shape(), (cfg.tokens, cin));
        }
        let again = model.capture(&Sample::from_seed(&cfg, 1)).unwrap();
        assert_eq!(cap.activations, again.activations);
        assert_eq!(cap.attention, again.attention);
    }

    #[test]
    fn quantized_mode_requires_bank() {
        let model = ToyDiT::new(small()).unwrap();
        let q = QuantSettings::new(8, 8, PipelineToggles::FULL).unwrap();
        assert!(matches!(
            Denoiser::new(&model, LayerMode::FakeQuant(q), None, None),
            Err(TrdqError::Coverage { .. })
        ));
        assert!(QuantSettings::new(5, 8, PipelineToggles::FULL).is_err());
    }

    #[test]
    fn evaluate_basic() {
        let mut rng = seeded(4);
        let a = Tensor2D::randn(3, 5, 1.0, &mut rng);
        let m = evaluate(&a, &a).unwrap();
        assert_eq!(m.mse, 0.0);
        assert!((m.cosine - 1.0).abs() < 1e-15);
        assert!(m.sqnr_db.is_none());
        assert!((evaluate(&a, &a.scale(-1.0)).unwrap().cosine + 1.0).abs() < 1e-15);

        let b = Tensor2D::randn(3, 5, 1.0, &mut rng);
        let m = evaluate(&a, &b).unwrap();
        let mut mse = 0.0;
        let mut max_err = 0.0_f64;
        for i in 0..3 {
            for j in 0..5 {
                let e = a.get(i, j) - b.get(i, j);
                mse += e * e / 15.0;
                max_err = max_err.max(e.abs());
            }
        }
        assert!((m.mse - mse).abs() < 1e-14);
        assert_eq!(m.max_abs_err, max_err);
        assert!(evaluate(&a, &Tensor2D::zeros(2, 2)).is_err());
    }
}
