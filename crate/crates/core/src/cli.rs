//! Command-line driver: trace capture, calibration, evaluation and the
//! attention-similarity grid. Each command is also callable as a function.

use crate::attention::{build_similarity_matrix, derive_sharing_plan, SharingPlan};
use crate::error::{Result, TrdqError};
use crate::formats::{
    read_bank, write_atomic, write_bank, ConfigurationMetrics, EffectiveConfig, Report,
    SharingSummary, SimilarityEntry, TraceFile, REPORT_SCHEMA_VERSION,
};
use crate::rotation::BalancingToggles;
use crate::smoothing::DEFAULT_ALPHA;
use crate::timebank::{
    calibrate_bank, CalibrationSettings, Grouping, TimeParamBank, TimestepTrace,
};
use crate::toydit::{
    capture_traces, evaluate, Denoiser, LayerMode, MetricsAccumulator, OutputMetrics,
    PipelineToggles, QuantSettings, Sample, ToyDiT, ToyDiTConfig,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

/// Seeds of evaluation samples start here so they never coincide with the
/// calibration samples `0..k` written by `trace`.
pub const EVAL_SEED_BASE: u64 = 1_000;

#[derive(Debug, Parser)]
#[command(
    name = "trdq",
    version,
    about = "Time-aware rotation quantization for a toy diffusion transformer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run reference sampling and record layer inputs and attention.
    Trace(TraceArgs),
    /// Build a per-timestep parameter bank from a trace file.
    Calibrate(CalibrateArgs),
    /// Compare fake-quantized sampling against the reference.
    Eval(EvalArgs),
    /// Cosine similarity of conditional and unconditional attention.
    AttnSim(AttnSimArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 4)]
    pub blocks: usize,
    #[arg(long, default_value_t = 16)]
    pub tokens: usize,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    #[arg(long, default_value_t = 4.5)]
    pub cfg_scale: f64,
    /// Seed of the model weights.
    #[arg(long, default_value_t = 0)]
    pub model_seed: u64,
    /// Give the unconditional branch its own weights.
    #[arg(long)]
    pub untied: bool,
    /// Feed the condition vector to both branches.
    #[arg(long)]
    pub identical_branches: bool,
}

impl Default for ModelArgs {
    fn default() -> Self {
        let d = ToyDiTConfig::default();
        Self {
            dim: d.dim,
            heads: d.heads,
            blocks: d.blocks,
            tokens: d.tokens,
            steps: d.steps,
            cfg_scale: d.cfg_scale,
            model_seed: d.seed,
            untied: false,
            identical_branches: false,
        }
    }
}

impl ModelArgs {
    pub fn config(&self, block_size: usize) -> ToyDiTConfig {
        ToyDiTConfig {
            dim: self.dim,
            heads: self.heads,
            blocks: self.blocks,
            tokens: self.tokens,
            steps: self.steps,
            cfg_scale: self.cfg_scale,
            seed: self.model_seed,
            tie_branches: !self.untied,
            block_size,
            ..ToyDiTConfig::default()
        }
    }

    fn sample(&self, cfg: &ToyDiTConfig, seed: u64) -> Sample {
        let s = Sample::from_seed(cfg, seed);
        if self.identical_branches {
            s.with_identical_branches()
        } else {
            s
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TraceArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Number of calibration samples (seeds `0..k`).
    #[arg(long, default_value_t = 8)]
    pub seeds: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    Smooth,
    R1,
    P,
    R2,
    Tr,
}

pub fn toggles_without(ablate: &[Ablation]) -> PipelineToggles {
    let on = |a| !ablate.contains(&a);
    PipelineToggles {
        balancing: BalancingToggles {
            smooth: on(Ablation::Smooth),
            r1: on(Ablation::R1),
            permute: on(Ablation::P),
            r2: on(Ablation::R2),
        },
        time_rotation: on(Ablation::Tr),
    }
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = 16)]
    pub block_size: usize,
    /// `per-step` or `buckets:K`; defaults to per-step.
    #[arg(long)]
    pub grouping: Option<Grouping>,
    /// Seed of the rotation search.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub greedy_steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub stop_tol: f64,
    /// Factors to leave out of the bank; `tr` means a single bucket.
    #[arg(long, value_delimiter = ',')]
    pub ablate: Vec<Ablation>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Traces to recalibrate from when the ablation differs from the bank.
    #[arg(long)]
    pub traces: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub wbits: u8,
    #[arg(long, default_value_t = 8)]
    pub abits: u8,
    #[arg(long, value_delimiter = ',')]
    pub ablate: Vec<Ablation>,
    /// Enable attention sharing for blocks at or above this cosine.
    #[arg(long)]
    pub share_threshold: Option<f64>,
    /// Number of evaluation samples.
    #[arg(long, default_value_t = 8)]
    pub seeds: u64,
    #[arg(long, default_value_t = 16)]
    pub block_size: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct AttnSimArgs {
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Trace(a) => cmd_trace(&a),
        Command::Calibrate(a) => cmd_calibrate(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::AttnSim(a) => cmd_attn_sim(&a),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code, printing diagnostics to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("trdq: {e}");
            e.exit_code()
        }
    }
}

pub fn cmd_trace(args: &TraceArgs) -> Result<()> {
    let cfg = args.model.config(ToyDiTConfig::default().block_size);
    let model = ToyDiT::new(cfg)?;
    let samples: Vec<Sample> = (0..args.seeds)
        .map(|s| args.model.sample(&cfg, s))
        .collect();
    let capture = capture_traces(&model, &samples)?;
    TraceFile::from_capture(&capture)?.write(&args.out)
}

fn check_traces(cfg: &ToyDiTConfig, traces: &[TimestepTrace]) -> Result<()> {
    let layers = cfg.layer_count() as u32;
    for t in traces {
        if t.layer_id >= layers {
            return Err(TrdqError::ConfigMismatch(format!(
                "trace layer {} beyond the model's {layers}",
                t.layer_id
            )));
        }
        let (cin, _) = cfg.layer_shape(t.layer_id);
        if t.activations.cols() != cin {
            return Err(TrdqError::ConfigMismatch(format!(
                "trace for layer {} has {} channels, model expects {cin}",
                t.layer_id,
                t.activations.cols()
            )));
        }
        if t.timestep == 0 || t.timestep as usize > cfg.steps {
            return Err(TrdqError::ConfigMismatch(format!(
                "trace timestep {} outside the model's {} steps",
                t.timestep, cfg.steps
            )));
        }
    }
    Ok(())
}

/// Calibrates a bank from the layer inputs of both guidance branches.
pub fn calibrate_from_traces(
    model: &ToyDiT,
    trace: &TraceFile,
    settings: &CalibrationSettings,
) -> Result<TimeParamBank> {
    let traces: Vec<TimestepTrace> = trace.activations().into_iter().map(|b| b.trace).collect();
    check_traces(model.config(), &traces)?;
    calibrate_bank(&traces, &model.linear_weights(), settings)
}

pub fn cmd_calibrate(args: &CalibrateArgs) -> Result<TimeParamBank> {
    let toggles = toggles_without(&args.ablate);
    let grouping = match (args.grouping, toggles.time_rotation) {
        (Some(g), true) => g,
        (None, true) => Grouping::PerStep,
        (None, false) | (Some(Grouping::Buckets(1)), false) => Grouping::Buckets(1),
        (Some(g), false) => {
            return Err(TrdqError::Usage(format!(
                "--ablate tr needs a single bucket, got --grouping {g}"
            )))
        }
    };
    let cfg = args.model.config(args.block_size);
    let model = ToyDiT::new(cfg)?;
    let trace = TraceFile::read(&args.traces)?;
    let mut settings = CalibrationSettings::new(cfg.steps as u32)
        .with_grouping(grouping)
        .with_toggles(toggles.balancing);
    settings.alpha = args.alpha;
    settings.rotation.block_size = args.block_size;
    settings.rotation.rng_seed = args.seed;
    settings.rotation.max_greedy_steps = args.greedy_steps;
    settings.rotation.stop_tol = args.stop_tol;
    let bank = calibrate_from_traces(&model, &trace, &settings)?;
    write_bank(&bank, &args.out)?;
    Ok(bank)
}

fn bank_matches(bank: &TimeParamBank, toggles: PipelineToggles) -> bool {
    bank.settings().toggles == toggles.balancing
        && (toggles.time_rotation || bank.group_count() == 1)
}

/// The bank to evaluate with: the given one when it was calibrated for
/// `toggles`, otherwise a recalibration from `traces` with its settings.
fn resolve_bank(
    args: &EvalArgs,
    model: &ToyDiT,
    toggles: PipelineToggles,
) -> Result<Option<TimeParamBank>> {
    if !toggles.needs_bank() {
        return Ok(None);
    }
    let path = args.bank.as_ref().ok_or_else(|| {
        TrdqError::Usage("balancing factors are enabled but no --bank was given".into())
    })?;
    let bank = read_bank(path)?;
    if bank.settings().rotation.block_size != model.config().block_size {
        return Err(TrdqError::ConfigMismatch(format!(
            "bank block size {} differs from --block-size {}",
            bank.settings().rotation.block_size,
            model.config().block_size
        )));
    }
    if bank_matches(&bank, toggles) {
        return Ok(Some(bank));
    }
    let traces = args.traces.as_ref().ok_or_else(|| {
        TrdqError::ConfigMismatch(
            "bank was calibrated for other factors; pass --traces to recalibrate".into(),
        )
    })?;
    let mut settings = *bank.settings();
    settings.toggles = toggles.balancing;
    if !toggles.time_rotation {
        settings.grouping = Grouping::Buckets(1);
    } else if bank.group_count() == 1 {
        settings.grouping = Grouping::PerStep;
    }
    Ok(Some(calibrate_from_traces(
        model,
        &TraceFile::read(traces)?,
        &settings,
    )?))
}

/// Reference and quantized runs over the evaluation seeds.
pub fn evaluate_configuration(
    model: &ToyDiT,
    name: &str,
    settings: QuantSettings,
    bank: Option<&TimeParamBank>,
    plan: Option<&SharingPlan>,
    samples: &[Sample],
    metrics: Option<&mut MetricsAccumulator>,
) -> Result<ConfigurationMetrics> {
    let reference = Denoiser::new(model, LayerMode::Reference, None, None)?;
    let quant = Denoiser::new(model, LayerMode::FakeQuant(settings), bank, plan)?;
    let mut acc = MetricsAccumulator::default();
    let mut per_seed = Vec::with_capacity(samples.len());
    let (mut computed, mut skipped) = (0, 0);
    for s in samples {
        let r = reference.run(s)?;
        let q = quant.run_with_metrics(s, &mut acc)?;
        computed += q.stats.attention_computed;
        skipped += q.stats.attention_skipped;
        per_seed.push(evaluate(&r.latent, &q.latent)?);
    }
    if let Some(m) = metrics {
        *m = acc;
    }
    Ok(summarize(
        name,
        settings.toggles,
        per_seed,
        computed,
        skipped,
    ))
}

fn summarize(
    name: &str,
    toggles: PipelineToggles,
    per_seed: Vec<OutputMetrics>,
    computed: usize,
    skipped: usize,
) -> ConfigurationMetrics {
    let n = per_seed.len().max(1) as f64;
    let sqnrs: Option<Vec<f64>> = per_seed.iter().map(|m| m.sqnr_db).collect();
    ConfigurationMetrics {
        name: name.to_string(),
        toggles,
        mean_sqnr_db: sqnrs
            .filter(|v| !v.is_empty())
            .map(|v| v.iter().sum::<f64>() / v.len() as f64),
        mean_mse: per_seed.iter().map(|m| m.mse).sum::<f64>() / n,
        mean_cosine: per_seed.iter().map(|m| m.cosine).sum::<f64>() / n,
        per_seed,
        attention_computed: computed,
        attention_skipped: skipped,
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<Report> {
    let toggles = toggles_without(&args.ablate);
    let settings = QuantSettings::new(args.wbits, args.abits, toggles)?;
    if let Some(t) = args.share_threshold {
        if !(t > 0.0) {
            return Err(TrdqError::domain(format!(
                "share threshold {t} must be positive"
            )));
        }
    }
    let cfg = args.model.config(args.block_size);
    let model = ToyDiT::new(cfg)?;
    let bank = resolve_bank(args, &model, toggles)?;
    let samples: Vec<Sample> = (0..args.seeds)
        .map(|i| args.model.sample(&cfg, EVAL_SEED_BASE + i))
        .collect();

    let (plan, similarity) = match args.share_threshold {
        Some(tau) => {
            let capture = capture_traces(&model, &samples)?;
            let sim = build_similarity_matrix(&capture.attention)?;
            (Some(derive_sharing_plan(&sim, tau)), Some(sim))
        }
        None => (None, None),
    };

    let mut acc = MetricsAccumulator::default();
    let main = evaluate_configuration(
        &model,
        "requested",
        settings,
        bank.as_ref(),
        plan.as_ref(),
        &samples,
        Some(&mut acc),
    )?;
    let report = Report {
        schema_version: REPORT_SCHEMA_VERSION,
        config: EffectiveConfig {
            model: cfg,
            weight_bits: args.wbits,
            act_bits: args.abits,
            toggles,
            grouping: bank.as_ref().map(|b| b.grouping().to_string()),
            alpha: bank.as_ref().map(|b| b.settings().alpha),
            block_size: args.block_size,
            share_threshold: args.share_threshold,
            seeds: samples.iter().map(|s| s.noise_seed).collect(),
        },
        end_to_end: vec![main],
        layers: acc.finish(&cfg),
        similarity: similarity
            .map(|s| {
                s.values()
                    .iter()
                    .map(|(&(block, timestep), &cosine)| SimilarityEntry {
                        block,
                        timestep,
                        cosine,
                    })
                    .collect()
            })
            .unwrap_or_default(),
        sharing: plan.map(|p| SharingSummary {
            threshold: p.threshold,
            shared_blocks: p.shared_blocks.into_iter().collect(),
        }),
    };
    report.write(&args.out)?;
    Ok(report)
}

pub fn cmd_attn_sim(args: &AttnSimArgs) -> Result<()> {
    let trace = TraceFile::read(&args.traces)?;
    let records = trace.attention();
    if records.is_empty() {
        return Err(TrdqError::Coverage {
            missing: vec!["attention records".into()],
        });
    }
    let sim = build_similarity_matrix(&records)?;
    write_atomic(&args.out, sim.to_csv().as_bytes())
}
