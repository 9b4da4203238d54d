use std::sync::OnceLock;

use trdq::attention::{Branch, SharingPlan};
use trdq::timebank::{calibrate_bank, Grouping, TimeParamBank, TimestepTrace};
use trdq::toydit::{
    capture_traces, denoise, evaluate, Denoiser, LayerMode, PipelineToggles, QuantSettings, Sample,
    ToyDiT, ToyDiTConfig,
};
use trdq::{BalancingToggles, Tensor2D, TrdqError};

struct Fixture {
    model: ToyDiT,
    traces: Vec<TimestepTrace>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let model = ToyDiT::new(ToyDiTConfig::default()).unwrap();
        let cfg = *model.config();
        let calib: Vec<Sample> = (0..8).map(|s| Sample::from_seed(&cfg, s)).collect();
        let traces = capture_traces(&model, &calib)
            .unwrap()
            .activations
            .into_iter()
            .map(|b| b.trace)
            .collect();
        Fixture { model, traces }
    })
}

fn bank_for(toggles: PipelineToggles) -> TimeParamBank {
    let f = fixture();
    let settings = toggles.calibration_settings(f.model.config());
    calibrate_bank(&f.traces, &f.model.linear_weights(), &settings).unwrap()
}

fn eval_samples(n: u64) -> Vec<Sample> {
    let cfg = fixture().model.config();
    (0..n).map(|i| Sample::from_seed(cfg, 500 + i)).collect()
}

fn sqnr(model: &ToyDiT, mode: LayerMode, bank: Option<&TimeParamBank>, s: &Sample) -> f64 {
    let r = denoise(model, LayerMode::Reference, None, None, s).unwrap();
    let q = denoise(model, mode, bank, None, s).unwrap();
    evaluate(&r, &q).unwrap().sqnr_db.unwrap_or(f64::INFINITY)
}

#[test]
fn reference_sampling_is_bit_identical() {
    let f = fixture();
    let s = Sample::from_seed(f.model.config(), 42);
    let a = denoise(&f.model, LayerMode::Reference, None, None, &s).unwrap();
    let b = denoise(&f.model, LayerMode::Reference, None, None, &s).unwrap();
    let bits = |t: &Tensor2D| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    let other = denoise(
        &f.model,
        LayerMode::Reference,
        None,
        None,
        &Sample::from_seed(f.model.config(), 43),
    )
    .unwrap();
    assert_ne!(a, other);
}

#[test]
fn high_precision_limit_matches_reference() {
    let f = fixture();
    let s = Sample::from_seed(f.model.config(), 3);
    let reference = denoise(&f.model, LayerMode::Reference, None, None, &s).unwrap();
    let plain = QuantSettings::precision_limit(32, PipelineToggles::PLAIN).unwrap();
    let out = denoise(&f.model, LayerMode::FakeQuant(plain), None, None, &s).unwrap();
    assert!(reference.sub(&out).unwrap().abs_max() < 1e-6);

    let bank = bank_for(PipelineToggles::FULL);
    let full = QuantSettings::precision_limit(32, PipelineToggles::FULL).unwrap();
    let out = denoise(&f.model, LayerMode::FakeQuant(full), Some(&bank), None, &s).unwrap();
    assert!(reference.sub(&out).unwrap().abs_max() < 1e-6);
}

#[test]
fn balancing_without_quantization_preserves_the_latent() {
    let f = fixture();
    let s = Sample::from_seed(f.model.config(), 9);
    let reference = denoise(&f.model, LayerMode::Reference, None, None, &s).unwrap();
    for bits in 1u8..16 {
        let balancing = BalancingToggles {
            smooth: bits & 1 != 0,
            r1: bits & 2 != 0,
            permute: bits & 4 != 0,
            r2: bits & 8 != 0,
        };
        for time_rotation in [false, true] {
            let toggles = PipelineToggles {
                balancing,
                time_rotation,
            };
            let bank = bank_for(toggles);
            let out = denoise(
                &f.model,
                LayerMode::Balanced(toggles),
                Some(&bank),
                None,
                &s,
            )
            .unwrap();
            let diff = reference.sub(&out).unwrap().abs_max();
            assert!(diff < 1e-7, "{toggles:?}: latent moved by {diff:e}");
        }
    }
}

#[test]
fn full_pipeline_beats_smoothing_only_at_w8a8() {
    let f = fixture();
    let full = bank_for(PipelineToggles::FULL);
    let smooth_toggles = PipelineToggles {
        balancing: BalancingToggles::SMOOTH_ONLY,
        time_rotation: false,
    };
    let smooth = bank_for(smooth_toggles);
    let q_full = LayerMode::FakeQuant(QuantSettings::new(8, 8, PipelineToggles::FULL).unwrap());
    let q_smooth = LayerMode::FakeQuant(QuantSettings::new(8, 8, smooth_toggles).unwrap());
    let samples = eval_samples(8);
    let a: Vec<f64> = samples
        .iter()
        .map(|s| sqnr(&f.model, q_full, Some(&full), s))
        .collect();
    let b: Vec<f64> = samples
        .iter()
        .map(|s| sqnr(&f.model, q_smooth, Some(&smooth), s))
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&a) >= mean(&b), "full {a:?} vs smoothing-only {b:?}");
}

#[test]
fn eight_bit_weights_beat_four_bit_weights() {
    let f = fixture();
    let bank = bank_for(PipelineToggles::FULL);
    let samples = eval_samples(10);
    for toggles in [PipelineToggles::PLAIN, PipelineToggles::FULL] {
        let b = toggles.needs_bank().then_some(&bank);
        let w8 = LayerMode::FakeQuant(QuantSettings::new(8, 8, toggles).unwrap());
        let w4 = LayerMode::FakeQuant(QuantSettings::new(4, 8, toggles).unwrap());
        let wins = samples
            .iter()
            .filter(|s| sqnr(&f.model, w8, b, s) >= sqnr(&f.model, w4, b, s))
            .count();
        assert!(wins * 10 >= 9 * samples.len(), "{toggles:?}: {wins}/10");
    }
}

#[test]
fn capture_produces_paired_records() {
    let f = fixture();
    let cfg = *f.model.config();
    let cap = capture_traces(&f.model, &[Sample::from_seed(&cfg, 1)]).unwrap();
    for block in 0..cfg.blocks as u32 {
        for branch in [Branch::Conditional, Branch::Unconditional] {
            let n = cap
                .attention
                .iter()
                .filter(|r| r.block_id == block && r.branch == branch)
                .count();
            assert_eq!(n, 20);
        }
    }
    for r in &cap.attention {
        assert_eq!(r.attn.shape(), (cfg.heads * cfg.tokens, cfg.tokens));
    }
    for layer in cfg.layer_ids() {
        let (cin, _) = cfg.layer_shape(layer);
        let traces: Vec<_> = cap
            .activations
            .iter()
            .filter(|b| b.trace.layer_id == layer)
            .collect();
        assert_eq!(traces.len(), 2 * cfg.steps);
        assert!(traces
            .iter()
            .all(|b| b.trace.activations.shape() == (cfg.tokens, cin)));
    }
}

#[test]
fn sharing_skips_blocks_times_steps() {
    let f = fixture();
    let cfg = *f.model.config();
    let s = Sample::from_seed(&cfg, 2);
    for shared in [vec![], vec![1u32], vec![0, 3], vec![0, 1, 2, 3]] {
        let plan = SharingPlan::all(shared.iter().copied());
        let run = Denoiser::new(&f.model, LayerMode::Reference, None, Some(&plan))
            .unwrap()
            .run(&s)
            .unwrap();
        assert_eq!(run.stats.attention_skipped, shared.len() * cfg.steps);
        assert_eq!(
            run.stats.attention_computed + run.stats.attention_skipped,
            2 * cfg.blocks * cfg.steps
        );
    }
}

#[test]
fn sharing_with_tied_identical_branches_is_exact() {
    let f = fixture();
    let cfg = *f.model.config();
    let s = Sample::from_seed(&cfg, 5).with_identical_branches();
    let plan = SharingPlan::all(0..cfg.blocks as u32);
    let off = denoise(&f.model, LayerMode::Reference, None, None, &s).unwrap();
    let on = denoise(&f.model, LayerMode::Reference, None, Some(&plan), &s).unwrap();
    assert!(off.sub(&on).unwrap().abs_max() < 1e-9);
}

#[test]
fn denoiser_configuration_errors() {
    let f = fixture();
    let full = QuantSettings::new(8, 8, PipelineToggles::FULL).unwrap();
    assert!(matches!(
        Denoiser::new(&f.model, LayerMode::FakeQuant(full), None, None),
        Err(TrdqError::Coverage { .. })
    ));

    let single = bank_for(PipelineToggles {
        time_rotation: false,
        ..PipelineToggles::FULL
    });
    let no_tr = QuantSettings::new(
        8,
        8,
        PipelineToggles {
            time_rotation: false,
            ..PipelineToggles::FULL
        },
    )
    .unwrap();
    assert!(Denoiser::new(&f.model, LayerMode::FakeQuant(no_tr), Some(&single), None).is_ok());
    let per_step = bank_for(PipelineToggles::FULL);
    assert!(matches!(
        Denoiser::new(&f.model, LayerMode::FakeQuant(no_tr), Some(&per_step), None),
        Err(TrdqError::ConfigMismatch(_))
    ));
    let smooth = QuantSettings::new(
        8,
        8,
        PipelineToggles {
            balancing: BalancingToggles::SMOOTH_ONLY,
            time_rotation: true,
        },
    )
    .unwrap();
    assert!(matches!(
        Denoiser::new(
            &f.model,
            LayerMode::FakeQuant(smooth),
            Some(&per_step),
            None
        ),
        Err(TrdqError::ConfigMismatch(_))
    ));

    let short = ToyDiT::new(ToyDiTConfig {
        steps: 10,
        ..ToyDiTConfig::default()
    })
    .unwrap();
    assert!(matches!(
        Denoiser::new(&short, LayerMode::FakeQuant(full), Some(&per_step), None),
        Err(TrdqError::ConfigMismatch(_))
    ));

    let partial: Vec<TimestepTrace> = fixture()
        .traces
        .iter()
        .filter(|t| t.layer_id < 24)
        .cloned()
        .collect();
    let mut weights = f.model.linear_weights();
    weights.remove(&24);
    let settings = PipelineToggles::FULL.calibration_settings(f.model.config());
    let missing_head = calibrate_bank(&partial, &weights, &settings).unwrap();
    match Denoiser::new(
        &f.model,
        LayerMode::FakeQuant(full),
        Some(&missing_head),
        None,
    ) {
        Err(TrdqError::Coverage { missing }) => {
            assert_eq!(missing.len(), 20);
            assert!(missing[0].contains("layer 24"));
        }
        other => panic!("expected coverage error, got {:?}", other.err()),
    }

    let untied = ToyDiT::new(ToyDiTConfig {
        tie_branches: false,
        ..ToyDiTConfig::default()
    })
    .unwrap();
    let plain = QuantSettings::new(8, 8, PipelineToggles::PLAIN).unwrap();
    assert!(matches!(
        Denoiser::new(&untied, LayerMode::FakeQuant(plain), None, None),
        Err(TrdqError::ConfigMismatch(_))
    ));
    assert!(QuantSettings::new(8, 7, PipelineToggles::PLAIN).is_err());
}

#[test]
fn bucketed_time_rotation_is_accepted() {
    let f = fixture();
    let mut settings = PipelineToggles::FULL.calibration_settings(f.model.config());
    settings.grouping = Grouping::Buckets(4);
    let bank = calibrate_bank(&f.traces, &f.model.linear_weights(), &settings).unwrap();
    assert_eq!(bank.entries().len(), 25 * 4);
    let q = LayerMode::FakeQuant(QuantSettings::new(8, 8, PipelineToggles::FULL).unwrap());
    let s = Sample::from_seed(f.model.config(), 1);
    assert!(sqnr(&f.model, q, Some(&bank), &s) > 20.0);
}
