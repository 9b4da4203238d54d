//! W4A8 ablation ladder on the toy model: each row adds factors to the
//! balancing transform, the last one switches to per-timestep parameters.
//!
//! `cargo run --release --example toy_dit_ablation [eval-seeds] [model-seed]`

use trdq::cli::{evaluate_configuration, EVAL_SEED_BASE};
use trdq::timebank::{calibrate_bank, TimestepTrace};
use trdq::toydit::{capture_traces, PipelineToggles, QuantSettings, Sample, ToyDiT, ToyDiTConfig};
use trdq::BalancingToggles;

fn main() -> trdq::Result<()> {
    let (wbits, abits) = (4, 8);
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(8);
    let model_seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let model = ToyDiT::new(ToyDiTConfig {
        seed: model_seed,
        ..ToyDiTConfig::default()
    })?;
    let cfg = *model.config();

    let calib: Vec<Sample> = (0..8).map(|s| Sample::from_seed(&cfg, s)).collect();
    let capture = capture_traces(&model, &calib)?;
    let traces: Vec<TimestepTrace> = capture.activations.into_iter().map(|b| b.trace).collect();
    let weights = model.linear_weights();
    let eval: Vec<Sample> = (0..seeds)
        .map(|i| Sample::from_seed(&cfg, EVAL_SEED_BASE + i))
        .collect();

    let smooth_r1 = BalancingToggles {
        smooth: true,
        r1: true,
        permute: false,
        r2: false,
    };
    let rows = [
        ("no balancing", PipelineToggles::PLAIN),
        (
            "smooth",
            PipelineToggles {
                balancing: BalancingToggles::SMOOTH_ONLY,
                time_rotation: false,
            },
        ),
        (
            "smooth+r1",
            PipelineToggles {
                balancing: smooth_r1,
                time_rotation: false,
            },
        ),
        (
            "smooth+r1+p+r2",
            PipelineToggles {
                balancing: BalancingToggles::ALL,
                time_rotation: false,
            },
        ),
        ("full (per-step)", PipelineToggles::FULL),
    ];
    println!(
        "{:<18} {:>12} {:>12}",
        "configuration", "sqnr (dB)", "cosine"
    );
    for (name, toggles) in rows {
        let bank = if toggles.needs_bank() {
            Some(calibrate_bank(
                &traces,
                &weights,
                &toggles.calibration_settings(&cfg),
            )?)
        } else {
            None
        };
        let q = QuantSettings::new(wbits, abits, toggles)?;
        let m = evaluate_configuration(&model, name, q, bank.as_ref(), None, &eval, None)?;
        println!(
            "{:<18} {:>12.3} {:>12.6}",
            name,
            m.mean_sqnr_db.unwrap_or(f64::INFINITY),
            m.mean_cosine
        );
    }
    Ok(())
}
