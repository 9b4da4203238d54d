//! Conditional/unconditional attention similarity on the toy model, the
//! blocks it selects for sharing, and the work sharing saves.

use std::time::Instant;
use trdq::attention::{build_similarity_matrix, derive_sharing_plan};
use trdq::toydit::{capture_traces, Denoiser, LayerMode, Sample, ToyDiT, ToyDiTConfig};

fn main() -> trdq::Result<()> {
    for (label, tie, identical) in [
        ("tied, same condition", true, true),
        ("untied branches", false, false),
    ] {
        let model = ToyDiT::new(ToyDiTConfig {
            tie_branches: tie,
            ..ToyDiTConfig::default()
        })?;
        let cfg = *model.config();
        let samples: Vec<Sample> = (0..4)
            .map(|s| {
                let s = Sample::from_seed(&cfg, s);
                if identical {
                    s.with_identical_branches()
                } else {
                    s
                }
            })
            .collect();
        let sim = build_similarity_matrix(&capture_traces(&model, &samples)?.attention)?;
        let plan = derive_sharing_plan(&sim, 0.95);
        println!("{label}:");
        for b in sim.blocks() {
            let row: Vec<String> = sim
                .timesteps()
                .iter()
                .map(|&t| format!("{:.2}", sim.get(b, t).unwrap()))
                .collect();
            println!("  block {b}: {}", row.join(" "));
        }
        println!("  shared blocks at 0.95: {:?}", plan.shared_blocks);

        if tie {
            let off = Denoiser::new(&model, LayerMode::Reference, None, None)?;
            let on = Denoiser::new(&model, LayerMode::Reference, None, Some(&plan))?;
            let t = Instant::now();
            let a = off.run(&samples[0])?;
            let t_off = t.elapsed();
            let t = Instant::now();
            let b = on.run(&samples[0])?;
            let t_on = t.elapsed();
            println!(
                "  attention computations {} -> {}, {:.1?} -> {:.1?}, latent change {:.1e}",
                a.stats.attention_computed,
                b.stats.attention_computed,
                t_off,
                t_on,
                a.latent.sub(&b.latent)?.abs_max()
            );
        }
    }
    Ok(())
}
