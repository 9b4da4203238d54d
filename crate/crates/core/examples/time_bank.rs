//! A parameter bank with one balancing set per timestep bucket, calibrated
//! from activations whose outlier channel moves over the schedule.

use std::collections::BTreeMap;
use trdq::rng::seeded;
use trdq::timebank::{
    calibrate_bank, dynamic_activation_quant, CalibrationSettings, Grouping, TimestepTrace,
};
use trdq::{dequantize, Tensor2D};

fn main() -> trdq::Result<()> {
    let steps = 20u32;
    let mut rng = seeded(4);
    let traces: Vec<TimestepTrace> = (1..=steps)
        .map(|t| {
            let mut x = Tensor2D::randn(16, 32, 1.0, &mut rng);
            let hot = (t as usize * 3) % 32;
            for i in 0..16 {
                x.set(i, hot, 25.0 * x.get(i, hot));
            }
            TimestepTrace {
                layer_id: 0,
                timestep: t,
                activations: x,
            }
        })
        .collect();
    let weights = BTreeMap::from([(0, Tensor2D::randn(32, 16, 0.2, &mut rng))]);

    for grouping in [
        Grouping::PerStep,
        Grouping::Buckets(4),
        Grouping::Buckets(1),
    ] {
        let settings = CalibrationSettings::new(steps).with_grouping(grouping);
        let bank = calibrate_bank(&traces, &weights, &settings)?;
        let mut worst_max = 0.0_f64;
        for tr in &traces {
            let gx = bank
                .lookup(0, tr.timestep)?
                .transform_activations(&tr.activations)?;
            worst_max = worst_max.max(gx.abs_max());
        }
        println!(
            "{grouping:<10}: {:>2} parameter sets, step 7 -> group {}, worst transformed max-abs {worst_max:.2}",
            bank.group_count(),
            bank.group_of(7)?
        );
    }

    let x = &traces[0].activations;
    let q = dynamic_activation_quant(x, 8)?;
    let err = dequantize(&q).sub(x)?.abs_max();
    println!("dynamic 8-bit per-token quantization of step 1: max error {err:.4}");
    Ok(())
}
