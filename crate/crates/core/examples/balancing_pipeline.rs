//! Smoothing, block rotation, zigzag permutation and a second rotation on a
//! layer with planted outlier channels, as factors are switched on.

use trdq::rng::seeded;
use trdq::{
    assemble_balancing_with, fake_quantize, BalancingToggles, Granularity, QuantConfig,
    QuantMetrics, RotationBuildConfig, Tensor2D,
};

fn main() -> trdq::Result<()> {
    let mut rng = seeded(21);
    let mut x = Tensor2D::randn(64, 64, 1.0, &mut rng);
    for c in [3usize, 5, 9] {
        for t in 0..64 {
            x.set(t, c, 20.0 * x.get(t, c));
        }
    }
    let w = Tensor2D::randn(64, 32, 0.125, &mut rng);
    let y = x.matmul(&w)?;
    let cfg = RotationBuildConfig::default();
    let act = QuantConfig::dynamic_per_token(4)?;
    let wq = QuantConfig::new(8, Granularity::PerChannel)?;

    let steps = [
        ("none", BalancingToggles::NONE),
        ("smooth", BalancingToggles::SMOOTH_ONLY),
        (
            "smooth+r1",
            BalancingToggles {
                smooth: true,
                r1: true,
                permute: false,
                r2: false,
            },
        ),
        ("smooth+r1+p+r2", BalancingToggles::ALL),
    ];
    println!("{:<16} {:>10} {:>14}", "factors", "act max", "W8A4 sqnr dB");
    for (name, toggles) in steps {
        let bp = assemble_balancing_with(&x, &w, 0.5, &cfg, toggles)?;
        let gx = bp.transform_activations(&x)?;
        let hw = bp.transform_weights(&w)?;
        let yq = fake_quantize(&gx, act)?.matmul(&fake_quantize(&hw, wq)?)?;
        let m = QuantMetrics::between(&y, &yq)?;
        println!("{name:<16} {:>10.3} {:>14.2}", gx.abs_max(), m.sqnr_db);
    }
    Ok(())
}
