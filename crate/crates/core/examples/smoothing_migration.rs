//! Per-channel smoothing moves activation range into the weights while the
//! layer output stays the same.

use trdq::rng::seeded;
use trdq::{apply_smoothing, compute_delta, Scope, Tensor2D};

fn main() -> trdq::Result<()> {
    let mut rng = seeded(3);
    let mut x = Tensor2D::randn(32, 16, 1.0, &mut rng);
    for i in 0..32 {
        x.set(i, 2, 30.0 * x.get(i, 2));
    }
    let w = Tensor2D::randn(16, 8, 0.25, &mut rng);

    for alpha in [0.25, 0.5, 0.75] {
        let delta = compute_delta(&x, &w, alpha)?;
        let (xs, ws) = apply_smoothing(&x, &w, &delta)?;
        let diff = xs.matmul(&ws)?.sub(&x.matmul(&w)?)?.abs_max();
        let col = xs.max_abs(Scope::PerCol)?;
        let spread = col.iter().cloned().fold(0.0, f64::max)
            / col.iter().cloned().fold(f64::INFINITY, f64::min);
        println!(
            "alpha {alpha}: activation max {:.2} -> {:.2}, weight max {:.2} -> {:.2}, channel ratio {spread:.1}, output change {diff:.1e}",
            x.abs_max(),
            xs.abs_max(),
            w.abs_max(),
            ws.abs_max()
        );
    }
    Ok(())
}
