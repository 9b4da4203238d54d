//! Greedy construction of one rotation block: each step swaps the current
//! largest channel to the front and spreads it with an orthogonal matrix
//! whose first row is uniform.

use trdq::rng::seeded;
use trdq::rotation::greedy_rotation_search;
use trdq::{RotationBuildConfig, Tensor2D};

fn main() -> trdq::Result<()> {
    let mut rng = seeded(11);
    let mut x = Tensor2D::randn(24, 16, 1.0, &mut rng);
    for (i, c) in [1usize, 9, 14].iter().enumerate() {
        for t in 0..24 {
            x.set(t, *c, (12.0 + 6.0 * i as f64) * x.get(t, *c));
        }
    }
    let cfg = RotationBuildConfig::new(16, 8, 5, 1e-3)?;
    let g = greedy_rotation_search(&x, &cfg);
    println!(
        "max-abs per chain prefix: {:?}",
        g.max_abs_trace
            .iter()
            .map(|v| format!("{v:.2}"))
            .collect::<Vec<_>>()
    );
    println!(
        "kept {} of {} evaluated rotations",
        g.chain_len, g.steps_evaluated
    );
    let rotated = x.matmul(g.block.matrix())?;
    println!(
        "max-abs {:.2} -> {:.2}; |R R^T - I| = {:.1e}",
        x.abs_max(),
        rotated.abs_max(),
        g.block.orthogonality_error()
    );
    Ok(())
}
