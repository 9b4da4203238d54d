//! Uniform affine quantization of one tensor at every granularity and
//! bit-width, with the reconstruction error it causes.

use trdq::rng::seeded;
use trdq::{dequantize, quant_error, quantize, Granularity, QuantConfig, Tensor2D};

fn main() -> trdq::Result<()> {
    let mut rng = seeded(7);
    let mut x = Tensor2D::randn(16, 64, 1.0, &mut rng);
    for i in 0..16 {
        x.set(i, 5, 25.0 * x.get(i, 5));
    }

    let q = quantize(&x, QuantConfig::new(4, Granularity::PerToken)?)?;
    println!(
        "4-bit per-token: row 0 scale {:.4}, zero point {}, first ints {:?}",
        q.scales()[0],
        q.zero_points()[0],
        &q.ints()[..8]
    );
    let back = dequantize(&q);
    println!("x[0][0] = {:.4} -> {:.4}", x.get(0, 0), back.get(0, 0));

    println!(
        "\n{:<14} {:>5} {:>12} {:>10}",
        "granularity", "bits", "mse", "sqnr dB"
    );
    for g in [
        Granularity::PerToken,
        Granularity::PerChannel,
        Granularity::PerGroup(16),
    ] {
        for bits in [2, 4, 6, 8] {
            let m = quant_error(&x, QuantConfig::new(bits, g)?)?;
            println!(
                "{:<14} {bits:>5} {:>12.3e} {:>10.2}",
                format!("{g:?}"),
                m.mse,
                m.sqnr_db
            );
        }
    }
    Ok(())
}
