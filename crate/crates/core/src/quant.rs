//! Uniform affine quantization.
//!
//! A group of values with range `[min, max]` is mapped to integers in
//! `[0, 2^b - 1]` with
//!
//! ```text
//! s     = (max - min) / (2^b - 1)
//! z     = round(-min / s)
//! x_int = clamp(round(x / s) + z, 0, 2^b - 1)
//! x_hat = (x_int - z) * s
//! ```
//!
//! `round` is half-away-from-zero. The zero point is the negated minimum so
//! that the group minimum lands on 0 and the maximum on `2^b - 1`.

use crate::error::{Result, TrdqError};
use crate::tensor::Tensor2D;
use serde::{Deserialize, Serialize};

/// Smallest and largest bit-width accepted by [`QuantConfig::new`].
pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;
/// Upper bound for [`QuantConfig::precision_limit`].
pub const MAX_EXTENDED_BITS: u8 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    /// One `(s, z)` pair per row.
    PerToken,
    /// One `(s, z)` pair per column.
    PerChannel,
    /// Contiguous runs of `size` columns within each row.
    PerGroup(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    bits: u8,
    granularity: Granularity,
    dynamic: bool,
}

impl QuantConfig {
    pub fn new(bits: u8, granularity: Granularity) -> Result<Self> {
        if !(MIN_BITS..=MAX_BITS).contains(&bits) {
            return Err(TrdqError::domain(format!(
                "bit-width {bits} outside [{MIN_BITS}, {MAX_BITS}]"
            )));
        }
        Self::checked(bits, granularity)
    }

    /// Like [`QuantConfig::new`] but accepts up to 32 bits. Only meant for
    /// checking that the pipeline converges to full precision.
    pub fn precision_limit(bits: u8, granularity: Granularity) -> Result<Self> {
        if !(MIN_BITS..=MAX_EXTENDED_BITS).contains(&bits) {
            return Err(TrdqError::domain(format!(
                "bit-width {bits} outside [{MIN_BITS}, {MAX_EXTENDED_BITS}]"
            )));
        }
        Self::checked(bits, granularity)
    }

    fn checked(bits: u8, granularity: Granularity) -> Result<Self> {
        if granularity == Granularity::PerGroup(0) {
            return Err(TrdqError::domain("group size must be positive"));
        }
        Ok(Self {
            bits,
            granularity,
            dynamic: false,
        })
    }

    /// Per-token activation quantization with parameters recomputed per call.
    pub fn dynamic_per_token(bits: u8) -> Result<Self> {
        Ok(Self::new(bits, Granularity::PerToken)?.with_dynamic(true))
    }

    /// Per-output-channel weight quantization with calibration-time parameters.
    pub fn static_per_channel(bits: u8) -> Result<Self> {
        Self::new(bits, Granularity::PerChannel)
    }

    pub fn with_dynamic(mut self, dynamic: bool) -> Self {
        self.dynamic = dynamic;
        self
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn dynamic(&self) -> bool {
        self.dynamic
    }

    /// Largest representable integer, `2^b - 1`.
    pub fn qmax(&self) -> i64 {
        (1_i64 << self.bits) - 1
    }

    fn group_count(&self, rows: usize, cols: usize) -> Result<usize> {
        match self.granularity {
            Granularity::PerToken => Ok(rows),
            Granularity::PerChannel => Ok(cols),
            Granularity::PerGroup(size) => {
                if !cols.is_multiple_of(size) {
                    return Err(TrdqError::shape(format!(
                        "group size {size} does not divide {cols} channels"
                    )));
                }
                Ok(rows * (cols / size))
            }
        }
    }

    #[inline]
    fn group_of(&self, cols: usize, i: usize, j: usize) -> usize {
        match self.granularity {
            Granularity::PerToken => i,
            Granularity::PerChannel => j,
            Granularity::PerGroup(size) => i * (cols / size) + j / size,
        }
    }
}

/// Per-group scales and zero points for a fixed tensor shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub config: QuantConfig,
    pub rows: usize,
    pub cols: usize,
    pub scales: Vec<f64>,
    pub zero_points: Vec<i64>,
}

impl QuantParams {
    /// Min/max calibration of `(s, z)` for every group of `x`.
    pub fn calibrate(x: &Tensor2D, config: QuantConfig) -> Result<Self> {
        x.ensure_finite("quantization input")?;
        let (rows, cols) = x.shape();
        let groups = config.group_count(rows, cols)?;
        let mut lo = vec![f64::INFINITY; groups];
        let mut hi = vec![f64::NEG_INFINITY; groups];
        for i in 0..rows {
            for (j, &v) in x.row(i).iter().enumerate() {
                let g = config.group_of(cols, i, j);
                lo[g] = lo[g].min(v);
                hi[g] = hi[g].max(v);
            }
        }
        let qmax = config.qmax() as f64;
        let mut scales = Vec::with_capacity(groups);
        let mut zero_points = Vec::with_capacity(groups);
        for (&min, &max) in lo.iter().zip(&hi) {
            let (s, z) = if !min.is_finite() {
                // empty group: only reachable for zero-sized tensors
                (1.0, 0)
            } else if max > min {
                let s = (max - min) / qmax;
                (s, (-min / s).round() as i64)
            } else if min == 0.0 {
                (1.0, 0)
            } else {
                // constant group: one step of |c| reproduces c exactly
                (min.abs(), if min > 0.0 { 0 } else { 1 })
            };
            scales.push(s);
            zero_points.push(z);
        }
        Ok(Self {
            config,
            rows,
            cols,
            scales,
            zero_points,
        })
    }

    pub fn quantize(&self, x: &Tensor2D) -> Result<QuantizedTensor> {
        x.ensure_finite("quantization input")?;
        if x.shape() != (self.rows, self.cols) {
            return Err(TrdqError::shape(format!(
                "params for {}x{} applied to {:?}",
                self.rows,
                self.cols,
                x.shape()
            )));
        }
        let qmax = self.config.qmax();
        let mut ints = Vec::with_capacity(self.rows * self.cols);
        for i in 0..self.rows {
            for (j, &v) in x.row(i).iter().enumerate() {
                let g = self.config.group_of(self.cols, i, j);
                let q = (v / self.scales[g]).round() as i64 + self.zero_points[g];
                ints.push(q.clamp(0, qmax) as u32);
            }
        }
        Ok(QuantizedTensor {
            ints,
            params: self.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    ints: Vec<u32>,
    params: QuantParams,
}

impl QuantizedTensor {
    pub fn ints(&self) -> &[u32] {
        &self.ints
    }

    pub fn scales(&self) -> &[f64] {
        &self.params.scales
    }

    pub fn zero_points(&self) -> &[i64] {
        &self.params.zero_points
    }

    pub fn config(&self) -> QuantConfig {
        self.params.config
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.params.rows, self.params.cols)
    }

    /// Scale of the group containing element `(i, j)`.
    pub fn scale_at(&self, i: usize, j: usize) -> f64 {
        self.params.scales[self.params.config.group_of(self.params.cols, i, j)]
    }
}

pub fn quantize(x: &Tensor2D, config: QuantConfig) -> Result<QuantizedTensor> {
    QuantParams::calibrate(x, config)?.quantize(x)
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor2D {
    let p = &q.params;
    Tensor2D::from_fn(p.rows, p.cols, |i, j| {
        let g = p.config.group_of(p.cols, i, j);
        (q.ints[i * p.cols + j] as i64 - p.zero_points[g]) as f64 * p.scales[g]
    })
}

pub fn fake_quantize(x: &Tensor2D, config: QuantConfig) -> Result<Tensor2D> {
    Ok(dequantize(&quantize(x, config)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantMetrics {
    pub mse: f64,
    pub max_abs_err: f64,
    /// `10 log10(sum x^2 / sum (x - x_hat)^2)`; infinite when the error is zero.
    pub sqnr_db: f64,
}

impl QuantMetrics {
    pub fn between(reference: &Tensor2D, approx: &Tensor2D) -> Result<Self> {
        if reference.shape() != approx.shape() {
            return Err(TrdqError::shape("metric inputs differ in shape"));
        }
        let mut signal = 0.0;
        let mut noise = 0.0;
        let mut max_abs_err = 0.0_f64;
        for (&r, &a) in reference.data().iter().zip(approx.data()) {
            let e = r - a;
            signal += r * r;
            noise += e * e;
            max_abs_err = max_abs_err.max(e.abs());
        }
        let n = reference.data().len().max(1) as f64;
        Ok(Self {
            mse: noise / n,
            max_abs_err,
            sqnr_db: sqnr_db(signal, noise),
        })
    }
}

pub(crate) fn sqnr_db(signal: f64, noise: f64) -> f64 {
    if noise == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (signal / noise).log10()
    }
}

pub fn quant_error(x: &Tensor2D, config: QuantConfig) -> Result<QuantMetrics> {
    QuantMetrics::between(x, &fake_quantize(x, config)?)
}
