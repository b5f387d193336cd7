//! Fixed-point quantization simulated on `f64`.
//!
//! A `B`-bit format with range `R` has step `R * 2^-(B-1)` and `2^B` levels
//! covering `[-R, R)`. Values are truncated toward zero, so the coarser
//! format of an MSB split is always a bit prefix of the finer one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointFormat {
    bits: u32,
    range_max: f64,
}

impl FixedPointFormat {
    pub fn new(bits: u32, range_max: f64) -> Result<Self> {
        if !(1..=52).contains(&bits) {
            return Err(Error::config(format!("fixed-point bits must be in 1..=52, got {bits}")));
        }
        if !(range_max.is_finite() && range_max > 0.0) {
            return Err(Error::config(format!("fixed-point range must be positive, got {range_max}")));
        }
        Ok(Self { bits, range_max })
    }

    /// Unit-range format, `[-1, 1)`.
    pub fn unit(bits: u32) -> Result<Self> {
        Self::new(bits, 1.0)
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn range_max(&self) -> f64 {
        self.range_max
    }

    /// Quantization step `R * 2^-(B-1)`.
    pub fn step(&self) -> f64 {
        self.range_max * 2f64.powi(-(self.bits as i32 - 1))
    }

    pub fn levels(&self) -> u64 {
        1u64 << self.bits
    }

    fn max_level(&self) -> f64 {
        2f64.powi(self.bits as i32 - 1)
    }

    /// Quantizes one value with the given scale; `x` must be finite.
    #[inline]
    pub fn quantize_value(&self, x: f64, scale: f64) -> f64 {
        let unit = self.step() * scale;
        let top = self.max_level();
        let q = (x / unit).trunc().clamp(-top, top - 1.0);
        q * unit
    }
}

/// Quantized values with the format and scale that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub values: Tensor,
    pub format: FixedPointFormat,
    pub scale: f64,
}

fn check_scale(scale: f64) -> Result<()> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::config(format!("quantization scale must be positive, got {scale}")));
    }
    Ok(())
}

/// `v = clip(trunc(x / (step*scale)) * step*scale)` elementwise, clipped to
/// `[-R*scale, (R-step)*scale]`.
pub fn quantize(x: &Tensor, fmt: FixedPointFormat, scale: f64) -> Result<QuantizedTensor> {
    check_scale(scale)?;
    x.ensure_finite("quantize input")?;
    Ok(QuantizedTensor {
        values: x.map(|v| fmt.quantize_value(v, scale)),
        format: fmt,
        scale,
    })
}

/// Splits `x` into its `msb_fmt` prefix and the exact remainder.
pub fn msb_split(
    x: &Tensor,
    full_fmt: FixedPointFormat,
    msb_fmt: FixedPointFormat,
    scale: f64,
) -> Result<(QuantizedTensor, Tensor)> {
    if msb_fmt.bits >= full_fmt.bits {
        return Err(Error::config(format!(
            "MSB format must be narrower than the full format ({} >= {})",
            msb_fmt.bits, full_fmt.bits
        )));
    }
    if msb_fmt.range_max != full_fmt.range_max {
        return Err(Error::config("MSB and full formats must share a range"));
    }
    let msb = quantize(x, msb_fmt, scale)?;
    let residual = x.sub(&msb.values)?;
    Ok((msb, residual))
}

/// Smallest power of two that is `>= max|x|`; `1` for an all-zero tensor.
pub fn dynamic_scale(x: &Tensor) -> f64 {
    pow2_ceil(x.max_abs())
}

pub(crate) fn pow2_ceil(m: f64) -> f64 {
    if m == 0.0 || !m.is_finite() {
        return 1.0;
    }
    let mut s = 2f64.powi(m.log2().ceil() as i32);
    if s < m {
        s *= 2.0;
    }
    while s / 2.0 >= m {
        s /= 2.0;
    }
    s
}

/// Quantizes `x` at `bits` with its own dynamic scale.
pub fn quantize_dynamic(x: &Tensor, bits: u32) -> Result<QuantizedTensor> {
    quantize(x, FixedPointFormat::unit(bits)?, dynamic_scale(x))
}
