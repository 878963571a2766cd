//! Discrete value grids, the threshold quantizer and the straight-through
//! baseline.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Activation bitwidths understood by [`act_quantize`]. 32 means pass-through.
pub const ACT_BITS: [u32; 5] = [1, 2, 4, 8, 32];

/// Sorted value set `V` (`m = 2^q` entries) with thresholds `T` between them.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantGrid {
    bits: u32,
    values: Vec<f64>,
    thresholds: Vec<f64>,
}

impl QuantGrid {
    /// `2^q` equally spaced values spanning `[-1, 1]`, thresholds at midpoints.
    pub fn uniform(bits: u32) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(Error::InvalidArgument(format!("weight bitwidth must be in 1..=8, got {bits}")));
        }
        let m = 1usize << bits;
        let values = (0..m).map(|i| -1.0 + 2.0 * i as f64 / (m - 1) as f64).collect();
        Self::from_values(bits, values)
    }

    /// Builds a grid from explicit values; thresholds are the midpoints.
    pub fn from_values(bits: u32, values: Vec<f64>) -> Result<Self> {
        if !(1..=8).contains(&bits) || values.len() != 1usize << bits {
            return Err(Error::InvalidArgument(format!(
                "a {bits}-bit grid needs {} values, got {}",
                1usize.checked_shl(bits).unwrap_or(0),
                values.len()
            )));
        }
        if values.windows(2).any(|w| !(w[0] < w[1])) || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("grid values must be finite and strictly increasing".into()));
        }
        let thresholds = values.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        Ok(QuantGrid { bits, values, thresholds })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// Number of grid values `m`.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    /// Index of the interval containing `x`; a value equal to a threshold
    /// belongs to the upper interval.
    pub fn index_of(&self, x: f64) -> usize {
        self.thresholds.partition_point(|&t| t <= x)
    }

    pub fn quantize_value(&self, x: f64) -> f64 {
        self.values[self.index_of(x)]
    }

    pub fn quantize(&self, x: &Tensor) -> Tensor {
        x.map(|v| self.quantize_value(v))
    }
}

/// Straight-through gradient for the latent weights: pass `grad` where
/// `|latent| <= 1`, zero elsewhere.
pub fn ste_backward(grad: &Tensor, latent: &Tensor) -> Result<Tensor> {
    latent.zip_map(grad, |w, g| if w.abs() <= 1.0 { g } else { 0.0 })
}

fn check_act_bits(bits: u32) -> Result<()> {
    if ACT_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("activation bitwidth must be one of {ACT_BITS:?}, got {bits}")))
    }
}

/// `round(clip(a, 0, 1) * (2^q - 1)) / (2^q - 1)`, rounding half away from zero.
pub fn act_quantize_value(a: f64, bits: u32) -> f64 {
    if bits >= 32 {
        return a;
    }
    let levels = ((1u64 << bits) - 1) as f64;
    (a.clamp(0.0, 1.0) * levels).round() / levels
}

pub fn act_quantize(a: &Tensor, bits: u32) -> Result<Tensor> {
    check_act_bits(bits)?;
    Ok(a.map(|x| act_quantize_value(x, bits)))
}

/// Latent weights trained through the straight-through estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct SteWeight {
    pub grid: QuantGrid,
    pub latent: Tensor,
}

impl SteWeight {
    /// The quantized weights `Q(latent)`; the only view used by forward passes.
    pub fn quantized(&self) -> Tensor {
        self.grid.quantize(&self.latent)
    }

    /// Clamps latents into `[-1, 1]` after an update.
    pub fn clamp_latent(&mut self) {
        clamp_unit(&mut self.latent);
    }
}

pub(crate) fn clamp_unit(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|w| *w = w.clamp(-1.0, 1.0));
}
