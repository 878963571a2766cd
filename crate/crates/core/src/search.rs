//! Searchable low-bit weights.
//!
//! Every weight position carries a logit vector over the `m` grid values
//! (axis 0 of the logit tensor). At temperature `tau` the logits define a
//! categorical distribution `P = softmax(A / tau)`. Training uses the
//! expectation `W_c = sum_i P_i v_i`, which is differentiable in `A`;
//! inference uses the most probable value `W_q`.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::quant::QuantGrid;
use crate::tensor::Tensor;

/// Largest tolerated `|sum_i P_i - 1|` at any weight position.
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// Default freezing threshold on `max_i P_i`.
pub const DEFAULT_FREEZE_THRESHOLD: f64 = 0.999;

static NORMALIZATION_CHECKS: AtomicU64 = AtomicU64::new(0);

/// Number of probability tensors verified against [`NORMALIZATION_TOL`] in
/// this process so far.
pub fn normalization_checks() -> u64 {
    NORMALIZATION_CHECKS.load(Ordering::Relaxed)
}

fn check_normalized(p: &[f64], m: usize) -> Result<()> {
    let n = p.len() / m;
    let mut worst = 0.0f64;
    for pos in 0..n {
        let s: f64 = (0..m).map(|i| p[i * n + pos]).sum();
        worst = worst.max((s - 1.0).abs());
    }
    NORMALIZATION_CHECKS.fetch_add(1, Ordering::Relaxed);
    if worst > NORMALIZATION_TOL || worst.is_nan() {
        return Err(Error::NotNormalized { deviation: worst });
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive and finite, got {tau}")))
    }
}

/// A weight tensor searched over a discrete grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchableWeight {
    pub grid: QuantGrid,
    /// Shape `[m, d_1, .., d_n]`.
    pub logits: Tensor,
}

impl SearchableWeight {
    pub fn new(grid: QuantGrid, logits: Tensor) -> Result<Self> {
        if logits.rank() < 1 || logits.shape()[0] != grid.len() {
            return Err(Error::shape(
                "searchable_weight",
                format!("leading logit axis must equal {} grid values, got {:?}", grid.len(), logits.shape()),
            ));
        }
        Ok(SearchableWeight { grid, logits })
    }

    /// Kaiming-initialized logits for a weight of shape `weight_shape`.
    pub fn init<R: Rng + ?Sized>(grid: QuantGrid, weight_shape: &[usize], rng: &mut R) -> Self {
        let mut shape = vec![grid.len()];
        shape.extend_from_slice(weight_shape);
        let logits = init_logits_with(&shape, &grid, rng).expect("shape built from grid");
        SearchableWeight { grid, logits }
    }

    /// Shape of the weight tensor the logits describe.
    pub fn weight_shape(&self) -> &[usize] {
        &self.logits.shape()[1..]
    }

    pub fn positions(&self) -> usize {
        self.weight_shape().iter().product()
    }

    /// `P = softmax(A / tau)` over the value axis.
    pub fn probabilities(&self, tau: f64) -> Result<Tensor> {
        check_tau(tau)?;
        let m = self.grid.len();
        let n = self.positions();
        let scaled: Vec<f64> = self.logits.data().iter().map(|a| a / tau).collect();
        let p = kernels::softmax(&scaled, 1, m, n);
        check_normalized(&p, m)?;
        Tensor::new(self.logits.shape().to_vec(), p)
    }

    /// Expectation weights `W_c = sum_i P_i v_i`.
    pub fn continuous_weights(&self, tau: f64) -> Result<Tensor> {
        let p = self.probabilities(tau)?;
        Ok(expectation(&p, &self.grid))
    }

    /// Index of the most probable value at every position; ties go to the
    /// lowest index. Independent of the temperature.
    pub fn discrete_indices(&self) -> Vec<usize> {
        let m = self.grid.len();
        let n = self.positions();
        let a = self.logits.data();
        (0..n)
            .map(|pos| {
                let mut best = 0;
                for i in 1..m {
                    if a[i * n + pos] > a[best * n + pos] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// Argmax weights `W_q`.
    pub fn discrete_weights(&self) -> Tensor {
        let v = self.grid.values();
        let data = self.discrete_indices().into_iter().map(|i| v[i]).collect();
        Tensor::new(self.weight_shape().to_vec(), data).expect("weight shape")
    }

    /// `W_gap = W_q - W_c`.
    pub fn quantization_gap(&self, tau: f64) -> Result<Tensor> {
        let wc = self.continuous_weights(tau)?;
        self.discrete_weights().zip_map(&wc, |q, c| q - c)
    }

    /// Records `W_c` on `g` as a function of the logit leaf `logits`.
    pub fn continuous_weights_var(&self, g: &mut Graph, logits: Var, tau: f64) -> Result<Var> {
        check_tau(tau)?;
        let m = self.grid.len();
        let scaled = g.scale(logits, 1.0 / tau);
        let p = g.softmax(scaled, 0)?;
        check_normalized(g.value(p).data(), m)?;
        let mut vshape = vec![1; self.logits.rank()];
        vshape[0] = m;
        let values = g.constant(Tensor::new(vshape, self.grid.values().to_vec())?);
        let weighted = g.mul(p, values)?;
        g.sum_axis(weighted, 0)
    }

    pub fn freeze_report(&self, name: &str, tau: f64, threshold: f64) -> Result<FreezeReport> {
        check_threshold(threshold)?;
        let layer = self.freeze_counts(name, tau, threshold)?;
        Ok(FreezeReport::from_layers(threshold, vec![layer]))
    }

    pub(crate) fn freeze_counts(&self, name: &str, tau: f64, threshold: f64) -> Result<LayerFreeze> {
        let p = self.probabilities(tau)?;
        let m = self.grid.len();
        let n = self.positions();
        let d = p.data();
        let frozen = (0..n)
            .filter(|&pos| (0..m).map(|i| d[i * n + pos]).fold(0.0, f64::max) > threshold)
            .count();
        Ok(LayerFreeze { name: name.to_string(), positions: n, frozen })
    }
}

/// `sum_i P_i v_i` along axis 0.
pub fn expectation(p: &Tensor, grid: &QuantGrid) -> Tensor {
    let m = grid.len();
    let n = p.len() / m;
    let mut out = vec![0.0; n];
    for (i, v) in grid.values().iter().enumerate() {
        for (o, pi) in out.iter_mut().zip(&p.data()[i * n..(i + 1) * n]) {
            *o += pi * v;
        }
    }
    Tensor::new(p.shape()[1..].to_vec(), out).expect("shape")
}

/// Kaiming-normal logits, `std = sqrt(2 / fan_in)` with `fan_in` the product of
/// the weight dims after the output axis.
pub fn init_logits(shape: &[usize], grid: &QuantGrid, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_logits_with(shape, grid, &mut rng)
}

pub fn init_logits_with<R: Rng + ?Sized>(shape: &[usize], grid: &QuantGrid, rng: &mut R) -> Result<Tensor> {
    if shape.first() != Some(&grid.len()) {
        return Err(Error::shape(
            "init_logits",
            format!("leading extent must be {} for a {}-bit grid, got {shape:?}", grid.len(), grid.bits()),
        ));
    }
    let fan_in = kaiming_fan_in(&shape[1..]);
    Ok(Tensor::randn(shape.to_vec(), (2.0 / fan_in as f64).sqrt(), rng))
}

/// Fan-in of a weight shaped `[out, in, k..]` (product of every dim but the first).
pub fn kaiming_fan_in(weight_shape: &[usize]) -> usize {
    weight_shape.iter().skip(1).product::<usize>().max(1)
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.5 && threshold < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("freeze threshold must lie in (0.5, 1), got {threshold}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerFreeze {
    pub name: String,
    pub positions: usize,
    pub frozen: usize,
}

/// Share of weight positions whose maximum probability exceeds a threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct FreezeReport {
    pub threshold: f64,
    pub fraction_frozen: f64,
    pub layers: Vec<LayerFreeze>,
}

impl FreezeReport {
    pub fn from_layers(threshold: f64, layers: Vec<LayerFreeze>) -> Self {
        let total: usize = layers.iter().map(|l| l.positions).sum();
        let frozen: usize = layers.iter().map(|l| l.frozen).sum();
        let fraction_frozen = if total == 0 { 0.0 } else { frozen as f64 / total as f64 };
        FreezeReport { threshold, fraction_frozen, layers }
    }

    pub(crate) fn validate_threshold(threshold: f64) -> Result<()> {
        check_threshold(threshold)
    }
}
