//! State batch normalization.
//!
//! One affine pair `(gamma, beta)` serves two sets of running statistics:
//! the continuous track, estimated from outputs of the expectation weights
//! `W_c`, and the discrete track, estimated from outputs of the argmax weights
//! `W_q`. Inference with discrete weights normalizes with the discrete track.

use std::fmt;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{Binder, Param, ParamKind};
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

/// Which weights produced the activations being normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Track {
    Continuous,
    Discrete,
}

impl fmt::Display for Track {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Track::Continuous => "continuous",
            Track::Discrete => "discrete",
        })
    }
}

/// Exponential moving averages of per-channel mean and (unbiased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub initialized: bool,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels], initialized: false }
    }

    /// `new = (1 - momentum) * old + momentum * batch`.
    pub fn update(&mut self, momentum: f64, batch_mean: &[f64], batch_var_biased: &[f64], count: usize) {
        let correction = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        for (m, &b) in self.mean.iter_mut().zip(batch_mean) {
            *m = (1.0 - momentum) * *m + momentum * b;
        }
        for (v, &b) in self.var.iter_mut().zip(batch_var_biased) {
            *v = (1.0 - momentum) * *v + momentum * b * correction;
        }
        self.initialized = true;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SbnLayer {
    pub name: String,
    pub gamma: Param,
    pub beta: Param,
    pub momentum: f64,
    pub eps: f64,
    pub continuous: RunningStats,
    pub discrete: RunningStats,
}

impl SbnLayer {
    /// `gamma = 1, beta = 0`; the parameter ids are `first_id` and `first_id + 1`.
    pub fn new(name: impl Into<String>, channels: usize, first_id: usize) -> Self {
        let name = name.into();
        SbnLayer {
            gamma: Param::new(first_id, format!("{name}.gamma"), ParamKind::Full, Tensor::ones(vec![channels])),
            beta: Param::new(first_id + 1, format!("{name}.beta"), ParamKind::Full, Tensor::zeros(vec![channels])),
            name,
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
            continuous: RunningStats::new(channels),
            discrete: RunningStats::new(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn stats(&self, track: Track) -> &RunningStats {
        match track {
            Track::Continuous => &self.continuous,
            Track::Discrete => &self.discrete,
        }
    }

    pub fn stats_mut(&mut self, track: Track) -> &mut RunningStats {
        match track {
            Track::Continuous => &mut self.continuous,
            Track::Discrete => &mut self.discrete,
        }
    }

    fn check_channels(&self, g: &Graph, x: Var) -> Result<()> {
        let shape = g.shape(x);
        if shape.len() < 2 || shape[1] != self.channels() {
            return Err(Error::shape(
                "sbn",
                format!("layer {} expects {} channels, input is {shape:?}", self.name, self.channels()),
            ));
        }
        Ok(())
    }

    /// Normalizes `x` with the statistics of `track`.
    ///
    /// In training mode the batch statistics are used and folded into the
    /// track's running averages. A discrete-track training pass only gathers
    /// statistics: it is recorded on detached leaves, so no gradient flows
    /// from it into the input or the shared affine pair.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        binder: &mut Binder,
        x: Var,
        track: Track,
        training: bool,
    ) -> Result<Var> {
        self.check_channels(g, x)?;
        let (x, gamma, beta) = if training && track == Track::Discrete {
            let gamma = g.constant(self.gamma.value.clone());
            let beta = g.constant(self.beta.value.clone());
            (g.detach(x), gamma, beta)
        } else {
            (x, binder.bind(g, &self.gamma), binder.bind(g, &self.beta))
        };
        if training {
            let (y, stats) = g.batch_norm(x, gamma, beta, None, self.eps)?;
            let stats = stats.expect("batch statistics");
            let momentum = self.momentum;
            self.stats_mut(track).update(momentum, &stats.mean, &stats.var, stats.count);
            Ok(y)
        } else {
            let s = self.stats(track);
            if !s.initialized {
                return Err(Error::StatsUninitialized { layer: self.name.clone(), track: track_name(track) });
            }
            let (y, _) = g.batch_norm(x, gamma, beta, Some((&s.mean, &s.var)), self.eps)?;
            Ok(y)
        }
    }

    pub fn forward_continuous(&mut self, g: &mut Graph, binder: &mut Binder, y_c: Var, training: bool) -> Result<Var> {
        self.forward(g, binder, y_c, Track::Continuous, training)
    }

    pub fn forward_discrete(&mut self, g: &mut Graph, binder: &mut Binder, y_q: Var, training: bool) -> Result<Var> {
        self.forward(g, binder, y_q, Track::Discrete, training)
    }

    /// Inference-time normalizer bound to one statistics track and the shared affine pair.
    pub fn eval_normalizer(&self, track: Track) -> Result<Normalizer> {
        let s = self.stats(track);
        if !s.initialized {
            return Err(Error::StatsUninitialized { layer: self.name.clone(), track: track_name(track) });
        }
        Ok(Normalizer {
            mean: s.mean.clone(),
            var: s.var.clone(),
            gamma: self.gamma.value.data().to_vec(),
            beta: self.beta.value.data().to_vec(),
            eps: self.eps,
        })
    }
}

fn track_name(track: Track) -> &'static str {
    match track {
        Track::Continuous => "continuous",
        Track::Discrete => "discrete",
    }
}

/// `z = gamma * (y - mean) / sqrt(var + eps) + beta` per channel (axis 1).
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl Normalizer {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, y: &Tensor) -> Result<Tensor> {
        let shape = y.shape();
        let c = self.channels();
        if shape.len() < 2 || shape[1] != c {
            return Err(Error::shape("normalizer", format!("{c} channels vs input {shape:?}")));
        }
        let inner: usize = shape[2..].iter().product();
        let inv_std: Vec<f64> = self.var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut out = y.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / inner) % c;
            *v = self.gamma[ch] * ((*v - self.mean[ch]) * inv_std[ch]) + self.beta[ch];
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(layer: &mut SbnLayer, x: &Tensor, track: Track, training: bool) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::trainable();
        let xv = g.constant(x.clone());
        let y = layer.forward(&mut g, &mut b, xv, track, training)?;
        Ok(g.value(y).clone())
    }

    fn channel_moments(y: &Tensor) -> Vec<(f64, f64)> {
        let s = y.shape();
        let (c, inner) = (s[1], s[2] * s[3]);
        (0..c)
            .map(|ch| {
                let vals: Vec<f64> = (0..s[0])
                    .flat_map(|b| y.data()[(b * c + ch) * inner..(b * c + ch + 1) * inner].iter().copied())
                    .collect();
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                (mean, var)
            })
            .collect()
    }

    #[test]
    fn constant_input_maps_to_zero() {
        let mut layer = SbnLayer::new("bn", 3, 0);
        let y = run(&mut layer, &Tensor::full(vec![4, 3, 2, 2], 2.5), Track::Continuous, true).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn training_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(vec![16, 4, 5, 5], 3.0, &mut rng).map(|v| v + 1.5);
        for track in [Track::Continuous, Track::Discrete] {
            let mut layer = SbnLayer::new("bn", 4, 0);
            let y = run(&mut layer, &x, track, true).unwrap();
            for (m, v) in channel_moments(&y) {
                assert!(m.abs() < 1e-6, "mean {m}");
                assert!((v - 1.0).abs() < 1e-4, "var {v}");
            }
        }
    }

    #[test]
    fn running_average_follows_ema() {
        let mut layer = SbnLayer::new("bn", 1, 0);
        let batches = [[1.0, 3.0], [0.0, 4.0], [-2.0, 2.0]];
        let (mut m, mut v) = (0.0f64, 1.0f64);
        for b in batches {
            let x = Tensor::new(vec![2, 1, 1, 1], b.to_vec()).unwrap();
            run(&mut layer, &x, Track::Continuous, true).unwrap();
            let bm = (b[0] + b[1]) / 2.0;
            let unbiased = ((b[0] - bm).powi(2) + (b[1] - bm).powi(2)) / 1.0;
            m = 0.9 * m + 0.1 * bm;
            v = 0.9 * v + 0.1 * unbiased;
            assert!((layer.continuous.mean[0] - m).abs() < 1e-15);
            assert!((layer.continuous.var[0] - v).abs() < 1e-15);
        }
        // hand-computed: means 2, 2, 0 and unbiased variances 2, 8, 8
        assert!((layer.continuous.mean[0] - 0.342).abs() < 1e-12);
        assert!((layer.continuous.var[0] - (0.729 + 0.162 + 0.72 + 0.8)).abs() < 1e-12);
        assert!(!layer.discrete.initialized);
    }

    #[test]
    fn eval_never_mutates_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(vec![8, 2, 3, 3], 1.0, &mut rng);
        let mut layer = SbnLayer::new("bn", 2, 0);
        run(&mut layer, &x, Track::Continuous, true).unwrap();
        run(&mut layer, &x, Track::Discrete, true).unwrap();
        let before = layer.clone();
        run(&mut layer, &x.map(|v| v * 5.0), Track::Continuous, false).unwrap();
        run(&mut layer, &x.map(|v| v - 2.0), Track::Discrete, false).unwrap();
        assert_eq!(before, layer);
    }

    #[test]
    fn discrete_track_requires_an_update() {
        let layer = SbnLayer::new("bn", 2, 0);
        assert!(matches!(layer.eval_normalizer(Track::Discrete), Err(Error::StatsUninitialized { .. })));
        let mut layer = layer;
        let x = Tensor::full(vec![2, 2, 1, 1], 1.0);
        assert!(run(&mut layer, &x, Track::Discrete, false).is_err());
        run(&mut layer, &x, Track::Discrete, true).unwrap();
        assert!(layer.eval_normalizer(Track::Discrete).is_ok());
        assert!(layer.eval_normalizer(Track::Continuous).is_err());
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut layer = SbnLayer::new("bn", 3, 0);
        let err = run(&mut layer, &Tensor::zeros(vec![2, 2, 2, 2]), Track::Continuous, true).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn identical_inputs_give_identical_tracks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layer = SbnLayer::new("bn", 3, 0);
        for _ in 0..20 {
            let x = Tensor::randn(vec![4, 3, 2, 2], 1.0, &mut rng);
            run(&mut layer, &x, Track::Continuous, true).unwrap();
            run(&mut layer, &x, Track::Discrete, true).unwrap();
        }
        assert_eq!(layer.continuous, layer.discrete);
    }

    #[test]
    fn tracks_differ_on_shifted_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut layer = SbnLayer::new("bn", 2, 0);
        let xs: Vec<Tensor> = (0..30).map(|_| Tensor::randn(vec![8, 2, 3, 3], 1.0, &mut rng)).collect();
        for x in &xs {
            run(&mut layer, x, Track::Continuous, true).unwrap();
            run(&mut layer, &x.map(|v| v + 0.1), Track::Discrete, true).unwrap();
        }
        let yq = xs[0].map(|v| v + 0.1);
        let with_discrete = layer.eval_normalizer(Track::Discrete).unwrap().apply(&yq).unwrap();
        let with_continuous = layer.eval_normalizer(Track::Continuous).unwrap().apply(&yq).unwrap();
        assert!(with_discrete.max_abs_diff(&with_continuous) > 0.05);
    }

    #[test]
    fn affine_pair_is_shared_between_tracks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(vec![8, 2, 2, 2], 1.0, &mut rng);
        let mut layer = SbnLayer::new("bn", 2, 10);
        run(&mut layer, &x, Track::Continuous, true).unwrap();
        run(&mut layer, &x, Track::Discrete, true).unwrap();
        let (nc, nd) = (layer.eval_normalizer(Track::Continuous).unwrap(), layer.eval_normalizer(Track::Discrete).unwrap());
        assert_eq!(nc.gamma, nd.gamma);
        layer.gamma.value.data_mut()[0] = 3.0;
        layer.beta.value.data_mut()[1] = -1.0;
        let (nc, nd) = (layer.eval_normalizer(Track::Continuous).unwrap(), layer.eval_normalizer(Track::Discrete).unwrap());
        assert_eq!(nc.gamma, vec![3.0, 1.0]);
        assert_eq!(nd.gamma, vec![3.0, 1.0]);
        assert_eq!(nc.beta, nd.beta);
        // both graph paths bind the same parameter ids
        let mut g = Graph::new();
        let mut b = Binder::trainable();
        let xv = g.constant(x.clone());
        layer.forward(&mut g, &mut b, xv, Track::Continuous, false).unwrap();
        layer.forward(&mut g, &mut b, xv, Track::Discrete, false).unwrap();
        assert_eq!(b.bound().count(), 2);
        assert!(b.var(10).is_some() && b.var(11).is_some());
    }

    #[test]
    fn discrete_training_pass_propagates_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut layer = SbnLayer::new("bn", 2, 0);
        let mut g = Graph::new();
        let mut b = Binder::trainable();
        let x = g.param(Tensor::randn(vec![4, 2, 2, 2], 1.0, &mut rng));
        let y = layer.forward_discrete(&mut g, &mut b, x, true).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert!(g.grad(x).is_none());
        assert!(layer.discrete.initialized);
    }

    #[test]
    fn matches_two_pass_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn(vec![6, 3, 4, 4], 2.0, &mut rng);
        let mut layer = SbnLayer::new("bn", 3, 0);
        layer.gamma.value = Tensor::new(vec![3], vec![0.5, 2.0, -1.0]).unwrap();
        layer.beta.value = Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap();
        let y = run(&mut layer, &x, Track::Continuous, true).unwrap();
        // two-pass reference
        let (c, inner) = (3, 16);
        for ch in 0..c {
            let idx: Vec<usize> = (0..6).flat_map(|b| (0..inner).map(move |i| (b * c + ch) * inner + i)).collect();
            let n = idx.len() as f64;
            let mean = idx.iter().map(|&i| x.data()[i]).sum::<f64>() / n;
            let var = idx.iter().map(|&i| (x.data()[i] - mean).powi(2)).sum::<f64>() / n;
            for &i in &idx {
                let r = layer.gamma.value.data()[ch] * (x.data()[i] - mean) / (var + 1e-5).sqrt() + layer.beta.value.data()[ch];
                assert!((y.data()[i] - r).abs() < 1e-10);
            }
        }
    }
}
