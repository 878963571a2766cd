//! Central finite-difference verification of analytic gradients.
//!
//! The error reported for one input tensor is the normwise relative error
//! `max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|)` over the checked
//! coordinates, where `a` is the analytic and `n` the numerical gradient.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::model::{Arch, Network, WeightMode, WeightState, build};
use crate::param::Binder;
use crate::quant::QuantGrid;
use crate::sbn::SbnLayer;
use crate::search::SearchableWeight;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Options {
    pub step: f64,
    /// Check at most this many coordinates per input (all when `None`).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for Options {
    fn default() -> Self {
        Options { step: DEFAULT_STEP, max_coords: None, seed: 0 }
    }
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares `grad` (analytic, possibly supplied by a caller) with central
/// differences of the scalar function `f` around `inputs`.
pub fn compare(
    name: &str,
    inputs: &[Tensor],
    analytic: &[Tensor],
    f: impl Fn(&[Tensor]) -> Result<f64>,
    opts: Options,
) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let mut worst = 0.0f64;
    let mut coords = 0;
    let mut probe = inputs.to_vec();
    for (j, input) in inputs.iter().enumerate() {
        let n = input.len();
        let idx: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut a = Vec::with_capacity(idx.len());
        let mut num = Vec::with_capacity(idx.len());
        for &i in &idx {
            let x0 = input.data()[i];
            probe[j].data_mut()[i] = x0 + opts.step;
            let up = f(&probe)?;
            probe[j].data_mut()[i] = x0 - opts.step;
            let down = f(&probe)?;
            probe[j].data_mut()[i] = x0;
            num.push((up - down) / (2.0 * opts.step));
            a.push(analytic[j].data()[i]);
        }
        coords += idx.len();
        worst = worst.max(rel_error(&a, &num));
    }
    Ok(GradCheck { name: name.to_string(), max_rel_error: worst, coordinates: coords })
}

/// Checks `build` (inputs -> any-shaped output) under a fixed random linear
/// functional of its output, so every output element contributes.
pub fn check_op(
    name: &str,
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    opts: Options,
) -> Result<GradCheck> {
    let probe_weights = |g: &mut Graph, y: Var| -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let r = Tensor::uniform(g.shape(y).to_vec(), -1.0, 1.0, &mut rng);
        let rv = g.constant(r);
        let p = g.mul(y, rv)?;
        Ok(g.sum(p))
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = build(&mut g, &vars)?;
    let loss = probe_weights(&mut g, y)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    compare(
        name,
        inputs,
        &analytic,
        |xs| {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
            let y = build(&mut g, &vars)?;
            let l = probe_weights(&mut g, y)?;
            Ok(g.value(l).item())
        },
        opts,
    )
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Every differentiable tensor operation.
pub fn tensor_ops(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = Options { seed, ..Options::default() };
    let mut out = Vec::new();

    let (a, b) = (rand_t(&mut rng, &[2, 3, 4]), rand_t(&mut rng, &[3, 1]));
    out.push(check_op("add_broadcast", &[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]), opts)?);
    out.push(check_op("sub_broadcast", &[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]), opts)?);
    out.push(check_op("mul_broadcast", &[a.clone(), b], |g, v| g.mul(v[0], v[1]), opts)?);
    out.push(check_op("scale", std::slice::from_ref(&a), |g, v| Ok(g.scale(v[0], -2.5)), opts)?);
    out.push(check_op("sum_axis", std::slice::from_ref(&a), |g, v| g.sum_axis(v[0], 1), opts)?);
    out.push(check_op("softmax_axis1", std::slice::from_ref(&a), |g, v| g.softmax(v[0], 1), opts)?);
    out.push(check_op("softmax_axis2", std::slice::from_ref(&a), |g, v| g.softmax(v[0], 2), opts)?);
    out.push(check_op("relu", std::slice::from_ref(&a), |g, v| Ok(g.relu(v[0])), opts)?);
    out.push(check_op("reshape", &[a], |g, v| g.reshape(v[0], &[6, 4]), opts)?);

    let (m1, m2) = (rand_t(&mut rng, &[4, 5]), rand_t(&mut rng, &[5, 3]));
    out.push(check_op("matmul", &[m1, m2], |g, v| g.matmul(v[0], v[1]), opts)?);

    let (x, w) = (rand_t(&mut rng, &[2, 3, 6, 5]), rand_t(&mut rng, &[4, 3, 3, 3]));
    out.push(check_op("conv2d_s1_p1", &[x.clone(), w.clone()], |g, v| g.conv2d(v[0], v[1], 1, 1), opts)?);
    out.push(check_op("conv2d_s2_p0", &[x.clone(), w], |g, v| g.conv2d(v[0], v[1], 2, 0), opts)?);
    out.push(check_op("max_pool2d", std::slice::from_ref(&x), |g, v| g.max_pool2d(v[0], 2, 2), opts)?);
    out.push(check_op("global_avg_pool", std::slice::from_ref(&x), |g, v| g.global_avg_pool(v[0]), opts)?);
    out.push(check_op("shortcut_pad", std::slice::from_ref(&x), |g, v| g.shortcut_pad(v[0], 2, 5), opts)?);

    let (gamma, beta) = (rand_t(&mut rng, &[3]), rand_t(&mut rng, &[3]));
    out.push(check_op(
        "batch_norm_batch_stats",
        &[x.clone(), gamma.clone(), beta.clone()],
        |g, v| Ok(g.batch_norm(v[0], v[1], v[2], None, 1e-5)?.0),
        opts,
    )?);
    let (mean, var) = (vec![0.1, -0.2, 0.3], vec![0.5, 1.5, 2.0]);
    out.push(check_op(
        "batch_norm_fixed_stats",
        &[x, gamma, beta],
        |g, v| Ok(g.batch_norm(v[0], v[1], v[2], Some((&mean, &var)), 1e-5)?.0),
        opts,
    )?);

    let logits = rand_t(&mut rng, &[4, 5]);
    let labels = [0, 3, 4, 1];
    out.push(check_op("cross_entropy", &[logits], |g, v| g.cross_entropy(v[0], &labels), opts)?);
    Ok(out)
}

/// Logits `A -> P -> W_c -> conv2d -> loss` for several grids and temperatures.
pub fn slb_search(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (bits, tau) in [(1u32, 1.0), (2, 0.5), (4, 2.0)] {
        let grid = QuantGrid::uniform(bits)?;
        let sw = SearchableWeight::init(grid, &[4, 3, 3, 3], &mut rng);
        let x = rand_t(&mut rng, &[2, 3, 5, 5]);
        let name = format!("slb_conv_q{bits}_tau{tau}");
        let opts = Options { seed, ..Options::default() };
        out.push(check_op(
            &name,
            &[sw.logits.clone(), x],
            |g, v| {
                let wc = sw.continuous_weights_var(g, v[0], tau)?;
                g.conv2d(v[1], wc, 1, 1)
            },
            opts,
        )?);
    }
    Ok(out)
}

/// Convolution followed by training-mode and eval-mode SBN on the continuous
/// track, differentiated through the layer's own parameter binding.
pub fn sbn(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = Options { seed, ..Options::default() };
    let grid = QuantGrid::uniform(1)?;
    let sw = SearchableWeight::init(grid, &[3, 2, 3, 3], &mut rng);
    let x = rand_t(&mut rng, &[4, 2, 5, 5]);
    let r = Tensor::uniform(vec![4, 3, 3, 3], -1.0, 1.0, &mut rng);
    let mut template = SbnLayer::new("sbn", 3, 0);
    template.gamma.value = Tensor::uniform(vec![3], 0.5, 1.5, &mut rng);
    template.beta.value = rand_t(&mut rng, &[3]);
    template.continuous.mean = vec![0.05, -0.1, 0.2];
    template.continuous.var = vec![0.8, 1.2, 0.9];
    template.continuous.initialized = true;

    let run = |xs: &[Tensor], training: bool, trainable: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut layer = template.clone();
        layer.gamma.value = xs[2].clone();
        layer.beta.value = xs[3].clone();
        let mut g = Graph::new();
        let mut binder = if trainable { Binder::trainable() } else { Binder::frozen() };
        let (a, xin) = if trainable {
            (g.param(xs[0].clone()), g.param(xs[1].clone()))
        } else {
            (g.constant(xs[0].clone()), g.constant(xs[1].clone()))
        };
        let wc = sw.continuous_weights_var(&mut g, a, 0.7)?;
        let y = g.conv2d(xin, wc, 1, 0)?;
        let z = layer.forward_continuous(&mut g, &mut binder, y, training)?;
        let rv = g.constant(r.clone());
        let p = g.mul(z, rv)?;
        let loss = g.sum(p);
        let value = g.value(loss).item();
        if !trainable {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        let gamma = binder.var(layer.gamma.id).expect("bound");
        let beta = binder.var(layer.beta.id).expect("bound");
        let grads = [a, xin, gamma, beta]
            .iter()
            .zip(xs)
            .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect();
        Ok((value, grads))
    };

    let inputs = [sw.logits.clone(), x, template.gamma.value.clone(), template.beta.value.clone()];
    let mut out = Vec::new();
    for training in [true, false] {
        let name = if training { "sbn_train_continuous" } else { "sbn_eval_continuous" };
        let (_, analytic) = run(&inputs, training, true)?;
        out.push(compare(name, &inputs, &analytic, |xs| Ok(run(xs, training, false)?.0), opts)?);
    }
    Ok(out)
}

/// Full network loss with respect to every parameter (coordinates sampled).
pub fn network_loss(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    tau: f64,
    max_coords: usize,
    seed: u64,
) -> Result<Vec<GradCheck>> {
    let params = net.param_values();
    let loss_of = |values: &[Tensor], trainable: bool| -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut probe = net.clone();
        probe.set_param_values(values)?;
        let mut g = Graph::new();
        let mut binder = if trainable { Binder::trainable() } else { Binder::frozen() };
        let xv = g.constant(x.clone());
        let logits = probe.forward(&mut g, &mut binder, xv, WeightState::Continuous, true, tau)?;
        let loss = g.cross_entropy(logits, labels)?;
        let value = g.value(loss).item();
        if !trainable {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        let grads = probe.param_ids().iter().map(|id| binder.var(*id).and_then(|v| g.grad(v).cloned())).collect();
        Ok((value, grads))
    };
    let (_, grads) = loss_of(&params, true)?;
    let names = net.param_names();
    let mut out = Vec::new();
    for (i, (p, grad)) in params.iter().zip(grads).enumerate() {
        let grad = grad.unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()));
        let opts = Options { step: DEFAULT_STEP, max_coords: Some(max_coords), seed: seed.wrapping_add(i as u64) };
        let c = compare(
            &format!("network:{}", names[i]),
            std::slice::from_ref(p),
            std::slice::from_ref(&grad),
            |xs| {
                let mut values = params.clone();
                values[i] = xs[0].clone();
                Ok(loss_of(&values, false)?.0)
            },
            opts,
        )?;
        out.push(c);
    }
    Ok(out)
}

/// The SLB `mnist_cnn` loss on a random batch of `batch` images.
pub fn mnist_network(seed: u64, batch: usize, max_coords: usize) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = build(Arch::MnistCnn, 1, 32, WeightMode::Slb, seed)?;
    let x = Tensor::randn(vec![batch, 1, 28, 28], 1.0, &mut rng);
    let labels = random_labels(&mut rng, batch, 10);
    network_loss(&net, &x, &labels, 0.5, max_coords, seed)
}

/// A gradient deliberately off by 10%: the check must flag it.
pub fn negative_control(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_t(&mut rng, &[3, 4]);
    let wrong = x.map(|v| 1.1 * v);
    let f = |xs: &[Tensor]| -> Result<f64> { Ok(0.5 * xs[0].data().iter().map(|v| v * v).sum::<f64>()) };
    let c = compare("corrupted_adjoint", &[x], &[wrong], f, Options { seed, ..Options::default() })?;
    Ok(vec![c])
}

pub fn random_labels(rng: &mut impl Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..classes)).collect()
}
